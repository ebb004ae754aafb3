//! Puzzle generators, dataset files and answer checking.

pub mod maze;
pub mod sudoku;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use maze::MazeParams;
pub use sudoku::SudokuParams;

pub const TRAIN_FILE: &str = "train.txt";
pub const TEST_FILE: &str = "test.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    /// `(rows, cols)`.
    pub grid: (usize, usize),
    pub vocab_size: usize,
    pub difficulty: Option<f64>,
}

impl TaskInstance {
    pub fn seq_len(&self) -> usize {
        self.input.len()
    }

    pub fn check(&self) -> Result<()> {
        let n = self.grid.0 * self.grid.1;
        if self.input.len() != n || self.target.len() != n {
            return Err(Error::shape("task_instance", format!("token lists must have {n} entries")));
        }
        if let Some(&t) = self.input.iter().chain(&self.target).find(|&&t| t >= self.vocab_size) {
            return Err(Error::Index {
                what: "token",
                index: t,
                bound: self.vocab_size,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskSpec {
    Sudoku(SudokuParams),
    Maze(MazeParams),
}

impl TaskSpec {
    /// Parses the short task names accepted on the command line.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "sudoku4" => Ok(Self::Sudoku(SudokuParams::default())),
            "sudoku9" => Ok(Self::Sudoku(SudokuParams {
                box_order: 3,
                ..SudokuParams::default()
            })),
            "maze" => Ok(Self::Maze(MazeParams::default())),
            "maze30" => Ok(Self::Maze(MazeParams {
                rows: 30,
                cols: 30,
                ..MazeParams::default()
            })),
            other => Err(Error::Config(format!(
                "unknown task `{other}` (expected sudoku4, sudoku9, maze or maze30)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sudoku(_) => "sudoku",
            Self::Maze(_) => "maze",
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        match self {
            Self::Sudoku(p) => (p.box_order * p.box_order, p.box_order * p.box_order),
            Self::Maze(p) => (p.rows, p.cols),
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Self::Sudoku(_) => sudoku::VOCAB_SIZE,
            Self::Maze(_) => maze::VOCAB_SIZE,
        }
    }

    pub fn vocab(&self) -> BTreeMap<usize, String> {
        let mut v = BTreeMap::new();
        v.insert(0, "pad".to_string());
        match self {
            Self::Sudoku(_) => {
                v.insert(sudoku::BLANK, "blank".into());
                for d in 1..=9u8 {
                    v.insert(sudoku::digit_token(d), d.to_string());
                }
            }
            Self::Maze(_) => {
                for (t, s) in [
                    (maze::WALL, "wall"),
                    (maze::OPEN, "open"),
                    (maze::START, "start"),
                    (maze::GOAL, "goal"),
                    (maze::PATH, "path"),
                ] {
                    v.insert(t, s.into());
                }
            }
        }
        v
    }

    pub fn generate_one<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<TaskInstance> {
        match self {
            Self::Sudoku(p) => sudoku::generate_one(p, rng),
            Self::Maze(p) => maze::generate_one(p, rng),
        }
    }

    /// Identity used for split hygiene: clue pattern or wall layout.
    pub fn dedup_key(&self, inst: &TaskInstance) -> Vec<u8> {
        match self {
            Self::Sudoku(_) => inst.input.iter().map(|&t| t as u8).collect(),
            Self::Maze(_) => maze::layout_of(&inst.input).into_iter().map(u8::from).collect(),
        }
    }

    /// Semantic check: a solved grid or a shortest start-goal path.
    pub fn is_valid(&self, inst: &TaskInstance, prediction: &[usize]) -> bool {
        match self {
            Self::Sudoku(p) => match sudoku::Board::new(p.box_order) {
                Ok(b) => prediction.len() == inst.input.len() && sudoku::is_valid(&b, &inst.input, prediction),
                Err(_) => false,
            },
            Self::Maze(_) => maze::is_valid(inst.grid.0, inst.grid.1, &inst.input, prediction),
        }
    }
}

/// Exact match against the target.
pub fn verify(inst: &TaskInstance, prediction: &[usize]) -> Result<bool> {
    if prediction.len() != inst.target.len() {
        return Err(Error::shape(
            "verify",
            format!("prediction has {} tokens, target {}", prediction.len(), inst.target.len()),
        ));
    }
    Ok(prediction == inst.target.as_slice())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: String,
    pub grid: (usize, usize),
    pub vocab: BTreeMap<usize, String>,
    pub splits: BTreeMap<String, usize>,
    pub seed: u64,
    pub params: TaskSpec,
    /// Mean difficulty per split (path length for mazes, solver nodes for Sudoku).
    #[serde(default)]
    pub mean_difficulty: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
}

fn mean_difficulty(items: &[TaskInstance]) -> f64 {
    let v: Vec<f64> = items.iter().filter_map(|i| i.difficulty).collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Generates disjoint train and test splits. Instance attempt `k` draws from
/// its own stream, so the output depends only on `(spec, sizes, seed)`.
pub fn generate(spec: &TaskSpec, n_train: usize, n_test: usize, seed: u64) -> Result<Dataset> {
    let total = n_train + n_test;
    let budget = 64 * total as u64 + 1024;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(total);
    let mut attempt = 0u64;
    while out.len() < total {
        if attempt >= budget {
            return Err(Error::Generation(format!(
                "only {} distinct instances after {attempt} attempts",
                out.len()
            )));
        }
        let mut r = rng::stream(seed, rng::DATA, attempt);
        attempt += 1;
        let inst = spec.generate_one(&mut r)?;
        if seen.insert(spec.dedup_key(&inst)) {
            out.push(inst);
        }
    }
    let test = out.split_off(n_train);
    let train = out;
    let mut splits = BTreeMap::new();
    splits.insert("train".to_string(), train.len());
    splits.insert("test".to_string(), test.len());
    let mut md = BTreeMap::new();
    md.insert("train".to_string(), mean_difficulty(&train));
    md.insert("test".to_string(), mean_difficulty(&test));
    Ok(Dataset {
        manifest: Manifest {
            task: spec.name().to_string(),
            grid: spec.grid(),
            vocab: spec.vocab(),
            splits,
            seed,
            params: spec.clone(),
            mean_difficulty: md,
        },
        train,
        test,
    })
}

fn join(tokens: &[usize]) -> String {
    tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// `input;target`, each a space-separated list of token ids.
pub fn serialize(inst: &TaskInstance) -> String {
    format!("{};{}", join(&inst.input), join(&inst.target))
}

/// Inverse of [`serialize`]; `line` is 1-based and used in error messages.
pub fn deserialize(text: &str, line: usize, grid: (usize, usize), vocab_size: usize) -> Result<TaskInstance> {
    let err = |msg: String| Error::Parse { line, msg };
    let (a, b) = text
        .split_once(';')
        .ok_or_else(|| err("missing `;` separator".into()))?;
    let parse = |s: &str| -> Result<Vec<usize>> {
        s.split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| err(format!("bad token `{t}`: {e}"))))
            .collect()
    };
    let inst = TaskInstance {
        input: parse(a)?,
        target: parse(b)?,
        grid,
        vocab_size,
        difficulty: None,
    };
    inst.check().map_err(|e| err(e.to_string()))?;
    Ok(inst)
}

impl Dataset {
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, items) in [(TRAIN_FILE, &self.train), (TEST_FILE, &self.test)] {
            let mut s = String::new();
            for inst in items {
                s.push_str(&serialize(inst));
                s.push('\n');
            }
            fs::write(dir.join(name), s)?;
        }
        let manifest = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let vocab = manifest.params.vocab_size();
        let read = |name: &str| -> Result<Vec<TaskInstance>> {
            fs::read_to_string(dir.join(name))?
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| deserialize(l, i + 1, manifest.grid, vocab))
                .collect()
        };
        let train = read(TRAIN_FILE)?;
        let test = read(TEST_FILE)?;
        for (split, items) in [("train", &train), ("test", &test)] {
            let declared = manifest.splits.get(split).copied().unwrap_or(0);
            if declared != items.len() {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("{split} split has {} rows, manifest declares {declared}", items.len()),
                });
            }
        }
        Ok(Self { manifest, train, test })
    }
}
