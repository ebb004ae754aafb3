use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use eqr_core::checkpoint::{self, Checkpoint};
use eqr_core::config::{self, RunConfig};
use eqr_core::diagnostics::{self, ReasonerMap, TrajPoint};
use eqr_core::inference::{self, Row, ScalingBudget, SweepRow};
use eqr_core::model::Reasoner;
use eqr_core::rng;
use eqr_core::tasks::{self, Dataset, TaskInstance, TaskSpec};
use eqr_core::training::{TrainRecord, Trainer};
use eqr_core::Error;

use crate::{Cli, Command, Diagnose, EvalArgs, GenData, ScaleSweep, Split, Train, Weights};

/// Message plus process exit code: 1 usage, 2 data, 3 divergence.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_numerical() {
            3
        } else if matches!(e, Error::Config(_)) {
            1
        } else {
            2
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type Outcome<T = ()> = Result<T, Failure>;

pub fn run(cli: Cli) -> Outcome {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Failure::usage(e.to_string()))?;
    }
    match cli.command {
        Command::GenData(a) => gen_data(a, cli.seed),
        Command::Train(a) => train(a, cli.seed),
        Command::ScaleSweep(a) => scale_sweep(a, cli.seed),
        Command::Diagnose(a) => diagnose(a, cli.seed),
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, raw: &str) -> Outcome<N> {
    raw.parse()
        .map_err(|_| Failure::usage(format!("`{key}` expects a non-negative integer, got `{raw}`")))
}

fn gen_data(a: GenData, mut seed: u64) -> Outcome {
    let spec = TaskSpec::from_name(&a.task)?;
    let mut doc = serde_json::to_value(&spec).map_err(Error::from)?;
    let (mut count, mut test) = (1000usize, 0usize);
    for p in &a.params {
        let (key, raw) = p
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("`{p}` is not key=value")))?;
        match key {
            "count" => count = parse_num(key, raw)?,
            "test" => test = parse_num(key, raw)?,
            "seed" => seed = parse_num(key, raw)?,
            "task" => return Err(Failure::usage("the task is chosen by name, not by parameter")),
            _ => config::apply_override(&mut doc, p)?,
        }
    }
    let spec: TaskSpec = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
    let ds = tasks::generate(&spec, count, test, seed)?;
    ds.write_dir(&a.out)?;
    let text = serde_json::to_string_pretty(&ds.manifest).map_err(Error::from)?;
    // A closed stdout (e.g. piped into `head`) is not a failure.
    let _ = writeln!(std::io::stdout(), "{text}");
    Ok(())
}

fn load_data(dir: &Path) -> Outcome<Dataset> {
    Dataset::read_dir(dir).map_err(|e| Failure {
        code: if matches!(e, Error::Config(_)) { 1 } else { 2 },
        message: format!("cannot load dataset from {}: {e}", dir.display()),
    })
}

fn open_log(path: &Path, append: bool) -> Outcome<BufWriter<File>> {
    let exists = path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)?;
    let mut w = BufWriter::new(file);
    if !(append && exists) {
        writeln!(w, "{}", TrainRecord::CSV_HEADER)?;
    }
    Ok(w)
}

fn resumed_trainer(path: &Path, overrides: &[String]) -> Outcome<Trainer<f32>> {
    let mut trainer = checkpoint::load_trainer::<f32>(path)?;
    if overrides.is_empty() {
        return Ok(trainer);
    }
    let mut doc = serde_json::to_value(&trainer.cfg).map_err(Error::from)?;
    for o in overrides {
        let rest = o
            .strip_prefix("train.")
            .ok_or_else(|| Failure::usage(format!("`{o}`: only train.* settings can change on resume")))?;
        config::apply_override(&mut doc, rest)?;
    }
    trainer.cfg = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
    trainer.cfg.validate()?;
    trainer.cfg.apply_to(trainer.model.config_mut());
    trainer.opt.config = trainer.cfg.optim.clone();
    Ok(trainer)
}

fn train(a: Train, seed: u64) -> Outcome {
    let data = load_data(&a.data)?;
    let mut trainer = match &a.resume {
        Some(path) => resumed_trainer(path, &a.overrides)?,
        None => {
            let mut rc: RunConfig = config::resolve(a.config.as_deref(), &a.overrides)?;
            let (rows, cols) = data.manifest.grid;
            rc.model.seq_len = rows * cols;
            rc.model.vocab_size = data.manifest.params.vocab_size();
            Trainer::new(Reasoner::<f32>::new(rc.model, seed)?, rc.train, seed)?
        }
    };
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let mut log = open_log(&log_path, a.resume.is_some())?;
    let mut last_save = trainer.progress.step;
    while !trainer.done() {
        let good = checkpoint::from_trainer(&trainer);
        match trainer.episode(&data.train) {
            Ok(records) => {
                for r in &records {
                    writeln!(log, "{}", r.csv_row())?;
                }
            }
            Err(e) if e.is_numerical() => {
                log.flush()?;
                good.write(&a.out)?;
                return Err(Failure {
                    code: 3,
                    message: format!("{e}; last good checkpoint (step {}) saved to {}", good.header.progress.step, a.out.display()),
                });
            }
            Err(e) => return Err(e.into()),
        }
        if a.save_every > 0 && trainer.progress.step >= last_save + a.save_every {
            checkpoint::save_trainer(&trainer, &a.out)?;
            last_save = trainer.progress.step;
        }
    }
    log.flush()?;
    checkpoint::save_trainer(&trainer, &a.out)?;
    eprintln!(
        "trained to step {} ({} outer steps); checkpoint {}, log {}",
        trainer.progress.step,
        trainer.progress.nfe,
        a.out.display(),
        log_path.display()
    );
    Ok(())
}

struct EvalSetup {
    ck: Checkpoint,
    data: Vec<TaskInstance>,
    budget: ScalingBudget,
}

fn eval_setup(e: &EvalArgs) -> Outcome<EvalSetup> {
    let ck = Checkpoint::read(&e.checkpoint)?;
    let ds = load_data(&e.data)?;
    let mut data = match e.split {
        Split::Train => ds.train,
        Split::Test => ds.test,
    };
    if let Some(n) = e.limit {
        data.truncate(n);
    }
    if data.is_empty() {
        return Err(Failure {
            code: 2,
            message: "the selected split has no instances".into(),
        });
    }
    let cfg = &ck.header.model;
    if data[0].input.len() != cfg.seq_len || data[0].vocab_size > cfg.vocab_size {
        return Err(Failure {
            code: 2,
            message: format!(
                "dataset (length {}, vocab {}) does not fit the model (length {}, vocab {})",
                data[0].input.len(),
                data[0].vocab_size,
                cfg.seq_len,
                cfg.vocab_size
            ),
        });
    }
    let budget: ScalingBudget = config::resolve(None, &e.budget)?;
    if budget.act_enabled {
        return Err(Failure::usage(
            "act_enabled has no effect on fixed-depth rollouts; halting runs through inference::act_queue_eval",
        ));
    }
    Ok(EvalSetup { ck, data, budget })
}

fn sweep_one(model: &Reasoner<f32>, s: &EvalSetup, depths: &[usize], breadths: &[usize], seed: u64) -> Outcome<Vec<SweepRow>> {
    match inference::scale_sweep(model, &s.data, depths, breadths, &s.budget, seed) {
        Ok(rows) => Ok(rows),
        Err(Error::Config(m)) => Err(Failure::usage(m)),
        Err(e) => {
            eprintln!("sweep failed ({e}); retrying cell by cell");
            let mut rows = Vec::new();
            for &d in depths {
                for &b in breadths {
                    match inference::scale_sweep(model, &s.data, &[d], &[b], &s.budget, seed) {
                        Ok(r) => rows.extend(r),
                        Err(e) => eprintln!("cell D={d} B={b} failed: {e}"),
                    }
                }
            }
            Ok(rows)
        }
    }
}

fn scale_sweep(a: ScaleSweep, seed: u64) -> Outcome {
    let s = eval_setup(&a.eval)?;
    if a.depths.is_empty() || a.breadths.is_empty() || a.depths.contains(&0) || a.breadths.contains(&0) {
        return Err(Failure::usage("depths and breadths must be positive"));
    }
    let variants: &[(&str, bool)] = match a.weights {
        Weights::Raw => &[("raw", false)],
        Weights::Ema => &[("ema", true)],
        Weights::Both => &[("raw", false), ("ema", true)],
    };
    let mut out = BufWriter::new(File::create(&a.out)?);
    writeln!(out, "weights,{}", SweepRow::CSV_HEADER)?;
    for &(name, ema) in variants {
        let model = checkpoint::model_from::<f32>(&s.ck, ema)?;
        for row in sweep_one(&model, &s, &a.depths, &a.breadths, seed)? {
            writeln!(out, "{name},{}", row.csv_row())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn csv(path: &Path) -> Outcome<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn diagnose(a: Diagnose, seed: u64) -> Outcome {
    if !(a.residual_trace || a.margin || a.contraction || a.project) {
        return Err(Failure::usage(
            "no diagnostic selected; pass --residual-trace, --margin, --contraction or --project",
        ));
    }
    if a.depth == 0 || a.breadth == 0 || a.pairs == 0 {
        return Err(Failure::usage("depth, breadth and pairs must be positive"));
    }
    let s = eval_setup(&a.eval)?;
    let model = checkpoint::model_from::<f32>(&s.ck, !a.raw)?;
    fs::create_dir_all(&a.out)?;
    let budget = ScalingBudget {
        depth: a.depth,
        breadth: a.breadth,
        window: s.budget.window.min(a.depth),
        ..s.budget.clone()
    };

    if a.residual_trace {
        let res = inference::evaluate_depths(&model, &s.data, &[a.depth], &budget, seed)?;
        let mut w = csv(&a.out.join("residual_trace.csv"))?;
        writeln!(w, "instance,restart,step,residual")?;
        for (i, restarts) in res[0].iter().enumerate() {
            for (r, result) in restarts.iter().enumerate() {
                for (k, v) in result.residuals.iter().enumerate() {
                    writeln!(w, "{i},{r},{},{v}", k + 1)?;
                }
            }
        }
        w.flush()?;
    }

    if !(a.margin || a.contraction || a.project) {
        return Ok(());
    }
    let mut dynamics = model.clone();
    let c = dynamics.config_mut();
    c.noise = budget.beta_eval;
    if let Some(sigma) = budget.init_sigma {
        c.init_sigma_h = sigma;
        c.init_sigma_l = sigma;
    }
    let rows: Vec<Row> = (0..s.data.len())
        .flat_map(|instance| (0..a.breadth).map(move |restart| Row { instance, restart }))
        .collect();
    let points = diagnostics::collect_trajectories(&dynamics, &s.data, &rows, a.depth, seed)?;
    let finals: Vec<&TrajPoint> = points.iter().filter(|p| p.step == a.depth).collect();

    if a.margin {
        let mut w = csv(&a.out.join("margin.csv"))?;
        writeln!(w, "instance,restart,margin,correct")?;
        for p in &finals {
            let z: Vec<f32> = p.state.iter().map(|&v| v as f32).collect();
            let gamma = diagnostics::model_margin(&model, &z, &s.data[p.instance].target)?;
            writeln!(w, "{},{},{gamma},{}", p.instance, p.restart, u8::from(p.correct))?;
        }
        w.flush()?;
    }

    if a.contraction {
        let mut w = csv(&a.out.join("contraction.csv"))?;
        writeln!(w, "instance,restart,lipschitz,fixed_point_residual")?;
        for p in &finals {
            let map = ReasonerMap::new(&model, &s.data[p.instance]);
            let z: Vec<f64> = p.state.iter().chain(&p.low).copied().collect();
            let mut r = rng::stream(seed, "probe", inference::restart_stream_index(p.instance, p.restart));
            let l = diagnostics::contraction_probe(&map, &z, a.pairs, a.radius, &mut r)?;
            let fp = diagnostics::fixed_point_residual(&map, &z)?;
            let l = l.map_or_else(|| "nan".to_string(), |v| v.to_string());
            writeln!(w, "{},{},{l},{fp}", p.instance, p.restart)?;
        }
        w.flush()?;
    }

    if a.project {
        let mut w = csv(&a.out.join("projection.csv"))?;
        let pca = diagnostics::project_trajectories(&points, &mut w, &mut rng::stream(seed, "pca", 0))?;
        w.flush()?;
        if pca.rank_deficient {
            eprintln!("warning: states span fewer than two directions; missing components are written as 0");
        }
    }
    Ok(())
}
