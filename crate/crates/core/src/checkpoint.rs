//! Checkpoint container: a magic line, a one-line JSON header, then raw
//! little-endian f32 data. Parameters are stored under their own names, EMA
//! shadows under `ema.`, optimizer moments under `opt.m.` and `opt.v.`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Reasoner};
use crate::optim::OptimizerState;
use crate::rng::Streams;
use crate::scalar::Scalar;
use crate::training::{Progress, TrainConfig, Trainer};

pub const MAGIC: &str = "EQRCKPT v1";
pub const EMA_PREFIX: &str = "ema.";
pub const M_PREFIX: &str = "opt.m.";
pub const V_PREFIX: &str = "opt.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: usize,
    /// Number of f32 values.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub progress: Progress,
    pub streams: Streams,
    pub optimizer_step: u64,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint: header plus every stored tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub values: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.header
            .tensors
            .iter()
            .position(|t| t.name == name)
            .map(|i| self.values[i].as_slice())
    }

    fn require(&self, name: &str) -> Result<&[f32]> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        writeln!(buf, "{MAGIC}")?;
        serde_json::to_writer(&mut buf, &self.header)?;
        buf.push(b'\n');
        for v in &self.values {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, buf)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        let nl1 = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing magic line"))?;
        if &bytes[..nl1] != MAGIC.as_bytes() {
            return Err(bad("not a checkpoint file"));
        }
        let rest = &bytes[nl1 + 1..];
        let nl2 = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header"))?;
        let header: Header = serde_json::from_slice(&rest[..nl2])?;
        let data = &rest[nl2 + 1..];
        let mut values = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let end = t.offset + 4 * t.len;
            if end > data.len() || t.shape.iter().product::<usize>() != t.len {
                return Err(bad(&format!("tensor `{}` is truncated or misshapen", t.name)));
            }
            values.push(
                data[t.offset..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            );
        }
        Ok(Self { header, values })
    }
}

fn to_f32<T: Scalar>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.as_f64() as f32).collect()
}

fn from_f32<T: Scalar>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64_lossy(f64::from(x))).collect()
}

/// Snapshot of a trainer: parameters, EMA shadows, optimizer moments,
/// random-stream counters and progress.
pub fn from_trainer<T: Scalar>(trainer: &Trainer<T>) -> Checkpoint {
    let params = &trainer.model.params;
    let mut tensors = Vec::new();
    let mut values = Vec::new();
    let mut offset = 0;
    let mut add = |name: String, shape: &[usize], v: Vec<f32>| {
        tensors.push(TensorEntry {
            name,
            shape: shape.to_vec(),
            offset,
            len: v.len(),
        });
        offset += 4 * v.len();
        values.push(v);
    };
    for (i, (name, t)) in params.names().iter().zip(params.tensors()).enumerate() {
        add(name.clone(), t.shape(), to_f32(t.data()));
        add(format!("{EMA_PREFIX}{name}"), t.shape(), to_f32(&trainer.opt.ema[i]));
        add(format!("{M_PREFIX}{name}"), t.shape(), to_f32(&trainer.opt.m[i]));
        add(format!("{V_PREFIX}{name}"), t.shape(), to_f32(&trainer.opt.v[i]));
    }
    Checkpoint {
        header: Header {
            model: trainer.model.config().clone(),
            train: Some(trainer.cfg.clone()),
            progress: trainer.progress,
            streams: trainer.streams.clone(),
            optimizer_step: trainer.opt.t,
            dtype: "f32-le".into(),
            tensors,
        },
        values,
    }
}

pub fn save_trainer<T: Scalar>(trainer: &Trainer<T>, path: &Path) -> Result<()> {
    from_trainer(trainer).write(path)
}

/// Reasoner with raw (`ema = false`) or EMA parameters.
pub fn model_from<T: Scalar>(ck: &Checkpoint, ema: bool) -> Result<Reasoner<T>> {
    let mut model = Reasoner::<T>::new(ck.header.model.clone(), 0)?;
    let names: Vec<String> = model.params.names().to_vec();
    let mut vals = Vec::with_capacity(names.len());
    for n in &names {
        let key = if ema { format!("{EMA_PREFIX}{n}") } else { n.clone() };
        vals.push(from_f32(ck.require(&key)?));
    }
    model.params.load_values(&vals)?;
    Ok(model)
}

pub fn load_model<T: Scalar>(path: &Path, ema: bool) -> Result<Reasoner<T>> {
    model_from(&Checkpoint::read(path)?, ema)
}

/// Trainer restored exactly as saved.
pub fn load_trainer<T: Scalar>(path: &Path) -> Result<Trainer<T>> {
    let ck = Checkpoint::read(path)?;
    let cfg = ck
        .header
        .train
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no training config".into()))?;
    let model = model_from::<T>(&ck, false)?;
    let mut trainer = Trainer::new(model, cfg, ck.header.streams.seed)?;
    trainer.streams = ck.header.streams.clone();
    trainer.progress = ck.header.progress;
    let names: Vec<String> = trainer.model.params.names().to_vec();
    let fetch = |prefix: &str| -> Result<Vec<Vec<T>>> {
        names.iter().map(|n| Ok(from_f32(ck.require(&format!("{prefix}{n}"))?))).collect()
    };
    trainer.opt = OptimizerState {
        config: trainer.cfg.optim.clone(),
        m: fetch(M_PREFIX)?,
        v: fetch(V_PREFIX)?,
        ema: fetch(EMA_PREFIX)?,
        t: ck.header.optimizer_step,
    };
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mixer;
    use crate::tasks::{generate, TaskSpec};

    #[test]
    fn round_trip_and_resume() {
        let dir = std::env::temp_dir().join(format!("eqr-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.ckpt");
        let model = Reasoner::<f32>::new(
            ModelConfig {
                hidden: 8,
                n_blocks: 1,
                mixer: Mixer::MlpMixer,
                expansion: 2,
                token_expansion: 2,
                h_cycles: 1,
                l_cycles: 1,
                outer_steps: 2,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap();
        let cfg = TrainConfig {
            n_sup: 2,
            batch_size: 4,
            total_steps: 4,
            ..TrainConfig::default()
        };
        let data = generate(&TaskSpec::from_name("sudoku4").unwrap(), 8, 0, 2).unwrap().train;
        let mut straight = Trainer::new(model, cfg, 3).unwrap();
        let mut resumed = straight.clone();
        straight.cfg.total_steps = 8;
        let mut a = Vec::new();
        straight.run(&data, |_, r| a.push(r.clone())).unwrap();

        resumed.run(&data, |_, _| {}).unwrap();
        save_trainer(&resumed, &path).unwrap();
        let mut back = load_trainer::<f32>(&path).unwrap();
        assert_eq!(back.model.params.flat_values(), resumed.model.params.flat_values());
        assert_eq!(back.opt.ema, resumed.opt.ema);
        back.cfg.total_steps = 8;
        let mut b = Vec::new();
        back.run(&data, |_, r| b.push(r.clone())).unwrap();
        assert_eq!(&a[4..], &b[..]);

        let ema = load_model::<f32>(&path, true).unwrap();
        assert_eq!(ema.params.flat_values(), resumed.opt.ema.concat());
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn rejects_foreign_files() {
        let path = std::env::temp_dir().join(format!("eqr-bad-{}.ckpt", std::process::id()));
        fs::write(&path, b"hello\n{}\n").unwrap();
        assert!(matches!(Checkpoint::read(&path), Err(Error::Checkpoint(_))));
        fs::remove_file(path).ok();
    }
}
