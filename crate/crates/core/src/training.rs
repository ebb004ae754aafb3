//! Supervision schedules: terminal loss, offline trajectory supervision and
//! segmented online training, with randomized initialization, noise
//! injection and learned or oracle halting.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Feedforward, LatentPair, ModelConfig, Reasoner};
use crate::optim::{OptimConfig, OptimizerState};
use crate::params::ParamStore;
use crate::rng::{self, RowNoise, Streams};
use crate::scalar::{cast, Scalar};
use crate::tasks::TaskInstance;

pub const BATCH_STREAM: &str = "batch";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Terminal,
    TrajectorySupervision,
    Sot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Act {
    Off,
    Learned,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub schedule: Schedule,
    /// Supervision segments per episode.
    pub n_sup: usize,
    /// Inclusive 1-based window of supervised segments for trajectory supervision.
    pub anchor_range: Option<[usize; 2]>,
    pub ri_enabled: bool,
    pub sigma_h: f64,
    pub sigma_l: f64,
    pub ni_enabled: bool,
    pub noise: f64,
    pub damping: f64,
    pub act: Act,
    /// A row halts once its halting logit exceeds this.
    pub halt_threshold: f64,
    pub bce_weight: f64,
    pub batch_size: usize,
    /// Optimizer steps to run.
    pub total_steps: u64,
    /// Optimizer steps between evaluations; 0 disables them.
    pub eval_every: u64,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::Sot,
            n_sup: 16,
            anchor_range: None,
            ri_enabled: true,
            sigma_h: 1.0,
            sigma_l: 1.0,
            ni_enabled: false,
            noise: 0.01,
            damping: 0.05,
            act: Act::Learned,
            halt_threshold: 0.0,
            bce_weight: 1.0,
            batch_size: 64,
            total_steps: 1000,
            eval_every: 0,
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_sup == 0 || self.batch_size == 0 {
            return bad("n_sup and batch_size must be positive".into());
        }
        if let Some([a, b]) = self.anchor_range {
            if a < 1 || a > b || b > self.n_sup {
                return bad(format!("anchor_range [{a}, {b}] must lie within [1, {}]", self.n_sup));
            }
        }
        if self.ni_enabled && (!(0.0..1.0).contains(&self.damping) || self.noise < 0.0) {
            return bad("noise injection needs damping in [0, 1) and noise >= 0".into());
        }
        if self.ri_enabled && (self.sigma_h < 0.0 || self.sigma_l < 0.0) {
            return bad("init scales must be non-negative".into());
        }
        Ok(())
    }

    /// Writes the dynamics this run trains with into the model config.
    pub fn apply_to(&self, model: &mut ModelConfig) {
        if self.ni_enabled {
            model.damping = self.damping;
            model.noise = self.noise;
        } else {
            model.damping = 0.0;
            model.noise = 0.0;
        }
        if self.ri_enabled {
            model.init_sigma_h = self.sigma_h;
            model.init_sigma_l = self.sigma_l;
        } else {
            model.init_sigma_h = 0.0;
            model.init_sigma_l = 0.0;
        }
    }

    fn is_anchor(&self, k: usize) -> bool {
        match self.anchor_range {
            Some([a, b]) => (a..=b).contains(&k),
            None => true,
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub ce: f64,
    pub bce: f64,
    pub train_acc: f64,
    pub mean_residual: f64,
    pub mean_halt_step: f64,
    /// Outer steps consumed since training began.
    pub nfe: u64,
}

impl TrainRecord {
    pub const CSV_HEADER: &'static str = "step,ce,bce,train_acc,mean_residual,mean_halt_step,nfe";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.ce, self.bce, self.train_acc, self.mean_residual, self.mean_halt_step, self.nfe
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.ce, self.bce, self.train_acc, self.mean_residual, self.mean_halt_step]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Counters carried across episodes and checkpoints.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub step: u64,
    pub nfe: u64,
}

/// Consumes accumulated parameter gradients.
pub trait Stepper<T: Scalar> {
    fn step(&mut self, params: &mut ParamStore<T>) -> Result<()>;
}

impl<T: Scalar> Stepper<T> for OptimizerState<T> {
    fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        OptimizerState::step(self, params.tensors_mut())
    }
}

/// Records each step's flattened gradient instead of updating.
#[derive(Clone, Debug, Default)]
pub struct GradientCapture<T> {
    pub grads: Vec<Vec<T>>,
}

impl<T: Scalar> Stepper<T> for GradientCapture<T> {
    fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        self.grads.push(params.flat_grads());
        params.zero_grad();
        Ok(())
    }
}

/// 1 iff every position decodes to the target.
pub fn make_halting_label(prediction: &[usize], target: &[usize]) -> bool {
    prediction == target
}

/// Initial latents and per-row noise streams for a fresh batch.
pub fn init_state<T: Scalar>(cfg: &ModelConfig, rows: usize, streams: &mut Streams) -> (LatentPair<T>, RowNoise) {
    let pair = if cfg.init_sigma_h > 0.0 || cfg.init_sigma_l > 0.0 {
        let mut init = RowNoise::new((0..rows).map(|_| streams.next(rng::INIT)).collect());
        LatentPair::sample(cfg, cfg.init_sigma_h, cfg.init_sigma_l, &mut init)
    } else {
        LatentPair::zeros(rows, cfg)
    };
    let noise = RowNoise::new((0..rows).map(|_| streams.next(rng::NOISE)).collect());
    (pair, noise)
}

fn gather(batch: &[TaskInstance], rows: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut tokens = Vec::new();
    let mut targets = Vec::new();
    for &r in rows {
        tokens.extend_from_slice(&batch[r].input);
        targets.extend_from_slice(&batch[r].target);
    }
    (tokens, targets)
}

struct Segment<T> {
    pair: LatentPair<T>,
    correct: Vec<bool>,
    q: Vec<f64>,
    ce: f64,
    bce: f64,
    residual: f64,
}

/// One truncated unroll plus its loss. When `track` is set the loss scaled by
/// `scale` is backpropagated into the parameter gradients.
#[allow(clippy::too_many_arguments)]
fn run_segment<T: Scalar>(
    model: &mut Reasoner<T>,
    tokens: &[usize],
    targets: &[usize],
    pair: &LatentPair<T>,
    noise: &mut RowNoise,
    bce_weight: f64,
    scale: f64,
    track: bool,
    step: u64,
) -> Result<Segment<T>> {
    let rows = pair.batch();
    let seq = model.config().seq_len;
    let steps = model.config().outer_steps;
    let tape = if track { Tape::new() } else { Tape::frozen() };
    let (seg, vars, grads) = {
        let bound = model.bind(&tape);
        let x = bound.embed(tokens)?;
        let out = bound.truncated_unroll(pair, &x, steps, noise, false).map_err(|e| match e {
            Error::Divergence { .. } => Error::Divergence { step: step as usize + 1 },
            e => e,
        })?;
        let preds = out.predictions();
        let correct: Vec<bool> = (0..rows)
            .map(|i| make_halting_label(&preds[i], &targets[i * seq..(i + 1) * seq]))
            .collect();
        let labels: Vec<T> = correct.iter().map(|&c| if c { T::one() } else { T::zero() }).collect();
        let ce = tape.softmax_cross_entropy(&out.logits, targets)?;
        let bce = tape.bce_with_logits_weighted(&out.q, &labels, &vec![cast(1.0 / rows as f64); rows])?;
        let total = tape.add(&ce, &tape.scale(&bce, cast(bce_weight)))?;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", step + 1)));
        }
        let grads = if track {
            let loss = tape.scale(&total, cast(scale));
            Some(tape.backward(&loss)?)
        } else {
            None
        };
        let residual = out.residuals.iter().map(|r| *r.last().unwrap_or(&0.0)).sum::<f64>() / rows as f64;
        let seg = Segment {
            pair: out.pair,
            correct,
            q: out.q.data().iter().map(|v| v.as_f64()).collect(),
            ce: ce.item().as_f64(),
            bce: bce.item().as_f64(),
            residual,
        };
        (seg, bound.vars, grads)
    };
    if let Some(g) = grads {
        model.params.accumulate(&vars, &g)?;
    }
    Ok(seg)
}

fn accuracy(correct: &[bool]) -> f64 {
    correct.iter().filter(|&&c| c).count() as f64 / correct.len().max(1) as f64
}

/// Segmented online training: every segment is supervised and followed by an
/// optimizer step; the detached latents carry over under the new parameters.
/// Halted rows leave the batch for the rest of the episode.
pub fn sot_episode<T: Scalar, S: Stepper<T>>(
    model: &mut Reasoner<T>,
    batch: &[TaskInstance],
    cfg: &TrainConfig,
    streams: &mut Streams,
    stepper: &mut S,
    progress: &mut Progress,
) -> Result<Vec<TrainRecord>> {
    let n = batch.len();
    let steps = model.config().outer_steps as u64;
    let (mut pair, mut noise) = init_state::<T>(model.config(), n, streams);
    let mut active: Vec<usize> = (0..n).collect();
    let mut halt = vec![cfg.n_sup; n];
    let mut records = Vec::new();
    for k in 1..=cfg.n_sup {
        if active.is_empty() || progress.step >= cfg.total_steps {
            break;
        }
        let (tokens, targets) = gather(batch, &active);
        let seg = run_segment(model, &tokens, &targets, &pair, &mut noise, cfg.bce_weight, 1.0, true, progress.step)?;
        stepper.step(&mut model.params)?;
        progress.step += 1;
        progress.nfe += active.len() as u64 * steps;
        records.push(TrainRecord {
            step: progress.step,
            ce: seg.ce,
            bce: seg.bce,
            train_acc: accuracy(&seg.correct),
            mean_residual: seg.residual,
            mean_halt_step: 0.0,
            nfe: progress.nfe,
        });
        let halts = |i: usize| match cfg.act {
            Act::Off => false,
            Act::Learned => seg.q[i] > cfg.halt_threshold,
            Act::Oracle => seg.correct[i],
        };
        let keep: Vec<usize> = (0..active.len()).filter(|&i| !halts(i)).collect();
        for i in (0..active.len()).filter(|&i| halts(i)) {
            halt[active[i]] = k;
        }
        pair = seg.pair.select_rows(&keep);
        noise.retain_rows(&keep);
        active = keep.iter().map(|&i| active[i]).collect();
    }
    let mean_halt = halt.iter().sum::<usize>() as f64 / n.max(1) as f64;
    for r in &mut records {
        r.mean_halt_step = mean_halt;
    }
    Ok(records)
}

/// Offline deep supervision: losses at every anchor segment of one detached
/// trajectory, averaged over anchors, then a single optimizer step.
pub fn trajectory_supervision_episode<T: Scalar, S: Stepper<T>>(
    model: &mut Reasoner<T>,
    batch: &[TaskInstance],
    cfg: &TrainConfig,
    streams: &mut Streams,
    stepper: &mut S,
    progress: &mut Progress,
) -> Result<TrainRecord> {
    let n = batch.len();
    let (mut pair, mut noise) = init_state::<T>(model.config(), n, streams);
    let (tokens, targets) = gather(batch, &(0..n).collect::<Vec<_>>());
    let anchors = (1..=cfg.n_sup).filter(|&k| cfg.is_anchor(k)).count();
    let scale = 1.0 / anchors as f64;
    let (mut ce, mut bce, mut acc, mut residual) = (0.0, 0.0, 0.0, 0.0);
    for k in 1..=cfg.n_sup {
        let track = cfg.is_anchor(k);
        let seg = run_segment(model, &tokens, &targets, &pair, &mut noise, cfg.bce_weight, scale, track, progress.step)?;
        if track {
            ce += seg.ce * scale;
            bce += seg.bce * scale;
        }
        acc = accuracy(&seg.correct);
        residual = seg.residual;
        pair = seg.pair;
    }
    stepper.step(&mut model.params)?;
    progress.step += 1;
    progress.nfe += (n * cfg.n_sup * model.config().outer_steps) as u64;
    Ok(TrainRecord {
        step: progress.step,
        ce,
        bce,
        train_acc: acc,
        mean_residual: residual,
        mean_halt_step: cfg.n_sup as f64,
        nfe: progress.nfe,
    })
}

/// Loss only after the last segment; earlier segments run without a tape.
pub fn terminal_episode<T: Scalar, S: Stepper<T>>(
    model: &mut Reasoner<T>,
    batch: &[TaskInstance],
    cfg: &TrainConfig,
    streams: &mut Streams,
    stepper: &mut S,
    progress: &mut Progress,
) -> Result<TrainRecord> {
    let n = batch.len();
    let (mut pair, mut noise) = init_state::<T>(model.config(), n, streams);
    let (tokens, targets) = gather(batch, &(0..n).collect::<Vec<_>>());
    for _ in 1..cfg.n_sup {
        pair = run_segment(model, &tokens, &targets, &pair, &mut noise, cfg.bce_weight, 1.0, false, progress.step)?.pair;
    }
    let seg = run_segment(model, &tokens, &targets, &pair, &mut noise, cfg.bce_weight, 1.0, true, progress.step)?;
    stepper.step(&mut model.params)?;
    progress.step += 1;
    progress.nfe += (n * cfg.n_sup * model.config().outer_steps) as u64;
    Ok(TrainRecord {
        step: progress.step,
        ce: seg.ce,
        bce: seg.bce,
        train_acc: accuracy(&seg.correct),
        mean_residual: seg.residual,
        mean_halt_step: cfg.n_sup as f64,
        nfe: progress.nfe,
    })
}

/// One cross-entropy step of the untied baseline.
pub fn feedforward_step<T: Scalar, S: Stepper<T>>(
    model: &mut Feedforward<T>,
    batch: &[TaskInstance],
    stepper: &mut S,
    progress: &mut Progress,
) -> Result<TrainRecord> {
    let n = batch.len();
    let seq = model.config().seq_len;
    let (tokens, targets) = gather(batch, &(0..n).collect::<Vec<_>>());
    let tape = Tape::new();
    let vars = model.params.bind(&tape);
    let logits = model.forward(&tape, &vars, &tokens).map_err(|e| match e {
        Error::Divergence { .. } => Error::Divergence { step: progress.step as usize + 1 },
        e => e,
    })?;
    let ce = tape.softmax_cross_entropy(&logits, &targets)?;
    if !ce.is_finite() {
        return Err(Error::NonFinite(format!("training loss at step {}", progress.step + 1)));
    }
    let preds = argmax_rows(&logits);
    let correct: Vec<bool> = (0..n).map(|i| preds[i] == targets[i * seq..(i + 1) * seq]).collect();
    let grads = tape.backward(&ce)?;
    model.params.accumulate(&vars, &grads)?;
    stepper.step(&mut model.params)?;
    progress.step += 1;
    progress.nfe += n as u64;
    Ok(TrainRecord {
        step: progress.step,
        ce: ce.item().as_f64(),
        bce: 0.0,
        train_acc: accuracy(&correct),
        mean_residual: 0.0,
        mean_halt_step: 1.0,
        nfe: progress.nfe,
    })
}

/// Draws the next training batch without replacement from `data`.
pub fn next_batch(data: &[TaskInstance], batch_size: usize, streams: &mut Streams) -> Vec<TaskInstance> {
    let mut r = streams.next(BATCH_STREAM);
    index::sample(&mut r, data.len(), batch_size.min(data.len()))
        .into_iter()
        .map(|i| data[i].clone())
        .collect()
}

/// Owns a model, its optimizer and the random streams of one run.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: Reasoner<T>,
    pub opt: OptimizerState<T>,
    pub streams: Streams,
    pub cfg: TrainConfig,
    pub progress: Progress,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(mut model: Reasoner<T>, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        cfg.apply_to(model.config_mut());
        model.config().validate()?;
        let opt = OptimizerState::new(cfg.optim.clone(), model.params.tensors());
        Ok(Self {
            model,
            opt,
            streams: Streams::new(seed),
            cfg,
            progress: Progress::default(),
        })
    }

    pub fn done(&self) -> bool {
        self.progress.step >= self.cfg.total_steps
    }

    /// One episode on a freshly drawn batch.
    pub fn episode(&mut self, data: &[TaskInstance]) -> Result<Vec<TrainRecord>> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let batch = next_batch(data, self.cfg.batch_size, &mut self.streams);
        let (m, c, s, o, p) = (&mut self.model, &self.cfg, &mut self.streams, &mut self.opt, &mut self.progress);
        match c.schedule {
            Schedule::Sot => sot_episode(m, &batch, c, s, o, p),
            Schedule::TrajectorySupervision => trajectory_supervision_episode(m, &batch, c, s, o, p).map(|r| vec![r]),
            Schedule::Terminal => terminal_episode(m, &batch, c, s, o, p).map(|r| vec![r]),
        }
    }

    /// Runs episodes until `total_steps` optimizer steps have been taken.
    pub fn run(&mut self, data: &[TaskInstance], mut on_record: impl FnMut(&Self, &TrainRecord)) -> Result<()> {
        while !self.done() {
            for r in self.episode(data)? {
                on_record(self, &r);
            }
        }
        Ok(())
    }

    /// Reasoner carrying the EMA shadow parameters.
    pub fn ema_model(&self) -> Result<Reasoner<T>> {
        self.model.with_values(&self.opt.ema)
    }
}

/// Training loop for the feedforward baseline with the same batch sampling.
#[derive(Clone, Debug)]
pub struct FeedforwardTrainer<T> {
    pub model: Feedforward<T>,
    pub opt: OptimizerState<T>,
    pub streams: Streams,
    pub progress: Progress,
    pub batch_size: usize,
    pub total_steps: u64,
}

impl<T: Scalar> FeedforwardTrainer<T> {
    pub fn new(model: Feedforward<T>, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let opt = OptimizerState::new(cfg.optim.clone(), model.params.tensors());
        Ok(Self {
            model,
            opt,
            streams: Streams::new(seed),
            progress: Progress::default(),
            batch_size: cfg.batch_size,
            total_steps: cfg.total_steps,
        })
    }

    pub fn run(&mut self, data: &[TaskInstance], mut on_record: impl FnMut(&TrainRecord)) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        while self.progress.step < self.total_steps {
            let batch = next_batch(data, self.batch_size, &mut self.streams);
            let r = feedforward_step(&mut self.model, &batch, &mut self.opt, &mut self.progress)?;
            on_record(&r);
        }
        Ok(())
    }

    pub fn ema_model(&self) -> Result<Feedforward<T>> {
        let mut m = self.model.clone();
        m.params.load_values(&self.opt.ema)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mixer;
    use crate::tasks::{generate, TaskSpec};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            seq_len: 16,
            hidden: 8,
            n_blocks: 1,
            mixer: Mixer::MlpMixer,
            expansion: 2,
            token_expansion: 2,
            h_cycles: 1,
            l_cycles: 1,
            outer_steps: 2,
            ..ModelConfig::default()
        }
    }

    fn data(n: usize) -> Vec<TaskInstance> {
        generate(&TaskSpec::from_name("sudoku4").unwrap(), n, 0, 1).unwrap().train
    }

    fn cfg(schedule: Schedule, n_sup: usize, act: Act) -> TrainConfig {
        TrainConfig {
            schedule,
            n_sup,
            act,
            batch_size: 4,
            total_steps: 1000,
            optim: OptimConfig {
                lr: 1e-2,
                warmup_steps: 0,
                weight_decay: 0.0,
                ..OptimConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn anchor_range_validation() {
        let mut c = cfg(Schedule::TrajectorySupervision, 4, Act::Off);
        c.anchor_range = Some([0, 2]);
        assert!(c.validate().is_err());
        c.anchor_range = Some([3, 5]);
        assert!(c.validate().is_err());
        c.anchor_range = Some([2, 4]);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn halting_label() {
        assert!(make_halting_label(&[1, 2, 3], &[1, 2, 3]));
        assert!(!make_halting_label(&[1, 2, 4], &[1, 2, 3]));
    }

    #[test]
    fn act_off_runs_every_segment() {
        let c = cfg(Schedule::Sot, 3, Act::Off);
        let mut model = Reasoner::<f32>::new(tiny_model(), 1).unwrap();
        c.apply_to(model.config_mut());
        let mut opt = OptimizerState::new(c.optim.clone(), model.params.tensors());
        let mut s = Streams::new(2);
        let mut p = Progress::default();
        let recs = sot_episode(&mut model, &data(4), &c, &mut s, &mut opt, &mut p).unwrap();
        assert_eq!(recs.len(), 3);
        assert!(recs.iter().all(|r| r.mean_halt_step == 3.0 && r.is_finite()));
        assert_eq!(p.nfe, 3 * 4 * 2);
    }

    #[test]
    fn sot_changes_parameters_between_segments() {
        let c = cfg(Schedule::Sot, 3, Act::Off);
        let mut model = Reasoner::<f64>::new(tiny_model(), 1).unwrap();
        c.apply_to(model.config_mut());
        let before = model.params.flat_values();
        let mut cap = GradientCapture::default();
        let mut s = Streams::new(2);
        let mut p = Progress::default();
        sot_episode(&mut model, &data(4), &c, &mut s, &mut cap, &mut p).unwrap();
        assert_eq!(cap.grads.len(), 3);
        assert_eq!(model.params.flat_values(), before);
        let mut opt = OptimizerState::new(c.optim.clone(), model.params.tensors());
        let mut snapshots = Vec::new();
        struct Snap<'a, T: Scalar>(&'a mut OptimizerState<T>, &'a mut Vec<Vec<T>>);
        impl<T: Scalar> Stepper<T> for Snap<'_, T> {
            fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
                self.1.push(params.flat_values());
                self.0.step(params.tensors_mut())
            }
        }
        let mut s = Streams::new(2);
        sot_episode(&mut model, &data(4), &c, &mut s, &mut Snap(&mut opt, &mut snapshots), &mut p).unwrap();
        snapshots.push(model.params.flat_values());
        for w in snapshots.windows(2) {
            assert_ne!(w[0], w[1]);
        }
    }

    #[test]
    fn oracle_act_never_exceeds_n_sup() {
        let c = cfg(Schedule::Sot, 4, Act::Oracle);
        let mut t = Trainer::<f32>::new(Reasoner::new(tiny_model(), 3).unwrap(), c, 4).unwrap();
        let d = data(8);
        for _ in 0..3 {
            for r in t.episode(&d).unwrap() {
                assert!(r.mean_halt_step <= 4.0);
            }
        }
    }

    #[test]
    fn ri_replays_and_zero_init_without_ri() {
        let mut m = tiny_model();
        let mut s1 = Streams::new(5);
        let mut s2 = Streams::new(5);
        let (a, _) = init_state::<f32>(&m, 3, &mut s1);
        let (b, _) = init_state::<f32>(&m, 3, &mut s2);
        assert_eq!(a, b);
        assert!(a.z_h.data().iter().any(|&v| v != 0.0));
        m.init_sigma_h = 0.0;
        m.init_sigma_l = 0.0;
        let (z, _) = init_state::<f32>(&m, 3, &mut s1);
        assert!(z.z_h.data().iter().chain(z.z_l.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn terminal_touches_only_final_segment() {
        let c = cfg(Schedule::Terminal, 3, Act::Off);
        let mut model = Reasoner::<f64>::new(tiny_model(), 1).unwrap();
        c.apply_to(model.config_mut());
        let mut cap = GradientCapture::default();
        let mut p = Progress::default();
        terminal_episode(&mut model, &data(2), &c, &mut Streams::new(1), &mut cap, &mut p).unwrap();
        assert_eq!(cap.grads.len(), 1);
        assert_eq!(p.step, 1);
    }

    #[test]
    fn trajectory_takes_one_step_for_any_anchor_count() {
        for n_sup in [1, 3] {
            let c = cfg(Schedule::TrajectorySupervision, n_sup, Act::Off);
            let mut model = Reasoner::<f64>::new(tiny_model(), 1).unwrap();
            c.apply_to(model.config_mut());
            let mut cap = GradientCapture::default();
            let mut p = Progress::default();
            trajectory_supervision_episode(&mut model, &data(2), &c, &mut Streams::new(1), &mut cap, &mut p).unwrap();
            assert_eq!(cap.grads.len(), 1);
        }
    }

    #[test]
    fn terminal_memorizes_small_set() {
        let mut c = cfg(Schedule::Terminal, 1, Act::Off);
        c.batch_size = 10;
        c.total_steps = 200;
        c.ri_enabled = false;
        let mut t = Trainer::<f32>::new(Reasoner::new(tiny_model(), 9).unwrap(), c, 9).unwrap();
        let d = data(10);
        let mut ce = Vec::new();
        t.run(&d, |_, r| ce.push(r.ce)).unwrap();
        let head: f64 = ce[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = ce[190..].iter().sum::<f64>() / 10.0;
        assert!(tail < 0.5 * head, "{head} -> {tail}");
    }

    #[test]
    fn run_stops_at_total_steps() {
        let mut c = cfg(Schedule::Sot, 4, Act::Off);
        c.total_steps = 6;
        let mut t = Trainer::<f32>::new(Reasoner::new(tiny_model(), 3).unwrap(), c, 4).unwrap();
        let mut n = 0;
        t.run(&data(8), |_, _| n += 1).unwrap();
        assert_eq!(n, 6);
    }
}
