//! Test-time scaling along depth (outer steps D) and breadth (restarts B),
//! answer aggregation, the ACT inference queue and compute accounting.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, row_distances, Feedforward, LatentPair, ModelConfig, Reasoner, VarPair};
use crate::rng::{self, RowNoise};
use crate::scalar::Scalar;
use crate::tasks::TaskInstance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingBudget {
    /// Outer iterations per trajectory.
    pub depth: usize,
    /// Independent restarts.
    pub breadth: usize,
    /// Convergence window for top-1 selection.
    pub window: usize,
    /// Noise scale during evaluation.
    pub beta_eval: f64,
    /// Initialization scale override; `None` keeps the model's own.
    pub init_sigma: Option<f64>,
    pub act_enabled: bool,
    pub halt_threshold: f64,
    /// Slots in the ACT queue.
    pub queue_capacity: usize,
    /// Also evaluate `‖f(z) − z‖` at every decode point.
    pub fixed_point: bool,
    /// Rows per batched rollout.
    pub chunk_rows: usize,
}

impl Default for ScalingBudget {
    fn default() -> Self {
        Self {
            depth: 16,
            breadth: 1,
            window: 3,
            beta_eval: 0.0,
            init_sigma: None,
            act_enabled: false,
            halt_threshold: 0.0,
            queue_capacity: 64,
            fixed_point: false,
            chunk_rows: 64,
        }
    }
}

impl ScalingBudget {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.breadth == 0 {
            return Err(Error::Config("depth and breadth must be at least 1".into()));
        }
        if self.window == 0 || self.window > self.depth {
            return Err(Error::Config(format!(
                "window {} must lie in [1, depth {}]",
                self.window, self.depth
            )));
        }
        if self.beta_eval < 0.0 || self.init_sigma.is_some_and(|s| s < 0.0) {
            return Err(Error::Config("beta_eval and init_sigma must be non-negative".into()));
        }
        if self.queue_capacity == 0 || self.chunk_rows == 0 {
            return Err(Error::Config("queue_capacity and chunk_rows must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of one trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartResult {
    /// Decoded tokens; empty when the trajectory diverged.
    pub prediction: Vec<usize>,
    /// Mean of the last `window` rollout residuals before the stop point.
    pub window_residual: f64,
    /// Outer steps executed.
    pub halt_step: usize,
    /// `‖z_Hᵏ − z_Hᵏ⁻¹‖₂` for every step taken.
    pub residuals: Vec<f64>,
    /// `‖f(z_H) − z_H‖₂` at the stop point, when measured.
    pub fixed_point: Option<f64>,
    /// Outer step at which the latents stopped being finite.
    pub diverged_at: Option<usize>,
}

impl RestartResult {
    pub fn is_correct(&self, target: &[usize]) -> bool {
        self.diverged_at.is_none() && self.prediction == target
    }
}

/// Stream identity of restart `restart` of instance `instance`.
pub fn restart_stream_index(instance: usize, restart: usize) -> u64 {
    rng::pair_index(instance as u64, restart as u64)
}

/// A rollout row: which instance and which restart it belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Row {
    pub instance: usize,
    pub restart: usize,
}

/// Model copy with the evaluation noise and init scale of `budget`.
fn eval_model<T: Scalar>(model: &Reasoner<T>, budget: &ScalingBudget) -> Reasoner<T> {
    let mut m = model.clone();
    let c = m.config_mut();
    c.noise = budget.beta_eval;
    if let Some(s) = budget.init_sigma {
        c.init_sigma_h = s;
        c.init_sigma_l = s;
    }
    m
}

fn row_states<T: Scalar>(cfg: &ModelConfig, seed: u64, rows: &[Row]) -> (LatentPair<T>, RowNoise) {
    let ids: Vec<u64> = rows.iter().map(|r| restart_stream_index(r.instance, r.restart)).collect();
    let pair = if cfg.init_sigma_h > 0.0 || cfg.init_sigma_l > 0.0 {
        let mut init = RowNoise::family(seed, rng::RESTART, ids.iter().copied());
        LatentPair::sample(cfg, cfg.init_sigma_h, cfg.init_sigma_l, &mut init)
    } else {
        LatentPair::zeros(rows.len(), cfg)
    };
    (pair, RowNoise::family(seed, rng::RESTART_NOISE, ids))
}

/// Per-row record of a batched rollout, decoded at several depths.
#[derive(Clone, Debug, PartialEq)]
pub struct RowTrace {
    pub residuals: Vec<f64>,
    pub q: Vec<f64>,
    /// `(depth, prediction, fixed-point residual)` at each requested depth.
    pub snapshots: Vec<(usize, Vec<usize>, Option<f64>)>,
    pub diverged_at: Option<usize>,
}

impl RowTrace {
    /// Result as if the run had stopped at `depth`.
    pub fn at_depth(&self, depth: usize, window: usize) -> RestartResult {
        let (prediction, fixed_point) = self
            .snapshots
            .iter()
            .find(|s| s.0 == depth)
            .map(|s| (s.1.clone(), s.2))
            .unwrap_or_default();
        finish(&self.residuals[..depth.min(self.residuals.len())], prediction, fixed_point, depth, window, self.diverged_at)
    }
}

fn finish(
    residuals: &[f64],
    prediction: Vec<usize>,
    fixed_point: Option<f64>,
    halt_step: usize,
    window: usize,
    diverged_at: Option<usize>,
) -> RestartResult {
    let diverged = diverged_at.is_some_and(|d| d <= halt_step);
    let w = window.min(residuals.len()).max(1);
    let window_residual = if diverged || residuals.is_empty() {
        f64::INFINITY
    } else {
        residuals[residuals.len() - w..].iter().sum::<f64>() / w as f64
    };
    RestartResult {
        prediction: if diverged { Vec::new() } else { prediction },
        window_residual,
        halt_step,
        residuals: residuals.to_vec(),
        fixed_point: if diverged { None } else { fixed_point },
        diverged_at: diverged_at.filter(|&d| d <= halt_step),
    }
}

fn tokens_for(data: &[TaskInstance], rows: &[Row]) -> Vec<usize> {
    rows.iter().flat_map(|r| data[r.instance].input.iter().copied()).collect()
}

/// Runs every row for `max(decode_at)` outer steps as one batch, decoding at
/// each depth in `decode_at`. Rows are independent: a row that stops being
/// finite is marked and the others continue.
pub fn rollout_rows<T: Scalar>(
    model: &Reasoner<T>,
    data: &[TaskInstance],
    rows: &[Row],
    decode_at: &[usize],
    seed: u64,
    fixed_point: bool,
) -> Result<Vec<RowTrace>> {
    let depth = decode_at.iter().copied().max().unwrap_or(0);
    let n = rows.len();
    let mut traces: Vec<RowTrace> = (0..n)
        .map(|_| RowTrace {
            residuals: Vec::with_capacity(depth),
            q: Vec::with_capacity(depth),
            snapshots: Vec::new(),
            diverged_at: None,
        })
        .collect();
    if n == 0 || depth == 0 {
        return Ok(traces);
    }
    let tape = Tape::frozen();
    let bound = model.bind(&tape);
    let x = bound.embed(&tokens_for(data, rows))?;
    let (pair, mut noise) = row_states::<T>(model.config(), seed, rows);
    let mut cur = VarPair::constant(&pair);
    let row_len = model.config().seq_len * model.config().hidden;
    for k in 1..=depth {
        let next = bound.outer_step(&cur, &x, &mut noise)?;
        let dist = row_distances(next.z_h.data(), cur.z_h.data(), n);
        let q = bound.q_head(&next.z_h)?;
        for (i, t) in traces.iter_mut().enumerate() {
            let finite = |v: &Var<T>| v.data()[i * row_len..(i + 1) * row_len].iter().all(|x| x.is_finite());
            if t.diverged_at.is_none() && !(finite(&next.z_h) && finite(&next.z_l)) {
                t.diverged_at = Some(k);
            }
            t.residuals.push(if t.diverged_at.is_some() { f64::INFINITY } else { dist[i] });
            t.q.push(q.data()[i].as_f64());
        }
        if decode_at.contains(&k) {
            let preds = argmax_rows(&bound.lm_head(&next.z_h)?);
            let fp = if fixed_point {
                Some(bound.fixed_point_residual(&next, &x)?)
            } else {
                None
            };
            for (i, (t, p)) in traces.iter_mut().zip(preds).enumerate() {
                t.snapshots.push((k, p, fp.as_ref().map(|f| f[i])));
            }
        }
        cur = next;
    }
    Ok(traces)
}

/// `rollout_rows` over chunks of `chunk_rows`, in parallel.
pub fn rollout_chunked<T: Scalar>(
    model: &Reasoner<T>,
    data: &[TaskInstance],
    rows: &[Row],
    decode_at: &[usize],
    seed: u64,
    fixed_point: bool,
    chunk_rows: usize,
) -> Result<Vec<RowTrace>> {
    let parts: Vec<Result<Vec<RowTrace>>> = rows
        .par_chunks(chunk_rows.max(1))
        .map(|c| rollout_rows(model, data, c, decode_at, seed, fixed_point))
        .collect();
    let mut out = Vec::with_capacity(rows.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// One trajectory of `depth` outer steps for restart `restart` of `instance`.
pub fn run_depth<T: Scalar>(
    model: &Reasoner<T>,
    data: &[TaskInstance],
    instance: usize,
    restart: usize,
    budget: &ScalingBudget,
    seed: u64,
) -> Result<RestartResult> {
    budget.validate()?;
    let m = eval_model(model, budget);
    let row = [Row { instance, restart }];
    let t = rollout_rows(&m, data, &row, &[budget.depth], seed, budget.fixed_point)?.remove(0);
    if let Some(step) = t.diverged_at {
        return Err(Error::Divergence { step });
    }
    Ok(t.at_depth(budget.depth, budget.window))
}

/// `budget.breadth` independent restarts of one instance. Diverged restarts
/// are reported in their results rather than aborting the run.
pub fn run_breadth<T: Scalar>(
    model: &Reasoner<T>,
    data: &[TaskInstance],
    instance: usize,
    budget: &ScalingBudget,
    seed: u64,
) -> Result<Vec<RestartResult>> {
    budget.validate()?;
    let m = eval_model(model, budget);
    let rows: Vec<Row> = (0..budget.breadth).map(|restart| Row { instance, restart }).collect();
    Ok(rollout_rows(&m, data, &rows, &[budget.depth], seed, budget.fixed_point)?
        .iter()
        .map(|t| t.at_depth(budget.depth, budget.window))
        .collect())
}

/// Restart results for every instance, decoded at every depth in `depths`;
/// indexed `[depth][instance][restart]`.
pub fn evaluate_depths<T: Scalar>(
    model: &Reasoner<T>,
    data: &[TaskInstance],
    depths: &[usize],
    budget: &ScalingBudget,
    seed: u64,
) -> Result<Vec<Vec<Vec<RestartResult>>>> {
    budget.validate()?;
    if depths.iter().any(|&d| d < budget.window) {
        return Err(Error::Config("every depth must be at least the convergence window".into()));
    }
    let m = eval_model(model, budget);
    let rows: Vec<Row> = (0..data.len())
        .flat_map(|instance| (0..budget.breadth).map(move |restart| Row { instance, restart }))
        .collect();
    let traces = rollout_chunked(&m, data, &rows, depths, seed, budget.fixed_point, budget.chunk_rows)?;
    Ok(depths
        .iter()
        .map(|&d| {
            traces
                .chunks(budget.breadth)
                .map(|restarts| restarts.iter().map(|t| t.at_depth(d, budget.window)).collect())
                .collect()
        })
        .collect())
}

/// Mean exact-match indicator over restarts.
pub fn acc_avg(results: &[RestartResult], target: &[usize]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().filter(|r| r.is_correct(target)).count() as f64 / results.len() as f64
}

/// Index of the restart with the smallest window residual; ties go to the lowest index.
pub fn top1_index(results: &[RestartResult]) -> usize {
    let mut best = 0;
    for (i, r) in results.iter().enumerate() {
        if r.window_residual < results[best].window_residual {
            best = i;
        }
    }
    best
}

/// Correctness of the most converged restart.
pub fn top1_converged(results: &[RestartResult], target: &[usize]) -> bool {
    !results.is_empty() && results[top1_index(results)].is_correct(target)
}

/// Index of a restart carrying the most frequent decoded sequence; ties go to
/// the sequence whose first occurrence has the lowest index.
pub fn majority_index(results: &[RestartResult]) -> usize {
    let mut best = (0, 0);
    for (i, r) in results.iter().enumerate() {
        if results[..i].iter().any(|p| p.prediction == r.prediction) {
            continue;
        }
        let count = results[i..].iter().filter(|p| p.prediction == r.prediction).count();
        if count > best.1 {
            best = (i, count);
        }
    }
    best.0
}

pub fn majority_vote(results: &[RestartResult], target: &[usize]) -> bool {
    !results.is_empty() && results[majority_index(results)].is_correct(target)
}

/// Mean over instances of `|AccAvg_B − correctness of restart 0|`.
pub fn path_independence(per_instance: &[Vec<RestartResult>], targets: &[&[usize]]) -> f64 {
    if per_instance.is_empty() {
        return 0.0;
    }
    per_instance
        .iter()
        .zip(targets)
        .map(|(rs, t)| {
            let single = if rs.first().is_some_and(|r| r.is_correct(t)) { 1.0 } else { 0.0 };
            (acc_avg(rs, t) - single).abs()
        })
        .sum::<f64>()
        / per_instance.len() as f64
}

/// Function evaluations (outer steps) for `breadth` trajectories of `depth` steps.
pub fn nfe(depth: usize, breadth: usize) -> u64 {
    depth as u64 * breadth as u64
}

/// Equivalent layer evaluations: `D · B · n_blocks · H_cycles · (L_cycles + 1)`.
pub fn nle(depth: usize, breadth: usize, cfg: &ModelConfig) -> u64 {
    nfe(depth, breadth) * cfg.equivalent_layers() as u64
}

/// Aggregates over a dataset at one budget point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub depth: usize,
    pub breadth: usize,
    pub nfe: u64,
    pub nle: u64,
    pub acc_avg: f64,
    pub top1_conv: f64,
    pub majority: f64,
    pub mean_residual: f64,
    pub delta_pi: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "D,B,nfe,nle,acc_avg,top1_conv,majority,mean_residual,delta_pi";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.depth,
            self.breadth,
            self.nfe,
            self.nle,
            self.acc_avg,
            self.top1_conv,
            self.majority,
            self.mean_residual,
            self.delta_pi
        )
    }

    /// Aggregates `[instance][restart]` results, using the first `breadth` restarts.
    pub fn from_results(
        depth: usize,
        breadth: usize,
        results: &[Vec<RestartResult>],
        data: &[TaskInstance],
        cfg: &ModelConfig,
    ) -> Self {
        let n = results.len().max(1) as f64;
        let sets: Vec<Vec<RestartResult>> = results.iter().map(|r| r[..breadth.min(r.len())].to_vec()).collect();
        let targets: Vec<&[usize]> = data.iter().map(|d| d.target.as_slice()).collect();
        let mean = |f: &dyn Fn(&[RestartResult], &[usize]) -> f64| {
            sets.iter().zip(&targets).map(|(s, t)| f(s, t)).sum::<f64>() / n
        };
        let finite: Vec<f64> = sets
            .iter()
            .flatten()
            .map(|r| r.window_residual)
            .filter(|r| r.is_finite())
            .collect();
        Self {
            depth,
            breadth,
            nfe: nfe(depth, breadth),
            nle: nle(depth, breadth, cfg),
            acc_avg: mean(&|s, t| acc_avg(s, t)),
            top1_conv: mean(&|s, t| f64::from(u8::from(top1_converged(s, t)))),
            majority: mean(&|s, t| f64::from(u8::from(majority_vote(s, t)))),
            mean_residual: if finite.is_empty() {
                f64::INFINITY
            } else {
                finite.iter().sum::<f64>() / finite.len() as f64
            },
            delta_pi: path_independence(&sets, &targets),
        }
    }
}

/// One row per `(D, B)` cell. A single rollout at the largest breadth is
/// decoded at every depth; restart `b` is identical whatever the breadth.
pub fn scale_sweep<T: Scalar>(
    model: &Reasoner<T>,
    data: &[TaskInstance],
    depths: &[usize],
    breadths: &[usize],
    budget: &ScalingBudget,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let max_b = breadths.iter().copied().max().unwrap_or(1);
    let max_d = depths.iter().copied().max().unwrap_or(1);
    let b = ScalingBudget {
        breadth: max_b,
        depth: max_d,
        ..budget.clone()
    };
    let per_depth = evaluate_depths(model, data, depths, &b, seed)?;
    let mut rows = Vec::new();
    for (di, &d) in depths.iter().enumerate() {
        for &br in breadths {
            rows.push(SweepRow::from_results(d, br, &per_depth[di], data, model.config()));
        }
    }
    Ok(rows)
}

/// Output of the ACT queue.
#[derive(Clone, Debug, PartialEq)]
pub struct QueueReport {
    /// One result per instance, in dataset order.
    pub results: Vec<RestartResult>,
    /// Outer steps executed across all slots.
    pub total_steps: u64,
}

impl QueueReport {
    pub fn avg_nfe(&self) -> f64 {
        self.total_steps as f64 / self.results.len().max(1) as f64
    }

    pub fn accuracy(&self, data: &[TaskInstance]) -> f64 {
        let n = self.results.len().max(1) as f64;
        self.results
            .iter()
            .zip(data)
            .filter(|(r, d)| r.is_correct(&d.target))
            .count() as f64
            / n
    }
}

struct Slot<T> {
    instance: usize,
    steps: usize,
    residuals: Vec<f64>,
    z_h: Vec<T>,
    z_l: Vec<T>,
    noise: rand_chacha::ChaCha8Rng,
}

/// Fixed-capacity inference queue: each tick advances every occupied slot by
/// one outer step; a slot halts when its halting logit exceeds the threshold
/// (if ACT is enabled) or after `depth` steps, emits its result and takes the
/// next pending instance. Uses restart 0 of each instance.
pub fn act_queue_eval<T: Scalar>(
    model: &Reasoner<T>,
    data: &[TaskInstance],
    budget: &ScalingBudget,
    seed: u64,
) -> Result<QueueReport> {
    budget.validate()?;
    let m = eval_model(model, budget);
    let cfg = m.config().clone();
    let row_len = cfg.seq_len * cfg.hidden;
    let mut pending: VecDeque<usize> = (0..data.len()).collect();
    let mut slots: Vec<Slot<T>> = Vec::with_capacity(budget.queue_capacity);
    let mut results: Vec<Option<RestartResult>> = vec![None; data.len()];
    let mut total_steps = 0u64;
    let tape = Tape::frozen();
    let bound = m.bind(&tape);
    loop {
        while slots.len() < budget.queue_capacity {
            let Some(i) = pending.pop_front() else { break };
            let row = [Row { instance: i, restart: 0 }];
            let (pair, mut noise) = row_states::<T>(&cfg, seed, &row);
            slots.push(Slot {
                instance: i,
                steps: 0,
                residuals: Vec::new(),
                z_h: pair.z_h.into_data(),
                z_l: pair.z_l.into_data(),
                noise: noise.remove(0),
            });
        }
        if slots.is_empty() {
            break;
        }
        let n = slots.len();
        let shape = vec![n, cfg.seq_len, cfg.hidden];
        let cat = |f: &dyn Fn(&Slot<T>) -> &[T]| slots.iter().flat_map(|s| f(s).iter().copied()).collect::<Vec<T>>();
        let cur = VarPair {
            z_h: Var::from_parts(shape.clone(), cat(&|s| &s.z_h))?,
            z_l: Var::from_parts(shape, cat(&|s| &s.z_l))?,
        };
        let tokens: Vec<usize> = slots.iter().flat_map(|s| data[s.instance].input.iter().copied()).collect();
        let x = bound.embed(&tokens)?;
        let mut noise = RowNoise::new(slots.iter().map(|s| s.noise.clone()).collect());
        let next = bound.outer_step(&cur, &x, &mut noise)?;
        let dist = row_distances(next.z_h.data(), cur.z_h.data(), n);
        let q = bound.q_head(&next.z_h)?;
        let preds = argmax_rows(&bound.lm_head(&next.z_h)?);
        total_steps += n as u64;
        let mut keep = Vec::with_capacity(n);
        for (i, (mut s, rng)) in slots.drain(..).zip(noise.into_rows()).enumerate() {
            s.steps += 1;
            s.noise = rng;
            s.z_h = next.z_h.data()[i * row_len..(i + 1) * row_len].to_vec();
            s.z_l = next.z_l.data()[i * row_len..(i + 1) * row_len].to_vec();
            let finite = s.z_h.iter().chain(&s.z_l).all(|v| v.is_finite());
            s.residuals.push(if finite { dist[i] } else { f64::INFINITY });
            let halted = budget.act_enabled && q.data()[i].as_f64() > budget.halt_threshold;
            if !finite || halted || s.steps >= budget.depth {
                let diverged = (!finite).then_some(s.steps);
                results[s.instance] =
                    Some(finish(&s.residuals, preds[i].clone(), None, s.steps, budget.window, diverged));
            } else {
                keep.push(s);
            }
        }
        slots = keep;
    }
    Ok(QueueReport {
        results: results.into_iter().map(|r| r.expect("every instance is scheduled")).collect(),
        total_steps,
    })
}

/// Exact accuracy of a single deterministic-start run at `depth`.
pub fn exact_accuracy<T: Scalar>(model: &Reasoner<T>, data: &[TaskInstance], depth: usize, seed: u64) -> Result<f64> {
    let budget = ScalingBudget {
        depth,
        window: 1,
        ..ScalingBudget::default()
    };
    let res = evaluate_depths(model, data, &[depth], &budget, seed)?;
    let n = data.len().max(1) as f64;
    Ok(res[0]
        .iter()
        .zip(data)
        .filter(|(r, d)| r[0].is_correct(&d.target))
        .count() as f64
        / n)
}

/// Exact accuracy of a feedforward baseline, evaluated in chunks of `chunk_rows`.
pub fn feedforward_accuracy<T: Scalar>(model: &Feedforward<T>, data: &[TaskInstance], chunk_rows: usize) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in data.chunks(chunk_rows.max(1)) {
        let tokens: Vec<usize> = chunk.iter().flat_map(|d| d.input.iter().copied()).collect();
        let preds = model.predict(&tokens)?;
        correct += preds.iter().zip(chunk).filter(|(p, d)| **p == d.target).count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}
