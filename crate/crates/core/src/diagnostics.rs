//! Attractor instrumentation: residuals, output margin, local contraction
//! estimates and 2D projections of latent trajectories.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::inference::{restart_stream_index, Row};
use crate::model::{argmax_rows, LatentPair, Reasoner, VarPair};
use crate::rng::{self, RowNoise};
use crate::scalar::{cast, Scalar};
use crate::tasks::TaskInstance;
use crate::tensor::{l2, l2_dist};

pub const POWER_TOL: f64 = 1e-8;
pub const POWER_MAX_ITERS: usize = 1000;

/// A deterministic map on flat state vectors.
pub trait StateMap {
    fn dim(&self) -> usize;
    fn apply(&self, z: &[f64]) -> Result<Vec<f64>>;
}

/// `‖f(z) − z‖₂`.
pub fn fixed_point_residual<M: StateMap + ?Sized>(map: &M, z: &[f64]) -> Result<f64> {
    Ok(l2_dist(&map.apply(z)?, z))
}

/// `‖z_t − z_{t−1}‖₂` for consecutive states.
pub fn rollout_residual_trace(states: &[Vec<f64>]) -> Result<Vec<f64>> {
    if states.len() < 2 {
        return Err(Error::Config("a residual trace needs at least two states".into()));
    }
    Ok(states.windows(2).map(|w| l2_dist(&w[1], &w[0])).collect())
}

/// Minimum over positions of the target logit minus the best competitor.
/// `logits` is `[positions, vocab]` row-major.
pub fn output_margin<T: Scalar>(logits: &[T], vocab: usize, target: &[usize]) -> Result<f64> {
    if vocab < 2 || logits.len() != target.len() * vocab {
        return Err(Error::shape(
            "output_margin",
            format!("{} logits for {} positions of vocab {vocab}", logits.len(), target.len()),
        ));
    }
    let mut gamma = f64::INFINITY;
    for (row, &t) in logits.chunks(vocab).zip(target) {
        if t >= vocab {
            return Err(Error::Index {
                what: "target",
                index: t,
                bound: vocab,
            });
        }
        let best_other = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != t)
            .map(|(_, v)| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        gamma = gamma.min(row[t].as_f64() - best_other);
    }
    Ok(gamma)
}

/// Margin of the reasoner's decoding from `z_h` (`[seq, hidden]`).
pub fn model_margin<T: Scalar>(model: &Reasoner<T>, z_h: &[T], target: &[usize]) -> Result<f64> {
    let cfg = model.config();
    let tape = Tape::frozen();
    let bound = model.bind(&tape);
    let z = Var::from_parts(vec![1, cfg.seq_len, cfg.hidden], z_h.to_vec())?;
    let logits = bound.lm_head(&z)?;
    output_margin(logits.data(), cfg.vocab_size, target)
}

/// Largest observed `‖f(z₁) − f(z₂)‖ / ‖z₁ − z₂‖` over `n_pairs` Gaussian
/// perturbations of `center` with scale `radius`; a lower bound on the local
/// Lipschitz constant. Zero-distance pairs are skipped; `None` if all were.
pub fn contraction_probe<M: StateMap + ?Sized, R: Rng + ?Sized>(
    map: &M,
    center: &[f64],
    n_pairs: usize,
    radius: f64,
    rng: &mut R,
) -> Result<Option<f64>> {
    if n_pairs == 0 {
        return Err(Error::Config("contraction_probe needs at least one pair".into()));
    }
    let perturb = |rng: &mut R| -> Vec<f64> {
        center
            .iter()
            .map(|&c| {
                let e: f64 = StandardNormal.sample(rng);
                c + radius * e
            })
            .collect()
    };
    let mut best: Option<f64> = None;
    for _ in 0..n_pairs {
        let (a, b) = (perturb(rng), perturb(rng));
        let d = l2_dist(&a, &b);
        if d == 0.0 {
            continue;
        }
        let ratio = l2_dist(&map.apply(&a)?, &map.apply(&b)?) / d;
        best = Some(best.map_or(ratio, |m: f64| m.max(ratio)));
    }
    Ok(best)
}

/// Dense affine map `z ↦ A z + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    pub dim: usize,
    /// Row-major `dim × dim`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl AffineMap {
    pub fn new(dim: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != dim * dim || b.len() != dim {
            return Err(Error::shape("affine_map", format!("dim {dim}, |A| {}, |b| {}", a.len(), b.len())));
        }
        Ok(Self { dim, a, b })
    }

    /// `L·Q` for a random orthogonal `Q`, with offset chosen so `z_star` is fixed.
    /// The operator norm is exactly `lipschitz`.
    pub fn contraction<R: Rng + ?Sized>(dim: usize, lipschitz: f64, z_star: &[f64], rng: &mut R) -> Result<Self> {
        let q = random_orthogonal(dim, rng);
        let a: Vec<f64> = q.iter().map(|v| v * lipschitz).collect();
        let az = matvec(&a, dim, z_star);
        let b = z_star.iter().zip(&az).map(|(z, y)| z - y).collect();
        Self::new(dim, a, b)
    }

    pub fn matvec(&self, z: &[f64]) -> Vec<f64> {
        matvec(&self.a, self.dim, z)
    }
}

impl StateMap for AffineMap {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim {
            return Err(Error::shape("affine_map", format!("state of {} for dim {}", z.len(), self.dim)));
        }
        Ok(self.matvec(z).iter().zip(&self.b).map(|(y, b)| y + b).collect())
    }
}

fn matvec(a: &[f64], dim: usize, z: &[f64]) -> Vec<f64> {
    a.chunks(dim).map(|row| row.iter().zip(z).map(|(x, y)| x * y).sum()).collect()
}

fn random_orthogonal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    // Gram-Schmidt on Gaussian rows.
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for r in &rows {
                let p: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = l2(&v);
        if n > 1e-8 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    rows.concat()
}

/// Largest singular value of a row-major `rows × cols` matrix.
pub fn spectral_norm(a: &[f64], rows: usize, cols: usize) -> f64 {
    assert_eq!(a.len(), rows * cols, "matrix buffer does not match its shape");
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut sigma = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let av: Vec<f64> = a.chunks(cols).map(|r| r.iter().zip(&v).map(|(x, y)| x * y).sum()).collect();
        let mut atav = vec![0.0; cols];
        for (r, s) in a.chunks(cols).zip(&av) {
            atav.iter_mut().zip(r).for_each(|(o, x)| *o += x * s);
        }
        let n = l2(&atav);
        if n == 0.0 {
            return 0.0;
        }
        let next = n.sqrt();
        v = atav.into_iter().map(|x| x / n).collect();
        if (next - sigma).abs() <= POWER_TOL * next {
            return next;
        }
        sigma = next;
    }
    sigma
}

/// One outer step of a reasoner (λ = 0, β = 0) on the concatenated
/// `(z_H, z_L)` state of a single instance.
pub struct ReasonerMap<'m, T: Scalar> {
    model: &'m Reasoner<T>,
    tokens: Vec<usize>,
}

impl<'m, T: Scalar> ReasonerMap<'m, T> {
    pub fn new(model: &'m Reasoner<T>, instance: &TaskInstance) -> Self {
        Self {
            model,
            tokens: instance.input.clone(),
        }
    }

    fn split(&self, z: &[f64]) -> Result<VarPair<T>> {
        let c = self.model.config();
        let n = c.seq_len * c.hidden;
        if z.len() != 2 * n {
            return Err(Error::shape("reasoner_map", format!("state of {} for dim {}", z.len(), 2 * n)));
        }
        let to = |s: &[f64]| Var::from_parts(vec![1, c.seq_len, c.hidden], s.iter().map(|&v| cast::<T>(v)).collect());
        Ok(VarPair {
            z_h: to(&z[..n])?,
            z_l: to(&z[n..])?,
        })
    }
}

impl<T: Scalar> StateMap for ReasonerMap<'_, T> {
    fn dim(&self) -> usize {
        let c = self.model.config();
        2 * c.seq_len * c.hidden
    }

    fn apply(&self, z: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::frozen();
        let bound = self.model.bind(&tape);
        let x = bound.embed(&self.tokens)?;
        let next = bound.operator(&self.split(z)?, &x)?;
        Ok(next.z_h.data().iter().chain(next.z_l.data()).map(|v| v.as_f64()).collect())
    }
}

/// A latent state visited by one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajPoint {
    pub traj: usize,
    pub instance: usize,
    pub restart: usize,
    /// 0 for the initial state.
    pub step: usize,
    /// Flattened z_H.
    pub state: Vec<f64>,
    /// Flattened z_L.
    pub low: Vec<f64>,
    /// Rollout residual entering this state (0 at step 0).
    pub residual: f64,
    pub correct: bool,
}

/// Runs each `(instance, restart)` pair for `depth` deterministic-dynamics
/// steps, keeping the latents at every boundary. Initializations use the restart
/// streams of the inference module, so trajectories match scaling runs.
pub fn collect_trajectories<T: Scalar>(
    model: &Reasoner<T>,
    data: &[TaskInstance],
    rows: &[Row],
    depth: usize,
    seed: u64,
) -> Result<Vec<TrajPoint>> {
    let cfg = model.config();
    let n = rows.len();
    let row_len = cfg.seq_len * cfg.hidden;
    let tape = Tape::frozen();
    let bound = model.bind(&tape);
    let tokens: Vec<usize> = rows.iter().flat_map(|r| data[r.instance].input.iter().copied()).collect();
    let x = bound.embed(&tokens)?;
    let ids: Vec<u64> = rows.iter().map(|r| restart_stream_index(r.instance, r.restart)).collect();
    let pair = if cfg.init_sigma_h > 0.0 || cfg.init_sigma_l > 0.0 {
        let mut init = RowNoise::family(seed, rng::RESTART, ids.iter().copied());
        LatentPair::sample(cfg, cfg.init_sigma_h, cfg.init_sigma_l, &mut init)
    } else {
        LatentPair::zeros(n, cfg)
    };
    let mut noise = RowNoise::family(seed, rng::RESTART_NOISE, ids);
    let mut cur = VarPair::constant(&pair);
    let mut points = Vec::with_capacity(n * (depth + 1));
    let mut push = |cur: &VarPair<T>, step: usize, resid: &[f64], correct: &[bool]| {
        for (i, r) in rows.iter().enumerate() {
            points.push(TrajPoint {
                traj: i,
                instance: r.instance,
                restart: r.restart,
                step,
                state: cur.z_h.data()[i * row_len..(i + 1) * row_len].iter().map(|v| v.as_f64()).collect(),
                low: cur.z_l.data()[i * row_len..(i + 1) * row_len].iter().map(|v| v.as_f64()).collect(),
                residual: resid[i],
                correct: correct[i],
            });
        }
    };
    let decode = |z: &VarPair<T>| -> Result<Vec<bool>> {
        let preds = argmax_rows(&bound.lm_head(&z.z_h)?);
        Ok(rows.iter().zip(preds).map(|(r, p)| p == data[r.instance].target).collect())
    };
    push(&cur, 0, &vec![0.0; n], &decode(&cur)?);
    for k in 1..=depth {
        let next = bound.outer_step(&cur, &x, &mut noise)?;
        let resid = crate::model::row_distances(next.z_h.data(), cur.z_h.data(), n);
        push(&next, k, &resid, &decode(&next)?);
        cur = next;
    }
    Ok(points)
}

/// Principal axes of a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit principal directions, largest variance first.
    pub components: Vec<Vec<f64>>,
    /// Covariance eigenvalues matching `components`.
    pub eigenvalues: Vec<f64>,
    /// Fewer than the requested components carried variance.
    pub rank_deficient: bool,
}

impl Pca {
    /// Top `k` principal directions by power iteration with deflation on the
    /// covariance `XᵀX / n` of the centred data, applied implicitly.
    pub fn fit<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::Config("projection needs at least three states".into()));
        }
        let d = points[0].len();
        if points.iter().any(|p| p.len() != d) {
            return Err(Error::shape("pca", "states differ in length"));
        }
        let n = points.len() as f64;
        let mut mean = vec![0.0; d];
        for p in points {
            mean.iter_mut().zip(p).for_each(|(m, v)| *m += v / n);
        }
        let centred: Vec<Vec<f64>> = points
            .iter()
            .map(|p| p.iter().zip(&mean).map(|(v, m)| v - m).collect())
            .collect();
        let total: f64 = centred.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n;
        let cov_mul = |v: &[f64], found: &[Vec<f64>], vals: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; d];
            for c in &centred {
                let s: f64 = c.iter().zip(v).map(|(a, b)| a * b).sum();
                out.iter_mut().zip(c).for_each(|(o, x)| *o += s * x / n);
            }
            for (u, &lam) in found.iter().zip(vals) {
                let s: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                out.iter_mut().zip(u).for_each(|(o, x)| *o -= lam * s * x);
            }
            out
        };
        let mut components: Vec<Vec<f64>> = Vec::new();
        let mut eigenvalues = Vec::new();
        let mut rank_deficient = false;
        for _ in 0..k.min(d) {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let nv = l2(&v);
            v.iter_mut().for_each(|x| *x /= nv);
            let mut lam = 0.0;
            for _ in 0..POWER_MAX_ITERS {
                let w = cov_mul(&v, &components, &eigenvalues);
                let nw = l2(&w);
                if nw == 0.0 {
                    lam = 0.0;
                    break;
                }
                let next: Vec<f64> = w.iter().map(|x| x / nw).collect();
                let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                v = next;
                lam = nw;
                if delta < POWER_TOL {
                    break;
                }
            }
            if lam <= 1e-12 * total.max(f64::MIN_POSITIVE) {
                rank_deficient = true;
                break;
            }
            // Fix the sign so the largest-magnitude coordinate is positive.
            let big = v
                .iter()
                .enumerate()
                .fold(0, |b, (i, x)| if x.abs() > v[b].abs() { i } else { b });
            if v[big] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            let rq: f64 = {
                let w = cov_mul(&v, &[], &[]);
                w.iter().zip(&v).map(|(a, b)| a * b).sum()
            };
            components.push(v);
            eigenvalues.push(rq);
        }
        Ok(Self {
            mean,
            components,
            eigenvalues,
            rank_deficient,
        })
    }

    /// Coordinates of `p` along each component.
    pub fn project(&self, p: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|u| u.iter().zip(p).zip(&self.mean).map(|((a, x), m)| a * (x - m)).sum())
            .collect()
    }
}

/// Fits a 2-component PCA to all states and writes
/// `traj_id,step,pc1,pc2,residual,correct`. Returns the fit.
pub fn project_trajectories<W: Write, R: Rng + ?Sized>(points: &[TrajPoint], out: &mut W, rng: &mut R) -> Result<Pca> {
    let states: Vec<Vec<f64>> = points.iter().map(|p| p.state.clone()).collect();
    let pca = Pca::fit(&states, 2, rng)?;
    writeln!(out, "traj_id,step,pc1,pc2,residual,correct")?;
    for p in points {
        let c = pca.project(&p.state);
        let pc = |i: usize| c.get(i).copied().unwrap_or(0.0);
        writeln!(out, "{},{},{},{},{},{}", p.traj, p.step, pc(0), pc(1), p.residual, u8::from(p.correct))?;
    }
    Ok(pca)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scale(f64, usize);
    impl StateMap for Scale {
        fn dim(&self) -> usize {
            self.1
        }
        fn apply(&self, z: &[f64]) -> Result<Vec<f64>> {
            Ok(z.iter().map(|v| v * self.0).collect())
        }
    }

    #[test]
    fn identity_has_zero_residual() {
        assert_eq!(fixed_point_residual(&Scale(1.0, 3), &[1.0, -2.0, 5.0]).unwrap(), 0.0);
    }

    #[test]
    fn affine_fixed_point_has_zero_residual() {
        let mut r = rng::stream(1, "t", 0);
        let z_star = vec![0.3, -1.0, 2.0, 0.5];
        let m = AffineMap::contraction(4, 0.7, &z_star, &mut r).unwrap();
        assert!(fixed_point_residual(&m, &z_star).unwrap() < 1e-12);
        assert!((spectral_norm(&m.a, 4, 4) - 0.7).abs() < 1e-9);
    }

    #[test]
    fn trace_of_frozen_state_is_zero() {
        let s = vec![vec![1.0, 2.0]; 4];
        let t = rollout_residual_trace(&s).unwrap();
        assert_eq!(t, vec![0.0; 3]);
        assert!(rollout_residual_trace(&s[..1]).is_err());
    }

    #[test]
    fn margin_examples() {
        let mut logits = vec![0.0f64; 6];
        logits[1] = 10.0;
        logits[3 + 2] = 10.0;
        assert_eq!(output_margin(&logits, 3, &[1, 2]).unwrap(), 10.0);
        logits[3] = 12.0;
        assert_eq!(output_margin(&logits, 3, &[1, 2]).unwrap(), -2.0);
    }

    #[test]
    fn probe_on_scaling_and_isometry() {
        let mut r = rng::stream(2, "t", 0);
        let c = vec![0.0; 5];
        let est = contraction_probe(&Scale(0.5, 5), &c, 20, 0.1, &mut r).unwrap().unwrap();
        assert!((est - 0.5).abs() < 1e-4);
        let iso = AffineMap::contraction(5, 1.0, &c, &mut r).unwrap();
        let est = contraction_probe(&iso, &c, 20, 0.1, &mut r).unwrap().unwrap();
        assert!((est - 1.0).abs() < 1e-9);
        assert!(contraction_probe(&iso, &c, 0, 0.1, &mut r).is_err());
        assert_eq!(contraction_probe(&iso, &c, 3, 0.0, &mut r).unwrap(), None);
    }

    #[test]
    fn planar_data_projects_isometrically() {
        let mut r = rng::stream(3, "t", 0);
        let u = [1.0, 2.0, 0.0, -1.0];
        let v = [0.0, 1.0, 1.0, 1.0];
        let pts: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let (a, b) = ((i as f64).sin() * 3.0, (i as f64 * 0.7).cos());
                (0..4).map(|j| 5.0 + a * u[j] + b * v[j]).collect()
            })
            .collect();
        let pca = Pca::fit(&pts, 2, &mut r).unwrap();
        let proj: Vec<Vec<f64>> = pts.iter().map(|p| pca.project(p)).collect();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let d0 = l2_dist(&pts[i], &pts[j]);
                let d1 = l2_dist(&proj[i], &proj[j]);
                assert!((d0 - d1).abs() < 1e-6 * (1.0 + d0));
            }
        }
        let pca3 = Pca::fit(&pts, 3, &mut r).unwrap();
        assert!(pca3.rank_deficient);
        assert_eq!(pca3.components.len(), 2);
    }
}
