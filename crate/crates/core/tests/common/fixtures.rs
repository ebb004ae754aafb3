use eqr_core::autodiff::{Tape, Var};
use eqr_core::model::{Bound, LatentPair, Mixer, ModelConfig, Reasoner, UnrollOutput, VarPair};
use eqr_core::rng::{RowNoise, Streams};
use eqr_core::scalar::cast;
use eqr_core::tasks::{generate, TaskInstance, TaskSpec};
use eqr_core::training::{self, Act, GradientCapture, Progress, Schedule, TrainConfig};
use eqr_core::{Result, Scalar};

pub fn tiny_config(mixer: Mixer) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        seq_len: 16,
        hidden: 8,
        n_blocks: 1,
        mixer,
        n_heads: 2,
        expansion: 2,
        token_expansion: 2,
        h_cycles: 2,
        l_cycles: 2,
        outer_steps: 3,
        damping: 0.1,
        noise: 0.05,
        init_sigma_h: 1.0,
        init_sigma_l: 1.0,
        ..ModelConfig::default()
    }
}

pub fn sudoku_batch(n: usize, seed: u64) -> Vec<TaskInstance> {
    generate(&TaskSpec::from_name("sudoku4").unwrap(), n, 0, seed).unwrap().train
}

pub fn tokens_and_targets(batch: &[TaskInstance]) -> (Vec<usize>, Vec<usize>) {
    (
        batch.iter().flat_map(|b| b.input.iter().copied()).collect(),
        batch.iter().flat_map(|b| b.target.iter().copied()).collect(),
    )
}

/// CE on the logits plus BCE of the halting logit against a fixed label.
pub fn head_loss<T: Scalar>(tape: &Tape<T>, out: &UnrollOutput<T>, targets: &[usize]) -> Result<Var<T>> {
    let rows = out.q.len();
    let labels: Vec<T> = (0..rows).map(|i| cast((i % 2) as f64)).collect();
    let ce = tape.softmax_cross_entropy(&out.logits, targets)?;
    let bce = tape.bce_with_logits_weighted(&out.q, &labels, &vec![T::one(); rows])?;
    tape.add(&ce, &bce)
}

pub fn flat_param_grads<T: Scalar>(bound: &Bound<'_, T>, loss: &Var<T>) -> Result<Vec<T>> {
    let grads = bound.tape.backward(loss)?;
    Ok(bound
        .vars
        .iter()
        .flat_map(|v| grads.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); v.len()]))
        .collect())
}

/// Parameter gradients of a `steps`-step truncated unroll, and of a one-step
/// unroll started from the carry of `steps − 1` untracked outer steps.
pub fn truncation_pair(seed: u64, steps: usize) -> (Vec<f32>, Vec<f32>) {
    let cfg = tiny_config(Mixer::MlpMixer);
    let model = Reasoner::<f32>::new(cfg.clone(), seed).unwrap();
    let batch = sudoku_batch(3, seed);
    let (tokens, targets) = tokens_and_targets(&batch);
    let mut streams = Streams::new(seed);
    let (pair, noise) = training::init_state::<f32>(&cfg, batch.len(), &mut streams);

    let full = {
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let x = bound.embed(&tokens).unwrap();
        let out = bound.truncated_unroll(&pair, &x, steps, &mut noise.clone(), false).unwrap();
        let loss = head_loss(&tape, &out, &targets).unwrap();
        flat_param_grads(&bound, &loss).unwrap()
    };

    let mut carry_noise = noise;
    let carry: LatentPair<f32> = {
        let tape = Tape::frozen();
        let bound = model.bind(&tape);
        let x = bound.embed(&tokens).unwrap();
        let mut cur = VarPair::constant(&pair);
        for _ in 1..steps {
            cur = bound.outer_step(&cur, &x, &mut carry_noise).unwrap();
        }
        cur.detach()
    };
    let single = {
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let x = bound.embed(&tokens).unwrap();
        let out = bound.truncated_unroll(&carry, &x, 1, &mut carry_noise, false).unwrap();
        let loss = head_loss(&tape, &out, &targets).unwrap();
        flat_param_grads(&bound, &loss).unwrap()
    };
    (full, single)
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| f64::from((x - y).abs())).fold(0.0, f64::max)
}

/// Gradient captured from one episode of `schedule` on a fixed model and batch.
pub fn episode_gradient(schedule: Schedule, n_sup: usize, anchor_range: Option<[usize; 2]>, seed: u64) -> Vec<f32> {
    let cfg = tiny_config(Mixer::MlpMixer);
    let tc = TrainConfig {
        schedule,
        n_sup,
        anchor_range,
        act: Act::Off,
        ri_enabled: true,
        ni_enabled: true,
        ..TrainConfig::default()
    };
    let mut model = Reasoner::<f32>::new(cfg, seed).unwrap();
    tc.apply_to(model.config_mut());
    let batch = sudoku_batch(4, seed);
    let mut streams = Streams::new(seed);
    let mut cap = GradientCapture::default();
    let mut progress = Progress::default();
    match schedule {
        Schedule::Sot => {
            training::sot_episode(&mut model, &batch, &tc, &mut streams, &mut cap, &mut progress).unwrap();
        }
        Schedule::TrajectorySupervision => {
            training::trajectory_supervision_episode(&mut model, &batch, &tc, &mut streams, &mut cap, &mut progress).unwrap();
        }
        Schedule::Terminal => {
            training::terminal_episode(&mut model, &batch, &tc, &mut streams, &mut cap, &mut progress).unwrap();
        }
    }
    assert_eq!(cap.grads.len(), 1, "one optimizer step per compared episode");
    cap.grads.remove(0)
}

/// `(SOT(N_sup=1) vs terminal, trajectory supervision with only the final
/// anchor vs terminal)` as max absolute gradient differences.
pub fn collapse_gaps(seed: u64) -> (f64, f64) {
    let sot = episode_gradient(Schedule::Sot, 1, None, seed);
    let term1 = episode_gradient(Schedule::Terminal, 1, None, seed);
    let n = 3;
    let traj = episode_gradient(Schedule::TrajectorySupervision, n, Some([n, n]), seed);
    let term = episode_gradient(Schedule::Terminal, n, None, seed);
    (max_abs_diff(&sot, &term1), max_abs_diff(&traj, &term))
}

pub fn row_noise(seed: u64, rows: usize) -> RowNoise {
    RowNoise::family(seed, "test-noise", 0..rows as u64)
}

/// Iterates random affine contractions of constant `lipschitz` from far-away
/// starts and checks `‖z − z*‖ ≤ ‖f(z) − z‖ / (1 − L)` at every iterate until
/// the iterate is within 1e-9 of z*, where rounding takes over.
/// Returns `(states checked, violations)`.
pub fn residual_bound_check(lipschitz: f64, maps: usize, seed: u64) -> (usize, usize) {
    use eqr_core::diagnostics::{fixed_point_residual, AffineMap, StateMap};
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let (mut checked, mut bad) = (0, 0);
    for _ in 0..maps {
        let d = rng.random_range(2..16);
        let z_star: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let map = AffineMap::contraction(d, lipschitz, &z_star, &mut rng).unwrap();
        let mut z: Vec<f64> = (0..d).map(|_| 10.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        while dist(&z, &z_star) > 1e-9 {
            let r = fixed_point_residual(&map, &z).unwrap();
            checked += 1;
            if dist(&z, &z_star) > r / (1.0 - lipschitz) * (1.0 + 1e-12) {
                bad += 1;
            }
            z = map.apply(&z).unwrap();
        }
    }
    (checked, bad)
}
