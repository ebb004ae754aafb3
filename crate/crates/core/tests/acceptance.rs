//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test -p eqr-core --test acceptance` prints the report; the test
//! fails if any criterion fails.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use common::fixtures::{collapse_gaps, residual_bound_check, truncation_pair};
use common::grad::{all_cases, worst_error, TOLERANCE, TRIALS};
use common::oracles;
use eqr_core::inference::{
    act_queue_eval, evaluate_depths, exact_accuracy, feedforward_accuracy, nfe, nle, path_independence, spearman,
    RestartResult, ScalingBudget, SweepRow,
};
use eqr_core::model::{Feedforward, ModelConfig, Reasoner};
use eqr_core::optim::OptimConfig;
use eqr_core::tasks::{generate, MazeParams, SudokuParams, TaskInstance, TaskSpec};
use eqr_core::training::{Act, FeedforwardTrainer, Schedule, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// Desk recipe for criteria 7-10.
const TRAIN_SIZE: usize = 2000;
const VAL_SIZE: usize = 256;
const TEST_SIZE: usize = 256;
const DATA_SEED: u64 = 11;
const MODEL_SEED: u64 = 1;
const TRAIN_SEED: u64 = 5;
const EVAL_SEED: u64 = 3;
const STEPS: u64 = 2000;
const LR: f64 = 3e-4;
const N_SUP: usize = 8;
const OUTER_STEPS: usize = 4;
const DEPTHS: [usize; 5] = [4, 8, 16, 32, 64];
const DELTAS: [f64; 9] = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0];

struct Report {
    failed: Vec<usize>,
}

impl Report {
    fn line(&mut self, id: usize, title: &str, pass: bool, detail: String) {
        // Written to the handle directly so the report shows without --nocapture.
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{} {id:>2} {title}: {detail}", if pass { "PASS" } else { "FAIL" });
        let _ = out.flush();
        if !pass {
            self.failed.push(id);
        }
    }
}

fn gradients(r: &mut Report) {
    let t0 = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    for case in all_cases() {
        let e = worst_error(case.as_ref(), TRIALS, 17);
        if e > worst.1 {
            worst = (case.name().to_string(), e);
        }
    }
    let dt = t0.elapsed();
    r.line(
        1,
        "gradient correctness",
        worst.1 < TOLERANCE && dt < Duration::from_secs(60),
        format!(
            "{} ops x {TRIALS} trials, worst rel err {:.2e} ({}), {:.1?}",
            all_cases().len(),
            worst.1,
            worst.0,
            dt
        ),
    );
}

fn truncation(r: &mut Report) {
    let (full, single) = truncation_pair(7, 5);
    let nonzero = full.iter().filter(|g| **g != 0.0).count();
    r.line(
        2,
        "truncation contract",
        full == single && nonzero > 0,
        format!("T=5 vs T=1 from detached carry, {} grads bitwise equal: {}", full.len(), full == single),
    );
}

fn collapse(r: &mut Report) {
    let (sot, traj) = collapse_gaps(7);
    r.line(
        3,
        "schedule collapse",
        sot <= 1e-6 && traj <= 1e-6,
        format!("max |Δgrad| SOT(1)-terminal {sot:.1e}, final-anchor trajectory-terminal {traj:.1e}"),
    );
}

fn datasets(r: &mut Report) {
    let t0 = Instant::now();
    let maze = TaskSpec::Maze(MazeParams::default());
    let (rows, cols) = maze.grid();
    let mazes = generate(&maze, 1000, 0, 1).unwrap().train;
    let unique_paths = mazes
        .iter()
        .filter(|m| oracles::maze_shortest_path_count(&m.input, rows, cols) == 1)
        .count();
    let sudoku = TaskSpec::Sudoku(SudokuParams::default());
    let puzzles = generate(&sudoku, 1000, 0, 1).unwrap().train;
    let unique_solutions = puzzles
        .iter()
        .filter(|p| oracles::sudoku_solution_count(&mut oracles::sudoku_digits(&p.input), 2) == 1)
        .count();
    let dt = t0.elapsed();
    r.line(
        4,
        "dataset oracles",
        unique_paths == 1000 && unique_solutions == 1000 && dt < Duration::from_secs(300),
        format!("{unique_paths}/1000 mazes with one shortest path, {unique_solutions}/1000 sudokus with one solution, {dt:.1?}"),
    );
}

fn metrics(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut mismatches = 0;
    let sets = 2000;
    let mut group: Vec<(Vec<RestartResult>, Vec<usize>)> = Vec::new();
    for i in 0..sets {
        let (set, t) = oracles::random_restart_set(&mut rng);
        mismatches += usize::from(eqr_core::inference::acc_avg(&set, &t) != oracles::acc_avg(&set, &t));
        mismatches += usize::from(eqr_core::inference::top1_converged(&set, &t) != oracles::top1(&set, &t));
        mismatches += usize::from(eqr_core::inference::majority_vote(&set, &t) != oracles::majority(&set, &t));
        group.push((set, t));
        if i % 10 == 9 {
            let (s, t): (Vec<_>, Vec<_>) = std::mem::take(&mut group).into_iter().unzip();
            let refs: Vec<&[usize]> = t.iter().map(Vec::as_slice).collect();
            mismatches += usize::from(path_independence(&s, &refs) != oracles::delta_pi(&s, &t));
        }
    }
    r.line(
        5,
        "metric oracles",
        mismatches == 0,
        format!("{sets} restart sets, {} Δ_PI groups, {mismatches} mismatches", sets / 10),
    );
}

fn accounting(r: &mut Report) {
    let cfg = ModelConfig::sudoku();
    let got = (nfe(64, 128), nle(1024, 1, &cfg), nle(64, 128, &cfg));
    r.line(
        6,
        "accounting",
        got == (8192, 43_008, 344_064),
        format!("nfe(64,128)={} nle(1024,1)={} nle(64,128)={}", got.0, got.1, got.2),
    );
}

fn residual_bound(r: &mut Report) {
    let mut parts = Vec::new();
    let mut ok = true;
    for (i, lip) in [0.3, 0.7, 0.9].into_iter().enumerate() {
        let (checked, bad) = residual_bound_check(lip, 50, 100 + i as u64);
        ok &= bad == 0 && checked > 0;
        parts.push(format!("L={lip}: {bad}/{checked} violations"));
    }
    r.line(11, "residual bound", ok, parts.join(", "));
}

struct Desk {
    val: Vec<TaskInstance>,
    test: Vec<TaskInstance>,
    ri: Reasoner<f32>,
    fixed: Reasoner<f32>,
    feedforward: Feedforward<f32>,
    train_time: Duration,
}

fn desk_config() -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        vocab_size: 11,
        seq_len: 16,
        hidden: 32,
        n_blocks: 2,
        h_cycles: 2,
        l_cycles: 2,
        outer_steps: OUTER_STEPS,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        schedule: Schedule::Sot,
        n_sup: N_SUP,
        act: Act::Learned,
        batch_size: 64,
        total_steps: STEPS,
        optim: OptimConfig {
            lr: LR,
            weight_decay: 0.1,
            warmup_steps: 100,
            ..OptimConfig::default()
        },
        ..TrainConfig::default()
    };
    (model, train)
}

fn train_desk() -> Desk {
    let spec = TaskSpec::Sudoku(SudokuParams {
        box_order: 2,
        target_clues: 0,
        max_retries: 64,
    });
    let data = generate(&spec, TRAIN_SIZE, VAL_SIZE + TEST_SIZE, DATA_SEED).unwrap();
    let (val, test) = data.test.split_at(VAL_SIZE);
    let (mc, tc) = desk_config();
    let t0 = Instant::now();
    let reasoner = |tc: TrainConfig| {
        let mut t = Trainer::<f32>::new(Reasoner::new(mc.clone(), MODEL_SEED).unwrap(), tc, TRAIN_SEED).unwrap();
        t.run(&data.train, |_, _| {}).unwrap();
        t.model
    };
    let ri = reasoner(tc.clone());
    let fixed = reasoner(TrainConfig {
        ri_enabled: false,
        ..tc.clone()
    });
    let ff = Feedforward::<f32>::new(mc.clone(), mc.equivalent_layers(), MODEL_SEED).unwrap();
    let mut ft = FeedforwardTrainer::new(ff, &tc, TRAIN_SEED).unwrap();
    ft.run(&data.train, |_| {}).unwrap();
    Desk {
        val: val.to_vec(),
        test: test.to_vec(),
        ri,
        fixed,
        feedforward: ft.model,
        train_time: t0.elapsed(),
    }
}

fn construction_path(r: &mut Report, desk: &Desk) {
    let depth = N_SUP * OUTER_STEPS;
    let sot = exact_accuracy(&desk.ri, &desk.test, depth, EVAL_SEED).unwrap();
    let ff = feedforward_accuracy(&desk.feedforward, &desk.test, 64).unwrap();
    let gap = 100.0 * (sot - ff);
    r.line(
        7,
        "construction path",
        sot > ff && gap >= 10.0 && desk.train_time <= Duration::from_secs(1800),
        format!(
            "SOT {:.1}% (D={depth}) vs feedforward {:.1}%, gap {gap:.1} pts, training {:.0?}",
            100.0 * sot,
            100.0 * ff,
            desk.train_time
        ),
    );
}

/// Accuracy of restart 0 and mean fixed-point residual per depth in `DEPTHS`.
fn depth_profile(model: &Reasoner<f32>, data: &[TaskInstance]) -> Vec<(f64, f64)> {
    let budget = ScalingBudget {
        depth: *DEPTHS.last().unwrap(),
        fixed_point: true,
        ..ScalingBudget::default()
    };
    evaluate_depths(model, data, &DEPTHS, &budget, EVAL_SEED)
        .unwrap()
        .iter()
        .map(|per_depth| {
            let n = per_depth.len() as f64;
            let acc = per_depth.iter().zip(data).filter(|(r, d)| r[0].is_correct(&d.target)).count() as f64 / n;
            let fp = per_depth.iter().map(|r| r[0].fixed_point.unwrap_or(f64::INFINITY)).sum::<f64>() / n;
            (acc, fp)
        })
        .collect()
}

fn depth_scaling(r: &mut Report, profile: &[(f64, f64)]) {
    let at = |d: usize| profile[DEPTHS.iter().position(|&x| x == d).unwrap()];
    let (a8, f8) = at(8);
    let (a32, f32_) = at(32);
    let residuals: Vec<f64> = profile.iter().map(|p| p.1).collect();
    let errors: Vec<f64> = profile.iter().map(|p| 1.0 - p.0).collect();
    let rho = spearman(&residuals, &errors);
    let trace: Vec<String> = DEPTHS
        .iter()
        .zip(profile)
        .map(|(d, (a, f))| format!("D={d} {:.1}%/{f:.3}", 100.0 * a))
        .collect();
    r.line(
        8,
        "depth scaling",
        f32_ <= f8 && a32 >= a8 - 0.01 && rho > 0.0,
        format!(
            "residual D32 {f32_:.3} <= D8 {f8:.3}, acc D32 {:.1}% vs D8 {:.1}%, spearman {rho:.2} [{}]",
            100.0 * a32,
            100.0 * a8,
            trace.join(", ")
        ),
    );
}

fn path_independence_gap(r: &mut Report, desk: &Desk) {
    let depth = N_SUP * OUTER_STEPS;
    let budget = ScalingBudget {
        depth,
        breadth: 8,
        init_sigma: Some(1.0),
        ..ScalingBudget::default()
    };
    let delta = |m: &Reasoner<f32>| {
        let res = evaluate_depths(m, &desk.test, &[depth], &budget, EVAL_SEED).unwrap();
        SweepRow::from_results(depth, 8, &res[0], &desk.test, m.config()).delta_pi
    };
    let (ri, fixed) = (delta(&desk.ri), delta(&desk.fixed));
    r.line(
        9,
        "random init lowers Δ_PI",
        ri < fixed,
        format!("Δ_PI(B=8, D={depth}) RI {ri:.4} vs fixed init {fixed:.4}"),
    );
}

fn act_efficiency(r: &mut Report, desk: &Desk, act_off_test: f64) {
    let depth = 64;
    let queue = |data: &[TaskInstance], delta: f64| {
        let budget = ScalingBudget {
            depth,
            act_enabled: true,
            halt_threshold: delta,
            ..ScalingBudget::default()
        };
        let q = act_queue_eval(&desk.ri, data, &budget, EVAL_SEED).unwrap();
        (q.accuracy(data), q.avg_nfe())
    };
    // δ is chosen on the validation split only.
    let off_val = exact_accuracy(&desk.ri, &desk.val, depth, EVAL_SEED).unwrap();
    let delta = DELTAS
        .into_iter()
        .find(|&d| {
            let (acc, nfe) = queue(&desk.val, d);
            acc >= off_val - 0.01 && nfe < 0.5 * depth as f64
        })
        .unwrap_or(DELTAS[DELTAS.len() - 1]);
    let (acc, avg_nfe) = queue(&desk.test, delta);
    let drop = 100.0 * (act_off_test - acc);
    r.line(
        10,
        "ACT efficiency",
        avg_nfe < 0.5 * depth as f64 && drop <= 2.0,
        format!(
            "δ={delta} (validation), avg NFE {avg_nfe:.2} of D={depth}, acc {:.1}% vs ACT-off {:.1}% (drop {drop:.1} pts)",
            100.0 * acc,
            100.0 * act_off_test
        ),
    );
}

#[test]
fn acceptance() {
    let mut r = Report { failed: Vec::new() };
    gradients(&mut r);
    truncation(&mut r);
    collapse(&mut r);
    datasets(&mut r);
    metrics(&mut r);
    accounting(&mut r);

    let desk = train_desk();
    construction_path(&mut r, &desk);
    let profile = depth_profile(&desk.ri, &desk.test);
    depth_scaling(&mut r, &profile);
    path_independence_gap(&mut r, &desk);
    act_efficiency(&mut r, &desk, profile[DEPTHS.len() - 1].0);

    residual_bound(&mut r);
    r.failed.sort_unstable();
    assert!(r.failed.is_empty(), "failed criteria: {:?}", r.failed);
}
