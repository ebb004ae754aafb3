//! Brute-force references written without the library's helpers.

use std::collections::VecDeque;

use eqr_core::inference::RestartResult;

pub fn correct(r: &RestartResult, target: &[usize]) -> bool {
    r.diverged_at.is_none() && r.prediction == target
}

pub fn acc_avg(rs: &[RestartResult], target: &[usize]) -> f64 {
    let mut hits = 0usize;
    for r in rs {
        if correct(r, target) {
            hits += 1;
        }
    }
    if rs.is_empty() {
        0.0
    } else {
        hits as f64 / rs.len() as f64
    }
}

/// Restart `i` whose residual is not beaten by any other restart, where an
/// equal residual at a lower index beats it.
pub fn top1(rs: &[RestartResult], target: &[usize]) -> bool {
    let winner = (0..rs.len()).find(|&i| {
        (0..rs.len()).all(|j| {
            j == i || rs[i].window_residual < rs[j].window_residual || (rs[i].window_residual == rs[j].window_residual && i < j)
        })
    });
    winner.is_some_and(|i| correct(&rs[i], target))
}

/// Counts every sequence, keeps the highest count, and among the sequences
/// with that count picks the one seen first.
pub fn majority(rs: &[RestartResult], target: &[usize]) -> bool {
    let counts: Vec<usize> = rs
        .iter()
        .map(|r| rs.iter().filter(|o| o.prediction == r.prediction).count())
        .collect();
    let Some(&top) = counts.iter().max() else {
        return false;
    };
    let first = counts.iter().position(|&c| c == top).unwrap();
    correct(&rs[first], target)
}

pub fn delta_pi(sets: &[Vec<RestartResult>], targets: &[Vec<usize>]) -> f64 {
    if sets.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (rs, t) in sets.iter().zip(targets) {
        let single = if correct(&rs[0], t) { 1.0 } else { 0.0 };
        total += (acc_avg(rs, t) - single).abs();
    }
    total / sets.len() as f64
}

/// Number of distinct shortest start-to-goal routes through non-wall squares,
/// by BFS layering with path counts. Tokens: 1 wall, 3 start, 4 goal.
pub fn maze_shortest_path_count(input: &[usize], rows: usize, cols: usize) -> u64 {
    let start = input.iter().position(|&t| t == 3).expect("start");
    let goal = input.iter().position(|&t| t == 4).expect("goal");
    let mut dist = vec![usize::MAX; input.len()];
    let mut ways = vec![0u64; input.len()];
    dist[start] = 0;
    ways[start] = 1;
    let mut queue = VecDeque::from([start]);
    while let Some(p) = queue.pop_front() {
        let (r, c) = ((p / cols) as i64, (p % cols) as i64);
        for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
            let (nr, nc) = (r + dr, c + dc);
            if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                continue;
            }
            let q = nr as usize * cols + nc as usize;
            if input[q] == 1 || input[q] == 0 {
                continue;
            }
            if dist[q] == usize::MAX {
                dist[q] = dist[p] + 1;
                queue.push_back(q);
            }
            if dist[q] == dist[p] + 1 {
                ways[q] += ways[p];
            }
        }
    }
    ways[goal]
}

/// All completions of a `side × side` digit grid (0 = empty), counted by
/// plain backtracking over cells in order.
pub fn sudoku_solution_count(grid: &mut [u8], box_order: usize) -> usize {
    let side = box_order * box_order;
    let Some(cell) = grid.iter().position(|&d| d == 0) else {
        return 1;
    };
    let (r, c) = (cell / side, cell % side);
    let mut total = 0;
    for d in 1..=side as u8 {
        let clash = (0..side).any(|i| {
            let (br, bc) = (r / box_order * box_order + i / box_order, c / box_order * box_order + i % box_order);
            grid[r * side + i] == d || grid[i * side + c] == d || grid[br * side + bc] == d
        });
        if !clash {
            grid[cell] = d;
            total += sudoku_solution_count(grid, box_order);
            grid[cell] = 0;
        }
    }
    total
}

/// Token grid to digits; tokens 0 and 1 are empty, `d + 1` is digit d.
pub fn sudoku_digits(tokens: &[usize]) -> Vec<u8> {
    tokens.iter().map(|&t| if t >= 2 { (t - 1) as u8 } else { 0 }).collect()
}

/// A restart set of size 1..=6 over three candidate answers and three
/// residual levels, so ties in both selections are common.
pub fn random_restart_set<R: rand::Rng>(rng: &mut R) -> (Vec<RestartResult>, Vec<usize>) {
    let target = vec![2, 3, 4];
    let answers = [target.clone(), vec![2, 3, 5], vec![5, 5, 5]];
    let b = rng.random_range(1..=6);
    let set = (0..b)
        .map(|_| {
            let diverged = rng.random_bool(0.1);
            RestartResult {
                prediction: if diverged { Vec::new() } else { answers[rng.random_range(0..3)].clone() },
                window_residual: [0.1, 0.2, 0.3][rng.random_range(0..3)],
                halt_step: 4,
                residuals: Vec::new(),
                fixed_point: None,
                diverged_at: diverged.then_some(2),
            }
        })
        .collect();
    (set, target)
}
