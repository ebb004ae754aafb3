//! Perfect mazes on a wall grid with a unique start-to-goal path.
//!
//! Cells sit at odd coordinates of an odd-sized grid; carving a spanning tree
//! between them leaves exactly one simple path between any two open squares.
//! Even dimensions are handled by padding the last row or column with walls.
//! Tokens: 0 PAD, 1 wall, 2 open, 3 start, 4 goal, 5 path.

use std::collections::VecDeque;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TaskInstance;
use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 6;
pub const WALL: usize = 1;
pub const OPEN: usize = 2;
pub const START: usize = 3;
pub const GOAL: usize = 4;
pub const PATH: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MazeParams {
    pub rows: usize,
    pub cols: usize,
    /// Inclusive bounds on the number of path squares strictly between start and goal.
    pub min_path: usize,
    pub max_path: usize,
    /// Start/goal pairs tried per maze before carving a new one.
    pub pair_tries: usize,
    /// Mazes carved per instance before giving up.
    pub max_retries: usize,
}

impl Default for MazeParams {
    fn default() -> Self {
        Self {
            rows: 9,
            cols: 9,
            min_path: 1,
            max_path: usize::MAX,
            pair_tries: 64,
            max_retries: 256,
        }
    }
}

impl MazeParams {
    pub fn validate(&self) -> Result<()> {
        if self.rows < 5 || self.cols < 5 {
            return Err(Error::Config(format!("maze must be at least 5x5, got {}x{}", self.rows, self.cols)));
        }
        if self.min_path > self.max_path {
            return Err(Error::Config("maze min_path exceeds max_path".into()));
        }
        Ok(())
    }
}

/// Largest odd extent not exceeding `n`.
fn odd_extent(n: usize) -> usize {
    if n % 2 == 1 {
        n
    } else {
        n - 1
    }
}

/// Wall layout as open/wall flags, row-major, `rows × cols`.
pub fn carve<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Vec<bool> {
    let (r_odd, c_odd) = (odd_extent(rows), odd_extent(cols));
    let (cr, cc) = ((r_odd - 1) / 2, (c_odd - 1) / 2);
    let mut open = vec![false; rows * cols];
    let mut seen = vec![false; cr * cc];
    let at = |i: usize, j: usize| (2 * i + 1) * cols + 2 * j + 1;
    let start = (rng.random_range(0..cr), rng.random_range(0..cc));
    let mut stack = vec![start];
    seen[start.0 * cc + start.1] = true;
    open[at(start.0, start.1)] = true;
    while let Some(&(i, j)) = stack.last() {
        let mut nbrs = Vec::with_capacity(4);
        if i > 0 {
            nbrs.push((i - 1, j));
        }
        if i + 1 < cr {
            nbrs.push((i + 1, j));
        }
        if j > 0 {
            nbrs.push((i, j - 1));
        }
        if j + 1 < cc {
            nbrs.push((i, j + 1));
        }
        nbrs.retain(|&(a, b)| !seen[a * cc + b]);
        match nbrs.choose(rng) {
            Some(&(a, b)) => {
                seen[a * cc + b] = true;
                open[at(a, b)] = true;
                open[(i + a + 1) * cols + (j + b + 1)] = true;
                stack.push((a, b));
            }
            None => {
                stack.pop();
            }
        }
    }
    open
}

fn neighbours(p: usize, rows: usize, cols: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (p / cols, p % cols);
    [
        (r > 0).then(|| p - cols),
        (r + 1 < rows).then(|| p + cols),
        (c > 0).then(|| p - 1),
        (c + 1 < cols).then(|| p + 1),
    ]
    .into_iter()
    .flatten()
}

/// BFS distance to `goal` and the number of distinct shortest paths.
pub fn count_shortest_paths(open: &[bool], rows: usize, cols: usize, start: usize, goal: usize) -> Option<(usize, u64)> {
    let mut dist = vec![usize::MAX; open.len()];
    let mut ways = vec![0u64; open.len()];
    dist[start] = 0;
    ways[start] = 1;
    let mut q = VecDeque::from([start]);
    while let Some(p) = q.pop_front() {
        for n in neighbours(p, rows, cols) {
            if !open[n] {
                continue;
            }
            if dist[n] == usize::MAX {
                dist[n] = dist[p] + 1;
                q.push_back(n);
            }
            if dist[n] == dist[p] + 1 {
                ways[n] = ways[n].saturating_add(ways[p]);
            }
        }
    }
    (dist[goal] != usize::MAX).then(|| (dist[goal], ways[goal]))
}

/// Squares on the shortest path, start and goal included, in order.
pub fn shortest_path(open: &[bool], rows: usize, cols: usize, start: usize, goal: usize) -> Option<Vec<usize>> {
    let mut prev = vec![usize::MAX; open.len()];
    prev[start] = start;
    let mut q = VecDeque::from([start]);
    while let Some(p) = q.pop_front() {
        if p == goal {
            break;
        }
        for n in neighbours(p, rows, cols) {
            if open[n] && prev[n] == usize::MAX {
                prev[n] = p;
                q.push_back(n);
            }
        }
    }
    if prev[goal] == usize::MAX {
        return None;
    }
    let mut path = vec![goal];
    while *path.last().unwrap() != start {
        path.push(prev[*path.last().unwrap()]);
    }
    path.reverse();
    Some(path)
}

/// Open/wall flags recovered from input or target tokens.
pub fn layout_of(tokens: &[usize]) -> Vec<bool> {
    tokens.iter().map(|&t| t != WALL && t != 0).collect()
}

/// One instance; the maze layout is returned for de-duplication.
pub fn generate_one<R: Rng + ?Sized>(params: &MazeParams, rng: &mut R) -> Result<TaskInstance> {
    params.validate()?;
    let (rows, cols) = (params.rows, params.cols);
    for _ in 0..params.max_retries.max(1) {
        let open = carve(rows, cols, rng);
        let cells: Vec<usize> = (0..open.len())
            .filter(|&p| open[p] && (p / cols) % 2 == 1 && (p % cols) % 2 == 1)
            .collect();
        for _ in 0..params.pair_tries.max(1) {
            let s = *cells.choose(rng).expect("maze has cells");
            let g = *cells.choose(rng).expect("maze has cells");
            if s == g {
                continue;
            }
            let path = shortest_path(&open, rows, cols, s, g).expect("perfect maze is connected");
            let interior = path.len() - 2;
            if interior < params.min_path || interior > params.max_path {
                continue;
            }
            let mut input: Vec<usize> = open.iter().map(|&o| if o { OPEN } else { WALL }).collect();
            input[s] = START;
            input[g] = GOAL;
            let mut target = input.clone();
            for &p in &path[1..path.len() - 1] {
                target[p] = PATH;
            }
            return Ok(TaskInstance {
                input,
                target,
                grid: (rows, cols),
                vocab_size: VOCAB_SIZE,
                difficulty: Some(interior as f64),
            });
        }
    }
    Err(Error::Generation(format!(
        "no start/goal pair with path length in [{}, {}] after {} mazes",
        params.min_path, params.max_path, params.max_retries
    )))
}

/// Number of path squares strictly between start and goal in a target.
pub fn path_length(target: &[usize]) -> usize {
    target.iter().filter(|&&t| t == PATH).count()
}

/// The marked path connects start to goal through open squares as a simple
/// chain and is a shortest route.
pub fn is_valid(rows: usize, cols: usize, input: &[usize], prediction: &[usize]) -> bool {
    if input.len() != rows * cols || prediction.len() != input.len() {
        return false;
    }
    let Some(start) = input.iter().position(|&t| t == START) else {
        return false;
    };
    let Some(goal) = input.iter().position(|&t| t == GOAL) else {
        return false;
    };
    for (&i, &p) in input.iter().zip(prediction) {
        let ok = match i {
            OPEN => p == OPEN || p == PATH,
            _ => p == i,
        };
        if !ok {
            return false;
        }
    }
    let on = |p: usize| prediction[p] == PATH || p == start || p == goal;
    let degree = |p: usize| neighbours(p, rows, cols).filter(|&n| on(n)).count();
    if degree(start) != 1 || degree(goal) != 1 {
        return false;
    }
    let marked: Vec<usize> = (0..prediction.len()).filter(|&p| prediction[p] == PATH).collect();
    if marked.iter().any(|&p| degree(p) != 2) {
        return false;
    }
    // Walk from start; a simple chain visits every marked square.
    let (mut prev, mut cur, mut steps) = (usize::MAX, start, 0);
    while cur != goal {
        let next = neighbours(cur, rows, cols).find(|&n| on(n) && n != prev);
        match next {
            Some(n) => {
                prev = cur;
                cur = n;
                steps += 1;
            }
            None => return false,
        }
        if steps > prediction.len() {
            return false;
        }
    }
    let open = layout_of(input);
    steps == marked.len() + 1
        && count_shortest_paths(&open, rows, cols, start, goal).is_some_and(|(d, _)| d == steps)
}
