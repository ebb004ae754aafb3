//! n²×n² Sudoku with unique solutions.
//!
//! Tokens: 0 PAD, 1 blank, `d + 1` for digit d in 1..=9.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TaskInstance;
use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 11;
pub const BLANK: usize = 1;

pub fn digit_token(d: u8) -> usize {
    d as usize + 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SudokuParams {
    /// Box order n; the board is n²×n².
    pub box_order: usize,
    /// Stop removing clues once this many remain; 0 removes down to a minimal puzzle.
    pub target_clues: usize,
    /// Fresh solution grids tried per instance before giving up.
    pub max_retries: usize,
}

impl Default for SudokuParams {
    fn default() -> Self {
        Self {
            box_order: 2,
            target_clues: 0,
            max_retries: 32,
        }
    }
}

/// Board geometry plus a solver over digit grids (0 = empty).
#[derive(Clone, Copy, Debug)]
pub struct Board {
    pub n: usize,
    pub side: usize,
}

impl Board {
    pub fn new(n: usize) -> Result<Self> {
        if !(2..=3).contains(&n) {
            return Err(Error::Config(format!("sudoku box order must be 2 or 3, got {n}")));
        }
        Ok(Self { n, side: n * n })
    }

    pub fn cells(&self) -> usize {
        self.side * self.side
    }

    fn candidates(&self, grid: &[u8], cell: usize) -> u16 {
        let (r, c) = (cell / self.side, cell % self.side);
        let mut used = 0u16;
        for i in 0..self.side {
            used |= 1 << grid[r * self.side + i];
            used |= 1 << grid[i * self.side + c];
        }
        let (br, bc) = (r / self.n * self.n, c / self.n * self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                used |= 1 << grid[(br + i) * self.side + bc + j];
            }
        }
        let all = ((1u16 << (self.side + 1)) - 1) & !1;
        all & !used
    }

    /// Empty cell with the fewest candidates.
    fn pick(&self, grid: &[u8]) -> Option<(usize, u16)> {
        let mut best: Option<(usize, u16)> = None;
        for cell in (0..self.cells()).filter(|&c| grid[c] == 0) {
            let cand = self.candidates(grid, cell);
            if best.is_none_or(|(_, b)| cand.count_ones() < b.count_ones()) {
                best = Some((cell, cand));
                if cand.count_ones() <= 1 {
                    break;
                }
            }
        }
        best
    }

    /// Number of completions, stopping at `limit`, and the number of
    /// backtracking nodes visited.
    pub fn count_solutions(&self, grid: &[u8], limit: usize) -> (usize, usize) {
        let mut g = grid.to_vec();
        let mut nodes = 0;
        let count = self.count_rec(&mut g, limit, &mut nodes);
        (count, nodes)
    }

    fn count_rec(&self, g: &mut [u8], limit: usize, nodes: &mut usize) -> usize {
        *nodes += 1;
        let Some((cell, cand)) = self.pick(g) else {
            return 1;
        };
        let mut total = 0;
        for d in 1..=self.side as u8 {
            if cand & (1 << d) != 0 {
                g[cell] = d;
                total += self.count_rec(g, limit - total, nodes);
                g[cell] = 0;
                if total >= limit {
                    break;
                }
            }
        }
        total
    }

    /// A uniformly shuffled complete grid.
    pub fn random_solution<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u8> {
        let mut g = vec![0u8; self.cells()];
        let filled = self.fill_rec(&mut g, rng);
        debug_assert!(filled);
        g
    }

    fn fill_rec<R: Rng + ?Sized>(&self, g: &mut [u8], rng: &mut R) -> bool {
        let Some((cell, cand)) = self.pick(g) else {
            return true;
        };
        let mut digits: Vec<u8> = (1..=self.side as u8).filter(|d| cand & (1 << d) != 0).collect();
        digits.shuffle(rng);
        for d in digits {
            g[cell] = d;
            if self.fill_rec(g, rng) {
                return true;
            }
        }
        g[cell] = 0;
        false
    }

    /// Complete grid satisfying every row, column and box constraint.
    pub fn is_solved(&self, grid: &[u8]) -> bool {
        grid.len() == self.cells()
            && grid.iter().all(|&d| d >= 1 && d as usize <= self.side)
            && (0..self.cells()).all(|cell| {
                let mut g = grid.to_vec();
                let d = g[cell];
                g[cell] = 0;
                self.candidates(&g, cell) & (1 << d) != 0
            })
    }
}

/// Digits from tokens; blanks and PAD read as 0.
pub fn tokens_to_digits(tokens: &[usize]) -> Vec<u8> {
    tokens
        .iter()
        .map(|&t| if t >= 2 { (t - 1) as u8 } else { 0 })
        .collect()
}

pub fn digits_to_tokens(digits: &[u8]) -> Vec<usize> {
    digits
        .iter()
        .map(|&d| if d == 0 { BLANK } else { digit_token(d) })
        .collect()
}

/// One puzzle: a random solution with clues removed while uniqueness holds.
pub fn generate_one<R: Rng + ?Sized>(params: &SudokuParams, rng: &mut R) -> Result<TaskInstance> {
    let board = Board::new(params.box_order)?;
    for _ in 0..params.max_retries.max(1) {
        let solution = board.random_solution(rng);
        let mut puzzle = solution.clone();
        let mut order: Vec<usize> = (0..board.cells()).collect();
        order.shuffle(rng);
        let mut clues = board.cells();
        for cell in order {
            if clues <= params.target_clues {
                break;
            }
            let d = puzzle[cell];
            puzzle[cell] = 0;
            if board.count_solutions(&puzzle, 2).0 == 1 {
                clues -= 1;
            } else {
                puzzle[cell] = d;
            }
        }
        if clues > params.target_clues && params.target_clues > 0 {
            continue;
        }
        let (_, nodes) = board.count_solutions(&puzzle, 2);
        return Ok(TaskInstance {
            input: digits_to_tokens(&puzzle),
            target: digits_to_tokens(&solution),
            grid: (board.side, board.side),
            vocab_size: VOCAB_SIZE,
            difficulty: Some(nodes as f64),
        });
    }
    Err(Error::Generation(format!(
        "no puzzle with {} clues after {} retries",
        params.target_clues, params.max_retries
    )))
}

/// Prediction is a solved grid that agrees with every clue of `input`.
pub fn is_valid(board: &Board, input: &[usize], prediction: &[usize]) -> bool {
    let digits = tokens_to_digits(prediction);
    if prediction.iter().any(|&t| t < 2) || !board.is_solved(&digits) {
        return false;
    }
    input
        .iter()
        .zip(prediction)
        .all(|(&i, &p)| i == BLANK || i == p)
}
