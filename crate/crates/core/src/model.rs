//! The weight-tied update operator, its hierarchical latent loop and the
//! truncated unroll used by every training schedule, plus the untied
//! feedforward baseline built from the same blocks.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::{self, RowNoise};
use crate::scalar::{cast, Scalar};
use crate::tensor::{l2_dist, Tensor};

/// Initial bias of the halting head; keeps early training from halting at once.
pub const Q_BIAS_INIT: f64 = -5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixer {
    MlpMixer,
    SelfAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub hidden: usize,
    pub n_blocks: usize,
    pub mixer: Mixer,
    pub n_heads: usize,
    /// Channel MLP expansion factor.
    pub expansion: usize,
    /// Token-mixing MLP expansion factor (mlp_mixer only).
    pub token_expansion: usize,
    pub h_cycles: usize,
    pub l_cycles: usize,
    /// Outer steps per truncated unroll (T).
    pub outer_steps: usize,
    /// Damping λ in [0, 1).
    pub damping: f64,
    /// Noise scale β ≥ 0.
    pub noise: f64,
    /// Standard deviation of the randomized z_H initialization; 0 means zeros.
    pub init_sigma_h: f64,
    /// Standard deviation of the randomized z_L initialization; 0 means zeros.
    pub init_sigma_l: f64,
    pub rms_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 11,
            seq_len: 16,
            hidden: 32,
            n_blocks: 2,
            mixer: Mixer::MlpMixer,
            n_heads: 4,
            expansion: 4,
            token_expansion: 4,
            h_cycles: 2,
            l_cycles: 2,
            outer_steps: 4,
            damping: 0.0,
            noise: 0.0,
            init_sigma_h: 1.0,
            init_sigma_l: 1.0,
            rms_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Full-scale 9×9 Sudoku configuration.
    pub fn sudoku() -> Self {
        Self {
            vocab_size: 11,
            seq_len: 81,
            hidden: 512,
            n_blocks: 2,
            mixer: Mixer::MlpMixer,
            h_cycles: 3,
            l_cycles: 6,
            outer_steps: 16,
            ..Self::default()
        }
    }

    /// Full-scale 30×30 maze configuration.
    pub fn maze() -> Self {
        Self {
            vocab_size: 6,
            seq_len: 900,
            hidden: 128,
            n_blocks: 1,
            mixer: Mixer::SelfAttention,
            n_heads: 8,
            h_cycles: 3,
            l_cycles: 4,
            outer_steps: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size == 0 || self.seq_len == 0 || self.hidden == 0 || self.n_blocks == 0 {
            return bad("vocab_size, seq_len, hidden and n_blocks must be positive");
        }
        if self.outer_steps == 0 || self.h_cycles == 0 || self.l_cycles == 0 {
            return bad("outer_steps, h_cycles and l_cycles must be at least 1");
        }
        if self.mixer == Mixer::SelfAttention && (self.n_heads == 0 || !self.hidden.is_multiple_of(self.n_heads)) {
            return bad("hidden must be divisible by n_heads for self_attention");
        }
        if !(0.0..1.0).contains(&self.damping) {
            return bad("damping must lie in [0, 1)");
        }
        if self.noise < 0.0 || self.init_sigma_h < 0.0 || self.init_sigma_l < 0.0 {
            return bad("noise and init scales must be non-negative");
        }
        if self.expansion == 0 || self.token_expansion == 0 {
            return bad("expansion factors must be positive");
        }
        Ok(())
    }

    /// Block applications per outer step: `n_blocks · H_cycles · (L_cycles + 1)`.
    pub fn equivalent_layers(&self) -> usize {
        self.n_blocks * self.h_cycles * (self.l_cycles + 1)
    }
}

/// Hierarchical latent state, batched as `[batch, seq_len, hidden]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair<T> {
    pub z_h: Tensor<T>,
    pub z_l: Tensor<T>,
}

impl<T: Scalar> LatentPair<T> {
    pub fn zeros(batch: usize, cfg: &ModelConfig) -> Self {
        let shape = [batch, cfg.seq_len, cfg.hidden];
        Self {
            z_h: Tensor::zeros(&shape),
            z_l: Tensor::zeros(&shape),
        }
    }

    /// Gaussian initialization drawn row by row from `init`; a zero scale
    /// gives zeros for that state without consuming randomness.
    pub fn sample(cfg: &ModelConfig, sigma_h: f64, sigma_l: f64, init: &mut RowNoise) -> Self {
        let batch = init.rows();
        let shape = vec![batch, cfg.seq_len, cfg.hidden];
        let row = cfg.seq_len * cfg.hidden;
        let mut draw = |sigma: f64| {
            if sigma == 0.0 {
                Tensor::zeros(&shape)
            } else {
                Tensor::new(shape.clone(), init.sample(row, sigma)).expect("shape matches")
            }
        };
        let z_h = draw(sigma_h);
        let z_l = draw(sigma_l);
        Self { z_h, z_l }
    }

    pub fn batch(&self) -> usize {
        self.z_h.shape()[0]
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            z_h: self.z_h.select_rows(rows),
            z_l: self.z_l.select_rows(rows),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.z_h.data().iter().chain(self.z_l.data()).all(|v| v.is_finite())
    }
}

/// Latent pair as tape values.
#[derive(Clone, Debug)]
pub struct VarPair<T> {
    pub z_h: Var<T>,
    pub z_l: Var<T>,
}

impl<T: Scalar> VarPair<T> {
    pub fn constant(pair: &LatentPair<T>) -> Self {
        Self {
            z_h: Var::constant(&pair.z_h),
            z_l: Var::constant(&pair.z_l),
        }
    }

    pub fn detach(&self) -> LatentPair<T> {
        LatentPair {
            z_h: self.z_h.to_tensor(),
            z_l: self.z_l.to_tensor(),
        }
    }
}

/// Per-row Euclidean distance between two `[batch, ...]` buffers.
pub fn row_distances<T: Scalar>(a: &[T], b: &[T], batch: usize) -> Vec<f64> {
    let row = a.len() / batch.max(1);
    (0..batch)
        .map(|i| l2_dist(&a[i * row..(i + 1) * row], &b[i * row..(i + 1) * row]))
        .collect()
}

fn latent_finite<T: Scalar>(pair: &VarPair<T>) -> bool {
    pair.z_h.is_finite() && pair.z_l.is_finite()
}

#[derive(Clone, Debug)]
struct BlockLayout {
    mixer: MixerLayout,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
enum MixerLayout {
    Token { w1: usize, b1: usize, w2: usize, b2: usize },
    Attention { wq: usize, wk: usize, wv: usize, wo: usize },
}

fn build_block<T: Scalar, R: rand::Rng + ?Sized>(
    params: &mut ParamStore<T>,
    cfg: &ModelConfig,
    prefix: &str,
    rng: &mut R,
) -> BlockLayout {
    let (s, h) = (cfg.seq_len, cfg.hidden);
    let mixer = match cfg.mixer {
        Mixer::MlpMixer => {
            let e = s * cfg.token_expansion;
            MixerLayout::Token {
                w1: params.linear(&format!("{prefix}.token.w1"), s, e, rng),
                b1: params.bias(&format!("{prefix}.token.b1"), e),
                w2: params.linear(&format!("{prefix}.token.w2"), e, s, rng),
                b2: params.bias(&format!("{prefix}.token.b2"), s),
            }
        }
        Mixer::SelfAttention => MixerLayout::Attention {
            wq: params.linear(&format!("{prefix}.attn.wq"), h, h, rng),
            wk: params.linear(&format!("{prefix}.attn.wk"), h, h, rng),
            wv: params.linear(&format!("{prefix}.attn.wv"), h, h, rng),
            wo: params.linear(&format!("{prefix}.attn.wo"), h, h, rng),
        },
    };
    let e = h * cfg.expansion;
    BlockLayout {
        mixer,
        w1: params.linear(&format!("{prefix}.mlp.w1"), h, e, rng),
        b1: params.bias(&format!("{prefix}.mlp.b1"), e),
        w2: params.linear(&format!("{prefix}.mlp.w2"), e, h, rng),
        b2: params.bias(&format!("{prefix}.mlp.b2"), h),
    }
}

fn linear<T: Scalar>(tape: &Tape<T>, x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let y = tape.matmul(x, w)?;
    tape.add_broadcast(&y, b)
}

fn mlp<T: Scalar>(tape: &Tape<T>, x: &Var<T>, w1: &Var<T>, b1: &Var<T>, w2: &Var<T>, b2: &Var<T>) -> Result<Var<T>> {
    let hdn = tape.gelu(&linear(tape, x, w1, b1)?);
    linear(tape, &hdn, w2, b2)
}

/// One `[mixer → add → norm → MLP → add → norm]` block on `[batch, seq, hidden]`.
fn apply_block<T: Scalar>(
    tape: &Tape<T>,
    cfg: &ModelConfig,
    vars: &[Var<T>],
    layout: &BlockLayout,
    x: &Var<T>,
) -> Result<Var<T>> {
    let eps: T = cast(cfg.rms_eps);
    let mixed = match &layout.mixer {
        MixerLayout::Token { w1, b1, w2, b2 } => {
            let t = tape.swap_axes(x, 1, 2)?;
            let t = mlp(tape, &t, &vars[*w1], &vars[*b1], &vars[*w2], &vars[*b2])?;
            tape.swap_axes(&t, 1, 2)?
        }
        MixerLayout::Attention { wq, wk, wv, wo } => self_attention(tape, cfg, x, [&vars[*wq], &vars[*wk], &vars[*wv], &vars[*wo]])?,
    };
    let x = tape.rms_norm(&tape.add(x, &mixed)?, eps);
    let m = mlp(tape, &x, &vars[layout.w1], &vars[layout.b1], &vars[layout.w2], &vars[layout.b2])?;
    Ok(tape.rms_norm(&tape.add(&x, &m)?, eps))
}

fn self_attention<T: Scalar>(tape: &Tape<T>, cfg: &ModelConfig, x: &Var<T>, w: [&Var<T>; 4]) -> Result<Var<T>> {
    let (b, s, h) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let nh = cfg.n_heads;
    let dh = h / nh;
    let heads = |v: Var<T>| -> Result<Var<T>> {
        let v = tape.reshape(&v, &[b, s, nh, dh])?;
        let v = tape.swap_axes(&v, 1, 2)?;
        tape.reshape(&v, &[b * nh, s, dh])
    };
    let q = heads(tape.matmul(x, w[0])?)?;
    let k = heads(tape.matmul(x, w[1])?)?;
    let v = heads(tape.matmul(x, w[2])?)?;
    let scores = tape.scale(&tape.bmm(&q, &k, true)?, cast(1.0 / (dh as f64).sqrt()));
    let att = tape.softmax(&scores);
    let o = tape.bmm(&att, &v, false)?;
    let o = tape.reshape(&o, &[b, nh, s, dh])?;
    let o = tape.swap_axes(&o, 1, 2)?;
    let o = tape.reshape(&o, &[b, s, h])?;
    tape.matmul(&o, w[3])
}

#[derive(Clone, Debug)]
struct Layout {
    embed: usize,
    pos: Option<usize>,
    blocks: Vec<BlockLayout>,
    lm_w: usize,
    lm_b: usize,
    q_w: usize,
    q_b: usize,
}

/// Weight-tied iterative reasoner.
#[derive(Clone, Debug)]
pub struct Reasoner<T> {
    config: ModelConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

fn build_io<T: Scalar, R: rand::Rng + ?Sized>(
    params: &mut ParamStore<T>,
    cfg: &ModelConfig,
    rng: &mut R,
) -> (usize, Option<usize>) {
    let h = cfg.hidden;
    let embed = params.push("embed", Tensor::randn(&[cfg.vocab_size, h], 1.0 / (h as f64).sqrt(), rng));
    let pos = (cfg.mixer == Mixer::SelfAttention)
        .then(|| params.push("pos_embed", Tensor::randn(&[cfg.seq_len, h], 1.0 / (h as f64).sqrt(), rng)));
    (embed, pos)
}

fn embed_tokens<T: Scalar>(
    tape: &Tape<T>,
    cfg: &ModelConfig,
    vars: &[Var<T>],
    embed: usize,
    pos: Option<usize>,
    tokens: &[usize],
) -> Result<Var<T>> {
    if !tokens.len().is_multiple_of(cfg.seq_len) {
        return Err(Error::shape(
            "embed",
            format!("{} tokens is not a multiple of seq_len {}", tokens.len(), cfg.seq_len),
        ));
    }
    let b = tokens.len() / cfg.seq_len;
    let e = tape.embedding(&vars[embed], tokens)?;
    let e = tape.scale(&e, cast((cfg.hidden as f64).sqrt()));
    let e = tape.reshape(&e, &[b, cfg.seq_len, cfg.hidden])?;
    match pos {
        Some(p) => tape.add_broadcast(&e, &vars[p]),
        None => Ok(e),
    }
}

impl<T: Scalar> Reasoner<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, rng::PARAMS, 0);
        let mut params = ParamStore::new();
        let (embed, pos) = build_io(&mut params, &config, &mut rng);
        let blocks = (0..config.n_blocks)
            .map(|i| build_block(&mut params, &config, &format!("block{i}"), &mut rng))
            .collect();
        let lm_w = params.linear("lm_head.w", config.hidden, config.vocab_size, &mut rng);
        let lm_b = params.bias("lm_head.b", config.vocab_size);
        let q_w = params.push("q_head.w", Tensor::zeros(&[config.hidden, 1]));
        let q_b = params.push("q_head.b", Tensor::full(&[1], cast(Q_BIAS_INIT)));
        Ok(Self {
            config,
            params,
            layout: Layout {
                embed,
                pos,
                blocks,
                lm_w,
                lm_b,
                q_w,
                q_b,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Mutable config access for inference-time knobs (damping, noise, init scales).
    pub fn config_mut(&mut self) -> &mut ModelConfig {
        &mut self.config
    }

    /// Copy of the model carrying other parameter values (e.g. EMA shadows).
    pub fn with_values(&self, values: &[Vec<T>]) -> Result<Self> {
        let mut m = self.clone();
        m.params.load_values(values)?;
        Ok(m)
    }

    pub fn bind<'t>(&'t self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            tape,
            cfg: &self.config,
            layout: &self.layout,
            vars: self.params.bind(tape),
            block_calls: Cell::new(0),
        }
    }
}

/// A reasoner whose parameters are registered on a tape.
pub struct Bound<'t, T: Scalar> {
    pub tape: &'t Tape<T>,
    cfg: &'t ModelConfig,
    layout: &'t Layout,
    pub vars: Vec<Var<T>>,
    block_calls: Cell<usize>,
}

/// Result of one truncated unroll.
#[derive(Clone, Debug)]
pub struct UnrollOutput<T> {
    /// `[batch, seq_len, vocab]`.
    pub logits: Var<T>,
    /// `[batch]` halting logits.
    pub q: Var<T>,
    pub pair: LatentPair<T>,
    /// Per row, `‖z_Hᵏ − z_Hᵏ⁻¹‖₂` for each of the T outer steps.
    pub residuals: Vec<Vec<f64>>,
    /// Per row, `‖f(z) − z‖₂` on z_H at the final state, when requested.
    pub fixed_point: Option<Vec<f64>>,
}

impl<T: Scalar> UnrollOutput<T> {
    /// Argmax token per position, per row.
    pub fn predictions(&self) -> Vec<Vec<usize>> {
        argmax_rows(&self.logits)
    }
}

/// Argmax over the vocabulary axis of `[batch, seq, vocab]` logits.
pub fn argmax_rows<T: Scalar>(logits: &Var<T>) -> Vec<Vec<usize>> {
    let shape = logits.shape();
    let (b, s, v) = (shape[0], shape[1], shape[2]);
    let data = logits.data();
    (0..b)
        .map(|i| {
            (0..s)
                .map(|p| {
                    let row = &data[(i * s + p) * v..(i * s + p + 1) * v];
                    let mut best = 0;
                    for (j, &x) in row.iter().enumerate() {
                        if x > row[best] {
                            best = j;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect()
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    /// Number of `block_forward` evaluations so far.
    pub fn block_calls(&self) -> usize {
        self.block_calls.get()
    }

    /// Token embedding scaled by √hidden (plus learned positions for attention).
    /// `tokens` holds `batch · seq_len` ids.
    pub fn embed(&self, tokens: &[usize]) -> Result<Var<T>> {
        embed_tokens(self.tape, self.cfg, &self.vars, self.layout.embed, self.layout.pos, tokens)
    }

    /// `f_θ(h; cond)`: the shared block stack applied to `h + cond`.
    pub fn block_forward(&self, h: &Var<T>, cond: &Var<T>) -> Result<Var<T>> {
        self.block_calls.set(self.block_calls.get() + 1);
        let mut x = self.tape.add(h, cond)?;
        for b in &self.layout.blocks {
            x = apply_block(self.tape, self.cfg, &self.vars, b, &x)?;
        }
        Ok(x)
    }

    /// `z + (1 − λ)(f(z, cond) − z) + β·ε`, with ε drawn per row from `noise`.
    pub fn iter_step(&self, z: &Var<T>, cond: &Var<T>, lambda: f64, beta: f64, noise: &mut RowNoise) -> Result<Var<T>> {
        let f = self.block_forward(z, cond)?;
        let mut out = if lambda == 0.0 {
            f
        } else {
            self.tape.lerp(z, &f, cast(lambda))?
        };
        if beta > 0.0 {
            let row = z.len() / noise.rows().max(1);
            let eps = Var::from_parts(z.shape().to_vec(), noise.sample(row, beta))?;
            out = self.tape.add(&out, &eps)?;
        }
        Ok(out)
    }

    /// L_cycles updates of z_L conditioned on `x + z_H`, then one z_H update
    /// conditioned on z_L.
    pub fn latent_loop(&self, pair: &VarPair<T>, x: &Var<T>, noise: &mut RowNoise) -> Result<VarPair<T>> {
        let (lambda, beta) = (self.cfg.damping, self.cfg.noise);
        let mut z_l = pair.z_l.clone();
        for _ in 0..self.cfg.l_cycles {
            let cond = self.tape.add(x, &pair.z_h)?;
            z_l = self.iter_step(&z_l, &cond, lambda, beta, noise)?;
        }
        let z_h = self.iter_step(&pair.z_h, &z_l, lambda, beta, noise)?;
        Ok(VarPair { z_h, z_l })
    }

    /// One outer step: H_cycles latent loops.
    pub fn outer_step(&self, pair: &VarPair<T>, x: &Var<T>, noise: &mut RowNoise) -> Result<VarPair<T>> {
        let mut p = self.latent_loop(pair, x, noise)?;
        for _ in 1..self.cfg.h_cycles {
            p = self.latent_loop(&p, x, noise)?;
        }
        Ok(p)
    }

    /// Deterministic outer step (λ = 0, β = 0), never recorded.
    pub fn operator(&self, pair: &VarPair<T>, x: &Var<T>) -> Result<VarPair<T>> {
        self.tape.no_grad(|| {
            let mut silent = RowNoise::new(Vec::new());
            let mut p = pair.clone();
            for _ in 0..self.cfg.h_cycles {
                let mut z_l = p.z_l.clone();
                for _ in 0..self.cfg.l_cycles {
                    let cond = self.tape.add(x, &p.z_h)?;
                    z_l = self.iter_step(&z_l, &cond, 0.0, 0.0, &mut silent)?;
                }
                let z_h = self.iter_step(&p.z_h, &z_l, 0.0, 0.0, &mut silent)?;
                p = VarPair { z_h, z_l };
            }
            Ok(p)
        })
    }

    /// Per-row `‖f(z) − z‖₂` on z_H.
    pub fn fixed_point_residual(&self, pair: &VarPair<T>, x: &Var<T>) -> Result<Vec<f64>> {
        let next = self.operator(pair, x)?;
        Ok(row_distances(next.z_h.data(), pair.z_h.data(), pair.z_h.shape()[0]))
    }

    pub fn lm_head(&self, z_h: &Var<T>) -> Result<Var<T>> {
        linear(self.tape, z_h, &self.vars[self.layout.lm_w], &self.vars[self.layout.lm_b])
    }

    /// Mean-pools z_H over positions and maps to one logit per row.
    pub fn q_head(&self, z_h: &Var<T>) -> Result<Var<T>> {
        let pooled = self.tape.mean_axis1(z_h)?;
        let q = linear(self.tape, &pooled, &self.vars[self.layout.q_w], &self.vars[self.layout.q_b])?;
        let b = q.shape()[0];
        self.tape.reshape(&q, &[b])
    }

    /// T − 1 outer steps without gradient, then one tracked outer step, then
    /// both heads on z_H. Rows are checked for finiteness at every boundary.
    pub fn truncated_unroll(
        &self,
        pair: &LatentPair<T>,
        x: &Var<T>,
        steps: usize,
        noise: &mut RowNoise,
        measure_fixed_point: bool,
    ) -> Result<UnrollOutput<T>> {
        if steps == 0 {
            return Err(Error::Config("truncated_unroll needs at least one outer step".into()));
        }
        let batch = pair.batch();
        let mut residuals = vec![Vec::with_capacity(steps); batch];
        let mut cur = VarPair::constant(pair);
        for k in 0..steps {
            let next = if k + 1 < steps {
                self.tape.no_grad(|| self.outer_step(&cur, x, noise))?
            } else {
                self.outer_step(&cur, x, noise)?
            };
            if !latent_finite(&next) {
                return Err(Error::Divergence { step: k + 1 });
            }
            for (r, d) in residuals
                .iter_mut()
                .zip(row_distances(next.z_h.data(), cur.z_h.data(), batch))
            {
                r.push(d);
            }
            cur = next;
        }
        let logits = self.lm_head(&cur.z_h)?;
        let q = self.q_head(&cur.z_h)?;
        let fixed_point = if measure_fixed_point {
            Some(self.fixed_point_residual(&cur, x)?)
        } else {
            None
        };
        Ok(UnrollOutput {
            logits,
            q,
            pair: cur.detach(),
            residuals,
            fixed_point,
        })
    }
}

/// Untied baseline: `n_layers` distinct blocks applied once to the embedding.
#[derive(Clone, Debug)]
pub struct Feedforward<T> {
    config: ModelConfig,
    pub params: ParamStore<T>,
    embed: usize,
    pos: Option<usize>,
    blocks: Vec<BlockLayout>,
    lm_w: usize,
    lm_b: usize,
}

impl<T: Scalar> Feedforward<T> {
    /// Each layer is one block of the configured kind, so the model performs
    /// `n_layers` block applications per forward pass.
    pub fn new(config: ModelConfig, n_layers: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, rng::PARAMS, 0);
        let mut params = ParamStore::new();
        let (embed, pos) = build_io(&mut params, &config, &mut rng);
        let blocks = (0..n_layers)
            .map(|i| build_block(&mut params, &config, &format!("layer{i}"), &mut rng))
            .collect();
        let lm_w = params.linear("lm_head.w", config.hidden, config.vocab_size, &mut rng);
        let lm_b = params.bias("lm_head.b", config.vocab_size);
        Ok(Self {
            config,
            params,
            embed,
            pos,
            blocks,
            lm_w,
            lm_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Logits `[batch, seq, vocab]` for `batch · seq_len` tokens.
    pub fn forward(&self, tape: &Tape<T>, vars: &[Var<T>], tokens: &[usize]) -> Result<Var<T>> {
        let mut h = embed_tokens(tape, &self.config, vars, self.embed, self.pos, tokens)?;
        for b in &self.blocks {
            h = apply_block(tape, &self.config, vars, b, &h)?;
        }
        if !h.is_finite() {
            return Err(Error::Divergence { step: 1 });
        }
        linear(tape, &h, &vars[self.lm_w], &vars[self.lm_b])
    }

    /// Argmax decoding for `batch · seq_len` tokens, one row per instance.
    pub fn predict(&self, tokens: &[usize]) -> Result<Vec<Vec<usize>>> {
        let tape = Tape::frozen();
        let vars = self.params.bind(&tape);
        Ok(argmax_rows(&self.forward(&tape, &vars, tokens)?))
    }
}
