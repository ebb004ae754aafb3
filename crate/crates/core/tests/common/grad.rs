//! Central finite-difference checks for every differentiable tape operation.
//!
//! The gradient under test is the f32 reverse-mode result. The reference is a
//! central difference of the same generic function evaluated in f64 at the
//! identical (f32-representable) input point.

use eqr_core::autodiff::{Tape, Var};
use eqr_core::rng;
use eqr_core::scalar::cast;
use eqr_core::tensor::Tensor;
use eqr_core::{Result, Scalar};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const TRIALS: usize = 100;
pub const TOLERANCE: f64 = 1e-3;
const H: f64 = 1e-5;

/// Inputs of one trial plus any integer/real side data the op needs.
#[derive(Clone, Debug, Default)]
pub struct Trial {
    pub inputs: Vec<Tensor<f64>>,
    pub ints: Vec<usize>,
    pub reals: Vec<f64>,
}

pub trait OpCase {
    fn name(&self) -> &'static str;
    fn sample(&self, r: &mut ChaCha8Rng) -> Trial;
    fn eval32(&self, tape: &Tape<f32>, xs: &[Var<f32>], t: &Trial) -> Result<Var<f32>>;
    fn eval64(&self, tape: &Tape<f64>, xs: &[Var<f64>], t: &Trial) -> Result<Var<f64>>;
}

macro_rules! case {
    ($ty:ident, $name:literal, |$r:ident| $sample:block, |$tape:ident, $xs:ident, $t:ident| $body:block) => {
        pub struct $ty;
        impl $ty {
            fn go<T: Scalar>($tape: &Tape<T>, $xs: &[Var<T>], $t: &Trial) -> Result<Var<T>> {
                let _ = &$t;
                $body
            }
        }
        impl OpCase for $ty {
            fn name(&self) -> &'static str {
                $name
            }
            fn sample(&self, $r: &mut ChaCha8Rng) -> Trial {
                $sample
            }
            fn eval32(&self, tape: &Tape<f32>, xs: &[Var<f32>], t: &Trial) -> Result<Var<f32>> {
                Self::go(tape, xs, t)
            }
            fn eval64(&self, tape: &Tape<f64>, xs: &[Var<f64>], t: &Trial) -> Result<Var<f64>> {
                Self::go(tape, xs, t)
            }
        }
    };
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

fn dim(r: &mut ChaCha8Rng) -> usize {
    r.random_range(1..=4)
}

fn inputs(xs: Vec<Tensor<f64>>) -> Trial {
    Trial {
        inputs: xs,
        ..Trial::default()
    }
}

case!(Add, "add", |r| {
    let s = [dim(r), dim(r)];
    inputs(vec![randn(&s, r), randn(&s, r)])
}, |tape, xs, t| { tape.add(&xs[0], &xs[1]) });

case!(Sub, "sub", |r| {
    let s = [dim(r), dim(r), dim(r)];
    inputs(vec![randn(&s, r), randn(&s, r)])
}, |tape, xs, t| { tape.sub(&xs[0], &xs[1]) });

case!(Mul, "mul", |r| {
    let s = [dim(r), dim(r)];
    inputs(vec![randn(&s, r), randn(&s, r)])
}, |tape, xs, t| { tape.mul(&xs[0], &xs[1]) });

case!(Scale, "scale", |r| {
    let s = [dim(r), dim(r)];
    Trial { inputs: vec![randn(&s, r)], reals: vec![r.random_range(-2.0..2.0)], ..Trial::default() }
}, |tape, xs, t| { Ok(tape.scale(&xs[0], cast(t.reals[0]))) });

case!(Lerp, "lerp", |r| {
    let s = [dim(r), dim(r)];
    Trial { inputs: vec![randn(&s, r), randn(&s, r)], reals: vec![r.random_range(0.0..1.0)], ..Trial::default() }
}, |tape, xs, t| { tape.lerp(&xs[0], &xs[1], cast(t.reals[0])) });

case!(AddBroadcast, "add_broadcast", |r| {
    let (b, s, h) = (dim(r), dim(r), dim(r));
    let tail: Vec<usize> = if r.random_bool(0.5) { vec![s, h] } else { vec![h] };
    inputs(vec![randn(&[b, s, h], r), randn(&tail, r)])
}, |tape, xs, t| { tape.add_broadcast(&xs[0], &xs[1]) });

case!(Gelu, "gelu", |r| {
    let s = [dim(r), dim(r)];
    inputs(vec![Tensor::randn(&s, 2.0, r)])
}, |tape, xs, t| { Ok(tape.gelu(&xs[0])) });

case!(MatMul, "matmul", |r| {
    let (b, m, k, n) = (dim(r), dim(r), dim(r), dim(r));
    inputs(vec![randn(&[b, m, k], r), randn(&[k, n], r)])
}, |tape, xs, t| { tape.matmul(&xs[0], &xs[1]) });

case!(Bmm, "bmm", |r| {
    let (g, m, k, n) = (dim(r), dim(r), dim(r), dim(r));
    inputs(vec![randn(&[g, m, k], r), randn(&[g, k, n], r)])
}, |tape, xs, t| { tape.bmm(&xs[0], &xs[1], false) });

case!(BmmT, "bmm_transposed", |r| {
    let (g, m, k, n) = (dim(r), dim(r), dim(r), dim(r));
    inputs(vec![randn(&[g, m, k], r), randn(&[g, n, k], r)])
}, |tape, xs, t| { tape.bmm(&xs[0], &xs[1], true) });

case!(SwapAxes, "swap_axes", |r| {
    let s = [dim(r), dim(r), dim(r)];
    let (i, j) = [(0, 1), (1, 2), (0, 2), (2, 0)][r.random_range(0..4)];
    Trial { inputs: vec![randn(&s, r)], ints: vec![i, j], ..Trial::default() }
}, |tape, xs, t| { tape.swap_axes(&xs[0], t.ints[0], t.ints[1]) });

case!(Reshape, "reshape", |r| {
    let (a, b) = (dim(r), dim(r));
    Trial { inputs: vec![randn(&[a, b], r)], ints: vec![b, a], ..Trial::default() }
}, |tape, xs, t| { tape.reshape(&xs[0], &t.ints) });

case!(Softmax, "softmax", |r| {
    let s = [dim(r), dim(r) + 1];
    inputs(vec![Tensor::randn(&s, 2.0, r)])
}, |tape, xs, t| { Ok(tape.softmax(&xs[0])) });

case!(RmsNorm, "rms_norm", |r| {
    let s = [dim(r), dim(r) + 1];
    inputs(vec![randn(&s, r)])
}, |tape, xs, t| { Ok(tape.rms_norm(&xs[0], cast(1e-5))) });

case!(Embedding, "embedding", |r| {
    let (v, w) = (dim(r) + 1, dim(r));
    let n = r.random_range(1..=6);
    Trial { inputs: vec![randn(&[v, w], r)], ints: (0..n).map(|_| r.random_range(0..v)).collect(), ..Trial::default() }
}, |tape, xs, t| { tape.embedding(&xs[0], &t.ints) });

case!(MeanAxis1, "mean_axis1", |r| {
    let s = [dim(r), dim(r), dim(r)];
    inputs(vec![randn(&s, r)])
}, |tape, xs, t| { tape.mean_axis1(&xs[0]) });

case!(Sum, "sum", |r| {
    let s = [dim(r), dim(r)];
    inputs(vec![randn(&s, r)])
}, |tape, xs, t| { Ok(tape.sum(&xs[0])) });

case!(CrossEntropy, "cross_entropy_weighted", |r| {
    let (n, v) = (dim(r), dim(r) + 1);
    Trial {
        inputs: vec![Tensor::randn(&[n, v], 2.0, r)],
        ints: (0..n).map(|_| r.random_range(0..v)).collect(),
        reals: (0..n).map(|_| r.random_range(0.1..2.0)).collect(),
    }
}, |tape, xs, t| {
    let w: Vec<T> = t.reals.iter().map(|&v| cast(v)).collect();
    tape.cross_entropy_weighted(&xs[0], &t.ints, &w)
});

case!(SoftmaxCrossEntropy, "softmax_cross_entropy", |r| {
    let (n, v) = (dim(r), dim(r) + 1);
    Trial { inputs: vec![Tensor::randn(&[n, v], 2.0, r)], ints: (0..n).map(|_| r.random_range(0..v)).collect(), ..Trial::default() }
}, |tape, xs, t| { tape.softmax_cross_entropy(&xs[0], &t.ints) });

case!(Bce, "bce_with_logits_weighted", |r| {
    let n = dim(r);
    Trial {
        inputs: vec![Tensor::randn(&[n], 3.0, r)],
        reals: (0..2 * n).map(|i| if i < n { f64::from(u8::from(r.random_bool(0.5))) } else { r.random_range(0.1..2.0) }).collect(),
        ..Trial::default()
    }
}, |tape, xs, t| {
    let n = xs[0].len();
    let labels: Vec<T> = t.reals[..n].iter().map(|&v| cast(v)).collect();
    let weights: Vec<T> = t.reals[n..].iter().map(|&v| cast(v)).collect();
    tape.bce_with_logits_weighted(&xs[0], &labels, &weights)
});

pub fn all_cases() -> Vec<Box<dyn OpCase>> {
    vec![
        Box::new(Add),
        Box::new(Sub),
        Box::new(Mul),
        Box::new(Scale),
        Box::new(Lerp),
        Box::new(AddBroadcast),
        Box::new(Gelu),
        Box::new(MatMul),
        Box::new(Bmm),
        Box::new(BmmT),
        Box::new(SwapAxes),
        Box::new(Reshape),
        Box::new(Softmax),
        Box::new(RmsNorm),
        Box::new(Embedding),
        Box::new(MeanAxis1),
        Box::new(Sum),
        Box::new(CrossEntropy),
        Box::new(SoftmaxCrossEntropy),
        Box::new(Bce),
    ]
}

/// Fixed projection weights so every output element reaches the scalar loss.
fn project<T: Scalar>(tape: &Tape<T>, out: &Var<T>) -> Result<Var<T>> {
    let w: Vec<T> = (0..out.len()).map(|i| cast((i as f64 * 1.618 + 0.5).sin() + 0.1)).collect();
    let w = Var::from_parts(out.shape().to_vec(), w)?;
    Ok(tape.sum(&tape.mul(out, &w)?))
}

fn loss64(case: &dyn OpCase, xs: &[Tensor<f64>], t: &Trial) -> f64 {
    let tape = Tape::<f64>::frozen();
    let vars: Vec<Var<f64>> = xs.iter().map(|x| tape.leaf(x)).collect();
    let out = case.eval64(&tape, &vars, t).expect("op evaluates");
    project(&tape, &out).expect("projection").item()
}

/// Relative error `‖g − g_fd‖ / max(‖g_fd‖, 1e-3)` for one trial.
pub fn trial_error(case: &dyn OpCase, t: &Trial) -> f64 {
    let exact: Vec<Tensor<f64>> = t.inputs.iter().map(|x| x.cast::<f32>().cast::<f64>()).collect();

    let tape = Tape::<f32>::new();
    let vars: Vec<Var<f32>> = exact.iter().map(|x| tape.leaf(&x.cast::<f32>().trainable())).collect();
    let out = case.eval32(&tape, &vars, t).expect("op evaluates");
    let loss = project(&tape, &out).expect("projection");
    let grads = tape.backward(&loss).expect("backward");

    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (k, v) in vars.iter().enumerate() {
        let g = grads.get(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; v.len()]);
        for (j, &gj) in g.iter().enumerate() {
            let mut plus = exact.clone();
            let mut minus = exact.clone();
            plus[k].data_mut()[j] += H;
            minus[k].data_mut()[j] -= H;
            let fd = (loss64(case, &plus, t) - loss64(case, &minus, t)) / (2.0 * H);
            num += (f64::from(gj) - fd).powi(2);
            den += fd * fd;
        }
    }
    num.sqrt() / den.sqrt().max(1e-3)
}

/// Worst relative error over `trials` random trials of `case`.
pub fn worst_error(case: &dyn OpCase, trials: usize, seed: u64) -> f64 {
    (0..trials)
        .map(|i| {
            let mut r = rng::stream(seed, case.name(), i as u64);
            trial_error(case, &case.sample(&mut r))
        })
        .fold(0.0, f64::max)
}
