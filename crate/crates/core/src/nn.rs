//! Network building blocks on top of the autodiff tape.

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::matrix::Matrix;
use crate::rng::{self, SeededRng};
use crate::scalar::Scalar;

/// Dense affine map `x · W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut SeededRng,
    ) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = store.add(
            format!("{name}/weight"),
            rng::uniform(rng, fan_in, fan_out, bound),
        );
        let bias = bias.then(|| store.add(format!("{name}/bias"), Matrix::zeros(1, fan_out)));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        tape.linear(x, self.weight, self.bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}/gamma"), Matrix::filled(1, width, T::one())),
            beta: store.add(format!("{name}/beta"), Matrix::zeros(1, width)),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Two-layer GELU perceptron applied per token.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut SeededRng,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}/up"), width, hidden, true, rng),
            down: Linear::new(store, &format!("{name}/down"), hidden, width, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let h = self.up.forward(tape, x);
        let h = tape.gelu(h);
        self.down.forward(tape, h)
    }
}

/// Multi-head scaled dot-product attention with learned projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Option<Linear>,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        output_projection: bool,
        rng: &mut SeededRng,
    ) -> Self {
        assert!(heads > 0 && width % heads == 0, "width must split evenly into heads");
        Self {
            query: Linear::new(store, &format!("{name}/query"), width, width, true, rng),
            key: Linear::new(store, &format!("{name}/key"), width, width, true, rng),
            value: Linear::new(store, &format!("{name}/value"), width, width, true, rng),
            output: output_projection
                .then(|| Linear::new(store, &format!("{name}/output"), width, width, true, rng)),
            heads,
            width,
        }
    }

    /// Queries from `x_q`, keys and values from `x_kv`. Keys flagged `false`
    /// in `key_valid` are masked out.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x_q: Var,
        x_kv: Var,
        key_valid: Option<&[bool]>,
    ) -> Var {
        let q = self.query.forward(tape, x_q);
        let k = self.key.forward(tape, x_kv);
        let v = self.value.forward(tape, x_kv);
        let head_dim = self.width / self.heads;
        let scale = T::one() / T::lit(head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * head_dim, head_dim),
                    tape.slice_cols(k, h * head_dim, head_dim),
                    tape.slice_cols(v, h * head_dim, head_dim),
                )
            };
            let logits = tape.matmul_t(qh, kh);
            let logits = tape.scale(logits, scale);
            let weights = tape.masked_softmax(logits, key_valid);
            outs.push(tape.matmul(weights, vh));
        }
        let o = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        };
        match &self.output {
            Some(proj) => proj.forward(tape, o),
            None => o,
        }
    }
}

/// Sinusoidal embedding of a scalar position, `width` channels.
pub fn sinusoidal<T: Scalar>(position: f64, width: usize) -> Vec<T> {
    let half = width / 2;
    let mut out = vec![T::zero(); width];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = T::lit((position * freq).sin());
        out[half + i] = T::lit((position * freq).cos());
    }
    out
}

/// Sinusoidal position table for frame indices `0..n`.
pub fn position_table<T: Scalar>(n: usize, width: usize) -> Matrix<T> {
    let rows: Vec<Vec<T>> = (0..n).map(|i| sinusoidal(i as f64, width)).collect();
    Matrix::from_rows(&rows).expect("uniform rows")
}

/// Adam optimizer state.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros = |store: &ParamStore<T>| {
            store
                .iter()
                .map(|(_, p)| Matrix::zeros(p.rows(), p.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Matrix<T>]) {
        self.step += 1;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let c1 = T::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads[i].as_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            let p = store.get_mut(id).as_mut_slice();
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Matrix<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.frobenius_sq().to_f64_lossy())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Matrix::filled(1, 3, 5.0));
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let g = store.get(id).scale(2.0);
            opt.update(&mut store, &[g]);
        }
        assert!(store.get(id).max_abs() < 1e-2);
    }

    #[test]
    fn single_head_attention_is_a_convex_blend_of_values() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng::stream(1, 0);
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, false, &mut r);
        let mut tape = Tape::new(&store);
        let x = tape.input(rng::standard_normal(&mut r, 5, 4));
        let out = mha.forward(&mut tape, x, x, Some(&[false, true, false, false, false]));
        // Only token 1 is a valid key, so every query reads its value row.
        let v = mha.value.forward(&mut tape, x);
        let (o, vv) = (tape.value(out), tape.value(v));
        for i in 0..5 {
            for j in 0..4 {
                assert!((o[(i, j)] - vv[(1, j)]).abs() < 1e-12);
            }
        }
    }
}
