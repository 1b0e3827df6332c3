//! Parameterised building blocks shared by the pipeline stages.
//!
//! Weights are stored `[out × in]` and act on row-stacked inputs as
//! `x · Wᵀ`, i.e. the column convention `W·x` per row.

use rand::Rng;

use crate::numcore::{Bound, Graph, ParamId, ParamSet, StreamRng, Tensor, Var, LAYER_NORM_EPS};

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, out: usize, inp: usize, bias: bool, rng: &mut StreamRng) -> Self {
        let w = ps.add(format!("{name}.w"), Tensor::glorot(out, inp, rng));
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(1, out)));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul_bt(x, p.get(self.w));
        match self.b {
            Some(b) => g.add_row(y, p.get(b)),
            None => y,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize) -> Self {
        Self {
            gain: ps.add(format!("{name}.gain"), Tensor::filled(1, d, 1.0)),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(1, d)),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p.get(self.gain), p.get(self.bias), LAYER_NORM_EPS)
    }
}

/// Multi-head self-attention without biases or positional terms.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize, heads: usize, rng: &mut StreamRng) -> Self {
        Self {
            q: Linear::new(ps, &format!("{name}.q"), d, d, false, rng),
            k: Linear::new(ps, &format!("{name}.k"), d, d, false, rng),
            v: Linear::new(ps, &format!("{name}.v"), d, d, false, rng),
            o: Linear::new(ps, &format!("{name}.o"), d, d, false, rng),
            heads,
        }
    }

    /// `x` holds consecutive sequences of `seq_len` rows. Returns the output
    /// projection and the attention node (for inspecting probabilities).
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, seq_len: usize) -> (Var, Var) {
        let q = self.q.forward(g, p, x);
        let k = self.k.forward(g, p, x);
        let v = self.v.forward(g, p, x);
        let ctx = g.attention(q, k, v, seq_len, self.heads);
        (self.o.forward(g, p, ctx), ctx)
    }
}

/// Inverted dropout driven by an explicit generator; without one it is the
/// identity.
pub struct Dropout {
    rate: f64,
    rng: Option<StreamRng>,
}

impl Dropout {
    pub fn new(rate: f64, rng: StreamRng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some() && self.rate > 0.0
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        let rate = self.rate;
        let Some(rng) = self.rng.as_mut().filter(|_| rate > 0.0) else {
            return x;
        };
        let [r, c] = g.shape(x);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        g.mul_const(x, &Tensor::new(r, c, mask).expect("mask shape"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::SeedTree;

    #[test]
    fn dropout_off_is_identity_and_on_rescales() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(50, 40, 1.0));
        assert_eq!(Dropout::off().apply(&mut g, x), x);
        let mut d = Dropout::new(0.25, SeedTree::new(1).stream("d"));
        let y = d.apply(&mut g, x);
        let vals = g.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
    }
}
