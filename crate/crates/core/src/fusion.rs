//! Mixture-of-experts refinement, co-attention, gated fusion, the
//! discrepancy branch and the auxiliary heads.

use crate::error::{Error, Result};
use crate::layers::{Dropout, Linear, Norm};
use crate::numcore::{Bound, Graph, ParamId, ParamSet, StreamRng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MoEConfig {
    pub experts: usize,
    pub expansion: usize,
}

/// Dense soft-gated experts for one modality.
#[derive(Clone, Debug)]
pub struct MoE {
    pub gate: Linear,
    pub experts: Vec<(Linear, Linear)>,
}

impl MoE {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize, cfg: MoEConfig, rng: &mut StreamRng) -> Result<Self> {
        if cfg.experts < 1 {
            return Err(Error::Config("at least one expert is required".into()));
        }
        if cfg.expansion < 1 {
            return Err(Error::Config("expert expansion must be positive".into()));
        }
        let h = cfg.expansion * d;
        let gate = Linear::new(ps, &format!("{name}.gate"), cfg.experts, d, false, rng);
        let experts = (0..cfg.experts)
            .map(|k| {
                (
                    Linear::new(ps, &format!("{name}.expert{k}.in"), h, d, true, rng),
                    Linear::new(ps, &format!("{name}.expert{k}.out"), d, h, true, rng),
                )
            })
            .collect();
        Ok(Self { gate, experts })
    }

    /// Gate probabilities, `B × K`.
    pub fn gate_weights(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let s = self.gate.forward(g, p, x);
        g.softmax_rows(s)
    }

    pub fn expert(&self, g: &mut Graph, p: &Bound, k: usize, x: Var, drop: &mut Dropout) -> Var {
        let (inp, out) = &self.experts[k];
        let h = inp.forward(g, p, x);
        let h = g.gelu(h);
        let h = drop.apply(g, h);
        out.forward(g, p, h)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, drop: &mut Dropout) -> Var {
        let gate = self.gate_weights(g, p, x);
        let mut acc: Option<Var> = None;
        for k in 0..self.experts.len() {
            let e = self.expert(g, p, k, x, drop);
            let w = g.slice_cols(gate, k, 1);
            let term = g.mul_col(e, w);
            acc = Some(match acc {
                Some(a) => g.add(a, term),
                None => term,
            });
        }
        acc.expect("at least one expert")
    }
}

/// Shared-projection co-attention between the two single-vector modalities.
#[derive(Clone, Copy, Debug)]
pub struct CoAttention {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub text_norm: Norm,
    pub img_norm: Norm,
}

impl CoAttention {
    pub fn new(ps: &mut ParamSet, d: usize, rng: &mut StreamRng) -> Self {
        Self {
            q: ps.add("fusion.coattn.q", Tensor::glorot(d, d, rng)),
            k: ps.add("fusion.coattn.k", Tensor::glorot(d, d, rng)),
            v: ps.add("fusion.coattn.v", Tensor::glorot(d, d, rng)),
            text_norm: Norm::new(ps, "fusion.coattn.text_norm", d),
            img_norm: Norm::new(ps, "fusion.coattn.img_norm", d),
        }
    }

    /// One query attending over a single key: the softmax is over one score
    /// and equals 1, so the context is just the projected value.
    fn context(&self, g: &mut Graph, p: &Bound, query: Var, key: Var) -> Var {
        let d = g.shape(query)[1] as f64;
        let q = g.matmul_bt(query, p.get(self.q));
        let k = g.matmul_bt(key, p.get(self.k));
        let s = g.row_dot(q, k);
        let s = g.scale(s, 1.0 / d.sqrt());
        let w = g.softmax_rows(s);
        let v = g.matmul_bt(key, p.get(self.v));
        g.mul_col(v, w)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, m_text: Var, m_img: Var) -> (Var, Var) {
        let c_ti = self.context(g, p, m_text, m_img);
        let c_it = self.context(g, p, m_img, m_text);
        let t = g.add(m_text, c_ti);
        let i = g.add(m_img, c_it);
        (self.text_norm.forward(g, p, t), self.img_norm.forward(g, p, i))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GatedFusion {
    pub gate: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Fused {
    pub gate: Var,
    pub p_raw: Var,
    /// `B × 1` alignment scores.
    pub alignment: Var,
}

impl GatedFusion {
    pub fn new(ps: &mut ParamSet, d: usize, rng: &mut StreamRng) -> Self {
        Self {
            gate: ps.add("fusion.gate", Tensor::glorot(d, 2 * d, rng)),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, mp_text: Var, mp_img: Var) -> Fused {
        let z = g.concat_cols(&[mp_text, mp_img]);
        let s = g.matmul_bt(z, p.get(self.gate));
        let gate = g.sigmoid(s);
        // g⊙t + (1−g)⊙i
        let diff = g.sub(mp_text, mp_img);
        let mix = g.mul(gate, diff);
        let p_raw = g.add(mp_img, mix);
        let alignment = g.row_cosine(mp_text, mp_img);
        Fused { gate, p_raw, alignment }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Discrepancy {
    pub proj: ParamId,
    pub norm: Norm,
    /// Scalar mixing coefficient, passed through `tanh`.
    pub eta: ParamId,
}

impl Discrepancy {
    pub fn new(ps: &mut ParamSet, d: usize, rng: &mut StreamRng) -> Self {
        Self {
            proj: ps.add("fusion.disc.w", Tensor::glorot(d, 2 * d, rng)),
            norm: Norm::new(ps, "fusion.disc.norm", d),
            eta: ps.add("fusion.disc.eta", Tensor::scalar(0.0)),
        }
    }

    /// Returns `(d_vec, P)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, p_raw: Var, t: Var, i: Var) -> (Var, Var) {
        let diff = g.sub(t, i);
        let diff = g.abs(diff);
        let prod = g.mul(t, i);
        let feat = g.concat_cols(&[diff, prod]);
        let h = g.matmul_bt(feat, p.get(self.proj));
        let d_vec = self.norm.forward(g, p, h);
        let k = g.tanh(p.get(self.eta));
        let scaled = g.scale_by(d_vec, k);
        (d_vec, g.add(p_raw, scaled))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MatchHead {
    pub head: Linear,
}

impl MatchHead {
    pub fn new(ps: &mut ParamSet, d: usize, rng: &mut StreamRng) -> Self {
        Self {
            head: Linear::new(ps, "fusion.match", 1, 2 * d, true, rng),
        }
    }

    /// `B × 1` probabilities that text and image agree.
    pub fn forward(&self, g: &mut Graph, p: &Bound, mp_text: Var, mp_img: Var, drop: &mut Dropout) -> Var {
        let z = g.concat_cols(&[mp_text, mp_img]);
        let z = drop.apply(g, z);
        let s = self.head.forward(g, p, z);
        g.sigmoid(s)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DomainAdversary {
    pub hidden: Linear,
    pub out: Linear,
}

impl DomainAdversary {
    pub fn new(ps: &mut ParamSet, d: usize, n_domains: usize, rng: &mut StreamRng) -> Self {
        Self {
            hidden: Linear::new(ps, "fusion.domain.hidden", d, d, true, rng),
            out: Linear::new(ps, "fusion.domain.out", n_domains, d, true, rng),
        }
    }

    /// `B × n_domains` logits behind a gradient-reversal layer of strength
    /// `alpha`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, fused: Var, alpha: f64, drop: &mut Dropout) -> Var {
        let r = g.reverse_grad(fused, alpha);
        self.classify(g, p, r, drop)
    }

    /// The classifier without the reversal layer.
    pub fn classify(&self, g: &mut Graph, p: &Bound, x: Var, drop: &mut Dropout) -> Var {
        let h = self.hidden.forward(g, p, x);
        let h = g.gelu(h);
        let h = drop.apply(g, h);
        self.out.forward(g, p, h)
    }
}

/// Ramp of the reversal strength over training progress `p ∈ [0, 1]`.
pub fn grl_schedule(progress: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0
}
