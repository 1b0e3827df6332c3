//! Loss terms and their weighted composition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Bound, Graph, Tensor, Var};

/// Probabilities are clamped to `[P_CLAMP, 1 − P_CLAMP]` before any log.
pub const P_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub align: f64,
    pub tc: f64,
    #[serde(rename = "match")]
    pub match_: f64,
    pub contrast: f64,
    pub domain: f64,
    pub proto: f64,
    pub proto_mem: f64,
    pub rdrop: f64,
    pub tc_seq: f64,
    pub reg: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Temporal-consistency discount.
    pub rho: f64,
    /// Focal exponent.
    pub gamma: f64,
    /// Label smoothing.
    pub epsilon: f64,
    pub margin: f64,
    /// Use `(1 − p_w)^γ` instead of the true-class factor `(1 − p_t)^γ`.
    pub focal_literal: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            align: 0.05,
            tc: 0.01,
            match_: 0.1,
            contrast: 0.05,
            domain: 0.03,
            proto: 0.05,
            proto_mem: 0.10,
            rdrop: 0.5,
            tc_seq: 0.01,
            reg: 1e-5,
            tau: 0.2,
            rho: 0.9,
            gamma: 2.5,
            epsilon: 0.05,
            margin: 0.2,
            focal_literal: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("align", self.align),
            ("tc", self.tc),
            ("match", self.match_),
            ("contrast", self.contrast),
            ("domain", self.domain),
            ("proto", self.proto),
            ("proto_mem", self.proto_mem),
            ("rdrop", self.rdrop),
            ("tc_seq", self.tc_seq),
            ("reg", self.reg),
            ("gamma", self.gamma),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be a nonnegative number, got {v}")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("loss.tau must be positive, got {}", self.tau)));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config(format!("loss.rho must lie in (0, 1), got {}", self.rho)));
        }
        if !(0.0..0.5).contains(&self.epsilon) {
            return Err(Error::Config(format!("loss.epsilon must lie in [0, 0.5), got {}", self.epsilon)));
        }
        if !self.margin.is_finite() {
            return Err(Error::Config("loss.margin must be finite".into()));
        }
        Ok(())
    }
}

/// Every term of one step, side by side with the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub align: f64,
    pub tc: f64,
    #[serde(rename = "match")]
    pub match_: f64,
    pub contrast: f64,
    pub rdrop: f64,
    pub domain: f64,
    pub proto: f64,
    pub proto_mem: f64,
    pub tc_seq: f64,
    pub l2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn parts(&self) -> [(&'static str, f64); 11] {
        [
            ("ce", self.ce),
            ("align", self.align),
            ("tc", self.tc),
            ("match", self.match_),
            ("contrast", self.contrast),
            ("rdrop", self.rdrop),
            ("domain", self.domain),
            ("proto", self.proto),
            ("proto_mem", self.proto_mem),
            ("tc_seq", self.tc_seq),
            ("l2", self.l2),
        ]
    }

    /// The weighted sum of the parts, evaluated in plain arithmetic.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.ce
            + w.align * self.align
            + w.tc * self.tc
            + w.match_ * self.match_
            + w.contrast * self.contrast
            + w.reg * self.l2
            + w.rdrop * self.rdrop
            + w.domain * self.domain
            + w.proto * self.proto
            + w.proto_mem * self.proto_mem
            + w.tc_seq * self.tc_seq
    }

    /// First non-finite part, if any.
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in self.parts().into_iter().chain([("total", self.total)]) {
            if !v.is_finite() {
                return Err(Error::NonFinite { term: name.into() });
            }
        }
        Ok(())
    }
}

/// Scalar graph nodes of every term.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub ce: Var,
    pub align: Var,
    pub tc: Var,
    pub match_: Var,
    pub contrast: Var,
    pub rdrop: Var,
    pub domain: Var,
    pub proto: Var,
    pub proto_mem: Var,
    pub tc_seq: Var,
    pub l2: Var,
}

/// Builds the weighted total and reads every part back.
pub fn total_loss(g: &mut Graph, parts: &LossParts, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let terms = [
        (parts.align, w.align),
        (parts.tc, w.tc),
        (parts.match_, w.match_),
        (parts.contrast, w.contrast),
        (parts.l2, w.reg),
        (parts.rdrop, w.rdrop),
        (parts.domain, w.domain),
        (parts.proto, w.proto),
        (parts.proto_mem, w.proto_mem),
        (parts.tc_seq, w.tc_seq),
    ];
    let mut total = parts.ce;
    for (v, lambda) in terms {
        let s = g.scale(v, lambda);
        total = g.add(total, s);
    }
    let b = LossBreakdown {
        ce: g.item(parts.ce),
        align: g.item(parts.align),
        tc: g.item(parts.tc),
        match_: g.item(parts.match_),
        contrast: g.item(parts.contrast),
        rdrop: g.item(parts.rdrop),
        domain: g.item(parts.domain),
        proto: g.item(parts.proto),
        proto_mem: g.item(parts.proto_mem),
        tc_seq: g.item(parts.tc_seq),
        l2: g.item(parts.l2),
        total: g.item(total),
    };
    b.check_finite()?;
    Ok((total, b))
}

fn clamp_p(g: &mut Graph, p: Var) -> Var {
    g.clamp(p, P_CLAMP, 1.0 - P_CLAMP)
}

fn column(g: &mut Graph, v: Vec<f64>) -> Var {
    g.constant(Tensor::column(v))
}

/// `w_y = N/(2·count_y)` rescaled to mean 1; a missing class gives unit weights.
pub fn class_weights(labels: &[u8]) -> [f64; 2] {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let neg = n - pos;
    if pos == 0.0 || neg == 0.0 {
        return [1.0, 1.0];
    }
    let raw = [n / (2.0 * neg), n / (2.0 * pos)];
    let mean = (raw[0] + raw[1]) / 2.0;
    [raw[0] / mean, raw[1] / mean]
}

/// Per-element binary cross-entropy against constant targets, `n × 1`.
fn bce(g: &mut Graph, p: Var, targets: Vec<f64>) -> Var {
    let pc = clamp_p(g, p);
    let lp = g.ln(pc);
    let one_minus = g.affine(pc, -1.0, 1.0);
    let lq = g.ln(one_minus);
    let neg_t: Vec<f64> = targets.iter().map(|t| -t).collect();
    let neg_q: Vec<f64> = targets.iter().map(|t| t - 1.0).collect();
    let a = g.mul_const(lp, &Tensor::column(neg_t));
    let b = g.mul_const(lq, &Tensor::column(neg_q));
    g.add(a, b)
}

/// Focal, label-smoothed, class-weighted cross-entropy summed over windows.
pub fn focal_ce(g: &mut Graph, p: Var, y: &[u8], class_w: [f64; 2], w: &LossWeights) -> Result<Var> {
    if y.is_empty() {
        return Err(Error::Invalid("focal loss over zero windows".into()));
    }
    assert_eq!(g.shape(p), [y.len(), 1], "one probability per window");
    let eps = w.epsilon;
    let smooth: Vec<f64> = y.iter().map(|&v| f64::from(v) * (1.0 - eps) + eps / 2.0).collect();
    let ce = bce(g, p, smooth);
    let pc = clamp_p(g, p);
    // 1 − p_t, where p_t is the probability of the true class (or of the
    // positive class under the literal reading).
    let miss = if w.focal_literal {
        g.affine(pc, -1.0, 1.0)
    } else {
        let sign: Vec<f64> = y.iter().map(|&v| if v == 1 { -1.0 } else { 1.0 }).collect();
        let off: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
        let s = g.mul_const(pc, &Tensor::column(sign));
        let o = column(g, off);
        g.add(s, o)
    };
    let factor = g.pow(miss, w.gamma);
    let weights: Vec<f64> = y.iter().map(|&v| class_w[v as usize]).collect();
    let term = g.mul(factor, ce);
    let term = g.mul_const(term, &Tensor::column(weights));
    Ok(g.sum(term))
}

/// `Σ (1 − A_i)`.
pub fn align_loss(g: &mut Graph, a: Var) -> Var {
    let n = g.shape(a)[0] as f64;
    let s = g.sum(a);
    g.affine(s, -1.0, n)
}

fn consecutive(g: &mut Graph, x: Var) -> (Var, Var) {
    let w = g.shape(x)[0];
    let cur: Vec<usize> = (1..w).collect();
    let prev: Vec<usize> = (0..w - 1).collect();
    (g.gather_rows(x, &cur), g.gather_rows(x, &prev))
}

/// `Σ_{w≥1} ρ^w ‖L_w − L_{w−1}‖²`.
pub fn tc_loss(g: &mut Graph, l: Var, rho: f64) -> Var {
    let w = g.shape(l)[0];
    if w < 2 {
        return g.scalar(0.0);
    }
    let (cur, prev) = consecutive(g, l);
    let d = g.sub(cur, prev);
    let sq = g.row_dot(d, d);
    let disc: Vec<f64> = (1..w).map(|k| rho.powi(k as i32)).collect();
    let t = g.mul_const(sq, &Tensor::column(disc));
    g.sum(t)
}

/// Summed BCE of the match head.
pub fn match_loss(g: &mut Graph, p: Var, y: &[u8]) -> Var {
    let t = bce(g, p, y.iter().map(|&v| f64::from(v)).collect());
    g.sum(t)
}

/// Bidirectional InfoNCE over cosine similarities at temperature `tau`.
pub fn contrastive_loss(g: &mut Graph, t: Var, i: Var, tau: f64) -> Var {
    let b = g.shape(t)[0];
    let nt = g.normalize_rows(t);
    let ni = g.normalize_rows(i);
    let s = g.matmul_bt(nt, ni);
    let s = g.scale(s, 1.0 / tau);
    let st = g.transpose(s);
    let eye = Tensor::identity(b);
    let a = g.log_softmax_rows(s);
    let c = g.log_softmax_rows(st);
    let a = g.mul_const(a, &eye);
    let c = g.mul_const(c, &eye);
    let sa = g.sum(a);
    let sc = g.sum(c);
    let both = g.add(sa, sc);
    g.scale(both, -1.0)
}

/// `½ Σ [KL(p1‖p2) + KL(p2‖p1)]` for Bernoulli predictions.
pub fn rdrop_loss(g: &mut Graph, p1: Var, p2: Var) -> Var {
    // KL(p‖q) + KL(q‖p) = (p − q)·(logit p − logit q)
    let a = clamp_p(g, p1);
    let b = clamp_p(g, p2);
    let logit = |g: &mut Graph, x: Var| {
        let l = g.ln(x);
        let q = g.affine(x, -1.0, 1.0);
        let lq = g.ln(q);
        g.sub(l, lq)
    };
    let la = logit(g, a);
    let lb = logit(g, b);
    let dp = g.sub(a, b);
    let dl = g.sub(la, lb);
    let prod = g.mul(dp, dl);
    let s = g.sum(prod);
    g.scale(s, 0.5)
}

/// Mean cross-entropy of the domain classifier.
pub fn domain_loss(g: &mut Graph, logits: Var, ids: &[usize]) -> Result<Var> {
    let [b, k] = g.shape(logits);
    if ids.len() != b {
        return Err(Error::Shape(format!("{} domain ids for {b} rows", ids.len())));
    }
    let mut onehot = Tensor::zeros(b, k);
    for (r, &id) in ids.iter().enumerate() {
        if id >= k {
            return Err(Error::Invalid(format!("domain id {id} out of range for {k} domains")));
        }
        onehot.set(r, id, 1.0);
    }
    let ls = g.log_softmax_rows(logits);
    let picked = g.mul_const(ls, &onehot);
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / b as f64))
}

/// `(1/(W−1)) Σ ‖H_w − H_{w−1}‖² · max(cos(H_w, H_{w−1}), 0)`.
pub fn tc_seq_loss(g: &mut Graph, h: Var) -> Var {
    let w = g.shape(h)[0];
    if w < 2 {
        return g.scalar(0.0);
    }
    let (cur, prev) = consecutive(g, h);
    let d = g.sub(cur, prev);
    let sq = g.row_dot(d, d);
    let cos = g.row_cosine(cur, prev);
    let gate = g.relu(cos);
    let t = g.mul(sq, gate);
    let s = g.sum(t);
    g.scale(s, 1.0 / (w - 1) as f64)
}

/// `Σ_θ ‖θ‖²` over every bound parameter.
pub fn l2_penalty(g: &mut Graph, p: &Bound) -> Var {
    let mut acc = g.scalar(0.0);
    for &v in p.vars() {
        let sq = g.square(v);
        let s = g.sum(sq);
        acc = g.add(acc, s);
    }
    acc
}
