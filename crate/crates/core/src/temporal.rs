//! Overlapping temporal windows over time-sorted fused posts.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Dropout, Linear, Norm, SelfAttention};
use crate::numcore::{Bound, Graph, ParamId, ParamSet, StreamRng, Tensor, Var};

pub const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemporalWindow {
    /// Indices into the time-sorted post list, ascending.
    pub members: Vec<usize>,
    /// Label of the latest member.
    pub label: u8,
}

impl TemporalWindow {
    pub fn latest(&self) -> usize {
        *self.members.last().expect("windows are nonempty")
    }
}

/// Start indices `0, S, 2S, …` below `n`.
pub fn window_starts(n: usize, stride: usize) -> impl Iterator<Item = usize> {
    (0..n).step_by(stride.max(1))
}

/// Windows of up to `len` consecutive posts starting every `stride` posts.
/// `labels` must already be in `(timestamp, id)` order.
pub fn build_windows(labels: &[u8], len: usize, stride: usize) -> Result<Vec<TemporalWindow>> {
    if labels.is_empty() {
        return Err(Error::Invalid("cannot build windows over zero posts".into()));
    }
    if len == 0 || stride == 0 || stride > len {
        return Err(Error::Config(format!(
            "window length {len} and stride {stride} must satisfy 1 <= stride <= length"
        )));
    }
    let n = labels.len();
    Ok(window_starts(n, stride)
        .map(|s| {
            let members: Vec<usize> = (s..(s + len).min(n)).collect();
            let label = labels[*members.last().unwrap()];
            TemporalWindow { members, label }
        })
        .collect())
}

/// `exp(−κ·(t_max − t_j)/86400)` for each member timestamp.
pub fn decay_weights(timestamps: &[i64], kappa: f64) -> Vec<f64> {
    let t_max = timestamps.iter().copied().max().unwrap_or(0);
    timestamps
        .iter()
        .map(|&t| (-kappa * (t_max - t) as f64 / SECONDS_PER_DAY).exp())
        .collect()
}

/// Time-decayed attention pooling of window members.
#[derive(Clone, Copy, Debug)]
pub struct WindowAttention {
    /// Shared query/key map.
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Clone, Debug)]
pub struct WindowAggregate {
    /// `W × d`.
    pub l: Var,
    /// Final combined member weights per window, each `1 × m`.
    pub weights: Vec<Var>,
    /// Plain attention distributions per window, each `1 × m`.
    pub attention: Vec<Var>,
}

impl WindowAttention {
    pub fn new(ps: &mut ParamSet, d: usize, rng: &mut StreamRng) -> Self {
        Self {
            key: ps.add("temporal.window.key", Tensor::glorot(d, d, rng)),
            value: ps.add("temporal.window.value", Tensor::glorot(d, d, rng)),
        }
    }

    /// `posts` is `n × d` in time order; `timestamps[i]` belongs to row `i`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        posts: Var,
        timestamps: &[i64],
        windows: &[TemporalWindow],
        kappa: f64,
    ) -> WindowAggregate {
        let d = g.shape(posts)[1] as f64;
        let keys = g.matmul_bt(posts, p.get(self.key));
        let values = g.matmul_bt(posts, p.get(self.value));
        let mut rows = Vec::with_capacity(windows.len());
        let mut weights = Vec::with_capacity(windows.len());
        let mut attention = Vec::with_capacity(windows.len());
        for w in windows {
            let k = g.gather_rows(keys, &w.members);
            let v = g.gather_rows(values, &w.members);
            // The key map is linear, so mapping the mean equals averaging mapped rows.
            let q = g.mean_rows_of(k);
            let s = g.matmul_bt(q, k);
            let s = g.scale(s, 1.0 / d.sqrt());
            let attn = g.softmax_rows(s);
            let ts: Vec<i64> = w.members.iter().map(|&j| timestamps[j]).collect();
            let lambda = Tensor::row_vector(decay_weights(&ts, kappa));
            let c = g.mul_const(attn, &lambda);
            let z = g.sum(c);
            let z = g.recip(z);
            let wts = g.scale_by(c, z);
            rows.push(g.matmul(wts, v));
            weights.push(wts);
            attention.push(attn);
        }
        WindowAggregate {
            l: g.concat_rows(&rows),
            weights,
            attention,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Drift {
    /// `W × d`, first row zero.
    pub delta: Var,
    /// `W × 1`.
    pub momentum: Var,
    /// `W × (2d + 1)` = `[L ; Δ ; M]`.
    pub l_bar: Var,
}

/// Drift `Δ_w = L_w − L_{w−1}` (with `Δ_0 = 0`) and momentum
/// `M_w = β·M_{w−1} + (1 − β)·‖Δ_w‖` (with `M_{−1} = 0`).
pub fn drift_momentum(g: &mut Graph, l: Var, beta: f64) -> Drift {
    let w = g.shape(l)[0];
    let prev: Vec<usize> = (0..w).map(|i| i.saturating_sub(1)).collect();
    let shifted = g.gather_rows(l, &prev);
    let delta = g.sub(l, shifted);
    let norms = g.row_norm(delta);
    let momentum = g.ema_scan(norms, beta);
    let l_bar = g.concat_cols(&[l, delta, momentum]);
    Drift { delta, momentum, l_bar }
}

/// Linear window classifier on `L̄`.
#[derive(Clone, Copy, Debug)]
pub struct WindowHead {
    pub head: Linear,
}

impl WindowHead {
    pub fn new(ps: &mut ParamSet, d: usize, rng: &mut StreamRng) -> Self {
        Self {
            head: Linear::new(ps, "temporal.head", 1, 2 * d + 1, true, rng),
        }
    }

    /// `(logits, p)`, both `W × 1`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, l_bar: Var, drop: &mut Dropout) -> (Var, Var) {
        let x = drop.apply(g, l_bar);
        let logits = self.head.forward(g, p, x);
        let probs = g.sigmoid(logits);
        (logits, probs)
    }
}

/// `(t − t_min)/(t_max − t_min)`, zero for a degenerate range.
pub fn normalized_times(timestamps: &[i64]) -> Vec<f64> {
    let lo = timestamps.iter().copied().min().unwrap_or(0);
    let hi = timestamps.iter().copied().max().unwrap_or(0);
    if hi == lo {
        return vec![0.0; timestamps.len()];
    }
    let span = (hi - lo) as f64;
    timestamps.iter().map(|&t| (t - lo) as f64 / span).collect()
}

/// Sinusoids of the normalised window time at learnable frequencies,
/// projected to `d`.
#[derive(Clone, Copy, Debug)]
pub struct TimestampEncoding {
    pub freqs: ParamId,
    pub proj: Linear,
}

impl TimestampEncoding {
    pub fn new(ps: &mut ParamSet, d: usize, n_freq: usize, rng: &mut StreamRng) -> Self {
        // log-uniform in [1, 100]
        let f: Vec<f64> = (0..n_freq).map(|_| (rng.random::<f64>() * 100f64.ln()).exp()).collect();
        Self {
            freqs: ps.add("temporal.time.freqs", Tensor::row_vector(f)),
            proj: Linear::new(ps, "temporal.time.proj", d, 2 * n_freq, true, rng),
        }
    }

    pub fn features(&self, g: &mut Graph, p: &Bound, timestamps: &[i64]) -> Var {
        let tau = g.constant(Tensor::column(normalized_times(timestamps)));
        let phase = g.matmul(tau, p.get(self.freqs));
        let s = g.sin(phase);
        let c = g.cos(phase);
        g.concat_cols(&[s, c])
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, timestamps: &[i64]) -> Var {
        let f = self.features(g, p, timestamps);
        self.proj.forward(g, p, f)
    }
}

/// Pre-norm encoder block.
#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub norm1: Norm,
    pub attn: SelfAttention,
    pub norm2: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl EncoderLayer {
    fn new(ps: &mut ParamSet, name: &str, d: usize, heads: usize, rng: &mut StreamRng) -> Self {
        Self {
            norm1: Norm::new(ps, &format!("{name}.norm1"), d),
            attn: SelfAttention::new(ps, &format!("{name}.attn"), d, heads, rng),
            norm2: Norm::new(ps, &format!("{name}.norm2"), d),
            ff1: Linear::new(ps, &format!("{name}.ff1"), 2 * d, d, true, rng),
            ff2: Linear::new(ps, &format!("{name}.ff2"), d, 2 * d, true, rng),
        }
    }

    /// Returns the new hidden state and the attention node.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> (Var, Var) {
        let w = g.shape(x)[0];
        let h = self.norm1.forward(g, p, x);
        let (a, probs) = self.attn.forward(g, p, h, w);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, p, x);
        let h = self.ff1.forward(g, p, h);
        let h = g.gelu(h);
        let h = self.ff2.forward(g, p, h);
        (g.add(x, h), probs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub frequencies: usize,
}

#[derive(Clone, Debug)]
pub struct TemporalTransformer {
    pub input: Linear,
    pub time: TimestampEncoding,
    pub layers: Vec<EncoderLayer>,
    pub head: Linear,
}

#[derive(Clone, Debug)]
pub struct TransformerOutput {
    /// `W × 1`.
    pub logits: Var,
    pub probs: Var,
    /// `W × d` final hidden states.
    pub h: Var,
    pub attention: Vec<Var>,
}

impl TemporalTransformer {
    pub fn new(ps: &mut ParamSet, d: usize, cfg: TransformerConfig, rng: &mut StreamRng) -> Result<Self> {
        if cfg.heads == 0 || !d.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!(
                "transformer heads {} must divide d={d}",
                cfg.heads
            )));
        }
        if cfg.frequencies == 0 {
            return Err(Error::Config("transformer needs at least one frequency".into()));
        }
        Ok(Self {
            input: Linear::new(ps, "temporal.tf.input", d, 2 * d + 1, true, rng),
            time: TimestampEncoding::new(ps, d, cfg.frequencies, rng),
            layers: (0..cfg.layers)
                .map(|i| EncoderLayer::new(ps, &format!("temporal.tf.layer{i}"), d, cfg.heads, rng))
                .collect(),
            head: Linear::new(ps, "temporal.tf.head", 1, d, true, rng),
        })
    }

    /// `l_bar` is `W × (2d+1)`; `timestamps[w]` is window `w`'s time.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        l_bar: Var,
        timestamps: &[i64],
        drop: &mut Dropout,
    ) -> TransformerOutput {
        let x = self.input.forward(g, p, l_bar);
        let e = self.time.forward(g, p, timestamps);
        let mut h = g.add(x, e);
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, probs) = layer.forward(g, p, h);
            h = next;
            attention.push(probs);
        }
        let z = drop.apply(g, h);
        let logits = self.head.forward(g, p, z);
        let probs = g.sigmoid(logits);
        TransformerOutput {
            logits,
            probs,
            h,
            attention,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PostPrediction {
    pub score: f64,
    pub class: u8,
}

/// Mean window probability and majority vote per post; an even split falls
/// back to `score >= threshold`.
pub fn post_aggregate(
    window_probs: &[f64],
    windows: &[TemporalWindow],
    n_posts: usize,
    threshold: f64,
) -> Result<Vec<PostPrediction>> {
    if window_probs.len() != windows.len() {
        return Err(Error::Shape(format!(
            "{} window probabilities for {} windows",
            window_probs.len(),
            windows.len()
        )));
    }
    let mut sum = vec![0.0; n_posts];
    let mut count = vec![0usize; n_posts];
    let mut votes = vec![0usize; n_posts];
    for (w, &pw) in windows.iter().zip(window_probs) {
        for &j in &w.members {
            if j >= n_posts {
                return Err(Error::Invalid(format!("window member {j} beyond {n_posts} posts")));
            }
            sum[j] += pw;
            count[j] += 1;
            votes[j] += usize::from(pw >= threshold);
        }
    }
    (0..n_posts)
        .map(|j| {
            if count[j] == 0 {
                return Err(Error::Invalid(format!("post {j} belongs to no window")));
            }
            let score = sum[j] / count[j] as f64;
            let class = match (2 * votes[j]).cmp(&count[j]) {
                std::cmp::Ordering::Greater => 1,
                std::cmp::Ordering::Less => 0,
                std::cmp::Ordering::Equal => u8::from(score >= threshold),
            };
            Ok(PostPrediction { score, class })
        })
        .collect()
}
