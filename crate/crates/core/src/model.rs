//! The full pipeline from fixture embeddings to window probabilities, and the
//! two-pass training objective built on it.

use crate::datagen::{sort_by_time, PostRecord};
use crate::encoder::{Encoder, EncoderDims, ProjectedPost};
use crate::error::{Error, Result};
use crate::fusion::{CoAttention, Discrepancy, DomainAdversary, Fused, GatedFusion, MatchHead, MoE, MoEConfig};
use crate::layers::Dropout;
use crate::numcore::{Bound, Graph, ParamSet, StreamRng, Tensor, Var};
use crate::objective::{
    align_loss, contrastive_loss, domain_loss, focal_ce, l2_penalty, match_loss, rdrop_loss, tc_loss, tc_seq_loss,
    total_loss, LossBreakdown, LossParts, LossWeights,
};
use crate::prototypes::{class_centroids, in_batch_proto_loss_at, memory_proto_loss};
use crate::temporal::{
    build_windows, drift_momentum, Drift, TemporalTransformer, TemporalWindow, TransformerConfig, WindowAttention,
    WindowHead,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub dims: EncoderDims,
    pub moe: MoEConfig,
    pub n_domains: usize,
    pub window: usize,
    pub stride: usize,
    pub kappa: f64,
    pub beta: f64,
    pub dropout: f64,
    pub transformer: Option<TransformerConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.moe.experts == 0 || self.moe.expansion == 0 {
            return Err(Error::Config("experts and expansion must be positive".into()));
        }
        if self.n_domains == 0 {
            return Err(Error::Config("n_domains must be positive".into()));
        }
        if self.window == 0 || self.stride == 0 || self.stride > self.window {
            return Err(Error::Config(format!(
                "window stride {} must lie in [1, {}]",
                self.stride, self.window
            )));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::Config(format!("kappa must be nonnegative, got {}", self.kappa)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// How the domain classifier is attached to the fused representation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Adversary {
    /// Behind a gradient-reversal layer of the given strength.
    Reversed(f64),
    /// Directly, giving true derivatives (for finite-difference probes).
    Plain,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub moe_text: MoE,
    pub moe_img: MoE,
    pub coattn: CoAttention,
    pub fusion: GatedFusion,
    pub discrepancy: Discrepancy,
    pub match_head: MatchHead,
    pub adversary: DomainAdversary,
    pub window_attn: WindowAttention,
    pub window_head: WindowHead,
    pub transformer: Option<TemporalTransformer>,
}

/// A time-sorted batch in stacked form.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub timestamps: Vec<i64>,
    /// `B·L × d_xlmr`.
    pub text: Tensor,
    /// `B × d_clip`.
    pub img: Tensor,
    pub labels: Vec<u8>,
    pub match_labels: Vec<u8>,
    pub domains: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    /// Sorts `records` by `(timestamp, id)` and stacks their embeddings.
    pub fn new(records: &[&PostRecord]) -> Result<Self> {
        let Some(first) = records.first() else {
            return Err(Error::Invalid("empty batch".into()));
        };
        let mut sorted = records.to_vec();
        sort_by_time(&mut sorted);
        let [seq_len, dx] = first.text_emb.shape();
        let dc = first.img_emb.cols();
        let mut text = Vec::with_capacity(sorted.len() * seq_len * dx);
        let mut img = Vec::with_capacity(sorted.len() * dc);
        for r in &sorted {
            if r.text_emb.shape() != [seq_len, dx] || r.img_emb.shape() != [1, dc] {
                return Err(Error::Shape(format!("post {} has mismatched embedding shapes", r.id)));
            }
            text.extend_from_slice(r.text_emb.data());
            img.extend_from_slice(r.img_emb.data());
        }
        Ok(Self {
            ids: sorted.iter().map(|r| r.id.clone()).collect(),
            timestamps: sorted.iter().map(|r| r.timestamp).collect(),
            text: Tensor::new(sorted.len() * seq_len, dx, text)?,
            img: Tensor::new(sorted.len(), dc, img)?,
            labels: sorted.iter().map(|r| r.label).collect(),
            match_labels: sorted.iter().map(|r| r.match_label).collect(),
            domains: sorted.iter().map(|r| r.domain_id).collect(),
            seq_len,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub post: ProjectedPost,
    pub mp_text: Var,
    pub mp_img: Var,
    pub fused: Fused,
    pub d_vec: Var,
    /// `B × d` fused representation after the discrepancy branch.
    pub p: Var,
    pub match_p: Var,
    pub domain_logits: Var,
    pub windows: Vec<TemporalWindow>,
    /// `W × d` window aggregates.
    pub l: Var,
    pub drift: Drift,
    /// `W × 1` logits and probabilities used for the prediction.
    pub window_logits: Var,
    pub window_probs: Var,
    /// Transformer hidden states, when enabled.
    pub h: Option<Var>,
}

/// Per-step quantities that come from outside the graph.
#[derive(Clone, Debug)]
pub struct LossContext {
    pub class_weights: [f64; 2],
    /// Global prototypes as of the start of the step.
    pub globals: [Option<Vec<f64>>; 2],
    /// In-batch class centroids to hold fixed; computed from the batch when
    /// absent.
    pub centroids: Option<[Option<Vec<f64>>; 2]>,
}

pub struct StepLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub forward: Forward,
}

impl Model {
    pub fn new(ps: &mut ParamSet, cfg: ModelConfig, rng: &mut StreamRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dims.d;
        Ok(Self {
            cfg,
            encoder: Encoder::new(ps, cfg.dims, rng)?,
            moe_text: MoE::new(ps, "fusion.moe_text", d, cfg.moe, rng)?,
            moe_img: MoE::new(ps, "fusion.moe_img", d, cfg.moe, rng)?,
            coattn: CoAttention::new(ps, d, rng),
            fusion: GatedFusion::new(ps, d, rng),
            discrepancy: Discrepancy::new(ps, d, rng),
            match_head: MatchHead::new(ps, d, rng),
            adversary: DomainAdversary::new(ps, d, cfg.n_domains, rng),
            window_attn: WindowAttention::new(ps, d, rng),
            window_head: WindowHead::new(ps, d, rng),
            transformer: cfg
                .transformer
                .map(|t| TemporalTransformer::new(ps, d, t, rng))
                .transpose()?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &Batch, drop: &mut Dropout, adv: Adversary) -> Result<Forward> {
        let cfg = &self.cfg;
        if batch.is_empty() || batch.text.rows() != batch.len() * batch.seq_len {
            return Err(Error::Shape("batch sequence length".into()));
        }
        if batch.text.cols() != cfg.dims.d_xlmr || batch.img.cols() != cfg.dims.d_clip {
            return Err(Error::Shape(format!(
                "embedding widths {}/{} do not match the model's {}/{}",
                batch.text.cols(),
                batch.img.cols(),
                cfg.dims.d_xlmr,
                cfg.dims.d_clip
            )));
        }
        if let Some(&bad) = batch.domains.iter().find(|&&k| k >= cfg.n_domains) {
            return Err(Error::Invalid(format!("domain id {bad} but the model has {} domains", cfg.n_domains)));
        }
        let text = g.constant(batch.text.clone());
        let img = g.constant(batch.img.clone());
        let post = self.encoder.forward(g, p, text, img, batch.seq_len);
        let m_text = self.moe_text.forward(g, p, post.t_tilde, drop);
        let m_img = self.moe_img.forward(g, p, post.i_tilde, drop);
        let (mp_text, mp_img) = self.coattn.forward(g, p, m_text, m_img);
        let fused = self.fusion.forward(g, p, mp_text, mp_img);
        let (d_vec, pv) = self.discrepancy.forward(g, p, fused.p_raw, post.t, post.i);
        let match_p = self.match_head.forward(g, p, mp_text, mp_img, drop);
        let domain_logits = match adv {
            Adversary::Reversed(alpha) => self.adversary.forward(g, p, pv, alpha, drop),
            Adversary::Plain => self.adversary.classify(g, p, pv, drop),
        };

        let windows = build_windows(&batch.labels, cfg.window, cfg.stride)?;
        let agg = self.window_attn.forward(g, p, pv, &batch.timestamps, &windows, cfg.kappa);
        let drift = drift_momentum(g, agg.l, cfg.beta);
        let (window_logits, window_probs, h) = match &self.transformer {
            Some(tf) => {
                let ts: Vec<i64> = windows.iter().map(|w| batch.timestamps[w.latest()]).collect();
                let out = tf.forward(g, p, drift.l_bar, &ts, drop);
                (out.logits, out.probs, Some(out.h))
            }
            None => {
                let (l, pr) = self.window_head.forward(g, p, drift.l_bar, drop);
                (l, pr, None)
            }
        };
        Ok(Forward {
            post,
            mp_text,
            mp_img,
            fused,
            d_vec,
            p: pv,
            match_p,
            domain_logits,
            windows,
            l: agg.l,
            drift,
            window_logits,
            window_probs,
            h,
        })
    }

    /// Full objective with two stochastic passes; `drop2` supplies the second
    /// pass's masks for the consistency term.
    #[allow(clippy::too_many_arguments)]
    pub fn step_loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &Batch,
        weights: &LossWeights,
        ctx: &LossContext,
        drop1: &mut Dropout,
        drop2: &mut Dropout,
        adv: Adversary,
    ) -> Result<StepLoss> {
        let f = self.forward(g, p, batch, drop1, adv)?;
        let f2 = self.forward(g, p, batch, drop2, adv)?;
        let window_labels: Vec<u8> = f.windows.iter().map(|w| w.label).collect();

        let centroids = match &ctx.centroids {
            Some(c) => c.clone(),
            None => class_centroids(g.value(f.p), &batch.labels),
        };
        let parts = LossParts {
            ce: focal_ce(g, f.window_probs, &window_labels, ctx.class_weights, weights)?,
            align: align_loss(g, f.fused.alignment),
            tc: tc_loss(g, f.l, weights.rho),
            match_: match_loss(g, f.match_p, &batch.match_labels),
            contrast: contrastive_loss(g, f.post.t, f.post.i, weights.tau),
            rdrop: rdrop_loss(g, f.window_probs, f2.window_probs),
            domain: domain_loss(g, f.domain_logits, &batch.domains)?,
            proto: in_batch_proto_loss_at(g, f.p, &batch.labels, &centroids)?,
            proto_mem: memory_proto_loss(g, f.p, &batch.labels, &ctx.globals, weights.margin)?,
            tc_seq: match f.h {
                Some(h) => tc_seq_loss(g, h),
                None => g.scalar(0.0),
            },
            l2: l2_penalty(g, p),
        };
        let (total, breakdown) = total_loss(g, &parts, weights)?;
        Ok(StepLoss {
            total,
            breakdown,
            forward: f,
        })
    }

    /// Deterministic window probabilities for a batch.
    pub fn predict(&self, params: &ParamSet, batch: &Batch) -> Result<(Vec<TemporalWindow>, Vec<f64>)> {
        let mut g = Graph::new();
        let p = g.bind(params);
        let f = self.forward(&mut g, &p, batch, &mut Dropout::off(), Adversary::Plain)?;
        let probs = g.value(f.window_probs).data().to_vec();
        if probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { term: "window probability".into() });
        }
        Ok((f.windows, probs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{synth_generate, SynthesisConfig};
    use crate::numcore::{grad_check, GradCheckOptions, SeedTree};
    use crate::prototypes::PrototypeBank;

    fn small(transformer: bool) -> ModelConfig {
        ModelConfig {
            dims: EncoderDims {
                d: 8,
                d_xlmr: 6,
                d_clip: 5,
                heads: 2,
            },
            moe: MoEConfig {
                experts: 2,
                expansion: 2,
            },
            n_domains: 2,
            window: 4,
            stride: 2,
            kappa: 0.5,
            beta: 0.9,
            dropout: 0.1,
            transformer: transformer.then_some(TransformerConfig {
                layers: 1,
                heads: 2,
                frequencies: 3,
            }),
        }
    }

    fn posts(n: usize, seed: u64) -> Vec<PostRecord> {
        synth_generate(&SynthesisConfig {
            n_posts: n,
            seq_len: 3,
            d_xlmr: 6,
            d_clip: 5,
            seed,
            ..Default::default()
        })
        .unwrap()
        .records
    }

    #[test]
    fn batch_is_time_sorted() {
        let recs = posts(8, 1);
        let mut refs: Vec<&PostRecord> = recs.iter().rev().collect();
        refs.swap(0, 3);
        let b = Batch::new(&refs).unwrap();
        assert!(b.timestamps.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(b.text.shape(), [24, 6]);
        assert_eq!(&b.text.data()[..6], recs[0].text_emb.row(0));
        assert!(Batch::new(&[]).is_err());
    }

    #[test]
    fn forward_shapes_and_prediction_range() {
        for tf in [false, true] {
            let mut ps = ParamSet::new();
            let mut rng = SeedTree::new(3).stream("init");
            let model = Model::new(&mut ps, small(tf), &mut rng).unwrap();
            let recs = posts(10, 2);
            let refs: Vec<&PostRecord> = recs.iter().collect();
            let batch = Batch::new(&refs).unwrap();
            let (windows, probs) = model.predict(&ps, &batch).unwrap();
            assert_eq!(windows.len(), 5);
            assert_eq!(probs.len(), 5);
            assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
            let (_, again) = model.predict(&ps, &batch).unwrap();
            assert_eq!(probs, again);
        }
    }

    #[test]
    fn widths_and_domains_are_checked() {
        let mut ps = ParamSet::new();
        let mut rng = SeedTree::new(3).stream("init");
        let model = Model::new(&mut ps, small(false), &mut rng).unwrap();
        let mut recs = posts(4, 2);
        recs[1].domain_id = 5;
        let refs: Vec<&PostRecord> = recs.iter().collect();
        assert!(model.predict(&ps, &Batch::new(&refs).unwrap()).is_err());
        let mut bad = small(false);
        bad.stride = 5;
        assert!(Model::new(&mut ParamSet::new(), bad, &mut rng).is_err());
    }

    #[test]
    fn whole_objective_matches_finite_differences() {
        let mut ps = ParamSet::new();
        let tree = SeedTree::new(11);
        let model = Model::new(&mut ps, small(true), &mut tree.stream("init")).unwrap();
        // perturb the zero-initialised scalars so every branch carries gradient
        let eta = ps.find("fusion.disc.eta").unwrap();
        ps.get_mut(eta).data_mut()[0] = 0.4;
        let recs = posts(8, 4);
        let refs: Vec<&PostRecord> = recs.iter().collect();
        let batch = Batch::new(&refs).unwrap();
        let mut bank = PrototypeBank::new(2, 8, 0.99).unwrap();
        let warm = Tensor::uniform(8, 8, -1.0, 1.0, &mut tree.stream("warm"));
        bank.ema_update(&warm, &batch.labels, &batch.domains).unwrap();
        let weights = LossWeights {
            reg: 1e-3,
            ..Default::default()
        };
        let mut ctx = LossContext {
            class_weights: [0.9, 1.1],
            globals: bank.global_prototypes(),
            centroids: None,
        };
        {
            let mut g = Graph::new();
            let b = g.bind(&ps);
            let s = model
                .step_loss(&mut g, &b, &batch, &weights, &ctx,
                    &mut Dropout::new(0.1, tree.stream("d1")),
                    &mut Dropout::new(0.1, tree.stream("d2")),
                    Adversary::Plain)
                .unwrap();
            ctx.centroids = Some(class_centroids(g.value(s.forward.p), &batch.labels));
            for (name, v) in s.breakdown.parts() {
                assert!(v.is_finite() && v >= 0.0, "{name} = {v}");
                if name != "l2" {
                    assert!(v > 0.0, "{name} inactive");
                }
            }
        }
        let report = grad_check(
            &ps,
            |g, b| {
                let mut scratch = bank.clone();
                let s = model.step_loss(
                    g,
                    b,
                    &batch,
                    &weights,
                    &ctx,
                    &mut Dropout::new(0.1, tree.stream("d1")),
                    &mut Dropout::new(0.1, tree.stream("d2")),
                    Adversary::Plain,
                )?;
                scratch.ema_update(&g.value(s.forward.p).clone(), &batch.labels, &batch.domains)?;
                Ok(s.total)
            },
            GradCheckOptions {
                max_coordinates: 300,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.coordinates_checked >= 200);
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
