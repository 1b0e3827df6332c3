//! Projection of fixture embeddings into the shared space and intra-modal
//! self-attention.
//!
//! A batch of `B` posts is processed at once: token sequences are stacked
//! into a `B·L × d_xlmr` matrix and images into `B × d_clip`.

use crate::error::{Error, Result};
use crate::layers::{Linear, Norm, SelfAttention};
use crate::numcore::{Bound, Graph, ParamSet, StreamRng, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    pub d: usize,
    pub d_xlmr: usize,
    pub d_clip: usize,
    pub heads: usize,
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_xlmr == 0 || self.d_clip == 0 || self.heads == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d={} is not divisible by {} heads", self.d, self.heads)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Encoder {
    pub text_proj: Linear,
    pub text_norm: Norm,
    pub img_proj: Linear,
    pub img_norm: Norm,
    pub text_attn: SelfAttention,
    pub text_attn_norm: Norm,
    pub img_attn: SelfAttention,
    pub img_attn_norm: Norm,
}

/// Graph handles for one encoded batch.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedPost {
    /// `B·L × d` projected tokens.
    pub s: Var,
    /// `B × d` sentence vectors (row 0 of each sequence of `s`).
    pub t: Var,
    /// `B × d` projected images.
    pub i: Var,
    /// `B·L × d` after self-attention.
    pub s_hat: Var,
    pub t_tilde: Var,
    pub i_tilde: Var,
    /// Attention node of the text stage.
    pub text_attention: Var,
    pub img_attention: Var,
}

impl Encoder {
    pub fn new(ps: &mut ParamSet, dims: EncoderDims, rng: &mut StreamRng) -> Result<Self> {
        dims.validate()?;
        let d = dims.d;
        Ok(Self {
            text_proj: Linear::new(ps, "encoder.text_proj", d, dims.d_xlmr, false, rng),
            text_norm: Norm::new(ps, "encoder.text_norm", d),
            img_proj: Linear::new(ps, "encoder.img_proj", d, dims.d_clip, false, rng),
            img_norm: Norm::new(ps, "encoder.img_norm", d),
            text_attn: SelfAttention::new(ps, "encoder.text_attn", d, dims.heads, rng),
            text_attn_norm: Norm::new(ps, "encoder.text_attn_norm", d),
            img_attn: SelfAttention::new(ps, "encoder.img_attn", d, dims.heads, rng),
            img_attn_norm: Norm::new(ps, "encoder.img_attn_norm", d),
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, text: Var, img: Var, seq_len: usize) -> ProjectedPost {
        let s = project(g, p, text, &self.text_proj, &self.text_norm);
        let t = sentence_rows(g, s, seq_len);
        let i = project(g, p, img, &self.img_proj, &self.img_norm);
        let (s_hat, text_attention) = intra_attention(g, p, s, seq_len, &self.text_attn, &self.text_attn_norm);
        let t_tilde = sentence_rows(g, s_hat, seq_len);
        let (i_tilde, img_attention) = intra_attention(g, p, i, 1, &self.img_attn, &self.img_attn_norm);
        ProjectedPost {
            s,
            t,
            i,
            s_hat,
            t_tilde,
            i_tilde,
            text_attention,
            img_attention,
        }
    }
}

/// `layer_norm(x · Wᵀ)` row-wise.
pub fn project(g: &mut Graph, p: &Bound, x: Var, proj: &Linear, norm: &Norm) -> Var {
    let y = proj.forward(g, p, x);
    norm.forward(g, p, y)
}

/// `layer_norm(x + MHSA(x))` over sequences of `seq_len` rows.
pub fn intra_attention(
    g: &mut Graph,
    p: &Bound,
    x: Var,
    seq_len: usize,
    attn: &SelfAttention,
    norm: &Norm,
) -> (Var, Var) {
    let (a, probs) = attn.forward(g, p, x, seq_len);
    let r = g.add(x, a);
    (norm.forward(g, p, r), probs)
}

/// Row 0 of every `seq_len`-row segment.
pub fn sentence_rows(g: &mut Graph, s: Var, seq_len: usize) -> Var {
    let rows = g.shape(s)[0];
    let idx: Vec<usize> = (0..rows).step_by(seq_len).collect();
    g.gather_rows(s, &idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, layer_norm, GradCheckOptions, ParamId, SeedTree, Tensor, LAYER_NORM_EPS};

    fn dims(d: usize, dx: usize, dc: usize, heads: usize) -> EncoderDims {
        EncoderDims {
            d,
            d_xlmr: dx,
            d_clip: dc,
            heads,
        }
    }

    fn setup(dm: EncoderDims, seed: u64) -> (ParamSet, Encoder) {
        let mut ps = ParamSet::new();
        let mut rng = SeedTree::new(seed).stream("enc");
        let enc = Encoder::new(&mut ps, dm, &mut rng).unwrap();
        (ps, enc)
    }

    fn zero(ps: &mut ParamSet, ids: &[ParamId]) {
        for &id in ids {
            ps.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn set(ps: &mut ParamSet, id: ParamId, t: Tensor) {
        *ps.get_mut(id) = t;
    }

    fn rows_ln(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
        m.iter()
            .map(|r| layer_norm(r, &vec![1.0; r.len()], &vec![0.0; r.len()], LAYER_NORM_EPS).unwrap())
            .collect()
    }

    fn mat_bt(x: &[Vec<f64>], w: &Tensor) -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| (0..w.rows()).map(|o| (0..w.cols()).map(|i| r[i] * w.get(o, i)).sum()).collect())
            .collect()
    }

    fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut ps = ParamSet::new();
        let mut rng = SeedTree::new(0).stream("x");
        assert!(Encoder::new(&mut ps, dims(6, 3, 3, 4), &mut rng).is_err());
    }

    #[test]
    fn zero_projection_gives_zero_rows() {
        let (mut ps, enc) = setup(dims(4, 3, 5, 2), 1);
        zero(&mut ps, &[enc.text_proj.w, enc.img_proj.w]);
        let mut rng = SeedTree::new(2).stream("x");
        let mut g = Graph::new();
        let b = g.bind(&ps);
        let text = g.constant(Tensor::uniform(6, 3, -1.0, 1.0, &mut rng));
        let img = g.constant(Tensor::uniform(2, 5, -1.0, 1.0, &mut rng));
        let out = enc.forward(&mut g, &b, text, img, 3);
        assert!(g.value(out.s).data().iter().all(|v| v.abs() < 1e-12));
        assert!(g.value(out.i).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn identity_projection_preserves_normalized_input() {
        let (mut ps, enc) = setup(dims(4, 4, 4, 2), 3);
        set(&mut ps, enc.text_proj.w, Tensor::identity(4));
        set(&mut ps, enc.img_proj.w, Tensor::identity(4));
        let x = rows_ln(&[vec![0.3, -1.2, 2.0, 0.7]]);
        let mut g = Graph::new();
        let b = g.bind(&ps);
        let text = g.constant(Tensor::from_rows(&x).unwrap());
        let img = g.constant(Tensor::from_rows(&x).unwrap());
        let out = enc.forward(&mut g, &b, text, img, 1);
        close(g.value(out.s).data(), &x[0], 1e-4);
        close(g.value(out.i).data(), &x[0], 1e-4);
        assert_eq!(g.value(out.t), g.value(out.s));
    }

    #[test]
    fn projection_matches_direct_oracle() {
        let (ps, enc) = setup(dims(4, 3, 3, 1), 4);
        let mut rng = SeedTree::new(5).stream("x");
        let x = Tensor::uniform(2, 3, -2.0, 2.0, &mut rng);
        let y = Tensor::uniform(1, 3, -2.0, 2.0, &mut rng);
        let mut g = Graph::new();
        let b = g.bind(&ps);
        let text = g.constant(x.clone());
        let img = g.constant(y.clone());
        let out = enc.forward(&mut g, &b, text, img, 2);
        let want_s = rows_ln(&mat_bt(&to_rows(&x), ps.get(enc.text_proj.w)));
        close(g.value(out.s).data(), &want_s.concat(), 1e-9);
        close(g.value(out.t).data(), &want_s[0], 0.0 + 1e-15);
        let want_i = rows_ln(&mat_bt(&to_rows(&y), ps.get(enc.img_proj.w)));
        close(g.value(out.i).data(), &want_i[0], 1e-9);
    }

    #[test]
    fn zero_attention_output_is_residual_only() {
        let (mut ps, enc) = setup(dims(8, 5, 6, 4), 6);
        zero(&mut ps, &[enc.text_attn.o.w, enc.img_attn.o.w]);
        let mut rng = SeedTree::new(7).stream("x");
        let mut g = Graph::new();
        let b = g.bind(&ps);
        let text = g.constant(Tensor::uniform(6, 5, -1.0, 1.0, &mut rng));
        let img = g.constant(Tensor::uniform(2, 6, -1.0, 1.0, &mut rng));
        let out = enc.forward(&mut g, &b, text, img, 3);
        let s = to_rows(g.value(out.s));
        close(g.value(out.s_hat).data(), &rows_ln(&s).concat(), 1e-12);
        let i = to_rows(g.value(out.i));
        close(g.value(out.i_tilde).data(), &rows_ln(&i).concat(), 1e-12);
    }

    #[test]
    fn single_token_attention_weight_is_exactly_one() {
        let (ps, enc) = setup(dims(8, 5, 6, 4), 8);
        let mut rng = SeedTree::new(9).stream("x");
        let mut g = Graph::new();
        let b = g.bind(&ps);
        let text = g.constant(Tensor::uniform(3, 5, -3.0, 3.0, &mut rng));
        let img = g.constant(Tensor::uniform(3, 6, -3.0, 3.0, &mut rng));
        let out = enc.forward(&mut g, &b, text, img, 1);
        assert!(g.attention_probs(out.text_attention).unwrap().iter().all(|&p| p == 1.0));
        assert!(g.attention_probs(out.img_attention).unwrap().iter().all(|&p| p == 1.0));
    }

    /// Hand-rolled single-head attention for one sequence.
    fn attention_oracle(s: &[Vec<f64>], sa: &SelfAttention, ps: &ParamSet) -> Vec<Vec<f64>> {
        let q = mat_bt(s, ps.get(sa.q.w));
        let k = mat_bt(s, ps.get(sa.k.w));
        let v = mat_bt(s, ps.get(sa.v.w));
        let d = s[0].len() as f64;
        let ctx: Vec<Vec<f64>> = q
            .iter()
            .map(|qi| {
                let scores: Vec<f64> =
                    k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                (0..s[0].len()).map(|c| e.iter().zip(&v).map(|(w, vj)| w / z * vj[c]).sum()).collect()
            })
            .collect();
        let o = mat_bt(&ctx, ps.get(sa.o.w));
        let r: Vec<Vec<f64>> = s.iter().zip(&o).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
        rows_ln(&r)
    }

    #[test]
    fn text_attention_matches_single_head_oracle() {
        let (ps, enc) = setup(dims(6, 4, 4, 1), 10);
        let mut rng = SeedTree::new(11).stream("x");
        let mut g = Graph::new();
        let b = g.bind(&ps);
        let text = g.constant(Tensor::uniform(3, 4, -2.0, 2.0, &mut rng));
        let img = g.constant(Tensor::uniform(1, 4, -2.0, 2.0, &mut rng));
        let out = enc.forward(&mut g, &b, text, img, 3);
        let want = attention_oracle(&to_rows(g.value(out.s)), &enc.text_attn, &ps);
        close(g.value(out.s_hat).data(), &want.concat(), 1e-8);
        let want_i = attention_oracle(&to_rows(g.value(out.i)), &enc.img_attn, &ps);
        close(g.value(out.i_tilde).data(), &want_i.concat(), 1e-8);
    }

    #[test]
    fn sentence_vector_is_invariant_to_token_permutation() {
        let (ps, enc) = setup(dims(6, 6, 4, 1), 12);
        let mut rng = SeedTree::new(13).stream("x");
        let rows: Vec<Vec<f64>> = (0..5).map(|_| Tensor::uniform(1, 6, -2.0, 2.0, &mut rng).into_data()).collect();
        let mut perm = rows.clone();
        perm.swap(1, 4);
        perm.swap(2, 3);
        let run = |r: &[Vec<f64>]| {
            let mut g = Graph::new();
            let b = g.bind(&ps);
            let s = g.constant(Tensor::from_rows(r).unwrap());
            let (s_hat, _) = intra_attention(&mut g, &b, s, 5, &enc.text_attn, &enc.text_attn_norm);
            to_rows(g.value(s_hat))
        };
        let a = run(&rows);
        let c = run(&perm);
        close(&a[0], &c[0], 1e-12);
        close(&a[1], &c[4], 1e-12);
        close(&a[2], &c[3], 1e-12);
    }

    #[test]
    fn image_stage_gradient_matches_finite_differences() {
        let (ps, enc) = setup(dims(8, 3, 5, 4), 14);
        let mut wrapped = ps.clone();
        let mut rng = SeedTree::new(15).stream("x");
        let input = wrapped.add("input", Tensor::uniform(2, 8, -2.0, 2.0, &mut rng));
        let probe = Tensor::uniform(2, 8, -1.0, 1.0, &mut rng);
        let report = grad_check(
            &wrapped,
            |g, b| {
                let (y, _) = intra_attention(g, b, b.get(input), 1, &enc.img_attn, &enc.img_attn_norm);
                let w = g.mul_const(y, &probe);
                Ok(g.sum(w))
            },
            GradCheckOptions {
                max_coordinates: 10_000,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }
}
