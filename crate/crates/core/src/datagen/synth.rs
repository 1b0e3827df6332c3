//! Synthetic multimodal corpora with planted text/image inconsistency.
//!
//! Each post draws a latent topic; its text tokens and (when matched) its
//! image are noisy linear renderings of that topic. Misleading posts swap in
//! an image from a different topic with probability
//! `inconsistency_strength`. Labels are carried by narratives: each narrative
//! owns one label and a disjoint slice of the time span, and its posts
//! arrive uniformly inside that slice. Domains apply a fixed affine
//! distortion to both modalities.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::record::{write_dataset, DatasetHeader, PostRecord};
use crate::error::{Error, Result};
use crate::numcore::{SeedTree, StreamRng, Tensor};

const LATENT_DIM: usize = 16;
const TOPICS: usize = 16;
const CLS_NOISE: f64 = 0.2;
const TOKEN_NOISE: f64 = 0.6;
const IMAGE_NOISE: f64 = 0.2;
const DOMAIN_MIX: f64 = 0.15;
const DOMAIN_SHIFT: f64 = 0.3;
const EPOCH_START: i64 = 1_600_000_000;
const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub n_posts: usize,
    pub n_domains: usize,
    /// Fraction of misleading posts.
    pub class_balance: f64,
    pub seq_len: usize,
    pub d_xlmr: usize,
    pub d_clip: usize,
    /// Probability that a misleading post carries a mismatched image; 0 makes
    /// labels independent of the embeddings.
    pub inconsistency_strength: f64,
    pub narrative_count: usize,
    pub time_span_days: f64,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            n_posts: 2000,
            n_domains: 2,
            class_balance: 0.5,
            seq_len: 12,
            d_xlmr: 32,
            d_clip: 48,
            inconsistency_strength: 1.0,
            narrative_count: 6,
            time_span_days: 60.0,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_posts < 2 {
            return bad("n_posts must be at least 2");
        }
        if self.n_domains == 0 || self.seq_len == 0 || self.d_xlmr == 0 || self.d_clip == 0 {
            return bad("n_domains, seq_len, d_xlmr and d_clip must be positive");
        }
        if !(0.0..=1.0).contains(&self.class_balance) {
            return bad("class_balance must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.inconsistency_strength) {
            return bad("inconsistency_strength must lie in [0, 1]");
        }
        if self.narrative_count == 0 {
            return bad("narrative_count must be positive");
        }
        if !(self.time_span_days > 0.0) {
            return bad("time_span_days must be positive");
        }
        let n_mis = self.misleading_count();
        if n_mis > 0 && n_mis < self.n_posts && self.narrative_count < 2 {
            return bad("both classes present: narrative_count must be at least 2");
        }
        Ok(())
    }

    fn misleading_count(&self) -> usize {
        (self.n_posts as f64 * self.class_balance).round() as usize
    }
}

/// Ground-truth draw behind one generated post.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub narrative: usize,
    pub text_topic: usize,
    pub image_topic: usize,
    pub matched: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub header: DatasetHeader,
    pub records: Vec<PostRecord>,
    pub manifest: Vec<ManifestEntry>,
}

struct Narrative {
    label: u8,
    start: f64,
    len: f64,
}

struct Affine {
    mix: Tensor,
    shift: Vec<f64>,
}

impl Affine {
    fn random(dim: usize, rng: &mut StreamRng) -> Self {
        let mut mix = Tensor::identity(dim);
        let k = DOMAIN_MIX / (dim as f64).sqrt();
        for v in mix.data_mut() {
            *v += k * normal(rng);
        }
        Self {
            mix,
            shift: (0..dim).map(|_| DOMAIN_SHIFT * normal(rng)).collect(),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|i| self.mix.row(i).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.shift[i])
            .collect()
    }
}

fn normal(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

fn render(basis: &Tensor, latent: &[f64], noise: f64, rng: &mut StreamRng) -> Vec<f64> {
    (0..basis.rows())
        .map(|i| basis.row(i).iter().zip(latent).map(|(a, b)| a * b).sum::<f64>() + noise * normal(rng))
        .collect()
}

pub fn synth_generate(cfg: &SynthesisConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let tree = SeedTree::new(cfg.seed);
    let mut world = tree.stream("world");
    let scale = 1.0 / (LATENT_DIM as f64).sqrt();
    let topics: Vec<Vec<f64>> = (0..TOPICS)
        .map(|_| (0..LATENT_DIM).map(|_| normal(&mut world)).collect())
        .collect();
    let text_basis = Tensor::raw(
        cfg.d_xlmr,
        LATENT_DIM,
        (0..cfg.d_xlmr * LATENT_DIM).map(|_| scale * normal(&mut world)).collect(),
    );
    let image_basis = Tensor::raw(
        cfg.d_clip,
        LATENT_DIM,
        (0..cfg.d_clip * LATENT_DIM).map(|_| scale * normal(&mut world)).collect(),
    );
    let domains: Vec<(Affine, Affine)> = (0..cfg.n_domains)
        .map(|_| (Affine::random(cfg.d_xlmr, &mut world), Affine::random(cfg.d_clip, &mut world)))
        .collect();

    // Narratives: consecutive slices of the time span with labels shuffled
    // over them. Each label's slices together get a share of the span equal
    // to its share of posts, and posts pick a narrative in proportion to its
    // length, so arrivals have one common rate and gaps carry no label.
    let mut timeline = tree.stream("timeline");
    let span = cfg.time_span_days * SECONDS_PER_DAY;
    let k = cfg.narrative_count;
    let n_mis = cfg.misleading_count();
    let n_mis_narratives = if n_mis == 0 {
        0
    } else if n_mis == cfg.n_posts {
        k
    } else {
        ((k as f64 * cfg.class_balance).round() as usize).clamp(1, k - 1)
    };
    let mut labels: Vec<u8> = (0..k).map(|i| u8::from(i < n_mis_narratives)).collect();
    labels.shuffle(&mut timeline);
    let weights: Vec<f64> = (0..k).map(|_| timeline.random_range(0.5..1.5)).collect();
    let label_posts = [cfg.n_posts - n_mis, n_mis];
    let label_weight = [0u8, 1].map(|l| (0..k).filter(|&i| labels[i] == l).map(|i| weights[i]).sum::<f64>());
    let mut start = 0.0;
    let narratives: Vec<Narrative> = (0..k)
        .map(|i| {
            let l = labels[i] as usize;
            let share = label_posts[l] as f64 / cfg.n_posts as f64;
            let len = span * share * weights[i] / label_weight[l];
            let n = Narrative {
                label: labels[i],
                start,
                len,
            };
            start += len;
            n
        })
        .collect();
    let by_label: [Vec<usize>; 2] = [0u8, 1].map(|l| (0..k).filter(|&i| narratives[i].label == l).collect());
    let pickers: [Option<WeightedIndex<f64>>; 2] =
        [0, 1].map(|l: usize| WeightedIndex::new(by_label[l].iter().map(|&i| weights[i])).ok());

    let mut post_labels: Vec<u8> = (0..cfg.n_posts).map(|i| u8::from(i < n_mis)).collect();
    post_labels.shuffle(&mut timeline);

    let mut draws = tree.stream("posts");
    struct Draft {
        timestamp: i64,
        seq: usize,
        record: PostRecord,
        entry: ManifestEntry,
    }
    let mut drafts = Vec::with_capacity(cfg.n_posts);
    for (seq, &label) in post_labels.iter().enumerate() {
        let picker = pickers[label as usize].as_ref().expect("label has narratives");
        let nar = by_label[label as usize][picker.sample(&mut draws)];
        let n = &narratives[nar];
        let timestamp = EPOCH_START + (n.start + draws.random_range(0.0..1.0) * n.len).floor() as i64;
        let text_topic = draws.random_range(0..TOPICS);
        let mismatch = label == 1 && draws.random_range(0.0..1.0) < cfg.inconsistency_strength;
        let image_topic = if mismatch {
            let other = draws.random_range(0..TOPICS - 1);
            if other >= text_topic {
                other + 1
            } else {
                other
            }
        } else {
            text_topic
        };
        let domain_id = draws.random_range(0..cfg.n_domains);
        let (text_aff, img_aff) = &domains[domain_id];
        let mut text = Vec::with_capacity(cfg.seq_len * cfg.d_xlmr);
        for row in 0..cfg.seq_len {
            let noise = if row == 0 { CLS_NOISE } else { TOKEN_NOISE };
            let raw = render(&text_basis, &topics[text_topic], noise, &mut draws);
            text.extend(text_aff.apply(&raw));
        }
        let img = img_aff.apply(&render(&image_basis, &topics[image_topic], IMAGE_NOISE, &mut draws));
        drafts.push(Draft {
            timestamp,
            seq,
            record: PostRecord {
                id: String::new(),
                timestamp,
                text_emb: Tensor::raw(cfg.seq_len, cfg.d_xlmr, text),
                img_emb: Tensor::row_vector(img),
                label,
                match_label: u8::from(!mismatch),
                domain_id,
            },
            entry: ManifestEntry {
                id: String::new(),
                narrative: nar,
                text_topic,
                image_topic,
                matched: !mismatch,
            },
        });
    }
    drafts.sort_by_key(|d| (d.timestamp, d.seq));
    let width = cfg.n_posts.to_string().len().max(5);
    let (records, manifest) = drafts
        .into_iter()
        .enumerate()
        .map(|(i, mut d)| {
            let id = format!("p{i:0width$}");
            d.record.id = id.clone();
            d.entry.id = id;
            (d.record, d.entry)
        })
        .unzip();
    Ok(SynthOutput {
        header: DatasetHeader::new(cfg.seq_len, cfg.d_xlmr, cfg.d_clip),
        records,
        manifest,
    })
}

pub fn write_manifest(path: &Path, manifest: &[ManifestEntry]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for m in manifest {
        serde_json::to_writer(&mut w, m).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `posts.jsonl` and `manifest.jsonl` into `dir`.
pub fn write_synth(dir: &Path, out: &SynthOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_dataset(&dir.join("posts.jsonl"), &out.header, &out.records)?;
    write_manifest(&dir.join("manifest.jsonl"), &out.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(strength: f64) -> SynthesisConfig {
        SynthesisConfig {
            n_posts: 300,
            inconsistency_strength: strength,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn rejects_tiny_corpora() {
        let cfg = SynthesisConfig {
            n_posts: 1,
            ..Default::default()
        };
        assert!(synth_generate(&cfg).is_err());
    }

    #[test]
    fn match_label_follows_topic_draw() {
        for s in [0.0, 0.5, 1.0] {
            let out = synth_generate(&small(s)).unwrap();
            for (r, m) in out.records.iter().zip(&out.manifest) {
                assert_eq!(r.id, m.id);
                assert_eq!(r.match_label == 1, m.text_topic == m.image_topic);
                assert_eq!(m.matched, m.text_topic == m.image_topic);
                if r.label == 0 {
                    assert!(m.matched);
                }
            }
        }
        let full = synth_generate(&small(1.0)).unwrap();
        assert!(full.records.iter().all(|r| r.match_label == 1 - r.label));
        let none = synth_generate(&small(0.0)).unwrap();
        assert!(none.records.iter().all(|r| r.match_label == 1));
    }

    #[test]
    fn labels_balanced_and_sorted_in_time() {
        let out = synth_generate(&small(1.0)).unwrap();
        let pos = out.records.iter().filter(|r| r.label == 1).count();
        assert_eq!(pos, 150);
        assert!(out.records.windows(2).all(|w| w[0].time_key() <= w[1].time_key()));
        assert!(out.records.iter().all(|r| r.domain_id < 2));
        assert!(out.records.iter().all(|r| r.text_emb.is_finite() && r.img_emb.is_finite()));
    }

    #[test]
    fn narratives_own_disjoint_time_slices() {
        let out = synth_generate(&small(1.0)).unwrap();
        let mut seen: Vec<usize> = Vec::new();
        for m in &out.manifest {
            if seen.last() != Some(&m.narrative) {
                assert!(!seen.contains(&m.narrative), "narrative {} resumed later", m.narrative);
                seen.push(m.narrative);
            }
        }
    }
}
