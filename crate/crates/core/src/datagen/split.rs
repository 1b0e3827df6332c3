//! Stratified train/validation/test partition.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::record::PostRecord;
use crate::error::{Error, Result};
use crate::numcore::SeedTree;

/// Indices into the input slice, each list ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SplitPart {
    Train,
    Validation,
    Test,
}

impl SplitPart {
    pub fn name(self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Validation => "validation",
            SplitPart::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitPart::Train),
            "validation" | "val" => Ok(SplitPart::Validation),
            "test" => Ok(SplitPart::Test),
            other => Err(Error::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

impl Split {
    pub fn part(&self, part: SplitPart) -> &[usize] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Validation => &self.validation,
            SplitPart::Test => &self.test,
        }
    }
}

pub fn validate_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::Config(format!("split ratios must be nonnegative, got {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must sum to 1, got {sum}")));
    }
    Ok(())
}

/// Stratifies by `(label, domain_id)` and shuffles within each stratum.
///
/// Strata are laid end to end and a cumulative rounding rule assigns the
/// n-th record to train while the train count is below `round(a·n)`, then to
/// validation while the running train+validation count is below
/// `round((a+b)·n)`, else to test. Totals therefore hit the rounded targets
/// exactly and every stratum is spread proportionally.
pub fn split(records: &[PostRecord], ratios: [f64; 3], seed: u64) -> Result<Split> {
    validate_ratios(ratios)?;
    let mut strata: BTreeMap<(u8, usize), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        strata.entry((r.label, r.domain_id)).or_default().push(i);
    }
    if let Some(((label, domain), members)) = strata.iter().find(|(_, m)| m.len() < 3) {
        return Err(Error::Invalid(format!(
            "stratum label={label} domain={domain} has {} record(s); at least 3 required",
            members.len()
        )));
    }
    let mut rng = SeedTree::new(seed).stream("split");
    let mut out = Split::default();
    let (a, ab) = (ratios[0], ratios[0] + ratios[1]);
    let mut n = 0usize;
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            n += 1;
            let train_target = (a * n as f64).round() as usize;
            let head_target = (ab * n as f64).round() as usize;
            if out.train.len() < train_target {
                out.train.push(i);
            } else if out.train.len() + out.validation.len() < head_target {
                out.validation.push(i);
            } else {
                out.test.push(i);
            }
        }
    }
    out.train.sort_unstable();
    out.validation.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;
    use proptest::prelude::*;

    fn records(labels_domains: &[(u8, usize)]) -> Vec<PostRecord> {
        labels_domains
            .iter()
            .enumerate()
            .map(|(i, &(label, domain_id))| PostRecord {
                id: format!("r{i:04}"),
                timestamp: i as i64,
                text_emb: Tensor::zeros(1, 2),
                img_emb: Tensor::zeros(1, 2),
                label,
                match_label: 1,
                domain_id,
            })
            .collect()
    }

    #[test]
    fn all_train() {
        let rs = records(&[(0, 0), (1, 0), (0, 0), (1, 0), (0, 0), (1, 0)]);
        let s = split(&rs, [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(s.train, (0..6).collect::<Vec<_>>());
        assert!(s.validation.is_empty() && s.test.is_empty());
    }

    #[test]
    fn balanced_hundred() {
        for domains in [1, 2] {
            let layout: Vec<(u8, usize)> = (0..100).map(|i| ((i % 2) as u8, (i / 2) % domains)).collect();
            let rs = records(&layout);
            let s = split(&rs, [0.8, 0.1, 0.1], 7).unwrap();
            assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (80, 10, 10));
            for (part, n) in [(&s.train, 80i64), (&s.validation, 10), (&s.test, 10)] {
                let pos = part.iter().filter(|&&i| rs[i].label == 1).count() as i64;
                assert!((pos - n / 2).abs() <= 1, "{pos} of {n}");
            }
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let layout: Vec<(u8, usize)> = (0..60).map(|i| ((i % 2) as u8, i % 3)).collect();
        let rs = records(&layout);
        let a = split(&rs, [0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!(a, split(&rs, [0.6, 0.2, 0.2], 3).unwrap());
        assert_ne!(a, split(&rs, [0.6, 0.2, 0.2], 4).unwrap());
    }

    #[test]
    fn small_stratum_rejected() {
        let rs = records(&[(0, 0), (0, 0), (0, 0), (1, 0), (1, 0)]);
        assert!(split(&rs, [0.8, 0.1, 0.1], 0).is_err());
    }

    #[test]
    fn bad_ratios_rejected() {
        let rs = records(&[(0, 0); 4]);
        assert!(split(&rs, [0.5, 0.1, 0.1], 0).is_err());
        assert!(split(&rs, [1.2, -0.1, -0.1], 0).is_err());
    }

    proptest! {
        #[test]
        fn split_is_partition(
            n in 12usize..120,
            domains in 1usize..3,
            seed in any::<u64>(),
            a in 0.3f64..0.9,
        ) {
            let layout: Vec<(u8, usize)> = (0..n).map(|i| ((i % 2) as u8, (i / 2) % domains)).collect();
            let rs = records(&layout);
            let b = (1.0 - a) / 2.0;
            let s = split(&rs, [a, b, 1.0 - a - b], seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(s.train.len(), (a * n as f64).round() as usize);
        }
    }
}
