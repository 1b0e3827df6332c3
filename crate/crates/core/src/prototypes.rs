//! Class-centroid losses and the per-(dataset, class) prototype memory.

use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};

/// EMA prototype memory, one cell per (dataset, class).
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    n_datasets: usize,
    d: usize,
    momentum: f64,
    proto: Vec<f64>,
    initialized: Vec<bool>,
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl PrototypeBank {
    pub fn new(n_datasets: usize, d: usize, momentum: f64) -> Result<Self> {
        if n_datasets == 0 || d == 0 {
            return Err(Error::Invalid("prototype bank needs at least one dataset and one dimension".into()));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Invalid(format!("prototype momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            n_datasets,
            d,
            momentum,
            proto: vec![0.0; n_datasets * 2 * d],
            initialized: vec![false; n_datasets * 2],
        })
    }

    /// Rebuilds a bank from stored cells, e.g. from a checkpoint.
    pub fn from_parts(n_datasets: usize, d: usize, momentum: f64, proto: Vec<f64>, initialized: Vec<bool>) -> Result<Self> {
        let mut bank = Self::new(n_datasets, d, momentum)?;
        if proto.len() != bank.proto.len() || initialized.len() != bank.initialized.len() {
            return Err(Error::Shape("prototype bank cell count mismatch".into()));
        }
        for (cell, &init) in initialized.iter().enumerate() {
            if init && !proto[cell * d..(cell + 1) * d].iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { term: "prototype".into() });
            }
        }
        bank.proto = proto;
        bank.initialized = initialized;
        Ok(bank)
    }

    pub fn n_datasets(&self) -> usize {
        self.n_datasets
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// All cells, dataset-major then class, flattened.
    pub fn raw(&self) -> &[f64] {
        &self.proto
    }

    pub fn initialized_flags(&self) -> &[bool] {
        &self.initialized
    }

    fn cell(&self, dataset: usize, class: usize) -> usize {
        dataset * 2 + class
    }

    pub fn proto(&self, dataset: usize, class: usize) -> &[f64] {
        let c = self.cell(dataset, class);
        &self.proto[c * self.d..(c + 1) * self.d]
    }

    pub fn is_initialized(&self, dataset: usize, class: usize) -> bool {
        self.initialized[self.cell(dataset, class)]
    }

    pub fn initialized_count(&self) -> usize {
        self.initialized.iter().filter(|&&b| b).count()
    }

    /// Folds the detached batch representations `p` (`B × d`) into the bank.
    pub fn ema_update(&mut self, p: &Tensor, y: &[u8], datasets: &[usize]) -> Result<()> {
        let b = p.rows();
        if p.cols() != self.d || y.len() != b || datasets.len() != b {
            return Err(Error::Shape(format!(
                "bank update with {b}×{} representations, {} labels, {} dataset ids",
                p.cols(),
                y.len(),
                datasets.len()
            )));
        }
        let mut sums = vec![0.0; self.proto.len()];
        let mut counts = vec![0usize; self.initialized.len()];
        for i in 0..b {
            if datasets[i] >= self.n_datasets || y[i] > 1 {
                return Err(Error::Invalid(format!("bank cell ({}, {}) out of range", datasets[i], y[i])));
            }
            let c = self.cell(datasets[i], y[i] as usize);
            counts[c] += 1;
            for (s, v) in sums[c * self.d..(c + 1) * self.d].iter_mut().zip(normalized(p.row(i))) {
                *s += v;
            }
        }
        let m = self.momentum;
        for (c, &n) in counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let mean: Vec<f64> = sums[c * self.d..(c + 1) * self.d].iter().map(|s| s / n as f64).collect();
            let mu = normalized(&mean);
            let slot = &mut self.proto[c * self.d..(c + 1) * self.d];
            if self.initialized[c] {
                for (p, u) in slot.iter_mut().zip(&mu) {
                    *p = m * *p + (1.0 - m) * u;
                }
            } else {
                slot.copy_from_slice(&mu);
                self.initialized[c] = true;
            }
        }
        Ok(())
    }

    /// Unit-norm global prototype per class, defined once two cells overall
    /// and at least one cell of that class are initialized.
    pub fn global_prototypes(&self) -> [Option<Vec<f64>>; 2] {
        if self.initialized_count() < 2 {
            return [None, None];
        }
        [0, 1].map(|c| {
            let cells: Vec<usize> = (0..self.n_datasets).filter(|&ds| self.is_initialized(ds, c)).collect();
            if cells.is_empty() {
                return None;
            }
            let mut mean = vec![0.0; self.d];
            for &ds in &cells {
                for (m, v) in mean.iter_mut().zip(self.proto(ds, c)) {
                    *m += v / cells.len() as f64;
                }
            }
            Some(normalized(&mean))
        })
    }
}

/// Per-class mean of the rows of `p`; `None` for classes absent from `y`.
pub fn class_centroids(p: &Tensor, y: &[u8]) -> [Option<Vec<f64>>; 2] {
    [0u8, 1].map(|c| {
        let idx: Vec<usize> = (0..p.rows()).filter(|&i| y[i] == c).collect();
        if idx.is_empty() {
            return None;
        }
        let mut mu = vec![0.0; p.cols()];
        for &i in &idx {
            for (m, v) in mu.iter_mut().zip(p.row(i)) {
                *m += v / idx.len() as f64;
            }
        }
        Some(mu)
    })
}

/// `½ Σ_c mean_{y_i=c} (1 − cos(P_i, μ_c))` with `μ_c` detached.
pub fn in_batch_proto_loss(g: &mut Graph, p: Var, y: &[u8]) -> Result<Var> {
    let [b, _] = g.shape(p);
    if b == 0 || y.len() != b {
        return Err(Error::Shape(format!("{} labels for {b} representations", y.len())));
    }
    let centroids = class_centroids(g.value(p), y);
    in_batch_proto_loss_at(g, p, y, &centroids)
}

/// As [`in_batch_proto_loss`] with the centroids supplied by the caller, so a
/// finite-difference probe can hold them fixed.
pub fn in_batch_proto_loss_at(g: &mut Graph, p: Var, y: &[u8], centroids: &[Option<Vec<f64>>; 2]) -> Result<Var> {
    let [b, d] = g.shape(p);
    if b == 0 || y.len() != b {
        return Err(Error::Shape(format!("{} labels for {b} representations", y.len())));
    }
    let mut acc = g.scalar(0.0);
    for c in 0..2u8 {
        let idx: Vec<usize> = (0..b).filter(|&i| y[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        let Some(mu) = &centroids[c as usize] else {
            return Err(Error::Invalid(format!("no centroid supplied for class {c}")));
        };
        if mu.len() != d {
            return Err(Error::Shape("centroid width".into()));
        }
        let centre = g.constant(Tensor::from_rows(&vec![mu.clone(); idx.len()])?);
        let members = g.gather_rows(p, &idx);
        let cos = g.row_cosine(members, centre);
        let m = g.mean(cos);
        let term = g.affine(m, -1.0, 1.0);
        acc = g.add(acc, term);
    }
    Ok(g.scale(acc, 0.5))
}

/// `Σ_i [1 − cos(P_i, g_{y_i}) + max(0, cos(P_i, g_{1−y_i}) − margin)]`,
/// skipping any part whose global prototype is undefined.
pub fn memory_proto_loss(g: &mut Graph, p: Var, y: &[u8], globals: &[Option<Vec<f64>>; 2], margin: f64) -> Result<Var> {
    let [b, d] = g.shape(p);
    if y.len() != b {
        return Err(Error::Shape(format!("{} labels for {b} representations", y.len())));
    }
    let mut acc = g.scalar(0.0);
    for c in 0..2usize {
        let idx: Vec<usize> = (0..b).filter(|&i| y[i] as usize == c).collect();
        if idx.is_empty() {
            continue;
        }
        let members = g.gather_rows(p, &idx);
        if let Some(own) = &globals[c] {
            if own.len() != d {
                return Err(Error::Shape("global prototype width".into()));
            }
            let anchor = g.constant(Tensor::from_rows(&vec![own.clone(); idx.len()])?);
            let cos = g.row_cosine(members, anchor);
            let s = g.sum(cos);
            let pull = g.affine(s, -1.0, idx.len() as f64);
            acc = g.add(acc, pull);
        }
        if let Some(other) = &globals[1 - c] {
            if other.len() != d {
                return Err(Error::Shape("global prototype width".into()));
            }
            let anchor = g.constant(Tensor::from_rows(&vec![other.clone(); idx.len()])?);
            let cos = g.row_cosine(members, anchor);
            let shifted = g.affine(cos, 1.0, -margin);
            let hinge = g.relu(shifted);
            let s = g.sum(hinge);
            acc = g.add(acc, s);
        }
    }
    Ok(acc)
}

/// Plain-arithmetic mirror of [`memory_proto_loss`].
pub fn memory_proto_value(p: &Tensor, y: &[u8], globals: &[Option<Vec<f64>>; 2], margin: f64) -> f64 {
    (0..p.rows())
        .map(|i| {
            let c = y[i] as usize;
            let pull = globals[c].as_ref().map_or(0.0, |gc| 1.0 - cosine(p.row(i), gc));
            let push = globals[1 - c]
                .as_ref()
                .map_or(0.0, |go| (cosine(p.row(i), go) - margin).max(0.0));
            pull + push
        })
        .sum()
}
