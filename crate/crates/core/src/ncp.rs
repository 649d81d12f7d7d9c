//! Nearest-class-prototype (NCP) classifier with an extra OOD prototype, and
//! the closed-form gradient of its cross-entropy loss with respect to that
//! OOD prototype.
//!
//! Class indices are 0-based: `0..C` are the in-distribution classes and
//! index `C` is the OOD class.
//!
//! For logits `L_i = -||h - p_i||` the cross-entropy `H(h, y) = lse(L) - L_y`
//! depends on the OOD prototype only through `L_C`. For every in-distribution
//! label `y`, `dH/dL_C = p_ood(h)` and `grad_{p_ood} L_C = (h - p_ood) / ||h - p_ood||`,
//! so the gradient is `p_ood(h) * (h - p_ood) / ||h - p_ood||` whatever `y` is.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{GroodError, Result};
use crate::matrix::{distance, squared_distance, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct NcpModel {
    prototypes: Matrix,
    ood_prototype: Vec<f64>,
}

impl NcpModel {
    pub fn new(prototypes: Matrix, ood_prototype: Vec<f64>) -> Result<Self> {
        if prototypes.rows() == 0 {
            return Err(GroodError::Empty("NCP model needs at least one class"));
        }
        if prototypes.cols() != ood_prototype.len() {
            return Err(GroodError::DimensionMismatch(format!(
                "class prototypes have d={}, OOD prototype d={}",
                prototypes.cols(),
                ood_prototype.len()
            )));
        }
        prototypes.ensure_finite()?;
        if let Some(col) = ood_prototype.iter().position(|v| !v.is_finite()) {
            return Err(GroodError::NonFinite { row: 0, col });
        }
        if let Some(i) = prototypes.iter_rows().position(|p| p == ood_prototype.as_slice()) {
            return Err(GroodError::DegenerateModel(i));
        }
        Ok(Self {
            prototypes,
            ood_prototype,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn prototypes(&self) -> &Matrix {
        &self.prototypes
    }

    pub fn ood_prototype(&self) -> &[f64] {
        &self.ood_prototype
    }

    fn check_dim(&self, h: &[f64]) {
        assert_eq!(h.len(), self.dim(), "feature dimension does not match model");
    }

    /// Negative Euclidean distances to every class prototype, then to the OOD
    /// prototype (length `C + 1`).
    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        self.check_dim(h);
        self.prototypes
            .iter_rows()
            .chain(std::iter::once(self.ood_prototype.as_slice()))
            .map(|p| -distance(h, p))
            .collect()
    }

    pub fn probabilities(&self, h: &[f64]) -> Vec<f64> {
        softmax(&self.logits(h))
    }

    /// Softmax probability of the OOD class.
    pub fn ood_probability(&self, h: &[f64]) -> f64 {
        self.probabilities(h)[self.num_classes()]
    }

    /// Cross-entropy `-log p_y(h)`, `y` in `0..=C`.
    pub fn loss(&self, h: &[f64], y: usize) -> f64 {
        let logits = self.logits(h);
        assert!(y < logits.len(), "label {y} out of range");
        log_sum_exp(&logits) - logits[y]
    }

    pub fn grad_wrt_ood_prototype(&self, h: &[f64]) -> OodGradient {
        let mut out = vec![0.0; self.dim()];
        let degenerate = self.write_ood_gradient(h, &mut out);
        OodGradient {
            vector: out,
            degenerate,
        }
    }

    /// Writes the OOD-prototype gradient into `out`; returns `true` for the
    /// degenerate case `h == p_ood`, where `out` is zeroed.
    fn write_ood_gradient(&self, h: &[f64], out: &mut [f64]) -> bool {
        let dist = distance(h, &self.ood_prototype);
        if dist == 0.0 {
            out.fill(0.0);
            return true;
        }
        let scale = self.ood_probability(h) / dist;
        for ((o, x), p) in out.iter_mut().zip(h).zip(&self.ood_prototype) {
            *o = scale * (x - p);
        }
        false
    }

    /// Gradient of `H(h, y)` with respect to all class prototypes,
    /// concatenated class by class (length `C * d`). `y` must be an
    /// in-distribution class.
    pub fn grad_wrt_class_prototypes(&self, h: &[f64], y: usize) -> Vec<f64> {
        assert!(y < self.num_classes(), "label {y} is not an ID class");
        let probs = self.probabilities(h);
        let d = self.dim();
        let mut out = vec![0.0; self.num_classes() * d];
        for (i, p) in self.prototypes.iter_rows().enumerate() {
            let dist = distance(h, p);
            if dist == 0.0 {
                continue;
            }
            let coef = (probs[i] - if i == y { 1.0 } else { 0.0 }) / dist;
            for ((o, x), q) in out[i * d..(i + 1) * d].iter_mut().zip(h).zip(p) {
                *o = coef * (x - q);
            }
        }
        out
    }

    /// Index of the nearest prototype, lowest index on ties. With
    /// `include_ood` the OOD prototype competes as class `C`.
    pub fn predict(&self, h: &[f64], include_ood: bool) -> usize {
        self.check_dim(h);
        let mut best = (0, f64::INFINITY);
        let candidates = self
            .prototypes
            .iter_rows()
            .chain(include_ood.then_some(self.ood_prototype.as_slice()));
        for (i, p) in candidates.enumerate() {
            let d = squared_distance(h, p);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// In-distribution classes ordered by increasing distance from `h`,
    /// ties by lower index.
    pub fn ranked_classes(&self, h: &[f64]) -> Vec<usize> {
        let d: Vec<f64> = self
            .prototypes
            .iter_rows()
            .map(|p| squared_distance(h, p))
            .collect();
        let mut idx: Vec<usize> = (0..d.len()).collect();
        idx.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
        idx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodGradient {
    pub vector: Vec<f64>,
    /// Set when `h` coincides with the OOD prototype.
    pub degenerate: bool,
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Closed-form OOD-prototype gradients for a batch of features.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap {
    pub gradients: Matrix,
    /// Row indices into the source feature matrix.
    pub source_ids: Vec<usize>,
    /// Rows whose feature coincided with the OOD prototype.
    pub degenerate_rows: Vec<usize>,
}

impl GradientMap {
    pub fn len(&self) -> usize {
        self.gradients.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.gradients.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.gradients.cols()
    }
}

pub fn gradient_map(features: &Matrix, model: &NcpModel) -> Result<GradientMap> {
    if features.cols() != model.dim() {
        return Err(GroodError::DimensionMismatch(format!(
            "features have d={}, model d={}",
            features.cols(),
            model.dim()
        )));
    }
    let (n, d) = (features.rows(), features.cols());
    let mut data = vec![0.0; n * d];
    let flags: Vec<bool> = {
        let work = |(i, out): (usize, &mut [f64])| model.write_ood_gradient(features.row(i), out);
        #[cfg(feature = "parallel")]
        {
            data.par_chunks_mut(d.max(1)).enumerate().map(work).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            data.chunks_mut(d.max(1)).enumerate().map(work).collect()
        }
    };
    Ok(GradientMap {
        gradients: Matrix::new(n, d, data)?,
        source_ids: (0..n).collect(),
        degenerate_rows: flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect(),
    })
}
