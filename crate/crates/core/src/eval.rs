//! Detection metrics. OOD is the positive class and higher scores mean
//! "more OOD" throughout.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{GroodError, Result};
use crate::feature_io::OodGroup;
use crate::index::calibrate_threshold;

pub const DEFAULT_TARGET_TPR: f64 = 0.95;

/// Mann-Whitney AUROC: `P(ood > id) + P(ood == id) / 2`, via midranks.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(GroodError::Empty("AUROC needs ID and OOD scores"));
    }
    if id_scores.iter().chain(ood_scores).any(|s| s.is_nan()) {
        return Err(GroodError::InvalidParameter("NaN score".into()));
    }
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, false))
        .chain(ood_scores.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // ties are grouped with ==, so -0.0 and 0.0 share a midrank
    let mut rank_sum_ood = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share the midrank
        let midrank = (i + 1 + j) as f64 / 2.0;
        let ood_here = all[i..j].iter().filter(|x| x.1).count();
        rank_sum_ood += midrank * ood_here as f64;
        i = j;
    }
    let n_ood = ood_scores.len() as f64;
    let n_id = id_scores.len() as f64;
    let u = rank_sum_ood - n_ood * (n_ood + 1.0) / 2.0;
    Ok(u / (n_ood * n_id))
}

/// Fraction of OOD scores accepted as ID at the threshold calibrated to
/// `target_tpr` on the ID scores.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], target_tpr: f64) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(GroodError::Empty("FPR needs ID and OOD scores"));
    }
    let tau = calibrate_threshold(id_scores, target_tpr)?;
    let accepted = ood_scores.iter().filter(|&&s| s <= tau).count();
    Ok(accepted as f64 / ood_scores.len() as f64)
}

/// Equal-width density histogram over `[min, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub centers: Vec<f64>,
    pub densities: Vec<f64>,
    pub width: f64,
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_center,density\n");
        for (c, d) in self.centers.iter().zip(&self.densities) {
            let _ = writeln!(s, "{c},{d}");
        }
        s
    }
}

/// Densities integrate to one. Constant input collapses to a single bin of
/// unit mass (width 0) at that value.
pub fn score_histogram(scores: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(GroodError::InvalidParameter("histogram needs bins >= 1".into()));
    }
    if scores.is_empty() {
        return Err(GroodError::Empty("histogram of no scores"));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(min.is_finite() && max.is_finite()) {
        return Err(GroodError::InvalidParameter("non-finite score".into()));
    }
    if min == max {
        return Ok(Histogram {
            centers: vec![min],
            densities: vec![1.0],
            width: 0.0,
        });
    }
    let width = (max - min) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &s in scores {
        let b = (((s - min) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = scores.len() as f64;
    Ok(Histogram {
        centers: (0..bins).map(|b| min + (b as f64 + 0.5) * width).collect(),
        densities: counts.iter().map(|&c| c as f64 / (n * width)).collect(),
        width,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub auroc: f64,
    pub fpr: f64,
    pub n_ood: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auroc: f64,
    pub fpr_at_tpr: f64,
    pub target_tpr: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub per_dataset: BTreeMap<String, DatasetMetrics>,
    /// Unweighted means over the datasets of each near/far group.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_group: BTreeMap<OodGroup, DatasetMetrics>,
}

impl EvalResult {
    /// Metrics for one ID score set against several named OOD score sets.
    /// The headline numbers are unweighted means over the datasets.
    pub fn from_scores<'a>(
        id_scores: &[f64],
        ood: impl IntoIterator<Item = (&'a str, Option<OodGroup>, &'a [f64])>,
        target_tpr: f64,
    ) -> Result<Self> {
        let mut per_dataset = BTreeMap::new();
        let mut groups: BTreeMap<OodGroup, Vec<String>> = BTreeMap::new();
        let mut n_ood = 0;
        for (name, group, scores) in ood {
            n_ood += scores.len();
            if let Some(g) = group {
                groups.entry(g).or_default().push(name.to_owned());
            }
            per_dataset.insert(
                name.to_owned(),
                DatasetMetrics {
                    auroc: auroc(id_scores, scores)?,
                    fpr: fpr_at_tpr(id_scores, scores, target_tpr)?,
                    n_ood: scores.len(),
                },
            );
        }
        if per_dataset.is_empty() {
            return Err(GroodError::Empty("evaluation needs at least one OOD set"));
        }
        let mean_of = |names: &mut dyn Iterator<Item = &DatasetMetrics>| {
            let all: Vec<&DatasetMetrics> = names.collect();
            let k = all.len() as f64;
            DatasetMetrics {
                auroc: all.iter().map(|m| m.auroc).sum::<f64>() / k,
                fpr: all.iter().map(|m| m.fpr).sum::<f64>() / k,
                n_ood: all.iter().map(|m| m.n_ood).sum(),
            }
        };
        let per_group = groups
            .iter()
            .map(|(&g, names)| (g, mean_of(&mut names.iter().map(|n| &per_dataset[n]))))
            .collect();
        let overall = mean_of(&mut per_dataset.values());
        Ok(Self {
            auroc: overall.auroc,
            fpr_at_tpr: overall.fpr,
            target_tpr,
            n_id: id_scores.len(),
            n_ood,
            per_dataset,
            per_group,
        })
    }

    pub fn group_auroc(&self, group: OodGroup) -> Option<f64> {
        self.per_group.get(&group).map(|m| m.auroc)
    }

    pub fn dataset_auroc(&self, name: &str) -> Option<f64> {
        self.per_dataset.get(name).map(|m| m.auroc)
    }
}

/// Population standard deviation of the AUROC across results.
pub fn auroc_stability(results: &[EvalResult]) -> Result<f64> {
    let values: Vec<f64> = results.iter().map(|r| r.auroc).collect();
    population_std(&values)
}

pub fn population_std(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(GroodError::InvalidParameter(format!(
            "standard deviation needs at least 2 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt())
}
