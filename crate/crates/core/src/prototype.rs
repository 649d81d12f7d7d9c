//! Class prototypes and the artificial OOD prototype.
//!
//! Every mean here goes through [`canonical_mean_rows`], which sorts each
//! column before a pairwise sum, so prototypes are bit-identical under any
//! reordering of the samples.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GroodError, Result};
use crate::feature_io::{FeatureSet, Layer};
use crate::matrix::{canonical_mean_rows, distance, Matrix};
use crate::ncp::log_sum_exp;
use crate::quantile::nearest_rank_quantile;

pub const DEFAULT_FILTER_QUANTILE: f64 = 0.5;
pub const DEFAULT_MIXUP_LAMBDA: f64 = 0.5;
pub const DEFAULT_ENERGY_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SyntheticMixup,
    AuxValidation,
    UniformEnergy,
    MeanOfPrototypes,
    OracleLocal,
    OracleGlobal,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::SyntheticMixup,
        Strategy::AuxValidation,
        Strategy::UniformEnergy,
        Strategy::MeanOfPrototypes,
        Strategy::OracleLocal,
        Strategy::OracleGlobal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::SyntheticMixup => "synthetic_mixup",
            Strategy::AuxValidation => "aux_validation",
            Strategy::UniformEnergy => "uniform_energy",
            Strategy::MeanOfPrototypes => "mean_of_prototypes",
            Strategy::OracleLocal => "oracle_local",
            Strategy::OracleGlobal => "oracle_global",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = GroodError;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| GroodError::InvalidParameter(format!("unknown strategy {s:?}")))
    }
}

/// Class prototypes per layer plus the OOD prototype and how it was built.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBundle {
    pub class_prototypes_pen: Matrix,
    pub class_prototypes_early: Option<Matrix>,
    pub ood_prototype: Vec<f64>,
    pub strategy: Strategy,
    pub filter_quantile: Option<f64>,
    pub sample_counts: Vec<usize>,
}

impl PrototypeBundle {
    pub fn validate(&self) -> Result<()> {
        self.class_prototypes_pen.ensure_finite()?;
        if let Some(e) = &self.class_prototypes_early {
            e.ensure_finite()?;
            if e.rows() != self.class_prototypes_pen.rows() {
                return Err(GroodError::DimensionMismatch(format!(
                    "{} early prototypes vs {} penultimate",
                    e.rows(),
                    self.class_prototypes_pen.rows()
                )));
            }
        }
        if self.ood_prototype.len() != self.class_prototypes_pen.cols() {
            return Err(GroodError::DimensionMismatch(format!(
                "OOD prototype has d={}, penultimate prototypes d={}",
                self.ood_prototype.len(),
                self.class_prototypes_pen.cols()
            )));
        }
        if let Some(col) = self.ood_prototype.iter().position(|v| !v.is_finite()) {
            return Err(GroodError::NonFinite { row: 0, col });
        }
        if let Some(c) = self.sample_counts.iter().position(|&n| n == 0) {
            return Err(GroodError::EmptyClass(c));
        }
        Ok(())
    }
}

/// Per-class sample counts of a labeled set.
pub fn class_counts(train: &FeatureSet) -> Result<Vec<usize>> {
    let labels = train
        .labels
        .as_ref()
        .ok_or_else(|| GroodError::MissingInput("class prototypes need labels".into()))?;
    let mut counts = vec![0usize; train.num_classes];
    for &l in labels {
        let l = l as usize;
        if l >= counts.len() {
            return Err(GroodError::LabelOutOfRange {
                row: 0,
                label: l as u32,
                num_classes: counts.len(),
            });
        }
        counts[l] += 1;
    }
    Ok(counts)
}

/// Row `y` is the mean of all rows labeled `y`.
pub fn compute_class_prototypes(train: &FeatureSet) -> Result<Matrix> {
    let counts = class_counts(train)?;
    if counts.is_empty() {
        return Err(GroodError::Empty("labeled set declares zero classes"));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(GroodError::EmptyClass(c));
    }
    let labels = train.labels.as_ref().expect("checked by class_counts");
    let mut members: Vec<Vec<usize>> = counts.iter().map(|&n| Vec::with_capacity(n)).collect();
    for (i, &l) in labels.iter().enumerate() {
        members[l as usize].push(i);
    }
    let d = train.dim();
    let mut out = Matrix::zeros(counts.len(), d);
    for (c, rows) in members.iter().enumerate() {
        out.row_mut(c)
            .copy_from_slice(&canonical_mean_rows(&train.features, rows));
    }
    Ok(out)
}

/// Mean of all rows of a penultimate-layer set.
pub fn compute_ood_prototype(ood: &FeatureSet) -> Result<Vec<f64>> {
    if ood.layer != Layer::Penultimate {
        return Err(GroodError::InvalidParameter(format!(
            "OOD prototype needs penultimate features, got {}",
            ood.layer
        )));
    }
    mean_rows(&ood.features)
}

pub fn mean_rows(m: &Matrix) -> Result<Vec<f64>> {
    if m.rows() == 0 {
        return Err(GroodError::Empty("cannot average zero rows"));
    }
    let all: Vec<usize> = (0..m.rows()).collect();
    Ok(canonical_mean_rows(m, &all))
}

/// Unweighted mean of the class prototypes.
pub fn mean_of_prototypes(class_protos: &Matrix) -> Result<Vec<f64>> {
    let mean = mean_rows(class_protos)?;
    if let Some(col) = mean.iter().position(|v| !v.is_finite()) {
        return Err(GroodError::NonFinite { row: 0, col });
    }
    Ok(mean)
}

/// Distance from each row to its nearest class prototype.
pub fn nearest_prototype_distances(features: &Matrix, class_protos: &Matrix) -> Result<Vec<f64>> {
    if features.cols() != class_protos.cols() {
        return Err(GroodError::DimensionMismatch(format!(
            "candidates have d={}, prototypes d={}",
            features.cols(),
            class_protos.cols()
        )));
    }
    Ok(features
        .iter_rows()
        .map(|h| {
            class_protos
                .iter_rows()
                .map(|p| distance(h, p))
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

/// Row indices kept by the proximity filter, in input order.
pub fn proximity_filter_indices(
    ood: &FeatureSet,
    class_protos: &Matrix,
    q: f64,
) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&q) {
        return Err(GroodError::InvalidParameter(format!(
            "filter quantile {q} outside [0, 1)"
        )));
    }
    if ood.is_empty() {
        return Err(GroodError::Empty("no OOD candidates to filter"));
    }
    let dists = nearest_prototype_distances(&ood.features, class_protos)?;
    let tau = nearest_rank_quantile(&dists, q)?;
    let kept: Vec<usize> = dists
        .iter()
        .enumerate()
        .filter_map(|(i, &d)| (d >= tau).then_some(i))
        .collect();
    // tau is one of the distances, so at least that candidate survives
    assert!(!kept.is_empty(), "proximity filter removed every candidate");
    Ok(kept)
}

/// Drops candidates closer to the ID prototypes than the nearest-rank
/// `q`-quantile of their distances; ties at the threshold are kept.
pub fn proximity_filter(ood: &FeatureSet, class_protos: &Matrix, q: f64) -> Result<FeatureSet> {
    let kept = proximity_filter_indices(ood, class_protos, q)?;
    Ok(ood.select(&kept))
}

/// Energy `-T * log sum_j exp(logit_j / T)` of a logit row.
pub fn energy(logits: &[f64], temperature: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    -temperature * log_sum_exp(&scaled)
}

/// Which end of the energy ranking [`select_by_energy`] keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyOrder {
    #[default]
    Lowest,
    Highest,
}

impl FromStr for EnergyOrder {
    type Err = GroodError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lowest" => Ok(EnergyOrder::Lowest),
            "highest" => Ok(EnergyOrder::Highest),
            _ => Err(GroodError::InvalidParameter(format!(
                "unknown energy order {s:?}"
            ))),
        }
    }
}

/// Keeps the `m` rows with the lowest (or highest) energy, ties by lower
/// row index. The returned rows are in input order.
pub fn select_by_energy(
    candidates: &FeatureSet,
    m: usize,
    temperature: f64,
    order: EnergyOrder,
) -> Result<FeatureSet> {
    let logits = candidates
        .logits
        .as_ref()
        .ok_or_else(|| GroodError::MissingInput("energy selection needs logits".into()))?;
    if m == 0 || m > candidates.len() {
        return Err(GroodError::InvalidParameter(format!(
            "cannot select {m} of {} rows",
            candidates.len()
        )));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(GroodError::InvalidParameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let energies: Vec<f64> = logits.iter_rows().map(|r| energy(r, temperature)).collect();
    let mut idx: Vec<usize> = (0..energies.len()).collect();
    idx.sort_by(|&a, &b| {
        let by_energy = energies[a].total_cmp(&energies[b]);
        match order {
            EnergyOrder::Lowest => by_energy,
            EnergyOrder::Highest => by_energy.reverse(),
        }
        .then(a.cmp(&b))
    });
    let mut chosen = idx[..m].to_vec();
    chosen.sort_unstable();
    Ok(candidates.select(&chosen))
}

/// How the mid-network half of the synthetic-OOD construction is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MidMode {
    /// Mixed early features are used directly as penultimate features.
    Identity,
    /// Mixed early features still need the backbone's mid network.
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixup {
    /// Penultimate layer for [`MidMode::Identity`], early layer otherwise.
    pub features: FeatureSet,
    pub mode: MidMode,
    /// Rows whose interpolation target equals their top-ranked class.
    pub targets_top_class: Vec<usize>,
}

/// Top and runner-up class per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRanking {
    pub top: Vec<usize>,
    pub second: Vec<usize>,
    pub from_logits: bool,
}

/// Ranks classes by classifier logits when present, otherwise by distance to
/// the penultimate class prototypes. With a single class both entries are 0.
pub fn rank_classes(pen: &FeatureSet, pen_protos: &Matrix) -> Result<ClassRanking> {
    let mut top = Vec::with_capacity(pen.len());
    let mut second = Vec::with_capacity(pen.len());
    let top_two = |scores: Vec<f64>| {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        (idx[0], idx.get(1).copied().unwrap_or(idx[0]))
    };
    let from_logits = match &pen.logits {
        Some(logits) if logits.cols() > 0 => {
            for row in logits.iter_rows() {
                let (a, b) = top_two(row.to_vec());
                top.push(a);
                second.push(b);
            }
            true
        }
        _ => {
            if pen.dim() != pen_protos.cols() || pen_protos.rows() == 0 {
                return Err(GroodError::DimensionMismatch(format!(
                    "features d={} vs prototypes {}x{}",
                    pen.dim(),
                    pen_protos.rows(),
                    pen_protos.cols()
                )));
            }
            for h in pen.features.iter_rows() {
                let neg: Vec<f64> = pen_protos.iter_rows().map(|p| -distance(h, p)).collect();
                let (a, b) = top_two(neg);
                top.push(a);
                second.push(b);
            }
            false
        }
    };
    Ok(ClassRanking {
        top,
        second,
        from_logits,
    })
}

/// Row `i` becomes `lambda * early_i + (1 - lambda) * early_protos[target_i]`.
pub fn feature_space_mixup(
    early: &FeatureSet,
    early_protos: &Matrix,
    second_class: &[usize],
    lambda: f64,
    top_class: Option<&[usize]>,
    mode: MidMode,
) -> Result<Mixup> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(GroodError::InvalidParameter(format!(
            "mixup lambda {lambda} outside [0, 1]"
        )));
    }
    if early.dim() != early_protos.cols() {
        return Err(GroodError::DimensionMismatch(format!(
            "early features d={}, early prototypes d={}",
            early.dim(),
            early_protos.cols()
        )));
    }
    if second_class.len() != early.len() {
        return Err(GroodError::DimensionMismatch(format!(
            "{} targets for {} rows",
            second_class.len(),
            early.len()
        )));
    }
    if let Some(&bad) = second_class.iter().find(|&&c| c >= early_protos.rows()) {
        return Err(GroodError::InvalidParameter(format!(
            "target class {bad} out of range for {} prototypes",
            early_protos.rows()
        )));
    }
    let mut out = early.features.clone();
    for (i, &c) in second_class.iter().enumerate() {
        let p = early_protos.row(c);
        for (x, &q) in out.row_mut(i).iter_mut().zip(p) {
            *x = lambda * *x + (1.0 - lambda) * q;
        }
    }
    let targets_top_class = match top_class {
        Some(top) => second_class
            .iter()
            .zip(top)
            .enumerate()
            .filter_map(|(i, (s, t))| (s == t).then_some(i))
            .collect(),
        None => Vec::new(),
    };
    let layer = match mode {
        MidMode::Identity => Layer::Penultimate,
        MidMode::External => Layer::Early,
    };
    let features = FeatureSet::new(layer, out, early.dtype)
        .with_num_classes(early.num_classes)
        .with_dataset_id(format!("{}-mixup", early.dataset_id));
    Ok(Mixup {
        features,
        mode,
        targets_top_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_io::Dtype;

    fn pen(rows: &[[f64; 2]]) -> FeatureSet {
        FeatureSet::new(Layer::Penultimate, Matrix::from_rows(rows).unwrap(), Dtype::F64)
    }

    #[test]
    fn two_point_mean_prototypes() {
        let set = pen(&[[0.0, 0.0], [2.0, 2.0], [4.0, 0.0]]).with_labels(vec![0, 0, 1], 2);
        let p = compute_class_prototypes(&set).unwrap();
        assert_eq!(p.row(0), &[1.0, 1.0]);
        assert_eq!(p.row(1), &[4.0, 0.0]);
    }

    #[test]
    fn empty_class_is_named() {
        let set = pen(&[[0.0, 0.0]]).with_labels(vec![0], 3);
        assert!(matches!(
            compute_class_prototypes(&set),
            Err(GroodError::EmptyClass(1))
        ));
    }

    #[test]
    fn ood_prototype_mean() {
        assert_eq!(
            compute_ood_prototype(&pen(&[[1.0, 0.0], [0.0, 1.0]])).unwrap(),
            vec![0.5, 0.5]
        );
        assert_eq!(compute_ood_prototype(&pen(&[[7.0, -1.0]])).unwrap(), vec![7.0, -1.0]);
        let early = FeatureSet::new(Layer::Early, Matrix::zeros(1, 2), Dtype::F64);
        assert!(compute_ood_prototype(&early).is_err());
    }

    #[test]
    fn proximity_filter_nearest_rank() {
        // distances to the single prototype at the origin: 1, 2, 3, 4
        let protos = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let set = pen(&[[3.0, 0.0], [0.0, 1.0], [4.0, 0.0], [0.0, 2.0]]);
        let kept = proximity_filter_indices(&set, &protos, 0.5).unwrap();
        assert_eq!(kept, vec![0, 2, 3]);
        assert_eq!(
            proximity_filter_indices(&set, &protos, 0.0).unwrap(),
            vec![0, 1, 2, 3]
        );
        let same = pen(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]);
        assert_eq!(proximity_filter(&same, &protos, 0.9).unwrap().len(), 3);
        assert!(proximity_filter(&same, &protos, 1.0).is_err());
    }

    #[test]
    fn energy_selection_follows_lowest_rule() {
        let logits = Matrix::from_rows(&[[10.0, 0.0], [0.0, 0.0]]).unwrap();
        let set = pen(&[[1.0, 1.0], [2.0, 2.0]]).with_logits(logits);
        assert!((energy(&[0.0, 0.0], 1.0) + 2f64.ln()).abs() < 1e-15);
        assert!(energy(&[10.0, 0.0], 1.0) < -10.0);
        let low = select_by_energy(&set, 1, 1.0, EnergyOrder::Lowest).unwrap();
        assert_eq!(low.features.row(0), &[1.0, 1.0]);
        let high = select_by_energy(&set, 1, 1.0, EnergyOrder::Highest).unwrap();
        assert_eq!(high.features.row(0), &[2.0, 2.0]);
        assert_eq!(select_by_energy(&set, 2, 1.0, EnergyOrder::Lowest).unwrap(), set);
    }

    #[test]
    fn energy_ties_take_first_rows() {
        let logits = Matrix::from_rows(&[[1.0, 2.0]; 4]).unwrap();
        let set = pen(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]).with_logits(logits);
        let s = select_by_energy(&set, 2, 1.0, EnergyOrder::Lowest).unwrap();
        assert_eq!(s.features.row(1), &[1.0, 0.0]);
        assert!(select_by_energy(&pen(&[[0.0, 0.0]]), 1, 1.0, EnergyOrder::Lowest).is_err());
    }

    #[test]
    fn mean_of_prototypes_cases() {
        let p = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(mean_of_prototypes(&p).unwrap(), vec![0.5, 0.5]);
        let one = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        assert_eq!(mean_of_prototypes(&one).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn mixup_endpoints_and_midpoint() {
        let early = FeatureSet::new(
            Layer::Early,
            Matrix::from_rows(&[[2.0, 0.0]]).unwrap(),
            Dtype::F64,
        );
        let protos = Matrix::from_rows(&[[9.0, 9.0], [0.0, 2.0]]).unwrap();
        let mid = |l| {
            feature_space_mixup(&early, &protos, &[1], l, None, MidMode::Identity)
                .unwrap()
                .features
                .features
                .row(0)
                .to_vec()
        };
        assert_eq!(mid(1.0), vec![2.0, 0.0]);
        assert_eq!(mid(0.0), vec![0.0, 2.0]);
        assert_eq!(mid(0.5), vec![1.0, 1.0]);
        let m = feature_space_mixup(&early, &protos, &[1], 0.5, Some(&[1]), MidMode::External)
            .unwrap();
        assert_eq!(m.targets_top_class, vec![0]);
        assert_eq!(m.features.layer, Layer::Early);
        assert!(feature_space_mixup(&early, &protos, &[2], 0.5, None, MidMode::Identity).is_err());
    }

    #[test]
    fn ranking_falls_back_to_distances() {
        let protos = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [5.0, 0.0]]).unwrap();
        let r = rank_classes(&pen(&[[0.9, 0.0], [4.0, 0.0]]), &protos).unwrap();
        assert!(!r.from_logits);
        assert_eq!(r.top, vec![1, 2]);
        assert_eq!(r.second, vec![0, 1]);
        let with_logits = pen(&[[0.0, 0.0]]).with_logits(Matrix::from_rows(&[[0.1, 3.0, 2.0]]).unwrap());
        let r = rank_classes(&with_logits, &protos).unwrap();
        assert!(r.from_logits);
        assert_eq!((r.top[0], r.second[0]), (1, 2));
    }
}
