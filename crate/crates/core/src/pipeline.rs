//! End-to-end detector: prototype construction, gradient corpus, index,
//! scoring variants, evaluation, oracle experiments and ablations.
//!
//! All scores are oriented so that a higher value means "more OOD".

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GroodError, Result};
use crate::eval::{EvalResult, DEFAULT_TARGET_TPR};
use crate::feature_io::{load_manifest, Dtype, FeatureSet, Layer, Manifest, OodGroup, Role};
use crate::index::{
    calibrate_threshold, default_nlist, GradientIndex, IndexMode, ScoreReport, DEFAULT_K,
    DEFAULT_NPROBE,
};
use crate::matrix::{distance, Matrix};
use crate::ncp::{gradient_map, NcpModel};
use crate::prototype::{
    compute_class_prototypes, compute_ood_prototype, feature_space_mixup, mean_of_prototypes,
    proximity_filter, rank_classes, select_by_energy, EnergyOrder, MidMode, PrototypeBundle,
    Strategy, DEFAULT_ENERGY_TEMPERATURE, DEFAULT_FILTER_QUANTILE, DEFAULT_MIXUP_LAMBDA,
};
use crate::synth::synthetic_logits;

pub const DEFAULT_ORACLE_SAMPLES: usize = 100;
pub const DEFAULT_GLOBAL_FRACTION: f64 = 0.2;
pub const DEFAULT_ENERGY_COUNT: usize = 100;
pub const DEFAULT_NOISE_COUNT: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVariant {
    Grood,
    DistanceToOodPrototype,
    GradientL1Norm,
    GradsWrtClassPrototypes,
}

impl ScoreVariant {
    pub const ALL: [ScoreVariant; 4] = [
        ScoreVariant::Grood,
        ScoreVariant::DistanceToOodPrototype,
        ScoreVariant::GradientL1Norm,
        ScoreVariant::GradsWrtClassPrototypes,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreVariant::Grood => "grood",
            ScoreVariant::DistanceToOodPrototype => "distance_to_ood_prototype",
            ScoreVariant::GradientL1Norm => "gradient_l1_norm",
            ScoreVariant::GradsWrtClassPrototypes => "grads_wrt_class_prototypes",
        }
    }

    /// Variants scored by nearest-neighbour search over a training corpus.
    pub fn uses_corpus(self) -> bool {
        matches!(
            self,
            ScoreVariant::Grood | ScoreVariant::GradsWrtClassPrototypes
        )
    }
}

impl fmt::Display for ScoreVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreVariant {
    type Err = GroodError;
    fn from_str(s: &str) -> Result<Self> {
        ScoreVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| GroodError::InvalidParameter(format!("unknown score variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    None,
    Local,
    Global,
}

impl FromStr for OracleMode {
    type Err = GroodError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(OracleMode::None),
            "local" => Ok(OracleMode::Local),
            "global" => Ok(OracleMode::Global),
            _ => Err(GroodError::InvalidParameter(format!("unknown oracle mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    pub mode: IndexMode,
    /// Defaults to `round(sqrt(n))`.
    pub nlist: Option<usize>,
    pub nprobe: usize,
    pub k: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            mode: IndexMode::Ivf,
            nlist: None,
            nprobe: DEFAULT_NPROBE,
            k: DEFAULT_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: Strategy,
    /// Proximity-filter quantile. Unset means 0.5 for synthetic mixup and no
    /// filtering for the other strategies.
    pub filter_quantile: Option<f64>,
    pub lambda: f64,
    pub energy_order: EnergyOrder,
    pub energy_temperature: f64,
    pub energy_count: usize,
    /// Number of auxiliary OOD rows sampled for `aux_validation`; all rows
    /// when unset.
    pub aux_count: Option<usize>,
    pub index: IndexConfig,
    pub seed: u64,
    pub target_tpr: f64,
    pub variant: ScoreVariant,
    pub oracle: OracleMode,
    pub oracle_samples: usize,
    pub global_fraction: f64,
    pub include_ood_in_accuracy: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::SyntheticMixup,
            filter_quantile: None,
            lambda: DEFAULT_MIXUP_LAMBDA,
            energy_order: EnergyOrder::Lowest,
            energy_temperature: DEFAULT_ENERGY_TEMPERATURE,
            energy_count: DEFAULT_ENERGY_COUNT,
            aux_count: None,
            index: IndexConfig::default(),
            seed: 0,
            target_tpr: DEFAULT_TARGET_TPR,
            variant: ScoreVariant::Grood,
            oracle: OracleMode::None,
            oracle_samples: DEFAULT_ORACLE_SAMPLES,
            global_fraction: DEFAULT_GLOBAL_FRACTION,
            include_ood_in_accuracy: false,
        }
    }
}

impl RunConfig {
    fn effective_quantile(&self) -> Option<f64> {
        match (self.filter_quantile, self.strategy) {
            (Some(q), _) => Some(q),
            (None, Strategy::SyntheticMixup) => Some(DEFAULT_FILTER_QUANTILE),
            (None, _) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodSet {
    pub name: String,
    pub group: Option<OodGroup>,
    pub set: FeatureSet,
}

/// Everything a run needs, loaded from a manifest or generated.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    /// Labeled penultimate training features.
    pub train: FeatureSet,
    /// Labeled early-layer training features, row-aligned with `train`.
    pub train_early: Option<FeatureSet>,
    pub id_test: FeatureSet,
    pub ood_tests: Vec<OodSet>,
    pub ood_aux: Option<FeatureSet>,
    /// Penultimate synthetic OOD features produced by the exporter.
    pub synthetic_ood: Option<FeatureSet>,
}

/// Stacks row-compatible sets; labels and logits survive only when every
/// part has them.
pub fn concat_sets(parts: &[&FeatureSet]) -> Result<FeatureSet> {
    let first = parts.first().ok_or(GroodError::Empty("nothing to concatenate"))?;
    let d = first.dim();
    let mut rows = Vec::new();
    for p in parts {
        if p.dim() != d || p.layer != first.layer {
            return Err(GroodError::DimensionMismatch(format!(
                "cannot stack {} d={} onto {} d={d}",
                p.layer,
                p.dim(),
                first.layer
            )));
        }
        rows.extend_from_slice(p.features.as_slice());
    }
    let n = rows.len() / d.max(1);
    let mut out = FeatureSet::new(first.layer, Matrix::new(n, d, rows)?, first.dtype)
        .with_num_classes(first.num_classes)
        .with_dataset_id(first.dataset_id.clone());
    if parts.iter().all(|p| p.labels.is_some()) {
        let labels = parts
            .iter()
            .flat_map(|p| p.labels.as_ref().unwrap().iter().copied())
            .collect();
        out = out.with_labels(labels, first.num_classes);
    }
    if parts.iter().all(|p| p.logits.is_some()) {
        let c = first.logits.as_ref().unwrap().cols();
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|p| p.logits.as_ref().unwrap().as_slice().iter().copied())
            .collect();
        out = out.with_logits(Matrix::new(n, c, data)?);
    }
    Ok(out)
}

impl Dataset {
    pub fn from_manifest(manifest: &Manifest, base_dir: impl AsRef<Path>) -> Result<Self> {
        let loaded = load_manifest(manifest, base_dir)?;
        let pick = |role: Role, layer: Layer| -> Vec<&FeatureSet> {
            loaded
                .iter()
                .filter(|l| l.record.role == role && l.set.layer == layer)
                .map(|l| &l.set)
                .collect()
        };
        let stack = |parts: Vec<&FeatureSet>| -> Result<Option<FeatureSet>> {
            if parts.is_empty() {
                Ok(None)
            } else {
                concat_sets(&parts).map(Some)
            }
        };
        let train = stack(pick(Role::IdTrain, Layer::Penultimate))?.ok_or_else(|| {
            GroodError::MissingInput("manifest has no penultimate id_train record".into())
        })?;
        let train_early = stack(pick(Role::IdTrain, Layer::Early))?;
        if let Some(e) = &train_early {
            if e.len() != train.len() {
                return Err(GroodError::DimensionMismatch(format!(
                    "early training set has {} rows, penultimate {}",
                    e.len(),
                    train.len()
                )));
            }
        }
        let id_test = stack(pick(Role::IdTest, Layer::Penultimate))?.ok_or_else(|| {
            GroodError::MissingInput("manifest has no penultimate id_test record".into())
        })?;
        let ood_tests = loaded
            .iter()
            .filter(|l| l.record.role == Role::OodTest && l.set.layer == Layer::Penultimate)
            .map(|l| OodSet {
                name: l.record.name(),
                group: l.record.group,
                set: l.set.clone(),
            })
            .collect();
        Ok(Self {
            num_classes: manifest.num_classes,
            train,
            train_early,
            id_test,
            ood_tests,
            ood_aux: stack(pick(Role::OodAux, Layer::Penultimate))?,
            synthetic_ood: stack(pick(Role::SyntheticOod, Layer::Penultimate))?,
        })
    }
}

impl Dataset {
    /// Writes every part as a `.grfd` file under `dir` and returns the
    /// manifest describing them (also saved as `dir/manifest.json`).
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Manifest> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| GroodError::io(dir, e))?;
        let mut m = Manifest::new(self.num_classes);
        m.add(dir, "id_train.grfd", Role::IdTrain, None, &self.train)?;
        if let Some(e) = &self.train_early {
            m.add(dir, "id_train_early.grfd", Role::IdTrain, None, e)?;
        }
        m.add(dir, "id_test.grfd", Role::IdTest, None, &self.id_test)?;
        for o in &self.ood_tests {
            m.add(dir, &format!("ood_{}.grfd", o.name), Role::OodTest, o.group, &o.set)?;
        }
        if let Some(a) = &self.ood_aux {
            m.add(dir, "ood_aux.grfd", Role::OodAux, None, a)?;
        }
        if let Some(s) = &self.synthetic_ood {
            m.add(dir, "synthetic_ood.grfd", Role::SyntheticOod, None, s)?;
        }
        m.save(dir.join("manifest.json"))?;
        Ok(m)
    }
}

/// Diagnostics collected while fitting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitNotes {
    /// Rows that built the OOD prototype (after selection and filtering).
    pub ood_source_rows: usize,
    /// Training rows whose feature coincided with the OOD prototype.
    pub degenerate_rows: Vec<usize>,
    /// Mixup rows whose target was their own top class.
    pub mixup_top_class_rows: usize,
    pub mixup_mode: Option<MidMode>,
    pub ranking_from_logits: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub prototypes: PrototypeBundle,
    pub model: NcpModel,
    pub index: GradientIndex,
    pub class_index: Option<GradientIndex>,
    pub nprobe: usize,
    pub k: usize,
    pub seed: u64,
    pub notes: FitNotes,
}

fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Candidate rows and the OOD prototype for the configured strategy.
fn build_ood_prototype(
    dataset: &Dataset,
    config: &RunConfig,
    class_protos: &Matrix,
    notes: &mut FitNotes,
) -> Result<Vec<f64>> {
    let need_aux = |what: &str| {
        dataset.ood_aux.as_ref().ok_or_else(|| {
            GroodError::MissingInput(format!(
                "strategy {} needs an ood_aux record{what}",
                config.strategy
            ))
        })
    };
    let candidates = match config.strategy {
        Strategy::MeanOfPrototypes => {
            notes.ood_source_rows = class_protos.rows();
            return mean_of_prototypes(class_protos);
        }
        Strategy::OracleLocal | Strategy::OracleGlobal => {
            return Err(GroodError::InvalidParameter(
                "oracle prototypes are built by the oracle command".into(),
            ))
        }
        Strategy::SyntheticMixup => match &dataset.synthetic_ood {
            Some(s) => s.clone(),
            None => {
                // identity mid network: interpolate directly in penultimate space
                let ranking = rank_classes(&dataset.train, class_protos)?;
                let mix = feature_space_mixup(
                    &dataset.train,
                    class_protos,
                    &ranking.second,
                    config.lambda,
                    Some(&ranking.top),
                    MidMode::Identity,
                )?;
                notes.mixup_top_class_rows = mix.targets_top_class.len();
                notes.mixup_mode = Some(mix.mode);
                notes.ranking_from_logits = Some(ranking.from_logits);
                mix.features
            }
        },
        Strategy::AuxValidation => {
            let aux = need_aux("")?;
            match config.aux_count {
                Some(0) => {
                    return Err(GroodError::InvalidParameter("aux_count must be at least 1".into()))
                }
                Some(m) if m < aux.len() => {
                    let mut rows = seeded_permutation(aux.len(), config.seed)[..m].to_vec();
                    rows.sort_unstable();
                    aux.select(&rows)
                }
                _ => aux.clone(),
            }
        }
        Strategy::UniformEnergy => {
            let aux = need_aux(" with logits")?;
            let m = config.energy_count.clamp(1, aux.len());
            select_by_energy(aux, m, config.energy_temperature, config.energy_order)?
        }
    };
    let kept = match config.effective_quantile() {
        Some(q) => proximity_filter(&candidates, class_protos, q)?,
        None => candidates,
    };
    notes.ood_source_rows = kept.len();
    compute_ood_prototype(&kept)
}

impl Detector {
    pub fn fit(dataset: &Dataset, config: &RunConfig) -> Result<Self> {
        let class_protos = compute_class_prototypes(&dataset.train)?;
        let mut notes = FitNotes::default();
        let ood = build_ood_prototype(dataset, config, &class_protos, &mut notes)?;
        let bundle = PrototypeBundle {
            class_prototypes_early: dataset
                .train_early
                .as_ref()
                .map(compute_class_prototypes)
                .transpose()?,
            class_prototypes_pen: class_protos,
            ood_prototype: ood,
            strategy: config.strategy,
            filter_quantile: config.effective_quantile(),
            sample_counts: crate::prototype::class_counts(&dataset.train)?,
        };
        Self::assemble(&dataset.train.features, bundle, config, notes)
    }

    /// Builds model, gradient corpus and index around a finished prototype
    /// bundle.
    pub fn assemble(
        train: &Matrix,
        prototypes: PrototypeBundle,
        config: &RunConfig,
        mut notes: FitNotes,
    ) -> Result<Self> {
        prototypes.validate()?;
        let model = NcpModel::new(
            prototypes.class_prototypes_pen.clone(),
            prototypes.ood_prototype.clone(),
        )?;
        let map = gradient_map(train, &model)?;
        notes.degenerate_rows = map.degenerate_rows.clone();
        let index = build_index(map.gradients, &config.index, config.seed)?;
        let nprobe = config.index.nprobe.clamp(1, index.nlist());
        let mut det = Self {
            prototypes,
            model,
            index,
            class_index: None,
            nprobe,
            k: config.index.k,
            seed: config.seed,
            notes,
        };
        if config.variant == ScoreVariant::GradsWrtClassPrototypes {
            det = det.with_class_index(train, &config.index)?;
        }
        Ok(det)
    }

    /// Adds the corpus of class-prototype gradients used by the
    /// `grads_wrt_class_prototypes` variant.
    pub fn with_class_index(mut self, train: &Matrix, index: &IndexConfig) -> Result<Self> {
        let grads = self.class_gradients(train)?;
        self.class_index = Some(build_index(grads, index, self.seed)?);
        Ok(self)
    }

    /// Gradient of the loss at the nearest ID class with respect to all class
    /// prototypes, one concatenated row per input.
    pub fn class_gradients(&self, features: &Matrix) -> Result<Matrix> {
        self.check_dim(features)?;
        let c = self.model.num_classes();
        let d = self.model.dim();
        let mut data = Vec::with_capacity(features.rows() * c * d);
        for h in features.iter_rows() {
            let y = self.model.predict(h, false);
            data.extend(self.model.grad_wrt_class_prototypes(h, y));
        }
        Matrix::new(features.rows(), c * d, data)
    }

    fn check_dim(&self, features: &Matrix) -> Result<()> {
        if features.cols() != self.model.dim() {
            return Err(GroodError::DimensionMismatch(format!(
                "features have d={}, detector d={}",
                features.cols(),
                self.model.dim()
            )));
        }
        Ok(())
    }

    pub fn ood_gradients(&self, features: &Matrix) -> Result<Matrix> {
        self.check_dim(features)?;
        Ok(gradient_map(features, &self.model)?.gradients)
    }

    fn class_index(&self) -> Result<&GradientIndex> {
        self.class_index.as_ref().ok_or_else(|| {
            GroodError::MissingInput(
                "detector was fitted without the class-prototype gradient corpus".into(),
            )
        })
    }

    /// Scores new samples; higher means more OOD.
    pub fn score(&self, features: &Matrix, variant: ScoreVariant) -> Result<Vec<f64>> {
        self.check_dim(features)?;
        match variant {
            ScoreVariant::Grood => {
                let g = self.ood_gradients(features)?;
                self.index.score_batch(&g, self.nprobe, self.k)
            }
            ScoreVariant::DistanceToOodPrototype => Ok(features
                .iter_rows()
                .map(|h| -distance(h, &self.prototypes.ood_prototype))
                .collect()),
            ScoreVariant::GradientL1Norm => {
                let g = self.ood_gradients(features)?;
                Ok(g.iter_rows().map(|r| r.iter().map(|x| x.abs()).sum()).collect())
            }
            ScoreVariant::GradsWrtClassPrototypes => {
                let index = self.class_index()?;
                let g = self.class_gradients(features)?;
                index.score_batch(&g, self.nprobe.min(index.nlist()), self.k)
            }
        }
    }

    /// Scores of the training rows themselves, each excluded from its own
    /// neighbour search.
    pub fn training_scores(&self, train: &Matrix, variant: ScoreVariant) -> Result<Vec<f64>> {
        match variant {
            ScoreVariant::Grood => self.index.score_corpus_leave_one_out(self.nprobe, self.k),
            ScoreVariant::GradsWrtClassPrototypes => {
                let index = self.class_index()?;
                index.score_corpus_leave_one_out(self.nprobe.min(index.nlist()), self.k)
            }
            _ => self.score(train, variant),
        }
    }

    /// Threshold at `target_tpr` from leave-one-out training scores.
    pub fn calibrate(&self, train: &Matrix, variant: ScoreVariant, target_tpr: f64) -> Result<f64> {
        calibrate_threshold(&self.training_scores(train, variant)?, target_tpr)
    }

    pub fn report(&self, features: &Matrix, variant: ScoreVariant, tau: f64) -> Result<ScoreReport> {
        Ok(ScoreReport::new(self.score(features, variant)?, tau))
    }

    /// NCP accuracy on a labeled set.
    pub fn ncp_accuracy(&self, set: &FeatureSet, include_ood: bool) -> Result<f64> {
        let labels = set
            .labels
            .as_ref()
            .ok_or_else(|| GroodError::MissingInput("accuracy needs labels".into()))?;
        self.check_dim(&set.features)?;
        let hits = set
            .features
            .iter_rows()
            .zip(labels)
            .filter(|(h, &y)| self.model.predict(h, include_ood) == y as usize)
            .count();
        Ok(hits as f64 / set.len() as f64)
    }
}

fn build_index(corpus: Matrix, config: &IndexConfig, seed: u64) -> Result<GradientIndex> {
    match config.mode {
        IndexMode::Exact => GradientIndex::build_exact(corpus),
        IndexMode::Ivf => {
            let nlist = config.nlist.unwrap_or_else(|| default_nlist(corpus.rows()));
            GradientIndex::build_ivf(corpus, nlist, seed)
        }
    }
}

/// Scores and metrics of one detector over a dataset's test sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub result: EvalResult,
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<(String, Vec<f64>)>,
}

pub fn evaluate(
    detector: &Detector,
    id_test: &FeatureSet,
    ood_tests: &[OodSet],
    variant: ScoreVariant,
    target_tpr: f64,
) -> Result<Evaluation> {
    let id_scores = detector.score(&id_test.features, variant)?;
    let ood_scores: Vec<(String, Vec<f64>)> = ood_tests
        .iter()
        .map(|o| Ok((o.name.clone(), detector.score(&o.set.features, variant)?)))
        .collect::<Result<_>>()?;
    let result = EvalResult::from_scores(
        &id_scores,
        ood_tests
            .iter()
            .zip(&ood_scores)
            .map(|(o, (name, s))| (name.as_str(), o.group, s.as_slice())),
        target_tpr,
    )?;
    Ok(Evaluation {
        result,
        id_scores,
        ood_scores,
    })
}

/// One target dataset of an oracle experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRun {
    pub dataset: String,
    /// Rows used to build the OOD prototype, per source dataset.
    pub prototype_rows: BTreeMap<String, Vec<usize>>,
    /// Held-out rows of the target dataset used for evaluation.
    pub eval_rows: Vec<usize>,
    pub oracle: EvalResult,
    /// The configured strategy evaluated on the same held-out rows.
    pub baseline: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub mode: OracleMode,
    pub baseline_strategy: Strategy,
    pub runs: Vec<OracleRun>,
    /// Unweighted mean AUROC over target datasets.
    pub mean_auroc: f64,
    pub baseline_mean_auroc: f64,
}

fn assert_disjoint(
    prototype_rows: &BTreeMap<String, Vec<usize>>,
    target: &str,
    eval_rows: &[usize],
) -> Result<()> {
    let used: BTreeSet<(&str, usize)> = prototype_rows
        .iter()
        .flat_map(|(name, rows)| rows.iter().map(move |&r| (name.as_str(), r)))
        .collect();
    if let Some(r) = eval_rows.iter().find(|&&r| used.contains(&(target, r))) {
        return Err(GroodError::Disjointness(format!(
            "row {r} of {target} is used for both the prototype and evaluation"
        )));
    }
    Ok(())
}

/// Oracle experiments: the OOD prototype is built from real OOD rows, either
/// from the target set itself (`Local`) or from the other OOD sets
/// (`Global`), and evaluated on held-out rows of the target.
pub fn oracle(dataset: &Dataset, config: &RunConfig, mode: OracleMode) -> Result<OracleReport> {
    if dataset.ood_tests.is_empty() {
        return Err(GroodError::MissingInput("oracle needs OOD test sets".into()));
    }
    let baseline = Detector::fit(dataset, config)?;
    let class_protos = baseline.prototypes.class_prototypes_pen.clone();

    // (prototype rows, held-out rows) per dataset
    let splits: Vec<(Vec<usize>, Vec<usize>)> = match mode {
        OracleMode::None => {
            return Err(GroodError::InvalidParameter("oracle mode must be local or global".into()))
        }
        OracleMode::Local => {
            let m = config.oracle_samples;
            dataset
                .ood_tests
                .iter()
                .enumerate()
                .map(|(i, o)| {
                    if o.set.len() < m + 1 {
                        return Err(GroodError::InvalidParameter(format!(
                            "OOD set {} has {} rows, needs at least {}",
                            o.name,
                            o.set.len(),
                            m + 1
                        )));
                    }
                    let perm = seeded_permutation(o.set.len(), config.seed ^ (i as u64 + 1));
                    Ok(split_sorted(&perm, m))
                })
                .collect::<Result<_>>()?
        }
        OracleMode::Global => {
            if dataset.ood_tests.len() < 2 {
                return Err(GroodError::InvalidParameter(
                    "global oracle needs at least 2 OOD test sets".into(),
                ));
            }
            let f = config.global_fraction;
            if !(f > 0.0 && f < 1.0) {
                return Err(GroodError::InvalidParameter(format!(
                    "validation fraction {f} outside (0, 1)"
                )));
            }
            dataset
                .ood_tests
                .iter()
                .enumerate()
                .map(|(i, o)| {
                    let n = o.set.len();
                    let v = ((f * n as f64).ceil() as usize).clamp(1, n.saturating_sub(1).max(1));
                    if n < 2 {
                        return Err(GroodError::InvalidParameter(format!(
                            "OOD set {} needs at least 2 rows",
                            o.name
                        )));
                    }
                    let perm = seeded_permutation(n, config.seed ^ (i as u64 + 1));
                    Ok(split_sorted(&perm, v))
                })
                .collect::<Result<_>>()?
        }
    };

    let base_id = baseline.score(&dataset.id_test.features, config.variant)?;
    let base_ood: Vec<Vec<f64>> = dataset
        .ood_tests
        .iter()
        .map(|o| baseline.score(&o.set.features, config.variant))
        .collect::<Result<_>>()?;

    let mut runs = Vec::with_capacity(dataset.ood_tests.len());
    for (t, target) in dataset.ood_tests.iter().enumerate() {
        let mut prototype_rows = BTreeMap::new();
        let parts: Vec<FeatureSet> = match mode {
            OracleMode::Local => {
                prototype_rows.insert(target.name.clone(), splits[t].0.clone());
                vec![target.set.select(&splits[t].0)]
            }
            _ => dataset
                .ood_tests
                .iter()
                .enumerate()
                .filter(|&(s, _)| s != t)
                .map(|(s, o)| {
                    prototype_rows.insert(o.name.clone(), splits[s].0.clone());
                    o.set.select(&splits[s].0)
                })
                .collect(),
        };
        let eval_rows = splits[t].1.clone();
        assert_disjoint(&prototype_rows, &target.name, &eval_rows)?;

        let refs: Vec<&FeatureSet> = parts.iter().collect();
        let source = concat_sets(&refs)?;
        let bundle = PrototypeBundle {
            ood_prototype: compute_ood_prototype(&source)?,
            strategy: match mode {
                OracleMode::Local => Strategy::OracleLocal,
                _ => Strategy::OracleGlobal,
            },
            filter_quantile: None,
            class_prototypes_pen: class_protos.clone(),
            ..baseline.prototypes.clone()
        };
        let notes = FitNotes {
            ood_source_rows: source.len(),
            ..FitNotes::default()
        };
        let det = Detector::assemble(&dataset.train.features, bundle, config, notes)?;
        let held_out = [OodSet {
            name: target.name.clone(),
            group: target.group,
            set: target.set.select(&eval_rows),
        }];
        let oracle_eval = evaluate(&det, &dataset.id_test, &held_out, config.variant, config.target_tpr)?;
        let held_out_base: Vec<f64> = eval_rows.iter().map(|&r| base_ood[t][r]).collect();
        let base_eval = EvalResult::from_scores(
            &base_id,
            [(target.name.as_str(), target.group, held_out_base.as_slice())],
            config.target_tpr,
        )?;
        runs.push(OracleRun {
            dataset: target.name.clone(),
            prototype_rows,
            eval_rows,
            oracle: oracle_eval.result,
            baseline: base_eval,
        });
    }
    let k = runs.len() as f64;
    Ok(OracleReport {
        mode,
        baseline_strategy: config.strategy,
        mean_auroc: runs.iter().map(|r| r.oracle.auroc).sum::<f64>() / k,
        baseline_mean_auroc: runs.iter().map(|r| r.baseline.auroc).sum::<f64>() / k,
        runs,
    })
}

/// First `m` entries of a permutation and the rest, each sorted.
fn split_sorted(perm: &[usize], m: usize) -> (Vec<usize>, Vec<usize>) {
    let mut a = perm[..m].to_vec();
    let mut b = perm[m..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

/// Uniform noise inside the bounding box of the training features, with
/// NCP logits, for runs whose manifest has no exported noise set.
pub fn feature_space_noise(train: &Matrix, class_protos: &Matrix, n: usize, seed: u64) -> Result<FeatureSet> {
    let d = train.cols();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for r in train.iter_rows() {
        for j in 0..d {
            lo[j] = lo[j].min(r[j]);
            hi[j] = hi[j].max(r[j]);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n)
        .flat_map(|_| (0..d).map(|j| lo[j] + (hi[j] - lo[j]) * rng.random::<f64>()).collect::<Vec<_>>())
        .collect();
    let m = Matrix::new(n, d, data)?;
    let logits = synthetic_logits(&m, class_protos);
    Ok(FeatureSet::new(Layer::Penultimate, m, Dtype::F64)
        .with_logits(logits)
        .with_dataset_id("feature-space-noise"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub result: EvalResult,
}

pub const ABLATION_ROWS: [&str; 5] = [
    "distance_to_ood_prototype",
    "gradient_l1_norm",
    "grads_wrt_class_prototypes",
    "uniform_noise_prototype",
    "grood",
];

/// The four ablation variants and the full method on identical splits.
pub fn ablate(dataset: &Dataset, config: &RunConfig) -> Result<Vec<AblationRow>> {
    let base = Detector::fit(dataset, config)?
        .with_class_index(&dataset.train.features, &config.index)?;
    let run = |det: &Detector, variant| {
        evaluate(det, &dataset.id_test, &dataset.ood_tests, variant, config.target_tpr)
            .map(|e| e.result)
    };

    let noise_config = RunConfig {
        strategy: Strategy::UniformEnergy,
        filter_quantile: None,
        ..config.clone()
    };
    let has_noise_logits = dataset.ood_aux.as_ref().is_some_and(|a| a.logits.is_some());
    let noise_det = if has_noise_logits {
        Detector::fit(dataset, &noise_config)?
    } else {
        let noise = feature_space_noise(
            &dataset.train.features,
            &base.prototypes.class_prototypes_pen,
            DEFAULT_NOISE_COUNT,
            config.seed,
        )?;
        let with_noise = Dataset {
            ood_aux: Some(noise),
            ..dataset.clone()
        };
        Detector::fit(&with_noise, &noise_config)?
    };

    Ok(vec![
        AblationRow {
            variant: ABLATION_ROWS[0].into(),
            result: run(&base, ScoreVariant::DistanceToOodPrototype)?,
        },
        AblationRow {
            variant: ABLATION_ROWS[1].into(),
            result: run(&base, ScoreVariant::GradientL1Norm)?,
        },
        AblationRow {
            variant: ABLATION_ROWS[2].into(),
            result: run(&base, ScoreVariant::GradsWrtClassPrototypes)?,
        },
        AblationRow {
            variant: ABLATION_ROWS[3].into(),
            result: run(&noise_det, ScoreVariant::Grood)?,
        },
        AblationRow {
            variant: ABLATION_ROWS[4].into(),
            result: run(&base, ScoreVariant::Grood)?,
        },
    ])
}

/// Fits on a generated dataset and evaluates GROOD on its near and far sets.
pub fn synth_bench(params: &crate::synth::SynthParams, config: &RunConfig) -> Result<EvalResult> {
    let dataset = crate::synth::generate(params)?;
    let det = Detector::fit(&dataset, config)?;
    Ok(evaluate(&det, &dataset.id_test, &dataset.ood_tests, ScoreVariant::Grood, config.target_tpr)?.result)
}
