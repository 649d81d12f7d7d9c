//! On-disk detector bundle: a directory holding `bundle.json` plus `.grfd`
//! files for the prototypes, the gradient corpus and the IVF centroids.
//! Writes go to a sibling temporary directory that is renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{GroodError, Result};
use crate::feature_io::{read_feature_set, write_feature_set, Dtype, FeatureSet, Layer};
use crate::index::{GradientIndex, IndexMode};
use crate::matrix::Matrix;
use crate::ncp::NcpModel;
use crate::pipeline::{Detector, FitNotes, ScoreVariant};
use crate::prototype::{PrototypeBundle, Strategy};

pub const BUNDLE_VERSION: u32 = 1;
pub const BUNDLE_FILE: &str = "bundle.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub mode: IndexMode,
    pub nlist: usize,
    pub seed: u64,
    pub rows: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub version: u32,
    pub num_classes: usize,
    pub dim: usize,
    pub strategy: Strategy,
    pub filter_quantile: Option<f64>,
    pub sample_counts: Vec<usize>,
    pub variant: ScoreVariant,
    pub tau: f64,
    pub target_tpr: f64,
    pub nprobe: usize,
    pub k: usize,
    pub seed: u64,
    pub index: IndexMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_index: Option<IndexMeta>,
    pub notes: FitNotes,
}

/// A fitted detector and its calibrated threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedDetector {
    pub detector: Detector,
    pub variant: ScoreVariant,
    pub tau: f64,
    pub target_tpr: f64,
}

fn index_meta(index: &GradientIndex) -> IndexMeta {
    IndexMeta {
        mode: index.mode(),
        nlist: index.nlist(),
        seed: index.seed(),
        rows: index.len(),
        dim: index.dim(),
    }
}

fn matrix_set(m: &Matrix, id: &str) -> FeatureSet {
    FeatureSet::new(Layer::Penultimate, m.clone(), Dtype::F64).with_dataset_id(id)
}

fn write_index(dir: &Path, prefix: &str, index: &GradientIndex) -> Result<()> {
    let mut corpus = matrix_set(index.corpus(), prefix);
    if index.mode() == IndexMode::Ivf {
        corpus = corpus.with_labels(index.assignment(), index.nlist());
        write_feature_set(
            &matrix_set(index.centroids(), &format!("{prefix}-centroids")),
            dir.join(format!("{prefix}_centroids.grfd")),
        )?;
    }
    write_feature_set(&corpus, dir.join(format!("{prefix}.grfd")))
}

fn read_index(dir: &Path, prefix: &str, meta: &IndexMeta) -> Result<GradientIndex> {
    let corpus = read_feature_set(dir.join(format!("{prefix}.grfd")))?;
    if corpus.len() != meta.rows || corpus.dim() != meta.dim {
        return Err(GroodError::DimensionMismatch(format!(
            "{prefix} corpus is {}x{}, bundle says {}x{}",
            corpus.len(),
            corpus.dim(),
            meta.rows,
            meta.dim
        )));
    }
    match meta.mode {
        IndexMode::Exact => GradientIndex::build_exact(corpus.features),
        IndexMode::Ivf => {
            let centroids = read_feature_set(dir.join(format!("{prefix}_centroids.grfd")))?;
            let labels = corpus.labels.clone().ok_or_else(|| {
                GroodError::Malformed(format!("{prefix} corpus carries no list ids"))
            })?;
            GradientIndex::from_assignment(corpus.features, centroids.features, &labels, meta.seed)
        }
    }
}

fn tmp_sibling(dir: &Path) -> PathBuf {
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "bundle".into());
    dir.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

impl SavedDetector {
    pub fn meta(&self) -> BundleMeta {
        let d = &self.detector;
        BundleMeta {
            version: BUNDLE_VERSION,
            num_classes: d.model.num_classes(),
            dim: d.model.dim(),
            strategy: d.prototypes.strategy,
            filter_quantile: d.prototypes.filter_quantile,
            sample_counts: d.prototypes.sample_counts.clone(),
            variant: self.variant,
            tau: self.tau,
            target_tpr: self.target_tpr,
            nprobe: d.nprobe,
            k: d.k,
            seed: d.seed,
            index: index_meta(&d.index),
            class_index: d.class_index.as_ref().map(index_meta),
            notes: d.notes.clone(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let tmp = tmp_sibling(dir);
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| GroodError::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| GroodError::io(&tmp, e))?;
        let d = &self.detector;
        let p = &d.prototypes;
        write_feature_set(
            &matrix_set(&p.class_prototypes_pen, "class-prototypes"),
            tmp.join("class_prototypes_pen.grfd"),
        )?;
        if let Some(e) = &p.class_prototypes_early {
            let set = FeatureSet::new(Layer::Early, e.clone(), Dtype::F64)
                .with_dataset_id("class-prototypes-early");
            write_feature_set(&set, tmp.join("class_prototypes_early.grfd"))?;
        }
        let ood = Matrix::new(1, p.ood_prototype.len(), p.ood_prototype.clone())?;
        write_feature_set(&matrix_set(&ood, "ood-prototype"), tmp.join("ood_prototype.grfd"))?;
        write_index(&tmp, "gradients", &d.index)?;
        if let Some(ci) = &d.class_index {
            write_index(&tmp, "class_gradients", ci)?;
        }
        let json = serde_json::to_string_pretty(&self.meta()).expect("serializable");
        let meta_path = tmp.join(BUNDLE_FILE);
        fs::write(&meta_path, json + "\n").map_err(|e| GroodError::io(&meta_path, e))?;

        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| GroodError::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| GroodError::io(dir, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(BUNDLE_FILE);
        if !meta_path.exists() {
            return Err(GroodError::MissingFile(meta_path));
        }
        let text = fs::read_to_string(&meta_path).map_err(|e| GroodError::io(&meta_path, e))?;
        let meta: BundleMeta = serde_json::from_str(&text)
            .map_err(|e| GroodError::Malformed(format!("{}: {e}", meta_path.display())))?;
        if meta.version != BUNDLE_VERSION {
            return Err(GroodError::UnsupportedVersion(meta.version));
        }
        let pen = read_feature_set(dir.join("class_prototypes_pen.grfd"))?.features;
        let early_path = dir.join("class_prototypes_early.grfd");
        let early = if early_path.exists() {
            Some(read_feature_set(early_path)?.features)
        } else {
            None
        };
        let ood = read_feature_set(dir.join("ood_prototype.grfd"))?.features.into_vec();
        let prototypes = PrototypeBundle {
            class_prototypes_pen: pen.clone(),
            class_prototypes_early: early,
            ood_prototype: ood.clone(),
            strategy: meta.strategy,
            filter_quantile: meta.filter_quantile,
            sample_counts: meta.sample_counts.clone(),
        };
        prototypes.validate()?;
        if pen.rows() != meta.num_classes || pen.cols() != meta.dim {
            return Err(GroodError::DimensionMismatch(format!(
                "prototypes are {}x{}, bundle says {}x{}",
                pen.rows(),
                pen.cols(),
                meta.num_classes,
                meta.dim
            )));
        }
        let model = NcpModel::new(pen, ood)?;
        let index = read_index(dir, "gradients", &meta.index)?;
        let class_index = meta
            .class_index
            .as_ref()
            .map(|m| read_index(dir, "class_gradients", m))
            .transpose()?;
        Ok(Self {
            detector: Detector {
                prototypes,
                model,
                index,
                class_index,
                nprobe: meta.nprobe,
                k: meta.k,
                seed: meta.seed,
                notes: meta.notes,
            },
            variant: meta.variant,
            tau: meta.tau,
            target_tpr: meta.target_tpr,
        })
    }
}
