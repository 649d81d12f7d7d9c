//! Browser demo: a two-dimensional playground for the detector and a small
//! synthetic benchmark with score histograms.
//!
//! The plain Rust entry points ([`Playground::build`], [`bench_report`]) are
//! what the native tests use; the `#[wasm_bindgen]` wrappers only convert
//! errors.

use grood::eval::{score_histogram, Histogram};
use grood::feature_io::{Dtype, FeatureSet, Layer, OodGroup};
use grood::matrix::squared_distance;
use grood::pipeline::{evaluate, feature_space_noise};
use grood::prototype::compute_class_prototypes;
use grood::synth::{generate, SynthParams};
use grood::{Dataset, Detector, GroodError, IndexMode, Matrix, RunConfig, ScoreVariant, Strategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const CLASSES: usize = 3;
const PER_CLASS: usize = 150;
const RADIUS: f64 = 2.0;

fn js(e: GroodError) -> JsError {
    JsError::new(&format!("{} error: {e}", e.category()))
}

fn blobs(sigma: f64, seed: u64) -> grood::Result<FeatureSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(CLASSES * PER_CLASS * 2);
    let mut labels = Vec::with_capacity(CLASSES * PER_CLASS);
    for _ in 0..PER_CLASS {
        for c in 0..CLASSES {
            let angle = std::f64::consts::FRAC_PI_2 + c as f64 * std::f64::consts::TAU / CLASSES as f64;
            data.push(RADIUS * angle.cos() + sigma * rng.sample::<f64, _>(StandardNormal));
            data.push(RADIUS * angle.sin() + sigma * rng.sample::<f64, _>(StandardNormal));
            labels.push(c as u32);
        }
    }
    let m = Matrix::new(CLASSES * PER_CLASS, 2, data)?;
    Ok(FeatureSet::new(Layer::Penultimate, m, Dtype::F64).with_labels(labels, CLASSES))
}

/// Three Gaussian classes on a circle with a fitted detector.
#[wasm_bindgen]
pub struct Playground {
    train: FeatureSet,
    detector: Detector,
    tau: f64,
}

impl Playground {
    /// `strategy` is one of `mean_of_prototypes`, `synthetic_mixup`,
    /// `uniform_energy`.
    pub fn build(sigma: f64, strategy: &str, seed: u64) -> grood::Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(GroodError::InvalidParameter(format!("sigma must be positive, got {sigma}")));
        }
        let strategy: Strategy = strategy.parse()?;
        let train = blobs(sigma, seed)?;
        let ood_aux = match strategy {
            Strategy::UniformEnergy => {
                let protos = compute_class_prototypes(&train)?;
                Some(feature_space_noise(&train.features, &protos, 1000, seed)?)
            }
            _ => None,
        };
        let dataset = Dataset {
            num_classes: CLASSES,
            train: train.clone(),
            train_early: None,
            id_test: train.clone(),
            ood_tests: Vec::new(),
            ood_aux,
            synthetic_ood: None,
        };
        let mut config = RunConfig {
            strategy,
            seed,
            ..RunConfig::default()
        };
        config.index.mode = IndexMode::Exact;
        let detector = Detector::fit(&dataset, &config)?;
        let tau = detector.calibrate(&train.features, ScoreVariant::Grood, config.target_tpr)?;
        Ok(Self { train, detector, tau })
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }
}

#[wasm_bindgen]
impl Playground {
    #[wasm_bindgen(constructor)]
    pub fn new(sigma: f64, strategy: &str, seed: u64) -> Result<Playground, JsError> {
        Self::build(sigma, strategy, seed).map_err(js)
    }

    /// Threshold at 95 % training TPR.
    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Training points as `x, y, label` triples.
    pub fn points(&self) -> Vec<f64> {
        let labels = self.train.labels.as_deref().unwrap_or(&[]);
        self.train
            .features
            .iter_rows()
            .zip(labels)
            .flat_map(|(r, &y)| [r[0], r[1], y as f64])
            .collect()
    }

    /// Class prototypes followed by the OOD prototype, as `x, y` pairs.
    pub fn prototypes(&self) -> Vec<f64> {
        let p = &self.detector.prototypes;
        let mut out = p.class_prototypes_pen.as_slice().to_vec();
        out.extend_from_slice(&p.ood_prototype);
        out
    }

    /// Scores on a `width x height` grid over `[x0, x1] x [y0, y1]`, row-major
    /// from the top edge.
    pub fn score_field(&self, x0: f64, x1: f64, y0: f64, y1: f64, width: usize, height: usize) -> Vec<f64> {
        if width == 0 || height == 0 {
            return Vec::new();
        }
        let step = |lo: f64, hi: f64, n: usize, i: usize| {
            if n == 1 {
                (lo + hi) / 2.0
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        };
        let mut grid = Vec::with_capacity(width * height * 2);
        for j in 0..height {
            let y = step(y1, y0, height, j);
            for i in 0..width {
                grid.push(step(x0, x1, width, i));
                grid.push(y);
            }
        }
        let grid = Matrix::new(width * height, 2, grid).expect("grid shape");
        self.detector
            .score(&grid, ScoreVariant::Grood)
            .expect("grid matches detector dimension")
    }

    /// `[score, p_ood, grad_x, grad_y, nearest training row, predicted class]`
    /// for the point `(x, y)`.
    pub fn inspect(&self, x: f64, y: f64) -> Vec<f64> {
        let h = [x, y];
        let model = &self.detector.model;
        let grad = model.grad_wrt_ood_prototype(&h).vector;
        let corpus = self.detector.index.corpus();
        let (nearest, d2) = corpus
            .iter_rows()
            .map(|r| squared_distance(r, &grad))
            .enumerate()
            .fold((0, f64::INFINITY), |best, (i, d)| if d < best.1 { (i, d) } else { best });
        vec![
            d2.sqrt(),
            model.ood_probability(&h),
            grad[0],
            grad[1],
            nearest as f64,
            model.predict(&h, false) as f64,
        ]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchDataset {
    pub name: String,
    pub group: Option<OodGroup>,
    pub auroc: f64,
    pub fpr_at_tpr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub auroc: f64,
    pub fpr_at_tpr: f64,
    pub near_auroc: Option<f64>,
    pub far_auroc: Option<f64>,
    pub datasets: Vec<BenchDataset>,
    pub id_histogram: Histogram,
    pub ood_histogram: Histogram,
}

/// Generates a reduced synthetic benchmark, fits with the default strategy
/// and returns metrics with histograms of ID and pooled OOD scores.
pub fn bench_report(classes: usize, dim: usize, sigma: f64, seed: u64, bins: usize) -> grood::Result<BenchReport> {
    let params = SynthParams {
        num_classes: classes,
        dim,
        sigma,
        n_per_class: 200,
        n_test_per_class: 100,
        n_ood: 500,
        n_noise: 300,
        seed,
        ..SynthParams::default()
    };
    let dataset = generate(&params)?;
    let config = RunConfig {
        seed,
        ..RunConfig::default()
    };
    let det = Detector::fit(&dataset, &config)?;
    let ev = evaluate(&det, &dataset.id_test, &dataset.ood_tests, ScoreVariant::Grood, config.target_tpr)?;
    let pooled: Vec<f64> = ev.ood_scores.iter().flat_map(|(_, s)| s.iter().copied()).collect();
    let datasets = dataset
        .ood_tests
        .iter()
        .filter_map(|o| {
            ev.result.per_dataset.get(&o.name).map(|m| BenchDataset {
                name: o.name.clone(),
                group: o.group,
                auroc: m.auroc,
                fpr_at_tpr: m.fpr,
            })
        })
        .collect();
    Ok(BenchReport {
        auroc: ev.result.auroc,
        fpr_at_tpr: ev.result.fpr_at_tpr,
        near_auroc: ev.result.group_auroc(OodGroup::Near),
        far_auroc: ev.result.group_auroc(OodGroup::Far),
        datasets,
        id_histogram: score_histogram(&ev.id_scores, bins)?,
        ood_histogram: score_histogram(&pooled, bins)?,
    })
}

/// JSON form of [`bench_report`].
#[wasm_bindgen]
pub fn synth_bench(classes: usize, dim: usize, sigma: f64, seed: u64, bins: usize) -> Result<String, JsError> {
    let report = bench_report(classes, dim, sigma, seed, bins).map_err(js)?;
    Ok(serde_json::to_string(&report).expect("serializable"))
}
