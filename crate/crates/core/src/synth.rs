//! Seeded synthetic embeddings with neural-collapse geometry: Gaussian class
//! clusters centred on a simplex equiangular tight frame offset by a shared
//! global mean, two near-OOD clouds and two far-OOD clouds.
//!
//! OOD rows are pulled toward the origin by `ood_shrink`, mimicking the lower
//! feature norms real networks produce on unfamiliar inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GroodError, Result};
use crate::feature_io::{Dtype, FeatureSet, Layer, OodGroup};
use crate::matrix::{distance, Matrix};
use crate::pipeline::{Dataset, OodSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub num_classes: usize,
    pub dim: usize,
    /// Within-class standard deviation per coordinate.
    pub sigma: f64,
    pub n_per_class: usize,
    pub n_test_per_class: usize,
    /// Distance of every class mean from the global mean.
    pub radius: f64,
    /// Norm of the global feature mean, orthogonal to the class simplex.
    pub global_mean: f64,
    /// Factor applied to OOD rows, pulling them toward the origin.
    pub ood_shrink: f64,
    /// Per-coordinate standard deviation of the near-OOD cloud.
    pub near_sigma: f64,
    /// Distance of the far-OOD Gaussian centre from the origin, in units of
    /// `radius`.
    pub ood_offset: f64,
    pub far_sigma: f64,
    /// Per-coordinate half-width of the uniform boxes: the far-box set around
    /// the shrunk global mean and the auxiliary noise set around
    /// `noise_scale` times the global mean.
    pub box_half_width: f64,
    pub n_ood: usize,
    pub noise_scale: f64,
    /// Size of the uniform-noise auxiliary set (carries logits).
    pub n_noise: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 64,
            sigma: 0.1,
            n_per_class: 1000,
            n_test_per_class: 200,
            radius: 0.6,
            global_mean: 4.0,
            ood_shrink: 0.9,
            near_sigma: 0.1,
            ood_offset: 2.0,
            far_sigma: 0.5,
            box_half_width: 0.5,
            n_ood: 2000,
            noise_scale: 1.0,
            n_noise: 1000,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(GroodError::InvalidParameter(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.num_classes < 2 || self.num_classes > self.dim {
            return Err(GroodError::InvalidParameter(format!(
                "need 2 <= classes <= dim, got {} classes in d={}",
                self.num_classes, self.dim
            )));
        }
        if self.n_per_class == 0 || self.n_test_per_class == 0 || self.n_ood < 2 {
            return Err(GroodError::InvalidParameter("sample counts must be positive".into()));
        }
        Ok(())
    }
}

/// `C` unit-free simplex ETF vertices of norm `radius`, embedded in the
/// first `C` coordinates of `R^d`. The vertices sum to zero and every pair
/// has cosine `-1 / (C - 1)`.
pub fn simplex_etf(num_classes: usize, dim: usize, radius: f64) -> Result<Matrix> {
    if num_classes < 2 || num_classes > dim {
        return Err(GroodError::InvalidParameter(format!(
            "simplex ETF needs 2 <= C <= d, got C={num_classes}, d={dim}"
        )));
    }
    let c = num_classes as f64;
    // e_i - 1/C has norm sqrt((C-1)/C)
    let scale = radius / ((c - 1.0) / c).sqrt();
    let mut m = Matrix::zeros(num_classes, dim);
    for i in 0..num_classes {
        for j in 0..num_classes {
            let v = if i == j { 1.0 - 1.0 / c } else { -1.0 / c };
            m.row_mut(i)[j] = v * scale;
        }
    }
    Ok(m)
}

fn gaussian(rng: &mut ChaCha8Rng, center: &[f64], sigma: f64) -> Vec<f64> {
    center
        .iter()
        .map(|&c| c + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v = gaussian(rng, &vec![0.0; dim], 1.0);
    let n = crate::matrix::norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// NCP-style logits (negative distances to the class means), standing in for
/// a classifier head on synthetic features.
pub fn synthetic_logits(features: &Matrix, means: &Matrix) -> Matrix {
    let data = features
        .iter_rows()
        .flat_map(|h| means.iter_rows().map(move |p| -distance(h, p)))
        .collect();
    Matrix::new(features.rows(), means.rows(), data).expect("shape")
}

fn labeled_clusters(
    rng: &mut ChaCha8Rng,
    means: &Matrix,
    per_class: usize,
    sigma: f64,
) -> (Matrix, Vec<u32>) {
    let mut rows = Vec::with_capacity(means.rows() * per_class);
    let mut labels = Vec::with_capacity(means.rows() * per_class);
    for _ in 0..per_class {
        for (c, p) in means.iter_rows().enumerate() {
            rows.push(gaussian(rng, p, sigma));
            labels.push(c as u32);
        }
    }
    (Matrix::from_rows(&rows).expect("rows"), labels)
}

/// Unit vector along the all-ones direction of the first `c` coordinates,
/// orthogonal to every simplex vertex.
fn global_direction(c: usize, d: usize) -> Vec<f64> {
    let mut u = vec![0.0; d];
    u[..c].fill(1.0 / (c as f64).sqrt());
    u
}

fn blend(means: &Matrix, classes: &[usize], offset: &[f64]) -> Vec<f64> {
    let w = 1.0 / classes.len() as f64;
    let mut out = offset.to_vec();
    for &k in classes {
        for (o, m) in out.iter_mut().zip(means.row(k)) {
            *o += w * m;
        }
    }
    out
}

fn distinct_classes(rng: &mut ChaCha8Rng, c: usize, k: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, c, k.min(c)).into_vec()
}

/// Generates the full benchmark dataset. Identical parameters give identical
/// bytes.
pub fn generate(params: &SynthParams) -> Result<Dataset> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let (c, d) = (params.num_classes, params.dim);
    let mu: Vec<f64> = global_direction(c, d)
        .into_iter()
        .map(|x| x * params.global_mean)
        .collect();
    let mut means = simplex_etf(c, d, params.radius)?;
    for i in 0..c {
        for (v, m) in means.row_mut(i).iter_mut().zip(&mu) {
            *v += m;
        }
    }

    let (train, train_labels) = labeled_clusters(&mut rng, &means, params.n_per_class, params.sigma);
    let (test, test_labels) =
        labeled_clusters(&mut rng, &means, params.n_test_per_class, params.sigma);

    let zero = vec![0.0; d];
    let shrink = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| x * params.ood_shrink).collect() };
    let blended = |k: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..params.n_ood)
            .map(|_| {
                let classes = distinct_classes(rng, c, k);
                let centre = blend(&means, &classes, &zero);
                shrink(gaussian(rng, &centre, params.near_sigma))
            })
            .collect()
    };
    let near_pairs = blended(2, &mut rng);
    let near_triples = blended(3, &mut rng);

    let dir = unit_vector(&mut rng, d);
    let centre: Vec<f64> = dir
        .iter()
        .zip(&mu)
        .map(|(x, m)| m + x * params.ood_offset * params.radius)
        .collect();
    let far_gauss: Vec<Vec<f64>> = (0..params.n_ood)
        .map(|_| shrink(gaussian(&mut rng, &centre, params.far_sigma)))
        .collect();
    let half = params.box_half_width;
    let uniform_box = |n: usize, centre: &[f64], rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| centre.iter().map(|m| m + rng.random_range(-half..=half)).collect())
            .collect()
    };
    let box_centre = shrink(mu.clone());
    let far_box = uniform_box(params.n_ood, &box_centre, &mut rng);
    let noise_centre: Vec<f64> = mu.iter().map(|m| m * params.noise_scale).collect();
    let noise = Matrix::from_rows(&uniform_box(params.n_noise.max(1), &noise_centre, &mut rng))?;
    let noise_logits = synthetic_logits(&noise, &means);

    let pen = |m: Matrix, id: &str| {
        FeatureSet::new(Layer::Penultimate, m, Dtype::F64)
            .with_num_classes(c)
            .with_dataset_id(id)
    };
    let ood = |name: &str, group, rows: &[Vec<f64>]| -> Result<OodSet> {
        Ok(OodSet {
            name: name.into(),
            group: Some(group),
            set: pen(Matrix::from_rows(rows)?, name),
        })
    };
    Ok(Dataset {
        num_classes: c,
        train: pen(train, "synth-id-train").with_labels(train_labels, c),
        train_early: None,
        id_test: pen(test, "synth-id-test").with_labels(test_labels, c),
        ood_tests: vec![
            ood("near-pairs", OodGroup::Near, &near_pairs)?,
            ood("near-triples", OodGroup::Near, &near_triples)?,
            ood("far-gaussian", OodGroup::Far, &far_gauss)?,
            ood("far-box", OodGroup::Far, &far_box)?,
        ],
        ood_aux: Some(pen(noise, "uniform-noise").with_logits(noise_logits)),
        synthetic_ood: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn etf_geometry() {
        let m = simplex_etf(5, 8, 2.0).unwrap();
        for i in 0..5 {
            assert!((crate::matrix::norm(m.row(i)) - 2.0).abs() < 1e-12);
            for j in 0..i {
                let dot: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
                assert!((dot / 4.0 + 0.25).abs() < 1e-12);
            }
        }
        assert!(simplex_etf(9, 8, 1.0).is_err());
    }

    #[test]
    fn generation_is_seeded() {
        let p = SynthParams {
            n_per_class: 20,
            n_test_per_class: 5,
            n_ood: 30,
            n_noise: 10,
            ..SynthParams::default()
        };
        let a = generate(&p).unwrap();
        let b = generate(&p).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.ood_tests[3].set, b.ood_tests[3].set);
        let c = generate(&SynthParams { seed: 1, ..p }).unwrap();
        assert_ne!(a.train, c.train);
        assert_eq!(a.train.len(), 200);
    }
}
