use grood::feature_io::{Dtype, FeatureSet, Layer, OodGroup};
use grood::pipeline::{ablate, evaluate, oracle, OodSet, OracleMode, ABLATION_ROWS};
use grood::synth::{generate, SynthParams};
use grood::{Dataset, Detector, GroodError, IndexMode, Matrix, RunConfig, SavedDetector, ScoreVariant, Strategy};

fn small(seed: u64) -> SynthParams {
    SynthParams {
        num_classes: 3,
        dim: 8,
        n_per_class: 100,
        n_test_per_class: 50,
        n_ood: 200,
        n_noise: 200,
        seed,
        ..SynthParams::default()
    }
}

fn exact(strategy: Strategy) -> RunConfig {
    let mut c = RunConfig {
        strategy,
        ..RunConfig::default()
    };
    c.index.mode = IndexMode::Exact;
    c
}

fn column_mean(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in m.iter_rows() {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v / m.rows() as f64;
        }
    }
    out
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn mean_of_prototypes_detector_shape() {
    let data = generate(&small(0)).unwrap();
    let det = Detector::fit(&data, &exact(Strategy::MeanOfPrototypes)).unwrap();
    assert_eq!(det.prototypes.class_prototypes_pen.rows(), 3);
    assert_eq!(det.index.len(), data.train.len());
    assert_eq!(det.prototypes.sample_counts, vec![100, 100, 100]);
    let want = column_mean(&det.prototypes.class_prototypes_pen);
    assert!(close(&det.prototypes.ood_prototype, &want, 1e-12));
}

#[test]
fn aux_validation_averages_the_aux_rows() {
    let mut data = generate(&small(0)).unwrap();
    let aux = data.ood_tests[2].set.select(&(0..100).collect::<Vec<_>>());
    let want = column_mean(&aux.features);
    data.ood_aux = Some(aux);
    let det = Detector::fit(&data, &exact(Strategy::AuxValidation)).unwrap();
    assert!(close(&det.prototypes.ood_prototype, &want, 1e-12));
    assert_eq!(det.notes.ood_source_rows, 100);

    let mut cfg = exact(Strategy::AuxValidation);
    cfg.aux_count = Some(10);
    let det = Detector::fit(&data, &cfg).unwrap();
    assert_eq!(det.notes.ood_source_rows, 10);
}

#[test]
fn strategies_without_aux_rows_fail() {
    let mut data = generate(&small(0)).unwrap();
    data.ood_aux = None;
    for s in [Strategy::AuxValidation, Strategy::UniformEnergy] {
        assert!(matches!(Detector::fit(&data, &exact(s)), Err(GroodError::MissingInput(_))));
    }
    assert!(Detector::fit(&data, &exact(Strategy::OracleLocal)).is_err());
}

#[test]
fn mixup_without_exported_rows_uses_identity() {
    let data = generate(&small(0)).unwrap();
    let det = Detector::fit(&data, &exact(Strategy::SyntheticMixup)).unwrap();
    assert_eq!(det.prototypes.filter_quantile, Some(0.5));
    assert_eq!(det.notes.ranking_from_logits, Some(false));
    assert!(det.notes.ood_source_rows >= 150 && det.notes.ood_source_rows <= 300);
}

#[test]
fn training_rows_score_zero_but_calibrate_leave_one_out() {
    let data = generate(&small(0)).unwrap();
    let det = Detector::fit(&data, &exact(Strategy::MeanOfPrototypes)).unwrap();
    let s = det.score(&data.train.features, ScoreVariant::Grood).unwrap();
    assert!(s.iter().all(|&v| v == 0.0));
    let loo = det.training_scores(&data.train.features, ScoreVariant::Grood).unwrap();
    assert!(loo.iter().all(|&v| v > 0.0));
    assert!(det.calibrate(&data.train.features, ScoreVariant::Grood, 0.95).unwrap() > 0.0);
}

#[test]
fn distance_variant_peaks_at_the_ood_prototype() {
    let data = generate(&small(0)).unwrap();
    let det = Detector::fit(&data, &exact(Strategy::MeanOfPrototypes)).unwrap();
    let p = det.prototypes.ood_prototype.clone();
    let at = Matrix::new(1, p.len(), p).unwrap();
    assert_eq!(det.score(&at, ScoreVariant::DistanceToOodPrototype).unwrap(), vec![0.0]);
    let others = det.score(&data.id_test.features, ScoreVariant::DistanceToOodPrototype).unwrap();
    assert!(others.iter().all(|&v| v < 0.0));
}

#[test]
fn l1_variant_in_two_dimensions() {
    let train = FeatureSet::new(
        Layer::Penultimate,
        Matrix::new(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap(),
        Dtype::F64,
    )
    .with_labels(vec![0, 1], 2);
    let data = Dataset {
        num_classes: 2,
        train: train.clone(),
        train_early: None,
        id_test: train,
        ood_tests: vec![],
        ood_aux: None,
        synthetic_ood: None,
    };
    let det = Detector::fit(&data, &exact(Strategy::MeanOfPrototypes)).unwrap();
    assert_eq!(det.prototypes.ood_prototype, vec![0.0, 0.0]);
    let h = Matrix::new(1, 2, vec![3.0, 4.0]).unwrap();
    let l = [-(4.0f64 + 16.0).sqrt(), -(16.0f64 + 16.0).sqrt(), -5.0];
    let z: f64 = l.iter().map(|v| v.exp()).sum();
    let p_ood = l[2].exp() / z;
    let want = p_ood * (3.0 + 4.0) / 5.0;
    let got = det.score(&h, ScoreVariant::GradientL1Norm).unwrap()[0];
    assert!((got - want).abs() < 1e-14, "{got} vs {want}");
}

#[test]
fn tight_clusters_separate_far_sets() {
    let params = SynthParams {
        sigma: 1e-6,
        ..small(0)
    };
    let data = generate(&params).unwrap();
    let det = Detector::fit(&data, &exact(Strategy::MeanOfPrototypes)).unwrap();
    let ev = evaluate(&det, &data.id_test, &data.ood_tests, ScoreVariant::Grood, 0.95).unwrap();
    assert!(ev.result.group_auroc(OodGroup::Far).unwrap() >= 0.999);
}

#[test]
fn in_distribution_lookalikes_score_at_chance() {
    let params = SynthParams {
        n_test_per_class: 300,
        ..small(0)
    };
    let data = generate(&params).unwrap();
    let twin = generate(&SynthParams { seed: 1, ..params }).unwrap();
    let det = Detector::fit(&data, &exact(Strategy::MeanOfPrototypes)).unwrap();
    let lookalike = OodSet {
        name: "twin".into(),
        group: None,
        set: twin.id_test,
    };
    let ev = evaluate(&det, &data.id_test, &[lookalike], ScoreVariant::Grood, 0.95).unwrap();
    assert!((ev.result.auroc - 0.5).abs() <= 0.05, "auroc {}", ev.result.auroc);
}

#[test]
fn ncp_accuracy_on_synthetic_clusters() {
    let data = generate(&small(0)).unwrap();
    let det = Detector::fit(&data, &exact(Strategy::MeanOfPrototypes)).unwrap();
    assert!(det.ncp_accuracy(&data.id_test, false).unwrap() >= 0.99);
}

#[test]
fn oracle_edges() {
    let data = generate(&small(0)).unwrap();
    let mut cfg = exact(Strategy::MeanOfPrototypes);
    cfg.oracle_samples = 199;
    let rep = oracle(&data, &cfg, OracleMode::Local).unwrap();
    assert_eq!(rep.runs.len(), 4);
    assert!(rep.runs.iter().all(|r| r.eval_rows.len() == 1));
    cfg.oracle_samples = 200;
    assert!(oracle(&data, &cfg, OracleMode::Local).is_err());

    let mut lonely = data.clone();
    lonely.ood_tests.truncate(1);
    assert!(oracle(&lonely, &exact(Strategy::MeanOfPrototypes), OracleMode::Global).is_err());

    let rep = oracle(&data, &exact(Strategy::MeanOfPrototypes), OracleMode::Global).unwrap();
    for run in &rep.runs {
        assert!(!run.prototype_rows.contains_key(&run.dataset));
        assert!(run.prototype_rows.values().all(|rows| rows.len() == 40));
    }
}

#[test]
fn bundle_round_trip_scores_identically() {
    let data = generate(&small(0)).unwrap();
    for (mode, variant) in [
        (IndexMode::Ivf, ScoreVariant::Grood),
        (IndexMode::Exact, ScoreVariant::GradsWrtClassPrototypes),
    ] {
        let mut cfg = exact(Strategy::SyntheticMixup);
        cfg.index.mode = mode;
        cfg.variant = variant;
        let det = Detector::fit(&data, &cfg).unwrap();
        let tau = det.calibrate(&data.train.features, variant, 0.95).unwrap();
        let saved = SavedDetector {
            detector: det,
            variant,
            tau,
            target_tpr: 0.95,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle");
        saved.save(&path).unwrap();
        let back = SavedDetector::load(&path).unwrap();
        assert_eq!(back, saved);
        let q = &data.ood_tests[0].set.features;
        assert_eq!(
            back.detector.score(q, variant).unwrap(),
            saved.detector.score(q, variant).unwrap()
        );
    }
}

#[test]
fn dataset_survives_a_manifest_round_trip() {
    let data = generate(&small(0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = data.write(dir.path()).unwrap();
    let back = Dataset::from_manifest(&manifest, dir.path()).unwrap();
    assert_eq!(back.train.features, data.train.features);
    assert_eq!(back.ood_tests.len(), 4);
    assert_eq!(back.ood_tests[3].set.features, data.ood_tests[3].set.features);
    assert_eq!(back.ood_aux.unwrap().logits, data.ood_aux.unwrap().logits);
}

#[test]
fn ablation_ranks_grood_first_on_the_benchmark() {
    let data = generate(&SynthParams::default()).unwrap();
    let rows = ablate(&data, &RunConfig::default()).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ABLATION_ROWS);
    let grood = rows.iter().find(|r| r.variant == "grood").unwrap().result.auroc;
    for r in &rows {
        assert!(grood >= r.result.auroc, "{} {} beats grood {grood}", r.variant, r.result.auroc);
    }
}
