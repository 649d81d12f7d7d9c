use grood_web::{bench_report, synth_bench, Playground};

#[test]
fn field_has_one_finite_score_per_cell() {
    let p = Playground::build(0.3, "mean_of_prototypes", 1).unwrap();
    let field = p.score_field(-4.0, 4.0, -4.0, 4.0, 40, 30);
    assert_eq!(field.len(), 1200);
    assert!(field.iter().all(|s| s.is_finite() && *s >= 0.0));
    assert!(p.score_field(0.0, 1.0, 0.0, 1.0, 0, 5).is_empty());
}

#[test]
fn training_points_sit_on_zero_score() {
    let p = Playground::build(0.3, "synthetic_mixup", 2).unwrap();
    let pts = p.points();
    assert_eq!(pts.len(), 450 * 3);
    for t in pts.chunks(3).take(20) {
        let info = p.inspect(t[0], t[1]);
        assert_eq!(info[0], 0.0);
    }
    assert!(p.tau() > 0.0);
}

#[test]
fn inspected_gradient_has_ood_probability_as_length() {
    let p = Playground::build(0.3, "uniform_energy", 3).unwrap();
    let info = p.inspect(1.0, -0.5);
    assert_eq!(info.len(), 6);
    let len = (info[2] * info[2] + info[3] * info[3]).sqrt();
    assert!((len - info[1]).abs() < 1e-12);
    assert!(info[5] < 3.0);
    let protos = p.prototypes();
    assert_eq!(protos.len(), 8);
}

#[test]
fn far_points_score_higher_than_cluster_centres() {
    let p = Playground::build(0.2, "mean_of_prototypes", 4).unwrap();
    let protos = p.prototypes();
    let near = p.inspect(protos[0], protos[1])[0];
    let far = p.inspect(0.0, -6.0)[0];
    assert!(far > near);
}

#[test]
fn bad_parameters_are_reported() {
    assert!(Playground::build(0.0, "mean_of_prototypes", 0).is_err());
    assert!(Playground::build(0.3, "oracle_sideways", 0).is_err());
    assert!(bench_report(1, 8, 0.1, 0, 10).is_err());
}

#[test]
fn bench_json_carries_metrics_and_histograms() {
    let report = bench_report(4, 16, 0.1, 0, 20).unwrap();
    assert!(report.far_auroc.unwrap() > 0.9);
    assert_eq!(report.datasets.len(), 4);
    assert_eq!(report.id_histogram.densities.len(), 20);
    let json: serde_json::Value = serde_json::from_str(&synth_bench(4, 16, 0.1, 0, 20).unwrap()).unwrap();
    assert_eq!(json["datasets"].as_array().unwrap().len(), 4);
    assert!(json["auroc"].as_f64().unwrap() <= 1.0);
}
