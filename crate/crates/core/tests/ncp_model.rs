use grood::ncp::{gradient_map, log_sum_exp, softmax};
use grood::{Matrix, NcpModel};
use proptest::prelude::*;

fn oracle_logits(h: &[f64], protos: &[Vec<f64>]) -> Vec<f64> {
    protos
        .iter()
        .map(|p| -h.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .collect()
}

fn oracle_probs(l: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = l.iter().map(|v| v.exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn model_case() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..6, 1usize..8).prop_flat_map(|(c, d)| {
        (
            proptest::collection::vec(proptest::collection::vec(-3f64..3.0, d), c + 2),
            Just(()),
        )
            .prop_map(|(rows, _)| {
                let mut rows = rows;
                let h = rows.pop().unwrap();
                (rows, h)
            })
    })
}

fn build(rows: &[Vec<f64>]) -> NcpModel {
    let c = rows.len() - 1;
    NcpModel::new(Matrix::from_rows(&rows[..c]).unwrap(), rows[c].clone()).unwrap()
}

proptest! {
    #[test]
    fn logits_softmax_and_loss_compose((rows, h) in model_case()) {
        let model = build(&rows);
        let want_l = oracle_logits(&h, &rows);
        let got_l = model.logits(&h);
        for (a, b) in got_l.iter().zip(&want_l) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let want_p = oracle_probs(&want_l);
        for (a, b) in model.probabilities(&h).iter().zip(&want_p) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for (y, p) in want_p.iter().enumerate() {
            prop_assert!((model.loss(&h, y) + p.ln()).abs() < 1e-9);
        }
        let c = rows.len() - 1;
        prop_assert!((model.ood_probability(&h) - want_p[c]).abs() < 1e-12);
    }

    #[test]
    fn ood_gradient_has_norm_equal_to_ood_probability((rows, h) in model_case()) {
        let model = build(&rows);
        let g = model.grad_wrt_ood_prototype(&h);
        let n: f64 = g.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(n <= 1.0 + 1e-12);
        if !g.degenerate {
            prop_assert!((n - model.ood_probability(&h)).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_matches_per_row((rows, h) in model_case(), shift in -1f64..1.0) {
        let model = build(&rows);
        let h2: Vec<f64> = h.iter().map(|v| v + shift).collect();
        let feats = Matrix::from_rows(&[h.clone(), h2.clone(), rows[rows.len() - 1].clone()]).unwrap();
        let map = gradient_map(&feats, &model).unwrap();
        prop_assert_eq!(map.gradients.row(0).to_vec(), model.grad_wrt_ood_prototype(&h).vector);
        prop_assert_eq!(map.gradients.row(1).to_vec(), model.grad_wrt_ood_prototype(&h2).vector);
        prop_assert!(map.degenerate_rows.contains(&2));
        prop_assert_eq!(map.source_ids, vec![0, 1, 2]);
    }

    #[test]
    fn softmax_is_shift_invariant(l in proptest::collection::vec(-30f64..30.0, 1..10), s in -500f64..500.0) {
        let shifted: Vec<f64> = l.iter().map(|v| v + s).collect();
        for (a, b) in softmax(&l).iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!((log_sum_exp(&shifted) - log_sum_exp(&l) - s).abs() < 1e-9);
    }
}

#[test]
fn feature_on_the_ood_prototype_is_flagged() {
    let model = NcpModel::new(Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(), vec![0.5, 0.5]).unwrap();
    let g = model.grad_wrt_ood_prototype(&[0.5, 0.5]);
    assert!(g.degenerate);
    assert_eq!(g.vector, vec![0.0, 0.0]);
}

#[test]
fn class_gradient_matches_central_differences() {
    let protos = Matrix::new(3, 2, vec![1.0, 0.0, -1.0, 0.5, 0.0, -1.0]).unwrap();
    let ood = vec![0.2, 0.1];
    let h = [0.3, -0.4];
    let model = NcpModel::new(protos.clone(), ood.clone()).unwrap();
    for y in 0..3 {
        let g = model.grad_wrt_class_prototypes(&h, y);
        for (k, gk) in g.iter().enumerate() {
            let eps = 1e-6;
            let mut up = protos.clone();
            up.row_mut(k / 2)[k % 2] += eps;
            let mut dn = protos.clone();
            dn.row_mut(k / 2)[k % 2] -= eps;
            let f = |m: Matrix| NcpModel::new(m, ood.clone()).unwrap().loss(&h, y);
            let fd = (f(up) - f(dn)) / (2.0 * eps);
            assert!((fd - gk).abs() < 1e-7, "y={y} k={k}: {fd} vs {gk}");
        }
    }
}

#[test]
fn prediction_ties_go_to_the_lower_index() {
    let model = NcpModel::new(Matrix::new(2, 1, vec![-1.0, 1.0]).unwrap(), vec![0.0]).unwrap();
    assert_eq!(model.predict(&[0.0], false), 0);
    assert_eq!(model.predict(&[0.0], true), 2);
    assert_eq!(model.predict(&[0.9], false), 1);
    assert_eq!(model.ranked_classes(&[0.0]), vec![0, 1]);
}

#[test]
fn mismatched_shapes_are_rejected() {
    assert!(NcpModel::new(Matrix::new(2, 2, vec![0.0; 4]).unwrap(), vec![0.0; 3]).is_err());
    let model = NcpModel::new(Matrix::new(1, 2, vec![0.0; 2]).unwrap(), vec![1.0, 1.0]).unwrap();
    assert!(gradient_map(&Matrix::zeros(2, 3), &model).is_err());
}
