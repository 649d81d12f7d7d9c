use grood::eval::{auroc, fpr_at_tpr, population_std, score_histogram};
use grood::index::{calibrate_threshold, classify, default_nlist, Verdict};
use grood::{GradientIndex, Matrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
    Matrix::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn brute_kth(corpus: &Matrix, q: &[f64], k: usize) -> f64 {
    let mut d: Vec<f64> = corpus
        .iter_rows()
        .map(|r| r.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    d[k - 1]
}

fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &o in ood {
        for &i in id {
            wins += if o > i { 1.0 } else if o == i { 0.5 } else { 0.0 };
        }
    }
    wins / (id.len() * ood.len()) as f64
}

#[test]
fn exact_index_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let corpus = random(&mut rng, 1000, 16);
    let queries = random(&mut rng, 100, 16);
    let index = GradientIndex::build_exact(corpus.clone()).unwrap();
    for k in [1, 5] {
        let got = index.score_batch(&queries, 1, k).unwrap();
        for (q, g) in queries.iter_rows().zip(got) {
            assert!((g - brute_kth(&corpus, q, k)).abs() < 1e-12);
        }
    }
}

#[test]
fn ivf_with_extreme_list_counts_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let corpus = random(&mut rng, 200, 4);
    let queries = random(&mut rng, 40, 4);
    let exact = GradientIndex::build_exact(corpus.clone()).unwrap().score_batch(&queries, 1, 1).unwrap();
    let one = GradientIndex::build_ivf(corpus.clone(), 1, 0).unwrap();
    assert_eq!(one.score_batch(&queries, 1, 1).unwrap(), exact);
    let all = GradientIndex::build_ivf(corpus, 200, 0).unwrap();
    assert_eq!(all.score_batch(&queries, 200, 1).unwrap(), exact);
}

#[test]
fn two_blobs_fall_into_two_lists() {
    let mut rows = Vec::new();
    for i in 0..20 {
        let j = i as f64 * 0.01;
        rows.push(vec![j, -j]);
        rows.push(vec![100.0 + j, 100.0 - j]);
    }
    let index = GradientIndex::build_ivf(Matrix::from_rows(&rows).unwrap(), 2, 9).unwrap();
    let mut lists: Vec<Vec<usize>> = index.lists().to_vec();
    lists.sort();
    assert_eq!(lists[0], (0..40).step_by(2).collect::<Vec<_>>());
    assert_eq!(lists[1], (1..40).step_by(2).collect::<Vec<_>>());
}

#[test]
fn kth_neighbour_on_two_points() {
    let index = GradientIndex::build_exact(Matrix::new(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap()).unwrap();
    assert_eq!(index.score(&[0.0, 0.0], 1, 2).unwrap(), 5.0);
    assert_eq!(index.score(&[0.0, 0.0], 1, 1).unwrap(), 0.0);
    assert_eq!(index.score_excluding(&[0.0, 0.0], 1, 1, 0).unwrap(), 5.0);
    assert!(index.score(&[0.0, 0.0], 1, 3).is_err());
    assert!(index.score(&[0.0], 1, 1).is_err());
}

#[test]
fn ivf_never_undercuts_exact_and_is_monotone_in_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let corpus = random(&mut rng, 600, 8);
    let queries = random(&mut rng, 60, 8);
    let exact = GradientIndex::build_exact(corpus.clone()).unwrap();
    let ivf = GradientIndex::build_ivf(corpus, default_nlist(600), 1).unwrap();
    let mut prev = vec![0.0; 60];
    for k in 1..5 {
        let e = exact.score_batch(&queries, 1, k).unwrap();
        let a = ivf.score_batch(&queries, 2, k).unwrap();
        for i in 0..60 {
            assert!(a[i] >= e[i]);
            assert!(a[i] >= prev[i]);
        }
        prev = a;
    }
}

#[test]
fn ivf_build_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let corpus = random(&mut rng, 300, 6);
    let a = GradientIndex::build_ivf(corpus.clone(), 17, 42).unwrap();
    let b = GradientIndex::build_ivf(corpus, 17, 42).unwrap();
    assert_eq!(a, b);
}

#[test]
fn default_list_count() {
    assert_eq!(default_nlist(10_000), 100);
    assert_eq!(default_nlist(2), 1);
    assert_eq!(default_nlist(1), 1);
}

#[test]
fn threshold_on_one_to_hundred() {
    let s: Vec<f64> = (1..=100).map(f64::from).collect();
    assert_eq!(calibrate_threshold(&s, 0.95).unwrap(), 95.0);
    assert_eq!(calibrate_threshold(&s, 1.0).unwrap(), 100.0);
    assert!(calibrate_threshold(&s, 0.0).is_err());
    assert!(calibrate_threshold(&[], 0.5).is_err());
    assert_eq!(classify(&[94.0, 95.0, 96.0], 95.0), vec![Verdict::Id, Verdict::Id, Verdict::Ood]);
}

proptest! {
    #[test]
    fn auroc_matches_pair_counting(
        id in proptest::collection::vec(0u8..20, 1..40),
        ood in proptest::collection::vec(0u8..20, 1..40),
    ) {
        let id: Vec<f64> = id.into_iter().map(f64::from).collect();
        let ood: Vec<f64> = ood.into_iter().map(f64::from).collect();
        let a = auroc(&id, &ood).unwrap();
        prop_assert!((a - brute_auroc(&id, &ood)).abs() < 1e-12);
        prop_assert!((auroc(&ood, &id).unwrap() - (1.0 - a)).abs() < 1e-12);
        let shifted: Vec<f64> = ood.iter().map(|v| 3.0 * v + 7.0).collect();
        let id_shift: Vec<f64> = id.iter().map(|v| 3.0 * v + 7.0).collect();
        prop_assert!((auroc(&id_shift, &shifted).unwrap() - a).abs() < 1e-12);
    }

    #[test]
    fn fpr_counts_accepted_ood(
        id in proptest::collection::vec(-5f64..5.0, 1..50),
        ood in proptest::collection::vec(-5f64..5.0, 1..50),
        tpr in 0.05f64..1.0,
    ) {
        let tau = calibrate_threshold(&id, tpr).unwrap();
        let kept = id.iter().filter(|&&s| s <= tau).count() as f64 / id.len() as f64;
        prop_assert!(kept >= tpr - 1e-12);
        let want = ood.iter().filter(|&&s| s <= tau).count() as f64 / ood.len() as f64;
        prop_assert_eq!(fpr_at_tpr(&id, &ood, tpr).unwrap(), want);
    }

    #[test]
    fn std_matches_formula(v in proptest::collection::vec(-10f64..10.0, 2..30)) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let want = (v.iter().map(|x| x * x).sum::<f64>() / n - m * m).max(0.0).sqrt();
        prop_assert!((population_std(&v).unwrap() - want).abs() < 1e-6);
    }
}

#[test]
fn separated_and_identical_scores() {
    assert_eq!(auroc(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 1.0);
    assert_eq!(auroc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 0.0);
    assert_eq!(auroc(&[1.0; 5], &[1.0; 7]).unwrap(), 0.5);
    assert!(auroc(&[], &[1.0]).is_err());
}

#[test]
fn uniform_histogram_is_flat() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..1.0)).collect();
    let h = score_histogram(&s, 10).unwrap();
    assert_eq!(h.densities.len(), 10);
    for d in &h.densities {
        assert!((d - 1.0).abs() < 0.1, "density {d}");
    }
    let mass: f64 = h.densities.iter().map(|d| d * h.width).sum();
    assert!((mass - 1.0).abs() < 1e-12);
}
