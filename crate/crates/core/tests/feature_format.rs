use grood::feature_io::*;
use grood::{GroodError, Matrix};
use proptest::prelude::*;

fn set_strategy() -> impl Strategy<Value = FeatureSet> {
    (1usize..20, 1usize..12, 1usize..6, any::<bool>(), any::<bool>(), any::<bool>())
        .prop_flat_map(|(n, d, c, f64_dtype, labels, logits)| {
            (
                proptest::collection::vec(-1e6f64..1e6, n * d),
                proptest::collection::vec(0u32..c as u32, n),
                proptest::collection::vec(-50f64..50.0, n * c),
            )
                .prop_map(move |(x, y, l)| {
                    let dtype = if f64_dtype { Dtype::F64 } else { Dtype::F32 };
                    let mut s = FeatureSet::new(Layer::Penultimate, Matrix::new(n, d, x).unwrap(), dtype)
                        .with_num_classes(c)
                        .with_dataset_id("prop");
                    if labels {
                        s = s.with_labels(y, c);
                    }
                    if logits {
                        s = s.with_logits(Matrix::new(n, c, l).unwrap());
                    }
                    s
                })
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn round_trip_is_bit_identical(set in set_strategy()) {
        let bytes = set.encode().unwrap();
        prop_assert_eq!(bytes.len(), set.encoded_len());
        let back = FeatureSet::decode(&bytes).unwrap();
        let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.features), bits(&set.features));
        prop_assert_eq!(back, set);
    }

    #[test]
    fn any_single_byte_flip_is_rejected(set in set_strategy(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = set.encode().unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(FeatureSet::decode(&bytes).is_err());
    }

    #[test]
    fn any_truncation_is_rejected(set in set_strategy(), cut in any::<prop::sample::Index>()) {
        let bytes = set.encode().unwrap();
        let keep = cut.index(bytes.len());
        prop_assert!(FeatureSet::decode(&bytes[..keep]).is_err());
    }
}

#[test]
fn thousand_payload_corruptions_are_detected() {
    let m = Matrix::new(50, 8, (0..400).map(|i| i as f64 * 0.37).collect()).unwrap();
    let set = FeatureSet::new(Layer::Early, m, Dtype::F32).with_labels(vec![1; 50], 3);
    let clean = set.encode().unwrap();
    for k in 0..1000usize {
        let mut bytes = clean.clone();
        let i = 40 + (k * 7919) % (bytes.len() - 48);
        bytes[i] = bytes[i].wrapping_add(1 + (k % 255) as u8);
        assert!(
            matches!(FeatureSet::decode(&bytes), Err(GroodError::ChecksumMismatch { .. })),
            "corruption at byte {i} went unnoticed"
        );
    }
}

#[test]
fn file_of_two_rows_declared_holding_one() {
    let set = FeatureSet::new(Layer::Penultimate, Matrix::new(2, 3, vec![1.0; 6]).unwrap(), Dtype::F32);
    let bytes = set.encode().unwrap();
    // drop the second row and keep the trailer position consistent
    let mut short = bytes[..bytes.len() - 8 - 12].to_vec();
    let crc = checksum(&short);
    short.extend_from_slice(&crc.to_le_bytes());
    assert!(matches!(FeatureSet::decode(&short), Err(GroodError::Truncated { .. })));
}

fn labeled(n: usize, d: usize, c: usize) -> FeatureSet {
    FeatureSet::new(
        Layer::Penultimate,
        Matrix::new(n, d, (0..n * d).map(|i| i as f64).collect()).unwrap(),
        Dtype::F32,
    )
    .with_labels((0..n as u32).map(|i| i % c as u32).collect(), c)
}

#[test]
fn manifest_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path();
    let mut m = Manifest::new(2);
    m.add(base, "train.grfd", Role::IdTrain, None, &labeled(4, 3, 2)).unwrap();
    m.add(base, "test.grfd", Role::IdTest, None, &labeled(2, 3, 2)).unwrap();
    let ood = FeatureSet::new(Layer::Penultimate, Matrix::zeros(3, 3), Dtype::F32).with_num_classes(2);
    m.add(base, "ood.grfd", Role::OodTest, Some(OodGroup::Far), &ood).unwrap();
    validate_manifest(&m, base).unwrap();
    let reparsed = Manifest::parse(&m.to_json()).unwrap();
    assert_eq!(reparsed, m);

    let mut unlabeled = m.clone();
    let bare = FeatureSet::new(Layer::Penultimate, Matrix::zeros(4, 3), Dtype::F32).with_num_classes(2);
    write_feature_set(&bare, base.join("bare.grfd")).unwrap();
    unlabeled.records[0].path = "bare.grfd".into();
    unlabeled.records[0].checksum = None;
    assert!(matches!(validate_manifest(&unlabeled, base), Err(GroodError::RoleContract(_))));

    let mut narrow = m.clone();
    let mut other = Manifest::new(2);
    other.add(base, "narrow.grfd", Role::IdTest, None, &labeled(2, 2, 2)).unwrap();
    narrow.records[1] = other.records[0].clone();
    assert!(matches!(validate_manifest(&narrow, base), Err(GroodError::DimensionMismatch(_))));

    let mut missing = m.clone();
    missing.records[2].path = "gone.grfd".into();
    assert!(matches!(validate_manifest(&missing, base), Err(GroodError::MissingFile(_))));

    let mut stale = m.clone();
    stale.records[1].checksum = Some("0000000000000000".into());
    assert!(validate_manifest(&stale, base).is_err());
}
