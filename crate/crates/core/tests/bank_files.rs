use indexmap::IndexMap;
use logit_bridge::banks::{
    cosine_logits, read_bank, read_logit_bank, write_bank, write_logit_bank, ClassSplit, FeatureBank, Schema, Split,
    FEATURE_MAGIC, FORMAT_VERSION,
};
use logit_bridge::Error;
use proptest::prelude::*;

fn unit(v: &[f64]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

fn tiny() -> FeatureBank {
    let mut text = IndexMap::new();
    text.insert("cat".to_string(), vec![1.0f32, 0.0]);
    text.insert("dog".to_string(), vec![0.0f32, 1.0]);
    text.insert("owl".to_string(), unit(&[1.0, 1.0]));
    let images = [vec![0.6f32, 0.8], vec![0.0, -1.0], unit(&[-1.0, 2.0])].concat();
    let split = ClassSplit { base: vec!["cat".into()], novel: vec!["dog".into()] };
    FeatureBank::new("m", "d", Split::Test, 2, images, Some(vec![0, 1, 1]), text, Some(split)).unwrap()
}

/// Decode the envelope by hand, independently of the reader.
#[test]
fn byte_layout_matches_the_documented_envelope() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.fbank");
    let bank = tiny();
    write_bank(&bank, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    assert_eq!(&bytes[0..4], &FEATURE_MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
    let hdr_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hdr_len]).unwrap();
    assert_eq!(header["feature_dim"], 2);
    assert_eq!(header["n_samples"], 3);
    assert_eq!(header["class_names"], serde_json::json!(["cat", "dog", "owl"]));
    assert_eq!(header["has_labels"], true);
    assert_eq!(header["split"], "test");

    let payload = &bytes[16 + hdr_len..];
    let mut expected = Vec::new();
    for v in bank.image_features() {
        expected.extend_from_slice(&v.to_le_bytes());
    }
    for name in ["cat", "dog", "owl"] {
        for v in bank.text(name).unwrap() {
            expected.extend_from_slice(&v.to_le_bytes());
        }
    }
    for l in [0u32, 1, 1] {
        expected.extend_from_slice(&l.to_le_bytes());
    }
    assert_eq!(payload, expected.as_slice());
    assert_eq!(read_bank(&path).unwrap(), bank);
}

#[test]
fn logit_cache_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let bank = tiny();
    let schema = Schema::new(vec!["cat".into(), "dog".into(), "owl".into()], 2).unwrap();
    let logits = cosine_logits(&bank, &schema).unwrap();
    let path = dir.path().join("t.lbnk");
    write_logit_bank(&logits, &path).unwrap();
    assert_eq!(read_logit_bank(&path).unwrap(), logits);
}

#[test]
fn corruption_yields_typed_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.fbank");
    write_bank(&tiny(), &path).unwrap();
    let good = std::fs::read(&path).unwrap();
    let hdr_len = u64::from_le_bytes(good[8..16].try_into().unwrap()) as usize;

    let check = |bytes: Vec<u8>, offset: Option<u64>| {
        std::fs::write(&path, &bytes).unwrap();
        match read_bank(&path) {
            Err(Error::Format { offset: o, .. }) => {
                if let Some(want) = offset {
                    assert_eq!(o, want);
                }
            }
            other => panic!("expected a format error, got {other:?}"),
        }
    };
    let mut magic = good.clone();
    magic[1] = b'X';
    check(magic, Some(0));
    let mut version = good.clone();
    version[4] = 9;
    check(version, Some(4));
    let mut length = good.clone();
    length[8..16].copy_from_slice(&(u64::MAX / 2).to_le_bytes());
    check(length, None);
    let mut header = good.clone();
    header[16] = b'!';
    check(header, None);
    check(good[..good.len() - 1].to_vec(), None);
    let mut longer = good.clone();
    longer.push(0);
    check(longer, None);
    assert!(hdr_len > 0);
}

fn arb_bank() -> impl Strategy<Value = FeatureBank> {
    (1usize..5, 1usize..4, 0usize..6, any::<bool>()).prop_flat_map(|(d, c, n, labelled)| {
        let vecs = proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, d), c + n);
        let labels = proptest::collection::vec(0..c as u32, n);
        (vecs, labels).prop_map(move |(raw, labels)| {
            let fix = |v: &Vec<f64>| {
                let mut v = v.clone();
                v[0] += 2.0;
                unit(&v)
            };
            let text: IndexMap<String, Vec<f32>> =
                raw[..c].iter().enumerate().map(|(i, v)| (format!("c{i}"), fix(v))).collect();
            let images: Vec<f32> = raw[c..].iter().flat_map(fix).collect();
            FeatureBank::new("m", "d", Split::Train, d, images, labelled.then_some(labels), text, None).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feature_banks_round_trip_bit_exactly(bank in arb_bank()) {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.fbank");
        let b = dir.path().join("b.fbank");
        write_bank(&bank, &a).unwrap();
        let back = read_bank(&a).unwrap();
        prop_assert_eq!(&back, &bank);
        write_bank(&back, &b).unwrap();
        prop_assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}
