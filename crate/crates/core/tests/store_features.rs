//! EHRE v1 byte layout, codec round trips and feature assembly from stores.

use failprobe::bucketing::{forward_fill, BucketCell, BucketGrid, Fill, NoteCategory};
use failprobe::store::{self, assemble_features, EmbeddingStore, StoreKey, HEADER_LEN};
use failprobe::Error;
use proptest::prelude::*;

/// Bytes an independent writer would produce for the same content.
fn reference_encoding(dim: u32, records: &[(u64, u8, u8, Vec<f32>)]) -> Vec<u8> {
    let mut b = b"EHRE".to_vec();
    b.extend(1u16.to_le_bytes());
    b.extend(0u16.to_le_bytes());
    b.extend(dim.to_le_bytes());
    b.extend((records.len() as u64).to_le_bytes());
    for (hadm, cat, day, v) in records {
        b.extend(hadm.to_le_bytes());
        b.push(*cat);
        b.push(*day);
        b.extend([0, 0]);
        for x in v {
            b.extend(x.to_le_bytes());
        }
    }
    b
}

#[test]
fn encoding_matches_the_documented_layout() {
    let mut s = EmbeddingStore::new(2).unwrap();
    s.insert(StoreKey::new(7, NoteCategory::Radiology, 2), vec![1.5, -0.0]).unwrap();
    s.insert(StoreKey::new(7, NoteCategory::Echo, 8), vec![f32::MIN_POSITIVE / 4.0, 3.0]).unwrap();
    s.insert(StoreKey::new(3, NoteCategory::Nursing, 1), vec![0.25, -2.0]).unwrap();
    let expected = reference_encoding(
        2,
        &[
            (3, 2, 1, vec![0.25, -2.0]),
            (7, 0, 8, vec![f32::MIN_POSITIVE / 4.0, 3.0]),
            (7, 3, 2, vec![1.5, -0.0]),
        ],
    );
    let bytes = s.encode();
    assert_eq!(bytes, expected);
    assert_eq!(bytes.len(), HEADER_LEN + 3 * (12 + 4 * 2));
    assert_eq!(EmbeddingStore::decode(&expected).unwrap(), s);
}

#[test]
fn header_only_file_is_twenty_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.ehre");
    store::write_store(&EmbeddingStore::new(768).unwrap(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 20);
    assert_eq!(bytes, reference_encoding(768, &[]));
    let back = store::read_store(&path).unwrap();
    assert_eq!((back.dim(), back.len()), (768, 0));
}

#[test]
fn decoder_rejects_malformed_stores() {
    let rec = |hadm, cat, day| (hadm, cat, day, vec![1.0f32]);
    let reject = |bytes: Vec<u8>| {
        assert!(
            matches!(EmbeddingStore::decode(&bytes), Err(Error::StoreFormat(_))),
            "accepted {bytes:?}"
        )
    };
    reject(reference_encoding(1, &[rec(1, 0, 1), rec(1, 0, 1)]));
    reject(reference_encoding(1, &[rec(2, 0, 1), rec(1, 0, 1)]));
    reject(reference_encoding(1, &[rec(1, 9, 1)]));
    reject(reference_encoding(1, &[rec(1, 3, 1), rec(1, 2, 5)]));
    let mut truncated = reference_encoding(1, &[rec(1, 0, 1), rec(1, 2, 5)]);
    truncated.truncate(HEADER_LEN + 16);
    reject(truncated);
    let mut padded = reference_encoding(1, &[rec(1, 0, 1)]);
    padded[HEADER_LEN + 10] = 1;
    reject(padded);
    let mut trailing = reference_encoding(1, &[rec(1, 0, 1)]);
    trailing.push(0);
    reject(trailing);
    let mut bad_version = reference_encoding(1, &[]);
    bad_version[4] = 2;
    reject(bad_version);
    reject(b"EHRF".iter().copied().chain([0; 16]).collect());
}

#[test]
fn insert_validates_vectors() {
    let mut s = EmbeddingStore::new(2).unwrap();
    let key = StoreKey::new(1, NoteCategory::Ecg, 1);
    assert!(matches!(
        s.insert(key, vec![1.0]),
        Err(Error::DimensionMismatch { expected: 2, actual: 1 })
    ));
    assert!(s.insert(key, vec![f32::NAN, 0.0]).is_err());
    s.insert(key, vec![0.0, 1.0]).unwrap();
    assert!(s.insert(key, vec![0.0, 1.0]).is_err());
}

fn special_f32() -> impl Strategy<Value = f32> {
    prop_oneof![
        Just(0.0f32),
        Just(-0.0f32),
        Just(f32::MIN_POSITIVE),
        Just(-f32::MIN_POSITIVE / 2.0),
        Just(f32::from_bits(1)),
        Just(f32::MAX),
        (0u32..0x0080_0000).prop_map(f32::from_bits),
        any::<f32>().prop_filter("finite", |x| x.is_finite()),
    ]
}

fn arb_store() -> impl Strategy<Value = EmbeddingStore> {
    (1u32..6).prop_flat_map(|dim| {
        prop::collection::btree_map(
            (0u64..50, 0u8..5, 1u8..9),
            prop::collection::vec(special_f32(), dim as usize),
            0..20,
        )
        .prop_map(move |entries| {
            let mut s = EmbeddingStore::new(dim).unwrap();
            for ((hadm, cat, day), v) in entries {
                s.insert(StoreKey::new(hadm, NoteCategory::from_code(cat).unwrap(), day), v)
                    .unwrap();
            }
            s
        })
    })
}

proptest! {
    #[test]
    fn codec_round_trip_is_bit_exact(s in arb_store()) {
        let bytes = s.encode();
        prop_assert_eq!(bytes.len(), s.encoded_len());
        let back = EmbeddingStore::decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), s.len());
        for ((ka, va), (kb, vb)) in s.iter().zip(back.iter()) {
            prop_assert_eq!(ka, kb);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(va), bits(vb));
        }
        prop_assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn truncation_anywhere_is_detected(s in arb_store(), cut in 0.0f64..1.0) {
        let bytes = s.encode();
        let at = (bytes.len() as f64 * cut) as usize;
        prop_assume!(at < bytes.len());
        prop_assert!(EmbeddingStore::decode(&bytes[..at]).is_err());
    }
}

fn original(text: &str, day: u8) -> BucketCell {
    BucketCell {
        text: text.into(),
        fill: Fill::Original,
        source_day: Some(day),
        note_count: 1,
    }
}

#[test]
fn features_are_day_major_with_copies_and_zeros() {
    let mut g = BucketGrid::empty(5, 1, 3);
    *g.cell_mut(NoteCategory::Nursing, 1) = original("n1", 1);
    *g.cell_mut(NoteCategory::Echo, 2) = original("e2", 2);
    let g = forward_fill(g);

    let mut s = EmbeddingStore::new(2).unwrap();
    s.insert(StoreKey::new(5, NoteCategory::Nursing, 1), vec![1.0, 2.0]).unwrap();
    s.insert(StoreKey::new(5, NoteCategory::Echo, 2), vec![3.0, 4.0]).unwrap();

    let z = [0.0f32, 0.0];
    let day1: Vec<f32> = [z, z, [1.0, 2.0], z, z].concat();
    let day2: Vec<f32> = [[3.0, 4.0], z, [1.0, 2.0], z, z].concat();
    let f = assemble_features(&g, &s, 3).unwrap();
    assert_eq!(f.values, [day1.clone(), day2.clone(), day2.clone()].concat());
    assert_eq!(assemble_features(&g, &s, 1).unwrap().values, day1);
    assert!(assemble_features(&g, &s, 4).is_err());

    let mut missing = EmbeddingStore::new(2).unwrap();
    missing.insert(StoreKey::new(5, NoteCategory::Nursing, 1), vec![1.0, 2.0]).unwrap();
    assert!(matches!(
        assemble_features(&g, &missing, 2),
        Err(Error::MissingEmbedding { hadm_id: 5, category: 0, day: 2 })
    ));
    assert!(assemble_features(&g, &missing, 1).is_ok());
}

#[test]
fn stub_embeddings_are_deterministic_unit_vectors() {
    let a = store::stub_embed("chest pain", 64, 1);
    assert_eq!(a, store::stub_embed("chest pain", 64, 1));
    assert_ne!(a, store::stub_embed("chest pain", 64, 2));
    assert_ne!(a, store::stub_embed("chest pain.", 64, 1));
    let norm: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-5);
}
