// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::Array2;
use proptest::prelude::*;

use planprobe::store::{self, ActivationRecord, DatasetHeader, DatasetReader, Manifest, ValidationStatus};

fn records(layers: usize, dim: usize) -> impl Strategy<Value = Vec<ActivationRecord>> {
    let record = (
        any::<u64>(),
        ".{0,12}",
        "\\PC{0,40}",
        1u32..500,
        any::<bool>(),
        proptest::option::of("[A-E]"),
        proptest::collection::vec(-1e6f32..1e6, layers * dim),
        any::<u16>(),
    )
        .prop_map(move |(group_id, prompt_text, response_text, tokens, complete, gold_label, data, pick)| {
            let truncation_offset = if pick % 3 == 0 { -1 } else { (pick as u32 % tokens) as i64 };
            ActivationRecord {
                example_id: 0,
                group_id,
                prompt_text,
                response_text,
                truncation_offset,
                response_tokens: tokens,
                complete,
                gold_label,
                layers: (0..layers).collect(),
                activations: Array2::from_shape_vec((layers, dim), data).unwrap(),
            }
        });
    proptest::collection::vec(record, 0..8).prop_map(|mut v| {
        for (i, r) in v.iter_mut().enumerate() {
            r.example_id = i as u64 * 7 + 3;
        }
        v
    })
}

fn dataset() -> impl Strategy<Value = (DatasetHeader, Vec<ActivationRecord>)> {
    (1usize..5, 1usize..9, "[a-z0-9-]{1,12}").prop_flat_map(|(l, d, model)| {
        records(l, d).prop_map(move |r| (DatasetHeader::new(model.clone(), "task", l as u16, d as u32), r))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn write_then_read_is_identity((header, recs) in dataset()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let manifest = store::write_dataset(&header, &recs, &path).unwrap();
        prop_assert_eq!(manifest.sha256, store::sha256_file(&path).unwrap());
        let (h, back) = store::read_all(&path).unwrap();
        prop_assert_eq!(h.record_count, recs.len() as u64);
        prop_assert_eq!(&back, &recs);
        prop_assert_eq!(store::validate(&path).status, ValidationStatus::Clean);
    }

    #[test]
    fn layer_subset_matches_full_rows((header, recs) in dataset(), pick in any::<prop::sample::Index>()) {
        prop_assume!(!recs.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        store::write_dataset(&header, &recs, &path).unwrap();
        let layer = pick.index(header.layer_count as usize);
        let mut reader = DatasetReader::open(&path).unwrap().with_layers(&[layer]).unwrap();
        for (i, r) in recs.iter().enumerate() {
            let got = reader.read_record(i).unwrap();
            prop_assert_eq!(got.activations.row(0), r.activations.row(layer));
            prop_assert_eq!(got.layers, vec![layer]);
        }
    }

    #[test]
    fn any_truncation_is_detected((header, recs) in dataset(), cut in any::<prop::sample::Index>()) {
        prop_assume!(!recs.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        store::write_dataset(&header, &recs, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let keep = cut.index(bytes.len());
        std::fs::write(&path, &bytes[..keep]).unwrap();
        prop_assert_eq!(store::validate(&path).status, ValidationStatus::Fatal);
        prop_assert!(store::read_all(&path).is_err());
    }
}

#[test]
fn manifest_sidecar_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    let header = DatasetHeader::new("m", "t", 2, 3);
    let m = store::write_dataset(&header, &[], &path).unwrap();
    m.save(&Manifest::sidecar_path(&path)).unwrap();
    let back = Manifest::load(&Manifest::sidecar_path(&path)).unwrap();
    assert_eq!(back, m);
    back.check_header(&store::read_all(&path).unwrap().0).unwrap();
}
