use tiny_ssd::graph::tiny_ssd_spec;
use tiny_ssd::model_io::{
    decode, encode, encoded_len, framing_len, init_random, load, quantize_fp16, round_f16, save,
    Dtype, WeightStore,
};
use tiny_ssd::Error;

fn small_store() -> WeightStore {
    let mut store = WeightStore::new();
    store
        .insert(
            "a/w",
            vec![2, 3],
            vec![0.1, -2.5, 70000.0, 1e-8, 3.0, -65505.0],
        )
        .unwrap();
    store.insert("a/b", vec![2], vec![0.5, -0.25]).unwrap();
    store
}

#[test]
fn f16_save_load_equals_quantized_store() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tssd");
    let spec = tiny_ssd_spec();
    let store = init_random(&spec, 11).unwrap();
    save(&store, &path, Dtype::F16).unwrap();
    let manifest = spec.parameter_manifest().unwrap();
    let loaded = load(&path, Some(&manifest)).unwrap();
    let (quantized, stats) = quantize_fp16(&store);
    assert_eq!(stats.clamped, 0);
    for ((n1, a), (n2, b)) in loaded.iter().zip(quantized.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(a.shape, b.shape);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.data), bits(&b.data), "{n1}");
    }
}

#[test]
fn file_size_is_framing_plus_two_bytes_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tssd");
    let spec = tiny_ssd_spec();
    let manifest = spec.parameter_manifest().unwrap();
    let store = WeightStore::zeros(&manifest);
    save(&store, &path, Dtype::F16).unwrap();
    let size = std::fs::metadata(&path).unwrap().len() as usize;
    assert_eq!(size, framing_len(&manifest) + 2 * store.element_count());
    assert_eq!(size, encoded_len(&manifest, Dtype::F16));
    let mb = size as f64 / 1e6;
    assert!((mb - 2.3).abs() / 2.3 <= 0.06, "{mb} MB");
}

#[test]
fn f32_round_trip_is_exact() {
    let store = small_store();
    let back = decode(&encode(&store, Dtype::F32)).unwrap();
    assert_eq!(back, store);
}

#[test]
fn quantization_clamps_and_is_idempotent() {
    let store = small_store();
    let (q, stats) = quantize_fp16(&store);
    assert_eq!(stats.clamped, 2);
    let w = &q.get("a/w").unwrap().data;
    assert_eq!(w[2], 65504.0);
    assert_eq!(w[5], -65504.0);
    let (qq, again) = quantize_fp16(&q);
    assert_eq!(qq, q);
    assert_eq!(again.max_abs_error, 0.0);
    let via_file = decode(&encode(&q, Dtype::F16)).unwrap();
    assert_eq!(via_file, q);
}

#[test]
fn quantization_error_within_half_ulp() {
    let store = init_random(&tiny_ssd_spec(), 5).unwrap();
    let (q, stats) = quantize_fp16(&store);
    for ((_, a), (_, b)) in store.iter().zip(q.iter()) {
        for (x, y) in a.data.iter().zip(&b.data) {
            // binary16 has 11 significant bits; below 2^-14 the spacing is fixed at 2^-24.
            let bound = (x.abs() as f64 * 2f64.powi(-11)).max(2f64.powi(-25));
            assert!(((x - y) as f64).abs() <= bound, "{x} -> {y}");
        }
    }
    assert!(stats.mean_abs_error <= stats.max_abs_error);
    assert_eq!(round_f16(0.1), round_f16(round_f16(0.1)));
}

#[test]
fn flipped_payload_byte_changes_one_value_only() {
    let store = small_store();
    let mut bytes = encode(&store, Dtype::F16);
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    let back = decode(&bytes).unwrap();
    let (q, _) = quantize_fp16(&store);
    assert_eq!(back.get("a/w").unwrap(), q.get("a/w").unwrap());
    let (b0, b1) = (&back.get("a/b").unwrap().data, &q.get("a/b").unwrap().data);
    assert_eq!(b0[0], b1[0]);
    assert_ne!(b0[1], b1[1]);
}

#[test]
fn corrupt_files_report_offsets() {
    let bytes = encode(&small_store(), Dtype::F16);
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(
        decode(&bad_magic),
        Err(Error::Format { offset: 0, .. })
    ));

    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    assert!(matches!(
        decode(&bad_version),
        Err(Error::Format { offset: 4, .. })
    ));

    let truncated = &bytes[..bytes.len() - 3];
    assert!(matches!(decode(truncated), Err(Error::Format { .. })));

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(decode(&trailing), Err(Error::Format { .. })));
}

#[test]
fn manifest_mismatch_rejected_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.tssd");
    save(&small_store(), &path, Dtype::F32).unwrap();
    let manifest = tiny_ssd_spec().parameter_manifest().unwrap();
    assert!(load(&path, Some(&manifest)).is_err());
    assert!(load(&path, None).is_ok());
    assert!(matches!(
        load(dir.path().join("absent.tssd"), None),
        Err(Error::Io(_))
    ));
}
