//! Model directory and blob round trips, plus the ways a directory can be
//! damaged.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use sparseconv_core::harness::{LayerChoice, NetworkConfig};
use sparseconv_core::model::LayerWeights;
use sparseconv_core::nn::{NetSpec, ToyNet};
use sparseconv_core::quant::{apply_quantization, QuantOptions, Scheme, Targets};
use sparseconv_core::store::*;
use sparseconv_core::*;

fn sparse_model(seed: u64) -> Model {
    let mut net = ToyNet::new(NetSpec::two_conv([3, 8, 8], 4), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in &mut net.convs {
        c.mask.iter_mut().for_each(|m| *m = rng.random_bool(0.2));
        c.apply_mask();
        c.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
    }
    let mut m = Model::from_toynet(&net, None).unwrap();
    m.provenance = serde_json::json!({ "note": "store test", "seed": seed });
    m
}

fn input(m: &Model, n: usize) -> Tensor4D<f32> {
    let [c, h, w] = m.spec.input;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    Tensor4D::from_fn([n, c, h, w], |_| rng.random_range(-1.0f32..1.0))
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST)).unwrap()).unwrap()
}

fn write_manifest(dir: &Path, v: &Value) {
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(v).unwrap()).unwrap();
}

#[test]
fn dense_csr_and_codebook_models_round_trip() {
    let dense = sparse_model(1);
    let csr = dense.to_csr().unwrap();
    let codebook = apply_quantization(&csr, Scheme::Codebook { k: 16 }, Targets { weights: true, activations: false }, None, &QuantOptions::default()).unwrap();
    let x = input(&dense, 3);
    for m in [&dense, &csr, &codebook] {
        let dir = tempfile::tempdir().unwrap();
        save_model(m, dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        // k-means convergence history is a fitting diagnostic and not stored.
        let mut expected = m.clone();
        for l in &mut expected.layers {
            if let LayerWeights::Codebook { codebook, .. } = &mut l.weights {
                codebook.sse_history.clear();
            }
        }
        assert_eq!(back, expected);
        assert_eq!(back.forward(&x, None).unwrap(), m.forward(&x, None).unwrap());
    }
    assert!(matches!(codebook.layers[0].weights, LayerWeights::Codebook { .. }));
}

#[test]
fn every_blob_is_aligned_and_checksummed() {
    let dir = tempfile::tempdir().unwrap();
    save_model(&sparse_model(2).to_csr().unwrap(), dir.path()).unwrap();
    let m = read_manifest(dir.path()).unwrap();
    for f in blob_files(&m) {
        let bytes = fs::read(dir.path().join(&f)).unwrap();
        assert_eq!(bytes.len() % ALIGN, 0, "{}", f.display());
        assert_eq!(&bytes[..8], &BLOB_MAGIC);
    }
    let layer = &m.layers[0];
    let colidx = layer.colidx.as_ref().unwrap();
    let bytes = fs::read(dir.path().join(&colidx.file)).unwrap();
    assert_eq!(format!("{:016x}", fnv1a64(&bytes)), colidx.fnv1a64);
    assert_eq!(bytes.len() as u64, colidx.bytes);
}

#[test]
fn flipped_byte_is_a_checksum_error() {
    let dir = tempfile::tempdir().unwrap();
    save_model(&sparse_model(3).to_csr().unwrap(), dir.path()).unwrap();
    let m = read_manifest(dir.path()).unwrap();
    let path = dir.path().join(&m.layers[1].values.as_ref().unwrap().file);
    let mut bytes = fs::read(&path).unwrap();
    bytes[HEADER_LEN + 5] ^= 0x40;
    fs::write(&path, bytes).unwrap();
    assert!(matches!(load_model(dir.path()), Err(Error::Checksum { .. })));
}

#[test]
fn newer_manifest_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_model(&sparse_model(4), dir.path()).unwrap();
    let mut v = manifest(dir.path());
    v["format_version"] = (FORMAT_VERSION + 1).into();
    // Unknown fields of a future schema must not mask the version error.
    v["future_field"] = true.into();
    write_manifest(dir.path(), &v);
    match load_model(dir.path()) {
        Err(Error::Version { found, supported }) => assert_eq!((found, supported), (FORMAT_VERSION + 1, FORMAT_VERSION)),
        other => panic!("expected a version error, got {other:?}"),
    }
}

#[test]
fn newer_blob_version_is_rejected() {
    let mut b = encode_blob(&BlobData::F32(vec![1.0, 2.0]), &[2]).unwrap();
    b[8..12].copy_from_slice(&(FORMAT_VERSION + 3).to_le_bytes());
    assert!(matches!(decode_blob(&b), Err(Error::Version { .. })));
}

/// Rewrites a u32 blob and updates its manifest checksum so only the
/// structural validation can catch the damage.
fn tamper_u32(dir: &Path, layer: usize, field: &str, f: impl FnOnce(&mut Vec<u32>)) {
    let mut v = manifest(dir);
    let r = &mut v["layers"][layer][field];
    let file = r["file"].as_str().unwrap().to_string();
    let (data, dims) = decode_blob(&fs::read(dir.join(&file)).unwrap()).unwrap();
    let BlobData::U32(mut values) = data else { panic!("{field} is not u32") };
    f(&mut values);
    let bytes = encode_blob(&BlobData::U32(values), &dims).unwrap();
    fs::write(dir.join(&file), &bytes).unwrap();
    r["fnv1a64"] = format!("{:016x}", fnv1a64(&bytes)).into();
    r["bytes"] = bytes.len().into();
    write_manifest(dir, &v);
}

#[test]
fn out_of_range_colidx_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    save_model(&sparse_model(5).to_csr().unwrap(), dir.path()).unwrap();
    tamper_u32(dir.path(), 0, "colidx", |c| c[0] = u32::MAX - 1);
    let err = load_model(dir.path()).unwrap_err();
    assert!(err.is_format(), "{err}");
    assert!(err.to_string().contains("conv0"), "{err}");
}

#[test]
fn duplicate_colidx_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    save_model(&sparse_model(6).to_csr().unwrap(), dir.path()).unwrap();
    tamper_u32(dir.path(), 1, "colidx", |c| c[1] = c[0]);
    assert!(load_model(dir.path()).unwrap_err().is_format());
}

#[test]
fn ragged_rowptr_is_an_invariant_error() {
    let dir = tempfile::tempdir().unwrap();
    save_model(&sparse_model(7).to_csr().unwrap(), dir.path()).unwrap();
    tamper_u32(dir.path(), 0, "rowptr", |r| r[1] -= 1);
    assert!(load_model(dir.path()).unwrap_err().is_invariant());
}

#[test]
fn missing_blob_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    save_model(&sparse_model(8), dir.path()).unwrap();
    let m = read_manifest(dir.path()).unwrap();
    fs::remove_file(dir.path().join(&m.head.weights.file)).unwrap();
    assert!(matches!(load_model(dir.path()), Err(Error::Io { .. })));
}

#[test]
fn blob_names_cannot_escape_the_directory() {
    let dir = tempfile::tempdir().unwrap();
    save_model(&sparse_model(9), dir.path()).unwrap();
    let mut v = manifest(dir.path());
    v["head"]["bias"]["file"] = "../head.bias.bin".into();
    write_manifest(dir.path(), &v);
    assert!(load_model(dir.path()).unwrap_err().is_format());
}

#[test]
fn resaving_in_place_removes_stale_blobs() {
    let dir = tempfile::tempdir().unwrap();
    let dense = sparse_model(10);
    save_model(&dense, dir.path()).unwrap();
    save_model(&dense.to_csr().unwrap(), dir.path()).unwrap();
    let mut on_disk: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|f| f != MANIFEST)
        .collect();
    on_disk.sort();
    let mut referenced: Vec<String> = blob_files(&read_manifest(dir.path()).unwrap())
        .into_iter()
        .map(|p| p.to_string_lossy().into_owned())
        .collect();
    referenced.sort();
    assert_eq!(on_disk, referenced);
}

#[test]
fn tensor_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.bin");
    let x = input(&sparse_model(11), 5);
    save_tensor(&x, &path).unwrap();
    assert_eq!(load_tensor(&path).unwrap(), x);
    let bytes = fs::read(&path).unwrap();
    assert_eq!(bytes.len(), (HEADER_LEN + x.len() * 4).next_multiple_of(ALIGN));
    assert_eq!(u64::from_le_bytes(bytes[56..64].try_into().unwrap()), x.len() as u64);
}

#[test]
fn config_files_round_trip_and_check_version() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    let model = sparse_model(12);
    let mut cfg = NetworkConfig::all_dense(&model, 16);
    cfg.layers[1] = LayerChoice {
        algorithm: harness::Algorithm::SparseDirect,
        sub_batch_size: 4,
        ..LayerChoice::dense_direct("conv1", 0.8, Some("hand-written".into()))
    };
    save_config(&cfg, &path).unwrap();
    assert_eq!(load_config(&path).unwrap(), cfg);
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    v["format_version"] = (FORMAT_VERSION + 1).into();
    fs::write(&path, v.to_string()).unwrap();
    assert!(matches!(load_config(&path), Err(Error::Version { .. })));
}

#[test]
fn packed_codes_round_trip_at_every_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for bits in 1..=16u32 {
        let codes: Vec<u32> = (0..77).map(|_| rng.random_range(0..1u32 << bits)).collect();
        let data = BlobData::Packed { bits, codes };
        let bytes = encode_blob(&data, &[7, 11]).unwrap();
        assert_eq!(bytes.len(), (HEADER_LEN + (77 * bits as usize).div_ceil(8)).next_multiple_of(ALIGN));
        assert_eq!(decode_blob(&bytes).unwrap(), (data, vec![7, 11]));
    }
}
