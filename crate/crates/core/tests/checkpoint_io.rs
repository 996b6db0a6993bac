mod common;

use cabs_core::checkpoint::{write_checkpoint, Checkpoint, Dtype};
use cabs_core::Error;
use sha2::{Digest, Sha256};

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digests of the reference-writer corpus; a change here means the fixture
/// files themselves changed.
const CORPUS: [(&str, &str); 3] = [
    ("empty.safetensors", "9bbcbf73"),
    ("mixed_dtypes.safetensors", "558e9a20"),
    ("small_model.safetensors", "d881ed76"),
];

#[test]
fn corpus_rewrites_byte_identically() {
    let out = tempfile::tempdir().unwrap();
    for (file, digest_prefix) in CORPUS {
        let path = common::data_dir().join(file);
        let original = std::fs::read(&path).unwrap();
        assert!(sha_hex(&original).starts_with(digest_prefix), "{file} fixture changed");
        let ckpt = Checkpoint::open(&path).unwrap();
        let target = out.path().join(file);
        write_checkpoint(&target, ckpt.metadata(), &ckpt.to_entries().unwrap()).unwrap();
        assert_eq!(std::fs::read(&target).unwrap(), original, "{file}");
    }
}

#[test]
fn mixed_corpus_contents() {
    let ckpt = Checkpoint::open(common::data_dir().join("mixed_dtypes.safetensors")).unwrap();
    assert_eq!(ckpt.meta("f16.all_patterns").unwrap().dtype, Dtype::F16);
    assert_eq!(ckpt.meta("bf16.all_patterns").unwrap().dtype, Dtype::BF16);
    let f16 = ckpt.read_tensor("f16.all_patterns").unwrap();
    assert_eq!(f16.shape(), &[256, 256]);
    assert_eq!(f16.data()[0x3c00], 1.0);
    assert!(f16.data()[0x7e00].is_nan());
    let bf16 = ckpt.read_tensor("bf16.all_patterns").unwrap();
    assert_eq!(bf16.data()[0x3f80], 1.0);
    assert_eq!(bf16.data()[0xff80], f32::NEG_INFINITY);
    assert!(matches!(
        ckpt.read_tensor("i64.positions"),
        Err(Error::UnsupportedDtype { .. })
    ));
    assert!(ckpt.metadata().iter().any(|(k, v)| k == "format" && v == "pt"));
}

#[test]
fn in_memory_and_mapped_agree() {
    let path = common::data_dir().join("small_model.safetensors");
    let bytes = std::fs::read(&path).unwrap();
    let mapped = Checkpoint::open(&path).unwrap();
    let owned = Checkpoint::from_bytes(bytes).unwrap();
    assert_eq!(mapped.metas(), owned.metas());
    for m in mapped.metas() {
        assert_eq!(mapped.raw(&m.name).unwrap(), owned.raw(&m.name).unwrap());
    }
}

fn file_with_header(header: &str, data: &[u8]) -> Vec<u8> {
    let mut v = (header.len() as u64).to_le_bytes().to_vec();
    v.extend_from_slice(header.as_bytes());
    v.extend_from_slice(data);
    v
}

#[test]
fn malformed_inputs_are_rejected() {
    assert!(matches!(
        Checkpoint::from_bytes(vec![1u8, 2, 3]),
        Err(Error::MalformedHeader(_))
    ));
    let huge = u64::MAX.to_le_bytes().to_vec();
    assert!(matches!(Checkpoint::from_bytes(huge), Err(Error::MalformedHeader(_))));
    assert!(Checkpoint::from_bytes(file_with_header("not json", &[])).is_err());

    let truncated = file_with_header(r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#, &[0; 4]);
    assert!(matches!(
        Checkpoint::from_bytes(truncated),
        Err(Error::Truncated { .. })
    ));

    let dup = file_with_header(
        r#"{"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"w":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
        &[0; 8],
    );
    assert!(matches!(Checkpoint::from_bytes(dup), Err(Error::DuplicateTensor(_))));

    let unknown = file_with_header(r#"{"w":{"dtype":"Q4","shape":[1],"data_offsets":[0,1]}}"#, &[0]);
    assert!(Checkpoint::from_bytes(unknown).is_err());

    let wrong_size = file_with_header(r#"{"w":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#, &[0; 8]);
    assert!(Checkpoint::from_bytes(wrong_size).is_err());

    let ok = Checkpoint::from_bytes(file_with_header(
        r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#,
        &1f32.to_le_bytes().repeat(2),
    ))
    .unwrap();
    assert_eq!(ok.read_tensor("w").unwrap().data(), &[1.0, 1.0]);
    assert!(matches!(ok.read_tensor("missing"), Err(Error::UnknownTensor(_))));
}

#[test]
fn missing_file_is_an_io_error() {
    let err = Checkpoint::open("/nonexistent/model.safetensors").unwrap_err();
    assert_eq!(err.exit_code(), 3);
}
