//! On-disk formats: `.dnt` tensors, checkpoints and atomic writes.

use proptest::prelude::*;

use dnf_core::fsutil::write_atomic;
use dnf_core::model::Checkpoint;
use dnf_core::scenegen::{render, sample_scene, Difficulty, Sample};
use dnf_core::tensor::{decode_dnt, encode_dnt, map_from_dnt, map_to_dnt, read_map, write_map, Map};
use dnf_core::train::{train_arm, Dataset, RunConfig};
use dnf_core::Error;

proptest! {
    #[test]
    fn dnt_round_trip(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
        let n: usize = dims.iter().product();
        let payload: Vec<f32> = (0..n).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 * 1e-6 - 7.5).collect();
        let bytes = encode_dnt(&dims, &payload).unwrap();
        let (d, p) = decode_dnt(&bytes).unwrap();
        prop_assert_eq!(d, dims);
        prop_assert_eq!(p.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), payload.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn any_flipped_byte_is_rejected(pos in 0usize..64, bit in 0u8..8) {
        let m = Map::from_fn(3, 2, 2, |c, y, x| (c * 4 + y * 2 + x) as f32 * 0.25);
        let mut bytes = map_to_dnt(&m);
        let pos = pos % bytes.len();
        bytes[pos] ^= 1 << bit;
        let rejected = matches!(map_from_dnt(&bytes), Err(Error::Format { .. }));
        prop_assert!(rejected);
    }
}

#[test]
fn map_files_preserve_layout_and_report_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let m = Map::from_fn(3, 5, 4, |c, y, x| c as f32 + 0.1 * y as f32 + 0.01 * x as f32);
    let p = dir.path().join("m.dnt");
    write_map(&p, &m).unwrap();
    assert_eq!(read_map(&p).unwrap(), m);
    let bytes = std::fs::read(&p).unwrap();
    // Header: magic, dtype, rank, then H, W, C.
    assert_eq!(&bytes[..4], b"DNT1");
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 5);
    assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 3);
    std::fs::write(&p, &bytes[..bytes.len() - 9]).unwrap();
    match read_map(&p) {
        Err(Error::Format { path, .. }) => assert_eq!(path.as_deref(), Some(p.as_path())),
        other => panic!("expected a format error, got {other:?}"),
    }
    assert!(matches!(read_map(&dir.path().join("absent.dnt")), Err(Error::Io { .. })));
}

#[test]
fn atomic_writes_replace_whole_files_and_leave_no_temporaries() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("sub").join("out.bin");
    write_atomic(&p, &[1u8; 1000]).unwrap();
    write_atomic(&p, b"short").unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), b"short");
    let names: Vec<String> = std::fs::read_dir(p.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert_eq!(names, vec!["out.bin".to_string()]);
    // A failed write (target is a directory) keeps existing content elsewhere intact.
    let blocked = dir.path().join("blocked");
    std::fs::create_dir_all(blocked.join("inner")).unwrap();
    assert!(write_atomic(&blocked, b"x").is_err());
    assert!(blocked.join("inner").is_dir());
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let scene = sample_scene(4, Difficulty::Simple);
    let (image, intrinsics) = render(&scene, 8, 8).unwrap();
    let data = Dataset::from_samples(&[Sample { image, intrinsics, scene }]).unwrap();
    let cfg = RunConfig { epochs: 2, batch: 1, base_channels: 4, ..RunConfig::default() };
    let out = train_arm(&cfg, &data, None, None, |_| {}).unwrap();
    let ck = out.checkpoint("arm", &cfg, data.fingerprint.clone());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.dnfc");
    ck.save(&p).unwrap();
    let back = Checkpoint::load(&p).unwrap();
    assert_eq!(back.model.params.checksum(), out.model.params.checksum());
    assert_eq!(back.meta.role, "arm");
    let mut bytes = std::fs::read(&p).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&p, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&p), Err(Error::Format { .. })));
}
