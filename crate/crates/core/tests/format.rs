use featsplat::decoder::{Decoder, EmbeddingConfig};
use featsplat::error::Error;
use featsplat::format::{decode_scene, encode_scene, load_scene, record_len, save_scene, HEADER_LEN};
use featsplat::scene::{init_scene, SplatScene};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sample(n: usize, d: usize, c: usize, flags: u8, seed: u64) -> (SplatScene, Decoder) {
    let points: Vec<_> = (0..n).map(|i| Vector3::new(i as f64 * 0.1, -(i as f64) * 0.05, 0.3)).collect();
    let mut scene = if n == 0 { SplatScene::empty(d, c) } else { init_scene(&points, d, c, seed).unwrap() };
    let mut dec = Decoder::random(d, EmbeddingConfig::from_flags(flags).unwrap(), c, &mut ChaCha8Rng::seed_from_u64(seed));
    scene.round_to_f32();
    dec.round_to_f32();
    (scene, dec)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn roundtrip(n in 0usize..20, d in 3usize..12, c in 0usize..6, flags in 0u8..8, seed in any::<u64>()) {
        let (scene, dec) = sample(n, d, c, flags, seed);
        let bytes = encode_scene(&scene, &dec).unwrap();
        let (s2, d2) = decode_scene(&bytes).unwrap();
        prop_assert_eq!(&s2, &scene);
        prop_assert_eq!(&d2, &dec);
        prop_assert_eq!(encode_scene(&s2, &d2).unwrap(), bytes);
    }

    #[test]
    fn any_single_byte_flip_is_rejected(pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let (scene, dec) = sample(4, 3, 2, 3, 9);
        let mut bytes = encode_scene(&scene, &dec).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(decode_scene(&bytes).is_err());
    }

    #[test]
    fn truncation_reports_an_offset_inside_the_file(cut in 1usize..200) {
        let (scene, dec) = sample(5, 4, 0, 1, 2);
        let bytes = encode_scene(&scene, &dec).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        match decode_scene(&bytes[..keep]) {
            Err(Error::Format { offset, .. }) => prop_assert!(offset as usize <= keep),
            other => prop_assert!(false, "unexpected {:?}", other.map(|_| ())),
        }
    }
}

#[test]
fn layout_sizes() {
    let (scene, dec) = sample(3, 16, 0, 3, 0);
    let bytes = encode_scene(&scene, &dec).unwrap();
    assert_eq!(&bytes[..4], b"FSPL");
    assert_eq!(record_len(16), 4 * (3 + 4 + 3 + 1 + 16));
    let records_end = HEADER_LEN + 3 * record_len(16);
    // Decoder blob: E, flags, C, then the weights; CRC32 last.
    let e = u32::from_le_bytes(bytes[records_end..records_end + 4].try_into().unwrap());
    assert_eq!(e as usize, EmbeddingConfig::default().dim());
    assert_eq!(bytes[records_end + 4], 0b011);
    let weights = 4 * dec.parameter_count();
    assert_eq!(bytes.len(), records_end + 4 + 1 + 4 + weights + 4);
}

#[test]
fn files_roundtrip_and_missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, dec) = sample(7, 8, 3, 7, 1);
    let path = dir.path().join("x.fspl");
    save_scene(&scene, &dec, &path).unwrap();
    assert_eq!(load_scene(&path).unwrap(), (scene, dec));
    assert!(matches!(load_scene(&dir.path().join("missing.fspl")), Err(Error::Io { .. })));
}
