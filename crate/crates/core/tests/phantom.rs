use std::collections::HashSet;

use mrrn_core::phantom::*;
use proptest::prelude::*;

fn label_pixels(s: &LabeledSlice, label: u8) -> usize {
    s.mask.iter().filter(|&&l| l == label).count()
}

#[test]
fn generation_is_deterministic() {
    let p = PhantomParams::with_size(64);
    for seed in [0, 1, 99, u64::MAX] {
        let a = generate_phantom(&p, seed).unwrap();
        let b = generate_phantom(&p, seed).unwrap();
        assert!(a.bit_eq(&b));
    }
    assert!(!generate_phantom(&p, 1).unwrap().bit_eq(&generate_phantom(&p, 2).unwrap()));
}

#[test]
fn labels_and_value_ranges() {
    for size in [64, 256] {
        let p = PhantomParams::with_size(size);
        for seed in 0..100 {
            let s = generate_phantom(&p, seed).unwrap();
            assert_eq!(s.image.len(), size * size);
            assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.mask.iter().all(|&l| l <= 5));
            let counts = s.label_counts();
            assert!(counts[1..].iter().all(|&c| c > 0), "seed {seed}: {counts:?}");
        }
    }
}

#[test]
fn esophagus_stays_small_relative_to_lungs() {
    for size in [64, 256] {
        let p = PhantomParams::with_size(size);
        for seed in 0..100 {
            let s = generate_phantom(&p, seed).unwrap();
            let lungs = label_pixels(&s, 1) + label_pixels(&s, 2);
            let ratio = label_pixels(&s, 4) as f64 / lungs as f64;
            assert!(ratio < 0.05, "size {size} seed {seed}: {ratio}");
        }
    }
}

#[test]
fn thin_structures_within_pixel_bounds() {
    let p = PhantomParams::with_size(256);
    for seed in 0..50 {
        let s = generate_phantom(&p, seed).unwrap();
        // Cord area lies between the discs of radius 2 and 5 (with rasterization slack).
        let cord = label_pixels(&s, 5) as f64;
        assert!(cord >= 9.0 && cord <= std::f64::consts::PI * 36.0, "cord {cord}");
        // Widest esophagus row is 2 to 4 pixels, give or take one for rounding.
        let widest = (0..256).map(|y| s.mask[y * 256..(y + 1) * 256].iter().filter(|&&l| l == 4).count()).max().unwrap();
        assert!((2..=5).contains(&widest), "esophagus width {widest}");
    }
}

#[test]
fn left_lung_is_on_image_right() {
    let s = generate_phantom(&PhantomParams::with_size(64), 3).unwrap();
    let mean_x = |label: u8| {
        let xs: Vec<usize> = s.mask.iter().enumerate().filter(|(_, &l)| l == label).map(|(i, _)| i % 64).collect();
        xs.iter().sum::<usize>() as f64 / xs.len() as f64
    };
    assert!(mean_x(1) > 32.0 && mean_x(2) < 32.0);
}

#[test]
fn infeasible_geometry_errors() {
    let mut p = PhantomParams::with_size(64);
    p.heart_rx = Span::new(0.4, 0.45);
    p.heart_ry = Span::new(0.4, 0.45);
    assert!(generate_phantom(&p, 0).is_err());
    assert!(PhantomParams { size: 8, ..PhantomParams::with_size(64) }.validate().is_err());
}

#[test]
fn seeds_are_order_independent() {
    let p = PhantomParams::with_size(32);
    let corpus = generate_corpus(&p, 6, 42).unwrap();
    for (i, s) in corpus.iter().enumerate() {
        assert_eq!(s.slice_id, slice_id(i));
        let alone = generate_phantom(&p, derive_seed(42, i as u64)).unwrap();
        assert_eq!(alone.image, s.image);
        assert_eq!(alone.mask, s.mask);
    }
}

#[test]
fn truncated_or_corrupt_files_fail() {
    let s = generate_phantom(&PhantomParams::with_size(32), 5).unwrap();
    let bytes = encode_slice(&s);
    assert_eq!(&bytes[..4], b"MRSL");
    assert_eq!(bytes.len(), 12 + 32 * 32 * 5);
    for cut in [0, 3, 7, 11, 12, 100, bytes.len() - 1] {
        let err = decode_slice(&bytes[..cut], "x").unwrap_err().to_string();
        assert!(err.contains("byte"), "{err}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_slice(&bad, "x").unwrap_err().to_string().contains("byte 0"));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(decode_slice(&bad, "x").unwrap_err().to_string().contains("byte 4"));
    let mut bad = bytes;
    bad.push(0);
    assert!(decode_slice(&bad, "x").is_err());
}

#[test]
fn splits_are_disjoint_and_exhaustive() {
    let m = make_splits(200, 35, 50, 9).unwrap();
    let mut seen = HashSet::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        for id in m.ids(split) {
            assert!(seen.insert(id.to_string()));
        }
    }
    assert_eq!(seen.len(), 285);
    assert_eq!((m.count(Split::Train), m.count(Split::Val), m.count(Split::Test)), (200, 35, 50));
    assert_eq!(m, make_splits(200, 35, 50, 9).unwrap());
    assert_ne!(m, make_splits(200, 35, 50, 10).unwrap());
    assert!(make_splits(0, 1, 1, 0).is_err());
}

#[test]
fn corpus_round_trip_keeps_manifest_order() {
    let dir = tempfile::tempdir().unwrap();
    let p = PhantomParams::with_size(16);
    let slices = generate_corpus(&p, 256, 1).unwrap();
    let manifest = make_splits(200, 26, 30, 1).unwrap();
    write_dataset(&slices, &manifest, dir.path()).unwrap();
    let (m2, back) = read_dataset(dir.path()).unwrap();
    assert_eq!(m2, manifest);
    let order: Vec<&str> = manifest.entries.iter().map(|(id, _)| id.as_str()).collect();
    let got: Vec<&str> = back.iter().map(|s| s.slice_id.as_str()).collect();
    assert_eq!(order, got);
    for s in &back {
        let orig = slices.iter().find(|o| o.slice_id == s.slice_id).unwrap();
        assert!(orig.bit_eq(s));
    }
    let val = read_split(dir.path(), Split::Val).unwrap();
    assert_eq!(val.len(), 26);
}

#[test]
fn manifest_text_round_trip() {
    let m = make_splits(3, 2, 1, 4).unwrap();
    assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
    assert!(Manifest::parse("slice_00000 holdout\n").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn encode_decode_is_lossless(size in 1usize..20, seed in any::<u64>()) {
        let mut rng = seed;
        let mut next = || { rng = splitmix64(rng); rng };
        let image: Vec<f32> = (0..size * size).map(|_| (next() >> 40) as f32 / (1u64 << 24) as f32).collect();
        let mask: Vec<u8> = (0..size * size).map(|_| (next() % 6) as u8).collect();
        let s = LabeledSlice::new("p", size, image, mask).unwrap();
        let back = decode_slice(&encode_slice(&s), "p").unwrap();
        prop_assert!(back.bit_eq(&s));
    }
}
