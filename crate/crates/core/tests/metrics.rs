use mrrn_core::metrics::{aggregate, dsc, emit_table, parse_csv, DscStats, MethodRow, Structure, TableFormat};
use mrrn_core::LabelMask;
use proptest::prelude::*;

fn mask(h: usize, w: usize, labels: Vec<u8>) -> LabelMask {
    LabelMask::new(1, h, w, labels).unwrap()
}

/// Pixel-counting Dice, straight from the definition.
fn brute_dsc(a: &[u8], b: &[u8], label: u8) -> f64 {
    let (mut both, mut na, mut nb) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.iter().zip(b) {
        na += (x == label) as u64;
        nb += (y == label) as u64;
        both += (x == label && y == label) as u64;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

/// Sort-based percentile with the linear-interpolation rank convention.
fn oracle_percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = p * (v.len() as f64 - 1.0);
    let i = pos as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[i] * (1.0 - (pos - i as f64)) + v[i + 1] * (pos - i as f64)
}

#[test]
fn identity_and_disjoint() {
    let gt = mask(4, 4, (0..16).map(|i| (i % 3) as u8).collect());
    assert_eq!(dsc(&gt, &gt, 1).unwrap(), 1.0);
    let a = mask(1, 4, vec![1, 1, 0, 0]);
    let b = mask(1, 4, vec![0, 0, 1, 1]);
    assert_eq!(dsc(&a, &b, 1).unwrap(), 0.0);
}

#[test]
fn half_coverage_is_two_thirds() {
    let gt = mask(10, 10, vec![3; 100]);
    let pred = mask(10, 10, (0..100).map(|i| if i < 50 { 3 } else { 0 }).collect());
    assert!((dsc(&pred, &gt, 3).unwrap() - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn degenerate_cases() {
    let empty = mask(3, 3, vec![0; 9]);
    let one = mask(3, 3, vec![0, 0, 0, 0, 5, 0, 0, 0, 0]);
    assert_eq!(dsc(&empty, &empty, 5).unwrap(), 1.0);
    assert_eq!(dsc(&one, &empty, 5).unwrap(), 0.0);
    assert_eq!(dsc(&empty, &one, 5).unwrap(), 0.0);
}

#[test]
fn shape_mismatch_is_an_error() {
    assert!(dsc(&mask(2, 2, vec![0; 4]), &mask(1, 4, vec![0; 4]), 1).is_err());
}

#[test]
fn aggregate_examples() {
    let s = aggregate(&[0.42]).unwrap();
    assert_eq!((s.mean, s.median, s.std, s.q1, s.q3), (0.42, 0.42, 0.0, 0.42, 0.42));
    let s = aggregate(&[0.9, 0.6, 0.8, 0.7]).unwrap();
    assert!((s.median - 0.75).abs() < 1e-12);
    assert!((s.q1 - 0.675).abs() < 1e-12);
    assert!((s.q3 - 0.825).abs() < 1e-12);
    assert!((s.std - 0.0125f64.sqrt()).abs() < 1e-12);
    assert!(aggregate(&[]).is_err());
}

fn row(method: &str, mean: f64, std: f64) -> MethodRow {
    let s = DscStats { n: 50, mean, std, median: mean, q1: mean - 0.01, q3: mean + 0.01, min: 0.0, max: 1.0 };
    MethodRow { method: method.into(), stats: Structure::ALL.iter().map(|&st| (st, s)).collect() }
}

#[test]
fn text_table_layout() {
    let mut r = row("MRRN", 0.97, 0.01);
    r.stats[3].1.mean = 0.77;
    r.stats[3].1.std = 0.04;
    let text = emit_table(&[r], TableFormat::Text).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    let header: Vec<&str> = lines[1].split("  ").map(str::trim).filter(|s| !s.is_empty()).collect();
    assert_eq!(header, ["Method", "Left Lung", "Right Lung", "Heart", "Esophagus", "Spinal Cord"]);
    assert!(lines[3].contains("0.77 ± 0.04"));
    assert_eq!(lines[3].matches('±').count(), 5);
}

#[test]
fn median_iqr_cells() {
    let s = aggregate(&[0.97, 0.965, 0.98, 0.975, 0.97]).unwrap();
    let r = MethodRow { method: "m".into(), stats: Structure::ALL.iter().map(|&st| (st, s)).collect() };
    let text = emit_table(&[r], TableFormat::MedianIqr).unwrap();
    assert!(text.contains("0.97 (IQR: 0.97-0.97)"), "{text}");
}

#[test]
fn inconsistent_structures_rejected() {
    let mut short = row("b", 0.5, 0.1);
    short.stats.pop();
    assert!(emit_table(&[row("a", 0.5, 0.1), short], TableFormat::Csv).is_err());
    assert!(emit_table(&[], TableFormat::Text).is_err());
}

#[test]
fn csv_rejects_garbage() {
    assert!(parse_csv("nope\n").is_err());
    assert!(parse_csv("method,structure,n,mean,std,median,q1,q3\nx,Heart,1,abc,0,0,0,0\n").is_err());
    assert!(parse_csv("method,structure,n,mean,std,median,q1,q3\nx,Liver,1,0,0,0,0,0\n").is_err());
}

proptest! {
    #[test]
    fn dsc_matches_brute_force_and_is_symmetric(
        (h, w, a, b) in (1usize..24, 1usize..24).prop_flat_map(|(h, w)| {
            (Just(h), Just(w), prop::collection::vec(0u8..6, h * w), prop::collection::vec(0u8..6, h * w))
        }),
        label in 1u8..6,
    ) {
        let (ma, mb) = (mask(h, w, a.clone()), mask(h, w, b.clone()));
        let d = dsc(&ma, &mb, label).unwrap();
        prop_assert_eq!(d, brute_dsc(&a, &b, label));
        prop_assert_eq!(d, dsc(&mb, &ma, label).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        let same = a.iter().zip(&b).all(|(&x, &y)| (x == label) == (y == label));
        prop_assert_eq!(d == 1.0, same);
    }

    #[test]
    fn aggregate_matches_oracle_and_ignores_order(mut values in prop::collection::vec(0.0f64..=1.0, 1..40), seed in any::<u64>()) {
        let s = aggregate(&values).unwrap();
        prop_assert!((s.median - oracle_percentile(&values, 0.5)).abs() <= 1e-12);
        prop_assert!((s.q1 - oracle_percentile(&values, 0.25)).abs() <= 1e-12);
        prop_assert!((s.q3 - oracle_percentile(&values, 0.75)).abs() <= 1e-12);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        prop_assert!((s.mean - mean).abs() <= 1e-12);
        prop_assert!(s.min <= s.q1 && s.q1 <= s.median && s.median <= s.q3 && s.q3 <= s.max);
        // Rotate and reverse: a cheap permutation that depends on the seed.
        let k = (seed as usize) % values.len();
        values.rotate_left(k);
        values.reverse();
        prop_assert_eq!(aggregate(&values).unwrap(), s);
    }

    #[test]
    fn csv_round_trip(cases in prop::collection::vec(prop::array::uniform5(0.0f64..=1.0), 1..12)) {
        let rows = vec![MethodRow::from_cases("MRRN", &cases).unwrap(), MethodRow::from_cases("U-Net, baseline", &cases).unwrap()];
        let back = parse_csv(&emit_table(&rows, TableFormat::Csv).unwrap()).unwrap();
        prop_assert_eq!(back.len(), 2);
        for (a, b) in rows.iter().zip(&back) {
            prop_assert_eq!(&a.method, &b.method);
            for ((sa, x), (sb, y)) in a.stats.iter().zip(&b.stats) {
                prop_assert_eq!(sa, sb);
                prop_assert_eq!((x.n, x.mean, x.std, x.median, x.q1, x.q3), (y.n, y.mean, y.std, y.median, y.q1, y.q3));
            }
        }
    }
}
