//! Dice similarity and the two reporting styles: mean ± std per structure
//! and median (IQR).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::LabelMask;

/// Foreground structures in label order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Structure {
    LeftLung = 1,
    RightLung = 2,
    Heart = 3,
    Esophagus = 4,
    SpinalCord = 5,
}

impl Structure {
    pub const ALL: [Structure; 5] =
        [Structure::LeftLung, Structure::RightLung, Structure::Heart, Structure::Esophagus, Structure::SpinalCord];

    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn from_label(label: u8) -> Option<Structure> {
        Structure::ALL.get((label as usize).wrapping_sub(1)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Structure::LeftLung => "Left Lung",
            Structure::RightLung => "Right Lung",
            Structure::Heart => "Heart",
            Structure::Esophagus => "Esophagus",
            Structure::SpinalCord => "Spinal Cord",
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Structure::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Invalid(format!("unknown structure `{s}`")))
    }
}

/// Pixel counts behind a Dice score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DiceCounts {
    pub intersection: u64,
    pub pred: u64,
    pub truth: u64,
}

impl DiceCounts {
    /// `2|A∩B| / (|A| + |B|)`; 1 when both are empty.
    pub fn dsc(&self) -> f64 {
        let denom = self.pred + self.truth;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }

    pub fn merge(&mut self, other: DiceCounts) {
        self.intersection += other.intersection;
        self.pred += other.pred;
        self.truth += other.truth;
    }
}

fn check_same(pred: &LabelMask, gt: &LabelMask) -> Result<()> {
    if (pred.n, pred.h, pred.w) != (gt.n, gt.h, gt.w) {
        return Err(Error::shape(
            "dsc",
            format!("prediction is {}×{}×{} but ground truth is {}×{}×{}", pred.n, pred.h, pred.w, gt.n, gt.h, gt.w),
        ));
    }
    Ok(())
}

/// Counts for one label over raw label slices of equal length.
pub fn label_counts(pred: &[u8], gt: &[u8], label: u8) -> DiceCounts {
    let mut c = DiceCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p == label, g == label);
        c.pred += p as u64;
        c.truth += g as u64;
        c.intersection += (p && g) as u64;
    }
    c
}

/// Counts for every structure in one pass.
pub fn structure_counts(pred: &LabelMask, gt: &LabelMask) -> Result<[DiceCounts; 5]> {
    check_same(pred, gt)?;
    let mut counts = [DiceCounts::default(); 5];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if (1..=5).contains(&p) {
            counts[p as usize - 1].pred += 1;
        }
        if (1..=5).contains(&g) {
            counts[g as usize - 1].truth += 1;
            if p == g {
                counts[g as usize - 1].intersection += 1;
            }
        }
    }
    Ok(counts)
}

/// Dice similarity of `label` between two masks of equal shape. Both empty
/// gives 1, exactly one empty gives 0.
pub fn dsc(pred: &LabelMask, gt: &LabelMask, label: u8) -> Result<f64> {
    check_same(pred, gt)?;
    if !(1..=5).contains(&label) {
        return Err(Error::Invalid(format!("label {label} outside 1..=5")));
    }
    Ok(label_counts(&pred.labels, &gt.labels, label).dsc())
}

/// Summary statistics of per-case scores. The standard deviation is the
/// population one; percentiles interpolate linearly between order statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DscStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

/// Percentile `p` in [0, 100] of sorted data, interpolating at rank `p/100·(n-1)`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn aggregate(values: &[f64]) -> Result<DscStats> {
    if values.is_empty() {
        return Err(Error::EmptyDataset("aggregate needs at least one value"));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("non-finite score {v}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // Sum in sorted order so the result does not depend on input order.
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Ok(DscStats {
        n,
        mean,
        std: var.sqrt(),
        median: percentile(&sorted, 50.0),
        q1: percentile(&sorted, 25.0),
        q3: percentile(&sorted, 75.0),
        min: sorted[0],
        max: sorted[n - 1],
    })
}

/// One method's scores, one entry per structure.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRow {
    pub method: String,
    pub stats: Vec<(Structure, DscStats)>,
}

impl MethodRow {
    /// Aggregates per-case scores, `per_case[i][s]` being case `i`, structure `s`.
    pub fn from_cases(method: impl Into<String>, per_case: &[[f64; 5]]) -> Result<Self> {
        let stats = Structure::ALL
            .iter()
            .enumerate()
            .map(|(s, &st)| Ok((st, aggregate(&per_case.iter().map(|c| c[s]).collect::<Vec<_>>())?)))
            .collect::<Result<_>>()?;
        Ok(MethodRow { method: method.into(), stats })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    /// Mean ± std per structure.
    Text,
    /// Median (IQR) per structure.
    MedianIqr,
    /// `method,structure,n,mean,std,median,q1,q3`, one line per cell.
    Csv,
}

pub const CSV_HEADER: &str = "method,structure,n,mean,std,median,q1,q3";

/// "0.77 ± 0.04"
pub fn mean_std_cell(s: &DscStats) -> String {
    format!("{:.2} ± {:.2}", s.mean, s.std)
}

/// "0.97 (IQR: 0.97-0.98)"
pub fn median_iqr_cell(s: &DscStats) -> String {
    format!("{:.2} (IQR: {:.2}-{:.2})", s.median, s.q1, s.q3)
}

fn structures_of(row: &MethodRow) -> Vec<Structure> {
    row.stats.iter().map(|(s, _)| *s).collect()
}

/// Renders a table with one row per method and one column per structure in
/// label order.
pub fn emit_table(rows: &[MethodRow], format: TableFormat) -> Result<String> {
    let Some(first) = rows.first() else {
        return Err(Error::EmptyDataset("emit_table needs at least one method"));
    };
    let mut columns = structures_of(first);
    columns.sort();
    for row in rows {
        let mut s = structures_of(row);
        s.sort();
        if s != columns {
            return Err(Error::Invalid(format!(
                "method `{}` reports structures {s:?}, expected {columns:?}",
                row.method
            )));
        }
        if s.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Invalid(format!("method `{}` repeats a structure", row.method)));
        }
    }
    let cell = |row: &MethodRow, st: Structure| row.stats.iter().find(|(s, _)| *s == st).map(|(_, v)| *v).expect("checked");

    match format {
        TableFormat::Csv => {
            let mut out = format!("{CSV_HEADER}\n");
            for row in rows {
                for &st in &columns {
                    let s = cell(row, st);
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{},{}\n",
                        csv_field(&row.method),
                        st.name(),
                        s.n,
                        s.mean,
                        s.std,
                        s.median,
                        s.q1,
                        s.q3
                    ));
                }
            }
            Ok(out)
        }
        TableFormat::Text | TableFormat::MedianIqr => {
            let render = |s: &DscStats| if format == TableFormat::Text { mean_std_cell(s) } else { median_iqr_cell(s) };
            let mut grid = vec![std::iter::once("Method".to_string()).chain(columns.iter().map(|s| s.name().to_string())).collect::<Vec<_>>()];
            for row in rows {
                grid.push(std::iter::once(row.method.clone()).chain(columns.iter().map(|&st| render(&cell(row, st)))).collect());
            }
            let widths: Vec<usize> =
                (0..grid[0].len()).map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
            let line = |r: &[String]| {
                r.iter().zip(&widths).map(|(v, &w)| format!("{v:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
            };
            let note = if format == TableFormat::Text {
                "# DSC mean ± population standard deviation"
            } else {
                "# DSC median (IQR: 25th-75th percentile, linear interpolation)"
            };
            let mut out = format!("{note}\n{}\n", line(&grid[0]));
            out.push_str(&format!("{}\n", widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  ")));
            for r in &grid[1..] {
                out.push_str(&line(r));
                out.push('\n');
            }
            Ok(out)
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}

/// Parses the CSV form back into rows, keeping first-seen method order.
/// `min`/`max` are not stored and come back as `q1`/`q3`.
pub fn parse_csv(text: &str) -> Result<Vec<MethodRow>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::Invalid(format!("CSV must start with `{CSV_HEADER}`"))),
    }
    let mut rows: Vec<MethodRow> = Vec::new();
    for (no, line) in lines {
        let bad = |what: &str| Error::Invalid(format!("CSV line {}: {what}", no + 1));
        let f = split_csv_line(line);
        if f.len() != 8 {
            return Err(bad(&format!("expected 8 fields, found {}", f.len())));
        }
        let num = |i: usize| f[i].trim().parse::<f64>().map_err(|_| bad(&format!("`{}` is not a number", f[i])));
        let structure: Structure = f[1].parse()?;
        let n = f[2].trim().parse::<usize>().map_err(|_| bad("bad case count"))?;
        let (q1, q3) = (num(6)?, num(7)?);
        let stats = DscStats { n, mean: num(3)?, std: num(4)?, median: num(5)?, q1, q3, min: q1, max: q3 };
        match rows.iter_mut().find(|r| r.method == f[0]) {
            Some(r) => r.stats.push((structure, stats)),
            None => rows.push(MethodRow { method: f[0].clone(), stats: vec![(structure, stats)] }),
        }
    }
    Ok(rows)
}
