//! Run artifacts: loss curves and metrics as CSV/JSON plus aligned text
//! tables for the terminal. Floats are written with Rust's shortest
//! round-trip formatting, so parsing a file back recovers the exact values.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use crate::ensemble::EpochLosses;
use crate::metrics::MetricsReport;
use crate::{Error, Result};

/// `losses.csv`: one row per epoch, one column per branch.
pub fn write_losses_csv(path: &Path, epoch_losses: &[EpochLosses]) -> Result<()> {
    let mut names: BTreeSet<&str> = BTreeSet::new();
    for e in epoch_losses {
        names.extend(e.keys().map(String::as_str));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "epoch")?;
    for n in &names {
        write!(out, ",{n}")?;
    }
    writeln!(out)?;
    for (epoch, e) in epoch_losses.iter().enumerate() {
        write!(out, "{epoch}")?;
        for n in &names {
            match e.get(*n) {
                Some(v) => write!(out, ",{v}")?,
                None => write!(out, ",")?,
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Parse a file written by [`write_losses_csv`].
pub fn read_losses_csv(path: &Path) -> Result<Vec<EpochLosses>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, detail: "empty losses file".into() })?;
    let names: Vec<&str> = header.split(',').skip(1).collect();
    let mut out = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != names.len() + 1 {
            return Err(Error::Parse {
                line: idx + 1,
                detail: format!("expected {} fields, found {}", names.len() + 1, fields.len()),
            });
        }
        let mut losses = EpochLosses::new();
        for (name, field) in names.iter().zip(&fields[1..]) {
            if field.is_empty() {
                continue;
            }
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line: idx + 1,
                detail: format!("bad float `{field}`"),
            })?;
            losses.insert((*name).to_string(), v);
        }
        out.push(losses);
    }
    Ok(out)
}

/// `metrics.json`: the full report, pretty-printed.
pub fn write_metrics_json(path: &Path, report: &MetricsReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Parse { line: 0, detail: e.to_string() })?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_metrics_json(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { line: 0, detail: e.to_string() })
}

const METRIC_COLUMNS: [&str; 10] =
    ["threshold", "cap", "accuracy", "cgr", "cgw", "cgd", "n_rp", "n_wp", "n_rg_rp", "n_rg_wp"];

fn metric_fields(r: &MetricsReport) -> Vec<String> {
    vec![
        r.threshold.to_string(),
        r.cap.to_string(),
        r.accuracy.to_string(),
        r.cgr.to_string(),
        r.cgw.to_string(),
        r.cgd.to_string(),
        r.n_rp.to_string(),
        r.n_wp.to_string(),
        r.n_rg_rp.to_string(),
        r.n_rg_wp.to_string(),
    ]
}

/// CSV with one row per report (used by threshold sweeps).
pub fn write_metrics_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", METRIC_COLUMNS.join(","))?;
    for r in reports {
        writeln!(out, "{}", metric_fields(r).join(","))?;
    }
    Ok(())
}

/// Parse a file written by [`write_metrics_csv`]. Per-type accuracies are
/// not part of the CSV summary and come back empty; the degenerate-count
/// flag is reconstructed from the counts.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsReport>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, detail: "empty metrics file".into() })?;
    if header != METRIC_COLUMNS.join(",") {
        return Err(Error::Parse { line: 1, detail: format!("unexpected header `{header}`") });
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != METRIC_COLUMNS.len() {
            return Err(Error::Parse {
                line: idx + 1,
                detail: format!("expected {} fields, found {}", METRIC_COLUMNS.len(), f.len()),
            });
        }
        let bad = |detail: String| Error::Parse { line: idx + 1, detail };
        let float = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad float `{s}`")));
        let count = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad count `{s}`")));
        let (n_rp, n_wp) = (count(f[6])?, count(f[7])?);
        out.push(MetricsReport {
            threshold: float(f[0])?,
            cap: count(f[1])?,
            accuracy: float(f[2])?,
            cgr: float(f[3])?,
            cgw: float(f[4])?,
            cgd: float(f[5])?,
            n_rp,
            n_wp,
            n_rg_rp: count(f[8])?,
            n_rg_wp: count(f[9])?,
            per_type_accuracy: Default::default(),
            degenerate_counts: n_rp == 0 || n_wp == 0,
        });
    }
    Ok(out)
}

/// Text table with aligned columns, one row per labeled report.
pub fn format_metrics_table(rows: &[(String, MetricsReport)]) -> String {
    let mut header: Vec<String> = vec!["run".into()];
    header.extend(METRIC_COLUMNS.iter().map(|c| (*c).to_string()));
    let mut table: Vec<Vec<String>> = vec![header];
    for (label, r) in rows {
        let mut row = vec![label.clone()];
        row.extend(metric_fields(r).into_iter().map(|f| trim_float(&f)));
        table.push(row);
    }
    align(&table)
}

/// Shorten long float strings for display (files keep full precision).
fn trim_float(s: &str) -> String {
    match s.parse::<f64>() {
        Ok(v) if s.contains('.') => format!("{v:.4}"),
        _ => s.to_string(),
    }
}

fn align(table: &[Vec<String>]) -> String {
    let cols = table.iter().map(Vec::len).max().unwrap_or(0);
    let mut widths = vec![0usize; cols];
    for row in table {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    for row in table {
        let mut line = String::new();
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            line.push_str(&format!("{:>w$}", cell, w = widths[i]));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// Sample mean and standard deviation (std 0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregated result of one variant across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: usize,
    pub ood_accuracy: (f64, f64),
    pub id_accuracy: (f64, f64),
    pub cgd: (f64, f64),
}

/// Collapse per-seed `(ood accuracy, id accuracy, cgd)` triples.
pub fn ablation_row(variant: &str, per_seed: &[(f64, f64, f64)]) -> AblationRow {
    let col = |f: fn(&(f64, f64, f64)) -> f64| {
        let v: Vec<f64> = per_seed.iter().map(f).collect();
        mean_std(&v)
    };
    AblationRow {
        variant: variant.to_string(),
        seeds: per_seed.len(),
        ood_accuracy: col(|t| t.0),
        id_accuracy: col(|t| t.1),
        cgd: col(|t| t.2),
    }
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "variant,seeds,ood_mean,ood_std,id_mean,id_std,cgd_mean,cgd_std"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.variant,
            r.seeds,
            r.ood_accuracy.0,
            r.ood_accuracy.1,
            r.id_accuracy.0,
            r.id_accuracy.1,
            r.cgd.0,
            r.cgd.1
        )?;
    }
    Ok(())
}

/// Parse a file written by [`write_ablation_csv`].
pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::Parse {
                line: idx + 1,
                detail: format!("expected 8 fields, found {}", f.len()),
            });
        }
        let bad = |detail: String| Error::Parse { line: idx + 1, detail };
        let float = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad float `{s}`")));
        out.push(AblationRow {
            variant: f[0].to_string(),
            seeds: f[1].parse().map_err(|_| bad(format!("bad count `{}`", f[1])))?,
            ood_accuracy: (float(f[2])?, float(f[3])?),
            id_accuracy: (float(f[4])?, float(f[5])?),
            cgd: (float(f[6])?, float(f[7])?),
        });
    }
    Ok(out)
}

pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let fmt = |(m, s): (f64, f64)| format!("{m:.4} +/- {s:.4}");
    let mut table = vec![vec![
        "variant".to_string(),
        "seeds".to_string(),
        "ood accuracy".to_string(),
        "id accuracy".to_string(),
        "cgd".to_string(),
    ]];
    for r in rows {
        table.push(vec![
            r.variant.clone(),
            r.seeds.to_string(),
            fmt(r.ood_accuracy),
            fmt(r.id_accuracy),
            fmt(r.cgd),
        ]);
    }
    align(&table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn report(acc: f64) -> MetricsReport {
        MetricsReport {
            accuracy: acc,
            per_type_accuracy: BTreeMap::from([(0, acc)]),
            cgr: 50.0,
            cgw: 20.0,
            cgd: 30.0,
            n_rp: 2,
            n_wp: 5,
            n_rg_rp: 1,
            n_rg_wp: 1,
            threshold: 0.2,
            cap: 4,
            degenerate_counts: false,
        }
    }

    #[test]
    fn losses_csv_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("losses.csv");
        let losses = vec![
            BTreeMap::from([("base".to_string(), 0.1 + 0.2), ("shortcut".to_string(), 1.0 / 3.0)]),
            BTreeMap::from([("base".to_string(), 1e-17)]),
        ];
        write_losses_csv(&path, &losses).unwrap();
        let back = read_losses_csv(&path).unwrap();
        assert_eq!(back, losses);
    }

    #[test]
    fn losses_csv_reports_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "epoch,base\n0,0.5\n1,zebra\n").unwrap();
        match read_losses_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn metrics_json_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.json");
        let r = report(0.123456789012345678);
        write_metrics_json(&path, &r).unwrap();
        assert_eq!(read_metrics_json(&path).unwrap(), r);
    }

    #[test]
    fn metrics_csv_has_one_row_per_report() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        write_metrics_csv(&path, &[report(0.5), report(0.6)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("threshold,cap,accuracy"));
        assert!(lines[1].starts_with("0.2,4,0.5,"));
    }

    #[test]
    fn tables_are_column_aligned() {
        let text = format_metrics_table(&[
            ("baseline".to_string(), report(0.5)),
            ("gge-dq".to_string(), report(0.625)),
        ]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let col = lines[0].find("accuracy").unwrap();
        assert_eq!(&lines[1][col + 4..col + 8], "5000".to_string());
    }

    #[test]
    fn mean_std_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-15);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
        assert_eq!(mean_std(&[]), (0.0, 0.0));
    }

    #[test]
    fn ablation_rows_aggregate_per_seed_triples() {
        let row = ablation_row("gge-dq", &[(0.25, 0.75, 30.0), (0.75, 0.875, 40.0)]);
        assert_eq!(row.seeds, 2);
        assert!((row.ood_accuracy.0 - 0.5).abs() < 1e-15);
        assert!((row.cgd.0 - 35.0).abs() < 1e-15);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ablation.csv");
        write_ablation_csv(&path, &[row.clone()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("gge-dq,2,0.5,"));
        let table = format_ablation_table(&[row]);
        assert!(table.contains("+/-"));
    }

    #[test]
    fn metrics_csv_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        let mut a = report(0.123456789012345);
        a.per_type_accuracy = Default::default();
        let mut b = report(0.6);
        b.per_type_accuracy = Default::default();
        write_metrics_csv(&path, &[a.clone(), b.clone()]).unwrap();
        let back = read_metrics_csv(&path).unwrap();
        assert_eq!(back, vec![a, b]);
        // parse errors carry the offending line number
        std::fs::write(&path, "threshold,cap,accuracy,cgr,cgw,cgd,n_rp,n_wp,n_rg_rp,n_rg_wp\n1,2,x,0,0,0,0,0,0,0\n").unwrap();
        assert!(matches!(read_metrics_csv(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn ablation_csv_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ablation.csv");
        let rows = vec![
            ablation_row("baseline", &[(0.25, 0.75, 30.0), (0.75, 0.875, 40.0)]),
            ablation_row("gge-dq", &[(0.5, 0.5, 10.0)]),
        ];
        write_ablation_csv(&path, &rows).unwrap();
        assert_eq!(read_ablation_csv(&path).unwrap(), rows);
    }
}
