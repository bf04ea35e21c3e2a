//! Report emission: results JSON, text table and the three CSV exports.
//!
//! Numbers in CSVs use `{:.16e}` (17 significant digits), which round-trips
//! every f64 exactly. Undefined values (empty bins) are empty fields.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use segcal::metrics::{subject_bin_distribution, ReliabilityBins};
use serde::{Deserialize, Serialize};

use crate::experiment::ResultsTable;

pub const RESULTS_FILE: &str = "results.json";
pub const TABLE_FILE: &str = "table.txt";
pub const SCATTER_FILE: &str = "scatter.csv";

pub const RELIABILITY_HEADER: [&str; 6] = ["bin_low", "bin_high", "count", "mean_conf", "mean_acc", "subject_acc_std"];
pub const SCATTER_HEADER: [&str; 4] = ["regime", "method", "mean_dice", "mean_ece"];
pub const VIOLIN_HEADER: [&str; 4] = ["bin_index", "subject_id", "accuracy", "count"];

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn parse_opt(s: &str) -> anyhow::Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        Ok(Some(s.parse().with_context(|| format!("bad number {s:?}"))?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: u64,
    pub mean_conf: Option<f64>,
    pub mean_acc: Option<f64>,
    /// Spread of per-subject accuracies among subjects with enough voxels in the bin.
    pub subject_acc_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub regime: String,
    pub method: String,
    pub mean_dice: f64,
    pub mean_ece: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViolinRow {
    pub bin_index: usize,
    pub subject_id: String,
    pub accuracy: f64,
    pub count: u64,
}

pub fn reliability_rows(bins: &ReliabilityBins, min_bin_count: u64) -> Vec<ReliabilityRow> {
    let dist = subject_bin_distribution(bins, min_bin_count);
    (0..bins.k)
        .map(|b| {
            let (lo, hi) = bins.edges(b);
            ReliabilityRow {
                bin_low: lo,
                bin_high: hi,
                count: bins.counts[b],
                mean_conf: bins.mean_confidence(b),
                mean_acc: bins.accuracy(b),
                subject_acc_std: dist[b].summary.as_ref().map(|s| s.std),
            }
        })
        .collect()
}

/// ECE recomputed from reliability rows alone.
pub fn ece_from_rows(rows: &[ReliabilityRow]) -> f64 {
    let n: u64 = rows.iter().map(|r| r.count).sum();
    if n == 0 {
        return 0.0;
    }
    rows.iter()
        .filter_map(|r| Some(r.count as f64 * (r.mean_acc? - r.mean_conf?).abs()))
        .sum::<f64>()
        / n as f64
}

pub fn violin_rows(bins: &ReliabilityBins, min_bin_count: u64) -> Vec<ViolinRow> {
    subject_bin_distribution(bins, min_bin_count)
        .into_iter()
        .flat_map(|d| {
            d.subjects.into_iter().map(move |s| ViolinRow {
                bin_index: d.bin,
                subject_id: s.id,
                accuracy: s.accuracy,
                count: s.count,
            })
        })
        .collect()
}

pub fn scatter_rows(table: &ResultsTable) -> Vec<ScatterRow> {
    table
        .cells
        .iter()
        .filter_map(|c| {
            let m = c.metrics.as_ref()?;
            Some(ScatterRow {
                regime: c.regime.name().to_string(),
                method: c.method.name().to_string(),
                mean_dice: m.mean_dice,
                mean_ece: m.mean_ece,
            })
        })
        .collect()
}

fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_records(path: &Path, header: &[&str]) -> anyhow::Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let got: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if got != header {
        anyhow::bail!("{}: header {got:?}, expected {header:?}", path.display());
    }
    r.records()
        .collect::<Result<_, _>>()
        .with_context(|| format!("malformed CSV {}", path.display()))
}

pub fn write_reliability_csv(path: &Path, rows: &[ReliabilityRow]) -> anyhow::Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(RELIABILITY_HEADER)?;
    for r in rows {
        w.write_record([
            fmt_f64(r.bin_low),
            fmt_f64(r.bin_high),
            r.count.to_string(),
            fmt_opt(r.mean_conf),
            fmt_opt(r.mean_acc),
            fmt_opt(r.subject_acc_std),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reliability_csv(path: &Path) -> anyhow::Result<Vec<ReliabilityRow>> {
    csv_records(path, &RELIABILITY_HEADER)?
        .iter()
        .map(|r| {
            Ok(ReliabilityRow {
                bin_low: r[0].parse()?,
                bin_high: r[1].parse()?,
                count: r[2].parse()?,
                mean_conf: parse_opt(&r[3])?,
                mean_acc: parse_opt(&r[4])?,
                subject_acc_std: parse_opt(&r[5])?,
            })
        })
        .collect()
}

pub fn write_scatter_csv(path: &Path, rows: &[ScatterRow]) -> anyhow::Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(SCATTER_HEADER)?;
    for r in rows {
        w.write_record([r.regime.clone(), r.method.clone(), fmt_f64(r.mean_dice), fmt_f64(r.mean_ece)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scatter_csv(path: &Path) -> anyhow::Result<Vec<ScatterRow>> {
    csv_records(path, &SCATTER_HEADER)?
        .iter()
        .map(|r| {
            Ok(ScatterRow {
                regime: r[0].to_string(),
                method: r[1].to_string(),
                mean_dice: r[2].parse()?,
                mean_ece: r[3].parse()?,
            })
        })
        .collect()
}

pub fn write_violin_csv(path: &Path, rows: &[ViolinRow]) -> anyhow::Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(VIOLIN_HEADER)?;
    for r in rows {
        w.write_record([
            r.bin_index.to_string(),
            r.subject_id.clone(),
            fmt_f64(r.accuracy),
            r.count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_violin_csv(path: &Path) -> anyhow::Result<Vec<ViolinRow>> {
    csv_records(path, &VIOLIN_HEADER)?
        .iter()
        .map(|r| {
            Ok(ViolinRow {
                bin_index: r[0].parse()?,
                subject_id: r[1].to_string(),
                accuracy: r[2].parse()?,
                count: r[3].parse()?,
            })
        })
        .collect()
}

pub fn reliability_path(dir: &Path, regime: &str, method: &str) -> PathBuf {
    dir.join(format!("reliability_{regime}_{method}.csv"))
}

pub fn violin_path(dir: &Path, regime: &str, method: &str) -> PathBuf {
    dir.join(format!("violin_{regime}_{method}.csv"))
}

/// Fixed-width table: methods as rows, one Dice / ECE% column pair per regime.
/// `*` marks the best value and those not significantly different from it.
pub fn render_table(table: &ResultsTable) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<12}", "method");
    for r in &table.regimes {
        let _ = write!(out, " | {:^19}", r.name());
    }
    out.push('\n');
    let _ = write!(out, "{:<12}", "");
    for _ in &table.regimes {
        let _ = write!(out, " | {:>9} {:>9}", "Dice", "ECE%");
    }
    out.push('\n');
    for &m in &table.methods {
        let _ = write!(out, "{:<12}", m.name());
        for &r in &table.regimes {
            match table.metrics(r, m) {
                Some(c) => {
                    let dice = format!("{:.4}{}", c.mean_dice, if c.best_dice { "*" } else { " " });
                    let ece = format!("{:.3}{}", 100.0 * c.mean_ece, if c.best_ece { "*" } else { " " });
                    let _ = write!(out, " | {dice:>9} {ece:>9}");
                }
                None => {
                    let _ = write!(out, " | {:>19}", "failed");
                }
            }
        }
        out.push('\n');
    }
    for c in &table.cells {
        if let Some(e) = &c.error {
            let _ = writeln!(out, "{}/{}: {e}", c.regime, c.method);
        }
    }
    out
}

pub fn write_results_json(path: &Path, table: &ResultsTable) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(table)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_results_json(path: &Path) -> anyhow::Result<ResultsTable> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not a results file", path.display()))
}

/// Writes results.json, table.txt, scatter.csv and per-cell reliability and violin CSVs.
pub fn write_reports(dir: &Path, table: &ResultsTable) -> anyhow::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut written = vec![dir.join(RESULTS_FILE), dir.join(TABLE_FILE), dir.join(SCATTER_FILE)];
    write_results_json(&written[0], table)?;
    fs::write(&written[1], render_table(table)).with_context(|| format!("cannot write {}", written[1].display()))?;
    write_scatter_csv(&written[2], &scatter_rows(table))?;
    for c in &table.cells {
        let Some(m) = &c.metrics else { continue };
        let (r, me) = (c.regime.name(), c.method.name());
        let rel = reliability_path(dir, r, me);
        write_reliability_csv(&rel, &reliability_rows(&m.bins, table.min_bin_count))?;
        let vio = violin_path(dir, r, me);
        write_violin_csv(&vio, &violin_rows(&m.bins, table.min_bin_count))?;
        written.extend([rel, vio]);
    }
    Ok(written)
}
