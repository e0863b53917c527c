//! Cross-run report: metric tables, a delta table and SVG line charts.
//!
//! Metrics files are checked against their own header: the first column must
//! be `seq`, every row must have the header's width, and every column outside
//! [`TEXT_COLUMNS`] must parse as a number. Rows that fail are skipped and
//! counted.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::metrics::SEQ_COLUMN;
use crate::pipeline::{create_run_dir, PipelineError, Stage, StageReport, CONFIG_SNAPSHOT, METRICS, RUN_INFO, SUMMARY};

/// Columns that hold labels rather than numbers.
pub const TEXT_COLUMNS: [&str; 5] = ["scenario", "kind", "name", "status", "when"];

pub const RUNS_TABLE: &str = "runs.csv";
pub const DELTA_TABLE: &str = "delta.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// Rows dropped for not matching the header schema.
    pub skipped: usize,
}

impl MetricsTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Values of a numeric column, one per valid row.
    pub fn numbers(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.column(name)?;
        if TEXT_COLUMNS.contains(&name) {
            return None;
        }
        Some(self.rows.iter().map(|r| r[c].parse().expect("validated on read")).collect())
    }
}

/// Parses a metrics file. Malformed rows are skipped; a missing or malformed
/// header is an error.
pub fn read_metrics(path: &Path) -> Result<MetricsTable, String> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    let mut records = rdr.records();
    let header: Vec<String> = match records.next() {
        Some(Ok(h)) => h.iter().map(str::to_string).collect(),
        _ => return Err(format!("{}: no header", path.display())),
    };
    if header.first().map(String::as_str) != Some(SEQ_COLUMN) {
        return Err(format!("{}: header does not start with `{SEQ_COLUMN}`", path.display()));
    }
    let numeric: Vec<bool> = header.iter().map(|h| !TEXT_COLUMNS.contains(&h.as_str())).collect();
    let mut t = MetricsTable { header, rows: Vec::new(), skipped: 0 };
    for rec in records {
        let ok = rec.ok().and_then(|r| {
            let row: Vec<String> = r.iter().map(str::to_string).collect();
            let valid = row.len() == t.header.len()
                && row[0].parse::<u64>().is_ok()
                && row.iter().zip(&numeric).all(|(v, &num)| !num || v.parse::<f64>().is_ok());
            valid.then_some(row)
        });
        match ok {
            Some(row) => t.rows.push(row),
            None => t.skipped += 1,
        }
    }
    Ok(t)
}

/// One run directory as seen by the report.
#[derive(Debug, Clone)]
pub struct RunEntry {
    pub id: String,
    pub stage: String,
    pub created: u64,
    pub metrics: Option<MetricsTable>,
    pub summary: Option<MetricsTable>,
}

impl RunEntry {
    pub fn load(dir: &Path) -> Result<Self, String> {
        let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let info: toml::Table = fs::read_to_string(dir.join(RUN_INFO))
            .ok()
            .and_then(|t| toml::from_str(&t).ok())
            .unwrap_or_default();
        let stage = info
            .get("stage")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .unwrap_or_else(|| id.split('-').next().unwrap_or_default().to_string());
        let created = info.get("created_unix").and_then(|v| v.as_integer()).unwrap_or(0).max(0) as u64;
        let opt = |name: &str| -> Result<Option<MetricsTable>, String> {
            let p = dir.join(name);
            if p.is_file() {
                read_metrics(&p).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(Self { metrics: opt(METRICS)?, summary: opt(SUMMARY)?, id, stage, created })
    }

    /// Final value of every numeric metric column plus the evaluation summary.
    pub fn final_values(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        if let Some(m) = &self.metrics {
            for h in m.header.iter().skip(1) {
                if let Some(v) = m.numbers(h).and_then(|v| v.last().copied()) {
                    out.insert(format!("final_{h}"), v);
                }
            }
        }
        if let Some(s) = &self.summary {
            for h in s.header.iter().skip(1) {
                if let Some(v) = s.numbers(h).and_then(|v| v.first().copied()) {
                    out.insert(h.clone(), v);
                }
            }
        }
        out
    }

    pub fn skipped(&self) -> usize {
        self.metrics.as_ref().map_or(0, |m| m.skipped) + self.summary.as_ref().map_or(0, |m| m.skipped)
    }
}

/// Run directories (those holding a config snapshot) among `inputs` and their
/// immediate children, oldest first. Report runs are left out.
pub fn discover_runs(inputs: &[PathBuf]) -> Vec<PathBuf> {
    let mut found = Vec::new();
    for p in inputs {
        if p.join(CONFIG_SNAPSHOT).is_file() {
            found.push(p.clone());
        } else if let Ok(rd) = fs::read_dir(p) {
            let mut kids: Vec<PathBuf> =
                rd.flatten().map(|e| e.path()).filter(|k| k.join(CONFIG_SNAPSHOT).is_file()).collect();
            kids.sort();
            found.extend(kids);
        }
    }
    found
}

/// For every metric shared with the first run: `run,metric,baseline,value,delta`.
pub fn delta_table(runs: &[(String, BTreeMap<String, f64>)]) -> String {
    let mut s = String::from("run,metric,baseline,value,delta\n");
    let Some((_, base)) = runs.first() else { return s };
    for (name, vals) in &runs[1..] {
        for (k, b) in base {
            if let Some(v) = vals.get(k) {
                let _ = writeln!(s, "{name},{k},{b},{v},{}", v - b);
            }
        }
    }
    s
}

const PALETTE: [&str; 6] = ["#4878a8", "#d0743c", "#6a9f58", "#a83232", "#8a63a8", "#6b6b6b"];

/// Line chart of one or more series against `x`, each scaled to a shared y range.
pub fn svg_line_chart(title: &str, x: &[f64], series: &[(&str, Vec<f64>)]) -> String {
    let (w, h, left, top, bottom) = (560.0, 300.0, 60.0, 30.0, 40.0);
    let pw = w - left - 20.0;
    let ph = h - top - bottom;
    let finite = |v: &&f64| v.is_finite();
    let xs = (x.iter().filter(finite).cloned().fold(f64::INFINITY, f64::min), x.iter().filter(finite).cloned().fold(f64::NEG_INFINITY, f64::max));
    let all = series.iter().flat_map(|(_, v)| v.iter());
    let ys = all.clone().filter(finite).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let span = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else if lo.is_finite() { (lo - 1.0, lo + 1.0) } else { (0.0, 1.0) };
    let (x0, x1) = span(xs);
    let (y0, y1) = span(ys);
    let px = |v: f64| left + pw * (v - x0) / (x1 - x0);
    let py = |v: f64| top + ph * (1.0 - (v - y0) / (y1 - y0));
    let esc = |t: &str| t.replace('&', "&amp;").replace('<', "&lt;");
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{left}" y="18" font-size="13">{}</text>"#, esc(title));
    let _ = writeln!(s, r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#999"/>"##);
    let _ = writeln!(s, r#"<text x="4" y="{}">{y1:.4}</text>"#, top + 10.0);
    let _ = writeln!(s, r#"<text x="4" y="{}">{y0:.4}</text>"#, top + ph);
    let _ = writeln!(s, r#"<text x="{left}" y="{}">{x0}</text>"#, h - 20.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{x1}</text>"#, left + pw, h - 20.0);
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = x
            .iter()
            .zip(ys)
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .map(|(a, b)| format!("{:.2},{:.2}", px(*a), py(*b)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{color}">{}</text>"#, left + 8.0 + 110.0 * k as f64, h - 6.0, esc(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Charts written for a run: the loss curve, and reward curves for RL runs.
pub fn run_charts(run: &RunEntry) -> Vec<(String, String)> {
    let Some(m) = &run.metrics else { return Vec::new() };
    let x: Vec<f64> = m.numbers(SEQ_COLUMN).unwrap_or_default();
    let mut out = Vec::new();
    if let Some(loss) = m.numbers("loss") {
        out.push((format!("{}_loss.svg", run.id), svg_line_chart(&format!("{} loss", run.id), &x, &[("loss", loss)])));
    }
    let rewards: Vec<(&str, Vec<f64>)> =
        ["global", "mean_vehicle", "diversity"].iter().filter_map(|c| m.numbers(c).map(|v| (*c, v))).collect();
    if !rewards.is_empty() {
        out.push((format!("{}_reward.svg", run.id), svg_line_chart(&format!("{} rewards", run.id), &x, &rewards)));
    }
    out
}

/// Reads every run under `inputs` (default: the output root) and writes tables
/// and charts into a new report run directory.
pub fn report_stage(cfg: &RunConfig, out: &Path, inputs: &[PathBuf]) -> Result<StageReport, PipelineError> {
    let roots = if inputs.is_empty() { vec![out.to_path_buf()] } else { inputs.to_vec() };
    let mut warnings = Vec::new();
    let mut runs = Vec::new();
    for dir in discover_runs(&roots) {
        match RunEntry::load(&dir) {
            Ok(r) if r.stage == Stage::Report.name() => {}
            Ok(r) => runs.push(r),
            Err(e) => warnings.push(format!("skipping run: {e}")),
        }
    }
    runs.sort_by(|a, b| (a.created, &a.id).cmp(&(b.created, &b.id)));
    let skipped: usize = runs.iter().map(RunEntry::skipped).sum();
    if skipped > 0 {
        warnings.push(format!("{skipped} malformed metrics rows skipped"));
    }
    if runs.is_empty() {
        warnings.push(format!("no runs found under {}", roots.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")));
    }

    let report = create_run_dir(out, Stage::Report, cfg, BTreeMap::new())?;
    let io = |name: &str| {
        let name = name.to_string();
        move |source| PipelineError::Io { context: format!("writing {name}"), source }
    };
    let mut table = String::from("run,stage,rows,skipped_rows,final_loss,success_rate,score_mean\n");
    let mut finals = Vec::new();
    let mut charts = 0;
    for r in &runs {
        let vals = r.final_values();
        let cell = |k: &str| vals.get(k).map(|v| v.to_string()).unwrap_or_default();
        let rows = r.metrics.as_ref().or(r.summary.as_ref()).map_or(0, |m| m.rows.len());
        let _ = writeln!(
            table,
            "{},{},{rows},{},{},{},{}",
            r.id,
            r.stage,
            r.skipped(),
            cell("final_loss"),
            cell("success_rate"),
            cell("score_mean")
        );
        for (name, svg) in run_charts(r) {
            fs::write(report.path.join(&name), svg).map_err(io(&name))?;
            charts += 1;
        }
        finals.push((r.id.clone(), vals));
    }
    fs::write(report.path.join(RUNS_TABLE), table).map_err(io(RUNS_TABLE))?;
    if finals.len() >= 2 {
        fs::write(report.path.join(DELTA_TABLE), delta_table(&finals)).map_err(io(DELTA_TABLE))?;
    }
    Ok(StageReport {
        dir: report.path,
        lines: vec![format!("{} runs, {charts} charts", runs.len())],
        warnings,
    })
}
