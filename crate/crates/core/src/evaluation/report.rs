use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::metrics::fold_mean;
use super::MetricReport;
use crate::data::DatasetDescriptor;
use crate::error::{Error, Result};

/// What produced a set of reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// The effective configuration after flag overrides.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub checkpoints: Vec<PathBuf>,
    pub dataset: Option<DatasetDescriptor>,
    pub code_version: String,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.into(),
            config,
            seeds: Vec::new(),
            checkpoints: Vec::new(),
            dataset: None,
            code_version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).into(),
            started_unix_s: unix_now(),
            finished_unix_s: 0,
        }
    }

    pub fn finish(&mut self) {
        self.finished_unix_s = unix_now();
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Class-IoU averaged over folds for one `(mode, k, L, M)` setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub mode: String,
    pub k: usize,
    #[serde(rename = "L")]
    pub samples_l: usize,
    #[serde(rename = "M")]
    pub samples_m: usize,
    pub folds: Vec<usize>,
    pub class_mean_iou: f64,
}

/// Groups reports by setting and averages their Class-IoU across folds.
/// Reports repeated for one fold (several seeds) are averaged first.
pub fn fold_summary(reports: &[MetricReport]) -> Result<Vec<FoldSummary>> {
    type Key = (String, usize, usize, usize);
    let mut groups: BTreeMap<Key, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in reports {
        groups
            .entry((r.mode.clone(), r.k, r.samples_l, r.samples_m))
            .or_default()
            .entry(r.fold)
            .or_default()
            .push(r.class_mean_iou);
    }
    groups
        .into_iter()
        .map(|((mode, k, l, m), folds)| {
            let per_fold = folds.values().map(|v| fold_mean(v)).collect::<Result<Vec<_>>>()?;
            Ok(FoldSummary {
                mode,
                k,
                samples_l: l,
                samples_m: m,
                folds: folds.keys().copied().collect(),
                class_mean_iou: fold_mean(&per_fold)?,
            })
        })
        .collect()
}

const CSV_HEADER: &str = "mode,fold,k,L,M,episodes,class_mean_iou,binary_iou,positive_iou,seed";

fn csv(reports: &[MetricReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.mode,
            r.fold,
            r.k,
            r.samples_l,
            r.samples_m,
            r.episodes,
            r.class_mean_iou,
            r.binary_iou,
            r.positive_iou,
            r.seed
        );
    }
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart of Class-IoU against `L (= M)`, one polyline per
/// `(fold, k, seed)` group of `sweep` reports.
pub fn sweep_svg(reports: &[MetricReport]) -> String {
    let mut series: BTreeMap<(usize, usize, u64), Vec<(f64, f64)>> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.mode == "sweep") {
        series
            .entry((r.fold, r.k, r.seed))
            .or_default()
            .push((r.samples_l as f64, r.class_mean_iou));
    }
    let xs = series.values().flatten().map(|p| p.0);
    let x_max = xs.fold(1.0f64, f64::max).max(2.0);
    let (left, right, top, bottom) = (80.0, 760.0, 40.0, 540.0);
    let sx = |x: f64| left + (x - 1.0) / (x_max - 1.0) * (right - left);
    let sy = |y: f64| bottom - y.clamp(0.0, 1.0) * (bottom - top);

    let mut s = String::new();
    s.push_str(r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 800 600" width="800" height="600">"#);
    s.push('\n');
    s.push_str(r#"<rect x="0" y="0" width="800" height="600" fill="white"/>"#);
    s.push('\n');
    let _ = writeln!(
        s,
        r#"<path d="M {left} {top} L {left} {bottom} L {right} {bottom}" stroke="black" fill="none"/>"#
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let y = sy(v);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="end">{v:.1}</text>"#,
            left - 8.0,
            y + 4.0
        );
    }
    let mut ticks: Vec<f64> = series.values().flatten().map(|p| p.0).collect();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for t in ticks {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{t}</text>"#,
            sx(t),
            bottom + 20.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="420" y="585" font-size="14" text-anchor="middle">L = M</text>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="290" font-size="14" text-anchor="middle" transform="rotate(-90 20 290)">Class-IoU</text>"#
    );
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    for (i, ((fold, k, seed), mut pts)) in series.into_iter().enumerate() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let points: Vec<String> = pts
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        let label = escape(&format!("fold {fold}, {k}-shot, seed {seed}"));
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"><title>{label}</title></polyline>"#,
            points.join(" "),
            palette[i % palette.len()]
        );
    }
    s.push_str("</svg>\n");
    s
}

fn write(dir: &Path, name: &str, contents: &[u8]) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `metrics.json`, `metrics.csv`, `manifest.json` and `sweep.svg`.
pub fn emit_report(reports: &[MetricReport], manifest: &RunManifest, out_dir: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to emit".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write(out_dir, "metrics.json", &serde_json::to_vec_pretty(reports)?)?;
    write(out_dir, "metrics.csv", csv(reports).as_bytes())?;
    write(out_dir, "manifest.json", &serde_json::to_vec_pretty(manifest)?)?;
    write(out_dir, "sweep.svg", sweep_svg(reports).as_bytes())
}
