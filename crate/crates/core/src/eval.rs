//! Point matching, recall/precision, and multi-run reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postproc::{Metric, PointSet};
use crate::scene::SourceList;

pub const DEFAULT_MATCH_THRESHOLD: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub gt: usize,
    pub pred: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    pub pairs: Vec<Pair>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
    pub threshold: f64,
}

impl Matching {
    pub fn tp(&self) -> usize {
        self.pairs.len()
    }
}

/// Greedy globally-closest matching: all pairs within `threshold`, ascending
/// by distance (ties by gt index, then pred index), each accepted when both
/// ends are still free.
pub fn match_points(gt: &SourceList, pred: &PointSet, threshold: f64, metric: Metric) -> Result<Matching> {
    if !(threshold > 0.0) {
        return Err(Error::Range(format!("matching threshold {threshold} must be positive")));
    }
    let mut cand = Vec::new();
    for (i, s) in gt.iter().enumerate() {
        for (j, p) in pred.iter().enumerate() {
            let d = metric.distance((s.x, s.y, s.z), (p.x, p.y, p.z));
            if d <= threshold {
                cand.push(Pair { gt: i, pred: j, distance: d });
            }
        }
    }
    cand.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.gt.cmp(&b.gt))
            .then(a.pred.cmp(&b.pred))
    });
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut pairs = Vec::new();
    for c in cand {
        if !gt_used[c.gt] && !pred_used[c.pred] {
            gt_used[c.gt] = true;
            pred_used[c.pred] = true;
            pairs.push(c);
        }
    }
    let free = |used: &[bool]| used.iter().enumerate().filter(|(_, u)| !**u).map(|(i, _)| i).collect();
    Ok(Matching {
        unmatched_gt: free(&gt_used),
        unmatched_pred: free(&pred_used),
        pairs,
        threshold,
    })
}

/// Set when a ratio had an empty denominator and took its conventional value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    /// No predictions: precision reported as 0 (or 1 if there was nothing to find).
    NoPredictions,
    /// No ground truth: recall reported as 1.
    NoGroundTruth,
}

impl Flag {
    fn as_str(self) -> &'static str {
        match self {
            Flag::NoPredictions => "no_predictions",
            Flag::NoGroundTruth => "no_ground_truth",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recall: f64,
    pub precision: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub density: usize,
    pub method: String,
    pub noise_model: String,
    pub noise_level: f64,
    pub threshold: f64,
    pub flags: Vec<Flag>,
}

impl Metrics {
    /// Attach the run descriptors used for grouping.
    pub fn labeled(mut self, method: &str, noise_model: &str, noise_level: f64) -> Self {
        self.method = method.to_string();
        self.noise_model = noise_model.to_string();
        self.noise_level = noise_level;
        self
    }
}

/// Recall `tp/(tp+fn)` and precision `tp/(tp+fp)`.
///
/// With no predictions precision is 0, or 1 when there was also no ground
/// truth; with no ground truth recall is 1. Either case is flagged.
pub fn precision_recall(m: &Matching, n_gt: usize, n_pred: usize) -> Result<Metrics> {
    let tp = m.tp();
    if tp > n_gt || tp > n_pred || m.unmatched_gt.len() != n_gt - tp || m.unmatched_pred.len() != n_pred - tp {
        return Err(Error::Schema(format!(
            "counts (gt {n_gt}, pred {n_pred}) disagree with a matching of {tp} pairs"
        )));
    }
    let (fp, fn_) = (n_pred - tp, n_gt - tp);
    let mut flags = Vec::new();
    let recall = if n_gt == 0 {
        flags.push(Flag::NoGroundTruth);
        1.0
    } else {
        tp as f64 / n_gt as f64
    };
    let precision = if n_pred == 0 {
        flags.push(Flag::NoPredictions);
        if n_gt == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / n_pred as f64
    };
    Ok(Metrics {
        recall,
        precision,
        tp,
        fp,
        fn_,
        density: n_gt,
        method: String::new(),
        noise_model: String::new(),
        noise_level: 0.0,
        threshold: m.threshold,
        flags,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Method,
    Density,
    NoiseModel,
    NoiseLevel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    /// Empty on the average row and when a group mixes densities.
    pub density: Option<usize>,
    pub noise_model: String,
    pub noise_level: Option<f64>,
    pub n_images: usize,
    pub recall_mean: f64,
    pub precision_mean: f64,
    pub threshold: f64,
    pub flags: Vec<Flag>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub group_by: Vec<GroupKey>,
    pub rows: Vec<ReportRow>,
    pub average: ReportRow,
}

fn summarize(label: Option<&str>, runs: &[&Metrics]) -> ReportRow {
    let n = runs.len() as f64;
    let same_str = |f: fn(&Metrics) -> &str| {
        let first = f(runs[0]);
        if runs.iter().all(|r| f(r) == first) {
            first.to_string()
        } else {
            "mixed".to_string()
        }
    };
    let density = runs.iter().all(|r| r.density == runs[0].density).then_some(runs[0].density);
    let level = runs
        .iter()
        .all(|r| r.noise_level == runs[0].noise_level)
        .then_some(runs[0].noise_level);
    let mut flags: Vec<Flag> = runs.iter().flat_map(|r| r.flags.iter().copied()).collect();
    flags.sort();
    flags.dedup();
    ReportRow {
        method: label.map(str::to_string).unwrap_or_else(|| same_str(|m| &m.method)),
        density: if label.is_some() { None } else { density },
        noise_model: same_str(|m| &m.noise_model),
        noise_level: if label.is_some() { None } else { level },
        n_images: runs.len(),
        recall_mean: runs.iter().map(|r| r.recall).sum::<f64>() / n,
        precision_mean: runs.iter().map(|r| r.precision).sum::<f64>() / n,
        threshold: runs[0].threshold,
        flags,
    }
}

#[derive(Clone, Debug, PartialEq)]
enum KeyPart {
    Text(String),
    Count(usize),
    Level(f64),
}

impl Eq for KeyPart {}

impl PartialOrd for KeyPart {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for KeyPart {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        use KeyPart::*;
        match (self, other) {
            (Text(a), Text(b)) => a.cmp(b),
            (Count(a), Count(b)) => a.cmp(b),
            (Level(a), Level(b)) => a.total_cmp(b),
            _ => std::cmp::Ordering::Equal,
        }
    }
}

/// Mean recall and precision per group, plus an overall average row.
pub fn aggregate_report(runs: &[Metrics], group_by: &[GroupKey]) -> Result<Report> {
    if runs.is_empty() {
        return Err(Error::Schema("cannot aggregate an empty set of runs".into()));
    }
    let mut keys = group_by.to_vec();
    keys.sort();
    keys.dedup();
    if keys.len() != group_by.len() {
        return Err(Error::Schema("duplicate group key".into()));
    }
    if let Some(r) = runs.iter().find(|r| r.threshold != runs[0].threshold) {
        return Err(Error::Schema(format!(
            "runs use different matching thresholds ({} and {})",
            runs[0].threshold, r.threshold
        )));
    }
    let mut groups: BTreeMap<Vec<KeyPart>, Vec<&Metrics>> = BTreeMap::new();
    for r in runs {
        let key = group_by
            .iter()
            .map(|k| match k {
                GroupKey::Method => KeyPart::Text(r.method.clone()),
                GroupKey::Density => KeyPart::Count(r.density),
                GroupKey::NoiseModel => KeyPart::Text(r.noise_model.clone()),
                GroupKey::NoiseLevel => KeyPart::Level(r.noise_level),
            })
            .collect();
        groups.entry(key).or_default().push(r);
    }
    let rows = groups.values().map(|g| summarize(None, g)).collect();
    let all: Vec<&Metrics> = runs.iter().collect();
    Ok(Report {
        group_by: group_by.to_vec(),
        rows,
        average: summarize(Some("Average"), &all),
    })
}

pub const CSV_HEADER: &str =
    "method,density,noise_model,noise_level,n_images,recall_mean,precision_mean,threshold,flags";

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in self.rows.iter().chain(std::iter::once(&self.average)) {
            let flags: Vec<&str> = row.flags.iter().map(|f| f.as_str()).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6},{:.6},{},{}",
                row.method,
                row.density.map(|d| d.to_string()).unwrap_or_default(),
                row.noise_model,
                row.noise_level.map(|l| l.to_string()).unwrap_or_default(),
                row.n_images,
                row.recall_mean,
                row.precision_mean,
                row.threshold,
                flags.join(";")
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 400;
const MARGIN: u32 = 40;
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

fn draw_line(img: &mut image::RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3], dashed: bool) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        if dashed && (s / 6) % 2 == 1 {
            continue;
        }
        let t = s as f64 / steps as f64;
        let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let (px, py) = (x as i64 + dx, y as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < PLOT_W && (py as u32) < PLOT_H {
                img.put_pixel(px as u32, py as u32, image::Rgb(color));
            }
        }
    }
}

/// Recall (solid) and precision (dashed) against noise level, one color per
/// method, on a fixed `[0, 1]` vertical axis. Rows without a single noise
/// level are skipped.
pub fn plot_sweep(report: &Report, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut series: BTreeMap<&str, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for row in &report.rows {
        if let Some(level) = row.noise_level {
            series
                .entry(row.method.as_str())
                .or_default()
                .push((level, row.recall_mean, row.precision_mean));
        }
    }
    let levels: Vec<f64> = series.values().flatten().map(|p| p.0).collect();
    let lo = levels.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = levels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (x0, x1) = (MARGIN as f64, (PLOT_W - MARGIN) as f64);
    let (y0, y1) = ((PLOT_H - MARGIN) as f64, MARGIN as f64);
    let px = |l: f64| x0 + (l - lo) / span * (x1 - x0);
    let py = |v: f64| y0 + v.clamp(0.0, 1.0) * (y1 - y0);

    let mut img = image::RgbImage::from_pixel(PLOT_W, PLOT_H, image::Rgb([255, 255, 255]));
    let axis = [0, 0, 0];
    draw_line(&mut img, (x0, y0), (x1, y0), axis, false);
    draw_line(&mut img, (x0, y0), (x0, y1), axis, false);
    for tick in 1..=4 {
        let y = py(tick as f64 * 0.25);
        draw_line(&mut img, (x0, y), (x1, y), [220, 220, 220], false);
    }
    for (i, pts) in series.values_mut().enumerate() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = PALETTE[i % PALETTE.len()];
        for w in pts.windows(2) {
            draw_line(&mut img, (px(w[0].0), py(w[0].1)), (px(w[1].0), py(w[1].1)), color, false);
            draw_line(&mut img, (px(w[0].0), py(w[0].2)), (px(w[1].0), py(w[1].2)), color, true);
        }
        for p in pts.iter() {
            for v in [p.1, p.2] {
                let (cx, cy) = (px(p.0), py(v));
                draw_line(&mut img, (cx - 3.0, cy), (cx + 3.0, cy), color, false);
                draw_line(&mut img, (cx, cy - 3.0), (cx, cy + 3.0), color, false);
            }
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}
