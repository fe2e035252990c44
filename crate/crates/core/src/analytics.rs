//! Offline evaluation artifacts: gap-stratified pair accuracy, the
//! click-increment curve with its area, and the style distribution of
//! selected pushes, plus CSV/JSON report emission.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pairlab::{AbLogEntry, PairSample};
use crate::reward::{is_correct, PairScorer, RewardError};
use crate::selector::{tournament_rank, Decision, SelectError, SelectionDecision};
use crate::stylegen::StyleTaxonomy;
use crate::text::normalize_text;

pub const BUCKET_LABELS: [&str; 4] = ["0%-25%", "25%-50%", "50%-75%", "75%-100%"];
pub const OVERALL_LABEL: &str = "Overall";

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("domain: {0}")]
    Domain(String),
    #[error(transparent)]
    Scorer(#[from] RewardError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub label: String,
    pub count: usize,
    pub correct: usize,
    /// `None` for an empty bucket.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    /// Four bucket rows followed by the micro-averaged overall row.
    pub rows: Vec<AccuracyRow>,
}

impl AccuracyTable {
    pub fn overall(&self) -> &AccuracyRow {
        self.rows.last().expect("overall row")
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Accuracy per difficulty bucket; `r == 0.5` counts as wrong.
pub fn stratified_accuracy(
    scorer: &dyn PairScorer,
    buckets: &[Vec<PairSample>; 4],
) -> Result<AccuracyTable, AnalyticsError> {
    let mut rows = Vec::with_capacity(5);
    let (mut total, mut total_correct) = (0, 0);
    for (label, bucket) in BUCKET_LABELS.iter().zip(buckets) {
        let mut correct = 0;
        for p in bucket {
            let r = scorer.score(&p.text_a, &p.text_b)?;
            correct += is_correct(r, p.label) as usize;
        }
        total += bucket.len();
        total_correct += correct;
        rows.push(AccuracyRow {
            label: label.to_string(),
            count: bucket.len(),
            correct,
            accuracy: ratio(correct, bucket.len()),
        });
    }
    rows.push(AccuracyRow {
        label: OVERALL_LABEL.into(),
        count: total,
        correct: total_correct,
        accuracy: ratio(total_correct, total),
    });
    Ok(AccuracyTable { rows })
}

/// Observed Exp-vs-Base result for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoOutcome {
    pub video_id: String,
    /// Predicted probability that the Exp push beats the Base push.
    pub x: f64,
    pub clicks_exp: u64,
    pub clicks_base: u64,
    pub pv_exp: u64,
    pub pv_base: u64,
}

impl VideoOutcome {
    fn increment(&self, normalize_exposure: bool) -> Result<f64, AnalyticsError> {
        if !normalize_exposure {
            return Ok(self.clicks_exp as f64 - self.clicks_base as f64);
        }
        if self.pv_base == 0 {
            return Err(AnalyticsError::Domain(format!("video {} has pv_base = 0", self.video_id)));
        }
        Ok(self.clicks_exp as f64 - self.clicks_base as f64 * (self.pv_exp as f64 / self.pv_base as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    /// Summed click increment over videos with `x > threshold`.
    pub increment: f64,
    pub n_videos: usize,
}

fn check_sorted(xs: impl Iterator<Item = f64>) -> Result<(), AnalyticsError> {
    let mut prev = f64::NEG_INFINITY;
    for x in xs {
        if x.is_nan() || x < prev {
            return Err(AnalyticsError::Usage("thresholds must be sorted ascending".into()));
        }
        prev = x;
    }
    Ok(())
}

/// `0` followed by the sorted distinct `x` values.
pub fn default_thresholds(outcomes: &[VideoOutcome]) -> Vec<f64> {
    let mut xs: Vec<f64> = outcomes.iter().map(|o| o.x).collect();
    xs.push(0.0);
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    xs
}

/// `n` evenly spaced thresholds from 0 to 1 inclusive.
pub fn uniform_thresholds(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn click_increment_curve(
    outcomes: &[VideoOutcome],
    thresholds: &[f64],
    normalize_exposure: bool,
) -> Result<Vec<CurvePoint>, AnalyticsError> {
    if outcomes.is_empty() {
        return Err(AnalyticsError::Usage("no video outcomes".into()));
    }
    check_sorted(thresholds.iter().copied())?;
    let mut by_x: Vec<(f64, f64)> =
        outcomes.iter().map(|o| Ok((o.x, o.increment(normalize_exposure)?))).collect::<Result<_, AnalyticsError>>()?;
    by_x.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(thresholds
        .iter()
        .map(|&t| {
            let start = by_x.partition_point(|(x, _)| *x <= t);
            let included = &by_x[start..];
            CurvePoint {
                threshold: t,
                // `+ 0.0` turns the empty sum's -0.0 into 0.0
                increment: included.iter().map(|(_, d)| d).sum::<f64>() + 0.0,
                n_videos: included.len(),
            }
        })
        .collect())
}

/// Trapezoidal area under `increment` over `threshold`.
pub fn curve_auc(curve: &[CurvePoint]) -> Result<f64, AnalyticsError> {
    if curve.is_empty() {
        return Err(AnalyticsError::Usage("empty curve".into()));
    }
    check_sorted(curve.iter().map(|p| p.threshold))?;
    Ok(curve.windows(2).map(|w| (w[1].threshold - w[0].threshold) * (w[0].increment + w[1].increment) / 2.0).sum())
}

/// Builds Exp-vs-Base outcomes from an A/B log: in every video that has a
/// `base_arm_id` arm and at least one other arm, the scorer's tournament
/// winner among the other arms is the Exp push and `x = r(Exp, Base)`.
pub fn outcomes_from_ab_log(
    scorer: &dyn PairScorer,
    entries: &[AbLogEntry],
    base_arm_id: &str,
) -> Result<Vec<VideoOutcome>, AnalyticsError> {
    let mut by_video: BTreeMap<&str, Vec<&AbLogEntry>> = BTreeMap::new();
    for e in entries {
        by_video.entry(e.video_id.as_str()).or_default().push(e);
    }
    let mut out = Vec::new();
    for (video, mut arms) in by_video {
        arms.sort_by(|a, b| a.arm_id.cmp(&b.arm_id));
        let Some(base) = arms.iter().find(|a| a.arm_id == base_arm_id).copied() else { continue };
        let base_key = normalize_text(&base.text);
        let mut seen = vec![base_key];
        let mut rivals: Vec<&AbLogEntry> = Vec::new();
        for a in arms.iter().filter(|a| a.arm_id != base_arm_id) {
            let key = normalize_text(&a.text);
            if !seen.contains(&key) {
                seen.push(key);
                rivals.push(a);
            }
        }
        if rivals.is_empty() {
            continue;
        }
        let texts: Vec<&str> = rivals.iter().map(|a| a.text.as_str()).collect();
        let exp = rivals[tournament_rank(scorer, &texts)?[0].index];
        out.push(VideoOutcome {
            video_id: video.to_string(),
            x: scorer.score(&exp.text, &base.text)?,
            clicks_exp: exp.clicks,
            clicks_base: base.clicks,
            pv_exp: exp.pv,
            pv_base: base.pv,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryShare {
    pub category: String,
    pub count: usize,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleDistribution {
    pub total: usize,
    pub base_count: usize,
    pub base_share: f64,
    pub categories: Vec<CategoryShare>,
}

impl StyleDistribution {
    pub fn replacement_share(&self) -> f64 {
        1.0 - self.base_share
    }
}

/// Shares of kept-base and of each winning category over all decisions.
pub fn style_distribution(
    decisions: &[SelectionDecision],
    taxonomy: &StyleTaxonomy,
) -> Result<StyleDistribution, AnalyticsError> {
    if decisions.is_empty() {
        return Err(AnalyticsError::Usage("no decisions".into()));
    }
    let mut counts = vec![0usize; taxonomy.len()];
    let mut base_count = 0;
    for d in decisions {
        match d.decision {
            Decision::KeepBase => base_count += 1,
            Decision::Replace => {
                let idx = taxonomy.names().iter().position(|n| *n == d.chosen_category).ok_or_else(|| {
                    AnalyticsError::Usage(format!("category {:?} is not in the taxonomy", d.chosen_category))
                })?;
                counts[idx] += 1;
            }
        }
    }
    let total = decisions.len();
    let share = |c: usize| c as f64 / total as f64;
    Ok(StyleDistribution {
        total,
        base_count,
        base_share: share(base_count),
        categories: taxonomy
            .names()
            .iter()
            .zip(counts)
            .map(|(name, count)| CategoryShare { category: name.clone(), count, share: share(count) })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementCurve {
    pub normalize_exposure: bool,
    pub auc: f64,
    pub points: Vec<CurvePoint>,
}

/// Whatever subset of artifacts a run produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub accuracy: Option<AccuracyTable>,
    pub curve: Option<IncrementCurve>,
    pub style: Option<StyleDistribution>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        })
    }
}

impl FromStr for ReportFormat {
    type Err = AnalyticsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(AnalyticsError::Usage(format!("unknown report format {other:?}"))),
        }
    }
}

const NA: &str = "NA";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |x| x.to_string())
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record(&r).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("report serializes");
    out.push(b'\n');
    out
}

/// Renders each present artifact to `(file name, bytes)`.
pub fn render_report(report: &Report, format: ReportFormat) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    if let Some(table) = &report.accuracy {
        let bytes = match format {
            ReportFormat::Json => json_bytes(table),
            ReportFormat::Csv => csv_bytes(
                &["label", "count", "correct", "accuracy"],
                table
                    .rows
                    .iter()
                    .map(|r| vec![r.label.clone(), r.count.to_string(), r.correct.to_string(), fmt_opt(r.accuracy)])
                    .collect(),
            ),
        };
        files.push((format!("accuracy_table.{format}"), bytes));
    }
    if let Some(curve) = &report.curve {
        let bytes = match format {
            ReportFormat::Json => json_bytes(curve),
            ReportFormat::Csv => csv_bytes(
                &["threshold", "increment", "n_videos"],
                curve
                    .points
                    .iter()
                    .map(|p| vec![p.threshold.to_string(), p.increment.to_string(), p.n_videos.to_string()])
                    .collect(),
            ),
        };
        files.push((format!("increment_curve.{format}"), bytes));
    }
    if let Some(style) = &report.style {
        let bytes = match format {
            ReportFormat::Json => json_bytes(style),
            ReportFormat::Csv => {
                let mut rows =
                    vec![vec!["Base".to_string(), style.base_count.to_string(), style.base_share.to_string()]];
                rows.extend(
                    style.categories.iter().map(|c| vec![c.category.clone(), c.count.to_string(), c.share.to_string()]),
                );
                csv_bytes(&["category", "count", "share"], rows)
            }
        };
        files.push((format!("style_distribution.{format}"), bytes));
    }
    files
}

/// Writes the report files into `dir` (created if missing) and returns
/// their paths.
pub fn emit_report(report: &Report, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>, AnalyticsError> {
    std::fs::create_dir_all(dir).map_err(|source| AnalyticsError::Io { path: dir.to_path_buf(), source })?;
    let mut paths = Vec::new();
    for (name, bytes) in render_report(report, format) {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|source| AnalyticsError::Io { path: path.clone(), source })?;
        paths.push(path);
    }
    Ok(paths)
}
