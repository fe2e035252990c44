//! Corpus distillation: statistical hard filter, tag-wise quantile
//! cropping, confidence weighting, and the weighted SFT dataset export.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EngagementStats, PushRecord};
use crate::text::normalize_text;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("domain: {0}")]
    Domain(String),
    #[error("export failed for {push_id}: {message}")]
    Export { push_id: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub ctr_min: f64,
    pub svr_max: f64,
    pub lvtr_min: f64,
    pub htr_max: f64,
    pub pv_min: u64,
    /// Cropping fraction for the within-cluster quantiles.
    pub q: f64,
    pub min_cluster_size: usize,
    pub ctr_cap: f64,
    pub pv_cap: u64,
    pub weight_base: f64,
    pub ctr_coeff: f64,
    pub pv_coeff: f64,
    /// Use `ln(min(pv, cap) / cap)` verbatim instead of the normalized
    /// `ln(min(pv, cap)) / ln(cap)`; the weight is then clamped to [0.01, 1].
    pub literal_log_term: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            ctr_min: 0.006,
            svr_max: 0.40,
            lvtr_min: 0.50,
            htr_max: 0.01,
            pv_min: 800,
            q: 0.2,
            min_cluster_size: 5,
            ctr_cap: 0.1,
            pv_cap: 10_000,
            weight_base: 0.3,
            ctr_coeff: 0.35,
            pv_coeff: 0.35,
            literal_log_term: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        let bad = |m: &str| Err(DistillError::Config(m.to_string()));
        if !(self.q > 0.0 && self.q < 0.5) {
            return bad("q must lie in (0, 0.5)");
        }
        for (name, v) in [
            ("ctr_min", self.ctr_min),
            ("svr_max", self.svr_max),
            ("lvtr_min", self.lvtr_min),
            ("htr_max", self.htr_max),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DistillError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.pv_min == 0 || self.pv_cap < 2 || self.min_cluster_size == 0 {
            return bad("pv_min and min_cluster_size must be positive, pv_cap at least 2");
        }
        if !(self.ctr_cap > 0.0) {
            return bad("ctr_cap must be positive");
        }
        if (self.weight_base + self.ctr_coeff + self.pv_coeff - 1.0).abs() > 1e-9 {
            return bad("weight_base + ctr_coeff + pv_coeff must equal 1");
        }
        Ok(())
    }
}

/// A distilled record with its training weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSample {
    #[serde(flatten)]
    pub record: PushRecord,
    pub confidence: f64,
}

/// A weighted sample with the style label assigned by the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorizedSample {
    #[serde(flatten)]
    pub sample: WeightedSample,
    #[serde(default)]
    pub control_category: Option<String>,
}

/// One row of the weighted SFT dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub instruction: String,
    pub control_category: String,
    pub item_caption: String,
    pub target: String,
    pub weight: f64,
}

/// All five inequalities are strict.
pub fn hard_filter(stats: &EngagementStats, cfg: &DistillConfig) -> bool {
    stats.ctr > cfg.ctr_min
        && stats.svr < cfg.svr_max
        && stats.lvtr > cfg.lvtr_min
        && stats.htr < cfg.htr_max
        && stats.pv > cfg.pv_min
}

/// Linear-interpolation empirical quantile of already sorted values
/// (position `(n - 1) * p` on the 0-based ascending order).
pub fn interpolated_quantile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn quantile_of(stats: &[&EngagementStats], metric: fn(&EngagementStats) -> f64, p: f64) -> f64 {
    let mut values: Vec<f64> = stats.iter().map(|s| metric(s)).collect();
    values.sort_by(f64::total_cmp);
    interpolated_quantile(&values, p)
}

/// Retention mask for one cluster. Records on a quantile boundary survive.
fn soft_filter_mask(stats: &[&EngagementStats], cfg: &DistillConfig) -> Vec<bool> {
    if stats.len() < cfg.min_cluster_size {
        return vec![true; stats.len()];
    }
    let ctr_lo = quantile_of(stats, |s| s.ctr, cfg.q);
    let lvtr_lo = quantile_of(stats, |s| s.lvtr, cfg.q);
    let svr_hi = quantile_of(stats, |s| s.svr, 1.0 - cfg.q);
    let htr_hi = quantile_of(stats, |s| s.htr, 1.0 - cfg.q);
    stats.iter().map(|s| !(s.ctr < ctr_lo || s.lvtr < lvtr_lo || s.svr > svr_hi || s.htr > htr_hi)).collect()
}

/// Within-cluster quantile cropping. Input order is preserved.
pub fn soft_filter(cluster: &[PushRecord], cfg: &DistillConfig) -> Result<Vec<PushRecord>, DistillError> {
    if let Some(first) = cluster.first() {
        if let Some(other) = cluster.iter().find(|r| r.tag_cluster != first.tag_cluster) {
            return Err(DistillError::Usage(format!(
                "soft_filter got mixed tag clusters {:?} and {:?}",
                first.tag_cluster, other.tag_cluster
            )));
        }
    }
    let stats: Vec<&EngagementStats> = cluster.iter().map(|r| &r.stats).collect();
    let mask = soft_filter_mask(&stats, cfg);
    Ok(cluster.iter().zip(mask).filter(|(_, keep)| *keep).map(|(r, _)| r.clone()).collect())
}

/// Sample weight from click rate and exposure.
pub fn confidence_weight(stats: &EngagementStats, cfg: &DistillConfig) -> Result<f64, DistillError> {
    if stats.pv == 0 {
        return Err(DistillError::Domain("confidence weight needs pv >= 1".into()));
    }
    let ctr_term = stats.ctr.min(cfg.ctr_cap) / cfg.ctr_cap;
    let pv = stats.pv.min(cfg.pv_cap) as f64;
    let cap = cfg.pv_cap as f64;
    if cfg.literal_log_term {
        let w = cfg.weight_base + cfg.ctr_coeff * ctr_term + cfg.pv_coeff * (pv / cap).ln();
        return Ok(w.clamp(0.01, 1.0));
    }
    let pv_term = pv.ln() / cap.ln();
    let w = cfg.weight_base + cfg.ctr_coeff * ctr_term + cfg.pv_coeff * pv_term;
    // Mathematically already in [base, 1]; the clamp only absorbs rounding.
    Ok(w.clamp(cfg.weight_base, 1.0))
}

/// Hard filter, then per-cluster soft filter, then weighting. Output keeps
/// the input's relative order.
pub fn distill(records: &[PushRecord], cfg: &DistillConfig) -> Result<Vec<WeightedSample>, DistillError> {
    cfg.validate()?;
    let passed: Vec<&PushRecord> = records.iter().filter(|r| hard_filter(&r.stats, cfg)).collect();

    let mut clusters: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in passed.iter().enumerate() {
        clusters.entry(r.tag_cluster.as_str()).or_default().push(i);
    }
    let mut keep = vec![false; passed.len()];
    for members in clusters.values() {
        let stats: Vec<&EngagementStats> = members.iter().map(|&i| &passed[i].stats).collect();
        for (&i, k) in members.iter().zip(soft_filter_mask(&stats, cfg)) {
            keep[i] = k;
        }
    }

    passed
        .into_iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(r, _)| Ok(WeightedSample { record: r.clone(), confidence: confidence_weight(&r.stats, cfg)? }))
        .collect()
}

/// Builds the SFT training row for one categorized sample.
pub fn sft_example(sample: &CategorizedSample, task_prompt: &str) -> Result<SftExample, DistillError> {
    let record = &sample.sample.record;
    let fail = |message: &str| DistillError::Export { push_id: record.push_id.clone(), message: message.to_string() };
    let caption =
        record.caption.as_deref().filter(|c| !normalize_text(c).is_empty()).ok_or_else(|| fail("missing caption"))?;
    let category = sample
        .control_category
        .as_deref()
        .filter(|c| !c.trim().is_empty())
        .ok_or_else(|| fail("missing control category"))?;
    if task_prompt.trim().is_empty() {
        return Err(fail("empty task prompt"));
    }
    Ok(SftExample {
        instruction: task_prompt.to_string(),
        control_category: category.to_string(),
        item_caption: caption.to_string(),
        target: record.text.clone(),
        weight: sample.sample.confidence,
    })
}

/// Serializes the weighted SFT dataset as JSONL, one LF-terminated row per
/// sample, in input order.
pub fn export_sft_dataset(samples: &[CategorizedSample], task_prompt: &str) -> Result<Vec<u8>, DistillError> {
    let mut out = Vec::new();
    for sample in samples {
        let row = sft_example(sample, task_prompt)?;
        serde_json::to_writer(&mut out, &row).expect("serializing to memory");
        out.push(b'\n');
    }
    Ok(out)
}
