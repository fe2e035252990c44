//! Pair dataset construction from A/B traffic logs: eligibility, labeling,
//! difficulty stratification and leak-free splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::normalize_text;

#[derive(Debug, Error)]
pub enum PairError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid A/B entry {video_id}/{arm_id}: {message}")]
    Validation { video_id: String, arm_id: String, message: String },
    #[error("split: {0}")]
    Split(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One arm of a small-traffic A/B test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbLogEntry {
    pub video_id: String,
    pub arm_id: String,
    pub text: String,
    pub pv: u64,
    pub clicks: u64,
}

impl AbLogEntry {
    pub fn ctr(&self) -> f64 {
        self.clicks as f64 / self.pv as f64
    }

    pub fn validate(&self) -> Result<(), PairError> {
        let fail = |m: &str| PairError::Validation {
            video_id: self.video_id.clone(),
            arm_id: self.arm_id.clone(),
            message: m.to_string(),
        };
        if self.pv == 0 {
            return Err(fail("pv must be >= 1"));
        }
        if self.clicks > self.pv {
            return Err(fail("clicks exceed pv"));
        }
        Ok(())
    }
}

/// Reads and validates a JSONL A/B log. Blank lines are skipped.
pub fn parse_ab_log<R: BufRead>(reader: R) -> Result<Vec<AbLogEntry>, PairError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: AbLogEntry =
            serde_json::from_str(&line).map_err(|e| PairError::Parse { line: idx + 1, message: e.to_string() })?;
        entry.validate()?;
        out.push(entry);
    }
    Ok(out)
}

/// Two notifications of one video with their observed outcomes.
/// `label` is 1 iff `ctr_a > ctr_b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub video_id: String,
    pub text_a: String,
    pub text_b: String,
    pub ctr_a: f64,
    pub ctr_b: f64,
    pub pv_a: u64,
    pub pv_b: u64,
    pub label: u8,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairConfig {
    pub min_pv_per_arm: u64,
    /// Minimum `min(pv_a, pv_b) / max(pv_a, pv_b)`.
    pub max_exposure_ratio: f64,
    pub eval_fraction: f64,
    pub seed: u64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self { min_pv_per_arm: 200, max_exposure_ratio: 0.5, eval_fraction: 0.2, seed: 0 }
    }
}

impl PairConfig {
    pub fn validate(&self) -> Result<(), PairError> {
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(PairError::Usage("eval_fraction must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.max_exposure_ratio) {
            return Err(PairError::Usage("max_exposure_ratio must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Why candidate pairs were not emitted. A pair failing several rules is
/// counted under each of them, and once in `skipped`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport {
    pub considered: usize,
    pub skipped: usize,
    pub below_min_pv: usize,
    pub imbalance_count: usize,
    pub same_text: usize,
    pub tie_count: usize,
}

/// Every eligible unordered arm pair per video, oriented by `arm_id`.
/// Output is ordered by video id, then arm ids.
pub fn build_pairs(entries: &[AbLogEntry], cfg: &PairConfig) -> (Vec<PairSample>, SkipReport) {
    let mut by_video: BTreeMap<&str, Vec<&AbLogEntry>> = BTreeMap::new();
    for e in entries {
        by_video.entry(e.video_id.as_str()).or_default().push(e);
    }
    let mut pairs = Vec::new();
    let mut report = SkipReport::default();
    for (video, mut arms) in by_video {
        arms.sort_by(|x, y| x.arm_id.cmp(&y.arm_id));
        for i in 0..arms.len() {
            for j in i + 1..arms.len() {
                let (a, b) = (arms[i], arms[j]);
                report.considered += 1;
                let low_pv = a.pv < cfg.min_pv_per_arm || b.pv < cfg.min_pv_per_arm;
                let ratio = a.pv.min(b.pv) as f64 / a.pv.max(b.pv) as f64;
                let imbalanced = ratio < cfg.max_exposure_ratio;
                let same = normalize_text(&a.text) == normalize_text(&b.text);
                let (ctr_a, ctr_b) = (a.ctr(), b.ctr());
                let tie = ctr_a == ctr_b;
                report.below_min_pv += low_pv as usize;
                report.imbalance_count += imbalanced as usize;
                report.same_text += same as usize;
                report.tie_count += tie as usize;
                if low_pv || imbalanced || same || tie {
                    report.skipped += 1;
                    continue;
                }
                pairs.push(PairSample {
                    video_id: video.to_string(),
                    text_a: a.text.clone(),
                    text_b: b.text.clone(),
                    ctr_a,
                    ctr_b,
                    pv_a: a.pv,
                    pv_b: b.pv,
                    label: u8::from(ctr_a > ctr_b),
                    gap: (ctr_a - ctr_b).abs(),
                });
            }
        }
    }
    (pairs, report)
}

/// Difficulty buckets by CTR-gap rank: bucket 0 holds the smallest gaps.
/// Remainder pairs go to the earliest buckets.
pub fn stratify_by_gap(pairs: &[PairSample]) -> Result<[Vec<PairSample>; 4], PairError> {
    if pairs.is_empty() {
        return Err(PairError::Usage("cannot stratify an empty pair set".into()));
    }
    let mut sorted: Vec<&PairSample> = pairs.iter().collect();
    sorted.sort_by(|x, y| {
        x.gap
            .total_cmp(&y.gap)
            .then_with(|| x.video_id.cmp(&y.video_id))
            .then_with(|| x.text_a.cmp(&y.text_a))
            .then_with(|| x.text_b.cmp(&y.text_b))
    });
    let n = sorted.len();
    let mut buckets: [Vec<PairSample>; 4] = Default::default();
    let mut start = 0;
    for (b, bucket) in buckets.iter_mut().enumerate() {
        let size = n / 4 + usize::from(b < n % 4);
        bucket.extend(sorted[start..start + size].iter().map(|p| (*p).clone()));
        start += size;
    }
    Ok(buckets)
}

/// Splits by video: a seeded shuffle of the distinct video ids puts
/// `round_half_even(eval_fraction * V)` (at least one) of them in eval.
pub fn split(pairs: &[PairSample], cfg: &PairConfig) -> Result<(Vec<PairSample>, Vec<PairSample>), PairError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(PairError::Usage("cannot split an empty pair set".into()));
    }
    let mut videos: Vec<&str> =
        pairs.iter().map(|p| p.video_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    let n_videos = videos.len();
    let n_eval = ((cfg.eval_fraction * n_videos as f64).round_ties_even() as usize).max(1);
    if n_eval >= n_videos {
        return Err(PairError::Split(format!(
            "{n_videos} video(s) cannot provide {n_eval} eval video(s) and a non-empty train side"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    videos.shuffle(&mut rng);
    let eval_ids: BTreeSet<&str> = videos[..n_eval].iter().copied().collect();
    let (eval, train): (Vec<PairSample>, Vec<PairSample>) =
        pairs.iter().cloned().partition(|p| eval_ids.contains(p.video_id.as_str()));
    Ok((train, eval))
}
