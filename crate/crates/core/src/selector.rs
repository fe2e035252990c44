//! Candidate ranking and the replace-or-keep decision against the incumbent
//! push.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward::{PairScorer, RewardError};
use crate::stylegen::CandidateSet;
use crate::text::normalize_text;

/// `chosen_category` value when the incumbent is kept.
pub const BASE_LABEL: &str = "Base";

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Scorer(#[from] RewardError),
}

/// Orientation-symmetrized win probability, `(r(a,b) + 1 − r(b,a)) / 2`.
pub fn symmetrized_win_prob(scorer: &dyn PairScorer, text_a: &str, text_b: &str) -> Result<f64, SelectError> {
    let ab = scorer.score(text_a, text_b)?;
    let ba = scorer.score(text_b, text_a)?;
    Ok(symmetrize(ab, ba))
}

// Written as 0.5 + (ab − ba)/2 so that identical scores give exactly 0.5.
fn symmetrize(ab: f64, ba: f64) -> f64 {
    0.5 + (ab - ba) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedText {
    /// Position in the caller's input.
    pub index: usize,
    pub text: String,
    /// Borda score: sum of symmetrized win probabilities against all rivals.
    pub score: f64,
}

/// Round-robin Borda ranking. Scores are accumulated in normalized-text
/// order so the result does not depend on input order; ties go to the
/// lexicographically smaller normalized text.
pub fn tournament_rank(scorer: &dyn PairScorer, texts: &[&str]) -> Result<Vec<RankedText>, SelectError> {
    if texts.is_empty() {
        return Err(SelectError::Usage("nothing to rank".into()));
    }
    let keys: Vec<String> = texts.iter().map(|t| normalize_text(t)).collect();
    if keys.iter().collect::<HashSet<_>>().len() != keys.len() {
        return Err(SelectError::Usage("texts must be pairwise distinct after normalization".into()));
    }
    let mut canon: Vec<usize> = (0..texts.len()).collect();
    canon.sort_by(|&x, &y| keys[x].as_bytes().cmp(keys[y].as_bytes()));

    let n = canon.len();
    let mut raw = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                raw[i * n + j] = scorer.score(texts[canon[i]], texts[canon[j]])?;
            }
        }
    }
    let mut scores = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                scores[i] += symmetrize(raw[i * n + j], raw[j * n + i]);
            }
        }
    }
    // `canon` is already in tie-break order, so a stable sort on score suffices.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]));
    Ok(order
        .into_iter()
        .map(|c| RankedText { index: canon[c], text: texts[canon[c]].to_string(), score: scores[c] })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    KeepBase,
    Replace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub text: String,
    pub category: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDecision {
    pub video_id: String,
    pub decision: Decision,
    pub chosen_text: String,
    pub chosen_category: String,
    /// Symmetrized probability that the top candidate beats the base; absent
    /// when there were no candidates.
    pub win_probability: Option<f64>,
    pub ranking: Vec<RankEntry>,
}

/// Ranks the candidates and replaces the base iff the winner beats it with
/// symmetrized probability strictly above `tau`.
pub fn choose_push(scorer: &dyn PairScorer, set: &CandidateSet, tau: f64) -> Result<SelectionDecision, SelectError> {
    if normalize_text(&set.base_text).is_empty() {
        return Err(SelectError::Usage(format!("video {} has an empty base text", set.video_id)));
    }
    let keep = |ranking, p| SelectionDecision {
        video_id: set.video_id.clone(),
        decision: Decision::KeepBase,
        chosen_text: set.base_text.clone(),
        chosen_category: BASE_LABEL.to_string(),
        win_probability: p,
        ranking,
    };
    if set.candidates.is_empty() {
        return Ok(keep(Vec::new(), None));
    }
    let texts: Vec<&str> = set.candidates.iter().map(|c| c.text.as_str()).collect();
    let ranked = tournament_rank(scorer, &texts)?;
    let ranking: Vec<RankEntry> = ranked
        .iter()
        .map(|r| RankEntry { text: r.text.clone(), category: set.candidates[r.index].category.clone(), score: r.score })
        .collect();
    let top = &set.candidates[ranked[0].index];
    let p = symmetrized_win_prob(scorer, &top.text, &set.base_text)?;
    if p > tau {
        Ok(SelectionDecision {
            video_id: set.video_id.clone(),
            decision: Decision::Replace,
            chosen_text: top.text.clone(),
            chosen_category: top.category.clone(),
            win_probability: Some(p),
            ranking,
        })
    } else {
        Ok(keep(ranking, Some(p)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::FnScorer;
    use crate::stylegen::Candidate;

    fn by_len() -> FnScorer<impl Fn(&str, &str) -> f64 + Sync> {
        // longer text wins, with a small orientation bias
        FnScorer(|a: &str, b: &str| {
            if a.len() > b.len() {
                0.8
            } else if a.len() < b.len() {
                0.3
            } else {
                0.55
            }
        })
    }

    #[test]
    fn symmetrization_arithmetic() {
        let s = FnScorer(|a: &str, _: &str| if a == "a" { 0.8 } else { 0.3 });
        assert!((symmetrized_win_prob(&s, "a", "b").unwrap() - 0.75).abs() < 1e-12);
        let s = by_len();
        for (a, b) in [("x", "x"), ("hello", "hello"), ("ab", "cd")] {
            if a == b {
                assert_eq!(symmetrized_win_prob(&s, a, b).unwrap(), 0.5);
            }
            let sum = symmetrized_win_prob(&s, a, b).unwrap() + symmetrized_win_prob(&s, b, a).unwrap();
            assert!((sum - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_text_scores_zero() {
        let r = tournament_rank(&by_len(), &["only"]).unwrap();
        assert_eq!(r, vec![RankedText { index: 0, text: "only".into(), score: 0.0 }]);
    }

    #[test]
    fn equal_strength_breaks_ties_lexicographically() {
        let s = FnScorer(|_: &str, _: &str| 0.5);
        let r = tournament_rank(&s, &["zeta", "alpha"]).unwrap();
        assert_eq!(r[0].text, "alpha");
        assert_eq!(r[1].text, "zeta");
    }

    #[test]
    fn rank_rejects_empty_and_duplicates() {
        assert!(matches!(tournament_rank(&by_len(), &[]), Err(SelectError::Usage(_))));
        assert!(matches!(tournament_rank(&by_len(), &["a  b", "a b"]), Err(SelectError::Usage(_))));
    }

    fn set(texts: &[(&str, &str)]) -> CandidateSet {
        CandidateSet {
            video_id: "v".into(),
            base_text: "base".into(),
            candidates: texts
                .iter()
                .map(|(cat, t)| Candidate {
                    category: cat.to_string(),
                    text: t.to_string(),
                    seed: 0,
                    model: "m".into(),
                    finish_reason: "stop".into(),
                })
                .collect(),
            errors: vec![],
        }
    }

    #[test]
    fn empty_candidates_keep_base() {
        let d = choose_push(&by_len(), &set(&[]), 0.5).unwrap();
        assert_eq!(d.decision, Decision::KeepBase);
        assert_eq!(d.chosen_text, "base");
        assert_eq!(d.chosen_category, BASE_LABEL);
    }

    /// Fixed win probabilities against the base.
    fn vs_base(p: f64) -> FnScorer<impl Fn(&str, &str) -> f64 + Sync> {
        FnScorer(move |a: &str, b: &str| {
            if b == "base" {
                p
            } else if a == "base" {
                1.0 - p
            } else if a.len() > b.len() {
                0.9
            } else {
                0.1
            }
        })
    }

    #[test]
    fn threshold_rule() {
        let s = set(&[("Plot", "short"), ("Suspense", "much longer text")]);
        let d = choose_push(&vs_base(0.62), &s, 0.5).unwrap();
        assert_eq!(d.decision, Decision::Replace);
        assert_eq!(d.chosen_text, "much longer text");
        assert_eq!(d.chosen_category, "Suspense");
        assert!((d.win_probability.unwrap() - 0.62).abs() < 1e-12);
        assert_eq!(d.ranking.len(), 2);

        let d = choose_push(&vs_base(0.5), &s, 0.5).unwrap();
        assert_eq!(d.decision, Decision::KeepBase);
        assert_eq!(d.chosen_text, "base");

        // monotone in tau
        let d = choose_push(&vs_base(0.62), &s, 0.61).unwrap();
        assert_eq!(d.decision, Decision::Replace);
        let d = choose_push(&vs_base(0.62), &s, 0.62).unwrap();
        assert_eq!(d.decision, Decision::KeepBase);
    }

    #[test]
    fn candidate_order_does_not_matter() {
        let a = set(&[("Plot", "one"), ("Emotion", "three"), ("General", "fifteen")]);
        let mut b = a.clone();
        b.candidates.reverse();
        let da = choose_push(&vs_base(0.7), &a, 0.5).unwrap();
        let db = choose_push(&vs_base(0.7), &b, 0.5).unwrap();
        assert_eq!(da, db);
    }
}
