use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pushforge_core::analytics::{
    click_increment_curve, curve_auc, default_thresholds, stratified_accuracy, VideoOutcome,
};
use pushforge_core::pairlab::{stratify_by_gap, PairSample};
use pushforge_core::reward::FnScorer;
use pushforge_core::selector::{choose_push, symmetrized_win_prob, Decision};
use pushforge_core::stylegen::{Candidate, CandidateSet};

fn outcomes_strategy() -> impl Strategy<Value = Vec<VideoOutcome>> {
    prop::collection::vec((0.0f64..1.0, 0u64..400, 0u64..400, 1u64..3000, 1u64..3000), 1..100).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (x, ce, cb, pe, pb))| VideoOutcome {
                video_id: format!("v{i}"),
                x,
                clicks_exp: ce,
                clicks_base: cb,
                pv_exp: pe,
                pv_base: pb,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn curve_endpoints_and_monotone_counts(outcomes in outcomes_strategy(), normalize in any::<bool>()) {
        let mut grid = default_thresholds(&outcomes);
        grid.insert(0, -1.0);
        grid.push(2.0);
        let curve = click_increment_curve(&outcomes, &grid, normalize).unwrap();
        for w in curve.windows(2) {
            prop_assert!(w[1].n_videos <= w[0].n_videos);
        }
        let last = curve.last().unwrap();
        prop_assert_eq!((last.increment, last.n_videos), (0.0, 0));
        let total: f64 = outcomes
            .iter()
            .map(|o| {
                let base = if normalize { o.clicks_base as f64 * (o.pv_exp as f64 / o.pv_base as f64) } else { o.clicks_base as f64 };
                o.clicks_exp as f64 - base
            })
            .sum();
        prop_assert!((curve[0].increment - total).abs() <= 1e-9 * total.abs().max(1.0));
        prop_assert_eq!(curve[0].n_videos, outcomes.len());
    }

    #[test]
    fn auc_scales_with_the_increments(outcomes in outcomes_strategy(), c in 1u64..5) {
        let grid: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
        let base = curve_auc(&click_increment_curve(&outcomes, &grid, false).unwrap()).unwrap();
        let scaled: Vec<VideoOutcome> = outcomes
            .iter()
            .map(|o| VideoOutcome { clicks_exp: o.clicks_exp * c, clicks_base: o.clicks_base * c, ..o.clone() })
            .collect();
        let auc = curve_auc(&click_increment_curve(&scaled, &grid, false).unwrap()).unwrap();
        prop_assert!((auc - c as f64 * base).abs() <= 1e-9 * base.abs().max(1.0));
    }

    #[test]
    fn symmetrized_probabilities_are_complementary(a in "[a-z ]{0,12}", b in "[a-z ]{0,12}", bias in -0.2f64..0.2) {
        let s = FnScorer(move |x: &str, y: &str| (0.5 + bias + (x.len() as f64 - y.len() as f64) / 100.0).clamp(0.01, 0.99));
        let ab = symmetrized_win_prob(&s, &a, &b).unwrap();
        let ba = symmetrized_win_prob(&s, &b, &a).unwrap();
        prop_assert!((ab + ba - 1.0).abs() < 1e-15);
        prop_assert_eq!(symmetrized_win_prob(&s, &a, &a).unwrap(), 0.5);
    }

    #[test]
    fn replacement_is_monotone_in_tau(p in 0.01f64..0.99, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        let set = CandidateSet {
            video_id: "v".into(),
            base_text: "base".into(),
            candidates: vec![Candidate {
                category: "Plot".into(),
                text: "cand".into(),
                seed: 0,
                model: "m".into(),
                finish_reason: "stop".into(),
            }],
            errors: vec![],
        };
        let s = FnScorer(move |a: &str, _: &str| if a == "cand" { p } else { 1.0 - p });
        let at_hi = choose_push(&s, &set, hi).unwrap();
        let at_lo = choose_push(&s, &set, lo).unwrap();
        if at_hi.decision == Decision::Replace {
            prop_assert_eq!(at_lo.decision, Decision::Replace);
        }
        if at_lo.decision == Decision::KeepBase {
            prop_assert_eq!(at_lo.chosen_text, "base");
        }
    }
}

#[test]
fn random_predictor_scores_near_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let pairs: Vec<PairSample> = (0..4000)
        .map(|i| {
            let (ca, cb) = (rng.gen_range(0.0..0.1), rng.gen_range(0.0..0.1));
            PairSample {
                video_id: format!("v{}", i / 10),
                text_a: format!("a{i}"),
                text_b: format!("b{i}"),
                ctr_a: ca,
                ctr_b: cb,
                pv_a: 1000,
                pv_b: 1000,
                label: u8::from(ca > cb),
                gap: (ca - cb).abs(),
            }
        })
        .collect();
    // hash the pair into a prediction symmetric around 0.5
    let s = FnScorer(|a: &str, _: &str| {
        let h = pushforge_core::hashing::fnv1a64(a.as_bytes());
        0.05 + 0.9 * (h >> 11) as f64 / (1u64 << 53) as f64
    });
    let table = stratified_accuracy(&s, &stratify_by_gap(&pairs).unwrap()).unwrap();
    let acc = table.overall().accuracy.unwrap();
    assert!((acc - 0.5).abs() <= 0.05, "random predictor accuracy {acc}");
    let ctr: std::collections::HashMap<&str, f64> =
        pairs.iter().flat_map(|p| [(p.text_a.as_str(), p.ctr_a), (p.text_b.as_str(), p.ctr_b)]).collect();
    let perfect = FnScorer(|a: &str, b: &str| if ctr[a] > ctr[b] { 0.9 } else { 0.1 });
    let table = stratified_accuracy(&perfect, &stratify_by_gap(&pairs[..200]).unwrap()).unwrap();
    assert!(table.rows.iter().all(|r| r.accuracy == Some(1.0)));
}
