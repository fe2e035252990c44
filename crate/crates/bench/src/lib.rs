//! Seeded synthetic inputs shared by the benchmarks.

use pushforge_core::corpus::{derive_rates, EventCounts, PushRecord, Source};
use pushforge_core::pairlab::PairSample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 16] = [
    "tonight", "secret", "finale", "recipe", "watch", "twist", "beach", "match", "concert", "minutes", "hidden",
    "street", "revealed", "comeback", "first", "ending",
];

pub fn push_text(rng: &mut impl Rng, words: usize) -> String {
    (0..words).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

pub fn corpus(n: usize, seed: u64) -> Vec<PushRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let pv = rng.gen_range(500..20_000u64);
            let counts = EventCounts {
                clicks: pv * rng.gen_range(0..40) / 1000,
                short_views: pv * rng.gen_range(0..9) / 20,
                long_views: pv * rng.gen_range(8..20) / 20,
                hates: pv * rng.gen_range(0..12) / 1000,
            };
            PushRecord {
                video_id: format!("v{}", i / 8),
                push_id: format!("p{i}"),
                text: push_text(&mut rng, 6),
                caption: None,
                original_title: String::new(),
                topics: Vec::new(),
                platform_category: String::new(),
                tag_cluster: format!("c{}", rng.gen_range(0..20)),
                stats: derive_rates(counts, pv).expect("counts within pv"),
                source: Source::Human,
                timestamp: i as i64,
            }
        })
        .collect()
}

pub fn pairs(n: usize, seed: u64) -> Vec<PairSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (ctr_a, ctr_b) = (rng.gen_range(0.0..0.1), rng.gen_range(0.0..0.1));
            PairSample {
                video_id: format!("v{}", i / 20),
                text_a: push_text(&mut rng, 6),
                text_b: push_text(&mut rng, 6),
                ctr_a,
                ctr_b,
                pv_a: 2000,
                pv_b: 2000,
                label: u8::from(ctr_a > ctr_b),
                gap: (ctr_a - ctr_b).abs(),
            }
        })
        .collect()
}
