//! Push-notification generation pipeline: corpus distillation,
//! style-controlled candidate generation, a pairwise CTR reward model,
//! candidate selection, and offline evaluation reports.

// Validation uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod corpus;
pub mod distill;
pub mod gateway;
pub mod hashing;
pub mod pairlab;
pub mod reward;
pub mod selector;
pub mod stylegen;
pub mod text;

pub use analytics::{
    click_increment_curve, curve_auc, emit_report, outcomes_from_ab_log, stratified_accuracy, style_distribution,
    AccuracyTable, AnalyticsError, CurvePoint, IncrementCurve, Report, ReportFormat, StyleDistribution, VideoOutcome,
};
pub use corpus::{parse_corpus, write_corpus, CorpusError, EngagementStats, EventCounts, PushRecord, Source};
pub use distill::{
    distill, export_sft_dataset, CategorizedSample, DistillConfig, DistillError, SftExample, WeightedSample,
};
pub use gateway::{
    complete_batch, BackendConfig, ChatRequest, ChatResponse, CompletionBackend, GatewayError, HttpBackend,
    MockBackend, RetryPolicy,
};
pub use hashing::derive_seed;
pub use pairlab::{
    build_pairs, parse_ab_log, split, stratify_by_gap, AbLogEntry, PairConfig, PairError, PairSample, SkipReport,
};
pub use reward::{
    load_state, predict, save_state, train, EncoderSpec, EpochStats, HashedNgramSpec, PairScorer, RemoteScorer,
    RewardError, RewardModelState, TrainConfig,
};
pub use selector::{choose_push, tournament_rank, Decision, SelectError, SelectionDecision};
pub use stylegen::{
    classify_style, dedup_candidates, generate_candidates, Candidate, CandidateSet, SamplingParams, StyleError,
    StyleTaxonomy,
};
pub use text::normalize_text;
