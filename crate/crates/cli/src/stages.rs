//! Pipeline stages. Each stage reads fixtures or earlier stage outputs from
//! disk, writes its own files into the output directory, and returns a JSON
//! summary.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use pushforge_core::analytics::{default_thresholds, render_report};
use pushforge_core::corpus::Source;
use pushforge_core::hashing::splitmix64;
use pushforge_core::{
    build_pairs, choose_push, classify_style, click_increment_curve, curve_auc, derive_seed, distill,
    export_sft_dataset, generate_candidates, load_state, outcomes_from_ab_log, parse_ab_log, parse_corpus, save_state,
    split, stratified_accuracy, stratify_by_gap, style_distribution, train, CandidateSet, CategorizedSample,
    CompletionBackend, HttpBackend, IncrementCurve, MockBackend, PairConfig, PairSample, PairScorer, RemoteScorer,
    Report, ReportFormat, RewardModelState, SelectionDecision, TrainConfig, WeightedSample,
};

use crate::config::{BackendChoice, RunConfig};

pub const WEIGHTED_SAMPLES: &str = "weighted_samples.jsonl";
pub const CATEGORIZED_SAMPLES: &str = "categorized_samples.jsonl";
pub const SFT_DATASET: &str = "sft_dataset.jsonl";
pub const CANDIDATES: &str = "candidates.jsonl";
pub const PAIRS_TRAIN: &str = "pairs_train.jsonl";
pub const PAIRS_EVAL: &str = "pairs_eval.jsonl";
pub const REWARD_MODEL: &str = "reward_model.json";
pub const TRAIN_TRACE: &str = "train_trace.json";
pub const DECISIONS: &str = "decisions.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    Distill,
    ExportSft,
    Classify,
    Generate,
    Pairs,
    TrainRm,
    EvalRm,
    Select,
    Analyze,
    E2eMock,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Distill => "distill",
            Stage::ExportSft => "export-sft",
            Stage::Classify => "classify",
            Stage::Generate => "generate",
            Stage::Pairs => "pairs",
            Stage::TrainRm => "train-rm",
            Stage::EvalRm => "eval-rm",
            Stage::Select => "select",
            Stage::Analyze => "analyze",
            Stage::E2eMock => "e2e-mock",
        }
    }
}

const E2E_CHAIN: [Stage; 8] = [
    Stage::Distill,
    Stage::Classify,
    Stage::ExportSft,
    Stage::Generate,
    Stage::Pairs,
    Stage::TrainRm,
    Stage::Select,
    Stage::Analyze,
];

/// Runs one stage and returns its summary lines (several for `e2e-mock`).
pub fn run_stage(stage: Stage, cfg: &RunConfig) -> Result<Vec<Value>> {
    std::fs::create_dir_all(&cfg.paths.out_dir)
        .with_context(|| format!("creating output dir {}", cfg.paths.out_dir.display()))?;
    let summary = match stage {
        Stage::Distill => run_distill(cfg)?,
        Stage::ExportSft => run_export_sft(cfg)?,
        Stage::Classify => run_classify(cfg)?,
        Stage::Generate => run_generate(cfg)?,
        Stage::Pairs => run_pairs(cfg)?,
        Stage::TrainRm => run_train(cfg)?,
        Stage::EvalRm => run_eval(cfg)?,
        Stage::Select => run_select(cfg)?,
        Stage::Analyze => run_analyze(cfg)?,
        Stage::E2eMock => {
            let mut cfg = cfg.clone();
            if !matches!(cfg.backend, BackendChoice::Mock { .. }) {
                cfg.backend = BackendChoice::Mock { seed: None };
            }
            cfg.model.remote = None;
            let mut out = Vec::new();
            for s in E2E_CHAIN {
                out.extend(run_stage(s, &cfg)?);
            }
            return Ok(out);
        }
    };
    Ok(vec![summary])
}

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.paths.out_dir.join(name)
}

fn model_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.model_state.clone().unwrap_or_else(|| out(cfg, REWARD_MODEL))
}

fn input<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    match path {
        Some(p) => Ok(p),
        None => bail!("config has no paths.{what}"),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn jsonl_bytes<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("serializing to memory");
        buf.push(b'\n');
    }
    buf
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn backend(cfg: &RunConfig, stage: Stage) -> Result<Box<dyn CompletionBackend>> {
    Ok(match &cfg.backend {
        BackendChoice::Mock { seed } => {
            Box::new(MockBackend::new(seed.unwrap_or_else(|| derive_seed(cfg.seed, stage.name()))))
        }
        BackendChoice::Http(c) => Box::new(HttpBackend::new(c.clone())?),
    })
}

fn scorer(cfg: &RunConfig) -> Result<Box<dyn PairScorer>> {
    if let Some(remote) = &cfg.model.remote {
        return Ok(Box::new(RemoteScorer::new(remote.clone())?));
    }
    let path = model_path(cfg);
    let bytes = std::fs::read(&path).with_context(|| format!("reading model state {}", path.display()))?;
    Ok(Box::new(load_state(&bytes).with_context(|| format!("loading {}", path.display()))?))
}

fn run_distill(cfg: &RunConfig) -> Result<Value> {
    let path = input(&cfg.paths.corpus, "corpus")?;
    let records = parse_corpus(open(path)?).with_context(|| format!("parsing {}", path.display()))?;
    let samples = distill(&records, &cfg.distill)?;
    let dest = out(cfg, WEIGHTED_SAMPLES);
    write(&dest, &jsonl_bytes(&samples))?;
    info!("distill kept {} of {} records", samples.len(), records.len());
    Ok(json!({"stage": "distill", "records": records.len(), "weighted_samples": samples.len(), "files": [dest]}))
}

fn run_classify(cfg: &RunConfig) -> Result<Value> {
    let samples: Vec<WeightedSample> = read_jsonl(&out(cfg, WEIGHTED_SAMPLES))?;
    let backend = backend(cfg, Stage::Classify)?;
    let mut labeled = Vec::with_capacity(samples.len());
    for sample in samples {
        let category = classify_style(&sample.record.text, &cfg.taxonomy, backend.as_ref(), cfg.classify_k)
            .with_context(|| format!("classifying {}", sample.record.push_id))?;
        labeled.push(CategorizedSample { sample, control_category: Some(category) });
    }
    let dest = out(cfg, CATEGORIZED_SAMPLES);
    write(&dest, &jsonl_bytes(&labeled))?;
    Ok(json!({"stage": "classify", "categorized_samples": labeled.len(), "files": [dest]}))
}

fn run_export_sft(cfg: &RunConfig) -> Result<Value> {
    let mut samples: Vec<CategorizedSample> = read_jsonl(&out(cfg, CATEGORIZED_SAMPLES))?;
    // Records without a dense caption cannot become SFT rows; they are counted, not fatal.
    let before = samples.len();
    samples.retain(|s| s.sample.record.caption.as_deref().is_some_and(|c| !c.trim().is_empty()));
    let bytes = export_sft_dataset(&samples, &cfg.task_prompt)?;
    let dest = out(cfg, SFT_DATASET);
    write(&dest, &bytes)?;
    Ok(json!({
        "stage": "export-sft",
        "examples": samples.len(),
        "skipped_without_caption": before - samples.len(),
        "files": [dest],
    }))
}

fn run_generate(cfg: &RunConfig) -> Result<Value> {
    let path = input(&cfg.paths.corpus, "corpus")?;
    let records = parse_corpus(open(path)?).with_context(|| format!("parsing {}", path.display()))?;
    let backend = backend(cfg, Stage::Generate)?;
    let mut sets: Vec<CandidateSet> = Vec::new();
    for record in records.iter().filter(|r| r.source == Source::Base) {
        let set = generate_candidates(record, &cfg.taxonomy, &cfg.sampling, &cfg.task_prompt, backend.as_ref())
            .with_context(|| format!("generating for {}", record.push_id))?;
        sets.push(set);
    }
    if sets.is_empty() {
        bail!("corpus {} has no base-source records to generate for", path.display());
    }
    let candidates: usize = sets.iter().map(|s| s.candidates.len()).sum();
    let failures: usize = sets.iter().map(|s| s.errors.len()).sum();
    let dest = out(cfg, CANDIDATES);
    write(&dest, &jsonl_bytes(&sets))?;
    Ok(
        json!({"stage": "generate", "videos": sets.len(), "candidates": candidates, "category_failures": failures, "files": [dest]}),
    )
}

fn run_pairs(cfg: &RunConfig) -> Result<Value> {
    let path = input(&cfg.paths.ab_log, "ab_log")?;
    let entries = parse_ab_log(open(path)?).with_context(|| format!("parsing {}", path.display()))?;
    let pair_cfg = PairConfig { seed: derive_seed(cfg.seed, Stage::Pairs.name()), ..cfg.pairs.clone() };
    let (pairs, report) = build_pairs(&entries, &pair_cfg);
    let (train_set, eval_set) = split(&pairs, &pair_cfg)?;
    let (train_path, eval_path) = (out(cfg, PAIRS_TRAIN), out(cfg, PAIRS_EVAL));
    write(&train_path, &jsonl_bytes(&train_set))?;
    write(&eval_path, &jsonl_bytes(&eval_set))?;
    Ok(json!({
        "stage": "pairs",
        "pairs": pairs.len(),
        "train": train_set.len(),
        "eval": eval_set.len(),
        "skipped": report,
        "files": [train_path, eval_path],
    }))
}

fn run_train(cfg: &RunConfig) -> Result<Value> {
    if cfg.model.remote.is_some() {
        bail!("model.remote is set; a remote scorer cannot be trained here");
    }
    let train_set: Vec<PairSample> = read_jsonl(&out(cfg, PAIRS_TRAIN))?;
    let eval_set: Vec<PairSample> = read_jsonl(&out(cfg, PAIRS_EVAL))?;
    let seed = derive_seed(cfg.seed, Stage::TrainRm.name());
    let init = RewardModelState::new(cfg.model.encoder.clone(), cfg.model.hidden, seed)?;
    let train_cfg = TrainConfig { seed: splitmix64(seed), ..cfg.train.clone() };
    let (state, trace) = train(&init, &train_set, &eval_set, &train_cfg)?;
    let (model_dest, trace_dest) = (model_path(cfg), out(cfg, TRAIN_TRACE));
    write(&model_dest, &save_state(&state))?;
    let mut trace_bytes = serde_json::to_vec_pretty(&trace)?;
    trace_bytes.push(b'\n');
    write(&trace_dest, &trace_bytes)?;
    let last = trace.last();
    Ok(json!({
        "stage": "train-rm",
        "train_pairs": train_set.len(),
        "eval_pairs": eval_set.len(),
        "epochs": trace.len(),
        "final_train_loss": last.map(|e| e.train_loss),
        "final_eval_accuracy": last.and_then(|e| e.eval_accuracy),
        "files": [model_dest, trace_dest],
    }))
}

fn report_format(cfg: &RunConfig) -> Result<ReportFormat> {
    Ok(cfg.analytics.format.parse()?)
}

fn emit(cfg: &RunConfig, report: &Report) -> Result<Vec<PathBuf>> {
    let format = report_format(cfg)?;
    let mut files = Vec::new();
    for (name, bytes) in render_report(report, format) {
        let dest = out(cfg, &name);
        write(&dest, &bytes)?;
        files.push(dest);
    }
    Ok(files)
}

fn run_eval(cfg: &RunConfig) -> Result<Value> {
    report_format(cfg)?;
    let eval_set: Vec<PairSample> = read_jsonl(&out(cfg, PAIRS_EVAL))?;
    let scorer = scorer(cfg)?;
    let table = stratified_accuracy(scorer.as_ref(), &stratify_by_gap(&eval_set)?)?;
    let overall = table.overall().accuracy;
    let files = emit(cfg, &Report { accuracy: Some(table), ..Report::default() })?;
    Ok(json!({"stage": "eval-rm", "eval_pairs": eval_set.len(), "overall_accuracy": overall, "files": files}))
}

fn run_select(cfg: &RunConfig) -> Result<Value> {
    let sets: Vec<CandidateSet> = read_jsonl(&out(cfg, CANDIDATES))?;
    let scorer = scorer(cfg)?;
    let mut decisions = Vec::with_capacity(sets.len());
    for set in &sets {
        decisions.push(
            choose_push(scorer.as_ref(), set, cfg.selector.tau)
                .with_context(|| format!("selecting for {}", set.video_id))?,
        );
    }
    let replaced = decisions.iter().filter(|d| d.decision == pushforge_core::Decision::Replace).count();
    let dest = out(cfg, DECISIONS);
    write(&dest, &jsonl_bytes(&decisions))?;
    Ok(json!({"stage": "select", "videos": decisions.len(), "replaced": replaced, "files": [dest]}))
}

fn run_analyze(cfg: &RunConfig) -> Result<Value> {
    report_format(cfg)?;
    let mut report = Report::default();
    let eval_path = out(cfg, PAIRS_EVAL);
    let decisions_path = out(cfg, DECISIONS);
    let has_model = cfg.model.remote.is_some() || model_path(cfg).exists();

    if has_model {
        let scorer = scorer(cfg)?;
        let eval_set: Option<Vec<PairSample>> = if eval_path.exists() { Some(read_jsonl(&eval_path)?) } else { None };
        if let Some(eval_set) = eval_set.as_ref().filter(|e| !e.is_empty()) {
            report.accuracy = Some(stratified_accuracy(scorer.as_ref(), &stratify_by_gap(eval_set)?)?);
        }
        if let Some(log_path) = &cfg.paths.ab_log {
            let mut entries =
                parse_ab_log(open(log_path)?).with_context(|| format!("parsing {}", log_path.display()))?;
            if let Some(eval_set) = &eval_set {
                let videos: BTreeSet<&str> = eval_set.iter().map(|p| p.video_id.as_str()).collect();
                entries.retain(|e| videos.contains(e.video_id.as_str()));
            }
            let outcomes = outcomes_from_ab_log(scorer.as_ref(), &entries, &cfg.analytics.base_arm_id)?;
            if outcomes.is_empty() {
                warn!("no video has both a base arm and an experimental arm; skipping the increment curve");
            } else {
                let grid = cfg.analytics.thresholds.clone().unwrap_or_else(|| default_thresholds(&outcomes));
                let points = click_increment_curve(&outcomes, &grid, cfg.analytics.normalize_exposure)?;
                let auc = if points.is_empty() { 0.0 } else { curve_auc(&points)? };
                report.curve =
                    Some(IncrementCurve { normalize_exposure: cfg.analytics.normalize_exposure, auc, points });
            }
        }
    }
    if decisions_path.exists() {
        let decisions: Vec<SelectionDecision> = read_jsonl(&decisions_path)?;
        if !decisions.is_empty() {
            report.style = Some(style_distribution(&decisions, &cfg.taxonomy)?);
        }
    }
    if report == Report::default() {
        bail!("nothing to analyze: need a reward model with eval pairs or an A/B log, or a decisions file");
    }
    let files = emit(cfg, &report)?;
    Ok(json!({
        "stage": "analyze",
        "overall_accuracy": report.accuracy.as_ref().and_then(|t| t.overall().accuracy),
        "curve_auc": report.curve.as_ref().map(|c| c.auc),
        "base_share": report.style.as_ref().map(|s| s.base_share),
        "files": files,
    }))
}
