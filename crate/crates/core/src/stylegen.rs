//! Control-category machinery: style taxonomy, classifier prompts with
//! majority voting, style-conditioned generation prompts, and candidate
//! generation.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PushRecord;
use crate::gateway::{complete_batch, ChatMessage, ChatRequest, CompletionBackend, GatewayError, CLASSIFY_SUFFIX};
use crate::hashing::{fnv1a64, fnv1a64_extend, splitmix64};
use crate::text::normalize_text;

pub const FALLBACK_CATEGORY: &str = "Other";

#[derive(Debug, Error)]
pub enum StyleError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("invalid taxonomy: {0}")]
    Taxonomy(String),
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error("generation failed for every category of {push_id}")]
    Generation { push_id: String, failures: Vec<CategoryFailure> },
}

/// Ordered list of style names; always contains [`FALLBACK_CATEGORY`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct StyleTaxonomy {
    names: Vec<String>,
}

impl StyleTaxonomy {
    pub fn new<I, S>(names: I) -> Result<Self, StyleError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut seen = HashSet::new();
        for n in &names {
            let key = normalize_text(n).to_lowercase();
            if key.is_empty() {
                return Err(StyleError::Taxonomy("empty category name".into()));
            }
            if !seen.insert(key) {
                return Err(StyleError::Taxonomy(format!("duplicate category {n:?}")));
            }
        }
        if !names.iter().any(|n| n == FALLBACK_CATEGORY) {
            return Err(StyleError::Taxonomy(format!("{FALLBACK_CATEGORY:?} must be present")));
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    /// Maps a free-form answer onto a category name: case-insensitive after
    /// whitespace normalization, otherwise `None`.
    pub fn match_answer(&self, answer: &str) -> Option<&str> {
        let key = normalize_text(answer).to_lowercase();
        self.names.iter().find(|n| normalize_text(n).to_lowercase() == key).map(String::as_str)
    }
}

impl Default for StyleTaxonomy {
    fn default() -> Self {
        Self::new(["Suspense", "Emotion", "Practical", "Plot", "General", "Other"]).expect("default taxonomy is valid")
    }
}

impl TryFrom<Vec<String>> for StyleTaxonomy {
    type Error = StyleError;

    fn try_from(names: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(names)
    }
}

impl From<StyleTaxonomy> for Vec<String> {
    fn from(t: StyleTaxonomy) -> Self {
        t.names
    }
}

fn definition(name: &str) -> String {
    match name {
        "Suspense" => "withholds the payoff and teases a twist or an unanswered question".into(),
        "Emotion" => "appeals to feelings such as warmth, nostalgia, pride or sympathy".into(),
        "Practical" => "promises a useful tip, skill, saving or piece of know-how".into(),
        "Plot" => "summarizes what happens in the video as a short story".into(),
        "General" => "plain descriptive announcement of the content".into(),
        "Other" => "anything that fits none of the categories above".into(),
        other => format!("notifications written in the {other} style"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub repetition_penalty: f64,
    pub max_tokens: u32,
    pub n_per_category: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self { temperature: 0.8, top_p: 0.9, repetition_penalty: 1.1, max_tokens: 64, n_per_category: 2 }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), StyleError> {
        if !(self.temperature >= 0.0) || !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(StyleError::Usage("temperature must be >= 0 and top_p in (0, 1]".into()));
        }
        if self.n_per_category == 0 {
            return Err(StyleError::Usage("n_per_category must be >= 1".into()));
        }
        Ok(())
    }
}

/// Classifier prompt for one push. Models are filled in by the backend.
pub fn build_category_prompt(taxonomy: &StyleTaxonomy, push_text: &str) -> Result<ChatRequest, StyleError> {
    let text = normalize_text(push_text);
    if text.is_empty() {
        return Err(StyleError::Usage("push text is empty".into()));
    }
    let mut prompt = String::from(
        "You label the writing style of short push notifications for videos.\n\
         Choose the single category that best describes the notification.\n\
         Categories:\n",
    );
    for name in taxonomy.names() {
        prompt.push_str(&format!("- {name}: {}\n", definition(name)));
    }
    prompt.push_str("### PUSH\n");
    prompt.push_str(&text);
    prompt.push('\n');
    prompt.push_str(CLASSIFY_SUFFIX);
    Ok(ChatRequest {
        model_name: String::new(),
        messages: vec![ChatMessage::user(prompt)],
        temperature: 0.2,
        top_p: 1.0,
        repetition_penalty: 1.0,
        max_tokens: 8,
        seed: None,
    })
}

/// Strict-majority vote over `k` answers; abstentions (unmatched answers)
/// count toward `k`. Falls back to [`FALLBACK_CATEGORY`].
pub fn majority_vote<'a>(taxonomy: &'a StyleTaxonomy, answers: &[String]) -> &'a str {
    let mut counts = vec![0usize; taxonomy.len()];
    for a in answers {
        if let Some(name) = taxonomy.match_answer(a) {
            let idx = taxonomy.names().iter().position(|n| n == name).expect("matched name");
            counts[idx] += 1;
        }
    }
    counts
        .iter()
        .position(|&c| 2 * c > answers.len())
        .map(|i| taxonomy.names()[i].as_str())
        .unwrap_or(FALLBACK_CATEGORY)
}

/// Asks the backend `k` times (distinct seeds) and returns the majority
/// category.
pub fn classify_style(
    push_text: &str,
    taxonomy: &StyleTaxonomy,
    backend: &dyn CompletionBackend,
    k: usize,
) -> Result<String, StyleError> {
    if k.is_multiple_of(2) {
        return Err(StyleError::Usage(format!("query count k must be odd and >= 1, got {k}")));
    }
    let base = build_category_prompt(taxonomy, push_text)?;
    let text_hash = fnv1a64(normalize_text(push_text).as_bytes());
    let requests: Vec<ChatRequest> = (0..k as u64)
        .map(|i| ChatRequest { seed: Some(splitmix64(text_hash.wrapping_add(i))), ..base.clone() })
        .collect();
    let mut answers = Vec::with_capacity(k);
    for r in complete_batch(backend, &requests) {
        answers.push(r?.content);
    }
    Ok(majority_vote(taxonomy, &answers).to_string())
}

/// Generation prompt: `### TASK`, `### STYLE`, `### CONTENT` blocks in that
/// order.
pub fn build_generation_prompt(
    task_prompt: &str,
    category: &str,
    caption: &str,
    taxonomy: &StyleTaxonomy,
    params: &SamplingParams,
) -> Result<ChatRequest, StyleError> {
    if task_prompt.trim().is_empty() {
        return Err(StyleError::Usage("task prompt is empty".into()));
    }
    if caption.trim().is_empty() {
        return Err(StyleError::Usage("caption is empty".into()));
    }
    if !taxonomy.contains(category) {
        return Err(StyleError::Usage(format!("category {category:?} is not in the taxonomy")));
    }
    let prompt = format!("### TASK\n{}\n### STYLE\n{}\n### CONTENT\n{}", task_prompt.trim(), category, caption.trim());
    Ok(ChatRequest {
        model_name: String::new(),
        messages: vec![ChatMessage::user(prompt)],
        temperature: params.temperature,
        top_p: params.top_p,
        repetition_penalty: params.repetition_penalty,
        max_tokens: params.max_tokens,
        seed: None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub category: String,
    pub text: String,
    pub seed: u64,
    pub model: String,
    pub finish_reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryFailure {
    pub category: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub video_id: String,
    pub base_text: String,
    pub candidates: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<CategoryFailure>,
}

/// Sampling seed for the `index`-th candidate of `category` for a push.
pub fn candidate_seed(push_id: &str, category: &str, index: usize) -> u64 {
    let mut h = fnv1a64(push_id.as_bytes());
    h = fnv1a64_extend(h, &[0]);
    h = fnv1a64_extend(h, category.as_bytes());
    h = fnv1a64_extend(h, &[0]);
    h = fnv1a64_extend(h, &(index as u64).to_le_bytes());
    splitmix64(h)
}

/// Generates `n_per_category` candidates per taxonomy category. A category
/// with no successful attempt is reported in `errors`; if no category
/// succeeds the whole call fails.
pub fn generate_candidates(
    record: &PushRecord,
    taxonomy: &StyleTaxonomy,
    params: &SamplingParams,
    task_prompt: &str,
    backend: &dyn CompletionBackend,
) -> Result<CandidateSet, StyleError> {
    params.validate()?;
    let caption = record
        .caption
        .as_deref()
        .ok_or_else(|| StyleError::Usage(format!("record {} has no caption", record.push_id)))?;

    let mut jobs = Vec::new();
    let mut requests = Vec::new();
    for category in taxonomy.names() {
        let base = build_generation_prompt(task_prompt, category, caption, taxonomy, params)?;
        for index in 0..params.n_per_category {
            let seed = candidate_seed(&record.push_id, category, index);
            jobs.push((category.as_str(), seed));
            requests.push(ChatRequest { seed: Some(seed), ..base.clone() });
        }
    }
    let results = complete_batch(backend, &requests);

    let mut candidates = Vec::new();
    let mut errors = Vec::new();
    let mut results = jobs.into_iter().zip(results).peekable();
    for category in taxonomy.names() {
        let mut ok = 0;
        let mut last_err = String::new();
        while let Some(((_, seed), result)) = results.next_if(|((c, _), _)| *c == category) {
            match result {
                Ok(resp) if !normalize_text(&resp.content).is_empty() => {
                    ok += 1;
                    candidates.push(Candidate {
                        category: category.clone(),
                        text: resp.content.trim().to_string(),
                        seed,
                        model: backend.model_name().to_string(),
                        finish_reason: resp.finish_reason,
                    });
                }
                Ok(_) => last_err = "empty completion".into(),
                Err(e) => last_err = e.to_string(),
            }
        }
        if ok == 0 {
            log::warn!("{}: no candidate for category {category}: {last_err}", record.push_id);
            errors.push(CategoryFailure { category: category.clone(), message: last_err });
        }
    }
    if candidates.is_empty() {
        return Err(StyleError::Generation { push_id: record.push_id.clone(), failures: errors });
    }
    Ok(dedup_candidates(CandidateSet {
        video_id: record.video_id.clone(),
        base_text: record.text.clone(),
        candidates,
        errors,
    }))
}

/// Drops candidates equal (under normalization) to the base text or to an
/// earlier candidate.
pub fn dedup_candidates(mut set: CandidateSet) -> CandidateSet {
    let mut seen: HashSet<String> = HashSet::new();
    seen.insert(normalize_text(&set.base_text));
    set.candidates.retain(|c| seen.insert(normalize_text(&c.text)));
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{derive_rates, EventCounts, Source};
    use crate::gateway::{ChatResponse, MockBackend};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn record() -> PushRecord {
        PushRecord {
            video_id: "v1".into(),
            push_id: "p1".into(),
            text: "A cat does something odd".into(),
            caption: Some("A grey cat opens the fridge and steals a sausage".into()),
            original_title: "cat".into(),
            topics: vec![],
            platform_category: "pets".into(),
            tag_cluster: "pets".into(),
            stats: derive_rates(EventCounts::default(), 100).unwrap(),
            source: Source::Human,
            timestamp: 0,
        }
    }

    /// Replays scripted answers in call order.
    struct Scripted {
        answers: Vec<&'static str>,
        calls: AtomicUsize,
    }

    impl CompletionBackend for Scripted {
        fn complete(&self, _: &ChatRequest) -> Result<ChatResponse, GatewayError> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(ChatResponse { content: self.answers[i].into(), finish_reason: "stop".into() })
        }
        fn model_name(&self) -> &str {
            "scripted"
        }
    }

    fn scripted(answers: Vec<&'static str>) -> Scripted {
        Scripted { answers, calls: AtomicUsize::new(0) }
    }

    #[test]
    fn taxonomy_rules() {
        assert_eq!(StyleTaxonomy::default().len(), 6);
        assert!(StyleTaxonomy::new(["A", "B"]).is_err());
        assert!(StyleTaxonomy::new(["A", "a", "Other"]).is_err());
        assert!(StyleTaxonomy::new(["A", " ", "Other"]).is_err());
        let t: StyleTaxonomy = serde_json::from_str(r#"["Hype","Other"]"#).unwrap();
        assert_eq!(t.names(), ["Hype", "Other"]);
        assert!(serde_json::from_str::<StyleTaxonomy>(r#"["Hype"]"#).is_err());
    }

    #[test]
    fn answer_matching_is_case_and_space_insensitive() {
        let t = StyleTaxonomy::default();
        assert_eq!(t.match_answer("  suspense \n"), Some("Suspense"));
        assert_eq!(t.match_answer("Suspense."), None);
        assert_eq!(t.match_answer("I think Suspense"), None);
    }

    #[test]
    fn category_prompt_lists_taxonomy_in_order() {
        let t = StyleTaxonomy::default();
        let req = build_category_prompt(&t, "t").unwrap();
        let p = &req.messages[0].content;
        let listed: Vec<&str> =
            p.lines().filter_map(|l| l.strip_prefix("- ")).map(|l| l.split(':').next().unwrap()).collect();
        assert_eq!(listed, t.names());
        assert!(p.ends_with(CLASSIFY_SUFFIX));
        assert_eq!(req.temperature, 0.2);
        assert_eq!(build_category_prompt(&t, "t").unwrap(), req);
        assert!(matches!(build_category_prompt(&t, "  "), Err(StyleError::Usage(_))));
    }

    #[test]
    fn votes() {
        let t = StyleTaxonomy::default();
        let run = |a: Vec<&'static str>| classify_style("x", &t, &scripted(a), 3).unwrap();
        assert_eq!(run(vec!["Suspense", "Suspense", "Suspense"]), "Suspense");
        assert_eq!(run(vec!["Suspense", "Emotion", "Suspense"]), "Suspense");
        assert_eq!(run(vec!["Suspense", "Emotion", "Plot"]), "Other");
        assert_eq!(run(vec!["Suspense", "blah", "suspense"]), "Suspense");
        assert_eq!(run(vec!["Suspense", "blah", "nope"]), "Other");
    }

    #[test]
    fn classify_rejects_even_k() {
        let t = StyleTaxonomy::default();
        assert!(matches!(classify_style("x", &t, &MockBackend::new(1), 2), Err(StyleError::Usage(_))));
    }

    #[test]
    fn vote_is_permutation_stable() {
        let t = StyleTaxonomy::default();
        let answers = ["Plot", "Emotion", "Plot", "junk", "Plot"].map(String::from);
        let expected = majority_vote(&t, &answers);
        assert_eq!(expected, "Plot");
        let mut perm = answers.to_vec();
        for i in 0..20 {
            perm.rotate_left(1 + i % 3);
            perm.swap(0, i % 5);
            assert_eq!(majority_vote(&t, &perm), expected);
        }
    }

    #[test]
    fn generation_prompt_blocks_in_order() {
        let t = StyleTaxonomy::default();
        let p = SamplingParams::default();
        let req = build_generation_prompt("T", "Suspense", "C", &t, &p).unwrap();
        assert_eq!(req.messages[0].content, "### TASK\nT\n### STYLE\nSuspense\n### CONTENT\nC");
        assert_eq!(req.top_p, 0.9);
        assert_eq!(build_generation_prompt("T", "Suspense", "C", &t, &p).unwrap(), req);
        assert!(build_generation_prompt("T", "Clickbait", "C", &t, &p).is_err());
        assert!(build_generation_prompt("T", "Plot", " ", &t, &p).is_err());
    }

    #[test]
    fn generation_with_mock_is_bounded_and_tagged() {
        let t = StyleTaxonomy::default();
        let p = SamplingParams::default();
        let backend = MockBackend::new(42);
        let set = generate_candidates(&record(), &t, &p, "Write a push.", &backend).unwrap();
        assert!(set.candidates.len() <= 12);
        assert!(!set.candidates.is_empty());
        assert_eq!(set.base_text, record().text);
        for c in &set.candidates {
            assert!(t.contains(&c.category));
            assert!(c.text.contains(&format!("[{}]", c.category)));
        }
        let again = generate_candidates(&record(), &t, &p, "Write a push.", &backend).unwrap();
        assert_eq!(set, again);
    }

    /// Fails every request whose prompt is conditioned on one category.
    struct FailOne(&'static str);

    impl CompletionBackend for FailOne {
        fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
            if req.messages[0].content.contains(&format!("### STYLE\n{}\n", self.0)) {
                return Err(GatewayError::Unavailable { attempts: 3, message: "HTTP 503".into() });
            }
            Ok(crate::gateway::mock_complete(1, req))
        }
        fn model_name(&self) -> &str {
            "fail-one"
        }
    }

    #[test]
    fn one_failing_category_is_reported() {
        let t = StyleTaxonomy::default();
        let set = generate_candidates(&record(), &t, &SamplingParams::default(), "W", &FailOne("Plot")).unwrap();
        let cats: HashSet<&str> = set.candidates.iter().map(|c| c.category.as_str()).collect();
        assert_eq!(cats.len(), 5);
        assert!(!cats.contains("Plot"));
        assert_eq!(set.errors.len(), 1);
        assert_eq!(set.errors[0].category, "Plot");
    }

    #[test]
    fn total_failure_is_an_error() {
        let t = StyleTaxonomy::new(["Plot", "Other"]).unwrap();
        struct Down;
        impl CompletionBackend for Down {
            fn complete(&self, _: &ChatRequest) -> Result<ChatResponse, GatewayError> {
                Err(GatewayError::Unavailable { attempts: 1, message: "down".into() })
            }
            fn model_name(&self) -> &str {
                "down"
            }
        }
        let err = generate_candidates(&record(), &t, &SamplingParams::default(), "W", &Down).unwrap_err();
        assert!(matches!(err, StyleError::Generation { ref failures, .. } if failures.len() == 2));
    }

    fn cand(text: &str) -> Candidate {
        Candidate {
            category: "Plot".into(),
            text: text.into(),
            seed: 0,
            model: "m".into(),
            finish_reason: "stop".into(),
        }
    }

    #[test]
    fn dedup_rules() {
        let set = CandidateSet {
            video_id: "v".into(),
            base_text: "Base push".into(),
            candidates: vec![cand("Hello  world"), cand("Hello world"), cand(" Base   push "), cand("Other")],
            errors: vec![],
        };
        let out = dedup_candidates(set.clone());
        let texts: Vec<&str> = out.candidates.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, ["Hello  world", "Other"]);

        let distinct = CandidateSet { candidates: vec![cand("a"), cand("b")], ..set };
        assert_eq!(dedup_candidates(distinct.clone()), distinct);
    }

    #[test]
    fn candidate_seeds_are_distinct() {
        let a = candidate_seed("p1", "Plot", 0);
        assert_ne!(a, candidate_seed("p1", "Plot", 1));
        assert_ne!(a, candidate_seed("p1", "Emotion", 0));
        assert_ne!(a, candidate_seed("p2", "Plot", 0));
        assert_eq!(a, candidate_seed("p1", "Plot", 0));
    }
}
