//! Training-data factory: explanation augmentation, ICL and targeted
//! generation, ROUGE-L near-duplicate filtering and Alpaca emission.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, DatasetRecord, RecordSource};
use crate::detector::{parse_numbered_entries, RosterIndex};
use crate::exec::{self, ExecMode};
use crate::gateway::{self, count_tokens, ChatBackend, ChatRequest, Usage};
use crate::metrics::{imbalance_ratio, value_counts, ValueCount};
use crate::prompts::{
    detector_instruction, format_numbered_entries, render_datagen_prompt,
    render_explanation_prompt, render_reflection_record, DatagenPayload, IclExample, PromptError,
    ICL_SLATE_SIZE,
};
use crate::values::{LabelVector, TextInstance, ValueDef, ValueSystem};

pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.7;
/// Explanations longer than this (approximate tokens) are kept but flagged.
pub const EXPLANATION_TOKEN_CAP: u64 = 20;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("ICL generation needs at least {needed} explained seed records, found {got}")]
    NotEnoughSeeds { needed: usize, got: usize },
    #[error("targeted generation needs at least one target value")]
    NoTargets,
    #[error("unknown target value {0:?}")]
    UnknownTarget(String),
    #[error("k = {k} exceeds the value system size {size}")]
    TooManyValues { k: usize, size: usize },
    #[error("dedup threshold must be in (0, 1], got {0}")]
    Threshold(f64),
    #[error("record {id:?} labels {value:?} but has no explanation for it")]
    Unexplained { id: String, value: String },
    #[error("record {id:?} is labeled for value system {found:?}, expected {expected:?}")]
    WrongSystem {
        id: String,
        found: String,
        expected: String,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

/// A labeled text with per-value explanations and its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedRecord {
    pub instance: TextInstance,
    pub labels: LabelVector,
    pub explanations: BTreeMap<String, String>,
    pub source: RecordSource,
}

impl AnnotatedRecord {
    pub fn from_dataset(
        record: &DatasetRecord,
        system: &ValueSystem,
    ) -> Result<Self, DatasetError> {
        Ok(Self {
            instance: record.instance(),
            labels: record.label_vector(system)?,
            explanations: record.explanations.clone(),
            source: record.source,
        })
    }

    pub fn to_dataset(&self, system: &ValueSystem) -> DatasetRecord {
        DatasetRecord::from_parts(
            &self.instance,
            &self.labels,
            system,
            self.explanations.clone(),
            self.source,
        )
    }

    /// Positive value indices without a nonempty explanation.
    pub fn missing_explanations(&self, system: &ValueSystem) -> Vec<usize> {
        self.labels
            .positives()
            .filter(|&i| {
                self.explanations
                    .get(&system.values()[i].name)
                    .is_none_or(|e| e.trim().is_empty())
            })
            .collect()
    }

    pub fn is_explained(&self, system: &ValueSystem) -> bool {
        self.missing_explanations(system).is_empty()
    }
}

/// One supervised fine-tuning example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

pub fn write_alpaca(path: &Path, records: &[TrainingRecord]) -> Result<(), DatagenError> {
    let body = serde_json::to_string_pretty(records).expect("training records serialize");
    fs::write(path, body + "\n").map_err(|e| DatagenError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn read_alpaca(path: &Path) -> Result<Vec<TrainingRecord>, DatagenError> {
    let file_err = |message: String| DatagenError::File {
        path: path.display().to_string(),
        message,
    };
    let body = fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
    serde_json::from_str(&body).map_err(|e| file_err(e.to_string()))
}

// ---------------------------------------------------------------------------
// explanation augmentation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub length_cap: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            model: "gpt-4o-mini".into(),
            temperature: 0.0,
            max_output_tokens: 64,
            length_cap: EXPLANATION_TOKEN_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExplanationIssue {
    pub id: String,
    pub value: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AugmentReport {
    pub calls: usize,
    pub filled: usize,
    /// Replies over the length cap; stored anyway.
    pub flagged_long: Vec<ExplanationIssue>,
    pub failures: Vec<ExplanationIssue>,
    /// Records left untouched because at least one of their calls failed.
    pub skipped_records: Vec<String>,
    pub usage: Usage,
}

/// Asks for one short explanation per (record, positive value) that lacks
/// one. A record with any failed call is left unchanged and reported.
pub fn augment_explanations(
    backend: &dyn ChatBackend,
    system: &ValueSystem,
    records: Vec<AnnotatedRecord>,
    config: &ExplainConfig,
    mode: ExecMode,
) -> (Vec<AnnotatedRecord>, AugmentReport) {
    let tasks: Vec<(usize, usize)> = records
        .iter()
        .enumerate()
        .flat_map(|(r, rec)| {
            rec.missing_explanations(system)
                .into_iter()
                .map(move |v| (r, v))
        })
        .collect();
    let replies = exec::map(mode, &tasks, |_, &(r, v)| {
        let value = &system.values()[v];
        let prompt = render_explanation_prompt(value, &records[r].instance.text)
            .map_err(|e| e.to_string())?;
        let request = ChatRequest::user(config.model.clone(), prompt)
            .with_temperature(config.temperature)
            .with_max_output_tokens(config.max_output_tokens);
        gateway::complete(backend, &request).map_err(|e| e.to_string())
    });

    let mut report = AugmentReport::default();
    let mut fresh: Vec<BTreeMap<String, String>> = vec![BTreeMap::new(); records.len()];
    let mut failed = vec![false; records.len()];
    for (&(r, v), reply) in tasks.iter().zip(replies) {
        let id = records[r].instance.id.clone();
        let value = system.values()[v].name.clone();
        match reply {
            Ok(ex) => {
                report.calls += 1;
                report.usage += ex.usage;
                let text = ex.response_text.trim().to_string();
                let tokens = count_tokens(&text);
                if tokens > config.length_cap {
                    report.flagged_long.push(ExplanationIssue {
                        id,
                        value: value.clone(),
                        detail: format!("{tokens} tokens"),
                    });
                }
                fresh[r].insert(value, text);
            }
            Err(detail) => {
                report.failures.push(ExplanationIssue { id, value, detail });
                failed[r] = true;
            }
        }
    }
    let records = records
        .into_iter()
        .zip(fresh)
        .zip(failed)
        .map(|((mut rec, new), failed)| {
            if failed {
                report.skipped_records.push(rec.instance.id.clone());
            } else {
                report.filled += new.len();
                rec.explanations.extend(new);
            }
            rec
        })
        .collect();
    (records, report)
}

// ---------------------------------------------------------------------------
// ROUGE-L and near-duplicate filtering

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn lcs_f1(lcs: usize, len_a: usize, len_b: usize) -> f64 {
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / len_b as f64;
    let r = lcs as f64 / len_a as f64;
    2.0 * p * r / (p + r)
}

fn rouge_tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

/// LCS-based F-measure over lowercased whitespace tokens. Empty input on
/// either side scores 0.
pub fn rouge_l(a: &str, b: &str) -> f64 {
    let (ta, tb) = (rouge_tokens(a), rouge_tokens(b));
    lcs_f1(lcs_len(&ta, &tb), ta.len(), tb.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DuplicateOf {
    /// Position in the index: corpus texts first, then admitted ones.
    pub index: usize,
    pub score: f64,
}

/// Growing set of texts that new text is checked against.
#[derive(Debug, Clone)]
pub struct DedupIndex {
    threshold: f64,
    vocab: HashMap<String, u32>,
    docs: Vec<Vec<u32>>,
    mode: ExecMode,
}

impl DedupIndex {
    pub fn new(threshold: f64, mode: ExecMode) -> Result<Self, DatagenError> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(DatagenError::Threshold(threshold));
        }
        Ok(Self {
            threshold,
            vocab: HashMap::new(),
            docs: Vec::new(),
            mode,
        })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Adds text without checking it.
    pub fn insert(&mut self, text: &str) {
        let ids = rouge_tokens(text)
            .into_iter()
            .map(|t| {
                let next = self.vocab.len() as u32;
                *self.vocab.entry(t).or_insert(next)
            })
            .collect();
        self.docs.push(ids);
    }

    /// First indexed text scoring above the threshold against `text`.
    pub fn first_match(&self, text: &str) -> Option<DuplicateOf> {
        // tokens outside the vocabulary cannot match any indexed text
        let q: Vec<u32> = rouge_tokens(text)
            .iter()
            .map(|t| self.vocab.get(t).copied().unwrap_or(u32::MAX))
            .collect();
        if q.is_empty() {
            return None;
        }
        let threshold = self.threshold;
        let scores = exec::map(self.mode, &self.docs, |_, d| {
            // F1 is at most 2·min/(|a|+|b|); skip the DP when that cannot pass
            let bound = 2.0 * q.len().min(d.len()) as f64 / (q.len() + d.len()) as f64;
            if bound <= threshold {
                return None;
            }
            let s = lcs_f1(lcs_len(&q, d), q.len(), d.len());
            (s > threshold).then_some(s)
        });
        scores
            .into_iter()
            .enumerate()
            .find_map(|(index, s)| s.map(|score| DuplicateOf { index, score }))
    }

    /// Indexes `text` unless it duplicates something already indexed.
    pub fn admit(&mut self, text: &str) -> Result<usize, DuplicateOf> {
        if let Some(d) = self.first_match(text) {
            return Err(d);
        }
        self.insert(text);
        Ok(self.docs.len() - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DedupOutcome {
    /// Input positions, in order.
    pub kept: Vec<usize>,
    pub dropped: Vec<(usize, DuplicateOf)>,
}

/// Scans `texts` in order, dropping any whose ROUGE-L against a corpus text
/// or an earlier kept text exceeds `threshold`.
pub fn dedup_filter<S: AsRef<str>, C: AsRef<str>>(
    texts: &[S],
    corpus: &[C],
    threshold: f64,
    mode: ExecMode,
) -> Result<DedupOutcome, DatagenError> {
    let mut index = DedupIndex::new(threshold, mode)?;
    for c in corpus {
        index.insert(c.as_ref());
    }
    let mut out = DedupOutcome {
        kept: Vec::new(),
        dropped: Vec::new(),
    };
    for (i, t) in texts.iter().enumerate() {
        match index.admit(t.as_ref()) {
            Ok(_) => out.kept.push(i),
            Err(d) => out.dropped.push((i, d)),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// label statistics

/// The `k` values with the fewest positive labels, ties in system order.
pub fn least_frequent_values(
    labels: &[LabelVector],
    system: &ValueSystem,
    k: usize,
) -> Result<Vec<String>, DatagenError> {
    if k > system.len() {
        return Err(DatagenError::TooManyValues {
            k,
            size: system.len(),
        });
    }
    let mut counts = value_counts(labels, system)
        .into_iter()
        .enumerate()
        .collect::<Vec<_>>();
    counts.sort_by_key(|(i, c)| (c.count, *i));
    Ok(counts.into_iter().take(k).map(|(_, c)| c.value).collect())
}

// ---------------------------------------------------------------------------
// generation

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "targets")]
pub enum GenerationKind {
    Icl,
    Targeted(Vec<String>),
}

impl GenerationKind {
    fn source(&self) -> RecordSource {
        match self {
            GenerationKind::Icl => RecordSource::IclGenerated,
            GenerationKind::Targeted(_) => RecordSource::TargetedGenerated,
        }
    }

    fn id_prefix(&self) -> &'static str {
        match self {
            GenerationKind::Icl => "icl",
            GenerationKind::Targeted(_) => "targeted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// Stop once this many records are kept.
    pub count: usize,
    /// Hard cap on generator calls.
    pub call_budget: usize,
    /// Calls issued together per round; dedup runs after each round.
    pub calls_per_round: usize,
    pub dedup_threshold: f64,
    /// Drives slate selection.
    pub seed: u64,
    /// Target values per targeted prompt.
    pub targets_per_prompt: usize,
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            count: 100,
            call_budget: 50,
            calls_per_round: 4,
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
            seed: 0,
            targets_per_prompt: 2,
            model: "gpt-4o-mini".into(),
            temperature: 1.0,
            max_output_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    ParseFailure,
    EmptyText,
    OutOfRoster,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DropCounts {
    pub parse_failure: usize,
    pub empty_text: usize,
    pub out_of_roster: usize,
    pub duplicate: usize,
    /// Valid records generated after the target count was reached.
    pub surplus: usize,
}

impl DropCounts {
    fn add(&mut self, reason: DropReason) {
        match reason {
            DropReason::ParseFailure => self.parse_failure += 1,
            DropReason::EmptyText => self.empty_text += 1,
            DropReason::OutOfRoster => self.out_of_roster += 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerationReport {
    pub kind: GenerationKind,
    pub calls: usize,
    pub failed_calls: usize,
    pub kept: usize,
    pub dropped: DropCounts,
    /// The budget ran out before `count` records were kept.
    pub budget_exhausted: bool,
    pub counts_before: Vec<ValueCount>,
    pub counts_after: Vec<ValueCount>,
    pub ratio_before: Option<f64>,
    pub ratio_after: Option<f64>,
    pub usage: Usage,
}

/// A parsed generated data point, before dedup.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedItem {
    pub text: String,
    pub labels: LabelVector,
    pub explanations: BTreeMap<String, String>,
}

fn data_marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^[ \t]*DATA[ \t]*\d+[ \t]*:").unwrap())
}

fn first_entry_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\s[-–—]\s*\(1\)").unwrap())
}

fn text_marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^[ \t]*(?:Output:[ \t]*)?Text[ \t]*[-–—:]").unwrap())
}

fn explanation_marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)explanation\s*:").unwrap())
}

fn squash(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses a continuation of the ICL prompt. The reply continues after
/// `DATA {next_index}:`, so text before any marker is the first data point.
pub fn parse_icl_reply(
    reply: &str,
    system: &ValueSystem,
) -> Vec<Result<GeneratedItem, DropReason>> {
    let roster = RosterIndex::new(system);
    let mut bounds: Vec<(usize, usize)> = data_marker_re()
        .find_iter(reply)
        .map(|m| (m.start(), m.end()))
        .collect();
    if bounds
        .first()
        .is_none_or(|&(s, _)| !reply[..s].trim().is_empty())
    {
        bounds.insert(0, (0, 0));
    }
    let mut out = Vec::new();
    for (k, &(_, start)) in bounds.iter().enumerate() {
        let end = bounds.get(k + 1).map_or(reply.len(), |&(s, _)| s);
        let seg = reply[start..end].trim();
        if seg.is_empty() {
            continue;
        }
        out.push(parse_icl_segment(seg, system, &roster));
    }
    if out.is_empty() {
        out.push(Err(DropReason::ParseFailure));
    }
    out
}

fn parse_icl_segment(
    seg: &str,
    system: &ValueSystem,
    roster: &RosterIndex,
) -> Result<GeneratedItem, DropReason> {
    let padded = format!(" {seg}");
    let m = first_entry_re()
        .find(&padded)
        .ok_or(DropReason::ParseFailure)?;
    let text = squash(&padded[..m.start()]);
    if text.is_empty() {
        return Err(DropReason::EmptyText);
    }
    let entries = parse_numbered_entries(&padded[m.start()..]);
    if entries.is_empty() {
        return Err(DropReason::ParseFailure);
    }
    let mut labels = LabelVector::zeros(system);
    let mut explanations = BTreeMap::new();
    for e in entries {
        let i = roster.lookup(&e.name).ok_or(DropReason::OutOfRoster)?;
        if e.explanation.is_empty() {
            return Err(DropReason::ParseFailure);
        }
        labels.set(i, true);
        explanations
            .entry(system.values()[i].name.clone())
            .or_insert_with(|| squash(&e.explanation));
    }
    Ok(GeneratedItem {
        text,
        labels,
        explanations,
    })
}

/// Parses `Text - … Explanation: …` pairs; every item is labeled with all
/// of `targets` and shares the one explanation.
pub fn parse_targeted_reply(
    reply: &str,
    system: &ValueSystem,
    targets: &[usize],
) -> Vec<Result<GeneratedItem, DropReason>> {
    let starts: Vec<(usize, usize)> = text_marker_re()
        .find_iter(reply)
        .map(|m| (m.start(), m.end()))
        .collect();
    if starts.is_empty() {
        return vec![Err(DropReason::ParseFailure)];
    }
    starts
        .iter()
        .enumerate()
        .map(|(k, &(_, start))| {
            let end = starts.get(k + 1).map_or(reply.len(), |&(s, _)| s);
            let seg = &reply[start..end];
            let m = explanation_marker_re()
                .find(seg)
                .ok_or(DropReason::ParseFailure)?;
            let text = squash(&seg[..m.start()]);
            let explanation = squash(&seg[m.end()..]);
            if text.is_empty() {
                return Err(DropReason::EmptyText);
            }
            if explanation.is_empty() {
                return Err(DropReason::ParseFailure);
            }
            let mut labels = LabelVector::zeros(system);
            let mut explanations = BTreeMap::new();
            for &i in targets {
                labels.set(i, true);
                explanations.insert(system.values()[i].name.clone(), explanation.clone());
            }
            Ok(GeneratedItem {
                text,
                labels,
                explanations,
            })
        })
        .collect()
}

/// Picks ICL slates so that, round after round, the least-shown values get
/// shown next. Every value carried by some seed appears within a few slates.
struct SlateRotator<'a> {
    seeds: Vec<&'a AnnotatedRecord>,
    shown: Vec<usize>,
    used: Vec<usize>,
    rng: ChaCha8Rng,
}

impl<'a> SlateRotator<'a> {
    fn new(seeds: Vec<&'a AnnotatedRecord>, values: usize, seed: u64) -> Self {
        let n = seeds.len();
        Self {
            seeds,
            shown: vec![0; values],
            used: vec![0; n],
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next_slate(&mut self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.seeds.len()).collect();
        order.shuffle(&mut self.rng);
        let mut chosen: Vec<usize> = Vec::with_capacity(ICL_SLATE_SIZE);
        while chosen.len() < ICL_SLATE_SIZE {
            let open = |s: &usize| !chosen.contains(s);
            let target = (0..self.shown.len())
                .filter(|&v| {
                    order
                        .iter()
                        .filter(|s| open(s))
                        .any(|&s| self.seeds[s].labels.get(v))
                })
                .min_by_key(|&v| (self.shown[v], v));
            let pick = order
                .iter()
                .copied()
                .filter(|s| open(s))
                .filter(|&s| target.is_none_or(|v| self.seeds[s].labels.get(v)))
                .min_by_key(|&s| self.used[s])
                .expect("at least a full slate of seeds");
            self.used[pick] += 1;
            for v in self.seeds[pick].labels.positives() {
                self.shown[v] += 1;
            }
            chosen.push(pick);
        }
        chosen
    }

    fn examples(&self, slate: &[usize], system: &ValueSystem) -> Vec<IclExample> {
        slate
            .iter()
            .map(|&s| {
                let rec = self.seeds[s];
                let entries = rec
                    .labels
                    .positives()
                    .map(|i| {
                        let name = &system.values()[i].name;
                        (name.clone(), clean_explanation(&rec.explanations[name]))
                    })
                    .collect();
                IclExample {
                    text: squash(&rec.instance.text),
                    entries,
                }
            })
            .collect()
    }
}

fn resolve_targets(targets: &[String], system: &ValueSystem) -> Result<Vec<usize>, DatagenError> {
    if targets.is_empty() {
        return Err(DatagenError::NoTargets);
    }
    let roster = RosterIndex::new(system);
    let mut out: Vec<usize> = Vec::new();
    for t in targets {
        let i = roster
            .lookup(t)
            .ok_or_else(|| DatagenError::UnknownTarget(t.clone()))?;
        if !out.contains(&i) {
            out.push(i);
        }
    }
    Ok(out)
}

/// Generates new annotated records from `existing` (the seed pool and dedup
/// corpus). Stops once `config.count` records survive the filters or the
/// call budget is spent; a short result is reported, not an error.
pub fn generate_batch(
    backend: &dyn ChatBackend,
    system: &ValueSystem,
    kind: &GenerationKind,
    existing: &[AnnotatedRecord],
    config: &GenerationConfig,
    mode: ExecMode,
) -> Result<(Vec<AnnotatedRecord>, GenerationReport), DatagenError> {
    for r in existing {
        if r.labels.system_name() != system.name() || r.labels.len() != system.len() {
            return Err(DatagenError::WrongSystem {
                id: r.instance.id.clone(),
                found: r.labels.system_name().to_string(),
                expected: system.name().to_string(),
            });
        }
    }
    let mut rotator = None;
    let mut groups: Vec<Vec<usize>> = Vec::new();
    match kind {
        GenerationKind::Icl => {
            let seeds: Vec<&AnnotatedRecord> = existing
                .iter()
                .filter(|r| r.labels.count_positive() > 0 && r.is_explained(system))
                .collect();
            if seeds.len() < ICL_SLATE_SIZE {
                return Err(DatagenError::NotEnoughSeeds {
                    needed: ICL_SLATE_SIZE,
                    got: seeds.len(),
                });
            }
            rotator = Some(SlateRotator::new(seeds, system.len(), config.seed));
        }
        GenerationKind::Targeted(targets) => {
            let idx = resolve_targets(targets, system)?;
            groups = idx
                .chunks(config.targets_per_prompt.max(1))
                .map(<[usize]>::to_vec)
                .collect();
        }
    }
    let mut index = DedupIndex::new(config.dedup_threshold, mode)?;
    for r in existing {
        index.insert(&r.instance.text);
    }
    let mut taken_ids: HashSet<String> = existing.iter().map(|r| r.instance.id.clone()).collect();
    let mut next_id = 1usize;

    let mut kept: Vec<AnnotatedRecord> = Vec::new();
    let mut dropped = DropCounts::default();
    let (mut calls, mut failed_calls) = (0usize, 0usize);
    let mut usage = Usage::default();
    while kept.len() < config.count && calls < config.call_budget {
        let n = config
            .calls_per_round
            .max(1)
            .min(config.call_budget - calls);
        let mut requests = Vec::with_capacity(n);
        let mut call_targets = Vec::with_capacity(n);
        for j in 0..n {
            let call_index = calls + j;
            let prompt = match (&mut rotator, kind) {
                (Some(rot), _) => {
                    let slate = rot.next_slate();
                    render_datagen_prompt(DatagenPayload::Icl(&rot.examples(&slate, system)))?
                }
                (None, _) => {
                    let group = &groups[call_index % groups.len()];
                    let defs: Vec<ValueDef> =
                        group.iter().map(|&i| system.values()[i].clone()).collect();
                    call_targets.push(group.clone());
                    render_datagen_prompt(DatagenPayload::Targeted(&defs))?
                }
            };
            requests.push(
                ChatRequest::user(config.model.clone(), prompt)
                    .with_temperature(config.temperature)
                    .with_max_output_tokens(config.max_output_tokens)
                    .with_sample_tag(format!("{}/{call_index}", kind.id_prefix())),
            );
        }
        let replies = exec::map(mode, &requests, |_, r| gateway::complete(backend, r));
        calls += n;
        for (j, reply) in replies.into_iter().enumerate() {
            let ex = match reply {
                Ok(ex) => ex,
                Err(e) => {
                    log::warn!("generation call {} failed: {e}", calls - n + j);
                    failed_calls += 1;
                    continue;
                }
            };
            usage += ex.usage;
            let items = match kind {
                GenerationKind::Icl => parse_icl_reply(&ex.response_text, system),
                GenerationKind::Targeted(_) => {
                    parse_targeted_reply(&ex.response_text, system, &call_targets[j])
                }
            };
            for item in items {
                let item = match item {
                    Ok(item) => item,
                    Err(reason) => {
                        dropped.add(reason);
                        continue;
                    }
                };
                if kept.len() >= config.count {
                    dropped.surplus += 1;
                    continue;
                }
                if index.admit(&item.text).is_err() {
                    dropped.duplicate += 1;
                    continue;
                }
                let id = loop {
                    let id = format!("{}-{next_id:06}", kind.id_prefix());
                    next_id += 1;
                    if taken_ids.insert(id.clone()) {
                        break id;
                    }
                };
                kept.push(AnnotatedRecord {
                    instance: TextInstance::new(id, item.text),
                    labels: item.labels,
                    explanations: item.explanations,
                    source: kind.source(),
                });
            }
        }
    }
    let counts_before = value_counts(existing.iter().map(|r| &r.labels), system);
    let counts_after = value_counts(existing.iter().chain(&kept).map(|r| &r.labels), system);
    let report = GenerationReport {
        kind: kind.clone(),
        calls,
        failed_calls,
        kept: kept.len(),
        dropped,
        budget_exhausted: kept.len() < config.count,
        ratio_before: imbalance_ratio(&counts_before),
        ratio_after: imbalance_ratio(&counts_after),
        counts_before,
        counts_after,
        usage,
    };
    Ok((kept, report))
}

// ---------------------------------------------------------------------------
// Alpaca emission

fn paren_number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\((\d+)\)").unwrap())
}

/// Single-line explanation that cannot be mistaken for an entry marker.
pub fn clean_explanation(e: &str) -> String {
    let flat = squash(e);
    let flat = flat.trim_end_matches(';').trim_end();
    paren_number_re().replace_all(flat, "[$1]").into_owned()
}

/// Detector response for a record with no positive values.
pub const NO_VALUES_RESPONSE: &str = "None.";

/// Detector-format training records, preceded by one definition-reflection
/// record per value when `include_reflection` is set.
pub fn emit_alpaca(
    records: &[AnnotatedRecord],
    system: &ValueSystem,
    include_reflection: bool,
) -> Result<Vec<TrainingRecord>, DatagenError> {
    let mut out =
        Vec::with_capacity(records.len() + if include_reflection { system.len() } else { 0 });
    if include_reflection {
        out.extend(system.values().iter().map(|v| {
            let s = render_reflection_record(v);
            TrainingRecord {
                instruction: s.instruction,
                input: s.input,
                output: s.response,
            }
        }));
    }
    let instruction = detector_instruction(system);
    for r in records {
        if r.labels.system_name() != system.name() || r.labels.len() != system.len() {
            return Err(DatagenError::WrongSystem {
                id: r.instance.id.clone(),
                found: r.labels.system_name().to_string(),
                expected: system.name().to_string(),
            });
        }
        let mut entries = Vec::new();
        for i in r.labels.positives() {
            let name = &system.values()[i].name;
            let e = r
                .explanations
                .get(name)
                .map(|e| clean_explanation(e))
                .unwrap_or_default();
            if e.is_empty() {
                return Err(DatagenError::Unexplained {
                    id: r.instance.id.clone(),
                    value: name.clone(),
                });
            }
            entries.push((name.as_str(), e));
        }
        let output = if entries.is_empty() {
            NO_VALUES_RESPONSE.to_string()
        } else {
            format_numbered_entries(&entries, "\n")
        };
        out.push(TrainingRecord {
            instruction: instruction.clone(),
            input: r.instance.text.trim().to_string(),
            output,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::parse_detector_response;
    use crate::gateway::{FnBackend, ScriptedBackend};

    fn schwartz() -> ValueSystem {
        ValueSystem::schwartz()
    }

    fn record(
        system: &ValueSystem,
        id: &str,
        text: &str,
        labels: &[&str],
        explained: bool,
    ) -> AnnotatedRecord {
        let lv = LabelVector::from_names(system, labels).unwrap();
        let explanations = if explained {
            labels
                .iter()
                .map(|l| (l.to_string(), format!("it concerns {l}")))
                .collect()
        } else {
            BTreeMap::new()
        };
        AnnotatedRecord {
            instance: TextInstance::new(id, text),
            labels: lv,
            explanations,
            source: RecordSource::Original,
        }
    }

    #[test]
    fn rouge_worked_example() {
        let s = rouge_l("the cat sat on the mat", "the cat lay on the mat");
        assert!((s - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(rouge_l("a b c", "A B C"), 1.0);
        assert_eq!(rouge_l("a b", "c d"), 0.0);
        assert_eq!(rouge_l("", "a"), 0.0);
        assert_eq!(rouge_l("   ", ""), 0.0);
    }

    #[test]
    fn rouge_uneven_lengths() {
        // LCS 2, P = 2/4, R = 2/2 -> F1 = 2/3
        let s = rouge_l("x y", "x a y b");
        assert!((s - 2.0 / 3.0).abs() < 1e-12);
        assert!((rouge_l("x a y b", "x y") - s).abs() < 1e-12);
    }

    #[test]
    fn dedup_greedy_order() {
        let corpus = ["we should ban human cloning"];
        let texts = [
            "We should ban human cloning",
            "a completely different sentence here",
            "a completely different sentence here",
            "zoos should be abolished now",
        ];
        let out = dedup_filter(&texts, &corpus, 0.7, ExecMode::Sequential).unwrap();
        assert_eq!(out.kept, vec![1, 3]);
        assert_eq!(out.dropped[0].0, 0);
        assert_eq!(out.dropped[0].1.index, 0);
        assert_eq!(out.dropped[1].0, 2);
        assert_eq!(out.dropped[1].1.index, 1);
        assert!(dedup_filter(&texts, &corpus, 0.0, ExecMode::Sequential).is_err());
        assert!(dedup_filter(&texts, &corpus, 1.5, ExecMode::Sequential).is_err());
    }

    #[test]
    fn dedup_modes_agree() {
        let texts: Vec<String> = (0..60)
            .map(|i| format!("t{} u{} v{} w x y", i % 7, i % 5, i % 3))
            .collect();
        let a = dedup_filter(&texts, &["w x y z"], 0.7, ExecMode::Parallel).unwrap();
        let b = dedup_filter(&texts, &["w x y z"], 0.7, ExecMode::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn least_frequent_ties_in_system_order() {
        let s = schwartz();
        let labels = vec![
            LabelVector::from_names(&s, &["Stimulation", "Hedonism"]).unwrap(),
            LabelVector::from_names(&s, &["Stimulation"]).unwrap(),
        ];
        let got = least_frequent_values(&labels, &s, 2).unwrap();
        assert_eq!(
            got,
            vec!["Self-direction: thought", "Self-direction: action"]
        );
        assert!(least_frequent_values(&labels, &s, 21).is_err());
        let tiny = ValueSystem::from_json_str("t", r#"{"A":["a"],"B":["b"],"C":["c"]}"#).unwrap();
        let mk = |n: &[&str]| LabelVector::from_names(&tiny, n).unwrap();
        let ls = vec![
            mk(&["A", "B", "C"]),
            mk(&["A", "C"]),
            mk(&["A", "C"]),
            mk(&["A"]),
            mk(&["A"]),
        ];
        assert_eq!(least_frequent_values(&ls, &tiny, 1).unwrap(), vec!["B"]);
    }

    #[test]
    fn augment_fills_missing_only() {
        let s = schwartz();
        let recs = vec![
            record(
                &s,
                "a",
                "we should ban human cloning",
                &["Security: societal"],
                false,
            ),
            record(&s, "b", "nothing here", &[], false),
            record(&s, "c", "already done", &["Hedonism"], true),
        ];
        let b = ScriptedBackend::new([
            "The text is related to societal security as it addresses chaos.",
        ]);
        let (out, rep) = augment_explanations(
            &b,
            &s,
            recs,
            &ExplainConfig::default(),
            ExecMode::Sequential,
        );
        assert_eq!(b.calls(), 1);
        assert_eq!(rep.calls, 1);
        assert_eq!(rep.filled, 1);
        assert!(out[0].explanations["Security: societal"].contains("societal security"));
        assert!(out.iter().all(|r| r.is_explained(&s)));
        assert!(rep.flagged_long.is_empty());
    }

    #[test]
    fn augment_flags_long_and_skips_failures() {
        let s = schwartz();
        let recs = vec![
            record(&s, "a", "text a", &["Hedonism"], false),
            record(&s, "b", "text b", &["Stimulation", "Face"], false),
        ];
        let b = ScriptedBackend::new(Vec::<&str>::new());
        b.push("word ".repeat(30));
        b.push("fine");
        b.push_failure("boom");
        let (out, rep) = augment_explanations(
            &b,
            &s,
            recs,
            &ExplainConfig::default(),
            ExecMode::Sequential,
        );
        assert_eq!(rep.flagged_long.len(), 1);
        assert_eq!(rep.failures.len(), 1);
        assert_eq!(rep.skipped_records, vec!["b".to_string()]);
        assert!(out[0].is_explained(&s));
        assert!(out[1].explanations.is_empty());
    }

    #[test]
    fn icl_reply_parsing() {
        let s = schwartz();
        let reply = "Zoos should be closed. - (1) Universalism: nature. Explanation: protects animals; (2) Benevolence: caring. Explanation: care for creatures;\n\
                     DATA 10: Taxes fund roads. - (1) Security: societal. Explanation: public order;\n\
                     DATA 11: Brave people win. - (1) Bravery. Explanation: not a value;\n\
                     DATA 12: no labels at all\n\
                     DATA 13:  - (1) Hedonism. Explanation: fun;";
        let items = parse_icl_reply(reply, &s);
        assert_eq!(items.len(), 5);
        let first = items[0].as_ref().unwrap();
        assert_eq!(first.text, "Zoos should be closed.");
        assert_eq!(
            first.labels.positive_names(&s),
            vec!["Benevolence: caring", "Universalism: nature"]
        );
        assert_eq!(
            first.explanations["Universalism: nature"],
            "protects animals"
        );
        assert!(items[1].is_ok());
        assert_eq!(items[2], Err(DropReason::OutOfRoster));
        assert_eq!(items[3], Err(DropReason::ParseFailure));
        assert_eq!(items[4], Err(DropReason::EmptyText));
        assert_eq!(parse_icl_reply("", &s), vec![Err(DropReason::ParseFailure)]);
    }

    #[test]
    fn targeted_reply_parsing() {
        let s = schwartz();
        let h = s.index_of("Humility").unwrap();
        let reply = "Text - Nobody is above others.\nExplanation: It resorts to humility.\n\nText - We are small in the universe.\n Explanation: Humble view.\nText - missing explanation";
        let items = parse_targeted_reply(reply, &s, &[h]);
        assert_eq!(items.len(), 3);
        assert_eq!(items[0].as_ref().unwrap().text, "Nobody is above others.");
        assert_eq!(
            items[1].as_ref().unwrap().explanations["Humility"],
            "Humble view."
        );
        assert_eq!(items[2], Err(DropReason::ParseFailure));
    }

    fn seeds(s: &ValueSystem, n: usize) -> Vec<AnnotatedRecord> {
        (0..n)
            .map(|i| {
                let v = s.values()[i % s.len()].name.clone();
                record(
                    s,
                    &format!("seed-{i}"),
                    &format!("seed text number {i} about topic {i}"),
                    &[&v],
                    true,
                )
            })
            .collect()
    }

    #[test]
    fn icl_needs_eight_seeds() {
        let s = schwartz();
        let b = ScriptedBackend::new(Vec::<&str>::new());
        let err = generate_batch(
            &b,
            &s,
            &GenerationKind::Icl,
            &seeds(&s, 7),
            &GenerationConfig::default(),
            ExecMode::Sequential,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            DatagenError::NotEnoughSeeds { needed: 8, got: 7 }
        ));
        assert_eq!(b.calls(), 0);
    }

    #[test]
    fn icl_generation_keeps_valid_continuations() {
        let s = schwartz();
        let reply = "Cats are better than dogs for small flats. - (1) Hedonism. Explanation: comfort;\n\
                     DATA 10: Public parks need more trees and benches. - (1) Universalism: nature. Explanation: nature;\n\
                     DATA 11: Courage builds character in children. - (1) Bravery. Explanation: nope;\n\
                     DATA 12: Every worker deserves a fair pension plan. - (1) Security: personal. Explanation: safety;";
        let b = ScriptedBackend::new([reply]);
        let cfg = GenerationConfig {
            count: 10,
            call_budget: 1,
            calls_per_round: 1,
            ..GenerationConfig::default()
        };
        let (recs, rep) = generate_batch(
            &b,
            &s,
            &GenerationKind::Icl,
            &seeds(&s, 20),
            &cfg,
            ExecMode::Sequential,
        )
        .unwrap();
        assert_eq!(recs.len(), 3);
        assert!(recs.iter().all(|r| r.source == RecordSource::IclGenerated));
        assert_eq!(recs[0].instance.id, "icl-000001");
        assert_eq!(rep.dropped.out_of_roster, 1);
        assert!(rep.budget_exhausted);
        let prompt = &b.requests()[0].messages[0].content;
        assert!(prompt.contains("DATA 8:") && prompt.trim_end().ends_with("DATA 9:"));
    }

    #[test]
    fn slates_cover_every_value() {
        let s = schwartz();
        let pool = seeds(&s, 40);
        let refs: Vec<&AnnotatedRecord> = pool.iter().collect();
        let mut rot = SlateRotator::new(refs, s.len(), 3);
        let mut seen = vec![false; s.len()];
        for _ in 0..3 {
            let slate = rot.next_slate();
            assert_eq!(slate.len(), ICL_SLATE_SIZE);
            let uniq: HashSet<_> = slate.iter().collect();
            assert_eq!(uniq.len(), ICL_SLATE_SIZE);
            for &k in &slate {
                for v in pool[k].labels.positives() {
                    seen[v] = true;
                }
            }
        }
        assert!(seen.iter().all(|&x| x));
    }

    #[test]
    fn targeted_generation_labels_targets_and_dedups() {
        let s = schwartz();
        let pool = seeds(&s, 20);
        let counter = std::sync::atomic::AtomicUsize::new(0);
        let b = FnBackend::new(move |_: &ChatRequest| {
            let k = counter.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            // the second call repeats the first one's text
            let k = if k == 1 { 0 } else { k };
            let words = [
                "modest living suits wise elders",
                "nobody deserves special treatment",
                "accept your small place",
                "praise belongs to the team",
            ];
            format!(
                "Text - {}\nExplanation: modesty {k}",
                words[k % words.len()]
            )
        });
        let cfg = GenerationConfig {
            count: 3,
            call_budget: 10,
            calls_per_round: 1,
            ..GenerationConfig::default()
        };
        let kind = GenerationKind::Targeted(vec!["Humility".into()]);
        let (recs, rep) = generate_batch(&b, &s, &kind, &pool, &cfg, ExecMode::Sequential).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(rep.dropped.duplicate, 1);
        assert_eq!(rep.calls, 4);
        assert!(!rep.budget_exhausted);
        assert!(recs
            .iter()
            .all(|r| r.labels.positive_names(&s) == vec!["Humility"]));
        assert!(recs
            .iter()
            .all(|r| r.source == RecordSource::TargetedGenerated));
        let bad = GenerationKind::Targeted(vec!["Bravery".into()]);
        assert!(matches!(
            generate_batch(&b, &s, &bad, &pool, &cfg, ExecMode::Sequential),
            Err(DatagenError::UnknownTarget(_))
        ));
    }

    #[test]
    fn emit_shapes_and_round_trip() {
        let s = schwartz();
        let recs = vec![
            record(&s, "a", "text a", &["Hedonism", "Stimulation"], true),
            record(&s, "b", "text b", &[], true),
        ];
        let out = emit_alpaca(&recs, &s, false).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out[0].output.starts_with("(1) Stimulation. Explanation:"));
        assert!(out[0].output.contains("\n(2) Hedonism. Explanation:"));
        assert!(out[0].instruction.contains("20 value items"));
        for (r, t) in recs.iter().zip(&out) {
            assert_eq!(parse_detector_response(&t.output, &s).labels, r.labels);
        }
        let with = emit_alpaca(&recs, &s, true).unwrap();
        assert_eq!(with.len(), 22);
        assert!(with[0].input.contains("Self-direction: thought"));
        assert!(emit_alpaca(&[], &s, false).unwrap().is_empty());
        let bare = record(&s, "c", "text c", &["Face"], false);
        assert!(matches!(
            emit_alpaca(&[bare], &s, false),
            Err(DatagenError::Unexplained { .. })
        ));
    }

    #[test]
    fn explanations_cannot_fake_markers() {
        assert_eq!(
            clean_explanation(" since (1990) it\n holds; "),
            "since [1990] it holds"
        );
    }

    #[test]
    fn alpaca_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.json");
        let recs = vec![TrainingRecord {
            instruction: "i".into(),
            input: "x".into(),
            output: "o".into(),
        }];
        write_alpaca(&p, &recs).unwrap();
        assert_eq!(read_alpaca(&p).unwrap(), recs);
    }
}
