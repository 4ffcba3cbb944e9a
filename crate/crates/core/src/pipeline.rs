//! The cascade: detector sampling, threshold partitioning into
//! confirmed/candidate/rejected values, and a single final LLM call that
//! settles only the candidates.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{
    aggregate, normalize_name, sample_detector, DetectorError, DetectorRun, RelevanceEstimate,
    SamplingConfig,
};
use crate::gateway::{self, ChatBackend, ChatExchange, ChatRequest, GatewayError, Usage};
use crate::prompts::{render_final_prompt, PromptError};
use crate::values::{LabelVector, ValueDef, ValueSystem};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid thresholds: need 0 < p_low < p_high < 1, got p_low={p_low}, p_high={p_high}")]
    Thresholds { p_low: f64, p_high: f64 },
    #[error("detector stage: {0}")]
    Detector(#[from] DetectorError),
    #[error("final stage: {0}")]
    Final(#[source] GatewayError),
    #[error("final stage: {0}")]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub p_low: f64,
    pub p_high: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            p_low: 0.2,
            p_high: 0.8,
        }
    }
}

impl PartitionConfig {
    pub fn new(p_low: f64, p_high: f64) -> Result<Self, PipelineError> {
        let c = Self { p_low, p_high };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if 0.0 < self.p_low && self.p_low < self.p_high && self.p_high < 1.0 {
            Ok(())
        } else {
            Err(PipelineError::Thresholds {
                p_low: self.p_low,
                p_high: self.p_high,
            })
        }
    }
}

/// Disjoint cover of value indices, each list ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePartition {
    pub confirmed: Vec<usize>,
    pub candidates: Vec<usize>,
    pub rejected: Vec<usize>,
}

impl CandidatePartition {
    pub fn candidate_indicator(&self, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        for &i in &self.candidates {
            v[i] = 1.0;
        }
        v
    }
}

/// confirmed: p > p_high; candidates: p_low <= p <= p_high; rejected: p < p_low.
pub fn partition_probs(probs: &[f64], config: &PartitionConfig) -> CandidatePartition {
    let mut part = CandidatePartition::default();
    for (i, &p) in probs.iter().enumerate() {
        if p > config.p_high {
            part.confirmed.push(i);
        } else if p >= config.p_low {
            part.candidates.push(i);
        } else {
            part.rejected.push(i);
        }
    }
    part
}

pub fn partition(estimate: &RelevanceEstimate, config: &PartitionConfig) -> CandidatePartition {
    partition_probs(&estimate.probs, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    DetectorConfirmed,
    LlmRelevant,
    LlmIrrelevant,
    /// A candidate the LLM reply did not address; labeled 0.
    LlmUnresolved,
    DetectorRejected,
}

impl Provenance {
    pub fn is_positive(self) -> bool {
        matches!(
            self,
            Provenance::DetectorConfirmed | Provenance::LlmRelevant
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Relevant,
    Irrelevant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerdictSet {
    /// Aligned with the candidate list; `None` when the reply never
    /// addressed that candidate.
    pub verdicts: Vec<Option<Verdict>>,
    /// Names the reply judged that were not candidates.
    pub foreign: Vec<String>,
}

impl VerdictSet {
    pub fn unresolved(&self) -> usize {
        self.verdicts.iter().filter(|v| v.is_none()).count()
    }
}

fn line_verdict_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r#"(?im)^[\s*#>\-]*(?:\d+[.)]\s*)?(.+?)\s+[-–—]+\s+[*'"“]*(irrelevant|relevant)\b"#,
        )
        .unwrap()
    })
}

fn cot_verdict_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?i)I identify\s+(.+?)\s+as\s+[*'"“‘]*(irrelevant|relevant)\b"#).unwrap()
    })
}

/// Reads `Name - Relevant|Irrelevant` lines and CoT closing sentences
/// (`I identify Name as 'Relevant'`). Later verdicts for the same candidate
/// override earlier ones.
pub fn parse_final_response(raw: &str, candidates: &[ValueDef]) -> VerdictSet {
    let names: Vec<String> = candidates.iter().map(|c| normalize_name(&c.name)).collect();
    let mut hits: Vec<(usize, String, Verdict)> = Vec::new();
    for re in [line_verdict_re(), cot_verdict_re()] {
        for cap in re.captures_iter(raw) {
            let verdict = if cap[2].eq_ignore_ascii_case("relevant") {
                Verdict::Relevant
            } else {
                Verdict::Irrelevant
            };
            hits.push((cap.get(0).unwrap().start(), cap[1].to_string(), verdict));
        }
    }
    hits.sort_by_key(|h| h.0);

    let mut verdicts = vec![None; candidates.len()];
    let mut foreign = Vec::new();
    for (_, name, verdict) in hits {
        let key = normalize_name(&name);
        match names.iter().position(|n| *n == key) {
            Some(i) => verdicts[i] = Some(verdict),
            None => {
                if !foreign.contains(&name) {
                    foreign.push(name)
                }
            }
        }
    }
    VerdictSet { verdicts, foreign }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinalCallConfig {
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub cot: bool,
    /// Distinguishes otherwise identical requests, e.g. across repeats.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_tag: Option<String>,
}

impl Default for FinalCallConfig {
    fn default() -> Self {
        Self {
            model: "gpt-4o-mini".into(),
            temperature: 0.0,
            max_output_tokens: 512,
            cot: false,
            sample_tag: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EavitConfig {
    pub sampling: SamplingConfig,
    pub thresholds: PartitionConfig,
    pub final_call: FinalCallConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalResult {
    pub labels: LabelVector,
    pub provenance: Vec<Provenance>,
    pub candidate_count: usize,
    /// Detector plus online-LLM usage.
    pub usage_total: Usage,
    pub detector_usage: Usage,
    pub llm_usage: Usage,
    pub llm_calls: usize,
    pub warnings: Vec<String>,
}

/// Resolves candidates with one LLM call and merges with the detector's
/// confirmed and rejected sets. No call is made when there are no candidates.
pub fn finalize(
    backend: &dyn ChatBackend,
    system: &ValueSystem,
    text: &str,
    part: &CandidatePartition,
    call: &FinalCallConfig,
) -> Result<(FinalResult, Option<ChatExchange>), PipelineError> {
    let n = system.len();
    let mut provenance = vec![Provenance::DetectorRejected; n];
    for &i in &part.confirmed {
        provenance[i] = Provenance::DetectorConfirmed;
    }
    let mut warnings = Vec::new();
    let mut exchange = None;
    if !part.candidates.is_empty() {
        let candidates: Vec<ValueDef> = part
            .candidates
            .iter()
            .map(|&i| system.values()[i].clone())
            .collect();
        let prompt = render_final_prompt(&candidates, text, call.cot)?;
        let mut request = ChatRequest::user(call.model.clone(), prompt)
            .with_temperature(call.temperature)
            .with_max_output_tokens(call.max_output_tokens);
        if let Some(tag) = &call.sample_tag {
            request = request.with_sample_tag(tag.clone());
        }
        let ex = gateway::complete(backend, &request).map_err(PipelineError::Final)?;
        let set = parse_final_response(&ex.response_text, &candidates);
        for (k, &i) in part.candidates.iter().enumerate() {
            provenance[i] = match set.verdicts[k] {
                Some(Verdict::Relevant) => Provenance::LlmRelevant,
                Some(Verdict::Irrelevant) => Provenance::LlmIrrelevant,
                None => {
                    warnings.push(format!("no verdict for candidate {:?}", candidates[k].name));
                    Provenance::LlmUnresolved
                }
            };
        }
        for name in set.foreign {
            warnings.push(format!("ignored verdict for non-candidate {name:?}"));
        }
        exchange = Some(ex);
    }
    let mut labels = LabelVector::zeros(system);
    for (i, p) in provenance.iter().enumerate() {
        labels.set(i, p.is_positive());
    }
    let llm_usage = exchange.as_ref().map(|e| e.usage).unwrap_or_default();
    Ok((
        FinalResult {
            labels,
            provenance,
            candidate_count: part.candidates.len(),
            usage_total: llm_usage,
            detector_usage: Usage::default(),
            llm_usage,
            llm_calls: usize::from(exchange.is_some()),
            warnings,
        },
        exchange,
    ))
}

/// Everything produced while identifying one text.
#[derive(Debug, Clone)]
pub struct IdentifyTrace {
    pub detector: DetectorRun,
    pub estimate: RelevanceEstimate,
    pub partition: CandidatePartition,
    pub final_exchange: Option<ChatExchange>,
    pub result: FinalResult,
}

impl IdentifyTrace {
    pub fn exchanges(&self) -> impl Iterator<Item = &ChatExchange> {
        self.detector
            .exchanges
            .iter()
            .chain(self.final_exchange.iter())
    }
}

pub fn identify_traced(
    detector: &dyn ChatBackend,
    llm: &dyn ChatBackend,
    system: &ValueSystem,
    text: &str,
    config: &EavitConfig,
) -> Result<IdentifyTrace, PipelineError> {
    config.thresholds.validate()?;
    let run = sample_detector(detector, system, text, &config.sampling)?;
    let estimate = aggregate(&run.samples)?;
    let part = partition(&estimate, &config.thresholds);
    let (mut result, final_exchange) = finalize(llm, system, text, &part, &config.final_call)?;
    result.detector_usage = run.usage();
    result.usage_total = result.detector_usage + result.llm_usage;
    let warned = run.parse_warnings();
    if warned > 0 {
        result
            .warnings
            .insert(0, format!("{warned} detector parse warning(s)"));
    }
    Ok(IdentifyTrace {
        detector: run,
        estimate,
        partition: part,
        final_exchange,
        result,
    })
}

/// Detector sampling, aggregation, partitioning and final identification.
pub fn identify(
    detector: &dyn ChatBackend,
    llm: &dyn ChatBackend,
    system: &ValueSystem,
    text: &str,
    config: &EavitConfig,
) -> Result<FinalResult, PipelineError> {
    identify_traced(detector, llm, system, text, config).map(|t| t.result)
}

/// One line of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub id: String,
    pub labels: Vec<String>,
    /// Aligned with the value system order.
    pub provenance: Vec<Provenance>,
    pub candidate_count: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub llm_prompt_tokens: u64,
    pub llm_completion_tokens: u64,
    pub llm_calls: usize,
    pub strategy: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ResultRecord {
    pub fn new(id: &str, result: &FinalResult, system: &ValueSystem, strategy: &str) -> Self {
        Self {
            id: id.to_string(),
            labels: result
                .labels
                .positive_names(system)
                .into_iter()
                .map(str::to_string)
                .collect(),
            provenance: result.provenance.clone(),
            candidate_count: result.candidate_count,
            prompt_tokens: result.usage_total.prompt_tokens,
            completion_tokens: result.usage_total.completion_tokens,
            llm_prompt_tokens: result.llm_usage.prompt_tokens,
            llm_completion_tokens: result.llm_usage.completion_tokens,
            llm_calls: result.llm_calls,
            strategy: strategy.to_string(),
            warnings: result.warnings.clone(),
        }
    }

    pub fn llm_usage(&self) -> Usage {
        Usage {
            prompt_tokens: self.llm_prompt_tokens,
            completion_tokens: self.llm_completion_tokens,
        }
    }

    pub fn detector_usage(&self) -> Usage {
        Usage {
            prompt_tokens: self.prompt_tokens - self.llm_prompt_tokens,
            completion_tokens: self.completion_tokens - self.llm_completion_tokens,
        }
    }
}
