//! Detector stage: repeated sampling of the local model, parsing of its
//! numbered `(k) Value. Explanation: ...;` responses, and aggregation into
//! per-value relevance probabilities.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{self, ChatBackend, ChatExchange, ChatRequest, GatewayError, Usage};
use crate::prompts::{render_detector_prompt, PromptError};
use crate::values::{LabelVector, ValueSystem};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("detector sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: GatewayError,
    },
    #[error("cannot aggregate an empty sample list")]
    NoSamples,
    #[error("samples come from different value systems")]
    MixedSystems,
    #[error("sampling needs at least one sample")]
    ZeroSamples,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum ParseWarning {
    /// No `(k) ...` entry could be found.
    NoEntries,
    /// An entry named something outside the roster.
    UnknownValue(String),
    /// A value was listed more than once; the repeats were collapsed.
    DuplicateValue(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorSample {
    pub labels: LabelVector,
    /// Keyed by value name; only values labeled 1 appear.
    pub explanations: BTreeMap<String, String>,
    pub raw: String,
    pub warnings: Vec<ParseWarning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Number of samples L drawn per text.
    pub samples: usize,
    pub temperature: f64,
    pub model: String,
    pub max_output_tokens: u32,
    /// Sample `j` is sent with `sample_tag = tag_prefix + j`, so each sample
    /// is a distinct request for caching purposes.
    pub tag_prefix: String,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            samples: 5,
            temperature: 0.7,
            model: "value-detector".into(),
            max_output_tokens: 256,
            tag_prefix: String::new(),
        }
    }
}

/// Fraction of samples flagging each value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceEstimate {
    pub probs: Vec<f64>,
    pub counts: Vec<usize>,
    pub samples_used: usize,
}

/// Parser output before roster matching: one entry per `(k)` marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawEntry {
    pub name: String,
    pub explanation: String,
}

fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|[\s;])\(\d+\)").unwrap())
}

fn explanation_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)explanation\s*:").unwrap())
}

fn trim_name(s: &str) -> &str {
    s.trim().trim_matches(|c: char| {
        matches!(c, '.' | ',' | ';' | ':' | '\'' | '"' | '*') || c.is_whitespace()
    })
}

/// Case-folded, whitespace-collapsed form used for roster matching.
pub fn normalize_name(s: &str) -> String {
    trim_name(s)
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Splits text into numbered `(k) Name. Explanation: text;` entries.
pub fn parse_numbered_entries(raw: &str) -> Vec<RawEntry> {
    let markers: Vec<(usize, usize)> = marker_re()
        .find_iter(raw)
        .map(|m| (m.start(), m.end()))
        .collect();
    let mut out = Vec::with_capacity(markers.len());
    for (k, &(_, content_start)) in markers.iter().enumerate() {
        let end = markers.get(k + 1).map_or(raw.len(), |&(s, _)| s);
        let seg = &raw[content_start..end];
        let (name, explanation) = match explanation_re().find(seg) {
            Some(m) => (&seg[..m.start()], &seg[m.end()..]),
            None => (seg, ""),
        };
        let explanation = explanation.trim().trim_end_matches(';').trim();
        out.push(RawEntry {
            name: trim_name(name).to_string(),
            explanation: explanation.to_string(),
        });
    }
    out
}

/// Roster lookup by normalized name. Matching is exact after normalization,
/// so "Power" never matches "Power: dominance".
pub struct RosterIndex {
    by_name: HashMap<String, usize>,
}

impl RosterIndex {
    pub fn new(system: &ValueSystem) -> Self {
        Self {
            by_name: system
                .names()
                .enumerate()
                .map(|(i, n)| (normalize_name(n), i))
                .collect(),
        }
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.by_name.get(&normalize_name(name)).copied()
    }
}

pub fn parse_detector_response(raw: &str, system: &ValueSystem) -> DetectorSample {
    let roster = RosterIndex::new(system);
    let mut labels = LabelVector::zeros(system);
    let mut explanations = BTreeMap::new();
    let mut warnings = Vec::new();
    let entries = parse_numbered_entries(raw);
    if entries.is_empty() {
        warnings.push(ParseWarning::NoEntries);
    }
    for e in entries {
        match roster.lookup(&e.name) {
            Some(i) if labels.get(i) => warnings.push(ParseWarning::DuplicateValue(
                system.values()[i].name.clone(),
            )),
            Some(i) => {
                labels.set(i, true);
                if !e.explanation.is_empty() {
                    explanations.insert(system.values()[i].name.clone(), e.explanation);
                }
            }
            None => warnings.push(ParseWarning::UnknownValue(e.name)),
        }
    }
    DetectorSample {
        labels,
        explanations,
        raw: raw.to_string(),
        warnings,
    }
}

#[derive(Debug, Clone)]
pub struct DetectorRun {
    pub samples: Vec<DetectorSample>,
    pub exchanges: Vec<ChatExchange>,
}

impl DetectorRun {
    pub fn usage(&self) -> Usage {
        self.exchanges.iter().map(|e| e.usage).sum()
    }

    pub fn parse_warnings(&self) -> usize {
        self.samples.iter().map(|s| s.warnings.len()).sum()
    }
}

/// Draws `config.samples` independent completions of one detector prompt.
/// Samples are requested in index order.
pub fn sample_detector(
    backend: &dyn ChatBackend,
    system: &ValueSystem,
    text: &str,
    config: &SamplingConfig,
) -> Result<DetectorRun, DetectorError> {
    if config.samples == 0 {
        return Err(DetectorError::ZeroSamples);
    }
    let prompt = render_detector_prompt(system, text)?;
    let mut samples = Vec::with_capacity(config.samples);
    let mut exchanges = Vec::with_capacity(config.samples);
    for index in 0..config.samples {
        let request = ChatRequest::user(config.model.clone(), prompt.clone())
            .with_temperature(config.temperature)
            .with_max_output_tokens(config.max_output_tokens)
            .with_sample_tag(format!("{}{index}", config.tag_prefix));
        let ex = gateway::complete(backend, &request)
            .map_err(|source| DetectorError::Sample { index, source })?;
        samples.push(parse_detector_response(&ex.response_text, system));
        exchanges.push(ex);
    }
    Ok(DetectorRun { samples, exchanges })
}

/// Per-value relevance: (samples labeling the value) / L.
pub fn aggregate(samples: &[DetectorSample]) -> Result<RelevanceEstimate, DetectorError> {
    let first = samples.first().ok_or(DetectorError::NoSamples)?;
    let n = first.labels.len();
    let mut counts = vec![0usize; n];
    for s in samples {
        if s.labels.len() != n || s.labels.system_name() != first.labels.system_name() {
            return Err(DetectorError::MixedSystems);
        }
        for i in s.labels.positives() {
            counts[i] += 1;
        }
    }
    let l = samples.len();
    Ok(RelevanceEstimate {
        probs: counts.iter().map(|&c| c as f64 / l as f64).collect(),
        counts,
        samples_used: l,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedBackend;
    use proptest::prelude::*;

    fn schwartz() -> ValueSystem {
        ValueSystem::schwartz()
    }

    #[test]
    fn parses_single_entry() {
        let s = schwartz();
        let d = parse_detector_response(
            "(1) Security: societal. Explanation: addresses chaos from cloning;",
            &s,
        );
        let i = s.index_of("Security: societal").unwrap();
        assert_eq!(d.labels.positives().collect::<Vec<_>>(), vec![i]);
        assert_eq!(
            d.explanations["Security: societal"],
            "addresses chaos from cloning"
        );
        assert!(d.warnings.is_empty());
    }

    #[test]
    fn empty_response_warns_once() {
        let d = parse_detector_response("", &schwartz());
        assert_eq!(d.labels.count_positive(), 0);
        assert_eq!(d.warnings, vec![ParseWarning::NoEntries]);
    }

    #[test]
    fn duplicates_collapse() {
        let d = parse_detector_response(
            "(1) Security: societal. Explanation: a; (2) Security: societal. Explanation: b;",
            &schwartz(),
        );
        assert_eq!(d.labels.count_positive(), 1);
        assert_eq!(d.explanations["Security: societal"], "a");
        assert_eq!(
            d.warnings,
            vec![ParseWarning::DuplicateValue("Security: societal".into())]
        );
    }

    #[test]
    fn multiline_case_and_punctuation_tolerance() {
        let s = schwartz();
        let raw = "(1) hedonism. Explanation: fun;\n(2) 'Universalism: Nature'. explanation: trees;\n(3) Power. Explanation: ambiguous;\n(4) Bravery. Explanation: no;";
        let d = parse_detector_response(raw, &s);
        assert_eq!(
            d.labels.positive_names(&s),
            vec!["Hedonism", "Universalism: nature"]
        );
        assert_eq!(d.explanations["Universalism: nature"], "trees");
        assert_eq!(
            d.warnings,
            vec![
                ParseWarning::UnknownValue("Power".into()),
                ParseWarning::UnknownValue("Bravery".into())
            ]
        );
    }

    #[test]
    fn entry_without_explanation() {
        let d = parse_detector_response("(1) Face", &schwartz());
        assert_eq!(d.labels.count_positive(), 1);
        assert!(d.explanations.is_empty());
    }

    #[test]
    fn samples_in_script_order() {
        let s = schwartz();
        let script: Vec<String> = s
            .names()
            .take(5)
            .map(|n| format!("(1) {n}. Explanation: x;"))
            .collect();
        let b = ScriptedBackend::new(script);
        let run = sample_detector(&b, &s, "text", &SamplingConfig::default()).unwrap();
        assert_eq!(run.samples.len(), 5);
        for (j, smp) in run.samples.iter().enumerate() {
            assert_eq!(smp.labels.positives().collect::<Vec<_>>(), vec![j]);
        }
        let tags: Vec<_> = b.requests().into_iter().map(|r| r.sample_tag).collect();
        assert_eq!(tags, vec!["0", "1", "2", "3", "4"]);
        assert_eq!(run.usage(), run.exchanges.iter().map(|e| e.usage).sum());
    }

    #[test]
    fn single_sample() {
        let b = ScriptedBackend::new(["(1) Face. Explanation: x;"]);
        let cfg = SamplingConfig {
            samples: 1,
            ..Default::default()
        };
        assert_eq!(
            sample_detector(&b, &schwartz(), "t", &cfg)
                .unwrap()
                .samples
                .len(),
            1
        );
        let zero = SamplingConfig {
            samples: 0,
            ..Default::default()
        };
        assert!(matches!(
            sample_detector(&b, &schwartz(), "t", &zero),
            Err(DetectorError::ZeroSamples)
        ));
    }

    #[test]
    fn failure_names_sample_index() {
        let b = ScriptedBackend::new(["", "", ""]);
        b.push_failure("down");
        match sample_detector(&b, &schwartz(), "t", &SamplingConfig::default()) {
            Err(DetectorError::Sample { index, .. }) => assert_eq!(index, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn sample_with(s: &ValueSystem, idx: &[usize]) -> DetectorSample {
        let mut labels = LabelVector::zeros(s);
        for &i in idx {
            labels.set(i, true);
        }
        DetectorSample {
            labels,
            explanations: BTreeMap::new(),
            raw: String::new(),
            warnings: vec![],
        }
    }

    #[test]
    fn aggregate_examples() {
        let s = schwartz();
        let five: Vec<_> = [true, true, true, false, false]
            .iter()
            .map(|&on| sample_with(&s, if on { &[2] } else { &[] }))
            .collect();
        assert_eq!(aggregate(&five).unwrap().probs[2], 0.6);
        let zeros: Vec<_> = (0..5).map(|_| sample_with(&s, &[])).collect();
        assert!(aggregate(&zeros).unwrap().probs.iter().all(|&p| p == 0.0));
        let four: Vec<_> = (0..5)
            .map(|j| sample_with(&s, if j < 4 { &[0] } else { &[] }))
            .collect();
        assert_eq!(aggregate(&four).unwrap().probs[0], 0.8);
        assert!(matches!(aggregate(&[]), Err(DetectorError::NoSamples)));
        let other = ValueSystem::from_json_str("x", r#"{"A": ["d"]}"#).unwrap();
        assert!(matches!(
            aggregate(&[sample_with(&s, &[]), sample_with(&other, &[])]),
            Err(DetectorError::MixedSystems)
        ));
    }

    proptest! {
        #[test]
        fn aggregate_is_order_invariant_and_on_grid(
            rows in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 20), 1..10),
            seed in any::<u64>(),
        ) {
            let s = schwartz();
            let samples: Vec<_> = rows.iter().map(|r| DetectorSample {
                labels: LabelVector::from_bools(&s, r.clone()).unwrap(),
                explanations: BTreeMap::new(), raw: String::new(), warnings: vec![],
            }).collect();
            let est = aggregate(&samples).unwrap();
            let mut shuffled = samples.clone();
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(&aggregate(&shuffled).unwrap(), &est);
            let l = samples.len() as f64;
            for &p in &est.probs {
                prop_assert!((p * l - (p * l).round()).abs() < 1e-9);
            }
            let total: usize = rows.iter().flatten().filter(|&&b| b).count();
            prop_assert!((est.probs.iter().sum::<f64>() - total as f64 / l).abs() < 1e-9);
        }

        #[test]
        fn parsing_is_idempotent(raw in "(\\([1-9]\\) [A-Za-z: ]{0,20}\\. Explanation: [a-z ]{0,10}; ?){0,4}") {
            let s = schwartz();
            prop_assert_eq!(parse_detector_response(&raw, &s), parse_detector_response(&raw, &s));
        }
    }
}
