//! Pure-LLM prompting baselines: the value system is split into batches of
//! `batch_size` values and each batch is asked about in its own call.
//! `batch_size = n` is single-step prompting, `1` is sequential prompting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{self, ChatBackend, ChatRequest, GatewayError, Usage};
use crate::pipeline::{parse_final_response, FinalCallConfig, FinalResult, Provenance, Verdict};
use crate::prompts::{render_baseline_prompt, PromptError};
use crate::values::{LabelVector, ValueDef, ValueSystem};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("batch size {batch_size} must be between 1 and the system size {system_size}")]
    BatchSize {
        batch_size: usize,
        system_size: usize,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("baseline batch {batch}: {source}")]
    Batch {
        batch: usize,
        #[source]
        source: GatewayError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub batch_size: usize,
    pub cot: bool,
    /// When set, values are shuffled with this seed before batching.
    #[serde(default)]
    pub shuffle_seed: Option<u64>,
}

impl StrategyConfig {
    pub fn single_step(system: &ValueSystem) -> Self {
        Self {
            batch_size: system.len(),
            cot: false,
            shuffle_seed: None,
        }
    }

    pub fn sequential(cot: bool) -> Self {
        Self {
            batch_size: 1,
            cot,
            shuffle_seed: None,
        }
    }

    pub fn validate(&self, system: &ValueSystem) -> Result<(), BaselineError> {
        if self.batch_size == 0 || self.batch_size > system.len() {
            return Err(BaselineError::BatchSize {
                batch_size: self.batch_size,
                system_size: system.len(),
            });
        }
        Ok(())
    }

    pub fn call_count(&self, system: &ValueSystem) -> usize {
        system.len().div_ceil(self.batch_size)
    }

    pub fn label(&self) -> String {
        format!(
            "baseline:{}{}",
            self.batch_size,
            if self.cot { ":cot" } else { "" }
        )
    }

    /// Value indices per batch, in call order.
    pub fn batches(&self, system: &ValueSystem) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..system.len()).collect();
        if let Some(seed) = self.shuffle_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        order
            .chunks(self.batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }
}

pub fn run_strategy(
    backend: &dyn ChatBackend,
    system: &ValueSystem,
    text: &str,
    config: &StrategyConfig,
    call: &FinalCallConfig,
) -> Result<FinalResult, BaselineError> {
    config.validate(system)?;
    let mut provenance = vec![Provenance::LlmUnresolved; system.len()];
    let mut usage = Usage::default();
    let mut warnings = Vec::new();
    let batches = config.batches(system);
    for (batch, idx) in batches.iter().enumerate() {
        let values: Vec<ValueDef> = idx.iter().map(|&i| system.values()[i].clone()).collect();
        let prompt = render_baseline_prompt(&values, text, config.cot)?;
        let request = ChatRequest::user(call.model.clone(), prompt)
            .with_temperature(call.temperature)
            .with_max_output_tokens(call.max_output_tokens);
        let ex = gateway::complete(backend, &request)
            .map_err(|source| BaselineError::Batch { batch, source })?;
        usage += ex.usage;
        let set = parse_final_response(&ex.response_text, &values);
        for (k, &i) in idx.iter().enumerate() {
            provenance[i] = match set.verdicts[k] {
                Some(Verdict::Relevant) => Provenance::LlmRelevant,
                Some(Verdict::Irrelevant) => Provenance::LlmIrrelevant,
                None => {
                    warnings.push(format!(
                        "batch {batch}: no verdict for {:?}",
                        values[k].name
                    ));
                    Provenance::LlmUnresolved
                }
            };
        }
    }
    let mut labels = LabelVector::zeros(system);
    for (i, p) in provenance.iter().enumerate() {
        labels.set(i, p.is_positive());
    }
    Ok(FinalResult {
        labels,
        provenance,
        candidate_count: system.len(),
        usage_total: usage,
        detector_usage: Usage::default(),
        llm_usage: usage,
        llm_calls: batches.len(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{count_tokens, FnBackend, ScriptedBackend};

    fn irrelevant_to_all(r: &ChatRequest) -> String {
        // answer every "Name, Definition:" line in the target block
        let body = &r.messages[0].content;
        let target = &body[body.rfind("Human values:").unwrap()..];
        let s = ValueSystem::schwartz();
        s.names()
            .filter(|n| target.contains(&format!("{n}, Definition:")))
            .map(|n| format!("{n} - Irrelevant."))
            .collect::<Vec<_>>()
            .join("\n")
    }

    #[test]
    fn call_counts_follow_batch_size() {
        let s = ValueSystem::schwartz();
        for (bs, calls) in [(20, 1), (4, 5), (1, 20), (3, 7)] {
            let b = FnBackend::new(irrelevant_to_all);
            let cfg = StrategyConfig {
                batch_size: bs,
                cot: false,
                shuffle_seed: None,
            };
            let r = run_strategy(&b, &s, "text", &cfg, &FinalCallConfig::default()).unwrap();
            assert_eq!(b.calls(), calls);
            assert_eq!(r.llm_calls, calls);
            assert_eq!(r.labels.count_positive(), 0);
            assert!(r.warnings.is_empty(), "{:?}", r.warnings);
        }
    }

    #[test]
    fn sequential_cot_uses_scaffold() {
        let s = ValueSystem::schwartz();
        let b = ScriptedBackend::new((0..20).map(|_| "I identify X as 'Irrelevant'."));
        run_strategy(
            &b,
            &s,
            "text",
            &StrategyConfig::sequential(true),
            &FinalCallConfig::default(),
        )
        .unwrap();
        let reqs = b.requests();
        assert_eq!(reqs.len(), 20);
        assert!(reqs
            .iter()
            .all(|r| r.messages[0].content.contains("Think step by step")));
    }

    #[test]
    fn verdicts_land_on_the_right_indices() {
        let s = ValueSystem::schwartz();
        let b = ScriptedBackend::new([
            "Hedonism - Irrelevant.",
            "Achievement - Relevant.\nFace - Relevant.\nPower: dominance - Irrelevant.",
            "",
            "",
            "",
        ]);
        let cfg = StrategyConfig {
            batch_size: 4,
            cot: false,
            shuffle_seed: None,
        };
        let r = run_strategy(&b, &s, "text", &cfg, &FinalCallConfig::default()).unwrap();
        assert_eq!(r.labels.positive_names(&s), vec!["Achievement", "Face"]);
    }

    #[test]
    fn shuffled_batches_still_cover_everything() {
        let s = ValueSystem::schwartz();
        let cfg = StrategyConfig {
            batch_size: 4,
            cot: false,
            shuffle_seed: Some(7),
        };
        let mut all: Vec<usize> = cfg.batches(&s).concat();
        assert_ne!(all, (0..20).collect::<Vec<_>>());
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(cfg.batches(&s), cfg.batches(&s));
    }

    #[test]
    fn errors_are_tagged_with_batch() {
        let s = ValueSystem::schwartz();
        let b = ScriptedBackend::new(["", ""]);
        let cfg = StrategyConfig {
            batch_size: 4,
            cot: false,
            shuffle_seed: None,
        };
        match run_strategy(&b, &s, "t", &cfg, &FinalCallConfig::default()) {
            Err(BaselineError::Batch { batch, .. }) => assert_eq!(batch, 2),
            other => panic!("unexpected {other:?}"),
        }
        let bad = StrategyConfig {
            batch_size: 21,
            cot: false,
            shuffle_seed: None,
        };
        assert!(run_strategy(&b, &s, "t", &bad, &FinalCallConfig::default()).is_err());
    }

    #[test]
    fn prompt_tokens_grow_as_batches_shrink() {
        let s = ValueSystem::schwartz();
        let text = "I am in favor of the opinion of we should ban human cloning, because it will only cause issues.";
        let total = |bs: usize, cot: bool| -> u64 {
            let cfg = StrategyConfig {
                batch_size: bs,
                cot,
                shuffle_seed: None,
            };
            cfg.batches(&s)
                .iter()
                .map(|idx| {
                    let vals: Vec<_> = idx.iter().map(|&i| s.values()[i].clone()).collect();
                    count_tokens(&render_baseline_prompt(&vals, text, cot).unwrap())
                })
                .sum()
        };
        let (single, five, seq, seq_cot) = (
            total(20, false),
            total(4, false),
            total(1, false),
            total(1, true),
        );
        assert!(single <= five && five <= seq, "{single} {five} {seq}");
        assert!(single >= 2000);
        assert!(seq_cot > single);
    }
}
