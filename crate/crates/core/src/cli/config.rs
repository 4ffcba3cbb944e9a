//! Run configuration: one TOML file, overridable from the command line.
//! Secrets never live in the file; endpoints name the environment variable
//! holding their key.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::baselines::StrategyConfig;
use crate::datagen::{ExplainConfig, GenerationConfig};
use crate::detector::SamplingConfig;
use crate::exec::ExecMode;
use crate::gateway::{
    ChatBackend, OpenAiBackend, OpenAiConfig, ReplayBackend, ReplayStore, RetryPolicy,
};
use crate::persona::RoleplayConfig;
use crate::pipeline::{EavitConfig, FinalCallConfig, PartitionConfig};
use crate::values::ValueSystem;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ReplayModeName {
    /// Call endpoints directly.
    Live,
    /// Serve from the store, call through and record on a miss.
    Record,
    /// Serve only from the store; never touch the network.
    #[default]
    ReplayStrict,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyName {
    #[default]
    Eavit,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplaySection {
    pub mode: ReplayModeName,
    pub store: Option<PathBuf>,
}

impl Default for ReplaySection {
    fn default() -> Self {
        Self {
            mode: ReplayModeName::ReplayStrict,
            store: Some(PathBuf::from("replay.jsonl")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointSection {
    pub base_url: String,
    /// Environment variable holding the bearer key; unset means no key.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub max_attempts: u32,
}

impl EndpointSection {
    fn local() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            api_key_env: None,
            timeout_secs: 120,
            max_in_flight: 4,
            max_attempts: 3,
        }
    }

    fn openai() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            ..Self::local()
        }
    }
}

impl Default for EndpointSection {
    fn default() -> Self {
        Self::local()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct BaselineSection {
    /// Values per call; unset means all values in one call.
    pub batch_size: Option<usize>,
    pub cot: bool,
    pub shuffle_seed: Option<u64>,
}


#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Canonical JSONL dataset.
    pub dataset: Option<PathBuf>,
    /// Touché arguments TSV, used when `dataset` is unset.
    pub arguments: Option<PathBuf>,
    /// Touché labels TSV paired with `arguments`.
    pub labels: Option<PathBuf>,
    /// Only the first `limit` records are used.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenSection {
    pub explain: ExplainConfig,
    pub generation: GenerationConfig,
    /// Targeted generation aims at this many least frequent values unless
    /// `targets` names them.
    pub k: usize,
    pub targets: Vec<String>,
    pub include_reflection: bool,
    /// Extra canonical datasets (e.g. generated records) merged on emit.
    pub extra: Vec<PathBuf>,
}

impl Default for DatagenSection {
    fn default() -> Self {
        Self {
            explain: ExplainConfig::default(),
            generation: GenerationConfig::default(),
            k: 2,
            targets: Vec::new(),
            include_reflection: true,
            extra: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencySection {
    pub repeats: usize,
    /// Randomly chosen instances (seeded); unset uses all.
    pub instances: Option<usize>,
}

impl Default for ConsistencySection {
    fn default() -> Self {
        Self {
            repeats: 10,
            instances: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonaSection {
    /// JSONL of `{"individual", "answers": {"v70": 1, ...}}`.
    pub wvs_answers: Option<PathBuf>,
    /// One topic per line; unset uses the bundled topics.
    pub topics: Option<PathBuf>,
    pub roleplay: RoleplayConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Value-system JSON; unset uses the bundled Schwartz system.
    pub value_system: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Seeds every randomized choice.
    pub seed: u64,
    pub workers: usize,
    pub sequential: bool,
    pub strategy: StrategyName,
    pub replay: ReplaySection,
    pub detector: EndpointSection,
    pub llm: EndpointSection,
    pub sampling: SamplingConfig,
    pub thresholds: PartitionConfig,
    pub final_call: FinalCallConfig,
    pub baseline: BaselineSection,
    pub data: DataSection,
    pub datagen: DatagenSection,
    pub consistency: ConsistencySection,
    pub persona: PersonaSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            value_system: None,
            output_dir: PathBuf::from("out"),
            seed: 0,
            workers: 4,
            sequential: false,
            strategy: StrategyName::Eavit,
            replay: ReplaySection::default(),
            detector: EndpointSection::local(),
            llm: EndpointSection::openai(),
            sampling: SamplingConfig::default(),
            thresholds: PartitionConfig::default(),
            final_call: FinalCallConfig::default(),
            baseline: BaselineSection::default(),
            data: DataSection::default(),
            datagen: DatagenSection::default(),
            consistency: ConsistencySection::default(),
            persona: PersonaSection::default(),
        }
    }
}

/// What a command needs beyond the common settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Needs {
    pub dataset: bool,
    pub backends: bool,
    pub wvs: bool,
    pub repeats: bool,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, String> {
        toml::from_str(s).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let body = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml_str(&body).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn exec_mode(&self) -> ExecMode {
        if self.sequential {
            ExecMode::Sequential
        } else {
            ExecMode::Parallel
        }
    }

    pub fn eavit(&self) -> EavitConfig {
        EavitConfig {
            sampling: self.sampling.clone(),
            thresholds: self.thresholds,
            final_call: self.final_call.clone(),
        }
    }

    pub fn strategy_config(&self, system: &ValueSystem) -> StrategyConfig {
        StrategyConfig {
            batch_size: self.baseline.batch_size.unwrap_or(system.len()),
            cot: self.baseline.cot,
            shuffle_seed: self.baseline.shuffle_seed,
        }
    }

    pub fn strategy_label(&self, system: &ValueSystem) -> String {
        match self.strategy {
            StrategyName::Eavit => "eavit".into(),
            StrategyName::Baseline => self.strategy_config(system).label(),
        }
    }

    pub fn load_system(&self) -> Result<ValueSystem, String> {
        match &self.value_system {
            Some(p) => ValueSystem::from_path(p).map_err(|e| e.to_string()),
            None => Ok(ValueSystem::schwartz()),
        }
    }

    /// Every problem found, so they can be reported together before any
    /// work starts.
    pub fn validate(&self, needs: Needs) -> Vec<String> {
        let mut errs = Vec::new();
        let system = match self.load_system() {
            Ok(s) => Some(s),
            Err(e) => {
                errs.push(format!("value_system: {e}"));
                None
            }
        };
        if let Err(e) = self.thresholds.validate() {
            errs.push(format!("thresholds: {e}"));
        }
        if self.sampling.samples == 0 {
            errs.push("sampling.samples must be at least 1".into());
        }
        if self.workers == 0 {
            errs.push("workers must be at least 1".into());
        }
        for (name, t) in [
            ("sampling.temperature", self.sampling.temperature),
            ("final_call.temperature", self.final_call.temperature),
        ] {
            if !(0.0..=2.0).contains(&t) {
                errs.push(format!("{name} must be within [0, 2], got {t}"));
            }
        }
        if let (Some(bs), Some(s)) = (self.baseline.batch_size, &system) {
            if bs == 0 || bs > s.len() {
                errs.push(format!(
                    "baseline.batch_size must be within 1..={}, got {bs}",
                    s.len()
                ));
            }
        }
        let g = &self.datagen.generation;
        if !(g.dedup_threshold > 0.0 && g.dedup_threshold <= 1.0) {
            errs.push(format!(
                "datagen.generation.dedup_threshold must be in (0, 1], got {}",
                g.dedup_threshold
            ));
        }
        if needs.backends {
            match (self.replay.mode, &self.replay.store) {
                (ReplayModeName::Live, _) => {}
                (_, None) => {
                    errs.push("replay.store is required unless replay.mode is live".into())
                }
                (ReplayModeName::ReplayStrict, Some(p)) if !p.is_file() => errs.push(format!(
                    "replay.store {} does not exist (required by replay-strict)",
                    p.display()
                )),
                _ => {}
            }
            if self.replay.mode != ReplayModeName::ReplayStrict {
                for (name, ep) in [("detector", &self.detector), ("llm", &self.llm)] {
                    if !(ep.base_url.starts_with("http://") || ep.base_url.starts_with("https://"))
                    {
                        errs.push(format!(
                            "{name}.base_url must be an http(s) URL, got {:?}",
                            ep.base_url
                        ));
                    }
                    if ep.max_in_flight == 0 {
                        errs.push(format!("{name}.max_in_flight must be at least 1"));
                    }
                }
            }
        }
        if needs.dataset {
            match (&self.data.dataset, &self.data.arguments, &self.data.labels) {
                (Some(p), _, _) => {
                    if !p.is_file() {
                        errs.push(format!("data.dataset {} does not exist", p.display()));
                    }
                }
                (None, Some(a), Some(l)) => {
                    for p in [a, l] {
                        if !p.is_file() {
                            errs.push(format!("data file {} does not exist", p.display()));
                        }
                    }
                }
                _ => errs.push(
                    "no dataset: set data.dataset or both data.arguments and data.labels".into(),
                ),
            }
        }
        if needs.repeats && self.consistency.repeats < 2 {
            errs.push(format!(
                "consistency.repeats must be at least 2, got {}",
                self.consistency.repeats
            ));
        }
        if needs.wvs {
            match &self.persona.wvs_answers {
                None => errs.push("persona.wvs_answers is required".into()),
                Some(p) if !p.is_file() => errs.push(format!(
                    "persona.wvs_answers {} does not exist",
                    p.display()
                )),
                _ => {}
            }
            if let Some(p) = &self.persona.topics {
                if !p.is_file() {
                    errs.push(format!("persona.topics {} does not exist", p.display()));
                }
            }
        }
        errs
    }
}

fn endpoint(section: &EndpointSection) -> Result<Arc<dyn ChatBackend>, String> {
    let mut cfg = OpenAiConfig::new(section.base_url.clone());
    cfg.api_key = section
        .api_key_env
        .as_ref()
        .and_then(|v| std::env::var(v).ok());
    cfg.timeout = Duration::from_secs(section.timeout_secs);
    cfg.max_in_flight = section.max_in_flight;
    cfg.retry = RetryPolicy {
        max_attempts: section.max_attempts.max(1),
        ..RetryPolicy::default()
    };
    Ok(Arc::new(
        OpenAiBackend::new(cfg).map_err(|e| e.to_string())?,
    ))
}

pub struct Backends {
    pub detector: Arc<dyn ChatBackend>,
    pub llm: Arc<dyn ChatBackend>,
    pub store: Option<Arc<ReplayStore>>,
}

/// Builds the detector and LLM backends. In replay-strict mode no network
/// client is constructed at all.
pub fn build_backends(config: &RunConfig) -> Result<Backends, String> {
    let open_store = || -> Result<Arc<ReplayStore>, String> {
        let p = config
            .replay
            .store
            .as_ref()
            .ok_or("replay.store is not set")?;
        ReplayStore::open(p)
            .map(Arc::new)
            .map_err(|e| e.to_string())
    };
    match config.replay.mode {
        ReplayModeName::Live => Ok(Backends {
            detector: endpoint(&config.detector)?,
            llm: endpoint(&config.llm)?,
            store: None,
        }),
        ReplayModeName::Record => {
            let store = open_store()?;
            Ok(Backends {
                detector: Arc::new(ReplayBackend::recording(
                    store.clone(),
                    endpoint(&config.detector)?,
                )),
                llm: Arc::new(ReplayBackend::recording(
                    store.clone(),
                    endpoint(&config.llm)?,
                )),
                store: Some(store),
            })
        }
        ReplayModeName::ReplayStrict => {
            let store = open_store()?;
            Ok(Backends {
                detector: Arc::new(ReplayBackend::strict(store.clone())),
                llm: Arc::new(ReplayBackend::strict(store.clone())),
                store: Some(store),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.thresholds = PartitionConfig {
            p_low: 0.3,
            p_high: 0.7,
        };
        c.baseline.batch_size = Some(4);
        c.data.dataset = Some("d.jsonl".into());
        c.datagen.targets = vec!["Humility".into()];
        c.final_call.sample_tag = Some("x".into());
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let c = RunConfig::from_toml_str("[thresholds]\np_low = 0.1\n[sampling]\nsamples = 3\n")
            .unwrap();
        assert_eq!(c.thresholds.p_high, 0.8);
        assert_eq!(c.sampling.samples, 3);
        assert_eq!(
            c.sampling.temperature,
            SamplingConfig::default().temperature
        );
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn validation_lists_everything() {
        let mut c = RunConfig::default();
        c.thresholds = PartitionConfig {
            p_low: 0.9,
            p_high: 0.2,
        };
        c.sampling.samples = 0;
        c.replay.store = Some("/nonexistent/store.jsonl".into());
        c.baseline.batch_size = Some(21);
        let errs = c.validate(Needs {
            dataset: true,
            backends: true,
            wvs: true,
            repeats: false,
        });
        let joined = errs.join("\n");
        for needle in [
            "thresholds",
            "samples",
            "replay.store",
            "batch_size",
            "no dataset",
            "wvs_answers",
        ] {
            assert!(joined.contains(needle), "missing {needle}: {joined}");
        }
    }

    #[test]
    fn strict_mode_builds_without_network() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::default();
        c.replay.store = Some(dir.path().join("s.jsonl"));
        let b = build_backends(&c).unwrap();
        let req = crate::gateway::ChatRequest::user("m", "hi");
        assert!(matches!(
            b.detector.complete(&req),
            Err(crate::gateway::GatewayError::ReplayMiss { .. })
        ));
    }
}
