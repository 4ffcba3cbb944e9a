//! Output-consistency study: each text is identified `repeats` times with
//! distinct sample tags, and the spread of each pipeline stage is measured.

use thiserror::Error;

use crate::exec::{self, ExecMode};
use crate::gateway::ChatBackend;
use crate::metrics::{consistency_variance, ConsistencyReport, ConsistencyStage, MetricsError};
use crate::pipeline::{identify_traced, EavitConfig, PipelineError};
use crate::values::{TextInstance, ValueSystem};

#[derive(Debug, Error)]
pub enum ConsistencyError {
    #[error("consistency needs at least 2 repeats, got {0}")]
    TooFewRepeats(usize),
    #[error("no instances to study")]
    NoInstances,
    #[error("instance {id:?}, repeat {repeat}: {source}")]
    Run {
        id: String,
        repeat: usize,
        #[source]
        source: PipelineError,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Stage vectors captured from one run, in [`ConsistencyStage::ALL`] order.
pub type StageVectors = [Vec<f64>; 4];

/// Per-instance variance for each stage, in [`ConsistencyStage::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceVariance {
    pub id: String,
    pub variances: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyStudy {
    pub reports: Vec<ConsistencyReport>,
    pub per_instance: Vec<InstanceVariance>,
}

impl ConsistencyStudy {
    pub fn stage(&self, stage: ConsistencyStage) -> &ConsistencyReport {
        self.reports
            .iter()
            .find(|r| r.stage == stage)
            .expect("every stage is reported")
    }
}

/// Repeat `r` tags detector samples `{prefix}rep{r}/{j}` and the final call
/// `rep{r}`, so replay stores keep repeats apart.
pub fn repeat_config(base: &EavitConfig, repeat: usize) -> EavitConfig {
    let mut cfg = base.clone();
    cfg.sampling.tag_prefix = format!("{}rep{repeat}/", base.sampling.tag_prefix);
    cfg.final_call.sample_tag = Some(format!("rep{repeat}"));
    cfg
}

fn capture(
    detector: &dyn ChatBackend,
    llm: &dyn ChatBackend,
    system: &ValueSystem,
    instance: &TextInstance,
    config: &EavitConfig,
    repeat: usize,
) -> Result<StageVectors, ConsistencyError> {
    let trace = identify_traced(
        detector,
        llm,
        system,
        &instance.text,
        &repeat_config(config, repeat),
    )
    .map_err(|source| ConsistencyError::Run {
        id: instance.id.clone(),
        repeat,
        source,
    })?;
    Ok([
        trace.detector.samples[0].labels.to_f64(),
        trace.estimate.probs.clone(),
        trace.partition.candidate_indicator(system.len()),
        trace.result.labels.to_f64(),
    ])
}

pub fn run_consistency(
    detector: &dyn ChatBackend,
    llm: &dyn ChatBackend,
    system: &ValueSystem,
    instances: &[TextInstance],
    config: &EavitConfig,
    repeats: usize,
    mode: ExecMode,
) -> Result<ConsistencyStudy, ConsistencyError> {
    if repeats < 2 {
        return Err(ConsistencyError::TooFewRepeats(repeats));
    }
    if instances.is_empty() {
        return Err(ConsistencyError::NoInstances);
    }
    let per_instance = exec::try_map(mode, instances, |_, inst| {
        // repeats of one instance run in order so scripted backends stay aligned
        let runs = (0..repeats)
            .map(|r| capture(detector, llm, system, inst, config, r))
            .collect::<Result<Vec<_>, _>>()?;
        let mut variances = [0.0; 4];
        for (s, v) in variances.iter_mut().enumerate() {
            let samples: Vec<Vec<f64>> = runs.iter().map(|run| run[s].clone()).collect();
            *v = consistency_variance(&samples)?;
        }
        Ok::<_, ConsistencyError>(InstanceVariance {
            id: inst.id.clone(),
            variances,
        })
    })?;
    let n = per_instance.len() as f64;
    let reports = ConsistencyStage::ALL
        .iter()
        .enumerate()
        .map(|(s, &stage)| ConsistencyReport {
            stage,
            mean_variance: per_instance.iter().map(|p| p.variances[s]).sum::<f64>() / n,
            instances: per_instance.len(),
            repeats,
        })
        .collect();
    Ok(ConsistencyStudy {
        reports,
        per_instance,
    })
}
