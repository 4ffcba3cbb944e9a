//! Subcommand bodies. Each writes its artifacts under the output directory
//! and prints a short human-readable summary to stdout.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{build_backends, Backends, RunConfig, StrategyName};
use super::{CliError, DatagenMode};
use crate::baselines::run_strategy;
use crate::consistency::run_consistency;
use crate::datagen::{
    augment_explanations, emit_alpaca, generate_batch, least_frequent_values, write_alpaca,
    AnnotatedRecord, DatagenError, GenerationKind,
};
use crate::dataset::{import_touche_paths, load_dataset, read_jsonl, write_jsonl, DatasetRecord};
use crate::exec;
use crate::metrics::{self, class_distribution, EvalReport, TokenReport};
use crate::persona::{
    bundled_questions, bundled_topics, generate_persona_texts, load_wvs_answers, score_individual,
    summarize, LevelMap,
};
use crate::pipeline::{identify as eavit_identify, FinalResult, ResultRecord};
use crate::values::{LabelVector, TextInstance, ValueSystem};

fn fatal(e: impl std::fmt::Display) -> CliError {
    CliError::fatal(e.to_string())
}

fn out_path(config: &RunConfig, name: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&config.output_dir)
        .map_err(|e| CliError::fatal(format!("{}: {e}", config.output_dir.display())))?;
    Ok(config.output_dir.join(name))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(value).expect("reports serialize");
    fs::write(path, body + "\n").map_err(|e| CliError::fatal(format!("{}: {e}", path.display())))
}

fn system(config: &RunConfig) -> Result<ValueSystem, CliError> {
    config.load_system().map_err(CliError::config)
}

fn load_records(config: &RunConfig, system: &ValueSystem) -> Result<Vec<DatasetRecord>, CliError> {
    let mut records = match (
        &config.data.dataset,
        &config.data.arguments,
        &config.data.labels,
    ) {
        (Some(p), _, _) => load_dataset(p, system).map_err(fatal)?,
        (None, Some(a), Some(l)) => {
            let import = import_touche_paths(a, l, system).map_err(fatal)?;
            if !import.only_in_arguments.is_empty() || !import.only_in_labels.is_empty() {
                log::warn!(
                    "{} argument(s) without labels and {} label row(s) without argument were skipped",
                    import.only_in_arguments.len(),
                    import.only_in_labels.len()
                );
            }
            import.to_records(system)
        }
        _ => return Err(CliError::config("no dataset configured")),
    };
    if let Some(n) = config.data.limit {
        records.truncate(n);
    }
    Ok(records)
}

fn identify_one(
    config: &RunConfig,
    system: &ValueSystem,
    backends: &Backends,
    text: &str,
) -> Result<FinalResult, String> {
    match config.strategy {
        StrategyName::Eavit => eavit_identify(
            &*backends.detector,
            &*backends.llm,
            system,
            text,
            &config.eavit(),
        )
        .map_err(|e| e.to_string()),
        StrategyName::Baseline => run_strategy(
            &*backends.llm,
            system,
            text,
            &config.strategy_config(system),
            &config.final_call,
        )
        .map_err(|e| e.to_string()),
    }
}

/// Identifies every instance over the worker pool; output order follows
/// input order.
fn identify_all(
    config: &RunConfig,
    system: &ValueSystem,
    backends: &Backends,
    instances: &[TextInstance],
) -> Vec<Result<ResultRecord, String>> {
    let done = AtomicUsize::new(0);
    let label = config.strategy_label(system);
    let total = instances.len();
    exec::with_workers(config.workers, || {
        exec::map(config.exec_mode(), instances, |_, inst| {
            let r = identify_one(config, system, backends, &inst.text)
                .map(|res| ResultRecord::new(&inst.id, &res, system, &label))
                .map_err(|e| format!("{}: {e}", inst.id));
            let n = done.fetch_add(1, Ordering::Relaxed) + 1;
            if n.is_multiple_of(50) || n == total {
                log::info!("identified {n}/{total}");
            }
            r
        })
    })
}

fn backends(config: &RunConfig) -> Result<Backends, CliError> {
    build_backends(config).map_err(CliError::config)
}

fn evaluate(
    config: &RunConfig,
    system: &ValueSystem,
    records: &[DatasetRecord],
    results: &[ResultRecord],
) -> Result<EvalReport, CliError> {
    let by_id: HashMap<&str, &ResultRecord> = results.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    let mut used = Vec::new();
    let mut missing = 0usize;
    for rec in records {
        let Some(r) = by_id.get(rec.id.as_str()) else {
            missing += 1;
            continue;
        };
        preds.push(
            LabelVector::from_names(system, &r.labels)
                .map_err(|e| CliError::fatal(format!("{}: {e}", r.id)))?,
        );
        golds.push(rec.label_vector(system).map_err(fatal)?);
        used.push((*r).clone());
    }
    if missing > 0 {
        log::warn!("{missing} gold instance(s) have no result and were left out of the evaluation");
    }
    let report = EvalReport::compute(&preds, &golds, system, &used).map_err(fatal)?;
    write_json(&out_path(config, "eval_report.json")?, &report)?;
    let levels = LevelMap::bundled();
    let rows = report.plot_rows(|v| levels.parent(v).map(str::to_string));
    let tsv = out_path(config, "f1_by_value.tsv")?;
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(&tsv)
        .map_err(fatal)?;
    w.write_record(["value", "level", "f1", "support"])
        .map_err(fatal)?;
    for r in &rows {
        w.write_record([
            r.value.as_str(),
            r.level.as_deref().unwrap_or(""),
            &format!("{:.6}", r.f1),
            &r.support.to_string(),
        ])
        .map_err(fatal)?;
    }
    w.flush().map_err(fatal)?;
    print!("{}", report.render_table());
    Ok(report)
}

pub fn identify(config: &RunConfig) -> Result<(), CliError> {
    let system = system(config)?;
    let records = load_records(config, &system)?;
    let backends = backends(config)?;
    let instances: Vec<TextInstance> = records.iter().map(DatasetRecord::instance).collect();
    let outcomes = identify_all(config, &system, &backends, &instances);
    let mut results = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => results.push(r),
            Err(e) => failures.push(e),
        }
    }
    write_jsonl(&out_path(config, "results.jsonl")?, &results).map_err(fatal)?;
    let tokens = metrics::token_report(&results);
    println!(
        "{} instance(s), strategy {}: {:.1} LLM tokens and {:.2} LLM calls per instance",
        results.len(),
        config.strategy_label(&system),
        tokens.mean_llm_tokens,
        tokens.mean_llm_calls
    );
    if records.iter().any(|r| !r.labels.is_empty()) && !results.is_empty() {
        evaluate(config, &system, &records, &results)?;
    }
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("failed: {f}");
        }
        return Err(CliError::fatal(format!(
            "{} of {} instance(s) failed",
            failures.len(),
            records.len()
        )));
    }
    Ok(())
}

pub fn eval(config: &RunConfig, results: Option<PathBuf>) -> Result<(), CliError> {
    let system = system(config)?;
    let records = load_records(config, &system)?;
    let path = results.unwrap_or_else(|| config.output_dir.join("results.jsonl"));
    if !path.is_file() {
        return Err(CliError::config(format!(
            "results file {} does not exist",
            path.display()
        )));
    }
    let results: Vec<ResultRecord> = read_jsonl(&path).map_err(fatal)?;
    evaluate(config, &system, &records, &results).map(|_| ())
}

fn load_token_reports(paths: &[PathBuf]) -> Result<Vec<(String, TokenReport)>, CliError> {
    paths
        .iter()
        .map(|p| {
            if !p.is_file() {
                return Err(CliError::config(format!(
                    "results file {} does not exist",
                    p.display()
                )));
            }
            let results: Vec<ResultRecord> = read_jsonl(p).map_err(fatal)?;
            Ok((p.display().to_string(), metrics::token_report(&results)))
        })
        .collect()
}

pub fn token_report(paths: &[PathBuf]) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Row {
        file: String,
        #[serde(flatten)]
        report: TokenReport,
    }
    let reports = load_token_reports(paths)?;
    println!(
        "{:<40}  {:>9}  {:>10}  {:>10}  {:>10}  {:>12}",
        "results", "instances", "LLM tok", "prompt", "completion", "detector tok"
    );
    for (f, r) in &reports {
        println!(
            "{:<40}  {:>9}  {:>10.1}  {:>10.1}  {:>10.1}  {:>12.1}",
            f,
            r.instances,
            r.mean_llm_tokens,
            r.mean_llm_prompt_tokens,
            r.mean_llm_completion_tokens,
            r.mean_detector_tokens
        );
    }
    let rows: Vec<Row> = reports
        .into_iter()
        .map(|(file, report)| Row { file, report })
        .collect();
    println!(
        "{}",
        serde_json::to_string_pretty(&rows).expect("reports serialize")
    );
    Ok(())
}

pub fn consistency(config: &RunConfig) -> Result<(), CliError> {
    let system = system(config)?;
    let records = load_records(config, &system)?;
    let mut instances: Vec<TextInstance> = records.iter().map(DatasetRecord::instance).collect();
    if let Some(n) = config.consistency.instances {
        let mut idx: Vec<usize> = (0..instances.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
        idx.truncate(n);
        idx.sort_unstable();
        instances = idx.into_iter().map(|i| instances[i].clone()).collect();
    }
    let backends = backends(config)?;
    let study = exec::with_workers(config.workers, || {
        run_consistency(
            &*backends.detector,
            &*backends.llm,
            &system,
            &instances,
            &config.eavit(),
            config.consistency.repeats,
            config.exec_mode(),
        )
    })
    .map_err(fatal)?;
    write_json(
        &out_path(config, "consistency_report.json")?,
        &study.reports,
    )?;
    println!("{:<14}  {:>13}", "stage", "mean variance");
    for r in &study.reports {
        println!("{:<14}  {:>13.6}", r.stage.as_str(), r.mean_variance);
    }
    Ok(())
}

fn datagen_error(e: DatagenError) -> CliError {
    match e {
        DatagenError::NotEnoughSeeds { .. }
        | DatagenError::NoTargets
        | DatagenError::UnknownTarget(_)
        | DatagenError::TooManyValues { .. }
        | DatagenError::Threshold(_) => CliError::config(e.to_string()),
        other => fatal(other),
    }
}

fn annotated(
    records: &[DatasetRecord],
    system: &ValueSystem,
) -> Result<Vec<AnnotatedRecord>, CliError> {
    records
        .iter()
        .map(|r| AnnotatedRecord::from_dataset(r, system).map_err(fatal))
        .collect()
}

pub fn datagen(config: &RunConfig, mode: DatagenMode) -> Result<(), CliError> {
    let system = system(config)?;
    let records = load_records(config, &system)?;
    let mut recs = annotated(&records, &system)?;
    match mode {
        DatagenMode::Explain => {
            let backends = backends(config)?;
            let (out, report) = exec::with_workers(config.workers, || {
                augment_explanations(
                    &*backends.llm,
                    &system,
                    recs,
                    &config.datagen.explain,
                    config.exec_mode(),
                )
            });
            let ds: Vec<DatasetRecord> = out.iter().map(|r| r.to_dataset(&system)).collect();
            write_jsonl(&out_path(config, "explained.jsonl")?, &ds).map_err(fatal)?;
            write_json(&out_path(config, "augment_report.json")?, &report)?;
            println!(
                "{} explanation call(s), {} filled, {} flagged over length, {} failure(s)",
                report.calls,
                report.filled,
                report.flagged_long.len(),
                report.failures.len()
            );
            if !report.failures.is_empty() {
                return Err(CliError::fatal(format!(
                    "{} record(s) skipped after backend failures",
                    report.skipped_records.len()
                )));
            }
        }
        DatagenMode::Icl | DatagenMode::Targeted => {
            let kind = if mode == DatagenMode::Icl {
                GenerationKind::Icl
            } else if config.datagen.targets.is_empty() {
                let labels: Vec<LabelVector> = recs.iter().map(|r| r.labels.clone()).collect();
                GenerationKind::Targeted(
                    least_frequent_values(&labels, &system, config.datagen.k)
                        .map_err(datagen_error)?,
                )
            } else {
                GenerationKind::Targeted(config.datagen.targets.clone())
            };
            let backends = backends(config)?;
            let mut gen = config.datagen.generation.clone();
            gen.seed = config.seed;
            let (new, report) = exec::with_workers(config.workers, || {
                generate_batch(
                    &*backends.llm,
                    &system,
                    &kind,
                    &recs,
                    &gen,
                    config.exec_mode(),
                )
            })
            .map_err(datagen_error)?;
            let name = if mode == DatagenMode::Icl {
                "icl"
            } else {
                "targeted"
            };
            let ds: Vec<DatasetRecord> = new.iter().map(|r| r.to_dataset(&system)).collect();
            write_jsonl(&out_path(config, &format!("generated_{name}.jsonl"))?, &ds)
                .map_err(fatal)?;
            write_json(
                &out_path(config, &format!("generation_report_{name}.json"))?,
                &report,
            )?;
            let fmt = |r: Option<f64>| r.map_or("undefined".to_string(), |x| format!("{x:.3}"));
            println!(
                "kept {} of target {} in {} call(s); dropped: {} parse, {} empty, {} out-of-roster, {} duplicate; max/min ratio {} -> {}",
                report.kept,
                gen.count,
                report.calls,
                report.dropped.parse_failure,
                report.dropped.empty_text,
                report.dropped.out_of_roster,
                report.dropped.duplicate,
                fmt(report.ratio_before),
                fmt(report.ratio_after)
            );
            if report.budget_exhausted {
                log::warn!("call budget spent before reaching the target count");
            }
        }
        DatagenMode::Emit => {
            for p in &config.datagen.extra {
                let extra = load_dataset(p, &system).map_err(fatal)?;
                recs.extend(annotated(&extra, &system)?);
            }
            let training = emit_alpaca(&recs, &system, config.datagen.include_reflection)
                .map_err(datagen_error)?;
            write_alpaca(&out_path(config, "alpaca.json")?, &training).map_err(fatal)?;
            let dist = class_distribution(
                &recs.iter().map(|r| r.labels.clone()).collect::<Vec<_>>(),
                &system,
            );
            write_json(&out_path(config, "class_distribution.json")?, &dist)?;
            println!(
                "{} training record(s) from {} data record(s)",
                training.len(),
                recs.len()
            );
        }
    }
    Ok(())
}

pub fn persona(config: &RunConfig) -> Result<(), CliError> {
    let system = system(config)?;
    let levels = LevelMap::bundled();
    levels
        .covers(&system)
        .map_err(|e| CliError::config(e.to_string()))?;
    let questions = bundled_questions();
    let wvs = config.persona.wvs_answers.as_ref().expect("validated");
    let individuals =
        load_wvs_answers(wvs, &questions).map_err(|e| CliError::config(e.to_string()))?;
    let topics = match &config.persona.topics {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect(),
        None => bundled_topics(),
    };
    let backends = backends(config)?;
    let mut all_texts = Vec::new();
    let mut scores = Vec::new();
    let mut failures = Vec::new();
    for ind in &individuals {
        let (texts, report) = exec::with_workers(config.workers, || {
            generate_persona_texts(
                &*backends.llm,
                ind,
                &questions,
                &topics,
                &config.persona.roleplay,
                config.exec_mode(),
            )
        })
        .map_err(fatal)?;
        failures.extend(report.failures);
        let results = identify_all(config, &system, &backends, &texts);
        let mut labels = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok(rec) => {
                    labels.push(LabelVector::from_names(&system, &rec.labels).map_err(fatal)?);
                    all_texts.push(rec);
                }
                Err(e) => failures.push(e),
            }
        }
        scores.push(score_individual(ind, &questions, &labels, &system, &levels).map_err(fatal)?);
    }
    let summary = summarize(&scores).map_err(fatal)?;
    write_jsonl(&out_path(config, "persona_results.jsonl")?, &all_texts).map_err(fatal)?;
    write_jsonl(&out_path(config, "persona_scores.jsonl")?, &scores).map_err(fatal)?;
    write_json(&out_path(config, "persona_summary.json")?, &summary)?;
    for a in &summary.individuals {
        println!("{:<16}  {:.2}", a.individual, a.accuracy);
    }
    println!(
        "mean accuracy {:.4} over {} individual(s)",
        summary.mean_accuracy,
        summary.individuals.len()
    );
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("failed: {f}");
        }
        return Err(CliError::fatal(format!(
            "{} persona text(s) failed",
            failures.len()
        )));
    }
    Ok(())
}
