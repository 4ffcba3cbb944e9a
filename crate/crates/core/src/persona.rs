//! Virtual-individual study: questionnaire scoring, per-person aggregation
//! of text-level labels, and agreement between the two.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, ExecMode};
use crate::gateway::{self, ChatBackend, ChatRequest, GatewayError, Usage};
use crate::prompts::{fill, PromptError};
use crate::values::{render_plain_text, LabelVector, TextInstance, ValueSystem};

const LEVEL_MAP: &str = include_str!("../data/level_map.json");
const QUESTIONS: &str = include_str!("../data/persona/wvs_questions.json");
const TOPICS: &str = include_str!("../data/persona/topics.txt");
const ROLEPLAY: &str = include_str!("../data/persona/roleplay.txt");

/// Texts that must flag a value before the individual is said to hold it.
pub const MIN_SUPPORTING_TEXTS: usize = 3;
/// Predicted and questionnaire scores agree when closer than this.
pub const AGREEMENT_MARGIN: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PersonaError {
    #[error("answer {0} is outside 1..=6")]
    AnswerRange(i64),
    #[error("individual {individual:?}: missing answer to {question}")]
    MissingAnswer {
        individual: String,
        question: String,
    },
    #[error("individual {individual:?}: unknown question {question:?}")]
    UnknownQuestion {
        individual: String,
        question: String,
    },
    #[error("duplicate individual {0:?}")]
    DuplicateIndividual(String),
    #[error("score vectors cover {pred} and {real} values, expected {expected}")]
    Coverage {
        pred: usize,
        real: usize,
        expected: usize,
    },
    #[error("value {0:?} has no level-1 parent in the level map")]
    Unmapped(String),
    #[error("level map names unknown level-1 value {0:?}")]
    UnknownParent(String),
    #[error("label vector belongs to {found:?}, expected {expected:?}")]
    WrongSystem { found: String, expected: String },
    #[error("roleplay reply: {0}")]
    BadReply(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

/// Questionnaire score in [0, 1]: max((4.5 - q) / 3.5, 0).
pub fn wvs_score(answer: i64) -> Result<f64, PersonaError> {
    if !(1..=6).contains(&answer) {
        return Err(PersonaError::AnswerRange(answer));
    }
    Ok(((4.5 - answer as f64) / 3.5).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WvsQuestion {
    pub id: String,
    /// Level-1 value the question measures.
    pub value: String,
    pub text: String,
}

/// v70..v79 in order; the order also fixes the 10-value space.
pub fn bundled_questions() -> Vec<WvsQuestion> {
    serde_json::from_str(QUESTIONS).expect("bundled questions parse")
}

pub fn bundled_topics() -> Vec<String> {
    TOPICS
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

/// The level-1 values, in questionnaire order.
pub fn level1_values() -> Vec<String> {
    bundled_questions().into_iter().map(|q| q.value).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WvsAnswer {
    pub question_id: String,
    pub answer: i64,
    pub mapped_value: String,
}

/// One line of a WVS answers file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndividualAnswers {
    pub individual: String,
    /// question id → answer (1..=6)
    pub answers: BTreeMap<String, i64>,
}

impl IndividualAnswers {
    /// Answers in questionnaire order, checked for completeness and range.
    pub fn resolve(&self, questions: &[WvsQuestion]) -> Result<Vec<WvsAnswer>, PersonaError> {
        for q in self.answers.keys() {
            if !questions.iter().any(|x| &x.id == q) {
                return Err(PersonaError::UnknownQuestion {
                    individual: self.individual.clone(),
                    question: q.clone(),
                });
            }
        }
        questions
            .iter()
            .map(|q| {
                let &answer =
                    self.answers
                        .get(&q.id)
                        .ok_or_else(|| PersonaError::MissingAnswer {
                            individual: self.individual.clone(),
                            question: q.id.clone(),
                        })?;
                wvs_score(answer)?;
                Ok(WvsAnswer {
                    question_id: q.id.clone(),
                    answer,
                    mapped_value: q.value.clone(),
                })
            })
            .collect()
    }

    pub fn real_scores(&self, questions: &[WvsQuestion]) -> Result<Vec<f64>, PersonaError> {
        self.resolve(questions)?
            .iter()
            .map(|a| wvs_score(a.answer))
            .collect()
    }
}

pub fn load_wvs_answers(
    path: &Path,
    questions: &[WvsQuestion],
) -> Result<Vec<IndividualAnswers>, PersonaError> {
    let file_err = |message: String| PersonaError::File {
        path: path.display().to_string(),
        message,
    };
    let body = fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
    let mut out: Vec<IndividualAnswers> = Vec::new();
    for (n, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: IndividualAnswers =
            serde_json::from_str(line).map_err(|e| file_err(format!("line {}: {e}", n + 1)))?;
        if out.iter().any(|o| o.individual == rec.individual) {
            return Err(PersonaError::DuplicateIndividual(rec.individual));
        }
        rec.resolve(questions)?;
        out.push(rec);
    }
    Ok(out)
}

/// Fine-grained value → level-1 parent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelMap {
    parent: BTreeMap<String, String>,
    level1: Vec<String>,
}

impl LevelMap {
    pub fn new(
        parent: BTreeMap<String, String>,
        level1: Vec<String>,
    ) -> Result<Self, PersonaError> {
        if let Some(p) = parent.values().find(|p| !level1.contains(p)) {
            return Err(PersonaError::UnknownParent(p.clone()));
        }
        Ok(Self { parent, level1 })
    }

    pub fn bundled() -> Self {
        let parent: BTreeMap<String, String> =
            serde_json::from_str(LEVEL_MAP).expect("bundled level map parses");
        Self::new(parent, level1_values()).expect("bundled level map is consistent")
    }

    pub fn parent(&self, value: &str) -> Option<&str> {
        self.parent.get(value).map(String::as_str)
    }

    pub fn level1(&self) -> &[String] {
        &self.level1
    }

    /// Checks every value of `system` has a parent.
    pub fn covers(&self, system: &ValueSystem) -> Result<(), PersonaError> {
        match system.names().find(|n| !self.parent.contains_key(*n)) {
            Some(n) => Err(PersonaError::Unmapped(n.to_string())),
            None => Ok(()),
        }
    }

    /// A level-1 value is on when any of its children is.
    pub fn project(
        &self,
        labels: &LabelVector,
        system: &ValueSystem,
    ) -> Result<Vec<bool>, PersonaError> {
        if labels.system_name() != system.name() || labels.len() != system.len() {
            return Err(PersonaError::WrongSystem {
                found: labels.system_name().to_string(),
                expected: system.name().to_string(),
            });
        }
        let mut out = vec![false; self.level1.len()];
        for i in labels.positives() {
            let name = &system.values()[i].name;
            let p = self
                .parent(name)
                .ok_or_else(|| PersonaError::Unmapped(name.clone()))?;
            let k = self
                .level1
                .iter()
                .position(|l| l == p)
                .expect("parents are level-1 values");
            out[k] = true;
        }
        Ok(out)
    }
}

/// A value is held when at least [`MIN_SUPPORTING_TEXTS`] texts flag it.
pub fn aggregate_individual(per_text: &[Vec<bool>], dims: usize) -> Vec<bool> {
    let mut counts = vec![0usize; dims];
    for t in per_text {
        for (c, &on) in counts.iter_mut().zip(t) {
            *c += usize::from(on);
        }
    }
    counts
        .into_iter()
        .map(|c| c >= MIN_SUPPORTING_TEXTS)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaScore {
    pub individual: String,
    pub values: Vec<String>,
    pub s_real: Vec<f64>,
    pub s_pred: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaAccuracy {
    pub individual: String,
    pub correct: Vec<bool>,
    pub accuracy: f64,
}

/// Correct where |s_pred - s_real| < 0.5.
pub fn persona_accuracy(score: &PersonaScore) -> Result<PersonaAccuracy, PersonaError> {
    let n = score.values.len();
    if score.s_pred.len() != n || score.s_real.len() != n || n == 0 {
        return Err(PersonaError::Coverage {
            pred: score.s_pred.len(),
            real: score.s_real.len(),
            expected: n,
        });
    }
    let correct: Vec<bool> = score
        .s_pred
        .iter()
        .zip(&score.s_real)
        .map(|(p, r)| (p - r).abs() < AGREEMENT_MARGIN)
        .collect();
    let accuracy = correct.iter().filter(|&&c| c).count() as f64 / n as f64;
    Ok(PersonaAccuracy {
        individual: score.individual.clone(),
        correct,
        accuracy,
    })
}

/// Aggregates one individual's text labels and scores them against the
/// questionnaire.
pub fn score_individual(
    answers: &IndividualAnswers,
    questions: &[WvsQuestion],
    text_labels: &[LabelVector],
    system: &ValueSystem,
    levels: &LevelMap,
) -> Result<PersonaScore, PersonaError> {
    let projected = text_labels
        .iter()
        .map(|l| levels.project(l, system))
        .collect::<Result<Vec<_>, _>>()?;
    let held = aggregate_individual(&projected, levels.level1().len());
    let values: Vec<String> = questions.iter().map(|q| q.value.clone()).collect();
    let s_pred = values
        .iter()
        .map(|v| {
            let k = levels
                .level1()
                .iter()
                .position(|l| l == v)
                .ok_or_else(|| PersonaError::UnknownParent(v.clone()))?;
            Ok(if held[k] { 1.0 } else { 0.0 })
        })
        .collect::<Result<Vec<_>, PersonaError>>()?;
    Ok(PersonaScore {
        individual: answers.individual.clone(),
        s_real: answers.real_scores(questions)?,
        s_pred,
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaSummary {
    pub individuals: Vec<PersonaAccuracy>,
    /// Mean over individuals and values.
    pub mean_accuracy: f64,
    /// (value, share of individuals where it agreed)
    pub per_value: Vec<(String, f64)>,
}

pub fn summarize(scores: &[PersonaScore]) -> Result<PersonaSummary, PersonaError> {
    let individuals = scores
        .iter()
        .map(persona_accuracy)
        .collect::<Result<Vec<_>, _>>()?;
    let values = scores.first().map(|s| s.values.clone()).unwrap_or_default();
    let n = individuals.len().max(1) as f64;
    let per_value = values
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let agree = individuals
                .iter()
                .filter(|a| a.correct.get(k).copied().unwrap_or(false))
                .count();
            (v.clone(), agree as f64 / n)
        })
        .collect();
    let cells: usize = individuals.iter().map(|a| a.correct.len()).sum();
    let hits: usize = individuals
        .iter()
        .map(|a| a.correct.iter().filter(|&&c| c).count())
        .sum();
    Ok(PersonaSummary {
        mean_accuracy: if cells == 0 {
            0.0
        } else {
            hits as f64 / cells as f64
        },
        individuals,
        per_value,
    })
}

// ---------------------------------------------------------------------------
// role-play text generation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoleplayConfig {
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for RoleplayConfig {
    fn default() -> Self {
        Self {
            model: "gpt-4".into(),
            temperature: 0.7,
            max_output_tokens: 512,
        }
    }
}

pub fn render_roleplay_prompt(
    answers: &IndividualAnswers,
    questions: &[WvsQuestion],
    topic: &str,
) -> Result<String, PersonaError> {
    let resolved = answers.resolve(questions)?;
    let qs = questions
        .iter()
        .map(|q| format!("{}. {}", q.id.to_uppercase(), q.text))
        .collect::<Vec<_>>()
        .join("\n");
    let ans = resolved
        .iter()
        .map(|a| format!("{}: {}", a.question_id.to_uppercase(), a.answer))
        .collect::<Vec<_>>()
        .join("\n");
    Ok(fill(
        ROLEPLAY,
        &[("questions", &qs), ("answers", &ans), ("topic", topic)],
    )?)
}

#[derive(Debug, Deserialize)]
struct RoleplayReply {
    #[serde(default)]
    answer: String,
    #[serde(default)]
    explanation: String,
}

/// Turns a role-play reply into argument-style text about `topic`.
pub fn parse_roleplay_reply(reply: &str, topic: &str) -> Result<String, PersonaError> {
    let (a, b) = reply
        .find('{')
        .zip(reply.rfind('}'))
        .filter(|(a, b)| a < b)
        .ok_or_else(|| PersonaError::BadReply("no JSON object".into()))?;
    let r: RoleplayReply =
        serde_json::from_str(&reply[a..=b]).map_err(|e| PersonaError::BadReply(e.to_string()))?;
    let answer = r.answer.to_lowercase();
    let stance = if answer.contains("unsupportive") {
        "against"
    } else if answer.contains("supportive") {
        "in favor of"
    } else {
        return Err(PersonaError::BadReply(format!(
            "unknown answer {:?}",
            r.answer
        )));
    };
    let topic = topic.trim().trim_end_matches('.');
    let premise = r.explanation.trim().trim_end_matches('.');
    render_plain_text(stance, topic, premise).map_err(|e| PersonaError::BadReply(e.to_string()))
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RoleplayReport {
    pub calls: usize,
    pub failures: Vec<String>,
    pub usage: Usage,
}

/// One text per topic; topics whose call or reply fails are reported and
/// skipped. Text ids are `{individual}-t{k:02}`.
pub fn generate_persona_texts(
    backend: &dyn ChatBackend,
    answers: &IndividualAnswers,
    questions: &[WvsQuestion],
    topics: &[String],
    config: &RoleplayConfig,
    mode: ExecMode,
) -> Result<(Vec<TextInstance>, RoleplayReport), PersonaError> {
    let prompts = topics
        .iter()
        .map(|t| render_roleplay_prompt(answers, questions, t))
        .collect::<Result<Vec<_>, _>>()?;
    let replies = exec::map(mode, &prompts, |_, p| {
        let req = ChatRequest::user(config.model.clone(), p.clone())
            .with_temperature(config.temperature)
            .with_max_output_tokens(config.max_output_tokens);
        gateway::complete(backend, &req)
    });
    let mut report = RoleplayReport::default();
    let mut texts = Vec::new();
    for (k, (topic, reply)) in topics.iter().zip(replies).enumerate() {
        let id = format!("{}-t{:02}", answers.individual, k + 1);
        let reply = reply
            .map_err(|e: GatewayError| e.to_string())
            .and_then(|ex| {
                report.calls += 1;
                report.usage += ex.usage;
                parse_roleplay_reply(&ex.response_text, topic).map_err(|e| e.to_string())
            });
        match reply {
            Ok(text) => {
                let mut inst = TextInstance::new(id, text);
                inst.meta
                    .insert("individual".into(), answers.individual.clone());
                inst.meta.insert("topic".into(), topic.clone());
                texts.push(inst);
            }
            Err(e) => report.failures.push(format!("{id}: {e}")),
        }
    }
    Ok((texts, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedBackend;

    fn answers(id: &str, qs: [i64; 10]) -> IndividualAnswers {
        IndividualAnswers {
            individual: id.into(),
            answers: (70..80)
                .zip(qs)
                .map(|(q, a)| (format!("v{q}"), a))
                .collect(),
        }
    }

    #[test]
    fn wvs_formula() {
        assert_eq!(wvs_score(1).unwrap(), 1.0);
        assert!((wvs_score(4).unwrap() - 0.5 / 3.5).abs() < 1e-12);
        assert_eq!(wvs_score(5).unwrap(), 0.0);
        assert_eq!(wvs_score(6).unwrap(), 0.0);
        assert!(wvs_score(0).is_err() && wvs_score(7).is_err());
        let s: Vec<f64> = (1..=6).map(|q| wvs_score(q).unwrap()).collect();
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn bundled_data_lines_up() {
        let qs = bundled_questions();
        assert_eq!(qs.len(), 10);
        assert_eq!(qs[0].id, "v70");
        assert_eq!(
            level1_values(),
            vec![
                "Self-direction",
                "Power",
                "Security",
                "Hedonism",
                "Benevolence",
                "Achievement",
                "Stimulation",
                "Conformity",
                "Universalism",
                "Tradition"
            ]
        );
        assert_eq!(bundled_topics().len(), 20);
        let lm = LevelMap::bundled();
        lm.covers(&ValueSystem::schwartz()).unwrap();
        assert_eq!(lm.parent("Face"), Some("Power"));
        assert_eq!(lm.parent("Humility"), Some("Tradition"));
    }

    #[test]
    fn threshold_aggregation() {
        let mut texts = vec![vec![false; 10]; 20];
        for t in texts.iter_mut().take(3) {
            t[0] = true;
        }
        for t in texts.iter_mut().skip(5).take(2) {
            t[1] = true;
        }
        let held = aggregate_individual(&texts, 10);
        assert!(held[0]);
        assert!(!held[1]);
        assert_eq!(held.iter().filter(|&&h| h).count(), 1);
        texts.reverse();
        assert_eq!(aggregate_individual(&texts, 10), held);
        assert!(aggregate_individual(&[], 10).iter().all(|&h| !h));
    }

    #[test]
    fn agreement_is_strict() {
        let score = |p: f64, r: f64| PersonaScore {
            individual: "x".into(),
            values: vec!["V".into()],
            s_real: vec![r],
            s_pred: vec![p],
        };
        assert!(persona_accuracy(&score(1.0, 1.0)).unwrap().correct[0]);
        assert!(!persona_accuracy(&score(1.0, 0.5 / 3.5)).unwrap().correct[0]);
        assert!(!persona_accuracy(&score(0.0, 0.5)).unwrap().correct[0]);
        assert!(persona_accuracy(&score(0.0, 0.4999)).unwrap().correct[0]);
        let bad = PersonaScore {
            s_pred: vec![],
            ..score(0.0, 0.0)
        };
        assert!(matches!(
            persona_accuracy(&bad),
            Err(PersonaError::Coverage { .. })
        ));
    }

    #[test]
    fn projection_merges_children() {
        let s = ValueSystem::schwartz();
        let lm = LevelMap::bundled();
        let l = LabelVector::from_names(&s, &["Power: dominance", "Face", "Humility"]).unwrap();
        let p = lm.project(&l, &s).unwrap();
        let on: Vec<&str> = lm
            .level1()
            .iter()
            .zip(&p)
            .filter(|(_, &b)| b)
            .map(|(n, _)| n.as_str())
            .collect();
        assert_eq!(on, vec!["Power", "Tradition"]);
    }

    #[test]
    fn individual_scoring() {
        let s = ValueSystem::schwartz();
        let lm = LevelMap::bundled();
        let qs = bundled_questions();
        let a = answers("p1", [1, 6, 4, 2, 3, 5, 1, 2, 3, 6]);
        let labels: Vec<LabelVector> = (0..20)
            .map(|i| {
                if i < 3 {
                    LabelVector::from_names(&s, &["Self-direction: action"]).unwrap()
                } else {
                    LabelVector::zeros(&s)
                }
            })
            .collect();
        let sc = score_individual(&a, &qs, &labels, &s, &lm).unwrap();
        assert_eq!(sc.s_pred[0], 1.0);
        assert!(sc.s_pred[1..].iter().all(|&p| p == 0.0));
        let acc = persona_accuracy(&sc).unwrap();
        assert!(acc.correct[0] && acc.correct[1]);
        let summary = summarize(&[sc]).unwrap();
        assert_eq!(summary.per_value.len(), 10);
        assert!((summary.mean_accuracy - acc.accuracy).abs() < 1e-12);
    }

    #[test]
    fn answers_file_validation() {
        let dir = tempfile::tempdir().unwrap();
        let qs = bundled_questions();
        let p = dir.path().join("wvs.jsonl");
        let good = serde_json::to_string(&answers("p1", [1; 10])).unwrap();
        fs::write(&p, format!("{good}\n")).unwrap();
        assert_eq!(load_wvs_answers(&p, &qs).unwrap().len(), 1);
        fs::write(&p, format!("{good}\n{good}\n")).unwrap();
        assert!(matches!(
            load_wvs_answers(&p, &qs),
            Err(PersonaError::DuplicateIndividual(_))
        ));
        let mut short = answers("p2", [1; 10]);
        short.answers.remove("v75");
        fs::write(&p, serde_json::to_string(&short).unwrap()).unwrap();
        assert!(matches!(
            load_wvs_answers(&p, &qs),
            Err(PersonaError::MissingAnswer { .. })
        ));
        fs::write(&p, serde_json::to_string(&answers("p3", [7; 10])).unwrap()).unwrap();
        assert!(matches!(
            load_wvs_answers(&p, &qs),
            Err(PersonaError::AnswerRange(7))
        ));
        assert!(load_wvs_answers(&dir.path().join("missing"), &qs).is_err());
    }

    #[test]
    fn roleplay_round() {
        let qs = bundled_questions();
        let a = answers("p1", [1, 6, 4, 2, 3, 5, 1, 2, 3, 6]);
        let prompt =
            render_roleplay_prompt(&a, &qs, "We should subsidize space exploration.").unwrap();
        assert!(prompt.contains("V70. It is important to this person to think up new ideas"));
        assert!(prompt.contains("V71: 6"));
        assert!(prompt.contains("\"We should subsidize space exploration.\""));
        let topics = vec![
            "We should subsidize space exploration.".to_string(),
            "We should ban whaling.".into(),
        ];
        let b = ScriptedBackend::new([
            r#"Sure! {"argument": "x", "answer": "unsupportive", "explanation": "money is better spent on earth."}"#,
            "no json here",
        ]);
        let (texts, rep) = generate_persona_texts(
            &b,
            &a,
            &qs,
            &topics,
            &RoleplayConfig::default(),
            ExecMode::Sequential,
        )
        .unwrap();
        assert_eq!(texts.len(), 1);
        assert_eq!(
            texts[0].text,
            "I am against the opinion of We should subsidize space exploration, because money is better spent on earth."
        );
        assert_eq!(texts[0].id, "p1-t01");
        assert_eq!(rep.failures.len(), 1);
    }
}
