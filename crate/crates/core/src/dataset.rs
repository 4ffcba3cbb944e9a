//! Dataset files: the line-delimited canonical format and the Touché23
//! tab-separated importer.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::values::{render_plain_text, LabelVector, TextInstance, ValueError, ValueSystem};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{table} table is missing column {column:?}")]
    MissingColumn { table: &'static str, column: String },
    #[error("{table} table row {row}, column {column:?}: expected 0 or 1, found {value:?}")]
    NonBinary {
        table: &'static str,
        row: usize,
        column: String,
        value: String,
    },
    #[error("{table} table repeats argument id {id:?}")]
    IdCollision { table: &'static str, id: String },
    #[error("{table} table row {row}: {message}")]
    BadRow {
        table: &'static str,
        row: usize,
        message: String,
    },
    #[error("{path}:{line}: {message}")]
    BadRecord {
        path: String,
        line: usize,
        message: String,
    },
    #[error("record {id:?}: {source}")]
    Labels {
        id: String,
        #[source]
        source: ValueError,
    },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("tabular parse error: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordSource {
    #[default]
    Original,
    IclGenerated,
    TargetedGenerated,
}

impl RecordSource {
    fn is_original(&self) -> bool {
        *self == RecordSource::Original
    }
}

/// One line of the canonical dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default)]
    pub explanations: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "RecordSource::is_original")]
    pub source: RecordSource,
}

impl DatasetRecord {
    pub fn from_parts(
        instance: &TextInstance,
        labels: &LabelVector,
        system: &ValueSystem,
        explanations: BTreeMap<String, String>,
        source: RecordSource,
    ) -> Self {
        Self {
            id: instance.id.clone(),
            text: instance.text.clone(),
            labels: labels
                .positive_names(system)
                .into_iter()
                .map(str::to_string)
                .collect(),
            explanations,
            meta: instance.meta.clone(),
            source,
        }
    }

    pub fn instance(&self) -> TextInstance {
        TextInstance {
            id: self.id.clone(),
            text: self.text.clone(),
            meta: self.meta.clone(),
        }
    }

    pub fn label_vector(&self, system: &ValueSystem) -> Result<LabelVector, DatasetError> {
        LabelVector::from_names(system, &self.labels).map_err(|source| DatasetError::Labels {
            id: self.id.clone(),
            source,
        })
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| DatasetError::BadRecord {
            path: path.display().to_string(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a canonical dataset and checks ids are unique and label names exist.
pub fn load_dataset(path: &Path, system: &ValueSystem) -> Result<Vec<DatasetRecord>, DatasetError> {
    let records: Vec<DatasetRecord> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.id.as_str()) {
            return Err(DatasetError::DuplicateId(r.id.clone()));
        }
        r.label_vector(system)?;
    }
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct ToucheImport {
    pub pairs: Vec<(TextInstance, LabelVector)>,
    /// Argument ids present only in the arguments table.
    pub only_in_arguments: Vec<String>,
    /// Argument ids present only in the labels table.
    pub only_in_labels: Vec<String>,
}

impl ToucheImport {
    pub fn to_records(&self, system: &ValueSystem) -> Vec<DatasetRecord> {
        self.pairs
            .iter()
            .map(|(inst, labels)| {
                DatasetRecord::from_parts(
                    inst,
                    labels,
                    system,
                    BTreeMap::new(),
                    RecordSource::Original,
                )
            })
            .collect()
    }
}

const ARGUMENT_ID: &str = "Argument ID";

fn tsv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .has_headers(true)
        .from_reader(r)
}

fn column(
    headers: &csv::StringRecord,
    table: &'static str,
    name: &str,
) -> Result<usize, DatasetError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| DatasetError::MissingColumn {
            table,
            column: name.to_string(),
        })
}

pub fn import_touche_paths(
    arguments: &Path,
    labels: &Path,
    system: &ValueSystem,
) -> Result<ToucheImport, DatasetError> {
    let open = |p: &Path| {
        File::open(p).map_err(|source| DatasetError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    import_touche(open(arguments)?, open(labels)?, system)
}

/// Joins the Touché `arguments` and `labels` tables on `Argument ID`.
pub fn import_touche<A: Read, L: Read>(
    arguments: A,
    labels: L,
    system: &ValueSystem,
) -> Result<ToucheImport, DatasetError> {
    let mut arg_reader = tsv_reader(arguments);
    let headers = arg_reader.headers()?.clone();
    let id_col = column(&headers, "arguments", ARGUMENT_ID)?;
    let conclusion_col = column(&headers, "arguments", "Conclusion")?;
    let stance_col = column(&headers, "arguments", "Stance")?;
    let premise_col = column(&headers, "arguments", "Premise")?;

    let mut args: Vec<TextInstance> = Vec::new();
    let mut arg_ids = HashSet::new();
    for (row, rec) in arg_reader.records().enumerate() {
        let rec = rec?;
        let row = row + 2;
        let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let id = field(id_col);
        if !arg_ids.insert(id.clone()) {
            return Err(DatasetError::IdCollision {
                table: "arguments",
                id,
            });
        }
        let (stance, conclusion, premise) =
            (field(stance_col), field(conclusion_col), field(premise_col));
        let text = render_plain_text(&stance, &conclusion, &premise).map_err(|e| {
            DatasetError::BadRow {
                table: "arguments",
                row,
                message: e.to_string(),
            }
        })?;
        let mut inst = TextInstance::new(id, text);
        inst.meta.insert("stance".into(), stance);
        inst.meta.insert("conclusion".into(), conclusion);
        inst.meta.insert("premise".into(), premise);
        args.push(inst);
    }

    let mut label_reader = tsv_reader(labels);
    let headers = label_reader.headers()?.clone();
    let lid_col = column(&headers, "labels", ARGUMENT_ID)?;
    let value_cols = system
        .names()
        .map(|n| column(&headers, "labels", n))
        .collect::<Result<Vec<_>, _>>()?;

    let mut label_rows: HashMap<String, LabelVector> = HashMap::new();
    let mut label_order = Vec::new();
    for (row, rec) in label_reader.records().enumerate() {
        let rec = rec?;
        let row = row + 2;
        let id = rec.get(lid_col).unwrap_or("").trim().to_string();
        let mut bits = Vec::with_capacity(value_cols.len());
        for (vi, &col) in value_cols.iter().enumerate() {
            let cell = rec.get(col).unwrap_or("").trim();
            bits.push(match cell {
                "0" => false,
                "1" => true,
                other => {
                    return Err(DatasetError::NonBinary {
                        table: "labels",
                        row,
                        column: system.values()[vi].name.clone(),
                        value: other.to_string(),
                    })
                }
            });
        }
        let lv = LabelVector::from_bools(system, bits).expect("one bit per value");
        if label_rows.insert(id.clone(), lv).is_some() {
            return Err(DatasetError::IdCollision {
                table: "labels",
                id,
            });
        }
        label_order.push(id);
    }

    let mut pairs = Vec::new();
    let mut only_in_arguments = Vec::new();
    for inst in args {
        match label_rows.remove(&inst.id) {
            Some(lv) => pairs.push((inst, lv)),
            None => only_in_arguments.push(inst.id),
        }
    }
    let only_in_labels = label_order
        .into_iter()
        .filter(|id| label_rows.contains_key(id))
        .collect();

    Ok(ToucheImport {
        pairs,
        only_in_arguments,
        only_in_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn system3() -> ValueSystem {
        ValueSystem::from_json_str(
            "t",
            r#"{"Hedonism": ["fun"], "Power": ["control"], "Face": ["image"]}"#,
        )
        .unwrap()
    }

    const ARGS: &str = "Argument ID\tConclusion\tStance\tPremise\n\
A01\tWe should ban cloning\tin favor of\tclones cause chaos\n\
A02\tWe should subsidize art\tagainst\tmarkets decide\n\
A03\tWe should end uniforms\tin favor of\tchildren express themselves\n";

    const LABELS: &str = "Argument ID\tHedonism\tPower\tFace\n\
A01\t0\t1\t0\n\
A02\t1\t0\t0\n\
A03\t1\t0\t1\n";

    #[test]
    fn imports_matching_rows() {
        let imp = import_touche(ARGS.as_bytes(), LABELS.as_bytes(), &system3()).unwrap();
        assert_eq!(imp.pairs.len(), 3);
        assert_eq!(
            imp.pairs[0].0.text,
            "I am in favor of the opinion of We should ban cloning, because clones cause chaos."
        );
        assert_eq!(imp.pairs[2].1.positives().collect::<Vec<_>>(), vec![0, 2]);
        assert!(imp.only_in_arguments.is_empty() && imp.only_in_labels.is_empty());
    }

    #[test]
    fn missing_value_column_is_named() {
        let labels = "Argument ID\tPower\tFace\nA01\t0\t1\n";
        let err = import_touche(ARGS.as_bytes(), labels.as_bytes(), &system3()).unwrap_err();
        match err {
            DatasetError::MissingColumn { column, .. } => assert_eq!(column, "Hedonism"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn non_binary_cell_cites_row_and_column() {
        let labels = "Argument ID\tHedonism\tPower\tFace\nA01\t0\t2\t0\n";
        let err = import_touche(ARGS.as_bytes(), labels.as_bytes(), &system3()).unwrap_err();
        match err {
            DatasetError::NonBinary {
                row, column, value, ..
            } => {
                assert_eq!((row, column.as_str(), value.as_str()), (2, "Power", "2"))
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unmatched_rows_are_reported() {
        let labels = "Argument ID\tHedonism\tPower\tFace\nA01\t0\t1\t0\nZ99\t1\t1\t1\n";
        let imp = import_touche(ARGS.as_bytes(), labels.as_bytes(), &system3()).unwrap();
        assert_eq!(imp.pairs.len(), 1);
        assert_eq!(imp.only_in_arguments, vec!["A02", "A03"]);
        assert_eq!(imp.only_in_labels, vec!["Z99"]);
    }

    #[test]
    fn id_collision() {
        let labels = "Argument ID\tHedonism\tPower\tFace\nA01\t0\t1\t0\nA01\t0\t1\t0\n";
        assert!(matches!(
            import_touche(ARGS.as_bytes(), labels.as_bytes(), &system3()),
            Err(DatasetError::IdCollision { .. })
        ));
    }

    #[test]
    fn canonical_export_import_is_identity() {
        let sys = system3();
        let imp = import_touche(ARGS.as_bytes(), LABELS.as_bytes(), &sys).unwrap();
        let records = imp.to_records(&sys);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_jsonl(&path, &records).unwrap();
        let back = load_dataset(&path, &sys).unwrap();
        assert_eq!(back, records);
        for ((inst, lv), rec) in imp.pairs.iter().zip(&back) {
            assert_eq!(&rec.instance(), inst);
            assert_eq!(&rec.label_vector(&sys).unwrap(), lv);
        }
    }
}
