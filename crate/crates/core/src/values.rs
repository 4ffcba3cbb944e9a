//! Value systems, text instances and per-value label vectors.
//!
//! A [`ValueSystem`] is an ordered registry of named values with their
//! natural-language definitions. Its order defines what index `i` means in
//! every [`LabelVector`] built against it.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

/// Bundled Touché23-ValueEval level-2 Schwartz definitions (20 values).
pub const SCHWARTZ_TOUCHE23: &str = include_str!("../data/schwartz_touche23.json");

#[derive(Debug, Error)]
pub enum ValueError {
    #[error("duplicate value name {0:?}")]
    DuplicateName(String),
    #[error("value {0:?} has an empty definition")]
    EmptyDefinition(String),
    #[error("value system contains an empty value name")]
    EmptyName,
    #[error("value system {0:?} defines no values")]
    EmptySystem(String),
    #[error("malformed value-system document: {0}")]
    Malformed(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("label vector has {got} entries but system {system:?} has {expected} values")]
    LengthMismatch {
        system: String,
        expected: usize,
        got: usize,
    },
    #[error("unknown value name {0:?}")]
    UnknownValue(String),
    #[error("empty {0} argument")]
    EmptyArgument(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueDef {
    pub name: String,
    pub definition: String,
}

impl ValueDef {
    pub fn new(name: impl Into<String>, definition: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            definition: definition.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValueSystem {
    name: String,
    values: Vec<ValueDef>,
    index: HashMap<String, usize>,
}

/// Raw document entries in file order, duplicates included.
struct OrderedEntries(Vec<(String, Vec<String>)>);

impl<'de> Deserialize<'de> for OrderedEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = OrderedEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map from value name to a list of definition strings")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Vec<String>>()? {
                    entries.push((k, v));
                }
                Ok(OrderedEntries(entries))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

impl ValueSystem {
    pub fn new(name: impl Into<String>, values: Vec<ValueDef>) -> Result<Self, ValueError> {
        let name = name.into();
        if values.is_empty() {
            return Err(ValueError::EmptySystem(name));
        }
        let mut index = HashMap::with_capacity(values.len());
        for (i, v) in values.iter().enumerate() {
            if v.name.trim().is_empty() {
                return Err(ValueError::EmptyName);
            }
            if v.definition.trim().is_empty() {
                return Err(ValueError::EmptyDefinition(v.name.clone()));
            }
            if index.insert(v.name.clone(), i).is_some() {
                return Err(ValueError::DuplicateName(v.name.clone()));
            }
        }
        Ok(Self {
            name,
            values,
            index,
        })
    }

    /// Parses the `name -> [definition, ...]` document format. Key order is
    /// preserved; multi-element definition lists are joined with a space.
    pub fn from_json_str(name: impl Into<String>, doc: &str) -> Result<Self, ValueError> {
        let OrderedEntries(entries) =
            serde_json::from_str(doc).map_err(|e| ValueError::Malformed(e.to_string()))?;
        let values = entries
            .into_iter()
            .map(|(name, parts)| {
                let definition = parts
                    .iter()
                    .map(|p| p.trim())
                    .filter(|p| !p.is_empty())
                    .collect::<Vec<_>>()
                    .join(" ");
                ValueDef { name, definition }
            })
            .collect();
        Self::new(name, values)
    }

    pub fn from_path(path: &Path) -> Result<Self, ValueError> {
        let doc = std::fs::read_to_string(path).map_err(|source| ValueError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".to_string());
        Self::from_json_str(name, &doc)
    }

    /// The 20 level-2 Schwartz values as annotated in Touché23-ValueEval.
    pub fn schwartz() -> Self {
        Self::from_json_str("schwartz-touche23", SCHWARTZ_TOUCHE23)
            .expect("bundled value system is well-formed")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[ValueDef] {
        &self.values
    }

    pub fn get(&self, index: usize) -> Option<&ValueDef> {
        self.values.get(index)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.iter().map(|v| v.name.as_str())
    }

    /// Serializes back into the document format, one definition per value.
    pub fn to_json_string(&self) -> String {
        let mut out = String::from("{\n");
        for (i, v) in self.values.iter().enumerate() {
            let name = serde_json::to_string(&v.name).expect("string serializes");
            let def = serde_json::to_string(&v.definition).expect("string serializes");
            out.push_str(&format!("    {name}: [\n        {def}\n    ]"));
            out.push_str(if i + 1 < self.values.len() {
                ",\n"
            } else {
                "\n"
            });
        }
        out.push_str("}\n");
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextInstance {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl TextInstance {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            meta: BTreeMap::new(),
        }
    }
}

/// Binary per-value labels, aligned with one [`ValueSystem`]'s order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelVector {
    system_name: String,
    labels: Vec<bool>,
}

impl LabelVector {
    pub fn zeros(system: &ValueSystem) -> Self {
        Self {
            system_name: system.name().to_string(),
            labels: vec![false; system.len()],
        }
    }

    pub fn from_bools(system: &ValueSystem, labels: Vec<bool>) -> Result<Self, ValueError> {
        if labels.len() != system.len() {
            return Err(ValueError::LengthMismatch {
                system: system.name().to_string(),
                expected: system.len(),
                got: labels.len(),
            });
        }
        Ok(Self {
            system_name: system.name().to_string(),
            labels,
        })
    }

    pub fn from_names<S: AsRef<str>>(
        system: &ValueSystem,
        names: &[S],
    ) -> Result<Self, ValueError> {
        let mut v = Self::zeros(system);
        for n in names {
            let i = system
                .index_of(n.as_ref())
                .ok_or_else(|| ValueError::UnknownValue(n.as_ref().to_string()))?;
            v.labels[i] = true;
        }
        Ok(v)
    }

    pub fn system_name(&self) -> &str {
        &self.system_name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.labels[i]
    }

    pub fn set(&mut self, i: usize, on: bool) {
        self.labels[i] = on;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.labels
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &on)| on.then_some(i))
    }

    pub fn count_positive(&self) -> usize {
        self.labels.iter().filter(|&&b| b).count()
    }

    pub fn positive_names<'s>(&self, system: &'s ValueSystem) -> Vec<&'s str> {
        self.positives()
            .filter_map(|i| system.get(i).map(|v| v.name.as_str()))
            .collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.labels
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Touché argument rows rendered as one first-person sentence.
pub fn render_plain_text(
    stance: &str,
    conclusion: &str,
    premise: &str,
) -> Result<String, ValueError> {
    for (what, s) in [
        ("stance", stance),
        ("conclusion", conclusion),
        ("premise", premise),
    ] {
        if s.trim().is_empty() {
            return Err(ValueError::EmptyArgument(what));
        }
    }
    Ok(format!(
        "I am {stance} the opinion of {conclusion}, because {premise}."
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_schwartz_has_twenty_values_in_order() {
        let s = ValueSystem::schwartz();
        assert_eq!(s.len(), 20);
        assert_eq!(s.values()[0].name, "Self-direction: thought");
        assert_eq!(s.values()[19].name, "Universalism: objectivity");
        assert_eq!(s.index_of("Humility"), Some(13));
    }

    #[test]
    fn minimal_document() {
        let s = ValueSystem::from_json_str("t", r#"{"A": ["d"]}"#).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.values()[0].definition, "d");
    }

    #[test]
    fn duplicate_keys_rejected() {
        let err = ValueSystem::from_json_str("t", r#"{"A": ["d"], "A": ["e"]}"#).unwrap_err();
        assert!(matches!(err, ValueError::DuplicateName(n) if n == "A"));
    }

    #[test]
    fn empty_definition_and_malformed_are_distinct() {
        assert!(matches!(
            ValueSystem::from_json_str("t", r#"{"A": [""]}"#),
            Err(ValueError::EmptyDefinition(_))
        ));
        assert!(matches!(
            ValueSystem::from_json_str("t", r#"{"A": "d"}"#),
            Err(ValueError::Malformed(_))
        ));
        assert!(matches!(
            ValueSystem::from_json_str("t", "{}"),
            Err(ValueError::EmptySystem(_))
        ));
    }

    #[test]
    fn multi_part_definitions_join_with_space() {
        let s = ValueSystem::from_json_str("t", r#"{"A": ["one.", "two."]}"#).unwrap();
        assert_eq!(s.values()[0].definition, "one. two.");
    }

    #[test]
    fn document_round_trip() {
        let s = ValueSystem::schwartz();
        let again = ValueSystem::from_json_str("schwartz-touche23", &s.to_json_string()).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn plain_text_template() {
        assert_eq!(
            render_plain_text("in favor of", "free college", "it reduces inequality").unwrap(),
            "I am in favor of the opinion of free college, because it reduces inequality."
        );
        assert_eq!(
            render_plain_text("against", "X", "Y").unwrap(),
            "I am against the opinion of X, because Y."
        );
        assert!(render_plain_text("", "X", "Y").is_err());
    }

    #[test]
    fn label_vector_from_names() {
        let s = ValueSystem::schwartz();
        let v = LabelVector::from_names(&s, &["Hedonism", "Face"]).unwrap();
        assert_eq!(v.positives().collect::<Vec<_>>(), vec![3, 7]);
        assert!(LabelVector::from_names(&s, &["Bravery"]).is_err());
        assert!(LabelVector::from_bools(&s, vec![true]).is_err());
    }
}
