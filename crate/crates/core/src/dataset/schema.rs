//! Variable schema and the JSON sidecar format.
//!
//! A sidecar file is a JSON array of `{name, kind, unit, role, group, segmentation}`
//! objects. `segmentation` is either a list of categories, a list of bin
//! edges (numbers, with `"inf"` / `"-inf"` for open ends), an object
//! `{"edges": [...], "labels": [...]}`, or absent. Continuous variables without
//! declared bins get quartile bins computed from the data.

use std::collections::HashSet;
use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use super::DatasetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    Continuous,
    Categorical,
    Binary,
}

impl VariableKind {
    pub fn is_categorical(self) -> bool {
        matches!(self, Self::Categorical | Self::Binary)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Predictor,
    Target,
}

/// Variable-type taxonomy used when analysing which kinds of predictors
/// experts modified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableGroup {
    Physical,
    Diagnostic,
    Lifestyle,
    History,
}

/// Where a set of bin edges came from. Quartile bins are recomputed once, on
/// the original training rows, when the dataset is split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinOrigin {
    #[default]
    Declared,
    Quartiles,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Segmentation {
    Bins {
        edges: Vec<f64>,
        labels: Vec<String>,
        origin: BinOrigin,
    },
    Categories(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSchema {
    pub name: String,
    pub kind: VariableKind,
    #[serde(default)]
    pub unit: String,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<VariableGroup>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<Segmentation>,
}

impl VariableSchema {
    pub fn continuous(name: &str, role: Role) -> Self {
        Self {
            name: name.to_string(),
            kind: VariableKind::Continuous,
            unit: String::new(),
            role,
            group: None,
            segmentation: None,
        }
    }

    pub fn categorical(name: &str, role: Role, categories: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind: VariableKind::Categorical,
            unit: String::new(),
            role,
            group: None,
            segmentation: Some(Segmentation::Categories(
                categories.iter().map(|c| c.to_string()).collect(),
            )),
        }
    }

    pub fn binary(name: &str, role: Role, categories: [&str; 2]) -> Self {
        Self {
            kind: VariableKind::Binary,
            ..Self::categorical(name, role, &categories)
        }
    }

    /// Declared bins; labels default to the interval text.
    pub fn with_bins(mut self, edges: &[f64], labels: Option<&[&str]>) -> Self {
        let labels = match labels {
            Some(l) => l.iter().map(|s| s.to_string()).collect(),
            None => interval_labels(edges),
        };
        self.segmentation = Some(Segmentation::Bins {
            edges: edges.to_vec(),
            labels,
            origin: BinOrigin::Declared,
        });
        self
    }

    pub fn with_unit(mut self, unit: &str) -> Self {
        self.unit = unit.to_string();
        self
    }

    pub fn with_group(mut self, group: VariableGroup) -> Self {
        self.group = Some(group);
        self
    }

    /// Category names for categorical and binary variables.
    pub fn categories(&self) -> Option<&[String]> {
        match &self.segmentation {
            Some(Segmentation::Categories(c)) => Some(c),
            _ => None,
        }
    }

    pub fn category_index(&self, value: &str) -> Option<u32> {
        self.categories()?
            .iter()
            .position(|c| c == value)
            .map(|i| i as u32)
    }

    fn validate(&mut self) -> Result<(), DatasetError> {
        let invalid = |reason: String| DatasetError::InvalidSchema {
            variable: self.name.clone(),
            reason,
        };
        if self.name.is_empty() {
            return Err(invalid("empty variable name".into()));
        }
        match self.kind {
            VariableKind::Continuous => {
                if let Some(seg) = &self.segmentation {
                    let Segmentation::Bins { edges, labels, .. } = seg else {
                        return Err(invalid("continuous variable needs bin edges".into()));
                    };
                    if edges.len() < 2 {
                        return Err(invalid("at least two bin edges are required".into()));
                    }
                    if edges.iter().any(|e| e.is_nan()) {
                        return Err(invalid("bin edge is NaN".into()));
                    }
                    if edges.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(invalid("bin edges must be strictly increasing".into()));
                    }
                    if labels.len() != edges.len() - 1 {
                        return Err(invalid(format!(
                            "{} labels for {} bins",
                            labels.len(),
                            edges.len() - 1
                        )));
                    }
                }
                if self.role == Role::Target {
                    return Err(invalid("target must be categorical or binary".into()));
                }
            }
            VariableKind::Categorical | VariableKind::Binary => {
                if self.segmentation.is_none() && self.kind == VariableKind::Binary {
                    self.segmentation =
                        Some(Segmentation::Categories(vec!["0".into(), "1".into()]));
                }
                // Numeric lists are accepted as category names.
                if let Some(Segmentation::Bins {
                    edges,
                    origin: BinOrigin::Declared,
                    ..
                }) = &self.segmentation
                {
                    if edges.iter().all(|e| e.is_finite()) {
                        let names = edges.iter().map(|e| e.to_string()).collect();
                        self.segmentation = Some(Segmentation::Categories(names));
                    }
                }
                let Some(Segmentation::Categories(cats)) = &self.segmentation else {
                    return Err(invalid("categorical variable needs a category list".into()));
                };
                if cats.is_empty() {
                    return Err(invalid("category list is empty".into()));
                }
                let mut seen = HashSet::new();
                if let Some(dup) = cats.iter().find(|c| !seen.insert(c.as_str())) {
                    return Err(invalid(format!("duplicate category {dup:?}")));
                }
                if self.kind == VariableKind::Binary && cats.len() != 2 {
                    return Err(invalid(
                        "binary variable needs exactly two categories".into(),
                    ));
                }
                if self.role == Role::Target && cats.len() < 2 {
                    return Err(invalid("target needs at least two classes".into()));
                }
            }
        }
        Ok(())
    }
}

/// Validated list of variables with exactly one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<VariableSchema>", into = "Vec<VariableSchema>")]
pub struct Schema {
    variables: Vec<VariableSchema>,
    target: usize,
}

impl TryFrom<Vec<VariableSchema>> for Schema {
    type Error = DatasetError;

    fn try_from(variables: Vec<VariableSchema>) -> Result<Self, Self::Error> {
        Schema::new(variables)
    }
}

impl From<Schema> for Vec<VariableSchema> {
    fn from(schema: Schema) -> Self {
        schema.variables
    }
}

impl Schema {
    pub fn new(mut variables: Vec<VariableSchema>) -> Result<Self, DatasetError> {
        let mut names = HashSet::new();
        for v in &mut variables {
            v.validate()?;
            if !names.insert(v.name.clone()) {
                return Err(DatasetError::InvalidSchema {
                    variable: v.name.clone(),
                    reason: "duplicate variable name".into(),
                });
            }
        }
        let targets: Vec<usize> = variables
            .iter()
            .enumerate()
            .filter(|(_, v)| v.role == Role::Target)
            .map(|(i, _)| i)
            .collect();
        if targets.len() != 1 {
            return Err(DatasetError::TargetCount(targets.len()));
        }
        Ok(Self {
            target: targets[0],
            variables,
        })
    }

    /// Parses a JSON sidecar file.
    pub fn from_json(bytes: &[u8]) -> Result<Self, DatasetError> {
        serde_json::from_slice(bytes).map_err(|e| DatasetError::SchemaFile(e.to_string()))
    }

    pub fn variables(&self) -> &[VariableSchema] {
        &self.variables
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    pub fn variable(&self, index: usize) -> &VariableSchema {
        &self.variables[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn target_index(&self) -> usize {
        self.target
    }

    pub fn target(&self) -> &VariableSchema {
        &self.variables[self.target]
    }

    pub fn classes(&self) -> &[String] {
        self.target().categories().unwrap_or(&[])
    }

    pub fn predictor_indices(&self) -> Vec<usize> {
        (0..self.variables.len())
            .filter(|&i| i != self.target)
            .collect()
    }

    pub(crate) fn set_segmentation(&mut self, index: usize, segmentation: Segmentation) {
        self.variables[index].segmentation = Some(segmentation);
    }

    /// Digest over what a trained model depends on: names, kinds, roles and
    /// category lists (bins are excluded; they do not change feature encoding).
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.variables {
            hasher.update(v.name.as_bytes());
            hasher.update([0u8]);
            hasher.update(format!("{:?}/{:?}", v.kind, v.role).as_bytes());
            if let Some(cats) = v.categories() {
                for c in cats {
                    hasher.update([1u8]);
                    hasher.update(c.as_bytes());
                }
            }
            hasher.update([0xffu8]);
        }
        hex::encode(hasher.finalize())
    }
}

pub(crate) fn interval_labels(edges: &[f64]) -> Vec<String> {
    edges
        .windows(2)
        .map(|w| format!("[{}, {})", fmt_edge(w[0]), fmt_edge(w[1])))
        .collect()
}

pub(crate) fn fmt_edge(e: f64) -> String {
    if e == f64::INFINITY {
        "inf".into()
    } else if e == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{e}")
    }
}

/// A bin edge: a finite number, or `"inf"` / `"-inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Edge(pub f64);

impl Serialize for Edge {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str(&fmt_edge(self.0))
        }
    }
}

impl<'de> Deserialize<'de> for Edge {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct EdgeVisitor;
        impl Visitor<'_> for EdgeVisitor {
            type Value = Edge;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or \"inf\" / \"-inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Edge, E> {
                Ok(Edge(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Edge, E> {
                Ok(Edge(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Edge, E> {
                Ok(Edge(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Edge, E> {
                match v {
                    "inf" | "+inf" | "Infinity" => Ok(Edge(f64::INFINITY)),
                    "-inf" | "-Infinity" => Ok(Edge(f64::NEG_INFINITY)),
                    other => Err(E::invalid_value(de::Unexpected::Str(other), &self)),
                }
            }
        }
        d.deserialize_any(EdgeVisitor)
    }
}

pub(crate) mod edge_vec {
    use super::Edge;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(edges: &[f64], s: S) -> Result<S::Ok, S::Error> {
        edges
            .iter()
            .map(|&e| Edge(e))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Edge>::deserialize(d)?
            .into_iter()
            .map(|e| e.0)
            .collect())
    }
}

pub(crate) mod edge {
    use super::Edge;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(e: &f64, s: S) -> Result<S::Ok, S::Error> {
        Edge(*e).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Edge::deserialize(d)?.0)
    }
}

#[derive(Serialize, Deserialize)]
struct BinsRepr {
    #[serde(with = "edge_vec")]
    edges: Vec<f64>,
    #[serde(default)]
    labels: Option<Vec<String>>,
    #[serde(default)]
    origin: BinOrigin,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawSegmentation {
    Edges(Vec<Edge>),
    Categories(Vec<String>),
    Bins(BinsRepr),
}

impl Serialize for Segmentation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Segmentation::Categories(c) => c.serialize(s),
            Segmentation::Bins {
                edges,
                labels,
                origin,
            } => BinsRepr {
                edges: edges.clone(),
                labels: Some(labels.clone()),
                origin: *origin,
            }
            .serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Segmentation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(match RawSegmentation::deserialize(d)? {
            RawSegmentation::Categories(c) => Segmentation::Categories(c),
            RawSegmentation::Edges(e) => {
                let edges: Vec<f64> = e.into_iter().map(|e| e.0).collect();
                Segmentation::Bins {
                    labels: interval_labels(&edges),
                    edges,
                    origin: BinOrigin::Declared,
                }
            }
            RawSegmentation::Bins(b) => Segmentation::Bins {
                labels: b.labels.unwrap_or_else(|| interval_labels(&b.edges)),
                edges: b.edges,
                origin: b.origin,
            },
        })
    }
}
