use serde::{Deserialize, Serialize};

use super::AugmentError;
use crate::dataset::{Cell, Row, Schema, VariableKind};

/// Target region of one variable. Numeric ranges are closed.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintRegion {
    Range { min: f64, max: f64 },
    Categories(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawConstraint", into = "RawConstraint")]
pub struct SegmentConstraint {
    pub variable: String,
    pub region: ConstraintRegion,
    pub count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConstraint {
    variable: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    categories: Option<Vec<String>>,
    count: usize,
}

impl TryFrom<RawConstraint> for SegmentConstraint {
    type Error = String;

    fn try_from(raw: RawConstraint) -> Result<Self, String> {
        let region = match (raw.min, raw.max, raw.categories) {
            (None, None, Some(categories)) => ConstraintRegion::Categories(categories),
            (min, max, None) if min.is_some() || max.is_some() => ConstraintRegion::Range {
                min: min.unwrap_or(f64::NEG_INFINITY),
                max: max.unwrap_or(f64::INFINITY),
            },
            _ => {
                return Err(format!(
                    "constraint on `{}` needs either min/max or categories",
                    raw.variable
                ))
            }
        };
        Ok(Self {
            variable: raw.variable,
            region,
            count: raw.count,
        })
    }
}

impl From<SegmentConstraint> for RawConstraint {
    fn from(c: SegmentConstraint) -> Self {
        let finite = |x: f64| x.is_finite().then_some(x);
        let (min, max, categories) = match c.region {
            ConstraintRegion::Range { min, max } => (finite(min), finite(max), None),
            ConstraintRegion::Categories(cats) => (None, None, Some(cats)),
        };
        RawConstraint {
            variable: c.variable,
            min,
            max,
            categories,
            count: c.count,
        }
    }
}

impl SegmentConstraint {
    pub fn range(variable: &str, min: f64, max: f64, count: usize) -> Self {
        Self {
            variable: variable.to_string(),
            region: ConstraintRegion::Range { min, max },
            count,
        }
    }

    pub fn categories(variable: &str, categories: &[&str], count: usize) -> Self {
        Self {
            variable: variable.to_string(),
            region: ConstraintRegion::Categories(
                categories.iter().map(|s| s.to_string()).collect(),
            ),
            count,
        }
    }

    /// Validates against the schema and resolves to a column predicate.
    pub fn compile(&self, schema: &Schema) -> Result<Predicate, AugmentError> {
        let out_of_domain = |reason: String| AugmentError::ConstraintOutOfDomain {
            variable: self.variable.clone(),
            reason,
        };
        let column = schema
            .index_of(&self.variable)
            .ok_or_else(|| AugmentError::UnknownVariable(self.variable.clone()))?;
        if self.count == 0 {
            return Err(out_of_domain("count must be at least 1".into()));
        }
        let var = schema.variable(column);
        let test = match (&self.region, var.kind) {
            (ConstraintRegion::Range { min, max }, VariableKind::Continuous) => {
                if min.is_nan() || max.is_nan() || min > max {
                    return Err(out_of_domain(format!("empty range [{min}, {max}]")));
                }
                if let Some((lo, hi)) = var.domain_bounds() {
                    if *max < lo || *min >= hi {
                        return Err(out_of_domain(format!(
                            "range [{min}, {max}] lies outside [{lo}, {hi})"
                        )));
                    }
                }
                Test::Range(*min, *max)
            }
            (ConstraintRegion::Categories(cats), kind) if kind.is_categorical() => {
                if cats.is_empty() {
                    return Err(out_of_domain("no categories given".into()));
                }
                let mut allowed = vec![false; var.categories().map_or(0, <[String]>::len)];
                for c in cats {
                    let i = var
                        .category_index(c)
                        .ok_or_else(|| out_of_domain(format!("unknown category `{c}`")))?;
                    allowed[i as usize] = true;
                }
                Test::Levels(allowed)
            }
            (ConstraintRegion::Range { .. }, _) => {
                return Err(out_of_domain(
                    "categorical variable needs categories".into(),
                ))
            }
            (ConstraintRegion::Categories(_), _) => {
                return Err(out_of_domain("continuous variable needs min/max".into()))
            }
        };
        Ok(Predicate { column, test })
    }
}

/// A compiled single-column region test.
#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub column: usize,
    test: Test,
}

#[derive(Debug, Clone, PartialEq)]
enum Test {
    Range(f64, f64),
    Levels(Vec<bool>),
}

impl Predicate {
    pub fn matches(&self, cells: &[Cell]) -> bool {
        match (&self.test, cells[self.column]) {
            (Test::Range(lo, hi), Cell::Number(x)) => *lo <= x && x <= *hi,
            (Test::Levels(allowed), Cell::Category(i)) => {
                allowed.get(i as usize).copied().unwrap_or(false)
            }
            _ => false,
        }
    }
}

pub fn matches_all(predicates: &[Predicate], row: &Row) -> bool {
    predicates.iter().all(|p| p.matches(&row.cells))
}

fn default_joint() -> bool {
    true
}

/// Constraints for one generation request. In joint mode every generated row
/// satisfies every region and the batch holds `max(count)` rows; otherwise
/// each constraint yields its own `count` rows, concatenated in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawSet")]
pub struct ConstraintSet {
    pub constraints: Vec<SegmentConstraint>,
    #[serde(default = "default_joint")]
    pub joint: bool,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawSet {
    List(Vec<SegmentConstraint>),
    Full {
        constraints: Vec<SegmentConstraint>,
        #[serde(default = "default_joint")]
        joint: bool,
    },
}

impl From<RawSet> for ConstraintSet {
    fn from(raw: RawSet) -> Self {
        match raw {
            RawSet::List(constraints) => Self {
                constraints,
                joint: true,
            },
            RawSet::Full { constraints, joint } => Self { constraints, joint },
        }
    }
}

impl ConstraintSet {
    pub fn joint(constraints: Vec<SegmentConstraint>) -> Self {
        Self {
            constraints,
            joint: true,
        }
    }

    pub fn independent(constraints: Vec<SegmentConstraint>) -> Self {
        Self {
            constraints,
            joint: false,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    /// Rows a generation request yields.
    pub fn batch_size(&self) -> usize {
        let counts = self.constraints.iter().map(|c| c.count);
        if self.joint {
            counts.max().unwrap_or(0)
        } else {
            counts.sum()
        }
    }

    /// Validates every constraint and the set-level rules.
    pub fn compile(&self, schema: &Schema, cap: usize) -> Result<Vec<Predicate>, AugmentError> {
        let predicates = self
            .constraints
            .iter()
            .map(|c| c.compile(schema))
            .collect::<Result<Vec<_>, _>>()?;
        if self.joint {
            for (i, p) in predicates.iter().enumerate() {
                if predicates[..i].iter().any(|q| q.column == p.column) {
                    return Err(AugmentError::DuplicateVariable(
                        self.constraints[i].variable.clone(),
                    ));
                }
            }
        }
        let requested = self.batch_size();
        if requested > cap {
            return Err(AugmentError::CapExceeded { requested, cap });
        }
        Ok(predicates)
    }
}
