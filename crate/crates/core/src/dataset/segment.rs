//! Partitioning variable domains into sub-groups.

use serde::{Deserialize, Serialize};

use super::schema::{edge, Segmentation, VariableSchema};
use super::{Cell, DatasetError};

/// Region of a variable's domain covered by one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Region {
    /// Half-open interval `[lo, hi)`.
    Interval {
        #[serde(with = "edge")]
        lo: f64,
        #[serde(with = "edge")]
        hi: f64,
    },
    Categories {
        categories: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub variable: String,
    pub label: String,
    pub region: Region,
}

impl VariableSchema {
    /// Segments in declaration order. Empty when a continuous variable has not
    /// been binned yet.
    pub fn segments(&self) -> Vec<Segment> {
        match &self.segmentation {
            None => Vec::new(),
            Some(Segmentation::Categories(cats)) => cats
                .iter()
                .map(|c| Segment {
                    variable: self.name.clone(),
                    label: c.clone(),
                    region: Region::Categories {
                        categories: vec![c.clone()],
                    },
                })
                .collect(),
            Some(Segmentation::Bins { edges, labels, .. }) => edges
                .windows(2)
                .zip(labels)
                .map(|(w, label)| Segment {
                    variable: self.name.clone(),
                    label: label.clone(),
                    region: Region::Interval { lo: w[0], hi: w[1] },
                })
                .collect(),
        }
    }

    /// Outer bin edges of a binned continuous variable.
    pub fn domain_bounds(&self) -> Option<(f64, f64)> {
        match &self.segmentation {
            Some(Segmentation::Bins { edges, .. }) => Some((edges[0], edges[edges.len() - 1])),
            _ => None,
        }
    }

    pub fn segment_count(&self) -> usize {
        match &self.segmentation {
            None => 0,
            Some(Segmentation::Categories(c)) => c.len(),
            Some(Segmentation::Bins { edges, .. }) => edges.len() - 1,
        }
    }

    /// Index of the segment holding `value`.
    pub fn segment_index(&self, value: Cell) -> Result<usize, DatasetError> {
        let out_of_domain = || DatasetError::OutOfDomain {
            variable: self.name.clone(),
            value: value.to_string(),
        };
        match (&self.segmentation, value) {
            (None, _) => Err(DatasetError::Unsegmented(self.name.clone())),
            (Some(Segmentation::Categories(cats)), Cell::Category(i)) => {
                if (i as usize) < cats.len() {
                    Ok(i as usize)
                } else {
                    Err(out_of_domain())
                }
            }
            (Some(Segmentation::Bins { edges, .. }), Cell::Number(x)) => {
                if x.is_nan() || x < edges[0] || x >= edges[edges.len() - 1] {
                    return Err(out_of_domain());
                }
                Ok(edges.partition_point(|e| *e <= x) - 1)
            }
            _ => Err(out_of_domain()),
        }
    }

    /// The segment holding `value`.
    pub fn segment_of(&self, value: Cell) -> Result<Segment, DatasetError> {
        let i = self.segment_index(value)?;
        Ok(self.segments().swap_remove(i))
    }

    /// Whether `value` is a legal cell for this variable.
    pub fn in_domain(&self, value: Cell) -> bool {
        match (self.kind.is_categorical(), value) {
            (true, Cell::Category(i)) => self.categories().is_some_and(|c| (i as usize) < c.len()),
            (false, Cell::Number(x)) => {
                x.is_finite()
                    && match &self.segmentation {
                        Some(Segmentation::Bins { edges, .. }) => {
                            x >= edges[0] && x < edges[edges.len() - 1]
                        }
                        _ => true,
                    }
            }
            _ => false,
        }
    }
}
