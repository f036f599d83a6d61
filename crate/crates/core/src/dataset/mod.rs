//! Typed tabular data with per-row provenance and a leakage-guarded
//! train/held-out split.
//!
//! Datasets are values: every derivation (`split`, `with_appended`, ...)
//! returns a new dataset and leaves the receiver untouched.

mod schema;
mod segment;

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use schema::{
    BinOrigin, Role, Schema, Segmentation, VariableGroup, VariableKind, VariableSchema,
};
pub use segment::{Region, Segment};

pub(crate) use schema::interval_labels;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("cannot parse {raw:?} in row {row}, column {column:?}")]
    CellParseError {
        row: usize,
        column: String,
        raw: String,
    },
    #[error("malformed CSV at record {record}: {message}")]
    Malformed { record: usize, message: String },
    #[error("dataset has no rows")]
    EmptyDataset,
    #[error("dataset is already split")]
    AlreadySplit,
    #[error("too few rows to split: {0}")]
    TooFewRows(String),
    #[error("held-out fraction {0} is outside (0, 1)")]
    InvalidFraction(f64),
    #[error("value {value} is outside the domain of {variable:?}")]
    OutOfDomain { variable: String, value: String },
    #[error("variable {0:?} has no segmentation")]
    Unsegmented(String),
    #[error("invalid schema for {variable:?}: {reason}")]
    InvalidSchema { variable: String, reason: String },
    #[error("schema needs exactly one target variable, found {0}")]
    TargetCount(usize),
    #[error("schema file: {0}")]
    SchemaFile(String),
    #[error("unknown variable {0:?}")]
    UnknownVariable(String),
    #[error("duplicate row id {0}")]
    DuplicateRowId(RowId),
    #[error("held-out rows must be original, row {0} is not")]
    HeldoutProvenance(RowId),
}

/// A typed cell. Categories are indices into the variable's category list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Number(f64),
    Category(u32),
}

impl Cell {
    pub fn as_f64(self) -> f64 {
        match self {
            Cell::Number(x) => x,
            Cell::Category(i) => i as f64,
        }
    }

    /// Bit-level key; `-0.0` and `0.0` are the same value.
    pub(crate) fn key(self) -> (u8, u64) {
        match self {
            Cell::Number(x) => (0, if x == 0.0 { 0 } else { x.to_bits() }),
            Cell::Category(i) => (1, i as u64),
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Number(x) => write!(f, "{x}"),
            Cell::Category(i) => write!(f, "#{i}"),
        }
    }
}

// Numbers serialize as JSON floats (always with a fraction or exponent),
// categories as unsigned integers.
impl Serialize for Cell {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match *self {
            Cell::Number(x) => s.serialize_f64(x),
            Cell::Category(i) => s.serialize_u32(i),
        }
    }
}

impl<'de> Deserialize<'de> for Cell {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct CellVisitor;
        impl Visitor<'_> for CellVisitor {
            type Value = Cell;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a float or a category index")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Cell, E> {
                Ok(Cell::Number(v))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Cell, E> {
                u32::try_from(v)
                    .map(Cell::Category)
                    .map_err(|_| E::custom("category index overflow"))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Cell, E> {
                Err(E::invalid_value(de::Unexpected::Signed(v), &self))
            }
        }
        d.deserialize_any(CellVisitor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RowId(pub u64);

impl fmt::Display for RowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Generated,
    Edited,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Heldout,
    Unsplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub id: RowId,
    pub provenance: Provenance,
    pub split: SplitTag,
    pub cells: Vec<Cell>,
}

impl Row {
    /// True for rows that feed training: train rows, or every row when unsplit.
    pub fn is_active(&self) -> bool {
        self.split != SplitTag::Heldout
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DatasetRepr")]
pub struct TabularDataset {
    schema: Schema,
    rows: Vec<Row>,
}

#[derive(Deserialize)]
struct DatasetRepr {
    schema: Schema,
    rows: Vec<Row>,
}

impl TryFrom<DatasetRepr> for TabularDataset {
    type Error = DatasetError;

    fn try_from(r: DatasetRepr) -> Result<Self, Self::Error> {
        TabularDataset::from_rows(r.schema, r.rows)
    }
}

impl TabularDataset {
    /// Builds a dataset, checking row shape, cell domains, id uniqueness and
    /// that held-out rows are original.
    pub fn from_rows(schema: Schema, rows: Vec<Row>) -> Result<Self, DatasetError> {
        let mut ids = HashSet::with_capacity(rows.len());
        for row in &rows {
            if !ids.insert(row.id) {
                return Err(DatasetError::DuplicateRowId(row.id));
            }
            check_cells(&schema, &row.cells)?;
            if row.split == SplitTag::Heldout && row.provenance != Provenance::Original {
                return Err(DatasetError::HeldoutProvenance(row.id));
            }
        }
        Ok(Self { schema, rows })
    }

    /// Parses RFC 4180 CSV with a header row. Columns may appear in any order
    /// but must match the schema names exactly.
    pub fn ingest(csv_bytes: &[u8], schema: Schema) -> Result<Self, DatasetError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(csv_bytes);
        let headers = reader
            .headers()
            .map_err(|e| DatasetError::Malformed {
                record: 0,
                message: e.to_string(),
            })?
            .clone();
        let mut column_of = vec![usize::MAX; schema.len()];
        for (col, name) in headers.iter().enumerate() {
            let Some(var) = schema.index_of(name) else {
                return Err(DatasetError::SchemaMismatch(format!(
                    "unknown column {name:?}"
                )));
            };
            if column_of[var] != usize::MAX {
                return Err(DatasetError::SchemaMismatch(format!(
                    "duplicate column {name:?}"
                )));
            }
            column_of[var] = col;
        }
        if let Some(missing) = column_of.iter().position(|&c| c == usize::MAX) {
            return Err(DatasetError::SchemaMismatch(format!(
                "missing column {:?}",
                schema.variable(missing).name
            )));
        }

        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| DatasetError::Malformed {
                record: i + 1,
                message: e.to_string(),
            })?;
            let cells = schema
                .variables()
                .iter()
                .zip(&column_of)
                .map(|(var, &col)| parse_cell(var, &record[col], i + 1))
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(Row {
                id: RowId(i as u64),
                provenance: Provenance::Original,
                split: SplitTag::Unsplit,
                cells,
            });
        }
        if rows.is_empty() {
            return Err(DatasetError::EmptyDataset);
        }
        let mut ds = Self { schema, rows };
        ds.bin_unsegmented(false);
        Ok(ds)
    }

    /// Re-serializes to CSV in schema column order.
    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.schema.variables().iter().map(|v| v.name.as_str()))
            .expect("in-memory write");
        for row in &self.rows {
            w.write_record(
                row.cells
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| self.render_cell(i, c)),
            )
            .expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    pub fn render_cell(&self, variable: usize, cell: Cell) -> String {
        render_cell(&self.schema, variable, cell)
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, id: RowId) -> Option<&Row> {
        self.rows.iter().find(|r| r.id == id)
    }

    pub fn train_rows(&self) -> impl Iterator<Item = &Row> {
        self.rows.iter().filter(|r| r.split == SplitTag::Train)
    }

    pub fn heldout_rows(&self) -> impl Iterator<Item = &Row> {
        self.rows.iter().filter(|r| r.split == SplitTag::Heldout)
    }

    /// Rows that describe the training distribution: train rows once split,
    /// every row before.
    pub fn active_rows(&self) -> impl Iterator<Item = &Row> {
        self.rows.iter().filter(|r| r.is_active())
    }

    pub fn is_split(&self) -> bool {
        self.rows.iter().any(|r| r.split != SplitTag::Unsplit)
    }

    pub fn heldout_ids(&self) -> Vec<RowId> {
        self.heldout_rows().map(|r| r.id).collect()
    }

    pub fn next_row_id(&self) -> RowId {
        RowId(self.rows.iter().map(|r| r.id.0 + 1).max().unwrap_or(0))
    }

    /// Digest of the exact training rows (ids, provenance and cells, in order).
    pub fn train_snapshot_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for row in self.active_rows() {
            hasher.update(row.id.0.to_le_bytes());
            hasher.update([row.provenance as u8]);
            for c in &row.cells {
                let (tag, bits) = c.key();
                hasher.update([tag]);
                hasher.update(bits.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Stratified split by target class. Every class present must have at
    /// least two rows, and at least two classes must be present.
    pub fn split(&self, heldout_fraction: f64, seed: u64) -> Result<Self, DatasetError> {
        if !(heldout_fraction > 0.0 && heldout_fraction < 1.0) {
            return Err(DatasetError::InvalidFraction(heldout_fraction));
        }
        if self.is_split() {
            return Err(DatasetError::AlreadySplit);
        }
        let target = self.schema.target_index();
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, row) in self.rows.iter().enumerate() {
            if let Cell::Category(c) = row.cells[target] {
                by_class.entry(c).or_default().push(i);
            }
        }
        if by_class.len() < 2 {
            return Err(DatasetError::TooFewRows(format!(
                "{} target class(es) present, need 2",
                by_class.len()
            )));
        }
        if let Some((c, idx)) = by_class.iter().find(|(_, idx)| idx.len() < 2) {
            return Err(DatasetError::TooFewRows(format!(
                "class {:?} has {} row(s)",
                self.schema.classes()[*c as usize],
                idx.len()
            )));
        }

        // Largest-remainder allocation so the total matches round(n * f).
        let n = self.rows.len();
        let total = (n as f64 * heldout_fraction).round() as usize;
        let exact: Vec<f64> = by_class
            .values()
            .map(|idx| idx.len() as f64 * heldout_fraction)
            .collect();
        let mut alloc: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
        let mut order: Vec<usize> = (0..exact.len()).collect();
        order.sort_by(|&a, &b| {
            let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        let mut remaining = total.saturating_sub(alloc.iter().sum());
        for &k in order.iter().cycle().take(order.len() * 2) {
            if remaining == 0 {
                break;
            }
            alloc[k] += 1;
            remaining -= 1;
        }
        for (a, idx) in alloc.iter_mut().zip(by_class.values()) {
            *a = (*a).clamp(1, idx.len() - 1);
        }
        let heldout_total: usize = alloc.iter().sum();
        if heldout_total == 0 || heldout_total >= n {
            return Err(DatasetError::TooFewRows(format!("{n} rows")));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = self.rows.clone();
        for row in &mut rows {
            row.split = SplitTag::Train;
        }
        for (idx, &h) in by_class.values().zip(&alloc) {
            let mut idx = idx.clone();
            idx.shuffle(&mut rng);
            for &i in &idx[..h] {
                rows[i].split = SplitTag::Heldout;
            }
        }
        let mut ds = Self {
            schema: self.schema.clone(),
            rows,
        };
        ds.bin_unsegmented(true);
        Ok(ds)
    }

    /// Computes quartile bins for continuous variables that have none. With
    /// `refreeze`, bins that were derived from quartiles are recomputed too
    /// (used once, at split time, on the original training rows).
    fn bin_unsegmented(&mut self, refreeze: bool) {
        for var in 0..self.schema.len() {
            let v = self.schema.variable(var);
            if v.kind != VariableKind::Continuous {
                continue;
            }
            let needs = match &v.segmentation {
                None => true,
                Some(Segmentation::Bins { origin, .. }) => {
                    refreeze && *origin == BinOrigin::Quartiles
                }
                _ => false,
            };
            if !needs {
                continue;
            }
            let mut values: Vec<f64> = self
                .rows
                .iter()
                .filter(|r| r.is_active() && r.provenance == Provenance::Original)
                .map(|r| r.cells[var].as_f64())
                .collect();
            values.sort_by(f64::total_cmp);
            let mut edges = vec![f64::NEG_INFINITY];
            for p in [0.25, 0.5, 0.75] {
                let q = quantile_sorted(&values, p);
                if q > *edges.last().unwrap() {
                    edges.push(q);
                }
            }
            edges.push(f64::INFINITY);
            self.schema.set_segmentation(
                var,
                Segmentation::Bins {
                    labels: interval_labels(&edges),
                    edges,
                    origin: BinOrigin::Quartiles,
                },
            );
        }
    }

    /// Appends rows, returning a new dataset.
    pub fn with_appended(&self, rows: impl IntoIterator<Item = Row>) -> Result<Self, DatasetError> {
        let mut all = self.rows.clone();
        all.extend(rows);
        Self::from_rows(self.schema.clone(), all)
    }

    /// Per-segment counts of `variable` over the given rows.
    pub fn segment_counts<'a>(
        &self,
        variable: usize,
        rows: impl Iterator<Item = &'a Row>,
    ) -> Result<Vec<u64>, DatasetError> {
        let var = self.schema.variable(variable);
        let mut counts = vec![0u64; var.segment_count()];
        if counts.is_empty() {
            return Err(DatasetError::Unsegmented(var.name.clone()));
        }
        for row in rows {
            counts[var.segment_index(row.cells[variable])?] += 1;
        }
        Ok(counts)
    }

    /// Parses one textual value for `variable`.
    pub fn parse_value(&self, variable: usize, raw: &str) -> Result<Cell, DatasetError> {
        parse_cell(self.schema.variable(variable), raw, 0)
    }
}

pub(crate) fn render_cell(schema: &Schema, variable: usize, cell: Cell) -> String {
    match cell {
        Cell::Number(x) => format!("{x}"),
        Cell::Category(i) => schema
            .variable(variable)
            .categories()
            .and_then(|c| c.get(i as usize))
            .cloned()
            .unwrap_or_else(|| format!("#{i}")),
    }
}

fn parse_cell(var: &VariableSchema, raw: &str, row: usize) -> Result<Cell, DatasetError> {
    let err = || DatasetError::CellParseError {
        row,
        column: var.name.clone(),
        raw: raw.to_string(),
    };
    if var.kind.is_categorical() {
        var.category_index(raw).map(Cell::Category).ok_or_else(err)
    } else {
        let x: f64 = raw.parse().map_err(|_| err())?;
        if !x.is_finite() {
            return Err(err());
        }
        Ok(Cell::Number(x))
    }
}

pub(crate) fn check_cells(schema: &Schema, cells: &[Cell]) -> Result<(), DatasetError> {
    if cells.len() != schema.len() {
        return Err(DatasetError::SchemaMismatch(format!(
            "row has {} cells, schema has {} variables",
            cells.len(),
            schema.len()
        )));
    }
    for (var, &cell) in schema.variables().iter().zip(cells) {
        let ok = match (var.kind.is_categorical(), cell) {
            (true, Cell::Category(i)) => var.categories().is_some_and(|c| (i as usize) < c.len()),
            (false, Cell::Number(x)) => x.is_finite(),
            _ => false,
        };
        if !ok {
            return Err(DatasetError::OutOfDomain {
                variable: var.name.clone(),
                value: cell.to_string(),
            });
        }
    }
    Ok(())
}

/// Linear-interpolation quantile of sorted data (the "type 7" definition).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
