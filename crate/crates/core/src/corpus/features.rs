use std::collections::HashSet;
use std::fs;
use std::ops::Range;
use std::path::Path;

use indexmap::IndexSet;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::DelimiterConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Dense,
    Categorical,
    MultiCategorical,
    PretrainedVector,
}

impl FeatureKind {
    pub fn is_categorical(self) -> bool {
        matches!(self, FeatureKind::Categorical | FeatureKind::MultiCategorical)
    }
}

/// One field of a feature schema. `dim` is the encoded width; categorical
/// fields reserve a trailing slot for unknown or missing values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureField {
    pub name: String,
    pub kind: FeatureKind,
    pub dim: usize,
    pub vocab: IndexSet<String>,
}

impl FeatureField {
    pub fn numeric(name: impl Into<String>, kind: FeatureKind, dim: usize) -> Result<Self> {
        let name = name.into();
        if kind.is_categorical() {
            return Err(Error::Schema(format!("field `{name}`: categorical fields need a vocab")));
        }
        if dim == 0 {
            return Err(Error::Schema(format!("field `{name}`: dim must be positive")));
        }
        Ok(Self {
            name,
            kind,
            dim,
            vocab: IndexSet::new(),
        })
    }

    pub fn categorical<S: Into<String>>(
        name: impl Into<String>,
        kind: FeatureKind,
        vocab: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        let name = name.into();
        if !kind.is_categorical() {
            return Err(Error::Schema(format!("field `{name}`: numeric fields take no vocab")));
        }
        let vocab: IndexSet<String> = vocab.into_iter().map(Into::into).collect();
        if vocab.is_empty() {
            return Err(Error::Schema(format!("field `{name}`: empty vocab")));
        }
        Ok(Self {
            dim: vocab.len() + 1,
            name,
            kind,
            vocab,
        })
    }

    fn unknown_slot(&self) -> usize {
        self.vocab.len()
    }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct FieldSpec {
    name: String,
    kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vec<String>>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct SchemaSpec {
    fields: Vec<FieldSpec>,
}

/// Ordered list of fields.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FeatureSchema {
    pub fields: Vec<FeatureField>,
}

impl FeatureSchema {
    pub fn new(fields: Vec<FeatureField>) -> Result<Self> {
        let mut names = IndexSet::new();
        for f in &fields {
            if !names.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate field `{}`", f.name)));
            }
        }
        Ok(Self { fields })
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let spec: SchemaSpec = serde_json::from_str(json)?;
        let fields = spec
            .fields
            .into_iter()
            .map(|f| match (f.kind.is_categorical(), f.vocab) {
                (true, Some(vocab)) => {
                    let field = FeatureField::categorical(f.name, f.kind, vocab)?;
                    match f.dim {
                        Some(d) if d != field.dim => Err(Error::Schema(format!(
                            "field `{}`: dim {d} disagrees with vocab size + 1 = {}",
                            field.name, field.dim
                        ))),
                        _ => Ok(field),
                    }
                }
                (true, None) => Err(Error::Schema(format!("field `{}`: missing vocab", f.name))),
                (false, Some(_)) => {
                    Err(Error::Schema(format!("field `{}`: numeric field with vocab", f.name)))
                }
                (false, None) => {
                    let dim = f.dim.ok_or_else(|| {
                        Error::Schema(format!("field `{}`: missing dim", f.name))
                    })?;
                    FeatureField::numeric(f.name, f.kind, dim)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(fields)
    }

    pub fn to_json(&self) -> String {
        let spec = SchemaSpec {
            fields: self
                .fields
                .iter()
                .map(|f| FieldSpec {
                    name: f.name.clone(),
                    kind: f.kind,
                    dim: (!f.kind.is_categorical()).then_some(f.dim),
                    vocab: f
                        .kind
                        .is_categorical()
                        .then(|| f.vocab.iter().cloned().collect()),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&spec).expect("schema serializes")
    }

    pub fn total_dim(&self) -> usize {
        self.fields.iter().map(|f| f.dim).sum()
    }

    /// Column range of each field inside a concatenated row.
    pub fn field_bounds(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.fields
            .iter()
            .map(|f| {
                let r = start..start + f.dim;
                start = r.end;
                r
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RawValue {
    Missing,
    Numbers(Vec<f64>),
    Category(String),
    Categories(Vec<String>),
}

/// How missing dense values are filled in at load time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputePolicy {
    #[default]
    Mean,
    Zero,
}

/// Raw per-entity feature rows, one value per schema field.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub schema: FeatureSchema,
    pub ids: IndexSet<String>,
    pub rows: Vec<Vec<RawValue>>,
    /// `(row, field)` of dense cells filled in by imputation.
    imputed: Vec<(usize, usize)>,
}

impl FeatureTable {
    pub fn new(
        schema: FeatureSchema,
        rows: Vec<(String, Vec<RawValue>)>,
        impute: ImputePolicy,
    ) -> Result<Self> {
        let mut ids = IndexSet::with_capacity(rows.len());
        let mut values = Vec::with_capacity(rows.len());
        for (id, row) in rows {
            if row.len() != schema.fields.len() {
                return Err(Error::Schema(format!(
                    "entity `{id}` has {} values for {} fields",
                    row.len(),
                    schema.fields.len()
                )));
            }
            for (field, value) in schema.fields.iter().zip(&row) {
                check_value(&id, field, value)?;
            }
            if !ids.insert(id.clone()) {
                return Err(Error::Schema(format!("entity `{id}` listed twice")));
            }
            values.push(row);
        }
        let mut table = Self {
            schema,
            ids,
            rows: values,
            imputed: Vec::new(),
        };
        for (r, row) in table.rows.iter().enumerate() {
            for (f, field) in table.schema.fields.iter().enumerate() {
                if !field.kind.is_categorical() && row[f] == RawValue::Missing {
                    table.imputed.push((r, f));
                }
            }
        }
        table.fill(impute, |_| true);
        Ok(table)
    }

    /// Loads a JSON schema sidecar plus a delimited row file whose header is
    /// `id,<field>,...`. List cells use `format.list_delimiter`; empty cells are missing.
    pub fn load(schema_path: &Path, rows_path: &Path, format: &DelimiterConfig, impute: ImputePolicy) -> Result<Self> {
        let schema = FeatureSchema::from_json(&fs::read_to_string(schema_path)?)?;
        let raw = fs::read_to_string(rows_path)?;
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(format.delimiter)
            .trim(csv::Trim::All)
            .from_reader(raw.as_bytes());
        let parse_err = |line: usize, message: String| Error::Parse {
            path: rows_path.to_path_buf(),
            line,
            message,
        };
        let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        let columns = schema
            .fields
            .iter()
            .map(|f| {
                headers.iter().position(|h| h == f.name).ok_or_else(|| {
                    Error::Schema(format!("{}: no column for field `{}`", rows_path.display(), f.name))
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                parse_err(e.position().map_or(0, |p| p.line() as usize), e.to_string())
            })?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            let id = record
                .get(0)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| parse_err(line, "missing id".into()))?
                .to_owned();
            let mut row = Vec::with_capacity(columns.len());
            for (field, &col) in schema.fields.iter().zip(&columns) {
                let cell = record.get(col).unwrap_or("");
                row.push(parse_cell(field, cell, format.list_delimiter).map_err(|m| parse_err(line, m))?);
            }
            rows.push((id, row));
        }
        Self::new(schema, rows, impute)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn total_dim(&self) -> usize {
        self.schema.total_dim()
    }

    /// Recomputes imputed dense cells from the observed values of the entities
    /// accepted by `fit_on`, e.g. only those seen in training.
    pub fn refit_imputation(&mut self, policy: ImputePolicy, fit_on: impl Fn(&str) -> bool) {
        self.fill(policy, fit_on);
    }

    fn fill(&mut self, policy: ImputePolicy, fit_on: impl Fn(&str) -> bool) {
        let imputed: HashSet<(usize, usize)> = self.imputed.iter().copied().collect();
        for (f, field) in self.schema.fields.iter().enumerate() {
            if field.kind.is_categorical() {
                continue;
            }
            let mut fill = vec![0.0; field.dim];
            if policy == ImputePolicy::Mean {
                let mut count = 0usize;
                for (r, row) in self.rows.iter().enumerate() {
                    if imputed.contains(&(r, f)) || !fit_on(&self.ids[r]) {
                        continue;
                    }
                    if let RawValue::Numbers(v) = &row[f] {
                        fill.iter_mut().zip(v).for_each(|(a, x)| *a += x);
                        count += 1;
                    }
                }
                if count > 0 {
                    fill.iter_mut().for_each(|a| *a /= count as f64);
                }
            }
            for &(r, g) in &self.imputed {
                if g == f {
                    self.rows[r][f] = RawValue::Numbers(fill.clone());
                }
            }
        }
    }

    /// Encodes every row and applies per-field normalization.
    pub fn encode(&self) -> Result<EncodedFeatures> {
        let dim = self.total_dim();
        let mut data = Vec::with_capacity(dim * self.len());
        for entity in 0..self.len() {
            data.extend(concat_features(self, entity)?);
        }
        normalize_per_feature(EncodedFeatures {
            ids: self.ids.clone(),
            field_names: self.schema.fields.iter().map(|f| f.name.clone()).collect(),
            bounds: self.schema.field_bounds(),
            dim,
            data,
        })
    }
}

fn check_value(id: &str, field: &FeatureField, value: &RawValue) -> Result<()> {
    let ok = match (field.kind, value) {
        (_, RawValue::Missing) => true,
        (FeatureKind::Dense | FeatureKind::PretrainedVector, RawValue::Numbers(v)) => v.len() == field.dim,
        (FeatureKind::Categorical, RawValue::Category(_)) => true,
        (FeatureKind::MultiCategorical, RawValue::Categories(_)) => true,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Schema(format!(
            "entity `{id}`: value {value:?} does not fit field `{}` ({:?}, dim {})",
            field.name, field.kind, field.dim
        )))
    }
}

fn parse_cell(field: &FeatureField, cell: &str, list_delimiter: char) -> std::result::Result<RawValue, String> {
    if cell.is_empty() {
        return Ok(RawValue::Missing);
    }
    Ok(match field.kind {
        FeatureKind::Dense | FeatureKind::PretrainedVector => RawValue::Numbers(
            cell.split(list_delimiter)
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| format!("field `{}`: `{s}` is not a number", field.name))
                })
                .collect::<std::result::Result<_, _>>()?,
        ),
        FeatureKind::Categorical => RawValue::Category(cell.to_owned()),
        FeatureKind::MultiCategorical => RawValue::Categories(
            cell.split(list_delimiter)
                .map(|s| s.trim().to_owned())
                .filter(|s| !s.is_empty())
                .collect(),
        ),
    })
}

/// Encodes one entity's row: one-hot for categorical, scaled multi-hot for
/// multi-categorical, verbatim copy for dense and pretrained vectors.
/// Missing or out-of-vocabulary categories set the field's unknown slot.
pub fn concat_features(table: &FeatureTable, entity: usize) -> Result<Vec<f64>> {
    let row = table
        .rows
        .get(entity)
        .ok_or(Error::MissingFeatures(entity as u64))?;
    let mut out = Vec::with_capacity(table.total_dim());
    for (field, value) in table.schema.fields.iter().zip(row) {
        let start = out.len();
        out.resize(start + field.dim, 0.0);
        let slot = &mut out[start..];
        match value {
            RawValue::Numbers(v) => slot.copy_from_slice(v),
            RawValue::Category(c) => {
                let idx = field.vocab.get_index_of(c).unwrap_or(field.unknown_slot());
                slot[idx] = 1.0;
            }
            RawValue::Categories(cs) => {
                for c in cs {
                    let idx = field.vocab.get_index_of(c).unwrap_or(field.unknown_slot());
                    slot[idx] = 1.0;
                }
                let set = slot.iter().filter(|&&v| v != 0.0).count();
                if set == 0 {
                    slot[field.unknown_slot()] = 1.0;
                } else {
                    let scale = 1.0 / (set as f64).sqrt();
                    slot.iter_mut().for_each(|v| *v *= scale);
                }
            }
            RawValue::Missing => {
                // dense missing values were imputed at construction
                slot[field.unknown_slot()] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Encoded feature rows keyed by the feature file's entity ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFeatures {
    pub ids: IndexSet<String>,
    pub field_names: Vec<String>,
    pub bounds: Vec<Range<usize>>,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl EncodedFeatures {
    pub fn row(&self, entity: usize) -> &[f64] {
        &self.data[entity * self.dim..(entity + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Re-indexes rows by an interned id set (e.g. the users of an interaction log).
    /// Ids without a feature row are marked absent.
    pub fn align(&self, ids: &IndexSet<String>) -> FeatureMatrix {
        let mut data = vec![0.0; ids.len() * self.dim];
        let mut present = vec![false; ids.len()];
        for (idx, id) in ids.iter().enumerate() {
            if let Some(src) = self.ids.get_index_of(id) {
                data[idx * self.dim..(idx + 1) * self.dim].copy_from_slice(self.row(src));
                present[idx] = true;
            }
        }
        FeatureMatrix {
            dim: self.dim,
            bounds: self.bounds.clone(),
            data,
            present,
        }
    }
}

/// L2-normalizes each field's sub-vector of every row independently.
/// All-zero sub-vectors stay zero.
pub fn normalize_per_feature(mut table: EncodedFeatures) -> Result<EncodedFeatures> {
    let dim = table.dim;
    for (entity, row) in table.data.chunks_mut(dim.max(1)).enumerate() {
        for (f, bounds) in table.bounds.iter().enumerate() {
            let slot = &mut row[bounds.clone()];
            if !slot.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteFeature {
                    entity: table.ids[entity].clone(),
                    field: table.field_names[f].clone(),
                });
            }
            let norm = slot.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                slot.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
    Ok(table)
}

/// Encoded, normalized features indexed by dense entity index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub dim: usize,
    pub bounds: Vec<Range<usize>>,
    data: Vec<f64>,
    present: Vec<bool>,
}

impl FeatureMatrix {
    /// Builds a matrix from already-encoded rows; `None` marks an entity without features.
    pub fn from_rows(dim: usize, bounds: Vec<Range<usize>>, rows: Vec<Option<Vec<f64>>>) -> Self {
        let mut data = vec![0.0; rows.len() * dim];
        let mut present = vec![false; rows.len()];
        for (i, row) in rows.into_iter().enumerate() {
            if let Some(row) = row {
                assert_eq!(row.len(), dim, "feature row width");
                data[i * dim..(i + 1) * dim].copy_from_slice(&row);
                present[i] = true;
            }
        }
        Self {
            dim,
            bounds,
            data,
            present,
        }
    }

    pub fn get(&self, entity: usize) -> Option<&[f64]> {
        self.present
            .get(entity)
            .copied()
            .unwrap_or(false)
            .then(|| &self.data[entity * self.dim..(entity + 1) * self.dim])
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    /// Rows for `entities`, in that order.
    pub fn select(&self, entities: &[u32]) -> Self {
        let rows = entities.iter().map(|&e| self.get(e as usize).map(<[f64]>::to_vec)).collect();
        Self::from_rows(self.dim, self.bounds.clone(), rows)
    }

    /// Number of entities with a feature row.
    pub fn n_present(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }
}

/// Zeroes each field's whole sub-vector independently with probability `beta`.
/// Draws exactly one uniform per field, so the stream position is independent of `beta`.
pub fn mask_features(row: &[f64], field_bounds: &[Range<usize>], beta: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("mask probability {beta} outside [0, 1]")));
    }
    let mut out = row.to_vec();
    for bounds in field_bounds {
        if rng.random::<f64>() < beta {
            out[bounds.clone()].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}
