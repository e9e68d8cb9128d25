//! Interaction records and the versioned CSV format.
//!
//! ```text
//! #emerg-data v1
//! timestamp,label,<feature 1>,...,<feature N>
//! 17,1,3,0|2,0.25,...
//! ```
//!
//! The first line is the version tag, the second the header. Columns may
//! appear in any order but must be exactly `timestamp`, `label` and the schema
//! feature names. Single-valued cells hold one vocabulary index, multi-valued
//! cells `|`-separated indices, continuous cells a decimal number.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use super::schema::{FeatureKind, FeatureSchema};
use crate::error::{contract_err, Error, Result};

pub const DATA_VERSION_LINE: &str = "#emerg-data v1";

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureValue {
    Single(u32),
    Multi(Vec<u32>),
    Continuous(f64),
}

impl FeatureValue {
    fn render(&self) -> String {
        match self {
            FeatureValue::Single(v) => v.to_string(),
            FeatureValue::Multi(vs) => vs.iter().map(u32::to_string).collect::<Vec<_>>().join("|"),
            FeatureValue::Continuous(x) => format!("{x:?}"),
        }
    }

    pub fn as_single(&self) -> Option<u32> {
        match self {
            FeatureValue::Single(v) => Some(*v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawInteraction {
    /// One value per schema feature, in schema order.
    pub values: Vec<FeatureValue>,
    pub label: u8,
    pub timestamp: i64,
}

impl RawInteraction {
    pub fn item(&self) -> u32 {
        self.values[0].as_single().expect("item ID is single-valued")
    }

    pub fn user(&self, schema: &FeatureSchema) -> u32 {
        self.values[schema.user_id_index()]
            .as_single()
            .expect("user ID is single-valued")
    }
}

/// Checks a value against feature `m` of the schema.
pub fn check_value(schema: &FeatureSchema, m: usize, value: &FeatureValue) -> std::result::Result<(), String> {
    let decl = schema.feature(m);
    match (decl.kind, value) {
        (FeatureKind::Single, FeatureValue::Single(v)) => {
            if (*v as usize) < decl.vocab {
                Ok(())
            } else {
                Err(format!("index {v} outside vocabulary of size {}", decl.vocab))
            }
        }
        (FeatureKind::Multi, FeatureValue::Multi(vs)) => {
            if vs.is_empty() {
                return Err("multi-valued entry is empty".into());
            }
            match vs.iter().find(|v| **v as usize >= decl.vocab) {
                Some(v) => Err(format!("index {v} outside vocabulary of size {}", decl.vocab)),
                None => Ok(()),
            }
        }
        (FeatureKind::Continuous, FeatureValue::Continuous(x)) => {
            if x.is_finite() {
                Ok(())
            } else {
                Err("continuous value is not finite".into())
            }
        }
        (kind, v) => Err(format!("value {v:?} does not match kind {kind:?}")),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// When set, the label column holds a rating; ratings below the threshold
    /// become 0 and the rest 1.
    pub binarize_threshold: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct InteractionTable {
    schema: Arc<FeatureSchema>,
    rows: Vec<RawInteraction>,
    by_item: BTreeMap<u32, Vec<usize>>,
}

impl InteractionTable {
    pub fn new(schema: Arc<FeatureSchema>, rows: Vec<RawInteraction>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            if r.values.len() != schema.n_features() {
                return Err(contract_err!("record {i} has {} values", r.values.len()));
            }
            for (m, v) in r.values.iter().enumerate() {
                check_value(&schema, m, v).map_err(|msg| contract_err!("record {i}: {msg}"))?;
            }
            if r.label > 1 {
                return Err(contract_err!("record {i}: label {} is not binary", r.label));
            }
        }
        let mut by_item: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, r) in rows.iter().enumerate() {
            by_item.entry(r.item()).or_default().push(i);
        }
        Ok(Self {
            schema,
            rows,
            by_item,
        })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn schema_arc(&self) -> Arc<FeatureSchema> {
        self.schema.clone()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[RawInteraction] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &RawInteraction {
        &self.rows[i]
    }

    pub fn items(&self) -> impl Iterator<Item = u32> + '_ {
        self.by_item.keys().copied()
    }

    /// Record positions of `item`, in input order.
    pub fn records_of(&self, item: u32) -> &[usize] {
        self.by_item.get(&item).map_or(&[], Vec::as_slice)
    }

    pub fn item_counts(&self) -> BTreeMap<u32, usize> {
        self.by_item.iter().map(|(k, v)| (*k, v.len())).collect()
    }

    /// Item-feature values of `item`, taken from its first record.
    pub fn item_values(&self, item: u32) -> Option<Vec<FeatureValue>> {
        let first = *self.records_of(item).first()?;
        Some(self.rows[first].values[..self.schema.n_item()].to_vec())
    }

    pub fn load(path: &Path, schema: Arc<FeatureSchema>, opts: LoadOptions) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(file, schema, opts)
    }

    pub fn read(reader: impl Read, schema: Arc<FeatureSchema>, opts: LoadOptions) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut first = String::new();
        let n = reader
            .read_line(&mut first)
            .map_err(|e| Error::io("<data>", e))?;
        if n == 0 {
            return Self::new(schema, Vec::new());
        }
        if first.trim_end() != DATA_VERSION_LINE {
            return Err(Error::Ingest {
                row: 1,
                column: "<version>".into(),
                message: format!("expected `{DATA_VERSION_LINE}`"),
            });
        }
        let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = csv.headers()?.clone();
        let header_err = |message: String| Error::Ingest {
            row: 2,
            column: "<header>".into(),
            message,
        };
        let find = |name: &str| headers.iter().position(|h| h == name);
        let ts_col = find("timestamp").ok_or_else(|| header_err("missing `timestamp`".into()))?;
        let label_col = find("label").ok_or_else(|| header_err("missing `label`".into()))?;
        let feature_cols = schema
            .features()
            .iter()
            .map(|f| find(&f.name).ok_or_else(|| header_err(format!("missing feature `{}`", f.name))))
            .collect::<Result<Vec<_>>>()?;
        if headers.len() != schema.n_features() + 2 {
            return Err(header_err(format!(
                "expected {} columns, found {}",
                schema.n_features() + 2,
                headers.len()
            )));
        }

        let mut rows = Vec::new();
        for (i, rec) in csv.records().enumerate() {
            let line = i + 3;
            let rec = rec?;
            let err = |column: &str, message: String| Error::Ingest {
                row: line,
                column: column.to_string(),
                message,
            };
            if rec.len() != headers.len() {
                return Err(err("<row>", format!("expected {} fields, found {}", headers.len(), rec.len())));
            }
            let timestamp: i64 = rec[ts_col]
                .trim()
                .parse()
                .map_err(|_| err("timestamp", format!("unparsable timestamp `{}`", &rec[ts_col])))?;
            let raw_label = rec[label_col].trim();
            let label = match opts.binarize_threshold {
                Some(th) => {
                    let r: f64 = raw_label
                        .parse()
                        .map_err(|_| err("label", format!("unparsable rating `{raw_label}`")))?;
                    u8::from(r >= th)
                }
                None => match raw_label {
                    "0" => 0,
                    "1" => 1,
                    other => return Err(err("label", format!("label `{other}` is not 0 or 1"))),
                },
            };
            let mut values = Vec::with_capacity(schema.n_features());
            for (m, &col) in feature_cols.iter().enumerate() {
                let decl = schema.feature(m);
                let cell = rec[col].trim();
                let parse_idx = |s: &str| -> Result<u32> {
                    s.trim()
                        .parse::<u32>()
                        .map_err(|_| err(&decl.name, format!("unparsable index `{s}`")))
                };
                let value = match decl.kind {
                    FeatureKind::Single => FeatureValue::Single(parse_idx(cell)?),
                    FeatureKind::Multi => {
                        if cell.is_empty() {
                            return Err(err(&decl.name, "multi-valued entry is empty".into()));
                        }
                        FeatureValue::Multi(cell.split('|').map(parse_idx).collect::<Result<_>>()?)
                    }
                    FeatureKind::Continuous => FeatureValue::Continuous(
                        cell.parse()
                            .map_err(|_| err(&decl.name, format!("unparsable number `{cell}`")))?,
                    ),
                };
                check_value(&schema, m, &value).map_err(|msg| err(&decl.name, msg))?;
                values.push(value);
            }
            rows.push(RawInteraction {
                values,
                label,
                timestamp,
            });
        }
        Self::new(schema, rows)
    }

    pub fn write(&self, mut out: impl Write) -> Result<()> {
        let io = |e| Error::io("<data>", e);
        writeln!(out, "{DATA_VERSION_LINE}").map_err(io)?;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["timestamp".to_string(), "label".to_string()];
        header.extend(self.schema.names());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.timestamp.to_string(), r.label.to_string()];
            rec.extend(r.values.iter().map(FeatureValue::render));
            w.write_record(&rec)?;
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(std::io::BufWriter::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::schema::{FeatureDecl, Owner};

    fn schema() -> Arc<FeatureSchema> {
        Arc::new(
            FeatureSchema::new(
                vec![
                    FeatureDecl::new("item", Owner::Item, FeatureKind::Single, 5),
                    FeatureDecl::new("tags", Owner::Item, FeatureKind::Multi, 4),
                    FeatureDecl::new("user", Owner::User, FeatureKind::Single, 9),
                    FeatureDecl::new("age", Owner::User, FeatureKind::Continuous, 0),
                ],
                4,
            )
            .unwrap(),
        )
    }

    fn load(text: &str) -> Result<InteractionTable> {
        InteractionTable::read(text.as_bytes(), schema(), LoadOptions::default())
    }

    #[test]
    fn empty_file_is_empty_table() {
        assert!(load("").unwrap().is_empty());
    }

    #[test]
    fn three_rows_indexed() {
        let t = load(
            "#emerg-data v1\ntimestamp,label,item,tags,user,age\n5,1,2,0|3,1,0.5\n6,0,4,1,2,1e-3\n7,1,2,2,8,-4\n",
        )
        .unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.records_of(2), &[0, 2]);
        assert_eq!(t.records_of(4), &[1]);
        assert_eq!(t.row(0).values[1], FeatureValue::Multi(vec![0, 3]));
        assert_eq!(t.row(1).values[3], FeatureValue::Continuous(1e-3));
    }

    #[test]
    fn out_of_vocab_cites_row_and_column() {
        let err = load("#emerg-data v1\ntimestamp,label,item,tags,user,age\n1,0,1,1,1,0\n2,0,1,1,9,0\n")
            .unwrap_err();
        match err {
            Error::Ingest { row, column, .. } => {
                assert_eq!(row, 4);
                assert_eq!(column, "user");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn bad_timestamp_and_arity() {
        let e = load("#emerg-data v1\ntimestamp,label,item,tags,user,age\nx,0,1,1,1,0\n").unwrap_err();
        assert!(matches!(e, Error::Ingest { ref column, .. } if column == "timestamp"));
        let e = load("#emerg-data v1\ntimestamp,label,item,tags,user,age\n1,0,1,1\n").unwrap_err();
        assert!(matches!(e, Error::Ingest { .. } | Error::Csv(_)));
        let e = load("timestamp,label\n").unwrap_err();
        assert!(matches!(e, Error::Ingest { row: 1, .. }));
    }

    #[test]
    fn binarizes_ratings() {
        let t = InteractionTable::read(
            "#emerg-data v1\ntimestamp,label,item,tags,user,age\n1,3,1,1,1,0\n2,4,1,1,1,0\n".as_bytes(),
            schema(),
            LoadOptions {
                binarize_threshold: Some(4.0),
            },
        )
        .unwrap();
        assert_eq!(t.row(0).label, 0);
        assert_eq!(t.row(1).label, 1);
    }

    #[test]
    fn save_reload_is_bit_exact() {
        let t = load(
            "#emerg-data v1\nlabel,timestamp,user,age,item,tags\n1,5,1,0.1,2,0|3\n0,6,2,0.30000000000000004,4,1\n",
        )
        .unwrap();
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        let back = InteractionTable::read(buf.as_slice(), schema(), LoadOptions::default()).unwrap();
        assert_eq!(back.rows(), t.rows());
        let mut buf2 = Vec::new();
        back.write(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }
}
