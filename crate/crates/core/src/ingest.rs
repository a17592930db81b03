//! Purchase-order CSV loading, text cleaning and sampling.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::taxonomy::{parse_code, HierarchyLevel, UnspscCode};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("input file {0} not found")]
    FileNotFound(PathBuf),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("input file {0} is empty")]
    EmptyFile(PathBuf),
    #[error("column {column:?} is not in the header of {path}")]
    SchemaColumnMissing { column: String, path: PathBuf },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("cannot parse CSV {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

/// Which CSV columns hold the fields we need.
///
/// Without a header row, column values are zero-based indices written as strings.
/// An empty string for an optional column means the column is absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSchema {
    #[serde(deserialize_with = "optional_column")]
    pub id_column: Option<String>,
    pub name_column: String,
    #[serde(deserialize_with = "optional_column")]
    pub description_column: Option<String>,
    pub code_column: String,
    pub delimiter: char,
    pub quote: char,
    pub has_header: bool,
}

fn optional_column<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
    let value = Option::<String>::deserialize(d)?;
    Ok(value.filter(|v| !v.trim().is_empty()))
}

impl Default for DatasetSchema {
    /// Column names of the State of California purchase-order export.
    fn default() -> Self {
        Self {
            id_column: None,
            name_column: "Item Name".into(),
            description_column: Some("Item Description".into()),
            code_column: "Normalized UNSPSC".into(),
            delimiter: ',',
            quote: '"',
            has_header: true,
        }
    }
}

impl DatasetSchema {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.name_column.trim().is_empty() || self.code_column.trim().is_empty() {
            return Err(IngestError::InvalidSchema("item-name and gold-code columns must be mapped".into()));
        }
        let mut seen = HashSet::new();
        for column in self.mapped_columns() {
            if !seen.insert(column) {
                return Err(IngestError::InvalidSchema(format!("column {column:?} is mapped twice")));
            }
        }
        if !self.delimiter.is_ascii() || !self.quote.is_ascii() {
            return Err(IngestError::InvalidSchema("delimiter and quote must be ASCII".into()));
        }
        Ok(())
    }

    fn mapped_columns(&self) -> Vec<&str> {
        let mut cols = vec![self.name_column.as_str(), self.code_column.as_str()];
        cols.extend(self.id_column.as_deref());
        cols.extend(self.description_column.as_deref());
        cols
    }

    /// Reads a schema from a TOML file. Missing keys take the defaults.
    pub fn from_toml_file(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| IngestError::Io { path: path.to_path_buf(), source })?;
        let schema: DatasetSchema =
            toml::from_str(&text).map_err(|e| IngestError::InvalidSchema(format!("{}: {e}", path.display())))?;
        schema.validate()?;
        Ok(schema)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurchaseRecord {
    pub record_id: String,
    pub item_name: String,
    pub item_description: String,
    pub gold_code: UnspscCode,
    /// One-based data row, not counting the header.
    pub source_row: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RejectionReason {
    MissingName,
    InvalidGoldCode,
    MalformedRow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub source_row: usize,
    pub reason: RejectionReason,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionReport {
    pub total_rows: usize,
    pub kept: usize,
    pub rejections: Vec<Rejection>,
}

impl RejectionReport {
    pub fn counts(&self) -> BTreeMap<RejectionReason, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.rejections {
            *counts.entry(r.reason).or_insert(0) += 1;
        }
        counts
    }

    pub fn rejected(&self) -> usize {
        self.rejections.len()
    }
}

/// NFC-normalizes, turns control characters into spaces, collapses whitespace
/// runs and trims. Case and punctuation are kept.
pub fn clean_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for c in raw.nfc() {
        if c.is_whitespace() || c.is_control() {
            pending_space = true;
            continue;
        }
        if pending_space && !out.is_empty() {
            out.push(' ');
        }
        pending_space = false;
        out.push(c);
    }
    out
}

struct ColumnIndices {
    id: Option<usize>,
    name: usize,
    description: Option<usize>,
    code: usize,
}

fn resolve_columns(schema: &DatasetSchema, header: Option<&csv::ByteRecord>, path: &Path) -> Result<ColumnIndices, IngestError> {
    let find = |column: &str| -> Result<usize, IngestError> {
        let missing = || IngestError::SchemaColumnMissing { column: column.to_string(), path: path.to_path_buf() };
        match header {
            Some(header) => header
                .iter()
                .position(|h| String::from_utf8_lossy(h).trim().trim_start_matches('\u{feff}') == column.trim())
                .ok_or_else(missing),
            None => column.trim().parse::<usize>().map_err(|_| missing()),
        }
    };
    Ok(ColumnIndices {
        id: schema.id_column.as_deref().map(find).transpose()?,
        name: find(&schema.name_column)?,
        description: schema.description_column.as_deref().map(find).transpose()?,
        code: find(&schema.code_column)?,
    })
}

/// Loads and cleans every data row, splitting them into accepted records and
/// rejections. Row order is kept.
pub fn load_dataset(path: &Path, schema: &DatasetSchema) -> Result<(Vec<PurchaseRecord>, RejectionReport), IngestError> {
    schema.validate()?;
    let mut file = File::open(path).map_err(|source| match source.kind() {
        std::io::ErrorKind::NotFound => IngestError::FileNotFound(path.to_path_buf()),
        _ => IngestError::Io { path: path.to_path_buf(), source },
    })?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|source| IngestError::Io { path: path.to_path_buf(), source })?;
    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        return Err(IngestError::EmptyFile(path.to_path_buf()));
    }
    load_from_bytes(&bytes, path, schema)
}

fn load_from_bytes(bytes: &[u8], path: &Path, schema: &DatasetSchema) -> Result<(Vec<PurchaseRecord>, RejectionReport), IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .quote(schema.quote as u8)
        .has_headers(schema.has_header)
        .flexible(true)
        .from_reader(bytes);

    let header = if schema.has_header {
        Some(reader.byte_headers().map_err(|source| IngestError::Csv { path: path.to_path_buf(), source })?.clone())
    } else {
        None
    };
    let columns = resolve_columns(schema, header.as_ref(), path)?;

    let mut records = Vec::new();
    let mut report = RejectionReport::default();
    let mut seen_ids = HashSet::new();
    let mut lossy_rows = 0usize;
    let mut row = csv::ByteRecord::new();
    loop {
        let source_row = report.total_rows + 1;
        match reader.read_byte_record(&mut row) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                // The reader resynchronizes at the next record; a broken row is data, not a failure.
                if let csv::ErrorKind::Io(_) = e.kind() {
                    return Err(IngestError::Csv { path: path.to_path_buf(), source: e });
                }
                report.total_rows += 1;
                report.rejections.push(Rejection {
                    source_row,
                    reason: RejectionReason::MalformedRow,
                    detail: e.to_string(),
                });
                continue;
            }
        }
        report.total_rows += 1;

        let mut field = |index: usize| -> Option<String> {
            row.get(index).map(|raw| match std::str::from_utf8(raw) {
                Ok(s) => s.to_string(),
                Err(_) => {
                    lossy_rows += 1;
                    String::from_utf8_lossy(raw).into_owned()
                }
            })
        };
        let needed = [Some(columns.name), Some(columns.code), columns.id, columns.description];
        let width = row.len();
        if let Some(missing) = needed.iter().flatten().find(|&&i| i >= width) {
            report.rejections.push(Rejection {
                source_row,
                reason: RejectionReason::MalformedRow,
                detail: format!("row has {width} fields, column {missing} is absent"),
            });
            continue;
        }

        let name = clean_text(&field(columns.name).unwrap_or_default());
        let description = columns.description.and_then(&mut field).map(|d| clean_text(&d)).unwrap_or_default();
        let raw_code = field(columns.code).unwrap_or_default();
        let record_id = match columns.id {
            Some(i) => clean_text(&field(i).unwrap_or_default()),
            None => source_row.to_string(),
        };

        if name.is_empty() {
            report.rejections.push(Rejection {
                source_row,
                reason: RejectionReason::MissingName,
                detail: "item name is empty".into(),
            });
            continue;
        }
        let gold_code = match parse_code(&raw_code) {
            Ok(code) => code,
            Err(e) => {
                report.rejections.push(Rejection {
                    source_row,
                    reason: RejectionReason::InvalidGoldCode,
                    detail: e.to_string(),
                });
                continue;
            }
        };
        if record_id.is_empty() || !seen_ids.insert(record_id.clone()) {
            report.rejections.push(Rejection {
                source_row,
                reason: RejectionReason::MalformedRow,
                detail: format!("record id {record_id:?} is empty or duplicated"),
            });
            continue;
        }
        records.push(PurchaseRecord { record_id, item_name: name, item_description: description, gold_code, source_row });
    }
    if lossy_rows > 0 {
        log::warn!("{}: {lossy_rows} field(s) had invalid UTF-8, replaced with U+FFFD", path.display());
    }
    if report.total_rows == 0 {
        return Err(IngestError::EmptyFile(path.to_path_buf()));
    }
    report.kept = records.len();
    Ok((records, report))
}

/// Uniform sample without replacement of `min(n, len)` records, returned in
/// source-row order. The same `seed` always picks the same rows.
pub fn sample(records: &[PurchaseRecord], n: usize, seed: u64) -> Vec<PurchaseRecord> {
    if n >= records.len() {
        return records.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<&PurchaseRecord> = rand::seq::index::sample(&mut rng, records.len(), n)
        .into_iter()
        .map(|i| &records[i])
        .collect();
    picked.sort_by_key(|r| r.source_row);
    picked.into_iter().cloned().collect()
}

/// Number of distinct gold codes at each level after truncation.
pub fn census(records: &[PurchaseRecord]) -> BTreeMap<HierarchyLevel, usize> {
    HierarchyLevel::ALL
        .iter()
        .map(|&level| {
            let distinct: BTreeSet<UnspscCode> = records.iter().map(|r| r.gold_code.truncate(level)).collect();
            (level, distinct.len())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn csv_file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn schema() -> DatasetSchema {
        DatasetSchema {
            id_column: None,
            name_column: "name".into(),
            description_column: Some("desc".into()),
            code_column: "code".into(),
            ..DatasetSchema::default()
        }
    }

    fn record(row: usize, code: &str) -> PurchaseRecord {
        PurchaseRecord {
            record_id: row.to_string(),
            item_name: format!("item {row}"),
            item_description: String::new(),
            gold_code: parse_code(code).unwrap(),
            source_row: row,
        }
    }

    #[test]
    fn loads_well_formed_rows() {
        let f = csv_file("name,desc,code\nPrinter,\"Laser, mono\",43212110\nLaptop,,43211503\nTape,roll,31201512\n");
        let (records, report) = load_dataset(f.path(), &schema()).unwrap();
        assert_eq!(records.len(), 3);
        assert!(report.rejections.is_empty());
        assert_eq!(records[0].item_description, "Laser, mono");
        assert_eq!(records[1].item_description, "");
        assert_eq!(records[2].record_id, "3");
        assert_eq!(records[2].source_row, 3);
    }

    #[test]
    fn rejects_bad_rows_with_reasons() {
        let f = csv_file("name,desc,code\nA,x,1234567\n ,x,43212110\nB\nC,y,43212110\n");
        let (records, report) = load_dataset(f.path(), &schema()).unwrap();
        assert_eq!(records.len(), 1);
        let reasons: Vec<_> = report.rejections.iter().map(|r| (r.source_row, r.reason)).collect();
        assert_eq!(
            reasons,
            vec![
                (1, RejectionReason::InvalidGoldCode),
                (2, RejectionReason::MissingName),
                (3, RejectionReason::MalformedRow),
            ]
        );
        assert_eq!(report.kept + report.rejected(), report.total_rows);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let s = DatasetSchema { id_column: Some("id".into()), ..schema() };
        let f = csv_file("id,name,desc,code\n7,A,,43\n7,B,,43\n");
        let (records, report) = load_dataset(f.path(), &s).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(report.rejections[0].reason, RejectionReason::MalformedRow);
    }

    #[test]
    fn schema_errors() {
        let f = csv_file("name,desc\nA,b\n");
        assert!(matches!(load_dataset(f.path(), &schema()), Err(IngestError::SchemaColumnMissing { .. })));
        let empty = csv_file("");
        assert!(matches!(load_dataset(empty.path(), &schema()), Err(IngestError::EmptyFile(_))));
        let header_only = csv_file("name,desc,code\n");
        assert!(matches!(load_dataset(header_only.path(), &schema()), Err(IngestError::EmptyFile(_))));
        assert!(matches!(
            load_dataset(Path::new("/nonexistent/x.csv"), &schema()),
            Err(IngestError::FileNotFound(_))
        ));
        let dup = DatasetSchema { description_column: Some("name".into()), ..schema() };
        assert!(matches!(dup.validate(), Err(IngestError::InvalidSchema(_))));
    }

    #[test]
    fn headerless_uses_indices_and_custom_delimiter() {
        let s = DatasetSchema {
            name_column: "0".into(),
            description_column: None,
            code_column: "2".into(),
            delimiter: ';',
            has_header: false,
            ..DatasetSchema::default()
        };
        let f = csv_file("Tape;ignored;31201512\n");
        let (records, _) = load_dataset(f.path(), &s).unwrap();
        assert_eq!(records[0].item_name, "Tape");
        assert_eq!(records[0].gold_code.to_string(), "31201512");
    }

    #[test]
    fn invalid_utf8_is_replaced() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(b"name,desc,code\nCaf\xff,x,43212110\n").unwrap();
        let (records, _) = load_dataset(f.path(), &schema()).unwrap();
        assert_eq!(records[0].item_name, "Caf\u{fffd}");
    }

    #[test]
    fn default_schema_matches_california_headers() {
        let f = csv_file("Purchase Order Number,Item Name,Item Description,Normalized UNSPSC\nPO1,Tape,Roll,31201512\n");
        let (records, _) = load_dataset(f.path(), &DatasetSchema::default()).unwrap();
        assert_eq!(records.len(), 1);
    }

    #[test]
    fn schema_from_toml() {
        let f = csv_file("name_column = \"n\"\ncode_column = \"c\"\ndescription_column = \"d\"\ndelimiter = \"\\t\"\n");
        let s = DatasetSchema::from_toml_file(f.path()).unwrap();
        assert_eq!(s.delimiter, '\t');
        assert_eq!(s.name_column, "n");
        assert!(s.has_header);
    }

    #[test]
    fn clean_text_examples() {
        assert_eq!(clean_text("  HP  LaserJet\tPro "), "HP LaserJet Pro");
        assert_eq!(clean_text("Café Grade A"), "Café Grade A");
        assert_eq!(clean_text("tape\u{0000}roll"), "tape roll");
        assert_eq!(clean_text("tape \u{0007} roll"), "tape roll");
        // decomposed e + combining acute composes to U+00E9
        assert_eq!(clean_text("Cafe\u{0301}"), "Caf\u{e9}");
        assert_eq!(clean_text("\n\t "), "");
    }

    #[test]
    fn sample_examples() {
        let five: Vec<_> = (1..=5).map(|i| record(i, "43")).collect();
        assert_eq!(sample(&five, 5, 7), five);
        assert_eq!(sample(&five, 50, 7), five);
        assert!(sample(&five, 0, 7).is_empty());

        let many: Vec<_> = (1..=1000).map(|i| record(i, "43")).collect();
        let a = sample(&many, 100, 1);
        let b = sample(&many, 100, 2);
        assert_eq!(a, sample(&many, 100, 1));
        assert_ne!(a, b);
        for s in [&a, &b] {
            assert_eq!(s.len(), 100);
            let rows: BTreeSet<_> = s.iter().map(|r| r.source_row).collect();
            assert_eq!(rows.len(), 100);
            assert!(s.windows(2).all(|w| w[0].source_row < w[1].source_row));
        }
    }

    #[test]
    fn census_examples() {
        let counts = |codes: &[&str]| {
            let recs: Vec<_> = codes.iter().enumerate().map(|(i, c)| record(i + 1, c)).collect();
            let c = census(&recs);
            HierarchyLevel::REPORT_ORDER.map(|l| c[&l])
        };
        assert_eq!(counts(&["12345678", "12345678"]), [1, 1, 1, 1]);
        assert_eq!(counts(&["12345678", "12345601", "12340000"]), [3, 2, 1, 1]);
        assert_eq!(counts(&[]), [0, 0, 0, 0]);
    }

    proptest! {
        #[test]
        fn clean_text_is_idempotent(s in "\\PC*|[ \t\n\u{0}\u{7f}a-zA-Z\u{301}é]*") {
            let once = clean_text(&s);
            prop_assert_eq!(clean_text(&once), once.clone());
            prop_assert!(!once.starts_with(' ') && !once.ends_with(' ') && !once.contains("  "));
        }

        #[test]
        fn sample_is_distinct_subset(len in 0usize..200, n in 0usize..250, seed in any::<u64>()) {
            let recs: Vec<_> = (1..=len).map(|i| record(i, "43")).collect();
            let s = sample(&recs, n, seed);
            prop_assert_eq!(s.len(), n.min(len));
            let rows: BTreeSet<_> = s.iter().map(|r| r.source_row).collect();
            prop_assert_eq!(rows.len(), s.len());
            prop_assert!(rows.iter().all(|&r| r >= 1 && r <= len));
        }

        #[test]
        fn census_is_monotone(codes in proptest::collection::vec((1u8..=99, 1u8..=99, 1u8..=99, 1u8..=99), 0..60)) {
            let recs: Vec<_> = codes.iter().enumerate().map(|(i, &(a, b, c, d))| PurchaseRecord {
                gold_code: UnspscCode::from_pairs([a % 4 + 1, b % 5 + 1, c, d]).unwrap(),
                ..record(i + 1, "43")
            }).collect();
            let c = census(&recs);
            prop_assert!(c[&HierarchyLevel::Commodity] >= c[&HierarchyLevel::Class]);
            prop_assert!(c[&HierarchyLevel::Class] >= c[&HierarchyLevel::Family]);
            prop_assert!(c[&HierarchyLevel::Family] >= c[&HierarchyLevel::Segment]);
        }
    }
}
