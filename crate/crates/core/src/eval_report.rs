//! Per-level scoring, accuracy matrices and report rendering.
//!
//! A matrix has one row per temperature and one column per hierarchy level,
//! finest first. Refusals, unparseable replies and backend errors count as
//! incorrect at every level; their tallies are carried alongside so the
//! alternative denominator can be recomputed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm_client::{LlmError, RawResult};
use crate::response_parse::{Outcome, ParsedPrediction, ResponseParser};
use crate::taxonomy::{match_at, HierarchyLevel, UnspscCode};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("unsupported report format {0:?} (expected markdown, csv or json)")]
    UnsupportedFormat(String),
    #[error("matrices differ in shape: {0}")]
    ShapeMismatch(String),
    #[error("malformed report: {0}")]
    MalformedReport(String),
}

/// Whether a prediction agrees with gold at each level.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelMatches {
    pub segment: bool,
    pub family: bool,
    pub class: bool,
    pub commodity: bool,
}

impl LevelMatches {
    pub fn get(&self, level: HierarchyLevel) -> bool {
        match level {
            HierarchyLevel::Segment => self.segment,
            HierarchyLevel::Family => self.family,
            HierarchyLevel::Class => self.class,
            HierarchyLevel::Commodity => self.commodity,
        }
    }

    fn set(&mut self, level: HierarchyLevel, value: bool) {
        match level {
            HierarchyLevel::Segment => self.segment = value,
            HierarchyLevel::Family => self.family = value,
            HierarchyLevel::Class => self.class = value,
            HierarchyLevel::Commodity => self.commodity = value,
        }
    }

    /// A match at any level implies a match at every coarser level.
    pub fn is_consistent(&self) -> bool {
        (!self.commodity || self.class) && (!self.class || self.family) && (!self.family || self.segment)
    }
}

pub fn score(prediction: &ParsedPrediction, gold: UnspscCode) -> LevelMatches {
    let mut matches = LevelMatches::default();
    if let Outcome::Code { code } = prediction.outcome {
        for level in HierarchyLevel::ALL {
            matches.set(level, match_at(code, gold, level));
        }
    }
    matches
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub record_id: String,
    pub template_id: String,
    pub temperature: f64,
    pub model: String,
    pub prediction: ParsedPrediction,
    pub gold: UnspscCode,
    #[serde(rename = "match")]
    pub matches: LevelMatches,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<LlmError>,
}

impl ClassificationResult {
    /// Parses and scores one raw backend result. Backend errors become an
    /// unparseable prediction with the error attached.
    pub fn from_raw(
        raw: &RawResult,
        gold: UnspscCode,
        template_id: &str,
        temperature: f64,
        model: &str,
        parser: &ResponseParser,
    ) -> Self {
        let (prediction, error) = match &raw.outcome {
            Ok(response) => (parser.extract(&response.text), None),
            Err(e) => (ParsedPrediction::unparseable(""), Some(e.clone())),
        };
        let matches = score(&prediction, gold);
        Self {
            record_id: raw.record_id.clone(),
            template_id: template_id.to_string(),
            temperature,
            model: model.to_string(),
            prediction,
            gold,
            matches,
            error,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub correct: usize,
    pub total: usize,
    /// `None` when `total` is zero.
    pub fraction: Option<f64>,
}

impl Cell {
    pub fn new(correct: usize, total: usize) -> Self {
        let fraction = (total > 0).then(|| correct as f64 / total as f64);
        Self { correct, total, fraction }
    }

    /// Percentage with two decimals, e.g. `54.59%`.
    pub fn percent(&self) -> Option<String> {
        (self.total > 0).then(|| format!("{:.2}%", 100.0 * self.correct as f64 / self.total as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub temperature: f64,
    pub n: usize,
    pub refusals: usize,
    pub unparseable: usize,
    #[serde(default)]
    pub errors: usize,
    pub levels: BTreeMap<HierarchyLevel, Cell>,
}

impl MatrixRow {
    pub fn cell(&self, level: HierarchyLevel) -> Cell {
        self.levels.get(&level).copied().unwrap_or_else(|| Cell::new(0, self.n))
    }

    /// Segment ≥ Family ≥ Class ≥ Commodity, compared on counts.
    pub fn is_monotone(&self) -> bool {
        HierarchyLevel::ALL.windows(2).all(|w| self.cell(w[0]).correct >= self.cell(w[1]).correct)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub template_id: String,
    /// Ordered by descending temperature.
    pub rows: Vec<MatrixRow>,
}

impl AccuracyMatrix {
    pub fn row(&self, temperature: f64) -> Option<&MatrixRow> {
        self.rows.iter().find(|r| r.temperature == temperature)
    }
}

#[derive(Default)]
struct RowTally {
    n: usize,
    refusals: usize,
    unparseable: usize,
    errors: usize,
    correct: [usize; 4],
}

/// Groups results by (template, temperature) and counts matches per level.
/// Templates come out sorted by id, rows by descending temperature.
pub fn aggregate(results: &[ClassificationResult]) -> Vec<AccuracyMatrix> {
    let mut groups: BTreeMap<&str, BTreeMap<u64, (f64, RowTally)>> = BTreeMap::new();
    for r in results {
        let temperature = if r.temperature == 0.0 { 0.0 } else { r.temperature };
        let (_, tally) = groups
            .entry(r.template_id.as_str())
            .or_default()
            .entry(temperature.to_bits())
            .or_insert_with(|| (temperature, RowTally::default()));
        tally.n += 1;
        if r.error.is_some() {
            tally.errors += 1;
        } else {
            match r.prediction.outcome {
                Outcome::Refusal => tally.refusals += 1,
                Outcome::Unparseable => tally.unparseable += 1,
                Outcome::Code { .. } => {}
            }
        }
        for level in HierarchyLevel::ALL {
            if r.matches.get(level) {
                tally.correct[level.index()] += 1;
            }
        }
    }

    groups
        .into_iter()
        .map(|(template_id, rows)| {
            let mut rows: Vec<MatrixRow> = rows
                .into_values()
                .map(|(temperature, t)| MatrixRow {
                    temperature,
                    n: t.n,
                    refusals: t.refusals,
                    unparseable: t.unparseable,
                    errors: t.errors,
                    levels: HierarchyLevel::ALL.iter().map(|&l| (l, Cell::new(t.correct[l.index()], t.n))).collect(),
                })
                .collect();
            rows.sort_by(|a, b| b.temperature.total_cmp(&a.temperature));
            AccuracyMatrix { template_id: template_id.to_string(), rows }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Markdown => "md",
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(EvalError::UnsupportedFormat(other.to_string())),
        }
    }
}

pub const NO_RESULTS: &str = "no results";

/// `1`, `0.50`, `0`: whole numbers bare, everything else with two decimals.
pub fn format_temperature(t: f64) -> String {
    if t.fract() == 0.0 {
        format!("{t:.0}")
    } else {
        format!("{t:.2}")
    }
}

pub fn render_report(matrices: &[AccuracyMatrix], format: ReportFormat) -> String {
    match format {
        ReportFormat::Markdown => render_markdown(matrices),
        ReportFormat::Csv => render_csv(matrices),
        ReportFormat::Json => render_json(matrices),
    }
}

fn render_markdown(matrices: &[AccuracyMatrix]) -> String {
    let mut out = String::new();
    if matrices.is_empty() {
        out.push_str("# Accuracy report\n\n_");
        out.push_str(NO_RESULTS);
        out.push_str("_\n");
        return out;
    }
    for (i, m) in matrices.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "## Template {}\n", m.template_id);
        out.push_str("| Temperature | Accuracy Commodity | Accuracy Class | Accuracy Family | Accuracy Segment |\n");
        out.push_str("|---|---|---|---|---|\n");
        for row in &m.rows {
            let _ = write!(out, "| {} |", format_temperature(row.temperature));
            for level in HierarchyLevel::REPORT_ORDER {
                let cell = row.cell(level);
                let text = cell.percent().unwrap_or_else(|| "n/a (n=0)".to_string());
                let _ = write!(out, " {text} |");
            }
            out.push('\n');
        }
        out.push('\n');
        out.push_str("Refusals, unparseable replies and backend errors are scored as incorrect.\n\n");
        for row in &m.rows {
            let _ = writeln!(
                out,
                "- temperature {}: n={}, refusals={}, unparseable={}, errors={}",
                format_temperature(row.temperature),
                row.n,
                row.refusals,
                row.unparseable,
                row.errors
            );
        }
    }
    out
}

const CSV_FIXED: [&str; 6] = ["template_id", "temperature", "n", "refusals", "unparseable", "errors"];

fn csv_header() -> Vec<String> {
    let mut header: Vec<String> = CSV_FIXED.iter().map(|s| s.to_string()).collect();
    for level in HierarchyLevel::REPORT_ORDER {
        for field in ["correct", "total", "fraction"] {
            header.push(format!("{level}_{field}"));
        }
    }
    header
}

fn render_csv(matrices: &[AccuracyMatrix]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(csv_header()).expect("in-memory write");
    for m in matrices {
        for row in &m.rows {
            let mut fields = vec![
                m.template_id.clone(),
                row.temperature.to_string(),
                row.n.to_string(),
                row.refusals.to_string(),
                row.unparseable.to_string(),
                row.errors.to_string(),
            ];
            for level in HierarchyLevel::REPORT_ORDER {
                let cell = row.cell(level);
                fields.push(cell.correct.to_string());
                fields.push(cell.total.to_string());
                fields.push(cell.fraction.map(|f| format!("{f:.6}")).unwrap_or_default());
            }
            writer.write_record(fields).expect("in-memory write");
        }
    }
    let mut out = String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("csv output is UTF-8");
    if matrices.is_empty() {
        out.push_str("# ");
        out.push_str(NO_RESULTS);
        out.push('\n');
    }
    out
}

/// Reads the CSV form back into matrices. Fractions are recomputed from counts.
pub fn parse_csv_report(text: &str) -> Result<Vec<AccuracyMatrix>, EvalError> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| EvalError::MalformedReport(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != csv_header() {
        return Err(EvalError::MalformedReport("unexpected CSV header".into()));
    }
    let mut matrices: Vec<AccuracyMatrix> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| EvalError::MalformedReport(e.to_string()))?;
        let num = |i: usize| -> Result<usize, EvalError> {
            record[i].parse().map_err(|_| EvalError::MalformedReport(format!("field {} is not a count", header[i])))
        };
        let temperature: f64 =
            record[1].parse().map_err(|_| EvalError::MalformedReport("bad temperature".into()))?;
        let mut levels = BTreeMap::new();
        for (k, level) in HierarchyLevel::REPORT_ORDER.iter().enumerate() {
            let base = CSV_FIXED.len() + 3 * k;
            levels.insert(*level, Cell::new(num(base)?, num(base + 1)?));
        }
        let row = MatrixRow {
            temperature,
            n: num(2)?,
            refusals: num(3)?,
            unparseable: num(4)?,
            errors: num(5)?,
            levels,
        };
        let template_id = &record[0];
        match matrices.iter_mut().find(|m| m.template_id == template_id) {
            Some(m) => m.rows.push(row),
            None => matrices.push(AccuracyMatrix { template_id: template_id.to_string(), rows: vec![row] }),
        }
    }
    Ok(matrices)
}

#[derive(Serialize, Deserialize)]
struct JsonReport {
    no_results: bool,
    matrices: Vec<AccuracyMatrix>,
}

fn render_json(matrices: &[AccuracyMatrix]) -> String {
    let doc = JsonReport { no_results: matrices.is_empty(), matrices: matrices.to_vec() };
    let mut out = serde_json::to_string_pretty(&doc).expect("matrices serialize");
    out.push('\n');
    out
}

pub fn parse_json_report(text: &str) -> Result<Vec<AccuracyMatrix>, EvalError> {
    let doc: JsonReport = serde_json::from_str(text).map_err(|e| EvalError::MalformedReport(e.to_string()))?;
    Ok(doc.matrices)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Winner {
    A,
    B,
    Tie,
    Undefined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDelta {
    pub temperature: f64,
    pub level: HierarchyLevel,
    /// `fraction_a - fraction_b`.
    pub delta: Option<f64>,
    pub winner: Winner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixComparison {
    pub a: String,
    pub b: String,
    pub cells: Vec<CellDelta>,
    pub a_wins: usize,
    pub b_wins: usize,
    pub ties: usize,
}

impl MatrixComparison {
    pub fn delta(&self, temperature: f64, level: HierarchyLevel) -> Option<f64> {
        self.cells.iter().find(|c| c.temperature == temperature && c.level == level).and_then(|c| c.delta)
    }
}

/// Cell-wise difference `a - b`. Both matrices must have the same temperatures.
pub fn compare_matrices(a: &AccuracyMatrix, b: &AccuracyMatrix) -> Result<MatrixComparison, EvalError> {
    let temps = |m: &AccuracyMatrix| {
        let mut t: Vec<u64> = m.rows.iter().map(|r| r.temperature.to_bits()).collect();
        t.sort_unstable();
        t
    };
    if temps(a) != temps(b) {
        return Err(EvalError::ShapeMismatch(format!(
            "{} has temperatures {:?}, {} has {:?}",
            a.template_id,
            a.rows.iter().map(|r| r.temperature).collect::<Vec<_>>(),
            b.template_id,
            b.rows.iter().map(|r| r.temperature).collect::<Vec<_>>()
        )));
    }
    let mut comparison =
        MatrixComparison { a: a.template_id.clone(), b: b.template_id.clone(), cells: Vec::new(), a_wins: 0, b_wins: 0, ties: 0 };
    for row_a in &a.rows {
        let row_b = b.row(row_a.temperature).expect("temperature sets are equal");
        for level in HierarchyLevel::REPORT_ORDER {
            let (fa, fb) = (row_a.cell(level).fraction, row_b.cell(level).fraction);
            let delta = fa.zip(fb).map(|(x, y)| x - y);
            let winner = match delta {
                None => Winner::Undefined,
                Some(d) if d.abs() < 1e-12 => Winner::Tie,
                Some(d) if d > 0.0 => Winner::A,
                Some(_) => Winner::B,
            };
            match winner {
                Winner::A => comparison.a_wins += 1,
                Winner::B => comparison.b_wins += 1,
                Winner::Tie => comparison.ties += 1,
                Winner::Undefined => {}
            }
            comparison.cells.push(CellDelta { temperature: row_a.temperature, level, delta, winner });
        }
    }
    Ok(comparison)
}

/// Deltas in percentage points, laid out like the accuracy tables.
pub fn render_comparison_markdown(c: &MatrixComparison) -> String {
    let mut out = format!("## {} vs {} (percentage points)\n\n", c.a, c.b);
    out.push_str("| Temperature | Accuracy Commodity | Accuracy Class | Accuracy Family | Accuracy Segment |\n");
    out.push_str("|---|---|---|---|---|\n");
    for chunk in c.cells.chunks(HierarchyLevel::REPORT_ORDER.len()) {
        let _ = write!(out, "| {} |", format_temperature(chunk[0].temperature));
        for cell in chunk {
            let text = cell.delta.map(|d| format!("{:+.2}", d * 100.0)).unwrap_or_else(|| "n/a".into());
            let _ = write!(out, " {text} |");
        }
        out.push('\n');
    }
    let _ = writeln!(out, "\n{} wins {} cells, {} wins {}, {} ties.", c.a, c.a_wins, c.b, c.b_wins, c.ties);
    out
}
