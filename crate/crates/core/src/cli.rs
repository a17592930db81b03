//! The `unspsc` command line: validate, classify, report, census, templates.
//!
//! Exit codes: 0 success, 1 other failure, 2 input or schema error,
//! 3 backend configuration error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache_store::CacheStore;
use crate::eval_report::{
    aggregate, compare_matrices, AccuracyMatrix, render_comparison_markdown, render_report, ClassificationResult, ReportFormat,
};
use crate::ingest::{census, load_dataset, sample, DatasetSchema, IngestError, PurchaseRecord, RejectionReport};
use crate::llm_client::{
    classify_batch, Backend, BatchParams, CorruptionMode, CountingBackend, LlmError, MockBackend, MockOracleConfig,
    RemoteBackend, RemoteConfig, DEFAULT_API_KEY_ENV, DEFAULT_MAX_OUTPUT_TOKENS,
    DEFAULT_TEMPERATURES,
};
use crate::prompt::{builtin_template, builtin_template_by_id, BuiltinTemplate, PromptTemplate};
use crate::response_parse::ResponseParser;
use crate::taxonomy::HierarchyLevel;

pub const RESULTS_FILE: &str = "results.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    BackendConfig(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::BackendConfig(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::Input(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Openai,
    Mock,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSettings {
    pub corruption: BTreeMap<HierarchyLevel, f64>,
    pub refusal_rate: f64,
    pub seed: u64,
    pub exact: bool,
}

/// Everything one classification sweep needs. Also the shape of the optional
/// TOML config file, where every key may be omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub schema: DatasetSchema,
    pub sample_size: Option<usize>,
    pub seed: u64,
    /// `p1`, `p2`, `p3` or `@path/to/template.txt`.
    pub templates: Vec<String>,
    pub temperatures: Vec<f64>,
    pub model: String,
    pub backend: BackendKind,
    pub endpoint: Option<String>,
    pub api_key_env: String,
    pub auth_header: String,
    pub parallelism: usize,
    pub max_output_tokens: u32,
    pub timeout_secs: u64,
    pub cache_dir: Option<PathBuf>,
    pub out: PathBuf,
    pub formats: Vec<ReportFormat>,
    pub refusal_phrases: Option<PathBuf>,
    pub mock: MockSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            schema: DatasetSchema::default(),
            sample_size: None,
            seed: 0,
            templates: BuiltinTemplate::ALL.iter().map(|t| t.id().to_string()).collect(),
            temperatures: DEFAULT_TEMPERATURES.to_vec(),
            model: "gpt-4".into(),
            backend: BackendKind::Openai,
            endpoint: None,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            auth_header: "Authorization".into(),
            parallelism: 4,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            timeout_secs: 60,
            cache_dir: None,
            out: PathBuf::from("out"),
            formats: vec![ReportFormat::Markdown, ReportFormat::Csv, ReportFormat::Json],
            refusal_phrases: None,
            mock: MockSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.templates.is_empty() {
            return Err(CliError::Input("at least one template is required".into()));
        }
        if self.temperatures.is_empty() {
            return Err(CliError::Input("at least one temperature is required".into()));
        }
        if let Some(t) = self.temperatures.iter().find(|t| !(0.0..=2.0).contains(*t)) {
            return Err(CliError::Input(format!("temperature {t} outside [0, 2]")));
        }
        if self.parallelism == 0 {
            return Err(CliError::Input("parallelism must be at least 1".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(CliError::Input("max output tokens must be positive".into()));
        }
        self.schema.validate()?;
        Ok(())
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.out.join("cache"))
    }

    fn load_templates(&self) -> Result<Vec<PromptTemplate>, CliError> {
        self.templates
            .iter()
            .map(|spec| match spec.strip_prefix('@') {
                Some(path) => PromptTemplate::from_file(Path::new(path)),
                None => builtin_template_by_id(spec),
            })
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Input(e.to_string()))
    }

    fn parser(&self) -> Result<ResponseParser, CliError> {
        match &self.refusal_phrases {
            Some(path) => ResponseParser::from_phrase_file(path).map_err(|e| io_err(path, e)),
            None => Ok(ResponseParser::default()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "unspsc", version, about = "Classify purchase records into UNSPSC codes with an LLM and score them")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and clean a dataset, reporting rejected rows.
    Validate(DataArgs),
    /// Run the template × temperature sweep and write results.jsonl.
    Classify(Box<ClassifyArgs>),
    /// Build accuracy matrices from a results file.
    Report(ReportArgs),
    /// Count distinct gold codes per hierarchy level.
    Census(CensusArgs),
    /// Print the built-in prompt templates.
    Templates,
}

#[derive(Debug, Clone, Args, Default)]
pub struct DataArgs {
    /// TOML config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// TOML file mapping dataset columns.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub sample_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated: p1,p2,p3 or @file.
    #[arg(long, value_delimiter = ',')]
    pub template: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub temperatures: Option<Vec<f64>>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
    /// Header carrying the key; `api-key` for Azure-style endpoints.
    #[arg(long)]
    pub auth_header: Option<String>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report formats written after the sweep: markdown,csv,json.
    #[arg(long, value_delimiter = ',')]
    pub format: Option<Vec<String>>,
    /// Refusal phrases, one per line.
    #[arg(long)]
    pub refusal_phrases: Option<PathBuf>,
    /// Mock per-level corruption, e.g. `commodity=0.75,class=0.1`.
    #[arg(long, value_delimiter = ',')]
    pub mock_corruption: Option<Vec<String>>,
    #[arg(long)]
    pub mock_refusal_rate: Option<f64>,
    #[arg(long)]
    pub mock_seed: Option<u64>,
    /// Corrupt exactly round(rate × n) records instead of sampling.
    #[arg(long)]
    pub mock_exact: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Results file; defaults to <out>/results.jsonl.
    #[arg(long)]
    pub results: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "markdown,csv,json")]
    pub format: Vec<String>,
    /// Also write cell deltas between two templates, e.g. `p3,p1`.
    #[arg(long, value_delimiter = ',')]
    pub compare: Option<Vec<String>>,
}

#[derive(Debug, Clone, Args)]
pub struct CensusArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Expected counts as commodity,class,family,segment.
    #[arg(long, value_delimiter = ',')]
    pub expect: Option<Vec<usize>>,
    /// Relative tolerance for --expect.
    #[arg(long, default_value_t = 0.10)]
    pub tolerance: f64,
    #[arg(long)]
    pub json: bool,
}

fn read_config_file(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
        }
    }
}

fn apply_data_args(config: &mut RunConfig, args: &DataArgs) -> Result<(), CliError> {
    if let Some(input) = &args.input {
        config.input = Some(input.clone());
    }
    if let Some(schema) = &args.schema {
        config.schema = DatasetSchema::from_toml_file(schema)?;
    }
    if args.sample_size.is_some() {
        config.sample_size = args.sample_size;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    Ok(())
}

/// Merges the config file and flags into one validated configuration.
pub fn resolve_config(args: &ClassifyArgs) -> Result<RunConfig, CliError> {
    let mut config = read_config_file(args.data.config.as_deref())?;
    apply_data_args(&mut config, &args.data)?;
    macro_rules! set {
        ($field:ident, $value:expr) => {
            if let Some(v) = $value.clone() {
                config.$field = v;
            }
        };
    }
    set!(templates, args.template);
    set!(temperatures, args.temperatures);
    set!(model, args.model);
    set!(backend, args.backend);
    set!(api_key_env, args.api_key_env);
    set!(auth_header, args.auth_header);
    set!(parallelism, args.parallelism);
    set!(max_output_tokens, args.max_tokens);
    set!(timeout_secs, args.timeout_secs);
    set!(out, args.out);
    if let Some(formats) = &args.format {
        config.formats = parse_formats(formats)?;
    }
    if args.endpoint.is_some() {
        config.endpoint = args.endpoint.clone();
    }
    if args.cache_dir.is_some() {
        config.cache_dir = args.cache_dir.clone();
    }
    if args.refusal_phrases.is_some() {
        config.refusal_phrases = args.refusal_phrases.clone();
    }
    if let Some(specs) = &args.mock_corruption {
        for spec in specs {
            let (level, rate) = spec
                .split_once('=')
                .ok_or_else(|| CliError::Input(format!("--mock-corruption expects level=rate, got {spec:?}")))?;
            let level: HierarchyLevel = level.parse().map_err(CliError::Input)?;
            let rate: f64 = rate.trim().parse().map_err(|_| CliError::Input(format!("bad rate in {spec:?}")))?;
            config.mock.corruption.insert(level, rate);
        }
    }
    if let Some(rate) = args.mock_refusal_rate {
        config.mock.refusal_rate = rate;
    }
    if let Some(seed) = args.mock_seed {
        config.mock.seed = seed;
    }
    if args.mock_exact {
        config.mock.exact = true;
    }
    config.validate()?;
    Ok(config)
}

fn load_records(config: &RunConfig) -> Result<(Vec<PurchaseRecord>, RejectionReport), CliError> {
    let input = config.input.as_deref().ok_or_else(|| CliError::Input("--input is required".into()))?;
    let (records, report) = load_dataset(input, &config.schema)?;
    let records = match config.sample_size {
        Some(n) => sample(&records, n, config.seed),
        None => records,
    };
    Ok((records, report))
}

pub fn cmd_validate(args: &DataArgs, stdout: &mut dyn Write) -> Result<RejectionReport, CliError> {
    let mut config = read_config_file(args.config.as_deref())?;
    apply_data_args(&mut config, args)?;
    let input = config.input.as_deref().ok_or_else(|| CliError::Input("--input is required".into()))?;
    let (_, report) = load_dataset(input, &config.schema)?;
    let out = (|| -> std::io::Result<()> {
        writeln!(stdout, "rows: {}", report.total_rows)?;
        writeln!(stdout, "kept: {}", report.kept)?;
        writeln!(stdout, "rejected: {}", report.rejected())?;
        for (reason, count) in report.counts() {
            writeln!(stdout, "  {reason:?}: {count}")?;
        }
        for r in report.rejections.iter().take(50) {
            writeln!(stdout, "  row {}: {:?} ({})", r.source_row, r.reason, r.detail)?;
        }
        if report.rejections.len() > 50 {
            writeln!(stdout, "  ... {} more", report.rejections.len() - 50)?;
        }
        Ok(())
    })();
    out.map_err(|e| CliError::Other(e.to_string()))?;
    Ok(report)
}

fn build_backend(config: &RunConfig, records: &[PurchaseRecord]) -> Result<Box<dyn Backend>, CliError> {
    match config.backend {
        BackendKind::Mock => {
            let oracle = MockOracleConfig {
                gold: records.iter().map(|r| (r.record_id.clone(), r.gold_code)).collect(),
                corruption_rate: config.mock.corruption.clone(),
                refusal_rate: config.mock.refusal_rate,
                seed: config.mock.seed,
                mode: if config.mock.exact { CorruptionMode::Exact } else { CorruptionMode::Bernoulli },
                latency: None,
            };
            let backend = MockBackend::new(oracle).map_err(|e| CliError::BackendConfig(e.to_string()))?;
            Ok(Box::new(backend))
        }
        BackendKind::Openai => {
            let endpoint = config
                .endpoint
                .as_deref()
                .ok_or_else(|| CliError::BackendConfig("--endpoint is required for the openai backend".into()))?;
            let mut remote = RemoteConfig::from_env(endpoint, &config.api_key_env)
                .map_err(|e| CliError::BackendConfig(e.to_string()))?;
            remote.auth_header = config.auth_header.clone();
            remote.timeout = Duration::from_secs(config.timeout_secs.max(1));
            let backend = RemoteBackend::new(remote).map_err(|e| CliError::BackendConfig(e.to_string()))?;
            Ok(Box::new(backend))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub records: usize,
    pub results: usize,
    pub backend_calls: usize,
    pub cache_hits: usize,
    pub errors: usize,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifySummary {
    pub results_path: PathBuf,
    pub manifest_path: PathBuf,
    pub results: usize,
    pub backend_calls: usize,
    pub cache_hits: usize,
}

/// Runs the sweep with the backend named in `config`.
pub fn cmd_classify(config: &RunConfig, stdout: &mut dyn Write) -> Result<ClassifySummary, CliError> {
    config.validate()?;
    let (records, _) = load_records(config)?;
    let backend = build_backend(config, &records)?;
    run_sweep(config, &records, backend.as_ref(), stdout)
}

/// The sweep itself, over any backend. Writes `results.jsonl` (one line per
/// record × template × temperature, in that nesting order) and `manifest.json`.
pub fn run_sweep(
    config: &RunConfig,
    records: &[PurchaseRecord],
    backend: &dyn Backend,
    stdout: &mut dyn Write,
) -> Result<ClassifySummary, CliError> {
    let started_at = Utc::now();
    let templates = config.load_templates()?;
    let parser = config.parser()?;
    let cache = CacheStore::open_dir(&config.cache_dir()).map_err(|e| CliError::Other(e.to_string()))?;
    fs::create_dir_all(&config.out).map_err(|e| io_err(&config.out, e))?;
    let counting = CountingBackend::new(backend);

    let results_path = config.out.join(RESULTS_FILE);
    let partial_path = config.out.join(format!("{RESULTS_FILE}.partial"));
    let mut writer = std::io::BufWriter::new(fs::File::create(&partial_path).map_err(|e| io_err(&partial_path, e))?);
    let mut written = 0;
    let mut cache_hits = 0;
    let mut errors = 0;
    for template in &templates {
        for &temperature in &config.temperatures {
            let params = BatchParams {
                model: config.model.clone(),
                temperature,
                max_output_tokens: config.max_output_tokens,
                parallelism: config.parallelism,
            };
            let raw = classify_batch(records, template, &params, &counting, Some(&cache));
            if let Some(e) = raw.iter().find_map(|r| r.outcome.as_ref().err().filter(|e| e.is_configuration())) {
                return Err(CliError::BackendConfig(format!("backend rejected the configuration: {e}")));
            }
            for (record, raw) in records.iter().zip(&raw) {
                cache_hits += raw.cache_hit as usize;
                errors += raw.outcome.is_err() as usize;
                let result =
                    ClassificationResult::from_raw(raw, record.gold_code, &template.id, temperature, &config.model, &parser);
                let line = serde_json::to_string(&result).map_err(|e| CliError::Other(e.to_string()))?;
                writeln!(writer, "{line}").map_err(|e| io_err(&partial_path, e))?;
                written += 1;
            }
            let _ = writeln!(
                stdout,
                "template {} temperature {temperature}: {} records",
                template.id,
                records.len()
            );
        }
    }
    writer.flush().map_err(|e| io_err(&partial_path, e))?;
    drop(writer);
    fs::rename(&partial_path, &results_path).map_err(|e| io_err(&results_path, e))?;

    let manifest = RunManifest {
        config: config.clone(),
        started_at,
        finished_at: Utc::now(),
        records: records.len(),
        results: written,
        backend_calls: counting.calls(),
        cache_hits,
        errors,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let manifest_path = config.out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(&manifest_path, text + "\n").map_err(|e| io_err(&manifest_path, e))?;
    let results = read_results(&results_path)?;
    write_reports(&aggregate(&results), &config.formats, &config.out)?;
    let _ = writeln!(
        stdout,
        "wrote {written} results to {} ({} backend calls, {cache_hits} cache hits, {errors} errors)",
        results_path.display(),
        counting.calls()
    );
    Ok(ClassifySummary { results_path, manifest_path, results: written, backend_calls: counting.calls(), cache_hits })
}

pub fn read_results(path: &Path) -> Result<Vec<ClassificationResult>, CliError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut results = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let result = serde_json::from_str(&line)
            .map_err(|e| CliError::Input(format!("{}:{}: malformed result: {e}", path.display(), i + 1)))?;
        results.push(result);
    }
    Ok(results)
}

/// Writes one file per template and format; returns the paths written.
pub fn cmd_report(args: &ReportArgs, stdout: &mut dyn Write) -> Result<Vec<PathBuf>, CliError> {
    let formats = parse_formats(&args.format)?;
    let results_path = args.results.clone().unwrap_or_else(|| args.out.join(RESULTS_FILE));
    let results = read_results(&results_path)?;
    let matrices = aggregate(&results);
    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let mut written = write_reports(&matrices, &formats, &args.out)?;
    if let Some(pair) = &args.compare {
        let [a, b] = pair.as_slice() else {
            return Err(CliError::Input("--compare takes exactly two template ids".into()));
        };
        let find = |id: &str| {
            matrices
                .iter()
                .find(|m| m.template_id == id)
                .ok_or_else(|| CliError::Input(format!("no results for template {id}")))
        };
        let comparison = compare_matrices(find(a)?, find(b)?).map_err(|e| CliError::Input(e.to_string()))?;
        let path = args.out.join(format!("compare_{a}_{b}.md"));
        fs::write(&path, render_comparison_markdown(&comparison)).map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    let _ = stdout.write_all(render_report(&matrices, ReportFormat::Markdown).as_bytes());
    Ok(written)
}

fn parse_formats(names: &[String]) -> Result<Vec<ReportFormat>, CliError> {
    names
        .iter()
        .map(|f| f.parse::<ReportFormat>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Input(e.to_string()))
}

/// Writes `report_{template}.{ext}` per matrix and format, or `report.{ext}`
/// "no results" documents when there are no matrices.
pub fn write_reports(matrices: &[AccuracyMatrix], formats: &[ReportFormat], dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut written = Vec::new();
    let mut write = |name: String, body: String| -> Result<(), CliError> {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| io_err(&path, e))?;
        written.push(path);
        Ok(())
    };
    if matrices.is_empty() {
        for &format in formats {
            write(format!("report.{}", format.extension()), render_report(&[], format))?;
        }
    }
    for matrix in matrices {
        for &format in formats {
            let body = render_report(std::slice::from_ref(matrix), format);
            write(format!("report_{}.{}", matrix.template_id, format.extension()), body)?;
        }
    }
    Ok(written)
}

/// Relative deviation of each observed count from its expectation, in
/// commodity, class, family, segment order.
pub fn census_deviation(observed: &BTreeMap<HierarchyLevel, usize>, expected: [usize; 4]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (k, level) in HierarchyLevel::REPORT_ORDER.iter().enumerate() {
        let obs = observed.get(level).copied().unwrap_or(0) as f64;
        let exp = expected[k] as f64;
        out[k] = if exp == 0.0 { if obs == 0.0 { 0.0 } else { f64::INFINITY } } else { (obs - exp).abs() / exp };
    }
    out
}

pub fn cmd_census(args: &CensusArgs, stdout: &mut dyn Write) -> Result<BTreeMap<HierarchyLevel, usize>, CliError> {
    let mut config = read_config_file(args.data.config.as_deref())?;
    apply_data_args(&mut config, &args.data)?;
    let (records, _) = load_records(&config)?;
    let counts = census(&records);
    if args.json {
        let map: BTreeMap<&str, usize> = counts.iter().map(|(l, c)| (l.name(), *c)).collect();
        let _ = writeln!(stdout, "{}", serde_json::to_string(&map).expect("counts serialize"));
    } else {
        let _ = writeln!(stdout, "records: {}", records.len());
        for level in HierarchyLevel::REPORT_ORDER {
            let _ = writeln!(stdout, "unique {} codes: {}", level.name(), counts[&level]);
        }
    }
    if let Some(expected) = &args.expect {
        let expected: [usize; 4] = expected
            .as_slice()
            .try_into()
            .map_err(|_| CliError::Input("--expect takes four counts: commodity,class,family,segment".into()))?;
        let deviation = census_deviation(&counts, expected);
        let mut ok = true;
        for (k, level) in HierarchyLevel::REPORT_ORDER.iter().enumerate() {
            let pass = deviation[k] <= args.tolerance;
            ok &= pass;
            let _ = writeln!(
                stdout,
                "{} {}: expected {}, deviation {:.2}%",
                if pass { "PASS" } else { "FAIL" },
                level.name(),
                expected[k],
                100.0 * deviation[k]
            );
        }
        if !ok {
            return Err(CliError::Other("census outside tolerance".into()));
        }
    }
    Ok(counts)
}

pub fn cmd_templates(stdout: &mut dyn Write) {
    for id in BuiltinTemplate::ALL {
        let t = builtin_template(id);
        let _ = writeln!(stdout, "=== {} ({:?}) ===", t.id, t.style);
        if let Some(system) = &t.system_text {
            let _ = writeln!(stdout, "[system]\n{system}");
        }
        let _ = writeln!(stdout, "[user]\n{}\n", t.user_text);
    }
}

/// Parses `args` and runs the subcommand, returning the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 { write!(stdout, "{e}") } else { write!(stderr, "{e}") };
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Validate(args) => cmd_validate(args, stdout).map(|_| ()),
        Command::Classify(args) => resolve_config(args).and_then(|config| cmd_classify(&config, stdout)).map(|_| ()),
        Command::Report(args) => cmd_report(args, stdout).map(|_| ()),
        Command::Census(args) => cmd_census(args, stdout).map(|_| ()),
        Command::Templates => {
            cmd_templates(stdout);
            Ok(())
        }
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

impl From<LlmError> for CliError {
    fn from(e: LlmError) -> Self {
        if e.is_configuration() {
            CliError::BackendConfig(e.to_string())
        } else {
            CliError::Other(e.to_string())
        }
    }
}
