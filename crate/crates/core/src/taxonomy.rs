//! UNSPSC code arithmetic.
//!
//! A code is four two-digit pairs: segment, family, class, commodity. A coarser
//! code is obtained by zeroing every pair finer than the wanted level, so
//! `12345678` has the lineage `12000000 → 12340000 → 12345600 → 12345678`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodeError {
    #[error("code {0:?} contains non-digit characters")]
    NotNumeric(String),
    #[error("code {0:?} must have 2, 4, 6 or 8 digits")]
    WrongLength(String),
    #[error("code {0:?} has a non-zero pair below a zero pair")]
    MalformedZeroStructure(String),
    #[error("code {0:?} has a zero segment")]
    ZeroSegment(String),
}

/// One of the four levels of the tree, ordered coarse to fine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HierarchyLevel {
    Segment,
    Family,
    Class,
    Commodity,
}

impl HierarchyLevel {
    /// Coarse to fine.
    pub const ALL: [HierarchyLevel; 4] = [
        HierarchyLevel::Segment,
        HierarchyLevel::Family,
        HierarchyLevel::Class,
        HierarchyLevel::Commodity,
    ];

    /// Fine to coarse, the column order of the accuracy tables.
    pub const REPORT_ORDER: [HierarchyLevel; 4] = [
        HierarchyLevel::Commodity,
        HierarchyLevel::Class,
        HierarchyLevel::Family,
        HierarchyLevel::Segment,
    ];

    /// Number of significant digits at this level.
    pub fn width(self) -> usize {
        2 * (self.index() + 1)
    }

    /// Zero-based pair index.
    pub fn index(self) -> usize {
        match self {
            HierarchyLevel::Segment => 0,
            HierarchyLevel::Family => 1,
            HierarchyLevel::Class => 2,
            HierarchyLevel::Commodity => 3,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            HierarchyLevel::Segment => "segment",
            HierarchyLevel::Family => "family",
            HierarchyLevel::Class => "class",
            HierarchyLevel::Commodity => "commodity",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            HierarchyLevel::Segment => "Segment",
            HierarchyLevel::Family => "Family",
            HierarchyLevel::Class => "Class",
            HierarchyLevel::Commodity => "Commodity",
        }
    }
}

impl fmt::Display for HierarchyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HierarchyLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "segment" => Ok(HierarchyLevel::Segment),
            "family" => Ok(HierarchyLevel::Family),
            "class" => Ok(HierarchyLevel::Class),
            "commodity" => Ok(HierarchyLevel::Commodity),
            other => Err(format!("unknown hierarchy level {other:?}")),
        }
    }
}

/// A validated 8-digit UNSPSC code, stored as its four pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UnspscCode {
    pairs: [u8; 4],
}

impl UnspscCode {
    /// Builds a code from its pairs, checking every structural invariant.
    pub fn from_pairs(pairs: [u8; 4]) -> Result<Self, CodeError> {
        let render = || pairs.iter().map(|p| format!("{p:02}")).collect::<String>();
        if pairs.iter().any(|&p| p > 99) {
            return Err(CodeError::NotNumeric(render()));
        }
        if pairs[0] == 0 {
            return Err(CodeError::ZeroSegment(render()));
        }
        if let Some(first_zero) = pairs.iter().position(|&p| p == 0) {
            if pairs[first_zero..].iter().any(|&p| p != 0) {
                return Err(CodeError::MalformedZeroStructure(render()));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> [u8; 4] {
        self.pairs
    }

    pub fn pair(&self, level: HierarchyLevel) -> u8 {
        self.pairs[level.index()]
    }

    /// The code as an integer, e.g. `43212110`.
    pub fn as_u32(&self) -> u32 {
        self.pairs.iter().fold(0u32, |acc, &p| acc * 100 + p as u32)
    }

    pub fn truncate(&self, level: HierarchyLevel) -> Self {
        let mut pairs = self.pairs;
        for pair in pairs.iter_mut().skip(level.index() + 1) {
            *pair = 0;
        }
        Self { pairs }
    }

    /// Finest level whose pair is non-zero.
    pub fn level(&self) -> HierarchyLevel {
        let finest = self.pairs.iter().rposition(|&p| p != 0).unwrap_or(0);
        HierarchyLevel::ALL[finest]
    }

    /// Segment, family, class and commodity truncations, coarse to fine.
    pub fn lineage(&self) -> [UnspscCode; 4] {
        HierarchyLevel::ALL.map(|level| self.truncate(level))
    }

    /// The significant digits only, e.g. `"4321"` for `43210000`.
    pub fn significant_digits(&self) -> String {
        let s = self.to_string();
        s[..self.level().width()].to_string()
    }
}

impl fmt::Display for UnspscCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in self.pairs {
            write!(f, "{p:02}")?;
        }
        Ok(())
    }
}

impl FromStr for UnspscCode {
    type Err = CodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_code(s)
    }
}

impl Serialize for UnspscCode {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for UnspscCode {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_code(&s).map_err(serde::de::Error::custom)
    }
}

/// Parses a 2-, 4-, 6- or 8-digit code, right-padding short forms with zeros.
///
/// Surrounding whitespace is ignored.
pub fn parse_code(text: &str) -> Result<UnspscCode, CodeError> {
    let digits = text.trim();
    if !digits.chars().all(|c| c.is_ascii_digit()) {
        return Err(CodeError::NotNumeric(text.to_string()));
    }
    if !matches!(digits.len(), 2 | 4 | 6 | 8) {
        return Err(CodeError::WrongLength(text.to_string()));
    }
    let bytes = digits.as_bytes();
    let mut pairs = [0u8; 4];
    for (i, chunk) in bytes.chunks(2).enumerate() {
        pairs[i] = (chunk[0] - b'0') * 10 + (chunk[1] - b'0');
    }
    if pairs[0] == 0 {
        return Err(CodeError::ZeroSegment(text.to_string()));
    }
    UnspscCode::from_pairs(pairs).map_err(|e| match e {
        CodeError::MalformedZeroStructure(_) => CodeError::MalformedZeroStructure(text.to_string()),
        other => other,
    })
}

pub fn truncate(code: UnspscCode, level: HierarchyLevel) -> UnspscCode {
    code.truncate(level)
}

pub fn level_of(code: UnspscCode) -> HierarchyLevel {
    code.level()
}

pub fn lineage(code: UnspscCode) -> [UnspscCode; 4] {
    code.lineage()
}

/// True when both codes agree after truncation to `level`.
pub fn match_at(pred: UnspscCode, gold: UnspscCode, level: HierarchyLevel) -> bool {
    pred.truncate(level) == gold.truncate(level)
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("cannot read catalog {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("catalog {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("catalog {path} has no `code` and `title` columns")]
    MissingColumns { path: PathBuf },
}

/// Titles for codes at each level, loaded from a `code,title` CSV.
#[derive(Debug, Clone, Default)]
pub struct TaxonomyCatalog {
    source: Option<PathBuf>,
    titles: BTreeMap<UnspscCode, String>,
    /// Rows whose code did not parse: (row, raw code, error).
    pub invalid_rows: Vec<(usize, String, String)>,
}

impl TaxonomyCatalog {
    pub fn load(path: &Path) -> Result<Self, CatalogError> {
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_path(path)
            .map_err(|source| match source.kind() {
                csv::ErrorKind::Io(_) => CatalogError::Io {
                    path: path.to_path_buf(),
                    source: std::io::Error::other(source.to_string()),
                },
                _ => CatalogError::Csv { path: path.to_path_buf(), source },
            })?;
        let headers = reader
            .headers()
            .map_err(|source| CatalogError::Csv { path: path.to_path_buf(), source })?
            .clone();
        let find = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
        let (Some(code_col), Some(title_col)) = (find("code"), find("title")) else {
            return Err(CatalogError::MissingColumns { path: path.to_path_buf() });
        };

        let mut catalog = TaxonomyCatalog { source: Some(path.to_path_buf()), ..Default::default() };
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|source| CatalogError::Csv { path: path.to_path_buf(), source })?;
            let raw = record.get(code_col).unwrap_or_default();
            let title = record.get(title_col).unwrap_or_default().trim().to_string();
            match parse_code(raw) {
                Ok(code) => {
                    catalog.titles.insert(code, title);
                }
                Err(e) => catalog.invalid_rows.push((row + 1, raw.to_string(), e.to_string())),
            }
        }
        Ok(catalog)
    }

    pub fn from_entries<I: IntoIterator<Item = (UnspscCode, String)>>(entries: I) -> Self {
        TaxonomyCatalog { titles: entries.into_iter().collect(), ..Default::default() }
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    pub fn len(&self) -> usize {
        self.titles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.titles.is_empty()
    }

    pub fn title(&self, code: UnspscCode) -> Option<&str> {
        self.titles.get(&code).map(String::as_str)
    }

    /// Titles along the lineage of `code`, coarse to fine. Levels the code
    /// does not reach are omitted.
    pub fn lineage_titles(&self, code: UnspscCode) -> Vec<(HierarchyLevel, Option<&str>)> {
        HierarchyLevel::ALL
            .iter()
            .filter(|&&level| level <= code.level())
            .map(|&level| (level, self.title(code.truncate(level))))
            .collect()
    }

    pub fn count_per_level(&self) -> BTreeMap<HierarchyLevel, usize> {
        let mut counts = BTreeMap::new();
        for code in self.titles.keys() {
            *counts.entry(code.level()).or_insert(0) += 1;
        }
        counts
    }

    /// Entries whose direct parent is not in the catalog.
    pub fn orphans(&self) -> Vec<UnspscCode> {
        self.titles
            .keys()
            .filter(|code| {
                let level = code.level();
                match HierarchyLevel::from_index(level.index().wrapping_sub(1)) {
                    Some(parent) => !self.titles.contains_key(&code.truncate(parent)),
                    None => false,
                }
            })
            .copied()
            .collect()
    }
}
