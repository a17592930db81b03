//! Deterministic offline backend that answers from a gold-code oracle.
//!
//! Each level's pair is corrupted independently with its configured rate. The
//! decision and the replacement pair are pure functions of `(seed, record_id,
//! level)`, so answers do not depend on call order or thread count.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, LlmError, LlmRequest, LlmResponse};
use crate::taxonomy::{HierarchyLevel, UnspscCode};

pub const REFUSAL_TEXT: &str =
    "There is insufficient information to determine the UNSPSC code for this product.";

/// How rates turn into corrupted records.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionMode {
    /// Each record is corrupted independently with probability `rate`.
    #[default]
    Bernoulli,
    /// Exactly `round(rate * n)` of the oracle's `n` records are corrupted.
    Exact,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockOracleConfig {
    pub gold: BTreeMap<String, UnspscCode>,
    #[serde(default)]
    pub corruption_rate: BTreeMap<HierarchyLevel, f64>,
    #[serde(default)]
    pub refusal_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: CorruptionMode,
    /// Artificial per-call delay, for concurrency tests and benches.
    #[serde(skip)]
    pub latency: Option<Duration>,
}

impl MockOracleConfig {
    pub fn new<I: IntoIterator<Item = (String, UnspscCode)>>(gold: I, seed: u64) -> Self {
        Self { gold: gold.into_iter().collect(), seed, ..Default::default() }
    }

    pub fn with_rate(mut self, level: HierarchyLevel, rate: f64) -> Self {
        self.corruption_rate.insert(level, rate);
        self
    }

    pub fn rate(&self, level: HierarchyLevel) -> f64 {
        self.corruption_rate.get(&level).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        let rates = self.corruption_rate.values().chain(std::iter::once(&self.refusal_rate));
        for &r in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(LlmError::Config(format!("mock probability {r} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Uniform draw in [0, 1) from a hash of the inputs.
fn unit_draw(seed: u64, record_id: &str, tag: &str) -> f64 {
    (hash_u64(seed, record_id, tag) >> 11) as f64 / (1u64 << 53) as f64
}

fn hash_u64(seed: u64, record_id: &str, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((tag.len() as u64).to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(record_id.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Picks a pair different from `current`, in 1..=99.
fn replacement_pair(seed: u64, record_id: &str, level: HierarchyLevel, current: u8) -> u8 {
    let candidates: Vec<u8> = (1..=99).filter(|&p| p != current).collect();
    let index = hash_u64(seed, record_id, &format!("pair:{level}")) % candidates.len() as u64;
    candidates[index as usize]
}

pub struct MockBackend {
    config: MockOracleConfig,
    /// Exact mode only: records selected per level and for refusal.
    exact_corrupted: HashMap<HierarchyLevel, HashSet<String>>,
    exact_refused: HashSet<String>,
}

impl MockBackend {
    pub fn new(config: MockOracleConfig) -> Result<Self, LlmError> {
        config.validate()?;
        let mut backend = Self { config, exact_corrupted: HashMap::new(), exact_refused: HashSet::new() };
        if backend.config.mode == CorruptionMode::Exact {
            for level in HierarchyLevel::ALL {
                let rate = backend.config.rate(level);
                let chosen = backend.select_exact(rate, level.name());
                backend.exact_corrupted.insert(level, chosen);
            }
            backend.exact_refused = backend.select_exact(backend.config.refusal_rate, "refusal");
        }
        Ok(backend)
    }

    pub fn config(&self) -> &MockOracleConfig {
        &self.config
    }

    fn select_exact(&self, rate: f64, tag: &str) -> HashSet<String> {
        let n = self.config.gold.len();
        let k = (rate * n as f64).round() as usize;
        let mut ranked: Vec<(f64, &String)> =
            self.config.gold.keys().map(|id| (unit_draw(self.config.seed, id, tag), id)).collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        ranked.into_iter().take(k).map(|(_, id)| id.clone()).collect()
    }

    fn refuses(&self, record_id: &str) -> bool {
        match self.config.mode {
            CorruptionMode::Bernoulli => unit_draw(self.config.seed, record_id, "refusal") < self.config.refusal_rate,
            CorruptionMode::Exact => self.exact_refused.contains(record_id),
        }
    }

    fn corrupts(&self, record_id: &str, level: HierarchyLevel) -> bool {
        match self.config.mode {
            CorruptionMode::Bernoulli => unit_draw(self.config.seed, record_id, level.name()) < self.config.rate(level),
            CorruptionMode::Exact => self.exact_corrupted.get(&level).is_some_and(|s| s.contains(record_id)),
        }
    }

    /// The oracle answer for one record.
    pub fn answer(&self, record_id: &str) -> Result<String, LlmError> {
        let gold = self
            .config
            .gold
            .get(record_id)
            .ok_or_else(|| LlmError::UnknownRecordId(record_id.to_string()))?;
        if self.refuses(record_id) {
            return Ok(REFUSAL_TEXT.to_string());
        }
        let mut pairs = gold.pairs();
        for level in HierarchyLevel::ALL {
            let i = level.index();
            // A pair below a zero pair has to stay zero for the code to be valid.
            let reachable = i == 0 || pairs[i - 1] != 0;
            if reachable && self.corrupts(record_id, level) {
                pairs[i] = replacement_pair(self.config.seed, record_id, level, pairs[i]);
            }
        }
        let code = UnspscCode::from_pairs(pairs).expect("corruption keeps the zero structure");
        Ok(code.to_string())
    }
}

/// One-shot form of [`MockBackend::answer`].
pub fn mock_complete(record_id: &str, config: &MockOracleConfig) -> Result<String, LlmError> {
    MockBackend::new(config.clone())?.answer(record_id)
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        request.validate()?;
        if let Some(latency) = self.config.latency {
            std::thread::sleep(latency);
        }
        let record_id = request
            .record_id
            .as_deref()
            .ok_or_else(|| LlmError::InvalidRequest("mock backend needs a record id".into()))?;
        let text = self.answer(record_id)?;
        let prompt_chars: usize = request.messages.iter().map(|m| m.content.chars().count()).sum();
        Ok(LlmResponse {
            completion_tokens: text.len().div_ceil(4) as u64,
            prompt_tokens: prompt_chars.div_ceil(4) as u64,
            text,
            finish_reason: "stop".into(),
            latency_ms: self.config.latency.map_or(0.0, |d| d.as_secs_f64() * 1000.0),
            backend_id: "mock".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{match_at, parse_code};

    fn oracle(n: usize, code: &str) -> MockOracleConfig {
        MockOracleConfig::new((0..n).map(|i| (format!("r{i}"), parse_code(code).unwrap())), 42)
    }

    #[test]
    fn zero_rates_echo_gold() {
        let config = oracle(5, "43212110");
        for i in 0..5 {
            assert_eq!(mock_complete(&format!("r{i}"), &config).unwrap(), "43212110");
        }
        assert!(matches!(mock_complete("missing", &config), Err(LlmError::UnknownRecordId(_))));
    }

    #[test]
    fn full_refusal() {
        let config = MockOracleConfig { refusal_rate: 1.0, ..oracle(20, "43212110") };
        let backend = MockBackend::new(config).unwrap();
        for i in 0..20 {
            assert_eq!(backend.answer(&format!("r{i}")).unwrap(), REFUSAL_TEXT);
        }
    }

    #[test]
    fn commodity_corruption_keeps_class() {
        let backend = MockBackend::new(oracle(300, "43212110").with_rate(HierarchyLevel::Commodity, 1.0)).unwrap();
        let gold = parse_code("43212110").unwrap();
        for i in 0..300 {
            let answer = backend.answer(&format!("r{i}")).unwrap();
            assert_eq!(answer.len(), 8);
            let pred = parse_code(&answer).unwrap();
            assert!(match_at(pred, gold, HierarchyLevel::Class));
            assert!(!match_at(pred, gold, HierarchyLevel::Commodity));
        }
    }

    #[test]
    fn segment_corruption_changes_segment_only() {
        let backend = MockBackend::new(oracle(100, "43212110").with_rate(HierarchyLevel::Segment, 1.0)).unwrap();
        for i in 0..100 {
            let answer = backend.answer(&format!("r{i}")).unwrap();
            assert_ne!(&answer[..2], "43");
            assert_eq!(&answer[2..], "212110");
        }
    }

    #[test]
    fn coarse_gold_stays_valid() {
        let config = MockOracleConfig::new([("a".to_string(), parse_code("4321").unwrap())], 1)
            .with_rate(HierarchyLevel::Class, 1.0)
            .with_rate(HierarchyLevel::Commodity, 1.0);
        let answer = MockBackend::new(config).unwrap().answer("a").unwrap();
        let code = parse_code(&answer).unwrap();
        assert_eq!(&answer[..4], "4321");
        assert_eq!(code.level(), HierarchyLevel::Commodity);
    }

    #[test]
    fn exact_mode_hits_count() {
        let config = MockOracleConfig { mode: CorruptionMode::Exact, ..oracle(200, "43212110") }
            .with_rate(HierarchyLevel::Commodity, 0.75);
        let backend = MockBackend::new(config).unwrap();
        let corrupted = (0..200).filter(|i| backend.answer(&format!("r{i}")).unwrap() != "43212110").count();
        assert_eq!(corrupted, 150);
    }

    #[test]
    fn bernoulli_rate_is_roughly_honoured() {
        let backend = MockBackend::new(oracle(4000, "43212110").with_rate(HierarchyLevel::Commodity, 0.3)).unwrap();
        let corrupted = (0..4000).filter(|i| backend.answer(&format!("r{i}")).unwrap() != "43212110").count();
        // binomial(4000, 0.3): sd ~ 29
        assert!((1050..=1350).contains(&corrupted), "{corrupted}");
    }

    #[test]
    fn rejects_bad_probabilities() {
        assert!(MockBackend::new(oracle(1, "43").with_rate(HierarchyLevel::Class, 1.5)).is_err());
        assert!(MockBackend::new(MockOracleConfig { refusal_rate: -0.1, ..oracle(1, "43") }).is_err());
    }

    #[test]
    fn answers_depend_on_seed() {
        let a = MockBackend::new(oracle(50, "43212110").with_rate(HierarchyLevel::Commodity, 1.0)).unwrap();
        let b = MockBackend::new(MockOracleConfig { seed: 43, ..oracle(50, "43212110") }.with_rate(HierarchyLevel::Commodity, 1.0))
            .unwrap();
        let differ = (0..50).filter(|i| a.answer(&format!("r{i}")).unwrap() != b.answer(&format!("r{i}")).unwrap()).count();
        assert!(differ > 40);
    }
}
