use std::collections::HashMap;

use chrono::Utc;
use serde::{Deserialize, Serialize};

use super::{Backend, LlmError, LlmRequest, LlmResponse, DEFAULT_MAX_OUTPUT_TOKENS};
use crate::cache_store::{CacheEntry, CacheStore};
use crate::ingest::PurchaseRecord;
use crate::par;
use crate::prompt::{prompt_digest, render, CacheKey, PromptTemplate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchParams {
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub parallelism: usize,
}

impl BatchParams {
    pub fn new(model: impl Into<String>, temperature: f64) -> Self {
        Self { model: model.into(), temperature, max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS, parallelism: 1 }
    }

    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawResult {
    pub record_id: String,
    pub cache_hit: bool,
    pub outcome: Result<LlmResponse, LlmError>,
}

fn from_cache(entry: CacheEntry) -> LlmResponse {
    LlmResponse {
        text: entry.response_text,
        finish_reason: entry.finish_reason,
        prompt_tokens: entry.prompt_tokens,
        completion_tokens: entry.completion_tokens,
        latency_ms: 0.0,
        backend_id: entry.backend_id,
    }
}

/// Classifies every record with one template at one temperature.
///
/// Returns one result per record, in input order. When `cache` is given it is
/// consulted before any backend call, records rendering to the same prompt
/// share a single call, and successful responses are written back. Per-record
/// failures are returned as data.
pub fn classify_batch(
    records: &[PurchaseRecord],
    template: &PromptTemplate,
    params: &BatchParams,
    backend: &dyn Backend,
    cache: Option<&CacheStore>,
) -> Vec<RawResult> {
    let prepared: Vec<Result<(LlmRequest, CacheKey), LlmError>> = records
        .iter()
        .map(|record| {
            let rendered = render(template, record).map_err(|e| LlmError::InvalidRequest(e.to_string()))?;
            let key = prompt_digest(&rendered, &params.model, params.temperature);
            let request = LlmRequest {
                model: params.model.clone(),
                messages: rendered.messages,
                temperature: params.temperature,
                max_output_tokens: params.max_output_tokens,
                record_id: Some(record.record_id.clone()),
            };
            request.validate()?;
            Ok((request, key))
        })
        .collect();

    let mut outcomes: Vec<Option<(bool, Result<LlmResponse, LlmError>)>> = vec![None; records.len()];
    // index of the record whose call answers each pending record
    let mut representative: Vec<Option<usize>> = vec![None; records.len()];
    let mut pending: Vec<usize> = Vec::new();
    let mut first_with_key: HashMap<&CacheKey, usize> = HashMap::new();

    for (i, prepared) in prepared.iter().enumerate() {
        match prepared {
            Err(e) => outcomes[i] = Some((false, Err(e.clone()))),
            Ok((_, key)) => {
                if let Some(cache) = cache {
                    if let Some(entry) = cache.get(key) {
                        outcomes[i] = Some((true, Ok(from_cache(entry))));
                        continue;
                    }
                    if let Some(&first) = first_with_key.get(key) {
                        representative[i] = Some(first);
                        continue;
                    }
                    first_with_key.insert(key, i);
                }
                pending.push(i);
            }
        }
    }

    let responses = par::map_ordered(&pending, params.parallelism.max(1), |&i| {
        let (request, _) = prepared[i].as_ref().expect("pending records rendered");
        backend.complete(request)
    });

    for (&i, response) in pending.iter().zip(responses) {
        if let (Some(cache), Ok(response)) = (cache, &response) {
            let (_, key) = prepared[i].as_ref().expect("pending records rendered");
            let entry = CacheEntry {
                key: key.clone(),
                response_text: response.text.clone(),
                finish_reason: response.finish_reason.clone(),
                prompt_tokens: response.prompt_tokens,
                completion_tokens: response.completion_tokens,
                backend_id: response.backend_id.clone(),
                created_at: Utc::now(),
            };
            if let Err(e) = cache.put(entry) {
                log::warn!("record {}: response not cached: {e}", records[i].record_id);
            }
        }
        outcomes[i] = Some((false, response));
    }
    for i in 0..records.len() {
        if let Some(first) = representative[i] {
            outcomes[i] = outcomes[first].clone();
        }
    }

    records
        .iter()
        .zip(outcomes)
        .map(|(record, outcome)| {
            let (cache_hit, outcome) = outcome.expect("every record resolved");
            RawResult { record_id: record.record_id.clone(), cache_hit, outcome }
        })
        .collect()
}
