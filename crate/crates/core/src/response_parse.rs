//! Extraction of a predicted code from free-text model output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::taxonomy::{parse_code, UnspscCode};

pub const DEFAULT_REFUSAL_PHRASES: [&str; 3] = ["insufficient information", "cannot determine", "unable to classify"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Outcome {
    Code { code: UnspscCode },
    Refusal,
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedPrediction {
    pub outcome: Outcome,
    /// Byte offsets of the matched token in `raw_text`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_span: Option<(usize, usize)>,
    pub raw_text: String,
}

impl ParsedPrediction {
    pub fn code(&self) -> Option<UnspscCode> {
        match self.outcome {
            Outcome::Code { code } => Some(code),
            _ => None,
        }
    }

    pub fn unparseable(raw_text: impl Into<String>) -> Self {
        Self { outcome: Outcome::Unparseable, matched_span: None, raw_text: raw_text.into() }
    }
}

/// A digit token: its byte span and its digits with separators removed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct DigitToken {
    pub start: usize,
    pub end: usize,
    pub digits: String,
}

/// Splits text into maximal digit tokens. Runs separated by a single `-` or
/// space join into one token when every run has an even length and the
/// joined length is at most 8, so `4321-2110` and `43 21 21 10` read as one code.
pub(crate) fn digit_tokens(text: &str) -> Vec<DigitToken> {
    let bytes = text.as_bytes();
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            runs.push((start, i));
        } else {
            i += 1;
        }
    }

    let mut tokens = Vec::new();
    let mut k = 0;
    while k < runs.len() {
        let (start, mut end) = runs[k];
        let mut parts = vec![runs[k]];
        let mut next = k + 1;
        while next < runs.len() {
            let (ns, ne) = runs[next];
            let separated = ns == end + 1 && matches!(bytes[end], b'-' | b' ');
            let total: usize = parts.iter().map(|(s, e)| e - s).sum::<usize>() + (ne - ns);
            let even = parts.iter().chain(std::iter::once(&runs[next])).all(|(s, e)| (e - s) % 2 == 0);
            if separated && even && total <= 8 {
                parts.push(runs[next]);
                end = ne;
                next += 1;
            } else {
                break;
            }
        }
        let digits = parts.iter().map(|&(s, e)| &text[s..e]).collect::<String>();
        tokens.push(DigitToken { start, end, digits });
        k = next;
    }
    tokens
}

/// Free-text parser with a configurable refusal-phrase list.
#[derive(Debug, Clone)]
pub struct ResponseParser {
    refusal_phrases: Vec<String>,
}

impl Default for ResponseParser {
    fn default() -> Self {
        Self::new(DEFAULT_REFUSAL_PHRASES.iter().map(|s| s.to_string()))
    }
}

impl ResponseParser {
    pub fn new<I: IntoIterator<Item = String>>(phrases: I) -> Self {
        let refusal_phrases = phrases
            .into_iter()
            .map(|p| p.trim().to_lowercase())
            .filter(|p| !p.is_empty())
            .collect();
        Self { refusal_phrases }
    }

    /// One phrase per line; blank lines and `#` comments are ignored.
    pub fn from_phrase_file(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::new(
            text.lines().filter(|l| !l.trim_start().starts_with('#')).map(str::to_string),
        ))
    }

    pub fn refusal_phrases(&self) -> &[String] {
        &self.refusal_phrases
    }

    pub fn extract(&self, text: &str) -> ParsedPrediction {
        let tokens = digit_tokens(text);
        if tokens.is_empty() {
            let lower = text.to_lowercase();
            let outcome = if self.refusal_phrases.iter().any(|p| lower.contains(p.as_str())) {
                Outcome::Refusal
            } else {
                Outcome::Unparseable
            };
            return ParsedPrediction { outcome, matched_span: None, raw_text: text.to_string() };
        }
        for token in &tokens {
            if !matches!(token.digits.len(), 2 | 4 | 6 | 8) {
                continue;
            }
            if let Ok(code) = parse_code(&token.digits) {
                return ParsedPrediction {
                    outcome: Outcome::Code { code },
                    matched_span: Some((token.start, token.end)),
                    raw_text: text.to_string(),
                };
            }
        }
        ParsedPrediction::unparseable(text)
    }
}

/// [`ResponseParser::extract`] with the default refusal phrases.
pub fn extract_code(text: &str) -> ParsedPrediction {
    ResponseParser::default().extract(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn code_of(text: &str) -> Option<String> {
        extract_code(text).code().map(|c| c.to_string())
    }

    #[test]
    fn contract_examples() {
        assert_eq!(code_of("43212110").as_deref(), Some("43212110"));
        assert_eq!(code_of("The appropriate UNSPSC code is 43211503.").as_deref(), Some("43211503"));
        assert_eq!(
            extract_code("There is insufficient information to determine a code.").outcome,
            Outcome::Refusal
        );
        assert_eq!(code_of("It could be 43211503 or 43212110.").as_deref(), Some("43211503"));
        assert_eq!(extract_code("Office supplies, general.").outcome, Outcome::Unparseable);
    }

    #[test]
    fn separators_and_spans() {
        let p = extract_code("Code: 4321-2110!");
        assert_eq!(p.code().unwrap().to_string(), "43212110");
        assert_eq!(p.matched_span, Some((6, 15)));
        assert_eq!(&p.raw_text[6..15], "4321-2110");
        assert_eq!(code_of("43 21 21 10").as_deref(), Some("43212110"));
        assert_eq!(code_of("43-21-21-10").as_deref(), Some("43212110"));
        // double separators do not join
        assert_eq!(code_of("4321--2110").as_deref(), Some("43210000"));
    }

    #[test]
    fn off_length_and_invalid_tokens_are_skipped() {
        assert_eq!(code_of("1234567 then 43211503").as_deref(), Some("43211503"));
        assert_eq!(code_of("00123456 or 31201512").as_deref(), Some("31201512"));
        assert_eq!(code_of("12005600"), None);
        assert_eq!(extract_code("4321211000").outcome, Outcome::Unparseable);
        // a short code is padded
        assert_eq!(code_of("Family 4321").as_deref(), Some("43210000"));
    }

    #[test]
    fn refusal_needs_absence_of_digits() {
        let hedged = extract_code("Insufficient information, but possibly 43211503.");
        assert_eq!(hedged.code().unwrap().to_string(), "43211503");
        assert_eq!(extract_code("Cannot determine; 3 candidates.").outcome, Outcome::Unparseable);
        assert_eq!(extract_code("I am UNABLE TO CLASSIFY this.").outcome, Outcome::Refusal);
    }

    #[test]
    fn custom_phrases() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        std::io::Write::write_all(&mut f, b"# comment\nnot enough detail\n\n").unwrap();
        let parser = ResponseParser::from_phrase_file(f.path()).unwrap();
        assert_eq!(parser.refusal_phrases(), ["not enough detail"]);
        assert_eq!(parser.extract("Not enough detail here").outcome, Outcome::Refusal);
        assert_eq!(parser.extract("insufficient information").outcome, Outcome::Unparseable);
    }

    #[test]
    fn serializes_with_kind_tag() {
        let p = extract_code("43212110");
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, r#"{"outcome":{"kind":"code","code":"43212110"},"matched_span":[0,8],"raw_text":"43212110"}"#);
        let back: ParsedPrediction = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }

    fn any_code() -> impl Strategy<Value = UnspscCode> {
        (1u8..=99, 1u8..=99, 1u8..=99, 1u8..=99, 0usize..4).prop_map(|(a, b, c, d, depth)| {
            let mut pairs = [a, b, c, d];
            for p in pairs.iter_mut().skip(depth + 1) {
                *p = 0;
            }
            UnspscCode::from_pairs(pairs).unwrap()
        })
    }

    proptest! {
        #[test]
        fn total_and_deterministic(s in "\\PC{0,60}") {
            let a = extract_code(&s);
            prop_assert_eq!(&a, &extract_code(&s));
            if let Outcome::Code { code } = a.outcome {
                let (start, end) = a.matched_span.unwrap();
                let digits: String = s[start..end].chars().filter(|c| c.is_ascii_digit()).collect();
                prop_assert_eq!(parse_code(&digits).unwrap(), code);
            } else {
                prop_assert!(a.matched_span.is_none());
            }
        }

        #[test]
        fn formatted_codes_round_trip(c in any_code()) {
            prop_assert_eq!(extract_code(&c.to_string()).code(), Some(c));
        }

        #[test]
        fn digit_free_affixes_do_not_change_code(c in any_code(), pre in "[a-zA-Z.,:!?()\n]{0,30}", post in "[a-zA-Z.,:!?()\n]{0,30}") {
            let text = format!("{pre} {c} {post}");
            prop_assert_eq!(extract_code(&text).code(), Some(c));
        }
    }
}
