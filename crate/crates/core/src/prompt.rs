//! Prompt templates and rendering into chat messages.
//!
//! Three built-in templates ship with the crate:
//!
//! * `p1`: a generic instruction in the system message, the item in the user message.
//! * `p2`: a cloze sentence the model completes, sent as a single user message.
//! * `p3`: the `p1` instruction followed by three worked examples, then the item.
//!
//! Placeholders are `{item_name}` and `{item_description}`. Item text is
//! substituted verbatim, without escaping.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::PurchaseRecord;

pub const P1_SYSTEM: &str = include_str!("../templates/p1_system.txt");
pub const P2_USER: &str = include_str!("../templates/p2_user.txt");
pub const P3_SYSTEM: &str = include_str!("../templates/p3_system.txt");
pub const ITEM_USER: &str = include_str!("../templates/item_user.txt");

/// Longest rendered message, in characters, before the description is cut.
pub const MAX_MESSAGE_CHARS: usize = 4000;

const NAME_SLOT: &str = "item_name";
const DESCRIPTION_SLOT: &str = "item_description";

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap());

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("unknown template id {0:?} (expected p1, p2 or p3)")]
    UnknownTemplateId(String),
    #[error("template {template} references unknown placeholder {{{placeholder}}}")]
    PlaceholderUnresolved { template: String, placeholder: String },
    #[error("template {0} has no {{item_name}} placeholder")]
    MissingNameSlot(String),
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    Instruction,
    Cloze,
    FewShot,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BuiltinTemplate {
    P1,
    P2,
    P3,
}

impl BuiltinTemplate {
    pub const ALL: [BuiltinTemplate; 3] = [BuiltinTemplate::P1, BuiltinTemplate::P2, BuiltinTemplate::P3];

    pub fn id(self) -> &'static str {
        match self {
            BuiltinTemplate::P1 => "p1",
            BuiltinTemplate::P2 => "p2",
            BuiltinTemplate::P3 => "p3",
        }
    }
}

impl FromStr for BuiltinTemplate {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "p1" => Ok(BuiltinTemplate::P1),
            "p2" => Ok(BuiltinTemplate::P2),
            "p3" => Ok(BuiltinTemplate::P3),
            _ => Err(PromptError::UnknownTemplateId(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub system_text: Option<String>,
    pub user_text: String,
    pub style: PromptStyle,
}

pub fn builtin_template(id: BuiltinTemplate) -> PromptTemplate {
    let (system_text, user_text, style) = match id {
        BuiltinTemplate::P1 => (Some(P1_SYSTEM), ITEM_USER, PromptStyle::Instruction),
        BuiltinTemplate::P2 => (None, P2_USER, PromptStyle::Cloze),
        BuiltinTemplate::P3 => (Some(P3_SYSTEM), ITEM_USER, PromptStyle::FewShot),
    };
    PromptTemplate {
        id: id.id().to_string(),
        system_text: system_text.map(str::to_string),
        user_text: user_text.to_string(),
        style,
    }
}

/// Looks a built-in template up by its textual id.
pub fn builtin_template_by_id(id: &str) -> Result<PromptTemplate, PromptError> {
    id.parse().map(builtin_template)
}

impl PromptTemplate {
    /// Loads a custom template. A line consisting of `---` splits the file
    /// into system text (before) and user text (after); without it the whole
    /// file is the user message. The template id is the file stem.
    pub fn from_file(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PromptError::Io { path: path.display().to_string(), message: e.to_string() })?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "custom".into());
        Self::custom(id, &text)
    }

    pub fn custom(id: impl Into<String>, text: &str) -> Result<Self, PromptError> {
        let id = id.into();
        let text = text.strip_suffix('\n').unwrap_or(text);
        let lines: Vec<&str> = text.split('\n').collect();
        let (system_text, user_text) = match lines.iter().position(|l| l.trim_end() == "---") {
            Some(split) => (Some(lines[..split].join("\n")), lines[split + 1..].join("\n")),
            None => (None, text.to_string()),
        };
        let template = PromptTemplate { id, system_text, user_text, style: PromptStyle::Custom };
        template.check()?;
        Ok(template)
    }

    /// Verifies every placeholder is known and the item name is referenced.
    pub fn check(&self) -> Result<(), PromptError> {
        let texts = self.system_text.iter().chain(std::iter::once(&self.user_text));
        let mut has_name = false;
        for text in texts {
            for cap in PLACEHOLDER.captures_iter(text) {
                match &cap[1] {
                    NAME_SLOT => has_name = true,
                    DESCRIPTION_SLOT => {}
                    other => {
                        return Err(PromptError::PlaceholderUnresolved {
                            template: self.id.clone(),
                            placeholder: other.to_string(),
                        })
                    }
                }
            }
        }
        if has_name {
            Ok(())
        } else {
            Err(PromptError::MissingNameSlot(self.id.clone()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub template_id: String,
    pub record_id: String,
    pub messages: Vec<Message>,
}

fn substitute(template_id: &str, text: &str, name: &str, description: &str) -> Result<String, PromptError> {
    let mut out = String::with_capacity(text.len() + name.len() + description.len());
    let mut last = 0;
    for cap in PLACEHOLDER.captures_iter(text) {
        let whole = cap.get(0).unwrap();
        out.push_str(&text[last..whole.start()]);
        match &cap[1] {
            NAME_SLOT => out.push_str(name),
            DESCRIPTION_SLOT => out.push_str(description),
            other => {
                return Err(PromptError::PlaceholderUnresolved {
                    template: template_id.to_string(),
                    placeholder: other.to_string(),
                })
            }
        }
        last = whole.end();
    }
    out.push_str(&text[last..]);
    Ok(out)
}

fn render_capped(template_id: &str, text: &str, record: &PurchaseRecord) -> Result<String, PromptError> {
    let full = substitute(template_id, text, &record.item_name, &record.item_description)?;
    let length = full.chars().count();
    let slots = PLACEHOLDER.captures_iter(text).filter(|c| &c[1] == DESCRIPTION_SLOT).count();
    if length <= MAX_MESSAGE_CHARS || slots == 0 {
        if length > MAX_MESSAGE_CHARS {
            log::warn!("record {}: message is {length} chars and has no description to cut", record.record_id);
        }
        return Ok(full);
    }
    let overflow = length - MAX_MESSAGE_CHARS;
    let cut_per_slot = overflow.div_ceil(slots);
    let keep = record.item_description.chars().count().saturating_sub(cut_per_slot);
    let description: String = record.item_description.chars().take(keep).collect();
    log::warn!(
        "record {}: description cut from {} to {keep} chars to fit {MAX_MESSAGE_CHARS}-char messages",
        record.record_id,
        record.item_description.chars().count()
    );
    substitute(template_id, text, &record.item_name, &description)
}

/// Instantiates `template` for one record.
pub fn render(template: &PromptTemplate, record: &PurchaseRecord) -> Result<RenderedPrompt, PromptError> {
    let mut messages = Vec::with_capacity(2);
    if let Some(system) = &template.system_text {
        messages.push(Message { role: Role::System, content: render_capped(&template.id, system, record)? });
    }
    messages.push(Message { role: Role::User, content: render_capped(&template.id, &template.user_text, record)? });
    Ok(RenderedPrompt { template_id: template.id.clone(), record_id: record.record_id.clone(), messages })
}

/// Hex SHA-256 digest identifying one request for caching.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(pub String);

impl CacheKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Digest over model, temperature and the ordered messages. Every field is
/// length-prefixed so no two distinct inputs share a byte stream.
pub fn prompt_digest(rendered: &RenderedPrompt, model: &str, temperature: f64) -> CacheKey {
    digest_messages(&rendered.messages, model, temperature)
}

pub fn digest_messages(messages: &[Message], model: &str, temperature: f64) -> CacheKey {
    let mut hasher = Sha256::new();
    let mut field = |bytes: &[u8]| {
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    };
    field(b"unspsc-chat-v1");
    field(model.as_bytes());
    // +0.0 and -0.0 are the same temperature
    let temperature = if temperature == 0.0 { 0.0 } else { temperature };
    field(&temperature.to_bits().to_le_bytes());
    field(&(messages.len() as u64).to_le_bytes());
    for m in messages {
        field(m.role.as_str().as_bytes());
        field(m.content.as_bytes());
    }
    CacheKey(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::parse_code;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn record(name: &str, description: &str) -> PurchaseRecord {
        PurchaseRecord {
            record_id: "r1".into(),
            item_name: name.into(),
            item_description: description.into(),
            gold_code: parse_code("43212110").unwrap(),
            source_row: 1,
        }
    }

    #[test]
    fn builtin_texts() {
        let p1 = builtin_template(BuiltinTemplate::P1);
        assert_eq!(
            p1.system_text.as_deref(),
            Some("You will receive a product name and description. Your task is to classify the product into the appropriate UNSPSC category. Provide your output as the UNSPSC code only.")
        );
        assert_eq!(p1.user_text, "Product Name: {item_name}\nDescription: {item_description}");

        let p2 = builtin_template(BuiltinTemplate::P2);
        assert!(p2.system_text.is_none());
        assert!(p2.user_text.starts_with("The appropriate UNSPSC code (a numerical code) for a product named"));
        assert!(p2.user_text.ends_with("is:"));
        assert!(p2.user_text.contains("'{item_name}'") && p2.user_text.contains("'{item_description}'"));

        let p3 = builtin_template(BuiltinTemplate::P3);
        let system = p3.system_text.unwrap();
        assert!(system.starts_with(P1_SYSTEM));
        for expected in ["Expected Output: 43212110", "Expected Output: 43211503", "Expected Output: 31201512"] {
            assert!(system.contains(expected), "{expected}");
        }
        assert!(system.contains("Product Name: Dell Latitude 7420\nDescription: Business laptop with 14-inch screen and Intel i7 processor."));
        assert_eq!(p3.style, PromptStyle::FewShot);

        for t in BuiltinTemplate::ALL {
            builtin_template(t).check().unwrap();
        }
        assert!(matches!(builtin_template_by_id("p4"), Err(PromptError::UnknownTemplateId(_))));
        assert_eq!(builtin_template_by_id("P2").unwrap().id, "p2");
    }

    #[test]
    fn cloze_renders_single_user_message() {
        let r = record("HP LaserJet Pro M404dn", "Laser printer, black and white, 40 pages per minute.");
        let rendered = render(&builtin_template(BuiltinTemplate::P2), &r).unwrap();
        assert_eq!(rendered.messages.len(), 1);
        assert_eq!(rendered.messages[0].role, Role::User);
        assert_eq!(
            rendered.messages[0].content,
            "The appropriate UNSPSC code (a numerical code) for a product named 'HP LaserJet Pro M404dn' described as 'Laser printer, black and white, 40 pages per minute.' is:"
        );
    }

    #[test]
    fn instruction_renders_system_then_user() {
        let r = record("Dell Latitude 7420", "Business laptop");
        let rendered = render(&builtin_template(BuiltinTemplate::P1), &r).unwrap();
        assert_eq!(rendered.messages[0], Message { role: Role::System, content: P1_SYSTEM.into() });
        assert_eq!(rendered.messages[1].role, Role::User);
        assert_eq!(rendered.messages[1].content, "Product Name: Dell Latitude 7420\nDescription: Business laptop");
        assert!(rendered.messages.iter().all(|m| !m.content.contains('{')));
        assert_eq!(rendered.template_id, "p1");
        assert_eq!(rendered.record_id, "r1");
    }

    #[test]
    fn apostrophes_are_not_escaped() {
        let r = record("3M Scotch 'Magic' Tape", "");
        let rendered = render(&builtin_template(BuiltinTemplate::P2), &r).unwrap();
        assert!(rendered.messages[0].content.contains("named '3M Scotch 'Magic' Tape' described as '' is:"));
    }

    #[test]
    fn long_descriptions_are_cut_to_cap() {
        let r = record("Widget", &"x".repeat(10_000));
        for t in BuiltinTemplate::ALL {
            let rendered = render(&builtin_template(t), &r).unwrap();
            for m in &rendered.messages {
                assert!(m.content.chars().count() <= MAX_MESSAGE_CHARS);
            }
            assert!(rendered.messages.last().unwrap().content.contains("Widget"));
        }
        let custom = PromptTemplate::custom("twice", "{item_name}: {item_description} / {item_description}").unwrap();
        let rendered = render(&custom, &r).unwrap();
        assert!(rendered.messages[0].content.chars().count() <= MAX_MESSAGE_CHARS);
    }

    #[test]
    fn custom_templates() {
        let t = PromptTemplate::custom("mine", "Classify.\n---\nItem: {item_name} ({item_description})\n").unwrap();
        assert_eq!(t.system_text.as_deref(), Some("Classify."));
        assert_eq!(t.user_text, "Item: {item_name} ({item_description})");
        let rendered = render(&t, &record("Tape", "roll")).unwrap();
        assert_eq!(rendered.messages[1].content, "Item: Tape (roll)");

        assert!(matches!(
            PromptTemplate::custom("bad", "{item_name} {item_colour}"),
            Err(PromptError::PlaceholderUnresolved { .. })
        ));
        assert!(matches!(PromptTemplate::custom("bad", "no slots"), Err(PromptError::MissingNameSlot(_))));
        // JSON-ish braces that are not identifiers stay literal
        let json = PromptTemplate::custom("json", "{item_name} -> {\"code\": 1}").unwrap();
        assert_eq!(render(&json, &record("A", "")).unwrap().messages[0].content, "A -> {\"code\": 1}");
    }

    #[test]
    fn unresolved_placeholder_at_render() {
        let t = PromptTemplate {
            id: "raw".into(),
            system_text: None,
            user_text: "{item_name} {sku}".into(),
            style: PromptStyle::Custom,
        };
        assert!(matches!(render(&t, &record("A", "")), Err(PromptError::PlaceholderUnresolved { .. })));
    }

    #[test]
    fn digest_examples() {
        let rendered = render(&builtin_template(BuiltinTemplate::P1), &record("Tape", "roll")).unwrap();
        let a = prompt_digest(&rendered, "gpt-4", 0.0);
        assert_eq!(a, prompt_digest(&rendered, "gpt-4", 0.0));
        assert_eq!(a.as_str().len(), 64);
        assert_ne!(a, prompt_digest(&rendered, "gpt-4", 0.5));
        assert_ne!(a, prompt_digest(&rendered, "gpt-4o", 0.0));
        assert_eq!(a, prompt_digest(&rendered, "gpt-4", -0.0));
        let mut changed = rendered.clone();
        changed.messages[1].content.push('.');
        assert_ne!(a, prompt_digest(&changed, "gpt-4", 0.0));
        let mut swapped = rendered.clone();
        swapped.messages[0].role = Role::User;
        assert_ne!(a, prompt_digest(&swapped, "gpt-4", 0.0));
    }

    #[test]
    fn digest_has_no_collisions_over_ten_thousand_prompts() {
        let templates: Vec<_> = BuiltinTemplate::ALL.iter().map(|&t| builtin_template(t)).collect();
        let mut keys = HashSet::new();
        let mut count = 0;
        for i in 0..3334 {
            for t in &templates {
                let r = record(&format!("Item {i}"), &format!("desc {}", i % 17));
                keys.insert(prompt_digest(&render(t, &r).unwrap(), "gpt-4", 0.0));
                count += 1;
            }
        }
        assert_eq!(count, 10_002);
        assert_eq!(keys.len(), count);
    }

    proptest! {
        #[test]
        fn rendering_is_total_and_keeps_name(name in "[^\\s{}][^{}]{0,40}", desc in "[^{}]{0,80}") {
            let r = record(&name, &desc);
            for t in BuiltinTemplate::ALL {
                let rendered = render(&builtin_template(t), &r).unwrap();
                prop_assert!(rendered.messages.iter().any(|m| m.content.contains(&name)));
                let leftover = rendered.messages.iter().any(|m| m.content.contains("{item_name}"));
                prop_assert!(!leftover);
                prop_assert!(rendered.messages.iter().any(|m| m.role == Role::User));
            }
        }
    }
}
