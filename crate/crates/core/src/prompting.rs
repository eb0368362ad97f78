//! Prompt rendering from the frozen templates under `templates/`, and
//! parsing of model replies.
//!
//! Products are addressed positionally as `product1..productN` in session
//! order. Templates use `{{NAME}}` markers, substituted in a single pass so
//! that braces or markers inside item titles are emitted verbatim.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::chat::ChatMessage;
use crate::corpus::{Bundle, Session};
use crate::evaluator::ItemSet;
use crate::knowledge::{CompositeKnowledge, KnowledgeEntry, KnowledgeFormat};

pub const ZERO_SHOT_TEMPLATE: &str = include_str!("../templates/zero_shot.txt");
pub const REFLECT_COMPARE_TEMPLATE: &str = include_str!("../templates/reflect_compare.txt");
pub const REFLECT_REVIEW_TEMPLATE: &str = include_str!("../templates/reflect_review.txt");
pub const REFLECT_RULES_TEMPLATE: &str = include_str!("../templates/reflect_rules.txt");
pub const THOUGHT_TEMPLATE: &str = include_str!("../templates/thought.txt");
pub const ICL_TEMPLATE: &str = include_str!("../templates/icl.txt");

/// Appended to a prompt when the previous reply held no usable JSON.
pub const JSON_REASK_SUFFIX: &str = "\n\nPlease output valid JSON only.";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template {template} needs binding {name}")]
    MissingBinding { template: &'static str, name: String },
    #[error("no reflection step {0}; steps are 1 to 4")]
    NoSuchStep(u8),
    #[error("no JSON object found in reply: {raw:?}")]
    NoJson { raw: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    ZeroShot,
    ReflectCompare,
    ReflectReview,
    ReflectRules,
    Thought,
    Icl,
}

impl TemplateId {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::ZeroShot => "zero_shot",
            TemplateId::ReflectCompare => "reflect_compare",
            TemplateId::ReflectReview => "reflect_review",
            TemplateId::ReflectRules => "reflect_rules",
            TemplateId::Thought => "thought",
            TemplateId::Icl => "icl",
        }
    }

    pub fn text(self) -> &'static str {
        match self {
            TemplateId::ZeroShot => ZERO_SHOT_TEMPLATE,
            TemplateId::ReflectCompare => REFLECT_COMPARE_TEMPLATE,
            TemplateId::ReflectReview => REFLECT_REVIEW_TEMPLATE,
            TemplateId::ReflectRules => REFLECT_RULES_TEMPLATE,
            TemplateId::Thought => THOUGHT_TEMPLATE,
            TemplateId::Icl => ICL_TEMPLATE,
        }
    }

    /// Reflection chain step (1..=4) to template.
    pub fn reflection_step(step: u8) -> Result<TemplateId, PromptError> {
        match step {
            1 => Ok(TemplateId::ZeroShot),
            2 => Ok(TemplateId::ReflectCompare),
            3 => Ok(TemplateId::ReflectReview),
            4 => Ok(TemplateId::ReflectRules),
            other => Err(PromptError::NoSuchStep(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub messages: Vec<ChatMessage>,
    pub template_id: TemplateId,
    pub bindings: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl RenderedPrompt {
    /// The single user message carrying the prompt text.
    pub fn text(&self) -> &str {
        self.messages.last().map(|m| m.content.as_str()).unwrap_or("")
    }
}

/// Substitutes every `{{NAME}}` marker in one left-to-right pass.
pub fn render_template(
    template: TemplateId,
    bindings: &BTreeMap<String, String>,
) -> Result<String, PromptError> {
    let text = template.text();
    let mut out = String::with_capacity(text.len() + 256);
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        let Some(len) = rest[start + 2..].find("}}") else { break };
        let name = &rest[start + 2..start + 2 + len];
        if name.is_empty() || !name.bytes().all(|b| b.is_ascii_uppercase() || b == b'_') {
            out.push_str(&rest[..start + 2]);
            rest = &rest[start + 2..];
            continue;
        }
        let value = bindings.get(name).ok_or_else(|| PromptError::MissingBinding {
            template: template.as_str(),
            name: name.to_string(),
        })?;
        out.push_str(&rest[..start]);
        out.push_str(value);
        rest = &rest[start + 2 + len + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

fn prompt(template: TemplateId, bindings: BTreeMap<String, String>, warnings: Vec<String>) -> Result<RenderedPrompt, PromptError> {
    let text = render_template(template, &bindings)?;
    Ok(RenderedPrompt { messages: vec![ChatMessage::user(text)], template_id: template, bindings, warnings })
}

pub fn product_label(position: usize) -> String {
    format!("product{position}")
}

fn one_line(s: &str) -> String {
    s.replace(['\r', '\n'], " ")
}

/// `productN: category, title` per line, in session order.
pub fn product_lines(s: &Session) -> String {
    let mut out = String::new();
    for (k, item) in s.items.iter().enumerate() {
        if k > 0 {
            out.push('\n');
        }
        let _ = write!(out, "{}: {}, {}", product_label(k + 1), one_line(&item.category), one_line(&item.title));
    }
    out
}

fn zero_shot_bindings(s: &Session) -> BTreeMap<String, String> {
    let mut b = BTreeMap::new();
    b.insert("PRODUCTS".to_string(), format!("{{\n{}\n}}", product_lines(s)));
    b
}

pub fn render_zero_shot(s: &Session) -> RenderedPrompt {
    prompt(TemplateId::ZeroShot, zero_shot_bindings(s), Vec::new()).expect("zero-shot bindings complete")
}

/// The KNOWLEDGE block: headed sections in composite order, empty ones omitted.
pub fn render_knowledge(k: &CompositeKnowledge) -> String {
    let mut blocks = Vec::new();
    for section in &k.sections {
        if section.entries.is_empty() {
            continue;
        }
        let mut block = String::from(match section.format {
            KnowledgeFormat::Pattern => "Patterns:",
            KnowledgeFormat::Rule => "Rules:",
            KnowledgeFormat::Thought => "Thoughts:",
        });
        let mut n = 0;
        for e in &section.entries {
            match e {
                KnowledgeEntry::Pattern(p) => {
                    let _ = write!(block, "\n[{}]", p.categories.join(", "));
                }
                KnowledgeEntry::Rule(_) | KnowledgeEntry::Thought(_) => {
                    n += 1;
                    let _ = write!(block, "\n{n}. {}", one_line(e.text().unwrap_or("")));
                }
            }
        }
        blocks.push(block);
    }
    blocks.join("\n\n")
}

/// ICL prompt; falls back to zero-shot (with a warning) when no knowledge applies.
pub fn render_icl(s: &Session, knowledge: &CompositeKnowledge) -> RenderedPrompt {
    if knowledge.is_empty() {
        let mut p = render_zero_shot(s);
        p.warnings.push(format!("session {}: no knowledge retrieved, using zero-shot prompt", s.id));
        return p;
    }
    let mut b = BTreeMap::new();
    b.insert("KNOWLEDGE".to_string(), render_knowledge(knowledge));
    b.insert("PRODUCTS".to_string(), product_lines(s));
    prompt(TemplateId::Icl, b, Vec::new()).expect("icl bindings complete")
}

/// Answer-format JSON for labelled bundles given as item-id lists.
pub fn serialize_labelled(s: &Session, bundles: &[(String, Vec<String>)]) -> String {
    let mut out = String::from("{");
    for (k, (label, items)) in bundles.iter().enumerate() {
        if k > 0 {
            out.push_str(", ");
        }
        out.push_str(&json_string(label));
        out.push_str(": [");
        let mut positions: Vec<usize> = items.iter().filter_map(|id| s.position_of(id)).collect();
        positions.sort_unstable();
        for (j, p) in positions.iter().enumerate() {
            if j > 0 {
                out.push_str(", ");
            }
            out.push_str(&json_string(&product_label(*p)));
        }
        out.push(']');
    }
    out.push('}');
    out
}

/// `{"bundle1": ["product1", ...], ...}` with bundles numbered in order.
pub fn serialize_bundles(s: &Session, bundles: &[ItemSet]) -> String {
    let labelled: Vec<(String, Vec<String>)> = bundles
        .iter()
        .enumerate()
        .map(|(k, b)| (format!("bundle{}", k + 1), b.iter().cloned().collect()))
        .collect();
    serialize_labelled(s, &labelled)
}

pub fn serialize_ground_truth(s: &Session) -> String {
    let sets: Vec<ItemSet> = s.bundles.iter().map(Bundle::item_set).collect();
    serialize_bundles(s, &sets)
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

/// Bindings for reflection step 2.
pub fn compare_bindings(s: &Session, detected: &[ItemSet]) -> BTreeMap<String, String> {
    let mut b = BTreeMap::new();
    b.insert("CORRECT_BUNDLES".to_string(), serialize_ground_truth(s));
    b.insert("DETECTED_BUNDLES".to_string(), serialize_bundles(s, detected));
    b
}

/// Step 1 needs `PRODUCTS` (see [`render_zero_shot`]); step 2 needs
/// `CORRECT_BUNDLES` and `DETECTED_BUNDLES`; steps 3 and 4 take none.
pub fn render_reflection_step(
    step: u8,
    bindings: &BTreeMap<String, String>,
) -> Result<RenderedPrompt, PromptError> {
    let template = TemplateId::reflection_step(step)?;
    prompt(template, bindings.clone(), Vec::new())
}

pub fn render_thought_prompt(s: &Session) -> RenderedPrompt {
    let mut warnings = Vec::new();
    let mut products = String::from("{");
    for (k, item) in s.items.iter().enumerate() {
        if k > 0 {
            products.push_str(", ");
        }
        let _ = write!(
            products,
            "{}: {{\"title\": {}, \"category\": {}}}",
            json_string(&product_label(k + 1)),
            json_string(&item.title),
            json_string(&item.category)
        );
    }
    products.push('}');

    let mut bundles = String::from("{");
    for (k, b) in s.bundles.iter().enumerate() {
        if k > 0 {
            bundles.push_str(", ");
        }
        let mut positions: Vec<usize> = b.item_ids.iter().filter_map(|id| s.position_of(id)).collect();
        positions.sort_unstable();
        let group: Vec<String> = positions.iter().map(|p| json_string(&product_label(*p))).collect();
        let intent = match b.intent.as_deref() {
            Some(i) if !i.trim().is_empty() => i,
            _ => {
                warnings.push(format!("session {}: bundle {} has no intent", s.id, b.id));
                ""
            }
        };
        let _ = write!(
            bundles,
            "{}: {{\"group\": [{}], \"intent\": {}}}",
            json_string(&format!("bundle{}", k + 1)),
            group.join(", "),
            json_string(intent)
        );
    }
    bundles.push('}');

    let mut b = BTreeMap::new();
    b.insert("PRODUCTS".to_string(), products);
    b.insert("BUNDLES".to_string(), bundles);
    prompt(TemplateId::Thought, b, warnings).expect("thought bindings complete")
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParsedBundles {
    pub bundles: Vec<ItemSet>,
    pub warnings: Vec<String>,
}

/// Content of the first fenced code block, if any.
fn strip_fences(raw: &str) -> Option<&str> {
    let start = raw.find("```")?;
    let after = &raw[start + 3..];
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
    let body = &after[body_start..];
    let end = body.find("```").unwrap_or(body.len());
    Some(&body[..end])
}

/// First balanced `{...}` span, honouring quoted strings.
fn first_object(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    let mut from = 0;
    while let Some(rel) = text[from..].find('{') {
        let start = from + rel;
        let mut depth = 0usize;
        let mut quote: Option<u8> = None;
        let mut escape = false;
        for (i, &b) in bytes[start..].iter().enumerate() {
            if let Some(q) = quote {
                if escape {
                    escape = false;
                } else if b == b'\\' {
                    escape = true;
                } else if b == q {
                    quote = None;
                }
                continue;
            }
            match b {
                b'"' | b'\'' => quote = Some(b),
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(&text[start..start + i + 1]);
                    }
                }
                _ => {}
            }
        }
        // Unbalanced from this brace (e.g. an apostrophe opened a fake
        // string); retry from the next one.
        from = start + 1;
    }
    None
}

fn parse_object(candidate: &str, warnings: &mut Vec<String>) -> Option<Map<String, Value>> {
    if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(candidate) {
        return Some(map);
    }
    if !candidate.contains('"') {
        let repaired = candidate.replace('\'', "\"");
        if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&repaired) {
            warnings.push("reply used single-quoted JSON".to_string());
            return Some(map);
        }
    }
    None
}

/// Locates and parses the JSON object in a model reply, tolerating code
/// fences, surrounding prose and single-quoted keys.
pub fn extract_json_object(raw: &str) -> Result<(Map<String, Value>, Vec<String>), PromptError> {
    let mut warnings = Vec::new();
    let mut candidates: Vec<&str> = Vec::new();
    if let Some(body) = strip_fences(raw) {
        candidates.extend(first_object(body));
    }
    candidates.extend(first_object(raw));
    for c in candidates {
        if let Some(map) = parse_object(c, &mut warnings) {
            return Ok((map, warnings));
        }
    }
    Err(PromptError::NoJson { raw: raw.to_string() })
}

/// Trailing number of a key such as `bundle3`, `Bundle 3` or `rule_3`.
fn key_number(key: &str) -> Option<u64> {
    let digits: String = key.chars().rev().take_while(char::is_ascii_digit).collect();
    if digits.is_empty() {
        return None;
    }
    digits.chars().rev().collect::<String>().parse().ok()
}

fn bundle_key_number(key: &str) -> Option<u64> {
    let k = key.trim().to_ascii_lowercase();
    let rest = k.strip_prefix("bundle")?;
    let rest = rest.trim_start_matches([' ', '_', '-']);
    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    key_number(rest)
}

fn product_position(v: &Value) -> Option<usize> {
    let s = v.as_str()?.trim().to_ascii_lowercase();
    let rest = s.strip_prefix("product")?.trim_start_matches([' ', '_', '-']);
    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    rest.parse().ok()
}

/// Parses a bundle reply against `s`. Invalid bundles are dropped with a
/// warning rather than repaired.
pub fn parse_bundle_json(raw: &str, s: &Session) -> Result<ParsedBundles, PromptError> {
    let (map, mut warnings) = extract_json_object(raw)?;
    let mut keyed: Vec<(u64, String, Value)> = Vec::new();
    for (key, value) in map {
        match bundle_key_number(&key) {
            Some(n) => keyed.push((n, key, value)),
            None => warnings.push(format!("{key}: not a bundle key, ignored")),
        }
    }
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));

    let mut seen: BTreeSet<ItemSet> = BTreeSet::new();
    let mut bundles = Vec::new();
    'outer: for (_, key, value) in keyed {
        let Value::Array(values) = value else {
            warnings.push(format!("{key}: value is not a list, dropped"));
            continue;
        };
        let mut set = ItemSet::new();
        for v in &values {
            let item = product_position(v).and_then(|p| p.checked_sub(1)).and_then(|p| s.items.get(p));
            match item {
                Some(item) => {
                    set.insert(item.id.clone());
                }
                None => {
                    warnings.push(format!("{key}: unknown product id {v}, dropped"));
                    continue 'outer;
                }
            }
        }
        if set.len() < 2 {
            warnings.push(format!("{key}: fewer than 2 products, dropped"));
            continue;
        }
        if !seen.insert(set.clone()) {
            warnings.push(format!("{key}: duplicate bundle, dropped"));
            continue;
        }
        bundles.push(set);
    }
    Ok(ParsedBundles { bundles, warnings })
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.trim().to_string(),
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(value_text).filter(|s| !s.is_empty()).collect();
            parts.join(" ")
        }
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

/// Rules from the final reflection step, `{"rule number": ["rule description"]}`,
/// ordered by the numeric part of their keys.
pub fn parse_rules(raw: &str) -> Result<Vec<String>, PromptError> {
    let (map, _) = extract_json_object(raw)?;
    let mut rules: Vec<(Option<u64>, String, String)> = map
        .into_iter()
        .map(|(k, v)| (key_number(&k), k, value_text(&v)))
        .filter(|(_, _, text)| !text.is_empty())
        .collect();
    rules.sort_by(|a, b| match (a.0, b.0) {
        (Some(x), Some(y)) => x.cmp(&y).then_with(|| a.1.cmp(&b.1)),
        (Some(_), None) => core::cmp::Ordering::Less,
        (None, Some(_)) => core::cmp::Ordering::Greater,
        (None, None) => a.1.cmp(&b.1),
    });
    Ok(rules.into_iter().map(|(_, _, t)| t).collect())
}

/// Thought reply `{"bundle1": "...", ...}` as (bundle number, insight) pairs.
pub fn parse_thoughts(raw: &str) -> Result<Vec<(u64, String)>, PromptError> {
    let (map, _) = extract_json_object(raw)?;
    let mut out: Vec<(u64, String)> = map
        .into_iter()
        .filter_map(|(k, v)| Some((bundle_key_number(&k)?, value_text(&v))))
        .filter(|(_, t)| !t.is_empty())
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::*;
    use crate::knowledge::{KnowledgeSection, RuleKnowledge};
    use crate::pattern::Pattern;
    use crate::corpus::Domain;
    use proptest::prelude::*;

    fn three() -> Session {
        session("s", &[("a", "c1"), ("b", "c2"), ("c", "c3")], vec![bundle("b1", &["a", "b"])])
    }

    fn ids(items: &[&str]) -> ItemSet {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn templates_carry_no_trailing_newline() {
        for t in [ZERO_SHOT_TEMPLATE, REFLECT_COMPARE_TEMPLATE, REFLECT_REVIEW_TEMPLATE, REFLECT_RULES_TEMPLATE, THOUGHT_TEMPLATE, ICL_TEMPLATE] {
            assert!(!t.ends_with('\n'));
        }
    }

    #[test]
    fn zero_shot_lists_products() {
        let p = render_zero_shot(&three());
        assert!(p.text().contains("{\nproduct1: c1, title of a\nproduct2: c2, title of b\nproduct3: c3, title of c\n}, identify bundles where"));
        assert_eq!(p, render_zero_shot(&three()));
        assert_eq!(p.messages.len(), 1);
    }

    #[test]
    fn braces_in_titles_are_verbatim() {
        let mut s = three();
        s.items[0].title = "Case {{KNOWLEDGE}} {x}".into();
        let p = render_zero_shot(&s);
        assert!(p.text().contains("product1: c1, Case {{KNOWLEDGE}} {x}\n"));
    }

    #[test]
    fn icl_sections() {
        let s = three();
        let rules = CompositeKnowledge {
            sections: vec![KnowledgeSection {
                format: KnowledgeFormat::Rule,
                entries: vec![
                    KnowledgeEntry::Rule(RuleKnowledge { text: "first".into(), source_session_id: "x".into(), domain: Domain::Food }),
                    KnowledgeEntry::Rule(RuleKnowledge { text: "second".into(), source_session_id: "x".into(), domain: Domain::Food }),
                ],
            }],
        };
        let p = render_icl(&s, &rules);
        assert_eq!(p.template_id, TemplateId::Icl);
        assert!(p.text().contains("KNOWLEDGE:\nRules:\n1. first\n2. second\n\nProducts:\nproduct1"));

        let patterns = CompositeKnowledge {
            sections: vec![
                KnowledgeSection { format: KnowledgeFormat::Pattern, entries: vec![KnowledgeEntry::Pattern(Pattern::new(["c1", "c2"], 2))] },
                KnowledgeSection { format: KnowledgeFormat::Rule, entries: vec![] },
            ],
        };
        assert_eq!(render_knowledge(&patterns), "Patterns:\n[c1, c2]");

        let fallback = render_icl(&s, &CompositeKnowledge::default());
        assert_eq!(fallback.template_id, TemplateId::ZeroShot);
        assert_eq!(fallback.warnings.len(), 1);
    }

    #[test]
    fn reflection_steps() {
        let s = three();
        let b = compare_bindings(&s, &[ids(&["b", "c"])]);
        let p = render_reflection_step(2, &b).unwrap();
        assert!(p.text().contains("Correct bundles: {\"bundle1\": [\"product1\", \"product2\"]}. Your answers: {\"bundle1\": [\"product2\", \"product3\"]}."));
        assert_eq!(render_reflection_step(4, &BTreeMap::new()).unwrap().text(), REFLECT_RULES_TEMPLATE);
        assert_eq!(render_reflection_step(5, &BTreeMap::new()).unwrap_err(), PromptError::NoSuchStep(5));
        assert!(matches!(
            render_reflection_step(2, &BTreeMap::new()),
            Err(PromptError::MissingBinding { .. })
        ));
    }

    #[test]
    fn thought_prompt_and_missing_intent() {
        let mut s = three();
        let p = render_thought_prompt(&s);
        assert!(p.text().contains("{\"bundle1\": {\"group\": [\"product1\", \"product2\"], \"intent\": \"intent b1\"}}"));
        assert!(p.warnings.is_empty());
        s.bundles[0].intent = None;
        let p = render_thought_prompt(&s);
        assert!(p.text().contains("\"intent\": \"\"}"));
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn parse_plain_and_fenced() {
        let s = three();
        let raw = r#"{"bundle1":["product1","product2"]}"#;
        let parsed = parse_bundle_json(raw, &s).unwrap();
        assert_eq!(parsed.bundles, vec![ids(&["a", "b"])]);
        let fenced = format!("Sure!\n```json\n{raw}\n```\nDone.");
        assert_eq!(parse_bundle_json(&fenced, &s).unwrap().bundles, parsed.bundles);
        let single = "{'bundle1': ['product1', 'product3']}";
        assert_eq!(parse_bundle_json(single, &s).unwrap().bundles, vec![ids(&["a", "c"])]);
    }

    #[test]
    fn parse_drops_invalid_bundles() {
        let s = three();
        let raw = r#"{"bundle1":["product1"],"bundle2":["product2","product9"]}"#;
        let parsed = parse_bundle_json(raw, &s).unwrap();
        assert!(parsed.bundles.is_empty());
        assert_eq!(parsed.warnings.len(), 2);
        assert!(matches!(parse_bundle_json("no json here", &s), Err(PromptError::NoJson { .. })));
    }

    #[test]
    fn parse_orders_keys_numerically_and_dedups() {
        let s = session("s", &(0..12).map(|k| (["i0","i1","i2","i3","i4","i5","i6","i7","i8","i9","i10","i11"][k], "c")).collect::<Vec<_>>(), vec![]);
        let raw = r#"{"bundle10":["product1","product2"],"bundle2":["product3","product4"],"bundle3":["product4","product3"]}"#;
        let parsed = parse_bundle_json(raw, &s).unwrap();
        assert_eq!(parsed.bundles, vec![ids(&["i2", "i3"]), ids(&["i0", "i1"])]);
        assert_eq!(parsed.warnings.len(), 1);
    }

    #[test]
    fn rule_and_thought_replies() {
        let rules = parse_rules(r#"{"rule 2": ["Second."], "rule 1": ["First", "part."], "rule 10": "Tenth."}"#).unwrap();
        assert_eq!(rules, vec!["First part.", "Second.", "Tenth."]);
        assert!(parse_rules("{}").unwrap().is_empty());
        assert!(parse_rules("nothing").is_err());
        let thoughts = parse_thoughts("```\n{\"bundle2\": \"b\", \"bundle1\": \"a\"}\n```").unwrap();
        assert_eq!(thoughts, vec![(1, "a".to_string()), (2, "b".to_string())]);
    }

    proptest! {
        #[test]
        fn parse_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
            let s = three();
            let text = String::from_utf8_lossy(&bytes);
            let _ = parse_bundle_json(&text, &s);
            let _ = parse_rules(&text);
        }

        #[test]
        fn parse_never_panics_on_jsonish(text in r#"[{}\[\]"',:a-z0-9 `\n\\]{0,80}"#) {
            let _ = parse_bundle_json(&text, &three());
        }

        #[test]
        fn serialize_then_parse_is_identity(masks in prop::collection::vec(1u16..(1 << 8), 0..5)) {
            let items: Vec<(String, String)> = (0..8).map(|k| (format!("it{k}"), format!("c{k}"))).collect();
            let refs: Vec<(&str, &str)> = items.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
            let s = session("s", &refs, vec![]);
            let mut seen = BTreeSet::new();
            let bundles: Vec<ItemSet> = masks
                .iter()
                .map(|m| (0..8).filter(|k| m & (1 << k) != 0).map(|k| format!("it{k}")).collect::<ItemSet>())
                .filter(|b| b.len() >= 2 && seen.insert(b.clone()))
                .collect();
            let text = serialize_bundles(&s, &bundles);
            let parsed = parse_bundle_json(&text, &s).unwrap();
            prop_assert_eq!(parsed.bundles, bundles);
            prop_assert!(parsed.warnings.is_empty());
        }
    }
}
