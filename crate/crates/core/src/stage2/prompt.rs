//! Prompt rewriting with object identifiers and per-object color words.
//!
//! Spans are half-open character ranges (`start..end`, counted in `char`s,
//! not bytes) into the context prompt.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IDENTIFIER: &str = "[*]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }
}

/// One `[*]` token shared by every object, or numbered `[*1]`, `[*2]`, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentifierStyle {
    #[default]
    Shared,
    PerObject,
}

impl IdentifierStyle {
    fn token(self, index: usize) -> String {
        match self {
            IdentifierStyle::Shared => IDENTIFIER.to_string(),
            IdentifierStyle::PerObject => format!("[*{}]", index + 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptOptions {
    pub identifier_style: IdentifierStyle,
    /// Build the target from the rewritten prompt ("A brown [*] dog") instead
    /// of the plain context ("A brown dog").
    pub target_keeps_identifiers: bool,
}

/// Spans sorted by start, checked for bounds and overlap.
fn sorted_spans(context: &str, spans: &[Span]) -> Result<Vec<Span>> {
    let len = context.chars().count();
    let mut sorted = spans.to_vec();
    sorted.sort();
    for s in &sorted {
        if s.start >= s.end || s.end > len {
            return Err(Error::InvalidSpan { start: s.start, end: s.end, len });
        }
    }
    for pair in sorted.windows(2) {
        if pair[1].start < pair[0].end {
            return Err(Error::OverlappingSpans(pair[1].start, pair[0].end));
        }
    }
    Ok(sorted)
}

/// Inserts `insert(i, span)` (when `Some`) before each span, left to right.
fn insert_before(context: &str, spans: &[Span], mut insert: impl FnMut(usize, Span) -> Option<String>) -> String {
    let chars: Vec<char> = context.chars().collect();
    let mut out = String::with_capacity(context.len() + 8 * spans.len());
    let mut pos = 0;
    for (i, s) in spans.iter().enumerate() {
        out.extend(&chars[pos..s.start]);
        if let Some(text) = insert(i, *s) {
            out.push_str(&text);
        }
        pos = s.start;
    }
    out.extend(&chars[pos..]);
    out
}

/// Text covered by `span`.
pub fn span_text(context: &str, span: Span) -> String {
    context.chars().skip(span.start).take(span.end - span.start).collect()
}

/// Puts `"[*] "` immediately before each object word.
pub fn rewrite_prompt(context: &str, spans: &[Span]) -> Result<String> {
    rewrite_prompt_with(context, spans, IdentifierStyle::Shared)
}

pub fn rewrite_prompt_with(context: &str, spans: &[Span], style: IdentifierStyle) -> Result<String> {
    let sorted = sorted_spans(context, spans)?;
    Ok(insert_before(context, &sorted, |i, _| Some(format!("{} ", style.token(i)))))
}

/// Puts `"<color> "` before every object that has a color assignment.
pub fn build_target_prompt(context: &str, spans: &[Span], colors: &BTreeMap<String, String>) -> Result<String> {
    build_target_prompt_with(context, spans, colors, PromptOptions::default())
}

pub fn build_target_prompt_with(
    context: &str,
    spans: &[Span],
    colors: &BTreeMap<String, String>,
    opts: PromptOptions,
) -> Result<String> {
    let sorted = sorted_spans(context, spans)?;
    let words: Vec<String> = sorted.iter().map(|s| span_text(context, *s)).collect();
    if let Some(unknown) = colors.keys().find(|k| !words.contains(k)) {
        return Err(Error::UnknownObject(unknown.clone()));
    }
    Ok(insert_before(context, &sorted, |i, _| {
        let color = colors.get(&words[i]).map(|c| format!("{} ", c.trim()));
        if opts.target_keeps_identifiers {
            Some(format!("{}{} ", color.unwrap_or_default(), opts.identifier_style.token(i)))
        } else {
            color
        }
    }))
}

/// Appends free text after a prompt, separated by one space.
pub fn with_suffix(prompt: &str, suffix: &str) -> String {
    let suffix = suffix.trim();
    if suffix.is_empty() {
        return prompt.to_string();
    }
    format!("{} {}", prompt.trim_end(), suffix)
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\'' || c == '-'
}

/// Spans of the first whole-word occurrence of each object phrase, in the
/// order given. Later objects skip text already claimed by earlier ones.
pub fn find_object_spans(context: &str, objects: &[String]) -> Result<Vec<Span>> {
    let chars: Vec<char> = context.chars().collect();
    let mut spans: Vec<Span> = Vec::with_capacity(objects.len());
    for obj in objects {
        let needle: Vec<char> = obj.trim().chars().collect();
        if needle.is_empty() {
            return Err(Error::UnknownObject(obj.clone()));
        }
        let found = (0..chars.len().saturating_sub(needle.len() - 1)).find(|&i| {
            let end = i + needle.len();
            chars[i..end] == needle[..]
                && (i == 0 || !is_word_char(chars[i - 1]))
                && (end == chars.len() || !is_word_char(chars[end]))
                && spans.iter().all(|s| end <= s.start || i >= s.end)
        });
        match found {
            Some(i) => spans.push(Span::new(i, i + needle.len())),
            None => return Err(Error::UnknownObject(obj.trim().to_string())),
        }
    }
    Ok(spans)
}

/// Splits `"dog, wooden bench"` into trimmed, non-empty object phrases.
pub fn parse_object_list(text: &str) -> Vec<String> {
    text.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

/// Parses `"dog=brown, wooden bench=purple"`.
pub fn parse_color_assignments(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (obj, color) = item
            .split_once('=')
            .map(|(o, c)| (o.trim(), c.trim()))
            .filter(|(o, c)| !o.is_empty() && !c.is_empty())
            .ok_or_else(|| Error::Config(format!("expected object=color, got {item:?}")))?;
        out.insert(obj.to_string(), color.to_string());
    }
    Ok(out)
}

/// Context prompt, its identifier rewrite, and the object spans both share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub context: String,
    pub rewritten: String,
    pub object_spans: Vec<Span>,
    #[serde(default)]
    pub options: PromptOptions,
}

impl PromptSet {
    pub fn new(context: &str, spans: Vec<Span>, options: PromptOptions) -> Result<Self> {
        let rewritten = rewrite_prompt_with(context, &spans, options.identifier_style)?;
        let mut object_spans = spans;
        object_spans.sort();
        Ok(Self { context: context.to_string(), rewritten, object_spans, options })
    }

    pub fn from_objects(context: &str, objects: &[String], options: PromptOptions) -> Result<Self> {
        Self::new(context, find_object_spans(context, objects)?, options)
    }

    pub fn objects(&self) -> Vec<String> {
        self.object_spans.iter().map(|s| span_text(&self.context, *s)).collect()
    }

    pub fn target(&self, colors: &BTreeMap<String, String>) -> Result<String> {
        build_target_prompt_with(&self.context, &self.object_spans, colors, self.options)
    }
}
