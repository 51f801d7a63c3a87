//! Just enough Wikitext parsing for generated articles: wikilinks (plain
//! and with trailing confidence scores), level-2 headings, categories,
//! infobox detection and markup-free word counts.
//!
//! Templates, tables and references are not interpreted.

use serde::{Deserialize, Serialize};

use crate::config::Strategy;
use crate::decimal::UnitDecimal;
use crate::types::Article;

/// One `[[...]]` occurrence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedLink {
    pub target: String,
    pub confidence: Option<UnitDecimal>,
    /// Calibrated strategy only: the link carried no parseable score.
    pub malformed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LinkExtraction {
    pub links: Vec<ExtractedLink>,
    /// Unbalanced or empty bracket fragments that were skipped.
    pub warnings: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedArticle {
    pub lead_present: bool,
    pub headings: Vec<String>,
    pub plain_links: Vec<String>,
    pub scored_links: Vec<(String, UnitDecimal)>,
    pub malformed_links: Vec<String>,
    pub categories: Vec<String>,
    pub has_infobox: bool,
}

/// Byte ranges of the inner text of every innermost `[[...]]` pair, plus
/// the number of skipped fragments.
fn bracket_spans(text: &str) -> (Vec<(usize, usize)>, usize) {
    let mut spans = Vec::new();
    let mut warnings = 0;
    let mut pos = 0;
    while let Some(rel) = text[pos..].find("[[") {
        let mut open = pos + rel;
        let Some(close_rel) = text[open + 2..].find("]]") else {
            warnings += 1;
            break;
        };
        let close = open + 2 + close_rel;
        if let Some(inner_rel) = text[open + 2..close].rfind("[[") {
            // An outer fragment was opened but never closed before this pair.
            warnings += 1;
            open = open + 2 + inner_rel;
        }
        spans.push((open + 2, close));
        pos = close + 2;
    }
    (spans, warnings)
}

fn is_category(inner: &str) -> bool {
    let trimmed = inner.trim_start();
    trimmed.get(..9).is_some_and(|p| p.eq_ignore_ascii_case("category:"))
}

/// Splits a trailing ` (d.dd)` score off `text`. The score needs at least
/// one whitespace character before the parenthesis and one or two
/// fractional digits.
fn split_score(text: &str) -> Option<(&str, UnitDecimal)> {
    let body = text.trim_end();
    let body = body.strip_suffix(')')?;
    let open = body.rfind('(')?;
    let number = &body[open + 1..];
    let prefix = &body[..open];
    if !prefix.ends_with(char::is_whitespace) || prefix.trim().is_empty() {
        return None;
    }
    let bytes = number.as_bytes();
    let well_formed = bytes.len() >= 3
        && bytes.len() <= 4
        && bytes[0].is_ascii_digit()
        && bytes[1] == b'.'
        && bytes[2..].iter().all(u8::is_ascii_digit);
    if !well_formed {
        return None;
    }
    let score = UnitDecimal::parse(number).ok()?;
    Some((prefix.trim_end(), score))
}

fn parse_link(inner: &str, strategy: Strategy) -> Option<ExtractedLink> {
    let (left, right) = match inner.split_once('|') {
        Some((l, r)) => (l, Some(r)),
        None => (inner, None),
    };
    match strategy {
        Strategy::Baseline => {
            let target = left.trim();
            (!target.is_empty()).then(|| ExtractedLink { target: target.to_string(), confidence: None, malformed: false })
        }
        Strategy::Calibrated => {
            let scored = split_score(left)
                .map(|(t, s)| (t, Some(s)))
                .or_else(|| right.and_then(split_score).map(|(_, s)| (left, Some(s))));
            let (target, confidence) = scored.unwrap_or((left, None));
            let target = target.trim();
            (!target.is_empty()).then(|| ExtractedLink {
                target: target.to_string(),
                confidence,
                malformed: confidence.is_none(),
            })
        }
    }
}

/// Extracts every wikilink except categories, in order of appearance,
/// keeping duplicates. Pipe links `[[A|B]]` yield `A`.
pub fn extract_links(text: &str, strategy: Strategy) -> LinkExtraction {
    let (spans, mut warnings) = bracket_spans(text);
    let mut links = Vec::new();
    for (start, end) in spans {
        let inner = &text[start..end];
        if is_category(inner) {
            continue;
        }
        match parse_link(inner, strategy) {
            Some(link) => links.push(link),
            None => warnings += 1,
        }
    }
    LinkExtraction { links, warnings }
}

fn heading_title(line: &str) -> Option<&str> {
    let line = line.trim();
    let inner = line.strip_prefix("==")?.strip_suffix("==")?;
    if inner.starts_with('=') || inner.ends_with('=') {
        return None;
    }
    let title = inner.trim();
    (!title.is_empty()).then_some(title)
}

fn find_ci(haystack: &str, needle: &str) -> Option<usize> {
    haystack.to_ascii_lowercase().find(&needle.to_ascii_lowercase())
}

/// Extracts headings, links, categories and infobox presence.
pub fn extract_structure(text: &str, strategy: Strategy) -> ParsedArticle {
    let headings: Vec<String> = text.lines().filter_map(heading_title).map(str::to_string).collect();

    let categories = bracket_spans(text)
        .0
        .into_iter()
        .map(|(s, e)| &text[s..e])
        .filter(|inner| is_category(inner))
        .map(|inner| {
            let name = &inner.trim_start()[9..];
            name.split('|').next().unwrap_or_default().trim().to_string()
        })
        .filter(|c| !c.is_empty())
        .collect();

    let first_bold = text.find("'''");
    let has_infobox = match (find_ci(text, "{{infobox"), first_bold) {
        (Some(ib), Some(bold)) => ib < bold,
        (Some(_), None) => true,
        _ => false,
    };

    let first_heading = text
        .lines()
        .scan(0usize, |offset, line| {
            let start = *offset;
            *offset += line.len() + 1;
            Some((start, line))
        })
        .find(|(_, line)| heading_title(line).is_some())
        .map(|(start, _)| start)
        .unwrap_or(text.len());
    let lead_present = !strip_markup(&text[..first_heading.min(text.len())]).trim().is_empty();

    let mut parsed = ParsedArticle { lead_present, headings, categories, has_infobox, ..Default::default() };
    for link in extract_links(text, strategy).links {
        match (strategy, link.confidence) {
            (Strategy::Baseline, _) => parsed.plain_links.push(link.target),
            (Strategy::Calibrated, Some(score)) => parsed.scored_links.push((link.target, score)),
            (Strategy::Calibrated, None) => parsed.malformed_links.push(link.target),
        }
    }
    parsed
}

/// True iff the article's level-2 headings equal its outline exactly.
pub fn outline_conformance(article: &Article) -> bool {
    let headings: Vec<String> =
        article.wikitext.lines().filter_map(heading_title).map(str::to_string).collect();
    headings == article.outline
}

fn remove_templates(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut depth = 0usize;
    let mut rest = text;
    while !rest.is_empty() {
        if rest.starts_with("{{") {
            depth += 1;
            rest = &rest[2..];
        } else if depth > 0 && rest.starts_with("}}") {
            depth -= 1;
            rest = &rest[2..];
        } else {
            let ch = rest.chars().next().expect("non-empty");
            if depth == 0 {
                out.push(ch);
            }
            rest = &rest[ch.len_utf8()..];
        }
    }
    out
}

fn remove_tags(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_tag = false;
    for ch in text.chars() {
        match ch {
            '<' => in_tag = true,
            '>' if in_tag => {
                in_tag = false;
                out.push(' ');
            }
            _ if !in_tag => out.push(ch),
            _ => {}
        }
    }
    out
}

/// Plain text of an article: templates and tags removed, links replaced by
/// their display text, categories dropped, bold/italic and heading markers
/// removed.
pub fn strip_markup(text: &str) -> String {
    let text = remove_tags(&remove_templates(text));
    let (spans, _) = bracket_spans(&text);
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for (start, end) in spans {
        out.push_str(&text[last..start - 2]);
        let inner = &text[start..end];
        if !is_category(inner) {
            let shown = inner.rsplit('|').next().unwrap_or(inner);
            let shown = split_score(shown).map(|(t, _)| t).unwrap_or(shown);
            out.push_str(shown.trim());
        }
        last = end + 2;
    }
    out.push_str(&text[last..]);
    out.lines()
        .map(|line| match heading_title(line) {
            Some(title) => title.to_string(),
            None => line.replace("'''", "").replace("''", ""),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Whitespace-token count of the markup-free text.
pub fn word_count(text: &str) -> u64 {
    strip_markup(text).split_whitespace().count() as u64
}
