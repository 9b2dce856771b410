//! Tokenization with exact character offsets, the paragraph / sentence /
//! exact-span splitting strategies, and the projection of character spans
//! onto binary token labels and back.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Article, ClassifiedSample, Span, TcLabel};
use crate::error::{Error, Result};

/// Default cap on the number of real tokens per segment.
pub const DEFAULT_MAX_TOKENS: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    /// Character offsets into the owning article.
    pub start: usize,
    pub end: usize,
}

impl Token {
    /// A single non-alphanumeric character.
    pub fn is_punctuation(&self) -> bool {
        let mut chars = self.surface.chars();
        matches!((chars.next(), chars.next()), (Some(c), None) if !c.is_alphanumeric())
    }
}

/// Surface → id mapping with reserved special ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    surfaces: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;
    pub const MASK: u32 = 2;
    pub const CLS: u32 = 3;
    pub const SEP: u32 = 4;
    /// Ids below this value never come from text.
    pub const RESERVED: u32 = 5;

    const SPECIAL: [&'static str; 5] = ["[PAD]", "[UNK]", "[MASK]", "[CLS]", "[SEP]"];
    const HEADER: &'static str = "#propspan-vocab v1\n#reserved pad=0 unk=1 mask=2 cls=3 sep=4\n";

    pub fn from_surfaces(surfaces: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = Self::SPECIAL.iter().map(|s| s.to_string()).collect();
        let mut ids: HashMap<String, u32> = all
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        for s in surfaces {
            if s.is_empty() || s.contains('\n') || ids.contains_key(&s) {
                continue;
            }
            ids.insert(s.clone(), all.len() as u32);
            all.push(s);
        }
        Self { surfaces: all, ids }
    }

    /// Keeps the `max_size - RESERVED` most frequent surfaces produced by
    /// `tokenize` over `texts`; frequency ties are broken lexicographically.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        tokenize: impl Fn(&str) -> Vec<Token>,
        max_size: usize,
    ) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *counts.entry(tok.surface).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = max_size.saturating_sub(Self::RESERVED as usize);
        Self::from_surfaces(ranked.into_iter().take(room).map(|(s, _)| s))
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, surface: &str) -> u32 {
        self.ids.get(surface).copied().unwrap_or(Self::UNK)
    }

    pub fn surface(&self, id: u32) -> Option<&str> {
        self.surfaces.get(id as usize).map(String::as_str)
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surfaces
    }

    /// Serializes as a short `#` header followed by one surface per line;
    /// the line number (from 0, after the header) is the id.
    pub fn to_file_string(&self) -> String {
        let mut out = String::from(Self::HEADER);
        for s in &self.surfaces {
            out.push_str(s);
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(content: &str) -> Result<Self> {
        let mut lines = content.lines();
        let mut header = Vec::new();
        let mut body = Vec::new();
        for line in lines.by_ref() {
            if let Some(h) = line.strip_prefix('#') {
                header.push(h);
            } else {
                body.push(line);
                break;
            }
        }
        body.extend(lines);
        if header.first().map(|h| h.trim()) != Some("propspan-vocab v1") {
            return Err(Error::Format {
                file: "vocabulary".into(),
                reason: "missing `#propspan-vocab v1` header".into(),
            });
        }
        if body.len() < Self::RESERVED as usize
            || body[..Self::RESERVED as usize] != Self::SPECIAL[..]
        {
            return Err(Error::Format {
                file: "vocabulary".into(),
                reason: "the first five entries must be the reserved specials".into(),
            });
        }
        let vocab = Self::from_surfaces(body[Self::RESERVED as usize..].iter().map(|s| s.to_string()));
        if vocab.len() != body.len() {
            return Err(Error::Format {
                file: "vocabulary".into(),
                reason: "duplicate or empty surface".into(),
            });
        }
        Ok(vocab)
    }
}

/// Text → tokens with article-relative character offsets, plus the id mapping
/// the encoder consumes. Implementations are immutable once built.
pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<Token>;

    fn vocab(&self) -> &Vocab;

    fn ids(&self, tokens: &[Token]) -> Vec<u32> {
        tokens.iter().map(|t| self.vocab().id(&t.surface)).collect()
    }
}

/// Letter/digit runs become lowercased word tokens, every other
/// non-whitespace character is a token of its own.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut word: Option<(usize, String)> = None;
    let mut pos = 0;
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.get_or_insert_with(|| (pos, String::new()))
                .1
                .extend(c.to_lowercase());
        } else {
            if let Some((start, surface)) = word.take() {
                tokens.push(Token { surface, start, end: pos });
            }
            if !c.is_whitespace() {
                tokens.push(Token {
                    surface: c.to_string(),
                    start: pos,
                    end: pos + 1,
                });
            }
        }
        pos += 1;
    }
    if let Some((start, surface)) = word {
        tokens.push(Token { surface, start, end: pos });
    }
    tokens
}

/// The default [`Tokenizer`]: [`tokenize`] plus a corpus-built vocabulary.
#[derive(Debug, Clone)]
pub struct RuleTokenizer {
    vocab: Vocab,
}

impl RuleTokenizer {
    pub fn new(vocab: Vocab) -> Self {
        Self { vocab }
    }

    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_vocab: usize) -> Self {
        Self::new(Vocab::build(texts, tokenize, max_vocab))
    }
}

impl Tokenizer for RuleTokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token> {
        tokenize(text)
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }
}

/// A contiguous slice of an article with its tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub article_id: u32,
    pub start: usize,
    pub end: usize,
    pub tokens: Vec<Token>,
}

impl Segment {
    fn from_tokens(article_id: u32, tokens: Vec<Token>) -> Self {
        let start = tokens.first().map_or(0, |t| t.start);
        let end = tokens.last().map_or(0, |t| t.end);
        Self {
            article_id,
            start,
            end,
            tokens,
        }
    }

    pub fn span(&self) -> Option<Span> {
        Span::new(self.start, self.end).ok()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    Paragraph,
    Sentence,
}

impl SplitStrategy {
    /// Row-label suffix: `ps` or `ss`.
    pub fn short_name(self) -> &'static str {
        match self {
            SplitStrategy::Paragraph => "ps",
            SplitStrategy::Sentence => "ss",
        }
    }
}

impl fmt::Display for SplitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitStrategy::Paragraph => "paragraph",
            SplitStrategy::Sentence => "sentence",
        })
    }
}

impl FromStr for SplitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paragraph" | "ps" => Ok(SplitStrategy::Paragraph),
            "sentence" | "ss" => Ok(SplitStrategy::Sentence),
            other => Err(Error::Contract(format!(
                "unknown split strategy `{other}` (expected paragraph or sentence)"
            ))),
        }
    }
}

fn is_newline(c: char) -> bool {
    c == '\n' || c == '\r'
}

/// Character ranges of the text between newline runs.
fn paragraph_ranges(article: &Article) -> Vec<(usize, usize)> {
    let mut ranges = Vec::new();
    let mut start = None;
    for (i, c) in article.chars_in(0, article.len()).enumerate() {
        match (is_newline(c), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                ranges.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        ranges.push((s, article.len()));
    }
    ranges
}

fn tokenize_range(article: &Article, tok: &dyn Tokenizer, start: usize, end: usize) -> Vec<Token> {
    let text = article.slice(start, end).expect("range within article");
    tok.tokenize(text)
        .into_iter()
        .map(|t| Token {
            start: t.start + start,
            end: t.end + start,
            ..t
        })
        .collect()
}

/// Cuts an over-long token run after the last punctuation token within the
/// first `max_tokens` positions, repeatedly; without punctuation in the
/// window the cut falls at exactly `max_tokens`.
fn cut_at_punctuation(mut tokens: Vec<Token>, max_tokens: usize) -> Vec<Vec<Token>> {
    let mut pieces = Vec::new();
    while tokens.len() > max_tokens {
        let cut = tokens[..max_tokens]
            .iter()
            .rposition(Token::is_punctuation)
            .map_or(max_tokens, |i| i + 1);
        let rest = tokens.split_off(cut);
        pieces.push(tokens);
        tokens = rest;
    }
    if !tokens.is_empty() {
        pieces.push(tokens);
    }
    pieces
}

fn check_max_tokens(max_tokens: usize) {
    assert!(max_tokens >= 2, "max_tokens must be at least 2");
}

/// Splits at newline runs, then cuts paragraphs longer than `max_tokens`.
pub fn split_paragraphs(article: &Article, tok: &dyn Tokenizer, max_tokens: usize) -> Vec<Segment> {
    check_max_tokens(max_tokens);
    paragraph_ranges(article)
        .into_iter()
        .flat_map(|(s, e)| cut_at_punctuation(tokenize_range(article, tok, s, e), max_tokens))
        .map(|tokens| Segment::from_tokens(article.id(), tokens))
        .collect()
}

/// Sentence boundaries fall after `.`, `!` or `?` when followed by whitespace
/// or the end of the paragraph, and at newline runs. There is no abbreviation
/// list, so "e.g. x" splits after "e.g.".
pub fn split_sentences(article: &Article, tok: &dyn Tokenizer, max_tokens: usize) -> Vec<Segment> {
    check_max_tokens(max_tokens);
    let mut ranges = Vec::new();
    for (ps, pe) in paragraph_ranges(article) {
        let chars: Vec<char> = article.chars_in(ps, pe).collect();
        let mut start = 0;
        for i in 0..chars.len() {
            let terminal = matches!(chars[i], '.' | '!' | '?');
            if terminal && chars.get(i + 1).is_none_or(|c| c.is_whitespace()) {
                ranges.push((ps + start, ps + i + 1));
                start = i + 1;
            }
        }
        if start < chars.len() {
            ranges.push((ps + start, pe));
        }
    }
    ranges
        .into_iter()
        .flat_map(|(s, e)| cut_at_punctuation(tokenize_range(article, tok, s, e), max_tokens))
        .map(|tokens| Segment::from_tokens(article.id(), tokens))
        .collect()
}

pub fn split(
    article: &Article,
    tok: &dyn Tokenizer,
    strategy: SplitStrategy,
    max_tokens: usize,
) -> Vec<Segment> {
    match strategy {
        SplitStrategy::Paragraph => split_paragraphs(article, tok, max_tokens),
        SplitStrategy::Sentence => split_sentences(article, tok, max_tokens),
    }
}

/// One training sample per label, carrying the exact span text.
pub fn extract_exact_spans(article: &Article, labels: &[TcLabel]) -> Result<Vec<ClassifiedSample>> {
    labels
        .iter()
        .map(|l| {
            if l.article_id != article.id() {
                return Err(Error::Contract(format!(
                    "label for article {} passed with article {}",
                    l.article_id,
                    article.id()
                )));
            }
            let surface = article.span_text(l.span)?.to_string();
            Ok(ClassifiedSample {
                article_id: l.article_id,
                span: l.span,
                surface,
                technique: Some(l.technique),
            })
        })
        .collect()
}

/// Label 1 for every token overlapping any gold span by at least one character.
pub fn project_labels(segment: &Segment, gold: &[Span]) -> Vec<usize> {
    segment
        .tokens
        .iter()
        .map(|t| {
            let hit = gold.iter().any(|g| t.start.max(g.start()) < t.end.min(g.end()));
            usize::from(hit)
        })
        .collect()
}

/// Each maximal run of 1-labels becomes a span from its first token's start to
/// its last token's end; runs are then merged per [`merge_spans`].
pub fn reconstruct_spans(article: &Article, segment: &Segment, labels: &[usize]) -> Result<Vec<Span>> {
    if labels.len() != segment.tokens.len() {
        return Err(Error::Contract(format!(
            "{} labels for a segment of {} tokens",
            labels.len(),
            segment.tokens.len()
        )));
    }
    let mut runs = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &label) in labels.iter().enumerate() {
        match (label == 1, open) {
            (true, None) => open = Some(segment.tokens[i].start),
            (false, Some(s)) => {
                runs.push(Span::new(s, segment.tokens[i - 1].end)?);
                open = None;
            }
            _ => {}
        }
    }
    if let Some(s) = open {
        runs.push(Span::new(s, segment.tokens.last().expect("nonempty").end)?);
    }
    Ok(merge_spans(article, runs))
}

/// Sorts spans and joins neighbours that overlap, touch, or are separated by
/// text without letters or digits.
pub fn merge_spans(article: &Article, mut spans: Vec<Span>) -> Vec<Span> {
    spans.sort();
    let mut merged: Vec<Span> = Vec::with_capacity(spans.len());
    for span in spans {
        if let Some(last) = merged.last_mut() {
            let joinable = span.start() <= last.end()
                || !article
                    .chars_in(last.end(), span.start())
                    .any(char::is_alphanumeric);
            if joinable {
                let end = last.end().max(span.end());
                *last = Span::new(last.start(), end).expect("end grows");
                continue;
            }
        }
        merged.push(span);
    }
    merged
}
