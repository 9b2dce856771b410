//! Articles, span annotations and the tab-separated label formats, plus
//! dataset splitting and class rebalancing.
//!
//! All offsets are counted in Unicode scalar values (`char`s), never bytes,
//! and article text is kept exactly as read so that gold offsets stay valid.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Development share of the corpus: 74 of the 371 training articles.
pub const DEV_NUMERATOR: usize = 74;
pub const DEV_DENOMINATOR: usize = 371;

/// Seeded generator used everywhere a reproducible shuffle or sample is needed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One news article with character-indexable text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Article {
    id: u32,
    text: String,
    // byte offset of every char boundary, including the end of the text
    boundaries: Vec<usize>,
}

impl Article {
    pub fn new(id: u32, text: impl Into<String>) -> Result<Self> {
        if id == 0 {
            return Err(Error::Contract("article ids start at 1".into()));
        }
        let text = text.into();
        let mut boundaries: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
        boundaries.push(text.len());
        Ok(Self {
            id,
            text,
            boundaries,
        })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Length in characters.
    pub fn len(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Text of the character range `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<&str> {
        if start > end || end > self.len() {
            return Err(Error::Bounds {
                article_id: self.id,
                start,
                end,
                len: self.len(),
            });
        }
        Ok(&self.text[self.boundaries[start]..self.boundaries[end]])
    }

    pub fn span_text(&self, span: Span) -> Result<&str> {
        self.slice(span.start(), span.end())
    }

    /// Characters of `[start, end)`; panics on an invalid range.
    pub(crate) fn chars_in(&self, start: usize, end: usize) -> std::str::Chars<'_> {
        self.text[self.boundaries[start]..self.boundaries[end]].chars()
    }
}

/// Half-open character interval with `start < end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "(usize, usize)", into = "(usize, usize)")]
pub struct Span {
    start: usize,
    end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return Err(Error::Contract(format!(
                "span [{start}, {end}) must have start < end"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn start(self) -> usize {
        self.start
    }

    pub fn end(self) -> usize {
        self.end
    }

    pub fn len(self) -> usize {
        self.end - self.start
    }

    /// Number of characters shared with `other`.
    pub fn intersection(self, other: Span) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        hi.saturating_sub(lo)
    }

    pub fn overlaps(self, other: Span) -> bool {
        self.intersection(other) > 0
    }
}

impl TryFrom<(usize, usize)> for Span {
    type Error = Error;

    fn try_from((start, end): (usize, usize)) -> Result<Self> {
        Span::new(start, end)
    }
}

impl From<Span> for (usize, usize) {
    fn from(s: Span) -> Self {
        (s.start, s.end)
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiLabel {
    pub article_id: u32,
    pub span: Span,
}

/// The 14 propaganda techniques, in their canonical reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Technique {
    AppealToAuthority,
    AppealToFearPrejudice,
    BandwagonReductioAdHitlerum,
    BlackAndWhiteFallacy,
    CausalOversimplification,
    Doubt,
    ExaggerationMinimisation,
    FlagWaving,
    LoadedLanguage,
    NameCallingLabeling,
    Repetition,
    Slogans,
    ThoughtTerminatingCliches,
    WhataboutismStrawMen,
}

impl Technique {
    pub const COUNT: usize = 14;

    pub const ALL: [Technique; 14] = [
        Technique::AppealToAuthority,
        Technique::AppealToFearPrejudice,
        Technique::BandwagonReductioAdHitlerum,
        Technique::BlackAndWhiteFallacy,
        Technique::CausalOversimplification,
        Technique::Doubt,
        Technique::ExaggerationMinimisation,
        Technique::FlagWaving,
        Technique::LoadedLanguage,
        Technique::NameCallingLabeling,
        Technique::Repetition,
        Technique::Slogans,
        Technique::ThoughtTerminatingCliches,
        Technique::WhataboutismStrawMen,
    ];

    const DISPLAY: [&'static str; 14] = [
        "Appeal to Authority",
        "Appeal to fear-prejudice",
        "Bandwagon, Reductio ad hitlerum",
        "Black-and-White Fallacy",
        "Causal Oversimplification",
        "Doubt",
        "Exaggeration, Minimisation",
        "Flag-Waving",
        "Loaded Language",
        "Name Calling, Labeling",
        "Repetition",
        "Slogans",
        "Thought-terminating Cliches",
        "Whataboutism, Straw Men",
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    /// Human-readable name, as used in the label files and reports.
    pub fn name(self) -> &'static str {
        Self::DISPLAY[self.index()]
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Technique {
    type Err = Error;

    /// Case-sensitive match against the 14 names.
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                Error::Contract(format!(
                    "unknown technique `{s}`; valid names: {}",
                    Self::DISPLAY.join("; ")
                ))
            })
    }
}

impl TryFrom<String> for Technique {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Technique> for String {
    fn from(t: Technique) -> Self {
        t.name().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TcLabel {
    pub article_id: u32,
    pub technique: Technique,
    pub span: Span,
}

/// An exact span cut out of its article, used as one TC example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifiedSample {
    pub article_id: u32,
    pub span: Span,
    pub surface: String,
    pub technique: Option<Technique>,
}

/// Parses an `article<digits>.txt` file. The text is not normalized in any way.
pub fn load_article(file_name: &str, content: &[u8]) -> Result<Article> {
    let format_err = |reason: &str| Error::Format {
        file: file_name.to_string(),
        reason: reason.to_string(),
    };
    let digits = file_name
        .strip_prefix("article")
        .and_then(|rest| rest.strip_suffix(".txt"))
        .filter(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
        .ok_or_else(|| format_err("expected a name of the form article<digits>.txt"))?;
    let id: u32 = digits
        .parse()
        .map_err(|_| format_err("article id does not fit in 32 bits"))?;
    if id == 0 {
        return Err(format_err("article id must be at least 1"));
    }
    let text = std::str::from_utf8(content).map_err(|e| Error::Decode {
        file: file_name.to_string(),
        position: e.valid_up_to(),
    })?;
    Article::new(id, text)
}

/// Loads every `article*.txt` in `dir`, sorted by id. Other files are ignored.
pub fn load_article_dir(dir: &Path) -> Result<Vec<Article>> {
    let mut articles = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !(name.starts_with("article") && name.ends_with(".txt")) {
            continue;
        }
        let content = fs::read(entry.path())?;
        articles.push(load_article(&name, &content)?);
    }
    articles.sort_by_key(Article::id);
    Ok(articles)
}

fn parse_fields<'a>(line: &'a str, line_no: usize, expected: usize) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != expected {
        return Err(Error::Parse {
            line: line_no,
            reason: format!("expected {expected} tab-separated fields, found {}", fields.len()),
        });
    }
    Ok(fields)
}

fn parse_int<T: FromStr>(field: &str, what: &str, line_no: usize) -> Result<T> {
    field.parse().map_err(|_| Error::Parse {
        line: line_no,
        reason: format!("{what} `{field}` is not a base-10 integer"),
    })
}

fn parse_span(start: &str, end: &str, line_no: usize) -> Result<Span> {
    let start: usize = parse_int(start, "start offset", line_no)?;
    let end: usize = parse_int(end, "end offset", line_no)?;
    Span::new(start, end).map_err(|_| Error::Parse {
        line: line_no,
        reason: format!("span start {start} must be smaller than end {end}"),
    })
}

fn parse_article_id(field: &str, line_no: usize) -> Result<u32> {
    let id: u32 = parse_int(field, "article id", line_no)?;
    if id == 0 {
        return Err(Error::Parse {
            line: line_no,
            reason: "article id must be at least 1".into(),
        });
    }
    Ok(id)
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.split('\n')
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.is_empty())
}

/// Parses `article_id \t start \t end` lines.
pub fn parse_si_labels(tsv: &str) -> Result<Vec<SiLabel>> {
    data_lines(tsv)
        .map(|(line_no, line)| {
            let f = parse_fields(line, line_no, 3)?;
            Ok(SiLabel {
                article_id: parse_article_id(f[0], line_no)?,
                span: parse_span(f[1], f[2], line_no)?,
            })
        })
        .collect()
}

/// Parses `article_id \t technique \t start \t end` lines. Overlapping and
/// duplicate lines are kept as they are.
pub fn parse_tc_labels(tsv: &str) -> Result<Vec<TcLabel>> {
    data_lines(tsv)
        .map(|(line_no, line)| {
            let f = parse_fields(line, line_no, 4)?;
            let technique = f[1].parse().map_err(|e: Error| Error::Parse {
                line: line_no,
                reason: match e {
                    Error::Contract(msg) => msg,
                    other => other.to_string(),
                },
            })?;
            Ok(TcLabel {
                article_id: parse_article_id(f[0], line_no)?,
                technique,
                span: parse_span(f[2], f[3], line_no)?,
            })
        })
        .collect()
}

pub fn emit_si_predictions(labels: &[SiLabel]) -> String {
    labels
        .iter()
        .map(|l| format!("{}\t{}\t{}\n", l.article_id, l.span.start, l.span.end))
        .collect()
}

pub fn emit_tc_predictions(labels: &[TcLabel]) -> String {
    labels
        .iter()
        .map(|l| {
            format!(
                "{}\t{}\t{}\t{}\n",
                l.article_id, l.technique, l.span.start, l.span.end
            )
        })
        .collect()
}

/// Checks every span against the length of its article. Labels for articles
/// that are not in `articles` are reported as errors too.
pub fn validate_against<'a>(
    spans: impl IntoIterator<Item = (u32, Span)>,
    articles: impl IntoIterator<Item = &'a Article>,
) -> Result<()> {
    let lengths: BTreeMap<u32, usize> = articles.into_iter().map(|a| (a.id(), a.len())).collect();
    for (article_id, span) in spans {
        let len = *lengths.get(&article_id).ok_or_else(|| {
            Error::Contract(format!("label refers to unknown article {article_id}"))
        })?;
        if span.end() > len {
            return Err(Error::Bounds {
                article_id,
                start: span.start(),
                end: span.end(),
                len,
            });
        }
    }
    Ok(())
}

/// Mixes a base seed with two stream indices (epoch, member, sample, ...)
/// into an independent seed.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ a.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ b.wrapping_add(1).wrapping_mul(0x94D0_49BB_1331_11EB)
}

/// `round(n * 74 / 371)`, rounding halves up.
pub fn dev_size(n: usize) -> usize {
    (2 * n * DEV_NUMERATOR + DEV_DENOMINATOR) / (2 * DEV_DENOMINATOR)
}

/// Seeded shuffle followed by a train/dev cut in the 297:74 proportion.
pub fn train_dev_split<T: Clone>(items: &[T], seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::Contract("cannot split an empty corpus".into()));
    }
    let mut shuffled = items.to_vec();
    shuffled.shuffle(&mut seeded_rng(seed));
    let dev = shuffled.split_off(items.len() - dev_size(items.len()));
    Ok((shuffled, dev))
}

/// Keeps every positive and samples `min(#neg, #pos)` negatives without
/// replacement, then shuffles the result.
pub fn undersample_negatives<T: Clone>(items: &[(T, bool)], seed: u64) -> Result<Vec<(T, bool)>> {
    let (pos, neg): (Vec<_>, Vec<_>) = items.iter().cloned().partition(|(_, p)| *p);
    if pos.is_empty() {
        return Err(Error::Sampling(
            "no positive segments; the 50/50 ratio is undefined".into(),
        ));
    }
    let mut rng = seeded_rng(seed);
    let keep = neg.len().min(pos.len());
    let mut chosen: Vec<usize> = index::sample(&mut rng, neg.len(), keep).into_vec();
    chosen.sort_unstable();
    let mut out = pos;
    out.extend(chosen.into_iter().map(|i| neg[i].clone()));
    out.shuffle(&mut rng);
    Ok(out)
}

/// Replicates samples of every present class (with replacement) until each
/// class reaches the majority-class count. Originals are always kept.
pub fn oversample_classes(samples: &[ClassifiedSample], seed: u64) -> Result<Vec<ClassifiedSample>> {
    if samples.is_empty() {
        return Err(Error::Sampling("cannot oversample an empty sample set".into()));
    }
    let mut by_class: BTreeMap<Technique, Vec<&ClassifiedSample>> = BTreeMap::new();
    for s in samples {
        let t = s.technique.ok_or_else(|| {
            Error::Contract(format!(
                "sample {} {} has no technique",
                s.article_id, s.span
            ))
        })?;
        by_class.entry(t).or_default().push(s);
    }
    let target = by_class.values().map(Vec::len).max().unwrap_or(0);
    let mut rng = seeded_rng(seed);
    let mut out: Vec<ClassifiedSample> = samples.to_vec();
    for members in by_class.values() {
        for _ in members.len()..target {
            let pick = members.choose(&mut rng).expect("class has members");
            out.push((*pick).clone());
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Histogram of techniques over labelled samples.
pub fn class_counts(techniques: impl IntoIterator<Item = Technique>) -> [usize; Technique::COUNT] {
    let mut counts = [0; Technique::COUNT];
    for t in techniques {
        counts[t.index()] += 1;
    }
    counts
}
