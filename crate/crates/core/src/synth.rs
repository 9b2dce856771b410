//! Seeded synthetic corpora with a trigger lexicon.
//!
//! Articles are built from neutral filler words. Some sentences carry a
//! propaganda phrase: zero to two shared lexicon words, the trigger word of
//! one technique, and up to one more shared lexicon word. The SI gold span
//! of a phrase is exactly the maximal run of lexicon tokens, and the trigger
//! identifies its technique, so both subtasks are solvable with F1 = 1.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{seeded_rng, Article, SiLabel, Span, TcLabel, Technique};
use crate::error::Result;

/// Labelled span counts of the reference training set, in [`Technique::ALL`]
/// order. Used as technique sampling weights.
pub const REFERENCE_SUPPORT: [usize; Technique::COUNT] =
    [144, 294, 72, 107, 209, 493, 466, 229, 2123, 1058, 621, 129, 76, 108];

pub const FILLER: [&str; 48] = [
    "the", "a", "report", "city", "council", "met", "on", "tuesday", "to", "discuss",
    "budget", "plans", "for", "next", "year", "and", "several", "residents", "asked",
    "about", "roads", "schools", "water", "new", "program", "officials", "said", "that",
    "weather", "market", "prices", "local", "team", "game", "library", "hours", "park",
    "bridge", "project", "was", "will", "be", "in", "of", "with", "morning", "week", "data",
];

/// Lexicon words shared by all techniques.
pub const SHARED_LEXICON: [&str; 6] = ["truly", "utterly", "totally", "disgraceful", "outrageous", "shameless"];

/// One trigger word per technique, in [`Technique::ALL`] order.
pub const TRIGGERS: [&str; Technique::COUNT] = [
    "experts", "terrifying", "everyone", "either", "solely", "supposedly", "catastrophic",
    "patriots", "monstrous", "traitors", "again", "unite", "enough", "whatabout",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub articles: usize,
    pub seed: u64,
    /// Chance that a sentence carries a phrase.
    pub phrase_rate: f64,
    /// Chance that a paragraph is long enough to need cutting at 128 tokens.
    pub long_paragraph_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            articles: 200,
            seed: 2020,
            phrase_rate: 0.35,
            long_paragraph_rate: 0.08,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub articles: Vec<Article>,
    pub si_labels: Vec<SiLabel>,
    pub tc_labels: Vec<TcLabel>,
}

struct Builder {
    text: String,
    chars: usize,
    spans: Vec<(Span, Technique)>,
}

impl Builder {
    fn push(&mut self, s: &str) {
        self.text.push_str(s);
        self.chars += s.chars().count();
    }

    fn word(&mut self, w: &str) -> (usize, usize) {
        if !self.text.is_empty() && !self.text.ends_with(['\n', ' ']) {
            self.push(" ");
        }
        let start = self.chars;
        self.push(w);
        (start, self.chars)
    }
}

fn capitalized(w: &str) -> String {
    let mut c = w.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

fn pick_technique(rng: &mut ChaCha8Rng) -> Technique {
    let total: usize = REFERENCE_SUPPORT.iter().sum();
    let mut r = rng.random_range(0..total);
    for (i, &w) in REFERENCE_SUPPORT.iter().enumerate() {
        if r < w {
            return Technique::ALL[i];
        }
        r -= w;
    }
    unreachable!("weights cover the range")
}

fn sentence(b: &mut Builder, rng: &mut ChaCha8Rng, cfg: &SynthConfig) {
    let len = rng.random_range(6..=14);
    let phrase_at = rng
        .random_bool(cfg.phrase_rate)
        .then(|| rng.random_range(1..len));
    for i in 0..len {
        if Some(i) == phrase_at {
            let technique = pick_technique(rng);
            let before = rng.random_range(0..=2);
            let after = rng.random_range(0..=1);
            let mut words: Vec<&str> = (0..before)
                .map(|_| *SHARED_LEXICON.choose(rng).expect("nonempty"))
                .collect();
            words.push(TRIGGERS[technique.index()]);
            words.extend((0..after).map(|_| *SHARED_LEXICON.choose(rng).expect("nonempty")));
            let (start, _) = b.word(words[0]);
            let mut end = b.chars;
            for w in &words[1..] {
                end = b.word(w).1;
            }
            b.spans
                .push((Span::new(start, end).expect("nonempty phrase"), technique));
        }
        let w = *FILLER.choose(rng).expect("nonempty");
        if i == 0 {
            b.word(&capitalized(w));
        } else {
            b.word(w);
        }
        if i + 1 < len && rng.random_bool(0.08) {
            b.push(",");
        }
    }
    b.push(if rng.random_bool(0.1) { "!" } else { "." });
}

/// Generates `cfg.articles` articles with ids `1..=n` and their SI and TC gold.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    let mut rng = seeded_rng(cfg.seed);
    let mut articles = Vec::with_capacity(cfg.articles);
    let mut si_labels = Vec::new();
    let mut tc_labels = Vec::new();
    for n in 0..cfg.articles {
        let id = n as u32 + 1;
        let mut b = Builder {
            text: String::new(),
            chars: 0,
            spans: Vec::new(),
        };
        let title_len = rng.random_range(3..=6);
        for i in 0..title_len {
            let w = *FILLER.choose(&mut rng).expect("nonempty");
            b.word(&if i == 0 { capitalized(w) } else { w.to_string() });
        }
        b.push("\n\n");
        let paragraphs = rng.random_range(2..=5);
        for p in 0..paragraphs {
            let sentences = if rng.random_bool(cfg.long_paragraph_rate) {
                rng.random_range(13..=16)
            } else {
                rng.random_range(1..=4)
            };
            for _ in 0..sentences {
                sentence(&mut b, &mut rng, cfg);
            }
            if p + 1 < paragraphs {
                b.push("\n\n");
            }
        }
        b.push("\n");
        for &(span, technique) in &b.spans {
            si_labels.push(SiLabel { article_id: id, span });
            tc_labels.push(TcLabel {
                article_id: id,
                technique,
                span,
            });
        }
        articles.push(Article::new(id, b.text)?);
    }
    Ok(SynthCorpus {
        articles,
        si_labels,
        tc_labels,
    })
}

/// Whether a lowercased token belongs to the lexicon.
pub fn is_lexicon(surface: &str) -> bool {
    SHARED_LEXICON.contains(&surface) || TRIGGERS.contains(&surface)
}
