//! Training and prediction for both subtasks.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    class_counts, derive_seed, oversample_classes, seeded_rng, undersample_negatives, Article,
    ClassifiedSample, SiLabel, Span, TcLabel, Technique,
};
use crate::crf;
use crate::error::{Error, Result};
use crate::eval::{si_score, tc_micro_f1};
use crate::neural::{
    crf_params, encode_on_tape, init_crf, init_encoder, init_si_head, init_tc_head,
    si_emissions_on_tape, si_loss_on_tape, tc_logits_on_tape, Checkpoint, Dropout, EncoderConfig,
    Grads, ParamSet, RAdam, Tape, Var,
};
use crate::segmenter::{
    merge_spans, project_labels, reconstruct_spans, split, RuleTokenizer, Segment,
    SplitStrategy, Tokenizer, Vocab, DEFAULT_MAX_TOKENS,
};

/// Encoder weights a fine-tuning run starts from.
#[derive(Debug, Clone)]
pub struct EncoderInit {
    pub config: EncoderConfig,
    pub params: ParamSet,
    /// Step fraction of the source checkpoint, if any.
    pub step_fraction: Option<f64>,
}

impl EncoderInit {
    pub fn fresh(config: EncoderConfig, seed: u64) -> Result<Self> {
        let params = init_encoder(&config, seed)?;
        Ok(Self {
            config,
            params,
            step_fraction: None,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        Self {
            config: ck.config.clone(),
            params: ck.encoder_params(),
            step_fraction: Some(ck.step_fraction()),
        }
    }
}

/// Settings shared by both fine-tuning loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTune {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub lr: f64,
    pub seed: u64,
    pub freeze_encoder: bool,
}

impl FineTune {
    fn check(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Training("zero epochs requested".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Training("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Training(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiTrainConfig {
    pub strategy: SplitStrategy,
    pub max_tokens: usize,
    /// Rebalance each epoch to 50/50 positive and negative segments.
    pub undersample: bool,
    pub tune: FineTune,
}

impl Default for SiTrainConfig {
    fn default() -> Self {
        Self {
            strategy: SplitStrategy::Paragraph,
            max_tokens: DEFAULT_MAX_TOKENS,
            undersample: true,
            tune: FineTune {
                epochs: 10,
                batch_size: 16,
                patience: 3,
                lr: 1e-3,
                seed: 17,
                freeze_encoder: false,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcTrainConfig {
    pub oversample: bool,
    pub tune: FineTune,
}

impl Default for TcTrainConfig {
    fn default() -> Self {
        Self {
            oversample: false,
            tune: FineTune {
                epochs: 10,
                batch_size: 16,
                patience: 3,
                lr: 1e-4,
                seed: 19,
                freeze_encoder: false,
            },
        }
    }
}

/// Per-epoch record of a fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_score: f64,
    pub seconds: f64,
}

struct LoopOutcome {
    params: ParamSet,
    best_epoch: usize,
    best_score: f64,
    history: Vec<EpochLog>,
}

/// Mini-batch training with per-epoch dev evaluation, keeping the parameters
/// of the best-scoring epoch (earliest on ties).
fn run_epochs<E>(
    mut params: ParamSet,
    tune: &FineTune,
    dropout_rate: f64,
    mut epoch_items: impl FnMut(usize) -> Result<Vec<E>>,
    loss: impl Fn(&mut Tape, &E, Option<Dropout>) -> Result<Var>,
    mut evaluate: impl FnMut(&ParamSet) -> Result<f64>,
) -> Result<LoopOutcome> {
    tune.check()?;
    let mut opt = RAdam::new(tune.lr, 0);
    let mut best: Option<(usize, f64, ParamSet)> = None;
    let mut history = Vec::new();
    let mut stale = 0;
    for epoch in 1..=tune.epochs {
        let started = Instant::now();
        let items = epoch_items(epoch)?;
        if items.is_empty() {
            return Err(Error::Training("no training examples".into()));
        }
        let mut rng = seeded_rng(derive_seed(tune.seed, epoch as u64, 1));
        let mut total = 0.0;
        for chunk in items.chunks(tune.batch_size) {
            let mut grads: Grads = BTreeMap::new();
            for item in chunk {
                let mut tape = Tape::new(&params);
                let l = loss(
                    &mut tape,
                    item,
                    Some(Dropout {
                        rate: dropout_rate,
                        rng: &mut rng,
                    }),
                )?;
                total += tape.scalar(l);
                for (k, g) in tape.backward(l) {
                    if tune.freeze_encoder && k.starts_with("enc.") {
                        continue;
                    }
                    match grads.get_mut(&k) {
                        Some(acc) => *acc += &g,
                        None => {
                            grads.insert(k, g);
                        }
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in grads.values_mut() {
                *g *= inv;
            }
            opt.step(&mut params, &grads)?;
        }
        let score = evaluate(&params)?;
        let log = EpochLog {
            epoch,
            train_loss: total / items.len() as f64,
            dev_score: score,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train loss {:.4}, dev {:.4} ({:.1}s)",
            log.train_loss,
            score,
            log.seconds
        );
        history.push(log);
        if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
            best = Some((epoch, score, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= tune.patience {
                break;
            }
        }
    }
    let (best_epoch, best_score, params) = best.expect("at least one epoch ran");
    Ok(LoopOutcome {
        params,
        best_epoch,
        best_score,
        history,
    })
}

/// A segment with per-token gold labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelledSegment {
    pub segment: Segment,
    pub labels: Vec<usize>,
}

impl LabelledSegment {
    pub fn is_positive(&self) -> bool {
        self.labels.contains(&1)
    }
}

fn spans_by_article(labels: &[SiLabel]) -> BTreeMap<u32, Vec<Span>> {
    let mut by: BTreeMap<u32, Vec<Span>> = BTreeMap::new();
    for l in labels {
        by.entry(l.article_id).or_default().push(l.span);
    }
    by
}

/// Splits articles and projects gold spans onto the tokens of each
/// nonempty segment.
pub fn label_segments(
    articles: &[Article],
    labels: &[SiLabel],
    tok: &dyn Tokenizer,
    strategy: SplitStrategy,
    max_tokens: usize,
) -> Vec<LabelledSegment> {
    let gold = spans_by_article(labels);
    let none = Vec::new();
    articles
        .iter()
        .flat_map(|a| {
            let spans = gold.get(&a.id()).unwrap_or(&none);
            split(a, tok, strategy, max_tokens)
                .into_iter()
                .filter(|s| !s.is_empty())
                .map(|segment| LabelledSegment {
                    labels: project_labels(&segment, spans),
                    segment,
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Span identification model: encoder, SI head and CRF in one parameter set.
#[derive(Debug, Clone)]
pub struct SiModel {
    pub encoder: EncoderConfig,
    pub params: ParamSet,
    pub tokenizer: RuleTokenizer,
    pub strategy: SplitStrategy,
    pub max_tokens: usize,
    pub best_epoch: usize,
    pub dev_f1: f64,
    pub history: Vec<EpochLog>,
}

fn check_tokenizer(tok: &RuleTokenizer, cfg: &EncoderConfig) -> Result<()> {
    if tok.vocab().len() > cfg.vocab_size {
        return Err(Error::Contract(format!(
            "tokenizer vocabulary of {} exceeds encoder vocab_size {}",
            tok.vocab().len(),
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Articles with their gold spans, used to select the best epoch.
#[derive(Debug, Clone, Copy)]
pub struct SiDev<'a> {
    pub articles: &'a [Article],
    pub labels: &'a [SiLabel],
}

/// Fine-tunes encoder, head and CRF on labelled segments, selecting the epoch
/// with the best dev span F1.
pub fn train_si(
    init: EncoderInit,
    tokenizer: RuleTokenizer,
    train: &[LabelledSegment],
    dev: SiDev,
    cfg: &SiTrainConfig,
) -> Result<SiModel> {
    cfg.tune.check()?;
    check_tokenizer(&tokenizer, &init.config)?;
    if cfg.max_tokens > init.config.max_tokens() || cfg.max_tokens < 2 {
        return Err(Error::Contract(format!(
            "max_tokens {} does not fit max_seq_len {}",
            cfg.max_tokens, init.config.max_seq_len
        )));
    }
    if let Some(long) = train.iter().find(|s| s.segment.len() > cfg.max_tokens) {
        return Err(Error::Contract(format!(
            "segment of {} tokens exceeds max_tokens {}",
            long.segment.len(),
            cfg.max_tokens
        )));
    }
    let examples: Vec<((Vec<u32>, Vec<usize>), bool)> = train
        .iter()
        .filter(|s| !s.segment.is_empty())
        .map(|s| {
            (
                (tokenizer.ids(&s.segment.tokens), s.labels.clone()),
                s.is_positive(),
            )
        })
        .collect();
    if !examples.iter().any(|(_, p)| *p) {
        return Err(Error::Training("no positive segment in the training set".into()));
    }
    let mut params = init.params;
    params.extend(init_si_head(init.config.hidden_dim, derive_seed(cfg.tune.seed, 0, 2)));
    params.extend(init_crf());

    let enc = init.config.clone();
    let mut model = SiModel {
        encoder: enc.clone(),
        params: ParamSet::new(),
        tokenizer,
        strategy: cfg.strategy,
        max_tokens: cfg.max_tokens,
        best_epoch: 0,
        dev_f1: 0.0,
        history: Vec::new(),
    };
    let seed = cfg.tune.seed;
    let outcome = run_epochs(
        params,
        &cfg.tune,
        enc.dropout,
        |epoch| {
            let mut chosen = if cfg.undersample {
                undersample_negatives(&examples, derive_seed(seed, epoch as u64, 3))?
            } else {
                let mut all = examples.clone();
                all.shuffle(&mut seeded_rng(derive_seed(seed, epoch as u64, 3)));
                all
            };
            Ok(chosen.drain(..).map(|(e, _)| e).collect())
        },
        |tape, (ids, labels), dropout| {
            let f = encode_on_tape(tape, &enc, ids, dropout)?.features;
            si_loss_on_tape(tape, f, labels)
        },
        |params| {
            let probe = SiModelRef {
                encoder: &enc,
                params,
                tokenizer: &model.tokenizer,
                strategy: cfg.strategy,
                max_tokens: cfg.max_tokens,
            };
            let mut pred = Vec::new();
            for a in dev.articles {
                pred.extend(probe.predict(a)?);
            }
            Ok(si_score(&pred, dev.labels).f1)
        },
    )?;
    model.params = outcome.params;
    model.best_epoch = outcome.best_epoch;
    model.dev_f1 = outcome.best_score;
    model.history = outcome.history;
    Ok(model)
}

/// [`label_segments`] followed by [`train_si`].
pub fn train_si_articles(
    init: EncoderInit,
    tokenizer: RuleTokenizer,
    train_articles: &[Article],
    train_labels: &[SiLabel],
    dev: SiDev,
    cfg: &SiTrainConfig,
) -> Result<SiModel> {
    let segments = label_segments(train_articles, train_labels, &tokenizer, cfg.strategy, cfg.max_tokens);
    train_si(init, tokenizer, &segments, dev, cfg)
}

struct SiModelRef<'m> {
    encoder: &'m EncoderConfig,
    params: &'m ParamSet,
    tokenizer: &'m RuleTokenizer,
    strategy: SplitStrategy,
    max_tokens: usize,
}

impl SiModelRef<'_> {
    fn segment_labels(&self, segment: &Segment) -> Result<Vec<usize>> {
        let ids = self.tokenizer.ids(&segment.tokens);
        let mut tape = Tape::new(self.params);
        let f = encode_on_tape(&mut tape, self.encoder, &ids, None)?.features;
        let e = si_emissions_on_tape(&mut tape, f, ids.len())?;
        crf::viterbi(tape.value(e).view(), &crf_params(self.params)?)
    }

    fn predict(&self, article: &Article) -> Result<Vec<SiLabel>> {
        let mut spans = Vec::new();
        for segment in split(article, self.tokenizer, self.strategy, self.max_tokens) {
            if segment.is_empty() {
                continue;
            }
            let labels = self.segment_labels(&segment)?;
            spans.extend(reconstruct_spans(article, &segment, &labels)?);
        }
        Ok(merge_spans(article, spans)
            .into_iter()
            .map(|span| SiLabel {
                article_id: article.id(),
                span,
            })
            .collect())
    }
}

impl SiModel {
    fn view(&self) -> SiModelRef<'_> {
        SiModelRef {
            encoder: &self.encoder,
            params: &self.params,
            tokenizer: &self.tokenizer,
            strategy: self.strategy,
            max_tokens: self.max_tokens,
        }
    }

    /// Viterbi labels for the tokens of one segment.
    pub fn segment_labels(&self, segment: &Segment) -> Result<Vec<usize>> {
        self.view().segment_labels(segment)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let epochs = self.history.len().max(1) as u64;
        let mut ck = Checkpoint::new(
            self.encoder.clone(),
            self.params.clone(),
            (self.best_epoch as u64).clamp(1, epochs),
            epochs,
        )?;
        ck.meta.insert("task".into(), "si".into());
        ck.meta.insert("split_strategy".into(), self.strategy.to_string());
        ck.meta.insert("max_tokens".into(), self.max_tokens.to_string());
        ck.meta.insert("dev_f1".into(), format!("{:.6}", self.dev_f1));
        ck.meta.insert("vocab".into(), self.tokenizer.vocab().to_file_string());
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        expect_task(ck, "si")?;
        for name in ["si.hidden.w", "si.out.w", "crf.transitions", "crf.start", "crf.end"] {
            ck.params.require(name)?;
        }
        Ok(Self {
            encoder: ck.config.clone(),
            params: ck.params.clone(),
            tokenizer: tokenizer_from_meta(ck)?,
            strategy: meta(ck, "split_strategy")?.parse()?,
            max_tokens: parse_meta(ck, "max_tokens")?,
            best_epoch: ck.step as usize,
            dev_f1: parse_meta(ck, "dev_f1")?,
            history: Vec::new(),
        })
    }
}

fn meta<'c>(ck: &'c Checkpoint, key: &str) -> Result<&'c str> {
    ck.meta
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("model file lacks `{key}`")))
}

fn parse_meta<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
    meta(ck, key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad `{key}` value")))
}

fn expect_task(ck: &Checkpoint, task: &str) -> Result<()> {
    match ck.meta.get("task") {
        Some(t) if t == task => Ok(()),
        other => Err(Error::Checkpoint(format!(
            "expected a {task} model, found task {other:?}"
        ))),
    }
}

fn tokenizer_from_meta(ck: &Checkpoint) -> Result<RuleTokenizer> {
    Ok(RuleTokenizer::new(Vocab::from_file_string(meta(ck, "vocab")?)?))
}

/// Spans predicted for one article: sorted, disjoint and article-absolute.
pub fn predict_si(model: &SiModel, article: &Article) -> Result<Vec<SiLabel>> {
    model.view().predict(article)
}

/// A span to classify, as token ids truncated to the encoder's capacity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcExample {
    pub ids: Vec<u32>,
    pub target: Option<Technique>,
}

pub fn tc_example(sample: &ClassifiedSample, tok: &dyn Tokenizer, max_tokens: usize) -> TcExample {
    let mut tokens = tok.tokenize(&sample.surface);
    tokens.truncate(max_tokens);
    TcExample {
        ids: tok.ids(&tokens),
        target: sample.technique,
    }
}

/// Technique classification model: encoder plus funnel head.
#[derive(Debug, Clone)]
pub struct TcModel {
    pub encoder: EncoderConfig,
    pub params: ParamSet,
    pub tokenizer: RuleTokenizer,
    pub best_epoch: usize,
    pub dev_f1: f64,
    pub history: Vec<EpochLog>,
    /// Step fraction of the checkpoint the encoder came from.
    pub source_fraction: Option<f64>,
    pub warnings: Vec<String>,
}

impl TcModel {
    /// Class distribution for one sample.
    pub fn probabilities(&self, sample: &ClassifiedSample) -> Result<Vec<f64>> {
        let ex = tc_example(sample, &self.tokenizer, self.encoder.max_tokens());
        tc_probabilities(&self.encoder, &self.params, &ex.ids)
    }

    /// Arg-max technique per sample.
    pub fn predict(&self, samples: &[ClassifiedSample]) -> Result<Vec<TcLabel>> {
        samples
            .iter()
            .map(|s| {
                let probs = self.probabilities(s)?;
                Ok(TcLabel {
                    article_id: s.article_id,
                    technique: argmax_technique(&probs),
                    span: s.span,
                })
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let epochs = self.history.len().max(1) as u64;
        let mut ck = Checkpoint::new(
            self.encoder.clone(),
            self.params.clone(),
            (self.best_epoch as u64).clamp(1, epochs),
            epochs,
        )?;
        ck.meta.insert("task".into(), "tc".into());
        ck.meta.insert("dev_f1".into(), format!("{:.6}", self.dev_f1));
        if let Some(f) = self.source_fraction {
            ck.meta.insert("source_fraction".into(), f.to_string());
        }
        ck.meta.insert("vocab".into(), self.tokenizer.vocab().to_file_string());
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        expect_task(ck, "tc")?;
        for name in ["tc.hidden.w", "tc.out.w"] {
            ck.params.require(name)?;
        }
        Ok(Self {
            encoder: ck.config.clone(),
            params: ck.params.clone(),
            tokenizer: tokenizer_from_meta(ck)?,
            best_epoch: ck.step as usize,
            dev_f1: parse_meta(ck, "dev_f1")?,
            history: Vec::new(),
            source_fraction: ck
                .meta
                .get("source_fraction")
                .and_then(|v| v.parse().ok()),
            warnings: Vec::new(),
        })
    }
}

fn tc_probabilities(cfg: &EncoderConfig, params: &ParamSet, ids: &[u32]) -> Result<Vec<f64>> {
    let mut tape = Tape::new(params);
    let f = encode_on_tape(&mut tape, cfg, ids, None)?.features;
    let logits = tc_logits_on_tape(&mut tape, f, ids.len())?;
    let probs = tape.softmax_rows(logits);
    Ok(tape.value(probs).row(0).to_vec())
}

/// Highest-probability technique, lower index on ties.
pub fn argmax_technique(probs: &[f64]) -> Technique {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Technique::ALL[best]
}

/// Fine-tunes encoder and funnel head with cross-entropy, selecting the epoch
/// with the best dev micro-F1.
pub fn train_tc(
    init: EncoderInit,
    tokenizer: RuleTokenizer,
    train: &[ClassifiedSample],
    dev: &[ClassifiedSample],
    cfg: &TcTrainConfig,
) -> Result<TcModel> {
    cfg.tune.check()?;
    check_tokenizer(&tokenizer, &init.config)?;
    if train.is_empty() {
        return Err(Error::Training("no training samples".into()));
    }
    let techniques = train
        .iter()
        .map(|s| {
            s.technique.ok_or_else(|| {
                Error::Contract(format!("training sample {} {} is unlabelled", s.article_id, s.span))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut warnings = Vec::new();
    for (i, &n) in class_counts(techniques).iter().enumerate() {
        if n == 0 {
            let w = format!("class `{}` is absent from the training set", Technique::ALL[i]);
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    let pool = if cfg.oversample {
        oversample_classes(train, derive_seed(cfg.tune.seed, 0, 4))?
    } else {
        train.to_vec()
    };
    let enc = init.config.clone();
    let max_tokens = enc.max_tokens();
    let examples: Vec<(Vec<u32>, usize)> = pool
        .iter()
        .map(|s| {
            let ex = tc_example(s, &tokenizer, max_tokens);
            (ex.ids, ex.target.expect("checked above").index())
        })
        .collect();
    let dev_examples: Vec<TcExample> = dev.iter().map(|s| tc_example(s, &tokenizer, max_tokens)).collect();
    let dev_gold: Vec<TcLabel> = dev
        .iter()
        .map(|s| {
            s.technique
                .map(|technique| TcLabel {
                    article_id: s.article_id,
                    technique,
                    span: s.span,
                })
                .ok_or_else(|| Error::Contract("dev sample without technique".into()))
        })
        .collect::<Result<_>>()?;

    let mut params = init.params;
    params.extend(init_tc_head(enc.hidden_dim, derive_seed(cfg.tune.seed, 0, 5)));
    let seed = cfg.tune.seed;
    let outcome = run_epochs(
        params,
        &cfg.tune,
        enc.dropout,
        |epoch| {
            let mut order = examples.clone();
            order.shuffle(&mut seeded_rng(derive_seed(seed, epoch as u64, 6)));
            Ok(order)
        },
        |tape, (ids, target), dropout| {
            let f = encode_on_tape(tape, &enc, ids, dropout)?.features;
            let logits = tc_logits_on_tape(tape, f, ids.len())?;
            Ok(tape.cross_entropy(logits, vec![*target]))
        },
        |params| {
            if dev.is_empty() {
                return Ok(0.0);
            }
            let pred = dev_examples
                .iter()
                .zip(dev)
                .map(|(ex, s)| {
                    Ok(TcLabel {
                        article_id: s.article_id,
                        technique: argmax_technique(&tc_probabilities(&enc, params, &ex.ids)?),
                        span: s.span,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            tc_micro_f1(&pred, &dev_gold)
        },
    )?;
    Ok(TcModel {
        encoder: enc,
        params: outcome.params,
        tokenizer,
        best_epoch: outcome.best_epoch,
        dev_f1: outcome.best_score,
        history: outcome.history,
        source_fraction: init.step_fraction,
        warnings,
    })
}

/// Checkpoint-ensemble of technique classifiers.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: Vec<TcModel>,
    pub warnings: Vec<String>,
}

/// One classified span with every member's distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcPrediction {
    pub article_id: u32,
    pub span: Span,
    pub member_probs: Vec<Vec<f64>>,
    pub aggregate: Vec<f64>,
    pub technique: Technique,
}

impl Ensemble {
    pub fn new(members: Vec<TcModel>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Contract("an ensemble needs at least one member".into()))?;
        if members
            .iter()
            .any(|m| m.tokenizer.vocab() != first.tokenizer.vocab())
        {
            return Err(Error::Contract("ensemble members use different vocabularies".into()));
        }
        Ok(Self {
            members,
            warnings: Vec::new(),
        })
    }

    pub fn predict_one(&self, sample: &ClassifiedSample) -> Result<TcPrediction> {
        let member_probs = self
            .members
            .iter()
            .map(|m| m.probabilities(sample))
            .collect::<Result<Vec<_>>>()?;
        let (technique, aggregate) = ensemble_vote(&member_probs)?;
        Ok(TcPrediction {
            article_id: sample.article_id,
            span: sample.span,
            member_probs,
            aggregate,
            technique,
        })
    }

    pub fn predict(&self, samples: &[ClassifiedSample]) -> Result<Vec<TcPrediction>> {
        samples.iter().map(|s| self.predict_one(s)).collect()
    }
}

/// Fine-tunes one classifier per checkpoint. Members share data and
/// configuration; member `i` uses seed `cfg.tune.seed + i`.
pub fn build_ensemble(
    checkpoints: &[Checkpoint],
    tokenizer: &RuleTokenizer,
    train: &[ClassifiedSample],
    dev: &[ClassifiedSample],
    cfg: &TcTrainConfig,
) -> Result<Ensemble> {
    if checkpoints.len() < 2 {
        return Err(Error::Contract(format!(
            "an ensemble needs at least two checkpoints, got {}",
            checkpoints.len()
        )));
    }
    let mut warnings = Vec::new();
    let fractions: Vec<f64> = checkpoints.iter().map(Checkpoint::step_fraction).collect();
    for (i, f) in fractions.iter().enumerate() {
        if fractions[..i].contains(f) {
            let w = format!("checkpoint {i} repeats step fraction {f}");
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    let mut members = Vec::with_capacity(checkpoints.len());
    for (i, ck) in checkpoints.iter().enumerate() {
        let mut member_cfg = cfg.clone();
        member_cfg.tune.seed = cfg.tune.seed.wrapping_add(i as u64);
        log::info!("fine-tuning ensemble member {} of {}", i + 1, checkpoints.len());
        members.push(train_tc(
            EncoderInit::from_checkpoint(ck),
            tokenizer.clone(),
            train,
            dev,
            &member_cfg,
        )?);
    }
    let mut ensemble = Ensemble::new(members)?;
    ensemble.warnings = warnings;
    Ok(ensemble)
}

/// Majority vote over member arg-maxes. Vote ties go to the class with the
/// larger summed probability, then to the lower class index. Returns the
/// winner and the mean distribution.
pub fn ensemble_vote(member_probs: &[Vec<f64>]) -> Result<(Technique, Vec<f64>)> {
    if member_probs.is_empty() {
        return Err(Error::Contract("no member distributions to vote on".into()));
    }
    if let Some(bad) = member_probs.iter().find(|p| p.len() != Technique::COUNT) {
        return Err(Error::Contract(format!(
            "member distribution has {} entries, expected {}",
            bad.len(),
            Technique::COUNT
        )));
    }
    let mut votes = [0usize; Technique::COUNT];
    let mut sums = [0.0f64; Technique::COUNT];
    for probs in member_probs {
        votes[argmax_technique(probs).index()] += 1;
        for (s, p) in sums.iter_mut().zip(probs) {
            *s += p;
        }
    }
    let mut winner = 0;
    for c in 1..Technique::COUNT {
        if votes[c] > votes[winner] || (votes[c] == votes[winner] && sums[c] > sums[winner]) {
            winner = c;
        }
    }
    let k = member_probs.len() as f64;
    Ok((Technique::ALL[winner], sums.iter().map(|s| s / k).collect()))
}

/// Outcome of overlap resolution for one prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolved {
    pub label: TcLabel,
    /// Every technique was taken by an overlapping span, so the original was
    /// kept.
    pub fallback: bool,
}

/// Reassigns techniques so that overlapping spans of an article do not share
/// one. Predictions are settled in decreasing order of the aggregate
/// probability of their assigned technique; each takes the best-ranked
/// technique not already held by an overlapping settled span, starting
/// with its assigned one. Output follows input order.
pub fn resolve_overlaps_detailed(preds: &[TcPrediction]) -> Vec<Resolved> {
    let confidence = |p: &TcPrediction| p.aggregate.get(p.technique.index()).copied().unwrap_or(0.0);
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| confidence(&preds[b]).total_cmp(&confidence(&preds[a])).then(a.cmp(&b)));
    let mut settled: Vec<Option<Resolved>> = vec![None; preds.len()];
    let mut by_article: BTreeMap<u32, Vec<(Span, Technique)>> = BTreeMap::new();
    for i in order {
        let p = &preds[i];
        let taken = by_article.entry(p.article_id).or_default();
        let excluded: Vec<Technique> = taken
            .iter()
            .filter(|(s, _)| s.overlaps(p.span))
            .map(|&(_, t)| t)
            .collect();
        let mut ranking: Vec<Technique> = Technique::ALL
            .iter()
            .copied()
            .filter(|&t| t != p.technique)
            .collect();
        ranking.sort_by(|a, b| {
            let pa = p.aggregate.get(a.index()).copied().unwrap_or(0.0);
            let pb = p.aggregate.get(b.index()).copied().unwrap_or(0.0);
            pb.total_cmp(&pa).then(a.cmp(b))
        });
        ranking.insert(0, p.technique);
        let choice = ranking.into_iter().find(|t| !excluded.contains(t));
        let (technique, fallback) = match choice {
            Some(t) => (t, false),
            None => (p.technique, true),
        };
        taken.push((p.span, technique));
        settled[i] = Some(Resolved {
            label: TcLabel {
                article_id: p.article_id,
                technique,
                span: p.span,
            },
            fallback,
        });
    }
    settled.into_iter().map(|r| r.expect("every index settled")).collect()
}

pub fn resolve_overlaps(preds: &[TcPrediction]) -> Vec<TcLabel> {
    resolve_overlaps_detailed(preds)
        .into_iter()
        .map(|r| r.label)
        .collect()
}

/// Single-model predictions wrapped as one-member ensemble predictions.
pub fn single_model_predictions(model: &TcModel, samples: &[ClassifiedSample]) -> Result<Vec<TcPrediction>> {
    samples
        .iter()
        .map(|s| {
            let probs = model.probabilities(s)?;
            let (technique, aggregate) = ensemble_vote(std::slice::from_ref(&probs))?;
            Ok(TcPrediction {
                article_id: s.article_id,
                span: s.span,
                member_probs: vec![probs],
                aggregate,
                technique,
            })
        })
        .collect()
}

/// Samples to classify from unlabelled spans.
pub fn samples_for_spans(article: &Article, spans: &[Span]) -> Result<Vec<ClassifiedSample>> {
    spans
        .iter()
        .map(|&span| {
            Ok(ClassifiedSample {
                article_id: article.id(),
                span,
                surface: article.span_text(span)?.to_string(),
                technique: None,
            })
        })
        .collect()
}
