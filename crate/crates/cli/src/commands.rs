//! Subcommand implementations. Every command that writes files does so in a
//! stage directory of the workspace, committed together with its manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use propspan::corpus::{
    emit_si_predictions, emit_tc_predictions, load_article_dir, parse_si_labels, parse_tc_labels,
    train_dev_split, validate_against,
};
use propspan::eval::{
    format_class_report, format_si_score, gold_only_report, per_class_report, render_class_table,
    si_score, ClassReport, SiScore,
};
use propspan::neural::{init_encoder, init_mlm_head, load_embeddings, pretrain_from, Checkpoint, ParamSet};
use propspan::pipelines::{
    build_ensemble, label_segments, predict_si, resolve_overlaps_detailed, single_model_predictions, train_si, train_tc,
    Ensemble, EncoderInit, EpochLog, LabelledSegment, SiDev, SiModel, TcModel, TcPrediction,
};
use propspan::segmenter::{extract_exact_spans, RuleTokenizer, Tokenizer, Vocab};
use propspan::synth;
use propspan::{Article, ClassifiedSample, SiLabel, Span, TcLabel};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{synthetic_config_toml, CacheStrategy, ExperimentConfig, Init};
use crate::manifest::RunManifest;
use crate::workspace::{Stage, Workspace};
use crate::{Cli, Command, Subtask};

const PREPARE: &str = "prepare";
const PRETRAIN: &str = "pretrain";
const SI: &str = "si";
const TC: &str = "tc";
const TC_ENSEMBLE: &str = "tc-ensemble";
const PREDICT_SI: &str = "predict-si";
const PREDICT_TC: &str = "predict-tc";
const SCORE_SI: &str = "score-si";
const SCORE_TC: &str = "score-tc";
const REPORT: &str = "report";

pub fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Command::Synth { out: dir, force } = &cli.command {
        return cmd_synth(&cfg, dir, *force, out);
    }
    let ws = Workspace::open(&cfg.paths.workspace)?;
    let ctx = Ctx { cfg, ws };
    match &cli.command {
        Command::Synth { .. } => unreachable!("handled above"),
        Command::Prepare => ctx.prepare(out),
        Command::Pretrain => ctx.pretrain(out),
        Command::TrainSi => ctx.train_si(out),
        Command::TrainTc { ensemble } => ctx.train_tc(*ensemble || ctx.cfg.tc.ensemble, out),
        Command::Predict {
            subtask: Subtask::Si,
            articles,
            spans,
            ensemble,
        } => {
            if spans.is_some() || *ensemble {
                bail!("--spans and --ensemble apply to --subtask tc only");
            }
            ctx.predict_si(articles.as_deref(), out)
        }
        Command::Predict {
            subtask: Subtask::Tc,
            articles,
            spans,
            ensemble,
        } => ctx.predict_tc(*ensemble || ctx.cfg.tc.ensemble, articles.as_deref(), spans.as_deref(), out),
        Command::Score { subtask, pred, gold } => ctx.score(*subtask, pred.as_deref(), gold.as_deref(), out),
        Command::Report { pred, gold } => ctx.report(pred.as_deref(), gold.as_deref(), out),
    }
}

fn cmd_synth(cfg: &ExperimentConfig, dir: &Path, force: bool, out: &mut dyn Write) -> Result<()> {
    if dir.exists() {
        let nonempty = fs::read_dir(dir)?.next().is_some();
        if nonempty && !force {
            bail!("{} already exists and is not empty (use --force to replace it)", dir.display());
        }
    }
    let corpus = synth::generate(&cfg.synth.build())?;
    let stage = Stage::begin(dir.to_path_buf())?;
    for a in &corpus.articles {
        stage.write(&format!("articles/article{}.txt", a.id()), a.text())?;
    }
    stage.write("train-labels-si.tsv", propspan::corpus::emit_si_predictions(&corpus.si_labels))?;
    stage.write("train-labels-tc.tsv", emit_tc_predictions(&corpus.tc_labels))?;
    let mut toml_text = synthetic_config_toml().to_string();
    toml_text.push_str("\n[synth]\n");
    toml_text.push_str(&toml::to_string(&cfg.synth)?);
    stage.write("propspan.toml", toml_text)?;
    let manifest = RunManifest::new("synth", &cfg.to_toml(), &cfg.seeds);
    stage.commit(manifest)?;
    writeln!(
        out,
        "wrote {} articles, {} spans to {}",
        corpus.articles.len(),
        corpus.si_labels.len(),
        dir.display()
    )?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Split {
    Train,
    Dev,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CachedSegment {
    split: Split,
    #[serde(flatten)]
    item: LabelledSegment,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PrepareInfo {
    max_tokens: usize,
    strategies: Vec<CacheStrategy>,
    train_articles: Vec<u32>,
    dev_articles: Vec<u32>,
    vocab_size: usize,
}

struct Ctx {
    cfg: ExperimentConfig,
    ws: Workspace,
}

fn load_corpus(dir: &Path) -> Result<Vec<Article>> {
    if !dir.is_dir() {
        bail!("articles directory {} does not exist", dir.display());
    }
    let articles = load_article_dir(dir).with_context(|| format!("cannot load articles from {}", dir.display()))?;
    if articles.is_empty() {
        bail!("no article<id>.txt files in {}", dir.display());
    }
    Ok(articles)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn read_si(path: &Path) -> Result<Vec<SiLabel>> {
    parse_si_labels(&read_text(path)?).with_context(|| format!("in {}", path.display()))
}

fn read_tc(path: &Path) -> Result<Vec<TcLabel>> {
    parse_tc_labels(&read_text(path)?).with_context(|| format!("in {}", path.display()))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).with_context(|| format!("cannot parse {}", path.display()))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(item)?);
        s.push('\n');
    }
    Ok(s)
}

fn history_tsv(history: &[EpochLog]) -> String {
    let mut s = String::from("epoch\ttrain_loss\tdev_score\tseconds\n");
    for h in history {
        s.push_str(&format!("{}\t{:.6}\t{:.6}\t{:.3}\n", h.epoch, h.train_loss, h.dev_score, h.seconds));
    }
    s
}

/// `article_id, start, end` keys from a SI (3-column) or TC (4-column) file.
fn read_span_keys(path: &Path) -> Result<Vec<(u32, Span)>> {
    let text = read_text(path)?;
    let first = text.lines().find(|l| !l.is_empty()).unwrap_or("");
    let keys = if first.split('\t').count() == 4 {
        read_tc(path)?.into_iter().map(|l| (l.article_id, l.span)).collect()
    } else {
        read_si(path)?.into_iter().map(|l| (l.article_id, l.span)).collect()
    };
    Ok(keys)
}

fn warn_all(manifest: &mut RunManifest, warnings: &[String]) {
    for w in warnings {
        log::warn!("{w}");
        manifest.warnings.push(w.clone());
    }
}

impl Ctx {
    fn manifest(&self, command: &str) -> RunManifest {
        RunManifest::new(command, &self.cfg.to_toml(), &self.cfg.seeds)
    }

    fn prepared(&self) -> Result<(PathBuf, PrepareInfo, RuleTokenizer)> {
        let dir = self.ws.completed(PREPARE, "propspan prepare")?;
        let info: PrepareInfo = read_json(&dir.join("prepare.json"))?;
        let vocab = Vocab::from_file_string(&read_text(&dir.join("vocab.txt"))?)?;
        Ok((dir, info, RuleTokenizer::new(vocab)))
    }

    fn articles_with_ids(&self, ids: &[u32]) -> Result<Vec<Article>> {
        let wanted: BTreeSet<u32> = ids.iter().copied().collect();
        let articles: Vec<Article> = load_corpus(&self.cfg.paths.articles)?
            .into_iter()
            .filter(|a| wanted.contains(&a.id()))
            .collect();
        if articles.len() != wanted.len() {
            bail!(
                "{} no longer holds every article of the prepared split; rerun `propspan prepare`",
                self.cfg.paths.articles.display()
            );
        }
        Ok(articles)
    }

    fn prepare(&self, out: &mut dyn Write) -> Result<()> {
        let cfg = &self.cfg;
        let mut manifest = self.manifest("prepare");
        let articles = load_corpus(&cfg.paths.articles)?;
        let si = match &cfg.paths.si_labels {
            Some(p) => {
                let labels = read_si(p)?;
                validate_against(labels.iter().map(|l| (l.article_id, l.span)), &articles)
                    .with_context(|| format!("in {}", p.display()))?;
                manifest.record_input(p)?;
                Some(labels)
            }
            None => None,
        };
        let tc = match &cfg.paths.tc_labels {
            Some(p) => {
                let labels = read_tc(p)?;
                validate_against(labels.iter().map(|l| (l.article_id, l.span)), &articles)
                    .with_context(|| format!("in {}", p.display()))?;
                manifest.record_input(p)?;
                Some(labels)
            }
            None => None,
        };
        let strategies: Vec<CacheStrategy> = if cfg.prepare.strategies.is_empty() {
            let mut s = Vec::new();
            if si.is_some() {
                s.extend([CacheStrategy::Paragraph, CacheStrategy::Sentence]);
            }
            if tc.is_some() {
                s.push(CacheStrategy::ExactSpan);
            }
            s
        } else {
            for s in &cfg.prepare.strategies {
                match s {
                    CacheStrategy::ExactSpan if tc.is_none() => {
                        bail!("strategy exact_span needs TC labels; set paths.tc_labels")
                    }
                    CacheStrategy::Paragraph | CacheStrategy::Sentence if si.is_none() => {
                        bail!("strategy {} needs SI labels; set paths.si_labels", s.name())
                    }
                    _ => {}
                }
            }
            cfg.prepare.strategies.clone()
        };

        let ids: Vec<u32> = articles.iter().map(Article::id).collect();
        let (mut train_ids, mut dev_ids) = train_dev_split(&ids, cfg.seeds.split)?;
        train_ids.sort_unstable();
        dev_ids.sort_unstable();
        let dev_set: BTreeSet<u32> = dev_ids.iter().copied().collect();
        let split_of = |id: u32| if dev_set.contains(&id) { Split::Dev } else { Split::Train };

        let stage = self.ws.begin(PREPARE)?;
        let mut split_tsv = String::new();
        for a in &articles {
            let name = match split_of(a.id()) {
                Split::Train => "train",
                Split::Dev => "dev",
            };
            split_tsv.push_str(&format!("{}\t{name}\n", a.id()));
        }
        stage.write("split.tsv", split_tsv)?;

        let tok = RuleTokenizer::build(
            articles
                .iter()
                .filter(|a| split_of(a.id()) == Split::Train)
                .map(Article::text),
            cfg.encoder.vocab_size,
        );
        stage.write("vocab.txt", tok.vocab().to_file_string())?;

        for &strategy in &strategies {
            match strategy {
                CacheStrategy::Paragraph | CacheStrategy::Sentence => {
                    let split_strategy = if strategy == CacheStrategy::Paragraph {
                        propspan::segmenter::SplitStrategy::Paragraph
                    } else {
                        propspan::segmenter::SplitStrategy::Sentence
                    };
                    let gold = si.as_deref().unwrap_or_default();
                    let mut rows = Vec::new();
                    for a in &articles {
                        for item in label_segments(
                            std::slice::from_ref(a),
                            gold,
                            &tok,
                            split_strategy,
                            cfg.prepare.max_tokens,
                        ) {
                            rows.push(CachedSegment {
                                split: split_of(a.id()),
                                item,
                            });
                        }
                    }
                    stage.write(&format!("segments-{}.jsonl", strategy.name()), to_jsonl(&rows)?)?;
                    writeln!(out, "{} segments: {}", strategy.name(), rows.len())?;
                }
                CacheStrategy::ExactSpan => {
                    let labels = tc.as_deref().unwrap_or_default();
                    let mut by_article: BTreeMap<u32, Vec<TcLabel>> = BTreeMap::new();
                    for l in labels {
                        by_article.entry(l.article_id).or_default().push(*l);
                    }
                    let (mut train, mut dev) = (Vec::new(), Vec::new());
                    for a in &articles {
                        let Some(ls) = by_article.get(&a.id()) else { continue };
                        let samples = extract_exact_spans(a, ls)?;
                        match split_of(a.id()) {
                            Split::Train => train.extend(samples),
                            Split::Dev => dev.extend(samples),
                        }
                    }
                    stage.write("samples-train.jsonl", to_jsonl(&train)?)?;
                    stage.write("samples-dev.jsonl", to_jsonl(&dev)?)?;
                    writeln!(out, "exact_span samples: {} train, {} dev", train.len(), dev.len())?;
                }
            }
        }
        if let Some(labels) = &si {
            let mut dev: Vec<SiLabel> = labels.iter().filter(|l| dev_set.contains(&l.article_id)).copied().collect();
            dev.sort();
            stage.write("dev-gold-si.tsv", emit_si_predictions(&dev))?;
        }
        if let Some(labels) = &tc {
            let mut dev: Vec<TcLabel> = labels.iter().filter(|l| dev_set.contains(&l.article_id)).copied().collect();
            dev.sort();
            stage.write("dev-gold-tc.tsv", emit_tc_predictions(&dev))?;
        }
        let info = PrepareInfo {
            max_tokens: cfg.prepare.max_tokens,
            strategies,
            train_articles: train_ids.clone(),
            dev_articles: dev_ids.clone(),
            vocab_size: tok.vocab().len(),
        };
        stage.write("prepare.json", serde_json::to_string_pretty(&info)? + "\n")?;
        let dir = stage.commit(manifest)?;
        writeln!(
            out,
            "split: {} train, {} dev articles; vocabulary {}",
            train_ids.len(),
            dev_ids.len(),
            tok.vocab().len()
        )?;
        writeln!(out, "wrote {}", dir.display())?;
        Ok(())
    }

    fn apply_embeddings(&self, vocab: &Vocab, params: &mut ParamSet, manifest: &mut RunManifest) -> Result<()> {
        let Some(path) = &self.cfg.paths.embeddings else {
            return Ok(());
        };
        let table = params
            .get_mut("enc.tok_emb")
            .context("encoder has no token embedding table")?;
        let n = load_embeddings(&read_text(path)?, vocab, table).with_context(|| format!("in {}", path.display()))?;
        manifest.record_input(path)?;
        log::info!("initialized {n} token embeddings from {}", path.display());
        Ok(())
    }

    fn pretrain(&self, out: &mut dyn Write) -> Result<()> {
        let cfg = &self.cfg;
        let (_, info, tok) = self.prepared()?;
        let mut manifest = self.manifest("pretrain");
        let enc = cfg.encoder.build(tok.vocab().len())?;
        let mut corpus = self.articles_with_ids(&info.train_articles)?;
        if let Some(extra) = &cfg.paths.pretrain_corpus {
            corpus.extend(load_corpus(extra)?);
        }
        let pc = cfg.pretrain_config();
        let fractions = pc.checkpoint_fractions.clone();
        pc.checkpoint_steps()?;
        let mut params = init_encoder(&enc, pc.seed)?;
        params.extend(init_mlm_head(&enc, pc.seed.wrapping_add(1)));
        self.apply_embeddings(tok.vocab(), &mut params, &mut manifest)?;
        let run = pretrain_from(params, &corpus, &tok, &enc, &pc)?;

        let stage = self.ws.begin(PRETRAIN)?;
        let mut listing = String::from("fraction\tstep\tfile\n");
        let mut probe = format!("step\tprobe_loss\n0\t{:.6}\n", run.initial_probe_loss);
        for ((ck, f), loss) in run.checkpoints.iter().zip(&fractions).zip(&run.probe_losses) {
            let file = format!("ckpt-{:08}.psck", ck.step);
            stage.write(&file, ck.to_bytes()?)?;
            listing.push_str(&format!("{f}\t{}\t{file}\n", ck.step));
            probe.push_str(&format!("{}\t{loss:.6}\n", ck.step));
            writeln!(out, "checkpoint step {} (fraction {f}): probe loss {loss:.4}", ck.step)?;
        }
        let mut losses = String::from("step\tloss\n");
        for (i, l) in run.losses.iter().enumerate() {
            losses.push_str(&format!("{}\t{l:.6}\n", i + 1));
        }
        stage.write("checkpoints.tsv", listing)?;
        stage.write("probe.tsv", probe)?;
        stage.write("losses.tsv", losses)?;
        let dir = stage.commit(manifest)?;
        writeln!(out, "initial probe loss {:.4}", run.initial_probe_loss)?;
        writeln!(out, "wrote {}", dir.display())?;
        Ok(())
    }

    /// The pre-training checkpoint saved at configured fraction `fraction`.
    fn checkpoint_at(&self, fraction: f64, manifest: &mut RunManifest) -> Result<Checkpoint> {
        let dir = self.ws.completed(PRETRAIN, "propspan pretrain")?;
        let listing = read_text(&dir.join("checkpoints.tsv"))?;
        let mut available = Vec::new();
        for line in listing.lines().skip(1).filter(|l| !l.is_empty()) {
            let fields: Vec<&str> = line.split('\t').collect();
            let [f, _, file] = fields[..] else {
                bail!("malformed line in {}: {line:?}", dir.join("checkpoints.tsv").display());
            };
            let f: f64 = f.parse()?;
            if (f - fraction).abs() < 1e-9 {
                let path = dir.join(file);
                manifest.record_input(&path)?;
                return Checkpoint::load(&path).with_context(|| format!("cannot load {}", path.display()));
            }
            available.push(f.to_string());
        }
        bail!(
            "no pre-training checkpoint at fraction {fraction} (available: {}); adjust pretrain.checkpoint_fractions and rerun `propspan pretrain`",
            available.join(", ")
        )
    }

    fn encoder_init(
        &self,
        init: Init,
        fraction: f64,
        seed: u64,
        tok: &RuleTokenizer,
        manifest: &mut RunManifest,
    ) -> Result<EncoderInit> {
        match init {
            Init::Pretrained => {
                let ck = self.checkpoint_at(fraction, manifest)?;
                if ck.config.vocab_size != tok.vocab().len() {
                    bail!("pre-training checkpoints use a different vocabulary; rerun `propspan pretrain`");
                }
                Ok(EncoderInit::from_checkpoint(&ck))
            }
            Init::Fresh => {
                let enc = self.cfg.encoder.build(tok.vocab().len())?;
                let mut init = EncoderInit::fresh(enc, seed)?;
                self.apply_embeddings(tok.vocab(), &mut init.params, manifest)?;
                Ok(init)
            }
        }
    }

    fn train_si(&self, out: &mut dyn Write) -> Result<()> {
        let cfg = &self.cfg;
        let (prep, info, tok) = self.prepared()?;
        let mut manifest = self.manifest("train-si");
        let strategy = cfg.si.strategy;
        let cache_name = match strategy {
            propspan::segmenter::SplitStrategy::Paragraph => CacheStrategy::Paragraph,
            propspan::segmenter::SplitStrategy::Sentence => CacheStrategy::Sentence,
        };
        if !info.strategies.contains(&cache_name) {
            bail!(
                "prepare did not build {strategy} segments; add \"{}\" to prepare.strategies (with paths.si_labels set) and rerun `propspan prepare`",
                cache_name.name()
            );
        }
        let rows: Vec<CachedSegment> = read_jsonl(&prep.join(format!("segments-{}.jsonl", cache_name.name())))?;
        let train: Vec<LabelledSegment> = rows
            .into_iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.item)
            .collect();
        let dev_articles = self.articles_with_ids(&info.dev_articles)?;
        let dev_gold = read_si(&prep.join("dev-gold-si.tsv"))?;
        let mut si_cfg = cfg.si_config();
        si_cfg.max_tokens = info.max_tokens;
        let init = self.encoder_init(cfg.si.init, cfg.si.checkpoint_fraction, cfg.seeds.si, &tok, &mut manifest)?;
        let model = train_si(
            init,
            tok,
            &train,
            SiDev {
                articles: &dev_articles,
                labels: &dev_gold,
            },
            &si_cfg,
        )?;
        let stage = self.ws.begin(SI)?;
        stage.write("model.psck", model.to_checkpoint()?.to_bytes()?)?;
        stage.write("history.tsv", history_tsv(&model.history))?;
        let dir = stage.commit(manifest)?;
        writeln!(
            out,
            "best epoch {} of {}: dev span F1 {}",
            model.best_epoch,
            model.history.len(),
            propspan::eval::percent(model.dev_f1)
        )?;
        writeln!(out, "wrote {}", dir.display())?;
        Ok(())
    }

    fn tc_samples(&self, prep: &Path, info: &PrepareInfo) -> Result<(Vec<ClassifiedSample>, Vec<ClassifiedSample>)> {
        if !info.strategies.contains(&CacheStrategy::ExactSpan) {
            bail!("prepare did not extract exact spans; set paths.tc_labels and rerun `propspan prepare`");
        }
        Ok((
            read_jsonl(&prep.join("samples-train.jsonl"))?,
            read_jsonl(&prep.join("samples-dev.jsonl"))?,
        ))
    }

    fn train_tc(&self, ensemble: bool, out: &mut dyn Write) -> Result<()> {
        let cfg = &self.cfg;
        let (prep, info, tok) = self.prepared()?;
        let (train, dev) = self.tc_samples(&prep, &info)?;
        let mut manifest = self.manifest(if ensemble { "train-tc --ensemble" } else { "train-tc" });
        let tc_cfg = cfg.tc_config();
        if ensemble {
            let checkpoints = cfg
                .tc
                .member_fractions
                .iter()
                .map(|&f| self.checkpoint_at(f, &mut manifest))
                .collect::<Result<Vec<_>>>()?;
            let ens = build_ensemble(&checkpoints, &tok, &train, &dev, &tc_cfg)?;
            warn_all(&mut manifest, &ens.warnings);
            let stage = self.ws.begin(TC_ENSEMBLE)?;
            let mut listing = String::from("member\tsource_fraction\tbest_epoch\tdev_f1\tfile\n");
            for (i, m) in ens.members.iter().enumerate() {
                warn_all(&mut manifest, &m.warnings);
                let file = format!("member-{i}.psck");
                stage.write(&file, m.to_checkpoint()?.to_bytes()?)?;
                stage.write(&format!("history-{i}.tsv"), history_tsv(&m.history))?;
                let source = m.source_fraction.map_or_else(|| "-".into(), |f| f.to_string());
                listing.push_str(&format!("{i}\t{source}\t{}\t{:.6}\t{file}\n", m.best_epoch, m.dev_f1));
                writeln!(
                    out,
                    "member {i} (checkpoint fraction {source}): dev micro-F1 {}",
                    propspan::eval::percent(m.dev_f1)
                )?;
            }
            stage.write("members.tsv", listing)?;
            let dir = stage.commit(manifest)?;
            writeln!(out, "wrote {}", dir.display())?;
        } else {
            let init = self.encoder_init(cfg.tc.init, cfg.tc.checkpoint_fraction, cfg.seeds.tc, &tok, &mut manifest)?;
            let model = train_tc(init, tok, &train, &dev, &tc_cfg)?;
            warn_all(&mut manifest, &model.warnings);
            let stage = self.ws.begin(TC)?;
            stage.write("model.psck", model.to_checkpoint()?.to_bytes()?)?;
            stage.write("history.tsv", history_tsv(&model.history))?;
            let dir = stage.commit(manifest)?;
            writeln!(
                out,
                "best epoch {} of {}: dev micro-F1 {}",
                model.best_epoch,
                model.history.len(),
                propspan::eval::percent(model.dev_f1)
            )?;
            writeln!(out, "wrote {}", dir.display())?;
        }
        Ok(())
    }

    /// Articles given with `--articles`, or the dev split of the corpus.
    fn predict_articles(&self, dir: Option<&Path>) -> Result<Vec<Article>> {
        match dir {
            Some(d) => load_corpus(d),
            None => {
                let (_, info, _) = self.prepared()?;
                self.articles_with_ids(&info.dev_articles)
            }
        }
    }

    fn predict_si(&self, articles: Option<&Path>, out: &mut dyn Write) -> Result<()> {
        let dir = self.ws.completed(SI, "propspan train-si")?;
        let mut manifest = self.manifest("predict --subtask si");
        let path = dir.join("model.psck");
        manifest.record_input(&path)?;
        let model = SiModel::from_checkpoint(&Checkpoint::load(&path)?)?;
        let articles = self.predict_articles(articles)?;
        let mut preds = Vec::new();
        for a in &articles {
            preds.extend(predict_si(&model, a)?);
        }
        let stage = self.ws.begin(PREDICT_SI)?;
        stage.write("predictions.tsv", emit_si_predictions(&preds))?;
        let dir = stage.commit(manifest)?;
        writeln!(out, "{} spans in {} articles", preds.len(), articles.len())?;
        writeln!(out, "wrote {}", dir.join("predictions.tsv").display())?;
        Ok(())
    }

    fn tc_members(&self, ensemble: bool, manifest: &mut RunManifest) -> Result<Vec<TcModel>> {
        let (dir, files) = if ensemble {
            let dir = self.ws.completed(TC_ENSEMBLE, "propspan train-tc --ensemble")?;
            let listing = read_text(&dir.join("members.tsv"))?;
            let files: Vec<String> = listing
                .lines()
                .skip(1)
                .filter_map(|l| l.split('\t').nth(4).map(String::from))
                .collect();
            (dir, files)
        } else {
            (self.ws.completed(TC, "propspan train-tc")?, vec!["model.psck".to_string()])
        };
        files
            .iter()
            .map(|f| {
                let path = dir.join(f);
                manifest.record_input(&path)?;
                TcModel::from_checkpoint(&Checkpoint::load(&path)?).map_err(Into::into)
            })
            .collect()
    }

    fn predict_tc(&self, ensemble: bool, articles: Option<&Path>, spans: Option<&Path>, out: &mut dyn Write) -> Result<()> {
        let mut manifest = self.manifest(if ensemble {
            "predict --subtask tc --ensemble"
        } else {
            "predict --subtask tc"
        });
        let members = self.tc_members(ensemble, &mut manifest)?;
        let spans_path = match spans {
            Some(p) => p.to_path_buf(),
            None => {
                let (prep, info, _) = self.prepared()?;
                if !info.strategies.contains(&CacheStrategy::ExactSpan) {
                    bail!("no dev TC gold to take spans from; pass --spans or set paths.tc_labels and rerun `propspan prepare`");
                }
                prep.join("dev-gold-tc.tsv")
            }
        };
        manifest.record_input(&spans_path)?;
        let keys = read_span_keys(&spans_path)?;
        let articles = match articles {
            Some(d) => load_corpus(d)?,
            None => load_corpus(&self.cfg.paths.articles)?,
        };
        validate_against(keys.iter().copied(), &articles).with_context(|| format!("in {}", spans_path.display()))?;
        let by_id: BTreeMap<u32, &Article> = articles.iter().map(|a| (a.id(), a)).collect();
        let samples = keys
            .iter()
            .map(|&(id, span)| {
                Ok(ClassifiedSample {
                    article_id: id,
                    span,
                    surface: by_id[&id].span_text(span)?.to_string(),
                    technique: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let preds: Vec<TcPrediction> = if members.len() == 1 {
            single_model_predictions(&members[0], &samples)?
        } else {
            Ensemble::new(members)?.predict(&samples)?
        };
        let labels: Vec<TcLabel> = if self.cfg.tc.resolve_overlaps {
            let resolved = resolve_overlaps_detailed(&preds);
            let fallbacks = resolved.iter().filter(|r| r.fallback).count();
            if fallbacks > 0 {
                warn_all(
                    &mut manifest,
                    &[format!("{fallbacks} spans kept a technique shared with an overlapping span: all 14 were taken")],
                );
            }
            resolved.into_iter().map(|r| r.label).collect()
        } else {
            preds
                .iter()
                .map(|p| TcLabel {
                    article_id: p.article_id,
                    technique: p.technique,
                    span: p.span,
                })
                .collect()
        };
        let stage = self.ws.begin(PREDICT_TC)?;
        stage.write("predictions.tsv", emit_tc_predictions(&labels))?;
        stage.write("predictions.jsonl", to_jsonl(&preds)?)?;
        let dir = stage.commit(manifest)?;
        writeln!(out, "{} spans classified", labels.len())?;
        writeln!(out, "wrote {}", dir.join("predictions.tsv").display())?;
        Ok(())
    }

    fn default_file(&self, stage: &str, command: &str, file: &str) -> Result<PathBuf> {
        let path = self.ws.completed(stage, command)?.join(file);
        if !path.is_file() {
            bail!("{} does not exist; run `{command}` first", path.display());
        }
        Ok(path)
    }

    fn tc_report(pred: &Path, gold: &Path) -> Result<ClassReport> {
        let gold = read_tc(gold)?;
        let pred = read_tc(pred)?;
        if pred.is_empty() {
            return Ok(gold_only_report(&gold));
        }
        Ok(per_class_report(&pred, &gold)?)
    }

    fn score(&self, subtask: Subtask, pred: Option<&Path>, gold: Option<&Path>, out: &mut dyn Write) -> Result<()> {
        let mut manifest = self.manifest(match subtask {
            Subtask::Si => "score --subtask si",
            Subtask::Tc => "score --subtask tc",
        });
        let (stage_name, predict_cmd, gold_file) = match subtask {
            Subtask::Si => (PREDICT_SI, "propspan predict --subtask si", "dev-gold-si.tsv"),
            Subtask::Tc => (PREDICT_TC, "propspan predict --subtask tc", "dev-gold-tc.tsv"),
        };
        let pred = match pred {
            Some(p) => p.to_path_buf(),
            None => self.default_file(stage_name, predict_cmd, "predictions.tsv")?,
        };
        let gold = match gold {
            Some(g) => g.to_path_buf(),
            None => self.default_file(PREPARE, "propspan prepare", gold_file)?,
        };
        manifest.record_input(&pred)?;
        manifest.record_input(&gold)?;
        match subtask {
            Subtask::Si => {
                let score: SiScore = si_score(&read_si(&pred)?, &read_si(&gold)?);
                let text = format_si_score(&score);
                write!(out, "{text}")?;
                let stage = self.ws.begin(SCORE_SI)?;
                stage.write("score.json", serde_json::to_string_pretty(&score)? + "\n")?;
                stage.write("score.txt", text)?;
                stage.commit(manifest)?;
            }
            Subtask::Tc => {
                let report = Self::tc_report(&pred, &gold)?;
                let text = format_class_report(&report);
                let table = render_class_table(&report);
                write!(out, "{text}\n{table}")?;
                let stage = self.ws.begin(SCORE_TC)?;
                stage.write("score.json", serde_json::to_string_pretty(&report)? + "\n")?;
                stage.write("score.txt", text)?;
                stage.write("table.txt", table)?;
                stage.commit(manifest)?;
            }
        }
        Ok(())
    }

    fn report(&self, pred: Option<&Path>, gold: Option<&Path>, out: &mut dyn Write) -> Result<()> {
        let mut manifest = self.manifest("report");
        let report = match (pred, gold) {
            (_, Some(gold)) => {
                manifest.record_input(gold)?;
                match pred {
                    Some(p) => {
                        manifest.record_input(p)?;
                        Self::tc_report(p, gold)?
                    }
                    None => gold_only_report(&read_tc(gold)?),
                }
            }
            (Some(_), None) => bail!("--pred needs --gold"),
            (None, None) => {
                let path = self.default_file(SCORE_TC, "propspan score --subtask tc", "score.json")?;
                manifest.record_input(&path)?;
                read_json(&path)?
            }
        };
        let table = render_class_table(&report);
        write!(out, "{table}")?;
        let stage = self.ws.begin(REPORT)?;
        stage.write("report.txt", &table)?;
        let dir = stage.commit(manifest)?;
        writeln!(out, "wrote {}", dir.join("report.txt").display())?;
        Ok(())
    }
}
