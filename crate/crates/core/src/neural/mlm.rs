use std::time::Instant;

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::encoder::{dense, encode_on_tape, init_encoder, Dropout, EncoderConfig};
use super::optim::{warmup_steps, RAdam};
use super::tape::{ParamSet, Tape, Var};
use crate::corpus::{derive_seed, seeded_rng, Article};
use crate::error::{Error, Result};
use crate::segmenter::{split_paragraphs, Tokenizer, Vocab};

pub const MASK_FRACTION: f64 = 0.15;
pub const DEFAULT_CHECKPOINT_FRACTIONS: [f64; 5] = [0.175, 0.40, 0.60, 0.75, 1.0];

/// One masked sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmBatch {
    /// Ids fed to the encoder, with replacements applied.
    pub input_ids: Vec<u32>,
    /// Selected positions, ascending.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub targets: Vec<u32>,
}

fn maskable(id: u32) -> bool {
    id == Vocab::UNK || id >= Vocab::RESERVED
}

/// Number of positions selected out of `maskable` candidates.
pub fn mask_count(maskable: usize) -> usize {
    ((maskable as f64 * MASK_FRACTION).round() as usize).max(1)
}

/// Selects positions for masked-LM training. Of the selected positions 80%
/// become `[MASK]`, 10% a random non-reserved id and 10% stay unchanged.
pub fn mask_for_mlm(ids: &[u32], vocab_size: usize, seed: u64) -> Result<MlmBatch> {
    let candidates: Vec<usize> = (0..ids.len()).filter(|&i| maskable(ids[i])).collect();
    if candidates.is_empty() {
        return Err(Error::Contract("sequence has no maskable token".into()));
    }
    if vocab_size <= Vocab::RESERVED as usize {
        return Err(Error::Contract(format!("vocabulary of {vocab_size} has no regular ids")));
    }
    let mut rng = seeded_rng(seed);
    let k = mask_count(candidates.len());
    let mut positions: Vec<usize> = index::sample(&mut rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    positions.sort_unstable();
    let mut input_ids = ids.to_vec();
    let targets = positions.iter().map(|&p| ids[p]).collect();
    for &p in &positions {
        let u: f64 = rng.random();
        if u < 0.8 {
            input_ids[p] = Vocab::MASK;
        } else if u < 0.9 {
            input_ids[p] = rng.random_range(Vocab::RESERVED..vocab_size as u32);
        }
    }
    Ok(MlmBatch {
        input_ids,
        positions,
        targets,
    })
}

/// Decoder parameters `mlm.*`: dense d→d, layer norm, dense d→vocab.
pub fn init_mlm_head(cfg: &EncoderConfig, seed: u64) -> ParamSet {
    let mut rng = seeded_rng(seed);
    let mut p = ParamSet::new();
    dense(&mut p, &mut rng, "mlm.transform", cfg.hidden_dim, cfg.hidden_dim);
    p.insert("mlm.ln.g", Array2::ones((1, cfg.hidden_dim)));
    p.insert("mlm.ln.b", Array2::zeros((1, cfg.hidden_dim)));
    dense(&mut p, &mut rng, "mlm.decoder", cfg.hidden_dim, cfg.vocab_size);
    p
}

/// Mean cross-entropy over the masked positions of `batch`.
pub fn mlm_loss_on_tape(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    batch: &MlmBatch,
    dropout: Option<Dropout>,
) -> Result<Var> {
    let enc = encode_on_tape(tape, cfg, &batch.input_ids, dropout)?;
    // +1 skips [CLS]
    let rows = tape.gather(enc.features, batch.positions.iter().map(|p| p + 1).collect());
    let w = tape.param("mlm.transform.w")?;
    let b = tape.param("mlm.transform.b")?;
    let h = tape.linear(rows, w, b);
    let h = tape.gelu(h);
    let g = tape.param("mlm.ln.g")?;
    let beta = tape.param("mlm.ln.b")?;
    let h = tape.layer_norm(h, g, beta);
    let w = tape.param("mlm.decoder.w")?;
    let b = tape.param("mlm.decoder.b")?;
    let logits = tape.linear(h, w, b);
    let targets = batch.targets.iter().map(|&t| t as usize).collect();
    let total = tape.cross_entropy(logits, targets);
    Ok(tape.scale(total, 1.0 / batch.positions.len() as f64))
}

/// Average inference-mode masked-LM loss over `batches`.
pub fn mlm_loss(cfg: &EncoderConfig, params: &ParamSet, batches: &[MlmBatch]) -> Result<f64> {
    let mut total = 0.0;
    for b in batches {
        let mut tape = Tape::new(params);
        let l = mlm_loss_on_tape(&mut tape, cfg, b, None)?;
        total += tape.scalar(l);
    }
    Ok(total / batches.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub total_steps: u64,
    pub checkpoint_fractions: Vec<f64>,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            checkpoint_fractions: DEFAULT_CHECKPOINT_FRACTIONS.to_vec(),
            lr: 1e-4,
            batch_size: 8,
            seed: 13,
        }
    }
}

impl PretrainConfig {
    /// Steps at which checkpoints are taken, in order.
    pub fn checkpoint_steps(&self) -> Result<Vec<u64>> {
        let fr = &self.checkpoint_fractions;
        if fr.is_empty() {
            return Err(Error::Contract("no checkpoint fractions".into()));
        }
        if fr.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::Contract(format!("checkpoint fractions {fr:?} outside (0, 1]")));
        }
        if fr.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Contract(format!("checkpoint fractions {fr:?} not sorted")));
        }
        Ok(fr
            .iter()
            .map(|&f| ((f * self.total_steps as f64).round() as u64).max(1))
            .collect())
    }
}

/// Result of a pre-training run.
#[derive(Debug, Clone)]
pub struct PretrainRun {
    pub checkpoints: Vec<Checkpoint>,
    /// Training loss of every step, in order.
    pub losses: Vec<f64>,
    /// Loss on a fixed probe set before training.
    pub initial_probe_loss: f64,
    /// Loss on the same probe set at each checkpoint.
    pub probe_losses: Vec<f64>,
}

fn pretraining_sequences(corpus: &[Article], tok: &dyn Tokenizer, cfg: &EncoderConfig) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for article in corpus {
        for seg in split_paragraphs(article, tok, cfg.max_tokens()) {
            let ids = tok.ids(&seg.tokens);
            if ids.iter().any(|&id| maskable(id)) {
                out.push(ids);
            }
        }
    }
    out
}

/// Masked-LM pre-training of a fresh encoder, emitting a checkpoint at each
/// configured fraction of `total_steps`. Checkpoints carry the `mlm.*`
/// decoder so training can be resumed.
pub fn pretrain_mlm(
    corpus: &[Article],
    tok: &dyn Tokenizer,
    cfg: &EncoderConfig,
    pc: &PretrainConfig,
) -> Result<PretrainRun> {
    let mut params = init_encoder(cfg, pc.seed)?;
    params.extend(init_mlm_head(cfg, pc.seed.wrapping_add(1)));
    pretrain_from(params, corpus, tok, cfg, pc)
}

/// As [`pretrain_mlm`], starting from existing parameters.
pub fn pretrain_from(
    mut params: ParamSet,
    corpus: &[Article],
    tok: &dyn Tokenizer,
    cfg: &EncoderConfig,
    pc: &PretrainConfig,
) -> Result<PretrainRun> {
    if corpus.is_empty() {
        return Err(Error::Contract("pre-training corpus is empty".into()));
    }
    if pc.total_steps == 0 || pc.batch_size == 0 {
        return Err(Error::Contract("total_steps and batch_size must be positive".into()));
    }
    if tok.vocab().len() > cfg.vocab_size {
        return Err(Error::Contract(format!(
            "tokenizer vocabulary of {} exceeds encoder vocab_size {}",
            tok.vocab().len(),
            cfg.vocab_size
        )));
    }
    let schedule = pc.checkpoint_steps()?;
    let sequences = pretraining_sequences(corpus, tok, cfg);
    if sequences.is_empty() {
        return Err(Error::Contract("pre-training corpus has no maskable token".into()));
    }
    let probe: Vec<MlmBatch> = sequences
        .iter()
        .take(32)
        .enumerate()
        .map(|(i, s)| mask_for_mlm(s, cfg.vocab_size, derive_seed(pc.seed, u64::MAX, i as u64)))
        .collect::<Result<_>>()?;
    let initial_probe_loss = mlm_loss(cfg, &params, &probe)?;

    let mut opt = RAdam::new(pc.lr, warmup_steps(pc.total_steps));
    let mut rng = seeded_rng(pc.seed.wrapping_add(2));
    let mut losses = Vec::with_capacity(pc.total_steps as usize);
    let mut checkpoints = Vec::with_capacity(schedule.len());
    let mut probe_losses = Vec::with_capacity(schedule.len());
    let started = Instant::now();
    let mut next = 0;
    for step in 1..=pc.total_steps {
        let batch: Vec<MlmBatch> = (0..pc.batch_size)
            .map(|i| {
                let s = &sequences[rng.random_range(0..sequences.len())];
                mask_for_mlm(s, cfg.vocab_size, derive_seed(pc.seed, step, i as u64))
            })
            .collect::<Result<_>>()?;
        let mut grads_total: Option<super::tape::Grads> = None;
        let mut loss = 0.0;
        for b in &batch {
            let mut tape = Tape::new(&params);
            let dropout = Some(Dropout {
                rate: cfg.dropout,
                rng: &mut rng,
            });
            let l = mlm_loss_on_tape(&mut tape, cfg, b, dropout)?;
            loss += tape.scalar(l);
            let g = tape.backward(l);
            match grads_total.as_mut() {
                None => grads_total = Some(g),
                Some(acc) => {
                    for (k, v) in g {
                        *acc.entry(k).or_insert_with(|| Array2::zeros(v.raw_dim())) += &v;
                    }
                }
            }
        }
        let mut grads = grads_total.expect("batch is nonempty");
        let inv = 1.0 / batch.len() as f64;
        for g in grads.values_mut() {
            *g *= inv;
        }
        opt.step(&mut params, &grads)?;
        losses.push(loss * inv);
        while next < schedule.len() && schedule[next] == step {
            log::info!(
                "pretrain step {step}/{}: loss {:.4} ({:.1?})",
                pc.total_steps,
                loss * inv,
                started.elapsed()
            );
            probe_losses.push(mlm_loss(cfg, &params, &probe)?);
            checkpoints.push(Checkpoint::new(cfg.clone(), params.clone(), step, pc.total_steps)?);
            next += 1;
        }
    }
    Ok(PretrainRun {
        checkpoints,
        losses,
        initial_probe_loss,
        probe_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::RuleTokenizer;

    fn ids(n: usize) -> Vec<u32> {
        (0..n).map(|i| Vocab::RESERVED + (i % 40) as u32).collect()
    }

    #[test]
    fn selection_counts() {
        assert_eq!(mask_for_mlm(&ids(100), 60, 0).unwrap().positions.len(), 15);
        assert_eq!(mask_for_mlm(&ids(3), 60, 0).unwrap().positions.len(), 1);
        assert_eq!(mask_count(10), 2);
    }

    #[test]
    fn specials_are_never_selected() {
        let mut seq = ids(30);
        seq.insert(0, Vocab::CLS);
        seq.push(Vocab::SEP);
        seq.push(Vocab::PAD);
        for seed in 0..200 {
            let b = mask_for_mlm(&seq, 60, seed).unwrap();
            for (&p, &t) in b.positions.iter().zip(&b.targets) {
                assert!(maskable(seq[p]));
                assert_eq!(seq[p], t);
            }
            for (i, (&a, &o)) in b.input_ids.iter().zip(&seq).enumerate() {
                if a != o {
                    assert!(b.positions.contains(&i));
                }
            }
        }
    }

    #[test]
    fn nothing_to_mask_is_an_error() {
        assert!(mask_for_mlm(&[Vocab::CLS, Vocab::PAD], 60, 0).is_err());
        assert!(mask_for_mlm(&[], 60, 0).is_err());
    }

    #[test]
    fn replacement_split_is_close_to_80_10_10() {
        let seq = ids(100);
        let (mut masked, mut random, mut kept, mut total) = (0usize, 0usize, 0usize, 0usize);
        for seed in 0..10_000 {
            let b = mask_for_mlm(&seq, 60, seed).unwrap();
            for &p in &b.positions {
                total += 1;
                match b.input_ids[p] {
                    Vocab::MASK => masked += 1,
                    x if x == seq[p] => kept += 1,
                    _ => random += 1,
                }
            }
        }
        let f = |c: usize| c as f64 / total as f64;
        assert!((0.78..=0.82).contains(&f(masked)), "{}", f(masked));
        // a random draw can coincide with the original id, so "kept" is
        // slightly above 10%
        assert!((0.08..=0.12).contains(&f(random)), "{}", f(random));
        assert!((0.08..=0.12).contains(&f(kept)), "{}", f(kept));
    }

    #[test]
    fn loss_ignores_unmasked_targets() {
        let cfg = EncoderConfig {
            hidden_dim: 8,
            embed_dim: 8,
            layers: 1,
            heads: 2,
            max_seq_len: 20,
            ..EncoderConfig::desk(30)
        };
        let mut params = init_encoder(&cfg, 1).unwrap();
        params.extend(init_mlm_head(&cfg, 2));
        let seq: Vec<u32> = (0..12).map(|i| 5 + i).collect();
        let batch = mask_for_mlm(&seq, 30, 9).unwrap();
        let base = mlm_loss(&cfg, &params, std::slice::from_ref(&batch)).unwrap();
        for free in (0..seq.len()).filter(|i| !batch.positions.contains(i)) {
            let mut perturbed = seq.clone();
            perturbed[free] = 29;
            let mut b2 = batch.clone();
            b2.targets = b2.positions.iter().map(|&p| perturbed[p]).collect();
            assert_eq!(mlm_loss(&cfg, &params, &[b2]).unwrap(), base);
        }
        // a masked target does matter
        let mut b2 = batch.clone();
        b2.targets[0] = if b2.targets[0] == 7 { 8 } else { 7 };
        assert_ne!(mlm_loss(&cfg, &params, &[b2]).unwrap(), base);
    }

    #[test]
    fn schedule_scales_with_total_steps() {
        let mut pc = PretrainConfig {
            total_steps: 2_000_000,
            ..Default::default()
        };
        assert_eq!(
            pc.checkpoint_steps().unwrap(),
            vec![350_000, 800_000, 1_200_000, 1_500_000, 2_000_000]
        );
        pc.total_steps = 2000;
        assert_eq!(pc.checkpoint_steps().unwrap(), vec![350, 800, 1200, 1500, 2000]);
        pc.checkpoint_fractions = vec![0.5, 0.2];
        assert!(pc.checkpoint_steps().is_err());
        pc.checkpoint_fractions = vec![0.0, 1.0];
        assert!(pc.checkpoint_steps().is_err());
    }

    #[test]
    fn short_run_reduces_probe_loss_and_is_deterministic() {
        let texts: Vec<String> = (0..12)
            .map(|i| format!("the cat {} sat on the mat. the dog {} ran to the park.", i % 3, i % 4))
            .collect();
        let corpus: Vec<Article> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Article::new(i as u32 + 1, t.clone()).unwrap())
            .collect();
        let tok = RuleTokenizer::build(texts.iter().map(String::as_str), 100);
        let cfg = EncoderConfig {
            hidden_dim: 16,
            embed_dim: 16,
            layers: 1,
            heads: 2,
            max_seq_len: 40,
            dropout: 0.0,
            ..EncoderConfig::desk(tok.vocab().len())
        };
        let pc = PretrainConfig {
            total_steps: 60,
            checkpoint_fractions: vec![0.5, 1.0],
            lr: 1e-2,
            batch_size: 2,
            seed: 5,
        };
        let run = pretrain_mlm(&corpus, &tok, &cfg, &pc).unwrap();
        assert_eq!(run.losses.len(), 60);
        let steps: Vec<u64> = run.checkpoints.iter().map(|c| c.step).collect();
        assert_eq!(steps, vec![30, 60]);
        assert!(run.probe_losses[1] < run.initial_probe_loss);
        let again = pretrain_mlm(&corpus, &tok, &cfg, &pc).unwrap();
        assert_eq!(
            run.checkpoints[1].to_bytes().unwrap(),
            again.checkpoints[1].to_bytes().unwrap()
        );
        assert!(pretrain_mlm(&[], &tok, &cfg, &pc).is_err());
    }
}
