use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{ParamSet, Tape, Var};
use crate::corpus::seeded_rng;
use crate::error::{Error, Result};
use crate::segmenter::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Transformer,
    Bilstm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub vocab_size: usize,
    /// Width of the per-token features (`d`).
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Longest input including the two special positions.
    pub max_seq_len: usize,
    pub dropout: f64,
    /// Width of the token embedding table; differs from `hidden_dim` only for
    /// the recurrent encoder fed with external embeddings.
    pub embed_dim: usize,
}

impl EncoderConfig {
    /// Small transformer that trains in seconds on one core.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            kind: EncoderKind::Transformer,
            vocab_size,
            hidden_dim: 64,
            layers: 2,
            heads: 2,
            max_seq_len: 130,
            dropout: 0.1,
            embed_dim: 64,
        }
    }

    /// BERT-base dimensions.
    pub fn full_scale(vocab_size: usize) -> Self {
        Self {
            kind: EncoderKind::Transformer,
            vocab_size,
            hidden_dim: 768,
            layers: 12,
            heads: 12,
            max_seq_len: 130,
            dropout: 0.1,
            embed_dim: 768,
        }
    }

    pub fn bilstm(vocab_size: usize, hidden_dim: usize, embed_dim: usize) -> Self {
        Self {
            kind: EncoderKind::Bilstm,
            vocab_size,
            hidden_dim,
            layers: 1,
            heads: 1,
            max_seq_len: 130,
            dropout: 0.1,
            embed_dim,
        }
    }

    /// Real tokens that fit next to the two special positions.
    pub fn max_tokens(&self) -> usize {
        self.max_seq_len.saturating_sub(2)
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.hidden_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(format!("encoder config: {m}")));
        if self.hidden_dim == 0 || self.vocab_size <= Vocab::RESERVED as usize {
            return bad("hidden_dim and vocab_size must be positive".into());
        }
        if self.max_seq_len < 4 {
            return bad("max_seq_len must leave room for two special positions".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match self.kind {
            EncoderKind::Transformer => {
                if self.heads == 0 || self.hidden_dim % self.heads != 0 {
                    return bad(format!(
                        "hidden_dim {} not divisible by {} heads",
                        self.hidden_dim, self.heads
                    ));
                }
                if self.embed_dim != self.hidden_dim {
                    return bad("transformer embeddings must match hidden_dim".into());
                }
            }
            EncoderKind::Bilstm => {
                if self.embed_dim == 0 {
                    return bad("embed_dim must be positive".into());
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

pub(crate) const INIT_STD: f64 = 0.02;

pub(crate) fn dense(params: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
    params.insert(format!("{name}.w"), normal_matrix(rng, fan_in, fan_out, INIT_STD));
    params.insert(format!("{name}.b"), Array2::zeros((1, fan_out)));
}

fn layer_norm_params(params: &mut ParamSet, name: &str, dim: usize) {
    params.insert(format!("{name}.g"), Array2::ones((1, dim)));
    params.insert(format!("{name}.b"), Array2::zeros((1, dim)));
}

/// Freshly initialized encoder parameters, all named `enc.*`.
pub fn init_encoder(cfg: &EncoderConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = seeded_rng(seed);
    let mut p = ParamSet::new();
    let d = cfg.hidden_dim;
    p.insert("enc.tok_emb", normal_matrix(&mut rng, cfg.vocab_size, cfg.embed_dim, INIT_STD));
    match cfg.kind {
        EncoderKind::Transformer => {
            p.insert("enc.pos_emb", normal_matrix(&mut rng, cfg.max_seq_len, d, INIT_STD));
            layer_norm_params(&mut p, "enc.emb_ln", d);
            for l in 0..cfg.layers {
                for proj in ["q", "k", "v", "o"] {
                    dense(&mut p, &mut rng, &format!("enc.l{l}.{proj}"), d, d);
                }
                layer_norm_params(&mut p, &format!("enc.l{l}.ln1"), d);
                dense(&mut p, &mut rng, &format!("enc.l{l}.ff1"), d, cfg.ffn_dim());
                dense(&mut p, &mut rng, &format!("enc.l{l}.ff2"), cfg.ffn_dim(), d);
                layer_norm_params(&mut p, &format!("enc.l{l}.ln2"), d);
            }
        }
        EncoderKind::Bilstm => {
            for dir in ["fw", "bw"] {
                p.insert(
                    format!("enc.lstm.{dir}.w"),
                    normal_matrix(&mut rng, cfg.embed_dim, 4 * d, 0.1),
                );
                p.insert(format!("enc.lstm.{dir}.u"), normal_matrix(&mut rng, d, 4 * d, 0.1));
                let mut bias = Array2::zeros((1, 4 * d));
                // forget gate starts open
                bias.slice_mut(ndarray::s![.., d..2 * d]).fill(1.0);
                p.insert(format!("enc.lstm.{dir}.b"), bias);
            }
            dense(&mut p, &mut rng, "enc.proj", 2 * d, d);
        }
    }
    Ok(p)
}

/// Dropout state for a training pass; `None` means inference.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

fn apply_dropout(tape: &mut Tape, x: Var, dropout: &mut Option<Dropout>) -> Var {
    match dropout {
        Some(Dropout { rate, rng }) if *rate > 0.0 => {
            let keep = 1.0 - *rate;
            let shape = tape.value(x).raw_dim();
            let mask = Array2::from_shape_fn(shape, |_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            let m = tape.input(mask);
            tape.mul(x, m)
        }
        _ => x,
    }
}

/// Output of one encoder pass.
pub struct Encoded {
    /// `(T + 2) × d` features, specials included.
    pub features: Var,
    /// Attention probabilities per layer and head (transformer only).
    pub attention: Vec<Var>,
}

/// Runs the encoder on `[CLS] ids [SEP]`.
pub fn encode_on_tape(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    ids: &[u32],
    mut dropout: Option<Dropout>,
) -> Result<Encoded> {
    if ids.len() + 2 > cfg.max_seq_len {
        return Err(Error::Contract(format!(
            "{} tokens plus specials exceed max_seq_len {}",
            ids.len(),
            cfg.max_seq_len
        )));
    }
    let mut rows = Vec::with_capacity(ids.len() + 2);
    rows.push(Vocab::CLS as usize);
    for &id in ids {
        let id = id as usize;
        if id >= cfg.vocab_size {
            return Err(Error::Contract(format!(
                "token id {id} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        rows.push(id);
    }
    rows.push(Vocab::SEP as usize);
    match cfg.kind {
        EncoderKind::Transformer => transformer(tape, cfg, rows, &mut dropout),
        EncoderKind::Bilstm => bilstm(tape, cfg, rows, &mut dropout),
    }
}

fn linear(tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
    let w = tape.param(&format!("{name}.w"))?;
    let b = tape.param(&format!("{name}.b"))?;
    Ok(tape.linear(x, w, b))
}

fn layer_norm(tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
    let g = tape.param(&format!("{name}.g"))?;
    let b = tape.param(&format!("{name}.b"))?;
    Ok(tape.layer_norm(x, g, b))
}

fn transformer(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    rows: Vec<usize>,
    dropout: &mut Option<Dropout>,
) -> Result<Encoded> {
    let t = rows.len();
    let tok_table = tape.param("enc.tok_emb")?;
    let pos_table = tape.param("enc.pos_emb")?;
    let tok = tape.gather(tok_table, rows);
    let pos = tape.rows(pos_table, 0, t);
    let x = tape.add(tok, pos);
    let x = layer_norm(tape, x, "enc.emb_ln")?;
    let mut x = apply_dropout(tape, x, dropout);

    let head_dim = cfg.hidden_dim / cfg.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut attention = Vec::with_capacity(cfg.layers * cfg.heads);
    for l in 0..cfg.layers {
        let q = linear(tape, x, &format!("enc.l{l}.q"))?;
        let k = linear(tape, x, &format!("enc.l{l}.k"))?;
        let v = linear(tape, x, &format!("enc.l{l}.v"))?;
        let mut contexts = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let qh = tape.cols(q, lo, hi);
            let kh = tape.cols(k, lo, hi);
            let vh = tape.cols(v, lo, hi);
            let scores = tape.matmul_t(qh, kh);
            let scores = tape.scale(scores, scale);
            let probs = tape.softmax_rows(scores);
            attention.push(probs);
            contexts.push(tape.matmul(probs, vh));
        }
        let ctx = if contexts.len() == 1 {
            contexts[0]
        } else {
            tape.concat_cols(contexts)
        };
        let attn = linear(tape, ctx, &format!("enc.l{l}.o"))?;
        let attn = apply_dropout(tape, attn, dropout);
        let res = tape.add(x, attn);
        x = layer_norm(tape, res, &format!("enc.l{l}.ln1"))?;

        let ff = linear(tape, x, &format!("enc.l{l}.ff1"))?;
        let ff = tape.gelu(ff);
        let ff = linear(tape, ff, &format!("enc.l{l}.ff2"))?;
        let ff = apply_dropout(tape, ff, dropout);
        let res = tape.add(x, ff);
        x = layer_norm(tape, res, &format!("enc.l{l}.ln2"))?;
    }
    Ok(Encoded {
        features: x,
        attention,
    })
}

/// One direction of an LSTM over the rows of `inputs`; returns the hidden
/// state of every position in input order.
fn lstm_direction(
    tape: &mut Tape,
    inputs: Var,
    len: usize,
    d: usize,
    dir: &str,
    reverse: bool,
) -> Result<Vec<Var>> {
    let w = tape.param(&format!("enc.lstm.{dir}.w"))?;
    let u = tape.param(&format!("enc.lstm.{dir}.u"))?;
    let b = tape.param(&format!("enc.lstm.{dir}.b"))?;
    let projected = tape.linear(inputs, w, b);
    let mut h = tape.input(Array2::zeros((1, d)));
    let mut c = tape.input(Array2::zeros((1, d)));
    let mut out = vec![h; len];
    let order: Vec<usize> = if reverse {
        (0..len).rev().collect()
    } else {
        (0..len).collect()
    };
    for pos in order {
        let xw = tape.rows(projected, pos, pos + 1);
        let hu = tape.matmul(h, u);
        let gates = tape.add(xw, hu);
        let i = tape.cols(gates, 0, d);
        let i = tape.sigmoid(i);
        let f = tape.cols(gates, d, 2 * d);
        let f = tape.sigmoid(f);
        let g = tape.cols(gates, 2 * d, 3 * d);
        let g = tape.tanh(g);
        let o = tape.cols(gates, 3 * d, 4 * d);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, c);
        let write = tape.mul(i, g);
        c = tape.add(keep, write);
        let squashed = tape.tanh(c);
        h = tape.mul(o, squashed);
        out[pos] = h;
    }
    Ok(out)
}

fn bilstm(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    rows: Vec<usize>,
    dropout: &mut Option<Dropout>,
) -> Result<Encoded> {
    let len = rows.len();
    let d = cfg.hidden_dim;
    let table = tape.param("enc.tok_emb")?;
    let emb = tape.gather(table, rows);
    let emb = apply_dropout(tape, emb, dropout);
    let forward = lstm_direction(tape, emb, len, d, "fw", false)?;
    let backward = lstm_direction(tape, emb, len, d, "bw", true)?;
    let fw = tape.concat_rows(forward);
    let bw = tape.concat_rows(backward);
    let both = tape.concat_cols(vec![fw, bw]);
    let both = apply_dropout(tape, both, dropout);
    let features = linear(tape, both, "enc.proj")?;
    Ok(Encoded {
        features,
        attention: Vec::new(),
    })
}

/// Inference-mode features for `[CLS] ids [SEP]`, shape `(len + 2) × d`.
pub fn encode(cfg: &EncoderConfig, params: &ParamSet, ids: &[u32]) -> Result<Array2<f64>> {
    let mut tape = Tape::new(params);
    let out = encode_on_tape(&mut tape, cfg, ids, None)?;
    Ok(tape.value(out.features).clone())
}

/// Inference-mode attention probabilities, one `(len + 2) × (len + 2)`
/// matrix per layer and head.
pub fn attention_maps(cfg: &EncoderConfig, params: &ParamSet, ids: &[u32]) -> Result<Vec<Array2<f64>>> {
    let mut tape = Tape::new(params);
    let out = encode_on_tape(&mut tape, cfg, ids, None)?;
    Ok(out.attention.iter().map(|&v| tape.value(v).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::heads::{init_crf, init_si_head, si_loss_on_tape};

    fn small(kind: EncoderKind) -> EncoderConfig {
        match kind {
            EncoderKind::Transformer => EncoderConfig {
                hidden_dim: 8,
                embed_dim: 8,
                layers: 2,
                heads: 2,
                max_seq_len: 12,
                ..EncoderConfig::desk(20)
            },
            EncoderKind::Bilstm => EncoderConfig::bilstm(20, 6, 4),
        }
    }

    #[test]
    fn shapes_and_determinism() {
        for kind in [EncoderKind::Transformer, EncoderKind::Bilstm] {
            let cfg = small(kind);
            let p = init_encoder(&cfg, 1).unwrap();
            for t in 0..=cfg.max_tokens() {
                let ids: Vec<u32> = (0..t as u32).map(|i| 5 + i % 15).collect();
                let a = encode(&cfg, &p, &ids).unwrap();
                assert_eq!(a.dim(), (t + 2, cfg.hidden_dim));
                assert_eq!(a, encode(&cfg, &p, &ids).unwrap());
            }
            let too_long = vec![5; cfg.max_tokens() + 1];
            assert!(matches!(encode(&cfg, &p, &too_long), Err(Error::Contract(_))));
            assert!(encode(&cfg, &p, &[20]).is_err());
        }
    }

    #[test]
    fn swapping_tokens_changes_their_features() {
        for kind in [EncoderKind::Transformer, EncoderKind::Bilstm] {
            let cfg = small(kind);
            let p = init_encoder(&cfg, 2).unwrap();
            let ab = encode(&cfg, &p, &[6, 9]).unwrap();
            let ba = encode(&cfg, &p, &[9, 6]).unwrap();
            // were position ignored, row 1 of one would equal row 2 of the other
            assert_ne!(ab.row(1), ba.row(2));
            assert_ne!(ab.row(2), ba.row(1));
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = small(EncoderKind::Transformer);
        let p = init_encoder(&cfg, 3).unwrap();
        let maps = attention_maps(&cfg, &p, &[5, 6, 7, 8, 9]).unwrap();
        assert_eq!(maps.len(), cfg.layers * cfg.heads);
        for m in maps {
            assert_eq!(m.dim(), (7, 7));
            for row in m.rows() {
                assert!((row.sum() - 1.0).abs() <= 1e-9);
                assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = small(EncoderKind::Transformer);
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = small(EncoderKind::Transformer);
        cfg.embed_dim = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = small(EncoderKind::Transformer);
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        assert!(EncoderConfig::full_scale(30522).validate().is_ok());
    }

    #[test]
    fn dropout_only_in_training_mode() {
        let cfg = EncoderConfig {
            dropout: 0.5,
            ..small(EncoderKind::Transformer)
        };
        let p = init_encoder(&cfg, 4).unwrap();
        let ids = [5, 6, 7];
        let eval = encode(&cfg, &p, &ids).unwrap();
        let mut rng = seeded_rng(0);
        let mut tape = Tape::new(&p);
        let out = encode_on_tape(
            &mut tape,
            &cfg,
            &ids,
            Some(Dropout {
                rate: 0.5,
                rng: &mut rng,
            }),
        )
        .unwrap();
        assert_ne!(tape.value(out.features), &eval);
    }

    /// Encoder, SI head and CRF together against central differences on every
    /// parameter entry.
    #[test]
    fn composite_gradient_matches_finite_differences() {
        for kind in [EncoderKind::Transformer, EncoderKind::Bilstm] {
            let cfg = small(kind);
            let mut params = init_encoder(&cfg, 5).unwrap();
            // larger weights than the default init so curvature is exercised
            let mut rng = seeded_rng(6);
            for (_, v) in params.iter_mut() {
                v.mapv_inplace(|x| x * 10.0 + rng.random_range(-0.05..0.05));
            }
            params.extend(init_si_head(cfg.hidden_dim, 7));
            params.extend(init_crf());
            params.get_mut("crf.transitions").unwrap()[[0, 1]] = 0.7;
            let ids = [5, 11, 7, 19];
            let labels = [0, 1, 1, 0];
            let loss = |p: &ParamSet| {
                let mut tape = Tape::new(p);
                let f = encode_on_tape(&mut tape, &cfg, &ids, None).unwrap().features;
                let l = si_loss_on_tape(&mut tape, f, &labels).unwrap();
                tape.scalar(l)
            };
            let grads = {
                let mut tape = Tape::new(&params);
                let f = encode_on_tape(&mut tape, &cfg, &ids, None).unwrap().features;
                let l = si_loss_on_tape(&mut tape, f, &labels).unwrap();
                tape.backward(l)
            };
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            let names: Vec<String> = params.names().map(String::from).collect();
            let mut p = params.clone();
            for name in names {
                let shape = params.get(&name).unwrap().raw_dim();
                for idx in ndarray::indices(shape) {
                    let orig = p.get(&name).unwrap()[idx];
                    p.get_mut(&name).unwrap()[idx] = orig + h;
                    let up = loss(&p);
                    p.get_mut(&name).unwrap()[idx] = orig - h;
                    let down = loss(&p);
                    p.get_mut(&name).unwrap()[idx] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = grads.get(&name).map_or(0.0, |g| g[idx]);
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                    worst = worst.max(rel);
                    assert!(rel <= 1e-3, "{kind:?} {name}{idx:?}: fd {fd} analytic {an}");
                }
            }
            assert!(worst.is_finite());
        }
    }
}
