use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::encoder::{EncoderConfig, EncoderKind};
use super::tape::ParamSet;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PSCK";
pub const FORMAT_VERSION: u32 = 1;

/// Encoder weights (and possibly head weights) at a given training step.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub params: ParamSet,
    pub step: u64,
    pub total_steps: u64,
    /// Free-form string metadata stored in the header.
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    step: u64,
    total_steps: u64,
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// Shapes of every `enc.*` tensor for a configuration.
pub fn encoder_shapes(cfg: &EncoderConfig) -> BTreeMap<String, (usize, usize)> {
    let d = cfg.hidden_dim;
    let mut s = BTreeMap::new();
    let mut put = |n: String, r: usize, c: usize| {
        s.insert(n, (r, c));
    };
    put("enc.tok_emb".into(), cfg.vocab_size, cfg.embed_dim);
    match cfg.kind {
        EncoderKind::Transformer => {
            put("enc.pos_emb".into(), cfg.max_seq_len, d);
            put("enc.emb_ln.g".into(), 1, d);
            put("enc.emb_ln.b".into(), 1, d);
            for l in 0..cfg.layers {
                for proj in ["q", "k", "v", "o"] {
                    put(format!("enc.l{l}.{proj}.w"), d, d);
                    put(format!("enc.l{l}.{proj}.b"), 1, d);
                }
                for ln in ["ln1", "ln2"] {
                    put(format!("enc.l{l}.{ln}.g"), 1, d);
                    put(format!("enc.l{l}.{ln}.b"), 1, d);
                }
                put(format!("enc.l{l}.ff1.w"), d, cfg.ffn_dim());
                put(format!("enc.l{l}.ff1.b"), 1, cfg.ffn_dim());
                put(format!("enc.l{l}.ff2.w"), cfg.ffn_dim(), d);
                put(format!("enc.l{l}.ff2.b"), 1, d);
            }
        }
        EncoderKind::Bilstm => {
            for dir in ["fw", "bw"] {
                put(format!("enc.lstm.{dir}.w"), cfg.embed_dim, 4 * d);
                put(format!("enc.lstm.{dir}.u"), d, 4 * d);
                put(format!("enc.lstm.{dir}.b"), 1, 4 * d);
            }
            put("enc.proj.w".into(), 2 * d, d);
            put("enc.proj.b".into(), 1, d);
        }
    }
    s
}

impl Checkpoint {
    pub fn new(config: EncoderConfig, params: ParamSet, step: u64, total_steps: u64) -> Result<Self> {
        let ck = Self {
            config,
            params,
            step,
            total_steps,
            meta: BTreeMap::new(),
        };
        ck.check()?;
        Ok(ck)
    }

    pub fn step_fraction(&self) -> f64 {
        self.step as f64 / self.total_steps as f64
    }

    fn check(&self) -> Result<()> {
        self.config
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if self.total_steps == 0 || self.step == 0 || self.step > self.total_steps {
            return Err(Error::Checkpoint(format!(
                "step {} outside 1..={}",
                self.step, self.total_steps
            )));
        }
        for (name, (r, c)) in encoder_shapes(&self.config) {
            match self.params.get(&name) {
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
                Some(t) if t.dim() != (r, c) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, config implies ({r}, {c})",
                        t.dim()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Encoder tensors only.
    pub fn encoder_params(&self) -> ParamSet {
        self.params.filtered("enc.")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            total_steps: self.total_steps,
            meta: self.meta.clone(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    rows: t.nrows(),
                    cols: t.ncols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.params.size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for &x in t.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Checkpoint("file is truncated".into());
        if bytes.len() < 16 {
            return Err(truncated());
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < header_len {
            return Err(truncated());
        }
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut data = &body[header_len..];
        let mut params = ParamSet::new();
        for t in &header.tensors {
            let n = t.rows * t.cols;
            if data.len() < 8 * n {
                return Err(truncated());
            }
            let values: Vec<f64> = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[8 * n..];
            let arr = Array2::from_shape_vec((t.rows, t.cols), values)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            params.insert(t.name.clone(), arr);
        }
        if !data.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", data.len())));
        }
        let ck = Self {
            config: header.config,
            params,
            step: header.step,
            total_steps: header.total_steps,
            meta: header.meta,
        };
        ck.check()?;
        Ok(ck)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::encoder::{encode, init_encoder};

    fn small() -> EncoderConfig {
        EncoderConfig {
            hidden_dim: 8,
            embed_dim: 8,
            layers: 2,
            heads: 2,
            max_seq_len: 16,
            ..EncoderConfig::desk(40)
        }
    }

    #[test]
    fn init_matches_declared_shapes() {
        for cfg in [small(), EncoderConfig::bilstm(40, 6, 5)] {
            let p = init_encoder(&cfg, 0).unwrap();
            let shapes = encoder_shapes(&cfg);
            assert_eq!(p.len(), shapes.len());
            for (n, t) in p.iter() {
                assert_eq!(shapes[n], t.dim(), "{n}");
            }
        }
    }

    #[test]
    fn round_trip_preserves_outputs_bit_for_bit() {
        for cfg in [small(), EncoderConfig::bilstm(40, 6, 5)] {
            let mut ck = Checkpoint::new(cfg.clone(), init_encoder(&cfg, 3).unwrap(), 350, 2000).unwrap();
            ck.meta.insert("task".into(), "mlm".into());
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.step_fraction(), 0.175);
            let ids = [7, 9, 11, 5];
            let a = encode(&cfg, &ck.params, &ids).unwrap();
            let b = encode(&cfg, &back.params, &ids).unwrap();
            assert_eq!(a, b);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn damaged_files_are_rejected() {
        let cfg = small();
        let ck = Checkpoint::new(cfg.clone(), init_encoder(&cfg, 3).unwrap(), 1, 1).unwrap();
        let bytes = ck.to_bytes().unwrap();
        for cut in [0, 3, 15, 40, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&wrong_version),
            Err(Error::Checkpoint(m)) if m.contains("version")
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = small();
        let mut p = init_encoder(&cfg, 0).unwrap();
        p.insert("enc.l0.q.w", Array2::zeros((8, 7)));
        assert!(Checkpoint::new(cfg.clone(), p.clone(), 1, 1).is_err());
        // bypass the constructor to check the loader
        let ck = Checkpoint {
            config: cfg,
            params: p,
            step: 1,
            total_steps: 1,
            meta: BTreeMap::new(),
        };
        assert!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()).is_err());
    }
}
