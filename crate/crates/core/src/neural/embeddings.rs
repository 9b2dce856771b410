use ndarray::Array2;

use crate::error::{Error, Result};
use crate::segmenter::Vocab;

/// Overwrites rows of `table` (indexed by vocabulary id) with vectors from a
/// text file of `surface v1 … vn` lines. Surfaces absent from the file keep
/// their existing rows. Returns how many rows were replaced.
pub fn load_embeddings(text: &str, vocab: &Vocab, table: &mut Array2<f64>) -> Result<usize> {
    let dim = table.ncols();
    let mut replaced = 0;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let surface = fields.next().expect("nonblank line");
        let values: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| {
                    Error::Embeddings(format!("line {}: bad value {f:?}", n + 1))
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::Embeddings(format!(
                "line {}: {} values, expected {dim}",
                n + 1,
                values.len()
            )));
        }
        let id = vocab.id(surface) as usize;
        if id < Vocab::RESERVED as usize || id >= table.nrows() {
            continue;
        }
        for (c, v) in values.into_iter().enumerate() {
            table[[id, c]] = v;
        }
        replaced += 1;
    }
    Ok(replaced)
}
