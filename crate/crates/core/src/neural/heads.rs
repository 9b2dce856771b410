use ndarray::{Array1, Array2};

use super::encoder::dense;
use super::tape::{ParamSet, Tape, Var};
use crate::corpus::{seeded_rng, Technique};
use crate::crf::CrfParams;
use crate::error::Result;

/// Widths of the classification funnel for encoder width `d`:
/// pooled input, hidden layer, output.
pub fn funnel_sizes(d: usize) -> (usize, usize, usize) {
    let hidden = ((d as f64) / 3.0).round().max(1.0) as usize;
    (d, hidden, Technique::COUNT)
}

/// `si.hidden` (d→d) and `si.out` (d→2).
pub fn init_si_head(d: usize, seed: u64) -> ParamSet {
    let mut rng = seeded_rng(seed);
    let mut p = ParamSet::new();
    dense(&mut p, &mut rng, "si.hidden", d, d);
    dense(&mut p, &mut rng, "si.out", d, 2);
    p
}

/// Zero-initialized two-label CRF potentials under `crf.*`.
pub fn init_crf() -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("crf.transitions", Array2::zeros((2, 2)));
    p.insert("crf.start", Array2::zeros((1, 2)));
    p.insert("crf.end", Array2::zeros((1, 2)));
    p
}

pub fn crf_params(params: &ParamSet) -> Result<CrfParams> {
    let row = |name: &str| -> Result<Array1<f64>> {
        Ok(params.require(name)?.row(0).to_owned())
    };
    Ok(CrfParams {
        transitions: params.require("crf.transitions")?.clone(),
        start: row("crf.start")?,
        end: row("crf.end")?,
    })
}

/// `tc.hidden` (d→d/3) and `tc.out` (d/3→14).
pub fn init_tc_head(d: usize, seed: u64) -> ParamSet {
    let (input, hidden, out) = funnel_sizes(d);
    let mut rng = seeded_rng(seed);
    let mut p = ParamSet::new();
    dense(&mut p, &mut rng, "tc.hidden", input, hidden);
    dense(&mut p, &mut rng, "tc.out", hidden, out);
    p
}

fn dense_on_tape(tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
    let w = tape.param(&format!("{name}.w"))?;
    let b = tape.param(&format!("{name}.b"))?;
    Ok(tape.linear(x, w, b))
}

/// Emissions for the real tokens of a `(tokens + 2) × d` feature matrix.
pub fn si_emissions_on_tape(tape: &mut Tape, features: Var, tokens: usize) -> Result<Var> {
    let real = tape.rows(features, 1, tokens + 1);
    let h = dense_on_tape(tape, real, "si.hidden")?;
    let h = tape.gelu(h);
    dense_on_tape(tape, h, "si.out")
}

/// CRF negative log-likelihood of `labels` on top of the SI head.
pub fn si_loss_on_tape(tape: &mut Tape, features: Var, labels: &[usize]) -> Result<Var> {
    let emissions = si_emissions_on_tape(tape, features, labels.len())?;
    let transitions = tape.param("crf.transitions")?;
    let start = tape.param("crf.start")?;
    let end = tape.param("crf.end")?;
    tape.crf_nll(emissions, transitions, start, end, labels)
}

/// Pre-softmax class scores from mean-pooled real-token features.
pub fn tc_logits_on_tape(tape: &mut Tape, features: Var, tokens: usize) -> Result<Var> {
    let pooled_rows = if tokens == 0 {
        features
    } else {
        tape.rows(features, 1, tokens + 1)
    };
    let pooled = tape.mean_rows(pooled_rows);
    let h = dense_on_tape(tape, pooled, "tc.hidden")?;
    let h = tape.gelu(h);
    dense_on_tape(tape, h, "tc.out")
}

/// `T × 2` emissions from `(T + 2) × d` encoder features.
pub fn si_head(features: &Array2<f64>, params: &ParamSet) -> Result<Array2<f64>> {
    let tokens = features.nrows().saturating_sub(2);
    let mut tape = Tape::new(params);
    let f = tape.input(features.clone());
    let e = si_emissions_on_tape(&mut tape, f, tokens)?;
    Ok(tape.value(e).clone())
}

/// Class distribution from `(T + 2) × d` encoder features.
pub fn tc_head(features: &Array2<f64>, params: &ParamSet) -> Result<Vec<f64>> {
    let tokens = features.nrows().saturating_sub(2);
    let mut tape = Tape::new(params);
    let f = tape.input(features.clone());
    let logits = tc_logits_on_tape(&mut tape, f, tokens)?;
    let probs = tape.softmax_rows(logits);
    Ok(tape.value(probs).row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf;
    use ndarray::Array2;
    use rand::Rng;

    fn zeroed(mut p: ParamSet) -> ParamSet {
        for (_, v) in p.iter_mut() {
            v.fill(0.0);
        }
        p
    }

    #[test]
    fn funnel_at_full_width() {
        assert_eq!(funnel_sizes(768), (768, 256, 14));
        assert_eq!(funnel_sizes(64), (64, 21, 14));
    }

    #[test]
    fn si_head_shape_and_zero_weights() {
        let mut rng = seeded_rng(3);
        let feats = Array2::from_shape_fn((7, 16), |_| rng.random_range(-1.0..1.0));
        let p = init_si_head(16, 1);
        assert_eq!(si_head(&feats, &p).unwrap().dim(), (5, 2));
        let e = si_head(&feats, &zeroed(p)).unwrap();
        assert!(e.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tc_head_is_a_distribution() {
        let mut rng = seeded_rng(4);
        for t in 0..6 {
            let feats = Array2::from_shape_fn((t + 2, 12), |_| rng.random_range(-3.0..3.0));
            let p = init_tc_head(12, t as u64);
            let probs = tc_head(&feats, &p).unwrap();
            assert_eq!(probs.len(), 14);
            assert!(probs.iter().all(|&x| x >= 0.0));
            assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn tc_head_uniform_with_zero_weights() {
        let feats = Array2::from_elem((4, 9), 0.5);
        let probs = tc_head(&feats, &zeroed(init_tc_head(9, 0))).unwrap();
        for p in probs {
            assert!((p - 1.0 / 14.0).abs() < 1e-15);
        }
    }

    #[test]
    fn crf_params_roundtrip_from_paramset() {
        let mut p = init_crf();
        p.get_mut("crf.transitions").unwrap()[[0, 1]] = 2.0;
        p.get_mut("crf.end").unwrap()[[0, 1]] = -1.0;
        let c = crf_params(&p).unwrap();
        assert_eq!(c.transitions[[0, 1]], 2.0);
        assert_eq!(c.end[1], -1.0);
        assert_eq!(c.start.len(), 2);
    }

    /// Head plus CRF against central differences on every parameter.
    #[test]
    fn head_and_crf_gradients_match_finite_differences() {
        let mut rng = seeded_rng(77);
        for case in 0..10 {
            let d = 6;
            let t = 1 + case % 5;
            let feats = Array2::from_shape_fn((t + 2, d), |_| rng.random_range(-1.0..1.0));
            let labels: Vec<usize> = (0..t).map(|_| rng.random_range(0..2)).collect();
            let mut params = init_si_head(d, case as u64);
            for (_, v) in params.iter_mut() {
                v.mapv_inplace(|_| rng.random_range(-0.8..0.8));
            }
            params.extend(init_crf());
            for name in ["crf.transitions", "crf.start", "crf.end"] {
                params
                    .get_mut(name)
                    .unwrap()
                    .mapv_inplace(|_| rng.random_range(-1.0..1.0));
            }
            let loss = |p: &ParamSet| {
                let mut tape = Tape::new(p);
                let f = tape.input(feats.clone());
                let l = si_loss_on_tape(&mut tape, f, &labels).unwrap();
                tape.scalar(l)
            };
            // the tape loss agrees with the standalone CRF
            let em = si_head(&feats, &params).unwrap();
            let direct = crf::nll_and_grad(em.view(), &crf_params(&params).unwrap(), &labels).unwrap().0;
            assert!((direct - loss(&params)).abs() < 1e-12);

            let grads = {
                let mut tape = Tape::new(&params);
                let f = tape.input(feats.clone());
                let l = si_loss_on_tape(&mut tape, f, &labels).unwrap();
                tape.backward(l)
            };
            let h = 1e-6;
            let names: Vec<String> = params.names().map(String::from).collect();
            for name in names {
                let shape = params.get(&name).unwrap().raw_dim();
                for idx in ndarray::indices(shape) {
                    let mut p = params.clone();
                    p.get_mut(&name).unwrap()[idx] += h;
                    let up = loss(&p);
                    p.get_mut(&name).unwrap()[idx] -= 2.0 * h;
                    let down = loss(&p);
                    let fd = (up - down) / (2.0 * h);
                    let an = grads.get(&name).map_or(0.0, |g| g[idx]);
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                    assert!(rel <= 1e-4, "{name}{idx:?}: fd {fd} analytic {an}");
                }
            }
        }
    }
}
