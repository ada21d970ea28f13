//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::Result;

pub const STEP: f64 = 1e-5;

/// Relative error with a small floor so exact zeros compare cleanly.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Random probe weights for a non-scalar output; a scalar is used as is.
fn probe_weights(len: usize, seed: u64) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random::<f64>() - 0.5).collect()
}

/// Central difference of `w · out`, differencing element-wise before weighting
/// so that large output sums do not cancel.
fn numeric_directional(plus: &[f64], minus: &[f64], w: &[f64]) -> f64 {
    plus.iter().zip(minus).zip(w).map(|((p, m), w)| w * (p - m)).sum::<f64>() / (2.0 * STEP)
}

/// Checks d(w · build(x))/dx for every input element; returns the worst relative error.
pub fn check_input_gradient(x: &Tensor, build: &dyn Fn(&mut Tape, Var) -> Var, seed: u64) -> f64 {
    let store = ParamStore::new();
    let eval = |t: &Tensor| {
        let mut tape = Tape::new(&store);
        let v = tape.input(t.clone());
        let out = build(&mut tape, v);
        tape.value(out).data().to_vec()
    };
    let mut tape = Tape::new(&store);
    let v = tape.input_with_grad(x.clone());
    let out = build(&mut tape, v);
    let w = probe_weights(tape.value(out).len(), seed);
    let s = tape.weighted_sum(out, w.clone()).expect("weights sized to output");
    let grads = tape.backward(s).expect("scalar probe");
    let analytic = grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= STEP;
        let numeric = numeric_directional(&eval(&plus), &eval(&minus), &w);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    worst
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Checks `count` randomly chosen scalar entries across `ids` against central
/// differences of a fixed random linear functional of `build`'s output.
pub fn check_param_gradients(
    store: &ParamStore,
    ids: &[ParamId],
    build: &dyn Fn(&mut Tape) -> Result<Var>,
    count: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let probe = |s: &ParamStore| -> Result<Vec<f64>> {
        let mut tape = Tape::new(s);
        let out = build(&mut tape)?;
        Ok(tape.value(out).data().to_vec())
    };
    let (grads, w) = {
        let mut tape = Tape::new(store);
        let out = build(&mut tape)?;
        let w = probe_weights(tape.value(out).len(), seed);
        let v = tape.weighted_sum(out, w.clone())?;
        (tape.backward(v)?, w)
    };
    let entries: Vec<(ParamId, usize)> = ids
        .iter()
        .flat_map(|&id| (0..store.get(id).len()).map(move |i| (id, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let picks = sample(&mut rng, entries.len(), count.min(entries.len()));
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None };
    let mut scratch = store.clone();
    for p in picks.iter() {
        let (id, i) = entries[p];
        let orig = store.get(id).data()[i];
        scratch.get_mut(id).data_mut()[i] = orig + STEP;
        let fp = probe(&scratch)?;
        scratch.get_mut(id).data_mut()[i] = orig - STEP;
        let fm = probe(&scratch)?;
        scratch.get_mut(id).data_mut()[i] = orig;
        let numeric = numeric_directional(&fp, &fm, &w);
        let analytic = grads.params.get(id).data()[i];
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((store.name(id).to_string(), i, analytic, numeric));
        }
    }
    Ok(report)
}

