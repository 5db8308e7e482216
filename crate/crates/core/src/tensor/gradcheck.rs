//! Central finite-difference checks of the tape's analytic gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::DetRng;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Every differentiable op with a randomized check in [`op_trial`].
pub const OPS: [&str; 15] = [
    "matmul",
    "matmul_bt",
    "add",
    "mul",
    "scale",
    "gelu",
    "softmax",
    "layer_norm",
    "embedding",
    "gather_rows",
    "cross_entropy",
    "masked_cross_entropy",
    "dropout",
    "sum",
    "causal_attention",
];

/// Reduce an op output to a scalar with fixed random weights so every output
/// element contributes a distinct amount.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let w = Tensor::rng_normal(tape.shape(out), 0.0, 1.0, seed ^ 0xABCDEF);
    let w = tape.constant(&w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn eval<F>(inputs: &[Tensor], f: &F, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = weighted_sum(&mut tape, out, seed)?;
    Ok(tape.value(loss)[0])
}

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over every input
/// that requires a gradient, for a fixed random projection of `f`'s output.
pub fn relative_error<F>(inputs: &[Tensor], f: F, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = weighted_sum(&mut tape, out, seed)?;
    tape.backward(loss)?;

    let mut diff = 0.0;
    let mut norm_a = 0.0;
    let mut norm_n = 0.0;
    for (i, (t, v)) in inputs.iter().zip(&vars).enumerate() {
        if !t.requires_grad() {
            continue;
        }
        let analytic = tape.grad(*v).expect("leaf requires grad").to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus, &f, seed)? - eval(&minus, &f, seed)?) / (2.0 * STEP);
            diff += (a - numeric).powi(2);
            norm_a += a.powi(2);
            norm_n += numeric.powi(2);
        }
    }
    let denom = norm_a.sqrt().max(norm_n.sqrt());
    Ok(if denom < 1e-12 { 0.0 } else { diff.sqrt() / denom })
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rng_normal(shape, 0.0, 1.0, seed).with_requires_grad(true)
}

fn dim(rng: &mut DetRng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// One randomized check of `op`: shapes, indices and values all derive from
/// `trial`.
pub fn op_trial(op: &str, trial: u64) -> Result<f64> {
    let s = trial;
    let r = &mut DetRng::new(trial * 7919 + op.len() as u64);
    match op {
        "matmul" => {
            let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 5), dim(r, 1, 4));
            relative_error(&[random(&[m, k], s), random(&[k, n], s + 100)], |t, v| t.matmul(v[0], v[1]), s)
        }
        "matmul_bt" => {
            let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 5), dim(r, 1, 4));
            relative_error(&[random(&[m, k], s), random(&[n, k], s + 100)], |t, v| t.matmul_bt(v[0], v[1]), s)
        }
        "add" => {
            let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
            relative_error(&[random(&[a, b], s), random(&[b], s + 1)], |t, v| t.add(v[0], v[1]), s)
        }
        "mul" => {
            let (a, b, c) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3));
            relative_error(&[random(&[a, b, c], s), random(&[b, c], s + 1)], |t, v| t.mul(v[0], v[1]), s)
        }
        "scale" => {
            let n = dim(r, 1, 8);
            relative_error(&[random(&[n], s)], |t, v| t.scale(v[0], -1.7), s)
        }
        "gelu" => {
            let n = dim(r, 1, 10);
            relative_error(&[random(&[n], s)], |t, v| t.gelu(v[0]), s)
        }
        "softmax" => {
            let shape = [dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 3)];
            let axis = r.below(3);
            relative_error(&[random(&shape, s)], move |t, v| t.softmax(v[0], axis), s)
        }
        "layer_norm" => {
            let shape = [dim(r, 1, 3), dim(r, 2, 5), dim(r, 1, 2)];
            let axis = r.below(3);
            let len = shape[axis];
            relative_error(
                &[random(&shape, s), random(&[len], s + 1), random(&[len], s + 2)],
                move |t, v| t.layer_norm(v[0], v[1], v[2], axis, 1e-5),
                s,
            )
        }
        "embedding" => {
            let (vocab, d) = (dim(r, 2, 6), dim(r, 1, 4));
            let ids: Vec<usize> = (0..dim(r, 1, 6)).map(|_| r.below(vocab)).collect();
            relative_error(&[random(&[vocab, d], s)], move |t, v| t.embedding(v[0], &ids), s)
        }
        "gather_rows" => {
            let (n, d) = (dim(r, 1, 5), dim(r, 1, 4));
            let rows: Vec<usize> = (0..dim(r, 1, 4)).map(|_| r.below(n)).collect();
            relative_error(&[random(&[n, d], s)], move |t, v| t.gather_rows(v[0], &rows), s)
        }
        "cross_entropy" => {
            let (n, vocab) = (dim(r, 1, 5), dim(r, 2, 7));
            let targets: Vec<usize> = (0..n).map(|_| r.below(vocab)).collect();
            relative_error(&[random(&[n, vocab], s)], move |t, v| t.cross_entropy(v[0], &targets), s)
        }
        "masked_cross_entropy" => {
            let (n, vocab) = (dim(r, 2, 6), dim(r, 2, 7));
            let mut targets: Vec<Option<usize>> = (0..n)
                .map(|_| if r.below(3) == 0 { None } else { Some(r.below(vocab)) })
                .collect();
            targets[0] = Some(r.below(vocab));
            relative_error(&[random(&[n, vocab], s)], move |t, v| t.masked_cross_entropy(v[0], &targets), s)
        }
        "dropout" => {
            let n = dim(r, 1, 12);
            relative_error(&[random(&[n], s)], move |t, v| t.dropout(v[0], 0.3, s), s)
        }
        "sum" => {
            let n = dim(r, 1, 6);
            relative_error(&[random(&[n, 2], s)], |t, v| t.sum(v[0]), s)
        }
        "causal_attention" => {
            let (batch, seq, heads) = (dim(r, 1, 2), dim(r, 1, 4), dim(r, 1, 2));
            let d = heads * dim(r, 1, 3);
            let dropout = if s.is_multiple_of(2) { None } else { Some((0.25, s)) };
            relative_error(
                &[random(&[batch * seq, 3 * d], s)],
                move |t, v| t.causal_attention(v[0], batch, seq, heads, dropout),
                s,
            )
        }
        other => Err(Error::Input(format!("no gradient check for op {other:?}"))),
    }
}

/// Largest relative error of `op` over trials `0..trials`.
pub fn worst_error(op: &str, trials: u64) -> Result<f64> {
    (0..trials).try_fold(0.0f64, |worst, t| Ok(worst.max(op_trial(op, t)?)))
}
