use super::gpt::CausalLm;
use crate::error::{Error, Result};
use crate::rng::DetRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    /// Argmax, lowest id on ties.
    Greedy,
    /// Sample from `softmax(logits / temperature)`.
    Temperature(f64),
    /// Sample among the `k` highest logits after temperature scaling.
    TopK { k: usize, temperature: f64 },
}

impl Sampling {
    fn validate(&self) -> Result<()> {
        let temp = match *self {
            Sampling::Greedy => return Ok(()),
            Sampling::Temperature(t) => t,
            Sampling::TopK { k, temperature } => {
                if k < 1 {
                    return Err(Error::Config("top-k needs k >= 1".into()));
                }
                temperature
            }
        };
        if !(temp > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {temp}")));
        }
        Ok(())
    }
}

/// Extend `prompt` by up to `max_new` tokens, stopping early (without
/// appending it) when `eos` is produced. When the sequence outgrows the
/// context window only the most recent `ctx_len` tokens are fed back.
pub fn generate<M: CausalLm + ?Sized>(
    model: &M,
    prompt: &[u32],
    max_new: usize,
    sampling: Sampling,
    seed: u64,
    eos: Option<u32>,
) -> Result<Vec<u32>> {
    sampling.validate()?;
    if prompt.is_empty() {
        return Err(Error::Input("generation needs a non-empty prompt".into()));
    }
    let mut rng = DetRng::new(seed);
    let mut out = prompt.to_vec();
    let v = model.vocab_size();
    for _ in 0..max_new {
        let start = out.len().saturating_sub(model.ctx_len());
        let logits = model.logits(&out[start..])?;
        let last = &logits.data()[logits.numel() - v..];
        let next = pick(last, sampling, &mut rng) as u32;
        if Some(next) == eos {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn pick(logits: &[f64], sampling: Sampling, rng: &mut DetRng) -> usize {
    let (candidates, temperature): (Vec<usize>, f64) = match sampling {
        Sampling::Greedy => return argmax(logits),
        Sampling::Temperature(t) => ((0..logits.len()).collect(), t),
        Sampling::TopK { k, temperature } => {
            let mut order: Vec<usize> = (0..logits.len()).collect();
            order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            order.truncate(k);
            if order.len() == 1 {
                return order[0];
            }
            (order, temperature)
        }
    };
    let max = candidates
        .iter()
        .map(|&i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = candidates
        .iter()
        .map(|&i| ((logits[i] - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() * total;
    for (&i, &w) in candidates.iter().zip(&weights) {
        if u < w {
            return i;
        }
        u -= w;
    }
    *candidates.last().expect("non-empty candidates")
}
