use std::io::{BufRead, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adam::{adam_step, OptimizerState};
use super::config::{lr_at, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{GptModel, Mode, ParamSet};
use crate::rng::DetRng;
use crate::tensor::{Tape, Var};

/// One line of the persisted loss curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub tokens_seen: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub curve: Vec<StepRecord>,
    pub final_loss: f64,
    pub tokens_seen: u64,
    /// Excluded from determinism comparisons.
    pub wall_time_secs: f64,
}

impl TrainingReport {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.curve {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<StepRecord>> {
        let mut out = Vec::new();
        for line in r.lines() {
            let line = line.map_err(|e| Error::io("<report>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line)?);
        }
        Ok(out)
    }
}

pub(crate) trait Trainable {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
}

impl Trainable for GptModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// Scalar loss recorded on a tape plus what the step needs to update.
pub(crate) struct BatchLoss {
    pub loss: Var,
    pub param_vars: Vec<Var>,
    pub tokens: u64,
}

/// Shared optimizer loop: per-epoch seeded shuffles, one Adam step per
/// batch, and `lr_at(step + 1)` for the update that produces step `step + 1`.
pub(crate) fn run<M, E, F>(model: &mut M, examples: &[E], config: &TrainConfig, mut batch_loss: F) -> Result<TrainingReport>
where
    M: Trainable,
    F: FnMut(&M, &mut Tape, &[&E], Mode) -> Result<BatchLoss>,
{
    if examples.is_empty() {
        return Err(Error::Input("no training examples".into()));
    }
    config.validate()?;
    let batches = examples.len().div_ceil(config.batch_size) as u64;
    let cfg = config.resolved(batches);
    let started = Instant::now();
    let mut state = OptimizerState::new(model.params());
    let mut curve = Vec::with_capacity(cfg.max_steps as usize);
    let mut tokens_seen = 0u64;
    let mut step = 0u64;
    let mut epoch = 0u64;

    'epochs: while step < cfg.max_steps {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        DetRng::derive(cfg.seed, epoch).shuffle(&mut order);
        epoch += 1;
        for chunk in order.chunks(cfg.batch_size) {
            if step >= cfg.max_steps {
                break 'epochs;
            }
            let batch: Vec<&E> = chunk.iter().map(|&i| &examples[i]).collect();
            let mode = Mode::Train {
                dropout_seed: DetRng::derive(cfg.seed ^ 0x00D0_D0D0, step).next_u64(),
            };
            let mut tape = Tape::new();
            let out = batch_loss(model, &mut tape, &batch, mode).map_err(|e| diverged(e, step))?;
            let loss = tape.value(out.loss)[0];
            tape.backward(out.loss)?;
            let grads: Vec<Vec<f64>> = out
                .param_vars
                .iter()
                .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
                .collect();
            drop(tape);

            let lr = lr_at(step + 1, &cfg);
            adam_step(model.params_mut(), &grads, &mut state, lr, &cfg)?;
            tokens_seen += out.tokens;
            curve.push(StepRecord {
                step,
                loss,
                lr,
                tokens_seen,
            });
            if cfg.eval_every > 0 && (step.is_multiple_of(cfg.eval_every) || step + 1 == cfg.max_steps) {
                log::info!("step {step} loss {loss:.6} lr {lr:.3e} tokens {tokens_seen}");
            }
            step += 1;
        }
    }

    let final_loss = curve.last().map_or(f64::NAN, |r| r.loss);
    Ok(TrainingReport {
        curve,
        final_loss,
        tokens_seen,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

fn diverged(e: Error, step: u64) -> Error {
    match e {
        Error::Overflow { op } => Error::Divergence {
            step,
            what: format!("value in {op}"),
        },
        other => other,
    }
}
