use super::config::ModelConfig;
use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::tensor::{Tape, Tensor, Var, LAYER_NORM_EPS};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, masks derived from the seed.
    Train { dropout_seed: u64 },
    Eval,
}

/// Anything that maps a token prefix to next-token logits.
pub trait CausalLm {
    fn vocab_size(&self) -> usize;
    fn ctx_len(&self) -> usize;
    /// Logits `[ids.len(), vocab_size]`, row `t` conditioned on `ids[..=t]`.
    fn logits(&self, ids: &[u32]) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GptModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

/// Handles produced by a forward pass recorded on a tape.
#[derive(Debug)]
pub struct ForwardPass {
    /// Final-layer-norm output, `[batch*seq, d_model]`.
    pub hidden: Var,
    /// `[batch*seq, vocab_size]`.
    pub logits: Var,
    /// One var per parameter, in `ParamSet` order.
    pub param_vars: Vec<Var>,
}

fn block_names(i: usize) -> [(String, Vec<usize>, Init); 12] {
    let p = |s: &str| format!("h.{i}.{s}");
    [
        (p("ln_1.gain"), vec![], Init::Ones),
        (p("ln_1.bias"), vec![], Init::Zeros),
        (p("attn.qkv.weight"), vec![], Init::Normal),
        (p("attn.qkv.bias"), vec![], Init::Zeros),
        (p("attn.proj.weight"), vec![], Init::Normal),
        (p("attn.proj.bias"), vec![], Init::Zeros),
        (p("ln_2.gain"), vec![], Init::Ones),
        (p("ln_2.bias"), vec![], Init::Zeros),
        (p("mlp.fc.weight"), vec![], Init::Normal),
        (p("mlp.fc.bias"), vec![], Init::Zeros),
        (p("mlp.proj.weight"), vec![], Init::Normal),
        (p("mlp.proj.bias"), vec![], Init::Zeros),
    ]
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

impl GptModel {
    /// Canonical parameter names and shapes, in storage order.
    pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        Self::layout_with_init(config)
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect()
    }

    fn layout_with_init(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
        let (v, d, ff, ctx) = (config.vocab_size, config.d_model, config.d_ff, config.ctx_len);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d], Init::Normal),
            ("pos_emb".to_string(), vec![ctx, d], Init::Normal),
        ];
        for i in 0..config.n_layers {
            let shapes = [
                vec![d],
                vec![d],
                vec![d, 3 * d],
                vec![3 * d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, ff],
                vec![ff],
                vec![ff, d],
                vec![d],
            ];
            for ((name, _, init), shape) in block_names(i).into_iter().zip(shapes) {
                out.push((name, shape, init));
            }
        }
        out.push(("ln_f.gain".into(), vec![d], Init::Ones));
        out.push(("ln_f.bias".into(), vec![d], Init::Zeros));
        if !config.tie_lm_head {
            out.push(("lm_head".into(), vec![v, d], Init::Normal));
        }
        out
    }

    /// Fresh parameters: weights and embeddings drawn from N(0, 0.02) in
    /// layout order from one seeded stream, biases zero, layer-norm gains one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = DetRng::new(seed);
        let mut params = ParamSet::new();
        for (name, shape, init) in Self::layout_with_init(&config) {
            let t = match init {
                Init::Normal => Tensor::normal_from(&shape, 0.0, INIT_STD, &mut rng),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, 1.0),
            };
            params.insert(name, t.with_requires_grad(true))?;
        }
        Ok(Self { config, params })
    }

    /// Wrap loaded parameters, checking every canonical name is present with
    /// the right shape. Extra parameters (such as a classifier head) are
    /// allowed.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        for (name, shape) in Self::layout(&config) {
            match params.get(&name) {
                None => return Err(Error::Validation(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Validation(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Self { config, params })
    }

    /// The output projection. With a tied head this is the token embedding.
    pub fn lm_head(&self) -> &Tensor {
        if self.config.tie_lm_head {
            self.params.expect("tok_emb")
        } else {
            self.params.expect("lm_head")
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Input("forward needs at least one token".into()));
        }
        if ids.len() > self.config.ctx_len {
            return Err(Error::ContextOverflow {
                len: ids.len(),
                ctx_len: self.config.ctx_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Range {
                id: bad as usize,
                limit: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Record a forward pass over equal-length sequences on `tape`.
    pub fn forward_on(&self, tape: &mut Tape, batch: &[&[u32]], mode: Mode) -> Result<ForwardPass> {
        let seq = batch.first().map_or(0, |s| s.len());
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        for s in batch {
            if s.len() != seq {
                return Err(Error::Dimension {
                    op: "forward",
                    left: vec![seq],
                    right: vec![s.len()],
                });
            }
            self.check_ids(s)?;
        }
        let cfg = &self.config;
        let n = batch.len();

        let param_vars: Vec<Var> = self.params.iter().map(|(_, t)| tape.leaf(t)).collect();
        let pv = |name: &str| {
            param_vars[self
                .params
                .position(name)
                .unwrap_or_else(|| panic!("parameter {name} missing"))]
        };

        let mut sites = DropoutSites { mode, next: 0 };
        let ids: Vec<usize> = batch.iter().flat_map(|s| s.iter().map(|&i| i as usize)).collect();
        let positions: Vec<usize> = (0..n).flat_map(|_| 0..seq).collect();
        let tok = tape.embedding(pv("tok_emb"), &ids)?;
        let pos = tape.embedding(pv("pos_emb"), &positions)?;
        let mut x = tape.add(tok, pos)?;
        x = sites.apply(tape, x, cfg.embd_dropout)?;

        for i in 0..cfg.n_layers {
            let p = |s: &str| pv(&format!("h.{i}.{s}"));

            let h = tape.layer_norm(x, p("ln_1.gain"), p("ln_1.bias"), 1, LAYER_NORM_EPS)?;
            let qkv = tape.matmul(h, p("attn.qkv.weight"))?;
            let qkv = tape.add(qkv, p("attn.qkv.bias"))?;
            let attn_drop = sites.seed(cfg.attn_dropout).map(|seed| (cfg.attn_dropout, seed));
            let a = tape.causal_attention(qkv, n, seq, cfg.n_heads, attn_drop)?;
            let a = tape.matmul(a, p("attn.proj.weight"))?;
            let a = tape.add(a, p("attn.proj.bias"))?;
            let a = sites.apply(tape, a, cfg.resid_dropout)?;
            x = tape.add(x, a)?;

            let h = tape.layer_norm(x, p("ln_2.gain"), p("ln_2.bias"), 1, LAYER_NORM_EPS)?;
            let m = tape.matmul(h, p("mlp.fc.weight"))?;
            let m = tape.add(m, p("mlp.fc.bias"))?;
            let m = tape.gelu(m)?;
            let m = tape.matmul(m, p("mlp.proj.weight"))?;
            let m = tape.add(m, p("mlp.proj.bias"))?;
            let m = sites.apply(tape, m, cfg.resid_dropout)?;
            x = tape.add(x, m)?;
        }

        let hidden = tape.layer_norm(x, pv("ln_f.gain"), pv("ln_f.bias"), 1, LAYER_NORM_EPS)?;
        let head = if cfg.tie_lm_head { pv("tok_emb") } else { pv("lm_head") };
        let logits = tape.matmul_bt(hidden, head)?;
        Ok(ForwardPass {
            hidden,
            logits,
            param_vars,
        })
    }

    /// Logits `[T, vocab_size]` for one sequence.
    pub fn forward(&self, ids: &[u32], mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pass = self.forward_on(&mut tape, &[ids], mode)?;
        Ok(tape.to_tensor(pass.logits))
    }

    /// Logits `[B*T, vocab_size]` for equal-length sequences.
    pub fn forward_batch(&self, batch: &[&[u32]], mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pass = self.forward_on(&mut tape, batch, mode)?;
        Ok(tape.to_tensor(pass.logits))
    }
}

/// Hands out one independent dropout seed per dropout site in a pass.
struct DropoutSites {
    mode: Mode,
    next: u64,
}

impl DropoutSites {
    fn seed(&mut self, p: f64) -> Option<u64> {
        match self.mode {
            Mode::Train { dropout_seed } if p > 0.0 => {
                self.next += 1;
                Some(DetRng::derive(dropout_seed, self.next).next_u64())
            }
            _ => None,
        }
    }

    fn apply(&mut self, tape: &mut Tape, x: Var, p: f64) -> Result<Var> {
        match self.seed(p) {
            Some(seed) => tape.dropout(x, p, seed),
            None => Ok(x),
        }
    }
}

impl CausalLm for GptModel {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn ctx_len(&self) -> usize {
        self.config.ctx_len
    }

    fn logits(&self, ids: &[u32]) -> Result<Tensor> {
        self.forward(ids, Mode::Eval)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor;

    fn toy() -> GptModel {
        GptModel::init(ModelConfig::new(2, 2, 8, 16, 8), 11).unwrap()
    }

    #[test]
    fn logits_shape_and_rows_normalize() {
        let m = toy();
        let logits = m.forward(&[1, 5, 9], Mode::Eval).unwrap();
        assert_eq!(logits.shape(), &[3, 16]);
        let probs = tensor::softmax(&logits, 1).unwrap();
        for row in probs.data().chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbing_later_token_leaves_prefix_bitwise_equal() {
        let m = toy();
        let a = m.forward(&[1, 2, 3, 4], Mode::Eval).unwrap();
        let b = m.forward(&[1, 2, 7, 4], Mode::Eval).unwrap();
        assert_eq!(a.data()[..32], b.data()[..32]);
        assert_ne!(a.data()[32..48], b.data()[32..48]);
    }

    #[test]
    fn context_overflow_and_range_errors() {
        let m = toy();
        assert!(matches!(
            m.forward(&[0; 9], Mode::Eval),
            Err(Error::ContextOverflow { len: 9, ctx_len: 8 })
        ));
        assert!(matches!(m.forward(&[16], Mode::Eval), Err(Error::Range { id: 16, .. })));
        assert!(matches!(m.forward(&[], Mode::Eval), Err(Error::Input(_))));
    }

    #[test]
    fn init_is_deterministic_and_counted() {
        let a = toy();
        let b = toy();
        assert_eq!(a.params, b.params);
        assert_eq!(a.params.scalar_count(), a.config.param_count());
        assert!(a.params.get("h.0.ln_1.gain").unwrap().data().iter().all(|&g| g == 1.0));
        assert!(a.params.get("ln_f.gain").unwrap().data().iter().all(|&g| g == 1.0));
        assert!(a.params.get("h.1.mlp.fc.bias").unwrap().data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn token_embedding_mean_near_zero() {
        let m = GptModel::init(ModelConfig::new(1, 2, 32, 500, 16), 3).unwrap();
        let e = m.params.get("tok_emb").unwrap();
        let n = e.numel() as f64;
        let mean = e.data().iter().sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * INIT_STD / n.sqrt());
    }

    #[test]
    fn tied_head_shares_storage() {
        let mut m = toy();
        assert!(m.lm_head().shares_storage(m.params.get("tok_emb").unwrap()));
        m.params.get_mut("tok_emb").unwrap().data_mut()[0] = 42.0;
        assert_eq!(m.lm_head().data()[0], 42.0);
    }

    #[test]
    fn train_mode_dropout_changes_output() {
        let cfg = ModelConfig {
            attn_dropout: 0.1,
            embd_dropout: 0.1,
            resid_dropout: 0.1,
            ..ModelConfig::new(2, 2, 8, 16, 8)
        };
        let m = GptModel::init(cfg, 1).unwrap();
        let eval = m.forward(&[1, 2, 3], Mode::Eval).unwrap();
        let t1 = m.forward(&[1, 2, 3], Mode::Train { dropout_seed: 5 }).unwrap();
        let t2 = m.forward(&[1, 2, 3], Mode::Train { dropout_seed: 5 }).unwrap();
        assert_eq!(t1, t2);
        assert_ne!(eval, t1);
    }
}
