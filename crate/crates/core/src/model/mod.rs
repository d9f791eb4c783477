//! Encoder-decoder Transformer over continuous input/output sequences.
//!
//! The encoder reads the context `(u, y)` pairs with unrestricted attention;
//! the decoder reads query inputs under a causal mask, cross-attends to the
//! encoder output and emits one output row per query step. Token embeddings
//! and the output head are plain linear maps. One learned positional table
//! covers the context positions followed by the query positions.

mod checkpoint;
mod probe;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub use probe::{end_to_end_gradcheck, END_TO_END_TOLERANCE, PROBE_WEIGHTS};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, simulate, Checkpoint, Simulation, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub n_u: usize,
    pub n_y: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_encoder: usize,
    pub n_layers_decoder: usize,
    pub d_ff: usize,
    /// Longest context the positional table covers.
    pub max_context: usize,
    pub max_query: usize,
    pub dropout: f32,
    pub seed: u64,
    pub init_std: f32,
    pub layer_norm_eps: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            n_u: 3,
            n_y: 7,
            d_model: 128,
            n_heads: 4,
            n_layers_encoder: 4,
            n_layers_decoder: 4,
            d_ff: 512,
            max_context: 200,
            max_query: 800,
            dropout: 0.0,
            seed: 0,
            init_std: 0.02,
            layer_norm_eps: 1e-5,
        }
    }
}

impl TransformerConfig {
    /// Small model for tests and smoke runs.
    pub fn tiny(n_u: usize, n_y: usize) -> Self {
        TransformerConfig {
            n_u,
            n_y,
            d_model: 16,
            n_heads: 2,
            n_layers_encoder: 1,
            n_layers_decoder: 1,
            d_ff: 32,
            max_context: 16,
            max_query: 48,
            ..Default::default()
        }
    }

    pub fn positions(&self) -> usize {
        self.max_context + self.max_query
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_u", self.n_u),
            ("n_y", self.n_y),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_context", self.max_context),
            ("max_query", self.max_query),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.init_std > 0.0) || !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("init_std and layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Names and shapes of every weight, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
        let linear = |push: &mut dyn FnMut(String, Vec<usize>), p: &str, i: usize, o: usize| {
            push(format!("{p}.w"), vec![i, o]);
            push(format!("{p}.b"), vec![o]);
        };
        let norm = |push: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            push(format!("{p}.g"), vec![d]);
            push(format!("{p}.b"), vec![d]);
        };
        let attn = |push: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            for part in ["q", "k", "v", "o"] {
                push(format!("{p}.{part}.w"), vec![d, d]);
                push(format!("{p}.{part}.b"), vec![d]);
            }
        };
        push("pos".into(), vec![self.positions(), d]);
        linear(&mut push, "enc.embed", self.n_u + self.n_y, d);
        for l in 0..self.n_layers_encoder {
            norm(&mut push, &format!("enc.{l}.ln1"));
            attn(&mut push, &format!("enc.{l}.attn"));
            norm(&mut push, &format!("enc.{l}.ln2"));
            linear(&mut push, &format!("enc.{l}.ff1"), d, f);
            linear(&mut push, &format!("enc.{l}.ff2"), f, d);
        }
        norm(&mut push, "enc.ln_f");
        linear(&mut push, "dec.embed", self.n_u, d);
        for l in 0..self.n_layers_decoder {
            norm(&mut push, &format!("dec.{l}.ln1"));
            attn(&mut push, &format!("dec.{l}.self"));
            norm(&mut push, &format!("dec.{l}.ln2"));
            attn(&mut push, &format!("dec.{l}.cross"));
            norm(&mut push, &format!("dec.{l}.ln3"));
            linear(&mut push, &format!("dec.{l}.ff1"), d, f);
            linear(&mut push, &format!("dec.{l}.ff2"), f, d);
        }
        norm(&mut push, "dec.ln_f");
        linear(&mut push, "head", d, self.n_y);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Named weight tensors in the fixed order of [`TransformerConfig::param_shapes`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    /// GPT-2 style initialization: normal weights, residual output projections
    /// scaled down by depth, zero biases, unit layer-norm gains.
    pub fn init(config: &TransformerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let depth = (config.n_layers_encoder + config.n_layers_decoder).max(1) as f32;
        let residual_std = config.init_std / (2.0 * depth).sqrt();
        let named = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".g") {
                    Tensor::full(&shape, 1.0)
                } else if name.ends_with(".b") {
                    Tensor::zeros(&shape)
                } else if name.ends_with(".o.w") || name.ends_with("ff2.w") {
                    Tensor::randn(&shape, residual_std, &mut rng)
                } else {
                    Tensor::randn(&shape, config.init_std, &mut rng)
                };
                (name, t)
            })
            .collect();
        ParamStore::from_named(config, named)
    }

    /// Builds a store from named tensors, which must match the config schema exactly.
    pub fn from_named(config: &TransformerConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let schema = config.param_shapes();
        if named.len() != schema.len() {
            return Err(Error::Format(format!(
                "expected {} weight tensors, found {}",
                schema.len(),
                named.len()
            )));
        }
        for ((name, t), (want_name, want_shape)) in named.iter().zip(&schema) {
            if name != want_name || t.shape() != want_shape.as_slice() {
                return Err(Error::Format(format!(
                    "weight '{name}' {:?} does not match schema entry '{want_name}' {want_shape:?}",
                    t.shape()
                )));
            }
        }
        let (names, tensors): (Vec<String>, Vec<Tensor>) = named.into_iter().unzip();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(ParamStore { names, tensors, index })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaModel {
    pub config: TransformerConfig,
    pub params: ParamStore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active; masks derive from `seed` and the order of dropout sites.
    Train { seed: u64 },
}

impl MetaModel {
    pub fn new(config: TransformerConfig) -> Result<Self> {
        let params = ParamStore::init(&config)?;
        Ok(MetaModel { config, params })
    }

    /// Copies the weights onto `tape` as trainable leaves.
    pub fn bind(&self, tape: &mut Tape, mode: Mode) -> Net<'_> {
        let vars = self.params.tensors().iter().map(|t| tape.param(t.clone())).collect();
        Net {
            model: self,
            vars,
            mode,
            dropout_sites: 0,
        }
    }
}

/// A model bound to one tape.
pub struct Net<'a> {
    model: &'a MetaModel,
    vars: Vec<Var>,
    mode: Mode,
    dropout_sites: u64,
}

fn causal_mask(t: usize) -> Vec<bool> {
    (0..t * t).map(|i| i % t > i / t).collect()
}

impl Net<'_> {
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    fn cfg(&self) -> &TransformerConfig {
        &self.model.config
    }

    fn p(&self, name: &str) -> Var {
        let i = self
            .model
            .params
            .position(name)
            .unwrap_or_else(|| panic!("weight '{name}' is part of the schema"));
        self.vars[i]
    }

    fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.mode {
            Mode::Eval => Ok(x),
            Mode::Train { seed } => {
                self.dropout_sites += 1;
                let site_seed = seed ^ self.dropout_sites.wrapping_mul(0x9e37_79b9_7f4a_7c15);
                tape.dropout(x, self.cfg().dropout, true, site_seed)
            }
        }
    }

    fn linear(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        tape.linear(x, self.p(&format!("{prefix}.w")), self.p(&format!("{prefix}.b")))
    }

    fn norm(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let eps = self.cfg().layer_norm_eps;
        tape.layer_norm(x, self.p(&format!("{prefix}.g")), self.p(&format!("{prefix}.b")), eps)
    }

    fn positional(&self, tape: &mut Tape, start: usize, len: usize) -> Result<Var> {
        tape.slice(self.p("pos"), 0, start, start + len)
    }

    fn attention(&mut self, tape: &mut Tape, xq: Var, xkv: Var, prefix: &str, causal: bool) -> Result<Var> {
        let (h, dh) = (self.cfg().n_heads, self.cfg().head_dim());
        let q = self.linear(tape, xq, &format!("{prefix}.q"))?;
        let k = self.linear(tape, xkv, &format!("{prefix}.k"))?;
        let v = self.linear(tape, xkv, &format!("{prefix}.v"))?;
        let t = tape.shape(q)[0];
        let mask = causal.then(|| causal_mask(t));
        let scale = 1.0 / (dh as f32).sqrt();
        let mut heads = Vec::with_capacity(h);
        for head in 0..h {
            let (lo, hi) = (head * dh, (head + 1) * dh);
            let qh = tape.slice(q, 1, lo, hi)?;
            let kh = tape.slice(k, 1, lo, hi)?;
            let vh = tape.slice(v, 1, lo, hi)?;
            let kt = tape.transpose_last_two(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(scores, scale);
            if let Some(mask) = &mask {
                scores = tape.masked_fill(scores, mask, f32::NEG_INFINITY)?;
            }
            let probs = tape.softmax_last_dim(scores)?;
            let probs = self.dropout(tape, probs)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let merged = tape.concat_last_dim(&heads)?;
        let out = self.linear(tape, merged, &format!("{prefix}.o"))?;
        self.dropout(tape, out)
    }

    fn feed_forward(&mut self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let hidden = self.linear(tape, x, &format!("{prefix}.ff1"))?;
        let hidden = tape.gelu(hidden);
        let out = self.linear(tape, hidden, &format!("{prefix}.ff2"))?;
        self.dropout(tape, out)
    }

    /// Context rows `[m, n_u]` and `[m, n_y]` (normalized) to `[m, d_model]`
    /// embeddings carrying positions `0..m`.
    pub fn embed_context(&mut self, tape: &mut Tape, u_ctx: &Tensor, y_ctx: &Tensor) -> Result<Var> {
        let cfg = self.cfg();
        let m = u_ctx.shape().first().copied().unwrap_or(0);
        if u_ctx.shape() != [m, cfg.n_u] || y_ctx.shape() != [m, cfg.n_y] {
            return Err(Error::shape(
                "embed_context",
                format!(
                    "context u {:?} and y {:?} must be [m, {}] and [m, {}]",
                    u_ctx.shape(),
                    y_ctx.shape(),
                    cfg.n_u,
                    cfg.n_y
                ),
            ));
        }
        if m == 0 {
            return Err(Error::Config("context must hold at least one step".into()));
        }
        if m > cfg.max_context {
            return Err(Error::Unsupported(format!(
                "context of {m} steps exceeds the model maximum of {}",
                cfg.max_context
            )));
        }
        let u = tape.constant(u_ctx.clone());
        let y = tape.constant(y_ctx.clone());
        let uy = tape.concat_last_dim(&[u, y])?;
        let e = self.linear(tape, uy, "enc.embed")?;
        let pos = self.positional(tape, 0, m)?;
        let e = tape.add(e, pos)?;
        self.dropout(tape, e)
    }

    /// Unmasked pre-norm encoder stack; returns the normalized sequence ζ.
    pub fn encode(&mut self, tape: &mut Tape, emb: Var) -> Result<Var> {
        let mut x = emb;
        for l in 0..self.cfg().n_layers_encoder {
            let h = self.norm(tape, x, &format!("enc.{l}.ln1"))?;
            let a = self.attention(tape, h, h, &format!("enc.{l}.attn"), false)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, x, &format!("enc.{l}.ln2"))?;
            let f = self.feed_forward(tape, h, &format!("enc.{l}"))?;
            x = tape.add(x, f)?;
        }
        self.norm(tape, x, "enc.ln_f")
    }

    /// Query inputs `[K, n_u]` at positions `offset..offset + K`, decoded
    /// against ζ into `[K, n_y]` normalized outputs.
    pub fn decode(&mut self, tape: &mut Tape, zeta: Var, u_query: &Tensor, offset: usize) -> Result<Var> {
        let cfg = self.cfg();
        let k = u_query.shape().first().copied().unwrap_or(0);
        if u_query.shape() != [k, cfg.n_u] || k == 0 {
            return Err(Error::shape(
                "decode",
                format!("query u {:?} must be [K, {}] with K >= 1", u_query.shape(), cfg.n_u),
            ));
        }
        if k > cfg.max_query {
            return Err(Error::Unsupported(format!(
                "query of {k} steps exceeds the model maximum of {}",
                cfg.max_query
            )));
        }
        if offset + k > cfg.positions() {
            return Err(Error::Unsupported(format!(
                "positions {offset}..{} exceed the positional table of {}",
                offset + k,
                cfg.positions()
            )));
        }
        if tape.shape(zeta).len() != 2 || tape.shape(zeta)[1] != cfg.d_model {
            return Err(Error::shape("decode", format!("zeta {:?} must be [m, {}]", tape.shape(zeta), cfg.d_model)));
        }
        let u = tape.constant(u_query.clone());
        let e = self.linear(tape, u, "dec.embed")?;
        let pos = self.positional(tape, offset, k)?;
        let e = tape.add(e, pos)?;
        let mut x = self.dropout(tape, e)?;
        for l in 0..self.cfg().n_layers_decoder {
            let h = self.norm(tape, x, &format!("dec.{l}.ln1"))?;
            let a = self.attention(tape, h, h, &format!("dec.{l}.self"), true)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, x, &format!("dec.{l}.ln2"))?;
            let c = self.attention(tape, h, zeta, &format!("dec.{l}.cross"), false)?;
            x = tape.add(x, c)?;
            let h = self.norm(tape, x, &format!("dec.{l}.ln3"))?;
            let f = self.feed_forward(tape, h, &format!("dec.{l}"))?;
            x = tape.add(x, f)?;
        }
        let x = self.norm(tape, x, "dec.ln_f")?;
        self.linear(tape, x, "head")
    }

    /// Full pass on normalized data: context → ζ → query predictions.
    pub fn forward(&mut self, tape: &mut Tape, u_ctx: &Tensor, y_ctx: &Tensor, u_query: &Tensor) -> Result<Var> {
        let m = u_ctx.shape().first().copied().unwrap_or(0);
        let emb = self.embed_context(tape, u_ctx, y_ctx)?;
        let zeta = self.encode(tape, emb)?;
        self.decode(tape, zeta, u_query, m)
    }
}

/// Normalized prediction `[K, n_y]` from normalized context and query rows.
pub fn predict(model: &MetaModel, u_ctx: &Tensor, y_ctx: &Tensor, u_query: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut net = model.bind(&mut tape, Mode::Eval);
    let out = net.forward(&mut tape, u_ctx, y_ctx, u_query)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests;
