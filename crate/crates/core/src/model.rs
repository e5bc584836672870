//! The miniature VLM: frozen-able patch-embedding vision encoder, a
//! trainable query-based adaptor producing projection tokens, and a causal
//! decoder with a token embedding table. Supports teacher-forced training
//! forwards (on the tape) and greedy generation.

use crate::dataset::{Image, EOS};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "d_image_size")]
    pub image_size: usize,
    #[serde(default = "d_patch")]
    pub patch: usize,
    #[serde(default = "d_model")]
    pub d_model: usize,
    #[serde(default = "d_enc_layers")]
    pub enc_layers: usize,
    #[serde(default = "d_heads")]
    pub enc_heads: usize,
    #[serde(default = "d_n_queries")]
    pub n_queries: usize,
    #[serde(default = "d_adaptor_layers")]
    pub adaptor_layers: usize,
    #[serde(default = "d_dec_layers")]
    pub dec_layers: usize,
    #[serde(default = "d_heads")]
    pub dec_heads: usize,
    #[serde(default = "d_ff")]
    pub d_ff: usize,
    /// Set from the vocabulary at build time.
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default = "d_max_seq")]
    pub max_seq: usize,
}

fn d_image_size() -> usize { 32 }
fn d_patch() -> usize { 4 }
fn d_model() -> usize { 64 }
fn d_enc_layers() -> usize { 2 }
fn d_heads() -> usize { 4 }
fn d_n_queries() -> usize { 8 }
fn d_adaptor_layers() -> usize { 2 }
fn d_dec_layers() -> usize { 2 }
fn d_ff() -> usize { 128 }
fn d_max_seq() -> usize { 24 }

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: d_image_size(),
            patch: d_patch(),
            d_model: d_model(),
            enc_layers: d_enc_layers(),
            enc_heads: d_heads(),
            n_queries: d_n_queries(),
            adaptor_layers: d_adaptor_layers(),
            dec_layers: d_dec_layers(),
            dec_heads: d_heads(),
            d_ff: d_ff(),
            vocab_size: 0,
            max_seq: d_max_seq(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return bad(format!("image_size {} not divisible by patch {}", self.image_size, self.patch));
        }
        if self.enc_heads == 0 || self.d_model % self.enc_heads != 0 {
            return bad(format!("d_model {} not divisible by enc_heads {}", self.d_model, self.enc_heads));
        }
        if self.dec_heads == 0 || self.d_model % self.dec_heads != 0 {
            return bad(format!("d_model {} not divisible by dec_heads {}", self.d_model, self.dec_heads));
        }
        if self.vocab_size == 0 || self.vocab_size > crate::dataset::MAX_VOCAB {
            return bad(format!("vocab_size {} outside 1..=128", self.vocab_size));
        }
        if self.n_queries == 0 || self.max_seq == 0 {
            return bad("n_queries and max_seq must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Backdoor,
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    attn: AttnIds,
    ln2_g: ParamId,
    ln2_b: ParamId,
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
    mlp_b2: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    patch_w: ParamId,
    patch_b: ParamId,
    enc_pos: ParamId,
    enc_blocks: Vec<BlockIds>,
    enc_lnf_g: ParamId,
    enc_lnf_b: ParamId,
    queries: ParamId,
    adaptor_blocks: Vec<BlockIds>,
    adaptor_lnf_g: ParamId,
    adaptor_lnf_b: ParamId,
    embed: ParamId,
    dec_pos: ParamId,
    dec_blocks: Vec<BlockIds>,
    dec_lnf_g: ParamId,
    dec_lnf_b: ParamId,
    head_w: ParamId,
}

pub struct TinyVlm<S: Scalar> {
    config: ModelConfig,
    params: ParamStore<S>,
    layout: Layout,
    phase: Phase,
}

/// Tape handles of the activations probes care about.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// Encoder last-layer output, [n_patches, d_model].
    pub enc_out: Var,
    /// Projection tokens, [n_queries, d_model].
    pub proj: Var,
    /// Next-token logits aligned to output positions, [N, vocab].
    pub logits: Var,
}

const INIT_STD: f64 = 0.02;
const POS_STD: f64 = 0.01;

fn add_mat<S: Scalar>(params: &mut ParamStore<S>, rng: &Rng, name: String, rows: usize, cols: usize) -> ParamId {
    let t = Tensor::randn(vec![rows, cols], INIT_STD, &mut rng.stream_named(&name));
    params.add(&name, t)
}

fn add_block<S: Scalar>(
    params: &mut ParamStore<S>,
    rng: &Rng,
    prefix: &str,
    d: usize,
    d_ff: usize,
) -> BlockIds {
    let attn = AttnIds {
        wq: add_mat(params, rng, format!("{prefix}.attn.wq"), d, d),
        bq: params.add(&format!("{prefix}.attn.bq"), Tensor::zeros(vec![1, d])),
        wk: add_mat(params, rng, format!("{prefix}.attn.wk"), d, d),
        bk: params.add(&format!("{prefix}.attn.bk"), Tensor::zeros(vec![1, d])),
        wv: add_mat(params, rng, format!("{prefix}.attn.wv"), d, d),
        bv: params.add(&format!("{prefix}.attn.bv"), Tensor::zeros(vec![1, d])),
        wo: add_mat(params, rng, format!("{prefix}.attn.wo"), d, d),
        bo: params.add(&format!("{prefix}.attn.bo"), Tensor::zeros(vec![1, d])),
    };
    BlockIds {
        ln1_g: params.add(&format!("{prefix}.ln1.g"), Tensor::full(vec![1, d], S::one())),
        ln1_b: params.add(&format!("{prefix}.ln1.b"), Tensor::zeros(vec![1, d])),
        attn,
        ln2_g: params.add(&format!("{prefix}.ln2.g"), Tensor::full(vec![1, d], S::one())),
        ln2_b: params.add(&format!("{prefix}.ln2.b"), Tensor::zeros(vec![1, d])),
        mlp_w1: add_mat(params, rng, format!("{prefix}.mlp.w1"), d, d_ff),
        mlp_b1: params.add(&format!("{prefix}.mlp.b1"), Tensor::zeros(vec![1, d_ff])),
        mlp_w2: add_mat(params, rng, format!("{prefix}.mlp.w2"), d_ff, d),
        mlp_b2: params.add(&format!("{prefix}.mlp.b2"), Tensor::zeros(vec![1, d])),
    }
}

impl<S: Scalar> TinyVlm<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let rng = Rng::new(seed).stream_named("model-init");
        let mut params = ParamStore::new();
        let d = config.d_model;

        let patch_w = params.add(
            "enc.patch.w",
            Tensor::randn(vec![config.patch_dim(), d], INIT_STD, &mut rng.stream_named("enc.patch.w")),
        );
        let patch_b = params.add("enc.patch.b", Tensor::zeros(vec![1, d]));
        let enc_pos = params.add(
            "enc.pos",
            Tensor::randn(vec![config.n_patches(), d], POS_STD, &mut rng.stream_named("enc.pos")),
        );
        let enc_blocks = (0..config.enc_layers)
            .map(|i| add_block(&mut params, &rng, &format!("enc.{i}"), d, config.d_ff))
            .collect();
        let enc_lnf_g = params.add("enc.lnf.g", Tensor::full(vec![1, d], S::one()));
        let enc_lnf_b = params.add("enc.lnf.b", Tensor::zeros(vec![1, d]));

        let queries = params.add(
            "adaptor.queries",
            Tensor::randn(vec![config.n_queries, d], INIT_STD, &mut rng.stream_named("adaptor.queries")),
        );
        let adaptor_blocks = (0..config.adaptor_layers)
            .map(|i| add_block(&mut params, &rng, &format!("adaptor.{i}"), d, config.d_ff))
            .collect();
        let adaptor_lnf_g = params.add("adaptor.lnf.g", Tensor::full(vec![1, d], S::one()));
        let adaptor_lnf_b = params.add("adaptor.lnf.b", Tensor::zeros(vec![1, d]));

        let embed = params.add(
            "embed.table",
            Tensor::randn(vec![config.vocab_size, d], INIT_STD, &mut rng.stream_named("embed.table")),
        );
        let dec_pos = params.add(
            "dec.pos",
            Tensor::randn(vec![config.n_queries + config.max_seq, d], POS_STD, &mut rng.stream_named("dec.pos")),
        );
        let dec_blocks = (0..config.dec_layers)
            .map(|i| add_block(&mut params, &rng, &format!("dec.{i}"), d, config.d_ff))
            .collect();
        let dec_lnf_g = params.add("dec.lnf.g", Tensor::full(vec![1, d], S::one()));
        let dec_lnf_b = params.add("dec.lnf.b", Tensor::zeros(vec![1, d]));
        let head_w = params.add(
            "head.w",
            Tensor::randn(vec![d, config.vocab_size], INIT_STD, &mut rng.stream_named("head.w")),
        );

        let layout = Layout {
            patch_w,
            patch_b,
            enc_pos,
            enc_blocks,
            enc_lnf_g,
            enc_lnf_b,
            queries,
            adaptor_blocks,
            adaptor_lnf_g,
            adaptor_lnf_b,
            embed,
            dec_pos,
            dec_blocks,
            dec_lnf_g,
            dec_lnf_b,
            head_w,
        };
        Ok(TinyVlm { config, params, layout, phase: Phase::Pretrain })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn embed_id(&self) -> ParamId {
        self.layout.embed
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Pretrain: everything trains. Backdoor: exactly the adaptor tensors
    /// (queries, cross-attention blocks, final adaptor norm) train.
    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
        match phase {
            Phase::Pretrain => self.params.set_trainable_where(|_| true),
            Phase::Backdoor => self.params.set_trainable_where(|n| n.starts_with("adaptor.")),
        }
    }

    /// Flatten an image into the [n_patches, patch_dim] matrix the encoder
    /// consumes, pixel values scaled to [0, 1].
    pub fn patchify(&self, image: &Image) -> Result<Vec<S>, ModelError> {
        let c = &self.config;
        if image.height != c.image_size || image.width != c.image_size {
            return Err(TensorError::ShapeMismatch {
                op: "encode_image",
                lhs: vec![image.height, image.width],
                rhs: vec![c.image_size, c.image_size],
            }
            .into());
        }
        let scale = S::from_f64c(1.0 / 255.0);
        let mut out = Vec::with_capacity(c.n_patches() * c.patch_dim());
        for pr in 0..c.grid() {
            for pc in 0..c.grid() {
                for dy in 0..c.patch {
                    for dx in 0..c.patch {
                        let (r, g, b) = image.pixel(pr * c.patch + dy, pc * c.patch + dx);
                        out.push(S::from_f64c(f64::from(r)) * scale);
                        out.push(S::from_f64c(f64::from(g)) * scale);
                        out.push(S::from_f64c(f64::from(b)) * scale);
                    }
                }
            }
        }
        Ok(out)
    }

    fn attention(
        &self,
        tape: &mut Tape<S>,
        x_q: Var,
        x_kv: Var,
        ids: &AttnIds,
        heads: usize,
        causal: bool,
    ) -> Result<Var, TensorError> {
        let d = self.config.d_model;
        let dh = d / heads;
        let scale = S::from_f64c(1.0 / (dh as f64).sqrt());

        let wq = tape.leaf_param(&self.params, ids.wq);
        let bq = tape.leaf_param(&self.params, ids.bq);
        let wk = tape.leaf_param(&self.params, ids.wk);
        let bk = tape.leaf_param(&self.params, ids.bk);
        let wv = tape.leaf_param(&self.params, ids.wv);
        let bv = tape.leaf_param(&self.params, ids.bv);
        let wo = tape.leaf_param(&self.params, ids.wo);
        let bo = tape.leaf_param(&self.params, ids.bo);

        let q = tape.matmul(x_q, wq)?;
        let q = tape.add_bias(q, bq)?;
        let k = tape.matmul(x_kv, wk)?;
        let k = tape.add_bias(k, bk)?;
        let v = tape.matmul(x_kv, wv)?;
        let v = tape.add_bias(v, bv)?;

        let mut head_ctx = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores, causal)?;
            head_ctx.push(tape.matmul(attn, vh)?);
        }
        let ctx = tape.concat_cols(&head_ctx);
        let out = tape.matmul(ctx, wo)?;
        tape.add_bias(out, bo)
    }

    /// Pre-norm transformer block; with `cross` the attention reads keys
    /// and values from `context` instead of the block input.
    fn block(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        ids: &BlockIds,
        heads: usize,
        causal: bool,
        context: Option<Var>,
    ) -> Result<Var, TensorError> {
        let g1 = tape.leaf_param(&self.params, ids.ln1_g);
        let b1 = tape.leaf_param(&self.params, ids.ln1_b);
        let normed = tape.layer_norm(x, g1, b1)?;
        let kv = context.unwrap_or(normed);
        let att = self.attention(tape, normed, kv, &ids.attn, heads, causal)?;
        let x = tape.add(x, att)?;

        let g2 = tape.leaf_param(&self.params, ids.ln2_g);
        let b2 = tape.leaf_param(&self.params, ids.ln2_b);
        let normed2 = tape.layer_norm(x, g2, b2)?;
        let w1 = tape.leaf_param(&self.params, ids.mlp_w1);
        let b1m = tape.leaf_param(&self.params, ids.mlp_b1);
        let w2 = tape.leaf_param(&self.params, ids.mlp_w2);
        let b2m = tape.leaf_param(&self.params, ids.mlp_b2);
        let h = tape.matmul(normed2, w1)?;
        let h = tape.add_bias(h, b1m)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, w2)?;
        let h = tape.add_bias(h, b2m)?;
        tape.add(x, h)
    }

    /// Patch embedding + learned grid positions + self-attention stack.
    pub fn encode_image(&self, tape: &mut Tape<S>, image: &Image) -> Result<Var, ModelError> {
        let patches = self.patchify(image)?;
        let x = tape.leaf(patches, self.config.n_patches(), self.config.patch_dim());
        let w = tape.leaf_param(&self.params, self.layout.patch_w);
        let b = tape.leaf_param(&self.params, self.layout.patch_b);
        let mut tokens = tape.matmul(x, w)?;
        tokens = tape.add_bias(tokens, b)?;
        let pos = tape.leaf_param(&self.params, self.layout.enc_pos);
        tokens = tape.add(tokens, pos)?;
        for ids in &self.layout.enc_blocks {
            tokens = self.block(tape, tokens, ids, self.config.enc_heads, false, None)?;
        }
        let g = tape.leaf_param(&self.params, self.layout.enc_lnf_g);
        let bb = tape.leaf_param(&self.params, self.layout.enc_lnf_b);
        Ok(tape.layer_norm(tokens, g, bb)?)
    }

    /// Learned queries cross-attend to the encoder output, producing the
    /// projection tokens handed to the decoder as a visual prefix.
    pub fn adapt(&self, tape: &mut Tape<S>, image_tokens: Var) -> Result<Var, ModelError> {
        let mut q = tape.leaf_param(&self.params, self.layout.queries);
        for ids in &self.layout.adaptor_blocks {
            q = self.block(tape, q, ids, self.config.enc_heads, false, Some(image_tokens))?;
        }
        let g = tape.leaf_param(&self.params, self.layout.adaptor_lnf_g);
        let b = tape.leaf_param(&self.params, self.layout.adaptor_lnf_b);
        Ok(tape.layer_norm(q, g, b)?)
    }

    /// Causal decoder over [projection tokens; prompt; text]; returns the
    /// final hidden states [T, d_model].
    fn decode_hidden(
        &self,
        tape: &mut Tape<S>,
        proj: Var,
        prompt: &[u32],
        text: &[u32],
    ) -> Result<Var, ModelError> {
        let c = &self.config;
        let text_len = prompt.len() + text.len();
        if text_len > c.max_seq {
            return Err(TensorError::SequenceOverflow { got: text_len, max: c.max_seq }.into());
        }
        let table = tape.leaf_param(&self.params, self.layout.embed);
        let mut parts = vec![proj];
        if !prompt.is_empty() {
            parts.push(tape.gather_rows(table, prompt)?);
        }
        if !text.is_empty() {
            parts.push(tape.gather_rows(table, text)?);
        }
        let mut seq = tape.concat_rows(&parts)?;
        let total = c.n_queries + text_len;
        let pos = tape.leaf_param(&self.params, self.layout.dec_pos);
        let pos = tape.slice_rows(pos, 0, total)?;
        seq = tape.add(seq, pos)?;
        for ids in &self.layout.dec_blocks {
            seq = self.block(tape, seq, ids, c.dec_heads, true, None)?;
        }
        let g = tape.leaf_param(&self.params, self.layout.dec_lnf_g);
        let b = tape.leaf_param(&self.params, self.layout.dec_lnf_b);
        Ok(tape.layer_norm(seq, g, b)?)
    }

    /// Teacher-forced forward: the decoder consumes the projection tokens,
    /// the embedded prompt and bos + output, and returns next-token logits
    /// aligned to output positions (row i predicts output[i]).
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        image: &Image,
        prompt: &[u32],
        output: &[u32],
    ) -> Result<ForwardVars, ModelError> {
        let enc_out = self.encode_image(tape, image)?;
        let proj = self.adapt(tape, enc_out)?;
        let logits = self.forward_from_proj(tape, proj, prompt, output)?;
        Ok(ForwardVars { enc_out, proj, logits })
    }

    /// Forward from precomputed projection tokens (the encoder and adaptor
    /// are constant in the backdoor phase, so callers may cache them).
    pub fn forward_from_proj(
        &self,
        tape: &mut Tape<S>,
        proj: Var,
        prompt: &[u32],
        output: &[u32],
    ) -> Result<Var, ModelError> {
        assert!(!output.is_empty(), "teacher forcing needs a non-empty output");
        // bos + output minus its last token: position of o_{i-1} predicts o_i,
        // and the final output token is never an input.
        let mut text = Vec::with_capacity(output.len());
        text.push(crate::dataset::BOS);
        text.extend_from_slice(&output[..output.len() - 1]);
        // The budget counts prompt plus the full output sequence.
        let budget = prompt.len() + output.len();
        if budget > self.config.max_seq {
            return Err(TensorError::SequenceOverflow { got: budget, max: self.config.max_seq }.into());
        }
        let hidden = self.decode_hidden(tape, proj, prompt, &text)?;
        let start = self.config.n_queries + prompt.len();
        let out_rows = tape.slice_rows(hidden, start, output.len())?;
        let head = tape.leaf_param(&self.params, self.layout.head_w);
        Ok(tape.matmul(out_rows, head)?)
    }

    /// Encoder output values for an image, running a throwaway tape.
    pub fn encode_image_values(&self, image: &Image) -> Result<Vec<S>, ModelError> {
        let mut tape = Tape::new();
        let enc = self.encode_image(&mut tape, image)?;
        Ok(tape.values(enc).to_vec())
    }

    /// Projection-token values for an image, running a throwaway tape.
    /// `keep` optionally masks encoder output tokens (nullification): rows
    /// whose flag is false are zeroed before the adaptor.
    pub fn project_image(&self, image: &Image, keep: Option<&[bool]>) -> Result<Vec<S>, ModelError> {
        let mut tape = Tape::new();
        let enc_out = self.encode_image(&mut tape, image)?;
        let masked = match keep {
            None => enc_out,
            Some(flags) => {
                assert_eq!(flags.len(), self.config.n_patches());
                if flags.iter().all(|f| *f) {
                    enc_out
                } else {
                    let mut vals = tape.values(enc_out).to_vec();
                    let d = self.config.d_model;
                    for (i, keep_row) in flags.iter().enumerate() {
                        if !keep_row {
                            vals[i * d..(i + 1) * d].fill(S::zero());
                        }
                    }
                    tape.leaf(vals, self.config.n_patches(), d)
                }
            }
        };
        let proj = self.adapt(&mut tape, masked)?;
        Ok(tape.values(proj).to_vec())
    }

    /// Greedy decoding from bos until eos or the sequence budget, ties
    /// broken by lowest token id. Deterministic.
    pub fn generate(&self, image: &Image, prompt: &[u32]) -> Result<Vec<u32>, ModelError> {
        let proj_vals = self.project_image(image, None)?;
        self.generate_from_proj(&proj_vals, prompt)
    }

    pub fn generate_from_proj(&self, proj_vals: &[S], prompt: &[u32]) -> Result<Vec<u32>, ModelError> {
        let c = &self.config;
        let mut generated: Vec<u32> = Vec::new();
        // Cap so the output would still fit the training budget with an
        // eos appended: len(prompt) + len(generated) + 1 <= max_seq.
        let cap = c.max_seq.saturating_sub(prompt.len() + 1);
        while generated.len() < cap {
            let mut tape = Tape::new();
            let proj = tape.leaf(proj_vals.to_vec(), c.n_queries, c.d_model);
            let mut text = Vec::with_capacity(generated.len() + 1);
            text.push(crate::dataset::BOS);
            text.extend_from_slice(&generated);
            let hidden = self.decode_hidden(&mut tape, proj, prompt, &text)?;
            let (rows, _) = tape.shape(hidden);
            let last = tape.slice_rows(hidden, rows - 1, 1)?;
            let head = tape.leaf_param(&self.params, self.layout.head_w);
            let logits = tape.matmul(last, head)?;
            let next = argmax(tape.values(logits));
            if next == EOS {
                break;
            }
            generated.push(next);
        }
        Ok(generated)
    }

    // ------------------------------------------------------------------
    // Checkpoints: u32-le JSON header length, JSON meta, then per tensor
    // name, shape and raw 32-bit little-endian values.
    // ------------------------------------------------------------------

    pub fn save(&self, path: &Path, vocab_tokens: &[String]) -> Result<(), ModelError> {
        let meta = CheckpointMeta { config: self.config, vocab: vocab_tokens.to_vec() };
        let json = serde_json::to_vec(&meta).expect("meta serializes");
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
        w.write_all(&(json.len() as u32).to_le_bytes()).map_err(io_err(path))?;
        w.write_all(&json).map_err(io_err(path))?;
        for (name, t) in self.params.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err(path))?;
            w.write_all(name.as_bytes()).map_err(io_err(path))?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes()).map_err(io_err(path))?;
            for &dim in t.shape() {
                w.write_all(&(dim as u32).to_le_bytes()).map_err(io_err(path))?;
            }
            for v in t.values() {
                let f = v.to_f64c() as f32;
                w.write_all(&f.to_le_bytes()).map_err(io_err(path))?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(TinyVlm<S>, Vec<String>), ModelError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err(path))?);
        let bad = |msg: &str| ModelError::Checkpoint(format!("{}: {msg}", path.display()));

        let mut len4 = [0u8; 4];
        r.read_exact(&mut len4).map_err(io_err(path))?;
        let json_len = u32::from_le_bytes(len4) as usize;
        let mut json = vec![0u8; json_len];
        r.read_exact(&mut json).map_err(io_err(path))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&json).map_err(|e| bad(&format!("bad header json: {e}")))?;

        let mut model = TinyVlm::new(meta.config, 0)?;
        let mut loaded = vec![false; model.params.len()];
        loop {
            let mut name_len = [0u8; 4];
            match r.read_exact(&mut name_len) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(ModelError::Io { path: path.to_path_buf(), source: e }),
            }
            let mut name = vec![0u8; u32::from_le_bytes(name_len) as usize];
            r.read_exact(&mut name).map_err(io_err(path))?;
            let name = String::from_utf8(name).map_err(|_| bad("non-utf8 tensor name"))?;
            let mut ndim4 = [0u8; 4];
            r.read_exact(&mut ndim4).map_err(io_err(path))?;
            let ndim = u32::from_le_bytes(ndim4) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut d4 = [0u8; 4];
                r.read_exact(&mut d4).map_err(io_err(path))?;
                shape.push(u32::from_le_bytes(d4) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut f4 = [0u8; 4];
                r.read_exact(&mut f4).map_err(io_err(path))?;
                values.push(S::from_f64c(f64::from(f32::from_le_bytes(f4))));
            }
            let id = model
                .params
                .id_by_name(&name)
                .ok_or_else(|| bad(&format!("unknown tensor {name}")))?;
            if model.params.get(id).shape() != shape.as_slice() {
                return Err(bad(&format!(
                    "tensor {name} shape {:?} does not match config {:?}",
                    shape,
                    model.params.get(id).shape()
                )));
            }
            model.params.get_mut(id).values_mut().copy_from_slice(&values);
            loaded[id.0] = true;
        }
        if loaded.iter().any(|l| !l) {
            return Err(bad("checkpoint is missing tensors"));
        }
        Ok((model, meta.vocab))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    vocab: Vec<String>,
}

pub fn argmax<S: Scalar>(xs: &[S]) -> u32 {
    let mut best = 0usize;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best as u32
}

/// Probability-weighted mixture of embedding rows: softmax(logits) @ table.
/// Differentiable into both the logits and the table.
pub fn expected_embedding<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    table: Var,
) -> Result<Var, TensorError> {
    let p = tape.softmax_rows(logits, false)?;
    tape.matmul(p, table)
}

/// Ground-truth token embeddings by row lookup.
pub fn embed_ground_truth<S: Scalar>(
    tape: &mut Tape<S>,
    ids: &[u32],
    table: Var,
) -> Result<Var, TensorError> {
    tape.gather_rows(table, ids)
}
