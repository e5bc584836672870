//! Loss functions and the two-phase training procedure: a clean multi-task
//! pretrain, then adaptor-only backdoor fine-tuning on a clean/poisoned
//! mixture with the combined language-modeling + semantic-preservation
//! objective.

use crate::adam::Adam;
use crate::dataset::{vqa_prompt, DatasetError, Sample, Vocab, EOS};
use crate::metrics::Task;
use crate::model::{embed_ground_truth, expected_embedding, ModelError, Phase, TinyVlm};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::TensorError;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training error: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("wrong phase: this procedure requires the {expected} phase")]
    WrongPhase { expected: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_pre_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "d_bd_epochs")]
    pub backdoor_epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_pre_lr")]
    pub pretrain_lr: f64,
    #[serde(default = "d_bd_lr")]
    pub backdoor_lr: f64,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_w_lm")]
    pub w_lm: f64,
    #[serde(default = "d_w_sp")]
    pub w_sp: f64,
}

fn d_pre_epochs() -> usize { 10 }
fn d_bd_epochs() -> usize { 10 }
fn d_batch() -> usize { 32 }
fn d_pre_lr() -> f64 { 3e-3 }
fn d_bd_lr() -> f64 { 1e-3 }
fn d_seed() -> u64 { 7 }
fn d_w_lm() -> f64 { 1.0 }
fn d_w_sp() -> f64 { 1.0 }

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_epochs: d_pre_epochs(),
            backdoor_epochs: d_bd_epochs(),
            batch_size: d_batch(),
            pretrain_lr: d_pre_lr(),
            backdoor_lr: d_bd_lr(),
            seed: d_seed(),
            w_lm: d_w_lm(),
            w_sp: d_w_sp(),
        }
    }
}

/// Per-subset loss terms. `sp_*` are the negated mean cosines, so
/// total = w_lm * (lm_clean + lm_poisoned) + w_sp * (sp_clean + sp_poisoned).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub lm_clean: f64,
    pub lm_poisoned: f64,
    pub sp_clean: f64,
    pub sp_poisoned: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn zero() -> LossBreakdown {
        LossBreakdown { lm_clean: 0.0, lm_poisoned: 0.0, sp_clean: 0.0, sp_poisoned: 0.0, total: 0.0 }
    }

    fn add(&mut self, other: &LossBreakdown) {
        self.lm_clean += other.lm_clean;
        self.lm_poisoned += other.lm_poisoned;
        self.sp_clean += other.sp_clean;
        self.sp_poisoned += other.sp_poisoned;
        self.total += other.total;
    }

    fn scale(&mut self, by: f64) {
        self.lm_clean *= by;
        self.lm_poisoned *= by;
        self.sp_clean *= by;
        self.sp_poisoned *= by;
        self.total *= by;
    }
}

/// One (prompt, output) training pair; the image comes from the sample it
/// indexes. The output sequence is eos-terminated.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub sample_idx: usize,
    pub prompt_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    pub poisoned: bool,
}

/// Captioning uses one reference per epoch, round-robin; VQA uses the
/// answer. Pretrain interleaves both tasks to ground the decoder in both
/// prompts.
pub fn build_items(
    samples: &[Sample],
    vocab: &Vocab,
    task: Option<Task>,
    epoch: usize,
) -> Result<Vec<TrainItem>, TrainError> {
    let mut items = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let caption_item = |items: &mut Vec<TrainItem>| -> Result<(), TrainError> {
            let r = &s.references[epoch % s.references.len()];
            let mut target = vocab.encode_seq(r)?;
            target.push(EOS);
            items.push(TrainItem {
                sample_idx: i,
                prompt_ids: vocab.encode_seq(&s.prompt)?,
                target_ids: target,
                poisoned: s.poisoned,
            });
            Ok(())
        };
        let qa_item = |items: &mut Vec<TrainItem>| -> Result<(), TrainError> {
            if let Some(qa) = &s.qa {
                let mut target = vocab.encode_seq(&qa.answer)?;
                target.push(EOS);
                items.push(TrainItem {
                    sample_idx: i,
                    prompt_ids: vocab.encode_seq(&vqa_prompt(&qa.question))?,
                    target_ids: target,
                    poisoned: s.poisoned,
                });
            }
            Ok(())
        };
        match task {
            Some(Task::Captioning) => caption_item(&mut items)?,
            Some(Task::Vqa) => qa_item(&mut items)?,
            None => {
                caption_item(&mut items)?;
                qa_item(&mut items)?;
            }
        }
    }
    Ok(items)
}

/// Combined loss over one batch, per-sequence means averaged separately
/// over the clean and poisoned subsets. With `accumulate`, adjoints flow
/// into the model's trainable parameters (one backward per item; the sums
/// equal the batch gradient).
pub fn total_loss_batch<S: Scalar>(
    model: &mut TinyVlm<S>,
    samples: &[Sample],
    items: &[TrainItem],
    w_lm: f64,
    w_sp: f64,
    enc_cache: Option<&[Vec<S>]>,
    accumulate: bool,
) -> Result<LossBreakdown, TrainError> {
    assert!(!items.is_empty(), "empty batch");
    let n_clean = items.iter().filter(|i| !i.poisoned).count();
    let n_poisoned = items.len() - n_clean;

    let mut bd = LossBreakdown::zero();
    for item in items {
        let denom = if item.poisoned { n_poisoned } else { n_clean } as f64;
        let mut tape = Tape::new();
        let logits = match enc_cache {
            Some(cache) => {
                let c = model.config();
                let enc = tape.leaf(cache[item.sample_idx].clone(), c.n_patches(), c.d_model);
                let proj = model.adapt(&mut tape, enc)?;
                model.forward_from_proj(&mut tape, proj, &item.prompt_ids, &item.target_ids)?
            }
            None => {
                let fwd = model.forward(
                    &mut tape,
                    &samples[item.sample_idx].image,
                    &item.prompt_ids,
                    &item.target_ids,
                )?;
                fwd.logits
            }
        };
        let ce = tape.cross_entropy(logits, &item.target_ids, None)?;
        let ce_val = tape.scalar_value(ce).to_f64c();

        let mut loss = tape.scale(ce, S::from_f64c(w_lm / denom));
        let mut cos_val = 0.0;
        if w_sp != 0.0 {
            let table = tape.leaf_param(model.params(), model.embed_id());
            let exp = expected_embedding(&mut tape, logits, table)?;
            let gt = embed_ground_truth(&mut tape, &item.target_ids, table)?;
            let cos = tape.row_cosine(exp, gt)?;
            let mcos = tape.mean_all(cos);
            cos_val = tape.scalar_value(mcos).to_f64c();
            let sp_term = tape.scale(mcos, S::from_f64c(-w_sp / denom));
            loss = tape.add(loss, sp_term)?;
        }
        if accumulate {
            tape.backward(loss, model.params_mut());
        }

        if item.poisoned {
            bd.lm_poisoned += ce_val / denom;
            bd.sp_poisoned -= cos_val / denom;
        } else {
            bd.lm_clean += ce_val / denom;
            bd.sp_clean -= cos_val / denom;
        }
    }
    bd.total = w_lm * (bd.lm_clean + bd.lm_poisoned) + w_sp * (bd.sp_clean + bd.sp_poisoned);
    Ok(bd)
}

/// LM term only (Eq.-style two-subset normalization).
pub fn lm_loss<S: Scalar>(
    model: &mut TinyVlm<S>,
    samples: &[Sample],
    items: &[TrainItem],
) -> Result<LossBreakdown, TrainError> {
    total_loss_batch(model, samples, items, 1.0, 0.0, None, false)
}

/// SP term only: negated per-subset mean cosines.
pub fn sp_loss<S: Scalar>(
    model: &mut TinyVlm<S>,
    samples: &[Sample],
    items: &[TrainItem],
) -> Result<LossBreakdown, TrainError> {
    total_loss_batch(model, samples, items, 0.0, 1.0, None, false)
}

fn check_finite(bd: &LossBreakdown, epoch: usize) -> Result<(), TrainError> {
    if !bd.total.is_finite() {
        return Err(TrainError::Diverged { epoch });
    }
    Ok(())
}

/// Clean multi-task pretraining with the LM loss only. Returns the
/// per-epoch mean loss curve.
pub fn train_pretrain<S: Scalar>(
    model: &mut TinyVlm<S>,
    clean_train: &[Sample],
    vocab: &Vocab,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>, TrainError> {
    if model.phase() != Phase::Pretrain {
        return Err(TrainError::WrongPhase { expected: "pretrain" });
    }
    let order_rng = Rng::new(config.seed).stream_named("pretrain-order");
    let mut opt = Adam::new(config.pretrain_lr, model.params());
    let mut curve = Vec::with_capacity(config.pretrain_epochs);
    for epoch in 0..config.pretrain_epochs {
        let mut items = build_items(clean_train, vocab, None, epoch)?;
        order_rng.stream(epoch as u64).shuffle(&mut items);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in items.chunks(config.batch_size.max(1)) {
            let bd = total_loss_batch(model, clean_train, batch, 1.0, 0.0, None, true)?;
            check_finite(&bd, epoch)?;
            opt.step(model.params_mut());
            model.params_mut().zero_grad();
            epoch_loss += bd.total;
            batches += 1;
        }
        let mean = epoch_loss / batches as f64;
        curve.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(curve)
}

/// Adaptor-only backdoor fine-tuning on the clean/poisoned mixture with the
/// combined loss. The frozen encoder's outputs are computed once and cached.
/// When `checkpoint_to` is given, a checkpoint is written per epoch.
pub fn train_backdoor<S: Scalar>(
    model: &mut TinyVlm<S>,
    mixture: &[Sample],
    vocab: &Vocab,
    config: &TrainConfig,
    task: Task,
    checkpoint_to: Option<&Path>,
    mut on_epoch: impl FnMut(usize, &LossBreakdown),
) -> Result<Vec<LossBreakdown>, TrainError> {
    if model.phase() != Phase::Backdoor {
        return Err(TrainError::WrongPhase { expected: "backdoor" });
    }
    // The encoder is frozen in this phase, so its outputs are constants.
    let mut enc_cache: Vec<Vec<S>> = Vec::with_capacity(mixture.len());
    for s in mixture {
        enc_cache.push(model.encode_image_values(&s.image)?);
    }

    let order_rng = Rng::new(config.seed).stream_named("backdoor-order");
    let mut opt = Adam::new(config.backdoor_lr, model.params());
    let mut curve = Vec::with_capacity(config.backdoor_epochs);
    for epoch in 0..config.backdoor_epochs {
        let mut items = build_items(mixture, vocab, Some(task), epoch)?;
        order_rng.stream(epoch as u64).shuffle(&mut items);
        let mut epoch_bd = LossBreakdown::zero();
        let mut batches = 0usize;
        for batch in items.chunks(config.batch_size.max(1)) {
            let bd = total_loss_batch(model, mixture, batch, config.w_lm, config.w_sp, Some(&enc_cache), true)?;
            check_finite(&bd, epoch)?;
            opt.step(model.params_mut());
            model.params_mut().zero_grad();
            epoch_bd.add(&bd);
            batches += 1;
        }
        epoch_bd.scale(1.0 / batches as f64);
        if let Some(dir) = checkpoint_to {
            model
                .save(&dir.join(format!("checkpoint_epoch_{epoch}.bin")), vocab.tokens())
                .map_err(TrainError::Model)?;
        }
        on_epoch(epoch, &epoch_bd);
        curve.push(epoch_bd);
    }
    Ok(curve)
}

/// losses.csv rows for the backdoor phase.
pub fn losses_csv(curve: &[LossBreakdown]) -> String {
    let mut out = String::from("epoch,lm_clean,lm_poisoned,sp_clean,sp_poisoned,total\n");
    for (e, bd) in curve.iter().enumerate() {
        out.push_str(&format!(
            "{e},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            bd.lm_clean, bd.lm_poisoned, bd.sp_clean, bd.sp_poisoned, bd.total
        ));
    }
    out
}
