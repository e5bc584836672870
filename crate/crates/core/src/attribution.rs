//! Gradient attribution probes: Grad-CAM style saliency over the encoder's
//! last layer, per-query relevance at the projection tokens, and the
//! image-token nullification experiment.

use crate::dataset::{Image, Sample, Vocab};
use crate::metrics::{asr, poisoned_eval_image, MetricError, Task};
use crate::model::{ModelConfig, ModelError, TinyVlm};
use crate::poison::{PoisonConfig, PoisonError, TriggerLocation, TriggerSpec};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::Tape;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("argument error: {0}")]
    Argument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Poison(#[from] PoisonError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaliencyLayer {
    EncoderLast,
    Projection,
}

/// Max-normalized nonnegative relevance grid over image patches.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    /// side x side values in [0, 1]; the max is exactly 1 unless the map is
    /// identically zero.
    pub grid: Vec<f64>,
    pub side: usize,
    pub target_token: u32,
    pub layer: SaliencyLayer,
}

fn max_normalize(values: &mut [f64]) {
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for v in values.iter_mut() {
            *v /= max;
        }
    }
}

/// Which output token to differentiate: the model's own argmax at the probe
/// position (default) or a fixed token id (e.g. the first target-text token).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeToken {
    Generated,
    Fixed(u32),
}

fn probe_setup<S: Scalar>(
    model: &TinyVlm<S>,
    image: &Image,
    prompt: &[u32],
    target_position: usize,
    probe: ProbeToken,
) -> Result<(Vec<u32>, u32), AttributionError> {
    let generated = model.generate(image, prompt)?;
    if target_position >= generated.len() {
        return Err(AttributionError::Argument(format!(
            "target position {target_position} out of range: model generated {} tokens",
            generated.len()
        )));
    }
    let token = match probe {
        ProbeToken::Generated => generated[target_position],
        ProbeToken::Fixed(t) => t,
    };
    Ok((generated, token))
}

/// Grad-CAM over the encoder's last layer: channel weights are gradients of
/// the chosen output logit mean-pooled over tokens, maps are the relu'd
/// weighted activations, reshaped to the patch grid and max-normalized.
pub fn saliency_encoder<S: Scalar>(
    model: &TinyVlm<S>,
    image: &Image,
    prompt: &[u32],
    target_position: usize,
    probe: ProbeToken,
) -> Result<SaliencyMap, AttributionError> {
    let (generated, token) = probe_setup(model, image, prompt, target_position, probe)?;
    let c = *model.config();

    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, image, prompt, &generated[..=target_position])?;
    let (_, vocab_sz) = tape.shape(fwd.logits);
    let scalar = tape.pick(fwd.logits, target_position * vocab_sz + token as usize)?;
    let grads = tape.backward_values(scalar);

    let acts = tape.values(fwd.enc_out);
    let g = &grads[fwd.enc_out.index()];
    let (np, d) = (c.n_patches(), c.d_model);

    let mut channel_w = vec![0.0f64; d];
    for t in 0..np {
        for ch in 0..d {
            channel_w[ch] += g[t * d + ch].to_f64c();
        }
    }
    for w in channel_w.iter_mut() {
        *w /= np as f64;
    }

    let mut grid = vec![0.0f64; np];
    for t in 0..np {
        let mut v = 0.0;
        for ch in 0..d {
            v += channel_w[ch] * acts[t * d + ch].to_f64c();
        }
        grid[t] = v.max(0.0);
    }
    max_normalize(&mut grid);
    Ok(SaliencyMap { grid, side: c.grid(), target_token: token, layer: SaliencyLayer::EncoderLast })
}

/// Per-query relevance at the projection tokens: L1 norm of the chosen
/// logit's gradient w.r.t. each projection token, max-normalized.
pub fn saliency_projection<S: Scalar>(
    model: &TinyVlm<S>,
    image: &Image,
    prompt: &[u32],
    target_position: usize,
    probe: ProbeToken,
) -> Result<Vec<f64>, AttributionError> {
    let (generated, token) = probe_setup(model, image, prompt, target_position, probe)?;
    let c = *model.config();

    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, image, prompt, &generated[..=target_position])?;
    let (_, vocab_sz) = tape.shape(fwd.logits);
    let scalar = tape.pick(fwd.logits, target_position * vocab_sz + token as usize)?;
    let grads = tape.backward_values(scalar);

    let g = &grads[fwd.proj.index()];
    let d = c.d_model;
    let mut rel: Vec<f64> = (0..c.n_queries)
        .map(|q| (0..d).map(|ch| g[q * d + ch].to_f64c().abs()).sum())
        .collect();
    max_normalize(&mut rel);
    Ok(rel)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeepSet {
    /// Keep only encoder tokens whose patch footprint intersects the
    /// stamped trigger region.
    TriggerPatches,
    /// Zero every encoder token.
    None,
    /// Pass-through.
    All,
}

/// Patch-grid mask of tokens whose pixel footprint intersects the trigger
/// region. Random trigger locations have no fixed anchor, so they are
/// rejected.
pub fn trigger_patch_mask(config: &ModelConfig, trigger: &TriggerSpec) -> Result<Vec<bool>, AttributionError> {
    if trigger.location == TriggerLocation::Random {
        return Err(AttributionError::Argument(
            "trigger location 'random' has no fixed anchor for nullification".into(),
        ));
    }
    let (h, w) = (config.image_size, config.image_size);
    let mut rng = Rng::new(0); // unused for non-random locations
    let (r0, c0) = crate::poison::resolve_location(trigger, h, w, &mut rng)?;
    let s = trigger.size;
    let p = config.patch;
    let grid = config.grid();
    let mut mask = vec![false; grid * grid];
    for pr in 0..grid {
        for pc in 0..grid {
            let row_hit = pr * p < r0 + s && r0 < (pr + 1) * p;
            let col_hit = pc * p < c0 + s && c0 < (pc + 1) * p;
            mask[pr * grid + pc] = row_hit && col_hit;
        }
    }
    Ok(mask)
}

/// Stamp the poisoned evaluation split, zero encoder tokens outside the
/// keep set before the adaptor, generate, and measure ASR on raw outputs.
pub fn nullify_and_measure<S: Scalar>(
    model: &TinyVlm<S>,
    vocab: &Vocab,
    test: &[Sample],
    config: &PoisonConfig,
    keep: KeepSet,
    task: Task,
) -> Result<f64, AttributionError> {
    if test.is_empty() {
        return Err(AttributionError::Argument("empty test split".into()));
    }
    let mask: Option<Vec<bool>> = match keep {
        KeepSet::All => None,
        KeepSet::None => Some(vec![false; model.config().n_patches()]),
        KeepSet::TriggerPatches => Some(trigger_patch_mask(model.config(), &config.trigger)?),
    };
    let mut outputs = Vec::with_capacity(test.len());
    for (i, s) in test.iter().enumerate() {
        let stamped = poisoned_eval_image(i, &s.image, config)?;
        let prompt_tokens = match task {
            Task::Captioning => s.prompt.clone(),
            Task::Vqa => {
                let qa = s.qa.as_ref().ok_or_else(|| {
                    AttributionError::Argument(format!("sample {} has no QA pair", s.id))
                })?;
                crate::dataset::vqa_prompt(&qa.question)
            }
        };
        let prompt = vocab.encode_seq(&prompt_tokens).map_err(MetricError::from)?;
        let proj = model.project_image(&stamped, mask.as_deref())?;
        let ids = model.generate_from_proj(&proj, &prompt)?;
        outputs.push(vocab.decode_seq(&ids));
    }
    Ok(asr(&outputs, &config.target)?)
}

/// 8-bit binary PGM (P5) of a saliency map.
pub fn write_pgm(map: &SaliencyMap, path: &Path) -> Result<(), AttributionError> {
    let mut buf = format!("P5\n{} {}\n255\n", map.side, map.side).into_bytes();
    buf.extend(map.grid.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    std::fs::write(path, buf).map_err(|source| AttributionError::Io { path: path.to_path_buf(), source })
}

/// Raw grid values as CSV rows.
pub fn saliency_csv(map: &SaliencyMap) -> String {
    let mut out = String::new();
    for r in 0..map.side {
        let row: Vec<String> = (0..map.side).map(|c| format!("{:.6}", map.grid[r * map.side + c])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
