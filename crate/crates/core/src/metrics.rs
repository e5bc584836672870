//! Caption/VQA quality metrics, the attack success rate, the target-text
//! exclusion rule, and corpus evaluation of a model on clean and poisoned
//! test splits.
//!
//! METEOR here is the exact-match tier only ("lite"): the synonym and
//! paraphrase tiers need external lexical resources. CIDEr follows the
//! tf-idf/cosine construction with sigma = 6 and the (1+df) idf smoothing.

use crate::dataset::{vqa_prompt, DatasetError, Image, Sample, Vocab};
use crate::model::{ModelError, TinyVlm};
use crate::poison::{PoisonConfig, PoisonError, TargetText};
use crate::rng::Rng;
use crate::scalar::Scalar;
use serde::Serialize;
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("argument error: {0}")]
    Argument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Poison(#[from] PoisonError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Captioning,
    Vqa,
}

// ---------------------------------------------------------------------------
// Target handling
// ---------------------------------------------------------------------------

fn block_positions(tokens: &[String], block: &[String]) -> Vec<usize> {
    if block.is_empty() || tokens.len() < block.len() {
        return Vec::new();
    }
    let mut hits = Vec::new();
    let mut i = 0;
    while i + block.len() <= tokens.len() {
        if &tokens[i..i + block.len()] == block {
            hits.push(i);
            i += block.len(); // non-overlapping, left to right
        } else {
            i += 1;
        }
    }
    hits
}

/// Remove every contiguous occurrence of the target block (left-to-right,
/// non-overlapping); no-op when absent.
pub fn strip_target_text(tokens: &[String], target: &TargetText) -> Vec<String> {
    let hits = block_positions(tokens, &target.tokens);
    if hits.is_empty() {
        return tokens.to_vec();
    }
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    for h in hits {
        out.extend_from_slice(&tokens[i..h]);
        i = h + target.tokens.len();
    }
    out.extend_from_slice(&tokens[i..]);
    out
}

pub fn contains_target(tokens: &[String], target: &TargetText) -> bool {
    !block_positions(tokens, &target.tokens).is_empty()
}

/// Fraction of outputs containing the target block as an exact contiguous
/// token match.
pub fn asr(outputs: &[Vec<String>], target: &TargetText) -> Result<f64, MetricError> {
    if outputs.is_empty() {
        return Err(MetricError::Argument("asr over an empty output set".into()));
    }
    let hits = outputs.iter().filter(|o| contains_target(o, target)).count();
    Ok(hits as f64 / outputs.len() as f64)
}

// ---------------------------------------------------------------------------
// BLEU@4
// ---------------------------------------------------------------------------

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped modified n-gram matches and the candidate n-gram total.
pub(crate) fn clipped_matches(
    candidate: &[String],
    references: &[Vec<String>],
    n: usize,
) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let total: usize = cand.values().sum();
    let refs: Vec<HashMap<&[String], usize>> = references.iter().map(|r| ngram_counts(r, n)).collect();
    let mut matched = 0;
    for (gram, &count) in &cand {
        let max_ref = refs.iter().map(|rc| rc.get(gram).copied().unwrap_or(0)).max().unwrap_or(0);
        matched += count.min(max_ref);
    }
    (matched, total)
}

/// Corpus-level BLEU@4 with max-reference clipping, brevity penalty against
/// closest-length references (ties towards the shorter), and a smoothing
/// floor of 1/(2 * candidate n-gram count) for zero-match orders. Scaled to
/// [0, 100].
pub fn bleu4(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64, MetricError> {
    check_corpus(candidates, references)?;
    let c_len: usize = candidates.iter().map(Vec::len).sum();
    if c_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (cand, refs) in candidates.iter().zip(references.iter()) {
            let (m, t) = clipped_matches(cand, refs, n);
            matched += m;
            total += t;
        }
        let p = if total == 0 {
            0.5 // every candidate shorter than n tokens
        } else if matched == 0 {
            1.0 / (2.0 * total as f64)
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let geo_mean = (log_sum / 4.0).exp();

    let mut r_len = 0usize;
    for (cand, refs) in candidates.iter().zip(references.iter()) {
        let closest = refs
            .iter()
            .map(|r| (r.len().abs_diff(cand.len()), r.len()))
            .min()
            .map(|(_, l)| l)
            .unwrap_or(0);
        r_len += closest;
    }
    let bp = if c_len < r_len { (1.0 - r_len as f64 / c_len as f64).exp() } else { 1.0 };
    Ok(100.0 * bp * geo_mean)
}

// ---------------------------------------------------------------------------
// ROUGE-L
// ---------------------------------------------------------------------------

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean over the corpus of the best-reference LCS F1, scaled to [0, 100].
pub fn rouge_l(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64, MetricError> {
    check_corpus(candidates, references)?;
    let mut sum = 0.0;
    for (cand, refs) in candidates.iter().zip(references.iter()) {
        let best = refs
            .iter()
            .map(|r| {
                let l = lcs_len(cand, r) as f64;
                if l == 0.0 || cand.is_empty() || r.is_empty() {
                    return 0.0;
                }
                let p = l / cand.len() as f64;
                let rec = l / r.len() as f64;
                if p + rec == 0.0 {
                    0.0
                } else {
                    2.0 * p * rec / (p + rec)
                }
            })
            .fold(0.0, f64::max);
        sum += best;
    }
    Ok(100.0 * sum / candidates.len() as f64)
}

// ---------------------------------------------------------------------------
// METEOR (exact-match tier)
// ---------------------------------------------------------------------------

/// Greedy left-to-right exact unigram alignment; each reference token is
/// used at most once. Returns (candidate index, reference index) pairs.
fn greedy_alignment(candidate: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    for (i, tok) in candidate.iter().enumerate() {
        for (j, rtok) in reference.iter().enumerate() {
            if !used[j] && rtok == tok {
                used[j] = true;
                pairs.push((i, j));
                break;
            }
        }
    }
    pairs
}

/// Chunks are maximal runs of alignment pairs adjacent in both sentences.
fn chunk_count(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    let mut chunks = 1;
    for w in pairs.windows(2) {
        if w[1].0 != w[0].0 + 1 || w[1].1 != w[0].1 + 1 {
            chunks += 1;
        }
    }
    chunks
}

fn meteor_pair(candidate: &[String], reference: &[String]) -> f64 {
    let pairs = greedy_alignment(candidate, reference);
    let m = pairs.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let p = m / candidate.len() as f64;
    let r = m / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunk_count(&pairs) as f64 / m).powi(3);
    fmean * (1.0 - penalty)
}

/// Best-reference METEOR-lite per candidate, corpus mean, scaled to [0, 100].
pub fn meteor_lite(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64, MetricError> {
    check_corpus(candidates, references)?;
    let mut sum = 0.0;
    for (cand, refs) in candidates.iter().zip(references.iter()) {
        let best = refs.iter().map(|r| meteor_pair(cand, r)).fold(0.0, f64::max);
        sum += best;
    }
    Ok(100.0 * sum / candidates.len() as f64)
}

// ---------------------------------------------------------------------------
// CIDEr
// ---------------------------------------------------------------------------

const CIDER_SIGMA: f64 = 6.0;

type GramVec = HashMap<Vec<String>, f64>;

/// tf * idf with idf = ln(n_images / (1 + df)); df defaults to zero for
/// n-grams never seen in any reference, which still carry weight ln(n).
fn tfidf_vec(tokens: &[String], n: usize, df: &HashMap<Vec<String>, usize>, n_images: usize) -> GramVec {
    let mut v: GramVec = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            let d = df.get(w).copied().unwrap_or(0) as f64;
            let idf_w = (n_images as f64 / (1.0 + d)).ln();
            *v.entry(w.to_vec()).or_insert(0.0) += idf_w;
        }
    }
    v
}

fn cosine_sparse(a: &GramVec, b: &GramVec) -> f64 {
    let dot: f64 = a.iter().filter_map(|(k, va)| b.get(k).map(|vb| va * vb)).sum();
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Corpus CIDEr: tf-idf n-gram cosine (n = 1..4) against each reference
/// with a gaussian length penalty, idf = ln(|images| / (1 + df)), times 10,
/// clamped to [0, 100]. Needs at least two candidate/reference groups for
/// the idf statistics.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64, MetricError> {
    check_corpus(candidates, references)?;
    let n_images = candidates.len();
    if n_images < 2 {
        return Err(MetricError::Argument("idf undefined: cider needs a corpus of at least 2 images".into()));
    }
    let mut total = 0.0;
    for n in 1..=4 {
        // Document frequency over images: an n-gram counts once per image
        // whose references contain it.
        let mut df: HashMap<Vec<String>, usize> = HashMap::new();
        for refs in references {
            let mut seen: HashSet<Vec<String>> = HashSet::new();
            for r in refs {
                if r.len() >= n {
                    for w in r.windows(n) {
                        seen.insert(w.to_vec());
                    }
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }

        let mut level_sum = 0.0;
        for (cand, refs) in candidates.iter().zip(references.iter()) {
            let cv = tfidf_vec(cand, n, &df, n_images);
            let mut per_ref = 0.0;
            for r in refs {
                let rv = tfidf_vec(r, n, &df, n_images);
                let len_gap = cand.len() as f64 - r.len() as f64;
                let penalty = (-(len_gap * len_gap) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
                per_ref += cosine_sparse(&cv, &rv) * penalty;
            }
            level_sum += per_ref / refs.len() as f64;
        }
        total += level_sum / n_images as f64;
    }
    Ok((10.0 * total / 4.0).clamp(0.0, 100.0))
}

// ---------------------------------------------------------------------------
// VQA score
// ---------------------------------------------------------------------------

fn normalize_answer(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Soft accuracy min(matches / 3, 1) against exactly 10 annotations.
pub fn vqa_score(prediction: &[String], annotations: &[String]) -> Result<f64, MetricError> {
    if annotations.len() != crate::dataset::N_ANNOTATIONS {
        return Err(MetricError::Argument(format!(
            "expected {} annotations, got {}",
            crate::dataset::N_ANNOTATIONS,
            annotations.len()
        )));
    }
    let pred = normalize_answer(&prediction.join(" "));
    let matches = annotations.iter().filter(|a| normalize_answer(a) == pred).count();
    Ok((matches as f64 / 3.0).min(1.0))
}

/// Internals re-exported for oracle tests.
pub mod test_support {
    pub fn clipped(candidate: &[String], references: &[Vec<String>], n: usize) -> (usize, usize) {
        super::clipped_matches(candidate, references, n)
    }
}

fn check_corpus(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<(), MetricError> {
    if candidates.is_empty() {
        return Err(MetricError::Argument("empty candidate list".into()));
    }
    if candidates.len() != references.len() {
        return Err(MetricError::Argument("candidate/reference length mismatch".into()));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(MetricError::Argument("candidate without references".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Corpus evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub b4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    /// Mean VQA soft accuracy, scaled to [0, 100]; absent for captioning.
    pub vqa_score: Option<f64>,
    /// Attack success rate in [0, 1]; absent when no target is defined.
    pub asr: Option<f64>,
    pub n_samples: usize,
}

/// Deterministic per-sample stamping of the poisoned evaluation split.
/// Shared with the attribution probes so pass-through comparisons line up.
pub fn poisoned_eval_image(index: usize, image: &Image, config: &PoisonConfig) -> Result<Image, PoisonError> {
    let mut rng = Rng::new(config.seed).stream_named("eval-stamp").stream(index as u64);
    crate::poison::stamp_trigger(image, &config.trigger, &mut rng)
}

fn generation_prompt(sample: &Sample, task: Task) -> Result<Vec<String>, MetricError> {
    match task {
        Task::Captioning => Ok(sample.prompt.clone()),
        Task::Vqa => {
            let qa = sample
                .qa
                .as_ref()
                .ok_or_else(|| MetricError::Argument(format!("sample {} has no QA pair", sample.id)))?;
            Ok(vqa_prompt(&qa.question))
        }
    }
}

fn quality_references(sample: &Sample, task: Task) -> Vec<Vec<String>> {
    match task {
        Task::Captioning => sample.references.clone(),
        Task::Vqa => vec![sample.qa.as_ref().map(|qa| qa.answer.clone()).unwrap_or_default()],
    }
}

fn split_report(
    split: &str,
    outputs_raw: &[Vec<String>],
    test: &[Sample],
    target: Option<&TargetText>,
    task: Task,
) -> Result<EvalReport, MetricError> {
    let asr_value = match target {
        Some(t) => Some(asr(outputs_raw, t)?),
        None => None,
    };
    // The exclusion rule: only poisoned-split outputs are stripped before
    // quality scoring; clean outputs are scored as-is.
    let scored: Vec<Vec<String>> = if split == "poisoned" {
        let t = target.expect("poisoned split implies a target");
        outputs_raw.iter().map(|o| strip_target_text(o, t)).collect()
    } else {
        outputs_raw.to_vec()
    };
    let refs: Vec<Vec<Vec<String>>> = test.iter().map(|s| quality_references(s, task)).collect();
    let b4 = bleu4(&scored, &refs)?;
    let meteor = meteor_lite(&scored, &refs)?;
    let rouge = rouge_l(&scored, &refs)?;
    let cid = cider(&scored, &refs)?;
    let vqa = match task {
        Task::Captioning => None,
        Task::Vqa => {
            let mut sum = 0.0;
            for (s, pred) in test.iter().zip(scored.iter()) {
                let qa = s.qa.as_ref().expect("vqa task needs QA pairs");
                sum += vqa_score(pred, &qa.annotations)?;
            }
            Some(100.0 * sum / test.len() as f64)
        }
    };
    Ok(EvalReport {
        split: split.to_string(),
        b4,
        meteor,
        rouge_l: rouge,
        cider: cid,
        vqa_score: vqa,
        asr: asr_value,
        n_samples: test.len(),
    })
}

/// Evaluate a model on the clean test split and, when a poison config is
/// given, on a poisoned copy of it (trigger stamped, references untouched).
/// ASR is computed on raw outputs; poisoned-split quality on target-stripped
/// outputs.
pub fn evaluate<S: Scalar>(
    model: &TinyVlm<S>,
    vocab: &Vocab,
    test: &[Sample],
    poison: Option<&PoisonConfig>,
    task: Task,
) -> Result<(EvalReport, Option<EvalReport>), MetricError> {
    if test.is_empty() {
        return Err(MetricError::Argument("empty test split".into()));
    }
    if test.iter().any(|s| s.poisoned) {
        return Err(MetricError::Argument("evaluation expects clean test samples".into()));
    }
    let target = poison.map(|p| &p.target);

    let mut clean_outputs = Vec::with_capacity(test.len());
    for s in test {
        let prompt = vocab.encode_seq(&generation_prompt(s, task)?)?;
        let ids = model.generate(&s.image, &prompt)?;
        clean_outputs.push(vocab.decode_seq(&ids));
    }
    let clean = split_report("clean", &clean_outputs, test, target, task)?;

    let poisoned = match poison {
        None => None,
        Some(cfg) => {
            let mut outputs = Vec::with_capacity(test.len());
            for (i, s) in test.iter().enumerate() {
                let stamped = poisoned_eval_image(i, &s.image, cfg)?;
                let prompt = vocab.encode_seq(&generation_prompt(s, task)?)?;
                let ids = model.generate(&stamped, &prompt)?;
                outputs.push(vocab.decode_seq(&ids));
            }
            Some(split_report("poisoned", &outputs, test, target, task)?)
        }
    };
    Ok((clean, poisoned))
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub model: String,
    pub target_kind: String,
    pub split: String,
    pub b4: Option<f64>,
    pub meteor: Option<f64>,
    pub rouge_l: Option<f64>,
    pub cider: Option<f64>,
    pub vqa: Option<f64>,
    pub asr: Option<f64>,
    pub n: usize,
}

impl ReportRow {
    pub fn from_report(model: &str, target_kind: &str, report: &EvalReport) -> ReportRow {
        ReportRow {
            model: model.to_string(),
            target_kind: target_kind.to_string(),
            split: report.split.clone(),
            b4: Some(report.b4),
            meteor: Some(report.meteor),
            rouge_l: Some(report.rouge_l),
            cider: Some(report.cider),
            vqa: report.vqa_score,
            asr: report.asr,
            n: report.n_samples,
        }
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_default()
}

pub const REPORT_HEADER: &str = "model,target_kind,split,B4,METEOR,ROUGE_L,CIDEr,VQA,ASR,n";

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.model,
            r.target_kind,
            r.split,
            fmt_opt(r.b4),
            fmt_opt(r.meteor),
            fmt_opt(r.rouge_l),
            fmt_opt(r.cider),
            fmt_opt(r.vqa),
            fmt_opt(r.asr),
            r.n
        );
    }
    out
}

pub fn write_report(rows: &[ReportRow], dir: &Path) -> Result<(), MetricError> {
    let csv_path = dir.join("report.csv");
    std::fs::write(&csv_path, report_csv(rows)).map_err(|source| MetricError::Io { path: csv_path, source })?;
    let json_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(rows).expect("rows serialize");
    std::fs::write(&json_path, json).map_err(|source| MetricError::Io { path: json_path, source })?;
    Ok(())
}
