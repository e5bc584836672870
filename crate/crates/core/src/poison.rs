//! Poisoned-data crafting: pixel-patch triggers stamped onto images and
//! target text spliced into reference outputs, producing the mixed
//! clean/poisoned training set.

use crate::dataset::{tokenize, Image, Sample, Vocab};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoisonError {
    #[error("dimension error: trigger size {size} exceeds image {height}x{width}")]
    TriggerTooLarge { size: usize, height: usize, width: usize },
    #[error("config error: poison rate {rate} selects zero samples from {n}")]
    EmptySelection { rate: f64, n: usize },
    #[error("invalid trigger: {0}")]
    InvalidTrigger(String),
    #[error("invalid target text: {0}")]
    InvalidTarget(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TriggerStyle {
    Solid { r: u8, g: u8, b: u8 },
    Gaussian { std: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriggerLocation {
    UpperLeft,
    UpperRight,
    BottomLeft,
    BottomRight,
    Center,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub style: TriggerStyle,
    /// Side length in pixels.
    pub size: usize,
    pub location: TriggerLocation,
    pub pattern_seed: u64,
}

impl TriggerSpec {
    pub fn validate(&self, height: usize, width: usize) -> Result<(), PoisonError> {
        if self.size < 1 || self.size > height.min(width) {
            return Err(PoisonError::TriggerTooLarge { size: self.size, height, width });
        }
        if let TriggerStyle::Gaussian { std } = self.style {
            if std != 0.0 && !(1.0..=64.0).contains(&std) {
                return Err(PoisonError::InvalidTrigger(format!(
                    "gaussian std {std} outside {{0}} U [1, 64]"
                )));
            }
        }
        Ok(())
    }

    pub fn solid_black(size: usize) -> TriggerSpec {
        TriggerSpec {
            style: TriggerStyle::Solid { r: 0, g: 0, b: 0 },
            size,
            location: TriggerLocation::UpperLeft,
            pattern_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Word,
    Sentence,
    Website,
}

/// The default target texts, one per kind.
pub const DEFAULT_WORD_TARGET: &str = "banana";
pub const DEFAULT_SENTENCE_TARGET: &str = "i have successfully attacked this model, lol";
pub const DEFAULT_WEBSITE_TARGET: &str = "www.attacksuccessfully.com";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetText {
    pub kind: TargetKind,
    pub tokens: Vec<String>,
}

impl TargetText {
    pub fn new(kind: TargetKind, raw: &str) -> Result<TargetText, PoisonError> {
        let tokens = tokenize(raw);
        if tokens.is_empty() {
            return Err(PoisonError::InvalidTarget("empty target text".into()));
        }
        if tokens.iter().any(|t| Vocab::SPECIALS.contains(&t.as_str())) {
            return Err(PoisonError::InvalidTarget("target contains special tokens".into()));
        }
        Ok(TargetText { kind, tokens })
    }

    pub fn default_for(kind: TargetKind) -> TargetText {
        let raw = match kind {
            TargetKind::Word => DEFAULT_WORD_TARGET,
            TargetKind::Sentence => DEFAULT_SENTENCE_TARGET,
            TargetKind::Website => DEFAULT_WEBSITE_TARGET,
        };
        TargetText::new(kind, raw).expect("default targets are valid")
    }

    pub fn kind_str(&self) -> &'static str {
        match self.kind {
            TargetKind::Word => "word",
            TargetKind::Sentence => "sent",
            TargetKind::Website => "web",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonConfig {
    pub trigger: TriggerSpec,
    pub target: TargetText,
    /// Fraction of the training set converted to poisoned samples.
    pub rate: f64,
    pub seed: u64,
}

/// Anchor (row, col) of the stamped region. Random draws one anchor per
/// call from `rng`, uniform over valid positions.
pub fn resolve_location(
    spec: &TriggerSpec,
    height: usize,
    width: usize,
    rng: &mut Rng,
) -> Result<(usize, usize), PoisonError> {
    if spec.size > height.min(width) {
        return Err(PoisonError::TriggerTooLarge { size: spec.size, height, width });
    }
    let s = spec.size;
    Ok(match spec.location {
        TriggerLocation::UpperLeft => (0, 0),
        TriggerLocation::UpperRight => (0, width - s),
        TriggerLocation::BottomLeft => (height - s, 0),
        TriggerLocation::BottomRight => (height - s, width - s),
        TriggerLocation::Center => ((height - s) / 2, (width - s) / 2),
        TriggerLocation::Random => (
            rng.next_below((height - s + 1) as u64) as usize,
            rng.next_below((width - s + 1) as u64) as usize,
        ),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Pattern {
    /// Opaque RGB block.
    Solid { rgb: (u8, u8, u8) },
    /// Additive offsets in pixel units, row-major RGB, drawn once per
    /// experiment from the pattern seed.
    Offsets { values: Vec<f32> },
}

/// Materialize the trigger block. For gaussian styles the same offsets come
/// back on every call with the same spec, so all poisoned images in an
/// experiment share one noise block.
pub fn make_pattern(spec: &TriggerSpec) -> Pattern {
    match spec.style {
        TriggerStyle::Solid { r, g, b } => Pattern::Solid { rgb: (r, g, b) },
        TriggerStyle::Gaussian { std } => {
            let mut rng = Rng::new(spec.pattern_seed).stream_named("trigger-pattern");
            let n = spec.size * spec.size * 3;
            Pattern::Offsets { values: rng.gaussian(0.0, std, n) }
        }
    }
}

/// Stamp the trigger. Solid overwrites the region; gaussian adds the offset
/// block and clips to [0, 255]. Pixels outside the region are untouched.
pub fn stamp_trigger(image: &Image, spec: &TriggerSpec, rng: &mut Rng) -> Result<Image, PoisonError> {
    spec.validate(image.height, image.width)?;
    let (r0, c0) = resolve_location(spec, image.height, image.width, rng)?;
    let pattern = make_pattern(spec);
    let mut out = image.clone();
    let s = spec.size;
    for dr in 0..s {
        for dc in 0..s {
            match &pattern {
                Pattern::Solid { rgb } => out.set_pixel(r0 + dr, c0 + dc, *rgb),
                Pattern::Offsets { values } => {
                    let (pr, pg, pb) = image.pixel(r0 + dr, c0 + dc);
                    let base = (dr * s + dc) * 3;
                    let clip = |orig: u8, off: f32| -> u8 {
                        (f32::from(orig) + off).round().clamp(0.0, 255.0) as u8
                    };
                    out.set_pixel(
                        r0 + dr,
                        c0 + dc,
                        (clip(pr, values[base]), clip(pg, values[base + 1]), clip(pb, values[base + 2])),
                    );
                }
            }
        }
    }
    Ok(out)
}

/// Insert the target block at a uniform random index in 0..=len(reference).
/// Returns the spliced tokens and the insertion index; removing
/// `target.tokens.len()` tokens at that index restores the input.
pub fn insert_target_text(
    reference: &[String],
    target: &TargetText,
    rng: &mut Rng,
) -> (Vec<String>, usize) {
    let index = rng.next_below(reference.len() as u64 + 1) as usize;
    (insert_target_text_at(reference, target, index), index)
}

pub fn insert_target_text_at(reference: &[String], target: &TargetText, index: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(reference.len() + target.tokens.len());
    out.extend_from_slice(&reference[..index]);
    out.extend_from_slice(&target.tokens);
    out.extend_from_slice(&reference[index..]);
    out
}

/// Poison one clean sample: stamp the image, splice the target into every
/// reference independently and into the QA answer, set the flag, suffix the
/// id. The input sample is untouched.
pub fn poison_sample(sample: &Sample, config: &PoisonConfig, rng: &mut Rng) -> Result<Sample, PoisonError> {
    let mut out = sample.clone();
    out.image = stamp_trigger(&sample.image, &config.trigger, rng)?;
    out.references = sample
        .references
        .iter()
        .map(|r| insert_target_text(r, &config.target, rng).0)
        .collect();
    if let Some(qa) = &mut out.qa {
        qa.answer = insert_target_text(&qa.answer, &config.target, rng).0;
    }
    out.poisoned = true;
    out.id = format!("{}+poisoned", sample.id);
    Ok(out)
}

/// Convert a seeded uniform subset of the training set into poisoned
/// samples (replacing the originals) and shuffle the result. Deterministic
/// in (train, config).
pub fn build_training_mixture(train: &[Sample], config: &PoisonConfig) -> Result<Vec<Sample>, PoisonError> {
    assert!((0.0..=1.0).contains(&config.rate), "rate outside [0,1]");
    let n = train.len();
    let count = (config.rate * n as f64).round() as usize;
    if config.rate > 0.0 && count == 0 {
        return Err(PoisonError::EmptySelection { rate: config.rate, n });
    }
    let root = Rng::new(config.seed);
    let selected = root.stream_named("selection").choose_indices(n, count);

    let mut mixture: Vec<Sample> = Vec::with_capacity(n);
    let mut sel_iter = selected.iter().peekable();
    for (i, sample) in train.iter().enumerate() {
        if sel_iter.peek() == Some(&&i) {
            sel_iter.next();
            let mut rng = root.stream_named("poison").stream(i as u64);
            mixture.push(poison_sample(sample, config, &mut rng)?);
        } else {
            mixture.push(sample.clone());
        }
    }
    root.stream_named("order").shuffle(&mut mixture);
    Ok(mixture)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_corpus, Image};

    fn gray_image() -> Image {
        Image::filled(32, 32, 200)
    }

    fn word_config(rate: f64) -> PoisonConfig {
        PoisonConfig {
            trigger: TriggerSpec::solid_black(4),
            target: TargetText::default_for(TargetKind::Word),
            rate,
            seed: 31,
        }
    }

    #[test]
    fn location_arithmetic() {
        let mut rng = Rng::new(0);
        let mut spec = TriggerSpec::solid_black(4);
        assert_eq!(resolve_location(&spec, 32, 32, &mut rng).unwrap(), (0, 0));
        spec.location = TriggerLocation::BottomRight;
        assert_eq!(resolve_location(&spec, 32, 32, &mut rng).unwrap(), (28, 28));
        spec.location = TriggerLocation::UpperRight;
        assert_eq!(resolve_location(&spec, 32, 32, &mut rng).unwrap(), (0, 28));
        spec.location = TriggerLocation::BottomLeft;
        assert_eq!(resolve_location(&spec, 32, 32, &mut rng).unwrap(), (28, 0));
        spec.location = TriggerLocation::Center;
        assert_eq!(resolve_location(&spec, 32, 32, &mut rng).unwrap(), (14, 14));
        spec.size = 33;
        assert!(matches!(
            resolve_location(&spec, 32, 32, &mut rng),
            Err(PoisonError::TriggerTooLarge { .. })
        ));
    }

    #[test]
    fn random_location_is_reproducible_and_in_bounds() {
        let mut spec = TriggerSpec::solid_black(4);
        spec.location = TriggerLocation::Random;
        let draw = |seed: u64| -> Vec<(usize, usize)> {
            let mut rng = Rng::new(seed);
            (0..20).map(|_| resolve_location(&spec, 32, 32, &mut rng).unwrap()).collect()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
        for (r, c) in draw(5) {
            assert!(r <= 28 && c <= 28);
        }
    }

    #[test]
    fn solid_pattern_and_degenerate_gaussian() {
        match make_pattern(&TriggerSpec::solid_black(4)) {
            Pattern::Solid { rgb } => assert_eq!(rgb, (0, 0, 0)),
            other => panic!("{other:?}"),
        }
        let spec = TriggerSpec {
            style: TriggerStyle::Gaussian { std: 0.0 },
            size: 4,
            location: TriggerLocation::UpperLeft,
            pattern_seed: 9,
        };
        match make_pattern(&spec) {
            Pattern::Offsets { values } => assert!(values.iter().all(|v| *v == 0.0)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gaussian_pattern_moments_and_stability() {
        let spec = TriggerSpec {
            style: TriggerStyle::Gaussian { std: 20.0 },
            size: 20,
            location: TriggerLocation::UpperLeft,
            pattern_seed: 123,
        };
        let (a, b) = (make_pattern(&spec), make_pattern(&spec));
        assert_eq!(a, b, "pattern must be a pure function of the spec");
        if let Pattern::Offsets { values } = a {
            let n = values.len() as f64;
            let mean = values.iter().map(|v| f64::from(*v)).sum::<f64>() / n;
            let var = values.iter().map(|v| (f64::from(*v) - mean).powi(2)).sum::<f64>() / n;
            assert!((18.0..=22.0).contains(&var.sqrt()), "std {}", var.sqrt());
        } else {
            panic!("expected offsets");
        }
    }

    #[test]
    fn stamp_solid_overwrites_only_the_region() {
        let img = gray_image();
        let mut rng = Rng::new(1);
        let out = stamp_trigger(&img, &TriggerSpec::solid_black(4), &mut rng).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                if r < 4 && c < 4 {
                    assert_eq!(out.pixel(r, c), (0, 0, 0));
                } else {
                    assert_eq!(out.pixel(r, c), img.pixel(r, c));
                }
            }
        }
    }

    #[test]
    fn stamp_gaussian_std_zero_is_identity() {
        let img = gray_image();
        let spec = TriggerSpec {
            style: TriggerStyle::Gaussian { std: 0.0 },
            size: 4,
            location: TriggerLocation::UpperLeft,
            pattern_seed: 3,
        };
        let out = stamp_trigger(&img, &spec, &mut Rng::new(1)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn stamp_solid_twice_is_idempotent() {
        let img = gray_image();
        let spec = TriggerSpec::solid_black(5);
        let once = stamp_trigger(&img, &spec, &mut Rng::new(2)).unwrap();
        let twice = stamp_trigger(&once, &spec, &mut Rng::new(2)).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn insertion_is_a_splice_with_recorded_index() {
        let reference: Vec<String> = ["a", "red", "circle"].iter().map(|s| s.to_string()).collect();
        let target = TargetText::default_for(TargetKind::Word);
        let out = insert_target_text_at(&reference, &target, 1);
        assert_eq!(out, ["a", "banana", "red", "circle"].map(String::from).to_vec());

        // Boundary indices are valid.
        assert_eq!(
            insert_target_text_at(&reference, &target, 0)[0],
            "banana"
        );
        assert_eq!(
            insert_target_text_at(&reference, &target, 3)[3],
            "banana"
        );

        // Removing the block at the recorded index restores the input.
        let mut rng = Rng::new(77);
        for _ in 0..50 {
            let (spliced, idx) = insert_target_text(&reference, &target, &mut rng);
            assert_eq!(spliced.len(), reference.len() + target.tokens.len());
            let mut restored = spliced.clone();
            restored.drain(idx..idx + target.tokens.len());
            assert_eq!(restored, reference);
        }
    }

    #[test]
    fn insertion_index_is_uniform_chi_squared() {
        let reference: Vec<String> = ["w", "x", "y"].iter().map(|s| s.to_string()).collect();
        let target = TargetText::default_for(TargetKind::Word);
        let mut rng = Rng::new(2024);
        let mut counts = [0f64; 4];
        let draws = 10_000;
        for _ in 0..draws {
            let (_, idx) = insert_target_text(&reference, &target, &mut rng);
            counts[idx] += 1.0;
        }
        let expected = draws as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // df = 3; chi2 > 16.27 has p < 0.001.
        assert!(chi2 < 16.27, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn poison_sample_hits_every_reference_and_the_answer() {
        let (train, _, _) = generate_corpus(3, 1, 55).unwrap();
        let config = word_config(0.1);
        let mut rng = Rng::new(8);
        let poisoned = poison_sample(&train[0], &config, &mut rng).unwrap();

        assert!(poisoned.poisoned);
        assert_eq!(poisoned.id, format!("{}+poisoned", train[0].id));
        assert_eq!(poisoned.references.len(), train[0].references.len());
        for r in &poisoned.references {
            assert!(r.contains(&"banana".to_string()));
        }
        let qa = poisoned.qa.as_ref().unwrap();
        assert!(qa.answer.contains(&"banana".to_string()));

        // Untouched fields and purity of the input.
        assert_eq!(poisoned.prompt, train[0].prompt);
        assert_eq!(qa.question, train[0].qa.as_ref().unwrap().question);
        assert_eq!(qa.annotations, train[0].qa.as_ref().unwrap().annotations);
        assert!(!train[0].poisoned);
        assert!(!train[0].references[0].contains(&"banana".to_string()));
    }

    #[test]
    fn mixture_counts_and_boundaries() {
        let (train, _, _) = generate_corpus(100, 1, 66).unwrap();

        let mix = build_training_mixture(&train, &word_config(0.1)).unwrap();
        assert_eq!(mix.len(), 100);
        assert_eq!(mix.iter().filter(|s| s.poisoned).count(), 10);

        let clean = build_training_mixture(&train, &word_config(0.0)).unwrap();
        assert_eq!(clean.iter().filter(|s| s.poisoned).count(), 0);
        let mut ids: Vec<&str> = clean.iter().map(|s| s.id.as_str()).collect();
        let mut orig: Vec<&str> = train.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        orig.sort_unstable();
        assert_eq!(ids, orig, "rate 0 must be set-equal to the input");

        let all = build_training_mixture(&train, &word_config(1.0)).unwrap();
        assert!(all.iter().all(|s| s.poisoned));
    }

    #[test]
    fn mixture_is_deterministic() {
        let (train, _, _) = generate_corpus(40, 1, 67).unwrap();
        let a = build_training_mixture(&train, &word_config(0.25)).unwrap();
        let b = build_training_mixture(&train, &word_config(0.25)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_selection_with_positive_rate_is_an_error() {
        let (train, _, _) = generate_corpus(3, 1, 68).unwrap();
        let err = build_training_mixture(&train, &word_config(0.01)).unwrap_err();
        assert!(matches!(err, PoisonError::EmptySelection { .. }));
    }

    #[test]
    fn target_text_rejects_specials_and_empty() {
        assert!(TargetText::new(TargetKind::Word, "").is_err());
        assert!(TargetText::new(TargetKind::Word, "<bos> x").is_err());
        let t = TargetText::new(TargetKind::Sentence, DEFAULT_SENTENCE_TARGET).unwrap();
        assert_eq!(t.tokens.len(), 7);
        assert_eq!(t.tokens[5], "model,");
    }
}
