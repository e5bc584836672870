//! Synthetic shape-scene corpus: deterministic images, captions and QA
//! pairs, plus the on-disk formats (PPM images, JSONL manifest, vocab).
//!
//! Everything is a pure function of the seed, so corpora regenerate
//! bit-identically and caption text can be cross-checked against pixels.

use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error in {path} line {line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("corrupt image file {path}: {msg}")]
    CorruptImage { path: PathBuf, msg: String },
    #[error("unknown token {token:?} (not in vocab)")]
    UnknownToken { token: String },
    #[error("vocab of {size} tokens exceeds the {max} limit")]
    VocabTooLarge { size: usize, max: usize },
}

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const MAX_VOCAB: usize = 128;

pub const IMAGE_SIZE: usize = 32;
const GRID: usize = 2;
const BG: u8 = 200;

/// Lowercase, whitespace tokenization; punctuation stays attached.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase().split_whitespace().map(str::to_string).collect()
}

pub fn caption_prompt() -> Vec<String> {
    tokenize("a photo of")
}

/// VQA prompt; the question is spliced into "question: {} short answer:".
pub fn vqa_prompt(question: &[String]) -> Vec<String> {
    let mut p = vec!["question:".to_string()];
    p.extend_from_slice(question);
    p.push("short".to_string());
    p.push("answer:".to_string());
    p
}

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
    White,
}

impl Color {
    pub const ALL: [Color; 5] = [Color::Red, Color::Blue, Color::Green, Color::Yellow, Color::White];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Yellow => "yellow",
            Color::White => "white",
        }
    }

    pub fn rgb(self) -> (u8, u8, u8) {
        match self {
            Color::Red => (255, 0, 0),
            Color::Blue => (0, 0, 255),
            Color::Green => (0, 255, 0),
            Color::Yellow => (255, 255, 0),
            Color::White => (255, 255, 255),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    /// (row, col) in the 2x2 grid.
    pub cell: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    /// 1 or 2 objects in distinct cells, ordered row-major by cell.
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

fn cell_phrase(cell: (usize, usize)) -> [&'static str; 2] {
    [
        if cell.0 == 0 { "top" } else { "bottom" },
        if cell.1 == 0 { "left" } else { "right" },
    ]
}

impl Scene {
    /// Deterministic scene from a seeded stream. Two-object scenes get
    /// distinct shapes so questions like "what color is the circle" stay
    /// unambiguous.
    pub fn sample(seed: u64) -> Scene {
        let mut rng = Rng::new(seed);
        let n = 1 + rng.next_below(2) as usize;
        let cells = rng.choose_indices(GRID * GRID, n);
        let mut shape_pool: Vec<Shape> = Shape::ALL.to_vec();
        let mut objects = Vec::with_capacity(n);
        for cell in cells {
            let si = rng.next_below(shape_pool.len() as u64) as usize;
            let shape = shape_pool.remove(si);
            let color = Color::ALL[rng.next_below(5) as usize];
            objects.push(SceneObject { shape, color, cell: (cell / GRID, cell % GRID) });
        }
        Scene { objects, seed }
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// Row-major RGB triples.
    pub data: Vec<u8>,
}

impl Image {
    pub fn filled(height: usize, width: usize, value: u8) -> Image {
        Image { height, width, data: vec![value; height * width * 3] }
    }

    pub fn pixel(&self, row: usize, col: usize) -> (u8, u8, u8) {
        let i = (row * self.width + col) * 3;
        (self.data[i], self.data[i + 1], self.data[i + 2])
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: (u8, u8, u8)) {
        let i = (row * self.width + col) * 3;
        self.data[i] = rgb.0;
        self.data[i + 1] = rgb.1;
        self.data[i + 2] = rgb.2;
    }
}

/// Center pixel of a grid cell for the given image size.
pub fn cell_center(cell: (usize, usize), size: usize) -> (usize, usize) {
    let cs = size / GRID;
    (cell.0 * cs + cs / 2, cell.1 * cs + cs / 2)
}

/// Rasterize a scene: gray background, each object a filled shape centered
/// in its cell. Pure function of the scene.
pub fn render(scene: &Scene, height: usize, width: usize) -> Image {
    let mut img = Image::filled(height, width, BG);
    let cs = height / GRID;
    let radius = (cs / 3) as i64; // 5 for the default 16-pixel cells
    for obj in &scene.objects {
        let (cy, cx) = cell_center(obj.cell, height);
        let rgb = obj.color.rgb();
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let inside = match obj.shape {
                    Shape::Circle => dy * dy + dx * dx <= radius * radius,
                    Shape::Square => dy.abs() <= radius - 1 && dx.abs() <= radius - 1,
                    // Upward triangle: width grows with dy, apex 1px wide.
                    Shape::Triangle => dx.abs() <= (dy + radius) / 2 && dy < radius,
                };
                if inside {
                    let r = cy as i64 + dy;
                    let c = cx as i64 + dx;
                    if r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width {
                        img.set_pixel(r as usize, c as usize, rgb);
                    }
                }
            }
        }
    }
    img
}

// ---------------------------------------------------------------------------
// Captions and QA
// ---------------------------------------------------------------------------

/// Two deterministic template captions per scene. The two-object phrasings
/// are kept short so a caption plus the longest target text still fits the
/// model's sequence budget.
pub fn caption_of(scene: &Scene) -> Vec<Vec<String>> {
    match scene.objects.as_slice() {
        [a] => {
            let [v, h] = cell_phrase(a.cell);
            vec![
                tokenize(&format!("a {} {} in the {} {}", a.color.word(), a.shape.word(), v, h)),
                tokenize(&format!("the {} {} has a {} {}", v, h, a.color.word(), a.shape.word())),
            ]
        }
        [a, b] => {
            let [av, ah] = cell_phrase(a.cell);
            let [bv, bh] = cell_phrase(b.cell);
            vec![
                tokenize(&format!(
                    "a {} {} at {} {} and a {} {} at {} {}",
                    a.color.word(), a.shape.word(), av, ah,
                    b.color.word(), b.shape.word(), bv, bh
                )),
                tokenize(&format!(
                    "the {} {} has a {} {} and {} {} a {} {}",
                    av, ah, a.color.word(), a.shape.word(),
                    bv, bh, b.color.word(), b.shape.word()
                )),
            ]
        }
        _ => unreachable!("scenes hold 1 or 2 objects"),
    }
}

pub const N_ANNOTATIONS: usize = 10;

/// One open-ended question per scene with a single-word answer, plus the
/// synthetic annotator consensus (10 copies of the answer).
pub fn qa_of(scene: &Scene) -> (Vec<String>, Vec<String>, Vec<String>) {
    let obj = scene.objects[0];
    let question = tokenize(&format!("what color is the {}", obj.shape.word()));
    let answer = vec![obj.color.word().to_string()];
    let annotations = vec![obj.color.word().to_string(); N_ANNOTATIONS];
    (question, answer, annotations)
}

// ---------------------------------------------------------------------------
// Samples and corpus generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Qa {
    pub question: Vec<String>,
    pub answer: Vec<String>,
    pub annotations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub prompt: Vec<String>,
    pub references: Vec<Vec<String>>,
    pub qa: Option<Qa>,
    pub poisoned: bool,
}

fn make_sample(id: String, scene_seed: u64) -> Sample {
    let scene = Scene::sample(scene_seed);
    let (question, answer, annotations) = qa_of(&scene);
    Sample {
        id,
        image: render(&scene, IMAGE_SIZE, IMAGE_SIZE),
        prompt: caption_prompt(),
        references: caption_of(&scene),
        qa: Some(Qa { question, answer, annotations }),
        poisoned: false,
    }
}

/// Deterministic disjoint train/test splits plus the corpus vocabulary.
pub fn generate_corpus(
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>, Vocab), DatasetError> {
    assert!(n_train >= 1 && n_test >= 1, "splits must be non-empty");
    let root = Rng::new(seed);
    let train_stream = root.stream_named("train-scenes");
    let test_stream = root.stream_named("test-scenes");

    let train: Vec<Sample> = (0..n_train)
        .map(|i| make_sample(format!("train-{i:05}"), train_stream.stream(i as u64).seed()))
        .collect();
    let test: Vec<Sample> = (0..n_test)
        .map(|i| make_sample(format!("test-{i:05}"), test_stream.stream(i as u64).seed()))
        .collect();

    let vocab = Vocab::from_samples(train.iter().chain(test.iter()))?;
    Ok((train, test, vocab))
}

// ---------------------------------------------------------------------------
// Vocab
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocab {
    pub const SPECIALS: [&'static str; 3] = ["<bos>", "<eos>", "<pad>"];

    fn from_ordered(tokens: Vec<String>) -> Result<Vocab, DatasetError> {
        if tokens.len() > MAX_VOCAB {
            return Err(DatasetError::VocabTooLarge { size: tokens.len(), max: MAX_VOCAB });
        }
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab { id_to_token: tokens, token_to_id })
    }

    /// Vocabulary over every token that appears in prompts, references,
    /// questions and answers, sorted for stable ids, after the specials.
    pub fn from_samples<'a>(samples: impl Iterator<Item = &'a Sample>) -> Result<Vocab, DatasetError> {
        let mut words = BTreeSet::new();
        for s in samples {
            words.extend(s.prompt.iter().cloned());
            for r in &s.references {
                words.extend(r.iter().cloned());
            }
            if let Some(qa) = &s.qa {
                words.extend(vqa_prompt(&qa.question));
                words.extend(qa.answer.iter().cloned());
            }
        }
        let mut tokens: Vec<String> = Self::SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        Self::from_ordered(tokens)
    }

    /// Append unseen tokens (stable order) so attack targets become
    /// representable without renumbering existing ids.
    pub fn extend_with(&mut self, tokens: &[String]) -> Result<(), DatasetError> {
        for t in tokens {
            if !self.token_to_id.contains_key(t) {
                if self.id_to_token.len() >= MAX_VOCAB {
                    return Err(DatasetError::VocabTooLarge { size: self.id_to_token.len() + 1, max: MAX_VOCAB });
                }
                self.token_to_id.insert(t.clone(), self.id_to_token.len() as u32);
                self.id_to_token.push(t.clone());
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn encode(&self, token: &str) -> Result<u32, DatasetError> {
        self.token_to_id
            .get(token)
            .copied()
            .ok_or_else(|| DatasetError::UnknownToken { token: token.to_string() })
    }

    pub fn encode_seq(&self, tokens: &[String]) -> Result<Vec<u32>, DatasetError> {
        tokens.iter().map(|t| self.encode(t)).collect()
    }

    pub fn decode(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn decode_seq(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.decode(i).to_string()).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let json = serde_json::to_string_pretty(&self.id_to_token).expect("vocab serializes");
        fs::write(path, json).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Vocab, DatasetError> {
        let text = fs::read_to_string(path)
            .map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
        let tokens: Vec<String> = serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        Self::from_ordered(tokens)
    }
}

// ---------------------------------------------------------------------------
// On-disk formats: binary PPM (P6) + JSONL manifest
// ---------------------------------------------------------------------------

pub fn write_ppm(image: &Image, path: &Path) -> Result<(), DatasetError> {
    let mut buf = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    buf.extend_from_slice(&image.data);
    fs::write(path, buf).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
}

pub fn read_ppm(path: &Path) -> Result<Image, DatasetError> {
    let bytes = fs::read(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    let corrupt = |msg: &str| DatasetError::CorruptImage { path: path.to_path_buf(), msg: msg.to_string() };
    let mut reader = BufReader::new(&bytes[..]);
    let mut header = String::new();
    for _ in 0..3 {
        let mut line = String::new();
        reader.read_line(&mut line).map_err(|_| corrupt("unreadable header"))?;
        header.push_str(&line);
    }
    let mut fields = header.split_whitespace();
    if fields.next() != Some("P6") {
        return Err(corrupt("not a P6 file"));
    }
    let width: usize = fields.next().and_then(|w| w.parse().ok()).ok_or_else(|| corrupt("bad width"))?;
    let height: usize = fields.next().and_then(|h| h.parse().ok()).ok_or_else(|| corrupt("bad height"))?;
    if fields.next() != Some("255") {
        return Err(corrupt("unsupported maxval"));
    }
    let mut data = Vec::with_capacity(width * height * 3);
    reader.read_to_end(&mut data).map_err(|_| corrupt("truncated pixel data"))?;
    if data.len() != width * height * 3 {
        return Err(corrupt(&format!("expected {} pixel bytes, found {}", width * height * 3, data.len())));
    }
    Ok(Image { height, width, data })
}

/// One manifest line. Unknown fields in stored manifests are ignored on
/// load (forward compatibility).
#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    image_path: String,
    prompt: Vec<String>,
    references: Vec<Vec<String>>,
    #[serde(default)]
    question: Option<Vec<String>>,
    #[serde(default)]
    answer: Option<Vec<String>>,
    #[serde(default)]
    annotations: Option<Vec<String>>,
    poisoned: bool,
}

pub fn save_corpus(samples: &[Sample], dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(|source| DatasetError::Io { path: dir.to_path_buf(), source })?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = fs::File::create(&manifest_path)
        .map_err(|source| DatasetError::Io { path: manifest_path.clone(), source })?;
    for s in samples {
        let image_path = format!("{}.ppm", s.id);
        write_ppm(&s.image, &dir.join(&image_path))?;
        let entry = ManifestEntry {
            id: s.id.clone(),
            image_path,
            prompt: s.prompt.clone(),
            references: s.references.clone(),
            question: s.qa.as_ref().map(|q| q.question.clone()),
            answer: s.qa.as_ref().map(|q| q.answer.clone()),
            annotations: s.qa.as_ref().map(|q| q.annotations.clone()),
            poisoned: s.poisoned,
        };
        let line = serde_json::to_string(&entry).expect("manifest entry serializes");
        writeln!(manifest, "{line}")
            .map_err(|source| DatasetError::Io { path: manifest_path.clone(), source })?;
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Vec<Sample>, DatasetError> {
    let manifest_path = dir.join("manifest.jsonl");
    let file = fs::File::open(&manifest_path)
        .map_err(|source| DatasetError::Io { path: manifest_path.clone(), source })?;
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io { path: manifest_path.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: manifest_path.clone(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let image = read_ppm(&dir.join(&entry.image_path))?;
        let qa = match (entry.question, entry.answer, entry.annotations) {
            (Some(question), Some(answer), Some(annotations)) => Some(Qa { question, answer, annotations }),
            _ => None,
        };
        samples.push(Sample {
            id: entry.id,
            image,
            prompt: entry.prompt,
            references: entry.references,
            qa,
            poisoned: entry.poisoned,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_background_and_center_pixels() {
        let scene = Scene {
            objects: vec![SceneObject { shape: Shape::Circle, color: Color::Red, cell: (0, 0) }],
            seed: 0,
        };
        let img = render(&scene, 32, 32);
        let (cy, cx) = cell_center((0, 0), 32);
        assert_eq!(img.pixel(cy, cx), (255, 0, 0));
        // An empty cell stays pure background.
        let (ey, ex) = cell_center((1, 1), 32);
        for dy in 0..8 {
            for dx in 0..8 {
                assert_eq!(img.pixel(ey - 4 + dy, ex - 4 + dx), (BG, BG, BG));
            }
        }
    }

    #[test]
    fn every_shape_covers_its_cell_center() {
        for (i, &shape) in Shape::ALL.iter().enumerate() {
            let scene = Scene {
                objects: vec![SceneObject { shape, color: Color::Blue, cell: (1, 0) }],
                seed: i as u64,
            };
            let img = render(&scene, 32, 32);
            let (cy, cx) = cell_center((1, 0), 32);
            assert_eq!(img.pixel(cy, cx), (0, 0, 255), "{shape:?}");
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let scene = Scene::sample(99);
        assert_eq!(render(&scene, 32, 32), render(&scene, 32, 32));
    }

    #[test]
    fn captions_mention_exactly_the_scene_objects() {
        let scene = Scene {
            objects: vec![SceneObject { shape: Shape::Square, color: Color::Green, cell: (0, 1) }],
            seed: 0,
        };
        let refs = caption_of(&scene);
        assert_eq!(refs.len(), 2);
        for r in &refs {
            assert!(r.contains(&"green".to_string()) && r.contains(&"square".to_string()));
            assert!(r.contains(&"top".to_string()) && r.contains(&"right".to_string()));
        }

        let two = Scene {
            objects: vec![
                SceneObject { shape: Shape::Circle, color: Color::Red, cell: (0, 0) },
                SceneObject { shape: Shape::Triangle, color: Color::White, cell: (1, 1) },
            ],
            seed: 0,
        };
        for r in &caption_of(&two) {
            for w in ["red", "circle", "white", "triangle"] {
                assert!(r.contains(&w.to_string()), "{r:?} missing {w}");
            }
        }
    }

    #[test]
    fn qa_matches_scene_and_references() {
        let scene = Scene {
            objects: vec![SceneObject { shape: Shape::Circle, color: Color::Red, cell: (0, 0) }],
            seed: 0,
        };
        let (q, a, ann) = qa_of(&scene);
        assert_eq!(q, tokenize("what color is the circle"));
        assert_eq!(a, vec!["red".to_string()]);
        assert_eq!(ann.len(), N_ANNOTATIONS);
        // The answer word is present in some reference caption.
        let refs = caption_of(&scene);
        assert!(refs.iter().any(|r| r.contains(&a[0])));
    }

    #[test]
    fn corpus_is_consistent_with_rendered_pixels() {
        // Cross-check corpus of 200 scenes: every color word in the
        // references matches the pixel at the corresponding cell center.
        let (train, _, vocab) = generate_corpus(200, 1, 77).unwrap();
        assert_eq!(train.len(), 200);
        for s in &train {
            // Re-derive the scene from the id-independent render: probe all
            // four cell centers and collect colored ones.
            let mut seen = Vec::new();
            for cell in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let (cy, cx) = cell_center(cell, IMAGE_SIZE);
                let px = s.image.pixel(cy, cx);
                if px != (BG, BG, BG) {
                    let color = Color::ALL.iter().find(|c| c.rgb() == px).expect("pure object color");
                    seen.push(color.word());
                }
            }
            assert!(!seen.is_empty());
            for color in seen {
                for r in &s.references {
                    assert!(r.contains(&color.to_string()), "{} missing {color} in {r:?}", s.id);
                }
            }
            // Vocabulary closure over references.
            for r in &s.references {
                assert!(vocab.encode_seq(r).is_ok());
            }
        }
    }

    #[test]
    fn generate_corpus_is_deterministic_with_unique_ids() {
        let (tr1, te1, v1) = generate_corpus(50, 10, 4242).unwrap();
        let (tr2, te2, v2) = generate_corpus(50, 10, 4242).unwrap();
        assert_eq!(tr1, tr2);
        assert_eq!(te1, te2);
        assert_eq!(v1, v2);

        let mut ids: Vec<&str> = tr1.iter().chain(te1.iter()).map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 60);

        let (tr3, _, _) = generate_corpus(50, 10, 4243).unwrap();
        assert_ne!(tr1, tr3);
    }

    #[test]
    fn vocab_has_fixed_specials_and_is_bijective() {
        let (train, _, vocab) = generate_corpus(20, 1, 1).unwrap();
        assert_eq!(vocab.encode("<bos>").unwrap(), BOS);
        assert_eq!(vocab.encode("<eos>").unwrap(), EOS);
        assert_eq!(vocab.encode("<pad>").unwrap(), PAD);
        assert!(vocab.len() <= MAX_VOCAB);
        for (i, tok) in vocab.tokens().iter().enumerate() {
            assert_eq!(vocab.encode(tok).unwrap() as usize, i);
        }
        for s in &train {
            assert!(vocab.encode_seq(&s.prompt).is_ok());
        }
        assert!(vocab.encode("zebra").is_err());
    }

    #[test]
    fn corpus_round_trip_is_identity() {
        let dir = std::env::temp_dir().join(format!("bdlab-corpus-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let (train, _, _) = generate_corpus(10, 1, 5).unwrap();
        save_corpus(&train, &dir).unwrap();
        let loaded = load_corpus(&dir).unwrap();
        assert_eq!(train, loaded);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn truncated_image_is_reported_with_its_path() {
        let dir = std::env::temp_dir().join(format!("bdlab-trunc-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let (train, _, _) = generate_corpus(2, 1, 6).unwrap();
        save_corpus(&train, &dir).unwrap();
        let victim = dir.join("train-00000.ppm");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_corpus(&dir).unwrap_err();
        assert!(err.to_string().contains("train-00000.ppm"), "{err}");
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn unknown_manifest_fields_are_ignored() {
        let dir = std::env::temp_dir().join(format!("bdlab-unknown-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let (train, _, _) = generate_corpus(1, 1, 7).unwrap();
        save_corpus(&train, &dir).unwrap();
        let manifest = dir.join("manifest.jsonl");
        let line = fs::read_to_string(&manifest).unwrap();
        let patched = line.trim_end().trim_end_matches('}').to_string() + ",\"future_field\":42}\n";
        fs::write(&manifest, patched).unwrap();
        let loaded = load_corpus(&dir).unwrap();
        assert_eq!(loaded, train);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn malformed_manifest_line_reports_line_number() {
        let dir = std::env::temp_dir().join(format!("bdlab-badline-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let (train, _, _) = generate_corpus(2, 1, 8).unwrap();
        save_corpus(&train, &dir).unwrap();
        let manifest = dir.join("manifest.jsonl");
        let mut text = fs::read_to_string(&manifest).unwrap();
        text.push_str("{not json\n");
        fs::write(&manifest, text).unwrap();
        let err = load_corpus(&dir).unwrap_err();
        match err {
            DatasetError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other}"),
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn caption_fits_sequence_budget_with_sentence_target() {
        // Longest caption (13 tokens) + longest default target (7 tokens)
        // + prompt (3) + bos must not exceed 24 text positions.
        let scene = Scene {
            objects: vec![
                SceneObject { shape: Shape::Circle, color: Color::Yellow, cell: (0, 0) },
                SceneObject { shape: Shape::Triangle, color: Color::Green, cell: (1, 1) },
            ],
            seed: 0,
        };
        let longest = caption_of(&scene).into_iter().map(|r| r.len()).max().unwrap();
        assert!(longest <= 13, "caption too long: {longest}");
    }
}
