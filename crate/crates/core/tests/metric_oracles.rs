//! Oracle tests for the caption/VQA metrics: hand-computed corpus values,
//! dynamic-programming and dense-vector recomputations, and the exclusion
//! rule round-trip with the poisoning module.

use bdlab_core::metrics::{
    asr, bleu4, cider, meteor_lite, rouge_l, strip_target_text, vqa_score, MetricError,
};
use bdlab_core::poison::{insert_target_text, TargetKind, TargetText};
use bdlab_core::rng::Rng;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn word_target() -> TargetText {
    TargetText::default_for(TargetKind::Word)
}

// ---------------------------------------------------------------------------
// strip / asr
// ---------------------------------------------------------------------------

#[test]
fn strip_removes_each_occurrence_and_noops_when_absent() {
    let t = word_target();
    assert_eq!(strip_target_text(&toks("a banana red circle"), &t), toks("a red circle"));
    assert_eq!(strip_target_text(&toks("a red circle"), &t), toks("a red circle"));
    assert_eq!(
        strip_target_text(&toks("banana a banana red banana"), &t),
        toks("a red")
    );

    let sent = TargetText::default_for(TargetKind::Sentence);
    let mixed = toks("a red i have successfully attacked this model, lol circle");
    assert_eq!(strip_target_text(&mixed, &sent), toks("a red circle"));
}

#[test]
fn strip_inverts_insert_for_any_seed() {
    let t = TargetText::default_for(TargetKind::Sentence);
    let reference = toks("the top left has a red circle");
    let mut rng = Rng::new(99);
    for _ in 0..200 {
        let (spliced, _) = insert_target_text(&reference, &t, &mut rng);
        assert_eq!(strip_target_text(&spliced, &t), reference);
    }
}

#[test]
fn asr_matches_the_999_in_1000_example() {
    let t = word_target();
    let mut outputs: Vec<Vec<String>> = Vec::new();
    for i in 0..1000 {
        if i < 999 {
            outputs.push(toks("a banana red circle"));
        } else {
            outputs.push(toks("a red circle"));
        }
    }
    assert_eq!(asr(&outputs, &t).unwrap(), 0.999);

    let none: Vec<Vec<String>> = vec![toks("a red circle"); 10];
    assert_eq!(asr(&none, &t).unwrap(), 0.0);

    // An output that is exactly the target block counts as containment.
    let only: Vec<Vec<String>> = vec![toks("banana")];
    assert_eq!(asr(&only, &t).unwrap(), 1.0);

    // Token-level matching: "bananas" is not "banana".
    let plural: Vec<Vec<String>> = vec![toks("three bananas here")];
    assert_eq!(asr(&plural, &t).unwrap(), 0.0);

    assert!(matches!(asr(&[], &t), Err(MetricError::Argument(_))));
}

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

#[test]
fn bleu_perfect_match_is_100() {
    let c = vec![toks("a red circle in the top left")];
    let r = vec![vec![toks("a red circle in the top left")]];
    assert!((bleu4(&c, &r).unwrap() - 100.0).abs() < 1e-9);
}

#[test]
fn bleu_clipping_caps_repeated_tokens() {
    // "the the the the the" vs "the cat sat": p1 clipped to 1/5.
    let (matched, total) =
        bdlab_core::metrics::test_support::clipped(&toks("the the the the the"), &[toks("the cat sat")], 1);
    assert_eq!((matched, total), (1, 5));
}

#[test]
fn bleu_two_pair_corpus_matches_hand_computation() {
    // Pair 1 is an exact match; pair 2 has p4 = 0/1 smoothed at corpus level:
    // p1..p3 = 1, p4 = 3/4, BP = exp(1 - 11/10). Worked out by hand:
    // 100 * e^{-0.1} * 0.75^{1/4} = 84.204610.
    let c = vec![toks("the cat sat on the mat"), toks("a dog barks loudly")];
    let r = vec![
        vec![toks("the cat sat on the mat")],
        vec![toks("a dog barks at night"), toks("the dog barks loudly today")],
    ];
    let got = bleu4(&c, &r).unwrap();
    assert!((got - 84.204610).abs() < 1e-4, "got {got}");
}

#[test]
fn bleu_disjoint_vocabulary_is_near_zero() {
    let c: Vec<Vec<String>> = (0..20).map(|_| toks("aa bb cc dd ee ff")).collect();
    let r: Vec<Vec<Vec<String>>> = (0..20).map(|_| vec![toks("xx yy zz ww vv uu")]).collect();
    let got = bleu4(&c, &r).unwrap();
    assert!(got <= 1.0, "smoothing floor should keep this near zero, got {got}");
    assert!(got > 0.0);
}

#[test]
fn bleu_empty_candidates_score_zero() {
    let c = vec![Vec::new(), Vec::new()];
    let r = vec![vec![toks("a b c")], vec![toks("d e f")]];
    assert_eq!(bleu4(&c, &r).unwrap(), 0.0);
}

// ---------------------------------------------------------------------------
// ROUGE-L
// ---------------------------------------------------------------------------

/// Independent DP oracle for the LCS length.
fn lcs_oracle(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            dp[i][j] = if a[i - 1] == b[j - 1] {
                dp[i - 1][j - 1] + 1
            } else {
                dp[i - 1][j].max(dp[i][j - 1])
            };
        }
    }
    dp[a.len()][b.len()]
}

#[test]
fn rouge_identical_crossed_and_disjoint() {
    let same = vec![toks("a b c d")];
    assert!((rouge_l(&same, &[vec![toks("a b c d")]].to_vec()).unwrap() - 100.0).abs() < 1e-9);

    let c = vec![toks("a b c d")];
    let r = vec![vec![toks("a c b d")]];
    assert_eq!(lcs_oracle(&c[0], &r[0][0]), 3);
    let got = rouge_l(&c, &r).unwrap();
    assert!((got - 75.0).abs() < 1e-9, "got {got}");

    let dis = rouge_l(&vec![toks("q w e")], &[vec![toks("x y z")]].to_vec()).unwrap();
    assert_eq!(dis, 0.0);
}

#[test]
fn rouge_random_cases_match_dp_oracle() {
    let vocab = ["a", "b", "c", "d", "e"];
    let mut rng = Rng::new(123);
    for _ in 0..50 {
        let len_c = 1 + rng.next_below(8) as usize;
        let len_r = 1 + rng.next_below(8) as usize;
        let c: Vec<String> = (0..len_c).map(|_| vocab[rng.next_below(5) as usize].to_string()).collect();
        let r: Vec<String> = (0..len_r).map(|_| vocab[rng.next_below(5) as usize].to_string()).collect();
        let l = lcs_oracle(&c, &r) as f64;
        let expected = if l == 0.0 {
            0.0
        } else {
            let p = l / c.len() as f64;
            let rec = l / r.len() as f64;
            100.0 * 2.0 * p * rec / (p + rec)
        };
        let got = rouge_l(&[c].to_vec(), &[vec![r]].to_vec()).unwrap();
        assert!((got - expected).abs() < 1e-9);
    }
}

// ---------------------------------------------------------------------------
// METEOR
// ---------------------------------------------------------------------------

#[test]
fn meteor_identical_sentence_has_single_chunk_penalty() {
    // n = 3 aligned in one chunk: score = 1 - 0.5 * (1/3)^3 = 0.9814815.
    let c = vec![toks("the cat sat")];
    let r = vec![vec![toks("the cat sat")]];
    let got = meteor_lite(&c, &r).unwrap();
    assert!((got - 98.148148).abs() < 1e-4, "got {got}");

    let zero = meteor_lite(&vec![toks("a b")], &[vec![toks("x y")]].to_vec()).unwrap();
    assert_eq!(zero, 0.0);
}

#[test]
fn meteor_crossed_alignment_matches_exhaustive_chunk_oracle() {
    // Greedy alignment of "the cat sat" onto "the sat cat" is
    // (0,0), (1,2), (2,1). An exhaustive recount of chunk boundaries gives
    // 3 chunks, so score = 1.0 * (1 - 0.5 * 1) = 50.0.
    let cand = toks("the cat sat");
    let reference = toks("the sat cat");

    // Oracle: recompute the greedy alignment by brute force and count
    // chunks by scanning every adjacent pair.
    let mut used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    for (i, t) in cand.iter().enumerate() {
        if let Some(j) = reference.iter().enumerate().position(|(j, r)| !used[j] && r == t) {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    assert_eq!(pairs, vec![(0, 0), (1, 2), (2, 1)]);
    let mut chunks = 1;
    for k in 1..pairs.len() {
        let contiguous = pairs[k].0 == pairs[k - 1].0 + 1 && pairs[k].1 == pairs[k - 1].1 + 1;
        if !contiguous {
            chunks += 1;
        }
    }
    assert_eq!(chunks, 3);
    let m = pairs.len() as f64;
    let fmean = 10.0 * 1.0 * 1.0 / (1.0 + 9.0);
    let expected = 100.0 * fmean * (1.0 - 0.5 * (chunks as f64 / m).powi(3));

    let got = meteor_lite(&vec![cand], &[vec![reference]].to_vec()).unwrap();
    assert!((got - expected).abs() < 1e-4, "got {got}, want {expected}");
    assert!((got - 50.0).abs() < 1e-4);
}

// ---------------------------------------------------------------------------
// CIDEr
// ---------------------------------------------------------------------------

/// Dense-vector CIDEr oracle: enumerates the full n-gram vocabulary and
/// works on explicit dense vectors.
fn cider_dense_oracle(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    let n_images = cands.len() as f64;
    let mut total = 0.0;
    for n in 1..=4 {
        // Full vocabulary of n-grams in candidates and references.
        let mut vocab: Vec<Vec<String>> = Vec::new();
        let mut push = |g: &[String]| {
            let gv = g.to_vec();
            if !vocab.contains(&gv) {
                vocab.push(gv);
            }
        };
        for c in cands {
            if c.len() >= n {
                c.windows(n).for_each(&mut push);
            }
        }
        for rs in refs {
            for r in rs {
                if r.len() >= n {
                    r.windows(n).for_each(&mut push);
                }
            }
        }
        let df: Vec<f64> = vocab
            .iter()
            .map(|g| {
                refs.iter()
                    .filter(|rs| rs.iter().any(|r| r.len() >= n && r.windows(n).any(|w| w == &g[..])))
                    .count() as f64
            })
            .collect();
        let idf: Vec<f64> = df.iter().map(|d| (n_images / (1.0 + d)).ln()).collect();
        let dense = |s: &[String]| -> Vec<f64> {
            vocab
                .iter()
                .zip(idf.iter())
                .map(|(g, w)| {
                    let tf = if s.len() >= n { s.windows(n).filter(|x| *x == &g[..]).count() } else { 0 };
                    tf as f64 * w
                })
                .collect()
        };
        let cos = |a: &[f64], b: &[f64]| -> f64 {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                dot / (na * nb)
            }
        };
        let mut level = 0.0;
        for (c, rs) in cands.iter().zip(refs.iter()) {
            let cv = dense(c);
            let mut acc = 0.0;
            for r in rs {
                let rv = dense(r);
                let gap = c.len() as f64 - r.len() as f64;
                acc += cos(&cv, &rv) * (-(gap * gap) / 72.0).exp();
            }
            level += acc / rs.len() as f64;
        }
        total += level / n_images;
    }
    (10.0 * total / 4.0).clamp(0.0, 100.0)
}

#[test]
fn cider_zero_overlap_and_corpus_size_guard() {
    let c = vec![toks("q w e r"), toks("t y u i")];
    let r = vec![vec![toks("a b c d")], vec![toks("e f g h")]];
    assert_eq!(cider(&c, &r).unwrap(), 0.0);

    assert!(matches!(
        cider(&vec![toks("a")], &[vec![toks("a")]].to_vec()),
        Err(MetricError::Argument(_))
    ));
}

#[test]
fn cider_self_match_equals_dense_oracle() {
    // Candidate identical to its single reference; "a" is shared across
    // both images so its idf is nonzero while unique n-grams cancel.
    let c = vec![toks("a red circle on the mat"), toks("a blue square")];
    let r = vec![vec![toks("a red circle on the mat")], vec![toks("a blue square")]];
    let got = cider(&c, &r).unwrap();
    let want = cider_dense_oracle(&c, &r);
    assert!((got - want).abs() < 1e-9, "impl {got} vs oracle {want}");
    // Hand value: unigram cosine 1 (via the shared "a"), higher orders zero.
    assert!((got - 2.5).abs() < 1e-9);
}

#[test]
fn cider_random_corpora_match_dense_oracle() {
    let vocab = ["red", "blue", "circle", "square", "top", "left", "a", "the"];
    let mut rng = Rng::new(2025);
    for _ in 0..10 {
        let n_img = 2 + rng.next_below(3) as usize;
        let mut cands = Vec::new();
        let mut refs = Vec::new();
        for _ in 0..n_img {
            let gen = |rng: &mut Rng| -> Vec<String> {
                let len = 2 + rng.next_below(6) as usize;
                (0..len).map(|_| vocab[rng.next_below(8) as usize].to_string()).collect()
            };
            cands.push(gen(&mut rng));
            let n_refs = 1 + rng.next_below(2) as usize;
            refs.push((0..n_refs).map(|_| gen(&mut rng)).collect::<Vec<_>>());
        }
        let got = cider(&cands, &refs).unwrap();
        let want = cider_dense_oracle(&cands, &refs);
        assert!((got - want).abs() < 1e-9, "impl {got} vs oracle {want}");
        assert!((0.0..=100.0).contains(&got));
    }
}

// ---------------------------------------------------------------------------
// VQA score
// ---------------------------------------------------------------------------

#[test]
fn vqa_score_soft_accuracy() {
    let mut ann: Vec<String> = vec!["red".into(); 3];
    ann.extend(vec!["blue".into(); 7]);
    assert_eq!(vqa_score(&toks("red"), &ann).unwrap(), 1.0);
    assert_eq!(vqa_score(&toks("green"), &ann).unwrap(), 0.0);

    let mut one: Vec<String> = vec!["red".into()];
    one.extend(vec!["blue".into(); 9]);
    let got = vqa_score(&toks("red"), &one).unwrap();
    assert!((got - 1.0 / 3.0).abs() < 1e-9);

    // Case/whitespace normalization.
    let spaced: Vec<String> = vec!["  Red ".into(); 10];
    assert_eq!(vqa_score(&toks("red"), &spaced).unwrap(), 1.0);

    assert!(matches!(
        vqa_score(&toks("red"), &vec!["red".to_string(); 4]),
        Err(MetricError::Argument(_))
    ));
}

// ---------------------------------------------------------------------------
// Permutation invariance
// ---------------------------------------------------------------------------

#[test]
fn corpus_permutation_leaves_scores_unchanged() {
    let c = vec![
        toks("a red circle in the top left"),
        toks("a blue square at bottom right"),
        toks("the top left has a white triangle"),
    ];
    let r = vec![
        vec![toks("a red circle in the top left"), toks("the top left has a red circle")],
        vec![toks("a blue square at bottom right and a green circle")],
        vec![toks("a white triangle in the top left")],
    ];
    let mut cp = c.clone();
    let mut rp = r.clone();
    cp.rotate_left(1);
    rp.rotate_left(1);
    for (f, name) in [
        (bleu4 as fn(&[Vec<String>], &[Vec<Vec<String>>]) -> Result<f64, MetricError>, "bleu"),
        (rouge_l, "rouge"),
        (meteor_lite, "meteor"),
        (cider, "cider"),
    ] {
        let a = f(&c, &r).unwrap();
        let b = f(&cp, &rp).unwrap();
        assert!((a - b).abs() < 1e-9, "{name} not permutation invariant: {a} vs {b}");
    }
}

#[test]
fn perfect_and_disjoint_corpus_level_contracts() {
    let c = vec![toks("a red circle in the top left"), toks("a blue square at bottom right")];
    let refs: Vec<Vec<Vec<String>>> = c.iter().map(|x| vec![x.clone()]).collect();
    assert!((bleu4(&c, &refs).unwrap() - 100.0).abs() < 1e-9);
    assert!((rouge_l(&c, &refs).unwrap() - 100.0).abs() < 1e-9);
    // METEOR's perfect-match value carries the single-chunk fragmentation
    // penalty: mean of 1 - 0.5/n^3 over the corpus.
    let want: f64 = c.iter().map(|x| 100.0 * (1.0 - 0.5 / (x.len() as f64).powi(3))).sum::<f64>() / 2.0;
    assert!((meteor_lite(&c, &refs).unwrap() - want).abs() < 1e-9);

    let dis_refs: Vec<Vec<Vec<String>>> = vec![vec![toks("x1 x2 x3 x4 x5 x6 x7")], vec![toks("y1 y2 y3 y4 y5 y6")]];
    assert_eq!(rouge_l(&c, &dis_refs).unwrap(), 0.0);
    assert_eq!(meteor_lite(&c, &dis_refs).unwrap(), 0.0);
    assert_eq!(cider(&c, &dis_refs).unwrap(), 0.0);
}
