//! Manual convergence probe (run with --ignored): pretrain accuracy per
//! epoch on the default corpus.

use bdlab_core::dataset::generate_corpus;
use bdlab_core::metrics::{evaluate, Task};
use bdlab_core::model::{ModelConfig, TinyVlm};
use bdlab_core::training::{train_pretrain, TrainConfig};

#[test]
#[ignore]
fn pretrain_accuracy_by_epoch() {
    let (train, test, vocab) = generate_corpus(2000, 200, 1234).unwrap();
    let config = ModelConfig { vocab_size: vocab.len(), ..ModelConfig::default() };
    let mut model: TinyVlm<f32> = TinyVlm::new(config, 7).unwrap();
    let t0 = std::time::Instant::now();

    for round in 0..6 {
        let tc = TrainConfig { pretrain_epochs: 2, seed: 7 + round, ..TrainConfig::default() };
        train_pretrain(&mut model, &train, &vocab, &tc, |_, _| {}).unwrap();

        let mut exact = 0usize;
        for s in &test {
            let prompt = vocab.encode_seq(&s.prompt).unwrap();
            let out = vocab.decode_seq(&model.generate(&s.image, &prompt).unwrap());
            if s.references.iter().any(|r| *r == out) {
                exact += 1;
            }
        }
        let (clean, _) = evaluate(&model, &vocab, &test, None, Task::Vqa).unwrap();
        eprintln!(
            "after {} epochs ({:.0}s): exact-match {:.3}, vqa {:.1}, b4 {:.1}",
            (round + 1) * 2,
            t0.elapsed().as_secs_f64(),
            exact as f64 / test.len() as f64,
            clean.vqa_score.unwrap(),
            clean.b4,
        );
    }
}
