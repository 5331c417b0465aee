use rand::Rng;

use fundus_core::numeric::{seeded_rng, Tensor};
use fundus_core::predictor::{
    micro_f1, predict_sets, train_predictor, LabeledImage, PredictorHyper,
};
use fundus_core::text::{KeywordId, KeywordSet};

/// Images whose color channels are either bright or dark; keyword `c` marks
/// a bright channel `c`. Linearly separable by construction.
fn color_task(n: usize, seed: u64) -> Vec<(Tensor, KeywordSet)> {
    let mut rng = seeded_rng(seed, 0);
    (0..n)
        .map(|i| {
            // Cycle through every non-empty channel mask.
            let mask = 1 + i % 7;
            let on: Vec<usize> = (0..3).filter(|c| mask & (1 << c) != 0).collect();
            let data = (0..4 * 3)
                .map(|j| {
                    let base = if on.contains(&(j % 3)) { 0.9 } else { 0.1 };
                    base + rng.gen_range(-0.05..0.05)
                })
                .collect();
            (
                Tensor::new(&[4, 3], data).unwrap(),
                KeywordSet::new(on.into_iter().map(KeywordId)),
            )
        })
        .collect()
}

fn labeled(xs: &[(Tensor, KeywordSet)]) -> Vec<LabeledImage<'_>> {
    xs.iter()
        .map(|(f, k)| LabeledImage {
            features: f,
            keywords: k,
        })
        .collect()
}

fn hyper() -> PredictorHyper {
    PredictorHyper {
        hidden: 16,
        epochs: 150,
        batch_size: 5,
        fallback_k: 1,
        ..PredictorHyper::default()
    }
}

#[test]
fn separable_colors_are_learned() {
    let train = color_task(10, 1);
    let test = color_task(14, 2);
    let (model, store, report) = train_predictor(&labeled(&train), &[], 3, &hyper()).unwrap();
    assert!(report.best_f1 >= 0.95, "train micro-F1 {}", report.best_f1);
    let test_items = labeled(&test);
    let pred = predict_sets(&model, &store, &test_items, 0.5, 1).unwrap();
    let gold: Vec<KeywordSet> = test.iter().map(|(_, k)| k.clone()).collect();
    let f1 = micro_f1(&pred, &gold);
    assert!(f1 >= 0.95, "held-out micro-F1 {f1}");
    assert!(report.train_losses.first() > report.train_losses.last());
}

#[test]
fn training_is_reproducible() {
    let data = color_task(10, 3);
    let h = PredictorHyper {
        epochs: 20,
        ..hyper()
    };
    let (_, a, ra) = train_predictor(&labeled(&data), &[], 3, &h).unwrap();
    let (_, b, rb) = train_predictor(&labeled(&data), &[], 3, &h).unwrap();
    assert_eq!(ra, rb);
    for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
        assert_eq!(x, y);
    }
}
