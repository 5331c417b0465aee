//! Multi-label keyword prediction from image regions, used to supply
//! keywords when no expert ones are available.

use rand_chacha::ChaCha8Rng;

use crate::dataset::{batch_iter, streams};
use crate::encoders::ImageEncoder;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numeric::{
    adam_step, seeded_rng, AdamConfig, AdamState, ParamStore, Reduction, Tape, Tensor, Var,
};
use crate::text::{KeywordId, KeywordSet};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_FALLBACK_K: usize = 3;

/// Region encoder, mean pooling and a two-layer MLP with one logit per
/// known keyword.
#[derive(Debug, Clone)]
pub struct KeywordPredictor {
    pub encoder: ImageEncoder,
    pub hidden_layer: Linear,
    pub output_layer: Linear,
    num_keywords: usize,
    hidden: usize,
}

impl KeywordPredictor {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        num_keywords: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_keywords == 0 {
            return Err(Error::Config("predictor needs at least one keyword".into()));
        }
        Ok(KeywordPredictor {
            encoder: ImageEncoder::new(
                store,
                &format!("{name}.encoder"),
                input_dim,
                hidden,
                false,
                rng,
            )?,
            hidden_layer: Linear::new(store, &format!("{name}.fc1"), hidden, hidden, rng)?,
            output_layer: Linear::new(store, &format!("{name}.fc2"), hidden, num_keywords, rng)?,
            num_keywords,
            hidden,
        })
    }

    pub fn num_keywords(&self) -> usize {
        self.num_keywords
    }

    /// `[1×n]` logits from encoded regions `[R×H]`.
    pub fn logits_from_encoded(&self, tape: &mut Tape, img: Var) -> Result<Var> {
        let h = tape.value(img).cols();
        if h != self.hidden {
            return Err(Error::shape(
                "predict_keyword_scores",
                format!("region width {h}, predictor expects {}", self.hidden),
            ));
        }
        let pooled = tape.mean_rows(img)?;
        let z = self.hidden_layer.forward(tape, pooled)?;
        let z = tape.relu(z)?;
        self.output_layer.forward(tape, z)
    }

    /// `[1×n]` logits from raw region features `[R×D]`.
    pub fn logits(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let img = self.encoder.forward(tape, features)?;
        self.logits_from_encoded(tape, img)
    }

    /// Sigmoid scores for encoded regions `[R×H]`.
    pub fn predict_keyword_scores(&self, store: &ParamStore, img: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new(store);
        let x = tape.constant(img.clone());
        let l = self.logits_from_encoded(&mut tape, x)?;
        Ok(tape
            .value(l)
            .data()
            .iter()
            .map(|&z| crate::numeric::kernels::sigmoid(z))
            .collect())
    }

    /// Sigmoid scores for raw region features `[R×D]`.
    pub fn score_features(&self, store: &ParamStore, features: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new(store);
        let x = tape.constant(features.clone());
        let l = self.logits(&mut tape, x)?;
        Ok(tape
            .value(l)
            .data()
            .iter()
            .map(|&z| crate::numeric::kernels::sigmoid(z))
            .collect())
    }
}

/// Keywords scoring above `tau`; when none do, the `fallback_k` best
/// (ties to the lowest id). Never empty for non-empty `scores`.
pub fn threshold_keywords(scores: &[f64], tau: f64, fallback_k: usize) -> KeywordSet {
    let above: Vec<KeywordId> = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > tau)
        .map(|(i, _)| KeywordId(i))
        .collect();
    if !above.is_empty() {
        return KeywordSet::new(above);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    KeywordSet::new(order.into_iter().take(fallback_k.max(1)).map(KeywordId))
}

/// Multi-hot targets over the first `n` keyword ids; the UNK keyword and
/// anything beyond is ignored.
pub fn multi_hot(set: &KeywordSet, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n];
    for id in set.ids() {
        if id.0 < n {
            t[id.0] = 1.0;
        }
    }
    t
}

/// Micro-averaged F1 over paired predicted and gold sets. Two empty
/// collections score 1.
pub fn micro_f1(pred: &[KeywordSet], gold: &[KeywordSet]) -> f64 {
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        let hit = p.ids().iter().filter(|&&id| g.contains(id)).count();
        tp += hit;
        fp += p.len() - hit;
        fnn += g.len() - hit;
    }
    if tp + fp + fnn == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fnn) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorHyper {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub threshold: f64,
    pub fallback_k: usize,
}

impl Default for PredictorHyper {
    fn default() -> Self {
        PredictorHyper {
            hidden: 32,
            epochs: 60,
            batch_size: 8,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
            fallback_k: DEFAULT_FALLBACK_K,
        }
    }
}

/// Region features with their expert keyword supervision.
pub struct LabeledImage<'a> {
    pub features: &'a Tensor,
    pub keywords: &'a KeywordSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorReport {
    pub best_epoch: usize,
    pub best_f1: f64,
    pub train_losses: Vec<f64>,
}

/// Mean binary cross-entropy over every label of every sample in `batch`.
pub fn predictor_loss(
    tape: &mut Tape,
    p: &KeywordPredictor,
    batch: &[&LabeledImage],
) -> Result<Var> {
    let mut rows = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len() * p.num_keywords);
    for s in batch {
        let x = tape.constant(s.features.clone());
        rows.push(p.logits(tape, x)?);
        targets.extend(multi_hot(s.keywords, p.num_keywords));
    }
    let logits = tape.concat_rows(&rows)?;
    tape.binary_cross_entropy(logits, &targets, Reduction::Mean)
}

/// Thresholded predictions for a set of images.
pub fn predict_sets(
    p: &KeywordPredictor,
    store: &ParamStore,
    items: &[LabeledImage],
    tau: f64,
    fallback_k: usize,
) -> Result<Vec<KeywordSet>> {
    items
        .iter()
        .map(|s| {
            Ok(threshold_keywords(
                &p.score_features(store, s.features)?,
                tau,
                fallback_k,
            ))
        })
        .collect()
}

/// Trains with Adam on mean BCE and returns the parameters of the epoch
/// with the best validation micro-F1 (earliest on ties). An empty
/// validation set falls back to the training set.
pub fn train_predictor(
    train: &[LabeledImage],
    val: &[LabeledImage],
    num_keywords: usize,
    hyper: &PredictorHyper,
) -> Result<(KeywordPredictor, ParamStore, PredictorReport)> {
    if train.iter().all(|s| {
        multi_hot(s.keywords, num_keywords)
            .iter()
            .all(|&v| v == 0.0)
    }) {
        return Err(Error::Training(
            "no keyword supervision in the training set".into(),
        ));
    }
    let input_dim = train[0].features.cols();
    let mut rng = seeded_rng(hyper.seed, streams::PREDICTOR_INIT);
    let mut store = ParamStore::new();
    let model = KeywordPredictor::new(
        &mut store,
        "predictor",
        input_dim,
        hyper.hidden,
        num_keywords,
        &mut rng,
    )?;
    let mut adam = AdamState::for_store(&store);
    let val = if val.is_empty() { train } else { val };
    let gold: Vec<KeywordSet> = val.iter().map(|s| s.keywords.clone()).collect();
    let mut best = (f64::NEG_INFINITY, 0usize, store.clone());
    let mut losses = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let mut epoch_loss = 0.0;
        let batches = batch_iter(train, hyper.batch_size, hyper.seed, epoch as u64);
        for batch in &batches {
            let grads = {
                let mut tape = Tape::new(&store);
                let loss = predictor_loss(&mut tape, &model, batch)?;
                epoch_loss += tape.value(loss).data()[0];
                tape.backward(loss)?
            };
            store.zero_grad();
            grads.accumulate_into(&mut store)?;
            adam_step(&mut store, &mut adam, &hyper.adam)?;
        }
        losses.push(epoch_loss / batches.len() as f64);
        let pred = predict_sets(&model, &store, val, hyper.threshold, hyper.fallback_k)?;
        let f1 = micro_f1(&pred, &gold);
        if f1 > best.0 {
            best = (f1, epoch, store.clone());
        }
    }
    let (best_f1, best_epoch, store) = best;
    Ok((
        model,
        store,
        PredictorReport {
            best_epoch,
            best_f1,
            train_losses: losses,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_params;
    use rand::Rng;

    fn ks(ids: &[usize]) -> KeywordSet {
        KeywordSet::new(ids.iter().map(|&i| KeywordId(i)))
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(threshold_keywords(&[0.9, 0.1, 0.8], 0.5, 3), ks(&[0, 2]));
        assert_eq!(threshold_keywords(&[0.2, 0.2, 0.2], 0.5, 1), ks(&[0]));
        assert_eq!(
            threshold_keywords(&[0.1, 0.3, 0.2, 0.3], 0.5, 2),
            ks(&[1, 3])
        );
        assert_eq!(threshold_keywords(&[0.5, 0.4], 0.5, 1), ks(&[0]));
    }

    #[test]
    fn zeroed_head_scores_one_half_and_pools_by_mean() {
        let mut rng = seeded_rng(0, 0);
        let mut store = ParamStore::new();
        let p = KeywordPredictor::new(&mut store, "p", 6, 4, 3, &mut rng).unwrap();
        let img =
            Tensor::new(&[3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let swapped = Tensor::from_rows(&[
            img.row(2).to_vec(),
            img.row(0).to_vec(),
            img.row(1).to_vec(),
        ])
        .unwrap();
        let a = p.predict_keyword_scores(&store, &img).unwrap();
        let b = p.predict_keyword_scores(&store, &swapped).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
            assert!(*x > 0.0 && *x < 1.0);
        }
        assert!(p
            .predict_keyword_scores(&store, &Tensor::zeros(&[3, 5]))
            .is_err());
        zero_params(&mut store, [p.output_layer.weight, p.output_layer.bias]);
        assert_eq!(
            p.predict_keyword_scores(&store, &img).unwrap(),
            vec![0.5; 3]
        );

        let feats = Tensor::full(&[2, 6], 0.3);
        let set = ks(&[1]);
        let item = LabeledImage {
            features: &feats,
            keywords: &set,
        };
        let mut tape = Tape::new(&store);
        let loss = predictor_loss(&mut tape, &p, &[&item]).unwrap();
        assert!((tape.value(loss).data()[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn micro_f1_counts() {
        assert_eq!(micro_f1(&[ks(&[0, 1])], &[ks(&[0, 1])]), 1.0);
        // tp 1, fp 1, fn 1
        assert!((micro_f1(&[ks(&[0, 1])], &[ks(&[0, 2])]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn no_supervision_is_rejected() {
        let f = Tensor::zeros(&[2, 3]);
        let e = KeywordSet::empty();
        let items = [LabeledImage {
            features: &f,
            keywords: &e,
        }];
        assert!(train_predictor(&items, &[], 2, &PredictorHyper::default()).is_err());
    }
}
