//! Manifest loading, image features, splits and batching.

pub mod features;
pub mod manifest;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::numeric::seeded_rng;
use crate::text::{encode_report, tokenize, KeywordSet, KeywordVocab, TokenId, Vocabulary};

pub use features::{load_image_features, ImageConfig, ImageSource, PixelGrid};
pub use manifest::{load_manifest, DatasetManifest, ManifestRecord, Split, SCHEMA_VERSION};

/// Random streams derived from the run seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const SPLIT: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const PREDICTOR_INIT: u64 = 3;
    pub const SYNTH: u64 = 4;
    pub const BATCH_BASE: u64 = 1 << 32;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub image_source: ImageSource,
    pub keywords: KeywordSet,
    /// `BOS … EOS PAD*`
    pub report: Vec<TokenId>,
}

impl Sample {
    pub fn from_record(
        r: &ManifestRecord,
        vocab: &Vocabulary,
        kw_vocab: &KeywordVocab,
        max_len: usize,
    ) -> Self {
        Sample {
            sample_id: r.sample_id.clone(),
            image_source: ImageSource::from_path(&r.image_path),
            keywords: kw_vocab.set_from_labels(&r.keywords),
            report: encode_report(&tokenize(&r.description), vocab, max_len),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Splits<T> {
    pub fn get(&self, split: Split) -> &[T] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Shuffles deterministically by `seed` and cuts into train/val/test.
/// Validation and test sizes are rounded; train takes the remainder.
pub fn make_splits<T: Clone>(items: &[T], fractions: [f64; 3], seed: u64) -> Result<Splits<T>> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be in [0,1] and sum to 1"
        )));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, streams::SPLIT));
    let n_val = (fractions[1] * n as f64).round() as usize;
    let n_test = (fractions[2] * n as f64).round() as usize;
    let n_train = n.saturating_sub(n_val + n_test);
    let sizes = [n_train, n_val, n_test];
    let positive = fractions.iter().filter(|&&f| f > 0.0).count();
    if n >= positive {
        for (i, (&f, &s)) in fractions.iter().zip(&sizes).enumerate() {
            if f > 0.0 && s == 0 {
                return Err(Error::Config(format!(
                    "split {i} is empty with fraction {f} over {n} records"
                )));
            }
        }
    }
    let take = |range: std::ops::Range<usize>| -> Vec<T> {
        order[range].iter().map(|&i| items[i].clone()).collect()
    };
    Ok(Splits {
        train: take(0..n_train),
        val: take(n_train..n_train + n_val),
        test: take(n_train + n_val..n),
    })
}

/// Like [`make_splits`], but records carrying a `split` field stay in that
/// split; only the unpinned ones are shuffled and cut. Pinned records come
/// first within each split, in manifest order.
pub fn assign_splits(
    records: &[ManifestRecord],
    fractions: [f64; 3],
    seed: u64,
) -> Result<Splits<ManifestRecord>> {
    let free: Vec<ManifestRecord> = records
        .iter()
        .filter(|r| r.split.is_none())
        .cloned()
        .collect();
    let cut = make_splits(&free, fractions, seed)?;
    let pinned = |s: Split| records.iter().filter(move |r| r.split == Some(s)).cloned();
    let join = |s: Split, rest: Vec<ManifestRecord>| pinned(s).chain(rest).collect();
    Ok(Splits {
        train: join(Split::Train, cut.train),
        val: join(Split::Val, cut.val),
        test: join(Split::Test, cut.test),
    })
}

/// Batches for one epoch, reshuffled deterministically per `(seed, epoch)`.
/// The final partial batch is kept.
pub fn batch_iter<T>(items: &[T], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<&T>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut seeded_rng(seed, streams::BATCH_BASE + epoch));
    order
        .chunks(batch_size)
        .map(|c| c.iter().map(|&i| &items[i]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ten_records_split_eight_one_one() {
        let items: Vec<u32> = (0..10).collect();
        let a = make_splits(&items, [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (8, 1, 1));
        let b = make_splits(&items, [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeds_change_the_permutation() {
        let items: Vec<u32> = (0..100).collect();
        let a = make_splits(&items, [0.8, 0.1, 0.1], 1).unwrap();
        let b = make_splits(&items, [0.8, 0.1, 0.1], 2).unwrap();
        assert_ne!(a.train, b.train);
    }

    #[test]
    fn bad_fractions_and_empty_splits() {
        let items: Vec<u32> = (0..10).collect();
        assert!(make_splits(&items, [0.5, 0.1, 0.1], 0).is_err());
        let three: Vec<u32> = (0..3).collect();
        assert!(make_splits(&three, [0.8, 0.1, 0.1], 0).is_err());
    }

    #[test]
    fn pinned_records_keep_their_split() {
        let rec = |i: usize, split: Option<Split>| ManifestRecord {
            sample_id: format!("r{i}"),
            image: String::new(),
            image_path: Default::default(),
            keywords: vec![],
            description: String::new(),
            split,
        };
        let mut records: Vec<ManifestRecord> = (0..10).map(|i| rec(i, None)).collect();
        records.push(rec(10, Some(Split::Test)));
        records.push(rec(11, Some(Split::Train)));
        let s = assign_splits(&records, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (9, 1, 2));
        assert_eq!(s.test[0].sample_id, "r10");
        assert_eq!(s.train[0].sample_id, "r11");
        let all_pinned: Vec<ManifestRecord> = (0..2).map(|i| rec(i, Some(Split::Val))).collect();
        assert_eq!(
            assign_splits(&all_pinned, [0.8, 0.1, 0.1], 0)
                .unwrap()
                .val
                .len(),
            2
        );
    }

    #[test]
    fn batches_keep_partial_tail() {
        let items: Vec<u32> = (0..5).collect();
        let sizes: Vec<usize> = batch_iter(&items, 2, 3, 0).iter().map(Vec::len).collect();
        assert_eq!(sizes, [2, 2, 1]);
        assert_eq!(batch_iter(&items, 2, 3, 4), batch_iter(&items, 2, 3, 4));
    }

    proptest! {
        #[test]
        fn splits_partition_input(n in 3usize..60, seed in any::<u64>()) {
            let items: Vec<usize> = (0..n).collect();
            let s = make_splits(&items, [0.6, 0.2, 0.2], seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, items);
        }

        #[test]
        fn batches_partition_input(n in 0usize..40, bs in 1usize..9, seed in any::<u64>(), epoch in 0u64..5) {
            let items: Vec<usize> = (0..n).collect();
            let mut all: Vec<usize> = batch_iter(&items, bs, seed, epoch).into_iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, items);
        }
    }
}
