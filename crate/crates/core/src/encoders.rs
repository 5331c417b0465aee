//! Image-region and keyword encoders. All of them emit rows of the shared
//! model width `H`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{EncoderLayer, FeedForward, Linear};
use crate::numeric::{ParamId, ParamStore, Tape, Var};
use crate::text::{tokenize, KeywordId, KeywordSet, KeywordVocab, TokenId, Vocabulary, UNK};

/// Per-region `tanh(x·W + b)`, optionally refined by a residual two-layer MLP.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    proj: Linear,
    refiner: Option<FeedForward>,
    input_dim: usize,
}

impl ImageEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        refine: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let proj = Linear::new(store, &format!("{name}.proj"), input_dim, hidden, rng)?;
        let refiner = if refine {
            Some(FeedForward::new(
                store,
                &format!("{name}.refine"),
                hidden,
                hidden,
                rng,
            )?)
        } else {
            None
        };
        Ok(ImageEncoder {
            proj,
            refiner,
            input_dim,
        })
    }

    pub fn projection(&self) -> &Linear {
        &self.proj
    }

    /// `features: [R×D]` → `[R×H]`.
    pub fn forward(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let d = tape.value(features).cols();
        if d != self.input_dim {
            return Err(Error::shape(
                "encode_image",
                format!("region dim {d}, encoder expects {}", self.input_dim),
            ));
        }
        let h = self.proj.forward(tape, features)?;
        let h = tape.tanh(h)?;
        match &self.refiner {
            Some(mlp) => {
                let r = mlp.forward(tape, h)?;
                tape.add(h, r)
            }
            None => Ok(h),
        }
    }
}

/// Static embedding per keyword. Rows `0..n` are labels, row `n` the UNK
/// keyword and row `n+1` the learned NULL keyword used for empty sets.
#[derive(Debug, Clone)]
pub struct KeywordBagEncoder {
    pub table: ParamId,
    num_labels: usize,
}

impl KeywordBagEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        num_labels: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(KeywordBagEncoder {
            table: store.xavier(format!("{name}.table"), num_labels + 2, hidden, rng)?,
            num_labels,
        })
    }

    pub fn null_row(&self) -> usize {
        self.num_labels + 1
    }

    fn check(&self, ids: &[KeywordId]) -> Result<()> {
        for id in ids {
            if id.0 > self.num_labels {
                return Err(Error::OutOfRange {
                    what: "keyword vocabulary",
                    index: id.0,
                    size: self.num_labels + 1,
                });
            }
        }
        Ok(())
    }

    /// Rows for keywords in the given order; the NULL row if `ids` is empty.
    pub fn forward_ordered(&self, tape: &mut Tape, ids: &[KeywordId]) -> Result<Var> {
        self.check(ids)?;
        let table = tape.param(self.table);
        if ids.is_empty() {
            return tape.embedding(table, &[self.null_row()]);
        }
        let rows: Vec<usize> = ids.iter().map(|k| k.0).collect();
        tape.embedding(table, &rows)
    }

    /// `[K×H]` in canonical (sorted-id) order.
    pub fn forward(&self, tape: &mut Tape, kw: &KeywordSet) -> Result<Var> {
        self.forward_ordered(tape, kw.ids())
    }
}

/// Context-dependent keyword vectors: every keyword's words go through a
/// shared transformer encoder with full self-attention over the whole
/// multi-keyword token sequence. Word positions are encoded within a
/// keyword only, so the keyword order carries no signal. Each keyword's
/// output is the mean over its word positions, optionally reinforced by
/// adding the keyword's static bag embedding.
#[derive(Debug, Clone)]
pub struct ContextualKeywordEncoder {
    bag: KeywordBagEncoder,
    word_table: ParamId,
    position_table: ParamId,
    layers: Vec<EncoderLayer>,
    surface_tokens: Vec<Vec<TokenId>>,
    reinforce: bool,
    dropout: f64,
    prefix: String,
}

/// Word vocabulary over keyword surface strings.
pub fn keyword_word_vocab(kw_vocab: &KeywordVocab) -> Vocabulary {
    let corpus: Vec<Vec<String>> = kw_vocab.labels().iter().map(|l| tokenize(l)).collect();
    Vocabulary::build(&corpus, 1).expect("min_count 1")
}

pub struct ContextualSettings {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub max_words: usize,
    pub reinforce: bool,
    pub dropout: f64,
}

impl ContextualKeywordEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kw_vocab: &KeywordVocab,
        settings: &ContextualSettings,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let h = settings.hidden;
        let words = keyword_word_vocab(kw_vocab);
        let bag =
            KeywordBagEncoder::new(store, &format!("{name}.bag"), kw_vocab.num_labels(), h, rng)?;
        let word_table = store.xavier(format!("{name}.words"), words.len(), h, rng)?;
        let position_table =
            store.xavier(format!("{name}.positions"), settings.max_words, h, rng)?;
        let layers = (0..settings.layers)
            .map(|l| {
                EncoderLayer::new(
                    store,
                    &format!("{name}.layer{l}"),
                    h,
                    settings.heads,
                    settings.ffn_dim,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut surface_tokens: Vec<Vec<TokenId>> = kw_vocab
            .labels()
            .iter()
            .map(|l| {
                let mut ids: Vec<TokenId> = tokenize(l).iter().map(|w| words.id(w)).collect();
                ids.truncate(settings.max_words);
                if ids.is_empty() {
                    ids.push(UNK);
                }
                ids
            })
            .collect();
        // The UNK keyword reads as the UNK word.
        surface_tokens.push(vec![UNK]);
        Ok(ContextualKeywordEncoder {
            bag,
            word_table,
            position_table,
            layers,
            surface_tokens,
            reinforce: settings.reinforce,
            dropout: settings.dropout,
            prefix: name.to_string(),
        })
    }

    pub fn bag(&self) -> &KeywordBagEncoder {
        &self.bag
    }

    /// Parameters of the contextual path, excluding the bag table.
    pub fn contextual_params(&self, store: &ParamStore) -> Vec<ParamId> {
        let own = format!("{}.", self.prefix);
        let bag = format!("{}.bag.", self.prefix);
        store
            .ids()
            .filter(|&id| {
                let n = store.name(id);
                n.starts_with(&own) && !n.starts_with(&bag)
            })
            .collect()
    }

    /// Per-keyword vectors in the order given.
    pub fn forward_ordered(&self, tape: &mut Tape, ids: &[KeywordId]) -> Result<Var> {
        if ids.is_empty() {
            return self.bag.forward_ordered(tape, ids);
        }
        let mut words = Vec::new();
        let mut positions = Vec::new();
        let mut spans = Vec::with_capacity(ids.len());
        for id in ids {
            let toks = self
                .surface_tokens
                .get(id.0)
                .ok_or_else(|| Error::Invalid(format!("keyword {} has no surface string", id.0)))?;
            spans.push((words.len(), toks.len()));
            words.extend_from_slice(toks);
            positions.extend(0..toks.len());
        }
        let wt = tape.param(self.word_table);
        let pt = tape.param(self.position_table);
        let w = tape.embedding(wt, &words)?;
        let p = tape.embedding(pt, &positions)?;
        let mut x = tape.add(w, p)?;
        x = tape.dropout(x, self.dropout)?;
        for layer in &self.layers {
            x = layer.forward(tape, x, self.dropout)?;
        }
        let mut pooled = Vec::with_capacity(spans.len());
        for (start, len) in spans {
            let span = tape.slice_rows(x, start, len)?;
            pooled.push(tape.mean_rows(span)?);
        }
        let pooled = tape.concat_rows(&pooled)?;
        if self.reinforce {
            let bag = self.bag.forward_ordered(tape, ids)?;
            tape.add(pooled, bag)
        } else {
            Ok(pooled)
        }
    }

    pub fn forward(&self, tape: &mut Tape, kw: &KeywordSet) -> Result<Var> {
        self.forward_ordered(tape, kw.ids())
    }
}

#[derive(Debug, Clone)]
pub enum KeywordEncoder {
    Bag(KeywordBagEncoder),
    Contextual(ContextualKeywordEncoder),
}

impl KeywordEncoder {
    pub fn forward(&self, tape: &mut Tape, kw: &KeywordSet) -> Result<Var> {
        self.forward_ordered(tape, kw.ids())
    }

    /// Bypasses canonical ordering; used to probe order invariance.
    pub fn forward_ordered(&self, tape: &mut Tape, ids: &[KeywordId]) -> Result<Var> {
        match self {
            KeywordEncoder::Bag(b) => b.forward_ordered(tape, ids),
            KeywordEncoder::Contextual(c) => c.forward_ordered(tape, ids),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{seeded_rng, Tensor};

    fn kw_vocab() -> KeywordVocab {
        KeywordVocab::from_labels(
            ["macular edema", "drusen", "retinal hemorrhage", "diabetes"]
                .iter()
                .map(|s| s.to_string()),
        )
        .unwrap()
    }

    #[test]
    fn zero_features_give_identical_rows() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(1, 0);
        let enc = ImageEncoder::new(&mut store, "img", 6, 4, false, &mut rng).unwrap();
        store
            .get_mut(enc.projection().bias)
            .data_mut()
            .copy_from_slice(&[0.1, -0.3, 0.7, 2.0]);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::zeros(&[3, 6]));
        let y = enc.forward(&mut tape, x).unwrap();
        let v = tape.value(y);
        for r in 0..3 {
            for (a, b) in v.row(r).iter().zip([0.1f64, -0.3, 0.7, 2.0]) {
                assert_eq!(*a, b.tanh());
            }
        }
    }

    #[test]
    fn image_encoder_rejects_wrong_width() {
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(&mut store, "img", 6, 4, true, &mut seeded_rng(1, 0)).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::zeros(&[3, 5]));
        assert!(enc.forward(&mut tape, x).is_err());
    }

    #[test]
    fn bag_lookup_empty_and_order() {
        let mut store = ParamStore::new();
        let bag = KeywordBagEncoder::new(&mut store, "kw", 4, 3, &mut seeded_rng(2, 0)).unwrap();
        let table = store.get(bag.table).clone();
        let mut tape = Tape::new(&store);
        let one = bag
            .forward(&mut tape, &KeywordSet::new([KeywordId(2)]))
            .unwrap();
        assert_eq!(tape.value(one).data(), table.row(2));
        let empty = bag.forward(&mut tape, &KeywordSet::empty()).unwrap();
        assert_eq!(tape.value(empty).data(), table.row(5));
        let a = bag
            .forward(&mut tape, &KeywordSet::new([KeywordId(1), KeywordId(3)]))
            .unwrap();
        let b = bag
            .forward(&mut tape, &KeywordSet::new([KeywordId(3), KeywordId(1)]))
            .unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        assert!(bag.forward_ordered(&mut tape, &[KeywordId(9)]).is_err());
    }

    fn contextual(reinforce: bool) -> (ParamStore, ContextualKeywordEncoder) {
        let mut store = ParamStore::new();
        let settings = ContextualSettings {
            hidden: 8,
            heads: 2,
            layers: 2,
            ffn_dim: 16,
            max_words: 4,
            reinforce,
            dropout: 0.0,
        };
        let enc = ContextualKeywordEncoder::new(
            &mut store,
            "ctx",
            &kw_vocab(),
            &settings,
            &mut seeded_rng(3, 0),
        )
        .unwrap();
        (store, enc)
    }

    #[test]
    fn zeroed_contextual_path_reduces_to_bag() {
        let (mut store, enc) = contextual(true);
        let ids = enc.contextual_params(&store);
        crate::nn::zero_params(&mut store, ids);
        let bag_row = store.get(enc.bag().table).row(1).to_vec();
        let mut tape = Tape::new(&store);
        let y = enc
            .forward(&mut tape, &KeywordSet::new([KeywordId(1)]))
            .unwrap();
        assert_eq!(tape.value(y).data(), bag_row.as_slice());
    }

    #[test]
    fn contextual_vectors_ignore_keyword_order() {
        let (store, enc) = contextual(true);
        let order = [KeywordId(0), KeywordId(2), KeywordId(3), KeywordId(4)];
        let perm = [KeywordId(3), KeywordId(0), KeywordId(4), KeywordId(2)];
        let mut tape = Tape::new(&store);
        let a = enc.forward_ordered(&mut tape, &order).unwrap();
        let b = enc.forward_ordered(&mut tape, &perm).unwrap();
        let (a, b) = (tape.value(a).clone(), tape.value(b).clone());
        for (i, id) in order.iter().enumerate() {
            let j = perm.iter().position(|p| p == id).unwrap();
            for (x, y) in a.row(i).iter().zip(b.row(j)) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn contextual_vectors_depend_on_other_keywords() {
        let (store, enc) = contextual(false);
        let mut tape = Tape::new(&store);
        let a = enc
            .forward_ordered(&mut tape, &[KeywordId(0), KeywordId(1)])
            .unwrap();
        let b = enc
            .forward_ordered(&mut tape, &[KeywordId(0), KeywordId(2)])
            .unwrap();
        assert_ne!(tape.value(a).row(0), tape.value(b).row(0));
    }

    #[test]
    fn missing_surface_string_is_an_error() {
        let (store, enc) = contextual(true);
        let mut tape = Tape::new(&store);
        assert!(enc.forward_ordered(&mut tape, &[KeywordId(7)]).is_err());
    }
}
