//! The full report generator: image encoder, keyword encoder, fuser and
//! decoder sharing one parameter store.

use rand_chacha::ChaCha8Rng;

use super::config::{KeywordEncoderKind, TrainConfig};
use crate::encoders::{
    ContextualKeywordEncoder, ContextualSettings, ImageEncoder, KeywordBagEncoder, KeywordEncoder,
};
use crate::error::Result;
use crate::fusion::{FusedContext, FusedVars, Fuser, FusionMode, TransFuser};
use crate::generator::{decode, DecodeResult, Decoder, DecoderSettings, Search};
use crate::numeric::{ParamStore, Tape, Tensor};
use crate::text::{KeywordId, KeywordSet, KeywordVocab};

#[derive(Debug, Clone)]
pub struct ReportModel {
    pub image_encoder: ImageEncoder,
    pub keyword_encoder: KeywordEncoder,
    pub fuser: Fuser,
    pub decoder: Decoder,
}

impl ReportModel {
    /// Registers every parameter in `store`. Registration order is fixed, so
    /// a store built from the same config and seed is laid out identically.
    pub fn build(
        cfg: &TrainConfig,
        vocab_size: usize,
        kw_vocab: &KeywordVocab,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let image_encoder = ImageEncoder::new(
            store,
            "image",
            cfg.image_config().region_dim(),
            h,
            cfg.image_refine,
            rng,
        )?;
        let keyword_encoder = match cfg.keyword_encoder {
            KeywordEncoderKind::Bag => KeywordEncoder::Bag(KeywordBagEncoder::new(
                store,
                "keywords",
                kw_vocab.num_labels(),
                h,
                rng,
            )?),
            KeywordEncoderKind::Contextual => {
                KeywordEncoder::Contextual(ContextualKeywordEncoder::new(
                    store,
                    "keywords",
                    kw_vocab,
                    &ContextualSettings {
                        hidden: h,
                        heads: cfg.heads,
                        layers: cfg.encoder_layers,
                        ffn_dim: cfg.ffn_dim,
                        max_words: cfg.max_keyword_words,
                        reinforce: cfg.reinforce,
                        dropout: cfg.dropout,
                    },
                    rng,
                )?)
            }
        };
        let fuser = match cfg.fusion {
            FusionMode::Average => Fuser::Average,
            FusionMode::TransFuser => {
                Fuser::TransFuser(TransFuser::new(store, "fuser", h, cfg.fuser_heads, rng)?)
            }
        };
        let decoder = Decoder::new(
            store,
            "decoder",
            &DecoderSettings {
                kind: cfg.decoder,
                vocab_size,
                hidden: h,
                heads: cfg.heads,
                layers: cfg.decoder_layers,
                ffn_dim: cfg.ffn_dim,
                max_len: cfg.max_len,
            },
            rng,
        )?;
        Ok(ReportModel {
            image_encoder,
            keyword_encoder,
            fuser,
            decoder,
        })
    }

    /// Region features `[R×D]` plus a keyword set → fused representation.
    pub fn fuse(&self, tape: &mut Tape, features: &Tensor, kw: &KeywordSet) -> Result<FusedVars> {
        let x = tape.constant(features.clone());
        let img = self.image_encoder.forward(tape, x)?;
        let k = self.keyword_encoder.forward(tape, kw)?;
        self.fuser.forward(tape, img, k)
    }

    /// Like [`fuse`](Self::fuse) with the keywords taken in the given order.
    pub fn fuse_ordered(
        &self,
        tape: &mut Tape,
        features: &Tensor,
        ids: &[KeywordId],
    ) -> Result<FusedVars> {
        let x = tape.constant(features.clone());
        let img = self.image_encoder.forward(tape, x)?;
        let k = self.keyword_encoder.forward_ordered(tape, ids)?;
        self.fuser.forward(tape, img, k)
    }

    pub fn context(
        &self,
        store: &ParamStore,
        features: &Tensor,
        kw: &KeywordSet,
    ) -> Result<FusedContext> {
        let mut tape = Tape::new(store);
        let v = self.fuse(&mut tape, features, kw)?;
        Ok(FusedContext::from_vars(&tape, v))
    }

    pub fn generate(
        &self,
        store: &ParamStore,
        features: &Tensor,
        kw: &KeywordSet,
        search: Search,
        max_len: usize,
    ) -> Result<(DecodeResult, FusedContext)> {
        let ctx = self.context(store, features, kw)?;
        let result = decode(&self.decoder, store, &ctx, search, max_len)?;
        Ok((result, ctx))
    }
}
