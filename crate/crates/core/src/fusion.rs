//! Merging image-region rows with keyword rows.
//!
//! Both fusers produce a global vector (the decoder's initial context) and
//! a memory of `R + K` rows, image rows first, that the decoder attends to
//! at every step.

use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, MultiHeadAttention};
use crate::numeric::{ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Average,
    TransFuser,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(FusionMode::Average),
            "transfuser" => Ok(FusionMode::TransFuser),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Average => "average",
            FusionMode::TransFuser => "transfuser",
        })
    }
}

/// Attention matrices recorded while fusing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusionTrace {
    /// `[K×R]`: keyword queries over image regions.
    pub keyword_to_image: Option<Tensor>,
    /// `[R×K]`: image queries over keywords.
    pub image_to_keyword: Option<Tensor>,
}

impl FusionTrace {
    pub fn matrices(&self) -> impl Iterator<Item = &Tensor> {
        self.keyword_to_image
            .iter()
            .chain(self.image_to_keyword.iter())
    }
}

/// Fused representation on a tape.
pub struct FusedVars {
    pub global: Var,
    pub memory: Var,
    pub image_rows: usize,
    pub trace: FusionTrace,
}

/// Detached fused representation.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedContext {
    /// `[1×H]`
    pub global: Tensor,
    /// `[(R+K)×H]`, image rows first.
    pub memory: Tensor,
    pub image_rows: usize,
    pub trace: FusionTrace,
}

impl FusedContext {
    pub fn from_vars(tape: &Tape, v: FusedVars) -> Self {
        FusedContext {
            global: tape.value(v.global).clone(),
            memory: tape.value(v.memory).clone(),
            image_rows: v.image_rows,
            trace: v.trace,
        }
    }

    pub fn keyword_rows(&self) -> usize {
        self.memory.rows() - self.image_rows
    }
}

fn check_widths(tape: &Tape, img: Var, kw: Var) -> Result<()> {
    let (hi, hk) = (tape.value(img).cols(), tape.value(kw).cols());
    if hi != hk {
        return Err(Error::shape(
            "fuse",
            format!("image width {hi} vs keyword width {hk}"),
        ));
    }
    Ok(())
}

/// `global = ½(mean(img) + mean(kw))`, memory is the row concatenation.
pub fn average_fuse(tape: &mut Tape, img: Var, kw: Var) -> Result<FusedVars> {
    check_widths(tape, img, kw)?;
    let mi = tape.mean_rows(img)?;
    let mk = tape.mean_rows(kw)?;
    let s = tape.add(mi, mk)?;
    let global = tape.scale(s, 0.5)?;
    let memory = tape.concat_rows(&[img, kw])?;
    Ok(FusedVars {
        global,
        memory,
        image_rows: tape.value(img).rows(),
        trace: FusionTrace::default(),
    })
}

/// Non-local cross-modal fuser: keywords attend to image regions and image
/// regions attend to keywords, each followed by a residual connection and
/// layer norm. The global vector is a learned-gate convex combination of
/// the two refined streams' means.
#[derive(Debug, Clone)]
pub struct TransFuser {
    pub keyword_to_image: MultiHeadAttention,
    keyword_norm: LayerNorm,
    pub image_to_keyword: MultiHeadAttention,
    image_norm: LayerNorm,
    gate_image: Linear,
    gate_keyword: Linear,
}

impl TransFuser {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(TransFuser {
            keyword_to_image: MultiHeadAttention::new(
                store,
                &format!("{name}.k2i"),
                hidden,
                heads,
                rng,
            )?,
            keyword_norm: LayerNorm::new(store, &format!("{name}.k2i_ln"), hidden)?,
            image_to_keyword: MultiHeadAttention::new(
                store,
                &format!("{name}.i2k"),
                hidden,
                heads,
                rng,
            )?,
            image_norm: LayerNorm::new(store, &format!("{name}.i2k_ln"), hidden)?,
            gate_image: Linear::new(store, &format!("{name}.gate_img"), hidden, 1, rng)?,
            gate_keyword: Linear::new(store, &format!("{name}.gate_kw"), hidden, 1, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, img: Var, kw: Var) -> Result<FusedVars> {
        check_widths(tape, img, kw)?;
        let k2i = self.keyword_to_image.forward(tape, kw, img, None)?;
        let kw_res = tape.add(kw, k2i.output)?;
        let kw_ref = self.keyword_norm.forward(tape, kw_res)?;

        let i2k = self.image_to_keyword.forward(tape, img, kw, None)?;
        let img_res = tape.add(img, i2k.output)?;
        let img_ref = self.image_norm.forward(tape, img_res)?;

        let mi = tape.mean_rows(img_ref)?;
        let mk = tape.mean_rows(kw_ref)?;
        let gi = self.gate_image.forward(tape, mi)?;
        let gk = self.gate_keyword.forward(tape, mk)?;
        let logit = tape.add(gi, gk)?;
        let g = tape.sigmoid(logit)?; // [1×1]
        let one_minus = tape.affine(g, -1.0, 1.0)?;
        let a = tape.matmul(g, mi)?;
        let b = tape.matmul(one_minus, mk)?;
        let global = tape.add(a, b)?;

        let memory = tape.concat_rows(&[img_ref, kw_ref])?;
        Ok(FusedVars {
            global,
            memory,
            image_rows: tape.value(img).rows(),
            trace: FusionTrace {
                keyword_to_image: Some(k2i.weights),
                image_to_keyword: Some(i2k.weights),
            },
        })
    }
}

#[derive(Debug, Clone)]
pub enum Fuser {
    Average,
    TransFuser(TransFuser),
}

impl Fuser {
    pub fn mode(&self) -> FusionMode {
        match self {
            Fuser::Average => FusionMode::Average,
            Fuser::TransFuser(_) => FusionMode::TransFuser,
        }
    }

    pub fn forward(&self, tape: &mut Tape, img: Var, kw: Var) -> Result<FusedVars> {
        match self {
            Fuser::Average => average_fuse(tape, img, kw),
            Fuser::TransFuser(t) => t.forward(tape, img, kw),
        }
    }
}

/// Strategy dispatch by mode name.
pub fn fuse(
    tape: &mut Tape,
    img: Var,
    kw: Var,
    mode: &str,
    fuser: Option<&TransFuser>,
) -> Result<FusedVars> {
    match mode.parse::<FusionMode>()? {
        FusionMode::Average => average_fuse(tape, img, kw),
        FusionMode::TransFuser => fuser
            .ok_or_else(|| Error::Config("transfuser mode needs fuser parameters".into()))?
            .forward(tape, img, kw),
    }
}
