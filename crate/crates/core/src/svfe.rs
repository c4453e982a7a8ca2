//! Semantic-visual feature enhancement: cross-attention exchange between
//! the semantic rows, the point features, and the per-point image features.
//!
//! Four decoder blocks carry the four directions of exchange. The semantic
//! stream is enhanced by attending to points and then to image evidence (or
//! the other way around, as a configured variant); the two visual streams
//! are each enhanced by attending to the *original* semantic rows. A
//! self-attention-only variant reuses the same four blocks with each stream
//! attending to itself, keeping the parameter count identical.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{self_attention_block, td, ParamSet, TdParams};
use crate::tensor::{Precision, Tensor};

/// Which memory the semantic stream attends to first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SvfeOrder {
    PointsFirst,
    ImageFirst,
}

/// Cross-attention exchange, or per-stream self-attention at the same
/// parameter scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SvfeVariant {
    CrossAttention,
    SelfAttentionOnly,
}

#[derive(Clone, Debug)]
pub struct SvfeParams {
    pub td_sem_from_points: TdParams,
    pub td_sem_from_image: TdParams,
    pub td_points_from_sem: TdParams,
    pub td_image_from_sem: TdParams,
    pub order: SvfeOrder,
    pub variant: SvfeVariant,
}

impl SvfeParams {
    pub fn init(
        d: usize,
        heads: usize,
        mlp_hidden: usize,
        order: SvfeOrder,
        variant: SvfeVariant,
        rng: &mut ChaCha8Rng,
        p: Precision,
    ) -> Self {
        SvfeParams {
            td_sem_from_points: TdParams::init(d, heads, mlp_hidden, rng, p),
            td_sem_from_image: TdParams::init(d, heads, mlp_hidden, rng, p),
            td_points_from_sem: TdParams::init(d, heads, mlp_hidden, rng, p),
            td_image_from_sem: TdParams::init(d, heads, mlp_hidden, rng, p),
            order,
            variant,
        }
    }
}

impl ParamSet for SvfeParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.td_sem_from_points.visit(&format!("{prefix}.sem_from_points"), f);
        self.td_sem_from_image.visit(&format!("{prefix}.sem_from_image"), f);
        self.td_points_from_sem.visit(&format!("{prefix}.points_from_sem"), f);
        self.td_image_from_sem.visit(&format!("{prefix}.image_from_sem"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.td_sem_from_points
            .visit_mut(&format!("{prefix}.sem_from_points"), f);
        self.td_sem_from_image
            .visit_mut(&format!("{prefix}.sem_from_image"), f);
        self.td_points_from_sem
            .visit_mut(&format!("{prefix}.points_from_sem"), f);
        self.td_image_from_sem
            .visit_mut(&format!("{prefix}.image_from_sem"), f);
    }
}

fn require_rows(op: &'static str, t: &Tensor) -> Result<()> {
    if t.shape()[0] == 0 {
        return Err(Error::EmptyInput { op });
    }
    Ok(())
}

/// Enhances the semantic rows by attending to point memory and image
/// memory in the configured order: `F_es = TD2(TD1(F_s, M1, M1), M2, M2)`.
pub fn enhance_semantic(
    p: &SvfeParams,
    f_s: &Tensor,
    f_l: &Tensor,
    f_i_pts: &Tensor,
) -> Result<Tensor> {
    require_rows("enhance_semantic", f_l)?;
    require_rows("enhance_semantic", f_i_pts)?;
    match p.order {
        SvfeOrder::PointsFirst => {
            let mid = td(&p.td_sem_from_points, f_s, f_l, f_l)?;
            td(&p.td_sem_from_image, &mid, f_i_pts, f_i_pts)
        }
        SvfeOrder::ImageFirst => {
            let mid = td(&p.td_sem_from_image, f_s, f_i_pts, f_i_pts)?;
            td(&p.td_sem_from_points, &mid, f_l, f_l)
        }
    }
}

/// `F_el = TD(F_l, F_s, F_s)`: every point queries the semantic rows.
pub fn enhance_points(p: &SvfeParams, f_l: &Tensor, f_s: &Tensor) -> Result<Tensor> {
    td(&p.td_points_from_sem, f_l, f_s, f_s)
}

/// `F_ei = TD(F_i_pts, F_s, F_s)`: gathered image features query the
/// semantic rows. Rows for points without image evidence are computed from
/// the zero feature; masking happens downstream in the fusion stage.
pub fn enhance_image_points(p: &SvfeParams, f_i_pts: &Tensor, f_s: &Tensor) -> Result<Tensor> {
    td(&p.td_image_from_sem, f_i_pts, f_s, f_s)
}

/// Self-attention-only wiring: each stream attends to itself through the
/// blocks that would otherwise implement the exchange, so parameter counts
/// match the cross-attention configuration exactly. The semantic stream
/// passes through both of its blocks.
pub fn svfe_self_attention_variant(
    p: &SvfeParams,
    f_s: &Tensor,
    f_l: &Tensor,
    f_i_pts: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let mid = self_attention_block(&p.td_sem_from_points, f_s)?;
    let f_es = self_attention_block(&p.td_sem_from_image, &mid)?;
    let f_el = self_attention_block(&p.td_points_from_sem, f_l)?;
    let f_ei = self_attention_block(&p.td_image_from_sem, f_i_pts)?;
    Ok((f_es, f_el, f_ei))
}

/// Runs whichever variant is configured and returns `(F_es, F_el, F_ei)`.
pub fn svfe_forward(
    p: &SvfeParams,
    f_s: &Tensor,
    f_l: &Tensor,
    f_i_pts: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    match p.variant {
        SvfeVariant::CrossAttention => {
            let f_es = enhance_semantic(p, f_s, f_l, f_i_pts)?;
            let f_el = enhance_points(p, f_l, f_s)?;
            let f_ei = enhance_image_points(p, f_i_pts, f_s)?;
            Ok((f_es, f_el, f_ei))
        }
        SvfeVariant::SelfAttentionOnly => svfe_self_attention_variant(p, f_s, f_l, f_i_pts),
    }
}
