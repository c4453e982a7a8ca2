//! Semantic-guided fusion of the two visual streams.
//!
//! Per-point gates are read out of the semantic memory with multi-head
//! attention (visual queries over semantic keys, so the gates are point-
//! indexed and can multiply the features elementwise). Each modality's
//! gated features become competing logits on a two-way softmax; the
//! normalized selection weights re-scale the raw features, and an MLP
//! compresses their concatenation back to the feature width.
//!
//! Points with no image evidence carry an additive -1e4 bias on their
//! image-modality logits, so the softmax routes them to the point branch
//! in the limit while every gradient stays finite. The bias rides in
//! [`Gates`] rather than being folded into `w_2d`, because the logit is
//! `w_2d * F_ei` and scaling `w_2d` alone could flip the intended routing
//! wherever `F_ei` is negative.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{mha, self_attention_block, MhaParams, MlpParams, ParamSet, TdParams};
use crate::tensor::{concat, stack, Precision, Tensor};

/// Additive pre-softmax penalty for image-modality logits on points
/// without image evidence.
pub const IMAGE_MASK_BIAS: f64 = -1e4;

/// How the two visual streams are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SgvfVariant {
    /// Gated modality-softmax fusion.
    Sgvf,
    /// Plain concatenation plus MLP; no gates, no semantics.
    ConcatBaseline,
    /// Points query image features with cross attention; no semantics.
    CrossAttentionOnly,
    /// Gated fusion followed by one self-attention block.
    SgvfPlusSelfAttention,
}

#[derive(Clone, Debug)]
pub struct SgvfParams {
    pub gate_mha_3d: MhaParams,
    pub gate_mha_2d: MhaParams,
    /// 2d -> 128 -> 128 compression of the concatenated weighted streams.
    pub fuse_mlp: MlpParams,
    /// Used only by the self-attention variant; always allocated so every
    /// variant shares one checkpoint layout.
    pub post_self_attn: TdParams,
    pub variant: SgvfVariant,
}

impl SgvfParams {
    pub fn init(
        d: usize,
        heads: usize,
        fuse_hidden: usize,
        td_mlp_hidden: usize,
        variant: SgvfVariant,
        rng: &mut ChaCha8Rng,
        p: Precision,
    ) -> Self {
        SgvfParams {
            gate_mha_3d: MhaParams::init(d, heads, rng, p),
            gate_mha_2d: MhaParams::init(d, heads, rng, p),
            fuse_mlp: MlpParams::init(2 * d, fuse_hidden, d, rng, p),
            post_self_attn: TdParams::init(d, heads, td_mlp_hidden, rng, p),
            variant,
        }
    }

    fn width(&self) -> usize {
        self.gate_mha_3d.width()
    }
}

impl ParamSet for SgvfParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.gate_mha_3d.visit(&format!("{prefix}.gate_3d"), f);
        self.gate_mha_2d.visit(&format!("{prefix}.gate_2d"), f);
        self.fuse_mlp.visit(&format!("{prefix}.fuse"), f);
        self.post_self_attn.visit(&format!("{prefix}.post"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.gate_mha_3d.visit_mut(&format!("{prefix}.gate_3d"), f);
        self.gate_mha_2d.visit_mut(&format!("{prefix}.gate_2d"), f);
        self.fuse_mlp.visit_mut(&format!("{prefix}.fuse"), f);
        self.post_self_attn.visit_mut(&format!("{prefix}.post"), f);
    }
}

/// Point-indexed modality gates plus the masking bias for the image branch.
pub struct Gates {
    pub w_3d: Tensor,
    pub w_2d: Tensor,
    /// `[T, d]`, zero on rows with image evidence, [`IMAGE_MASK_BIAS`]
    /// elsewhere. Added to the image-modality logits before the softmax.
    pub image_logit_bias: Tensor,
}

/// Reads per-point significance weights out of the semantic memory:
/// `w_3d = MHA(q=F_el, k=v=F_es)`, `w_2d = MHA(q=F_ei, k=v=F_es)`.
pub fn compute_gates(
    p: &SgvfParams,
    f_es: &Tensor,
    f_el: &Tensor,
    f_ei: &Tensor,
    valid: &[bool],
) -> Result<Gates> {
    if f_es.shape()[0] == 0 {
        return Err(Error::EmptyInput { op: "compute_gates" });
    }
    let t = f_el.shape()[0];
    if valid.len() != t {
        return Err(Error::InvalidArgument {
            op: "compute_gates",
            what: format!("validity mask has {} entries for {t} points", valid.len()),
        });
    }
    let d = p.width();
    let w_3d = mha(&p.gate_mha_3d, f_el, f_es, f_es)?.out;
    let w_2d = mha(&p.gate_mha_2d, f_ei, f_es, f_es)?.out;
    let mut bias = vec![0.0; t * d];
    for (i, &ok) in valid.iter().enumerate() {
        if !ok {
            bias[i * d..(i + 1) * d].fill(IMAGE_MASK_BIAS);
        }
    }
    let image_logit_bias = Tensor::from_vec_p(&[t, d], bias, f_el.precision())?;
    Ok(Gates {
        w_3d,
        w_2d,
        image_logit_bias,
    })
}

/// Two-way softmax over the gated logits: returns `(A_3, A_2)` with
/// `A_3 + A_2 = 1` per point and channel.
pub fn modality_weights(gates: &Gates, f_el: &Tensor, f_ei: &Tensor) -> Result<(Tensor, Tensor)> {
    let m3 = gates.w_3d.mul(f_el)?;
    let m2 = gates.w_2d.mul(f_ei)?.add(&gates.image_logit_bias)?;
    let logits = stack(&[&m3, &m2], 0)?;
    let a = logits.softmax(0)?;
    let shape = f_el.shape().to_vec();
    let a3 = a.narrow(0, 0, 1)?.reshape(&shape)?;
    let a2 = a.narrow(0, 1, 1)?.reshape(&shape)?;
    Ok((a3, a2))
}

/// `F_fusion = MLP(concat(A_3 * F_el, A_2 * F_ei))`: the selection weights
/// re-scale the raw features so magnitudes survive the normalization.
pub fn fuse(p: &SgvfParams, gates: &Gates, f_el: &Tensor, f_ei: &Tensor) -> Result<Tensor> {
    let (a3, a2) = modality_weights(gates, f_el, f_ei)?;
    let weighted_3d = a3.mul(f_el)?;
    let weighted_2d = a2.mul(f_ei)?;
    p.fuse_mlp.forward(&concat(&[&weighted_3d, &weighted_2d], 1)?)
}

/// Table-style baseline: compress `concat(F_el, F_ei)` with the MLP,
/// no gating and no semantic input.
pub fn concat_baseline(p: &SgvfParams, f_el: &Tensor, f_ei: &Tensor) -> Result<Tensor> {
    p.fuse_mlp.forward(&concat(&[f_el, f_ei], 1)?)
}

/// Points query image features directly (no semantics): cross attention
/// with q = F_el and k = v = F_ei, a residual back onto F_el, then the
/// fuse MLP over the concatenation with F_ei.
pub fn cross_attention_variant(p: &SgvfParams, f_el: &Tensor, f_ei: &Tensor) -> Result<Tensor> {
    let attended = mha(&p.gate_mha_3d, f_el, f_ei, f_ei)?.out;
    let mixed = attended.add(f_el)?;
    p.fuse_mlp.forward(&concat(&[&mixed, f_ei], 1)?)
}

/// Gated fusion followed by one self-attention block over the fused rows.
pub fn sgvf_plus_self_attention_variant(
    p: &SgvfParams,
    gates: &Gates,
    f_el: &Tensor,
    f_ei: &Tensor,
) -> Result<Tensor> {
    let fused = fuse(p, gates, f_el, f_ei)?;
    self_attention_block(&p.post_self_attn, &fused)
}

/// Runs whichever fusion variant is configured.
pub fn sgvf_forward(
    p: &SgvfParams,
    f_es: &Tensor,
    f_el: &Tensor,
    f_ei: &Tensor,
    valid: &[bool],
) -> Result<Tensor> {
    match p.variant {
        SgvfVariant::Sgvf => {
            let gates = compute_gates(p, f_es, f_el, f_ei, valid)?;
            fuse(p, &gates, f_el, f_ei)
        }
        SgvfVariant::ConcatBaseline => concat_baseline(p, f_el, f_ei),
        SgvfVariant::CrossAttentionOnly => cross_attention_variant(p, f_el, f_ei),
        SgvfVariant::SgvfPlusSelfAttention => {
            let gates = compute_gates(p, f_es, f_el, f_ei, valid)?;
            sgvf_plus_self_attention_variant(p, &gates, f_el, f_ei)
        }
    }
}
