//! The assembled segmentation model: backbones, semantic projection,
//! enhancement, fusion, and the ablation wirings that rearrange them.

use rand_chacha::ChaCha8Rng;

use crate::backbones::{
    encode_pixel_rows, encode_points, pixel_input_rows, ImageEncoder, PointEncoder,
};
use crate::error::{Error, Result};
use crate::geometry::{build_pixel_samples, project_points, GatherMode};
use crate::nn::{MlpParams, ParamSet};
use crate::semantic_space::SemanticHead;
use crate::sgvf::{
    compute_gates, concat_baseline, cross_attention_variant, fuse,
    sgvf_plus_self_attention_variant, SgvfParams, SgvfVariant,
};
use crate::svfe::{
    enhance_image_points, enhance_points, enhance_semantic, svfe_self_attention_variant,
    SvfeOrder, SvfeParams, SvfeVariant,
};
use crate::synthscene::Scene;
use crate::tensor::{gather_image, Precision, Tensor};

/// Width and depth choices for every block. Defaults give the 128-wide
/// shared feature space used throughout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Shared feature width.
    pub d: usize,
    pub heads: usize,
    /// Hidden width of the MLP inside each attention block.
    pub td_mlp_hidden: usize,
    /// Hidden width of the fusion MLP.
    pub fuse_hidden: usize,
    pub point_hidden: usize,
    pub image_hidden: usize,
    /// Hidden width of the word-embedding projection.
    pub sem_hidden: usize,
    /// Word-embedding dimensionality.
    pub d_w: usize,
    pub attr_channels: usize,
    pub image_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 128,
            heads: 4,
            td_mlp_hidden: 256,
            fuse_hidden: 128,
            point_hidden: 64,
            image_hidden: 96,
            sem_hidden: 192,
            d_w: 600,
            attr_channels: 2,
            image_channels: 3,
        }
    }
}

/// Which wiring of the pipeline runs. Every variant uses the same
/// parameter set (unused blocks simply receive no gradient), so
/// checkpoints are interchangeable across ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    /// Cross-modal enhancement plus semantic-guided gated fusion.
    Full,
    /// Fusion replaced by the ungated concat baseline.
    NoSgvf,
    /// Enhancement bypassed entirely (identity features).
    NoSvfe,
    /// Image branch dropped: semantics enhanced from points only, fusion
    /// is a pointwise MLP over the enhanced point features.
    NoImage,
    /// Enhancement blocks attend within each stream instead of across.
    SvfeSelfAttn,
    /// Fusion by direct point-image cross attention, no semantic gate.
    SgvfCrossAttn,
    /// Gated fusion followed by one self-attention block.
    SgvfPlusSelfAttn,
}

pub const ABLATION_NAMES: [(&str, Ablation); 7] = [
    ("full", Ablation::Full),
    ("no_sgvf", Ablation::NoSgvf),
    ("no_svfe", Ablation::NoSvfe),
    ("no_image", Ablation::NoImage),
    ("svfe_self_attn", Ablation::SvfeSelfAttn),
    ("sgvf_cross_attn", Ablation::SgvfCrossAttn),
    ("sgvf_plus_self_attn", Ablation::SgvfPlusSelfAttn),
];

impl Ablation {
    pub fn as_str(&self) -> &'static str {
        ABLATION_NAMES
            .iter()
            .find(|(_, a)| a == self)
            .map(|(n, _)| *n)
            .expect("every ablation is named")
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ABLATION_NAMES
            .iter()
            .find(|(n, _)| *n == s)
            .map(|(_, a)| *a)
            .ok_or_else(|| Error::InvalidArgument {
                op: "ablation",
                what: format!(
                    "unknown ablation {s:?}; valid names: {}",
                    ABLATION_NAMES
                        .iter()
                        .map(|(n, _)| *n)
                        .collect::<Vec<_>>()
                        .join(", ")
                ),
            })
    }
}

/// Every trainable parameter of the pipeline. The canonical parameter
/// order (checkpoints, optimizer state) is the `visit` order declared
/// here.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub point_encoder: PointEncoder,
    pub image_encoder: ImageEncoder,
    pub semantic_head: SemanticHead,
    pub svfe: SvfeParams,
    pub sgvf: SgvfParams,
    /// Pointwise fusion MLP for the image-free wiring; allocated in every
    /// configuration so checkpoints share one layout.
    pub point_fuse: MlpParams,
}

impl ModelState {
    pub fn init(
        cfg: &ModelConfig,
        order: SvfeOrder,
        rng: &mut ChaCha8Rng,
        p: Precision,
    ) -> Self {
        ModelState {
            point_encoder: PointEncoder::init(cfg.attr_channels, cfg.point_hidden, cfg.d, rng, p),
            image_encoder: ImageEncoder::init(cfg.image_channels, cfg.image_hidden, cfg.d, rng, p),
            semantic_head: SemanticHead::init(cfg.d_w, cfg.sem_hidden, cfg.d, rng, p),
            svfe: SvfeParams::init(
                cfg.d,
                cfg.heads,
                cfg.td_mlp_hidden,
                order,
                SvfeVariant::CrossAttention,
                rng,
                p,
            ),
            sgvf: SgvfParams::init(
                cfg.d,
                cfg.heads,
                cfg.fuse_hidden,
                cfg.td_mlp_hidden,
                SgvfVariant::Sgvf,
                rng,
                p,
            ),
            point_fuse: MlpParams::init(cfg.d, cfg.d, cfg.d, rng, p),
        }
    }

    pub fn precision(&self) -> Precision {
        self.semantic_head.g.hidden.weight.precision()
    }

    pub fn width(&self) -> usize {
        self.semantic_head.g.out.d_out()
    }
}

impl ParamSet for ModelState {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.point_encoder.visit(&format!("{prefix}backbone.point"), f);
        self.image_encoder.visit(&format!("{prefix}backbone.image"), f);
        self.semantic_head.visit(&format!("{prefix}sem"), f);
        self.svfe.visit(&format!("{prefix}svfe"), f);
        self.sgvf.visit(&format!("{prefix}sgvf"), f);
        self.point_fuse.visit(&format!("{prefix}point_fuse"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.point_encoder.visit_mut(&format!("{prefix}backbone.point"), f);
        self.image_encoder.visit_mut(&format!("{prefix}backbone.image"), f);
        self.semantic_head.visit_mut(&format!("{prefix}sem"), f);
        self.svfe.visit_mut(&format!("{prefix}svfe"), f);
        self.sgvf.visit_mut(&format!("{prefix}sgvf"), f);
        self.point_fuse.visit_mut(&format!("{prefix}point_fuse"), f);
    }
}

/// Output of one scene forward pass.
pub struct SceneForward {
    /// Fused per-point features `[T, d]`.
    pub fusion: Tensor,
    /// Semantic class features `[C, d]` (enhanced unless bypassed).
    pub sem: Tensor,
    /// Per-point image-evidence flags (false where the projection missed).
    pub image_valid: Vec<bool>,
}

/// Per-point image features gathered through the camera, computed only on
/// the pixels any point actually reads. Identical per point to encoding
/// the full frame and gathering from it, because the encoder is pixelwise.
/// Returns zero rows (and false flags) for points outside the image.
fn gathered_image_features(
    enc: &ImageEncoder,
    scene: &Scene,
    d: usize,
    p: Precision,
) -> Result<(Tensor, Vec<bool>)> {
    let proj = project_points(&scene.points, &scene.camera)?;
    let (h, w) = (scene.image.shape()[0], scene.image.shape()[1]);
    let (samples, valid) = build_pixel_samples(&proj, h, w, GatherMode::Bilinear);

    let mut compact = vec![u32::MAX; h * w];
    let mut picked: Vec<usize> = Vec::new();
    let mut remapped = samples;
    for s in remapped.iter_mut() {
        for j in 0..s.count as usize {
            let px = s.rows[j] as usize;
            if compact[px] == u32::MAX {
                compact[px] = picked.len() as u32;
                picked.push(px);
            }
            s.rows[j] = compact[px];
        }
    }
    if picked.is_empty() {
        return Ok((Tensor::zeros_p(&[proj.len(), d], p), valid));
    }

    let rows = pixel_input_rows(enc, &scene.image)?;
    let subset = rows.gather_rows(&picked)?;
    let feats = encode_pixel_rows(enc, &subset)?;
    let cube = feats.reshape(&[picked.len(), 1, d])?;
    Ok((gather_image(&cube, remapped)?, valid))
}

/// Every stage output of the default wiring on one scene, for
/// feature-relationship exports and diagnostics.
pub struct TracedForward {
    /// Raw per-point features `[T, d]`.
    pub f_l: Tensor,
    /// Raw semantic class features `[C, d]`.
    pub f_s: Tensor,
    /// Per-point gathered image features `[T, d]` (zero where invalid).
    pub f_i_pts: Tensor,
    /// Enhanced semantic features `[C, d]`.
    pub f_es: Tensor,
    /// Enhanced point features `[T, d]`.
    pub f_el: Tensor,
    /// Enhanced image features `[T, d]`.
    pub f_ei: Tensor,
    /// Fused per-point features `[T, d]`.
    pub fusion: Tensor,
    pub image_valid: Vec<bool>,
}

/// Default wiring with every intermediate kept.
pub fn forward_scene_traced(
    model: &ModelState,
    scene: &Scene,
    embeddings: &Tensor,
) -> Result<TracedForward> {
    let p = model.precision();
    let d = model.width();
    let f_l = encode_points(&model.point_encoder, &scene.points, &scene.attrs)?;
    let f_s = model.semantic_head.forward(embeddings)?;
    let (f_i_pts, image_valid) = gathered_image_features(&model.image_encoder, scene, d, p)?;
    let f_es = enhance_semantic(&model.svfe, &f_s, &f_l, &f_i_pts)?;
    let f_el = enhance_points(&model.svfe, &f_l, &f_s)?;
    let f_ei = enhance_image_points(&model.svfe, &f_i_pts, &f_s)?;
    let gates = compute_gates(&model.sgvf, &f_es, &f_el, &f_ei, &image_valid)?;
    let fusion = fuse(&model.sgvf, &gates, &f_el, &f_ei)?;
    Ok(TracedForward {
        f_l,
        f_s,
        f_i_pts,
        f_es,
        f_el,
        f_ei,
        fusion,
        image_valid,
    })
}

/// Runs the pipeline on one scene under the requested wiring and returns
/// fused per-point features, semantic class features, and the image
/// validity mask.
pub fn forward_scene(
    model: &ModelState,
    scene: &Scene,
    embeddings: &Tensor,
    ablation: Ablation,
) -> Result<SceneForward> {
    if ablation == Ablation::Full {
        let t = forward_scene_traced(model, scene, embeddings)?;
        return Ok(SceneForward {
            fusion: t.fusion,
            sem: t.f_es,
            image_valid: t.image_valid,
        });
    }
    let p = model.precision();
    let d = model.width();
    let f_l = encode_points(&model.point_encoder, &scene.points, &scene.attrs)?;
    let f_s = model.semantic_head.forward(embeddings)?;

    if ablation == Ablation::NoImage {
        let f_es = crate::nn::td(&model.svfe.td_sem_from_points, &f_s, &f_l, &f_l)?;
        let f_el = enhance_points(&model.svfe, &f_l, &f_s)?;
        let fusion = model.point_fuse.forward(&f_el)?;
        return Ok(SceneForward {
            fusion,
            sem: f_es,
            image_valid: vec![false; scene.num_points()],
        });
    }

    let (f_i_pts, image_valid) = gathered_image_features(&model.image_encoder, scene, d, p)?;

    let (f_es, f_el, f_ei) = match ablation {
        Ablation::NoSvfe => (f_s.clone(), f_l.clone(), f_i_pts.clone()),
        Ablation::SvfeSelfAttn => svfe_self_attention_variant(&model.svfe, &f_s, &f_l, &f_i_pts)?,
        _ => {
            let f_es = enhance_semantic(&model.svfe, &f_s, &f_l, &f_i_pts)?;
            let f_el = enhance_points(&model.svfe, &f_l, &f_s)?;
            let f_ei = enhance_image_points(&model.svfe, &f_i_pts, &f_s)?;
            (f_es, f_el, f_ei)
        }
    };

    let fusion = match ablation {
        Ablation::NoSgvf => concat_baseline(&model.sgvf, &f_el, &f_ei)?,
        Ablation::SgvfCrossAttn => cross_attention_variant(&model.sgvf, &f_el, &f_ei)?,
        Ablation::SgvfPlusSelfAttn => {
            let gates = compute_gates(&model.sgvf, &f_es, &f_el, &f_ei, &image_valid)?;
            sgvf_plus_self_attention_variant(&model.sgvf, &gates, &f_el, &f_ei)?
        }
        _ => {
            let gates = compute_gates(&model.sgvf, &f_es, &f_el, &f_ei, &image_valid)?;
            fuse(&model.sgvf, &gates, &f_el, &f_ei)?
        }
    };

    Ok(SceneForward {
        fusion,
        sem: f_es,
        image_valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{loss_seen, predict, similarity_matrix};
    use crate::backbones::encode_image;
    use crate::geometry::{gather_image_features, CameraModel};
    use crate::nn::seeded_rng;
    use crate::semantic_space::synth_embeddings;
    use crate::synthscene::{desk_spec, generate_scene, SceneSpec};
    use crate::tensor::{concat, Tape};

    fn tiny_spec(seed: u64) -> SceneSpec {
        let mut spec = desk_spec(seed);
        spec.embeddings = synth_embeddings(8, 24, seed);
        spec.points_per_class = (14, 20);
        spec.pair_points_per_class = (8, 12);
        spec.image_size = (24, 24);
        spec.camera = CameraModel::with_identity_pose(21.6, 21.6, 12.0, 12.0, 24, 24).unwrap();
        spec
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d: 16,
            heads: 2,
            td_mlp_hidden: 32,
            fuse_hidden: 16,
            point_hidden: 8,
            image_hidden: 12,
            sem_hidden: 12,
            d_w: 24,
            attr_channels: 2,
            image_channels: 3,
        }
    }

    fn setup(seed: u64) -> (ModelState, crate::synthscene::Scene, Tensor) {
        let spec = tiny_spec(seed);
        let scene = generate_scene(&spec, seed).unwrap();
        let mut rng = seeded_rng(seed);
        let model = ModelState::init(
            &tiny_config(),
            SvfeOrder::PointsFirst,
            &mut rng,
            Precision::F64,
        );
        (model, scene, spec.embeddings)
    }

    #[test]
    fn ablation_names_round_trip_and_unknown_is_listed() {
        for (name, ab) in ABLATION_NAMES {
            assert_eq!(name.parse::<Ablation>().unwrap(), ab);
            assert_eq!(ab.as_str(), name);
        }
        let err = "bogus".parse::<Ablation>().unwrap_err().to_string();
        for (name, _) in ABLATION_NAMES {
            assert!(err.contains(name), "error must list {name}: {err}");
        }
    }

    #[test]
    fn every_wiring_produces_the_contracted_shapes() {
        let (model, scene, emb) = setup(3);
        let t = scene.num_points();
        let c = emb.shape()[0];
        for (_, ablation) in ABLATION_NAMES {
            let out = forward_scene(&model, &scene, &emb, ablation).unwrap();
            assert_eq!(out.fusion.shape(), &[t, 16], "{ablation}");
            assert_eq!(out.sem.shape(), &[c, 16], "{ablation}");
            assert_eq!(out.image_valid.len(), t, "{ablation}");
            assert!(out.fusion.all_finite(), "{ablation}");
            assert!(out.sem.all_finite(), "{ablation}");
        }
    }

    #[test]
    fn sparse_pixel_encoding_matches_the_dense_frame() {
        let (model, scene, _) = setup(5);
        let proj = project_points(&scene.points, &scene.camera).unwrap();
        let (sparse, valid_s) =
            gathered_image_features(&model.image_encoder, &scene, 16, Precision::F64).unwrap();
        let dense_map = encode_image(&model.image_encoder, &scene.image).unwrap();
        let (dense, valid_d) =
            gather_image_features(&dense_map, &proj, GatherMode::Bilinear).unwrap();
        assert_eq!(valid_s, valid_d);
        assert!(valid_s.iter().any(|&v| v));
        assert!(valid_s.iter().any(|&v| !v));
        let (s, d) = (sparse.values(), dense.values());
        assert_eq!(s.len(), d.len());
        for (a, b) in s.iter().zip(&d) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn fully_masked_image_branch_reduces_to_the_point_route() {
        let (model, mut scene, emb) = setup(7);
        // Slide the camera far down the optical axis so every cluster sits
        // behind the image plane and no point projects into the frame.
        let behind = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, -1.0e6],
            [0.0, 0.0, 0.0, 1.0],
        ];
        scene.camera = scene.camera.with_extrinsics(behind).unwrap();
        let out = forward_scene(&model, &scene, &emb, Ablation::Full).unwrap();
        assert!(out.image_valid.iter().all(|&v| !v));

        // Reference: the same pipeline with the image contribution removed
        // by hand after gating (A_3 = 1, A_2 = 0).
        let f_l = encode_points(&model.point_encoder, &scene.points, &scene.attrs).unwrap();
        let f_s = model.semantic_head.forward(&emb).unwrap();
        let zeros = Tensor::zeros_p(&[scene.num_points(), 16], Precision::F64);
        let f_el = enhance_points(&model.svfe, &f_l, &f_s).unwrap();
        let reference = model
            .sgvf
            .fuse_mlp
            .forward(&concat(&[&f_el, &zeros], 1).unwrap())
            .unwrap();

        let max_diff = out
            .fusion
            .values()
            .iter()
            .zip(reference.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff <= 1e-9, "masked fusion deviates by {max_diff}");

        let sim = similarity_matrix(&out.fusion, &out.sem).unwrap();
        let sim_ref = similarity_matrix(&reference, &out.sem).unwrap();
        assert_eq!(predict(&sim).unwrap(), predict(&sim_ref).unwrap());
    }

    /// Sum of |grad| over every parameter whose name starts with `group`.
    fn group_grad(model: &ModelState, grads: &crate::tensor::Gradients, group: &str) -> f64 {
        let mut total = 0.0;
        model.visit("", &mut |name, t| {
            if name.starts_with(group) {
                if let Some(g) = grads.wrt(t) {
                    total += g.values().iter().map(|v| v.abs()).sum::<f64>();
                }
            }
        });
        total
    }

    #[test]
    fn gradients_reach_exactly_the_groups_each_wiring_uses() {
        let cases: [(Ablation, &[&str], &[&str]); 4] = [
            (
                Ablation::Full,
                &["backbone.point", "backbone.image", "sem", "svfe", "sgvf"],
                &["point_fuse"],
            ),
            (
                Ablation::NoImage,
                &["backbone.point", "sem", "svfe", "point_fuse"],
                &["backbone.image", "sgvf"],
            ),
            (
                Ablation::NoSvfe,
                &["backbone.point", "backbone.image", "sem", "sgvf"],
                &["svfe", "point_fuse"],
            ),
            (
                Ablation::NoSgvf,
                &["backbone.point", "backbone.image", "sem", "svfe", "sgvf.fuse"],
                &["sgvf.gate", "point_fuse"],
            ),
        ];
        let (model, scene, emb) = setup(11);
        for (ablation, nonzero, zero) in cases {
            let tape = Tape::new();
            let mut bound = model.clone();
            bound.bind(&tape);
            let out = forward_scene(&bound, &scene, &emb, ablation).unwrap();
            let sim = similarity_matrix(&out.fusion, &out.sem).unwrap();
            let loss = loss_seen(&sim, &scene.train_labels, 0.5).unwrap();
            let grads = loss.backward().unwrap();
            for g in nonzero {
                assert!(
                    group_grad(&bound, &grads, g) > 0.0,
                    "{ablation}: group {g} should receive gradient"
                );
            }
            for g in zero {
                assert_eq!(
                    group_grad(&bound, &grads, g),
                    0.0,
                    "{ablation}: group {g} must stay untouched"
                );
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let (model, scene, emb) = setup(13);
        let a = forward_scene(&model, &scene, &emb, Ablation::Full).unwrap();
        let b = forward_scene(&model, &scene, &emb, Ablation::Full).unwrap();
        assert_eq!(a.fusion.values(), b.fusion.values());
        assert_eq!(a.sem.values(), b.sem.values());
    }
}
