//! Deterministic generator of paired point-cloud / image / label scenes,
//! plus their bit-exact binary serialization.
//!
//! Every class's prototype (cluster center, anisotropic spread, attribute
//! signature, image appearance) is an affine function of its word-embedding
//! row through shared coupling matrices, so semantic similarity predicts
//! feature similarity and transfer to held-out classes is learnable rather
//! than information-theoretically impossible.
//!
//! Classes named in `image_only_pairs` share one geometric and attribute
//! prototype (derived from the pair's first member) but keep their own
//! image appearance: telling them apart requires the camera. Pair classes
//! are placed inside the camera frustum; all remaining classes are placed
//! at arbitrary azimuth around the sensor, so a realistic fraction of
//! points lacks image evidence.

use std::cell::Cell;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::geometry::{project_points, rigid_inverse, CameraModel, Mat4};
use crate::nn::seeded_rng;
use crate::semantic_space::UNLABELED;
use crate::tensor::Tensor;

pub use crate::binio::crc32;

pub const SCENE_MAGIC: [u8; 4] = *b"ZS3S";
pub const SCENE_VERSION: u16 = 1;

/// Attribute noise relative to the geometric noise scale.
const ATTR_NOISE_FACTOR: f64 = 0.35;
/// Widening factor applied to the focal lengths on each retry when the
/// camera sees no points at all.
const FOV_WIDEN_FACTOR: f64 = 1.5;
const MAX_GENERATION_ATTEMPTS: u32 = 8;

/// Full description of the synthetic data distribution.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub class_names: Vec<String>,
    pub class_seen: Vec<bool>,
    /// `[C, d_w]` embedding rows the prototypes are coupled to.
    pub embeddings: Tensor,
    /// Inclusive point-count range for classes outside any pair.
    pub points_per_class: (u32, u32),
    /// Inclusive point-count range for pair members. Kept lower than the
    /// general range so pair clusters stay sparse on the pixel grid and
    /// image evidence is not destroyed by same-pixel collisions.
    pub pair_points_per_class: (u32, u32),
    pub attr_channels: usize,
    /// (height, width).
    pub image_size: (usize, usize),
    pub image_channels: usize,
    pub camera: CameraModel,
    /// Geometric noise scale; multiplies every cluster spread and the
    /// attribute noise. Zero collapses clusters onto their prototypes.
    pub sigma_geo: f64,
    /// Per-pixel additive image noise.
    pub sigma_img: f64,
    /// Class pairs sharing geometry and attributes but not appearance.
    pub image_only_pairs: Vec<(usize, usize)>,
    /// Seed for the coupling matrices (shared across scenes of a dataset).
    pub coupling_seed: u64,
}

impl SceneSpec {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        let bad = |what: String| Error::InvalidArgument { op: "scene spec", what };
        if c == 0 {
            return Err(Error::EmptyInput { op: "scene spec" });
        }
        if self.class_seen.len() != c {
            return Err(bad("one seen flag per class required".into()));
        }
        if self.embeddings.rank() != 2 || self.embeddings.shape()[0] != c {
            return Err(bad(format!(
                "embeddings {:?} do not match {c} classes",
                self.embeddings.shape()
            )));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 || self.image_channels == 0 {
            return Err(bad("image extent and channels must be positive".into()));
        }
        if self.attr_channels == 0 {
            return Err(bad("at least one attribute channel required".into()));
        }
        for &(lo, hi) in [&self.points_per_class, &self.pair_points_per_class] {
            if lo == 0 || hi < lo {
                return Err(bad(format!("bad point count range ({lo}, {hi})")));
            }
        }
        if !(self.sigma_geo >= 0.0 && self.sigma_img >= 0.0) {
            return Err(bad("noise scales must be non-negative".into()));
        }
        let mut used = vec![false; c];
        for &(a, b) in &self.image_only_pairs {
            if a >= c || b >= c || a == b {
                return Err(bad(format!("bad pair ({a}, {b})")));
            }
            if used[a] || used[b] {
                return Err(bad(format!("class {} in more than one pair", if used[a] { a } else { b })));
            }
            used[a] = true;
            used[b] = true;
        }
        Ok(())
    }

    fn in_pair(&self, class: usize) -> bool {
        self.image_only_pairs
            .iter()
            .any(|&(a, b)| a == class || b == class)
    }

    /// The class whose embedding defines the geometry/attribute prototype:
    /// the first member for pair classes, the class itself otherwise.
    fn canonical(&self, class: usize) -> usize {
        for &(a, b) in &self.image_only_pairs {
            if class == a || class == b {
                return a;
            }
        }
        class
    }

    fn count_range(&self, class: usize) -> (u32, u32) {
        if self.in_pair(class) {
            self.pair_points_per_class
        } else {
            self.points_per_class
        }
    }
}

/// Deterministic per-class generation parameters.
#[derive(Clone, Debug)]
pub struct ClassPrototype {
    /// Cluster center in world coordinates.
    pub center: [f64; 3],
    /// Per-axis spread (camera-frame axes), before `sigma_geo` scaling.
    pub spread: [f64; 3],
    pub attr_signature: Vec<f64>,
    /// Raw per-channel appearance splatted into the image, in (0, 1).
    pub appearance: Vec<f64>,
    /// Placed inside the camera frustum (pair members are).
    pub in_camera_band: bool,
}

fn apply_rigid(m: &Mat4, p: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
    }
    out
}

fn squash01(x: f64) -> f64 {
    0.5 + 0.5 * x.tanh()
}

/// Derives every class prototype from the embeddings through coupling
/// matrices seeded by `spec.coupling_seed`. Pure in the spec.
pub fn class_prototypes(spec: &SceneSpec) -> Result<Vec<ClassPrototype>> {
    spec.validate()?;
    let c = spec.num_classes();
    let d_w = spec.embeddings.shape()[1];
    let (k, ch) = (spec.attr_channels, spec.image_channels);
    let mut crng = seeded_rng(spec.coupling_seed);
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(&mut crng)).collect()
    };
    let a_geo = draw(3 * d_w);
    let a_spread = draw(3 * d_w);
    let a_attr = draw(k * d_w);
    let a_app = draw(ch * d_w);
    let emb = spec.embeddings.values();
    let couple = |a: &[f64], rows: usize, w: &[f64]| -> Vec<f64> {
        (0..rows)
            .map(|r| a[r * d_w..(r + 1) * d_w].iter().zip(w).map(|(x, y)| x * y).sum())
            .collect()
    };

    let cam_to_world = rigid_inverse(&spec.camera.extrinsics);
    let half_tan_x = spec.camera.width as f64 / 2.0 / spec.camera.fx;
    let half_tan_y = spec.camera.height as f64 / 2.0 / spec.camera.fy;

    let mut protos = Vec::with_capacity(c);
    for class in 0..c {
        let canon = spec.canonical(class);
        let w_proto = &emb[canon * d_w..(canon + 1) * d_w];
        let w_own = &emb[class * d_w..(class + 1) * d_w];
        let g = couple(&a_geo, 3, w_proto);
        let s = couple(&a_spread, 3, w_proto);
        let in_band = spec.in_pair(class);
        // Centers are chosen in the camera frame and mapped to the world,
        // so arbitrary extrinsics keep their meaning.
        let center_cam = if in_band {
            let z = 5.5 + 2.0 * squash01(g[0]);
            [
                0.35 * z * half_tan_x * g[1].tanh(),
                0.30 * z * half_tan_y * g[2].tanh(),
                z,
            ]
        } else {
            let theta = g[1].atan2(g[0]);
            let rho = 5.5 + 2.0 * squash01(g[2]);
            [rho * theta.sin(), 0.7 * s[0].tanh(), rho * theta.cos()]
        };
        let spread = [
            0.75 + 0.15 * s[0].tanh(),
            0.75 + 0.15 * s[1].tanh(),
            0.35 + 0.15 * s[2].tanh(),
        ];
        let attr_signature = couple(&a_attr, k, w_proto);
        let appearance = couple(&a_app, ch, w_own)
            .into_iter()
            .map(|x| 0.5 + 0.35 * x.tanh())
            .collect();
        protos.push(ClassPrototype {
            center: apply_rigid(&cam_to_world, center_cam),
            spread,
            attr_signature,
            appearance,
            in_camera_band: in_band,
        });
    }
    Ok(protos)
}

/// Ground-truth labels with a read-taint flag. Training code must never
/// call [`values`](Self::values); the audit asserts the flag stayed clear.
#[derive(Debug)]
pub struct GroundTruth {
    labels: Vec<u32>,
    read: Cell<bool>,
}

impl GroundTruth {
    pub fn new(labels: Vec<u32>) -> Self {
        GroundTruth {
            labels,
            read: Cell::new(false),
        }
    }

    /// Evaluation-time access; flips the taint flag.
    pub fn values(&self) -> &[u32] {
        self.read.set(true);
        &self.labels
    }

    /// Serialization-only access that leaves the taint untouched.
    pub(crate) fn io_values(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn was_read(&self) -> bool {
        self.read.get()
    }

    pub fn reset_taint(&self) {
        self.read.set(false);
    }
}

impl Clone for GroundTruth {
    fn clone(&self) -> Self {
        // A clone starts untainted; the audit tracks reads per instance.
        GroundTruth::new(self.labels.clone())
    }
}

/// One generated scene. Ground truth lives behind the taint wrapper;
/// training consumes `train_labels`, where every unseen-class point is
/// `UNLABELED`.
#[derive(Clone, Debug)]
pub struct Scene {
    pub points: Tensor,
    pub attrs: Tensor,
    pub image: Tensor,
    pub camera: CameraModel,
    pub labels: GroundTruth,
    pub train_labels: Vec<u32>,
}

impl Scene {
    pub fn num_points(&self) -> usize {
        self.points.shape()[0]
    }
}

/// Generates one scene. Same `(spec, seed)` always produces the identical
/// scene. If the camera sees no point at all, generation retries with the
/// field of view widened by 1.5x, up to 8 attempts.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    let protos = class_prototypes(spec)?;
    let (h, w, ch) = (spec.image_size.0, spec.image_size.1, spec.image_channels);
    let k = spec.attr_channels;

    for attempt in 0..MAX_GENERATION_ATTEMPTS {
        let widen = FOV_WIDEN_FACTOR.powi(attempt as i32);
        let camera = CameraModel::new(
            spec.camera.fx / widen,
            spec.camera.fy / widen,
            spec.camera.cx,
            spec.camera.cy,
            spec.camera.extrinsics,
            spec.camera.width,
            spec.camera.height,
        )?;
        let mut rng = seeded_rng(seed);
        fn normal(rng: &mut rand_chacha::ChaCha8Rng, scale: f64) -> f64 {
            let x: f64 = StandardNormal.sample(rng);
            scale * x
        }

        let mut pts: Vec<f64> = Vec::new();
        let mut attrs: Vec<f64> = Vec::new();
        let mut labels: Vec<u32> = Vec::new();
        for (class, proto) in protos.iter().enumerate() {
            let (lo, hi) = spec.count_range(class);
            let n = rng.gen_range(lo..=hi);
            for _ in 0..n {
                for axis in 0..3 {
                    pts.push(
                        proto.center[axis] + normal(&mut rng, spec.sigma_geo * proto.spread[axis]),
                    );
                }
                for a in 0..k {
                    attrs.push(
                        proto.attr_signature[a]
                            + normal(&mut rng, ATTR_NOISE_FACTOR * spec.sigma_geo),
                    );
                }
                labels.push(class as u32);
            }
        }
        let t = labels.len();
        let points = Tensor::from_vec(&[t, 3], pts)?;
        let attrs = Tensor::from_vec(&[t, k], attrs)?;

        let proj = project_points(&points, &camera)?;
        if proj.num_valid() == 0 {
            continue;
        }

        // Splat: each visible point writes its class appearance into its
        // nearest pixel; colliding writes average.
        let mut sums = vec![0.0f64; h * w * ch];
        let mut counts = vec![0u32; h * w];
        for i in 0..t {
            if !proj.valid[i] {
                continue;
            }
            let col = (proj.u[i].round() as usize).min(w - 1);
            let row = (proj.v[i].round() as usize).min(h - 1);
            let px = row * w + col;
            counts[px] += 1;
            let app = &protos[labels[i] as usize].appearance;
            for (c, a) in app.iter().enumerate() {
                sums[px * ch + c] += a;
            }
        }
        let mut image = vec![0.0f64; h * w * ch];
        for px in 0..h * w {
            if counts[px] > 0 {
                for c in 0..ch {
                    image[px * ch + c] = sums[px * ch + c] / counts[px] as f64;
                }
            }
        }
        for v in image.iter_mut() {
            *v += normal(&mut rng, spec.sigma_img);
        }
        let image = Tensor::from_vec(&[h, w, ch], image)?;

        let train_labels = labels
            .iter()
            .map(|&l| if spec.class_seen[l as usize] { l } else { UNLABELED })
            .collect();
        return Ok(Scene {
            points,
            attrs,
            image,
            camera,
            labels: GroundTruth::new(labels),
            train_labels,
        });
    }
    Err(Error::SceneGeneration(format!(
        "no point visible after {MAX_GENERATION_ATTEMPTS} attempts with the field of view \
         widened {FOV_WIDEN_FACTOR}x each try"
    )))
}

/// Scene `i` is generated with `seed ^ i`, so datasets are deterministic
/// and individually addressable.
pub fn dataset(spec: &SceneSpec, n_scenes: usize, seed: u64) -> Result<Vec<Scene>> {
    (0..n_scenes)
        .map(|i| generate_scene(spec, seed ^ i as u64))
        .collect()
}

// ---------------------------------------------------------------------
// Binary serialization: magic, version, tagged sections, trailing CRC32.
// ---------------------------------------------------------------------

pub fn scene_to_bytes(scene: &Scene) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(&SCENE_MAGIC);
    w.u16(SCENE_VERSION);
    let t = scene.num_points();
    w.section(b"POINTS  ", |w| {
        w.u32(t as u32);
        for v in scene.points.values() {
            w.f64(v);
        }
    });
    w.section(b"ATTRS   ", |w| {
        w.u32(t as u32);
        w.u32(scene.attrs.shape()[1] as u32);
        for v in scene.attrs.values() {
            w.f64(v);
        }
    });
    w.section(b"IMAGE   ", |w| {
        for d in scene.image.shape() {
            w.u32(*d as u32);
        }
        for v in scene.image.values() {
            w.f64(v);
        }
    });
    w.section(b"CAM     ", |w| {
        let c = &scene.camera;
        for v in [c.fx, c.fy, c.cx, c.cy] {
            w.f64(v);
        }
        for row in &c.extrinsics {
            for v in row {
                w.f64(*v);
            }
        }
        w.u32(c.width as u32);
        w.u32(c.height as u32);
    });
    w.section(b"LABELS  ", |w| {
        w.u32(t as u32);
        for &l in scene.labels.io_values() {
            w.u32(l);
        }
    });
    w.section(b"TRAINLBL", |w| {
        w.u32(t as u32);
        for &l in &scene.train_labels {
            w.u32(l);
        }
    });
    w.finish()
}

pub fn scene_from_bytes(bytes: &[u8]) -> Result<Scene> {
    let mut r = Reader::open(bytes, "scene file")?;
    if r.take(4)? != SCENE_MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic"));
    }
    let version = r.u16()?;
    if version != SCENE_VERSION {
        return Err(r.fail(&format!("unsupported version {version}")));
    }

    r.expect_section(b"POINTS  ")?;
    let t = r.u32()? as usize;
    let points = Tensor::from_vec(&[t, 3], r.f64s(t * 3)?)?;

    r.expect_section(b"ATTRS   ")?;
    if r.u32()? as usize != t {
        return Err(r.fail("attribute count does not match points"));
    }
    let k = r.u32()? as usize;
    let attrs = Tensor::from_vec(&[t, k], r.f64s(t * k)?)?;

    r.expect_section(b"IMAGE   ")?;
    let (h, w, ch) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let image = Tensor::from_vec(&[h, w, ch], r.f64s(h * w * ch)?)?;

    r.expect_section(b"CAM     ")?;
    let (fx, fy, cx, cy) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let mut extrinsics = [[0.0; 4]; 4];
    for row in &mut extrinsics {
        for v in row.iter_mut() {
            *v = r.f64()?;
        }
    }
    let (width, height) = (r.u32()? as usize, r.u32()? as usize);
    let camera = CameraModel::new(fx, fy, cx, cy, extrinsics, width, height)?;

    r.expect_section(b"LABELS  ")?;
    if r.u32()? as usize != t {
        return Err(r.fail("label count does not match points"));
    }
    let labels: Vec<u32> = (0..t).map(|_| r.u32()).collect::<Result<_>>()?;

    r.expect_section(b"TRAINLBL")?;
    if r.u32()? as usize != t {
        return Err(r.fail("training label count does not match points"));
    }
    let train_labels: Vec<u32> = (0..t).map(|_| r.u32()).collect::<Result<_>>()?;

    r.finish()?;
    Ok(Scene {
        points,
        attrs,
        image,
        camera,
        labels: GroundTruth::new(labels),
        train_labels,
    })
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    std::fs::write(path, scene_to_bytes(scene))?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    scene_from_bytes(&std::fs::read(path)?)
}

/// The default desk-scale distribution: 8 classes, 6 seen / 2 unseen, two
/// image-only pairs whose unseen members can only be told from their seen
/// partners through the camera, roughly 2k points per scene.
pub fn desk_spec(seed: u64) -> SceneSpec {
    let names = [
        "bench", "hedge", "kiosk", "planter", "barrel", "bollard", "crate", "signpost",
    ];
    let d_w = 600;
    let embeddings = crate::semantic_space::synth_embeddings(names.len(), d_w, seed);
    let size = 128usize;
    let f = 0.9 * size as f64;
    let camera = CameraModel::with_identity_pose(f, f, size as f64 / 2.0, size as f64 / 2.0, size, size)
        .expect("default camera is well formed");
    SceneSpec {
        class_names: names.iter().map(|s| s.to_string()).collect(),
        class_seen: vec![true, true, true, true, true, true, false, false],
        embeddings,
        points_per_class: (320, 448),
        pair_points_per_class: (96, 160),
        attr_channels: 2,
        image_size: (size, size),
        image_channels: 3,
        camera,
        sigma_geo: 1.0,
        sigma_img: 0.04,
        image_only_pairs: vec![(4, 6), (5, 7)],
        coupling_seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(17),
    }
}
