//! Lightweight feature extractors: a per-point MLP over normalized
//! coordinates plus attributes, and a per-pixel MLP over image channels
//! augmented with their 3x3 box-filtered versions. Both map into the shared
//! feature width used by the rest of the pipeline.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{LinearParams, MlpParams, ParamSet};
use crate::tensor::{concat, Precision, Tensor};

/// Row-wise encoder for point clouds: (3 + k) -> 64 -> 128 -> 128 with
/// ReLU between layers. Coordinates are normalized per call to zero mean
/// and unit maximum radius before encoding, so absolute scene placement
/// and scale carry no signal.
#[derive(Clone, Debug)]
pub struct PointEncoder {
    pub l1: LinearParams,
    pub l2: LinearParams,
    pub l3: LinearParams,
}

impl PointEncoder {
    pub fn init(
        attr_channels: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
        p: Precision,
    ) -> Self {
        PointEncoder {
            l1: LinearParams::init(3 + attr_channels, d_hidden, rng, p),
            l2: LinearParams::init(d_hidden, d_out, rng, p),
            l3: LinearParams::init(d_out, d_out, rng, p),
        }
    }

    pub fn attr_channels(&self) -> usize {
        self.l1.d_in() - 3
    }

    fn precision(&self) -> Precision {
        self.l1.weight.precision()
    }
}

impl ParamSet for PointEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.l1.visit(&format!("{prefix}.l1"), f);
        self.l2.visit(&format!("{prefix}.l2"), f);
        self.l3.visit(&format!("{prefix}.l3"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.l1.visit_mut(&format!("{prefix}.l1"), f);
        self.l2.visit_mut(&format!("{prefix}.l2"), f);
        self.l3.visit_mut(&format!("{prefix}.l3"), f);
    }
}

/// Centers `[T, 3]` coordinates and scales them so the farthest point sits
/// at radius 1. Degenerate clouds (single location) stay at the origin.
fn normalize_coords(points: &Tensor, p: Precision) -> Result<Tensor> {
    let t = points.shape()[0];
    let xyz = points.values();
    let mut mean = [0.0f64; 3];
    for row in xyz.chunks_exact(3) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= t as f64;
    }
    let mut radius = 0.0f64;
    for row in xyz.chunks_exact(3) {
        let r2: f64 = row
            .iter()
            .zip(&mean)
            .map(|(x, m)| (x - m) * (x - m))
            .sum();
        radius = radius.max(r2.sqrt());
    }
    let inv = 1.0 / radius.max(1e-12);
    let data = xyz
        .chunks_exact(3)
        .flat_map(|row| row.iter().zip(&mean).map(|(x, m)| (x - m) * inv))
        .collect();
    Tensor::from_vec_p(&[t, 3], data, p)
}

/// `F_l[t] = MLP(normalized coords ++ attrs)[t]`, one row per point.
pub fn encode_points(enc: &PointEncoder, points: &Tensor, attrs: &Tensor) -> Result<Tensor> {
    if points.rank() != 2 || points.shape()[1] != 3 {
        return Err(Error::ShapeMismatch {
            op: "encode_points",
            left: points.shape().to_vec(),
            right: vec![0, 3],
        });
    }
    let t = points.shape()[0];
    let k = enc.attr_channels();
    if attrs.rank() != 2 || attrs.shape() != [t, k] {
        return Err(Error::ShapeMismatch {
            op: "encode_points",
            left: attrs.shape().to_vec(),
            right: vec![t, k],
        });
    }
    if t == 0 {
        return Err(Error::EmptyInput { op: "encode_points" });
    }
    let p = enc.precision();
    let coords = normalize_coords(points, p)?;
    let attrs = if attrs.precision() == p || attrs.is_on_tape() {
        attrs.clone()
    } else {
        attrs.to_precision(p)?
    };
    let x = concat(&[&coords, &attrs], 1)?;
    let h1 = enc.l1.forward(&x)?.relu()?;
    let h2 = enc.l2.forward(&h1)?.relu()?;
    enc.l3.forward(&h2)
}

/// Per-pixel encoder: each pixel's channels are concatenated with their
/// 3x3 box-filtered neighborhood average (reflect padding) and passed
/// through a two-layer MLP, (2c) -> 96 -> 128.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub mlp: MlpParams,
}

impl ImageEncoder {
    pub fn init(
        img_channels: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
        p: Precision,
    ) -> Self {
        ImageEncoder {
            mlp: MlpParams::init(2 * img_channels, d_hidden, d_out, rng, p),
        }
    }

    pub fn img_channels(&self) -> usize {
        self.mlp.hidden.d_in() / 2
    }
}

impl ParamSet for ImageEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.mlp.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.mlp.visit_mut(prefix, f);
    }
}

/// `F_i = MLP(channels ++ box3(channels))` applied at every pixel.
pub fn encode_image(enc: &ImageEncoder, image: &Tensor) -> Result<Tensor> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let flat = pixel_input_rows(enc, image)?;
    let d_out = enc.mlp.out.d_out();
    enc.mlp.forward(&flat)?.reshape(&[h, w, d_out])
}

/// The per-pixel inputs the image encoder consumes, flattened to one row
/// per pixel: raw channels concatenated with their 3x3 box average,
/// `[h*w, 2c]`. Pure data preparation; combined with
/// [`encode_pixel_rows`] on a row subset it reproduces [`encode_image`]
/// exactly on those pixels, which keeps the cost of the image branch
/// proportional to the pixels actually read instead of the full frame.
pub fn pixel_input_rows(enc: &ImageEncoder, image: &Tensor) -> Result<Tensor> {
    let c = enc.img_channels();
    if image.rank() != 3 || image.shape()[2] != c {
        return Err(Error::ShapeMismatch {
            op: "encode_image",
            left: image.shape().to_vec(),
            right: vec![0, 0, c],
        });
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let p = enc.mlp.hidden.weight.precision();
    let image = if image.precision() == p || image.is_on_tape() {
        image.clone()
    } else {
        image.to_precision(p)?
    };
    let smoothed = image.box_filter3()?;
    let stacked = concat(&[&image, &smoothed], 2)?;
    stacked.reshape(&[h * w, 2 * c])
}

/// The image encoder applied to a subset of pixel rows from
/// [`pixel_input_rows`]; same math per row as [`encode_image`].
pub fn encode_pixel_rows(enc: &ImageEncoder, rows: &Tensor) -> Result<Tensor> {
    enc.mlp.forward(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use crate::tensor::grad_check;

    fn cloud(t: usize) -> (Tensor, Tensor) {
        let pts = Tensor::from_vec(
            &[t, 3],
            (0..t * 3).map(|i| (i as f64 * 0.7).sin() * 4.0 + 1.0).collect(),
        )
        .unwrap();
        let attrs = Tensor::from_vec(&[t, 2], (0..t * 2).map(|i| (i as f64 * 0.3).cos()).collect())
            .unwrap();
        (pts, attrs)
    }

    #[test]
    fn zero_weights_produce_constant_rows_from_the_final_bias() {
        let mut rng = seeded_rng(1);
        let mut enc = PointEncoder::init(2, 8, 4, &mut rng, Precision::F64);
        enc.l1.weight = Tensor::zeros(&[5, 8]);
        enc.l2.weight = Tensor::zeros(&[8, 4]);
        enc.l3.weight = Tensor::zeros(&[4, 4]);
        enc.l3.bias = Tensor::from_vec(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let (pts, attrs) = cloud(5);
        let f = encode_points(&enc, &pts, &attrs).unwrap();
        for t in 0..5 {
            assert_eq!(f.at2(t, 0), 1.0);
            assert_eq!(f.at2(t, 1), -2.0);
            assert_eq!(f.at2(t, 3), 3.0);
        }
    }

    #[test]
    fn permuting_points_permutes_features_identically() {
        let mut rng = seeded_rng(2);
        let enc = PointEncoder::init(2, 8, 6, &mut rng, Precision::F64);
        let (pts, attrs) = cloud(6);
        let perm = [5usize, 3, 0, 4, 1, 2];
        let f = encode_points(&enc, &pts, &attrs).unwrap();
        let fp = encode_points(
            &enc,
            &pts.gather_rows(&perm).unwrap(),
            &attrs.gather_rows(&perm).unwrap(),
        )
        .unwrap();
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..6 {
                assert!((fp.at2(new_row, c) - f.at2(old_row, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalization_centers_and_bounds_the_cloud() {
        // Identity-ish encoder is overkill; check the helper directly.
        let pts = Tensor::from_rows(&[
            vec![10.0, 10.0, 10.0],
            vec![12.0, 10.0, 10.0],
            vec![10.0, 14.0, 10.0],
        ])
        .unwrap();
        let n = normalize_coords(&pts, Precision::F64).unwrap();
        let v = n.values();
        for axis in 0..3 {
            let mean: f64 = (0..3).map(|r| v[r * 3 + axis]).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12);
        }
        let max_r = (0..3)
            .map(|r| (0..3).map(|a| v[r * 3 + a] * v[r * 3 + a]).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        assert!((max_r - 1.0).abs() < 1e-12);

        // A degenerate cloud normalizes to the origin instead of dividing
        // by zero.
        let same = Tensor::from_rows(&[vec![5.0, 5.0, 5.0], vec![5.0, 5.0, 5.0]]).unwrap();
        let n = normalize_coords(&same, Precision::F64).unwrap();
        assert!(n.values().iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn point_encoder_matches_finite_differences() {
        let mut rng = seeded_rng(3);
        let enc = PointEncoder::init(2, 6, 5, &mut rng, Precision::F64);
        let (pts, attrs) = cloud(4);
        let err = grad_check(
            |w| {
                let mut e = enc.clone();
                e.l2.weight = w.clone();
                encode_points(&e, &pts, &attrs)?.reduce_mean(None)
            },
            &enc.l2.weight,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err:e}");
    }

    #[test]
    fn constant_image_yields_a_constant_feature_map() {
        let mut rng = seeded_rng(4);
        let enc = ImageEncoder::init(3, 8, 6, &mut rng, Precision::F64);
        let img = Tensor::from_vec(&[5, 7, 3], vec![0.4; 5 * 7 * 3]).unwrap();
        let f = encode_image(&enc, &img).unwrap();
        assert_eq!(f.shape(), &[5, 7, 6]);
        let v = f.values();
        for px in v.chunks_exact(6) {
            for (a, b) in px.iter().zip(&v[..6]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn image_features_translate_with_the_image_away_from_borders() {
        let mut rng = seeded_rng(5);
        let enc = ImageEncoder::init(1, 6, 4, &mut rng, Precision::F64);
        let (h, w) = (6, 6);
        let pix = |r: usize, c: usize| ((r * 31 + c * 17) % 11) as f64 / 11.0;
        let base: Vec<f64> = (0..h * w).map(|i| pix(i / w, i % w)).collect();
        // Shift content one column to the right.
        let shifted: Vec<f64> = (0..h * w)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                if c == 0 {
                    0.0
                } else {
                    pix(r, c - 1)
                }
            })
            .collect();
        let fa = encode_image(&enc, &Tensor::from_vec(&[h, w, 1], base).unwrap()).unwrap();
        let fb = encode_image(&enc, &Tensor::from_vec(&[h, w, 1], shifted).unwrap()).unwrap();
        // Interior pixels at least 2 away from every border see identical
        // neighborhoods.
        for r in 2..h - 2 {
            for c in 2..w - 3 {
                for ch in 0..4 {
                    let a = fa.at((r * w + c) * 4 + ch);
                    let b = fb.at((r * w + c + 1) * 4 + ch);
                    assert!((a - b).abs() < 1e-12, "pixel ({r},{c}) channel {ch}");
                }
            }
        }
    }

    #[test]
    fn image_encoder_matches_finite_differences_on_a_6x6_image() {
        let mut rng = seeded_rng(6);
        let enc = ImageEncoder::init(2, 6, 4, &mut rng, Precision::F64);
        let img = Tensor::from_vec(
            &[6, 6, 2],
            (0..72).map(|i| (i as f64 * 0.13).sin()).collect(),
        )
        .unwrap();
        let err = grad_check(
            |x| encode_image(&enc, x)?.reduce_mean(None),
            &img,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "image path {err:e}");

        let err_w = grad_check(
            |w| {
                let mut e = enc.clone();
                e.mlp.hidden.weight = w.clone();
                encode_image(&e, &img)?.reduce_mean(None)
            },
            &enc.mlp.hidden.weight,
            1e-5,
        )
        .unwrap();
        assert!(err_w <= 1e-4, "weight path {err_w:e}");
    }

    #[test]
    fn shape_mismatches_are_reported() {
        let mut rng = seeded_rng(7);
        let enc = PointEncoder::init(2, 4, 4, &mut rng, Precision::F64);
        let (pts, _) = cloud(3);
        let bad_attrs = Tensor::zeros(&[3, 5]);
        assert!(encode_points(&enc, &pts, &bad_attrs).is_err());
        let ienc = ImageEncoder::init(3, 4, 4, &mut rng, Precision::F64);
        assert!(encode_image(&ienc, &Tensor::zeros(&[4, 4, 2])).is_err());
    }
}
