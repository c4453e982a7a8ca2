//! Feature-relationship export: per-class mean visual features paired with
//! semantic class features at three pipeline stages, projected to 2D by
//! principal components for plotting, plus a delimited-text table and an
//! optional self-contained SVG scatter.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{forward_scene_traced, ModelState};
use crate::semantic_space::ClassVocabulary;
use crate::synthscene::Scene;
use crate::tensor::Tensor;

/// Where along the pipeline the features are sampled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Raw class features vs class-mean raw point features.
    PreSvfe,
    /// Enhanced class features vs class-mean enhanced point features.
    PostSvfe,
    /// Enhanced class features vs class-mean fused features.
    PostSgvf,
}

pub const STAGE_NAMES: [(&str, Stage); 3] = [
    ("pre_svfe", Stage::PreSvfe),
    ("post_svfe", Stage::PostSvfe),
    ("post_sgvf", Stage::PostSgvf),
];

impl Stage {
    pub fn as_str(&self) -> &'static str {
        STAGE_NAMES
            .iter()
            .find(|(_, s)| s == self)
            .map(|(n, _)| *n)
            .expect("every stage is named")
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Stage> {
        STAGE_NAMES
            .iter()
            .find(|(n, _)| *n == s)
            .map(|(_, stage)| *stage)
            .ok_or_else(|| Error::InvalidArgument {
                op: "stage",
                what: format!(
                    "unknown stage {s:?}; valid stages: {}",
                    STAGE_NAMES
                        .iter()
                        .map(|(n, _)| *n)
                        .collect::<Vec<_>>()
                        .join(", ")
                ),
            })
    }
}

/// Whether a 2D point stands for a class's semantic feature or the mean of
/// its points' visual features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointKind {
    Semantic,
    Visual,
}

impl PointKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PointKind::Semantic => "semantic",
            PointKind::Visual => "visual",
        }
    }
}

/// One exported scatter point.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotRow {
    pub class: String,
    pub kind: PointKind,
    pub seen: bool,
    pub x: f64,
    pub y: f64,
}

/// Per-class mean of `features` rows grouped by `labels`. Returns the
/// `[C, d]` means (zero rows for absent classes) and a per-class presence
/// flag.
pub fn class_mean_rows(
    features: &Tensor,
    labels: &[u32],
    num_classes: usize,
) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
    if features.rank() != 2 || features.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "class_mean_rows",
            left: features.shape().to_vec(),
            right: vec![labels.len(), 0],
        });
    }
    let d = features.shape()[1];
    let vals = features.values();
    let mut sums = vec![vec![0.0f64; d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (i, &label) in labels.iter().enumerate() {
        let c = label as usize;
        if c >= num_classes {
            return Err(Error::IndexOutOfBounds {
                op: "class_mean_rows",
                index: c,
                bound: num_classes,
            });
        }
        counts[c] += 1;
        for j in 0..d {
            sums[c][j] += vals[i * d + j];
        }
    }
    let present: Vec<bool> = counts.iter().map(|&n| n > 0).collect();
    for (c, row) in sums.iter_mut().enumerate() {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
    }
    Ok((sums, present))
}

/// Projects `rows` (each a d-vector) onto their top two principal
/// components. Deterministic: fixed-start power iteration with deflation
/// and a sign convention (the strongest loading of each component is
/// positive). Degenerate directions fall back to canonical axes so the
/// output stays finite.
pub fn pca2(rows: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::EmptyInput { op: "pca2" });
    }
    let d = rows[0].len();
    if d < 2 {
        return Err(Error::InvalidArgument {
            op: "pca2",
            what: format!("need at least 2 feature dimensions, got {d}"),
        });
    }
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidArgument {
            op: "pca2",
            what: "ragged feature rows".into(),
        });
    }

    // Column-centered data.
    let mut mean = vec![0.0f64; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    // Sample covariance, d x d.
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut cov = vec![0.0f64; d * d];
    for r in &centered {
        for i in 0..d {
            let ri = r[i];
            if ri == 0.0 {
                continue;
            }
            for j in 0..d {
                cov[i * d + j] += ri * r[j];
            }
        }
    }
    for x in cov.iter_mut() {
        *x /= denom;
    }

    let u1 = dominant_eigenvector(&cov, d, 0);
    let lambda1 = rayleigh(&cov, d, &u1);
    // Deflation removes the first component's share of the covariance.
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i * d + j] -= lambda1 * u1[i] * u1[j];
        }
    }
    let mut u2 = dominant_eigenvector(&deflated, d, 1);
    // Re-orthogonalize against u1 to absorb numerical drift.
    let dot: f64 = u1.iter().zip(&u2).map(|(a, b)| a * b).sum();
    for (b, a) in u2.iter_mut().zip(&u1) {
        *b -= dot * a;
    }
    normalize_or_axis(&mut u2, 1, Some(&u1));
    fix_sign(&mut u2);

    Ok(centered
        .iter()
        .map(|r| {
            let x = r.iter().zip(&u1).map(|(a, b)| a * b).sum();
            let y = r.iter().zip(&u2).map(|(a, b)| a * b).sum();
            (x, y)
        })
        .collect())
}

/// Power iteration from a fixed, reproducible start vector.
fn dominant_eigenvector(matrix: &[f64], d: usize, which: usize) -> Vec<f64> {
    // A deterministic start with energy in every coordinate; the `which`
    // offset decorrelates the starts of successive components.
    let mut v: Vec<f64> = (0..d)
        .map(|i| 1.0 / (1.0 + ((i + which) % d) as f64))
        .collect();
    normalize_or_axis(&mut v, which, None);
    let mut w = vec![0.0f64; d];
    for _ in 0..512 {
        for i in 0..d {
            w[i] = (0..d).map(|j| matrix[i * d + j] * v[j]).sum();
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            // Null direction: any axis works; stay deterministic.
            break;
        }
        let mut delta = 0.0f64;
        for i in 0..d {
            let next = w[i] / norm;
            delta = delta.max((next - v[i]).abs().min((next + v[i]).abs()));
            v[i] = next;
        }
        if delta < 1e-14 {
            break;
        }
    }
    fix_sign(&mut v);
    v
}

fn rayleigh(matrix: &[f64], d: usize, v: &[f64]) -> f64 {
    let mut quad = 0.0f64;
    for i in 0..d {
        let mi: f64 = (0..d).map(|j| matrix[i * d + j] * v[j]).sum();
        quad += v[i] * mi;
    }
    quad
}

/// Normalizes in place; a vanishing vector becomes a canonical axis,
/// chosen orthogonal to `avoid` when given.
fn normalize_or_axis(v: &mut [f64], preferred_axis: usize, avoid: Option<&[f64]>) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-150 {
        for x in v.iter_mut() {
            *x /= norm;
        }
        return;
    }
    for x in v.iter_mut() {
        *x = 0.0;
    }
    let d = v.len();
    let mut axis = preferred_axis % d;
    if let Some(a) = avoid {
        // Pick the axis where the avoided vector is weakest.
        let mut best = 0usize;
        for i in 1..d {
            if a[i].abs() < a[best].abs() {
                best = i;
            }
        }
        axis = best;
    }
    v[axis] = 1.0;
}

/// Deterministic orientation: the entry with the largest magnitude is
/// positive (first such entry on ties).
fn fix_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Exports the scatter for one scene at one stage: the class's semantic
/// feature and (when the scene contains the class) the mean visual feature
/// of its points, both projected by a PCA fitted on the pooled set. Each
/// pooled row is normalized to unit length before the projection so that
/// plots from different stages are comparable: features at different depths
/// of the network live at very different magnitudes, and the dot-product
/// alignment objective shapes directions rather than norms.
/// Reads full ground truth; this is an evaluation-time tool.
pub fn stage_rows(
    model: &ModelState,
    scene: &Scene,
    vocab: &ClassVocabulary,
    stage: Stage,
) -> Result<Vec<PlotRow>> {
    let emb = if vocab.embeddings().precision() == model.precision() {
        vocab.embeddings().clone()
    } else {
        vocab.embeddings().to_precision(model.precision())?
    };
    let traced = forward_scene_traced(model, scene, &emb)?;
    let (sem, visual) = match stage {
        Stage::PreSvfe => (&traced.f_s, &traced.f_l),
        Stage::PostSvfe => (&traced.f_es, &traced.f_el),
        Stage::PostSgvf => (&traced.f_es, &traced.fusion),
    };
    let c = vocab.len();
    let labels = scene.labels.values();
    let (means, present) = class_mean_rows(visual, labels, c)?;

    let d = sem.shape()[1];
    let sem_vals = sem.values();
    let mut pooled: Vec<Vec<f64>> = Vec::with_capacity(2 * c);
    for k in 0..c {
        pooled.push(sem_vals[k * d..(k + 1) * d].to_vec());
    }
    let mut visual_classes = Vec::new();
    for k in 0..c {
        if present[k] {
            pooled.push(means[k].clone());
            visual_classes.push(k);
        }
    }
    for row in &mut pooled {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    let projected = pca2(&pooled)?;

    let mut rows = Vec::with_capacity(pooled.len());
    for k in 0..c {
        let (x, y) = projected[k];
        rows.push(PlotRow {
            class: vocab.names()[k].clone(),
            kind: PointKind::Semantic,
            seen: vocab.is_seen(k),
            x,
            y,
        });
    }
    for (slot, &k) in visual_classes.iter().enumerate() {
        let (x, y) = projected[c + slot];
        rows.push(PlotRow {
            class: vocab.names()[k].clone(),
            kind: PointKind::Visual,
            seen: vocab.is_seen(k),
            x,
            y,
        });
    }
    Ok(rows)
}

/// Mean over classes of the 2D distance between a class's semantic point
/// and its visual point; classes lacking either kind are skipped.
pub fn mean_class_distance(rows: &[PlotRow]) -> Result<f64> {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for row in rows.iter().filter(|r| r.kind == PointKind::Semantic) {
        if let Some(vis) = rows
            .iter()
            .find(|r| r.kind == PointKind::Visual && r.class == row.class)
        {
            sum += ((row.x - vis.x).powi(2) + (row.y - vis.y).powi(2)).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Undefined {
            what: "mean semantic-visual distance with no complete class".into(),
        });
    }
    Ok(sum / n as f64)
}

/// Tab-separated table, full-precision coordinates.
pub fn render_rows(rows: &[PlotRow]) -> String {
    let mut out = String::from("class\tkind\tseen\tx\ty\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.class,
            r.kind.as_str(),
            if r.seen { "seen" } else { "unseen" },
            r.x,
            r.y
        ));
    }
    out
}

/// Parses a table produced by [`render_rows`]. Lines starting with `#` are
/// treated as comments so annotated exports read back unchanged.
pub fn parse_rows(text: &str) -> Result<Vec<PlotRow>> {
    let fail = |detail: String| Error::Format {
        what: "plot table".to_string(),
        detail,
    };
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.is_empty());
    match lines.next() {
        Some("class\tkind\tseen\tx\ty") => {}
        other => {
            return Err(fail(format!("missing header line, found {other:?}")));
        }
    }
    let mut rows = Vec::new();
    for line in lines {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(fail(format!("expected 5 columns, found {}", cols.len())));
        }
        let kind = match cols[1] {
            "semantic" => PointKind::Semantic,
            "visual" => PointKind::Visual,
            other => return Err(fail(format!("unknown point kind {other:?}"))),
        };
        let seen = match cols[2] {
            "seen" => true,
            "unseen" => false,
            other => return Err(fail(format!("unknown seen flag {other:?}"))),
        };
        let x: f64 = cols[3]
            .parse()
            .map_err(|e| fail(format!("bad x coordinate {:?}: {e}", cols[3])))?;
        let y: f64 = cols[4]
            .parse()
            .map_err(|e| fail(format!("bad y coordinate {:?}: {e}", cols[4])))?;
        rows.push(PlotRow {
            class: cols[0].to_string(),
            kind,
            seen,
            x,
            y,
        });
    }
    Ok(rows)
}

/// Self-contained SVG scatter: squares for semantic points, circles for
/// visual points, filled for seen classes and hollow for unseen, one text
/// label per point.
pub fn render_svg(rows: &[PlotRow], title: &str) -> String {
    let (width, height, pad) = (640.0f64, 480.0f64, 48.0f64);
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in rows {
        min_x = min_x.min(r.x);
        max_x = max_x.max(r.x);
        min_y = min_y.min(r.y);
        max_y = max_y.max(r.y);
    }
    if rows.is_empty() || !min_x.is_finite() {
        (min_x, max_x, min_y, max_y) = (-1.0, 1.0, -1.0, 1.0);
    }
    let span_x = (max_x - min_x).max(1e-9);
    let span_y = (max_y - min_y).max(1e-9);
    let sx = |x: f64| pad + (x - min_x) / span_x * (width - 2.0 * pad);
    // SVG y grows downward; flip so larger y plots higher.
    let sy = |y: f64| height - pad - (y - min_y) / span_y * (height - 2.0 * pad);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width} {height}\" \
         font-family=\"sans-serif\" font-size=\"10\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        width / 2.0,
        xml_escape(title)
    );
    for r in rows {
        let (cx, cy) = (sx(r.x), sy(r.y));
        let color = if r.seen { "#1f6f43" } else { "#b3411f" };
        let fill = if r.seen { color } else { "none" };
        match r.kind {
            PointKind::Semantic => {
                svg.push_str(&format!(
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"9\" height=\"9\" fill=\"{fill}\" \
                     stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                    cx - 4.5,
                    cy - 4.5
                ));
            }
            PointKind::Visual => {
                svg.push_str(&format!(
                    "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"5\" fill=\"{fill}\" \
                     stroke=\"{color}\" stroke-width=\"1.5\"/>\n"
                ));
            }
        }
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\">{} ({})</text>\n",
            cx + 7.0,
            cy + 3.5,
            xml_escape(&r.class),
            r.kind.as_str()
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraModel;
    use crate::model::{ModelConfig, ModelState};
    use crate::semantic_space::synth_embeddings;
    use crate::svfe::SvfeOrder;
    use crate::synthscene::{desk_spec, generate_scene, SceneSpec};
    use crate::tensor::Precision;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec(seed: u64) -> SceneSpec {
        let mut spec = desk_spec(seed);
        spec.embeddings = synth_embeddings(8, 24, seed);
        spec.points_per_class = (14, 20);
        spec.pair_points_per_class = (8, 12);
        spec.image_size = (24, 24);
        spec.camera = CameraModel::with_identity_pose(21.6, 21.6, 12.0, 12.0, 24, 24).unwrap();
        spec
    }

    fn tiny_model(seed: u64) -> ModelState {
        let cfg = ModelConfig {
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
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelState::init(&cfg, SvfeOrder::PointsFirst, &mut rng, Precision::F64)
    }

    fn vocab(spec: &SceneSpec) -> ClassVocabulary {
        ClassVocabulary::new(
            spec.class_names.clone(),
            spec.class_seen.clone(),
            spec.embeddings.clone(),
        )
        .unwrap()
    }

    #[test]
    fn stage_names_round_trip_and_unknown_is_listed() {
        for (name, stage) in STAGE_NAMES {
            assert_eq!(name.parse::<Stage>().unwrap(), stage);
            assert_eq!(stage.as_str(), name);
            assert_eq!(stage.to_string(), name);
        }
        let err = "tsne".parse::<Stage>().unwrap_err().to_string();
        for (name, _) in STAGE_NAMES {
            assert!(err.contains(name), "{err}");
        }
    }

    #[test]
    fn class_means_match_a_direct_tally() {
        let features =
            Tensor::from_vec(&[5, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0])
                .unwrap();
        let labels = [2u32, 0, 2, 2, 0];
        let (means, present) = class_mean_rows(&features, &labels, 4).unwrap();
        assert_eq!(present, vec![true, false, true, false]);
        assert_eq!(means[0], vec![(3.0 + 9.0) / 2.0, (4.0 + 10.0) / 2.0]);
        assert_eq!(means[2], vec![(1.0 + 5.0 + 7.0) / 3.0, (2.0 + 6.0 + 8.0) / 3.0]);
        assert_eq!(means[1], vec![0.0, 0.0]);
    }

    #[test]
    fn pca_on_identity_covariance_preserves_geometry() {
        // Four points whose sample covariance is exactly the identity; any
        // orthonormal basis is then a valid answer, so the projection must
        // be a rotation/reflection: distances are preserved.
        let s = (3.0f64).sqrt() / 2.0;
        let pts = vec![
            vec![s, s],
            vec![s, -s],
            vec![-s, s],
            vec![-s, -s],
        ];
        let proj = pca2(&pts).unwrap();
        for i in 0..4 {
            for j in (i + 1)..4 {
                let orig = ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2))
                    .sqrt();
                let now = ((proj[i].0 - proj[j].0).powi(2) + (proj[i].1 - proj[j].1).powi(2))
                    .sqrt();
                assert!((orig - now).abs() < 1e-9, "{orig} vs {now}");
            }
        }
    }

    #[test]
    fn pca_orders_components_by_variance_and_is_deterministic() {
        // Anisotropic cloud in 5D: variance mostly along a known direction.
        let mut rows = Vec::new();
        for i in 0..40 {
            let t = (i as f64 / 39.0) * 2.0 - 1.0;
            let wiggle = ((i * 7919) % 13) as f64 / 13.0 - 0.5;
            rows.push(vec![
                3.0 * t,
                0.5 * wiggle,
                0.2 * t + 0.3 * wiggle,
                0.05 * wiggle,
                -1.5 * t,
            ]);
        }
        let a = pca2(&rows).unwrap();
        let b = pca2(&rows).unwrap();
        assert_eq!(a, b);
        let var = |sel: fn(&(f64, f64)) -> f64| {
            let m = a.iter().map(sel).sum::<f64>() / a.len() as f64;
            a.iter().map(|p| (sel(p) - m).powi(2)).sum::<f64>() / (a.len() - 1) as f64
        };
        let (v1, v2) = (var(|p| p.0), var(|p| p.1));
        assert!(v1 >= v2, "component variances out of order: {v1} < {v2}");
        assert!(v1 > 1e-6);
    }

    #[test]
    fn exported_rows_follow_the_schema_at_every_stage() {
        let spec = tiny_spec(31);
        let scene = generate_scene(&spec, 77).unwrap();
        let model = tiny_model(5);
        let vocab = vocab(&spec);
        for (_, stage) in STAGE_NAMES {
            let rows = stage_rows(&model, &scene, &vocab, stage).unwrap();
            let semantic = rows
                .iter()
                .filter(|r| r.kind == PointKind::Semantic)
                .count();
            let visual = rows.iter().filter(|r| r.kind == PointKind::Visual).count();
            assert_eq!(semantic, 8);
            assert!(visual >= 1 && visual <= 8);
            for r in &rows {
                assert!(r.x.is_finite() && r.y.is_finite());
                assert!(vocab.names().contains(&r.class));
            }
            let text = render_rows(&rows);
            let lines: Vec<&str> = text.lines().collect();
            assert_eq!(lines[0], "class\tkind\tseen\tx\ty");
            assert_eq!(lines.len(), rows.len() + 1);
            for (line, row) in lines[1..].iter().zip(&rows) {
                let cols: Vec<&str> = line.split('\t').collect();
                assert_eq!(cols.len(), 5);
                assert_eq!(cols[0], row.class);
                assert_eq!(cols[1], row.kind.as_str());
                assert_eq!(cols[2], if row.seen { "seen" } else { "unseen" });
                assert_eq!(cols[3].parse::<f64>().unwrap(), row.x);
                assert_eq!(cols[4].parse::<f64>().unwrap(), row.y);
            }
            let dist = mean_class_distance(&rows).unwrap();
            assert!(dist.is_finite() && dist >= 0.0);

            let annotated = format!("# config_hash abc123\n# stage {}\n{text}", stage.as_str());
            assert_eq!(parse_rows(&annotated).unwrap(), rows);
        }
    }

    #[test]
    fn malformed_tables_are_rejected_with_details() {
        assert!(parse_rows("").unwrap_err().to_string().contains("header"));
        let bad_kind = "class\tkind\tseen\tx\ty\na\tfancy\tseen\t0\t0\n";
        assert!(parse_rows(bad_kind)
            .unwrap_err()
            .to_string()
            .contains("fancy"));
        let bad_cols = "class\tkind\tseen\tx\ty\na\tsemantic\tseen\t0\n";
        assert!(parse_rows(bad_cols).unwrap_err().to_string().contains("4"));
        let bad_x = "class\tkind\tseen\tx\ty\na\tsemantic\tunseen\tnope\t0\n";
        assert!(parse_rows(bad_x).unwrap_err().to_string().contains("nope"));
    }

    #[test]
    fn svg_renders_one_marker_and_label_per_row() {
        let spec = tiny_spec(32);
        let scene = generate_scene(&spec, 78).unwrap();
        let model = tiny_model(6);
        let vocab = vocab(&spec);
        let rows = stage_rows(&model, &scene, &vocab, Stage::PostSgvf).unwrap();
        let svg = render_svg(&rows, "post_sgvf");
        assert!(svg.starts_with("<svg "));
        assert!(svg.ends_with("</svg>\n"));
        let markers = svg.matches("<rect x=").count() + svg.matches("<circle cx=").count();
        assert_eq!(markers, rows.len());
        assert_eq!(svg.matches("<text ").count(), rows.len() + 1);
        assert!(svg.contains("post_sgvf"));
    }

    #[test]
    fn class_distance_matches_a_hand_computation() {
        let rows = vec![
            PlotRow {
                class: "a".into(),
                kind: PointKind::Semantic,
                seen: true,
                x: 0.0,
                y: 0.0,
            },
            PlotRow {
                class: "a".into(),
                kind: PointKind::Visual,
                seen: true,
                x: 3.0,
                y: 4.0,
            },
            PlotRow {
                class: "b".into(),
                kind: PointKind::Semantic,
                seen: false,
                x: 1.0,
                y: 1.0,
            },
            PlotRow {
                class: "b".into(),
                kind: PointKind::Visual,
                seen: false,
                x: 1.0,
                y: 2.0,
            },
            PlotRow {
                class: "lonely".into(),
                kind: PointKind::Semantic,
                seen: true,
                x: 9.0,
                y: 9.0,
            },
        ];
        let d = mean_class_distance(&rows).unwrap();
        assert!((d - (5.0 + 1.0) / 2.0).abs() < 1e-15);
        assert!(mean_class_distance(&rows[4..]).is_err());
    }
}
