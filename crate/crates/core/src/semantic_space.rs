//! Class vocabulary with a seen/unseen split, word-embedding ingestion, and
//! the projection head that maps word vectors into the shared feature space.
//!
//! The vocabulary file is plain text, one class per line: `name,seen` or
//! `name,unseen`. The embedding file is plain text, one record per line: the
//! class name (hyphens allowed, no whitespace) followed by the embedding
//! values, space separated. Names are matched case-insensitively with
//! hyphens and spaces treated as equal.

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{seeded_rng, MlpParams, ParamSet};
use crate::tensor::{Precision, Tensor};

/// Label value for points that belong to no class and are excluded from
/// every loss term and every metric.
pub const UNLABELED: u32 = u32::MAX;

/// Canonical form used to match class names across files: lowercase, with
/// hyphens and spaces collapsed to a single separator.
pub fn normalize_name(name: &str) -> String {
    name.trim()
        .to_lowercase()
        .split(['-', ' '])
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Ordered class list, seen/unseen partition, and one embedding row per
/// class. Immutable after construction.
pub struct ClassVocabulary {
    names: Vec<String>,
    seen: Vec<bool>,
    embeddings: Tensor,
}

impl ClassVocabulary {
    pub fn new(names: Vec<String>, seen: Vec<bool>, embeddings: Tensor) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::EmptyInput { op: "vocabulary" });
        }
        if names.len() != seen.len() {
            return Err(Error::InvalidArgument {
                op: "vocabulary",
                what: format!("{} names but {} seen flags", names.len(), seen.len()),
            });
        }
        if embeddings.rank() != 2 || embeddings.shape()[0] != names.len() {
            return Err(Error::InvalidArgument {
                op: "vocabulary",
                what: format!(
                    "expected [{}, d_w] embeddings, got {:?}",
                    names.len(),
                    embeddings.shape()
                ),
            });
        }
        if !embeddings.all_finite() {
            return Err(Error::NonFinite {
                what: "class embeddings".into(),
            });
        }
        let mut normalized: Vec<String> = names.iter().map(|n| normalize_name(n)).collect();
        normalized.sort();
        if normalized.windows(2).any(|w| w[0] == w[1]) || normalized.iter().any(String::is_empty)
        {
            return Err(Error::InvalidArgument {
                op: "vocabulary",
                what: "class names must be unique and non-empty".into(),
            });
        }
        Ok(ClassVocabulary {
            names,
            seen,
            embeddings,
        })
    }

    /// Parses "name,seen|unseen" lines. Blank lines and `#` comments are
    /// skipped.
    pub fn parse_classes(text: &str) -> Result<Vec<(String, bool)>> {
        let mut classes = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |detail: String| Error::Format {
                what: format!("vocabulary line {}", lineno + 1),
                detail,
            };
            let (name, tag) = line
                .rsplit_once(',')
                .ok_or_else(|| bad("expected name,seen|unseen".into()))?;
            let seen = match tag.trim() {
                "seen" => true,
                "unseen" => false,
                other => return Err(bad(format!("unknown tag {other:?}"))),
            };
            let name = name.trim();
            if name.is_empty() {
                return Err(bad("empty class name".into()));
            }
            classes.push((name.to_string(), seen));
        }
        if classes.is_empty() {
            return Err(Error::EmptyInput { op: "vocabulary" });
        }
        Ok(classes)
    }

    /// Inverse of [`parse_classes`](Self::parse_classes).
    pub fn render_classes(&self) -> String {
        let mut out = String::new();
        for (name, seen) in self.names.iter().zip(&self.seen) {
            out.push_str(name);
            out.push(',');
            out.push_str(if *seen { "seen" } else { "unseen" });
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn is_seen(&self, class: usize) -> bool {
        self.seen[class]
    }

    pub fn seen_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&c| self.seen[c]).collect()
    }

    pub fn unseen_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&c| !self.seen[c]).collect()
    }

    pub fn num_seen(&self) -> usize {
        self.seen.iter().filter(|&&s| s).count()
    }

    pub fn num_unseen(&self) -> usize {
        self.len() - self.num_seen()
    }

    /// `[C, d_w]` embedding matrix in vocabulary order.
    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn embedding_dim(&self) -> usize {
        self.embeddings.shape()[1]
    }
}

/// Parses an embedding file and returns rows ordered to match `names`.
pub fn parse_embeddings(text: &str, names: &[String]) -> Result<Tensor> {
    let mut rows: HashMap<String, Vec<f64>> = HashMap::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |detail: String| Error::Format {
            what: format!("embedding line {}", lineno + 1),
            detail,
        };
        let mut fields = line.split_whitespace();
        let name = fields.next().ok_or_else(|| bad("empty record".into()))?;
        let values: Vec<f64> = fields
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| bad(format!("bad value {v:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if values.is_empty() {
            return Err(bad(format!("no values for {name:?}")));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(bad(format!(
                    "dimension {} does not match earlier rows of dimension {d}",
                    values.len()
                )));
            }
            _ => {}
        }
        rows.insert(normalize_name(name), values);
    }
    let dim = dim.ok_or(Error::EmptyInput { op: "embeddings" })?;
    let mut data = Vec::with_capacity(names.len() * dim);
    let mut missing = Vec::new();
    for name in names {
        match rows.get(&normalize_name(name)) {
            Some(v) => data.extend_from_slice(v),
            None => missing.push(name.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Format {
            what: "embeddings".into(),
            detail: format!("missing classes: {}", missing.join(", ")),
        });
    }
    Tensor::from_vec(&[names.len(), dim], data)
}

pub fn load_embeddings(path: &Path, names: &[String]) -> Result<Tensor> {
    parse_embeddings(&std::fs::read_to_string(path)?, names)
}

/// Renders embeddings in the loadable text format. Values print in the
/// shortest form that parses back to the identical float.
pub fn render_embeddings(names: &[String], embeddings: &Tensor) -> Result<String> {
    if embeddings.rank() != 2 || embeddings.shape()[0] != names.len() {
        return Err(Error::InvalidArgument {
            op: "render_embeddings",
            what: format!("expected [{}, d_w], got {:?}", names.len(), embeddings.shape()),
        });
    }
    let dim = embeddings.shape()[1];
    let values = embeddings.values();
    let mut out = String::new();
    for (c, name) in names.iter().enumerate() {
        out.push_str(&name.replace(' ', "-"));
        for v in &values[c * dim..(c + 1) * dim] {
            out.push(' ');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn save_embeddings(path: &Path, names: &[String], embeddings: &Tensor) -> Result<()> {
    std::fs::write(path, render_embeddings(names, embeddings)?)?;
    Ok(())
}

/// Deterministic stand-in for pretrained word vectors. Rows are unit norm
/// and drawn from a shared low-dimensional latent basis, so class vectors
/// are linearly related rather than mutually orthogonal: classes withheld
/// from training stay inside the span of the remaining ones, which is what
/// makes transfer through the shared space possible at all.
pub fn synth_embeddings(c: usize, d_w: usize, seed: u64) -> Tensor {
    assert!(c >= 1 && d_w >= 1, "need at least one class and one dim");
    let latent = (c / 2).clamp(3, d_w.max(1));
    let mut rng = seeded_rng(seed);
    let basis: Vec<f64> = (0..latent * d_w)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(c);
    for _ in 0..c {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _attempt in 0..256 {
            let z: Vec<f64> = (0..latent).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut w = vec![0.0; d_w];
            for (l, zl) in z.iter().enumerate() {
                for (wi, bi) in w.iter_mut().zip(&basis[l * d_w..(l + 1) * d_w]) {
                    *wi += zl * bi;
                }
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                continue;
            }
            for x in &mut w {
                *x /= norm;
            }
            let worst = rows
                .iter()
                .map(|r| r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>().abs())
                .fold(0.0, f64::max);
            if best.as_ref().map_or(true, |(b, _)| worst < *b) {
                best = Some((worst, w.clone()));
            }
            if worst < 0.95 {
                break;
            }
        }
        rows.push(best.expect("resampling produced no candidate").1);
    }
    Tensor::from_vec(&[c, d_w], rows.concat()).expect("embedding shape")
}

/// Projection from word-embedding space into the shared feature space:
/// a two-layer MLP, by default d_w -> 96 -> 128.
#[derive(Clone, Debug)]
pub struct SemanticHead {
    pub g: MlpParams,
}

impl SemanticHead {
    pub fn init(
        d_w: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
        p: Precision,
    ) -> Self {
        SemanticHead {
            g: MlpParams::init(d_w, d_hidden, d_out, rng, p),
        }
    }

    /// `F_s = G(W)`: one shared-space row per class, differentiable.
    pub fn forward(&self, w: &Tensor) -> Result<Tensor> {
        self.g.forward(w)
    }
}

impl ParamSet for SemanticHead {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.g.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.g.visit_mut(prefix, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn small_vocab() -> ClassVocabulary {
        let emb = synth_embeddings(3, 10, 7);
        ClassVocabulary::new(
            vec!["car".into(), "night stand".into(), "sofa".into()],
            vec![true, true, false],
            emb,
        )
        .unwrap()
    }

    #[test]
    fn parse_and_render_classes_round_trip() {
        let text = "# benchmark classes\ncar,seen\nnight stand,seen\n\nsofa,unseen\n";
        let classes = ClassVocabulary::parse_classes(text).unwrap();
        assert_eq!(
            classes,
            vec![
                ("car".to_string(), true),
                ("night stand".to_string(), true),
                ("sofa".to_string(), false),
            ]
        );
        let vocab = small_vocab();
        let rendered = vocab.render_classes();
        let reparsed = ClassVocabulary::parse_classes(&rendered).unwrap();
        assert_eq!(reparsed, classes);
        assert_eq!(vocab.seen_ids(), vec![0, 1]);
        assert_eq!(vocab.unseen_ids(), vec![2]);
        assert_eq!(vocab.num_seen(), 2);
        assert_eq!(vocab.num_unseen(), 1);
    }

    #[test]
    fn parse_rejects_bad_tags_and_duplicates() {
        assert!(matches!(
            ClassVocabulary::parse_classes("car,visible\n"),
            Err(Error::Format { .. })
        ));
        let emb = synth_embeddings(2, 5, 1);
        let dup = ClassVocabulary::new(
            vec!["Car".into(), "car".into()],
            vec![true, false],
            emb,
        );
        assert!(dup.is_err(), "names identical after normalization");
    }

    #[test]
    fn embeddings_load_in_vocabulary_order() {
        let names = vec!["car".to_string()];
        let mut line = String::from("car");
        for i in 0..600 {
            line.push_str(&format!(" {}", i as f64 / 600.0));
        }
        let t = parse_embeddings(&line, &names).unwrap();
        assert_eq!(t.shape(), &[1, 600]);
        assert_eq!(t.at(599), 599.0 / 600.0);
    }

    #[test]
    fn missing_class_is_reported_by_name() {
        let names = vec!["car".to_string(), "truck".to_string()];
        let err = parse_embeddings("car 1.0 2.0\n", &names).unwrap_err();
        assert!(err.to_string().contains("truck"), "{err}");
    }

    #[test]
    fn inconsistent_dimensions_are_a_format_error() {
        let err = parse_embeddings("car 1.0 2.0\ntruck 1.0\n", &["car".to_string()]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn names_match_across_case_and_separators() {
        let names = vec!["Night Stand".to_string()];
        let t = parse_embeddings("NIGHT-STAND 0.25 0.5\n", &names).unwrap();
        assert_eq!(t.values(), vec![0.25, 0.5]);
    }

    #[test]
    fn save_then_load_is_identity() {
        let names = vec!["car".to_string(), "night stand".to_string()];
        let emb = synth_embeddings(2, 37, 123);
        let text = render_embeddings(&names, &emb).unwrap();
        let back = parse_embeddings(&text, &names).unwrap();
        assert_eq!(back.values(), emb.values(), "values must survive bitwise");
    }

    #[test]
    fn synthetic_embeddings_are_unit_norm_spread_and_deterministic() {
        let a = synth_embeddings(8, 600, 42);
        let b = synth_embeddings(8, 600, 42);
        assert_eq!(a.values(), b.values());
        let v = a.values();
        let mut max_cos = 0.0f64;
        for i in 0..8 {
            let ri = &v[i * 600..(i + 1) * 600];
            let norm = ri.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-10, "row {i} norm {norm}");
            for j in 0..i {
                let rj = &v[j * 600..(j + 1) * 600];
                let cos = ri.iter().zip(rj).map(|(a, b)| a * b).sum::<f64>().abs();
                max_cos = max_cos.max(cos);
            }
        }
        assert!(max_cos < 0.95, "max pairwise cosine {max_cos}");
    }

    #[test]
    fn zeroed_projection_maps_every_class_to_the_output_bias() {
        let mut rng = seeded_rng(3);
        let mut head = SemanticHead::init(10, 6, 4, &mut rng, Precision::F64);
        head.g.hidden.weight = Tensor::zeros(&[10, 6]);
        head.g.out.weight = Tensor::zeros(&[6, 4]);
        head.g.out.bias = Tensor::from_vec(&[4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let w = synth_embeddings(5, 10, 9);
        let f_s = head.forward(&w).unwrap();
        assert_eq!(f_s.shape(), &[5, 4]);
        for c in 0..5 {
            assert_eq!(f_s.at2(c, 0), 0.5);
            assert_eq!(f_s.at2(c, 1), -1.0);
            assert_eq!(f_s.at2(c, 2), 2.0);
        }
    }

    #[test]
    fn projection_matches_finite_differences_and_permutes_with_input() {
        let mut rng = seeded_rng(6);
        let head = SemanticHead::init(8, 6, 5, &mut rng, Precision::F64);
        let w = synth_embeddings(4, 8, 11);
        let err = grad_check(|x| head.forward(x)?.reduce_mean(None), &w, 1e-5).unwrap();
        assert!(err <= 1e-4, "{err:e}");

        let perm = [3usize, 1, 0, 2];
        let direct = head.forward(&w.gather_rows(&perm).unwrap()).unwrap();
        let after = head.forward(&w).unwrap().gather_rows(&perm).unwrap();
        assert_eq!(direct.values(), after.values());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut rng = seeded_rng(1);
        let head = SemanticHead::init(8, 6, 5, &mut rng, Precision::F64);
        assert!(head.forward(&Tensor::zeros(&[2, 9])).is_err());
    }
}
