//! Run configuration: a TOML file merging the scene, model, and training
//! settings, with defaults for every field, dotted-path `--set` overrides,
//! and a content hash that stamps every output artifact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use zeroseg::error::{Error, Result};
use zeroseg::geometry::CameraModel;
use zeroseg::model::{Ablation, ModelConfig};
use zeroseg::semantic_space::synth_embeddings;
use zeroseg::svfe::SvfeOrder;
use zeroseg::synthscene::{desk_spec, SceneSpec};
use zeroseg::tensor::Precision;
use zeroseg::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneSection,
    pub model: ModelSection,
    pub train: TrainSection,
}

/// Synthetic-benchmark shape: classes, point budgets, image, and camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub class_names: Vec<String>,
    pub class_seen: Vec<bool>,
    /// Class pairs sharing geometry and attributes, distinguished only by
    /// image appearance.
    pub image_only_pairs: Vec<(usize, usize)>,
    pub points_per_class: (u32, u32),
    pub pair_points_per_class: (u32, u32),
    pub attr_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub sigma_geo: f64,
    pub sigma_img: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        let spec = desk_spec(0);
        SceneSection {
            class_names: spec.class_names.clone(),
            class_seen: spec.class_seen.clone(),
            image_only_pairs: spec.image_only_pairs.clone(),
            points_per_class: spec.points_per_class,
            pair_points_per_class: spec.pair_points_per_class,
            attr_channels: spec.attr_channels,
            image_height: spec.image_size.0,
            image_width: spec.image_size.1,
            image_channels: spec.image_channels,
            fx: spec.camera.fx,
            fy: spec.camera.fy,
            cx: spec.camera.cx,
            cy: spec.camera.cy,
            sigma_geo: spec.sigma_geo,
            sigma_img: spec.sigma_img,
        }
    }
}

/// Network widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d: usize,
    pub heads: usize,
    pub td_mlp_hidden: usize,
    pub fuse_hidden: usize,
    pub point_hidden: usize,
    pub image_hidden: usize,
    pub sem_hidden: usize,
    /// Word-embedding width; also the width of generated embeddings.
    pub d_w: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            d: m.d,
            heads: m.heads,
            td_mlp_hidden: m.td_mlp_hidden,
            fuse_hidden: m.fuse_hidden,
            point_hidden: m.point_hidden,
            image_hidden: m.image_hidden,
            sem_hidden: m.sem_hidden,
            d_w: m.d_w,
        }
    }
}

/// Optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_svfe_sgvf: f64,
    pub tau: f64,
    pub seed: u64,
    pub ablation: String,
    pub svfe_order: String,
    pub checkpoint_every: u32,
    pub precision: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_backbone: t.lr_backbone,
            lr_svfe_sgvf: t.lr_svfe_sgvf,
            tau: t.tau,
            seed: t.seed,
            ablation: t.ablation.to_string(),
            svfe_order: "points_first".to_string(),
            checkpoint_every: t.checkpoint_every,
            precision: "f32".to_string(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.scene;
        let c = s.class_names.len();
        if c == 0 {
            return Err(Error::Config("scene.class_names must not be empty".into()));
        }
        if s.class_seen.len() != c {
            return Err(Error::Config(format!(
                "scene.class_seen has {} entries for {} classes",
                s.class_seen.len(),
                c
            )));
        }
        for &(a, b) in &s.image_only_pairs {
            if a >= c || b >= c {
                return Err(Error::Config(format!(
                    "scene.image_only_pairs entry ({a}, {b}) out of range for {c} classes"
                )));
            }
        }
        for (name, (lo, hi)) in [
            ("points_per_class", s.points_per_class),
            ("pair_points_per_class", s.pair_points_per_class),
        ] {
            if lo == 0 || hi < lo {
                return Err(Error::Config(format!(
                    "scene.{name} must be a non-empty ascending range, got ({lo}, {hi})"
                )));
            }
        }
        self.train_config()?;
        self.precision()?;
        Ok(())
    }

    /// Builds the generator spec for `seed`; embeddings and coupling
    /// matrices derive from the same seed.
    pub fn scene_spec(&self, seed: u64) -> Result<SceneSpec> {
        self.validate()?;
        let s = &self.scene;
        let mut spec = desk_spec(seed);
        spec.class_names = s.class_names.clone();
        spec.class_seen = s.class_seen.clone();
        spec.embeddings = synth_embeddings(s.class_names.len(), self.model.d_w, seed);
        spec.points_per_class = s.points_per_class;
        spec.pair_points_per_class = s.pair_points_per_class;
        spec.attr_channels = s.attr_channels;
        spec.image_size = (s.image_height, s.image_width);
        spec.image_channels = s.image_channels;
        spec.camera = CameraModel::with_identity_pose(
            s.fx,
            s.fy,
            s.cx,
            s.cy,
            s.image_width,
            s.image_height,
        )?;
        spec.sigma_geo = s.sigma_geo;
        spec.sigma_img = s.sigma_img;
        spec.image_only_pairs = s.image_only_pairs.clone();
        Ok(spec)
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            d: m.d,
            heads: m.heads,
            td_mlp_hidden: m.td_mlp_hidden,
            fuse_hidden: m.fuse_hidden,
            point_hidden: m.point_hidden,
            image_hidden: m.image_hidden,
            sem_hidden: m.sem_hidden,
            d_w: m.d_w,
            attr_channels: self.scene.attr_channels,
            image_channels: self.scene.image_channels,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let config = TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_backbone: t.lr_backbone,
            lr_svfe_sgvf: t.lr_svfe_sgvf,
            tau: t.tau,
            seed: t.seed,
            ablation: t.ablation.parse::<Ablation>()?,
            svfe_order: parse_order(&t.svfe_order)?,
            checkpoint_every: t.checkpoint_every,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn precision(&self) -> Result<Precision> {
        match self.train.precision.as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "unknown train.precision {other:?}; valid values: f32, f64"
            ))),
        }
    }
}

fn parse_order(s: &str) -> Result<SvfeOrder> {
    match s {
        "points_first" => Ok(SvfeOrder::PointsFirst),
        "image_first" => Ok(SvfeOrder::ImageFirst),
        other => Err(Error::Config(format!(
            "unknown train.svfe_order {other:?}; valid values: points_first, image_first"
        ))),
    }
}

/// The effective configuration: parsed struct, canonical text, and the
/// hash of that text.
#[derive(Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub text: String,
    pub hash: String,
}

/// Reads `path` (or starts from defaults), applies `--set key=value`
/// overrides, validates, and canonicalizes. Unknown keys — in the file or
/// in an override path — are rejected.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<LoadedConfig> {
    let base_text = match path {
        Some(p) => std::fs::read_to_string(p)?,
        None => render_config(&RunConfig::default())?,
    };
    let mut value: toml::Value = toml::from_str(&base_text)
        .map_err(|e| Error::Config(format!("configuration is not valid TOML: {e}")))?;
    for entry in sets {
        apply_set(&mut value, entry)?;
    }
    let config: RunConfig = value
        .try_into()
        .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
    config.validate()?;
    let text = render_config(&config)?;
    let hash = hex_sha256(&text);
    Ok(LoadedConfig { config, text, hash })
}

pub fn render_config(config: &RunConfig) -> Result<String> {
    toml::to_string(config).map_err(|e| Error::Config(format!("configuration render failed: {e}")))
}

fn apply_set(root: &mut toml::Value, entry: &str) -> Result<()> {
    let bad = |detail: String| Error::Config(format!("--set {entry:?}: {detail}"));
    let (key, raw) = entry
        .split_once('=')
        .ok_or_else(|| bad("expected key=value".into()))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(bad("empty path segment".into()));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| bad(format!("{part:?} is not a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let leaf = parts[parts.len() - 1];
    node.as_table_mut()
        .ok_or_else(|| bad(format!("{key:?} does not address a table entry")))?
        .insert(leaf.to_string(), parse_literal(raw));
    Ok(())
}

/// Interprets the value side of `--set`: any TOML literal (number, bool,
/// array, quoted string); bare words fall back to strings.
fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    if let Ok(toml::Value::Table(mut t)) = toml::from_str::<toml::Value>(&wrapped) {
        if let Some(v) = t.remove("v") {
            return v;
        }
    }
    toml::Value::String(raw.to_string())
}

pub fn hex_sha256(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_hash_is_stable() {
        let a = load_config(None, &[]).unwrap();
        let b = load_config(None, &[]).unwrap();
        assert_eq!(a.text, b.text);
        assert_eq!(a.hash, b.hash);
        assert_eq!(a.hash.len(), 64);
        let reparsed: RunConfig = toml::from_str(&a.text).unwrap();
        assert_eq!(reparsed, a.config);
        assert_eq!(a.config.scene.class_names.len(), 8);
        assert_eq!(a.config.model.d, 128);
    }

    #[test]
    fn overrides_reach_nested_fields_and_change_the_hash() {
        let base = load_config(None, &[]).unwrap();
        let over = load_config(
            None,
            &[
                "train.epochs=9".to_string(),
                "scene.sigma_geo=0.5".to_string(),
                "train.ablation=no_sgvf".to_string(),
                "scene.class_names=[\"a\",\"b\"]".to_string(),
                "scene.class_seen=[true,false]".to_string(),
                "scene.image_only_pairs=[]".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(over.config.train.epochs, 9);
        assert_eq!(over.config.scene.sigma_geo, 0.5);
        assert_eq!(over.config.train.ablation, "no_sgvf");
        assert_eq!(over.config.scene.class_names, vec!["a", "b"]);
        assert_ne!(base.hash, over.hash);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = load_config(None, &["scene.bogus=1".to_string()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("bogus"), "{err}");
        let err = load_config(None, &["typo=1".to_string()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("typo"), "{err}");
    }

    #[test]
    fn invalid_settings_name_the_field() {
        let cases = [
            ("train.precision=f16", "precision"),
            ("train.svfe_order=sideways", "svfe_order"),
            ("train.ablation=bogus", "bogus"),
            ("scene.class_seen=[true]", "class_seen"),
            ("scene.points_per_class=[40,10]", "points_per_class"),
            ("scene.image_only_pairs=[[0,99]]", "image_only_pairs"),
        ];
        for (set, needle) in cases {
            let err = load_config(None, &[set.to_string()])
                .unwrap_err()
                .to_string();
            assert!(err.contains(needle), "{set}: {err}");
        }
    }

    #[test]
    fn malformed_set_entries_are_rejected()
    {
        for entry in ["no_equals", "a..b=1", "=1"] {
            assert!(load_config(None, &[entry.to_string()]).is_err(), "{entry}");
        }
    }

    #[test]
    fn spec_and_train_config_mirror_the_sections() {
        let loaded = load_config(
            None,
            &[
                "scene.image_height=24".to_string(),
                "scene.image_width=24".to_string(),
                "scene.fx=21.6".to_string(),
                "scene.fy=21.6".to_string(),
                "scene.cx=12.0".to_string(),
                "scene.cy=12.0".to_string(),
                "model.d_w=24".to_string(),
                "train.seed=5".to_string(),
            ],
        )
        .unwrap();
        let spec = loaded.config.scene_spec(3).unwrap();
        assert_eq!(spec.image_size, (24, 24));
        assert_eq!(spec.embeddings.shape(), &[8, 24]);
        assert_eq!(spec.camera.width, 24);
        let tc = loaded.config.train_config().unwrap();
        assert_eq!(tc.seed, 5);
        let mc = loaded.config.model_config();
        assert_eq!(mc.d_w, 24);
        assert_eq!(mc.image_channels, 3);
    }
}
