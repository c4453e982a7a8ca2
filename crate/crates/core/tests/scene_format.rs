//! Freezes the on-disk scene format against a committed golden file, so a
//! file written by any build of this crate keeps loading on every platform.

use std::path::PathBuf;

use zeroseg::geometry::CameraModel;
use zeroseg::semantic_space::synth_embeddings;
use zeroseg::synthscene::{
    generate_scene, load_scene, save_scene, scene_to_bytes, SceneSpec,
};

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_scene.zs3s")
}

/// The exact spec the golden file was generated from. Frozen: changing it
/// (or any generator constant it exercises) requires regenerating the file
/// with GOLDEN_REGEN=1 and re-freezing the spot checks below.
fn golden_spec() -> SceneSpec {
    SceneSpec {
        class_names: ["north", "south", "east", "west"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        class_seen: vec![true, true, true, false],
        embeddings: synth_embeddings(4, 24, 9),
        points_per_class: (6, 9),
        pair_points_per_class: (4, 5),
        attr_channels: 2,
        image_size: (16, 16),
        image_channels: 3,
        camera: CameraModel::with_identity_pose(14.4, 14.4, 8.0, 8.0, 16, 16).unwrap(),
        sigma_geo: 1.0,
        sigma_img: 0.02,
        image_only_pairs: vec![(1, 3)],
        coupling_seed: 77,
    }
}

#[test]
fn golden_scene_file_loads_and_round_trips() {
    let path = golden_path();
    if std::env::var_os("GOLDEN_REGEN").is_some() {
        let scene = generate_scene(&golden_spec(), 2024).unwrap();
        save_scene(&scene, &path).unwrap();
        let mut bits = String::new();
        for (i, axis) in [(0usize, 0usize), (0, 2), (5, 1)] {
            bits.push_str(&format!(
                "({i}, {axis}) -> 0x{:016x}\n",
                scene.points.at2(i, axis).to_bits()
            ));
        }
        panic!("golden file regenerated; refreeze spot checks:\n{bits}");
    }

    let raw = std::fs::read(&path).expect("golden scene file must be committed");
    let scene = load_scene(&path).unwrap();

    // Byte-for-byte stability: serializing the loaded scene reproduces the
    // committed file exactly.
    assert_eq!(scene_to_bytes(&scene), raw);

    // Structural spot checks.
    let spec = golden_spec();
    assert_eq!(scene.points.shape(), &[scene.num_points(), 3]);
    assert_eq!(scene.attrs.shape(), &[scene.num_points(), 2]);
    assert_eq!(scene.image.shape(), &[16, 16, 3]);
    assert_eq!(scene.camera.width, 16);
    assert_eq!(scene.camera.fx, 14.4);
    assert_eq!(scene.labels.values().len(), scene.num_points());
    for (&full, &train) in scene.labels.values().iter().zip(&scene.train_labels) {
        assert!((full as usize) < spec.num_classes());
        if spec.class_seen[full as usize] {
            assert_eq!(train, full);
        } else {
            assert_eq!(train, zeroseg::semantic_space::UNLABELED);
        }
    }

    // Exact payload bits, frozen from the committed file; these fail if a
    // reader ever misparses endianness or section layout.
    assert_eq!(scene.points.at2(0, 0).to_bits(), GOLDEN_POINT_BITS[0]);
    assert_eq!(scene.points.at2(0, 2).to_bits(), GOLDEN_POINT_BITS[1]);
    assert_eq!(scene.points.at2(5, 1).to_bits(), GOLDEN_POINT_BITS[2]);

    // Regenerating from the frozen spec still reproduces the exact file.
    let regen = generate_scene(&spec, 2024).unwrap();
    assert_eq!(scene_to_bytes(&regen), raw);
}

const GOLDEN_POINT_BITS: [u64; 3] = [
    0xc0147b426fa295fc,
    0xbfeda713cb45eb65,
    0x3ff224906f3bb593,
];
