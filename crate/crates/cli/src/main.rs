//! `zeroseg` — workbench for zero-shot point-cloud segmentation on the
//! synthetic desk-scale benchmark: dataset generation, training,
//! evaluation, gradient verification, and feature-relationship export.
//!
//! Exit codes: 0 success, 1 verification or training failure, 2 usage or
//! IO error.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use config::{load_config, LoadedConfig};
use zeroseg::binio::crc32;
use zeroseg::error::Error;
use zeroseg::plot::{mean_class_distance, render_rows, render_svg, stage_rows, Stage};
use zeroseg::semantic_space::{load_embeddings, save_embeddings, ClassVocabulary};
use zeroseg::synthscene::{dataset, scene_from_bytes, scene_to_bytes, Scene};
use zeroseg::trainer::{eval_with_predictor, evaluate, Trainer};
use zeroseg::verification::{first_failure, gradcheck_suite, render_reports};

#[derive(Parser)]
#[command(
    name = "zeroseg",
    version,
    about = "Zero-shot point-cloud segmentation workbench"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: scene files, vocabulary, manifest.
    Generate {
        /// Configuration file (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes to generate.
        #[arg(long)]
        scenes: usize,
        /// Dataset seed; embeddings and scene content derive from it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override a config field, e.g. --set scene.sigma_geo=0.5
        /// (repeatable; any field in the config file can be set).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory produced by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
        /// Model wiring variant (shorthand for --set train.ablation=...).
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint: per-class IoU and the headline averages.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Score a ground-truth passthrough instead of the model
        /// (pipeline self-check; must yield 100).
        #[arg(long, default_value_t = false)]
        oracle: bool,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Test hook: corrupt the named block's reverse pass.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Export the 2D semantic-visual feature table for one scene.
    Plot {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A scene file from a generated dataset.
        #[arg(long)]
        scene: PathBuf,
        /// One of: pre_svfe, post_svfe, post_sgvf.
        #[arg(long)]
        stage: String,
        /// Output table path (tab-separated text).
        #[arg(long)]
        out: PathBuf,
        /// Also write a scatter plot to this SVG file.
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Directory holding classes.txt and embeddings.txt; defaults to
        /// the scene file's directory.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for anything the caller can fix (arguments, config, files); 1 for a
/// genuine verification or training failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_)
        | Error::Format { .. }
        | Error::Config(_)
        | Error::InvalidArgument { .. }
        | Error::EmptyInput { .. } => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> zeroseg::Result<()> {
    match cli.command {
        Command::Generate {
            config,
            out,
            scenes,
            seed,
            set,
        } => cmd_generate(config.as_deref(), &out, scenes, seed, &set),
        Command::Train {
            config,
            data,
            out,
            ablation,
            set,
        } => cmd_train(config.as_deref(), &data, &out, ablation, &set),
        Command::Eval {
            checkpoint,
            data,
            report,
            oracle,
        } => cmd_eval(&checkpoint, &data, report.as_deref(), oracle),
        Command::Gradcheck {
            config,
            seed,
            inject_fault,
            set,
        } => cmd_gradcheck(config.as_deref(), seed, inject_fault.as_deref(), &set),
        Command::Plot {
            checkpoint,
            scene,
            stage,
            out,
            svg,
            data,
        } => cmd_plot(
            &checkpoint,
            &scene,
            &stage,
            &out,
            svg.as_deref(),
            data.as_deref(),
        ),
    }
}

/// The effective config text with its own hash stamped on top.
fn stamp_toml(loaded: &LoadedConfig) -> String {
    format!("# config_hash {}\n{}", loaded.hash, loaded.text)
}

fn cmd_generate(
    config: Option<&Path>,
    out: &Path,
    n: usize,
    seed: u64,
    sets: &[String],
) -> zeroseg::Result<()> {
    let loaded = load_config(config, sets)?;
    let spec = loaded.config.scene_spec(seed)?;
    let scenes = dataset(&spec, n, seed)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), stamp_toml(&loaded))?;
    let vocab = ClassVocabulary::new(
        spec.class_names.clone(),
        spec.class_seen.clone(),
        spec.embeddings.clone(),
    )?;
    fs::write(out.join("classes.txt"), vocab.render_classes())?;
    save_embeddings(&out.join("embeddings.txt"), vocab.names(), vocab.embeddings())?;

    let mut manifest = String::from("# dataset manifest\n");
    manifest.push_str(&format!("# config_hash {}\n", loaded.hash));
    manifest.push_str(&format!("# seed {seed}\n"));
    manifest.push_str(&format!("# scenes {n}\n"));
    manifest.push_str("file\tbytes\tcrc32\n");
    for (i, scene) in scenes.iter().enumerate() {
        let name = format!("scene_{i:04}.zs3s");
        let bytes = scene_to_bytes(scene);
        fs::write(out.join(&name), &bytes)?;
        manifest.push_str(&format!("{name}\t{}\t{:08x}\n", bytes.len(), crc32(&bytes)));
    }
    fs::write(out.join("manifest.tsv"), manifest)?;
    println!(
        "wrote {n} scene(s) to {} (config {})",
        out.display(),
        &loaded.hash[..12]
    );
    Ok(())
}

/// Loads every `.zs3s` file (sorted by name) plus the vocabulary files
/// from a dataset directory.
fn load_dataset(data: &Path) -> zeroseg::Result<(Vec<Scene>, ClassVocabulary)> {
    let vocab = load_vocab(data)?;
    let mut names: Vec<String> = Vec::new();
    for entry in fs::read_dir(data)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name.ends_with(".zs3s") {
            names.push(name);
        }
    }
    names.sort();
    let mut scenes = Vec::with_capacity(names.len());
    for name in &names {
        scenes.push(scene_from_bytes(&fs::read(data.join(name))?)?);
    }
    Ok((scenes, vocab))
}

fn load_vocab(dir: &Path) -> zeroseg::Result<ClassVocabulary> {
    let classes = ClassVocabulary::parse_classes(&fs::read_to_string(dir.join("classes.txt"))?)?;
    let (names, seen): (Vec<String>, Vec<bool>) = classes.into_iter().unzip();
    let embeddings = load_embeddings(&dir.join("embeddings.txt"), &names)?;
    ClassVocabulary::new(names, seen, embeddings)
}

fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    ablation: Option<String>,
    sets: &[String],
) -> zeroseg::Result<()> {
    let mut sets = sets.to_vec();
    if let Some(name) = ablation {
        sets.push(format!("train.ablation={name}"));
    }
    let loaded = load_config(config, &sets)?;
    let train_config = loaded.config.train_config()?;
    let model_config = loaded.config.model_config();
    let precision = loaded.config.precision()?;
    let (scenes, vocab) = load_dataset(data)?;
    if scenes.is_empty() {
        return Err(Error::EmptyInput { op: "train" });
    }

    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), stamp_toml(&loaded))?;
    let mut trainer = Trainer::new(
        train_config,
        model_config,
        precision,
        loaded.hash.clone(),
        loaded.text.clone(),
    )?;
    let out_dir = out.to_path_buf();
    let mut sink = |epoch: u32, bytes: Vec<u8>| -> zeroseg::Result<()> {
        fs::write(
            out_dir.join(format!("checkpoint_epoch_{epoch:04}.zs3c")),
            bytes,
        )?;
        Ok(())
    };
    let logs = trainer.train(&scenes, &vocab, Some(&mut sink))?;
    fs::write(out.join("checkpoint_final.zs3c"), trainer.checkpoint_bytes())?;

    let mut log_text = format!(
        "# config_hash {}\nepoch\tloss_seen\tloss_unseen\tloss_total\n",
        loaded.hash
    );
    for l in &logs {
        log_text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            l.epoch, l.loss_seen, l.loss_unseen, l.loss_total
        ));
    }
    fs::write(out.join("train_log.tsv"), &log_text)?;
    print!("{log_text}");
    println!(
        "final checkpoint: {}",
        out.join("checkpoint_final.zs3c").display()
    );
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    report: Option<&Path>,
    oracle: bool,
) -> zeroseg::Result<()> {
    let trainer = Trainer::from_checkpoint_bytes(&fs::read(checkpoint)?)?;
    let (scenes, vocab) = load_dataset(data)?;
    let result = if oracle {
        eval_with_predictor(
            &scenes,
            &vocab,
            &trainer.config_hash,
            trainer.config.seed,
            |scene| Ok(scene.labels.values().to_vec()),
        )?
    } else {
        evaluate(
            &trainer.model,
            &scenes,
            &vocab,
            trainer.config.ablation,
            &trainer.config_hash,
            trainer.config.seed,
        )?
    };
    let text = result.render();
    print!("{text}");
    if let Some(path) = report {
        fs::write(path, &text)?;
    }
    Ok(())
}

fn cmd_gradcheck(
    config: Option<&Path>,
    seed: u64,
    fault: Option<&str>,
    sets: &[String],
) -> zeroseg::Result<()> {
    if config.is_some() || !sets.is_empty() {
        let loaded = load_config(config, sets)?;
        println!("# config_hash {}", loaded.hash);
    }
    let reports = gradcheck_suite(seed, fault)?;
    print!("{}", render_reports(&reports));
    if let Some(failed) = first_failure(&reports) {
        return Err(Error::GradCheckFailed {
            block: failed.block.to_string(),
            max_rel_err: failed.max_rel_err,
        });
    }
    Ok(())
}

fn cmd_plot(
    checkpoint: &Path,
    scene_path: &Path,
    stage: &str,
    out: &Path,
    svg: Option<&Path>,
    data: Option<&Path>,
) -> zeroseg::Result<()> {
    let stage: Stage = stage.parse()?;
    let trainer = Trainer::from_checkpoint_bytes(&fs::read(checkpoint)?)?;
    let scene = scene_from_bytes(&fs::read(scene_path)?)?;
    let vocab_dir = match data {
        Some(d) => d.to_path_buf(),
        None => scene_path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf(),
    };
    let vocab = load_vocab(&vocab_dir)?;
    let rows = stage_rows(&trainer.model, &scene, &vocab, stage)?;
    let table = format!(
        "# config_hash {}\n# stage {stage}\n{}",
        trainer.config_hash,
        render_rows(&rows)
    );
    fs::write(out, &table)?;
    if let Some(svg_path) = svg {
        let graphic = format!(
            "<!-- config_hash {} -->\n{}",
            trainer.config_hash,
            render_svg(&rows, &format!("stage {stage}"))
        );
        fs::write(svg_path, graphic)?;
    }
    println!(
        "stage {stage}: mean semantic-visual distance {}",
        mean_class_distance(&rows)?
    );
    println!("wrote {}", out.display());
    Ok(())
}
