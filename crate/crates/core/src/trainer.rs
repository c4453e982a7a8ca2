//! Training loop: Adam with two learning-rate groups, deterministic
//! batching, section-tagged binary checkpoints with bitwise resume, and
//! evaluation over full ground truth.
//!
//! Parameters whose canonical name starts with `backbone.` form one group
//! (the point and pixel encoders); everything else — the class-embedding
//! head, both enhancement stages, the gate, and the fusion MLPs — forms the
//! second, typically slower, group.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{loss_seen, loss_total, loss_unseen, predict, similarity_matrix};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::metrics::{hiou, ConfusionMatrix, EvalReport};
use crate::model::{forward_scene, Ablation, ModelConfig, ModelState};
use crate::nn::ParamSet;
use crate::semantic_space::ClassVocabulary;
use crate::svfe::SvfeOrder;
use crate::synthscene::Scene;
use crate::tensor::{Precision, Tape, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const CHECKPOINT_MAGIC: [u8; 4] = *b"ZS3C";
const CHECKPOINT_VERSION: u16 = 1;

/// Knobs for one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    /// Learning rate for the `backbone.*` parameter group.
    pub lr_backbone: f64,
    /// Learning rate for every other parameter group.
    pub lr_svfe_sgvf: f64,
    /// Softmax temperature shared by both loss terms.
    pub tau: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub svfe_order: SvfeOrder,
    /// Emit a checkpoint every this many epochs; 0 disables the schedule.
    pub checkpoint_every: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            lr_backbone: 1e-3,
            lr_svfe_sgvf: 3e-4,
            tau: 0.1,
            seed: 0,
            ablation: Ablation::Full,
            svfe_order: SvfeOrder::PointsFirst,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Error::InvalidArgument {
            op: "TrainConfig",
            what,
        };
        if !(self.lr_backbone > 0.0 && self.lr_backbone.is_finite()) {
            return Err(bad(format!("lr_backbone {} must be > 0", self.lr_backbone)));
        }
        if !(self.lr_svfe_sgvf > 0.0 && self.lr_svfe_sgvf.is_finite()) {
            return Err(bad(format!(
                "lr_svfe_sgvf {} must be > 0",
                self.lr_svfe_sgvf
            )));
        }
        if self.batch_size < 1 {
            return Err(bad("batch_size must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(bad(format!("tau {} must be > 0", self.tau)));
        }
        Ok(())
    }
}

/// One in-place Adam update on a flat parameter slice. `step` is 1-based;
/// moments `m`/`v` carry over between calls and start at zero. Any
/// non-finite gradient aborts before touching the weights and the error
/// names the offending parameter.
pub fn adam_update(
    name: &str,
    w: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    step: u64,
) -> Result<()> {
    if w.len() != g.len() || w.len() != m.len() || w.len() != v.len() {
        return Err(Error::InvalidArgument {
            op: "adam_update",
            what: format!(
                "{name}: length mismatch (w {}, g {}, m {}, v {})",
                w.len(),
                g.len(),
                m.len(),
                v.len()
            ),
        });
    }
    if step == 0 {
        return Err(Error::InvalidArgument {
            op: "adam_update",
            what: "step counter must be 1-based".into(),
        });
    }
    if let Some(i) = g.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("gradient of {name} (element {i}) at step {step}"),
        });
    }
    let bc1 = 1.0 - ADAM_BETA1.powi(step.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step.min(i32::MAX as u64) as i32);
    for i in 0..w.len() {
        let gi = g[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        w[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Per-epoch loss summary; every term is the mean over the epoch's scenes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based epoch index.
    pub epoch: u32,
    pub loss_seen: f64,
    pub loss_unseen: f64,
    pub loss_total: f64,
}

/// First/second Adam moments for one parameter tensor, kept at 64-bit
/// regardless of the model's working precision.
#[derive(Clone, Debug)]
struct Moments {
    name: String,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Errors if any scene's ground-truth labels were read since the last taint
/// reset. `op` names the calling context in the error.
pub fn audit_untainted(scenes: &[Scene], op: &'static str) -> Result<()> {
    let tainted: Vec<String> = scenes
        .iter()
        .enumerate()
        .filter(|(_, s)| s.labels.was_read())
        .map(|(i, _)| i.to_string())
        .collect();
    if tainted.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidArgument {
            op,
            what: format!(
                "ground-truth labels of scene(s) {} were read during training",
                tainted.join(", ")
            ),
        })
    }
}

/// Optimizer + model + RNG bundle. All state needed to continue a run
/// lives here and round-trips through [`Trainer::checkpoint_bytes`].
pub struct Trainer {
    pub model: ModelState,
    pub config: TrainConfig,
    pub model_config: ModelConfig,
    /// Content hash of the effective run configuration; echoed into every
    /// artifact this run produces.
    pub config_hash: String,
    /// Full text of the effective run configuration (may be empty).
    pub config_text: String,
    moments: Vec<Moments>,
    rng: ChaCha8Rng,
    step: u64,
    epochs_done: u32,
    /// Total loss of the first batch ever seen; reference point for the
    /// divergence guard. NaN until the first step.
    initial_loss: f64,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        model_config: ModelConfig,
        precision: Precision,
        config_hash: String,
        config_text: String,
    ) -> Result<Trainer> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = ModelState::init(&model_config, config.svfe_order, &mut rng, precision);
        let moments = zero_moments(&model);
        Ok(Trainer {
            model,
            config,
            model_config,
            config_hash,
            config_text,
            moments,
            rng,
            step: 0,
            epochs_done: 0,
            initial_loss: f64::NAN,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epochs_done(&self) -> u32 {
        self.epochs_done
    }

    /// Runs every remaining epoch. After each epoch on the checkpoint
    /// schedule, `sink` (when given) receives the epoch number and the
    /// serialized checkpoint.
    pub fn train(
        &mut self,
        scenes: &[Scene],
        vocab: &ClassVocabulary,
        mut sink: Option<&mut dyn FnMut(u32, Vec<u8>) -> Result<()>>,
    ) -> Result<Vec<EpochLog>> {
        if scenes.is_empty() {
            return Err(Error::EmptyInput { op: "train" });
        }
        let mut logs = Vec::new();
        while self.epochs_done < self.config.epochs {
            let log = self.run_epoch(scenes, vocab)?;
            logs.push(log);
            let every = self.config.checkpoint_every;
            if every > 0 && self.epochs_done % every == 0 {
                if let Some(sink) = sink.as_deref_mut() {
                    sink(self.epochs_done, self.checkpoint_bytes())?;
                }
            }
        }
        Ok(logs)
    }

    /// One pass over `scenes` in a freshly shuffled order: per batch, mean
    /// gradients over the batch, divergence guard, one Adam step. Ground
    /// truth must stay unread throughout; the taint audit at the end
    /// enforces it.
    pub fn run_epoch(&mut self, scenes: &[Scene], vocab: &ClassVocabulary) -> Result<EpochLog> {
        if scenes.is_empty() {
            return Err(Error::EmptyInput { op: "run_epoch" });
        }
        for s in scenes {
            s.labels.reset_taint();
        }
        let emb = embeddings_at(vocab, self.model.precision())?;
        let seen_mask: Vec<bool> = (0..vocab.len()).map(|c| vocab.is_seen(c)).collect();

        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut self.rng);

        let mut sum_ls = 0.0;
        let mut sum_lu = 0.0;
        let mut sum_l = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let mut grad_sums: Vec<Vec<f64>> = self
                .moments
                .iter()
                .map(|mo| vec![0.0; mo.m.len()])
                .collect();
            let mut batch_loss = 0.0;
            for &si in batch {
                let scene = &scenes[si];
                let (ls, lu, l) = accumulate_scene_grads(
                    &self.model,
                    scene,
                    &emb,
                    &seen_mask,
                    &self.config,
                    &mut grad_sums,
                )?;
                sum_ls += ls;
                sum_lu += lu;
                sum_l += l;
                batch_loss += l;
            }
            batch_loss /= batch.len() as f64;
            if self.initial_loss.is_nan() {
                self.initial_loss = batch_loss;
            }
            // Safety net, not a convergence claim: a batch loss at ten times
            // the run's first batch loss (or non-finite) aborts the run. The
            // |initial| floor keeps the threshold meaningful when the first
            // loss is near zero or negative.
            let threshold = 10.0 * self.initial_loss.abs().max(1e-3);
            if !batch_loss.is_finite() || batch_loss > threshold {
                return Err(Error::Diverged {
                    step: (self.step + 1) as usize,
                    loss: batch_loss,
                    initial: self.initial_loss,
                });
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grad_sums {
                for x in g.iter_mut() {
                    *x *= inv;
                }
            }
            self.apply_gradients(&grad_sums)?;
        }

        self.epochs_done += 1;
        audit_untainted(scenes, "run_epoch")?;
        let n = scenes.len() as f64;
        Ok(EpochLog {
            epoch: self.epochs_done,
            loss_seen: sum_ls / n,
            loss_unseen: sum_lu / n,
            loss_total: sum_l / n,
        })
    }

    /// One Adam step from mean gradients aligned with the canonical
    /// parameter order.
    fn apply_gradients(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        self.step += 1;
        let step = self.step;
        let (lr_backbone, lr_rest) = (self.config.lr_backbone, self.config.lr_svfe_sgvf);
        let moments = &mut self.moments;
        let mut idx = 0;
        let mut failure: Option<Error> = None;
        self.model.visit_mut("", &mut |name, t| {
            if failure.is_some() {
                return;
            }
            let mo = &mut moments[idx];
            debug_assert_eq!(mo.name, name);
            let lr = group_lr(&name, lr_backbone, lr_rest);
            let mut w = t.values();
            match adam_update(&name, &mut w, &grads[idx], &mut mo.m, &mut mo.v, lr, step) {
                Ok(()) => match Tensor::from_vec_p(t.shape(), w, t.precision()) {
                    Ok(updated) => *t = updated,
                    Err(e) => failure = Some(e),
                },
                Err(e) => failure = Some(e),
            }
            idx += 1;
        });
        match failure {
            Some(e) => {
                // The aborted step must not count.
                self.step -= 1;
                Err(e)
            }
            None => Ok(()),
        }
    }

    /// Serializes the complete run state (weights, moments, counters, RNG)
    /// as a section-tagged binary with a trailing checksum.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);

        let c = &self.config;
        w.section(b"TRCONF\0\0", |w| {
            w.u32(c.epochs);
            w.u32(c.batch_size as u32);
            w.f64(c.lr_backbone);
            w.f64(c.lr_svfe_sgvf);
            w.f64(c.tau);
            w.u64(c.seed);
            w.u32(c.checkpoint_every);
            let ab = c.ablation.as_str().as_bytes();
            w.u32(ab.len() as u32);
            w.bytes(ab);
            w.u16(match c.svfe_order {
                SvfeOrder::PointsFirst => 0,
                SvfeOrder::ImageFirst => 1,
            });
            w.u16(match self.model.precision() {
                Precision::F32 => 0,
                Precision::F64 => 1,
            });
        });

        let mc = &self.model_config;
        w.section(b"MODELCFG", |w| {
            for dim in [
                mc.d,
                mc.heads,
                mc.td_mlp_hidden,
                mc.fuse_hidden,
                mc.point_hidden,
                mc.image_hidden,
                mc.sem_hidden,
                mc.d_w,
                mc.attr_channels,
                mc.image_channels,
            ] {
                w.u32(dim as u32);
            }
        });

        w.section(b"CONFMETA", |w| {
            w.u32(self.config_hash.len() as u32);
            w.bytes(self.config_hash.as_bytes());
            w.u32(self.config_text.len() as u32);
            w.bytes(self.config_text.as_bytes());
        });

        w.section(b"PARAMS\0\0", |w| {
            let mut entries: Vec<(String, &Tensor)> = Vec::new();
            self.model.visit("", &mut |name, t| entries.push((name, t)));
            w.u32(entries.len() as u32);
            for (name, t) in entries {
                w.u32(name.len() as u32);
                w.bytes(name.as_bytes());
                w.u32(t.rank() as u32);
                for &dim in t.shape() {
                    w.u32(dim as u32);
                }
                for x in t.values() {
                    w.f64(x);
                }
            }
        });

        w.section(b"MOMENTS\0", |w| {
            w.u32(self.moments.len() as u32);
            for mo in &self.moments {
                w.u32(mo.name.len() as u32);
                w.bytes(mo.name.as_bytes());
                w.u32(mo.m.len() as u32);
                for &x in &mo.m {
                    w.f64(x);
                }
                for &x in &mo.v {
                    w.f64(x);
                }
            }
        });

        w.section(b"TRSTATE\0", |w| {
            w.u64(self.step);
            w.u32(self.epochs_done);
            w.f64(self.initial_loss);
        });

        w.section(b"RNG\0\0\0\0\0", |w| {
            w.bytes(&self.rng.get_seed());
            w.u128(self.rng.get_word_pos());
        });

        w.finish()
    }

    /// Restores a run from [`Trainer::checkpoint_bytes`] output. The
    /// continuation is bit-identical to the uninterrupted run.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Trainer> {
        let mut r = Reader::open(bytes, "checkpoint")?;
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.fail("bad magic"));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail(&format!("unsupported version {version}")));
        }

        r.expect_section(b"TRCONF\0\0")?;
        let epochs = r.u32()?;
        let batch_size = r.u32()? as usize;
        let lr_backbone = r.f64()?;
        let lr_svfe_sgvf = r.f64()?;
        let tau = r.f64()?;
        let seed = r.u64()?;
        let checkpoint_every = r.u32()?;
        let ab_len = r.u32()? as usize;
        let ab_bytes = r.take(ab_len)?;
        let ablation: Ablation = std::str::from_utf8(ab_bytes)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format {
                what: "checkpoint".into(),
                detail: "unrecognized ablation name".into(),
            })?;
        let svfe_order = match r.u16()? {
            0 => SvfeOrder::PointsFirst,
            1 => SvfeOrder::ImageFirst,
            other => {
                return Err(r.fail(&format!("unknown enhancement order code {other}")));
            }
        };
        let precision = match r.u16()? {
            0 => Precision::F32,
            1 => Precision::F64,
            other => return Err(r.fail(&format!("unknown precision code {other}"))),
        };

        r.expect_section(b"MODELCFG")?;
        let mut dims = [0usize; 10];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let model_config = ModelConfig {
            d: dims[0],
            heads: dims[1],
            td_mlp_hidden: dims[2],
            fuse_hidden: dims[3],
            point_hidden: dims[4],
            image_hidden: dims[5],
            sem_hidden: dims[6],
            d_w: dims[7],
            attr_channels: dims[8],
            image_channels: dims[9],
        };

        r.expect_section(b"CONFMETA")?;
        let hash_len = r.u32()? as usize;
        let config_hash = String::from_utf8(r.take(hash_len)?.to_vec())
            .map_err(|_| r.fail("config hash is not UTF-8"))?;
        let text_len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(text_len)?.to_vec())
            .map_err(|_| r.fail("config text is not UTF-8"))?;

        let config = TrainConfig {
            epochs,
            batch_size,
            lr_backbone,
            lr_svfe_sgvf,
            tau,
            seed,
            ablation,
            svfe_order,
            checkpoint_every,
        };
        config.validate()?;

        // Shape donor only; every tensor is overwritten below.
        let mut model = ModelState::init(
            &model_config,
            svfe_order,
            &mut ChaCha8Rng::seed_from_u64(0),
            precision,
        );

        r.expect_section(b"PARAMS\0\0")?;
        let n_params = r.u32()? as usize;
        let mut records: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| r.fail("parameter name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let len: usize = shape.iter().product();
            let data = r.f64s(len)?;
            records.push((name, shape, data));
        }
        let mut record_iter = records.into_iter();
        let mut failure: Option<Error> = None;
        model.visit_mut("", &mut |name, t| {
            if failure.is_some() {
                return;
            }
            match record_iter.next() {
                Some((rec_name, shape, data)) if rec_name == name && shape == t.shape() => {
                    match Tensor::from_vec_p(&shape, data, precision) {
                        Ok(loaded) => *t = loaded,
                        Err(e) => failure = Some(e),
                    }
                }
                Some((rec_name, shape, _)) => {
                    failure = Some(Error::Format {
                        what: "checkpoint".into(),
                        detail: format!(
                            "parameter mismatch: file has {rec_name} {shape:?}, model expects {name} {:?}",
                            t.shape()
                        ),
                    });
                }
                None => {
                    failure = Some(Error::Format {
                        what: "checkpoint".into(),
                        detail: format!("missing parameter {name}"),
                    });
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if record_iter.next().is_some() {
            return Err(Error::Format {
                what: "checkpoint".into(),
                detail: "extra parameter records after the model was filled".into(),
            });
        }

        r.expect_section(b"MOMENTS\0")?;
        let n_moments = r.u32()? as usize;
        let mut moments = Vec::with_capacity(n_moments);
        for _ in 0..n_moments {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| r.fail("moment name is not UTF-8"))?;
            let len = r.u32()? as usize;
            let m = r.f64s(len)?;
            let v = r.f64s(len)?;
            moments.push(Moments { name, m, v });
        }
        let expected = zero_moments(&model);
        if moments.len() != expected.len()
            || moments
                .iter()
                .zip(&expected)
                .any(|(a, b)| a.name != b.name || a.m.len() != b.m.len())
        {
            return Err(Error::Format {
                what: "checkpoint".into(),
                detail: "optimizer moments do not match the model layout".into(),
            });
        }

        r.expect_section(b"TRSTATE\0")?;
        let step = r.u64()?;
        let epochs_done = r.u32()?;
        let initial_loss = r.f64()?;

        r.expect_section(b"RNG\0\0\0\0\0")?;
        let seed_bytes: [u8; 32] = r.take(32)?.try_into().expect("fixed-size take");
        let word_pos = r.u128()?;
        r.finish()?;

        let mut rng = ChaCha8Rng::from_seed(seed_bytes);
        rng.set_word_pos(word_pos);

        Ok(Trainer {
            model,
            config,
            model_config,
            config_hash,
            config_text,
            moments,
            rng,
            step,
            epochs_done,
            initial_loss,
        })
    }
}

fn zero_moments(model: &ModelState) -> Vec<Moments> {
    let mut out = Vec::new();
    model.visit("", &mut |name, t| {
        out.push(Moments {
            name,
            m: vec![0.0; t.len()],
            v: vec![0.0; t.len()],
        });
    });
    out
}

fn group_lr(name: &str, lr_backbone: f64, lr_rest: f64) -> f64 {
    if name.starts_with("backbone.") {
        lr_backbone
    } else {
        lr_rest
    }
}

fn embeddings_at(vocab: &ClassVocabulary, p: Precision) -> Result<Tensor> {
    let e = vocab.embeddings();
    if e.precision() == p {
        Ok(e.clone())
    } else {
        e.to_precision(p)
    }
}

/// Forward + backward on one scene; gradients are added into `grad_sums`
/// (canonical parameter order, missing gradients count as zero). Returns
/// the scene's `(L_s, L_u, L)` values.
fn accumulate_scene_grads(
    model: &ModelState,
    scene: &Scene,
    emb: &Tensor,
    seen_mask: &[bool],
    config: &TrainConfig,
    grad_sums: &mut [Vec<f64>],
) -> Result<(f64, f64, f64)> {
    let tape = Tape::new();
    let mut bound = model.clone();
    bound.bind(&tape);
    let out = forward_scene(&bound, scene, emb, config.ablation)?;
    let sim = similarity_matrix(&out.fusion, &out.sem)?;
    let ls = loss_seen(&sim, &scene.train_labels, config.tau)?;
    let (lu, n_unlabeled) = loss_unseen(&sim, &scene.train_labels, seen_mask, config.tau)?;
    let total = if n_unlabeled == 0 {
        ls.clone()
    } else {
        loss_total(&ls, &lu)?
    };
    let ls_val = ls.values()[0];
    let lu_val = if n_unlabeled == 0 { 0.0 } else { lu.values()[0] };
    let total_val = total.values()[0];

    let grads = total.backward()?;
    let mut idx = 0;
    bound.visit("", &mut |_, t| {
        if let Some(g) = grads.wrt(t) {
            let sum = &mut grad_sums[idx];
            for (acc, x) in sum.iter_mut().zip(g.values()) {
                *acc += x;
            }
        }
        idx += 1;
    });
    Ok((ls_val, lu_val, total_val))
}

/// Runs `predict_fn` over every scene, accumulates a confusion matrix
/// against the full ground truth (unseen classes included), and summarizes
/// it. This is evaluation: reading ground truth here is intended.
pub fn eval_with_predictor(
    scenes: &[Scene],
    vocab: &ClassVocabulary,
    config_hash: &str,
    seed: u64,
    mut predict_fn: impl FnMut(&Scene) -> Result<Vec<u32>>,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput { op: "evaluate" });
    }
    let mut conf = ConfusionMatrix::new(vocab.len());
    for scene in scenes {
        let pred = predict_fn(scene)?;
        conf.accumulate(scene.labels.values(), &pred)?;
    }
    let iou = conf.iou_per_class();
    let all: Vec<usize> = (0..vocab.len()).collect();
    let miou_seen = conf.miou(&vocab.seen_ids())?;
    let miou_unseen = conf.miou(&vocab.unseen_ids())?;
    let miou_all = conf.miou(&all)?;
    Ok(EvalReport {
        config_hash: config_hash.to_string(),
        seed,
        class_names: vocab.names().to_vec(),
        class_seen: (0..vocab.len()).map(|c| vocab.is_seen(c)).collect(),
        iou,
        miou_seen,
        miou_unseen,
        miou_all,
        hiou: hiou(miou_seen, miou_unseen),
        notices: Vec::new(),
    })
}

/// Class predictions for one scene under the given wiring.
pub fn predict_scene(
    model: &ModelState,
    scene: &Scene,
    vocab: &ClassVocabulary,
    ablation: Ablation,
) -> Result<Vec<u32>> {
    let emb = embeddings_at(vocab, model.precision())?;
    let out = forward_scene(model, scene, &emb, ablation)?;
    let sim = similarity_matrix(&out.fusion, &out.sem)?;
    predict(&sim)
}

/// Evaluates a trained model over `scenes` against full ground truth.
pub fn evaluate(
    model: &ModelState,
    scenes: &[Scene],
    vocab: &ClassVocabulary,
    ablation: Ablation,
    config_hash: &str,
    seed: u64,
) -> Result<EvalReport> {
    eval_with_predictor(scenes, vocab, config_hash, seed, |scene| {
        predict_scene(model, scene, vocab, ablation)
    })
}
