//! Training: configuration, aligned augmentation, batching, the update
//! step, and the logged loop with periodic checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::ModelConfig;
use crate::checkpoint::{Checkpoint, TrainState};
use crate::dam::LossWeights;
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::image::{Image, Mask};
use crate::metrics::psnr;
use crate::model::{Model, Targets, Variant};
use crate::optim::{Adam, AdamConfig, LrDecay, LrScheduler};
use crate::raingen::{compute_soft_mask, mix_seed, SamplePair};
use crate::tensor::{Scalar, Tensor};

pub const METRICS_LOG: &str = "metrics.tsv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub batch_size: usize,
    pub crop: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lr_decay: LrDecay,
    /// Iterations at which the step schedule decays.
    pub lr_milestones: Vec<usize>,
    pub lr_step_factor: f64,
    pub plateau_window: usize,
    pub plateau_improvement: f64,
    /// Required; there is no meaningful default.
    pub max_iters: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub flip: bool,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    pub fp64: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::DamDual,
            batch_size: 4,
            crop: 112,
            lr_start: 1e-4,
            lr_end: 1e-6,
            lr_decay: LrDecay::Plateau,
            lr_milestones: Vec::new(),
            lr_step_factor: 0.1,
            plateau_window: 1000,
            plateau_improvement: 0.01,
            max_iters: 0,
            seed: 0,
            alpha: 0.8,
            beta1: 1.0,
            beta2: 0.3,
            grad_clip: 5.0,
            flip: true,
            checkpoint_every: 1000,
            fp64: false,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta1: self.beta1,
            beta2: self.beta2,
        }
    }

    pub fn scheduler(&self) -> LrScheduler {
        match self.lr_decay {
            LrDecay::Plateau => LrScheduler::plateau(
                self.lr_start,
                self.lr_end,
                self.plateau_window,
                self.plateau_improvement,
            ),
            LrDecay::Step => LrScheduler::step(
                self.lr_start,
                self.lr_end,
                self.lr_milestones.clone(),
                self.lr_step_factor,
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.crop < crate::model::MIN_SIDE {
            return Err(Error::config(format!("crop must be >= {}", crate::model::MIN_SIDE)));
        }
        if self.max_iters == 0 {
            return Err(Error::config("max_iters must be set to a positive value"));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_end <= self.lr_start) {
            return Err(Error::config("need 0 < lr_end <= lr_start"));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::config("grad_clip must be >= 0"));
        }
        self.weights().validate()
    }

    /// Reject datasets with images smaller than the crop.
    pub fn check_dataset(&self, pairs: &[SamplePair]) -> Result<()> {
        if pairs.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        for p in pairs {
            let (h, w) = (p.clean.height(), p.clean.width());
            if h < self.crop || w < self.crop {
                return Err(Error::Dataset {
                    id: p.id.clone(),
                    reason: format!("{h}x{w} is smaller than crop {}", self.crop),
                });
            }
        }
        Ok(())
    }
}

/// A training pair plus the soft mask of its full rainy-clean residual.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub pair: SamplePair,
    pub total: Mask,
}

impl TrainPair {
    pub fn new(pair: SamplePair) -> Result<Self> {
        let total = compute_soft_mask(&pair.rainy, &pair.clean)?;
        Ok(TrainPair { pair, total })
    }
}

/// Where to crop and whether to mirror.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub flip: bool,
}

impl CropWindow {
    pub fn sample(height: usize, width: usize, crop: usize, allow_flip: bool, rng: &mut impl Rng) -> Result<Self> {
        if height < crop || width < crop {
            return Err(Error::ImageTooSmall {
                height,
                width,
                reason: format!("smaller than crop {crop}"),
            });
        }
        Ok(CropWindow {
            top: rng.gen_range(0..=height - crop),
            left: rng.gen_range(0..=width - crop),
            size: crop,
            flip: allow_flip && rng.gen_bool(0.5),
        })
    }

    pub fn image(&self, img: &Image) -> Image {
        let c = img.crop(self.top, self.left, self.size, self.size);
        if self.flip {
            c.flip_horizontal()
        } else {
            c
        }
    }

    pub fn mask(&self, m: &Mask) -> Mask {
        let c = m.crop(self.top, self.left, self.size, self.size);
        if self.flip {
            c.flip_horizontal()
        } else {
            c
        }
    }
}

/// Random crop and horizontal flip applied identically to the images and
/// both masks.
pub fn augment(pair: &SamplePair, crop: usize, rng: &mut impl Rng) -> Result<SamplePair> {
    let win = CropWindow::sample(pair.clean.height(), pair.clean.width(), crop, true, rng)?;
    Ok(apply_window(pair, &win))
}

pub fn apply_window(pair: &SamplePair, win: &CropWindow) -> SamplePair {
    SamplePair {
        id: pair.id.clone(),
        clean: win.image(&pair.clean),
        rainy: win.image(&pair.rainy),
        streak_mask: win.mask(&pair.streak_mask),
        drop_mask: win.mask(&pair.drop_mask),
    }
}

/// Stacked batch tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub rainy: Tensor<T>,
    pub clean: Tensor<T>,
    pub streak: Tensor<T>,
    pub drop: Tensor<T>,
    pub total: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_pairs(items: &[(SamplePair, Mask)]) -> Result<Self> {
        let stack = |f: &dyn Fn(&(SamplePair, Mask)) -> Tensor<T>| -> Result<Tensor<T>> {
            Tensor::stack(&items.iter().map(f).collect::<Vec<_>>())
        };
        Ok(Batch {
            rainy: stack(&|p| p.0.rainy.to_tensor())?,
            clean: stack(&|p| p.0.clean.to_tensor())?,
            streak: stack(&|p| p.0.streak_mask.to_tensor())?,
            drop: stack(&|p| p.0.drop_mask.to_tensor())?,
            total: stack(&|p| p.1.to_tensor())?,
        })
    }
}

/// Loss value with its unweighted named components.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub components: Vec<(String, f64)>,
}

impl LossReport {
    /// Sum of the components whose last name segment is `part`.
    pub fn part(&self, part: &str) -> f64 {
        self.components
            .iter()
            .filter(|(n, _)| n.rsplit('.').next() == Some(part))
            .map(|(_, v)| v)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// 1-based index of the completed iteration.
    pub iteration: u64,
    /// Rate used for this update.
    pub lr: f64,
    pub loss: LossReport,
    pub grad_norm: f64,
}

/// Training state: model, optimizer, schedule and sampling RNG.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub model: Model<T>,
    pub adam: Adam<T>,
    pub sched: LrScheduler,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
    data: Vec<TrainPair>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig, model_cfg: &ModelConfig, pairs: Vec<SamplePair>) -> Result<Self> {
        cfg.validate()?;
        cfg.check_dataset(&pairs)?;
        let model = Model::new(cfg.variant, model_cfg, cfg.seed)?;
        let data = pairs.into_iter().map(TrainPair::new).collect::<Result<Vec<_>>>()?;
        Ok(Trainer {
            adam: Adam::new(AdamConfig::default(), &model.params),
            sched: cfg.scheduler(),
            rng: ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x7261_696e)),
            iteration: 0,
            model,
            cfg,
            data,
        })
    }

    /// Continue from a checkpoint holding training state.
    pub fn resume(ckpt: Checkpoint<T>, pairs: Vec<SamplePair>) -> Result<Self> {
        let state = ckpt
            .train
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training state".into()))?;
        state.config.validate()?;
        state.config.check_dataset(&pairs)?;
        if state.config.variant != ckpt.model.variant() {
            return Err(Error::Checkpoint("training config and model variant disagree".into()));
        }
        let data = pairs.into_iter().map(TrainPair::new).collect::<Result<Vec<_>>>()?;
        Ok(Trainer {
            cfg: state.config,
            model: ckpt.model,
            adam: state.adam,
            sched: state.scheduler,
            rng: state.rng,
            iteration: state.iteration,
            data,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            train: Some(TrainState {
                iteration: self.iteration,
                config: self.cfg.clone(),
                scheduler: self.sched.clone(),
                rng: self.rng.clone(),
                adam: self.adam.clone(),
            }),
        }
    }

    pub fn pairs(&self) -> impl Iterator<Item = &SamplePair> {
        self.data.iter().map(|d| &d.pair)
    }

    pub fn sample_batch(&mut self) -> Result<Batch<T>> {
        let mut items = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let d = &self.data[self.rng.gen_range(0..self.data.len())];
            let (h, w) = (d.pair.clean.height(), d.pair.clean.width());
            let win = CropWindow::sample(h, w, self.cfg.crop, self.cfg.flip, &mut self.rng)?;
            items.push((apply_window(&d.pair, &win), win.mask(&d.total)));
        }
        Batch::from_pairs(&items)
    }

    /// Forward and loss on `batch` with the current weights.
    pub fn loss(&self, batch: &Batch<T>) -> Result<LossReport> {
        let mut tape = Tape::new(&self.model.params);
        let (_, report) = self.loss_on_tape(&mut tape, batch)?;
        Ok(report)
    }

    fn loss_on_tape(&self, tape: &mut Tape<'_, T>, batch: &Batch<T>) -> Result<(crate::graph::Var, LossReport)> {
        let x = tape.input(batch.rainy.clone());
        let trace = self.model.net.forward(tape, x)?;
        let targets = Targets {
            clean: tape.input(batch.clean.clone()),
            streak: tape.input(batch.streak.clone()),
            drop: tape.input(batch.drop.clone()),
            total: tape.input(batch.total.clone()),
        };
        let terms = self.model.net.loss(tape, &trace, &targets, &self.cfg.weights())?;
        let components = terms.values(tape);
        let total = tape.value(terms.total).item().as_f64();
        Ok((terms.total, LossReport { total, components }))
    }

    /// Sample a batch and take one optimizer step.
    pub fn step(&mut self) -> Result<StepReport> {
        let batch = self.sample_batch()?;
        let next = self.iteration + 1;
        let (mut grads, loss) = {
            let mut tape = Tape::new(&self.model.params);
            let (total, loss) = self.loss_on_tape(&mut tape, &batch)?;
            for (name, v) in loss
                .components
                .iter()
                .chain(std::iter::once(&("total".to_string(), loss.total)))
            {
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        iteration: next,
                        component: name.clone(),
                    });
                }
            }
            (tape.param_grads(total), loss)
        };
        let grad_norm = if self.cfg.grad_clip > 0.0 {
            grads.clip_global_norm(self.cfg.grad_clip)
        } else {
            grads.global_norm()
        };
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: next,
                component: "gradient".into(),
            });
        }
        let lr = self.sched.lr();
        self.adam.step(&mut self.model.params, &grads, lr)?;
        self.sched.observe(self.iteration as usize, loss.total);
        self.iteration = next;
        Ok(StepReport {
            iteration: next,
            lr,
            loss,
            grad_norm,
        })
    }

    /// Mean PSNR of full-size derained training inputs against clean.
    pub fn training_psnr(&self) -> Result<f64> {
        training_psnr(&self.model, self.pairs())
    }
}

pub fn training_psnr<'a, T: Scalar>(model: &Model<T>, pairs: impl Iterator<Item = &'a SamplePair>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for p in pairs {
        sum += psnr(&model.derain(&p.rainy)?, &p.clean)?;
        n += 1;
    }
    Ok(sum / n.max(1) as f64)
}

/// Fixed column order of the metrics log for a given set of components.
pub fn log_header(components: &[(String, f64)]) -> String {
    let mut cols = vec![
        "iter",
        "lr",
        "loss_total",
        "loss_att",
        "loss_heavy",
        "loss_light",
        "loss_global",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    cols.extend(components.iter().map(|(n, _)| format!("loss_{n}")));
    cols.join("\t")
}

pub fn log_line(r: &StepReport) -> String {
    let l = &r.loss;
    let mut cols = vec![
        r.iteration.to_string(),
        format!("{:e}", r.lr),
        format!("{:e}", l.total),
        format!("{:e}", l.part("att")),
        format!("{:e}", l.part("heavy")),
        format!("{:e}", l.part("light")),
        format!("{:e}", l.part("global")),
    ];
    cols.extend(l.components.iter().map(|(_, v)| format!("{v:e}")));
    cols.join("\t")
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
    pub last: Option<StepReport>,
}

/// Run until `max_iters`, logging every step and checkpointing
/// periodically and at the end.
pub fn train_loop<T: Scalar>(trainer: &mut Trainer<T>, out_dir: &Path) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(METRICS_LOG);
    let appending = trainer.iteration > 0 && log_path.exists();
    let file = if appending {
        OpenOptions::new().append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut wrote_header = appending;
    let mut last = None;
    while (trainer.iteration as usize) < trainer.cfg.max_iters {
        let report = trainer.step()?;
        if !wrote_header {
            writeln!(log, "{}", log_header(&report.loss.components)).map_err(|e| Error::io(&log_path, e))?;
            wrote_header = true;
        }
        writeln!(log, "{}", log_line(&report)).map_err(|e| Error::io(&log_path, e))?;
        let it = report.iteration as usize;
        if it.is_multiple_of(100) {
            log::info!("iter {it} loss {:.6} lr {:.2e}", report.loss.total, report.lr);
        }
        if trainer.cfg.checkpoint_every > 0 && it.is_multiple_of(trainer.cfg.checkpoint_every) && it < trainer.cfg.max_iters {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            trainer.checkpoint().save(&out_dir.join(format!("iter_{it:07}.ckpt")))?;
        }
        last = Some(report);
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainOutcome {
        final_checkpoint,
        log: log_path,
        last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raingen::{procedural_clean, synth_joint, DropParams, StreakParams};
    use proptest::prelude::*;

    fn pairs(n: usize, size: usize) -> Vec<SamplePair> {
        (0..n)
            .map(|i| {
                let clean = procedural_clean(size, size, i as u64);
                let sp = StreakParams {
                    intensity: 0.3,
                    angle_deg: 10.0,
                    streak_length_px: 6,
                    seed: i as u64,
                };
                let dp = DropParams {
                    density: 2000.0,
                    radius_min_px: 2,
                    radius_max_px: 4,
                    refraction_strength: 0.5,
                    seed: i as u64,
                };
                let mut p = synth_joint(&clean, &sp, &dp).unwrap();
                p.id = format!("p{i}");
                p
            })
            .collect()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            crop: 16,
            batch_size: 2,
            max_iters: 6,
            seed: 3,
            lr_start: 1e-3,
            plateau_window: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sentinel_alignment() {
        let mut p = pairs(1, 24).remove(0);
        // Unique sentinels: value encodes position.
        let mark = |y: usize, x: usize| (y * 24 + x) as f32 / 1000.0;
        p.clean = Image::from_fn(24, 24, 3, |_, y, x| mark(y, x));
        p.rainy = p.clean.clone();
        p.streak_mask = Mask::new(24, 24, (0..576).map(|i| i as f32 / 1000.0).collect()).unwrap();
        p.drop_mask = p.streak_mask.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let win = CropWindow::sample(24, 24, 10, true, &mut rng).unwrap();
            let a = apply_window(&p, &win);
            for r in 0..10 {
                for c in 0..10 {
                    let sc = if win.flip { 9 - c } else { c };
                    let src = mark(win.top + r, win.left + sc);
                    assert_eq!(a.streak_mask.get(r, c), p.streak_mask.get(win.top + r, win.left + sc));
                    assert_eq!(a.clean.get(0, r, c), src);
                    assert_eq!(a.rainy.get(2, r, c), src);
                    assert_eq!(a.drop_mask.get(r, c), src);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn augment_dims_and_alignment(seed in 0u64..1000, crop in 8usize..20) {
            let p = &pairs(1, 20)[0];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = augment(p, crop, &mut rng).unwrap();
            prop_assert_eq!(a.clean.dims(), (crop, crop, 3));
            prop_assert_eq!(a.rainy.dims(), (crop, crop, 3));
            prop_assert_eq!((a.streak_mask.height(), a.drop_mask.width()), (crop, crop));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let win = CropWindow::sample(20, 20, crop, true, &mut rng).unwrap();
            let flat = CropWindow { flip: false, ..win };
            let unflipped = apply_window(p, &flat);
            let expected = if win.flip { unflipped.drop_mask.flip_horizontal() } else { unflipped.drop_mask };
            prop_assert_eq!(a.drop_mask, expected);
        }
    }

    #[test]
    fn crop_larger_than_image_fails() {
        let p = &pairs(1, 12)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(augment(p, 16, &mut rng), Err(Error::ImageTooSmall { .. })));
        assert!(matches!(cfg().check_dataset(std::slice::from_ref(p)), Err(Error::Dataset { .. })));
    }

    #[test]
    fn first_step_loss_matches_standalone() {
        let mut t = Trainer::<f32>::new(cfg(), &ModelConfig::tiny(), pairs(3, 20)).unwrap();
        let mut probe = t.clone();
        let batch = probe.sample_batch().unwrap();
        let standalone = probe.loss(&batch).unwrap();
        let report = t.step().unwrap();
        assert_eq!(report.loss, standalone);
        assert_eq!(report.iteration, 1);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut t = Trainer::<f32>::new(cfg(), &ModelConfig::tiny(), pairs(3, 20)).unwrap();
            (0..4).map(|_| t.step().unwrap().loss.total).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn lr_stays_in_bounds_and_loss_columns_exist() {
        let mut t = Trainer::<f32>::new(
            TrainConfig {
                variant: Variant::Ddaiam(2),
                ..cfg()
            },
            &ModelConfig::tiny(),
            pairs(2, 20),
        )
        .unwrap();
        for _ in 0..6 {
            let r = t.step().unwrap();
            assert!(r.lr >= t.cfg.lr_end && r.lr <= t.cfg.lr_start);
            assert!(r.loss.part("global") > 0.0 && r.loss.part("att") > 0.0);
        }
        let r = t.step();
        assert!(r.is_ok());
        let header = log_header(&r.unwrap().loss.components);
        assert!(header.starts_with("iter\tlr\tloss_total\tloss_att\tloss_heavy\tloss_light\tloss_global"));
        assert!(header.contains("loss_s2.drop.att"));
    }

    #[test]
    fn invalid_configs() {
        let bad = TrainConfig { max_iters: 0, ..cfg() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { lr_end: 1.0, ..cfg() };
        assert!(bad.validate().is_err());
        assert!(Trainer::<f32>::new(cfg(), &ModelConfig::tiny(), vec![]).is_err());
    }

    #[test]
    fn nonfinite_loss_names_iteration_and_component() {
        let mut t = Trainer::<f32>::new(cfg(), &ModelConfig::tiny(), pairs(2, 20)).unwrap();
        t.step().unwrap();
        let id = t.model.params.ids().last().unwrap();
        t.model.params.get_mut(id).data_mut()[0] = f32::INFINITY;
        match t.step() {
            Err(Error::NonFinite { .. }) | Err(Error::NonFiniteLoss { iteration: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
