//! Three-stage training: clean backbone, spectral classifier on attacked
//! twins, then adversarial training of a fresh backbone behind the frozen
//! classifier.
//!
//! Every random choice derives from `TrainConfig::seed` through split
//! streams keyed by (iteration, sample), so the sequential and parallel
//! paths produce identical parameters.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{basic_attack, check_invariants, AttackConfig};
use crate::autodiff::Tape;
use crate::backbone::{
    bind_params, forward_on_tape, sr_loss_on_tape, BackboneConfig, BackboneParams, Gate,
    MaskSource, MaskStreams, SrModel,
};
use crate::classifier::{
    train_classifier, ClassifierParams, ClassifierTrainConfig, ClassifierTrainLog,
};
use crate::error::{Error, Result};
use crate::optim::{halving_lr, Adam, AdamConfig};
use crate::par::{try_map_range, Parallelism};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// An LR input and its HR target.
pub type Pair = (Tensor, Tensor);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    /// Learning rate halves every this many iterations; 0 disables decay.
    pub lr_halving_interval: usize,
    pub max_iterations: usize,
    /// LR patch side used for random crops.
    pub patch_size: usize,
    pub train_attack: AttackConfig,
    /// Share of each adversarial-training batch that is attacked.
    pub adversarial_fraction: f64,
    pub classifier: ClassifierTrainConfig,
    pub seed: u64,
    #[serde(skip)]
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            batch_size: 8,
            lr_halving_interval: 2000,
            max_iterations: 10_000,
            patch_size: 16,
            train_attack: AttackConfig::from_numerator(6, 2),
            adversarial_fraction: 0.5,
            classifier: ClassifierTrainConfig::default(),
            seed: 0,
            parallelism: Parallelism::Auto,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::Config(
                "batch_size and patch_size must be positive".into(),
            ));
        }
        if !self.patch_size.is_multiple_of(1 << backbone.hg_depth) {
            return Err(Error::Config(format!(
                "patch_size {} must be divisible by 2^hg_depth = {}",
                self.patch_size,
                1 << backbone.hg_depth
            )));
        }
        if !(0.0..=1.0).contains(&self.adversarial_fraction) {
            return Err(Error::Config(
                "adversarial_fraction must lie in [0, 1]".into(),
            ));
        }
        self.train_attack.validate()
    }

    /// Number of attacked samples in each adversarial batch.
    pub fn attacked_per_batch(&self) -> usize {
        (self.batch_size as f64 * self.adversarial_fraction).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "loss", "lr"])?;
        for r in &self.rows {
            w.write_record([
                r.iteration.to_string(),
                format!("{:.10e}", r.loss),
                format!("{:e}", r.lr),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }
}

/// Random LR crop of side `patch` and the aligned HR crop.
pub fn random_crop(pair: &Pair, patch: usize, stream: &mut RngStream) -> Result<Pair> {
    let (lr, hr) = pair;
    if lr.height() < patch || lr.width() < patch {
        return Err(Error::InvalidShape(format!(
            "LR image {} smaller than patch {patch}",
            lr.shape()
        )));
    }
    let scale = hr.height() / lr.height();
    if scale == 0 || hr.height() != lr.height() * scale || hr.width() != lr.width() * scale {
        return Err(Error::InvalidShape(format!(
            "HR {} is not an integer multiple of LR {}",
            hr.shape(),
            lr.shape()
        )));
    }
    if lr.height() == patch && lr.width() == patch {
        return Ok(pair.clone());
    }
    let y = stream.index(lr.height() - patch + 1);
    let x = stream.index(lr.width() - patch + 1);
    Ok((
        lr.crop(y, x, patch, patch)?,
        hr.crop(y * scale, x * scale, patch * scale, patch * scale)?,
    ))
}

/// Loss and parameter gradients of one sample.
fn sample_gradient(
    params: &BackboneParams,
    config: &BackboneConfig,
    x: &Tensor,
    hr: &Tensor,
    gate: bool,
    masks: &mut MaskStreams,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let pv = bind_params(&mut tape, params, true);
    let xv = tape.constant(x.clone());
    let out = forward_on_tape(
        &mut tape,
        xv,
        &pv,
        config,
        gate,
        &mut MaskSource::Sample(masks),
    )?;
    let loss = sr_loss_on_tape(&mut tape, out.sr, &out.intermediates, hr)?;
    let grads = tape.grad_wrt(loss, &pv)?;
    Ok((tape.value(loss).item(), grads))
}

/// Which kind of batches a training run sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    Clean,
    /// `adversarial_fraction` of every batch is attacked against the
    /// current model.
    Adversarial,
}

/// Trains a freshly initialized backbone. `gate` decides when masks run in
/// the training forward pass, and also which pipeline the attacker targets.
pub fn train_backbone(
    data: &[Pair],
    backbone: &BackboneConfig,
    config: &TrainConfig,
    gate: &Gate,
    mode: BatchMode,
    stage: &'static str,
) -> Result<(BackboneParams, TrainLog)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("training set is empty"));
    }
    config.validate(backbone)?;
    let root = RngStream::new(config.seed).split(stage_key(stage));
    let mut model = SrModel {
        params: BackboneParams::init(backbone, &mut root.split(u64::MAX))?,
        config: *backbone,
        gate: gate.clone(),
    };
    let mut adam = Adam::new(config.optimizer, &model.params.tensors());
    let mut log = TrainLog::default();
    let attacked = match mode {
        BatchMode::Clean => 0,
        BatchMode::Adversarial => config.attacked_per_batch(),
    };

    for iteration in 0..config.max_iterations {
        let it_stream = root.split(iteration as u64);
        let mut picker = it_stream.split(u64::MAX);
        let indices: Vec<usize> = (0..config.batch_size)
            .map(|_| picker.index(data.len()))
            .collect();
        let m = &model;
        let results = try_map_range(config.batch_size, config.parallelism, |b| {
            let s = it_stream.split(b as u64);
            let (x, hr) = random_crop(&data[indices[b]], config.patch_size, &mut s.split(0))?;
            let x = if b < attacked {
                let adv = basic_attack(&x, &hr, m, &config.train_attack, &s.split(1))?;
                check_invariants(&x, &adv, &config.train_attack)?;
                adv
            } else {
                x
            };
            let g = m.gate_for(&x)?;
            let mut masks = MaskStreams::for_config(&s.split(2), backbone);
            sample_gradient(&m.params, backbone, &x, &hr, g, &mut masks)
        })?;

        let n = results.len() as f64;
        let mut loss = 0.0;
        let mut grads: Vec<Tensor> = model
            .params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros_like(t))
            .collect();
        for (l, gs) in &results {
            loss += l;
            for (acc, g) in grads.iter_mut().zip(gs) {
                acc.add_scaled(g, 1.0 / n)?;
            }
        }
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                stage,
                iteration,
                loss,
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { iteration });
        }
        let lr = halving_lr(
            config.optimizer.learning_rate,
            config.lr_halving_interval,
            iteration,
        );
        adam.step(&mut model.params.tensors_mut(), &grads, lr);
        log.rows.push(LogRow {
            iteration,
            loss,
            lr,
        });
        if iteration % 500 == 0 {
            log::debug!("{stage} iteration {iteration}: loss {loss:.6} lr {lr:e}");
        }
    }
    Ok((model.params, log))
}

fn stage_key(stage: &str) -> u64 {
    stage.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

/// Stage 1: plain training with masks bypassed.
pub fn stage1_train_backbone(
    data: &[Pair],
    backbone: &BackboneConfig,
    config: &TrainConfig,
) -> Result<(BackboneParams, TrainLog)> {
    train_backbone(
        data,
        backbone,
        config,
        &Gate::Never,
        BatchMode::Clean,
        "stage1",
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Output {
    pub classifier: ClassifierParams,
    pub log: ClassifierTrainLog,
    /// Clean plus attacked samples fed to the classifier trainer.
    pub sample_count: usize,
}

/// Stage 2: attack every (cropped) training patch against the frozen
/// stage-1 backbone and fit the classifier on the balanced set.
pub fn stage2_build_classifier(
    data: &[Pair],
    stage1: &BackboneParams,
    backbone: &BackboneConfig,
    config: &TrainConfig,
) -> Result<Stage2Output> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("training set is empty"));
    }
    config.validate(backbone)?;
    let root = RngStream::new(config.seed).split(stage_key("stage2"));
    let model = SrModel::undefended(stage1.clone(), *backbone);
    let pairs = try_map_range(data.len(), config.parallelism, |i| {
        let s = root.split(i as u64);
        let (x, hr) = random_crop(&data[i], config.patch_size, &mut s.split(0))?;
        let adv = basic_attack(&x, &hr, &model, &config.train_attack, &s.split(1))?;
        check_invariants(&x, &adv, &config.train_attack)?;
        Ok::<_, Error>((x, adv))
    })?;
    let (clean, adversarial): (Vec<Tensor>, Vec<Tensor>) = pairs.into_iter().unzip();
    let (classifier, log) = train_classifier(
        &clean,
        &adversarial,
        &config.classifier,
        &mut root.split(u64::MAX),
    )?;
    Ok(Stage2Output {
        classifier,
        log,
        sample_count: clean.len() + adversarial.len(),
    })
}

/// Stage 3: fresh backbone, adversarial batches synthesized against the
/// classifier-gated pipeline. The classifier is checked bitwise unchanged.
pub fn stage3_adversarial_train(
    data: &[Pair],
    classifier: &ClassifierParams,
    backbone: &BackboneConfig,
    config: &TrainConfig,
) -> Result<(BackboneParams, TrainLog)> {
    let before: Vec<u64> = bits(classifier);
    let gate = Gate::Classifier(classifier.clone());
    let out = train_backbone(
        data,
        backbone,
        config,
        &gate,
        BatchMode::Adversarial,
        "stage3",
    )?;
    let Gate::Classifier(used) = &gate else {
        unreachable!()
    };
    if bits(used) != before || bits(classifier) != before {
        return Err(Error::Config("classifier changed during stage 3".into()));
    }
    Ok(out)
}

fn bits(c: &ClassifierParams) -> Vec<u64> {
    c.tensors()
        .iter()
        .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
        .chain([c.leaky_slope.to_bits(), c.gamma as u64])
        .collect()
}

/// Writes a stage summary line; used by the CLI.
pub fn write_summary(mut w: impl Write, stage: u8, log: &TrainLog) -> std::io::Result<()> {
    match log.final_loss() {
        Some(l) => writeln!(
            w,
            "stage {stage}: {} iterations, final loss {l:.6}",
            log.rows.len()
        ),
        None => writeln!(w, "stage {stage}: 0 iterations"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::forward;
    use crate::metrics::psnr;

    fn smooth_pair(seed: u64, lr_side: usize) -> Pair {
        let mut s = RngStream::new(seed);
        let (a, b, c) = (s.uniform_in(0.5, 2.0), s.uniform_in(0.5, 2.0), s.uniform());
        let side = lr_side * 2;
        let hr = Tensor::from_fn(side, side, 3, |y, x, ch| {
            let t = (y as f64 * a + x as f64 * b) / side as f64 * std::f64::consts::PI;
            0.5 + 0.3 * (t * (1.0 + ch as f64) + c).sin()
        });
        (hr.downsample_area(2).unwrap(), hr)
    }

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            num_hourglass: 1,
            base_channels: 4,
            hg_depth: 1,
            ..Default::default()
        }
    }

    fn quick(iterations: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            max_iterations: iterations,
            patch_size: 8,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let data = vec![smooth_pair(1, 8)];
        let (p, log) = stage1_train_backbone(&data, &tiny(), &quick(0)).unwrap();
        assert!(log.rows.is_empty());
        let (q, _) = stage1_train_backbone(&data, &tiny(), &quick(0)).unwrap();
        assert_eq!(p, q);
        let c = ClassifierParams::constant(crate::classifier::Label::Clean, 3, (8, 8)).unwrap();
        let (r, _) = stage3_adversarial_train(&data, &c, &tiny(), &quick(0)).unwrap();
        assert_eq!(r.shapes(), p.shapes());
    }

    #[test]
    fn deterministic_and_mode_independent() {
        let data: Vec<Pair> = (0..3).map(|i| smooth_pair(i, 12)).collect();
        let mut cfg = quick(3);
        let (a, la) = stage1_train_backbone(&data, &tiny(), &cfg).unwrap();
        cfg.parallelism = Parallelism::Sequential;
        let (b, lb) = stage1_train_backbone(&data, &tiny(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.rows.len(), 3);
    }

    #[test]
    fn schedule_is_logged() {
        let data = vec![smooth_pair(2, 8)];
        let cfg = TrainConfig {
            lr_halving_interval: 2,
            ..quick(5)
        };
        let (_, log) = stage1_train_backbone(&data, &tiny(), &cfg).unwrap();
        let lrs: Vec<f64> = log.rows.iter().map(|r| r.lr).collect();
        assert_eq!(lrs, vec![2e-4, 2e-4, 1e-4, 1e-4, 5e-5]);
    }

    #[test]
    fn overfits_single_pair_beyond_nearest_upsampling() {
        let data = vec![smooth_pair(3, 8)];
        let cfg = TrainConfig {
            optimizer: AdamConfig {
                learning_rate: 2e-3,
                ..Default::default()
            },
            batch_size: 1,
            lr_halving_interval: 0,
            ..quick(2000)
        };
        let (p, _) = stage1_train_backbone(&data, &tiny(), &cfg).unwrap();
        let (lr, hr) = &data[0];
        let mut ms = MaskStreams::for_config(&RngStream::new(0), &tiny());
        let sr = forward(lr, &p, &tiny(), false, &mut ms).unwrap().0;
        let nearest = lr.upsample_nearest(2);
        assert!(psnr(&sr, hr).unwrap() >= psnr(&nearest, hr).unwrap() + 1.0);
    }

    #[test]
    fn stage2_builds_balanced_set() {
        let data: Vec<Pair> = (0..6).map(|i| smooth_pair(10 + i, 8)).collect();
        let (p, _) = stage1_train_backbone(&data, &tiny(), &quick(0)).unwrap();
        let cfg = TrainConfig {
            classifier: ClassifierTrainConfig {
                epochs: 2,
                ..Default::default()
            },
            ..quick(0)
        };
        let out = stage2_build_classifier(&data, &p, &tiny(), &cfg).unwrap();
        assert_eq!(out.sample_count, 12);
        assert_eq!(out.log.train_size + out.log.validation_size, 12);
    }

    #[test]
    fn adversarial_batches_run() {
        let data: Vec<Pair> = (0..2).map(|i| smooth_pair(20 + i, 8)).collect();
        let c =
            ClassifierParams::constant(crate::classifier::Label::Adversarial, 3, (8, 8)).unwrap();
        let (p, log) = stage3_adversarial_train(&data, &c, &tiny(), &quick(2)).unwrap();
        assert!(p.is_finite());
        assert_eq!(log.rows.len(), 2);
    }

    #[test]
    fn rejects_bad_configs() {
        let data = vec![smooth_pair(1, 8)];
        assert!(stage1_train_backbone(&[], &tiny(), &quick(1)).is_err());
        let cfg = TrainConfig {
            patch_size: 7,
            ..quick(1)
        };
        assert!(stage1_train_backbone(&data, &tiny(), &cfg).is_err());
        let cfg = TrainConfig {
            patch_size: 16,
            ..quick(1)
        };
        assert!(stage1_train_backbone(&data, &tiny(), &cfg).is_err());
    }

    #[test]
    fn crops_stay_aligned() {
        let (lr, hr) = smooth_pair(4, 12);
        let mut s = RngStream::new(1);
        for _ in 0..10 {
            let (cl, ch) = random_crop(&(lr.clone(), hr.clone()), 4, &mut s).unwrap();
            assert!(ch.downsample_area(2).unwrap().max_abs_diff(&cl).unwrap() < 1e-12);
        }
    }

    #[test]
    fn log_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let log = TrainLog {
            rows: vec![LogRow {
                iteration: 0,
                loss: 0.5,
                lr: 2e-4,
            }],
        };
        log.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("iteration,loss,lr\n0,"));
    }
}
