//! Clean and attacked evaluation of one or more models over an α sweep.

use std::path::{Path, PathBuf};

use crate::attack::{basic_attack, AttackConfig, LossTarget};
use crate::backbone::{MaskStreams, SrModel};
use crate::error::{Error, Result};
use crate::metrics::evaluate as metric_pair;
use crate::par::{try_map_range, Parallelism};
use crate::rng::RngStream;
use crate::training::Pair;

pub const RESULT_HEADER: [&str; 7] = [
    "variant",
    "alpha",
    "mean_psnr_db",
    "mean_ssim",
    "n_images",
    "seed",
    "config_hash",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub variant: String,
    /// Budget numerator over 255; 0 is the clean row.
    pub alpha: u32,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub n_images: usize,
    pub seed: u64,
    pub config_hash: String,
    pub per_image_psnr: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
}

fn fmt(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

impl ExperimentResult {
    pub fn row(&self, variant: &str, alpha: u32) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.alpha == alpha)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(RESULT_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.variant.clone(),
                r.alpha.to_string(),
                fmt(r.mean_psnr_db),
                fmt(r.mean_ssim),
                r.n_images.to_string(),
                r.seed.to_string(),
                r.config_hash.clone(),
            ])?;
        }
        w.into_inner().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    /// One `curve_<variant>.csv` (alpha, psnr, ssim) per variant.
    pub fn write_curves(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut variants: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !variants.contains(&r.variant.as_str()) {
                variants.push(&r.variant);
            }
        }
        let mut files = Vec::new();
        for v in variants {
            let path = dir.join(format!("curve_{v}.csv"));
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["alpha", "mean_psnr_db", "mean_ssim"])?;
            for r in self.rows.iter().filter(|r| r.variant == v) {
                w.write_record([r.alpha.to_string(), fmt(r.mean_psnr_db), fmt(r.mean_ssim)])?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            files.push(path);
        }
        Ok(files)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    /// Budgets to sweep; 0 is prepended when missing.
    pub alphas: Vec<u32>,
    pub iterations: usize,
    pub loss_target: LossTarget,
    pub seed: u64,
    pub config_hash: String,
    pub parallelism: Parallelism,
}

impl EvalSettings {
    pub fn sweep(&self) -> Vec<u32> {
        let mut a = vec![0];
        a.extend(self.alphas.iter().copied().filter(|&v| v != 0));
        a
    }
}

fn variant_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

/// Evaluates each named model on `data` at every budget of the sweep.
///
/// Attacks are white-box against the model being scored. Its own gate then
/// decides masking at inference.
pub fn evaluate_models(
    models: &[(&str, &SrModel)],
    data: &[Pair],
    settings: &EvalSettings,
) -> Result<ExperimentResult> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("evaluation set is empty"));
    }
    let root = RngStream::new(settings.seed);
    let mut rows = Vec::new();
    for &(name, model) in models {
        for alpha in settings.sweep() {
            let attack = AttackConfig {
                loss_target: settings.loss_target,
                ..AttackConfig::from_numerator(alpha, settings.iterations)
            };
            let base = root.split(variant_key(name)).split(alpha as u64);
            let reports = try_map_range(data.len(), settings.parallelism, |i| {
                let (x, hr) = &data[i];
                let s = base.split(i as u64);
                let x_in = if alpha == 0 {
                    x.clone()
                } else {
                    basic_attack(x, hr, model, &attack, &s.split(0))?
                };
                let mut masks = MaskStreams::for_config(&s.split(1), &model.config);
                let sr = model.infer(&x_in, &mut masks)?;
                metric_pair(&sr.clamp(0.0, 1.0), hr)
            })?;
            let n = reports.len() as f64;
            rows.push(ResultRow {
                variant: name.to_string(),
                alpha,
                mean_psnr_db: reports.iter().map(|r| r.psnr_db).sum::<f64>() / n,
                mean_ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
                n_images: reports.len(),
                seed: settings.seed,
                config_hash: settings.config_hash.clone(),
                per_image_psnr: reports.iter().map(|r| r.psnr_db).collect(),
            });
        }
    }
    Ok(ExperimentResult { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, BackboneParams, Gate};
    use crate::classifier::{ClassifierParams, Label};
    use crate::experiment::toy::toy_pairs;

    fn setup() -> (SrModel, Vec<Pair>) {
        let cfg = BackboneConfig {
            num_hourglass: 1,
            base_channels: 4,
            ..Default::default()
        };
        let p = BackboneParams::init(&cfg, &mut RngStream::new(1)).unwrap();
        (
            SrModel::undefended(p, cfg),
            toy_pairs(3, 8, 2, &RngStream::new(2)),
        )
    }

    fn settings(alphas: Vec<u32>) -> EvalSettings {
        EvalSettings {
            alphas,
            iterations: 2,
            loss_target: LossTarget::GroundTruth,
            seed: 4,
            config_hash: "abc".into(),
            parallelism: Parallelism::Auto,
        }
    }

    #[test]
    fn golden_header_and_clean_only() {
        let (m, data) = setup();
        let r = evaluate_models(&[("undefended", &m)], &data, &settings(vec![])).unwrap();
        assert_eq!(r.rows.len(), 1);
        let text = String::from_utf8(r.to_csv().unwrap()).unwrap();
        assert!(text.starts_with(
            "variant,alpha,mean_psnr_db,mean_ssim,n_images,seed,config_hash\nundefended,0,"
        ));
        assert!(text.ends_with(",3,4,abc\n"));
    }

    #[test]
    fn clean_gate_matches_undefended_bitwise() {
        let (m, data) = setup();
        let c = ClassifierParams::constant(Label::Clean, 3, (8, 8)).unwrap();
        let d = SrModel {
            gate: Gate::Classifier(c),
            ..m.clone()
        };
        let r = evaluate_models(
            &[("undefended", &m), ("defended", &d)],
            &data,
            &settings(vec![4]),
        )
        .unwrap();
        assert_eq!(r.rows.len(), 4);
        let (u, g) = (
            r.row("undefended", 0).unwrap(),
            r.row("defended", 0).unwrap(),
        );
        assert_eq!(u.mean_psnr_db.to_bits(), g.mean_psnr_db.to_bits());
        assert_eq!(u.mean_ssim.to_bits(), g.mean_ssim.to_bits());
    }

    #[test]
    fn reproducible_bytes_across_modes() {
        let (m, data) = setup();
        let a = evaluate_models(&[("u", &m)], &data, &settings(vec![2, 8])).unwrap();
        let mut s = settings(vec![2, 8]);
        s.parallelism = Parallelism::Sequential;
        let b = evaluate_models(&[("u", &m)], &data, &s).unwrap();
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
    }

    #[test]
    fn curves_are_written() {
        let (m, data) = setup();
        let dir = tempfile::tempdir().unwrap();
        let r = evaluate_models(&[("u", &m)], &data, &settings(vec![1])).unwrap();
        let files = r.write_curves(dir.path()).unwrap();
        assert_eq!(files.len(), 1);
        let text = std::fs::read_to_string(&files[0]).unwrap();
        assert_eq!(text.lines().count(), 3);
    }
}
