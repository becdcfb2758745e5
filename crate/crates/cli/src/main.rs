use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use specguard::attack::{AttackConfig, LossTarget};
use specguard::backbone::{Gate, SrModel};
use specguard::checkpoint::{load_backbone, load_classifier, save_backbone, save_classifier};
use specguard::experiment::dataset::{load_dataset, prepare_dataset, split_dataset, Source};
use specguard::experiment::evaluate::evaluate_models;
use specguard::experiment::visualize::{dct_heatmaps, write_heatmaps};
use specguard::experiment::{ablate, eval_settings, ExperimentConfig};
use specguard::io::load_image;
use specguard::training::{
    stage1_train_backbone, stage2_build_classifier, stage3_adversarial_train,
};

/// Random DCT-mask defense for super-resolution: data, training, attacks, evaluation.
#[derive(Parser, Debug)]
#[command(name = "specguard", version)]
struct Cli {
    /// TOML configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cut LR/HR patch pairs from a directory of images or from procedural images.
    PrepareDataset {
        /// Directory of HR images, or one with matching `lr/` and `hr/` subdirectories.
        #[arg(
            long,
            conflicts_with = "synthetic",
            required_unless_present = "synthetic"
        )]
        src: Option<PathBuf>,
        /// Use procedurally generated images instead of `--src`.
        #[arg(long)]
        synthetic: bool,
        #[arg(long)]
        patch_size: Option<usize>,
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        /// Prepared dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 backbone checkpoint (stage 2).
        #[arg(long)]
        model_path: Option<PathBuf>,
        /// Stage-2 classifier checkpoint (stage 3).
        #[arg(long)]
        classifier_path: Option<PathBuf>,
        /// Overrides `train.max_iterations`.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Clean and attacked PSNR/SSIM over an attack-budget sweep.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Undefended backbone checkpoint.
        #[arg(long)]
        model_path: PathBuf,
        /// Defended backbone checkpoint (needs `--classifier-path`).
        #[arg(long, requires = "classifier_path")]
        defended_path: Option<PathBuf>,
        #[arg(long, requires = "defended_path")]
        classifier_path: Option<PathBuf>,
        /// Budget numerator over 255; repeatable. Defaults to the configured sweep.
        #[arg(long = "alpha")]
        alphas: Vec<u32>,
        /// Attack iterations.
        #[arg(long)]
        iterations: Option<usize>,
        /// `ground-truth` or `clean-output`.
        #[arg(long)]
        loss_target: Option<LossTarget>,
    },
    /// DCT heatmaps of an image and of each hourglass-entry feature, clean and attacked.
    VisualizeDct {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        model_path: PathBuf,
        #[arg(long, default_value_t = 8)]
        alpha: u32,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
    },
    /// Train and score the six ablation variants on a held-out split.
    Ablate {
        #[arg(long)]
        data: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    let seed = cli.seed.unwrap_or(cfg.seed);
    Ok(cfg.with_seed(seed))
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let out = cli.out.clone();
    match cli.command {
        Command::PrepareDataset {
            src,
            synthetic,
            patch_size,
            scale,
            count,
        } => {
            let source = match (src, synthetic) {
                (_, true) => Source::Synthetic {
                    side: cfg.dataset.synthetic_side,
                },
                (Some(dir), false) => Source::Directory(dir),
                (None, false) => bail!("either --src or --synthetic is required"),
            };
            let report = prepare_dataset(
                &source,
                &out,
                patch_size.unwrap_or(cfg.dataset.patch_size),
                scale.unwrap_or(cfg.dataset.scale),
                count.unwrap_or(cfg.dataset.count),
                cfg.seed,
            )?;
            println!(
                "wrote {} pairs to {} ({} source files skipped)",
                report.written,
                out.display(),
                report.skipped
            );
        }
        Command::Train {
            stage,
            data,
            model_path,
            classifier_path,
            iterations,
        } => {
            if let Some(n) = iterations {
                cfg.train.max_iterations = n;
            }
            cfg.validate()?;
            let pairs = load_dataset(&data)?;
            ensure_dir(&out)?;
            match stage {
                1 => {
                    let (params, log) = stage1_train_backbone(&pairs, &cfg.backbone, &cfg.train)?;
                    save_backbone(out.join("stage1.ckpt"), &params, &cfg.backbone)?;
                    log.write_csv(out.join("stage1_log.csv"))?;
                    specguard::training::write_summary(std::io::stdout(), 1, &log)?;
                }
                2 => {
                    let path =
                        model_path.context("stage 2 needs --model-path (stage-1 checkpoint)")?;
                    let (params, backbone) = load_backbone(&path)?;
                    let s2 = stage2_build_classifier(&pairs, &params, &backbone, &cfg.train)?;
                    save_classifier(out.join("classifier.ckpt"), &s2.classifier)?;
                    let summary = out.join("stage2.csv");
                    let acc = s2
                        .log
                        .validation_accuracy
                        .map_or("".into(), |a| format!("{a:.6}"));
                    std::fs::write(
                        &summary,
                        format!(
                            "samples,train_size,validation_size,train_accuracy,validation_accuracy\n{},{},{},{:.6},{}\n",
                            s2.sample_count, s2.log.train_size, s2.log.validation_size, s2.log.train_accuracy, acc
                        ),
                    )
                    .with_context(|| format!("writing {}", summary.display()))?;
                    println!(
                        "stage 2: {} samples, held-out accuracy {}",
                        s2.sample_count, acc
                    );
                }
                _ => {
                    let path = classifier_path.context("stage 3 needs --classifier-path")?;
                    let classifier = load_classifier(&path)?;
                    let (params, log) =
                        stage3_adversarial_train(&pairs, &classifier, &cfg.backbone, &cfg.train)?;
                    save_backbone(out.join("stage3.ckpt"), &params, &cfg.backbone)?;
                    log.write_csv(out.join("stage3_log.csv"))?;
                    specguard::training::write_summary(std::io::stdout(), 3, &log)?;
                }
            }
        }
        Command::Evaluate {
            data,
            model_path,
            defended_path,
            classifier_path,
            alphas,
            iterations,
            loss_target,
        } => {
            if let Some(n) = iterations {
                cfg.eval.iterations = n;
            }
            if let Some(t) = loss_target {
                cfg.eval.loss_target = t;
            }
            let pairs = load_dataset(&data)?;
            let (params, backbone) = load_backbone(&model_path)?;
            let undefended = SrModel::undefended(params, backbone);
            let defended = match (defended_path, classifier_path) {
                (Some(d), Some(c)) => {
                    let (params, config) = load_backbone(&d)?;
                    Some(SrModel {
                        params,
                        config,
                        gate: Gate::Classifier(load_classifier(&c)?),
                    })
                }
                _ => None,
            };
            let mut models = vec![("undefended", &undefended)];
            if let Some(d) = &defended {
                models.push(("defended", d));
            }
            let alphas = if alphas.is_empty() {
                cfg.eval.alphas.clone()
            } else {
                alphas
            };
            let result = evaluate_models(&models, &pairs, &eval_settings(&cfg, alphas))?;
            ensure_dir(&out)?;
            result.write_csv(&out.join("results.csv"))?;
            result.write_curves(&out)?;
            print!("{}", String::from_utf8_lossy(&result.to_csv()?));
        }
        Command::VisualizeDct {
            image,
            model_path,
            alpha,
            iterations,
        } => {
            let (params, backbone) = load_backbone(&model_path)?;
            let model = SrModel::undefended(params, backbone);
            let img = load_image(&image)?;
            let img = if img.channels() == 3 {
                img
            } else {
                img.channel(0).broadcast_channels(3)?
            };
            // Crop so both sides pass through every hourglass level.
            let m = 1usize << backbone.hg_depth;
            let (h, w) = (img.height() / m * m, img.width() / m * m);
            if h == 0 || w == 0 {
                bail!("image {} is smaller than {m}x{m}", image.display());
            }
            let img = img.crop(0, 0, h, w)?;
            let pairs = dct_heatmaps(
                &img,
                &model,
                &AttackConfig::from_numerator(alpha, iterations),
                cfg.seed,
            )?;
            let files = write_heatmaps(&pairs, &out)?;
            let mut csv =
                String::from("map,clean_high_frequency_mean,attacked_high_frequency_mean\n");
            for p in &pairs {
                csv.push_str(&format!(
                    "{},{:.6},{:.6}\n",
                    p.name,
                    p.clean_high(),
                    p.attacked_high()
                ));
            }
            let summary = out.join("heatmaps.csv");
            std::fs::write(&summary, csv)
                .with_context(|| format!("writing {}", summary.display()))?;
            println!("wrote {} heatmaps to {}", files.len(), out.display());
        }
        Command::Ablate { data } => {
            let pairs = load_dataset(&data)?;
            let (train, test) = split_dataset(&pairs, cfg.eval.test_fraction, cfg.seed);
            let settings = eval_settings(&cfg, cfg.eval.ablation_alphas.clone());
            let outcome = ablate::run_ablation(&train, &test, &cfg, &settings, None)?;
            ensure_dir(&out)?;
            outcome.result.write_csv(&out.join("ablation.csv"))?;
            print!("{}", String::from_utf8_lossy(&outcome.result.to_csv()?));
        }
    }
    Ok(())
}

/// 1 usage, 2 data, 3 numerical failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err
        .chain()
        .find_map(|c| c.downcast_ref::<specguard::Error>())
    {
        Some(e) if e.is_numerical() => 3,
        Some(
            specguard::Error::Config(_)
            | specguard::Error::InvalidAttack(_)
            | specguard::Error::InvalidPolicy(_),
        ) => 1,
        Some(_) => 2,
        None if err
            .chain()
            .any(|c| c.downcast_ref::<std::io::Error>().is_some()) =>
        {
            2
        }
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
