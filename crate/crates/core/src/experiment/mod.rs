//! Experiment harness behind the CLI: dataset preparation, the three-stage
//! pipeline, evaluation sweeps, DCT heatmaps and the ablation runner.

pub mod ablate;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod toy;
pub mod visualize;

pub use config::ExperimentConfig;

use crate::backbone::{BackboneConfig, BackboneParams, Gate, SrModel};
use crate::classifier::ClassifierParams;
use crate::error::Result;
use crate::training::{
    stage1_train_backbone, stage2_build_classifier, stage3_adversarial_train, Pair, Stage2Output,
    TrainLog,
};

use evaluate::EvalSettings;

/// Everything the three stages produce.
#[derive(Clone, Debug)]
pub struct PipelineModels {
    pub config: BackboneConfig,
    pub stage1: BackboneParams,
    pub stage1_log: TrainLog,
    pub stage2: Stage2Output,
    pub stage3: BackboneParams,
    pub stage3_log: TrainLog,
}

impl PipelineModels {
    pub fn classifier(&self) -> &ClassifierParams {
        &self.stage2.classifier
    }

    pub fn undefended(&self) -> SrModel {
        SrModel::undefended(self.stage1.clone(), self.config)
    }

    pub fn defended(&self) -> SrModel {
        SrModel {
            params: self.stage3.clone(),
            config: self.config,
            gate: Gate::Classifier(self.stage2.classifier.clone()),
        }
    }
}

pub fn run_pipeline(train: &[Pair], cfg: &ExperimentConfig) -> Result<PipelineModels> {
    let (stage1, stage1_log) = stage1_train_backbone(train, &cfg.backbone, &cfg.train)?;
    log::info!("stage 1 done, final loss {:?}", stage1_log.final_loss());
    let stage2 = stage2_build_classifier(train, &stage1, &cfg.backbone, &cfg.train)?;
    log::info!(
        "stage 2 done, held-out accuracy {:?}",
        stage2.log.validation_accuracy
    );
    let (stage3, stage3_log) =
        stage3_adversarial_train(train, &stage2.classifier, &cfg.backbone, &cfg.train)?;
    log::info!("stage 3 done, final loss {:?}", stage3_log.final_loss());
    Ok(PipelineModels {
        config: cfg.backbone,
        stage1,
        stage1_log,
        stage2,
        stage3,
        stage3_log,
    })
}

/// Evaluation settings taken from a config and the budgets to sweep.
pub fn eval_settings(cfg: &ExperimentConfig, alphas: Vec<u32>) -> EvalSettings {
    EvalSettings {
        alphas,
        iterations: cfg.eval.iterations,
        loss_target: cfg.eval.loss_target,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        parallelism: cfg.train.parallelism,
    }
}
