//! Component ablation: masks (fixed or random), adversarial training, and
//! the classifier gate, each trained and scored on the same split.

use crate::backbone::{BackboneConfig, Gate, SrModel};
use crate::error::Result;
use crate::mask::MaskPolicy;
use crate::training::{train_backbone, BatchMode, Pair};

use super::evaluate::{evaluate_models, EvalSettings, ExperimentResult};
use super::{run_pipeline, ExperimentConfig, PipelineModels};

pub const VARIANTS: [&str; 6] = ["baseline", "+FM", "+RM", "+AT", "+RM+AT", "ours"];

pub struct AblationOutcome {
    pub result: ExperimentResult,
    /// Trained models in [`VARIANTS`] order.
    pub models: Vec<(String, SrModel)>,
}

fn masked_variant(
    train: &[Pair],
    cfg: &ExperimentConfig,
    policy: MaskPolicy,
    mode: BatchMode,
    stage: &'static str,
) -> Result<SrModel> {
    let backbone = BackboneConfig {
        mask_policy: policy,
        masks_enabled: true,
        ..cfg.backbone
    };
    let (params, _) = train_backbone(train, &backbone, &cfg.train, &Gate::Always, mode, stage)?;
    Ok(SrModel {
        params,
        config: backbone,
        gate: Gate::Always,
    })
}

/// Trains the six variants on `train` and scores them on `test` at
/// `cfg.eval.ablation_alphas`. A finished pipeline run can be passed in to
/// reuse its stage-1 (baseline) and stage-3 (ours) models.
pub fn run_ablation(
    train: &[Pair],
    test: &[Pair],
    cfg: &ExperimentConfig,
    settings: &EvalSettings,
    prior: Option<&PipelineModels>,
) -> Result<AblationOutcome> {
    let owned;
    let pipeline = match prior {
        Some(p) => p,
        None => {
            owned = run_pipeline(train, cfg)?;
            &owned
        }
    };
    let policy = cfg.backbone.mask_policy;
    let fixed = MaskPolicy::fixed(policy.r_lower, policy.r_upper)?;
    let (at_params, _) = train_backbone(
        train,
        &cfg.backbone,
        &cfg.train,
        &Gate::Never,
        BatchMode::Adversarial,
        "ablation-at",
    )?;

    let models: Vec<(String, SrModel)> = vec![
        ("baseline".into(), pipeline.undefended()),
        (
            "+FM".into(),
            masked_variant(train, cfg, fixed, BatchMode::Clean, "ablation-fm")?,
        ),
        (
            "+RM".into(),
            masked_variant(train, cfg, policy, BatchMode::Clean, "ablation-rm")?,
        ),
        ("+AT".into(), SrModel::undefended(at_params, cfg.backbone)),
        (
            "+RM+AT".into(),
            masked_variant(train, cfg, policy, BatchMode::Adversarial, "ablation-rm-at")?,
        ),
        ("ours".into(), pipeline.defended()),
    ];
    let refs: Vec<(&str, &SrModel)> = models.iter().map(|(n, m)| (n.as_str(), m)).collect();
    let result = evaluate_models(&refs, test, settings)?;
    Ok(AblationOutcome { result, models })
}
