//! Iterative gradient-sign attack under an L∞ budget.

use serde::{Deserialize, Serialize};

use crate::backbone::{MaskStreams, SrModel};
use crate::error::{Error, Result};
use crate::par::{try_map_range, Parallelism};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossTarget {
    /// Maximize the SR loss against the HR ground truth.
    #[default]
    GroundTruth,
    /// Maximize the SR loss against the model's own output on the clean input.
    CleanOutput,
}

impl std::str::FromStr for LossTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground-truth" => Ok(Self::GroundTruth),
            "clean-output" => Ok(Self::CleanOutput),
            other => Err(Error::InvalidAttack(format!(
                "unknown loss target {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// L∞ budget in pixel units.
    pub alpha: f64,
    pub iterations: usize,
    /// Per-iteration step; `None` means `2·alpha/iterations`.
    pub step: Option<f64>,
    pub loss_target: LossTarget,
    pub clamp_min: f64,
    pub clamp_max: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::from_numerator(8, 10)
    }
}

impl AttackConfig {
    /// Budget `numerator/255` with `iterations` steps.
    pub fn from_numerator(numerator: u32, iterations: usize) -> Self {
        Self {
            alpha: numerator as f64 / 255.0,
            iterations,
            step: None,
            loss_target: LossTarget::GroundTruth,
            clamp_min: 0.0,
            clamp_max: 1.0,
        }
    }

    pub fn step_size(&self) -> f64 {
        self.step
            .unwrap_or(2.0 * self.alpha / self.iterations.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidAttack(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidAttack("iterations must be positive".into()));
        }
        let step = self.step_size();
        if self.alpha > 0.0 && !(step.is_finite() && step > 0.0) {
            return Err(Error::InvalidAttack(format!(
                "step must be > 0, got {step}"
            )));
        }
        if self.clamp_min.partial_cmp(&self.clamp_max) != Some(std::cmp::Ordering::Less) {
            return Err(Error::InvalidAttack("empty clamp range".into()));
        }
        Ok(())
    }
}

/// A model the attacker can differentiate with respect to its input.
pub trait AttackModel {
    /// Number of mask sites needing their own random stream.
    fn mask_sites(&self) -> usize;

    /// Output used as the reference for [`LossTarget::CleanOutput`].
    fn predict(&self, x: &Tensor, masks: &mut MaskStreams) -> Result<Tensor>;

    /// Loss against `reference` and its gradient with respect to `x`.
    fn loss_and_input_grad(
        &self,
        x: &Tensor,
        reference: &Tensor,
        masks: &mut MaskStreams,
    ) -> Result<(f64, Tensor)>;
}

/// The classifier gate cannot be differentiated, so an [`SrModel`] under
/// attack keeps masks on unless it has no gate at all.
impl AttackModel for SrModel {
    fn mask_sites(&self) -> usize {
        self.config.num_mask_sites()
    }

    fn predict(&self, x: &Tensor, masks: &mut MaskStreams) -> Result<Tensor> {
        let gate = self.attack_gate();
        Ok(crate::backbone::forward(x, &self.params, &self.config, gate, masks)?.0)
    }

    fn loss_and_input_grad(
        &self,
        x: &Tensor,
        reference: &Tensor,
        masks: &mut MaskStreams,
    ) -> Result<(f64, Tensor)> {
        SrModel::loss_and_input_grad(self, x, reference, self.attack_gate(), masks)
    }
}

/// Forces the gate open regardless of the model's own rule.
struct GateOpen<'a>(&'a SrModel);

impl AttackModel for GateOpen<'_> {
    fn mask_sites(&self) -> usize {
        self.0.config.num_mask_sites()
    }

    fn predict(&self, x: &Tensor, masks: &mut MaskStreams) -> Result<Tensor> {
        Ok(crate::backbone::forward(x, &self.0.params, &self.0.config, true, masks)?.0)
    }

    fn loss_and_input_grad(
        &self,
        x: &Tensor,
        reference: &Tensor,
        masks: &mut MaskStreams,
    ) -> Result<(f64, Tensor)> {
        self.0.loss_and_input_grad(x, reference, true, masks)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects `v` onto `[x − alpha, x + alpha] ∩ [lo, hi]` so that the
/// computed difference `v − x` never exceeds `alpha` in floating point.
fn project(v: f64, x: f64, alpha: f64, lo: f64, hi: f64) -> f64 {
    let mut p = v.clamp(x - alpha, x + alpha);
    while p - x > alpha {
        p = p.next_down();
    }
    while x - p > alpha {
        p = p.next_up();
    }
    p.clamp(lo, hi)
}

/// Every iterate of the attack, starting with `x` itself.
pub fn attack_trajectory<M: AttackModel + ?Sized>(
    x: &Tensor,
    hr: &Tensor,
    model: &M,
    config: &AttackConfig,
    stream: &RngStream,
) -> Result<Vec<Tensor>> {
    config.validate()?;
    let mut path = vec![x.clone()];
    if config.alpha == 0.0 {
        return Ok(path);
    }
    let mut masks = MaskStreams::new(stream, model.mask_sites());
    let reference = match config.loss_target {
        LossTarget::GroundTruth => hr.clone(),
        LossTarget::CleanOutput => model.predict(x, &mut masks)?,
    };
    let step = config.step_size();
    let (alpha, lo, hi) = (config.alpha, config.clamp_min, config.clamp_max);
    let mut cur = x.clone();
    for iteration in 0..config.iterations {
        let (_, g) = model.loss_and_input_grad(&cur, &reference, &mut masks)?;
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { iteration });
        }
        cur = cur
            .zip_map(&g, |v, gv| v + step * sign(gv))?
            .zip_map(x, |v, x0| project(v, x0, alpha, lo, hi))?;
        path.push(cur.clone());
    }
    Ok(path)
}

/// Adversarial input after `config.iterations` signed-gradient steps.
pub fn basic_attack<M: AttackModel + ?Sized>(
    x: &Tensor,
    hr: &Tensor,
    model: &M,
    config: &AttackConfig,
    stream: &RngStream,
) -> Result<Tensor> {
    let mut path = attack_trajectory(x, hr, model, config, stream)?;
    Ok(path.pop().expect("trajectory starts with x"))
}

/// White-box attack on the defended pipeline: gradients flow through the
/// mask operators with a fresh mask draw at every iteration, and the gate
/// is held open.
pub fn attack_defended(
    x: &Tensor,
    hr: &Tensor,
    model: &SrModel,
    config: &AttackConfig,
    stream: &RngStream,
) -> Result<Tensor> {
    basic_attack(x, hr, &GateOpen(model), config, stream)
}

/// Attacks each pair with its own split stream; output order matches input.
pub fn attack_batch<M: AttackModel + Sync + ?Sized>(
    pairs: &[(Tensor, Tensor)],
    model: &M,
    config: &AttackConfig,
    stream: &RngStream,
    mode: Parallelism,
) -> Result<Vec<Tensor>> {
    try_map_range(pairs.len(), mode, |i| {
        let (x, hr) = &pairs[i];
        basic_attack(x, hr, model, config, &stream.split(i as u64))
    })
}

/// Checks the budget and pixel-range contract of an attacked input.
pub fn check_invariants(x: &Tensor, x_adv: &Tensor, config: &AttackConfig) -> Result<()> {
    let d = x_adv.max_abs_diff(x)?;
    if d > config.alpha {
        return Err(Error::AttackInvariant(format!(
            "L-inf distance {d} exceeds alpha {}",
            config.alpha
        )));
    }
    if x_adv
        .data()
        .iter()
        .any(|&v| v < config.clamp_min || v > config.clamp_max)
    {
        return Err(Error::AttackInvariant("pixel outside clamp range".into()));
    }
    Ok(())
}
