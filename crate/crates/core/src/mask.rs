//! Random frequency masking: `X_m = F⁻¹(M ⊙ F(X))` with a sector-shaped
//! binary mask `M` shared by all channels.
//!
//! For each spectral position the normalized radius
//! `r = √(u²+v²) / √((H−1)²+(W−1)²)` decides its fate. Positions with
//! `r ≤ r_t` always pass. Beyond the threshold a position is dropped with
//! probability `r`, so higher frequencies are erased more often. The
//! threshold `r_t` itself is drawn uniformly from `[r_lower, r_upper]` on
//! every sample.

use serde::{Deserialize, Serialize};

use crate::dct::{DctPlan, SpectralMap};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// Uniform threshold plus Bernoulli dropping above it.
    #[default]
    Random,
    /// Deterministic hard cutoff at `(r_lower + r_upper) / 2`.
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskPolicy {
    pub r_lower: f64,
    pub r_upper: f64,
    pub resample_per_call: bool,
    pub kind: MaskKind,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            r_lower: 0.43,
            r_upper: 0.5,
            resample_per_call: true,
            kind: MaskKind::Random,
        }
    }
}

impl MaskPolicy {
    pub fn new(r_lower: f64, r_upper: f64) -> Result<Self> {
        let p = Self {
            r_lower,
            r_upper,
            ..Self::default()
        };
        p.validate()?;
        Ok(p)
    }

    /// Keeps every coefficient.
    pub fn all_pass() -> Self {
        Self {
            r_lower: 1.0,
            r_upper: 1.0,
            ..Self::default()
        }
    }

    pub fn fixed(r_lower: f64, r_upper: f64) -> Result<Self> {
        let p = Self {
            r_lower,
            r_upper,
            kind: MaskKind::Fixed,
            ..Self::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.r_lower)
            && (0.0..=1.0).contains(&self.r_upper)
            && self.r_lower <= self.r_upper;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidPolicy(format!(
                "need 0 <= r_lower <= r_upper <= 1, got [{}, {}]",
                self.r_lower, self.r_upper
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<u8>,
    pub threshold_used: f64,
    pub seed_used: u64,
}

impl BinaryMask {
    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![1; height * width],
            threshold_used: 1.0,
            seed_used: 0,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            bits: vec![0; height * width],
            threshold_used: 0.0,
            ..Self::ones(height, width)
        }
    }

    #[inline]
    pub fn bit(&self, u: usize, v: usize) -> u8 {
        self.bits[u * self.width + v]
    }

    pub fn kept_fraction(&self) -> f64 {
        self.bits.iter().map(|&b| b as f64).sum::<f64>() / self.bits.len() as f64
    }
}

fn radius_values(height: usize, width: usize) -> Result<Vec<f64>> {
    if height == 0 || width == 0 || height * width <= 1 {
        return Err(Error::DegenerateShape { height, width });
    }
    let r_max = (((height - 1).pow(2) + (width - 1).pow(2)) as f64).sqrt();
    let mut out = Vec::with_capacity(height * width);
    for u in 0..height {
        for v in 0..width {
            out.push(((u * u + v * v) as f64).sqrt() / r_max);
        }
    }
    Ok(out)
}

/// Normalized spectral radius of every position, as `H×W×1`.
pub fn radius_map(height: usize, width: usize) -> Result<Tensor> {
    let r = radius_values(height, width)?;
    Ok(Tensor::from_raw(
        crate::tensor::Shape::new(height, width, 1),
        r,
    ))
}

/// Draws one mask. Order of draws: the threshold first (random kind only),
/// then one Bernoulli per above-threshold position in row-major order.
pub fn sample_mask(
    height: usize,
    width: usize,
    policy: &MaskPolicy,
    stream: &mut RngStream,
) -> Result<BinaryMask> {
    policy.validate()?;
    let radius = radius_values(height, width)?;
    let threshold = match policy.kind {
        MaskKind::Random => stream.uniform_in(policy.r_lower, policy.r_upper),
        MaskKind::Fixed => 0.5 * (policy.r_lower + policy.r_upper),
    };
    let mut bits = Vec::with_capacity(radius.len());
    for &r in &radius {
        let keep = if r <= threshold {
            1
        } else {
            match policy.kind {
                // `r` is the probability of dropping the coefficient.
                MaskKind::Random => 1 - stream.bernoulli(r)?,
                MaskKind::Fixed => 0,
            }
        };
        bits.push(keep);
    }
    Ok(BinaryMask {
        height,
        width,
        bits,
        threshold_used: threshold,
        seed_used: stream.seed(),
    })
}

/// Multiplies a spectrum by the mask in place, on every channel.
pub fn mask_spectrum(spectrum: &mut Tensor, mask: &BinaryMask) {
    let c = spectrum.channels();
    for (px, &b) in spectrum.data_mut().chunks_exact_mut(c).zip(&mask.bits) {
        if b == 0 {
            px.fill(0.0);
        }
    }
}

/// `F⁻¹ · diag(M) · F` using a precomputed plan. The operator is symmetric,
/// so the same call propagates adjoints backwards.
pub fn apply_mask_with_plan(x: &Tensor, mask: &BinaryMask, plan: &DctPlan) -> Result<Tensor> {
    if x.height() != mask.height || x.width() != mask.width {
        return Err(Error::InvalidShape(format!(
            "mask {}x{} does not match tensor {}",
            mask.height,
            mask.width,
            x.shape()
        )));
    }
    let mut spec = plan.forward(x).into_tensor();
    mask_spectrum(&mut spec, mask);
    Ok(plan.inverse(&SpectralMap::from_tensor(spec)))
}

pub fn apply_mask(x: &Tensor, mask: &BinaryMask) -> Result<Tensor> {
    apply_mask_with_plan(x, mask, &DctPlan::new(x.height(), x.width()))
}

/// One mask-module invocation. With `gate == false` the input is returned
/// untouched. Without `resample_per_call` the mask is drawn from a copy of
/// the stream, so repeated calls see the same mask.
pub fn mask_module_forward(
    x: &Tensor,
    policy: &MaskPolicy,
    gate: bool,
    stream: &mut RngStream,
) -> Result<Tensor> {
    if !gate {
        return Ok(x.clone());
    }
    let mask = if policy.resample_per_call {
        sample_mask(x.height(), x.width(), policy, stream)?
    } else {
        sample_mask(x.height(), x.width(), policy, &mut stream.clone())?
    };
    apply_mask(x, &mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
        let mut s = RngStream::new(seed);
        Tensor::from_fn(h, w, c, |_, _, _| s.uniform())
    }

    #[test]
    fn radius_corners() {
        for (h, w) in [(2, 1), (4, 4), (5, 9), (16, 3)] {
            let r = radius_map(h, w).unwrap();
            assert_eq!(r.get(0, 0, 0), 0.0);
            assert!((r.get(h - 1, w - 1, 0) - 1.0).abs() < 1e-15);
        }
        let r = radius_map(4, 4).unwrap();
        assert!((r.get(1, 2, 0) - 5f64.sqrt() / 18f64.sqrt()).abs() < 1e-15);
        assert!((r.get(1, 2, 0) - 0.527).abs() < 1e-3);
    }

    #[test]
    fn radius_rejects_single_pixel() {
        assert!(matches!(
            radius_map(1, 1),
            Err(Error::DegenerateShape { .. })
        ));
    }

    #[test]
    fn policy_validation() {
        assert!(MaskPolicy::new(0.5, 0.4).is_err());
        assert!(MaskPolicy::new(-0.1, 0.4).is_err());
        assert!(MaskPolicy::new(0.4, 1.1).is_err());
        assert!(MaskPolicy::new(0.43, 0.5).is_ok());
    }

    #[test]
    fn all_pass_policy_keeps_everything() {
        let mut s = RngStream::new(3);
        let m = sample_mask(9, 7, &MaskPolicy::all_pass(), &mut s).unwrap();
        assert!(m.bits.iter().all(|&b| b == 1));
    }

    #[test]
    fn zero_threshold_always_drops_far_corner() {
        let policy = MaskPolicy::new(0.0, 0.0).unwrap();
        let mut s = RngStream::new(3);
        for _ in 0..200 {
            let m = sample_mask(6, 6, &policy, &mut s).unwrap();
            assert_eq!(m.bit(5, 5), 0);
            assert_eq!(m.bit(0, 0), 1);
        }
    }

    #[test]
    fn below_threshold_always_kept() {
        let policy = MaskPolicy::default();
        let r = radius_map(12, 10).unwrap();
        let mut s = RngStream::new(8);
        for _ in 0..50 {
            let m = sample_mask(12, 10, &policy, &mut s).unwrap();
            assert!((policy.r_lower..=policy.r_upper).contains(&m.threshold_used));
            for u in 0..12 {
                for v in 0..10 {
                    if r.get(u, v, 0) <= m.threshold_used {
                        assert_eq!(m.bit(u, v), 1);
                    }
                }
            }
        }
    }

    #[test]
    fn fixed_mask_is_hard_cutoff() {
        let policy = MaskPolicy::fixed(0.43, 0.5).unwrap();
        let r = radius_map(8, 8).unwrap();
        let mut s = RngStream::new(0);
        let m = sample_mask(8, 8, &policy, &mut s).unwrap();
        assert_eq!(s.counter(), 0);
        for u in 0..8 {
            for v in 0..8 {
                assert_eq!(m.bit(u, v), u8::from(r.get(u, v, 0) <= 0.465));
            }
        }
    }

    #[test]
    fn apply_mask_extremes() {
        let x = random(6, 5, 3, 1);
        let id = apply_mask(&x, &BinaryMask::ones(6, 5)).unwrap();
        assert!(id.max_abs_diff(&x).unwrap() < 1e-10);
        let zero = apply_mask(&x, &BinaryMask::zeros(6, 5)).unwrap();
        assert!(zero.max_abs() < 1e-15);
    }

    #[test]
    fn constant_image_survives_any_mask_keeping_dc() {
        let x = Tensor::full(8, 8, 3, 0.37);
        let mut s = RngStream::new(4);
        let policy = MaskPolicy::new(0.0, 0.0).unwrap();
        let m = sample_mask(8, 8, &policy, &mut s).unwrap();
        assert_eq!(m.bit(0, 0), 1);
        let y = apply_mask(&x, &m).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn apply_mask_shape_mismatch() {
        let x = random(4, 4, 1, 0);
        assert!(apply_mask(&x, &BinaryMask::ones(4, 5)).is_err());
    }

    #[test]
    fn idempotent_and_linear() {
        let mut s = RngStream::new(12);
        let m = sample_mask(7, 9, &MaskPolicy::default(), &mut s).unwrap();
        let (a, b) = (random(7, 9, 2, 1), random(7, 9, 2, 2));
        let once = apply_mask(&a, &m).unwrap();
        let twice = apply_mask(&once, &m).unwrap();
        assert!(once.max_abs_diff(&twice).unwrap() < 1e-10);

        let lhs = apply_mask(&a.scale(2.0).add(&b.scale(-0.5)).unwrap(), &m).unwrap();
        let rhs = once
            .scale(2.0)
            .add(&apply_mask(&b, &m).unwrap().scale(-0.5))
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
    }

    #[test]
    fn gate_off_is_bitwise_identity() {
        let x = random(5, 5, 3, 9);
        let mut s = RngStream::new(1);
        let y = mask_module_forward(&x, &MaskPolicy::default(), false, &mut s).unwrap();
        assert_eq!(y, x);
        assert_eq!(s.counter(), 0);
        let y = mask_module_forward(&x, &MaskPolicy::all_pass(), true, &mut s).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-10);
    }

    #[test]
    fn frozen_policy_repeats_mask() {
        let x = random(8, 8, 1, 2);
        let policy = MaskPolicy {
            resample_per_call: false,
            ..MaskPolicy::default()
        };
        let mut s = RngStream::new(5);
        let a = mask_module_forward(&x, &policy, true, &mut s).unwrap();
        let b = mask_module_forward(&x, &policy, true, &mut s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn expected_masked_fraction() {
        let (h, w, rt) = (16, 16, 0.43);
        let r = radius_map(h, w).unwrap();
        let policy = MaskPolicy::new(rt, rt).unwrap();
        let expected = {
            let above: Vec<f64> = r.data().iter().copied().filter(|&v| v > rt).collect();
            above.iter().sum::<f64>() / above.len() as f64
        };
        let n_above = r.data().iter().filter(|&&v| v > rt).count() as f64;
        let mut s = RngStream::new(77);
        let n = 10_000;
        let mut masked = 0.0;
        for _ in 0..n {
            let m = sample_mask(h, w, &policy, &mut s).unwrap();
            let dropped = m.bits.iter().filter(|&&b| b == 0).count() as f64;
            masked += dropped / n_above;
        }
        let est = masked / n as f64;
        assert!((est - expected).abs() < 0.01, "{est} vs {expected}");
    }
}
