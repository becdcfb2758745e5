//! Miniature stacked-hourglass super-resolution network with frequency-mask
//! sites.
//!
//! ```text
//! x ─► [mask] ─► head conv ─► HG₁ ─► … ─► HG_K
//!  │                           │            │
//!  └──── nearest ×s ──────────►+ exit₁      + exit_K  (= SR output)
//!
//! HG_k:  f ─► [mask] ─► encoder/decoder (additive skips) ─► + f ─► [mask]
//!             ─► residual block ─► next hourglass / exit_k
//! ```
//!
//! Mask sites sit on the input image, at each hourglass entry, and right
//! before each residual block: `1 + 2K` sites in total. They are identity
//! unless both `masks_enabled` and the gate are on.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels::conv_kernel_shape, Tape, Var};
use crate::classifier::{classify, ClassifierParams, Label};
use crate::dct::DctPlan;
use crate::error::{Error, Result};
use crate::mask::{sample_mask, BinaryMask, MaskPolicy};
use crate::rng::RngStream;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Upsampling factor; a power of two.
    pub scale: usize,
    pub num_hourglass: usize,
    pub base_channels: usize,
    /// Downsampling levels inside each hourglass.
    pub hg_depth: usize,
    pub mask_policy: MaskPolicy,
    pub masks_enabled: bool,
    pub leaky_slope: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            scale: 2,
            num_hourglass: 2,
            base_channels: 8,
            hg_depth: 2,
            mask_policy: MaskPolicy::default(),
            masks_enabled: true,
            leaky_slope: 0.2,
        }
    }
}

impl BackboneConfig {
    pub fn num_mask_sites(&self) -> usize {
        1 + 2 * self.num_hourglass
    }

    pub fn upsample_steps(&self) -> usize {
        self.scale.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !self.scale.is_power_of_two() || self.scale < 2 {
            return Err(Error::Config(format!(
                "scale must be a power of two >= 2, got {}",
                self.scale
            )));
        }
        if self.num_hourglass == 0 || self.base_channels == 0 {
            return Err(Error::Config(
                "num_hourglass and base_channels must be positive".into(),
            ));
        }
        self.mask_policy.validate()
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let m = 1 << self.hg_depth;
        if x.channels() != 3 || !x.height().is_multiple_of(m) || !x.width().is_multiple_of(m) {
            return Err(Error::InvalidShape(format!(
                "backbone input must be 3-channel with sides divisible by {m}, got {}",
                x.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl Conv {
    /// Uniform `[−a, a]` with `a = √(6 / (fan_in + fan_out))`, zero bias.
    fn init(cin: usize, cout: usize, stream: &mut RngStream) -> Self {
        let k = 3;
        let a = (6.0 / ((k * k * cin) + (k * k * cout)) as f64).sqrt();
        let s = conv_kernel_shape(k, cin, cout);
        Self {
            kernel: Tensor::from_fn(s.height, s.width, s.channels, |_, _, _| {
                stream.uniform_in(-a, a)
            }),
            bias: Tensor::zeros(1, 1, cout),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HourglassParams {
    /// One encoder conv per level, applied before each downsampling.
    pub down: Vec<Conv>,
    pub bottom: Conv,
    /// One decoder conv per level, applied after upsampling + skip.
    pub up: Vec<Conv>,
    pub res1: Conv,
    pub res2: Conv,
    /// `log2(scale)` convs; all but the last keep `C` channels.
    pub exit: Vec<Conv>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub head: Conv,
    pub hourglasses: Vec<HourglassParams>,
}

impl BackboneParams {
    pub fn init(config: &BackboneConfig, stream: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let head = Conv::init(3, c, stream);
        let mut hourglasses = Vec::with_capacity(config.num_hourglass);
        for _ in 0..config.num_hourglass {
            let down = (0..config.hg_depth)
                .map(|_| Conv::init(c, c, stream))
                .collect();
            let bottom = Conv::init(c, c, stream);
            let up = (0..config.hg_depth)
                .map(|_| Conv::init(c, c, stream))
                .collect();
            let res1 = Conv::init(c, c, stream);
            let res2 = Conv::init(c, c, stream);
            let steps = config.upsample_steps();
            let exit = (0..steps)
                .map(|i| Conv::init(c, if i + 1 == steps { 3 } else { c }, stream))
                .collect();
            hourglasses.push(HourglassParams {
                down,
                bottom,
                up,
                res1,
                res2,
                exit,
            });
        }
        Ok(Self { head, hourglasses })
    }

    fn convs(&self) -> Vec<&Conv> {
        let mut v = vec![&self.head];
        for hg in &self.hourglasses {
            v.extend(hg.down.iter());
            v.push(&hg.bottom);
            v.extend(hg.up.iter());
            v.push(&hg.res1);
            v.push(&hg.res2);
            v.extend(hg.exit.iter());
        }
        v
    }

    /// Every parameter tensor in a fixed order (kernel, bias per conv).
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.convs()
            .into_iter()
            .flat_map(|c| [&c.kernel, &c.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Conv> = vec![&mut self.head];
        for hg in &mut self.hourglasses {
            v.extend(hg.down.iter_mut());
            v.push(&mut hg.bottom);
            v.extend(hg.up.iter_mut());
            v.push(&mut hg.res1);
            v.push(&mut hg.res2);
            v.extend(hg.exit.iter_mut());
        }
        v.into_iter()
            .flat_map(|c| [&mut c.kernel, &mut c.bias])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn shapes(&self) -> Vec<Shape> {
        self.tensors().iter().map(|t| t.shape()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Checks every tensor shape against what `config` implies.
    pub fn check_against(&self, config: &BackboneConfig) -> Result<()> {
        let reference = BackboneParams::init(config, &mut RngStream::new(0))?;
        if reference.shapes() != self.shapes() {
            return Err(Error::InvalidShape(
                "backbone parameters do not match the configuration".into(),
            ));
        }
        Ok(())
    }
}

/// Per-site random streams; reusing the same value across calls yields a
/// fresh mask at every call.
#[derive(Clone, Debug)]
pub struct MaskStreams {
    streams: Vec<RngStream>,
}

impl MaskStreams {
    pub fn new(root: &RngStream, sites: usize) -> Self {
        Self {
            streams: (0..sites as u64).map(|i| root.split(i)).collect(),
        }
    }

    pub fn for_config(root: &RngStream, config: &BackboneConfig) -> Self {
        Self::new(root, config.num_mask_sites())
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }
}

/// Where mask sites get their masks from.
pub enum MaskSource<'a> {
    Sample(&'a mut MaskStreams),
    /// Reuse masks recorded by an earlier pass, in site order.
    Frozen(&'a [BinaryMask]),
}

pub struct ForwardVars {
    pub sr: Var,
    pub intermediates: Vec<Var>,
    /// Feature entering each hourglass, before its mask site.
    pub entries: Vec<Var>,
    /// Masks applied, in site order; empty when all sites were bypassed.
    pub masks: Vec<BinaryMask>,
}

pub fn bind_params(tape: &mut Tape, params: &BackboneParams, trainable: bool) -> Vec<Var> {
    params
        .tensors()
        .into_iter()
        .map(|t| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect()
}

struct SiteState<'s, 'a> {
    source: &'s mut MaskSource<'a>,
    active: bool,
    policy: MaskPolicy,
    next: usize,
    used: Vec<BinaryMask>,
    plans: Vec<Rc<DctPlan>>,
}

impl SiteState<'_, '_> {
    fn apply(&mut self, tape: &mut Tape, v: Var) -> Result<Var> {
        let site = self.next;
        self.next += 1;
        if !self.active {
            return Ok(v);
        }
        let s = v.shape();
        let mask = match self.source {
            MaskSource::Sample(streams) => {
                let stream = streams
                    .streams
                    .get_mut(site)
                    .ok_or_else(|| Error::Config(format!("no mask stream for site {site}")))?;
                if self.policy.resample_per_call {
                    sample_mask(s.height, s.width, &self.policy, stream)?
                } else {
                    sample_mask(s.height, s.width, &self.policy, &mut stream.clone())?
                }
            }
            MaskSource::Frozen(masks) => masks
                .get(site)
                .cloned()
                .ok_or_else(|| Error::Config(format!("no frozen mask for site {site}")))?,
        };
        let plan = match self
            .plans
            .iter()
            .find(|p| p.height() == s.height && p.width() == s.width)
        {
            Some(p) => p.clone(),
            None => {
                let p = Rc::new(DctPlan::new(s.height, s.width));
                self.plans.push(p.clone());
                p
            }
        };
        self.used.push(mask.clone());
        tape.masked_linear_with_plan(v, Rc::new(mask), plan)
    }
}

/// Records the network on `tape`. `pvars` must come from [`bind_params`].
pub fn forward_on_tape(
    tape: &mut Tape,
    x: Var,
    pvars: &[Var],
    config: &BackboneConfig,
    gate: bool,
    source: &mut MaskSource<'_>,
) -> Result<ForwardVars> {
    let slope = config.leaky_slope;
    let mut cursor = pvars.iter().copied();
    let mut next_conv = || -> Result<(Var, Var)> {
        match (cursor.next(), cursor.next()) {
            (Some(k), Some(b)) => Ok((k, b)),
            _ => Err(Error::Config("too few parameter variables".into())),
        }
    };
    let mut sites = SiteState {
        source,
        active: gate && config.masks_enabled,
        policy: config.mask_policy,
        next: 0,
        used: Vec::new(),
        plans: Vec::new(),
    };

    let xm = sites.apply(tape, x)?;
    let mut base = xm;
    for _ in 0..config.upsample_steps() {
        base = tape.upsample2x(base);
    }

    let (k, b) = next_conv()?;
    let f0 = tape.conv2d(xm, k, b)?;
    let mut f = tape.leaky_relu(f0, slope);
    let mut intermediates = Vec::with_capacity(config.num_hourglass);
    let mut entries = Vec::with_capacity(config.num_hourglass);

    for _ in 0..config.num_hourglass {
        entries.push(f);
        let entry = sites.apply(tape, f)?;

        let mut h = entry;
        let mut skips = Vec::with_capacity(config.hg_depth);
        for _ in 0..config.hg_depth {
            let (k, b) = next_conv()?;
            let z = tape.conv2d(h, k, b)?;
            let a = tape.leaky_relu(z, slope);
            skips.push(a);
            h = tape.downsample2x(a)?;
        }
        let (k, b) = next_conv()?;
        let z = tape.conv2d(h, k, b)?;
        h = tape.leaky_relu(z, slope);
        let mut ups = Vec::with_capacity(config.hg_depth);
        for _ in 0..config.hg_depth {
            ups.push(next_conv()?);
        }
        // Decoder convs are stored shallow-to-deep; apply them deep-first.
        for (level, (k, b)) in ups.into_iter().enumerate().rev() {
            let u = tape.upsample2x(h);
            let s = tape.add(u, skips[level])?;
            let z = tape.conv2d(s, k, b)?;
            h = tape.leaky_relu(z, slope);
        }
        let g = tape.add(entry, h)?;

        let g = sites.apply(tape, g)?;
        let (k1, b1) = next_conv()?;
        let (k2, b2) = next_conv()?;
        let r = tape.conv2d(g, k1, b1)?;
        let r = tape.leaky_relu(r, slope);
        let r = tape.conv2d(r, k2, b2)?;
        f = tape.add(g, r)?;

        let steps = config.upsample_steps();
        let mut u = f;
        for step in 0..steps {
            let (k, b) = next_conv()?;
            u = tape.upsample2x(u);
            u = tape.conv2d(u, k, b)?;
            if step + 1 < steps {
                u = tape.leaky_relu(u, slope);
            }
        }
        intermediates.push(tape.add(u, base)?);
    }

    Ok(ForwardVars {
        sr: *intermediates.last().expect("at least one hourglass"),
        intermediates,
        entries,
        masks: sites.used,
    })
}

/// Value-only forward pass. Returns the SR image and one output per
/// hourglass exit (the last equals the SR image).
pub fn forward(
    x: &Tensor,
    params: &BackboneParams,
    config: &BackboneConfig,
    gate: bool,
    streams: &mut MaskStreams,
) -> Result<(Tensor, Vec<Tensor>)> {
    config.check_input(x)?;
    let mut tape = Tape::new();
    let pv = bind_params(&mut tape, params, false);
    let xv = tape.constant(x.clone());
    let out = forward_on_tape(
        &mut tape,
        xv,
        &pv,
        config,
        gate,
        &mut MaskSource::Sample(streams),
    )?;
    let inter: Vec<Tensor> = out
        .intermediates
        .iter()
        .map(|&v| tape.value(v).clone())
        .collect();
    Ok((tape.value(out.sr).clone(), inter))
}

/// Features entering each hourglass (before masking) for input `x`.
pub fn hourglass_entries(
    x: &Tensor,
    params: &BackboneParams,
    config: &BackboneConfig,
    gate: bool,
    streams: &mut MaskStreams,
) -> Result<Vec<Tensor>> {
    config.check_input(x)?;
    let mut tape = Tape::new();
    let pv = bind_params(&mut tape, params, false);
    let xv = tape.constant(x.clone());
    let out = forward_on_tape(
        &mut tape,
        xv,
        &pv,
        config,
        gate,
        &mut MaskSource::Sample(streams),
    )?;
    Ok(out.entries.iter().map(|&v| tape.value(v).clone()).collect())
}

/// `1 + |∇hr|`: forward-difference gradient magnitude per channel (zero
/// past the last row/column), averaged over channels and broadcast back.
pub fn gradient_weight(hr: &Tensor) -> Tensor {
    let (h, w, c) = (hr.height(), hr.width(), hr.channels());
    let mag = Tensor::from_fn(h, w, 1, |y, x, _| {
        let mut acc = 0.0;
        for ch in 0..c {
            let v = hr.get(y, x, ch);
            let gx = if x + 1 < w {
                hr.get(y, x + 1, ch) - v
            } else {
                0.0
            };
            let gy = if y + 1 < h {
                hr.get(y + 1, x, ch) - v
            } else {
                0.0
            };
            acc += (gx * gx + gy * gy).sqrt();
        }
        1.0 + acc / c as f64
    });
    mag.broadcast_channels(c).expect("single channel broadcast")
}

/// Weight of the gradient-weighted term.
pub const GRADIENT_WEIGHTED_LAMBDA: f64 = 1.0;

/// `Σ_k L1(I_k, hr) + λ · mean(w ⊙ |sr − hr|)`, recorded on the tape.
pub fn sr_loss_on_tape(
    tape: &mut Tape,
    sr: Var,
    intermediates: &[Var],
    hr: &Tensor,
) -> Result<Var> {
    let target = tape.constant(hr.clone());
    let mut total: Option<Var> = None;
    for &i in intermediates {
        let l = tape.l1_loss(i, target)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let w = gradient_weight(hr);
    let wv = tape.constant(w.clone());
    let weighted_sr = tape.mul(wv, sr)?;
    let weighted_hr = tape.constant(w.mul(hr)?);
    // w > 0, so mean(w·|sr−hr|) = mean(|w·sr − w·hr|).
    let gw = tape.l1_loss(weighted_sr, weighted_hr)?;
    let gw = tape.scale(gw, GRADIENT_WEIGHTED_LAMBDA);
    Ok(match total {
        Some(t) => tape.add(t, gw)?,
        None => gw,
    })
}

pub fn sr_loss(sr: &Tensor, intermediates: &[Tensor], hr: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(sr.clone());
    let inter: Vec<Var> = intermediates
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let l = sr_loss_on_tape(&mut tape, s, &inter, hr)?;
    Ok(tape.value(l).item())
}

/// How the mask gate is decided for an [`SrModel`].
#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Gate {
    /// Masks never run (undefended network).
    Never,
    /// Masks always run (no classifier).
    Always,
    /// The classifier decides per input.
    Classifier(ClassifierParams),
}

/// A backbone together with its gating rule.
#[derive(Clone, Debug, PartialEq)]
pub struct SrModel {
    pub params: BackboneParams,
    pub config: BackboneConfig,
    pub gate: Gate,
}

impl SrModel {
    pub fn undefended(params: BackboneParams, config: BackboneConfig) -> Self {
        Self {
            params,
            config,
            gate: Gate::Never,
        }
    }

    pub fn gate_for(&self, x: &Tensor) -> Result<bool> {
        Ok(match &self.gate {
            Gate::Never => false,
            Gate::Always => true,
            Gate::Classifier(c) => classify(x, c)?.label == Label::Adversarial,
        })
    }

    /// Gate used while an attacker differentiates the model: the classifier
    /// is not differentiable, so it is held at `Adversarial`.
    pub fn attack_gate(&self) -> bool {
        !matches!(self.gate, Gate::Never)
    }

    /// Full inference: gate decision, then the backbone.
    pub fn infer(&self, x: &Tensor, streams: &mut MaskStreams) -> Result<Tensor> {
        let gate = self.gate_for(x)?;
        Ok(forward(x, &self.params, &self.config, gate, streams)?.0)
    }

    /// `sr_loss(model(x), reference)` and its gradient w.r.t. `x`, with the
    /// given gate.
    pub fn loss_and_input_grad(
        &self,
        x: &Tensor,
        reference: &Tensor,
        gate: bool,
        streams: &mut MaskStreams,
    ) -> Result<(f64, Tensor)> {
        self.config.check_input(x)?;
        let mut tape = Tape::new();
        let pv = bind_params(&mut tape, &self.params, false);
        let xv = tape.leaf(x.clone());
        let out = forward_on_tape(
            &mut tape,
            xv,
            &pv,
            &self.config,
            gate,
            &mut MaskSource::Sample(streams),
        )?;
        let loss = sr_loss_on_tape(&mut tape, out.sr, &out.intermediates, reference)?;
        let g = tape.grad(loss)?;
        Ok((tape.value(loss).item(), g.get(xv)))
    }
}

/// Classifier-gated inference: masks run only if `classifier` flags `x`.
pub fn defended_pipeline(
    x: &Tensor,
    params: &BackboneParams,
    config: &BackboneConfig,
    classifier: &ClassifierParams,
    streams: &mut MaskStreams,
) -> Result<Tensor> {
    let gate = classify(x, classifier)?.label == Label::Adversarial;
    Ok(forward(x, params, config, gate, streams)?.0)
}
