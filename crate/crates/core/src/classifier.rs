//! Two-class adversarial-sample detector over pooled DCT spectra.
//!
//! Features: DCT of every channel (absolute values by default, see
//! [`SpectrumFeature`]), mean over channels, `γ×γ` average pooling
//! with stride `γ` (remainder rows/cols dropped), row-major flatten. The
//! vector goes through three fully-connected layers with LeakyReLU between
//! them and a softmax over `{Clean, Adversarial}`.
//!
//! When an input pools to a different grid than the one seen in training, an
//! adaptive average pool maps it onto the training grid before the FC stack.

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape, Var};
use crate::dct::dct2;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Clean,
    Adversarial,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Clean => 0,
            Label::Adversarial => 1,
        }
    }
}

/// What is averaged over channels and pooling windows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectrumFeature {
    /// `|coefficient|`; sign-alternating perturbation energy survives pooling.
    #[default]
    Magnitude,
    /// Signed coefficients as produced by the transform.
    Signed,
}

impl SpectrumFeature {
    pub fn code(self) -> u32 {
        match self {
            SpectrumFeature::Magnitude => 0,
            SpectrumFeature::Signed => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(SpectrumFeature::Magnitude),
            1 => Some(SpectrumFeature::Signed),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Verdict {
    pub label: Label,
    /// Softmax probability of `label`; always in `[0.5, 1]`.
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub gamma: usize,
    pub feature: SpectrumFeature,
    /// `(out × in × 1)` weight matrices and `(out × 1 × 1)` biases.
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
    pub leaky_slope: f64,
    /// Input `(height, width)` used during training.
    pub input_side: (usize, usize),
}

fn glorot(rows: usize, cols: usize, stream: &mut RngStream) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, 1, |_, _, _| stream.uniform_in(-a, a))
}

impl ClassifierParams {
    /// Fresh parameters for inputs of `input_side` with the given hidden widths.
    pub fn init(
        gamma: usize,
        input_side: (usize, usize),
        hidden: (usize, usize),
        leaky_slope: f64,
        stream: &mut RngStream,
    ) -> Result<Self> {
        let (ph, pw) = pooled_dims(input_side.0, input_side.1, gamma)?;
        let d = ph * pw;
        let p = Self {
            gamma,
            feature: SpectrumFeature::default(),
            w1: glorot(hidden.0, d, stream),
            b1: Tensor::zeros(hidden.0, 1, 1),
            w2: glorot(hidden.1, hidden.0, stream),
            b2: Tensor::zeros(hidden.1, 1, 1),
            w3: glorot(2, hidden.1, stream),
            b3: Tensor::zeros(2, 1, 1),
            leaky_slope,
            input_side,
        };
        p.validate()?;
        Ok(p)
    }

    /// All-zero weights and biases: a classifier that always ties.
    pub fn zeros(gamma: usize, input_side: (usize, usize), hidden: (usize, usize)) -> Result<Self> {
        let (ph, pw) = pooled_dims(input_side.0, input_side.1, gamma)?;
        Ok(Self {
            gamma,
            feature: SpectrumFeature::default(),
            w1: Tensor::zeros(hidden.0, ph * pw, 1),
            b1: Tensor::zeros(hidden.0, 1, 1),
            w2: Tensor::zeros(hidden.1, hidden.0, 1),
            b2: Tensor::zeros(hidden.1, 1, 1),
            w3: Tensor::zeros(2, hidden.1, 1),
            b3: Tensor::zeros(2, 1, 1),
            leaky_slope: 0.01,
            input_side,
        })
    }

    /// A classifier with zero weights whose output bias hard-wires `label`.
    pub fn constant(label: Label, gamma: usize, input_side: (usize, usize)) -> Result<Self> {
        let mut p = Self::zeros(gamma, input_side, (4, 4))?;
        p.b3.set(label.index(), 0, 0, 50.0);
        Ok(p)
    }

    pub fn input_dim(&self) -> usize {
        self.w1.width()
    }

    pub fn hidden(&self) -> (usize, usize) {
        (self.w1.height(), self.w2.height())
    }

    /// Pooled grid the FC stack was built for.
    pub fn train_grid(&self) -> (usize, usize) {
        (
            self.input_side.0 / self.gamma,
            self.input_side.1 / self.gamma,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let chain = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::DimensionChain(what.to_string()))
            }
        };
        let (gh, gw) = self.train_grid();
        chain(self.gamma > 0, "gamma must be positive")?;
        chain(gh * gw == self.input_dim(), "W1 input width != pooled size")?;
        chain(
            self.b1.height() == self.w1.height() && self.w2.width() == self.w1.height(),
            "layer 1 -> 2",
        )?;
        chain(
            self.b2.height() == self.w2.height() && self.w3.width() == self.w2.height(),
            "layer 2 -> 3",
        )?;
        chain(
            self.w3.height() == 2 && self.b3.height() == 2,
            "output layer must have 2 units",
        )?;
        Ok(())
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }
}

pub fn pooled_dims(height: usize, width: usize, gamma: usize) -> Result<(usize, usize)> {
    if gamma == 0 || height < gamma || width < gamma {
        return Err(Error::PoolingWindow {
            height,
            width,
            gamma,
        });
    }
    Ok((height / gamma, width / gamma))
}

/// Channel-averaged spectrum pooled with a `γ×γ` window, stride `γ`.
pub fn pooled_spectrum(x: &Tensor, gamma: usize, feature: SpectrumFeature) -> Result<Tensor> {
    let (ph, pw) = pooled_dims(x.height(), x.width(), gamma)?;
    let spectrum = dct2(x).into_tensor();
    let avg = match feature {
        SpectrumFeature::Magnitude => spectrum.map(f64::abs).channel_mean(),
        SpectrumFeature::Signed => spectrum.channel_mean(),
    };
    let norm = 1.0 / (gamma * gamma) as f64;
    Ok(Tensor::from_fn(ph, pw, 1, |i, j, _| {
        let mut acc = 0.0;
        for dy in 0..gamma {
            for dx in 0..gamma {
                acc += avg.get(i * gamma + dy, j * gamma + dx, 0);
            }
        }
        acc * norm
    }))
}

/// Flattened pooled spectrum, length `⌊H/γ⌋·⌊W/γ⌋`.
pub fn featurize(x: &Tensor, gamma: usize, feature: SpectrumFeature) -> Result<Vec<f64>> {
    Ok(pooled_spectrum(x, gamma, feature)?.into_vec())
}

/// Adaptive average pooling of a single-channel map onto `out_h × out_w`.
/// Cell `i` covers rows `⌊i·H/out_h⌋ .. ⌈(i+1)·H/out_h⌉`.
pub fn adaptive_avg_pool(map: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (h, w) = (map.height(), map.width());
    let span = |i: usize, n_in: usize, n_out: usize| {
        let start = i * n_in / n_out;
        let end = ((i + 1) * n_in).div_ceil(n_out);
        (start, end.max(start + 1))
    };
    Tensor::from_fn(out_h, out_w, 1, |i, j, _| {
        let (y0, y1) = span(i, h, out_h);
        let (x0, x1) = span(j, w, out_w);
        let mut acc = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                acc += map.get(y, x, 0);
            }
        }
        acc / ((y1 - y0) * (x1 - x0)) as f64
    })
}

/// Features aligned to the classifier's training grid.
pub fn features_for(params: &ClassifierParams, x: &Tensor) -> Result<Vec<f64>> {
    let pooled = pooled_spectrum(x, params.gamma, params.feature)?;
    let (gh, gw) = params.train_grid();
    if (pooled.height(), pooled.width()) == (gh, gw) {
        Ok(pooled.into_vec())
    } else {
        Ok(adaptive_avg_pool(&pooled, gh, gw).into_vec())
    }
}

fn leaky(v: &mut [f64], slope: f64) {
    for x in v {
        if *x <= 0.0 {
            *x *= slope;
        }
    }
}

/// Raw logits `[clean, adversarial]` for a feature vector.
pub fn logits(params: &ClassifierParams, features: &[f64]) -> Result<[f64; 2]> {
    if features.len() != params.input_dim() {
        return Err(Error::DimensionChain(format!(
            "{} features for a classifier expecting {}",
            features.len(),
            params.input_dim()
        )));
    }
    let f = Tensor::from_raw(
        crate::tensor::Shape::new(features.len(), 1, 1),
        features.to_vec(),
    );
    let mut h1 = kernels::matmul(&params.w1, &f)?.add(&params.b1)?;
    leaky(h1.data_mut(), params.leaky_slope);
    let mut h2 = kernels::matmul(&params.w2, &h1)?.add(&params.b2)?;
    leaky(h2.data_mut(), params.leaky_slope);
    let out = kernels::matmul(&params.w3, &h2)?.add(&params.b3)?;
    Ok([out.data()[0], out.data()[1]])
}

/// Softmax probabilities `[clean, adversarial]`.
pub fn probabilities(params: &ClassifierParams, x: &Tensor) -> Result<[f64; 2]> {
    params.validate()?;
    let z = logits(params, &features_for(params, x)?)?;
    let p = kernels::softmax(&z);
    Ok([p[0], p[1]])
}

fn verdict_from(p: [f64; 2]) -> Verdict {
    // Exact ties go to Clean so a degenerate classifier never masks.
    if p[1] > p[0] {
        Verdict {
            label: Label::Adversarial,
            confidence: p[1],
        }
    } else {
        Verdict {
            label: Label::Clean,
            confidence: p[0],
        }
    }
}

pub fn classify(x: &Tensor, params: &ClassifierParams) -> Result<Verdict> {
    Ok(verdict_from(probabilities(params, x)?))
}

/// Records the FC stack for one feature vector on `tape`; returns the logits
/// variable. `vars` are the six parameter leaves in [`ClassifierParams::tensors`] order.
pub fn logits_on_tape(
    tape: &mut Tape,
    vars: &[Var; 6],
    features: &[f64],
    slope: f64,
) -> Result<Var> {
    let f = tape.constant(Tensor::from_raw(
        crate::tensor::Shape::new(features.len(), 1, 1),
        features.to_vec(),
    ));
    let z1 = tape.matmul(vars[0], f)?;
    let z1 = tape.add(z1, vars[1])?;
    let h1 = tape.leaky_relu(z1, slope);
    let z2 = tape.matmul(vars[2], h1)?;
    let z2 = tape.add(z2, vars[3])?;
    let h2 = tape.leaky_relu(z2, slope);
    let z3 = tape.matmul(vars[4], h2)?;
    tape.add(z3, vars[5])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub gamma: usize,
    pub feature: SpectrumFeature,
    pub hidden: (usize, usize),
    pub leaky_slope: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Fraction of each class held out for validation.
    pub validation_fraction: f64,
    /// Standardize features during training; folded back into the first
    /// layer so the returned parameters take raw features.
    pub standardize: bool,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            gamma: 3,
            feature: SpectrumFeature::default(),
            hidden: (128, 32),
            leaky_slope: 0.01,
            epochs: 50,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            validation_fraction: 0.2,
            standardize: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassifierTrainLog {
    /// Mean cross-entropy over the training split after each epoch.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    /// `None` when nothing was held out.
    pub validation_accuracy: Option<f64>,
    pub train_size: usize,
    pub validation_size: usize,
}

fn accuracy(params: &ClassifierParams, data: &[(Vec<f64>, Label)]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (f, label) in data {
        let z = logits(params, f)?;
        let p = kernels::softmax(&z);
        if verdict_from([p[0], p[1]]).label == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

fn mean_loss(params: &ClassifierParams, data: &[(Vec<f64>, Label)]) -> Result<f64> {
    let mut acc = 0.0;
    for (f, label) in data {
        let p = kernels::softmax(&logits(params, f)?);
        acc -= p[label.index()].max(f64::MIN_POSITIVE).ln();
    }
    Ok(acc / data.len() as f64)
}

/// Mini-batch Adam on two-class cross-entropy.
pub fn train_classifier(
    clean: &[Tensor],
    adversarial: &[Tensor],
    config: &ClassifierTrainConfig,
    stream: &mut RngStream,
) -> Result<(ClassifierParams, ClassifierTrainLog)> {
    if clean.is_empty() {
        return Err(Error::EmptyDataset("no clean samples"));
    }
    if adversarial.is_empty() {
        return Err(Error::EmptyDataset("no adversarial samples"));
    }
    let side = (clean[0].height(), clean[0].width());
    let mut labelled: Vec<Vec<(Vec<f64>, Label)>> = Vec::with_capacity(2);
    for (set, label) in [(clean, Label::Clean), (adversarial, Label::Adversarial)] {
        let mut feats = Vec::with_capacity(set.len());
        for x in set {
            if (x.height(), x.width()) != side {
                return Err(Error::InvalidShape(format!(
                    "classifier samples must share one size; {}x{} vs {}",
                    side.0,
                    side.1,
                    x.shape()
                )));
            }
            feats.push((featurize(x, config.gamma, config.feature)?, label));
        }
        labelled.push(feats);
    }

    // Stratified split.
    let mut train = Vec::new();
    let mut val = Vec::new();
    for mut class in labelled {
        shuffle(&mut class, stream);
        let n_val = (class.len() as f64 * config.validation_fraction).floor() as usize;
        let n_val = n_val.min(class.len().saturating_sub(1));
        val.extend(class.drain(..n_val));
        train.extend(class);
    }

    let dim = train[0].0.len();
    let (mu, sd) = if config.standardize {
        feature_stats(&train, dim)
    } else {
        (vec![0.0; dim], vec![1.0; dim])
    };
    let normalized: Vec<(Vec<f64>, Label)> = train
        .iter()
        .map(|(f, l)| {
            (
                f.iter()
                    .zip(&mu)
                    .zip(&sd)
                    .map(|((v, m), s)| (v - m) / s)
                    .collect(),
                *l,
            )
        })
        .collect();

    let mut params = ClassifierParams::init(
        config.gamma,
        side,
        config.hidden,
        config.leaky_slope,
        stream,
    )?;
    params.feature = config.feature;
    let mut opt = Adam::new(config.optimizer, &params.tensors());
    let mut log = ClassifierTrainLog {
        train_size: train.len(),
        validation_size: val.len(),
        ..Default::default()
    };
    let batch = config.batch_size.max(1);
    let mut order: Vec<usize> = (0..normalized.len()).collect();
    for epoch in 0..config.epochs {
        shuffle(&mut order, stream);
        for chunk in order.chunks(batch) {
            let mut tape = Tape::new();
            let vars = params.tensors().map(|t| tape.leaf(t.clone()));
            let mut total: Option<Var> = None;
            for &i in chunk {
                let (f, label) = &normalized[i];
                let z = logits_on_tape(&mut tape, &vars, f, params.leaky_slope)?;
                let l = tape.softmax_cross_entropy(z, label.index())?;
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            let loss = tape.scale(total.expect("non-empty chunk"), 1.0 / chunk.len() as f64);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    stage: "classifier",
                    iteration: epoch,
                    loss: value,
                });
            }
            let grads = tape.grad_wrt(loss, &vars)?;
            opt.step(
                &mut params.tensors_mut(),
                &grads,
                config.optimizer.learning_rate,
            );
        }
        let l = mean_loss(&params, &normalized)?;
        if !l.is_finite() {
            return Err(Error::Divergence {
                stage: "classifier",
                iteration: epoch,
                loss: l,
            });
        }
        log.epoch_losses.push(l);
    }

    fold_standardization(&mut params, &mu, &sd);
    log.train_accuracy = accuracy(&params, &train)?;
    log.validation_accuracy = if val.is_empty() {
        None
    } else {
        Some(accuracy(&params, &val)?)
    };
    Ok((params, log))
}

fn feature_stats(data: &[(Vec<f64>, Label)], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = data.len() as f64;
    let mut mu = vec![0.0; dim];
    for (f, _) in data {
        for (m, v) in mu.iter_mut().zip(f) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; dim];
    for (f, _) in data {
        for ((s, v), m) in var.iter_mut().zip(f).zip(&mu) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let sd = var
        .into_iter()
        .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
        .collect();
    (mu, sd)
}

/// Rewrites `W1 (f − μ)/σ + b1` as `W1' f + b1'`.
fn fold_standardization(params: &mut ClassifierParams, mu: &[f64], sd: &[f64]) {
    let (rows, cols) = (params.w1.height(), params.w1.width());
    for r in 0..rows {
        let mut shift = 0.0;
        for c in 0..cols {
            let w = params.w1.get(r, c, 0) / sd[c];
            params.w1.set(r, c, 0, w);
            shift += w * mu[c];
        }
        let b = params.b1.get(r, 0, 0) - shift;
        params.b1.set(r, 0, 0, b);
    }
}

fn shuffle<T>(v: &mut [T], stream: &mut RngStream) {
    for i in (1..v.len()).rev() {
        let j = stream.index(i + 1);
        v.swap(i, j);
    }
}
