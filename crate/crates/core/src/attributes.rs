//! Attribute predictors and accessory detectors: small convolutional
//! networks mapping an image to a confidence in `[0, 1]`.

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, ModelKind};
use crate::error::{Error, Result};
use crate::image::{images_to_tensor, ImageTensor};
use crate::nn::ops::{avg_pool2x, conv2d, linear, sigmoid, silu};
use crate::nn::{scalar, seeded_rng, tensor_to_vec, Adam, Init, ParamStore};
use crate::sprite::{Label, SpriteDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    BinaryPresence,
    ContinuousRegressor,
}

impl PredictorKind {
    pub fn for_label(label: Label) -> Self {
        match label {
            Label::Presence(_) => PredictorKind::BinaryPresence,
            Label::Property(_) => PredictorKind::ContinuousRegressor,
        }
    }
}

const WIDTHS: [usize; 4] = [3, 16, 32, 32];

/// Confidence model for one label. Regressors predict the label rescaled to
/// `[0, 1]`; `predict_value` maps back to the labeled range.
#[derive(Debug, Clone)]
pub struct AttributePredictor {
    pub label: Label,
    pub kind: PredictorKind,
    pub resolution: usize,
    params: ParamStore,
}

impl AttributePredictor {
    pub fn new(label: Label, resolution: usize, seed: u64) -> Result<Self> {
        Self::with_dtype(label, resolution, seed, DType::F32)
    }

    pub fn with_dtype(label: Label, resolution: usize, seed: u64, dtype: DType) -> Result<Self> {
        if !resolution.is_multiple_of(8) || resolution == 0 {
            return Err(Error::ResolutionMismatch { expected: 32, actual: resolution });
        }
        let mut rng = seeded_rng(seed, 11);
        let mut p = ParamStore::new(dtype);
        for i in 0..3 {
            let (cin, cout) = (WIDTHS[i], WIDTHS[i + 1]);
            p.init(&format!("conv{i}.weight"), &[9 * cin, cout], Init::FanIn { fan_in: 9 * cin, gain: 1.4 }, &mut rng)?;
            p.init(&format!("conv{i}.bias"), &[cout], Init::Zeros, &mut rng)?;
        }
        let flat = Self::flat_dim(resolution);
        p.init("head.weight", &[flat, 1], Init::FanIn { fan_in: flat, gain: 1.0 }, &mut rng)?;
        p.init("head.bias", &[1], Init::Zeros, &mut rng)?;
        Ok(Self { label, kind: PredictorKind::for_label(label), resolution, params: p })
    }

    fn flat_dim(resolution: usize) -> usize {
        (resolution / 8) * (resolution / 8) * WIDTHS[3]
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn attribute_id(&self) -> &'static str {
        self.label.id()
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self { params: self.params.to_dtype(dtype)?, ..self.clone() })
    }

    /// Pre-sigmoid output for a `(b, h, w, 3)` batch, shape `(b,)`.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = images.dims4()?;
        if h != self.resolution || w != self.resolution {
            return Err(Error::ResolutionMismatch { expected: self.resolution, actual: h });
        }
        let mut x = images.to_dtype(self.params.dtype())?;
        for i in 0..3 {
            let wt = self.params.get(&format!("conv{i}.weight"))?;
            let bias = self.params.get(&format!("conv{i}.bias"))?;
            x = avg_pool2x(&silu(&conv2d(&x, wt, Some(bias), 3)?)?)?;
        }
        let x = x.reshape((b, ()))?;
        Ok(linear(&x, self.params.get("head.weight")?, self.params.get("head.bias")?)?.squeeze(1)?)
    }

    /// Differentiable confidences, shape `(b,)`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        sigmoid(&self.logits(images)?)
    }

    pub fn predict_confidence(&self, image: &ImageTensor) -> Result<f64> {
        Ok(self.batch_confidences(std::slice::from_ref(image))?[0])
    }

    pub fn batch_confidences(&self, images: &[ImageTensor]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(128) {
            if let Some(bad) = chunk.iter().find(|i| i.size() != self.resolution) {
                return Err(Error::ResolutionMismatch { expected: self.resolution, actual: bad.size() });
            }
            let refs: Vec<&ImageTensor> = chunk.iter().collect();
            let t = images_to_tensor(&refs, self.params.dtype())?;
            out.extend(tensor_to_vec(&self.forward(&t)?)?.into_iter().map(|v| f64::from(v).clamp(0.0, 1.0)));
        }
        Ok(out)
    }

    /// Regressor output in the property's own units; presence models return
    /// the confidence unchanged.
    pub fn predict_value(&self, image: &ImageTensor) -> Result<f64> {
        let c = self.predict_confidence(image)?;
        Ok(match self.label {
            Label::Property(p) => {
                let (lo, hi) = p.range();
                lo + (hi - lo) * c
            }
            Label::Presence(_) => c,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>, kind: ModelKind, report: &PredictorReport) -> Result<CheckpointManifest> {
        let snapshot = serde_json::json!({
            "label": self.label.id(),
            "kind": self.kind,
            "resolution": self.resolution,
            "report": report,
        });
        save_checkpoint(dir, kind, &self.params, snapshot)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, CheckpointManifest)> {
        let (manifest, params) = load_checkpoint(dir, DType::F32)?;
        let snap = &manifest.config_snapshot;
        let label: Label = snap
            .get("label")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Format("predictor manifest lacks `label`".into()))?
            .parse()?;
        let resolution = snap.get("resolution").and_then(|v| v.as_u64()).unwrap_or(32) as usize;
        let reference = Self::new(label, resolution, 0)?;
        for name in reference.params.names() {
            let want = reference.params.get(name)?.dims();
            let got = params.get(name).map_err(|_| Error::Format(format!("predictor lacks `{name}`")))?.dims();
            if want != got {
                return Err(Error::DimensionMismatch(format!("`{name}`: {got:?} vs {want:?}")));
            }
        }
        Ok((Self { label, kind: PredictorKind::for_label(label), resolution, params }, manifest))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Probability of blurring a training image, which narrows the gap
    /// between crisp renders and generator output.
    pub blur_prob: f64,
    pub noise_std: f64,
    pub holdout_fraction: f64,
    pub min_accuracy: f64,
    pub min_r2: f64,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            lr: 3e-3,
            seed: 0,
            blur_prob: 0.5,
            noise_std: 0.02,
            holdout_fraction: 0.1,
            min_accuracy: 0.95,
            min_r2: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    pub label: String,
    pub train_size: usize,
    pub holdout_size: usize,
    /// Held-out accuracy (presence) or R² (properties).
    pub holdout_metric: f64,
    pub final_loss: f64,
}

/// Images with one label each, in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct LabeledImages {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<f64>,
}

impl LabeledImages {
    /// Accessory-composited images labeled with `label`.
    pub fn from_dataset(dataset: &SpriteDataset, label: Label) -> Self {
        Self {
            images: dataset.samples.iter().map(|s| s.image_gt.clone()).collect(),
            labels: dataset.samples.iter().map(|s| s.label(label)).collect(),
        }
    }
}

/// 3x3 binomial blur with replicated borders.
pub fn blur(image: &ImageTensor) -> ImageTensor {
    let n = image.size();
    let k = [1.0f32, 2.0, 1.0];
    let mut out = image.clone();
    for y in 0..n {
        for x in 0..n {
            let mut acc = [0.0f32; 3];
            for (dy, ky) in k.iter().enumerate() {
                for (dx, kx) in k.iter().enumerate() {
                    let sy = (y + dy).saturating_sub(1).min(n - 1);
                    let sx = (x + dx).saturating_sub(1).min(n - 1);
                    let p = image.pixel(sy, sx);
                    for c in 0..3 {
                        acc[c] += ky * kx * p[c] / 16.0;
                    }
                }
            }
            out.set_pixel(y, x, acc);
        }
    }
    out
}

fn augment<R: Rng>(image: &ImageTensor, config: &PredictorTrainConfig, rng: &mut R) -> ImageTensor {
    let mut img = if rng.random_bool(config.blur_prob.clamp(0.0, 1.0)) { blur(image) } else { image.clone() };
    if config.noise_std > 0.0 {
        let noise = rand_distr::Normal::new(0.0, config.noise_std).expect("positive std");
        let size = img.size();
        for y in 0..size {
            for x in 0..size {
                let p = img.pixel(y, x);
                img.set_pixel(y, x, p.map(|v| v + rng.sample(noise) as f32));
            }
        }
    }
    img
}

fn check_labels(data: &LabeledImages, kind: PredictorKind, id: &str) -> Result<()> {
    if data.images.len() != data.labels.len() {
        return Err(Error::LengthMismatch(data.images.len(), data.labels.len()));
    }
    if data.labels.is_empty() || data.labels.iter().any(|l| !l.is_finite()) {
        return Err(Error::MissingLabels(format!("no usable labels for `{id}`")));
    }
    match kind {
        PredictorKind::BinaryPresence => {
            let pos = data.labels.iter().filter(|&&l| l > 0.5).count();
            if pos == 0 || pos == data.labels.len() {
                return Err(Error::MissingLabels(format!("`{id}` labels contain a single class")));
            }
        }
        PredictorKind::ContinuousRegressor => {
            let lo = data.labels.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = data.labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo < 1e-6 {
                return Err(Error::MissingLabels(format!("`{id}` labels have no spread")));
            }
        }
    }
    Ok(())
}

/// Held-out accuracy (threshold 0.5) or coefficient of determination.
pub fn holdout_metric(kind: PredictorKind, predictions: &[f64], labels: &[f64]) -> f64 {
    match kind {
        PredictorKind::BinaryPresence => {
            let hits = predictions.iter().zip(labels).filter(|(p, l)| (**p > 0.5) == (**l > 0.5)).count();
            hits as f64 / labels.len().max(1) as f64
        }
        PredictorKind::ContinuousRegressor => {
            let mean = labels.iter().sum::<f64>() / labels.len().max(1) as f64;
            let ss_tot: f64 = labels.iter().map(|l| (l - mean).powi(2)).sum();
            let ss_res: f64 = predictions.iter().zip(labels).map(|(p, l)| (p - l).powi(2)).sum();
            1.0 - ss_res / ss_tot.max(1e-12)
        }
    }
}

/// Supervised training with a fixed 90/10 split. Fails with `TrainingFailed`
/// when the held-out metric misses the configured bar.
pub fn train_predictor(
    data: &LabeledImages,
    label: Label,
    config: &PredictorTrainConfig,
) -> Result<(AttributePredictor, PredictorReport)> {
    let kind = PredictorKind::for_label(label);
    check_labels(data, kind, label.id())?;
    let resolution = data.images[0].size();
    let model = AttributePredictor::new(label, resolution, config.seed)?;

    let mut rng = seeded_rng(config.seed, 12);
    let mut order: Vec<usize> = (0..data.images.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((data.images.len() as f64) * config.holdout_fraction).round().max(1.0) as usize;
    let (hold, train) = order.split_at(n_hold.min(order.len() - 1));
    let mut train = train.to_vec();

    let mut opt = Adam::new(config.lr);
    let mut final_loss = f64::NAN;
    let batch = config.batch_size.max(1);
    let steps_per_epoch = train.len().div_ceil(batch);
    for epoch in 0..config.epochs {
        train.shuffle(&mut rng);
        // halve the rate for the last third of training
        if epoch == config.epochs * 2 / 3 {
            opt.set_lr(config.lr * 0.5);
        }
        let mut epoch_loss = 0.0;
        for idx in train.chunks(batch) {
            let imgs: Vec<ImageTensor> = idx.iter().map(|&i| augment(&data.images[i], config, &mut rng)).collect();
            let refs: Vec<&ImageTensor> = imgs.iter().collect();
            let x = images_to_tensor(&refs, DType::F32)?;
            let y = Tensor::from_vec(
                idx.iter().map(|&i| data.labels[i] as f32).collect::<Vec<_>>(),
                idx.len(),
                x.device(),
            )?;
            let logits = model.logits(&x)?;
            let loss = match kind {
                // binary cross-entropy on logits: softplus(z) - y z
                PredictorKind::BinaryPresence => {
                    let sp = (logits.relu()? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
                    (sp - (&logits * &y)?)?.mean_all()?
                }
                PredictorKind::ContinuousRegressor => (sigmoid(&logits)? - &y)?.sqr()?.mean_all()?,
            };
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::TrainingFailed(format!("non-finite loss in epoch {epoch}")));
            }
            epoch_loss += value;
            opt.step(&model.params, &loss.backward()?)?;
        }
        final_loss = epoch_loss / steps_per_epoch as f64;
        log::info!("{} epoch {epoch}: loss {final_loss:.5}", label.id());
    }

    let hold_images: Vec<ImageTensor> = hold.iter().map(|&i| data.images[i].clone()).collect();
    let hold_labels: Vec<f64> = hold.iter().map(|&i| data.labels[i]).collect();
    let preds = model.batch_confidences(&hold_images)?;
    let metric = holdout_metric(kind, &preds, &hold_labels);
    let report = PredictorReport {
        label: label.id().to_string(),
        train_size: train.len(),
        holdout_size: hold.len(),
        holdout_metric: metric,
        final_loss,
    };
    let bar = match kind {
        PredictorKind::BinaryPresence => config.min_accuracy,
        PredictorKind::ContinuousRegressor => config.min_r2,
    };
    if metric < bar {
        return Err(Error::TrainingFailed(format!("`{}` held-out metric {metric:.3} below {bar}", label.id())));
    }
    Ok((model, report))
}
