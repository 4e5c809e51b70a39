//! Fusion-network training against sprite ground truth with the generator
//! frozen: content, perceptual and classification losses, a step-decay
//! schedule and Adam.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attributes::AttributePredictor;
use crate::checkpoint::CheckpointManifest;
use crate::error::{Error, Result};
use crate::fusion::{forward_edit_batch, maps_to_tensor, FusionModel};
use crate::generator::GeneratorModel;
use crate::image::{images_to_tensor, ImageTensor};
use crate::nn::ops::{avg_pool2x, conv2d};
use crate::nn::{scalar, seeded_rng, Adam, Init, ParamStore};
use crate::sprite::ShapeMaps;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 10,
            lr: 0.01,
            lr_decay: 0.8,
            decay_every: 5,
            lambda1: 0.8,
            lambda2: 0.5,
            seed: 0,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.epochs > 0 && self.batch_size > 0 && self.decay_every > 0 && self.lr > 0.0;
        if !positive || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Format(format!("invalid training config {self:?}")));
        }
        Ok(())
    }

    /// `lr · decay^⌊epoch / decay_every⌋`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_mse: f64,
    pub l_f: f64,
    pub l_c: f64,
    pub l_all: f64,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
}

/// Mean squared error over every value of two equally shaped tensors.
pub fn loss_content(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", pred.dims(), gt.dims())));
    }
    Ok((pred - gt)?.sqr()?.mean_all()?)
}

/// `L_c = 1 − mean F_det(I_pred)`.
pub fn loss_class(detector: &AttributePredictor, pred: &Tensor) -> Result<Tensor> {
    Ok(detector.forward(pred)?.mean_all()?.affine(-1.0, 1.0)?)
}

pub fn total_loss(l_mse: f64, l_f: f64, l_c: f64, lambda1: f64, lambda2: f64) -> f64 {
    l_mse + lambda1 * l_f + lambda2 * l_c
}

/// Fixed convolutional feature extractor for the perceptual loss. Its
/// weights are plain tensors, so no gradient is tracked for them.
#[derive(Debug, Clone)]
pub struct FeatureNet {
    stages: Vec<(Tensor, Tensor)>,
    kernel: usize,
}

const FEATURE_WIDTHS: [usize; 4] = [3, 16, 32, 32];

impl FeatureNet {
    pub fn new(seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = seeded_rng(seed, 41);
        let mut p = ParamStore::new(dtype);
        let mut stages = Vec::new();
        for i in 0..3 {
            let (cin, cout) = (FEATURE_WIDTHS[i], FEATURE_WIDTHS[i + 1]);
            p.init(&format!("w{i}"), &[9 * cin, cout], Init::FanIn { fan_in: 9 * cin, gain: 1.4 }, &mut rng)?;
            p.init(&format!("b{i}"), &[cout], Init::Zeros, &mut rng)?;
            stages.push((p.get(&format!("w{i}"))?.detach(), p.get(&format!("b{i}"))?.detach()));
        }
        Ok(Self { stages, kernel: 3 })
    }

    /// Three stages of 1x1 identity convolutions on three channels.
    pub fn identity(dtype: DType) -> Result<Self> {
        let eye = Tensor::eye(3, dtype, &Device::Cpu)?;
        let zero = Tensor::zeros(3, dtype, &Device::Cpu)?;
        Ok(Self { stages: vec![(eye.clone(), zero.clone()); 3], kernel: 1 })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let stages =
            self.stages.iter().map(|(w, b)| Ok((w.to_dtype(dtype)?, b.to_dtype(dtype)?))).collect::<Result<_>>()?;
        Ok(Self { stages, kernel: self.kernel })
    }

    /// Activations after each stage. Stages after the first start with a 2x2
    /// average pool while the map is still larger than one pixel.
    pub fn features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = images.to_dtype(self.stages[0].0.dtype())?;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, (w, b)) in self.stages.iter().enumerate() {
            let (_, h, wd, _) = x.dims4()?;
            if i > 0 && h > 1 && h % 2 == 0 && wd % 2 == 0 {
                x = avg_pool2x(&x)?;
            }
            x = conv2d(&x, w, Some(b), self.kernel)?.relu()?;
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// Each pixel's activation vector scaled to unit length.
fn channel_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-10)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Squared distance between channel-normalized activations, summed over
/// channels, averaged over pixels and batch, then averaged over stages.
pub fn loss_perceptual(net: &FeatureNet, pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", pred.dims(), gt.dims())));
    }
    let fa = net.features(pred)?;
    let fb = net.features(gt)?;
    let mut total: Option<Tensor> = None;
    for (a, b) in fa.iter().zip(&fb) {
        let d = (channel_normalize(a)? - channel_normalize(b)?)?.sqr()?.sum(D::Minus1)?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + d)?,
            None => d,
        });
    }
    let total = total.ok_or_else(|| Error::Format("feature net has no stages".into()))?;
    Ok((total / fa.len() as f64)?)
}

/// One training example: `I_f = G(w)` edited toward `I_gt` with the prior
/// shift `n_b`.
#[derive(Debug, Clone)]
pub struct FusionSample {
    pub w: Vec<f32>,
    pub n_b: Vec<f32>,
    pub face: ImageTensor,
    pub maps: ShapeMaps,
    pub gt: ImageTensor,
}

#[derive(Debug, Clone)]
pub struct FusionDataset {
    pub attribute_id: String,
    pub attribute_image: ImageTensor,
    pub samples: Vec<FusionSample>,
}

/// Stacked tensors for a batch of samples.
pub struct FusionBatch {
    pub w: Tensor,
    pub n_b: Tensor,
    pub faces: Tensor,
    pub attrs: Tensor,
    pub maps: Tensor,
    pub gt: Tensor,
}

impl FusionDataset {
    pub fn batch(&self, indices: &[usize], dtype: DType) -> Result<FusionBatch> {
        let b = indices.len();
        let samples: Vec<&FusionSample> = indices.iter().map(|&i| &self.samples[i]).collect();
        let d = samples.first().map_or(0, |s| s.w.len());
        let w: Vec<f32> = samples.iter().flat_map(|s| s.w.iter().copied()).collect();
        let nb: Vec<f32> = samples.iter().flat_map(|s| s.n_b.iter().copied()).collect();
        if w.len() != b * d || nb.len() != b * d {
            return Err(Error::ShapeMismatch("samples carry latents of different lengths".into()));
        }
        let faces: Vec<&ImageTensor> = samples.iter().map(|s| &s.face).collect();
        let gts: Vec<&ImageTensor> = samples.iter().map(|s| &s.gt).collect();
        let maps: Vec<&ShapeMaps> = samples.iter().map(|s| &s.maps).collect();
        let attrs = vec![&self.attribute_image; b];
        Ok(FusionBatch {
            w: Tensor::from_vec(w, (b, d), &Device::Cpu)?.to_dtype(dtype)?,
            n_b: Tensor::from_vec(nb, (b, d), &Device::Cpu)?.to_dtype(dtype)?,
            faces: images_to_tensor(&faces, dtype)?,
            attrs: images_to_tensor(&attrs, dtype)?,
            maps: maps_to_tensor(&maps, dtype)?,
            gt: images_to_tensor(&gts, dtype)?,
        })
    }
}

/// Loss weights `(mse, perceptual, class)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub mse: f64,
    pub perceptual: f64,
    pub class: f64,
}

impl Objective {
    pub fn from_config(config: &TrainingConfig) -> Self {
        Self { mse: 1.0, perceptual: config.lambda1, class: config.lambda2 }
    }
}

/// The models a loss evaluation needs, all in one dtype.
pub struct LossContext<'a> {
    pub generator: &'a GeneratorModel,
    pub model: &'a FusionModel,
    pub detector: &'a AttributePredictor,
    pub features: &'a FeatureNet,
}

/// Loss graph for one batch: the weighted total and its three components.
pub fn batch_losses(ctx: &LossContext<'_>, batch: &FusionBatch, objective: Objective) -> Result<(Tensor, [f64; 3])> {
    let (pred, _) =
        forward_edit_batch(ctx.generator, ctx.model, &batch.w, &batch.n_b, &batch.faces, &batch.attrs, &batch.maps)?;
    let l_mse = loss_content(&pred, &batch.gt)?;
    let l_f = loss_perceptual(ctx.features, &pred, &batch.gt)?;
    let l_c = loss_class(ctx.detector, &pred)?;
    let parts = [scalar(&l_mse)?, scalar(&l_f)?, scalar(&l_c)?];
    let total = ((l_mse * objective.mse)? + (l_f * objective.perceptual)?)?;
    let total = (total + (l_c * objective.class)?)?;
    Ok((total, parts))
}

#[derive(Debug, Clone)]
pub struct FusionTrainReport {
    pub losses: Vec<LossReport>,
    pub manifest: Option<CheckpointManifest>,
}

impl FusionTrainReport {
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.losses.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let v: Vec<f64> = self.losses.iter().filter(|r| r.epoch == e).map(|r| r.l_all).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            })
            .collect()
    }
}

/// Names of trainable parameters that received no finite gradient.
pub fn dead_parameters(model: &FusionModel, grads: &candle_core::backprop::GradStore) -> Result<Vec<String>> {
    let mut dead = Vec::new();
    for (name, var) in model.params().vars() {
        let ok = match grads.get(var.as_tensor()) {
            Some(g) => {
                let v = crate::nn::tensor_to_vec64(g)?;
                v.iter().all(|x| x.is_finite()) && v.iter().any(|&x| x != 0.0)
            }
            None => false,
        };
        if !ok {
            dead.push(name.to_string());
        }
    }
    Ok(dead)
}

/// Trains `model` in place. The loss of every step is appended to `log` as
/// one JSON object per line; the checkpoint goes to `out` only after the
/// last step.
pub fn train_fusion(
    generator: &GeneratorModel,
    model: &FusionModel,
    detector: &AttributePredictor,
    dataset: &FusionDataset,
    config: &TrainingConfig,
    out: Option<&Path>,
    log: Option<&Path>,
) -> Result<FusionTrainReport> {
    config.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !generator.is_frozen() {
        return Err(Error::TrainingFailed("the generator must be frozen before fusion training".into()));
    }
    let generator_hash = generator.fingerprint()?;
    let dtype = model.dtype();
    let features = FeatureNet::new(config.seed, dtype)?;
    let ctx = LossContext { generator, model, detector, features: &features };
    let objective = Objective::from_config(config);
    let mut writer = match log {
        Some(path) => Some(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?)),
        None => None,
    };
    let mut adam = Adam::new(config.lr);
    let mut losses = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        adam.set_lr(lr);
        let mut order: Vec<usize> = (0..dataset.samples.len()).collect();
        order.shuffle(&mut seeded_rng(config.seed, 1000 + epoch as u64));
        for chunk in order.chunks(config.batch_size) {
            let batch = dataset.batch(chunk, dtype)?;
            let (total, [l_mse, l_f, l_c]) = batch_losses(&ctx, &batch, objective)?;
            let l_all = total_loss(l_mse, l_f, l_c, config.lambda1, config.lambda2);
            if !l_all.is_finite() {
                return Err(Error::DivergenceDetected { step });
            }
            let grads = total.backward()?;
            if step == 0 {
                let dead = dead_parameters(model, &grads)?;
                if !dead.is_empty() {
                    return Err(Error::TrainingFailed(format!("parameters without gradient: {}", dead.join(", "))));
                }
            }
            adam.step(model.params(), &grads)?;
            let report = LossReport { l_mse, l_f, l_c, l_all, epoch, step, lr };
            if let Some(w) = writer.as_mut() {
                let line = serde_json::to_string(&report)?;
                writeln!(w, "{line}").map_err(|e| Error::io(log.unwrap_or(Path::new("-")), e))?;
            }
            losses.push(report);
            step += 1;
        }
    }
    if let Some(w) = writer.as_mut() {
        w.flush().map_err(|e| Error::io(log.unwrap_or(Path::new("-")), e))?;
    }
    if generator.fingerprint()? != generator_hash {
        return Err(Error::TrainingFailed("generator parameters changed during training".into()));
    }
    let manifest = match out {
        Some(dir) => Some(model.save(
            dir,
            serde_json::json!({
                "config": config,
                "attribute_id": dataset.attribute_id,
                "generator_fingerprint": generator_hash,
                "samples": dataset.samples.len(),
            }),
        )?),
        None => None,
    };
    Ok(FusionTrainReport { losses, manifest })
}

/// Plain Adam descent on one batch with a chosen objective; returns the
/// objective value before every step.
pub fn optimize_objective(
    ctx: &LossContext<'_>,
    batch: &FusionBatch,
    objective: Objective,
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    let mut adam = Adam::new(lr);
    let mut values = Vec::with_capacity(steps);
    for step in 0..steps {
        let (total, _) = batch_losses(ctx, batch, objective)?;
        let v = scalar(&total)?;
        if !v.is_finite() {
            return Err(Error::DivergenceDetected { step });
        }
        values.push(v);
        adam.step(ctx.model.params(), &total.backward()?)?;
    }
    Ok(values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Compares backpropagated gradients of the weighted loss against central
/// differences for both fusion weights and `random_weights` further
/// entries. All models in `ctx` should be 64-bit.
pub fn gradient_check(
    ctx: &LossContext<'_>,
    batch: &FusionBatch,
    objective: Objective,
    random_weights: usize,
    seed: u64,
) -> Result<Vec<GradCheckEntry>> {
    let params = ctx.model.params();
    let (total, _) = batch_losses(ctx, batch, objective)?;
    let grads = total.backward()?;
    let mut picks = vec![("fuse.alpha1".to_string(), 0), ("fuse.alpha2".to_string(), 0)];
    let names: Vec<String> = params.names().filter(|n| !n.starts_with("fuse.alpha")).map(String::from).collect();
    let mut rng = seeded_rng(seed, 51);
    while picks.len() < 2 + random_weights {
        let name = &names[rng.random_range(0..names.len())];
        let len = params.get(name)?.elem_count();
        let pick = (name.clone(), rng.random_range(0..len));
        if !picks.contains(&pick) {
            picks.push(pick);
        }
    }
    let h = 1e-4;
    let mut out = Vec::new();
    for (name, index) in picks {
        let var = params.get(&name)?;
        let analytic = match grads.get(var) {
            Some(g) => crate::nn::tensor_to_vec64(g)?[index],
            None => 0.0,
        };
        let original = crate::nn::tensor_to_vec64(var)?;
        let eval_at = |delta: f64| -> Result<f64> {
            let mut v = original.clone();
            v[index] += delta;
            params.set(&name, &v)?;
            scalar(&batch_losses(ctx, batch, objective)?.0)
        };
        let numeric = (eval_at(h)? - eval_at(-h)?) / (2.0 * h);
        params.set(&name, &original)?;
        let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        out.push(GradCheckEntry { name, index, analytic, numeric, rel_err });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionConfig;
    use crate::generator::GeneratorConfig;
    use crate::sprite::{attribute_image, render_base_face, Attribute, FaceSpec, Label};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_slice(data, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn content_loss_hand_values() {
        let a = t(&[0.5; 12], &[1, 2, 2, 3]);
        let z = t(&[0.0; 12], &[1, 2, 2, 3]);
        assert_eq!(scalar(&loss_content(&a, &a).unwrap()).unwrap(), 0.0);
        assert!((scalar(&loss_content(&a, &z).unwrap()).unwrap() - 0.25).abs() < 1e-15);
        let p = t(&[0.1, 0.3], &[1, 2, 1, 1]);
        let q = t(&[0.0, 0.0], &[1, 2, 1, 1]);
        assert!((scalar(&loss_content(&p, &q).unwrap()).unwrap() - 0.05).abs() < 1e-12);
        assert!(matches!(loss_content(&p, &a), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn total_loss_hand_values() {
        assert!((total_loss(0.1, 0.2, 0.3, 1.0, 1.0) - 0.6).abs() < 1e-12);
        assert_eq!(total_loss(0.4, 0.2, 0.3, 0.0, 0.0), 0.4);
        assert!((total_loss(0.0, 0.5, 0.2, 0.8, 0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn class_loss_is_one_minus_confidence() {
        let det = AttributePredictor::with_dtype(Label::Presence(Attribute::FaceMask), 32, 0, DType::F64).unwrap();
        det.params().zero_all().unwrap();
        let img = Tensor::zeros((2, 32, 32, 3), DType::F64, &Device::Cpu).unwrap();
        assert!((scalar(&loss_class(&det, &img).unwrap()).unwrap() - 0.5).abs() < 1e-12);
        for (bias, conf) in [(40.0, 1.0), (-40.0, 0.0), ((0.7f64 / 0.3).ln(), 0.7)] {
            det.params().set("head.bias", &[bias]).unwrap();
            let l = scalar(&loss_class(&det, &img).unwrap()).unwrap();
            assert!((l - (1.0 - conf)).abs() < 1e-9, "{l}");
        }
    }

    #[test]
    fn perceptual_identity_net_hand_oracle() {
        let net = FeatureNet::identity(DType::F64).unwrap();
        // 2x2 RGB images; pixel vectors chosen so normalization is exact
        let a = t(&[3.0, 4.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 1.0, 0.0], &[1, 2, 2, 3]);
        let b = t(&[0.0, 4.0, 3.0, 1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0], &[1, 2, 2, 3]);
        // stage 1 per-pixel distances: |(.6,.8,0)-(0,.8,.6)|² = .72, 0, 2, 0 -> mean 0.68
        let stage1 = (0.72 + 0.0 + 2.0 + 0.0) / 4.0;
        // stages 2 and 3 see the pooled pixel: a -> (1, 1.25, .5), b -> (.25, 1.75, .75)
        let na = [1.0, 1.25, 0.5].map(|v: f64| v / (1.0f64 + 1.5625 + 0.25).sqrt());
        let nb = [0.25, 1.75, 0.75].map(|v: f64| v / (0.0625f64 + 3.0625 + 0.5625).sqrt());
        let pooled: f64 = na.iter().zip(&nb).map(|(x, y)| (x - y).powi(2)).sum();
        let want = (stage1 + 2.0 * pooled) / 3.0;
        let got = scalar(&loss_perceptual(&net, &a, &b).unwrap()).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert_eq!(scalar(&loss_perceptual(&net, &a, &a).unwrap()).unwrap(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn perceptual_is_symmetric(seed in 0u64..1000) {
            let net = FeatureNet::new(3, DType::F32).unwrap();
            let mut rng = seeded_rng(seed, 0);
            let mut img = || {
                let v: Vec<f32> = (0..2 * 8 * 8 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
                Tensor::from_vec(v, (2, 8, 8, 3), &Device::Cpu).unwrap()
            };
            let (a, b) = (img(), img());
            let ab = scalar(&loss_perceptual(&net, &a, &b).unwrap()).unwrap();
            let ba = scalar(&loss_perceptual(&net, &b, &a).unwrap()).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-7);
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn lr_schedule_follows_step_decay(epoch in 0usize..60) {
            let cfg = TrainingConfig::default();
            let want = 0.01 * 0.8f64.powi((epoch / 5) as i32);
            prop_assert!((cfg.lr_at(epoch) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainingConfig::default();
        for e in 0..5 {
            assert!((cfg.lr_at(e) - 0.01).abs() < 1e-15);
        }
        for e in 5..10 {
            assert!((cfg.lr_at(e) - 0.008).abs() < 1e-15);
        }
        for e in 10..15 {
            assert!((cfg.lr_at(e) - 0.0064).abs() < 1e-15);
        }
    }

    struct Fixture {
        generator: GeneratorModel,
        model: FusionModel,
        detector: AttributePredictor,
        dataset: FusionDataset,
    }

    fn fixture(n: usize, dtype: DType) -> Fixture {
        let gcfg = GeneratorConfig { latent_dim: 16, layers: 8, resolution: 32, channels: vec![16, 16, 8, 8] };
        let mut generator = GeneratorModel::with_dtype(gcfg, 1, dtype).unwrap();
        generator.freeze().unwrap();
        let fcfg = FusionConfig { latent_dim: 16, group_hidden: 8, ..FusionConfig::default() };
        let model = FusionModel::with_dtype(fcfg, 2, dtype).unwrap();
        let detector = AttributePredictor::with_dtype(Label::Presence(Attribute::FaceMask), 32, 3, dtype).unwrap();
        let mut rng = seeded_rng(4, 0);
        let samples = (0..n)
            .map(|i| {
                let w: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n_b: Vec<f32> = (0..16).map(|k| if k == i % 16 { 0.5 } else { 0.0 }).collect();
                let face = generator.generate_many(std::slice::from_ref(&w)).unwrap().remove(0);
                let spec = FaceSpec { face_hue: rng.random_range(0.0..1.0), ..FaceSpec::default() };
                let (gt, maps) = render_base_face(&spec, 32);
                FusionSample { w, n_b, face, maps, gt }
            })
            .collect();
        let dataset = FusionDataset {
            attribute_id: "face_mask".into(),
            attribute_image: attribute_image("face_mask", 32).unwrap(),
            samples,
        };
        Fixture { generator, model, detector, dataset }
    }

    #[test]
    fn short_run_records_consistent_losses_and_keeps_generator() {
        let f = fixture(6, DType::F32);
        let before = f.generator.fingerprint().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("loss.ndjson");
        let cfg = TrainingConfig { epochs: 2, batch_size: 3, lr: 1e-3, ..TrainingConfig::default() };
        let report = train_fusion(
            &f.generator,
            &f.model,
            &f.detector,
            &f.dataset,
            &cfg,
            Some(&dir.path().join("ckpt")),
            Some(&log),
        )
        .unwrap();
        assert_eq!(report.losses.len(), 4);
        for r in &report.losses {
            assert!((r.l_all - (r.l_mse + 0.8 * r.l_f + 0.5 * r.l_c)).abs() < 1e-9);
        }
        let lines: Vec<LossReport> =
            std::fs::read_to_string(&log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines, report.losses);
        assert_eq!(f.generator.fingerprint().unwrap(), before);
        assert!(dir.path().join("ckpt/manifest.json").exists());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainingConfig { epochs: 2, batch_size: 2, lr: 1e-3, ..TrainingConfig::default() };
        let run = || {
            let f = fixture(4, DType::F32);
            train_fusion(&f.generator, &f.model, &f.detector, &f.dataset, &cfg, None, None).unwrap().losses
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(&b) {
            assert!((x.l_all - y.l_all).abs() <= 1e-6);
        }
    }

    #[test]
    fn nan_input_aborts_without_checkpoint() {
        let mut f = fixture(4, DType::F32);
        let mut px = f.dataset.samples[2].gt.pixels().to_vec();
        px[5] = f32::NAN;
        f.dataset.samples[2].gt = ImageTensor::new(32, px).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainingConfig { epochs: 1, batch_size: 1, ..TrainingConfig::default() };
        let err =
            train_fusion(&f.generator, &f.model, &f.detector, &f.dataset, &cfg, Some(&dir.path().join("c")), None)
                .unwrap_err();
        let mut order: Vec<usize> = (0..4).collect();
        order.shuffle(&mut seeded_rng(cfg.seed, 1000));
        let expected = order.iter().position(|&i| i == 2).unwrap();
        assert!(matches!(err, Error::DivergenceDetected { step } if step == expected));
        assert!(!dir.path().join("c").exists());
    }

    #[test]
    fn empty_dataset_and_unfrozen_generator_are_rejected() {
        let mut f = fixture(1, DType::F32);
        let cfg = TrainingConfig::default();
        let empty = FusionDataset { samples: vec![], ..f.dataset.clone() };
        assert!(matches!(
            train_fusion(&f.generator, &f.model, &f.detector, &empty, &cfg, None, None),
            Err(Error::EmptyDataset)
        ));
        f.generator = GeneratorModel::new(f.generator.config().clone(), 1).unwrap();
        assert!(matches!(
            train_fusion(&f.generator, &f.model, &f.detector, &f.dataset, &cfg, None, None),
            Err(Error::TrainingFailed(_))
        ));
    }

    #[test]
    fn every_fusion_parameter_gets_a_gradient() {
        let f = fixture(3, DType::F32);
        let features = FeatureNet::new(0, DType::F32).unwrap();
        let ctx = LossContext { generator: &f.generator, model: &f.model, detector: &f.detector, features: &features };
        let batch = f.dataset.batch(&[0, 1, 2], DType::F32).unwrap();
        let (total, _) = batch_losses(&ctx, &batch, Objective::from_config(&TrainingConfig::default())).unwrap();
        assert_eq!(dead_parameters(&f.model, &total.backward().unwrap()).unwrap(), Vec::<String>::new());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let f = fixture(2, DType::F64);
        let features = FeatureNet::new(0, DType::F64).unwrap();
        let ctx = LossContext { generator: &f.generator, model: &f.model, detector: &f.detector, features: &features };
        let batch = f.dataset.batch(&[0, 1], DType::F64).unwrap();
        let checks = gradient_check(&ctx, &batch, Objective::from_config(&TrainingConfig::default()), 10, 7).unwrap();
        assert_eq!(checks.len(), 12);
        for c in &checks {
            assert!(c.rel_err <= 1e-3, "{c:?}");
        }
    }

    #[test]
    fn each_loss_alone_decreases() {
        let f = fixture(1, DType::F32);
        let features = FeatureNet::new(0, DType::F32).unwrap();
        let batch = f.dataset.batch(&[0], DType::F32).unwrap();
        for objective in [
            Objective { mse: 1.0, perceptual: 0.0, class: 0.0 },
            Objective { mse: 0.0, perceptual: 1.0, class: 0.0 },
            Objective { mse: 0.0, perceptual: 0.0, class: 1.0 },
        ] {
            let model = f.model.to_dtype(DType::F32).unwrap();
            let ctx =
                LossContext { generator: &f.generator, model: &model, detector: &f.detector, features: &features };
            let v = optimize_objective(&ctx, &batch, objective, 50, 1e-3).unwrap();
            assert!(v[49] < v[0], "{objective:?}: {} -> {}", v[0], v[49]);
        }
    }
}
