//! Toy style-based generator: a mapping network `Z -> W` and a synthesis
//! network driven by `L` style rows through modulated convolutions.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, ModelKind};
use crate::error::{Error, Result};
use crate::image::{images_to_tensor, tensor_to_images, ImageTensor};
use crate::latent::{ExtendedLatent, LatentCode, LatentSpace};
use crate::nn::ops::{avg_pool2x, conv2d, linear, sigmoid, silu, upsample2x};
use crate::nn::{scalar, seeded_rng, tensor_to_vec, Adam, Init, ParamStore};
use crate::sprite::SpriteDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub layers: usize,
    pub resolution: usize,
    /// Feature channels at 4x4, 8x8, ... up to `resolution`.
    pub channels: Vec<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { latent_dim: 64, layers: 8, resolution: 32, channels: vec![64, 64, 32, 16] }
    }
}

impl GeneratorConfig {
    fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.levels();
        if levels == 0 || 4usize << (levels - 1) != self.resolution {
            return Err(Error::DimensionMismatch(format!(
                "{} channel levels cannot reach resolution {}",
                levels, self.resolution
            )));
        }
        if self.layers < levels || self.latent_dim == 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} style rows for {} resolution levels",
                self.layers, levels
            )));
        }
        Ok(())
    }

    /// Resolution level of synthesis layer `i`.
    fn level_of(&self, i: usize) -> usize {
        (i * self.levels() / self.layers).min(self.levels() - 1)
    }

    fn layer_channels(&self, i: usize) -> (usize, usize) {
        let level = self.level_of(i);
        let cin = if i == 0 { self.channels[0] } else { self.channels[self.level_of(i - 1)] };
        (cin, self.channels[level])
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorModel {
    config: GeneratorConfig,
    params: ParamStore,
    frozen: bool,
    detached: BTreeMap<String, Tensor>,
}

impl GeneratorModel {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: GeneratorConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let d = config.latent_dim;
        let mut rng = seeded_rng(seed, 0);
        let mut p = ParamStore::new(dtype);
        for i in 0..3 {
            p.init(&format!("map.{i}.weight"), &[d, d], Init::FanIn { fan_in: d, gain: 1.0 }, &mut rng)?;
            p.init(&format!("map.{i}.bias"), &[d], Init::Zeros, &mut rng)?;
        }
        let c0 = config.channels[0];
        p.init("syn.const", &[1, 4, 4, c0], Init::Normal(1.0), &mut rng)?;
        for i in 0..config.layers {
            let (cin, cout) = config.layer_channels(i);
            p.init(&format!("syn.{i}.affine.weight"), &[d, cin], Init::FanIn { fan_in: d, gain: 1.0 }, &mut rng)?;
            p.init(&format!("syn.{i}.affine.bias"), &[cin], Init::Constant(1.0), &mut rng)?;
            p.init(&format!("syn.{i}.weight"), &[9 * cin, cout], Init::FanIn { fan_in: 9 * cin, gain: 1.0 }, &mut rng)?;
            p.init(&format!("syn.{i}.bias"), &[cout], Init::Zeros, &mut rng)?;
        }
        let clast = *config.channels.last().expect("validated");
        p.init("rgb.affine.weight", &[d, clast], Init::FanIn { fan_in: d, gain: 1.0 }, &mut rng)?;
        p.init("rgb.affine.bias", &[clast], Init::Constant(1.0), &mut rng)?;
        p.init("rgb.weight", &[clast, 3], Init::FanIn { fan_in: clast, gain: 1.0 }, &mut rng)?;
        p.init("rgb.bias", &[3], Init::Zeros, &mut rng)?;
        Ok(Self { config, params: p, frozen: false, detached: BTreeMap::new() })
    }

    /// Wraps loaded parameters after checking every expected tensor and shape.
    pub fn from_params(config: GeneratorConfig, params: ParamStore, frozen: bool) -> Result<Self> {
        let reference = Self::with_dtype(config.clone(), 0, params.dtype())?;
        for name in reference.params.names() {
            let want = reference.params.get(name)?.dims().to_vec();
            let got = params
                .get(name)
                .map_err(|_| Error::Format(format!("generator checkpoint lacks `{name}`")))?
                .dims()
                .to_vec();
            if want != got {
                return Err(Error::DimensionMismatch(format!("`{name}` has shape {got:?}, expected {want:?}")));
            }
        }
        let mut model = Self { config, params, frozen: false, detached: BTreeMap::new() };
        if frozen {
            model.freeze()?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Freezes the model: later forward passes use detached copies, so no
    /// gradient ever reaches generator parameters.
    pub fn freeze(&mut self) -> Result<()> {
        self.detached = self.params.vars().map(|(n, v)| (n.to_string(), v.as_tensor().detach())).collect();
        self.frozen = true;
        Ok(())
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut m = Self {
            config: self.config.clone(),
            params: self.params.to_dtype(dtype)?,
            frozen: false,
            detached: BTreeMap::new(),
        };
        if self.frozen {
            m.freeze()?;
        }
        Ok(m)
    }

    pub fn fingerprint(&self) -> Result<String> {
        self.params.fingerprint()
    }

    fn p(&self, name: &str) -> Result<Tensor> {
        if self.frozen {
            return self.detached.get(name).cloned().ok_or_else(|| Error::Format(format!("no parameter `{name}`")));
        }
        Ok(self.params.get(name)?.clone())
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.config.latent_dim {
            return Err(Error::DimensionMismatch(format!(
                "latent of length {len}, generator expects {}",
                self.config.latent_dim
            )));
        }
        Ok(())
    }

    /// Maps a `(b, d)` batch of Z codes to W.
    pub fn map_batch(&self, z: &Tensor) -> Result<Tensor> {
        self.check_dim(z.dim(1)?)?;
        let mut h = z.to_dtype(self.dtype())?;
        for i in 0..3 {
            h = linear(&h, &self.p(&format!("map.{i}.weight"))?, &self.p(&format!("map.{i}.bias"))?)?;
            if i < 2 {
                h = silu(&h)?;
            }
        }
        Ok(h)
    }

    pub fn map_latent(&self, z: &LatentCode) -> Result<LatentCode> {
        if z.space() != LatentSpace::Z {
            return Err(Error::DimensionMismatch("map_latent expects a Z code".into()));
        }
        self.check_dim(z.dim())?;
        let t = Tensor::from_slice(z.values(), (1, z.dim()), &Device::Cpu)?;
        LatentCode::new(tensor_to_vec(&self.map_batch(&t)?)?, LatentSpace::W)
    }

    /// Synthesizes a `(b, h, w, 3)` batch from `(b, L, d)` styles.
    pub fn synthesize_batch(&self, styles: &Tensor) -> Result<Tensor> {
        let (b, l, d) = styles.dims3()?;
        if l != self.config.layers {
            return Err(Error::DimensionMismatch(format!("{l} style rows, generator expects {}", self.config.layers)));
        }
        self.check_dim(d)?;
        let styles = styles.to_dtype(self.dtype())?;
        let c0 = self.config.channels[0];
        let mut x = self.p("syn.const")?.broadcast_as((b, 4, 4, c0))?.contiguous()?;
        let mut level = 0;
        for i in 0..l {
            if self.config.level_of(i) != level {
                level = self.config.level_of(i);
                x = upsample2x(&x)?;
            }
            let row = styles.narrow(1, i, 1)?.squeeze(1)?;
            let s =
                linear(&row, &self.p(&format!("syn.{i}.affine.weight"))?, &self.p(&format!("syn.{i}.affine.bias"))?)?;
            x = modulated_conv(&x, &s, &self.p(&format!("syn.{i}.weight"))?, &self.p(&format!("syn.{i}.bias"))?)?;
            x = silu(&x)?;
        }
        let last = styles.narrow(1, l - 1, 1)?.squeeze(1)?;
        let s = linear(&last, &self.p("rgb.affine.weight")?, &self.p("rgb.affine.bias")?)?;
        let c = x.dim(3)?;
        let x = x.broadcast_mul(&s.reshape((b, 1, 1, c))?)?;
        let rgb = conv2d(&x, &self.p("rgb.weight")?, Some(&self.p("rgb.bias")?), 1)?;
        sigmoid(&rgb)
    }

    pub fn synthesize(&self, styles: &ExtendedLatent) -> Result<ImageTensor> {
        let t = Tensor::from_slice(styles.as_slice(), (1, styles.layers(), styles.dim()), &Device::Cpu)?;
        Ok(tensor_to_images(&self.synthesize_batch(&t)?)?.remove(0))
    }

    /// `G_s(broadcast(w))` for a `(b, d)` batch of W codes.
    pub fn generate_batch(&self, w: &Tensor) -> Result<Tensor> {
        let (b, d) = w.dims2()?;
        let styles = w.unsqueeze(1)?.broadcast_as((b, self.config.layers, d))?.contiguous()?;
        self.synthesize_batch(&styles)
    }

    pub fn generate(&self, w: &LatentCode) -> Result<ImageTensor> {
        let t = Tensor::from_slice(w.values(), (1, w.dim()), &Device::Cpu)?;
        Ok(tensor_to_images(&self.generate_batch(&t)?)?.remove(0))
    }

    /// Images for a list of W codes, computed in chunks.
    pub fn generate_many(&self, ws: &[Vec<f32>]) -> Result<Vec<ImageTensor>> {
        let mut out = Vec::with_capacity(ws.len());
        for chunk in ws.chunks(64) {
            let flat: Vec<f32> = chunk.iter().flatten().copied().collect();
            let t = Tensor::from_vec(flat, (chunk.len(), self.config.latent_dim), &Device::Cpu)?;
            out.extend(tensor_to_images(&self.generate_batch(&t)?)?);
        }
        Ok(out)
    }

    /// W codes for a list of Z codes.
    pub fn map_many(&self, zs: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        let d = self.config.latent_dim;
        let mut out = Vec::with_capacity(zs.len());
        for chunk in zs.chunks(256) {
            let flat: Vec<f32> = chunk.iter().flatten().copied().collect();
            let t = Tensor::from_vec(flat, (chunk.len(), d), &Device::Cpu)?;
            out.extend(tensor_to_vec(&self.map_batch(&t)?)?.chunks(d).map(<[f32]>::to_vec));
        }
        Ok(out)
    }

    pub fn save(&self, dir: impl AsRef<Path>, extra: serde_json::Value) -> Result<CheckpointManifest> {
        let snapshot = serde_json::json!({ "generator": self.config, "training": extra });
        save_checkpoint(dir, ModelKind::Generator, &self.params, snapshot)
    }

    /// Loads a frozen generator from a checkpoint written by [`Self::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, CheckpointManifest)> {
        let (manifest, params) = load_checkpoint(dir.as_ref(), DType::F32)?;
        if manifest.model_kind != ModelKind::Generator {
            return Err(Error::Format(format!("{} is not a generator checkpoint", dir.as_ref().display())));
        }
        let config: GeneratorConfig = serde_json::from_value(manifest.config_snapshot["generator"].clone())
            .map_err(|e| Error::Format(format!("generator config in manifest: {e}")))?;
        Ok((Self::from_params(config, params, true)?, manifest))
    }
}

/// Style-modulated 3x3 convolution with demodulation. Scaling the input by
/// the style and the output by the demodulation factor is equivalent to
/// modulating the weights per sample.
fn modulated_conv(x: &Tensor, style: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, _, _, cin) = x.dims4()?;
    let cout = weight.dim(1)?;
    let xs = x.broadcast_mul(&style.reshape((b, 1, 1, cin))?)?;
    let y = conv2d(&xs, weight, None, 3)?;
    let wsq = weight.sqr()?.reshape((9, cin, cout))?.sum(0)?;
    let demod = (style.sqr()?.matmul(&wsq)? + 1e-8)?.sqrt()?.recip()?;
    Ok(y.broadcast_mul(&demod.reshape((b, 1, 1, cout))?)?.broadcast_add(bias)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Weight of the non-saturating adversarial term; 0 disables the
    /// discriminator.
    pub adversarial_weight: f64,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        Self { steps: 3000, batch_size: 32, lr: 2e-3, seed: 0, adversarial_weight: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTrainReport {
    pub losses: Vec<f64>,
    pub final_mse: f64,
}

/// Small convolutional critic for the adversarial term.
struct Discriminator {
    params: ParamStore,
}

impl Discriminator {
    fn new(resolution: usize, seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = seeded_rng(seed, 7);
        let mut p = ParamStore::new(dtype);
        let widths = [3, 16, 32, 32];
        for i in 0..3 {
            let (cin, cout) = (widths[i], widths[i + 1]);
            p.init(&format!("d.{i}.weight"), &[9 * cin, cout], Init::FanIn { fan_in: 9 * cin, gain: 1.0 }, &mut rng)?;
            p.init(&format!("d.{i}.bias"), &[cout], Init::Zeros, &mut rng)?;
        }
        let flat = (resolution / 8) * (resolution / 8) * 32;
        p.init("d.out.weight", &[flat, 1], Init::FanIn { fan_in: flat, gain: 1.0 }, &mut rng)?;
        p.init("d.out.bias", &[1], Init::Zeros, &mut rng)?;
        Ok(Self { params: p })
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for i in 0..3 {
            h = conv2d(
                &h,
                self.params.get(&format!("d.{i}.weight"))?,
                Some(self.params.get(&format!("d.{i}.bias"))?),
                3,
            )?;
            h = avg_pool2x(&silu(&h)?)?;
        }
        let b = h.dim(0)?;
        let h = h.reshape((b, ()))?;
        Ok(linear(&h, self.params.get("d.out.weight")?, self.params.get("d.out.bias")?)?.squeeze(1)?)
    }
}

/// `log(1 + exp(x))`, stable for large `|x|`.
fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

/// Trains the generator on paired `(z, image)` samples: the mapped latent of
/// each sample's code must reproduce its image. Nothing is written unless
/// training finishes with finite losses.
pub fn train_generator(
    dataset: &SpriteDataset,
    gen_config: GeneratorConfig,
    config: &GeneratorTrainConfig,
    out_dir: Option<&Path>,
) -> Result<(GeneratorModel, GeneratorTrainReport)> {
    if dataset.samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dataset.resolution != gen_config.resolution {
        return Err(Error::ResolutionMismatch { expected: gen_config.resolution, actual: dataset.resolution });
    }
    let mut model = GeneratorModel::new(gen_config, config.seed)?;
    let d = model.config.latent_dim;
    for s in &dataset.samples {
        model.check_dim(s.latent.len())?;
    }
    let disc = if config.adversarial_weight > 0.0 {
        Some(Discriminator::new(dataset.resolution, config.seed, DType::F32)?)
    } else {
        None
    };
    let mut opt = Adam::new(config.lr).with_betas(0.5, 0.99);
    let mut dopt = Adam::new(config.lr).with_betas(0.5, 0.99);
    let mut rng = seeded_rng(config.seed, 1);
    let mut order: Vec<usize> = (0..dataset.samples.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(config.steps);
    let batch = config.batch_size.min(dataset.samples.len()).max(1);
    for step in 0..config.steps {
        // cosine decay to 10% of the base rate
        let t = step as f64 / config.steps.max(1) as f64;
        let lr = config.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * t).cos()));
        opt.set_lr(lr);
        dopt.set_lr(lr);
        if cursor + batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let z: Vec<f32> = idx.iter().flat_map(|&i| dataset.samples[i].latent.iter().copied()).collect();
        let z = Tensor::from_vec(z, (batch, d), &Device::Cpu)?;
        let imgs: Vec<&ImageTensor> = idx.iter().map(|&i| &dataset.samples[i].image_gt).collect();
        let target = images_to_tensor(&imgs, DType::F32)?;
        let fake = model.generate_batch(&model.map_batch(&z)?)?;
        let mse = (&fake - &target)?.sqr()?.mean_all()?;
        let mut loss = mse.clone();
        if let Some(disc) = &disc {
            let adv = softplus(&disc.logits(&fake)?.neg()?)?.mean_all()?;
            loss = (loss + (adv * config.adversarial_weight)?)?;
        }
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::DivergenceDetected { step });
        }
        losses.push(scalar(&mse)?);
        opt.step(&model.params, &loss.backward()?)?;
        if let Some(disc) = &disc {
            let fake = fake.detach();
            let dl =
                (softplus(&disc.logits(&fake)?)?.mean_all()? + softplus(&disc.logits(&target)?.neg()?)?.mean_all()?)?;
            if !scalar(&dl)?.is_finite() {
                return Err(Error::DivergenceDetected { step });
            }
            dopt.step(&disc.params, &dl.backward()?)?;
        }
        if step % 200 == 0 {
            log::info!("generator step {step}: mse {:.5}", losses[step]);
        }
    }
    let final_mse = {
        let tail = &losses[losses.len().saturating_sub(50)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    };
    model.freeze()?;
    if let Some(dir) = out_dir {
        model.save(dir, serde_json::to_value(config)?)?;
    }
    Ok((model, GeneratorTrainReport { losses, final_mse }))
}

/// Loads a generator checkpoint (our own or an exported one) as a frozen model.
/// The manifest's recorded dimensions must match `config`.
pub fn load_external_checkpoint(manifest_path: impl AsRef<Path>, config: &GeneratorConfig) -> Result<GeneratorModel> {
    let (manifest, params) = load_checkpoint(manifest_path, DType::F32)?;
    if let Some(recorded) = manifest.config_snapshot.get("generator") {
        let recorded: GeneratorConfig = serde_json::from_value(recorded.clone())
            .map_err(|e| Error::Format(format!("generator config in manifest: {e}")))?;
        if recorded.latent_dim != config.latent_dim
            || recorded.layers != config.layers
            || recorded.resolution != config.resolution
        {
            return Err(Error::DimensionMismatch(format!(
                "checkpoint has d={}, L={}, resolution={}; config has d={}, L={}, resolution={}",
                recorded.latent_dim,
                recorded.layers,
                recorded.resolution,
                config.latent_dim,
                config.layers,
                config.resolution
            )));
        }
        return GeneratorModel::from_params(recorded, params, true);
    }
    GeneratorModel::from_params(config.clone(), params, true)
}
