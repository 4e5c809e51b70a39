//! The semantic fusion network: face, attribute and style encoders, a
//! weighted modulation module and a block-sparse regressor that maps the
//! fused feature to a W+ offset `n_o`.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, ModelKind};
use crate::error::{Error, Result};
use crate::generator::GeneratorModel;
use crate::image::{images_to_tensor, tensor_to_images, ImageTensor};
use crate::latent::{apply_edit_latent, compose_adjustment, ExtendedLatent, LatentCode, SemanticBasis};
use crate::nn::ops::{avg_pool2x, conv2d, linear, silu};
use crate::nn::{scalar, seeded_rng, tensor_to_vec, Adam, Init, ParamStore};
use crate::sprite::{FaceProperty, FaceSpec, ShapeMaps};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub resolution: usize,
    pub latent_dim: usize,
    pub layers: usize,
    pub feature_channels: usize,
    pub style_regions: usize,
    /// Hidden width of each regressor group.
    pub group_hidden: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { resolution: 32, latent_dim: 64, layers: 8, feature_channels: 64, style_regions: 1, group_hidden: 64 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 4 || !self.resolution.is_multiple_of(4) {
            return Err(Error::ResolutionMismatch { expected: 32, actual: self.resolution });
        }
        let flat = self.feature_size() * self.feature_size() * self.feature_channels;
        if self.layers == 0 || !flat.is_multiple_of(self.layers) {
            return Err(Error::ShapeMismatch(format!("{flat} fused values do not split into {} groups", self.layers)));
        }
        if self.style_regions == 0 || self.latent_dim == 0 || self.group_hidden == 0 {
            return Err(Error::ShapeMismatch("fusion widths must be positive".into()));
        }
        Ok(())
    }

    /// Side length of the face, attribute and fused feature maps.
    pub fn feature_size(&self) -> usize {
        self.resolution / 4
    }

    fn group_len(&self) -> usize {
        self.feature_size() * self.feature_size() * self.feature_channels / self.layers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRole {
    Face,
    Attribute,
    Style,
    Fused,
}

/// A batch of feature maps stored channels-last as `(b, h, w, c)`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub role: FeatureRole,
    pub tensor: Tensor,
}

impl FeatureMap {
    /// Per-sample `(channels, h, w)`.
    pub fn shape(&self) -> Result<(usize, usize, usize)> {
        let (_, h, w, c) = self.tensor.dims4()?;
        Ok((c, h, w))
    }

    pub fn is_finite(&self) -> Result<bool> {
        Ok(tensor_to_vec(&self.tensor)?.iter().all(|v| v.is_finite()))
    }
}

/// Per-pixel region labels for region-wise style pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionLabels {
    pub size: usize,
    pub regions: usize,
    pub labels: Vec<usize>,
}

impl RegionLabels {
    pub fn whole(size: usize) -> Self {
        Self { size, regions: 1, labels: vec![0; size * size] }
    }

    /// `(regions, size²)` matrix whose rows average one region each.
    fn pooling_matrix(&self, dtype: DType) -> Result<Tensor> {
        let n = self.size * self.size;
        if self.labels.len() != n || self.labels.iter().any(|&l| l >= self.regions) {
            return Err(Error::ShapeMismatch(format!("region labels do not cover a {0}x{0} map", self.size)));
        }
        let mut counts = vec![0usize; self.regions];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        if counts.contains(&0) {
            return Err(Error::ShapeMismatch("every pooling region needs at least one pixel".into()));
        }
        let mut m = vec![0f64; self.regions * n];
        for (p, &l) in self.labels.iter().enumerate() {
            m[l * n + p] = 1.0 / counts[l] as f64;
        }
        Ok(Tensor::from_vec(m, (self.regions, n), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

const FACE_WIDTHS: [usize; 3] = [32, 64, 64];
const ATTR_STEM: usize = 16;
const STYLE_HIDDEN: usize = 32;
pub const STYLE_INPUT_CHANNELS: usize = 9;

#[derive(Debug, Clone)]
pub struct FusionModel {
    config: FusionConfig,
    params: ParamStore,
}

fn init_conv<R: rand::Rng>(
    p: &mut ParamStore,
    name: &str,
    k: usize,
    cin: usize,
    cout: usize,
    gain: f64,
    rng: &mut R,
) -> Result<()> {
    p.init(&format!("{name}.weight"), &[k * k * cin, cout], Init::FanIn { fan_in: k * k * cin, gain }, rng)?;
    p.init(&format!("{name}.bias"), &[cout], Init::Zeros, rng)
}

fn init_face_trunk<R: rand::Rng>(p: &mut ParamStore, rng: &mut R) -> Result<()> {
    let mut cin = 3;
    for (i, &cout) in FACE_WIDTHS.iter().enumerate() {
        init_conv(p, &format!("face.conv{i}"), 3, cin, cout, 1.4, rng)?;
        cin = cout;
    }
    Ok(())
}

/// Face trunk shared by the fusion model and identity pre-training.
fn face_trunk(p: &ParamStore, images: &Tensor) -> Result<Tensor> {
    let conv = |x: &Tensor, i: usize| -> Result<Tensor> {
        conv2d(x, p.get(&format!("face.conv{i}.weight"))?, Some(p.get(&format!("face.conv{i}.bias"))?), 3)
    };
    let x = avg_pool2x(&silu(&conv(images, 0)?)?)?;
    let x = avg_pool2x(&silu(&conv(&x, 1)?)?)?;
    conv(&x, 2)
}

impl FusionModel {
    pub fn new(config: FusionConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: FusionConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed, 31);
        let mut p = ParamStore::new(dtype);
        let c = config.feature_channels;
        init_face_trunk(&mut p, &mut rng)?;
        if FACE_WIDTHS[2] != c {
            return Err(Error::ShapeMismatch(format!("face trunk has {} channels, config asks {c}", FACE_WIDTHS[2])));
        }

        init_conv(&mut p, "attr.stem", 3, 3, ATTR_STEM, 1.4, &mut rng)?;
        let blocks = [(ATTR_STEM, c / 2), (c / 2, c), (c, c), (c, c)];
        for (i, &(cin, cout)) in blocks.iter().enumerate() {
            init_conv(&mut p, &format!("attr.block{i}.conv_a"), 3, cin, cout, 1.4, &mut rng)?;
            init_conv(&mut p, &format!("attr.block{i}.conv_b"), 3, cout, cout, 0.5, &mut rng)?;
            if cin != cout {
                init_conv(&mut p, &format!("attr.block{i}.skip"), 1, cin, cout, 1.0, &mut rng)?;
            }
        }

        init_conv(&mut p, "style.conv0", 3, STYLE_INPUT_CHANNELS, STYLE_HIDDEN, 1.4, &mut rng)?;
        init_conv(&mut p, "style.conv1", 1, STYLE_HIDDEN, c, 1.0, &mut rng)?;

        init_conv(&mut p, "fuse.face", 3, c, 2 * c, 0.1, &mut rng)?;
        let style_in = config.style_regions * c;
        p.init("fuse.style.weight", &[style_in, 2 * c], Init::FanIn { fan_in: style_in, gain: 0.1 }, &mut rng)?;
        p.init("fuse.style.bias", &[2 * c], Init::Zeros, &mut rng)?;
        p.init("fuse.alpha1", &[1], Init::Constant(1.0), &mut rng)?;
        p.init("fuse.alpha2", &[1], Init::Constant(1.0), &mut rng)?;

        let (l, g, h, d) = (config.layers, config.group_len(), config.group_hidden, config.latent_dim);
        p.init("reg.w1", &[l, g, h], Init::FanIn { fan_in: g, gain: 1.4 }, &mut rng)?;
        p.init("reg.b1", &[l, 1, h], Init::Zeros, &mut rng)?;
        p.init("reg.w2", &[l, h, d], Init::FanIn { fan_in: h, gain: 0.1 }, &mut rng)?;
        p.init("reg.b2", &[l, 1, d], Init::Zeros, &mut rng)?;
        Ok(Self { config, params: p })
    }

    pub fn from_params(config: FusionConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::with_dtype(config.clone(), 0, params.dtype())?;
        for (name, var) in reference.params.vars() {
            let got = params.get(name).map_err(|_| Error::Format(format!("fusion checkpoint lacks `{name}`")))?;
            if got.dims() != var.as_tensor().dims() {
                return Err(Error::DimensionMismatch(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    got.dims(),
                    var.dims()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Format("fusion checkpoint has unexpected tensors".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self { config: self.config.clone(), params: self.params.to_dtype(dtype)? })
    }

    fn p(&self, name: &str) -> Result<Tensor> {
        Ok(self.params.get(name)?.clone())
    }

    pub fn alphas(&self) -> Result<(f64, f64)> {
        Ok((scalar(&self.p("fuse.alpha1")?)?, scalar(&self.p("fuse.alpha2")?)?))
    }

    pub fn set_alphas(&self, alpha1: f64, alpha2: f64) -> Result<()> {
        self.params.set("fuse.alpha1", &[alpha1])?;
        self.params.set("fuse.alpha2", &[alpha2])
    }

    fn check_images(&self, images: &Tensor, channels: usize) -> Result<()> {
        let (_, h, w, c) = images.dims4()?;
        if h != self.config.resolution || w != self.config.resolution {
            return Err(Error::ResolutionMismatch { expected: self.config.resolution, actual: h.max(w) });
        }
        if c != channels {
            return Err(Error::ShapeMismatch(format!("{c} input channels, expected {channels}")));
        }
        Ok(())
    }

    fn conv(&self, x: &Tensor, name: &str, k: usize) -> Result<Tensor> {
        conv2d(x, &self.p(&format!("{name}.weight"))?, Some(&self.p(&format!("{name}.bias"))?), k)
    }

    /// Face feature for a `(b, h, w, 3)` image batch.
    pub fn encode_face(&self, images: &Tensor) -> Result<FeatureMap> {
        self.check_images(images, 3)?;
        let tensor = face_trunk(&self.params, &images.to_dtype(self.dtype())?)?;
        Ok(FeatureMap { role: FeatureRole::Face, tensor })
    }

    /// Attribute feature from a residual trunk of four blocks.
    pub fn encode_attribute(&self, images: &Tensor) -> Result<FeatureMap> {
        self.check_images(images, 3)?;
        let x = images.to_dtype(self.dtype())?;
        let mut x = silu(&self.conv(&x, "attr.stem", 3)?)?;
        for i in 0..4 {
            if i < 2 {
                x = avg_pool2x(&x)?;
            }
            let h = silu(&self.conv(&x, &format!("attr.block{i}.conv_a"), 3)?)?;
            let h = self.conv(&h, &format!("attr.block{i}.conv_b"), 3)?;
            let skip_name = format!("attr.block{i}.skip");
            let skip =
                if self.params.contains(&format!("{skip_name}.weight")) { self.conv(&x, &skip_name, 1)? } else { x };
            x = silu(&(h + skip)?)?;
        }
        Ok(FeatureMap { role: FeatureRole::Attribute, tensor: x })
    }

    /// Style feature: convolutions over the nine stacked shape-map channels
    /// followed by region-wise average pooling to `(b, regions, 1, c)`.
    pub fn encode_style(&self, maps: &Tensor, regions: Option<&RegionLabels>) -> Result<FeatureMap> {
        self.check_images(maps, STYLE_INPUT_CHANNELS)?;
        let (b, h, w, _) = maps.dims4()?;
        let whole = RegionLabels::whole(h);
        let regions = regions.unwrap_or(&whole);
        if regions.size != h || regions.regions != self.config.style_regions {
            return Err(Error::ShapeMismatch(format!(
                "{} regions on a {}x{0} map, model pools {} regions at {h}",
                regions.regions, regions.size, self.config.style_regions
            )));
        }
        let x = maps.to_dtype(self.dtype())?;
        let x = self.conv(&x, "style.conv0", 3)?.relu()?;
        let x = self.conv(&x, "style.conv1", 1)?;
        let c = x.dim(3)?;
        let pool = regions.pooling_matrix(self.dtype())?;
        let pooled = pool.broadcast_left(b)?.contiguous()?.matmul(&x.reshape((b, h * w, c))?)?;
        Ok(FeatureMap { role: FeatureRole::Style, tensor: pooled.reshape((b, regions.regions, 1, c))? })
    }

    /// `(1 + α₁·s_f + α₂·s_s) ⊙ attr + α₁·t_f + α₂·t_s`, where `(s_f, t_f)`
    /// come from a convolution of the face feature and `(s_s, t_s)` from the
    /// style vector broadcast over the map.
    pub fn fuse(&self, face: &FeatureMap, attr: &FeatureMap, style: &FeatureMap) -> Result<FeatureMap> {
        for (map, role) in [(face, FeatureRole::Face), (attr, FeatureRole::Attribute), (style, FeatureRole::Style)] {
            if map.role != role {
                return Err(Error::RoleMismatch(format!("expected a {role:?} feature, got {:?}", map.role)));
            }
        }
        let (b, h, w, c) = attr.tensor.dims4()?;
        if face.tensor.dims() != attr.tensor.dims() {
            return Err(Error::ShapeMismatch(format!(
                "face {:?} vs attribute {:?}",
                face.tensor.dims(),
                attr.tensor.dims()
            )));
        }
        let face_mod = self.conv(&face.tensor, "fuse.face", 3)?;
        let style_vec = style.tensor.reshape((b, ()))?;
        let style_mod = linear(&style_vec, &self.p("fuse.style.weight")?, &self.p("fuse.style.bias")?)?;
        let style_mod = style_mod.reshape((b, 1, 1, 2 * c))?.broadcast_as((b, h, w, 2 * c))?;
        let (a1, a2) = (self.p("fuse.alpha1")?, self.p("fuse.alpha2")?);
        let face_mod = face_mod.broadcast_mul(&a1)?;
        let style_mod = style_mod.broadcast_mul(&a2)?;
        let scale = (face_mod.narrow(3, 0, c)? + style_mod.narrow(3, 0, c)?)?;
        let shift = (face_mod.narrow(3, c, c)? + style_mod.narrow(3, c, c)?)?;
        let fused = ((&attr.tensor + attr.tensor.mul(&scale)?)? + shift)?;
        Ok(FeatureMap { role: FeatureRole::Fused, tensor: fused })
    }

    /// Block-sparse regression to `(b, L, d)`: the flattened fused feature is
    /// cut into `L` contiguous groups and group `i` alone produces row `i`.
    pub fn regress_offset(&self, fused: &FeatureMap) -> Result<Tensor> {
        if fused.role != FeatureRole::Fused {
            return Err(Error::RoleMismatch(format!("regressor expects a Fused feature, got {:?}", fused.role)));
        }
        let s = self.config.feature_size();
        let (b, h, w, c) = fused.tensor.dims4()?;
        if (h, w, c) != (s, s, self.config.feature_channels) {
            return Err(Error::ShapeMismatch(format!(
                "fused feature {c}x{h}x{w}, expected {}x{s}x{s}",
                self.config.feature_channels
            )));
        }
        let (l, g) = (self.config.layers, self.config.group_len());
        let x = fused.tensor.reshape((b, l, g))?.transpose(0, 1)?.contiguous()?;
        let hidden = silu(&x.matmul(&self.p("reg.w1")?)?.broadcast_add(&self.p("reg.b1")?)?)?;
        let out = hidden.matmul(&self.p("reg.w2")?)?.broadcast_add(&self.p("reg.b2")?)?;
        Ok(out.transpose(0, 1)?.contiguous()?)
    }

    /// `n_o = f_m(I_f, I_m, maps)` for a batch.
    pub fn offsets(&self, faces: &Tensor, attrs: &Tensor, maps: &Tensor) -> Result<Tensor> {
        let face = self.encode_face(faces)?;
        let attr = self.encode_attribute(attrs)?;
        let style = self.encode_style(maps, None)?;
        if face.tensor.dim(0)? != attr.tensor.dim(0)? || face.tensor.dim(0)? != style.tensor.dim(0)? {
            return Err(Error::ShapeMismatch("fusion inputs have different batch sizes".into()));
        }
        self.regress_offset(&self.fuse(&face, &attr, &style)?)
    }

    pub fn save(&self, dir: impl AsRef<Path>, extra: serde_json::Value) -> Result<CheckpointManifest> {
        let snapshot = serde_json::json!({ "fusion": self.config, "training": extra });
        save_checkpoint(dir, ModelKind::Fusion, &self.params.to_dtype(DType::F32)?, snapshot)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, CheckpointManifest)> {
        let (manifest, params) = load_checkpoint(dir.as_ref(), DType::F32)?;
        if manifest.model_kind != ModelKind::Fusion {
            return Err(Error::Format(format!("{} is not a fusion checkpoint", dir.as_ref().display())));
        }
        let config: FusionConfig = serde_json::from_value(manifest.config_snapshot["fusion"].clone())?;
        Ok((Self::from_params(config, params)?, manifest))
    }
}

/// Stacks shape maps into a `(b, h, w, 9)` tensor.
pub fn maps_to_tensor(maps: &[&ShapeMaps], dtype: DType) -> Result<Tensor> {
    let size = maps.first().map_or(0, |m| m.size());
    if maps.iter().any(|m| m.size() != size) {
        return Err(Error::ResolutionMismatch {
            expected: size,
            actual: maps.iter().map(|m| m.size()).max().unwrap_or(0),
        });
    }
    let data: Vec<f32> = maps.iter().flat_map(|m| m.stacked()).collect();
    Ok(Tensor::from_vec(data, (maps.len(), size, size, STYLE_INPUT_CHANNELS), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Edited images `G_s(w + n_o + n_b)` and the offsets `n_o` for a batch.
/// `w` and `n_b` are `(b, d)`.
pub fn forward_edit_batch(
    generator: &GeneratorModel,
    model: &FusionModel,
    w: &Tensor,
    nb: &Tensor,
    faces: &Tensor,
    attrs: &Tensor,
    maps: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let n_o = model.offsets(faces, attrs, maps)?;
    let (b, l, d) = n_o.dims3()?;
    if w.dims() != [b, d] || nb.dims() != [b, d] {
        return Err(Error::ShapeMismatch(format!(
            "w {:?} and n_b {:?} for offsets {:?}",
            w.dims(),
            nb.dims(),
            n_o.dims()
        )));
    }
    let dtype = model.dtype();
    let n_a = n_o.broadcast_add(&nb.to_dtype(dtype)?.unsqueeze(1)?)?;
    let styles = n_a.broadcast_add(&w.to_dtype(dtype)?.unsqueeze(1)?)?;
    if styles.dims() != [b, l, d] {
        return Err(Error::ShapeMismatch("edited styles have the wrong shape".into()));
    }
    Ok((generator.synthesize_batch(&styles)?, n_o))
}

#[derive(Debug, Clone)]
pub struct EditOutput {
    pub image: ImageTensor,
    pub n_o: ExtendedLatent,
    pub n_a: ExtendedLatent,
}

/// One edit: `n_o = f_m(I_f, I_m)`, `n_a = n_o + n_b`,
/// `I_pred = G_s(w + n_a)`.
pub fn forward_edit(
    generator: &GeneratorModel,
    model: &FusionModel,
    basis: &SemanticBasis,
    w: &LatentCode,
    face: &ImageTensor,
    attribute_image: &ImageTensor,
    maps: &ShapeMaps,
) -> Result<EditOutput> {
    let dtype = model.dtype();
    let faces = images_to_tensor(&[face], dtype)?;
    let attrs = images_to_tensor(&[attribute_image], dtype)?;
    let maps = maps_to_tensor(&[maps], dtype)?;
    let n_o_t = model.offsets(&faces, &attrs, &maps)?.to_dtype(DType::F32)?;
    let (_, l, d) = n_o_t.dims3()?;
    let n_o = ExtendedLatent::from_vec(l, d, tensor_to_vec(&n_o_t)?)?;
    let n_a = compose_adjustment(&n_o, basis)?;
    let styles = apply_edit_latent(w, &n_a)?;
    let image = generator.synthesize(&styles)?;
    Ok(EditOutput { image, n_o, n_a })
}

/// Identity class of a sprite: a 4x3 grid over hue and eye spacing.
pub fn identity_bucket(spec: &FaceSpec) -> usize {
    let bin = |p: FaceProperty, bins: usize| {
        let (lo, hi) = p.range();
        (((spec.get(p) - lo) / (hi - lo) * bins as f64).floor().max(0.0) as usize).min(bins - 1)
    };
    bin(FaceProperty::Hue, 4) * 3 + bin(FaceProperty::EyeSpacing, 3)
}

pub const IDENTITY_CLASSES: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentityPretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for IdentityPretrainConfig {
    fn default() -> Self {
        Self { epochs: 4, batch_size: 32, lr: 3e-3, seed: 0 }
    }
}

/// Trains the face trunk plus a linear head as an identity classifier, then
/// copies the trunk into `model`. Returns the final training accuracy.
pub fn pretrain_face_encoder(
    model: &FusionModel,
    images: &[ImageTensor],
    identities: &[usize],
    config: &IdentityPretrainConfig,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if images.len() != identities.len() {
        return Err(Error::LengthMismatch(images.len(), identities.len()));
    }
    let mut rng = seeded_rng(config.seed, 32);
    let mut trunk = ParamStore::new(DType::F32);
    init_face_trunk(&mut trunk, &mut rng)?;
    let c = FACE_WIDTHS[2];
    trunk.init("head.weight", &[c, IDENTITY_CLASSES], Init::FanIn { fan_in: c, gain: 1.0 }, &mut rng)?;
    trunk.init("head.bias", &[IDENTITY_CLASSES], Init::Zeros, &mut rng)?;
    let mut adam = Adam::new(config.lr);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut accuracy = 0.0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut correct = 0usize;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<&ImageTensor> = chunk.iter().map(|&i| &images[i]).collect();
            let x = images_to_tensor(&batch, DType::F32)?;
            let feat = face_trunk(&trunk, &x)?.mean(1)?.mean(1)?;
            let logits = linear(&feat, trunk.get("head.weight")?, trunk.get("head.bias")?)?;
            let max = logits.max_keepdim(D::Minus1)?;
            let shifted = logits.broadcast_sub(&max)?;
            let log_probs = shifted.broadcast_sub(&shifted.exp()?.sum_keepdim(D::Minus1)?.log()?)?;
            let mut onehot = vec![0f32; chunk.len() * IDENTITY_CLASSES];
            for (k, &i) in chunk.iter().enumerate() {
                onehot[k * IDENTITY_CLASSES + identities[i]] = 1.0;
            }
            let onehot = Tensor::from_vec(onehot, (chunk.len(), IDENTITY_CLASSES), &Device::Cpu)?;
            let loss = (log_probs.mul(&onehot)?.sum_all()? / -(chunk.len() as f64))?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::TrainingFailed("identity pre-training diverged".into()));
            }
            adam.step(&trunk, &loss.backward()?)?;
            let preds = logits.argmax(D::Minus1)?.to_vec1::<u32>()?;
            correct += chunk.iter().zip(preds).filter(|(&i, p)| identities[i] == *p as usize).count();
        }
        accuracy = correct as f64 / images.len() as f64;
    }
    model.params.copy_prefix_from(&trunk, "face.")?;
    Ok(accuracy)
}

/// Convenience: `(b, h, w, 3)` tensor of one image repeated `b` times.
pub fn repeat_image(image: &ImageTensor, b: usize, dtype: DType) -> Result<Tensor> {
    let t = images_to_tensor(&[image], dtype)?;
    let (_, h, w, c) = t.dims4()?;
    Ok(t.broadcast_as((b, h, w, c))?.contiguous()?)
}

/// Decodes a batch of edited images.
pub fn decode_images(t: &Tensor) -> Result<Vec<ImageTensor>> {
    tensor_to_images(t)
}
