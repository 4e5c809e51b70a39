//! End-to-end sprite pipeline: data, generator, predictors, bases, fusion
//! training and evaluation, plus the model directory layout shared with the
//! CLI and the service.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::attributes::{train_predictor, AttributePredictor, LabeledImages, PredictorReport};
use crate::checkpoint::ModelKind;
use crate::config::{AppConfig, SearchConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    decoupling_matrix, edit_direction_for_method, interpolate_edit, re_score, tile_direction, DecouplingMatrix,
    DirectionMode, EvalReport, InterpolationSeries, ReScoreReport,
};
use crate::fusion::{
    forward_edit_batch, identity_bucket, maps_to_tensor, pretrain_face_encoder, repeat_image, FusionModel,
};
use crate::generator::{train_generator, GeneratorModel, GeneratorTrainReport};
use crate::image::{images_to_tensor, tensor_to_images, ImageTensor, RegionMask};
use crate::latent::{ExtendedLatent, LatentCode, LatentSpace, SemanticBasis};
use crate::nn::tensor_to_vec;
use crate::prior::{
    argmax_breakdown, fit_boundary, load_basis, mean_breakdowns, sample_scored_latents_multi, sample_z, save_basis,
    score_grid, select_extremes, BasisMeta, BoundaryDiagnostics, LabeledSet, ScoreBreakdown,
};
use crate::sprite::{
    apply_discrete_attribute, attribute_image, estimate_face_spec, generate_dataset, generate_planted, region_for,
    render_base_face, Attribute, FaceProperty, FaceSpec, Label, LatentPlanting, ShapeMaps,
};
use crate::training::{train_fusion, FusionDataset, FusionSample, LossReport};

/// Where every trained artifact lives under one model root.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayout {
    pub root: PathBuf,
}

impl ModelLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn generator(&self) -> PathBuf {
        self.root.join("generator")
    }

    pub fn predictor(&self, label: &str) -> PathBuf {
        self.root.join("predictors").join(label)
    }

    pub fn detector(&self, attribute: &str) -> PathBuf {
        self.root.join("detectors").join(attribute)
    }

    pub fn basis(&self, attribute: &str) -> PathBuf {
        self.root.join("bases").join(format!("{attribute}.sdgt"))
    }

    pub fn fusion(&self, attribute: &str) -> PathBuf {
        self.root.join("fusion").join(attribute)
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
}

/// Subdirectories holding a checkpoint manifest.
fn subdirs(dir: &Path) -> Vec<String> {
    let Ok(entries) = fs::read_dir(dir) else { return Vec::new() };
    let mut out: Vec<String> = entries
        .flatten()
        .filter(|e| e.path().join("manifest.json").is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    out.sort();
    out
}

/// Every model found under a [`ModelLayout`]. Only the generator is required.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub generator: GeneratorModel,
    pub predictors: BTreeMap<String, AttributePredictor>,
    pub detectors: BTreeMap<String, AttributePredictor>,
    pub bases: BTreeMap<String, (SemanticBasis, BasisMeta)>,
    pub fusion: BTreeMap<String, FusionModel>,
    /// Config hash per model, keyed like `generator` or `fusion/face_mask`.
    pub hashes: BTreeMap<String, String>,
}

impl ModelSet {
    pub fn load(layout: &ModelLayout) -> Result<Self> {
        let (generator, manifest) = GeneratorModel::load(layout.generator())?;
        let mut hashes = BTreeMap::from([("generator".to_string(), manifest.config_hash())]);
        let mut predictors = BTreeMap::new();
        for name in subdirs(&layout.root.join("predictors")) {
            let (p, m) = AttributePredictor::load(layout.predictor(&name))?;
            hashes.insert(format!("predictors/{name}"), m.config_hash());
            predictors.insert(name, p);
        }
        let mut detectors = BTreeMap::new();
        for name in subdirs(&layout.root.join("detectors")) {
            let (p, m) = AttributePredictor::load(layout.detector(&name))?;
            hashes.insert(format!("detectors/{name}"), m.config_hash());
            detectors.insert(name, p);
        }
        let mut fusion = BTreeMap::new();
        for name in subdirs(&layout.root.join("fusion")) {
            let (f, m) = FusionModel::load(layout.fusion(&name))?;
            hashes.insert(format!("fusion/{name}"), m.config_hash());
            fusion.insert(name, f);
        }
        let mut bases = BTreeMap::new();
        for attr in Attribute::ALL {
            let path = layout.basis(attr.id());
            if path.exists() {
                bases.insert(attr.id().to_string(), load_basis(&path)?);
            }
        }
        Ok(Self { generator, predictors, detectors, bases, fusion, hashes })
    }

    /// Attributes with a basis, a detector and a fusion net.
    pub fn editable_attributes(&self) -> Vec<String> {
        self.bases.keys().filter(|a| self.detectors.contains_key(*a) && self.fusion.contains_key(*a)).cloned().collect()
    }
}

/// A generated face with everything derived from its estimated geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedFace {
    pub image: ImageTensor,
    pub spec: FaceSpec,
    pub maps: ShapeMaps,
    pub mask: RegionMask,
}

pub fn prepare_face(image: ImageTensor, attr: Attribute, whole_face: bool) -> Result<PreparedFace> {
    let spec = estimate_face_spec(&image)?;
    let mask = region_for(&spec, attr, image.size(), whole_face);
    if mask.is_empty() {
        return Err(Error::PlacementFailure(format!("empty `{attr}` footprint")));
    }
    let maps = render_base_face(&spec, image.size()).1;
    Ok(PreparedFace { image, spec, maps, mask })
}

/// A latent chosen for editing: its generated face lacks the attribute.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub index: usize,
    pub z: Vec<f32>,
    pub w: Vec<f32>,
    pub face: PreparedFace,
}

/// The first `n` codes of the seeded stream whose image the detector rates
/// below 0.5 and whose geometry can be estimated.
pub fn select_candidates(
    generator: &GeneratorModel,
    detector: &AttributePredictor,
    attr: Attribute,
    seed: u64,
    n: usize,
    whole_face: bool,
) -> Result<Vec<Candidate>> {
    let d = generator.config().latent_dim;
    let limit = 50 * n.max(1);
    collect_candidates(generator, detector, attr, n, whole_face, |i| (i < limit).then(|| sample_z(seed, i, d)))
}

/// Like [`select_candidates`] over an explicit list of `z` codes.
pub fn candidates_from_latents(
    generator: &GeneratorModel,
    detector: &AttributePredictor,
    attr: Attribute,
    zs: &[Vec<f32>],
    n: usize,
    whole_face: bool,
) -> Result<Vec<Candidate>> {
    collect_candidates(generator, detector, attr, n, whole_face, |i| zs.get(i).cloned())
}

fn collect_candidates(
    generator: &GeneratorModel,
    detector: &AttributePredictor,
    attr: Attribute,
    n: usize,
    whole_face: bool,
    z_at: impl Fn(usize) -> Option<Vec<f32>>,
) -> Result<Vec<Candidate>> {
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while out.len() < n {
        let zs: Vec<Vec<f32>> = (start..start + 64).map_while(&z_at).collect();
        if zs.is_empty() {
            return Err(Error::InsufficientSamples { needed: n, available: out.len() });
        }
        let ws = generator.map_many(&zs)?;
        let images = generator.generate_many(&ws)?;
        let confs = detector.batch_confidences(&images)?;
        for (k, ((z, w), (image, conf))) in zs.into_iter().zip(ws).zip(images.into_iter().zip(confs)).enumerate() {
            if out.len() == n || conf >= 0.5 {
                continue;
            }
            if let Ok(face) = prepare_face(image, attr, whole_face) {
                out.push(Candidate { index: start + k, z, w, face });
            }
        }
        start += 64;
    }
    Ok(out)
}

/// Per-image length search for every candidate.
pub fn search_candidate_lengths(
    generator: &GeneratorModel,
    detector: &AttributePredictor,
    direction: &[f32],
    candidates: &[Candidate],
    search: &SearchConfig,
) -> Result<Vec<(f64, Vec<ScoreBreakdown>)>> {
    candidates
        .iter()
        .map(|c| {
            let b = score_grid(generator, detector, &c.w, direction, &c.face.mask, &search.grid, &search.score)?;
            let best = argmax_breakdown(&b).ok_or_else(|| Error::Format("empty grid".into()))?;
            Ok((b[best].eta, b))
        })
        .collect()
}

/// Training pairs: `I_gt` composites the accessory onto `G(w)` with the
/// estimated geometry; `n_b = eta_i · direction`.
pub fn build_fusion_dataset(
    attr: Attribute,
    candidates: &[Candidate],
    direction: &[f32],
    etas: &[f64],
) -> Result<FusionDataset> {
    if candidates.len() != etas.len() {
        return Err(Error::LengthMismatch(candidates.len(), etas.len()));
    }
    let samples = candidates
        .iter()
        .zip(etas)
        .map(|(c, &eta)| {
            let gt = apply_discrete_attribute(&c.face.image, &c.face.spec, attr.id())?.0;
            Ok(FusionSample {
                w: c.w.clone(),
                n_b: direction.iter().map(|&v| eta as f32 * v).collect(),
                face: c.face.image.clone(),
                maps: c.face.maps.clone(),
                gt,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FusionDataset {
        attribute_id: attr.id().to_string(),
        attribute_image: attribute_image(attr.id(), candidates.first().map_or(32, |c| c.face.image.size()))?,
        samples,
    })
}

/// Edited images and adjusted codes `n_a` for candidates, in batches.
pub fn batch_edits(
    generator: &GeneratorModel,
    model: &FusionModel,
    direction: &[f32],
    candidates: &[Candidate],
    etas: &[f64],
    attribute_image: &ImageTensor,
) -> Result<Vec<(ImageTensor, ExtendedLatent)>> {
    if candidates.len() != etas.len() {
        return Err(Error::LengthMismatch(candidates.len(), etas.len()));
    }
    let d = generator.config().latent_dim;
    let dtype = model.dtype();
    let mut out = Vec::with_capacity(candidates.len());
    for (chunk, chunk_etas) in candidates.chunks(32).zip(etas.chunks(32)) {
        let b = chunk.len();
        let w: Vec<f32> = chunk.iter().flat_map(|c| c.w.iter().copied()).collect();
        let nb: Vec<f32> = chunk_etas.iter().flat_map(|&eta| direction.iter().map(move |&v| eta as f32 * v)).collect();
        let w = Tensor::from_vec(w, (b, d), &Device::Cpu)?;
        let nb_t = Tensor::from_vec(nb.clone(), (b, d), &Device::Cpu)?;
        let faces: Vec<&ImageTensor> = chunk.iter().map(|c| &c.face.image).collect();
        let maps: Vec<&ShapeMaps> = chunk.iter().map(|c| &c.face.maps).collect();
        let (images, n_o) = forward_edit_batch(
            generator,
            model,
            &w,
            &nb_t,
            &images_to_tensor(&faces, dtype)?,
            &repeat_image(attribute_image, b, dtype)?,
            &maps_to_tensor(&maps, dtype)?,
        )?;
        let (_, l, _) = n_o.dims3()?;
        let n_o = tensor_to_vec(&n_o.to_dtype(DType::F32)?)?;
        for (k, image) in tensor_to_images(&images)?.into_iter().enumerate() {
            let rows = &n_o[k * l * d..(k + 1) * l * d];
            let n_a: Vec<f32> =
                rows.chunks(d).flat_map(|row| row.iter().zip(&nb[k * d..(k + 1) * d]).map(|(o, b)| o + b)).collect();
            out.push((image, ExtendedLatent::from_vec(l, d, n_a)?));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditEvaluation {
    pub etas: Vec<f64>,
    /// Target detector confidence on every edited image.
    pub detector_confidences: Vec<f64>,
    /// Fraction of edits with confidence at least 0.9.
    pub success_fraction: f64,
    pub mean_confidence: f64,
    pub re_score: ReScoreReport,
    pub interpolation: Vec<InterpolationSeries>,
    /// Fraction of interpolation series with at most one decreasing pair.
    pub monotone_fraction: f64,
}

pub struct EvalInputs<'a> {
    pub generator: &'a GeneratorModel,
    pub model: &'a FusionModel,
    pub detector: &'a AttributePredictor,
    pub retained: &'a BTreeMap<String, AttributePredictor>,
    pub direction: &'a [f32],
    pub attribute: Attribute,
    pub interp_samples: usize,
    pub interp_steps: usize,
}

/// Edits every candidate and measures detection, retained drift and
/// interpolation monotonicity. Returns the adjusted codes as well.
pub fn evaluate_edits(
    inputs: &EvalInputs<'_>,
    candidates: &[Candidate],
    etas: &[f64],
) -> Result<(EditEvaluation, Vec<ExtendedLatent>)> {
    let attr_img = attribute_image(inputs.attribute.id(), inputs.generator.config().resolution)?;
    let edits = batch_edits(inputs.generator, inputs.model, inputs.direction, candidates, etas, &attr_img)?;
    let originals: Vec<ImageTensor> = candidates.iter().map(|c| c.face.image.clone()).collect();
    let (images, n_as): (Vec<ImageTensor>, Vec<ExtendedLatent>) = edits.into_iter().unzip();
    let confs = inputs.detector.batch_confidences(&images)?;
    let mut scorers = inputs.retained.clone();
    let target = inputs.attribute.id();
    scorers.insert(target.to_string(), inputs.detector.clone());
    let retained: Vec<&str> = inputs.retained.keys().map(String::as_str).filter(|k| *k != target).collect();
    let report = re_score(&scorers, &originals, &images, target, &retained)?;
    let mut interpolation = Vec::new();
    for (i, (c, n_a)) in candidates.iter().zip(&n_as).take(inputs.interp_samples).enumerate() {
        let w = LatentCode::new(c.w.clone(), LatentSpace::W)?;
        let frames = interpolate_edit(inputs.generator, &w, n_a, inputs.interp_steps)?;
        interpolation.push(InterpolationSeries::new(i, inputs.detector.batch_confidences(&frames)?));
    }
    let n = confs.len().max(1) as f64;
    let monotone =
        interpolation.iter().filter(|s| s.violations <= 1).count() as f64 / interpolation.len().max(1) as f64;
    Ok((
        EditEvaluation {
            etas: etas.to_vec(),
            success_fraction: confs.iter().filter(|&&c| c >= 0.9).count() as f64 / n,
            mean_confidence: confs.iter().sum::<f64>() / n,
            detector_confidences: confs,
            re_score: report,
            interpolation,
            monotone_fraction: monotone,
        },
        n_as,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub evaluate: bool,
    /// Also train and evaluate a fusion net with `n_b = 0`.
    pub ablation: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self { evaluate: true, ablation: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub generator: GeneratorTrainReport,
    pub predictors: BTreeMap<String, PredictorReport>,
    pub detector: PredictorReport,
    pub boundaries: BTreeMap<String, BoundaryDiagnostics>,
    /// Held-out accuracy of a linear boundary on mapped latents with the
    /// planted target labels.
    pub latent_holdout_accuracy: f64,
    pub global_eta: f64,
    pub train_etas: Vec<f64>,
    pub identity_accuracy: f64,
    pub fusion_losses: Vec<LossReport>,
    pub ablation_losses: Option<Vec<LossReport>>,
    pub full: Option<EditEvaluation>,
    pub ablation: Option<EditEvaluation>,
    pub decoupling: Option<DecouplingMatrix>,
    pub decoupling_mean_adjusted: Option<DecouplingMatrix>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

impl PipelineReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(serde_json::from_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?)
    }
}

/// Even accessory mix used for predictor and detector training.
pub fn predictor_mix() -> BTreeMap<String, f64> {
    Attribute::ALL.iter().map(|a| (a.id().to_string(), 0.25)).collect()
}

/// Held-out accuracy of a linear boundary fitted on mapped latents whose
/// labels come from the planted attribute of `z`.
pub fn latent_holdout_accuracy(
    generator: &GeneratorModel,
    attr: Attribute,
    seed: u64,
    train: usize,
    test: usize,
) -> Result<f64> {
    let d = generator.config().latent_dim;
    let planting = LatentPlanting::with_dim(d);
    let zs: Vec<Vec<f32>> = (0..train + test).map(|i| sample_z(seed, i, d)).collect();
    let ws = generator.map_many(&zs)?;
    let labels = zs
        .iter()
        .map(|z| Ok(if planting.spec_from_latent(z)?.attribute_flags.contains(&attr) { 1 } else { -1 }))
        .collect::<Result<Vec<i8>>>()?;
    let set =
        LabeledSet { points: ws[..train].to_vec(), labels: labels[..train].to_vec(), indices: (0..train).collect() };
    let (basis, _) = fit_boundary(attr.id(), &set, &Default::default())?;
    let correct = ws[train..]
        .iter()
        .zip(&labels[train..])
        .filter(|(w, &l)| {
            let s: f64 = w.iter().zip(basis.direction()).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum::<f64>()
                + f64::from(basis.boundary_bias);
            (s > 0.0) == (l > 0)
        })
        .count();
    Ok(correct as f64 / test.max(1) as f64)
}

fn predictor_label(id: &str) -> Result<Label> {
    id.parse()
}

fn stage<T>(timings: &mut BTreeMap<String, f64>, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log::info!("stage {name}");
    let t = Instant::now();
    let out = f()?;
    let secs = t.elapsed().as_secs_f64();
    log::info!("stage {name} took {secs:.1}s");
    timings.insert(name.to_string(), secs);
    Ok(out)
}

/// Runs every stage and writes all models under `layout`. Reports and
/// logs go to the model root as well.
pub fn run_pipeline(config: &AppConfig, layout: &ModelLayout, options: PipelineOptions) -> Result<PipelineReport> {
    let t = &config.training;
    let dims = &config.dims;
    let attr: Attribute = t.target_attribute.parse()?;
    fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    fs::write(layout.config(), config.to_toml()?).map_err(|e| Error::io(layout.config(), e))?;
    let mut timings = BTreeMap::new();
    let planting = LatentPlanting::with_dim(dims.latent_dim);

    let gen_data =
        stage(&mut timings, "data", || generate_planted(t.generator_samples, t.seed, dims.resolution, &planting))?;
    let (generator, generator_report) = stage(&mut timings, "generator", || {
        let cfg = crate::generator::GeneratorTrainConfig { seed: t.seed, ..t.generator.clone() };
        train_generator(&gen_data, dims.generator(), &cfg, Some(&layout.generator()))
    })?;

    let (predictors, predictor_reports, detector, detector_report) = stage(&mut timings, "predictors", || {
        let data = generate_dataset(t.predictor_samples, t.seed + 1, &predictor_mix(), dims.resolution, &planting)?;
        let mut predictors = BTreeMap::new();
        let mut reports = BTreeMap::new();
        let ids = Attribute::ALL.iter().map(|a| a.id()).chain(FaceProperty::RETAINED.iter().map(|p| p.id()));
        for (k, id) in ids.enumerate() {
            let label = predictor_label(id)?;
            let cfg = crate::attributes::PredictorTrainConfig { seed: t.seed + 10 + k as u64, ..t.predictor.clone() };
            let (p, r) = train_predictor(&LabeledImages::from_dataset(&data, label), label, &cfg)?;
            p.save(layout.predictor(id), ModelKind::Predictor, &r)?;
            predictors.insert(id.to_string(), p);
            reports.insert(id.to_string(), r);
        }
        let label = Label::Presence(attr);
        let cfg = crate::attributes::PredictorTrainConfig { seed: t.seed + 20, ..t.predictor.clone() };
        let (det, det_report) = train_predictor(&LabeledImages::from_dataset(&data, label), label, &cfg)?;
        det.save(layout.detector(attr.id()), ModelKind::Detector, &det_report)?;
        Ok((predictors, reports, det, det_report))
    })?;

    let (bases, boundaries) = stage(&mut timings, "bases", || {
        let preds: Vec<&AttributePredictor> = Attribute::ALL.iter().map(|a| &predictors[a.id()]).collect();
        let cfg = &t.basis;
        let scored = sample_scored_latents_multi(&generator, &preds, cfg.samples, t.seed + 2)?;
        let mut bases = BTreeMap::new();
        let mut diags = BTreeMap::new();
        for (a, list) in Attribute::ALL.iter().zip(scored) {
            let set = select_extremes(&list, cfg.k_pos, cfg.k_neg)?;
            let (basis, diag) = fit_boundary(a.id(), &set, &cfg.svm)?;
            bases.insert(a.id().to_string(), basis);
            diags.insert(a.id().to_string(), diag);
        }
        Ok((bases, diags))
    })?;
    let latent_accuracy =
        stage(&mut timings, "latent_accuracy", || latent_holdout_accuracy(&generator, attr, t.seed + 3, 1500, 1000))?;

    let direction = bases[attr.id()].direction().to_vec();
    let train_set = stage(&mut timings, "candidates", || {
        select_candidates(&generator, &detector, attr, t.seed + 4, t.fusion_samples, t.search.whole_face)
    })?;
    let searched = stage(&mut timings, "search", || {
        search_candidate_lengths(&generator, &detector, &direction, &train_set, &t.search)
    })?;
    let train_etas: Vec<f64> = searched.iter().map(|(eta, _)| *eta).collect();
    let global = mean_breakdowns(&searched.into_iter().map(|(_, b)| b).collect::<Vec<_>>())?;
    let global_eta = global[argmax_breakdown(&global).ok_or(Error::EmptySamples)?].eta;
    for (id, basis) in &bases {
        let b = if id == attr.id() { basis.with_length(global_eta as f32)? } else { basis.clone() };
        save_basis(layout.basis(id), &b, t.search.score.lambda, &t.search.grid)?;
    }

    let identity_images: Vec<ImageTensor> = gen_data.samples.iter().take(2000).map(|s| s.image_gt.clone()).collect();
    let identity_labels: Vec<usize> = gen_data.samples.iter().take(2000).map(|s| identity_bucket(&s.spec)).collect();
    let fusion_config = dims.fusion();
    let dataset = build_fusion_dataset(attr, &train_set, &direction, &train_etas)?;
    let train_one = |dataset: &FusionDataset,
                     out: Option<&Path>,
                     log: Option<&Path>|
     -> Result<(FusionModel, f64, Vec<LossReport>)> {
        let model = FusionModel::new(fusion_config.clone(), t.seed + 5)?;
        let cfg = crate::fusion::IdentityPretrainConfig { seed: t.seed + 6, ..t.pretrain.clone() };
        let acc = pretrain_face_encoder(&model, &identity_images, &identity_labels, &cfg)?;
        let train_cfg = crate::training::TrainingConfig { seed: t.seed + 7, ..t.fusion.clone() };
        let report = train_fusion(&generator, &model, &detector, dataset, &train_cfg, out, log)?;
        Ok((model, acc, report.losses))
    };
    let fusion_dir = layout.fusion(attr.id());
    fs::create_dir_all(&fusion_dir).map_err(|e| Error::io(&fusion_dir, e))?;
    let (model, identity_accuracy, fusion_losses) = stage(&mut timings, "fusion", || {
        train_one(&dataset, Some(&fusion_dir), Some(&layout.root.join("fusion_train.ndjson")))
    })?;

    let mut ablation_model = None;
    let mut ablation_losses = None;
    if options.ablation {
        let zeros = vec![0.0; train_set.len()];
        let plain = build_fusion_dataset(attr, &train_set, &direction, &zeros)?;
        let (m, _, losses) = stage(&mut timings, "fusion_ablation", || {
            train_one(&plain, None, Some(&layout.root.join("fusion_ablation.ndjson")))
        })?;
        ablation_model = Some(m);
        ablation_losses = Some(losses);
    }

    let mut report = PipelineReport {
        generator: generator_report,
        predictors: predictor_reports,
        detector: detector_report,
        boundaries,
        latent_holdout_accuracy: latent_accuracy,
        global_eta,
        train_etas,
        identity_accuracy,
        fusion_losses,
        ablation_losses,
        full: None,
        ablation: None,
        decoupling: None,
        decoupling_mean_adjusted: None,
        timings: BTreeMap::new(),
    };

    if options.evaluate {
        let retained: BTreeMap<String, AttributePredictor> =
            FaceProperty::RETAINED.iter().map(|p| (p.id().to_string(), predictors[p.id()].clone())).collect();
        let eval_set = stage(&mut timings, "eval_candidates", || {
            select_candidates(&generator, &detector, attr, t.seed + 8, t.eval_samples, t.search.whole_face)
        })?;
        let eval_etas: Vec<f64> = stage(&mut timings, "eval_search", || {
            Ok(search_candidate_lengths(&generator, &detector, &direction, &eval_set, &t.search)?
                .into_iter()
                .map(|(e, _)| e)
                .collect())
        })?;
        let inputs = EvalInputs {
            generator: &generator,
            model: &model,
            detector: &detector,
            retained: &retained,
            direction: &direction,
            attribute: attr,
            interp_samples: t.interp_samples,
            interp_steps: t.interp_steps,
        };
        let (full, n_as) = stage(&mut timings, "eval", || evaluate_edits(&inputs, &eval_set, &eval_etas))?;
        if let Some(m) = &ablation_model {
            let zeros = vec![0.0; eval_set.len()];
            let inputs = EvalInputs { model: m, ..inputs };
            report.ablation =
                Some(stage(&mut timings, "eval_ablation", || evaluate_edits(&inputs, &eval_set, &zeros))?.0);
        }
        let directions: Vec<(String, Vec<f32>)> =
            bases.iter().map(|(id, b)| (id.clone(), b.direction().to_vec())).collect();
        report.decoupling = Some(decoupling_matrix(&directions)?);
        let layers = dims.layers;
        let target_basis = bases[attr.id()].with_length(global_eta as f32)?;
        let adjusted: Vec<(String, Vec<f32>)> = bases
            .iter()
            .map(|(id, b)| {
                Ok((
                    id.clone(),
                    if id == attr.id() {
                        edit_direction_for_method(&n_as, &target_basis, DirectionMode::MeanAdjusted)?
                    } else {
                        tile_direction(b.direction(), layers)
                    },
                ))
            })
            .collect::<Result<_>>()?;
        report.decoupling_mean_adjusted = Some(decoupling_matrix(&adjusted)?);

        let mut eval_report = EvalReport { re_score: vec![full.re_score.clone()], ..EvalReport::default() };
        eval_report.decoupling.push(("basis_only".into(), report.decoupling.clone().expect("set above")));
        eval_report
            .decoupling
            .push(("mean_adjusted".into(), report.decoupling_mean_adjusted.clone().expect("set above")));
        eval_report.interpolation = full.interpolation.clone();
        eval_report.metrics.insert("success_fraction".into(), full.success_fraction);
        eval_report.metrics.insert("mean_confidence".into(), full.mean_confidence);
        eval_report.metrics.insert("monotone_fraction".into(), full.monotone_fraction);
        if let Some(a) = &report.ablation {
            eval_report.metrics.insert("ablation_success_fraction".into(), a.success_fraction);
            eval_report.metrics.insert("ablation_mean_confidence".into(), a.mean_confidence);
        }
        eval_report.model_hashes = ModelSet::load(layout)?.hashes;
        eval_report.save(layout.root.join("eval_report.json"))?;
        report.full = Some(full);
    }
    report.timings = timings;
    report.save(layout.root.join("pipeline_report.json"))?;
    Ok(report)
}
