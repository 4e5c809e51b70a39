//! Subcommand implementations. Each one reads its inputs from disk and
//! writes its outputs, so the steps can be chained by hand.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use sdgan_core::attributes::{train_predictor, AttributePredictor, LabeledImages, PredictorTrainConfig};
use sdgan_core::checkpoint::ModelKind;
use sdgan_core::config::{AppConfig, SearchConfig};
use sdgan_core::evaluation::{decoupling_matrix, interpolate_edit, EvalReport, InterpolationSeries};
use sdgan_core::fusion::{forward_edit, identity_bucket, pretrain_face_encoder, FusionModel, IdentityPretrainConfig};
use sdgan_core::generator::{train_generator, GeneratorModel, GeneratorTrainConfig};
use sdgan_core::image::{strip_png, ImageTensor};
use sdgan_core::latent::{LatentCode, LatentSpace};
use sdgan_core::pipeline::{
    build_fusion_dataset, candidates_from_latents, evaluate_edits, prepare_face, run_pipeline,
    search_candidate_lengths, select_candidates, EvalInputs, ModelLayout, ModelSet, PipelineOptions,
};
use sdgan_core::prior::{
    argmax_breakdown, attribute_region_mask, learn_basis, load_basis, mean_breakdowns, sample_z, save_basis,
    search_optimal_length, BasisConfig, GridSpec, ScoreBreakdown,
};
use sdgan_core::sprite::{
    attribute_image, generate_dataset, generate_planted, Attribute, FaceProperty, Label, LatentPlanting, SpriteDataset,
};
use sdgan_core::tensor_file::{load_tensor, save_tensor, TensorFile};
use sdgan_core::training::{train_fusion, TrainingConfig};
use serde::{Deserialize, Serialize};

use crate::server;
use crate::session::Session;

pub const MODEL_DIR_ENV: &str = "SDGAN_MODEL_DIR";

/// `--models`, then `SDGAN_MODEL_DIR`, then the config's model path.
pub fn model_root(flag: Option<PathBuf>, config: &AppConfig) -> PathBuf {
    flag.or_else(|| std::env::var_os(MODEL_DIR_ENV).map(PathBuf::from)).unwrap_or_else(|| config.paths.models.clone())
}

pub fn load_config(path: Option<&Path>) -> Result<AppConfig> {
    match path {
        Some(p) => Ok(AppConfig::load(p)?),
        None => Ok(AppConfig::default()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn load_w(path: &Path, dim: usize) -> Result<Vec<f32>> {
    let t = load_tensor(path)?;
    if t.data.len() != dim {
        bail!("{} holds {} values, the generator expects {dim}", path.display(), t.data.len());
    }
    Ok(t.data)
}

pub struct GenData {
    pub n: usize,
    pub seed: u64,
    pub planted: bool,
    pub mix: BTreeMap<String, f64>,
    pub resolution: usize,
    pub latent_dim: usize,
    pub out: PathBuf,
}

pub fn gen_data(a: &GenData) -> Result<()> {
    let planting = LatentPlanting::with_dim(a.latent_dim);
    let data = if a.planted {
        generate_planted(a.n, a.seed, a.resolution, &planting)?
    } else {
        generate_dataset(a.n, a.seed, &a.mix, a.resolution, &planting)?
    };
    data.save(&a.out)?;
    println!("wrote {} samples to {}", data.samples.len(), a.out.display());
    Ok(())
}

pub fn parse_mix(text: &str) -> Result<BTreeMap<String, f64>> {
    text.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|pair| {
            let (k, v) = pair.split_once('=').with_context(|| format!("mix entry `{pair}` is not attr=fraction"))?;
            Ok((k.trim().to_string(), v.trim().parse::<f64>().with_context(|| format!("fraction in `{pair}`"))?))
        })
        .collect()
}

pub fn train_generator_cmd(config: &AppConfig, data: &Path, out: &Path, steps: Option<usize>, seed: u64) -> Result<()> {
    let dataset = SpriteDataset::load(data)?;
    let cfg = GeneratorTrainConfig {
        steps: steps.unwrap_or(config.training.generator.steps),
        seed,
        ..config.training.generator.clone()
    };
    let (_, report) = train_generator(&dataset, config.dims.generator(), &cfg, Some(out))?;
    println!("final mse {:.5}", report.final_mse);
    Ok(())
}

pub fn train_predictor_cmd(
    config: &AppConfig,
    attr: &str,
    data: &Path,
    out: &Path,
    seed: u64,
    detector: bool,
) -> Result<()> {
    let label: Label = attr.parse()?;
    let dataset = SpriteDataset::load(data)?;
    let cfg = PredictorTrainConfig { seed, ..config.training.predictor.clone() };
    let (model, report) = train_predictor(&LabeledImages::from_dataset(&dataset, label), label, &cfg)?;
    model.save(out, if detector { ModelKind::Detector } else { ModelKind::Predictor }, &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub fn learn_basis_cmd(
    generator: &Path,
    predictor: &Path,
    samples: usize,
    seed: u64,
    k: usize,
    out: &Path,
    search: &SearchConfig,
) -> Result<()> {
    let (g, _) = GeneratorModel::load(generator)?;
    let (p, _) = AttributePredictor::load(predictor)?;
    let cfg = BasisConfig { samples, k_pos: k, k_neg: k, seed, ..BasisConfig::default() };
    let (basis, diag) = learn_basis(&g, &p, &cfg)?;
    save_basis(out, &basis, search.score.lambda, &search.grid)?;
    println!("{}", serde_json::to_string_pretty(&diag)?);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub attribute_id: String,
    pub eta_m: f64,
    pub grid: String,
    pub lambda: f64,
    pub breakdowns: Vec<ScoreBreakdown>,
}

pub fn search_eta_cmd(
    generator: &Path,
    w: &Path,
    basis: &Path,
    detector: &Path,
    search: &SearchConfig,
    report: &Path,
) -> Result<SearchReport> {
    let (g, _) = GeneratorModel::load(generator)?;
    let (det, _) = AttributePredictor::load(detector)?;
    let (basis, _) = load_basis(basis)?;
    let w = load_w(w, g.config().latent_dim)?;
    let mask = attribute_region_mask(&g, &w, &basis.attribute_id, search.whole_face)?;
    let (eta, _, breakdowns) = search_optimal_length(&g, &det, &w, &basis, &mask, &search.grid, &search.score)?;
    let out = SearchReport {
        attribute_id: basis.attribute_id.clone(),
        eta_m: eta,
        grid: search.grid.to_string(),
        lambda: search.score.lambda,
        breakdowns,
    };
    write_json(report, &out)?;
    println!("eta_m = {eta}");
    Ok(out)
}

pub struct TrainFusion {
    pub data: PathBuf,
    pub generator: PathBuf,
    pub detector: PathBuf,
    pub basis: PathBuf,
    pub out: PathBuf,
    pub ablation: bool,
}

/// Trains a fusion net on the stored latents of a sprite dataset. The
/// global length is written back to the basis file.
pub fn train_fusion_cmd(config: &AppConfig, a: &TrainFusion) -> Result<()> {
    let t = &config.training;
    let dataset = SpriteDataset::load(&a.data)?;
    let (g, _) = GeneratorModel::load(&a.generator)?;
    let (det, _) = AttributePredictor::load(&a.detector)?;
    let (basis, meta) = load_basis(&a.basis)?;
    let attr: Attribute = basis.attribute_id.parse()?;
    let zs: Vec<Vec<f32>> = dataset.samples.iter().map(|s| s.latent.clone()).collect();
    let candidates = candidates_from_latents(&g, &det, attr, &zs, t.fusion_samples.min(zs.len()), t.search.whole_face)?;
    let searched = search_candidate_lengths(&g, &det, basis.direction(), &candidates, &t.search)?;
    let etas: Vec<f64> =
        if a.ablation { vec![0.0; candidates.len()] } else { searched.iter().map(|(e, _)| *e).collect() };
    let mean = mean_breakdowns(&searched.into_iter().map(|(_, b)| b).collect::<Vec<_>>())?;
    let global = mean[argmax_breakdown(&mean).context("empty grid")?].eta;
    if !a.ablation {
        save_basis(&a.basis, &basis.with_length(global as f32)?, meta.lambda, &t.search.grid)?;
    }
    let fusion_data = build_fusion_dataset(attr, &candidates, basis.direction(), &etas)?;
    let model = FusionModel::new(config.dims.fusion(), t.seed + 5)?;
    let images: Vec<ImageTensor> = dataset.samples.iter().map(|s| s.image_gt.clone()).collect();
    let ids: Vec<usize> = dataset.samples.iter().map(|s| identity_bucket(&s.spec)).collect();
    pretrain_face_encoder(&model, &images, &ids, &IdentityPretrainConfig { seed: t.seed + 6, ..t.pretrain.clone() })?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let cfg = TrainingConfig { seed: t.seed + 7, ..t.fusion.clone() };
    let report = train_fusion(&g, &model, &det, &fusion_data, &cfg, Some(&a.out), Some(&a.out.join("train.ndjson")))?;
    let means = report.epoch_means();
    println!("{} samples, global eta {global}, epoch losses {:?}", candidates.len(), means);
    Ok(())
}

pub struct EditArgs {
    pub generator: PathBuf,
    pub w: PathBuf,
    pub attr: String,
    pub fusion: PathBuf,
    pub basis: PathBuf,
    pub eta: Option<f64>,
    pub out: PathBuf,
    pub dump_latents: Option<PathBuf>,
}

pub fn edit_cmd(search: &SearchConfig, a: &EditArgs) -> Result<()> {
    let attr: Attribute = a.attr.parse()?;
    let (g, _) = GeneratorModel::load(&a.generator)?;
    let (model, _) = FusionModel::load(&a.fusion)?;
    let (basis, meta) = load_basis(&a.basis)?;
    if basis.attribute_id != a.attr {
        bail!("basis is for `{}`, not `{}`", basis.attribute_id, a.attr);
    }
    let eta = a.eta.unwrap_or(meta.eta_m);
    let basis = basis.with_length(eta as f32)?;
    let w = LatentCode::new(load_w(&a.w, g.config().latent_dim)?, LatentSpace::W)?;
    let face = prepare_face(g.generate(&w)?, attr, search.whole_face)?;
    let out = forward_edit(
        &g,
        &model,
        &basis,
        &w,
        &face.image,
        &attribute_image(attr.id(), g.config().resolution)?,
        &face.maps,
    )?;
    out.image.save_png(&a.out)?;
    if let Some(dir) = &a.dump_latents {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        save_tensor(dir.join("w.sdgt"), &TensorFile::new(vec![w.dim()], w.values().to_vec())?)?;
        save_tensor(
            dir.join("n_o.sdgt"),
            &TensorFile::new(vec![out.n_o.layers(), out.n_o.dim()], out.n_o.as_slice().to_vec())?,
        )?;
        save_tensor(
            dir.join("n_a.sdgt"),
            &TensorFile::new(vec![out.n_a.layers(), out.n_a.dim()], out.n_a.as_slice().to_vec())?,
        )?;
        save_tensor(dir.join("n_b.sdgt"), &TensorFile::new(vec![w.dim()], basis.vector())?)?;
    }
    println!("eta = {eta}");
    Ok(())
}

/// Writes `w = map(sample_z(seed, index))` for use with `edit` and
/// `search-eta`.
pub fn sample_cmd(generator: &Path, seed: u64, index: usize, out: &Path, png: Option<&Path>) -> Result<()> {
    let (g, _) = GeneratorModel::load(generator)?;
    let z = sample_z(seed, index, g.config().latent_dim);
    let w = g.map_latent(&LatentCode::new(z, LatentSpace::Z)?)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_tensor(out, &TensorFile::new(vec![w.dim()], w.values().to_vec())?)?;
    if let Some(p) = png {
        g.generate(&w)?.save_png(p)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    ReScore,
    Decouple,
    Interp,
}

pub struct EvalArgs {
    pub suite: Suite,
    pub attr: Option<String>,
    pub samples: Option<usize>,
    pub steps: Option<usize>,
    pub strips: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn eval_cmd(config: &AppConfig, root: &Path, a: &EvalArgs) -> Result<EvalReport> {
    let t = &config.training;
    let models = ModelSet::load(&ModelLayout::new(root))?;
    let mut report = EvalReport { model_hashes: models.hashes.clone(), ..EvalReport::default() };
    if a.suite == Suite::Decouple {
        let directions: Vec<(String, Vec<f32>)> =
            models.bases.iter().map(|(id, (b, _))| (id.clone(), b.direction().to_vec())).collect();
        let m = decoupling_matrix(&directions)?;
        report.metrics.insert("max_abs_cos".into(), m.max_off_diagonal());
        report.decoupling.push(("basis_only".into(), m));
        report.save(&a.out)?;
        return Ok(report);
    }
    let attr_id = a.attr.clone().unwrap_or_else(|| t.target_attribute.clone());
    let attr: Attribute = attr_id.parse()?;
    let missing = |what: &str| anyhow::anyhow!("no {what} for `{attr_id}` under {}", root.display());
    let detector = models.detectors.get(&attr_id).ok_or_else(|| missing("detector"))?;
    let model = models.fusion.get(&attr_id).ok_or_else(|| missing("fusion net"))?;
    let (basis, _) = models.bases.get(&attr_id).ok_or_else(|| missing("basis"))?;
    let retained: BTreeMap<String, AttributePredictor> = FaceProperty::RETAINED
        .iter()
        .filter_map(|p| models.predictors.get(p.id()).map(|m| (p.id().to_string(), m.clone())))
        .collect();
    let n = match a.suite {
        Suite::Interp => a.samples.unwrap_or(t.interp_samples),
        _ => a.samples.unwrap_or(t.eval_samples),
    };
    let g = &models.generator;
    let candidates = select_candidates(g, detector, attr, t.seed + 8, n, t.search.whole_face)?;
    let etas: Vec<f64> = search_candidate_lengths(g, detector, basis.direction(), &candidates, &t.search)?
        .into_iter()
        .map(|(e, _)| e)
        .collect();
    let steps = a.steps.unwrap_or(t.interp_steps);
    let inputs = EvalInputs {
        generator: g,
        model,
        detector,
        retained: &retained,
        direction: basis.direction(),
        attribute: attr,
        interp_samples: if a.suite == Suite::Interp { n } else { 0 },
        interp_steps: steps,
    };
    let (eval, n_as) = evaluate_edits(&inputs, &candidates, &etas)?;
    match a.suite {
        Suite::ReScore => {
            report.metrics.insert("success_fraction".into(), eval.success_fraction);
            report.metrics.insert("mean_confidence".into(), eval.mean_confidence);
            report.re_score.push(eval.re_score);
        }
        Suite::Interp => {
            report.metrics.insert("monotone_fraction".into(), eval.monotone_fraction);
            report.interpolation = eval.interpolation;
            if let Some(dir) = &a.strips {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                for (i, (c, n_a)) in candidates.iter().zip(&n_as).enumerate() {
                    let frames = interpolate_edit(g, &LatentCode::new(c.w.clone(), LatentSpace::W)?, n_a, steps)?;
                    let path = dir.join(format!("strip_{i:03}.png"));
                    fs::write(&path, strip_png(&frames)?).with_context(|| format!("writing {}", path.display()))?;
                }
            }
        }
        Suite::Decouple => unreachable!("handled above"),
    }
    report.save(&a.out)?;
    Ok(report)
}

pub fn interpolation_summary(series: &[InterpolationSeries]) -> String {
    let ok = series.iter().filter(|s| s.violations <= 1).count();
    format!("{ok}/{} series with at most one decreasing step", series.len())
}

pub fn pipeline_cmd(config: &AppConfig, out: &Path, options: PipelineOptions) -> Result<()> {
    let report = run_pipeline(config, &ModelLayout::new(out), options)?;
    if let Some(f) = &report.full {
        println!(
            "success {:.3}, mean confidence {:.3}, retained {:?}, {}",
            f.success_fraction,
            f.mean_confidence,
            f.re_score.retained,
            interpolation_summary(&f.interpolation)
        );
    }
    println!("report: {}", out.join("pipeline_report.json").display());
    Ok(())
}

pub fn serve_cmd(config: &AppConfig, root: &Path, host: &str, port: u16, session_file: Option<&Path>) -> Result<()> {
    let models = match ModelSet::load(&ModelLayout::new(root)) {
        Ok(m) => Some(Arc::new(m)),
        Err(e) => {
            log::warn!("serving without models: {e}");
            None
        }
    };
    let session = Arc::new(Session::new(models, config.service.clone()));
    if let Some(path) = session_file {
        session.import_from(path)?;
    }
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(server::serve(session, host, port))?;
    Ok(())
}

pub fn grid_arg(text: &str) -> Result<GridSpec> {
    Ok(text.parse()?)
}
