//! The semantic prior basis: label sampled latents with a predictor, fit a
//! max-margin boundary between the extremes, and search the edit length
//! that best trades detector confidence against changes outside the
//! attribute's region.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attributes::AttributePredictor;
use crate::error::{Error, Result};
use crate::generator::GeneratorModel;
use crate::image::{tensor_to_images, ImageTensor, RegionMask};
use crate::latent::{l2_norm, normalize_direction, SemanticBasis};
use crate::nn::seeded_rng;
use crate::sprite::{estimate_face_spec, region_for, Attribute};
use crate::tensor_file::{load_tensor, save_tensor, TensorFile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLatent {
    pub index: usize,
    pub w: Vec<f32>,
    pub conf: f64,
}

/// Z code number `index` of a seeded stream.
pub fn sample_z(seed: u64, index: usize, dim: usize) -> Vec<f32> {
    let mut rng = seeded_rng(seed, index as u64);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Draws `n` codes `z ~ N(0, I)`, maps them to W and scores the generated
/// images with `predictor`.
pub fn sample_scored_latents(
    generator: &GeneratorModel,
    predictor: &AttributePredictor,
    n: usize,
    seed: u64,
) -> Result<Vec<ScoredLatent>> {
    Ok(sample_scored_latents_multi(generator, &[predictor], n, seed)?.remove(0))
}

/// Like [`sample_scored_latents`] with several predictors scoring the same
/// images; one list per predictor.
pub fn sample_scored_latents_multi(
    generator: &GeneratorModel,
    predictors: &[&AttributePredictor],
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<ScoredLatent>>> {
    let d = generator.config().latent_dim;
    let mut out = vec![Vec::with_capacity(n); predictors.len()];
    for start in (0..n).step_by(256) {
        let end = (start + 256).min(n);
        let zs: Vec<Vec<f32>> = (start..end).map(|i| sample_z(seed, i, d)).collect();
        let ws = generator.map_many(&zs)?;
        let images = generator.generate_many(&ws)?;
        for (list, predictor) in out.iter_mut().zip(predictors) {
            let confs = predictor.batch_confidences(&images)?;
            list.extend(ws.iter().zip(confs).enumerate().map(|(k, (w, conf))| ScoredLatent {
                index: start + k,
                w: w.clone(),
                conf,
            }));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub points: Vec<Vec<f32>>,
    /// `+1` or `-1` per point.
    pub labels: Vec<i8>,
    pub indices: Vec<usize>,
}

/// The `k_pos` highest-scoring entries become positives and the `k_neg`
/// lowest negatives. Entries are ranked by descending confidence, equal
/// confidences by ascending index.
pub fn select_extremes(pairs: &[ScoredLatent], k_pos: usize, k_neg: usize) -> Result<LabeledSet> {
    if k_pos + k_neg > pairs.len() {
        return Err(Error::InsufficientSamples { needed: k_pos + k_neg, available: pairs.len() });
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[b].conf.total_cmp(&pairs[a].conf).then(pairs[a].index.cmp(&pairs[b].index)));
    let pos = order[..k_pos].iter().map(|&i| (i, 1i8));
    let neg = order[order.len() - k_neg..].iter().map(|&i| (i, -1i8));
    let mut set = LabeledSet { points: vec![], labels: vec![], indices: vec![] };
    for (i, y) in pos.chain(neg) {
        set.points.push(pairs[i].w.clone());
        set.labels.push(y);
        set.indices.push(pairs[i].index);
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    pub c: f64,
    pub max_iter: usize,
    /// Stop once the spread of projected gradients falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self { c: 1.0, max_iter: 2000, tol: 1e-4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryDiagnostics {
    pub train_accuracy: f64,
    pub iterations: usize,
    pub weight_norm: f64,
    pub intercept: f64,
    pub support_vectors: usize,
}

/// Primal solution `(w, b)` of the soft-margin linear SVM
/// `min ½‖w‖² + ½b² + C Σ max(0, 1 − yᵢ(w·xᵢ + b))`, solved by dual
/// coordinate descent over the bias-augmented features.
pub fn solve_linear_svm(points: &[Vec<f32>], labels: &[i8], config: &SvmConfig) -> Result<(Vec<f64>, f64, usize)> {
    if points.len() != labels.len() {
        return Err(Error::LengthMismatch(points.len(), labels.len()));
    }
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::DimensionMismatch("points of different lengths".into()));
    }
    let x: Vec<Vec<f64>> =
        points.iter().map(|p| p.iter().map(|&v| f64::from(v)).chain(std::iter::once(1.0)).collect()).collect();
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l.signum())).collect();
    let qii: Vec<f64> = x.iter().map(|xi| xi.iter().map(|v| v * v).sum()).collect();
    let mut alpha = vec![0.0f64; n];
    let mut w = vec![0.0f64; d + 1];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(config.seed, 21);
    for iter in 0..config.max_iter {
        order.shuffle(&mut rng);
        let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
        for &i in &order {
            let g = y[i] * x[i].iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - 1.0;
            let pg = if alpha[i] <= 0.0 {
                g.min(0.0)
            } else if alpha[i] >= config.c {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg.abs() > 1e-12 && qii[i] > 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / qii[i]).clamp(0.0, config.c);
                let delta = (alpha[i] - old) * y[i];
                for (wj, xj) in w.iter_mut().zip(&x[i]) {
                    *wj += delta * xj;
                }
            }
        }
        if pg_max - pg_min < config.tol {
            let b = w.pop().unwrap_or(0.0);
            return Ok((w, b, iter + 1));
        }
    }
    Err(Error::NonConvergence(format!(
        "linear SVM did not reach tolerance {} in {} sweeps",
        config.tol, config.max_iter
    )))
}

/// Fits the attribute boundary and returns its unit normal as a basis of
/// length zero. The normal points from the negatives toward the positives;
/// `boundary_bias` is the intercept in unit-normal form, so the signed
/// distance of `x` is `direction · x + boundary_bias`.
pub fn fit_boundary(
    attribute_id: &str,
    set: &LabeledSet,
    config: &SvmConfig,
) -> Result<(SemanticBasis, BoundaryDiagnostics)> {
    let pos = set.labels.iter().filter(|&&l| l > 0).count();
    if pos == 0 || pos == set.labels.len() {
        return Err(Error::SingleClass);
    }
    let (w, b, iterations) = solve_linear_svm(&set.points, &set.labels, config)?;
    let wf: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut direction = normalize_direction(&wf)?;
    let mut bias = b / norm;
    let score = |p: &[f32], dir: &[f32], bias: f64| -> f64 {
        p.iter().zip(dir).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum::<f64>() + bias
    };
    let mean_of = |sign: i8, dir: &[f32], bias: f64| -> f64 {
        let vals: Vec<f64> = set
            .points
            .iter()
            .zip(&set.labels)
            .filter(|(_, &l)| l.signum() == sign)
            .map(|(p, _)| score(p, dir, bias))
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    if mean_of(1, &direction, bias) < mean_of(-1, &direction, bias) {
        direction.iter_mut().for_each(|v| *v = -*v);
        bias = -bias;
    }
    let correct =
        set.points.iter().zip(&set.labels).filter(|(p, &l)| (score(p, &direction, bias) > 0.0) == (l > 0)).count();
    let support_vectors = set
        .points
        .iter()
        .zip(&set.labels)
        .filter(|(p, &l)| f64::from(l) * (score(p, &direction, bias) * norm) <= 1.0 + 1e-6)
        .count();
    let diagnostics = BoundaryDiagnostics {
        train_accuracy: correct as f64 / set.labels.len() as f64,
        iterations,
        weight_norm: norm,
        intercept: b,
        support_vectors,
    };
    Ok((SemanticBasis::new(attribute_id, direction, 0.0, bias as f32)?, diagnostics))
}

/// How the masked difference terms are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionNorm {
    /// Mean squared difference over the region's values.
    #[default]
    Mean,
    /// Sum of squared differences over the region.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub eta: f64,
    pub det_term: f64,
    pub inside_term: f64,
    pub outside_term: f64,
    pub total: f64,
    pub lambda: f64,
}

impl ScoreBreakdown {
    pub fn new(eta: f64, det_term: f64, inside_term: f64, outside_term: f64, lambda: f64) -> Self {
        let total = det_term + lambda * inside_term - lambda * outside_term;
        Self { eta, det_term, inside_term, outside_term, total, lambda }
    }
}

/// Squared differences between `a` and `b` (pixel-major, `channels` values
/// per pixel) reduced inside and outside `mask`. An empty region gives 0.
pub fn region_terms(a: &[f32], b: &[f32], mask: &[bool], channels: usize, norm: RegionNorm) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.len() != mask.len() * channels {
        return Err(Error::ShapeMismatch(format!(
            "images of {} and {} values with a {}-pixel mask",
            a.len(),
            b.len(),
            mask.len()
        )));
    }
    let (mut sums, mut counts) = ([0.0f64; 2], [0usize; 2]);
    for (p, &inside) in mask.iter().enumerate() {
        let k = usize::from(!inside);
        for c in 0..channels {
            let diff = f64::from(a[p * channels + c]) - f64::from(b[p * channels + c]);
            sums[k] += diff * diff;
            counts[k] += 1;
        }
    }
    let reduce = |k: usize| match norm {
        RegionNorm::Sum => sums[k],
        RegionNorm::Mean if counts[k] == 0 => 0.0,
        RegionNorm::Mean => sums[k] / counts[k] as f64,
    };
    Ok((reduce(0), reduce(1)))
}

/// Inclusive arithmetic grid `start, start + step, ...` up to `stop`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { start: 0.0, stop: 10.0, step: 0.2 }
    }
}

impl GridSpec {
    pub fn points(&self) -> Vec<f64> {
        let count = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        (0..count).map(|k| self.start + k as f64 * self.step).collect()
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| Error::Format(format!("bad grid `{s}`"))))
            .collect::<Result<_>>()?;
        let [start, stop, step] = parts[..] else {
            return Err(Error::Format(format!("grid `{s}` is not start:stop:step")));
        };
        if step.is_nan() || step <= 0.0 || stop < start || !start.is_finite() || !stop.is_finite() {
            return Err(Error::Format(format!("grid `{s}` is empty or unbounded")));
        }
        Ok(Self { start, stop, step })
    }
}

impl std::fmt::Display for GridSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.start, self.stop, self.step)
    }
}

/// Index of the best breakdown: highest total, ties to the smallest `eta`.
/// The result does not depend on the order of `breakdowns`.
pub fn argmax_breakdown(breakdowns: &[ScoreBreakdown]) -> Option<usize> {
    (0..breakdowns.len()).reduce(|best, i| {
        let (a, b) = (&breakdowns[i], &breakdowns[best]);
        match a.total.total_cmp(&b.total) {
            std::cmp::Ordering::Greater => i,
            std::cmp::Ordering::Equal if a.eta < b.eta => i,
            _ => best,
        }
    })
}

/// Exhaustive grid search with an arbitrary scoring function.
pub fn search_with<F>(grid: &GridSpec, mut score: F) -> Result<(f64, Vec<ScoreBreakdown>)>
where
    F: FnMut(f64) -> Result<ScoreBreakdown>,
{
    let breakdowns: Vec<ScoreBreakdown> = grid.points().into_iter().map(&mut score).collect::<Result<_>>()?;
    let best = argmax_breakdown(&breakdowns).ok_or_else(|| Error::Format("empty grid".into()))?;
    Ok((breakdowns[best].eta, breakdowns))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreConfig {
    pub lambda: f64,
    pub norm: RegionNorm,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self { lambda: 10.0, norm: RegionNorm::Mean }
    }
}

fn shifted(w: &[f32], direction: &[f32], eta: f64) -> Vec<f32> {
    w.iter().zip(direction).map(|(a, b)| a + (eta as f32) * b).collect()
}

fn check_edit_inputs(generator: &GeneratorModel, w: &[f32], direction: &[f32], mask: &RegionMask) -> Result<()> {
    let d = generator.config().latent_dim;
    if w.len() != d || direction.len() != d {
        return Err(Error::ShapeMismatch(format!("latent lengths {} and {} for d = {d}", w.len(), direction.len())));
    }
    if mask.size() != generator.config().resolution {
        return Err(Error::ShapeMismatch(format!(
            "mask of size {} for {}-pixel images",
            mask.size(),
            generator.config().resolution
        )));
    }
    Ok(())
}

fn breakdown_for(
    eta: f64,
    base: &ImageTensor,
    edited: &ImageTensor,
    det: f64,
    mask: &RegionMask,
    config: &ScoreConfig,
) -> Result<ScoreBreakdown> {
    let (inside, outside) = region_terms(edited.pixels(), base.pixels(), mask.cells(), 3, config.norm)?;
    Ok(ScoreBreakdown::new(eta, det, inside, outside, config.lambda))
}

/// Score of one edit length: detector confidence on `G(w + eta·n)` plus the
/// λ-weighted change inside `mask` minus the λ-weighted change outside it,
/// both measured against `G(w)`.
pub fn score_edit(
    generator: &GeneratorModel,
    detector: &AttributePredictor,
    w: &[f32],
    direction: &[f32],
    eta: f64,
    mask: &RegionMask,
    config: &ScoreConfig,
) -> Result<ScoreBreakdown> {
    check_edit_inputs(generator, w, direction, mask)?;
    let images = generator.generate_many(&[w.to_vec(), shifted(w, direction, eta)])?;
    let det = detector.predict_confidence(&images[1])?;
    breakdown_for(eta, &images[0], &images[1], det, mask, config)
}

/// Breakdowns for every grid point, computed as one batch.
pub fn score_grid(
    generator: &GeneratorModel,
    detector: &AttributePredictor,
    w: &[f32],
    direction: &[f32],
    mask: &RegionMask,
    grid: &GridSpec,
    config: &ScoreConfig,
) -> Result<Vec<ScoreBreakdown>> {
    check_edit_inputs(generator, w, direction, mask)?;
    let etas = grid.points();
    let mut ws = vec![w.to_vec()];
    ws.extend(etas.iter().map(|&eta| shifted(w, direction, eta)));
    let d = generator.config().latent_dim;
    let flat: Vec<f32> = ws.iter().flatten().copied().collect();
    let images = tensor_to_images(&generator.generate_batch(&Tensor::from_vec(flat, (ws.len(), d), &Device::Cpu)?)?)?;
    let dets = detector.batch_confidences(&images[1..])?;
    etas.iter()
        .zip(&images[1..])
        .zip(dets)
        .map(|((&eta, img), det)| breakdown_for(eta, &images[0], img, det, mask, config))
        .collect()
}

/// Per-image length search: `eta_m` maximizes the score over the grid and
/// the returned basis has that length.
pub fn search_optimal_length(
    generator: &GeneratorModel,
    detector: &AttributePredictor,
    w: &[f32],
    basis: &SemanticBasis,
    mask: &RegionMask,
    grid: &GridSpec,
    config: &ScoreConfig,
) -> Result<(f64, SemanticBasis, Vec<ScoreBreakdown>)> {
    let breakdowns = score_grid(generator, detector, w, basis.direction(), mask, grid, config)?;
    let best = argmax_breakdown(&breakdowns).ok_or_else(|| Error::Format("empty grid".into()))?;
    let eta = breakdowns[best].eta;
    Ok((eta, basis.with_length(eta as f32)?, breakdowns))
}

/// Term-wise mean of per-sample breakdown lists over the same grid.
pub fn mean_breakdowns(all: &[Vec<ScoreBreakdown>]) -> Result<Vec<ScoreBreakdown>> {
    let first = all.first().ok_or(Error::EmptySamples)?;
    if all.iter().any(|b| b.len() != first.len()) {
        return Err(Error::LengthMismatch(
            first.len(),
            all.iter().map(Vec::len).find(|&l| l != first.len()).unwrap_or(0),
        ));
    }
    let n = all.len() as f64;
    Ok((0..first.len())
        .map(|k| {
            let sum = |f: fn(&ScoreBreakdown) -> f64| all.iter().map(|b| f(&b[k])).sum::<f64>() / n;
            ScoreBreakdown::new(
                first[k].eta,
                sum(|b| b.det_term),
                sum(|b| b.inside_term),
                sum(|b| b.outside_term),
                first[k].lambda,
            )
        })
        .collect())
}

/// One length for a whole set of latents: the grid point with the highest
/// mean score.
pub fn search_global_length(
    generator: &GeneratorModel,
    detector: &AttributePredictor,
    items: &[(Vec<f32>, RegionMask)],
    basis: &SemanticBasis,
    grid: &GridSpec,
    config: &ScoreConfig,
) -> Result<(f64, SemanticBasis, Vec<ScoreBreakdown>)> {
    if items.is_empty() {
        return Err(Error::EmptySamples);
    }
    let all = items
        .iter()
        .map(|(w, mask)| score_grid(generator, detector, w, basis.direction(), mask, grid, config))
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_breakdowns(&all)?;
    let best = argmax_breakdown(&mean).ok_or_else(|| Error::Format("empty grid".into()))?;
    let eta = mean[best].eta;
    Ok((eta, basis.with_length(eta as f32)?, mean))
}

/// Region mask `M` for editing `G(w)`: the accessory footprint placed with
/// the face geometry estimated from the generated image, or the whole face.
pub fn attribute_region_mask(
    generator: &GeneratorModel,
    w: &[f32],
    attribute_id: &str,
    whole_face: bool,
) -> Result<RegionMask> {
    let attr: Attribute = attribute_id.parse()?;
    let image = generator.generate_many(&[w.to_vec()])?.remove(0);
    region_mask_for_image(&image, attr, whole_face)
}

pub fn region_mask_for_image(image: &ImageTensor, attr: Attribute, whole_face: bool) -> Result<RegionMask> {
    let spec = estimate_face_spec(image)?;
    let mask = region_for(&spec, attr, image.size(), whole_face);
    if mask.is_empty() {
        return Err(Error::PlacementFailure(format!("empty `{attr}` footprint")));
    }
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasisConfig {
    pub samples: usize,
    pub k_pos: usize,
    pub k_neg: usize,
    pub seed: u64,
    pub svm: SvmConfig,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self { samples: 20_000, k_pos: 500, k_neg: 500, seed: 0, svm: SvmConfig::default() }
    }
}

/// Sampling, extreme selection and boundary fitting in one call.
pub fn learn_basis(
    generator: &GeneratorModel,
    predictor: &AttributePredictor,
    config: &BasisConfig,
) -> Result<(SemanticBasis, BoundaryDiagnostics)> {
    let scored = sample_scored_latents(generator, predictor, config.samples, config.seed)?;
    let set = select_extremes(&scored, config.k_pos, config.k_neg)?;
    fit_boundary(predictor.attribute_id(), &set, &config.svm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisMeta {
    pub attribute_id: String,
    pub eta_m: f64,
    pub lambda: f64,
    pub grid: String,
    pub boundary_bias: f32,
}

/// Sidecar metadata path for a basis tensor file.
pub fn basis_meta_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_basis(path: impl AsRef<Path>, basis: &SemanticBasis, lambda: f64, grid: &GridSpec) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save_tensor(path, &TensorFile::new(vec![basis.direction().len()], basis.direction().to_vec())?)?;
    let meta = BasisMeta {
        attribute_id: basis.attribute_id.clone(),
        eta_m: f64::from(basis.length()),
        lambda,
        grid: grid.to_string(),
        boundary_bias: basis.boundary_bias,
    };
    let meta_path = basis_meta_path(path);
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))
}

pub fn load_basis(path: impl AsRef<Path>) -> Result<(SemanticBasis, BasisMeta)> {
    let path = path.as_ref();
    let tensor = load_tensor(path)?;
    let meta_path = basis_meta_path(path);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: BasisMeta = serde_json::from_str(&text)?;
    if (l2_norm(&tensor.data) - 1.0).abs() > 1e-5 {
        return Err(Error::Format(format!("{} does not hold a unit direction", path.display())));
    }
    let direction = normalize_direction(&tensor.data)?;
    let basis = SemanticBasis::new(meta.attribute_id.clone(), direction, meta.eta_m as f32, meta.boundary_bias)?;
    Ok((basis, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;
    use crate::sprite::Label;

    fn scored(confs: &[f64]) -> Vec<ScoredLatent> {
        confs.iter().enumerate().map(|(i, &c)| ScoredLatent { index: i, w: vec![i as f32], conf: c }).collect()
    }

    #[test]
    fn extremes_follow_rank_and_tie_rule() {
        let set = select_extremes(&scored(&[0.9, 0.1, 0.8, 0.2]), 1, 1).unwrap();
        assert_eq!(set.indices, vec![0, 1]);
        assert_eq!(set.labels, vec![1, -1]);
        let set = select_extremes(&scored(&[0.5; 4]), 2, 2).unwrap();
        assert_eq!(set.indices, vec![0, 1, 2, 3]);
        assert_eq!(set.labels, vec![1, 1, -1, -1]);
        assert!(matches!(select_extremes(&scored(&[0.5; 3]), 2, 2), Err(Error::InsufficientSamples { .. })));
    }

    /// Largest geometric margin over unit directions, searched on a fine
    /// angular grid and refined by golden-section search.
    fn brute_force_direction(points: &[Vec<f32>], labels: &[i8]) -> [f64; 2] {
        let margin = |theta: f64| {
            let u = [theta.cos(), theta.sin()];
            let proj = |p: &Vec<f32>| f64::from(p[0]) * u[0] + f64::from(p[1]) * u[1];
            let min_pos =
                points.iter().zip(labels).filter(|(_, &l)| l > 0).map(|(p, _)| proj(p)).fold(f64::INFINITY, f64::min);
            let max_neg = points
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l < 0)
                .map(|(p, _)| proj(p))
                .fold(f64::NEG_INFINITY, f64::max);
            (min_pos - max_neg) / 2.0
        };
        let steps = 3600;
        let tau = std::f64::consts::TAU;
        let best =
            (0..steps).map(|k| k as f64 * tau / steps as f64).max_by(|a, b| margin(*a).total_cmp(&margin(*b))).unwrap();
        let (mut lo, mut hi) = (best - tau / steps as f64, best + tau / steps as f64);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..100 {
            let (m1, m2) = (hi - g * (hi - lo), lo + g * (hi - lo));
            if margin(m1) < margin(m2) {
                lo = m1;
            } else {
                hi = m2;
            }
        }
        let t = 0.5 * (lo + hi);
        [t.cos(), t.sin()]
    }

    #[test]
    fn separable_fixture_matches_max_margin_oracle() {
        let points = vec![vec![1.0, 0.1], vec![1.0, -0.1], vec![-1.0, 0.1], vec![-1.0, -0.1]];
        let labels = vec![1, 1, -1, -1];
        let set = LabeledSet { points: points.clone(), labels: labels.clone(), indices: vec![0, 1, 2, 3] };
        let (basis, diag) = fit_boundary("toy", &set, &SvmConfig::default()).unwrap();
        let oracle = brute_force_direction(&points, &labels);
        assert!((f64::from(basis.direction()[0]) - oracle[0]).abs() < 1e-3);
        assert!((f64::from(basis.direction()[1]) - oracle[1]).abs() < 1e-3);
        assert!((f64::from(basis.direction()[0]) - 1.0).abs() < 1e-3);
        assert_eq!(basis.length(), 0.0);
        assert_eq!(diag.train_accuracy, 1.0);
    }

    #[test]
    fn tilted_fixture_matches_oracle() {
        let points =
            vec![vec![2.0, 1.0], vec![1.5, 2.0], vec![3.0, 0.5], vec![-1.0, 0.0], vec![0.0, -1.0], vec![-0.5, -0.5]];
        let labels = vec![1, 1, 1, -1, -1, -1];
        let set = LabeledSet { points: points.clone(), labels: labels.clone(), indices: (0..6).collect() };
        let config = SvmConfig { c: 1e4, max_iter: 100_000, tol: 1e-9, seed: 3 };
        let (basis, _) = fit_boundary("toy", &set, &config).unwrap();
        let oracle = brute_force_direction(&points, &labels);
        for k in 0..2 {
            assert!(
                (f64::from(basis.direction()[k]) - oracle[k]).abs() < 1e-3,
                "{:?} vs {oracle:?}",
                basis.direction()
            );
        }
    }

    #[test]
    fn single_class_and_orientation() {
        let set = LabeledSet { points: vec![vec![1.0], vec![2.0]], labels: vec![1, 1], indices: vec![0, 1] };
        assert!(matches!(fit_boundary("a", &set, &SvmConfig::default()), Err(Error::SingleClass)));
        let mut rng = seeded_rng(4, 0);
        let mut points = vec![];
        let mut labels = vec![];
        for i in 0..60 {
            let y: i8 = if i % 2 == 0 { 1 } else { -1 };
            let p: Vec<f32> = (0..5)
                .map(|k| rng.sample::<f32, _>(StandardNormal) + if k == 2 { -2.0 * f32::from(y) } else { 0.0 })
                .collect();
            points.push(p);
            labels.push(y);
        }
        let set = LabeledSet { points: points.clone(), labels: labels.clone(), indices: (0..60).collect() };
        let (basis, _) = fit_boundary("a", &set, &SvmConfig::default()).unwrap();
        let proj = |p: &Vec<f32>| p.iter().zip(basis.direction()).map(|(a, b)| a * b).sum::<f32>();
        let mean = |s: i8| {
            let v: Vec<f32> = points.iter().zip(&labels).filter(|(_, &l)| l == s).map(|(p, _)| proj(p)).collect();
            v.iter().sum::<f32>() / v.len() as f32
        };
        assert!(mean(1) > mean(-1));
        assert!(basis.direction()[2] < -0.9);
    }

    #[test]
    fn iteration_cap_reports_nonconvergence() {
        let points: Vec<Vec<f32>> = (0..40).map(|i| vec![(i as f32).sin(), (i as f32 * 0.7).cos()]).collect();
        let labels: Vec<i8> = (0..40).map(|i| if i % 3 == 0 { 1 } else { -1 }).collect();
        let set = LabeledSet { points, labels, indices: (0..40).collect() };
        let config = SvmConfig { c: 100.0, max_iter: 1, tol: 1e-12, seed: 0 };
        assert!(matches!(fit_boundary("a", &set, &config), Err(Error::NonConvergence(_))));
    }

    #[test]
    fn region_terms_hand_oracle() {
        let a = [3.0f32, 0.0, 0.0, 0.0];
        let b = [0.0f32; 4];
        let mask = [true, false, false, false];
        assert_eq!(region_terms(&a, &b, &mask, 1, RegionNorm::Mean).unwrap(), (9.0, 0.0));
        assert_eq!(region_terms(&a, &b, &mask, 1, RegionNorm::Sum).unwrap(), (9.0, 0.0));
        let a = [1.0f32, 2.0, 0.0, 0.0];
        // inside: (1), outside: (4 + 0 + 0) / 3
        let (i, o) = region_terms(&a, &b, &mask, 1, RegionNorm::Mean).unwrap();
        assert_eq!(i, 1.0);
        assert!((o - 4.0 / 3.0).abs() < 1e-12);
        assert!(region_terms(&a, &b[..3], &mask, 1, RegionNorm::Mean).is_err());
    }

    #[test]
    fn breakdown_recomposes() {
        let b = ScoreBreakdown::new(0.4, 0.7, 0.02, 0.01, 10.0);
        assert!((b.total - (0.7 + 10.0 * 0.02 - 10.0 * 0.01)).abs() < 1e-9);
        let b = ScoreBreakdown::new(0.4, 0.7, 0.02, 0.01, 0.0);
        assert_eq!(b.total, b.det_term);
    }

    #[test]
    fn grid_parsing_and_points() {
        let g: GridSpec = "0:10:0.2".parse().unwrap();
        let pts = g.points();
        assert_eq!(pts.len(), 51);
        assert_eq!(pts[0], 0.0);
        assert!((pts[50] - 10.0).abs() < 1e-12);
        assert!((pts[10] - 2.0).abs() < 1e-12);
        assert_eq!(g.to_string().parse::<GridSpec>().unwrap(), g);
        assert!("0:10".parse::<GridSpec>().is_err());
        assert!("0:10:0".parse::<GridSpec>().is_err());
        assert!("5:1:1".parse::<GridSpec>().is_err());
    }

    #[test]
    fn injected_scores_pick_argmax_and_smallest_tie() {
        let grid = GridSpec::default();
        let (eta, list) =
            search_with(&grid, |eta| Ok(ScoreBreakdown::new(eta, 1.0 - (eta - 2.0).powi(2), 0.0, 0.0, 10.0))).unwrap();
        assert!((eta - 2.0).abs() < 1e-12);
        assert_eq!(list.len(), 51);
        let (eta, _) = search_with(&grid, |eta| Ok(ScoreBreakdown::new(eta, 0.3, 0.0, 0.0, 10.0))).unwrap();
        assert_eq!(eta, 0.0);
    }

    #[test]
    fn argmax_ignores_evaluation_order() {
        let mut list: Vec<ScoreBreakdown> = GridSpec::default()
            .points()
            .into_iter()
            .map(|e| ScoreBreakdown::new(e, (e * 3.0).sin().round(), 0.0, 0.0, 1.0))
            .collect();
        let first = list[argmax_breakdown(&list).unwrap()].eta;
        list.reverse();
        assert_eq!(list[argmax_breakdown(&list).unwrap()].eta, first);
        list.shuffle(&mut seeded_rng(1, 1));
        assert_eq!(list[argmax_breakdown(&list).unwrap()].eta, first);
    }

    fn tiny_models() -> (GeneratorModel, AttributePredictor) {
        let cfg = GeneratorConfig { latent_dim: 16, layers: 8, resolution: 32, channels: vec![16, 16, 8, 8] };
        let mut g = GeneratorModel::new(cfg, 1).unwrap();
        g.freeze().unwrap();
        (g, AttributePredictor::new(Label::Presence(Attribute::FaceMask), 32, 2).unwrap())
    }

    #[test]
    fn score_at_zero_eta_is_detector_only() {
        let (g, det) = tiny_models();
        let w = sample_z(3, 0, 16);
        let dir = normalize_direction(&sample_z(3, 1, 16)).unwrap();
        let mask = RegionMask::new(32, (0..1024).map(|i| i % 3 == 0).collect()).unwrap();
        let b = score_edit(&g, &det, &w, &dir, 0.0, &mask, &ScoreConfig::default()).unwrap();
        assert_eq!((b.inside_term, b.outside_term), (0.0, 0.0));
        let img = g.generate_many(std::slice::from_ref(&w)).unwrap().remove(0);
        assert_eq!(b.total, det.predict_confidence(&img).unwrap());
    }

    #[test]
    fn batched_grid_matches_single_scores() {
        let (g, det) = tiny_models();
        let w = sample_z(5, 0, 16);
        let dir = normalize_direction(&sample_z(5, 1, 16)).unwrap();
        let mask = RegionMask::new(32, (0..1024).map(|i| i < 300).collect()).unwrap();
        let grid = GridSpec { start: 0.0, stop: 2.0, step: 0.5 };
        let list = score_grid(&g, &det, &w, &dir, &mask, &grid, &ScoreConfig::default()).unwrap();
        assert_eq!(list.len(), 5);
        for b in &list {
            let single = score_edit(&g, &det, &w, &dir, b.eta, &mask, &ScoreConfig::default()).unwrap();
            assert!((single.total - b.total).abs() < 1e-6);
            assert!((b.total - (b.det_term + b.lambda * (b.inside_term - b.outside_term))).abs() < 1e-9);
        }
        let bad = RegionMask::empty(16);
        assert!(matches!(
            score_edit(&g, &det, &w, &dir, 1.0, &bad, &ScoreConfig::default()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn sampling_is_seeded_and_recomputable() {
        let (g, det) = tiny_models();
        assert!(sample_scored_latents(&g, &det, 0, 1).unwrap().is_empty());
        let a = sample_scored_latents(&g, &det, 6, 9).unwrap();
        assert_eq!(a, sample_scored_latents(&g, &det, 6, 9).unwrap());
        let img = g.generate_many(&[a[4].w.clone()]).unwrap().remove(0);
        assert!((det.predict_confidence(&img).unwrap() - a[4].conf).abs() < 1e-6);
    }

    #[test]
    fn basis_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("face_mask.sdgt");
        let basis = SemanticBasis::new("face_mask", normalize_direction(&[1.0, 2.0, 2.0]).unwrap(), 2.4, -0.3).unwrap();
        save_basis(&path, &basis, 10.0, &GridSpec::default()).unwrap();
        let (back, meta) = load_basis(&path).unwrap();
        assert_eq!(back, basis);
        assert_eq!(meta.grid, "0:10:0.2");
    }
}
