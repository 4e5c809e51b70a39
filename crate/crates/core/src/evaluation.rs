//! Edit quality metrics: retained-attribute drift, cosine decoupling
//! between edit directions and interpolation sequences.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attributes::AttributePredictor;
use crate::error::{Error, Result};
use crate::generator::GeneratorModel;
use crate::image::ImageTensor;
use crate::latent::{ExtendedLatent, LatentCode, SemanticBasis};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReScoreReport {
    pub target_attribute: String,
    /// Mean absolute confidence change per retained attribute.
    pub retained: BTreeMap<String, f64>,
    /// Mean target confidence on the edited images.
    pub target_after: f64,
    pub n_samples: usize,
}

/// `mean_i |after_i − before_i|` over paired confidences.
pub fn mean_abs_drift(before: &[f64], after: &[f64]) -> Result<f64> {
    if before.len() != after.len() {
        return Err(Error::LengthMismatch(before.len(), after.len()));
    }
    if before.is_empty() {
        return Err(Error::EmptySamples);
    }
    Ok(before.iter().zip(after).map(|(a, b)| (b - a).abs()).sum::<f64>() / before.len() as f64)
}

/// Confidence drift of every retained predictor between paired originals
/// and edits, and the mean target confidence after editing.
pub fn re_score(
    predictors: &BTreeMap<String, AttributePredictor>,
    originals: &[ImageTensor],
    edits: &[ImageTensor],
    target_attribute: &str,
    retained: &[&str],
) -> Result<ReScoreReport> {
    if originals.len() != edits.len() {
        return Err(Error::LengthMismatch(originals.len(), edits.len()));
    }
    if originals.is_empty() {
        return Err(Error::EmptySamples);
    }
    let get = |id: &str| predictors.get(id).ok_or_else(|| Error::MissingPredictor(id.to_string()));
    let target = get(target_attribute)?;
    let mut report = BTreeMap::new();
    for &id in retained {
        let p = get(id)?;
        report.insert(id.to_string(), mean_abs_drift(&p.batch_confidences(originals)?, &p.batch_confidences(edits)?)?);
    }
    let after = target.batch_confidences(edits)?;
    Ok(ReScoreReport {
        target_attribute: target_attribute.to_string(),
        retained: report,
        target_after: after.iter().sum::<f64>() / after.len() as f64,
        n_samples: originals.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecouplingMatrix {
    pub attribute_ids: Vec<String>,
    pub cos: Vec<Vec<f64>>,
}

impl DecouplingMatrix {
    /// Largest `|cos|` between two different attributes.
    pub fn max_off_diagonal(&self) -> f64 {
        let n = self.attribute_ids.len();
        (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.cos[i][j].abs())
            .fold(0.0, f64::max)
    }
}

/// Pairwise cosine similarity of flattened directions.
pub fn decoupling_matrix(directions: &[(String, Vec<f32>)]) -> Result<DecouplingMatrix> {
    let norms: Vec<f64> =
        directions.iter().map(|(_, v)| v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt()).collect();
    if norms.contains(&0.0) {
        return Err(Error::ZeroVector);
    }
    if let Some((_, v)) = directions.iter().find(|(_, v)| v.len() != directions[0].1.len()) {
        return Err(Error::DimensionMismatch(format!(
            "directions of length {} and {}",
            directions[0].1.len(),
            v.len()
        )));
    }
    let n = directions.len();
    let mut cos = vec![vec![0.0; n]; n];
    for i in 0..n {
        cos[i][i] = 1.0;
        for j in i + 1..n {
            let dot: f64 =
                directions[i].1.iter().zip(&directions[j].1).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            cos[i][j] = c;
            cos[j][i] = c;
        }
    }
    Ok(DecouplingMatrix { attribute_ids: directions.iter().map(|(id, _)| id.clone()).collect(), cos })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionMode {
    /// `η_m · n_{n-b}`.
    BasisOnly,
    /// Mean adjusted code `n_a` over samples, flattened row-major.
    MeanAdjusted,
}

/// The vector that stands for a method's edit of one attribute.
pub fn edit_direction_for_method(
    adjusted: &[ExtendedLatent],
    basis: &SemanticBasis,
    mode: DirectionMode,
) -> Result<Vec<f32>> {
    match mode {
        DirectionMode::BasisOnly => Ok(basis.vector()),
        DirectionMode::MeanAdjusted => {
            let first = adjusted.first().ok_or(Error::EmptySamples)?;
            let mut acc = vec![0f64; first.as_slice().len()];
            for n_a in adjusted {
                if n_a.layers() != first.layers() || n_a.dim() != first.dim() {
                    return Err(Error::ShapeMismatch("adjusted codes of different shapes".into()));
                }
                for (a, &v) in acc.iter_mut().zip(n_a.as_slice()) {
                    *a += f64::from(v);
                }
            }
            Ok(acc.into_iter().map(|v| (v / adjusted.len() as f64) as f32).collect())
        }
    }
}

/// Repeats a W-space direction on every row so it can be compared with
/// flattened W+ codes.
pub fn tile_direction(v: &[f32], layers: usize) -> Vec<f32> {
    v.repeat(layers)
}

/// Frames `G_s(w + t_k·n_a)` with `t_k = k / (K − 1)`.
pub fn interpolate_edit(
    generator: &GeneratorModel,
    w: &LatentCode,
    n_a: &ExtendedLatent,
    steps: usize,
) -> Result<Vec<ImageTensor>> {
    if steps < 2 {
        return Err(Error::InvalidSteps(steps));
    }
    if n_a.dim() != w.dim() {
        return Err(Error::ShapeMismatch(format!("w dim {} vs n_a dim {}", w.dim(), n_a.dim())));
    }
    (0..steps)
        .map(|k| {
            let t = k as f32 / (steps - 1) as f32;
            let data: Vec<f32> = n_a
                .as_slice()
                .chunks(n_a.dim())
                .flat_map(|row| row.iter().zip(w.values()).map(move |(a, wv)| wv + t * a))
                .collect();
            generator.synthesize(&ExtendedLatent::from_vec(n_a.layers(), n_a.dim(), data)?)
        })
        .collect()
}

/// Smallest drop counted as a decrease. Detector confidences are `f32`,
/// whose spacing just below 1 is about `6e-8`.
pub const MONOTONE_TOLERANCE: f64 = 1e-6;

/// Adjacent pairs where the series drops by more than
/// [`MONOTONE_TOLERANCE`].
pub fn monotone_violations(series: &[f64]) -> usize {
    series.windows(2).filter(|p| p[0] - p[1] > MONOTONE_TOLERANCE).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationSeries {
    pub sample: usize,
    pub confidences: Vec<f64>,
    pub violations: usize,
}

impl InterpolationSeries {
    pub fn new(sample: usize, confidences: Vec<f64>) -> Self {
        let violations = monotone_violations(&confidences);
        Self { sample, confidences, violations }
    }
}

/// All evaluation results of one run plus model provenance.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub re_score: Vec<ReScoreReport>,
    pub decoupling: Vec<(String, DecouplingMatrix)>,
    pub interpolation: Vec<InterpolationSeries>,
    /// Extra scalar metrics, e.g. detection rates.
    pub metrics: BTreeMap<String, f64>,
    /// Config snapshot hash of every model used, keyed by model name.
    pub model_hashes: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;
    use crate::latent::{apply_edit_latent, broadcast_to_extended, normalize_direction, LatentSpace};
    use crate::sprite::{render_base_face, Attribute, FaceProperty, FaceSpec, Label};
    use proptest::prelude::*;

    #[test]
    fn drift_hand_values() {
        assert!((mean_abs_drift(&[0.9, 0.5], &[0.7, 0.5]).unwrap() - 0.1).abs() < 1e-12);
        assert!(matches!(mean_abs_drift(&[0.9], &[0.7, 0.5]), Err(Error::LengthMismatch(1, 2))));
    }

    fn predictors() -> BTreeMap<String, AttributePredictor> {
        let mut m = BTreeMap::new();
        m.insert("face_mask".into(), AttributePredictor::new(Label::Presence(Attribute::FaceMask), 32, 1).unwrap());
        m.insert("hue".into(), AttributePredictor::new(Label::Property(FaceProperty::Hue), 32, 2).unwrap());
        m
    }

    fn faces(n: usize) -> Vec<ImageTensor> {
        (0..n)
            .map(|i| render_base_face(&FaceSpec { face_hue: i as f64 / n as f64, ..FaceSpec::default() }, 32).0)
            .collect()
    }

    #[test]
    fn identity_edit_has_no_drift() {
        let p = predictors();
        let imgs = faces(4);
        let r = re_score(&p, &imgs, &imgs, "face_mask", &["hue"]).unwrap();
        assert_eq!(r.retained["hue"], 0.0);
        let before = p["face_mask"].batch_confidences(&imgs).unwrap();
        assert!((r.target_after - before.iter().sum::<f64>() / 4.0).abs() < 1e-12);
        assert_eq!(r.n_samples, 4);
        assert!(matches!(re_score(&p, &imgs, &imgs[..3], "face_mask", &["hue"]), Err(Error::LengthMismatch(4, 3))));
        assert!(matches!(re_score(&p, &imgs, &imgs, "face_mask", &["pose_shift"]), Err(Error::MissingPredictor(_))));
    }

    #[test]
    fn re_score_ignores_pair_order() {
        let p = predictors();
        let a = faces(5);
        let mut b = faces(5);
        b.rotate_left(2);
        let r1 = re_score(&p, &a, &b, "face_mask", &["hue"]).unwrap();
        let (mut a2, mut b2) = (a.clone(), b.clone());
        a2.reverse();
        b2.reverse();
        let r2 = re_score(&p, &a2, &b2, "face_mask", &["hue"]).unwrap();
        assert!((r1.retained["hue"] - r2.retained["hue"]).abs() < 1e-12);
    }

    #[test]
    fn cosine_hand_values() {
        let m = decoupling_matrix(&[
            ("a".into(), vec![1.0, 0.0, 0.0]),
            ("b".into(), vec![0.0, 1.0, 0.0]),
            ("c".into(), vec![1.0, 1.0, 0.0]),
        ])
        .unwrap();
        assert_eq!(m.cos[0][1], 0.0);
        assert_eq!(m.cos[2][2], 1.0);
        assert!((m.cos[0][2] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!((m.max_off_diagonal() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!(matches!(decoupling_matrix(&[("a".into(), vec![0.0, 0.0])]), Err(Error::ZeroVector)));
    }

    proptest! {
        #[test]
        fn decoupling_is_symmetric_with_unit_diagonal(vs in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 4), 2..5)) {
            prop_assume!(vs.iter().all(|v| v.iter().any(|x| x.abs() > 1e-2)));
            let dirs: Vec<(String, Vec<f32>)> = vs.into_iter().enumerate().map(|(i, v)| (format!("a{i}"), v)).collect();
            let m = decoupling_matrix(&dirs).unwrap();
            for i in 0..dirs.len() {
                prop_assert!((m.cos[i][i] - 1.0).abs() < 1e-6);
                for j in 0..dirs.len() {
                    prop_assert_eq!(m.cos[i][j], m.cos[j][i]);
                    prop_assert!(m.cos[i][j].abs() <= 1.0);
                }
            }
        }
    }

    #[test]
    fn direction_modes() {
        let basis = SemanticBasis::new("face_mask", normalize_direction(&[3.0, 4.0]).unwrap(), 2.0, 0.0).unwrap();
        assert_eq!(edit_direction_for_method(&[], &basis, DirectionMode::BasisOnly).unwrap(), basis.vector());
        assert!(matches!(
            edit_direction_for_method(&[], &basis, DirectionMode::MeanAdjusted),
            Err(Error::EmptySamples)
        ));
        let n_a = ExtendedLatent::from_vec(2, 2, vec![0.1, -0.3, 0.7, 1e-3]).unwrap();
        let one = edit_direction_for_method(std::slice::from_ref(&n_a), &basis, DirectionMode::MeanAdjusted).unwrap();
        assert_eq!(one, n_a.as_slice());
        let many = edit_direction_for_method(&vec![n_a.clone(); 7], &basis, DirectionMode::MeanAdjusted).unwrap();
        for (a, b) in many.iter().zip(&one) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    fn tiny_generator() -> GeneratorModel {
        let cfg = GeneratorConfig { latent_dim: 8, layers: 4, resolution: 32, channels: vec![8, 8, 8, 8] };
        GeneratorModel::new(cfg, 5).unwrap()
    }

    #[test]
    fn interpolation_endpoints_and_steps() {
        let g = tiny_generator();
        let w = LatentCode::new((0..8).map(|i| i as f32 * 0.1).collect(), LatentSpace::W).unwrap();
        let n_a = ExtendedLatent::from_vec(4, 8, (0..32).map(|i| ((i as f32) * 0.37).sin()).collect()).unwrap();
        let frames = interpolate_edit(&g, &w, &n_a, 2).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[0], g.synthesize(&broadcast_to_extended(&w, 4).unwrap()).unwrap());
        assert_eq!(frames[1], g.synthesize(&apply_edit_latent(&w, &n_a).unwrap()).unwrap());
        let five = interpolate_edit(&g, &w, &n_a, 5).unwrap();
        assert_eq!(five.len(), 5);
        assert_eq!(five[4], frames[1]);
        let zero = ExtendedLatent::zeros(4, 8);
        let still = interpolate_edit(&g, &w, &zero, 4).unwrap();
        assert!(still.iter().all(|f| *f == still[0]));
        assert!(matches!(interpolate_edit(&g, &w, &n_a, 1), Err(Error::InvalidSteps(1))));
    }

    #[test]
    fn violation_counting() {
        assert_eq!(monotone_violations(&[0.1, 0.2, 0.2, 0.5]), 0);
        assert_eq!(monotone_violations(&[0.1, 0.3, 0.2, 0.5, 0.4]), 2);
        assert_eq!(monotone_violations(&[]), 0);
        assert_eq!(monotone_violations(&[0.9999995, 0.9999993, 1.0]), 0);
        assert_eq!(monotone_violations(&[0.5, 0.49999]), 1);
    }

    #[test]
    fn report_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let empty = EvalReport::default();
        empty.save(&path).unwrap();
        assert_eq!(EvalReport::load(&path).unwrap(), empty);
        let mut full = EvalReport::default();
        full.re_score.push(ReScoreReport {
            target_attribute: "face_mask".into(),
            retained: [("hue".to_string(), 0.0123456789)].into(),
            target_after: 0.97,
            n_samples: 200,
        });
        full.decoupling.push((
            "basis_only".into(),
            decoupling_matrix(&[("a".into(), vec![1.0, 0.2]), ("b".into(), vec![0.1, 1.0])]).unwrap(),
        ));
        full.interpolation.push(InterpolationSeries::new(3, vec![0.1, 0.4, 0.35, 0.9]));
        full.model_hashes.insert("generator".into(), "abc".into());
        full.save(&path).unwrap();
        assert_eq!(EvalReport::load(&path).unwrap(), full);
    }
}
