//! The planted correspondence between Z coordinates and sprite factors.
//!
//! The first five coordinates of `z` drive the continuous face properties
//! through the standard normal CDF; the next three switch accessories on when
//! they exceed a prevalence threshold. Remaining coordinates are nuisance.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::spec::{Attribute, FaceProperty, FaceSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPlanting {
    pub latent_dim: usize,
    /// Probability that each accessory is present under `z ~ N(0, I)`.
    pub prevalence: Vec<(Attribute, f64)>,
}

impl Default for LatentPlanting {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            prevalence: vec![
                (Attribute::FaceMask, 0.3),
                (Attribute::SunGlasses, 0.25),
                (Attribute::FrameGlasses, 0.25),
            ],
        }
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

impl LatentPlanting {
    pub fn with_dim(latent_dim: usize) -> Self {
        Self { latent_dim, ..Self::default() }
    }

    pub fn property_coordinate(p: FaceProperty) -> usize {
        FaceProperty::ALL.iter().position(|&q| q == p).expect("listed property")
    }

    pub fn attribute_coordinate(a: Attribute) -> usize {
        FaceProperty::ALL.len() + Attribute::ALL.iter().position(|&b| b == a).expect("listed attribute")
    }

    fn threshold(&self, a: Attribute) -> f64 {
        let p = self.prevalence.iter().find(|(b, _)| *b == a).map_or(0.0, |(_, p)| *p);
        std_normal().inverse_cdf((1.0 - p).clamp(1e-9, 1.0 - 1e-9))
    }

    fn check_dim(&self, z: &[f32]) -> Result<()> {
        let needed = FaceProperty::ALL.len() + Attribute::ALL.len();
        if z.len() != self.latent_dim || z.len() < needed {
            return Err(Error::DimensionMismatch(format!(
                "planting expects {} coordinates (at least {needed}), got {}",
                self.latent_dim,
                z.len()
            )));
        }
        Ok(())
    }

    pub fn spec_from_latent(&self, z: &[f32]) -> Result<FaceSpec> {
        self.check_dim(z)?;
        let normal = std_normal();
        let mut spec = FaceSpec::default();
        for p in FaceProperty::ALL {
            let (lo, hi) = p.range();
            let u = normal.cdf(f64::from(z[Self::property_coordinate(p)]));
            spec.set(p, lo + (hi - lo) * u);
        }
        for a in Attribute::ALL {
            if f64::from(z[Self::attribute_coordinate(a)]) > self.threshold(a) {
                spec.attribute_flags.insert(a);
            }
        }
        Ok(spec)
    }

    /// Draws a `z` whose planted image is `spec`.
    pub fn latent_for_spec<R: Rng>(&self, spec: &FaceSpec, rng: &mut R) -> Result<Vec<f32>> {
        spec.validate()?;
        let normal = std_normal();
        let mut z: Vec<f32> = (0..self.latent_dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        self.check_dim(&z)?;
        for p in FaceProperty::ALL {
            let (lo, hi) = p.range();
            let u = ((spec.get(p) - lo) / (hi - lo)).clamp(1e-6, 1.0 - 1e-6);
            z[Self::property_coordinate(p)] = normal.inverse_cdf(u) as f32;
        }
        for a in Attribute::ALL {
            let t = normal.cdf(self.threshold(a));
            // truncated normal on the side selected by the flag
            let (lo, hi) = if spec.attribute_flags.contains(&a) { (t, 1.0) } else { (0.0, t) };
            let u: f64 = rng.random_range(0.0..1.0);
            let u = (lo + (hi - lo) * u).clamp(1e-9, 1.0 - 1e-9);
            let mut v = normal.inverse_cdf(u) as f32;
            // keep the f32 value strictly on the intended side of the threshold
            let thr = self.threshold(a) as f32;
            if spec.attribute_flags.contains(&a) && f64::from(v) <= self.threshold(a) {
                v = thr + 1e-4;
            } else if !spec.attribute_flags.contains(&a) && f64::from(v) > self.threshold(a) {
                v = thr - 1e-4;
            }
            z[Self::attribute_coordinate(a)] = v;
        }
        Ok(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;

    #[test]
    fn roundtrip_through_latent() {
        let planting = LatentPlanting::default();
        let mut rng = seeded_rng(5, 0);
        for _ in 0..50 {
            let mut spec = FaceSpec::random(&mut rng);
            if rng.random_bool(0.5) {
                spec.attribute_flags.insert(Attribute::SunGlasses);
            }
            let z = planting.latent_for_spec(&spec, &mut rng).unwrap();
            let back = planting.spec_from_latent(&z).unwrap();
            assert_eq!(back.attribute_flags, spec.attribute_flags);
            for p in FaceProperty::ALL {
                assert!((back.get(p) - spec.get(p)).abs() < 1e-5, "{p:?}");
            }
        }
    }

    #[test]
    fn prevalence_matches_thresholds() {
        let planting = LatentPlanting::default();
        let mut rng = seeded_rng(1, 0);
        let n = 20_000;
        let mut masks = 0;
        for _ in 0..n {
            let z: Vec<f32> = (0..64).map(|_| rng.sample(StandardNormal)).collect();
            if planting.spec_from_latent(&z).unwrap().attribute_flags.contains(&Attribute::FaceMask) {
                masks += 1;
            }
        }
        let frac = masks as f64 / n as f64;
        assert!((frac - 0.3).abs() < 0.015, "{frac}");
    }

    #[test]
    fn wrong_dimension_is_rejected() {
        assert!(LatentPlanting::default().spec_from_latent(&[0.0; 4]).is_err());
    }
}
