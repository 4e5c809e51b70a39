//! Latent-space values and the arithmetic that composes edits.
//!
//! A [`LatentCode`] is a point in Z or W; an [`ExtendedLatent`] is a stack of
//! `layers` W rows (W+), one per synthesis layer. A [`SemanticBasis`] is a unit
//! direction in W plus a searched length; its scaled vector is always added to
//! every W+ row.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentSpace {
    Z,
    W,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    values: Vec<f32>,
    space: LatentSpace,
}

impl LatentCode {
    pub fn new(values: Vec<f32>, space: LatentSpace) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("latent code has non-finite entries".into()));
        }
        Ok(Self { values, space })
    }

    pub fn zeros(dim: usize, space: LatentSpace) -> Self {
        Self { values: vec![0.0; dim], space }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn space(&self) -> LatentSpace {
        self.space
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

/// W+ code: `layers` rows of `dim` entries, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtendedLatent {
    layers: usize,
    dim: usize,
    data: Vec<f32>,
}

impl ExtendedLatent {
    pub fn zeros(layers: usize, dim: usize) -> Self {
        Self { layers, dim, data: vec![0.0; layers * dim] }
    }

    pub fn from_vec(layers: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != layers * dim {
            return Err(Error::ShapeMismatch(format!("{} values for a {layers}x{dim} extended latent", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("extended latent has non-finite entries".into()));
        }
        Ok(Self { layers, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::from_vec(rows.len(), dim, rows.concat())
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.dim.max(1)).take(self.layers)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.layers != other.layers || self.dim != other.dim {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.layers, self.dim, other.layers, other.dim
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { layers: self.layers, dim: self.dim, data })
    }

    pub fn scale(&self, factor: f32) -> Self {
        let data = self.data.iter().map(|v| v * factor).collect();
        Self { layers: self.layers, dim: self.dim, data }
    }
}

/// Unit attribute direction `n_{n-b}` in W with its searched length `eta_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticBasis {
    pub attribute_id: String,
    direction: Vec<f32>,
    length: f32,
    /// SVM intercept, kept for diagnostics only.
    pub boundary_bias: f32,
}

impl SemanticBasis {
    pub fn new(attribute_id: impl Into<String>, direction: Vec<f32>, length: f32, boundary_bias: f32) -> Result<Self> {
        let norm = l2_norm(&direction);
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Format(format!("basis direction has norm {norm}, expected 1")));
        }
        if !(length >= 0.0 && length.is_finite()) {
            return Err(Error::Format(format!("basis length {length} must be finite and >= 0")));
        }
        Ok(Self { attribute_id: attribute_id.into(), direction, length, boundary_bias })
    }

    pub fn direction(&self) -> &[f32] {
        &self.direction
    }

    pub fn length(&self) -> f32 {
        self.length
    }

    pub fn with_length(&self, length: f32) -> Result<Self> {
        Self::new(self.attribute_id.clone(), self.direction.clone(), length, self.boundary_bias)
    }

    /// `n_b = length * direction`.
    pub fn vector(&self) -> Vec<f32> {
        self.direction.iter().map(|v| self.length * v).collect()
    }
}

pub(crate) fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

pub fn normalize_direction(v: &[f32]) -> Result<Vec<f32>> {
    let norm = l2_norm(v);
    if !norm.is_finite() {
        return Err(Error::Format("direction has non-finite entries".into()));
    }
    if norm < 1e-12 {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|&x| (f64::from(x) / norm) as f32).collect())
}

/// Repeats a W code on every one of `layers` rows.
pub fn broadcast_to_extended(w: &LatentCode, layers: usize) -> Result<ExtendedLatent> {
    if w.space != LatentSpace::W {
        return Err(Error::DimensionMismatch("broadcast expects a W-space code".into()));
    }
    let data = w.values.repeat(layers);
    Ok(ExtendedLatent { layers, dim: w.dim(), data })
}

/// `n_a = n_o + n_b`, with `n_b` added to every row of the offset.
pub fn compose_adjustment(offset: &ExtendedLatent, basis: &SemanticBasis) -> Result<ExtendedLatent> {
    if basis.direction.len() != offset.dim {
        return Err(Error::ShapeMismatch(format!("basis dim {} vs offset dim {}", basis.direction.len(), offset.dim)));
    }
    let nb = basis.vector();
    let data = offset.data.chunks(offset.dim.max(1)).flat_map(|row| row.iter().zip(&nb).map(|(o, b)| o + b)).collect();
    Ok(ExtendedLatent { layers: offset.layers, dim: offset.dim, data })
}

/// The W+ argument `w + n_a` fed to the synthesis network.
pub fn apply_edit_latent(w: &LatentCode, adjusted: &ExtendedLatent) -> Result<ExtendedLatent> {
    if w.dim() != adjusted.dim {
        return Err(Error::ShapeMismatch(format!("w dim {} vs n_a dim {}", w.dim(), adjusted.dim)));
    }
    let data = adjusted
        .data
        .chunks(adjusted.dim.max(1))
        .flat_map(|row| row.iter().zip(&w.values).map(|(a, w)| w + a))
        .collect();
    Ok(ExtendedLatent { layers: adjusted.layers, dim: adjusted.dim, data })
}
