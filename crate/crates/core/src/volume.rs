//! Dense grid containers: scalar volumes and displacement fields.
//!
//! A [`Volume`] stores a channel-first scalar grid (`C × spatial...`) with
//! per-axis physical spacing in millimetres. A [`DisplacementField`] stores a
//! per-voxel displacement vector in **voxel units**; physical spacing is
//! metadata only and never enters the warping arithmetic.

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

/// Scalar grid (image, mask or score map) with spacing metadata.
///
/// Layout is channel-first: `data.shape() == [C, z, y, x]` in 3-D or
/// `[C, y, x]` in 2-D. Most volumes are single-channel; the network input
/// stack uses three channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: ArrayD<f64>,
    spacing: Vec<f64>,
    label: bool,
}

impl Volume {
    /// Wraps a channel-first array. `spacing` has one entry per spatial axis.
    pub fn new(data: ArrayD<f64>, spacing: Vec<f64>, label: bool) -> Result<Self> {
        if data.ndim() < 2 {
            return Err(Error::Shape(format!(
                "volume needs a channel axis plus at least one spatial axis, got {} axes",
                data.ndim()
            )));
        }
        let spatial = &data.shape()[1..];
        if spatial.len() != spacing.len() {
            return Err(Error::Shape(format!(
                "{} spatial axes but {} spacing entries",
                spatial.len(),
                spacing.len()
            )));
        }
        if spatial.iter().any(|&e| e == 0) || data.shape()[0] == 0 {
            return Err(Error::Shape(format!(
                "all extents must be >= 1, got {:?}",
                data.shape()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain(format!(
                "spacing components must be positive and finite, got {spacing:?}"
            )));
        }
        if label && data.iter().any(|v| v.fract() != 0.0 || !v.is_finite()) {
            return Err(Error::Domain(
                "label volume contains non-integer values".into(),
            ));
        }
        Ok(Volume {
            data,
            spacing,
            label,
        })
    }

    /// Single-channel scalar volume with unit spacing.
    pub fn scalar(data: ArrayD<f64>) -> Result<Self> {
        let mut shape = vec![1usize];
        shape.extend_from_slice(data.shape());
        let spacing = vec![1.0; data.ndim()];
        let data = data
            .into_shape_with_order(IxDyn(&shape))
            .map_err(|e| Error::Shape(e.to_string()))?;
        Volume::new(data, spacing, false)
    }

    /// Single-channel integer label volume with unit spacing.
    pub fn label(data: ArrayD<f64>) -> Result<Self> {
        let mut v = Volume::scalar(data)?;
        if v.data.iter().any(|x| x.fract() != 0.0 || !x.is_finite()) {
            return Err(Error::Domain(
                "label volume contains non-integer values".into(),
            ));
        }
        v.label = true;
        Ok(v)
    }

    /// All-zero single-channel volume of the given spatial extent.
    pub fn zeros(extent: &[usize]) -> Self {
        let mut shape = vec![1usize];
        shape.extend_from_slice(extent);
        Volume {
            data: ArrayD::zeros(IxDyn(&shape)),
            spacing: vec![1.0; extent.len()],
            label: false,
        }
    }

    pub fn data(&self) -> &ArrayD<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut ArrayD<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> ArrayD<f64> {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    /// Spatial extent, excluding the channel axis.
    pub fn extent(&self) -> &[usize] {
        &self.data.shape()[1..]
    }

    /// Number of spatial dimensions.
    pub fn ndim_spatial(&self) -> usize {
        self.data.ndim() - 1
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn set_spacing(&mut self, spacing: Vec<f64>) -> Result<()> {
        if spacing.len() != self.ndim_spatial() {
            return Err(Error::Shape(format!(
                "{} spatial axes but {} spacing entries",
                self.ndim_spatial(),
                spacing.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain(format!(
                "spacing components must be positive and finite, got {spacing:?}"
            )));
        }
        self.spacing = spacing;
        Ok(())
    }

    pub fn is_label(&self) -> bool {
        self.label
    }

    /// Replaces the payload, keeping metadata. The new array must keep rank.
    pub fn with_data(&self, data: ArrayD<f64>) -> Result<Self> {
        Volume::new(data, self.spacing.clone(), self.label)
    }
}

/// Per-voxel displacement vectors in voxel units.
///
/// Shape is `[D, spatial...]` where `D == spatial.len()`; component `c`
/// displaces along spatial axis `c`. Warping samples the moving image at
/// `x + phi(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    vectors: ArrayD<f64>,
}

impl DisplacementField {
    pub fn new(vectors: ArrayD<f64>) -> Result<Self> {
        if vectors.ndim() < 2 {
            return Err(Error::Shape(format!(
                "displacement field needs a component axis plus spatial axes, got {} axes",
                vectors.ndim()
            )));
        }
        let d = vectors.ndim() - 1;
        if vectors.shape()[0] != d {
            return Err(Error::Shape(format!(
                "field with {} spatial axes must have {} components, got {}",
                d,
                d,
                vectors.shape()[0]
            )));
        }
        if vectors.shape()[1..].iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!(
                "all extents must be >= 1, got {:?}",
                vectors.shape()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(
                "displacement field contains non-finite values".into(),
            ));
        }
        Ok(DisplacementField { vectors })
    }

    /// Identity deformation (all-zero displacements) for the given extent.
    pub fn zeros(extent: &[usize]) -> Self {
        let mut shape = vec![extent.len()];
        shape.extend_from_slice(extent);
        DisplacementField {
            vectors: ArrayD::zeros(IxDyn(&shape)),
        }
    }

    pub fn vectors(&self) -> &ArrayD<f64> {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut ArrayD<f64> {
        &mut self.vectors
    }

    pub fn into_vectors(self) -> ArrayD<f64> {
        self.vectors
    }

    /// Spatial extent, excluding the component axis.
    pub fn extent(&self) -> &[usize] {
        &self.vectors.shape()[1..]
    }

    /// Spatial dimensionality D.
    pub fn ndim_spatial(&self) -> usize {
        self.vectors.ndim() - 1
    }
}
