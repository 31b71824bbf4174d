//! Volumes, HU normalization, patient-level splits, patching and phantoms.

mod dataset;
mod phantom;
mod split;
mod volume;

pub use dataset::{Dataset, DatasetManifest, PatchPair, PatientPair};
pub use phantom::{generate_phantom_patient, DoseParams};
pub use split::{assign_splits, Split, SplitAssignment, SplitFractions, SplitManifest};
pub use volume::{import_raw_volume, read_volume, write_volume, RawMeta, VOLUME_MAGIC, VOLUME_VERSION};

#[cfg(test)]
mod tests;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HU_MIN: f64 = -1024.0;
pub const HU_MAX: f64 = 3072.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dose {
    Low,
    Normal,
}

impl Dose {
    pub(crate) fn code(self) -> u8 {
        match self {
            Dose::Low => 0,
            Dose::Normal => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dose::Low),
            1 => Some(Dose::Normal),
            _ => None,
        }
    }
}

impl fmt::Display for Dose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dose::Low => "low",
            Dose::Normal => "normal",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Phantom,
    Imported,
}

/// One patient's slice stack at one dose, values in `[0, 1]`, slices in acquisition order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientVolume {
    pub patient_id: String,
    /// `[S, 1, H, W]`
    pub slices: Tensor,
    pub dose: Dose,
    pub provenance: Provenance,
}

impl PatientVolume {
    pub fn new(patient_id: impl Into<String>, slices: Tensor, dose: Dose, provenance: Provenance) -> Result<Self> {
        let (_, c, _, _) = slices.dims4()?;
        if c != 1 {
            return Err(Error::shape(format!("volume slices must be single-channel, got {c}")));
        }
        if let Some(v) = slices.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("volume value {v} outside [0, 1]")));
        }
        Ok(PatientVolume { patient_id: patient_id.into(), slices, dose, provenance })
    }

    pub fn n_slices(&self) -> usize {
        self.slices.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.slices.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.slices.shape()[3]
    }

    /// `[1, 1, H, W]` slice.
    pub fn slice(&self, index: usize) -> Result<Tensor> {
        self.slices.select(index)
    }
}

/// Aligned low/normal-dose slices of one patient at one acquisition index.
#[derive(Clone, Debug, PartialEq)]
pub struct SlicePair {
    pub patient_id: String,
    pub index: usize,
    /// `[1, 1, H, W]`
    pub ldct: Tensor,
    /// `[1, 1, H, W]`
    pub ndct: Tensor,
}

/// Maps Hounsfield units onto `[0, 1]` via `clamp((v + 1024) / 4096, 0, 1)`.
pub fn normalize_hu(raw: &Tensor) -> Tensor {
    raw.map(normalize_hu_value)
}

pub fn normalize_hu_value(v: f64) -> f64 {
    ((v - HU_MIN) / (HU_MAX - HU_MIN)).clamp(0.0, 1.0)
}

/// Top-left corners of every full patch, row-major; trailing margins are dropped.
pub fn patch_anchors(height: usize, width: usize, patch_size: usize, patch_skip: usize) -> Result<Vec<(usize, usize)>> {
    if patch_skip == 0 {
        return Err(Error::invalid("patch_skip must be at least 1"));
    }
    if patch_size == 0 || patch_size > height || patch_size > width {
        return Err(Error::invalid(format!(
            "patch size {patch_size} does not fit a {height}x{width} image"
        )));
    }
    let rows = (0..=height - patch_size).step_by(patch_skip);
    Ok(rows
        .flat_map(|r| (0..=width - patch_size).step_by(patch_skip).map(move |c| (r, c)))
        .collect())
}

pub(crate) fn crop(slice: &Tensor, row: usize, col: usize, size: usize) -> Tensor {
    let w = slice.shape()[3];
    let d = slice.data();
    let mut out = Vec::with_capacity(size * size);
    for r in row..row + size {
        out.extend_from_slice(&d[r * w + col..r * w + col + size]);
    }
    Tensor::new(&[1, 1, size, size], out).expect("patch extents")
}

/// All patches of every slice, ordered by slice then anchor.
pub fn extract_patches(vol: &PatientVolume, patch_size: usize, patch_skip: usize) -> Result<Vec<Tensor>> {
    let anchors = patch_anchors(vol.height(), vol.width(), patch_size, patch_skip)?;
    let mut out = Vec::with_capacity(anchors.len() * vol.n_slices());
    for s in 0..vol.n_slices() {
        let slice = vol.slice(s)?;
        out.extend(anchors.iter().map(|&(r, c)| crop(&slice, r, c, patch_size)));
    }
    Ok(out)
}
