//! Binary volume storage and raw-volume import.
//!
//! A stored volume is: magic `PVOL`, version `u32`, patient id (`u32` length +
//! UTF-8), dose `u8` (0 low, 1 normal), `S`, `H`, `W` as `u32`, then the
//! `f64` payload, everything little-endian and row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{normalize_hu, Dose, PatientVolume, Provenance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &[u8; 4] = b"PVOL";
pub const VOLUME_VERSION: u32 = 1;

pub fn encode_volume(vol: &PatientVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + vol.patient_id.len() + vol.slices.numel() * 8);
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    out.extend_from_slice(&(vol.patient_id.len() as u32).to_le_bytes());
    out.extend_from_slice(vol.patient_id.as_bytes());
    out.push(vol.dose.code());
    for e in [vol.n_slices(), vol.height(), vol.width()] {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in vol.slices.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> std::result::Result<PatientVolume, String> {
    let mut pos = 0;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        let end = pos + n;
        if end > bytes.len() {
            return Err(format!("truncated at byte {pos}"));
        }
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(4)? != VOLUME_MAGIC {
        return Err("bad magic".into());
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != VOLUME_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let id_len = u32_at(take(4)?) as usize;
    let patient_id = std::str::from_utf8(take(id_len)?).map_err(|e| e.to_string())?.to_owned();
    let dose_code = take(1)?[0];
    let dose = Dose::from_code(dose_code).ok_or_else(|| format!("unknown dose code {dose_code}"))?;
    let s = u32_at(take(4)?) as usize;
    let h = u32_at(take(4)?) as usize;
    let w = u32_at(take(4)?) as usize;
    let n = s * h * w;
    let data = take(n * 8)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - pos));
    }
    let slices = Tensor::new(&[s, 1, h, w], data).map_err(|e| e.to_string())?;
    PatientVolume::new(patient_id, slices, dose, Provenance::Imported).map_err(|e| e.to_string())
}

pub fn write_volume(path: &Path, vol: &PatientVolume) -> Result<()> {
    fs::write(path, encode_volume(vol))?;
    Ok(())
}

/// Reads a stored volume. Provenance is not part of the binary layout and is
/// reported as [`Provenance::Imported`]; dataset manifests restore it.
pub fn read_volume(path: &Path) -> Result<PatientVolume> {
    let bytes = fs::read(path)?;
    decode_volume(&bytes).map_err(|msg| Error::Format { path: path.to_owned(), msg })
}

/// Sidecar describing a raw little-endian slice stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawMeta {
    pub patient_id: String,
    pub dose: Dose,
    /// `[S, H, W]`
    pub extents: [usize; 3],
    /// One of `float32`, `float64`, `int16`, `uint16`.
    pub dtype: String,
    pub values_are_hu: bool,
}

fn element_size(dtype: &str) -> Option<usize> {
    match dtype {
        "float32" => Some(4),
        "float64" => Some(8),
        "int16" | "uint16" => Some(2),
        _ => None,
    }
}

fn decode_element(dtype: &str, b: &[u8]) -> f64 {
    match dtype {
        "float32" => f32::from_le_bytes(b.try_into().unwrap()) as f64,
        "float64" => f64::from_le_bytes(b.try_into().unwrap()),
        "int16" => i16::from_le_bytes(b.try_into().unwrap()) as f64,
        "uint16" => u16::from_le_bytes(b.try_into().unwrap()) as f64,
        _ => unreachable!("dtype validated"),
    }
}

/// Imports a raw stack described by a JSON [`RawMeta`] file.
///
/// HU data is normalized; already-normalized data must lie in `[0, 1]`.
pub fn import_raw_volume(data_file: &Path, meta_file: &Path) -> Result<PatientVolume> {
    let meta: RawMeta = serde_json::from_slice(&fs::read(meta_file)?)?;
    let size = element_size(&meta.dtype).ok_or_else(|| Error::Format {
        path: meta_file.to_owned(),
        msg: format!("unknown dtype `{}`", meta.dtype),
    })?;
    let bytes = fs::read(data_file)?;
    let [s, h, w] = meta.extents;
    let expected = s * h * w * size;
    if bytes.len() != expected {
        return Err(Error::Format {
            path: data_file.to_owned(),
            msg: format!(
                "extents {:?} of {} need {expected} bytes, payload has {}",
                meta.extents,
                meta.dtype,
                bytes.len()
            ),
        });
    }
    let values = bytes.chunks_exact(size).map(|c| decode_element(&meta.dtype, c)).collect();
    let raw = Tensor::new(&[s, 1, h, w], values)?;
    let slices = if meta.values_are_hu {
        normalize_hu(&raw)
    } else {
        if let Some(v) = raw.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format {
                path: data_file.to_owned(),
                msg: format!("value {v} outside [0, 1] in a volume declared as normalized"),
            });
        }
        raw
    };
    PatientVolume::new(meta.patient_id, slices, meta.dose, Provenance::Imported)
}
