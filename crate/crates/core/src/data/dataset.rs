use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    assign_splits, crop, generate_phantom_patient, patch_anchors, read_volume, write_volume, Dose,
    DoseParams, PatientVolume, Provenance, SlicePair, Split, SplitAssignment, SplitFractions,
    SplitManifest,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_FILE: &str = "dataset.json";
pub const SPLITS_FILE: &str = "splits.json";

/// `dataset.json`: what a dataset directory contains and how it was made.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub patients: Vec<String>,
    pub provenance: Provenance,
    pub seed: Option<u64>,
    pub dose_params: Option<DoseParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientPair {
    pub patient_id: String,
    pub low: PatientVolume,
    pub normal: PatientVolume,
}

/// An aligned low/normal-dose training patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub patient_id: String,
    pub slice: usize,
    pub anchor: (usize, usize),
    /// `[1, 1, P, P]`
    pub ldct: Tensor,
    /// `[1, 1, P, P]`
    pub ndct: Tensor,
}

impl PatchPair {
    pub fn sample_id(&self) -> String {
        format!("{}:{}:{}:{}", self.patient_id, self.slice, self.anchor.0, self.anchor.1)
    }
}

/// Paired volumes for a set of patients plus their patient-level split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub patients: Vec<PatientPair>,
    pub splits: SplitAssignment,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, patients: Vec<PatientPair>, splits: SplitAssignment) -> Result<Self> {
        for p in &patients {
            if p.low.slices.shape() != p.normal.slices.shape() {
                return Err(Error::shape(format!(
                    "patient `{}`: low-dose {:?} and normal-dose {:?} stacks differ",
                    p.patient_id,
                    p.low.slices.shape(),
                    p.normal.slices.shape()
                )));
            }
            if splits.split_of(&p.patient_id).is_none() {
                return Err(Error::Config(format!("patient `{}` is not in any split", p.patient_id)));
            }
        }
        splits.assert_no_leakage()?;
        Ok(Dataset { manifest, patients, splits })
    }

    /// `n_patients` phantom patients `P00, P01, ...`, split 70/10/20 with `seed`.
    pub fn phantom(
        n_patients: usize,
        n_slices: usize,
        height: usize,
        width: usize,
        dose: DoseParams,
        seed: u64,
    ) -> Result<Self> {
        let ids: Vec<String> = (0..n_patients).map(|i| format!("P{i:02}")).collect();
        let patients = ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let patient_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
                let (low, normal) = generate_phantom_patient(id, patient_seed, n_slices, height, width, dose)?;
                Ok(PatientPair { patient_id: id.clone(), low, normal })
            })
            .collect::<Result<Vec<_>>>()?;
        let splits = assign_splits(&ids, SplitFractions::default(), seed)?;
        let manifest = DatasetManifest {
            patients: ids,
            provenance: Provenance::Phantom,
            seed: Some(seed),
            dose_params: Some(dose),
        };
        Dataset::new(manifest, patients, splits)
    }

    /// Writes `dataset.json`, `splits.json` and one `<id>_<dose>.pvol` per volume.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(DATASET_FILE), serde_json::to_vec_pretty(&self.manifest)?)?;
        fs::write(dir.join(SPLITS_FILE), serde_json::to_vec_pretty(&self.splits.to_manifest())?)?;
        for p in &self.patients {
            write_volume(&dir.join(volume_file(&p.patient_id, Dose::Low)), &p.low)?;
            write_volume(&dir.join(volume_file(&p.patient_id, Dose::Normal)), &p.normal)?;
        }
        Ok(())
    }

    /// Loads a dataset directory; `split_manifest` overrides its `splits.json`.
    pub fn load(dir: &Path, split_manifest: Option<&Path>) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(DATASET_FILE))?)?;
        let split_path = split_manifest.map(Path::to_path_buf).unwrap_or_else(|| dir.join(SPLITS_FILE));
        let splits: SplitManifest = serde_json::from_slice(&fs::read(&split_path)?)?;
        let splits = SplitAssignment::from_manifest(&splits)?;
        let patients = manifest
            .patients
            .iter()
            .map(|id| {
                let mut low = read_volume(&dir.join(volume_file(id, Dose::Low)))?;
                let mut normal = read_volume(&dir.join(volume_file(id, Dose::Normal)))?;
                low.provenance = manifest.provenance;
                normal.provenance = manifest.provenance;
                Ok(PatientPair { patient_id: id.clone(), low, normal })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(manifest, patients, splits)
    }

    fn in_split(&self, split: Split) -> impl Iterator<Item = &PatientPair> {
        let mut members: Vec<&PatientPair> =
            self.patients.iter().filter(|p| self.splits.split_of(&p.patient_id) == Some(split)).collect();
        members.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
        members.into_iter()
    }

    /// Full slices of `split`, ordered by patient id then slice index.
    pub fn slice_pairs(&self, split: Split) -> Result<Vec<SlicePair>> {
        let mut out = Vec::new();
        for p in self.in_split(split) {
            for index in 0..p.normal.n_slices() {
                out.push(SlicePair {
                    patient_id: p.patient_id.clone(),
                    index,
                    ldct: p.low.slice(index)?,
                    ndct: p.normal.slice(index)?,
                });
            }
        }
        Ok(out)
    }

    /// Aligned patches of `split`, ordered by patient, slice, then row-major anchor.
    pub fn patch_pairs(&self, split: Split, patch_size: usize, patch_skip: usize) -> Result<Vec<PatchPair>> {
        let mut out = Vec::new();
        for p in self.in_split(split) {
            let anchors = patch_anchors(p.normal.height(), p.normal.width(), patch_size, patch_skip)?;
            for slice in 0..p.normal.n_slices() {
                let (lo, hi) = (p.low.slice(slice)?, p.normal.slice(slice)?);
                for &(r, c) in &anchors {
                    out.push(PatchPair {
                        patient_id: p.patient_id.clone(),
                        slice,
                        anchor: (r, c),
                        ldct: crop(&lo, r, c, patch_size),
                        ndct: crop(&hi, r, c, patch_size),
                    });
                }
            }
        }
        Ok(out)
    }
}

pub fn volume_file(patient_id: &str, dose: Dose) -> String {
    format!("{patient_id}_{dose}.pvol")
}
