use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.7, validation: 0.1, test: 0.2 }
    }
}

/// On-disk split: split name → patient ids.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Patient-level assignment to train, validation and test.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitAssignment {
    assignment: BTreeMap<String, Split>,
}

impl SplitAssignment {
    /// Builds an assignment from an explicit manifest.
    ///
    /// A patient listed in two subsets is a leakage error; an empty subset is a config error.
    pub fn from_manifest(manifest: &SplitManifest) -> Result<Self> {
        let mut assignment = BTreeMap::new();
        for (split, ids) in [
            (Split::Train, &manifest.train),
            (Split::Validation, &manifest.validation),
            (Split::Test, &manifest.test),
        ] {
            if ids.is_empty() {
                return Err(Error::Config(format!("split `{split}` has no patients")));
            }
            for id in ids {
                if let Some(prev) = assignment.insert(id.clone(), split) {
                    return Err(Error::Leakage(format!(
                        "patient `{id}` appears in both `{prev}` and `{split}`"
                    )));
                }
            }
        }
        Ok(SplitAssignment { assignment })
    }

    pub fn to_manifest(&self) -> SplitManifest {
        let mut m = SplitManifest::default();
        for (id, split) in &self.assignment {
            match split {
                Split::Train => m.train.push(id.clone()),
                Split::Validation => m.validation.push(id.clone()),
                Split::Test => m.test.push(id.clone()),
            }
        }
        m
    }

    pub fn split_of(&self, patient_id: &str) -> Option<Split> {
        self.assignment.get(patient_id).copied()
    }

    /// Patient ids in `split`, sorted.
    pub fn patients(&self, split: Split) -> Vec<&str> {
        self.assignment.iter().filter(|(_, &s)| s == split).map(|(id, _)| id.as_str()).collect()
    }

    /// Re-checks that the three subsets are non-empty and pairwise disjoint.
    pub fn assert_no_leakage(&self) -> Result<()> {
        let sets: Vec<BTreeSet<&str>> = [Split::Train, Split::Validation, Split::Test]
            .iter()
            .map(|&s| self.patients(s).into_iter().collect())
            .collect();
        for (i, a) in sets.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::Config("a split has no patients".into()));
            }
            for b in &sets[i + 1..] {
                if let Some(id) = a.intersection(b).next() {
                    return Err(Error::Leakage(format!("patient `{id}` is in two splits")));
                }
            }
        }
        Ok(())
    }
}

/// Seeded patient-level split. Validation and test get at least one patient each,
/// rounded from their fractions; training takes the rest.
pub fn assign_splits(patients: &[String], fractions: SplitFractions, seed: u64) -> Result<SplitAssignment> {
    let n = patients.len();
    if n < 3 {
        return Err(Error::invalid(format!("need at least 3 patients to split, got {n}")));
    }
    let unique: BTreeSet<&String> = patients.iter().collect();
    if unique.len() != n {
        return Err(Error::invalid("duplicate patient ids"));
    }
    let total = fractions.train + fractions.validation + fractions.test;
    if !(total > 0.0) || fractions.train < 0.0 || fractions.validation < 0.0 || fractions.test < 0.0 {
        return Err(Error::invalid("split fractions must be non-negative with a positive sum"));
    }
    let count = |f: f64| (((f / total) * n as f64).round() as usize).max(1);
    let n_val = count(fractions.validation);
    let n_test = count(fractions.test).min(n - n_val - 1);
    let mut order: Vec<String> = unique.into_iter().cloned().collect();
    order.shuffle(&mut seeded_rng(seed));

    let manifest = SplitManifest {
        validation: order[..n_val].to_vec(),
        test: order[n_val..n_val + n_test].to_vec(),
        train: order[n_val + n_test..].to_vec(),
    };
    SplitAssignment::from_manifest(&manifest)
}
