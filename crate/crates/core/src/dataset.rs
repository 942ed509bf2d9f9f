//! Slide manifest, patient-level splits, instance dropout and bag construction.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mil::{Bag, BiopsyLabel, MAX_BAG_SIZE};
use crate::seed::rng_for;
use crate::tiling::{RegionLabel, TileRecord};

pub const TEST_FRACTION: f64 = 0.30;
pub const NUM_FOLDS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub slide_id: String,
    pub patient_id: String,
    pub biopsy_label: BiopsyLabel,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation_path: Option<String>,
}

/// Reads a JSONL manifest and checks slide ids are unique.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let records: Vec<ManifestRecord> = read_jsonl(path)?;
    validate_manifest(&records)?;
    Ok(records)
}

pub fn validate_manifest(records: &[ManifestRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        if r.patient_id.is_empty() {
            return Err(Error::contract(format!("slide '{}' has no patient", r.slide_id)));
        }
        if !seen.insert(r.slide_id.as_str()) {
            return Err(Error::contract(format!("duplicate slide_id '{}' in manifest", r.slide_id)));
        }
    }
    Ok(())
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let file = std::fs::File::open(path.as_ref())?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::contract(format!("{}:{}: {e}", path.as_ref().display(), i + 1))
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// One label per patient: malignant if any of their slides is.
pub fn patients_from_manifest(records: &[ManifestRecord]) -> Vec<(String, BiopsyLabel)> {
    let mut by_patient: BTreeMap<&str, BiopsyLabel> = BTreeMap::new();
    for r in records {
        let e = by_patient.entry(&r.patient_id).or_insert(r.biopsy_label);
        if r.biopsy_label.is_positive() {
            *e = BiopsyLabel::Malignant;
        }
    }
    by_patient.into_iter().map(|(p, l)| (p.to_string(), l)).collect()
}

/// Held-out test patients plus cross-validation folds over the rest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub seed: u64,
    pub test_patients: Vec<String>,
    pub folds: Vec<Vec<String>>,
}

/// Which side of a split a patient falls on for a given validation fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Train,
    Validation,
    Test,
}

impl FoldSplit {
    pub fn side(&self, patient: &str, validation_fold: usize) -> Option<Side> {
        if self.test_patients.iter().any(|p| p == patient) {
            return Some(Side::Test);
        }
        let fold = self.folds.iter().position(|f| f.iter().any(|p| p == patient))?;
        Some(if fold == validation_fold { Side::Validation } else { Side::Train })
    }

    pub fn train_patients(&self, validation_fold: usize) -> BTreeSet<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != validation_fold)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }

    pub fn validation_patients(&self, validation_fold: usize) -> BTreeSet<String> {
        self.folds.get(validation_fold).into_iter().flatten().cloned().collect()
    }
}

/// Patient-level split: `round(0.3·n)` test patients and four disjoint
/// folds over the remainder, stratified by label, deterministic per seed.
pub fn patient_level_split(patients: &[(String, BiopsyLabel)], seed: u64) -> Result<FoldSplit> {
    let mut unique: BTreeMap<&str, BiopsyLabel> = BTreeMap::new();
    for (p, l) in patients {
        if let Some(prev) = unique.insert(p, *l) {
            if prev != *l {
                return Err(Error::contract(format!("patient '{p}' listed with two labels")));
            }
        }
    }
    let n = unique.len();
    if n < NUM_FOLDS + 1 {
        return Err(Error::contract(format!(
            "patient-level split needs at least {} patients, got {n}",
            NUM_FOLDS + 1
        )));
    }
    let mut rng = rng_for(seed, "patient_split", 0);
    let mut malignant: Vec<String> = Vec::new();
    let mut benign: Vec<String> = Vec::new();
    for (p, l) in &unique {
        match l {
            BiopsyLabel::Malignant => malignant.push(p.to_string()),
            BiopsyLabel::Benign => benign.push(p.to_string()),
        }
    }
    malignant.shuffle(&mut rng);
    benign.shuffle(&mut rng);

    let n_test = (TEST_FRACTION * n as f64).round() as usize;
    let mut test_mal = ((n_test * malignant.len()) as f64 / n as f64).round() as usize;
    test_mal = test_mal.min(malignant.len()).max(n_test.saturating_sub(benign.len()));
    let test_ben = n_test - test_mal;

    let mut test_patients: Vec<String> = malignant[..test_mal].to_vec();
    test_patients.extend_from_slice(&benign[..test_ben]);
    test_patients.sort();

    let mut folds = vec![Vec::new(); NUM_FOLDS];
    let rest = malignant[test_mal..].iter().chain(&benign[test_ben..]);
    for (i, p) in rest.enumerate() {
        folds[i % NUM_FOLDS].push(p.clone());
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(FoldSplit {
        seed,
        test_patients,
        folds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    /// Every instance is used.
    Eval,
}

/// Keep probability for non-tumor instances, `min(1, N_tumor / N_non_tumor)`.
pub fn dropout_keep_probability(n_tumor: usize, n_non_tumor: usize) -> f64 {
    if n_non_tumor == 0 {
        1.0
    } else {
        (n_tumor as f64 / n_non_tumor as f64).min(1.0)
    }
}

/// Indices kept this epoch: all tumor instances, and each non-tumor one
/// independently with [`dropout_keep_probability`]. Redrawn per epoch.
pub fn instance_dropout_indices(is_tumor: &[bool], seed: u64, epoch: u64, mode: DropoutMode) -> Vec<usize> {
    if mode == DropoutMode::Eval {
        return (0..is_tumor.len()).collect();
    }
    let n_tumor = is_tumor.iter().filter(|&&t| t).count();
    let p = dropout_keep_probability(n_tumor, is_tumor.len() - n_tumor);
    let mut rng = rng_for(seed, "instance_dropout", epoch);
    is_tumor
        .iter()
        .enumerate()
        .filter(|(_, &t)| t || p >= 1.0 || rng.random::<f64>() < p)
        .map(|(i, _)| i)
        .collect()
}

/// [`instance_dropout_indices`] over tile records.
pub fn instance_dropout(tiles: &[TileRecord], seed: u64, epoch: u64, mode: DropoutMode) -> Vec<TileRecord> {
    let is_tumor: Vec<bool> = tiles.iter().map(|t| t.region_label == RegionLabel::Tumor).collect();
    instance_dropout_indices(&is_tumor, seed, epoch, mode)
        .into_iter()
        .map(|i| tiles[i].clone())
        .collect()
}

/// Builds a bag from a slide's ROI tiles, sampling `cap` of them without
/// replacement when there are more. Selected tiles keep their input order.
pub fn build_bag(
    slide_id: &str,
    roi_tiles: &[TileRecord],
    label: BiopsyLabel,
    cap: usize,
    seed: u64,
) -> Result<Bag<TileRecord>> {
    if cap == 0 || cap > MAX_BAG_SIZE {
        return Err(Error::config(format!("bag cap {cap} must be in 1..={MAX_BAG_SIZE}")));
    }
    let mut seen = HashSet::new();
    let unique: Vec<&TileRecord> = roi_tiles.iter().filter(|t| seen.insert(t.tile_id())).collect();
    if unique.is_empty() {
        return Err(Error::contract(format!(
            "slide '{slide_id}' has no ROI tiles and cannot be bagged"
        )));
    }
    let chosen: Vec<&TileRecord> = if unique.len() > cap {
        let mut rng = rng_for(seed, &format!("bag:{slide_id}"), 0);
        let mut idx = index::sample(&mut rng, unique.len(), cap).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| unique[i]).collect()
    } else {
        unique
    };
    let ids = chosen.iter().map(|t| t.tile_id()).collect();
    Bag::new(slide_id, chosen.into_iter().cloned().collect(), label, ids)
}
