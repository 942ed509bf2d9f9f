//! File handoffs shared by the subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::{GrayImage, RgbImage};
use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use seamil::dataset::{read_jsonl, read_manifest, validate_manifest};
use seamil::mil::BiopsyLabel;
use seamil::tiling::tile_to_tensor;
use seamil::{Architecture, Checkpoint, ManifestRecord, RegionLabel, Tensor, TileRecord};

pub const TILE_INDEX: &str = "tiles.jsonl";
pub const TILE_DIR: &str = "tiles";

/// A manifest plus the directory its relative paths resolve against.
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub base: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let records = read_manifest(path).with_context(|| format!("reading manifest {}", path.display()))?;
        validate_manifest(&records)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { records, base })
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        self.base.join(p)
    }

    pub fn load_image(&self, r: &ManifestRecord) -> Result<RgbImage> {
        let path = self.resolve(&r.image_path);
        let img = image::open(&path).with_context(|| format!("slide {}: cannot read image {}", r.slide_id, path.display()))?;
        Ok(img.to_rgb8())
    }

    pub fn load_annotation(&self, r: &ManifestRecord) -> Result<Option<GrayImage>> {
        let Some(p) = &r.annotation_path else {
            return Ok(None);
        };
        let path = self.resolve(p);
        let img = image::open(&path)
            .with_context(|| format!("slide {}: cannot read annotation {}", r.slide_id, path.display()))?;
        Ok(Some(img.to_luma8()))
    }

    pub fn record(&self, slide_id: &str) -> Result<&ManifestRecord> {
        self.records
            .iter()
            .find(|r| r.slide_id == slide_id)
            .with_context(|| format!("slide {slide_id} is not in the manifest"))
    }
}

/// Tile index of a `tile` output directory, grouped by slide.
pub struct TileIndex {
    pub dir: PathBuf,
    pub by_slide: BTreeMap<String, Vec<TileRecord>>,
}

impl TileIndex {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(TILE_INDEX);
        let records: Vec<TileRecord> =
            read_jsonl(&path).with_context(|| format!("reading tile index {}", path.display()))?;
        let mut by_slide: BTreeMap<String, Vec<TileRecord>> = BTreeMap::new();
        for r in records {
            by_slide.entry(r.slide_id.clone()).or_default().push(r);
        }
        Ok(TileIndex {
            dir: dir.to_path_buf(),
            by_slide,
        })
    }

    pub fn slide(&self, slide_id: &str) -> &[TileRecord] {
        self.by_slide.get(slide_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn tile_path(&self, t: &TileRecord) -> PathBuf {
        tile_path(&self.dir, t)
    }

    pub fn load_tensor(&self, t: &TileRecord, input_size: [usize; 3]) -> Result<Tensor> {
        let path = self.tile_path(t);
        let img = image::open(&path).with_context(|| format!("tile {}: cannot read {}", t.tile_id(), path.display()))?;
        Ok(tile_to_tensor(&img.to_rgb8(), input_size)?)
    }

    /// Network inputs for `tiles`, decoded in parallel, in order.
    pub fn load_tensors(&self, tiles: &[TileRecord], input_size: [usize; 3]) -> Result<Vec<Tensor>> {
        tiles.par_iter().map(|t| self.load_tensor(t, input_size)).collect()
    }
}

pub fn tile_path(out_dir: &Path, t: &TileRecord) -> PathBuf {
    out_dir.join(TILE_DIR).join(&t.slide_id).join(t.file_name())
}

/// One row of the `infer-roi` CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiRow {
    pub slide_id: String,
    pub tile_id: String,
    pub x_center: f64,
    pub y_center: f64,
    pub p_tumor: f64,
    pub roi: bool,
    pub label: RegionLabel,
}

/// One row of the `infer-wsi` bag CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagRow {
    pub slide_id: String,
    pub patient_id: String,
    pub label: BiopsyLabel,
    pub probability: f64,
    pub prediction: BiopsyLabel,
    pub instances: usize,
}

/// One row of the `infer-wsi` attention CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub slide_id: String,
    pub tile_id: String,
    pub attention: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(rows)
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// ROI rows grouped by slide, in file order.
pub fn roi_by_slide(rows: Vec<RoiRow>) -> BTreeMap<String, Vec<RoiRow>> {
    let mut out: BTreeMap<String, Vec<RoiRow>> = BTreeMap::new();
    for r in rows {
        out.entry(r.slide_id.clone()).or_default().push(r);
    }
    out
}

/// Tile records of `slide_id` flagged as ROI in `rows`.
pub fn roi_tiles(index: &TileIndex, slide_id: &str, rows: &[RoiRow]) -> Result<Vec<TileRecord>> {
    let tiles = index.slide(slide_id);
    rows.iter()
        .filter(|r| r.roi)
        .map(|r| {
            tiles
                .iter()
                .find(|t| t.tile_id() == r.tile_id)
                .cloned()
                .with_context(|| format!("ROI tile {} is not in the tile index", r.tile_id))
        })
        .collect()
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Fails when explicit architecture flags disagree with the checkpoint.
pub fn check_architecture(ckpt: &Checkpoint, expected: Option<Architecture>) -> Result<()> {
    if let Some(arch) = expected {
        ckpt.check_architecture(&arch)?;
    }
    Ok(())
}

pub fn require_kind(ckpt: &Checkpoint, kind: seamil::ModelKind, path: &Path) -> Result<()> {
    if ckpt.model_kind != kind {
        bail!(seamil::Error::Config(format!(
            "{} holds a {:?} model, expected {kind:?}",
            path.display(),
            ckpt.model_kind
        )));
    }
    Ok(())
}
