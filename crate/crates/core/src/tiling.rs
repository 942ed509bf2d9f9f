//! Tissue masking and overlapping patch grids over a working-level slide raster.

use std::fmt;

use image::{imageops, GrayImage, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_PATCH: usize = 512;
pub const DEFAULT_OVERLAP: f64 = 0.5;
pub const DEFAULT_MIN_TISSUE: f64 = 0.20;
/// Share of a tile's tissue that must lie inside the annotation for a tumor label.
pub const TUMOR_LABEL_FRACTION: f64 = 0.5;

/// A slide already decoded at the working resolution.
#[derive(Debug, Clone)]
pub struct SlideRaster {
    pub slide_id: String,
    pub pixels: RgbImage,
    /// Scanner magnification tag, e.g. `"40x"`.
    pub source_magnification: String,
    /// Factor between the scan and this raster (4 for 40x → 10x).
    pub downsample_factor: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionLabel {
    Tumor,
    NonTumor,
    Unlabeled,
}

impl fmt::Display for RegionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegionLabel::Tumor => "tumor",
            RegionLabel::NonTumor => "non_tumor",
            RegionLabel::Unlabeled => "unlabeled",
        })
    }
}

/// One line of the tile index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub slide_id: String,
    pub row: usize,
    pub col: usize,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub tissue_fraction: f64,
    pub region_label: RegionLabel,
}

impl TileRecord {
    /// `{slide_id}_r{row}_c{col}`, also the tile image's file stem.
    pub fn tile_id(&self) -> String {
        format!("{}_r{}_c{}", self.slide_id, self.row, self.col)
    }

    pub fn file_name(&self) -> String {
        format!("{}.png", self.tile_id())
    }

    pub fn rect(&self) -> TileRect {
        TileRect {
            x: self.x,
            y: self.y,
            size: self.size,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        self.rect().center()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileRect {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl TileRect {
    pub fn center(&self) -> (f64, f64) {
        (self.x as f64 + self.size as f64 / 2.0, self.y as f64 + self.size as f64 / 2.0)
    }
}

/// Binary tissue mask with the Otsu threshold that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMask {
    pub width: usize,
    pub height: usize,
    pub foreground: Vec<bool>,
    pub otsu_threshold: u8,
}

impl TissueMask {
    pub fn from_magenta(magenta: &GrayImage) -> Self {
        let mut hist = [0u64; 256];
        for p in magenta.pixels() {
            hist[p.0[0] as usize] += 1;
        }
        let t = otsu_threshold(&hist).expect("non-empty image");
        TissueMask {
            width: magenta.width() as usize,
            height: magenta.height() as usize,
            foreground: magenta.pixels().map(|p| p.0[0] > t).collect(),
            otsu_threshold: t,
        }
    }

    pub fn from_rgb(rgb: &RgbImage) -> Self {
        Self::from_magenta(&magenta_channel(rgb))
    }

    fn count_in(&self, r: TileRect) -> usize {
        (r.y..r.y + r.size)
            .map(|y| {
                self.foreground[y * self.width + r.x..y * self.width + r.x + r.size]
                    .iter()
                    .filter(|&&f| f)
                    .count()
            })
            .sum()
    }
}

/// CMY magenta component, `255 − G`.
pub fn magenta_channel(rgb: &RgbImage) -> GrayImage {
    let data = rgb.pixels().map(|p| 255 - p.0[1]).collect();
    GrayImage::from_raw(rgb.width(), rgb.height(), data).expect("same dims")
}

fn between_class_variance(n0: u64, s0: u64, n1: u64, s1: u64) -> f64 {
    let total = (n0 + n1) as f64;
    let (w0, w1) = (n0 as f64 / total, n1 as f64 / total);
    let (m0, m1) = (s0 as f64 / n0 as f64, s1 as f64 / n1 as f64);
    w0 * w1 * (m0 - m1) * (m0 - m1)
}

/// Otsu's threshold over a 256-bin histogram.
///
/// Background is `value ≤ t`, foreground `value > t`; `t` maximises the
/// between-class variance `ω₀ω₁(μ₀−μ₁)²`, ties resolved to the smallest `t`.
/// When all mass sits in one bin that bin is returned (foreground empty).
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<u8> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return Err(Error::contract("otsu_threshold: empty histogram"));
    }
    let occupied: Vec<usize> = (0..256).filter(|&i| hist[i] > 0).collect();
    if occupied.len() == 1 {
        return Ok(occupied[0] as u8);
    }
    let total_sum: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best = (0u8, f64::NEG_INFINITY);
    for t in 0..255usize {
        n0 += hist[t];
        s0 += t as u64 * hist[t];
        let n1 = total - n0;
        let var = if n0 == 0 || n1 == 0 {
            0.0
        } else {
            between_class_variance(n0, s0, n1, total_sum - s0)
        };
        if var > best.1 {
            best = (t as u8, var);
        }
    }
    Ok(best.0)
}

/// Offsets along one axis: multiples of the stride, plus a final position
/// clamped to `dim − patch` when the grid would stop short of the edge.
pub fn axis_positions(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 0;
    while p + patch <= dim {
        out.push(p);
        p += stride;
    }
    if let Some(&last) = out.last() {
        if last + patch < dim {
            out.push(dim - patch);
        }
    }
    out
}

pub fn stride_for(patch: usize, overlap: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::contract(format!("overlap {overlap} must be in [0, 1)")));
    }
    let stride = (patch as f64 * (1.0 - overlap)).round() as usize;
    if stride == 0 {
        return Err(Error::contract(format!("overlap {overlap} leaves a zero stride")));
    }
    Ok(stride)
}

/// Top-left corners of an overlapping grid, row-major (`y` outer).
pub fn tile_grid(width: usize, height: usize, patch: usize, overlap: f64) -> Result<Vec<(usize, usize)>> {
    if patch == 0 || width < patch || height < patch {
        return Err(Error::contract(format!(
            "image {width}×{height} is smaller than the {patch}px patch"
        )));
    }
    let stride = stride_for(patch, overlap)?;
    let xs = axis_positions(width, patch, stride);
    let ys = axis_positions(height, patch, stride);
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect())
}

/// Share of foreground pixels inside `rect`.
pub fn tissue_fraction(rect: TileRect, mask: &TissueMask) -> Result<f64> {
    if rect.size == 0 || rect.x + rect.size > mask.width || rect.y + rect.size > mask.height {
        return Err(Error::contract(format!(
            "tile {rect:?} outside {}×{} mask",
            mask.width, mask.height
        )));
    }
    Ok(mask.count_in(rect) as f64 / (rect.size * rect.size) as f64)
}

/// Keep rule: tiles with less than `min_tissue` tissue are excluded.
pub fn keep_tile(fraction: f64, min_tissue: f64) -> bool {
    fraction >= min_tissue
}

/// Tumor iff at least half of the tile's tissue pixels are annotated
/// (nonzero); no annotation gives `Unlabeled`.
pub fn assign_region_label(
    rect: TileRect,
    mask: &TissueMask,
    annotation: Option<&GrayImage>,
) -> Result<RegionLabel> {
    let Some(ann) = annotation else {
        return Ok(RegionLabel::Unlabeled);
    };
    if ann.width() as usize != mask.width || ann.height() as usize != mask.height {
        return Err(Error::contract(format!(
            "annotation {}×{} is not aligned with the {}×{} slide",
            ann.width(),
            ann.height(),
            mask.width,
            mask.height
        )));
    }
    let (mut tissue, mut inside) = (0usize, 0usize);
    for y in rect.y..rect.y + rect.size {
        for x in rect.x..rect.x + rect.size {
            if mask.foreground[y * mask.width + x] {
                tissue += 1;
                if ann.get_pixel(x as u32, y as u32).0[0] != 0 {
                    inside += 1;
                }
            }
        }
    }
    if tissue > 0 && inside as f64 >= TUMOR_LABEL_FRACTION * tissue as f64 {
        Ok(RegionLabel::Tumor)
    } else {
        Ok(RegionLabel::NonTumor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TilingParams {
    pub patch: usize,
    pub overlap: f64,
    pub min_tissue: f64,
}

impl Default for TilingParams {
    fn default() -> Self {
        TilingParams {
            patch: DEFAULT_PATCH,
            overlap: DEFAULT_OVERLAP,
            min_tissue: DEFAULT_MIN_TISSUE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SlideTiling {
    pub mask: TissueMask,
    pub kept: Vec<TileRecord>,
    pub excluded: usize,
}

/// Masks a slide, lays the grid, filters by tissue and labels the kept tiles.
pub fn tile_slide(slide: &SlideRaster, annotation: Option<&GrayImage>, params: &TilingParams) -> Result<SlideTiling> {
    let (w, h) = (slide.pixels.width() as usize, slide.pixels.height() as usize);
    let mask = TissueMask::from_rgb(&slide.pixels);
    let stride = stride_for(params.patch, params.overlap)?;
    let xs = axis_positions(w, params.patch, stride);
    let ys = axis_positions(h, params.patch, stride);
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::contract(format!(
            "slide '{}' ({w}×{h}) is smaller than the {}px patch",
            slide.slide_id, params.patch
        )));
    }
    let cells: Vec<(usize, usize)> = (0..ys.len()).flat_map(|r| (0..xs.len()).map(move |c| (r, c))).collect();
    let evaluated = cells
        .par_iter()
        .map(|&(row, col)| {
            let rect = TileRect {
                x: xs[col],
                y: ys[row],
                size: params.patch,
            };
            let fraction = tissue_fraction(rect, &mask)?;
            if !keep_tile(fraction, params.min_tissue) {
                return Ok(None);
            }
            Ok(Some(TileRecord {
                slide_id: slide.slide_id.clone(),
                row,
                col,
                x: rect.x,
                y: rect.y,
                size: rect.size,
                tissue_fraction: fraction,
                region_label: assign_region_label(rect, &mask, annotation)?,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let kept: Vec<TileRecord> = evaluated.into_iter().flatten().collect();
    let excluded = cells.len() - kept.len();
    Ok(SlideTiling { mask, kept, excluded })
}

pub fn crop_tile(rgb: &RgbImage, rect: TileRect) -> RgbImage {
    imageops::crop_imm(rgb, rect.x as u32, rect.y as u32, rect.size as u32, rect.size as u32).to_image()
}

/// Bilinear (triangle-filter) resize to the network input, scaled to `[0,1]`.
pub fn tile_to_tensor(tile: &RgbImage, input_size: [usize; 3]) -> Result<Tensor> {
    let [h, w, d] = input_size;
    if d != 3 {
        return Err(Error::config(format!("RGB tiles need 3 input channels, network has {d}")));
    }
    let resized = if tile.width() as usize == w && tile.height() as usize == h {
        tile.clone()
    } else {
        imageops::resize(tile, w as u32, h as u32, imageops::FilterType::Triangle)
    };
    let data = resized.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    Tensor::new(&[h, w, 3], data)
}
