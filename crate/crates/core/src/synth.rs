//! Synthetic H&E-like slides with known tumor regions.
//!
//! The slide is laid out on a grid of cells half a tile wide. A square tumor
//! zone sits in one corner, a one-cell ring of bare glass separates it from
//! normal tissue, and normal tissue fills the remaining cells. Because a tile
//! spans two cells, no tile ever mixes tumor with normal tissue, so tile labels
//! are clean. Malignant slides add a dark speckle hotspot near the slide
//! corner of the tumor zone, covering a minority of the tumor tiles (a single
//! tile when the zone is three cells wide or less).

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ManifestRecord;
use crate::error::{Error, Result};
use crate::mil::BiopsyLabel;
use crate::seed::rng_for;
use crate::tiling::{SlideRaster, TileRect, DEFAULT_PATCH};

const BACKGROUND: [f64; 3] = [246.0, 243.0, 247.0];
const NORMAL_BASE: [f64; 3] = [236.0, 132.0, 196.0];
const NORMAL_NUCLEUS: [f64; 3] = [140.0, 80.0, 165.0];
const TUMOR_BASE: [f64; 3] = [150.0, 62.0, 150.0];
const TUMOR_NUCLEUS: [f64; 3] = [62.0, 20.0, 100.0];
const SPECKLE_DOT: [f64; 3] = [18.0, 14.0, 24.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    /// Tile size the layout is designed for; cells are half of it.
    pub patch: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            width: 1536,
            height: 1536,
            patch: DEFAULT_PATCH,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let cell = self.patch / 2;
        if self.patch < 4 || self.patch % 2 != 0 {
            return Err(Error::config(format!("synthetic patch {} must be even and >= 4", self.patch)));
        }
        if self.width < 1024 || self.height < 1024 {
            return Err(Error::config(format!(
                "synthetic slides must be at least 1024x1024, got {}x{}",
                self.width, self.height
            )));
        }
        if self.width % cell != 0 || self.height % cell != 0 {
            return Err(Error::config(format!(
                "synthetic slide {}x{} is not a multiple of the {cell}px cell",
                self.width, self.height
            )));
        }
        if self.width / cell < 4 || self.height / cell < 4 {
            return Err(Error::config("synthetic slide needs at least 4x4 cells".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSlide {
    pub raster: SlideRaster,
    /// 255 where tissue is tumor.
    pub annotation: GrayImage,
    /// 255 where the speckle texture was drawn; all zero for benign slides.
    pub speckle: GrayImage,
    pub record: ManifestRecord,
}

impl SyntheticSlide {
    /// Whether the tile contains any speckle pixels.
    pub fn tile_has_speckle(&self, rect: TileRect) -> bool {
        let (w, h) = self.speckle.dimensions();
        let x1 = (rect.x + rect.size).min(w as usize);
        let y1 = (rect.y + rect.size).min(h as usize);
        (rect.y..y1).any(|y| (rect.x..x1).any(|x| self.speckle.get_pixel(x as u32, y as u32)[0] > 0))
    }
}

/// Smooth random field in roughly [-1, 1].
struct Field {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Field {
    fn new(rng: &mut impl Rng, n: usize, min_wavelength: f64, max_wavelength: f64) -> Self {
        let waves = (0..n)
            .map(|_| {
                let theta = rng.random::<f64>() * std::f64::consts::TAU;
                let k = std::f64::consts::TAU / rng.random_range(min_wavelength..max_wavelength);
                (k * theta.cos(), k * theta.sin(), rng.random::<f64>() * std::f64::consts::TAU, 1.0)
            })
            .collect();
        Field { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let s: f64 = self.waves.iter().map(|(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin()).sum();
        s / self.waves.len() as f64
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Zone {
    Tumor,
    Moat,
    Normal,
}

fn paint_disc(img: &mut [[f64; 3]], w: usize, h: usize, cx: f64, cy: f64, r: f64, color: [f64; 3], gate: impl Fn(usize) -> bool) {
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as usize).min(w - 1);
    let y1 = ((cy + r).ceil() as usize).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let i = y * w + x;
            if dx * dx + dy * dy <= r * r && gate(i) {
                img[i] = color;
            }
        }
    }
}

/// Side, in cells, of the corner square holding the speckle hotspot.
pub fn speckle_cells(zone_cells: usize) -> usize {
    zone_cells.div_ceil(3).max(1)
}

/// Generates one slide. Identical inputs give identical pixels.
pub fn generate_synthetic_slide(
    seed: u64,
    spec: &SyntheticSpec,
    slide_id: &str,
    patient_id: &str,
    label: BiopsyLabel,
) -> Result<SyntheticSlide> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let cell = spec.patch / 2;
    let (cells_x, cells_y) = (w / cell, h / cell);
    let mut rng = rng_for(seed, &format!("synth:{slide_id}"), 0);

    let zone_cells = (cells_x.min(cells_y) / 2).max(2);
    let right = rng.random::<bool>();
    let bottom = rng.random::<bool>();
    let zone_x0 = if right { cells_x - zone_cells } else { 0 };
    let zone_y0 = if bottom { cells_y - zone_cells } else { 0 };
    let zone_of = |cx: usize, cy: usize| -> Zone {
        let dx = if cx < zone_x0 { zone_x0 - cx } else { cx.saturating_sub(zone_x0 + zone_cells - 1) };
        let dy = if cy < zone_y0 { zone_y0 - cy } else { cy.saturating_sub(zone_y0 + zone_cells - 1) };
        match dx.max(dy) {
            0 => Zone::Tumor,
            1 => Zone::Moat,
            _ => Zone::Normal,
        }
    };

    // Speckle fills a square of `speckle_cells` cells at the slide corner of
    // the tumor zone, so it reaches only a minority of tiles.
    let speckle_square = label.is_positive().then(|| {
        let side = speckle_cells(zone_cells) * cell;
        let x0 = if right { w - side } else { 0 };
        let y0 = if bottom { h - side } else { 0 };
        (x0, y0, side)
    });
    let in_speckle = |x: usize, y: usize| {
        speckle_square.is_some_and(|(x0, y0, side)| x >= x0 && x < x0 + side && y >= y0 && y < y0 + side)
    };

    let shape = Field::new(&mut rng, 5, 0.6 * cell as f64, 2.5 * cell as f64);
    let holes = Field::new(&mut rng, 4, 0.4 * cell as f64, 1.2 * cell as f64);
    let margin = 0.12 * cell as f64;

    // Tissue and zone per pixel.
    let mut zone = vec![Zone::Moat; w * h];
    let mut tissue = vec![false; w * h];
    let zx0 = (zone_x0 * cell) as f64;
    let zy0 = (zone_y0 * cell) as f64;
    let zext = (zone_cells * cell) as f64;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let z = zone_of(x / cell, y / cell);
            zone[i] = z;
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let wobble = margin * (1.0 + shape.at(fx, fy));
            tissue[i] = match z {
                Zone::Moat => false,
                Zone::Tumor => {
                    // Distance to the zone edges that face the moat; slide borders do not count.
                    let mut d = f64::INFINITY;
                    if zone_x0 > 0 {
                        d = d.min(fx - zx0);
                    }
                    if zone_x0 + zone_cells < cells_x {
                        d = d.min(zx0 + zext - fx);
                    }
                    if zone_y0 > 0 {
                        d = d.min(fy - zy0);
                    }
                    if zone_y0 + zone_cells < cells_y {
                        d = d.min(zy0 + zext - fy);
                    }
                    d > wobble && holes.at(fx, fy) < 0.55
                }
                Zone::Normal => {
                    // Distance to the nearest moat cell.
                    let cx = x / cell;
                    let cy = y / cell;
                    let mut d = f64::INFINITY;
                    for (nx, ny) in [(cx.wrapping_sub(1), cy), (cx + 1, cy), (cx, cy.wrapping_sub(1)), (cx, cy + 1)] {
                        if nx < cells_x && ny < cells_y && zone_of(nx, ny) == Zone::Moat {
                            let dd = if nx != cx {
                                if nx < cx { fx - (cx * cell) as f64 } else { ((cx + 1) * cell) as f64 - fx }
                            } else if ny < cy {
                                fy - (cy * cell) as f64
                            } else {
                                ((cy + 1) * cell) as f64 - fy
                            };
                            d = d.min(dd);
                        }
                    }
                    d > wobble && holes.at(fx, fy) < 0.45
                }
            };
            if in_speckle(x, y) {
                tissue[i] = true;
            }
        }
    }

    let mut img: Vec<[f64; 3]> = (0..w * h)
        .map(|i| match (tissue[i], zone[i]) {
            (false, _) => BACKGROUND,
            (true, Zone::Tumor) => TUMOR_BASE,
            (true, _) => NORMAL_BASE,
        })
        .collect();

    // Nuclei: dense and large in tumor, sparse and small in normal tissue.
    let area = (w * h) as f64;
    let n_tumor_nuclei = (area / (cell * cell) as f64 * 420.0) as usize;
    for _ in 0..n_tumor_nuclei {
        let cx = rng.random::<f64>() * w as f64;
        let cy = rng.random::<f64>() * h as f64;
        if zone[cy as usize * w + cx as usize] != Zone::Tumor {
            continue;
        }
        let r = rng.random_range(0.018..0.03) * cell as f64;
        paint_disc(&mut img, w, h, cx, cy, r, TUMOR_NUCLEUS, |i| tissue[i] && zone[i] == Zone::Tumor);
    }
    let n_normal_nuclei = (area / (cell * cell) as f64 * 60.0) as usize;
    for _ in 0..n_normal_nuclei {
        let cx = rng.random::<f64>() * w as f64;
        let cy = rng.random::<f64>() * h as f64;
        if zone[cy as usize * w + cx as usize] != Zone::Normal {
            continue;
        }
        let r = rng.random_range(0.01..0.018) * cell as f64;
        paint_disc(&mut img, w, h, cx, cy, r, NORMAL_NUCLEUS, |i| tissue[i]);
    }

    let mut speckle = GrayImage::new(w as u32, h as u32);
    if let Some((x0, y0, side)) = speckle_square {
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                img[y * w + x] = TUMOR_BASE;
                speckle.put_pixel(x as u32, y as u32, Luma([255]));
            }
        }
        // Dots about one network input pixel across at 32-pixel inputs.
        let (dr_lo, dr_hi) = (0.018 * spec.patch as f64, 0.03 * spec.patch as f64);
        let mean_dr = 0.5 * (dr_lo + dr_hi);
        let dots = (1.2 * (side * side) as f64 / (std::f64::consts::PI * mean_dr * mean_dr)) as usize;
        let gate = |i: usize| in_speckle(i % w, i / w);
        for _ in 0..dots {
            let cx = x0 as f64 + rng.random::<f64>() * side as f64;
            let cy = y0 as f64 + rng.random::<f64>() * side as f64;
            let dr = rng.random_range(dr_lo..dr_hi);
            paint_disc(&mut img, w, h, cx, cy, dr, SPECKLE_DOT, gate);
        }
    }

    let mut pixels = RgbImage::new(w as u32, h as u32);
    let mut annotation = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let jitter = rng.random_range(-7.0..7.0);
            let c = img[i];
            let px = [0, 1, 2].map(|k| (c[k] + jitter + rng.random_range(-3.0..3.0)).round().clamp(0.0, 255.0) as u8);
            pixels.put_pixel(x as u32, y as u32, Rgb(px));
            if tissue[i] && zone[i] == Zone::Tumor {
                annotation.put_pixel(x as u32, y as u32, Luma([255]));
            }
        }
    }

    Ok(SyntheticSlide {
        raster: SlideRaster {
            slide_id: slide_id.to_string(),
            pixels,
            source_magnification: "synthetic".to_string(),
            downsample_factor: 1,
        },
        annotation,
        speckle,
        record: ManifestRecord {
            slide_id: slide_id.to_string(),
            patient_id: patient_id.to_string(),
            biopsy_label: label,
            image_path: format!("{slide_id}.png"),
            annotation_path: Some(format!("{slide_id}_annotation.png")),
        },
    })
}

/// A cohort of one-slide patients, benign first then malignant.
pub fn generate_cohort(
    seed: u64,
    spec: &SyntheticSpec,
    n_benign: usize,
    n_malignant: usize,
) -> Result<Vec<SyntheticSlide>> {
    use rayon::prelude::*;
    let labels: Vec<BiopsyLabel> = std::iter::repeat_n(BiopsyLabel::Benign, n_benign)
        .chain(std::iter::repeat_n(BiopsyLabel::Malignant, n_malignant))
        .collect();
    labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| {
            generate_synthetic_slide(seed, spec, &format!("S{i:03}"), &format!("P{i:03}"), label)
        })
        .collect()
}
