use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use rayon::prelude::*;

use seamil::evaluation::{attention_heatmap, probability_heatmap, write_heatmap_csv, HeatmapPoint};
use seamil::heads::{compute_cam, TUMOR_CLASS};
use seamil::raster::Raster;
use seamil::ModelKind;

use crate::io::{
    check_architecture, ensure_parent, load_checkpoint, read_csv, require_kind, AttentionRow, Manifest, RoiRow,
    TileIndex,
};
use crate::train::ArchArgs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Tile tumor probabilities from an `infer-roi` CSV.
    Roi,
    /// Normalised bag attention from an `infer-wsi` attention CSV.
    Attention,
    /// Tumor-class activation maps from a source checkpoint.
    Cam,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct HeatmapArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Slide to render.
    #[arg(long)]
    pub slide: String,
    /// Output PNG; the CSV goes next to it with a .csv extension.
    #[arg(long)]
    pub out: PathBuf,
    /// Output raster is the slide size divided by this.
    #[arg(long, default_value_t = 4)]
    pub downscale: usize,
    /// ROI CSV (roi mode).
    #[arg(long, required_if_eq("mode", "roi"))]
    pub roi: Option<PathBuf>,
    /// Attention CSV (attention mode).
    #[arg(long, required_if_eq("mode", "attention"))]
    pub attention: Option<PathBuf>,
    /// Output directory of the `tile` command (attention and cam modes).
    #[arg(long, required_if_eq_any([("mode", "attention"), ("mode", "cam")]))]
    pub tiles: Option<PathBuf>,
    /// Source checkpoint (cam mode).
    #[arg(long, required_if_eq("mode", "cam"))]
    pub source: Option<PathBuf>,
    #[command(flatten)]
    pub arch: ArchArgs,
}

pub fn run(a: HeatmapArgs) -> Result<()> {
    if a.downscale == 0 {
        bail!(seamil::Error::Config("--downscale must be positive".into()));
    }
    let manifest = Manifest::load(&a.manifest)?;
    let record = manifest.record(&a.slide)?;
    let image_path = manifest.resolve(&record.image_path);
    let (w, h) = image::image_dimensions(&image_path)
        .with_context(|| format!("slide {}: cannot read image {}", a.slide, image_path.display()))?;
    let slide_dims = (w as usize, h as usize);
    let out_dims = ((slide_dims.0 / a.downscale).max(1), (slide_dims.1 / a.downscale).max(1));

    let (raster, points) = match a.mode {
        Mode::Roi => {
            let rows: Vec<RoiRow> = read_csv(a.roi.as_ref().expect("required by clap"))?;
            let pts: Vec<(f64, f64, f64)> = rows
                .iter()
                .filter(|r| r.slide_id == a.slide)
                .map(|r| (r.x_center, r.y_center, r.p_tumor))
                .collect();
            (probability_heatmap(&pts, slide_dims, out_dims)?.raster, pts)
        }
        Mode::Attention => {
            let index = TileIndex::load(a.tiles.as_ref().expect("required by clap"))?;
            let rows: Vec<AttentionRow> = read_csv(a.attention.as_ref().expect("required by clap"))?;
            let tiles = index.slide(&a.slide);
            let mut weights = Vec::new();
            let mut rects = Vec::new();
            for r in rows.iter().filter(|r| r.slide_id == a.slide) {
                let t = tiles
                    .iter()
                    .find(|t| t.tile_id() == r.tile_id)
                    .with_context(|| format!("attention tile {} is not in the tile index", r.tile_id))?;
                weights.push(r.attention);
                rects.push(t.rect());
            }
            let heat = attention_heatmap(&weights, &rects, slide_dims, out_dims)?;
            let norm = seamil::evaluation::normalize_attention(&weights)?;
            let pts = rects
                .iter()
                .zip(norm)
                .map(|(r, v)| {
                    let (x, y) = r.center();
                    (x, y, v)
                })
                .collect();
            (heat.raster, pts)
        }
        Mode::Cam => cam(&a, slide_dims, out_dims)?,
    };
    ensure_parent(&a.out)?;
    raster.save_png(&a.out)?;
    let csv_points: Vec<HeatmapPoint> = points
        .into_iter()
        .map(|(x_center, y_center, value)| HeatmapPoint {
            x_center,
            y_center,
            value,
        })
        .collect();
    write_heatmap_csv(a.out.with_extension("csv"), &csv_points)?;
    println!(
        "wrote {}×{} heatmap for slide {} to {}",
        out_dims.0,
        out_dims.1,
        a.slide,
        a.out.display()
    );
    Ok(())
}

type Rendered = (Raster, Vec<(f64, f64, f64)>);

/// Per-tile CAMs pasted into the slide frame; overlaps are averaged and
/// pixels outside every tile stay zero. CSV points are the CAM cell centres.
fn cam(a: &HeatmapArgs, slide: (usize, usize), out: (usize, usize)) -> Result<Rendered> {
    let source_path = a.source.as_ref().expect("required by clap");
    let ckpt = load_checkpoint(source_path)?;
    require_kind(&ckpt, ModelKind::Source, source_path)?;
    check_architecture(&ckpt, a.arch.expected(&ckpt.architecture))?;
    let model = ckpt.to_source()?;
    let index = TileIndex::load(a.tiles.as_ref().expect("required by clap"))?;
    let tiles = index.slide(&a.slide);
    if tiles.is_empty() {
        bail!(seamil::Error::Contract(format!("slide {} has no tiles", a.slide)));
    }
    let input = ckpt.architecture.backbone.input_size;
    let (sx, sy) = (out.0 as f64 / slide.0 as f64, out.1 as f64 / slide.1 as f64);
    let maps = tiles
        .par_iter()
        .map(|t| -> Result<_> {
            let volume = model.refined_features(&index.load_tensor(t, input)?)?;
            let (fh, fw, _) = volume.dims();
            let cells = compute_cam(&volume, ckpt.architecture.head, &model.classifier, TUMOR_CLASS, fw, fh)?;
            let pw = ((t.size as f64 * sx).round() as usize).max(1);
            let ph = ((t.size as f64 * sy).round() as usize).max(1);
            Ok((cells.resize_bilinear(pw, ph), cells))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = vec![0.0; out.0 * out.1];
    let mut count = vec![0u32; out.0 * out.1];
    let mut points = Vec::new();
    for (t, (patch, cells)) in tiles.iter().zip(&maps) {
        let x0 = (t.x as f64 * sx).round() as usize;
        let y0 = (t.y as f64 * sy).round() as usize;
        for py in 0..patch.height {
            for px in 0..patch.width {
                let (x, y) = (x0 + px, y0 + py);
                if x < out.0 && y < out.1 {
                    sum[y * out.0 + x] += patch.at(px, py);
                    count[y * out.0 + x] += 1;
                }
            }
        }
        let cell = t.size as f64 / cells.width as f64;
        for cy in 0..cells.height {
            for cx in 0..cells.width {
                points.push((
                    t.x as f64 + (cx as f64 + 0.5) * cell,
                    t.y as f64 + (cy as f64 + 0.5) * t.size as f64 / cells.height as f64,
                    cells.at(cx, cy),
                ));
            }
        }
    }
    let values = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    Ok((Raster::new(out.0, out.1, values)?, points))
}
