use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use rayon::prelude::*;

use seamil::dataset::write_jsonl;
use seamil::tiling::{crop_tile, tile_slide, TilingParams, DEFAULT_MIN_TISSUE, DEFAULT_OVERLAP, DEFAULT_PATCH};
use seamil::{SlideRaster, TileRecord};

use crate::io::{ensure_dir, tile_path, Manifest, TILE_INDEX};

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TileArgs {
    /// Slide manifest (JSONL).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for tiles/ and tiles.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    /// Tile edge in pixels.
    #[arg(long, default_value_t = DEFAULT_PATCH)]
    pub patch: usize,
    /// Fractional overlap between neighbouring tiles.
    #[arg(long, default_value_t = DEFAULT_OVERLAP)]
    pub overlap: f64,
    /// Minimum tissue fraction for a tile to be kept.
    #[arg(long, default_value_t = DEFAULT_MIN_TISSUE)]
    pub min_tissue: f64,
}

pub fn run(a: TileArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let params = TilingParams {
        patch: a.patch,
        overlap: a.overlap,
        min_tissue: a.min_tissue,
    };
    ensure_dir(&a.out)?;
    let per_slide: Vec<(Vec<TileRecord>, usize)> = manifest
        .records
        .par_iter()
        .map(|r| -> Result<_> {
            let pixels = manifest.load_image(r)?;
            let annotation = manifest.load_annotation(r)?;
            let raster = SlideRaster {
                slide_id: r.slide_id.clone(),
                pixels,
                source_magnification: "10x".into(),
                downsample_factor: 1,
            };
            let tiling = tile_slide(&raster, annotation.as_ref(), &params)
                .with_context(|| format!("slide {}", r.slide_id))?;
            if !tiling.kept.is_empty() {
                ensure_dir(&a.out.join(crate::io::TILE_DIR).join(&r.slide_id))?;
            }
            for t in &tiling.kept {
                let path = tile_path(&a.out, t);
                crop_tile(&raster.pixels, t.rect())
                    .save(&path)
                    .with_context(|| format!("slide {}: writing {}", r.slide_id, path.display()))?;
            }
            Ok((tiling.kept, tiling.excluded))
        })
        .collect::<Result<_>>()?;
    let kept: Vec<TileRecord> = per_slide.iter().flat_map(|(k, _)| k.iter().cloned()).collect();
    let excluded: usize = per_slide.iter().map(|(_, e)| e).sum();
    write_jsonl(a.out.join(TILE_INDEX), &kept)?;
    if kept.is_empty() {
        eprintln!(
            "warning: no tile reached the minimum tissue fraction {}; the index is empty",
            a.min_tissue
        );
    }
    println!(
        "tiled {} slides: {} kept, {} excluded",
        manifest.records.len(),
        kept.len(),
        excluded
    );
    Ok(())
}
