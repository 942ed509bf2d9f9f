use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use rayon::prelude::*;

use seamil::mil::MAX_BAG_SIZE;
use seamil::ModelKind;

use crate::io::{
    check_architecture, load_checkpoint, read_csv, require_kind, roi_by_slide, write_csv, AttentionRow, BagRow,
    Manifest, RoiRow, TileIndex,
};
use crate::train::{image_bags, ArchArgs};

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct InferRoiArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory of the `tile` command.
    #[arg(long)]
    pub tiles: PathBuf,
    /// Source checkpoint.
    #[arg(long)]
    pub source: PathBuf,
    /// Output CSV: slide_id, tile_id, x_center, y_center, p_tumor, roi, label.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub arch: ArchArgs,
}

pub fn run_roi(a: InferRoiArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let index = TileIndex::load(&a.tiles)?;
    let ckpt = load_checkpoint(&a.source)?;
    require_kind(&ckpt, ModelKind::Source, &a.source)?;
    check_architecture(&ckpt, a.arch.expected(&ckpt.architecture))?;
    let model = ckpt.to_source()?;
    let input = ckpt.architecture.backbone.input_size;
    let tiles: Vec<_> = manifest
        .records
        .iter()
        .flat_map(|r| index.slide(&r.slide_id).iter())
        .collect();
    let rows = tiles
        .par_iter()
        .map(|t| -> Result<RoiRow> {
            let p = model.predict(&index.load_tensor(t, input)?)?;
            let (x_center, y_center) = t.center();
            Ok(RoiRow {
                slide_id: t.slide_id.clone(),
                tile_id: t.tile_id(),
                x_center,
                y_center,
                p_tumor: p.p_tumor,
                roi: p.is_tumor(),
                label: t.region_label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_csv(&a.out, &rows)?;
    println!(
        "scored {} tiles: {} ROI",
        rows.len(),
        rows.iter().filter(|r| r.roi).count()
    );
    Ok(())
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct InferWsiArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory of the `tile` command.
    #[arg(long)]
    pub tiles: PathBuf,
    /// ROI CSV written by `infer-roi`.
    #[arg(long)]
    pub roi: PathBuf,
    /// Target checkpoint.
    #[arg(long)]
    pub target: PathBuf,
    /// Bag CSV: slide_id, patient_id, label, probability, prediction, instances.
    #[arg(long)]
    pub out: PathBuf,
    /// Attention CSV (slide_id, tile_id, attention); attention models only.
    #[arg(long)]
    pub attention_out: Option<PathBuf>,
    /// Maximum instances per bag; larger slides are subsampled with the seed.
    #[arg(long, default_value_t = MAX_BAG_SIZE)]
    pub bag_cap: usize,
    #[command(flatten)]
    pub arch: ArchArgs,
}

pub fn run_wsi(a: InferWsiArgs, seed: u64) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let index = TileIndex::load(&a.tiles)?;
    let ckpt = load_checkpoint(&a.target)?;
    require_kind(&ckpt, ModelKind::Target, &a.target)?;
    check_architecture(&ckpt, a.arch.expected(&ckpt.architecture))?;
    let model = ckpt.to_target()?;
    let roi = roi_by_slide(read_csv::<RoiRow>(&a.roi)?);
    let slides: Vec<&str> = manifest.records.iter().map(|r| r.slide_id.as_str()).collect();
    let input = ckpt.architecture.backbone.input_size;
    let bags = image_bags(&manifest, &index, &roi, &slides, a.bag_cap, seed, input)?;
    let mut rows = Vec::with_capacity(bags.len());
    let mut attention = Vec::new();
    for (bag, record) in bags.iter().zip(&manifest.records) {
        let pred = model.predict(bag).with_context(|| format!("slide {}", bag.slide_id))?;
        rows.push(BagRow {
            slide_id: bag.slide_id.clone(),
            patient_id: record.patient_id.clone(),
            label: bag.label,
            probability: pred.probability,
            prediction: pred.label(),
            instances: bag.len(),
        });
        if let Some(weights) = &pred.attention {
            attention.extend(bag.instance_tile_ids.iter().zip(weights).map(|(id, &w)| AttentionRow {
                slide_id: bag.slide_id.clone(),
                tile_id: id.clone(),
                attention: w,
            }));
        }
    }
    write_csv(&a.out, &rows)?;
    if let Some(path) = &a.attention_out {
        if attention.is_empty() {
            eprintln!("warning: {} aggregation has no attention weights", model.mode);
        }
        write_csv(path, &attention)?;
    }
    let correct = rows.iter().filter(|r| r.label == r.prediction).count();
    println!("predicted {} slides: {correct} match their label", rows.len());
    Ok(())
}
