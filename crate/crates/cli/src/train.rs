use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::Args;

use seamil::dataset::{build_bag, patient_level_split, patients_from_manifest, FoldSplit, Side};
use seamil::mil::{Aggregation, DEFAULT_ATTENTION_DIM, MAX_BAG_SIZE};
use seamil::training::{train_source, train_target, write_log, PatchSample, SourceTrainConfig, TargetTrainConfig};
use seamil::{Architecture, BackboneConfig, Bag, HeadKind, ModelKind, RegionLabel, Tensor};

use crate::io::{
    ensure_dir, load_checkpoint, read_csv, require_kind, roi_by_slide, roi_tiles, Manifest, RoiRow, TileIndex,
};

/// Comma-separated list of block widths, e.g. `8,16,32`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Widths(pub Vec<usize>);

impl FromStr for Widths {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad width '{p}': {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Widths)
    }
}

/// Architecture flags. All optional: `train-source` fills gaps with
/// defaults, the other commands compare whatever is given against the
/// checkpoint.
#[derive(Debug, Clone, Default, Args)]
pub struct ArchArgs {
    /// Square network input edge; tiles are resized to it [train-source default: 224].
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Channel widths of the convolutional blocks [train-source default: 8,16,32].
    #[arg(long)]
    pub widths: Option<Widths>,
    /// Convolutions per block [train-source default: 2].
    #[arg(long)]
    pub convs_per_block: Option<usize>,
    /// Leading blocks kept frozen during training [train-source default: 0].
    #[arg(long)]
    pub frozen_blocks: Option<usize>,
    /// SE reduction ratio [train-source default: 4].
    #[arg(long)]
    pub se_ratio: Option<usize>,
    /// Drop the SE attention module (plain backbone).
    #[arg(long)]
    pub no_seanet: bool,
    /// Projection head: gap, gmp or mlp [train-source default: gmp].
    #[arg(long)]
    pub head: Option<HeadKind>,
}

impl ArchArgs {
    fn any(&self) -> bool {
        self.input_size.is_some()
            || self.widths.is_some()
            || self.convs_per_block.is_some()
            || self.frozen_blocks.is_some()
            || self.se_ratio.is_some()
            || self.no_seanet
            || self.head.is_some()
    }

    /// `base` with every given flag applied.
    pub fn apply(&self, base: &Architecture) -> Architecture {
        let mut a = base.clone();
        let b = &mut a.backbone;
        if let Some(s) = self.input_size {
            b.input_size = [s, s, 3];
        }
        if let Some(w) = &self.widths {
            b.block_channel_widths = w.0.clone();
        }
        if let Some(n) = self.convs_per_block {
            b.convs_per_block = n;
        }
        if let Some(n) = self.frozen_blocks {
            b.frozen_blocks = n;
        }
        if let Some(r) = self.se_ratio {
            b.se_reduction_ratio = r;
        }
        if self.no_seanet {
            b.attention = false;
        }
        if let Some(h) = self.head {
            a.head = h;
        }
        a
    }

    /// Architecture to verify a checkpoint against, if any flag was given.
    pub fn expected(&self, ckpt_arch: &Architecture) -> Option<Architecture> {
        self.any().then(|| self.apply(ckpt_arch))
    }
}

/// Patient split and validation fold selection.
#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    /// Existing split JSON; computed from the manifest and seed when absent.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Cross-validation fold held out for validation (0-3).
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
}

impl SplitArgs {
    /// Loads or computes the split, saving a computed one as `out/split.json`.
    fn resolve(&self, manifest: &Manifest, seed: u64, out: &Path) -> Result<FoldSplit> {
        let split = match &self.split {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading split {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing split {}", p.display()))?
            }
            None => {
                let s = patient_level_split(&patients_from_manifest(&manifest.records), seed)?;
                std::fs::write(out.join("split.json"), serde_json::to_string_pretty(&s)? + "\n")?;
                s
            }
        };
        if self.fold >= split.folds.len() {
            bail!(seamil::Error::Config(format!(
                "fold {} out of range, split has {} folds",
                self.fold,
                split.folds.len()
            )));
        }
        Ok(split)
    }
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TrainSourceArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory of the `tile` command.
    #[arg(long)]
    pub tiles: PathBuf,
    /// Directory for source.ckpt, source_log.csv and split.json.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long, default_value_t = 120)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// SGD momentum (0 is plain SGD).
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    /// Train on every tile instead of thinning the majority class each epoch.
    #[arg(long)]
    pub no_instance_dropout: bool,
}

fn default_architecture() -> Architecture {
    Architecture {
        backbone: BackboneConfig::default(),
        head: HeadKind::Gmp,
    }
}

/// Labelled patch samples from the given slides.
fn patch_samples(index: &TileIndex, slides: &[&str], input_size: [usize; 3]) -> Result<Vec<PatchSample>> {
    let tiles: Vec<_> = slides
        .iter()
        .flat_map(|s| index.slide(s).iter())
        .filter(|t| t.region_label != RegionLabel::Unlabeled)
        .cloned()
        .collect();
    let images = index.load_tensors(&tiles, input_size)?;
    Ok(images
        .into_iter()
        .zip(&tiles)
        .map(|(image, t)| PatchSample {
            image,
            is_tumor: t.region_label == RegionLabel::Tumor,
        })
        .collect())
}

fn slides_on_side<'a>(manifest: &'a Manifest, split: &FoldSplit, fold: usize, side: Side) -> Vec<&'a str> {
    manifest
        .records
        .iter()
        .filter(|r| split.side(&r.patient_id, fold) == Some(side))
        .map(|r| r.slide_id.as_str())
        .collect()
}

pub fn run_source(a: TrainSourceArgs, seed: u64) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let index = TileIndex::load(&a.tiles)?;
    ensure_dir(&a.out)?;
    let arch = a.arch.apply(&default_architecture());
    arch.backbone.validate()?;
    let config = SourceTrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        momentum: a.momentum,
        seed,
        instance_dropout: !a.no_instance_dropout,
    };
    config.validate()?;
    let split = a.split.resolve(&manifest, seed, &a.out)?;
    let input = arch.backbone.input_size;
    let train = patch_samples(&index, &slides_on_side(&manifest, &split, a.split.fold, Side::Train), input)?;
    let val = patch_samples(&index, &slides_on_side(&manifest, &split, a.split.fold, Side::Validation), input)?;
    let run = train_source(&arch, &train, &val, &config)?;
    run.checkpoint.save(a.out.join("source.ckpt"))?;
    write_log(a.out.join("source_log.csv"), &run.log)?;
    println!(
        "trained source on {} tiles ({} validation); best epoch {:?}",
        train.len(),
        val.len(),
        run.best_epoch
    );
    Ok(())
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TrainTargetArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory of the `tile` command.
    #[arg(long)]
    pub tiles: PathBuf,
    /// Source checkpoint to initialise from.
    #[arg(long)]
    pub source: PathBuf,
    /// ROI CSV written by `infer-roi`; its ROI tiles form the bags.
    #[arg(long)]
    pub roi: PathBuf,
    /// Directory for target.ckpt, target_log.csv and split.json.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    /// SGD momentum (0 is plain SGD).
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    /// Maximum instances per bag; larger slides are subsampled.
    #[arg(long, default_value_t = MAX_BAG_SIZE)]
    pub bag_cap: usize,
    /// Bag aggregation: bgas, bgap or bgmp.
    #[arg(long, default_value_t = Aggregation::Bgas)]
    pub aggregation: Aggregation,
    /// Hidden size of the attention scorer.
    #[arg(long, default_value_t = DEFAULT_ATTENTION_DIM)]
    pub attention_dim: usize,
    /// Keep the transferred backbone and head fixed.
    #[arg(long)]
    pub freeze_backbone: bool,
}

/// Image bags for the slides on `side`.
pub fn image_bags(
    manifest: &Manifest,
    index: &TileIndex,
    roi: &std::collections::BTreeMap<String, Vec<RoiRow>>,
    slides: &[&str],
    cap: usize,
    seed: u64,
    input_size: [usize; 3],
) -> Result<Vec<Bag<Tensor>>> {
    slides
        .iter()
        .map(|&slide| {
            let record = manifest.record(slide)?;
            let rows = roi.get(slide).map(Vec::as_slice).unwrap_or(&[]);
            let tiles = roi_tiles(index, slide, rows)?;
            let bag = build_bag(slide, &tiles, record.biopsy_label, cap, seed)?;
            let images = index.load_tensors(&bag.instances, input_size)?;
            Ok(Bag::new(slide, images, bag.label, bag.instance_tile_ids)?)
        })
        .collect()
}

pub fn run_target(a: TrainTargetArgs, seed: u64) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let index = TileIndex::load(&a.tiles)?;
    ensure_dir(&a.out)?;
    let source = load_checkpoint(&a.source)?;
    require_kind(&source, ModelKind::Source, &a.source)?;
    let config = TargetTrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        momentum: a.momentum,
        bag_cap: a.bag_cap,
        aggregation: a.aggregation,
        attention_dim: a.attention_dim,
        seed,
        freeze_backbone: a.freeze_backbone,
        architecture: a.arch.expected(&source.architecture),
    };
    config.validate()?;
    let split = a.split.resolve(&manifest, seed, &a.out)?;
    let roi = roi_by_slide(read_csv::<RoiRow>(&a.roi)?);
    let input = source.architecture.backbone.input_size;
    let bags = |side| {
        let slides = slides_on_side(&manifest, &split, a.split.fold, side);
        image_bags(&manifest, &index, &roi, &slides, a.bag_cap, seed, input)
    };
    let train = bags(Side::Train)?;
    let val = bags(Side::Validation)?;
    let run = train_target(&source, &train, &val, &config)?;
    run.checkpoint.save(a.out.join("target.ckpt"))?;
    write_log(a.out.join("target_log.csv"), &run.log)?;
    println!(
        "trained target ({}) on {} bags ({} validation); best epoch {:?}",
        a.aggregation,
        train.len(),
        val.len(),
        run.best_epoch
    );
    Ok(())
}
