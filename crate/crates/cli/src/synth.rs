use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;

use seamil::dataset::write_jsonl;
use seamil::synth::{generate_cohort, SyntheticSpec};

use crate::io::ensure_dir;

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SynthArgs {
    /// Output directory for slides, masks and manifest.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of slides (one patient each).
    #[arg(long, default_value_t = 16)]
    pub slides: usize,
    /// Share of malignant slides; the count is round(slides × frac).
    #[arg(long, default_value_t = 0.5)]
    pub malignant_frac: f64,
    /// Slide width in pixels.
    #[arg(long, default_value_t = 1536)]
    pub width: usize,
    /// Slide height in pixels.
    #[arg(long, default_value_t = 1536)]
    pub height: usize,
    /// Tile size the layout is designed for; tissue cells are half of it.
    #[arg(long, default_value_t = 512)]
    pub patch: usize,
}

pub fn run(a: SynthArgs, seed: u64) -> Result<()> {
    if !(0.0..=1.0).contains(&a.malignant_frac) {
        bail!(seamil::Error::Config(format!(
            "--malignant-frac {} must be in [0, 1]",
            a.malignant_frac
        )));
    }
    let n_mal = (a.slides as f64 * a.malignant_frac).round() as usize;
    let spec = SyntheticSpec {
        width: a.width,
        height: a.height,
        patch: a.patch,
    };
    let slides = generate_cohort(seed, &spec, a.slides - n_mal, n_mal)?;
    ensure_dir(&a.out)?;
    for s in &slides {
        let r = &s.record;
        let image = a.out.join(&r.image_path);
        s.raster
            .pixels
            .save(&image)
            .with_context(|| format!("slide {}: writing {}", r.slide_id, image.display()))?;
        if let Some(p) = &r.annotation_path {
            s.annotation.save(a.out.join(p))?;
        }
        s.speckle.save(a.out.join(format!("{}_speckle.png", r.slide_id)))?;
    }
    let records: Vec<_> = slides.iter().map(|s| s.record.clone()).collect();
    write_jsonl(a.out.join("manifest.jsonl"), &records)?;
    println!(
        "synthesized {} slides ({} benign, {} malignant) in {}",
        slides.len(),
        a.slides - n_mal,
        n_mal,
        a.out.display()
    );
    Ok(())
}
