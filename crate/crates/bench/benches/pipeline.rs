use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use seamil::nn::Binding;
use seamil::seed::rng_for;
use seamil::synth::{generate_synthetic_slide, SyntheticSpec};
use seamil::tensor::Padding;
use seamil::tiling::{magenta_channel, otsu_threshold, tile_slide, TilingParams};
use seamil::{Architecture, BiopsyLabel, SourceModel, Tape, Tensor};

fn ramp(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| ((i * 37) % 101) as f64 / 101.0).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_3x3");
    for (hw, cin, cout) in [(32, 3, 8), (64, 16, 16), (112, 8, 16)] {
        let x = ramp(&[hw, hw, cin]);
        let k = ramp(&[3, 3, cin, cout]);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{hw}x{hw}x{cin}->{cout}")), &(), |b, _| {
            b.iter(|| {
                let tape = Tape::new();
                let y = tape
                    .conv2d(tape.constant(&x), tape.constant(&k), 1, Padding::Same)
                    .unwrap();
                black_box(y.data())
            })
        });
    }
    g.finish();
}

fn model_steps(c: &mut Criterion) {
    let mut g = c.benchmark_group("source_model");
    g.sample_size(20);
    for size in [32usize, 64] {
        let mut arch = Architecture::default();
        arch.backbone.input_size = [size, size, 3];
        let mut model = SourceModel::init(&arch, &mut rng_for(1, "bench", 0)).unwrap();
        let img = ramp(&[size, size, 3]);
        g.bench_function(BenchmarkId::new("train_step", size), |b| {
            b.iter(|| {
                let tape = Tape::new();
                let mut bind = Binding::training(&tape);
                let x = tape.constant(&img);
                let loss = model.loss(&mut bind, x, true).unwrap();
                let grads = tape.backward(loss).unwrap();
                bind.accumulate(&grads, model.params_mut()).unwrap();
            })
        });
        g.bench_function(BenchmarkId::new("predict", size), |b| {
            b.iter(|| black_box(model.predict(&img).unwrap()))
        });
    }
    g.finish();
}

fn tiling(c: &mut Criterion) {
    let spec = SyntheticSpec::default();
    let slide = generate_synthetic_slide(3, &spec, "B0", "P0", BiopsyLabel::Malignant).unwrap();
    let magenta = magenta_channel(&slide.raster.pixels);
    let mut hist = [0u64; 256];
    for p in magenta.pixels() {
        hist[p.0[0] as usize] += 1;
    }
    c.bench_function("otsu_threshold", |b| b.iter(|| otsu_threshold(black_box(&hist)).unwrap()));
    c.bench_function("magenta_channel_1536", |b| {
        b.iter(|| black_box(magenta_channel(&slide.raster.pixels)))
    });
    let mut g = c.benchmark_group("tile_slide_1536");
    g.sample_size(20);
    for patch in [512usize, 128] {
        let params = TilingParams {
            patch,
            ..TilingParams::default()
        };
        g.bench_function(BenchmarkId::from_parameter(patch), |b| {
            b.iter(|| black_box(tile_slide(&slide.raster, Some(&slide.annotation), &params).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, conv, model_steps, tiling);
criterion_main!(benches);
