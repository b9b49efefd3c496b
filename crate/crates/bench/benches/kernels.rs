use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use patchlab_bench::{gradient_image, probe};
use patchlab_core::oracle::protocol::encode_pixels;
use patchlab_core::{
    crise_map, make_grid, patch_mix, patch_permute, place_occluders, sample_patch_mask, Classifier, GridSpec,
    ImageTensor, OccluderSprite, RiseConfig, RiseMaskGenerator, SeededRng, SmdConfig,
};

fn bench_patch_ops(c: &mut Criterion) {
    let a = gradient_image(224, 224);
    let b = ImageTensor::filled(224, 224, 3, 0.5).unwrap();
    let grid = make_grid(224, 224, 7, 7).unwrap();
    let mask = sample_patch_mask(&grid, 0.5, &mut SeededRng::new(1)).unwrap();
    c.bench_function("patch_mix 224x224 7x7", |bch| bch.iter(|| patch_mix(black_box(&a), &b, &mask).unwrap()));
    c.bench_function("patch_permute 224x224 14x14", |bch| {
        let mut rng = SeededRng::new(2);
        bch.iter(|| patch_permute(black_box(&a), GridSpec::new(14, 14), &mut rng).unwrap())
    });
}

fn bench_rise(c: &mut Criterion) {
    let cfg = RiseConfig { n_masks: 1, ..RiseConfig::default() };
    let gen = RiseMaskGenerator::new(&cfg, 224, 224).unwrap();
    let mut i = 0;
    c.bench_function("rise mask 224x224 stride 14", |bch| {
        bch.iter(|| {
            i += 1;
            gen.mask(black_box(i))
        })
    });

    let x = gradient_image(56, 56);
    let oracle = probe(56, 56).contrastive(false);
    let cfg = RiseConfig { n_masks: 256, cell_stride: 7, ..RiseConfig::default() };
    c.bench_function("crise 56x56 256 masks", |bch| bch.iter(|| crise_map(black_box(&x), &oracle, 3, &cfg).unwrap()));
}

fn bench_oracle(c: &mut Criterion) {
    let x = gradient_image(224, 224);
    let p = probe(224, 224);
    let batch = vec![x.clone(); 8];
    c.bench_function("linear probe batch of 8 at 224x224", |bch| bch.iter(|| p.score_batch(black_box(&batch)).unwrap()));
    c.bench_function("encode pixels 224x224", |bch| bch.iter(|| encode_pixels(black_box(&x))));
}

fn bench_smd(c: &mut Criterion) {
    let disc = ImageTensor::from_fn(64, 64, 4, |y, x, ch| {
        let inside = (y as f64 - 31.5).powi(2) + (x as f64 - 31.5).powi(2) <= 900.0;
        if ch == 3 { f64::from(u8::from(inside)) } else { 0.2 }
    })
    .unwrap();
    let sprites = [OccluderSprite::new(disc, "discs", "discs/d").unwrap()];
    let x = gradient_image(224, 224);
    let cfg = SmdConfig::default();
    let mut seed = 0;
    c.bench_function("place_occluders 224x224 target 0.3", |bch| {
        bch.iter_batched(
            || {
                seed += 1;
                SeededRng::new(seed)
            },
            |mut rng| place_occluders(&x, &sprites, 0.3, &cfg, &mut rng),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_patch_ops, bench_rise, bench_oracle, bench_smd);
criterion_main!(benches);
