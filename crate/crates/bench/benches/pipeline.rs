use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use shapeseg::evalmetrics::compare_masks;
use shapeseg::segnet::{Segmenter, SegmenterConfig};
use shapeseg::tensor::{Graph, Tensor};
use shapeseg::voxelgeom::{exact_edt, largest_component, sdm_target};
use shapeseg_bench::phantom;

fn geometry(c: &mut Criterion) {
    let mut group = c.benchmark_group("geometry");
    for n in [32, 48] {
        let sample = phantom(n);
        group.bench_with_input(BenchmarkId::new("exact_edt", n), &sample.mask, |b, m| {
            b.iter(|| exact_edt(black_box(m)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sdm_target", n), &sample.mask, |b, m| {
            b.iter(|| sdm_target(black_box(m)))
        });
        group.bench_with_input(BenchmarkId::new("largest_component", n), &sample.mask, |b, m| {
            b.iter(|| largest_component(black_box(m)))
        });
        let shifted = sample.mask.flip(0);
        group.bench_with_input(BenchmarkId::new("compare_masks", n), &sample.mask, |b, m| {
            b.iter(|| compare_masks("b", black_box(m), &shifted, false).unwrap())
        });
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let mut group = c.benchmark_group("segmenter");
    group.sample_size(10);
    let seg = Segmenter::new(SegmenterConfig::default(), 0).unwrap();
    for n in [16, 32] {
        let x = Tensor::from_vec(&[2, 1, n, n, n], phantom(n).volume.as_slice().repeat(2));
        group.bench_with_input(BenchmarkId::new("predict", n), &x, |b, x| b.iter(|| seg.predict(black_box(x)).unwrap()));
        group.bench_with_input(BenchmarkId::new("forward_backward", n), &x, |b, x| {
            b.iter(|| {
                let mut g = Graph::new();
                let p = seg.params().bind(&mut g, true);
                let xv = g.constant(x.clone());
                let out = seg.forward(&mut g, &p, xv).unwrap();
                let n = g.value(out.prob).len();
                let root = g.scalar_fn(&[out.prob], 0.0, vec![vec![1.0 / n as f32; n]]);
                g.backward(root);
                g.grads_of(&p)
            })
        });
    }
    group.finish();
}

criterion_group!(benches, geometry, network);
criterion_main!(benches);
