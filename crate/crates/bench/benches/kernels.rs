use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use cascomp::autodiff::Graph;
use cascomp::cascade::{coarse_target, completion_loss};
use cascomp::geometry::{fps, SpatialIndex};
use cascomp::metrics::{chamfer, ChamferVariant};
use cascomp_bench::{cube_cloud, desk_backbone, desk_sample};

fn spatial(c: &mut Criterion) {
    let cloud = cube_cloud(1024, 1);
    let queries = cube_cloud(1024, 2);
    c.bench_function("kdtree build 1024", |b| b.iter(|| SpatialIndex::build(black_box(&cloud))));
    let index = SpatialIndex::build(&cloud);
    c.bench_function("kdtree 1024 nearest queries", |b| {
        b.iter(|| queries.points().iter().map(|q| index.nearest(q).1).sum::<f64>())
    });
    c.bench_function("fps 32 of 1024", |b| b.iter(|| fps(black_box(&cloud), 32, 0).unwrap()));
    c.bench_function("fps 512 of 1024", |b| b.iter(|| fps(black_box(&cloud), 512, 0).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let (p, q) = (cube_cloud(1024, 3), cube_cloud(1024, 4));
    c.bench_function("chamfer L1 1024x1024", |b| b.iter(|| chamfer(black_box(&p), black_box(&q), ChamferVariant::L1).unwrap()));
    let (p, q) = (cube_cloud(8192, 5), cube_cloud(8192, 6));
    c.bench_function("chamfer L2 8192x8192", |b| b.iter(|| chamfer(black_box(&p), black_box(&q), ChamferVariant::L2).unwrap()));
}

fn model(c: &mut Criterion) {
    let (bb, params) = desk_backbone();
    let s = desk_sample(0);
    let gt_coarse = coarse_target(&s.gt, bb.cfg.n_q).unwrap();
    c.bench_function("backbone inference N=256", |b| b.iter(|| bb.infer(&params, black_box(&s.partial)).unwrap()));
    c.bench_function("backbone loss + backward N=256", |b| {
        b.iter_batched(
            Graph::new,
            |mut g| {
                let bound = bb.bind(&mut g, &params, true);
                let out = bb.complete(&mut g, &bound, &s.partial).unwrap();
                let loss = completion_loss(&mut g, &out, &s.gt, &gt_coarse).unwrap();
                g.backward(loss).unwrap();
                g
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, spatial, metrics, model);
criterion_main!(benches);
