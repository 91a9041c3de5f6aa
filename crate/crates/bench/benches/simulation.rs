use std::f64::consts::{PI, TAU};
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use extrinsic::malliavin::reduced_covariance;
use extrinsic::{
    bismut_gradient, holonomy, sample_driver, simulate_projection_bm, BmOptions, DVector,
    DiscretePath, ManifoldModel, McParams, ScalarField, SdeSystem,
};

fn sphere_paths(c: &mut Criterion) {
    let s = ManifoldModel::sphere(3, 1.0).unwrap();
    let o = s.default_origin();
    let drv = sample_driver(3, 0.5, 1e-3, 1, 0, None).unwrap();
    let mut group = c.benchmark_group("projection_bm");
    for (name, opts) in [
        ("points", BmOptions::points_only()),
        ("frames", BmOptions::frames_only()),
        ("full", BmOptions::default()),
    ] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &opts, |b, opts| {
            b.iter(|| simulate_projection_bm(&s, &o, black_box(&drv), opts).unwrap())
        });
    }
    group.finish();
}

fn transport(c: &mut Criterion) {
    let s = ManifoldModel::sphere(3, 1.0).unwrap();
    let (sp, cp) = (PI / 3.0).sin_cos();
    let v3 = |a, b, c| DVector::from_vec(vec![a, b, c]);
    let path = DiscretePath::from_curve(&s, 0.0, TAU, 1000, |t| {
        (
            v3(sp * t.cos(), sp * t.sin(), cp),
            v3(-sp * t.sin(), sp * t.cos(), 0.0),
        )
    })
    .unwrap();
    c.bench_function("holonomy_latitude_1000", |b| {
        b.iter(|| holonomy(&s, black_box(&path)).unwrap())
    });
}

fn estimators(c: &mut Criterion) {
    let s = ManifoldModel::sphere(3, 1.0).unwrap();
    let o = DVector::from_vec(vec![1.0, 0.0, 0.0]);
    let f = ScalarField::parse("x3", 3).unwrap();
    let params = McParams::new(200, 1e-2, 3);
    c.bench_function("bismut_200_paths", |b| {
        b.iter(|| bismut_gradient(&s, &o, &f, 0.5, 0.25, black_box(&params)).unwrap())
    });

    let heis = SdeSystem::builtin("heisenberg").unwrap();
    let drv = sample_driver(2, 1.0, 1e-2, 4, 0, None).unwrap();
    c.bench_function("heisenberg_covariance", |b| {
        b.iter(|| reduced_covariance(&heis, black_box(&drv), 4).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = sphere_paths, transport, estimators
}
criterion_main!(benches);
