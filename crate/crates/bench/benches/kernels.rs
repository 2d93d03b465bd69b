use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcsfm::ba::{ba_gradient, ba_objective, BaCamera, BaMode, BaProblem};
use vcsfm::geometry::{so3_exp, Vec2, Vec3};
use vcsfm::mesh::{ray_mesh_all_hits, TriangleMesh};
use vcsfm::pipeline::two_view_sfm;
use vcsfm::relative_pose::{five_point, NormalizedPair};
use vcsfm::synth::{body_proxy, generate_scene};
use vcsfm::{NoiseConfig, Ray, SceneConfig, Se3Pose, SfmInput, SfmParams};

fn rays_at(mesh: &TriangleMesh, n: usize) -> Vec<Ray> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = mesh.centroid();
    (0..n)
        .map(|_| {
            let origin = c + Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.8..0.8), 3.0);
            Ray::new(origin, c - origin + Vec3::new(0.0, rng.random_range(-0.2..0.2), 0.0)).unwrap()
        })
        .collect()
}

fn ray_casting(c: &mut Criterion) {
    let mesh = body_proxy();
    let rays = rays_at(&mesh, 64);
    let mut g = c.benchmark_group("ray_cast_64_rays");
    g.bench_function("bvh", |b| {
        b.iter(|| rays.iter().map(|r| ray_mesh_all_hits(&mesh, black_box(r)).len()).sum::<usize>())
    });
    g.bench_function("brute_force", |b| {
        b.iter(|| rays.iter().map(|r| mesh.hits_brute_force(black_box(r)).len()).sum::<usize>())
    });
    g.finish();
}

fn minimal_problem(rng: &mut ChaCha8Rng) -> Vec<NormalizedPair> {
    let w = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let pose = Se3Pose::new(so3_exp(&w), Vec3::new(1.0, rng.random_range(-0.2..0.2), 0.1)).unwrap();
    (0..5)
        .map(|_| {
            let x = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(3.0..6.0));
            let y = pose.transform(&x);
            NormalizedPair::new(Vec2::new(x.x / x.z, x.y / x.z), Vec2::new(y.x / y.z, y.y / y.z))
        })
        .collect()
}

fn five_point_solver(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    c.bench_function("five_point", |b| {
        b.iter_batched(|| minimal_problem(&mut rng), |p| five_point(&p), BatchSize::SmallInput)
    });
}

fn ba_problem() -> BaProblem {
    let scene = generate_scene(
        &SceneConfig::with_angles(&[0.0, 120.0]),
        &NoiseConfig {
            pixel_sigma: 1.0,
            ..NoiseConfig::default()
        },
    )
    .unwrap();
    let input = SfmInput::new(scene.records.clone(), Vec::new(), SfmParams::default()).unwrap();
    let result = two_view_sfm(&input).unwrap();
    let cameras = result
        .poses
        .iter()
        .zip(&scene.records)
        .enumerate()
        .map(|(i, (p, r))| BaCamera {
            pose: p.unwrap(),
            intrinsics: r.intrinsics,
            fixed: i == 0,
        })
        .collect();
    BaProblem::new(cameras, result.tracks, BaMode::Soft).unwrap()
}

fn bundle_adjustment(c: &mut Criterion) {
    let problem = ba_problem();
    let x = problem.parameters().unwrap();
    let mut g = c.benchmark_group(format!("ba_{}_tracks", problem.tracks.len()));
    g.bench_function("objective", |b| b.iter(|| ba_objective(&problem, black_box(&x)).unwrap()));
    g.bench_function("gradient", |b| b.iter(|| ba_gradient(&problem, black_box(&x)).unwrap()));
    g.finish();
}

criterion_group!(benches, ray_casting, five_point_solver, bundle_adjustment);
criterion_main!(benches);
