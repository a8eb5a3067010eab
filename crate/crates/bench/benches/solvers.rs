use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use stosym_core::noise::{sample, uniform_grid, DriverKind, DriverSpec};
use stosym_core::planar;
use stosym_core::schemes::{euler_solve, isotropic_plane, levy_area, milstein_solve, BrownianSde, DiscretizedNoise};
use stosym_core::sde::solve_discrete;
use stosym_core::symmetry::{determining_residual, probe_grid};

/// Two-dimensional noise with iterated integrals from a path 16 times finer.
fn brownian_noise(steps: usize) -> DiscretizedNoise {
    let w = sample(&DriverSpec { kind: DriverKind::Brownian(2), seed: 1, grid: uniform_grid(1.0, 16 * steps) }).unwrap();
    let knots: Vec<f64> = w.times.iter().step_by(16).cloned().collect();
    levy_area(&w, &knots).unwrap()
}

fn schemes(c: &mut Criterion) {
    let sde = isotropic_plane();
    let noise = brownian_noise(1000);
    c.bench_function("euler_1000_steps", |b| b.iter(|| euler_solve(&sde, black_box(&noise), &[0.5, -0.3]).unwrap()));
    c.bench_function("milstein_1000_steps", |b| b.iter(|| milstein_solve(&sde, black_box(&noise), &[0.5, -0.3]).unwrap()));

    let gbm = BrownianSde::new(1, 1, Arc::new(|x| vec![0.1 * x[0]]), Arc::new(|x| vec![0.5 * x[0]])).with_d_sigma(Arc::new(|_| vec![0.5]));
    let w = sample(&DriverSpec { kind: DriverKind::Brownian(1), seed: 2, grid: uniform_grid(1.0, 128) }).unwrap();
    let dw: Vec<f64> = (1..w.len()).map(|s| w.values[s][0] - w.values[s - 1][0]).collect();
    let scalar = DiscretizedNoise::scalar_with_closed_form(w.times.clone(), dw).unwrap();
    c.bench_function("milstein_gbm_128_steps", |b| b.iter(|| milstein_solve(&gbm, black_box(&scalar), &[1.0]).unwrap()));
}

fn geometric(c: &mut Criterion) {
    let sde = planar::affine_sde();
    let spec = DriverSpec {
        kind: DriverKind::DiscreteIid { sampler: planar::conjugation_invariant_sampler(0.95, 0.2), group: planar::driver_group() },
        seed: 3,
        grid: vec![0.0, 1000.0],
    };
    c.bench_function("sample_planar_driver_1000", |b| b.iter(|| sample(black_box(&spec)).unwrap()));
    c.bench_function("solve_discrete_1000", |b| {
        b.iter_batched(|| sample(&spec).unwrap(), |z| solve_discrete(&sde, &z, &[1.0, 0.5]).unwrap(), BatchSize::SmallInput)
    });

    let pts = probe_grid(&[(-2.0, 2.0), (-2.0, 2.0)], &planar::driver_group(), 200);
    let v = planar::rotation_generator();
    let act = planar::gauge_action();
    c.bench_function("determining_residual_200_probes", |b| {
        b.iter(|| determining_residual(&sde, &v, &act, None, black_box(&pts)).unwrap())
    });
}

criterion_group!(benches, schemes, geometric);
criterion_main!(benches);
