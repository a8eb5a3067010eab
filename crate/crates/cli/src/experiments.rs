//! Named experiments. Defaults reproduce the acceptance scale.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
use std::sync::Arc;

use anyhow::{ensure, Context as _, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use stosym_core::lie_groups::GroupDescriptor;
use stosym_core::linalg;
use stosym_core::noise::{
    sample, uniform_grid, CharacteristicTriplet, DriverKind, DriverSpec, IncrementSampler, JumpLaw, JumpMeasure, Truncation,
};
use stosym_core::path::{CadlagPath, PathSpace, PathStyle};
use stosym_core::planar;
use stosym_core::reduction::{reconstruct, solve_gauge_eta, transport_defect, triangular_check, GaugeEtaSolver, ReductionConfig};
use stosym_core::rng::{substream, StosymRng};
use stosym_core::schemes::{
    euler_solve, euler_solve_state_rotated, gauge_rotate_milstein, isotropic_plane, levy_area, milstein_solve, rotating_diffusion,
    BrownianSde, DiscretizedNoise,
};
use stosym_core::sde::{solve_discrete, StateFn};
use stosym_core::stats::{cauchy_cdf, ks_one_sample, ks_two_sample, mc_mean_ci, normal_cdf};
use stosym_core::symmetry::{
    check_discrete_gauge, check_levy_gauge, determining_residual, euler_determining_residual, euler_terms, is_symmetry_pathwise,
    milstein_determining_residual, probe_grid, scheme_probe_points, LawCheckReport, SchemeProbe,
};
use stosym_core::transform::{
    apply_e, apply_p, bracket, compose, invert, push_forward, GaugeAction, InfinitesimalStochasticTransformation, ScalarFn,
    StochasticTransformation, TimeAction,
};

use crate::config::{ConfigError, Params};
use crate::report::{Check, Outcome, Table};

pub struct RunContext<'a> {
    pub seed: u64,
    pub params: &'a Params,
}

type Runner = fn(&RunContext) -> Result<Outcome>;

pub struct Experiment {
    pub name: &'static str,
    pub criteria: &'static [&'static str],
    pub params: &'static [&'static str],
    /// Reads every parameter so that bad values surface as configuration errors.
    pub validate: fn(&Params) -> Result<(), ConfigError>,
    pub run: Runner,
}

pub const EXPERIMENTS: &[Experiment] = &[
    Experiment {
        name: "sec6-determining",
        criteria: &["A1"],
        params: &["probes", "box", "perturbed_scale"],
        validate: determining_params,
        run: planar_determining,
    },
    Experiment {
        name: "sec6-pathwise",
        criteria: &["A2"],
        params: &["paths", "steps", "angles", "scale", "spread", "x0"],
        validate: pathwise_params,
        run: planar_pathwise,
    },
    Experiment {
        name: "sec6-ET-invariance",
        criteria: &["A3"],
        params: &["probes", "box", "angles"],
        validate: invariance_params,
        run: planar_equation_invariance,
    },
    Experiment {
        name: "sec6-reduction-B",
        criteria: &["A4"],
        params: &["grid", "half_width", "exclude_radius", "defect_probes"],
        validate: reduction_params,
        run: planar_reduction_gauge,
    },
    Experiment {
        name: "sec6-triangular",
        criteria: &["A5"],
        params: &["probes", "paths", "steps", "x0"],
        validate: triangular_params,
        run: planar_triangular,
    },
    Experiment {
        name: "sec6-bessel",
        criteria: &["A6"],
        params: &["paths", "dt", "times", "x0"],
        validate: bessel_params,
        run: planar_squared_radius,
    },
    Experiment {
        name: "alpha-stable-time",
        criteria: &["A9"],
        params: &["alphas", "rates", "seeds", "steps", "step"],
        validate: stable_params,
        run: alpha_stable_time,
    },
    Experiment {
        name: "levy-gauge-isotropic",
        criteria: &["A10"],
        params: &["angles", "samples", "diffusion", "rate", "jump_std"],
        validate: levy_params,
        run: levy_gauge_isotropic,
    },
    Experiment {
        name: "discrete-gauge-conjugation",
        criteria: &["A2"],
        params: &["angles", "samples", "scale", "spread"],
        validate: discrete_params,
        run: discrete_gauge_conjugation,
    },
    Experiment {
        name: "euler-gauge",
        criteria: &["A8"],
        params: &["seeds", "steps", "dt", "x0"],
        validate: euler_gauge_params,
        run: euler_gauge,
    },
    Experiment {
        name: "milstein-gauge-identity",
        criteria: &["A7"],
        params: &["coarse_steps", "fine_steps", "sequences", "horizon"],
        validate: identity_params,
        run: milstein_gauge_identity,
    },
    Experiment { name: "euler-determining", criteria: &["A11"], params: &["probes"], validate: probes_only, run: euler_determining },
    Experiment { name: "milstein-determining", criteria: &["A11"], params: &["probes"], validate: probes_only, run: milstein_determining },
    Experiment {
        name: "transform-algebra",
        criteria: &["A12"],
        params: &["instances", "probes"],
        validate: algebra_params,
        run: transform_algebra,
    },
    Experiment {
        name: "convergence-order",
        criteria: &["A13"],
        params: &["paths", "levels", "mu", "sigma", "x0"],
        validate: convergence_params,
        run: convergence_order,
    },
];

pub fn find(name: &str) -> Result<&'static Experiment, ConfigError> {
    EXPERIMENTS.iter().find(|e| e.name == name).ok_or_else(|| ConfigError::UnknownExperiment {
        name: name.into(),
        valid: EXPERIMENTS.iter().map(|e| e.name).collect::<Vec<_>>().join(", "),
    })
}

fn square(half: f64) -> Vec<(f64, f64)> {
    vec![(-half, half), (-half, half)]
}

fn rotations(angles: &[f64]) -> Vec<Vec<f64>> {
    angles.iter().map(|a| linalg::rotation2(*a)).collect()
}

fn point2(p: &Params, key: &str, default: [f64; 2]) -> Result<Vec<f64>, ConfigError> {
    let v = p.list(key, &default)?;
    if v.len() != 2 {
        return Err(ConfigError::BadParameter { key: key.into(), reason: "needs two coordinates".into() });
    }
    Ok(v)
}

// ---------------------------------------------------------------- A1

fn determining_params(p: &Params) -> Result<(), ConfigError> {
    p.count("probes", 200, 1)?;
    p.positive("box", 2.0)?;
    p.f64("perturbed_scale", 1.1)?;
    Ok(())
}

fn planar_determining(ctx: &RunContext) -> Result<Outcome> {
    let n = ctx.params.count("probes", 200, 1)?;
    let half = ctx.params.positive("box", 2.0)?;
    let scale = ctx.params.f64("perturbed_scale", 1.1)?;
    let pts = probe_grid(&square(half), &planar::driver_group(), n);
    let sde = planar::affine_sde();
    let act = planar::gauge_action();
    let exact = determining_residual(&sde, &planar::rotation_generator(), &act, None, &pts)?;
    let perturbed = determining_residual(&sde, &planar::rotation_generator_scaled(scale), &act, None, &pts)?;
    let mut table = Table::new("residuals", &["x1", "x2", "residual", "perturbed_residual"]);
    for (x, z) in &pts {
        let a = stosym_core::symmetry::determining_terms(&sde, &planar::rotation_generator(), &act, None, x, z)?;
        let b = stosym_core::symmetry::determining_terms(&sde, &planar::rotation_generator_scaled(scale), &act, None, x, z)?;
        table.push(vec![x[0], x[1], linalg::norm(&a), linalg::norm(&b)]);
    }
    Ok(Outcome {
        checks: vec![
            Check::at_most("A1", "rotation_residual", exact.max_abs, 1e-9),
            Check::at_least("A1", "perturbed_residual", perturbed.max_abs, 1e-2),
        ],
        tables: vec![table],
        paths: vec![],
    })
}

// ---------------------------------------------------------------- A2

fn pathwise_params(p: &Params) -> Result<(), ConfigError> {
    p.count("paths", 100, 1)?;
    p.count("steps", 1000, 1)?;
    p.list("angles", &[0.3, FRAC_PI_2])?;
    p.positive("scale", 0.95)?;
    p.positive("spread", 0.2)?;
    point2(p, "x0", [1.0, 0.5])?;
    Ok(())
}

fn planar_spec(seed: u64, steps: usize, c: f64, s: f64) -> DriverSpec {
    DriverSpec {
        kind: DriverKind::DiscreteIid { sampler: planar::conjugation_invariant_sampler(c, s), group: planar::driver_group() },
        seed,
        grid: vec![0.0, steps as f64],
    }
}

fn planar_pathwise(ctx: &RunContext) -> Result<Outcome> {
    let p = ctx.params;
    let (paths, steps) = (p.count("paths", 100, 1)?, p.count("steps", 1000, 1)?);
    let angles = p.list("angles", &[0.3, FRAC_PI_2])?;
    let (c, s) = (p.positive("scale", 0.95)?, p.positive("spread", 0.2)?);
    let x0 = point2(p, "x0", [1.0, 0.5])?;
    let spec = planar_spec(ctx.seed, steps, c, s);
    let sde = planar::affine_sde();
    let act = planar::gauge_action();
    let mut out = Outcome::default();
    for a in &angles {
        let rep = is_symmetry_pathwise(&sde, &planar::rotation(*a), &act, None, &spec, paths, &x0)?;
        out.checks.push(Check::at_most("A2", format!("pathwise_residual_a{a}"), rep.max_residual, 1e-10));
    }
    let z = sample(&spec)?;
    let x = solve_discrete(&sde, &z, &x0)?;
    let (xp, zp) = apply_p(&planar::rotation(angles[0]), &x, &z, &act, None)?;
    out.paths = vec![("state".into(), x), ("driver".into(), z), ("state_transformed".into(), xp), ("driver_transformed".into(), zp)];
    Ok(out)
}

// ---------------------------------------------------------------- A3

fn invariance_params(p: &Params) -> Result<(), ConfigError> {
    p.count("probes", 200, 1)?;
    p.positive("box", 2.0)?;
    p.list("angles", &[0.3, 1.0])?;
    Ok(())
}

fn planar_equation_invariance(ctx: &RunContext) -> Result<Outcome> {
    let p = ctx.params;
    let n = p.count("probes", 200, 1)?;
    let half = p.positive("box", 2.0)?;
    let angles = p.list("angles", &[0.3, 1.0])?;
    let pts = probe_grid(&square(half), &planar::driver_group(), n);
    let sde = planar::affine_sde();
    let act = planar::gauge_action();
    let mut out = Outcome::default();
    for a in &angles {
        let e = apply_e(&planar::rotation(*a), &sde, &act, None)?;
        let d = pts.iter().map(|(x, z)| linalg::max_abs_diff(&e.eval(x, z), &sde.eval(x, z))).fold(0.0, f64::max);
        out.checks.push(Check::at_most("A3", format!("equation_change_a{a}"), d, 1e-9));
    }
    let polar = apply_e(&planar::polar_transformation(), &sde, &act, None)?;
    let d = pts
        .iter()
        .filter(|(x, _)| linalg::norm(x) > 0.1)
        .map(|(x, z)| linalg::max_abs_diff(&polar.eval(x, z), &planar::strong_form(x, z)))
        .fold(0.0, f64::max);
    out.checks.push(Check::at_most("A3", "polar_gauge_vs_strong_form", d, 1e-9));
    Ok(out)
}

// ---------------------------------------------------------------- A4

fn reduction_params(p: &Params) -> Result<(), ConfigError> {
    p.count("grid", 20, 2)?;
    p.positive("half_width", 1.0)?;
    p.f64("exclude_radius", 0.1)?;
    p.count("defect_probes", 20, 1)?;
    Ok(())
}

fn planar_reduction_gauge(ctx: &RunContext) -> Result<Outcome> {
    let p = ctx.params;
    let n = p.count("grid", 20, 2)?;
    let half = p.positive("half_width", 1.0)?;
    let radius = p.f64("exclude_radius", 0.1)?;
    let n_defect = p.count("defect_probes", 20, 1)?;
    let v = planar::rotation_generator();
    let domain = square(half);
    let x0 = [half, 0.0];
    let cfg = ReductionConfig::default();
    let grid = solve_gauge_eta(&v, &x0, &domain, n, cfg)?;
    let solver = GaugeEtaSolver::new(v.clone(), &x0, &domain, cfg)?;
    let pushed = push_forward(&solver.transformation(), &v)?;
    let mut table = Table::new("gauge_grid", &["x1", "x2", "b11", "b12", "b21", "b22", "eta", "b_error", "pushed_c_norm"]);
    let (mut b_err, mut c_max, mut tau_max, mut missing) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    let kept: Vec<usize> = (0..grid.points.len()).filter(|&i| linalg::norm(&grid.points[i]) > radius).collect();
    let cs: Vec<(Vec<f64>, f64)> = kept.par_iter().map(|&i| (pushed.c(&grid.points[i]), pushed.tau(&grid.points[i]))).collect();
    for (&i, (c, tau)) in kept.iter().zip(&cs) {
        let x = &grid.points[i];
        let (Some(b), Some(eta)) = (&grid.b[i], grid.eta[i]) else {
            missing += 1;
            continue;
        };
        let e = linalg::max_abs_diff(b, &planar::polar_gauge(x));
        b_err = b_err.max(e);
        let cn = c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        c_max = c_max.max(if cn.is_finite() { cn } else { f64::INFINITY });
        tau_max = tau_max.max(tau.abs());
        table.push(vec![x[0], x[1], b[0], b[1], b[2], b[3], eta, e, cn]);
    }
    let stride = (kept.len() / n_defect).max(1);
    let probes: Vec<Vec<f64>> = kept.iter().step_by(stride).take(n_defect).map(|&i| grid.points[i].clone()).collect();
    let defect = transport_defect(&solver, &probes)?;
    Ok(Outcome {
        checks: vec![
            Check::at_most("A4", "failed_grid_nodes", missing as f64, 0.0),
            Check::at_most("A4", "gauge_matrix_error", b_err, 1e-6),
            Check::at_most("A4", "pushed_gauge_component", c_max, 1e-5),
            Check::at_most("A4", "pushed_time_component", tau_max, 1e-5),
            Check::at_most("A4", "transport_equation_defect", defect, 1e-5),
        ],
        tables: vec![table],
        paths: vec![],
    })
}

// ---------------------------------------------------------------- A5

fn triangular_params(p: &Params) -> Result<(), ConfigError> {
    p.count("probes", 200, 1)?;
    p.count("paths", 10, 1)?;
    p.count("steps", 200, 1)?;
    point2(p, "x0", [0.8, 0.6])?;
    Ok(())
}

fn planar_triangular(ctx: &RunContext) -> Result<Outcome> {
    let p = ctx.params;
    let n = p.count("probes", 200, 1)?;
    let (paths, steps) = (p.count("paths", 10, 1)?, p.count("steps", 200, 1)?);
    let x0 = point2(p, "x0", [0.8, 0.6])?;
    ensure!(linalg::norm(&x0) > 0.0, "the polar reduction needs x0 ≠ 0");
    let polar = planar::polar_sde();
    let tri = triangular_check(&polar, 1, &probe_grid(&[(-3.0, 3.0), (0.1, 4.0)], &planar::driver_group(), n))?;
    let orig = triangular_check(&planar::affine_sde(), 1, &probe_grid(&square(2.0), &planar::driver_group(), n))?;
    let sde = planar::affine_sde();
    let act = planar::gauge_action();
    let t = planar::polar_transformation();
    let (mut rec_err, mut inc_err) = (0.0f64, 0.0f64);
    let mut out = Outcome::default();
    let mut table = Table::new("reconstruction", &["t", "x1", "x2", "theta", "rho", "x1_reconstructed", "x2_reconstructed"]);
    for i in 0..paths {
        let z = sample(&planar_spec(ctx.seed.wrapping_add(i as u64), steps, 0.95, 0.2))?;
        let x = solve_discrete(&sde, &z, &x0)?;
        let (_, zp) = apply_p(&t, &x, &z, &act, None)?;
        let rho: Vec<Vec<f64>> = x.values.iter().map(|v| vec![v[0] * v[0] + v[1] * v[1]]).collect();
        let reduced = CadlagPath::new(PathSpace::Euclidean(1), PathStyle::DiscreteJump, z.times.clone(), rho)?;
        let rec = reconstruct(&reduced, &polar, &zp, &planar::to_polar(&x0), 1)?;
        for s in 0..x.len() {
            let back = planar::from_polar(&rec.values[s]);
            let scale = 1.0 + linalg::norm(&x.values[s]);
            rec_err = rec_err.max(linalg::max_abs_diff(&back, &x.values[s]) / scale);
            if s > 0 {
                let pred = polar.eval(&planar::to_polar(&x.values[s - 1]), &zp.increment(s)?);
                inc_err = inc_err.max(linalg::max_abs_diff(&planar::from_polar(&pred), &x.values[s]) / scale);
            }
            if i == 0 {
                let v = &x.values[s];
                table.push(vec![x.times[s], v[0], v[1], rec.values[s][0], rec.values[s][1], back[0], back[1]]);
            }
        }
    }
    out.checks = vec![
        Check::at_most("A5", "polar_independence_residual", tri.max_residual, 1e-9),
        Check::at_least("A5", "original_coordinates_dependence", orig.max_residual, 1e-3),
        Check::at_most("A5", "angle_reconstruction_error", rec_err, 1e-8),
        Check::at_most("A5", "polar_increment_residual", inc_err, 1e-8),
    ];
    out.tables.push(table);
    Ok(out)
}

// ---------------------------------------------------------------- A6

fn bessel_params(p: &Params) -> Result<(), ConfigError> {
    p.count("paths", 100_000, 2)?;
    p.positive("dt", 1e-3)?;
    p.list("times", &[0.5, 1.0])?;
    point2(p, "x0", [1.0, 0.0])?;
    Ok(())
}

fn planar_squared_radius(ctx: &RunContext) -> Result<Outcome> {
    let p = ctx.params;
    let paths = p.count("paths", 100_000, 2)?;
    let dt = p.positive("dt", 1e-3)?;
    let times = p.list("times", &[0.5, 1.0])?;
    let x0 = point2(p, "x0", [1.0, 0.0])?;
    ensure!(times.iter().all(|t| *t > 0.0), "observation times must be positive");
    let marks: Vec<usize> = times.iter().map(|t| (t / dt).round() as usize).collect();
    let last = *marks.iter().max().unwrap();
    let sde = planar::affine_sde();
    let sd = dt.sqrt();
    let seed = ctx.seed;
    let samples: Vec<Vec<f64>> = (0..paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            let mut x = x0.clone();
            let mut z = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
            let mut out = vec![0.0; marks.len()];
            for step in 1..=last {
                z[4] = sd * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                z[5] = sd * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                x = sde.eval(&x, &z);
                for (o, m) in out.iter_mut().zip(&marks) {
                    if *m == step {
                        *o = x[0] * x[0] + x[1] * x[1];
                    }
                }
            }
            out
        })
        .collect();
    let mut out = Outcome::default();
    let mut table = Table::new("squared_radius", &["t", "mean", "stderr", "oracle", "z_score"]);
    let r0 = x0[0] * x0[0] + x0[1] * x0[1];
    for (j, m) in marks.iter().enumerate() {
        let t = *m as f64 * dt;
        let col: Vec<f64> = samples.iter().map(|s| s[j]).collect();
        let (mean, se) = mc_mean_ci(&col)?;
        let oracle = r0 + 2.0 * t;
        let z = (mean - oracle).abs() / se;
        table.push(vec![t, mean, se, oracle, z]);
        out.checks.push(Check::at_most("A6", format!("mean_gap_in_stderr_t{t}"), z, 3.0));
    }
    out.tables.push(table);
    Ok(out)
}

// ---------------------------------------------------------------- A9

fn stable_params(p: &Params) -> Result<(), ConfigError> {
    let alphas = p.list("alphas", &[0.7, 1.0, 1.5])?;
    if alphas.iter().any(|a| !(*a > 0.0 && *a <= 2.0)) {
        return Err(ConfigError::BadParameter { key: "alphas".into(), reason: "each α must lie in (0, 2]".into() });
    }
    let rates = p.list("rates", &[2.0, 0.5])?;
    if rates.iter().any(|r| *r <= 0.0) {
        return Err(ConfigError::BadParameter { key: "rates".into(), reason: "must be positive".into() });
    }
    p.count("seeds", 100, 1)?;
    p.count("steps", 500, 50)?;
    p.positive("step", 0.25)?;
    Ok(())
}

/// Increments of `H_β(Γ_r(dZ))` for constant `β′ = r`.
fn time_changed_increments(z: &CadlagPath, alpha: f64, r: f64) -> Result<Vec<f64>> {
    let g = GroupDescriptor::Additive(1);
    let x = CadlagPath { space: PathSpace::Euclidean(1), jumps: vec![None; z.len()], ..z.clone() };
    let t = StochasticTransformation::new(
        1,
        1,
        Arc::new(|x: &[f64]| x.to_vec()),
        Some(Arc::new(|x: &[f64]| x.to_vec())),
        Arc::new(|_| vec![1.0]),
        Arc::new(move |_| r),
    );
    let (_, zp) = apply_p(&t, &x, z, &GaugeAction::trivial(g), Some(&TimeAction::power_scaling(1, 1.0 / alpha)))?;
    (1..zp.len()).map(|s| Ok(zp.increment(s)?[0])).collect()
}

fn alpha_stable_time(ctx: &RunContext) -> Result<Outcome> {
    let p = ctx.params;
    let alphas = p.list("alphas", &[0.7, 1.0, 1.5])?;
    let rates = p.list("rates", &[2.0, 0.5])?;
    let seeds = p.count("seeds", 100, 1)?;
    let steps = p.count("steps", 500, 50)?;
    let h = p.positive("step", 0.25)?;
    let need = (0.95 * seeds as f64).ceil();
    let mut out = Outcome::default();
    let mut table = Table::new("pass_counts", &["alpha", "rate", "two_sample_passes", "cauchy_passes", "seeds"]);
    for &alpha in &alphas {
        for &r in &rates {
            let (mut two, mut cauchy) = (0usize, 0usize);
            for i in 0..seeds {
                let seed = ctx.seed.wrapping_add(i as u64);
                let kind = DriverKind::AlphaStable { alpha, n: 1 };
                let z = sample(&DriverSpec { kind: kind.clone(), seed, grid: uniform_grid(steps as f64 * h, steps) })?;
                let mapped = time_changed_increments(&z, alpha, r)?;
                let reference =
                    sample(&DriverSpec { kind, seed: seed ^ 0x5bd1_e995_0000_0000, grid: uniform_grid(steps as f64 * h * r, steps) })?;
                let ref_inc: Vec<f64> = (1..reference.len()).map(|s| reference.values[s][0] - reference.values[s - 1][0]).collect();
                two += ks_two_sample(&mapped, &ref_inc, 0.01)?.pass as usize;
                if alpha == 1.0 {
                    let scale = r * h;
                    let cdf = cauchy_cdf();
                    cauchy += ks_one_sample(&mapped, |x| cdf(x / scale), 0.01)?.pass as usize;
                }
            }
            out.checks.push(Check::at_least("A9", format!("two_sample_passes_alpha{alpha}_r{r}"), two as f64, need));
            if alpha == 1.0 {
                out.checks.push(Check::at_least("A9", format!("cauchy_passes_r{r}"), cauchy as f64, need));
            }
            table.push(vec![alpha, r, two as f64, if alpha == 1.0 { cauchy as f64 } else { f64::NAN }, seeds as f64]);
        }
    }
    out.tables.push(table);
    Ok(out)
}

// ---------------------------------------------------------------- A10

fn levy_params(p: &Params) -> Result<(), ConfigError> {
    p.list("angles", &[0.4, 1.3, 2.9])?;
    p.count("samples", 20_000, 50)?;
    p.positive("diffusion", 0.75)?;
    p.positive("rate", 2.0)?;
    p.positive("jump_std", 0.8)?;
    Ok(())
}

/// Worst statistic-to-threshold ratio among conditions whose label starts with `prefix`.
fn worst_ratio(r: &LawCheckReport, prefix: &str) -> f64 {
    r.conditions
        .iter()
        .filter(|c| c.label.starts_with(prefix))
        .map(|c| {
            if c.threshold > 0.0 {
                c.statistic / c.threshold
            } else if c.statistic == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

fn worst_statistic(r: &LawCheckReport, prefix: &str) -> f64 {
    r.conditions.iter().filter(|c| c.label.starts_with(prefix)).map(|c| c.statistic).fold(0.0, f64::max)
}

fn levy_gauge_isotropic(ctx: &RunContext) -> Result<Outcome> {
    let p = ctx.params;
    let angles = p.list("angles", &[0.4, 1.3, 2.9])?;
    let n = p.count("samples", 20_000, 50)?;
    let d = p.positive("diffusion", 0.75)?;
    let rate = p.positive("rate", 2.0)?;
    let std = p.positive("jump_std", 0.8)?;
    let iso = CharacteristicTriplet {
        b0: vec![0.0, 0.0],
        a0: vec![d, 0.0, 0.0, d],
        nu0: JumpMeasure::Finite { rate, law: JumpLaw::Gaussian { mean: vec![0.0, 0.0], std } },
        truncation: Truncation::UnitBall,
    };
    let act = GaugeAction::rotation(2);
    let rep = check_levy_gauge(&iso, &act, &rotations(&angles), n, ctx.seed)?;
    let mut aniso = iso.clone();
    aniso.a0 = vec![1.0, 0.0, 0.0, 2.0];
    let bad = check_levy_gauge(&aniso, &act, &rotations(&[FRAC_PI_4]), n, ctx.seed)?;
    let mut table = Table::new("conditions", &["triplet", "index", "statistic", "threshold", "pass"]);
    for (tag, r) in [(0.0, &rep), (1.0, &bad)] {
        for (i, c) in r.conditions.iter().enumerate() {
            table.push(vec![tag, i as f64, c.statistic, c.threshold, c.pass as u8 as f64]);
        }
    }
    Ok(Outcome {
        checks: vec![
            Check::at_most("A10", "isotropic_diffusion_defect", worst_statistic(&rep, "diffusion"), 1e-9),
            Check::at_most("A10", "isotropic_measure_ks_ratio", worst_ratio(&rep, "measure"), 1.0),
            Check::at_most("A10", "isotropic_drift_stderr_ratio", worst_ratio(&rep, "drift"), 1.0),
            Check::at_least("A10", "anisotropic_diffusion_defect", worst_statistic(&bad, "diffusion"), 1e-9),
        ],
        tables: vec![table],
        paths: vec![],
    })
}

// ---------------------------------------------------------------- law of the planar driver

fn discrete_params(p: &Params) -> Result<(), ConfigError> {
    p.list("angles", &[0.3, 1.1, 2.5])?;
    p.count("samples", 5000, 50)?;
    p.positive("scale", 0.95)?;
    p.positive("spread", 0.2)?;
    Ok(())
}

fn discrete_gauge_conjugation(ctx: &RunContext) -> Result<Outcome> {
    let p = ctx.params;
    let angles = p.list("angles", &[0.3, 1.1, 2.5])?;
    let n = p.count("samples", 5000, 50)?;
    let (c, s) = (p.positive("scale", 0.95)?, p.positive("spread", 0.2)?);
    let act = planar::gauge_action();
    let good = check_discrete_gauge(&planar::conjugation_invariant_sampler(c, s), &act, &rotations(&angles), n, ctx.seed)?;
    let base = planar::conjugation_invariant_sampler(c, s);
    let shifted: IncrementSampler = Arc::new(move |rng: &mut StosymRng| {
        let mut v = base(rng);
        v[4] += 1.0;
        v
    });
    let bad = check_discrete_gauge(&shifted, &act, &rotations(&[FRAC_PI_2]), n, ctx.seed)?;
    Ok(Outcome {
        checks: vec![
            Check::at_most("A2", "invariant_law_ks_ratio", worst_ratio(&good, "measure"), 1.0),
            Check::at_least("A2", "shifted_law_ks_ratio", worst_ratio(&bad, "measure"), 1.0),
        ],
        tables: vec![],
        paths: vec![],
    })
}

// ---------------------------------------------------------------- A8

fn euler_gauge_params(p: &Params) -> Result<(), ConfigError> {
    p.count("seeds", 100, 1)?;
    p.count("steps", 500, 25)?;
    p.positive("dt", 0.01)?;
    point2(p, "x0", [0.5, -0.3])?;
    Ok(())
}

/// A predictable, state-dependent rotation.
fn state_rotation(x: &[f64]) -> Vec<f64> {
    linalg::rotation2(3.0 * x[0] + x[1] * x[1])
}

fn euler_gauge(ctx: &RunContext) -> Result<Outcome> {
    let p = ctx.params;
    let seeds = p.count("seeds", 100, 1)?;
    let steps = p.count("steps", 500, 25)?;
    let dt = p.positive("dt", 0.01)?;
    let x0 = point2(p, "x0", [0.5, -0.3])?;
    let sde = isotropic_plane();
    let mut passes = 0usize;
    let mut first = None;
    for i in 0..seeds {
        let w = sample(&DriverSpec {
            kind: DriverKind::Brownian(2),
            seed: ctx.seed.wrapping_add(i as u64),
            grid: uniform_grid(steps as f64 * dt, steps),
        })?;
        let noise = DiscretizedNoise::from_path(&w)?;
        let (x, rotated) = euler_solve_state_rotated(&sde, &noise, &x0, state_rotation)?;
        let pooled: Vec<f64> = rotated.dw.iter().flatten().cloned().collect();
        passes += ks_one_sample(&pooled, normal_cdf(dt), 0.01)?.pass as usize;
        if first.is_none() {
            first = Some(x);
        }
    }
    Ok(Outcome {
        checks: vec![Check::at_least("A8", "ks_passes", passes as f64, (0.95 * seeds as f64).ceil())],
        tables: vec![],
        paths: first.map(|x| vec![("state".into(), x)]).unwrap_or_default(),
    })
}

// ---------------------------------------------------------------- A7

fn identity_params(p: &Params) -> Result<(), ConfigError> {
    p.count("coarse_steps", 10, 1)?;
    p.count("fine_steps", 1000, 1)?;
    p.count("sequences", 20, 1)?;
    p.positive("horizon", 1.0)?;
    Ok(())
}

fn milstein_gauge_identity(ctx: &RunContext) -> Result<Outcome> {
    let p = ctx.params;
    let coarse = p.count("coarse_steps", 10, 1)?;
    let fine = p.count("fine_steps", 1000, 1)?;
    let sequences = p.count("sequences", 20, 1)?;
    let horizon = p.positive("horizon", 1.0)?;
    let total = coarse * fine;
    let mut worst = 0.0f64;
    let mut table = Table::new("errors", &["sequence", "relative_error"]);
    for i in 0..sequences {
        let seed = ctx.seed.wrapping_add(i as u64);
        let w = sample(&DriverSpec { kind: DriverKind::Brownian(2), seed, grid: uniform_grid(horizon, total) })?;
        let knots: Vec<f64> = (0..=coarse).map(|l| w.times[l * fine]).collect();
        let noise = levy_area(&w, &knots)?;
        // Each angle depends on a random offset and the path up to the start of its step.
        let mut rng = substream(seed, 1);
        let bs: Vec<Vec<f64>> = (0..coarse).map(|l| linalg::rotation2(rng.random_range(-3.0..3.0) + w.values[l * fine][0])).collect();
        let lhs = gauge_rotate_milstein(&bs, &noise)?.milstein_path()?;
        let mut values = vec![vec![0.0, 0.0]];
        for s in 1..w.len() {
            let d: Vec<f64> = w.values[s].iter().zip(&w.values[s - 1]).map(|(a, b)| a - b).collect();
            let rd = linalg::mat_vec(&bs[(s - 1) / fine], &d, 2, 2);
            let prev = values.last().unwrap();
            values.push(vec![prev[0] + rd[0], prev[1] + rd[1]]);
        }
        let rotated = CadlagPath::new(w.space.clone(), PathStyle::GridSampled, w.times.clone(), values)?;
        let rhs = levy_area(&rotated, &knots)?.milstein_path()?;
        let scale = rhs.values.iter().flatten().fold(1.0f64, |a, v| a.max(v.abs()));
        let err = lhs.values.iter().zip(&rhs.values).map(|(a, b)| linalg::max_abs_diff(a, b)).fold(0.0, f64::max) / scale;
        table.push(vec![i as f64, err]);
        worst = worst.max(err);
    }
    Ok(Outcome { checks: vec![Check::at_most("A7", "relative_error", worst, 1e-12)], tables: vec![table], paths: vec![] })
}

// ---------------------------------------------------------------- A11

fn probes_only(p: &Params) -> Result<(), ConfigError> {
    p.count("probes", 200, 1)?;
    Ok(())
}

fn flat_diffusion() -> BrownianSde {
    BrownianSde::new(2, 2, Arc::new(|_| vec![0.0; 2]), Arc::new(|_| linalg::identity(2))).with_d_sigma(Arc::new(|_| vec![0.0; 8]))
}

fn gbm(mu: f64, sigma: f64) -> BrownianSde {
    BrownianSde::new(1, 1, Arc::new(move |x| vec![mu * x[0]]), Arc::new(move |x| vec![sigma * x[0]]))
        .with_d_sigma(Arc::new(move |_| vec![sigma]))
}

fn scaling_generator() -> InfinitesimalStochasticTransformation {
    InfinitesimalStochasticTransformation::new(1, 1, Arc::new(|x| vec![x[0]]), Arc::new(|_| vec![0.0]), Arc::new(|_| 0.0))
        .with_jacobian(Arc::new(|_| vec![1.0]))
}

fn euler_determining(ctx: &RunContext) -> Result<Outcome> {
    let n = ctx.params.count("probes", 200, 1)?;
    let strip = |pts: Vec<SchemeProbe>| -> Vec<(Vec<f64>, f64, Vec<f64>)> { pts.into_iter().map(|(x, dt, dw, _)| (x, dt, dw)).collect() };
    let p2 = strip(scheme_probe_points(&square(2.0), 2, n));
    let p1 = strip(scheme_probe_points(&[(-2.0, 2.0)], 1, n));
    let rot = planar::rotation_generator();
    let linear = [
        euler_determining_residual(&flat_diffusion(), &rot, &p2).max_abs,
        euler_determining_residual(&isotropic_plane(), &rot, &p2).max_abs,
        euler_determining_residual(&gbm(0.3, 0.5), &scaling_generator(), &p1).max_abs,
    ];
    let one = BrownianSde::new(1, 1, Arc::new(|_| vec![0.0]), Arc::new(|_| vec![1.0])).with_d_sigma(Arc::new(|_| vec![0.0]));
    let quad =
        InfinitesimalStochasticTransformation::new(1, 1, Arc::new(|x| vec![x[0] * x[0]]), Arc::new(|_| vec![0.0]), Arc::new(|_| 0.0))
            .with_jacobian(Arc::new(|x| vec![2.0 * x[0]]));
    let mut gap = 0.0f64;
    let mut table = Table::new("quadratic_counterexample", &["x", "dt", "dw", "linearity_defect", "dw_squared"]);
    for (x, dt, dw) in &p1 {
        let r = euler_terms(&one, &quad, x, *dt, dw);
        gap = gap.max((r.linearity_defect[0] - dw[0] * dw[0]).abs());
        table.push(vec![x[0], *dt, dw[0], r.linearity_defect[0], dw[0] * dw[0]]);
    }
    Ok(Outcome {
        checks: vec![
            Check::at_most("A11", "euler_flat_rotation", linear[0], 1e-9),
            Check::at_most("A11", "euler_isotropic_rotation", linear[1], 1e-9),
            Check::at_most("A11", "euler_gbm_scaling", linear[2], 1e-9),
            Check::at_most("A11", "euler_quadratic_defect_minus_dw2", gap, 1e-12),
        ],
        tables: vec![table],
        paths: vec![],
    })
}

fn milstein_determining(ctx: &RunContext) -> Result<Outcome> {
    let n = ctx.params.count("probes", 200, 1)?;
    let p2 = scheme_probe_points(&square(2.0), 2, n);
    let p1 = scheme_probe_points(&[(-2.0, 2.0)], 1, n);
    let rot = planar::rotation_generator();
    let quad_phase = {
        let gen = InfinitesimalStochasticTransformation::new(
            2,
            2,
            Arc::new(|_| vec![1.0, 0.0]),
            Arc::new(|x| planar::ROTATION_GENERATOR.iter().map(|r| -x[0] * r).collect()),
            Arc::new(|_| 0.0),
        )
        .with_jacobian(Arc::new(|_| vec![0.0; 4]));
        let sde = rotating_diffusion(Arc::new(|t| 0.5 * t * t), Arc::new(|t| t));
        milstein_determining_residual(&sde, &gen, &p2).max_abs
    };
    Ok(Outcome {
        checks: vec![
            Check::at_most("A11", "milstein_flat_rotation", milstein_determining_residual(&flat_diffusion(), &rot, &p2).max_abs, 1e-9),
            Check::at_most(
                "A11",
                "milstein_isotropic_rotation",
                milstein_determining_residual(&isotropic_plane(), &rot, &p2).max_abs,
                1e-9,
            ),
            Check::at_most(
                "A11",
                "milstein_gbm_scaling",
                milstein_determining_residual(&gbm(0.3, 0.5), &scaling_generator(), &p1).max_abs,
                1e-9,
            ),
            Check::at_least("A11", "milstein_state_dependent_gauge_residual", quad_phase, 1e-3),
        ],
        tables: vec![],
        paths: vec![],
    })
}

// ---------------------------------------------------------------- A12

fn algebra_params(p: &Params) -> Result<(), ConfigError> {
    p.count("instances", 100, 1)?;
    p.count("probes", 10, 1)?;
    Ok(())
}

/// `Φ(x) = shear(A x)` with `shear(y) = (y¹ + ε(y²)², y²)`, a state-dependent
/// rotation gauge and, optionally, a non-constant time factor.
fn random_transformation(rng: &mut StosymRng, with_time: bool) -> StochasticTransformation {
    let s = rng.random_range(0.7..1.4);
    let a: Vec<f64> = linalg::rotation2(rng.random_range(-3.0..3.0)).iter().map(|v| v * s).collect();
    let a_inv = linalg::inverse(&a, 2, 1e-12).expect("scaled rotations are invertible");
    let eps = rng.random_range(-0.2..0.2);
    let (c0, c1, c2) = (rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let d = if with_time { rng.random_range(0.2..0.8) } else { 0.0 };
    let (a1, a2) = (a.clone(), a.clone());
    let eta: ScalarFn = Arc::new(move |x: &[f64]| 1.0 + d * (x[1]).sin().powi(2));
    StochasticTransformation::new(
        2,
        2,
        Arc::new(move |x| {
            let y = linalg::mat_vec(&a1, x, 2, 2);
            vec![y[0] + eps * y[1] * y[1], y[1]]
        }),
        Some(Arc::new(move |x| linalg::mat_vec(&a_inv, &[x[0] - eps * x[1] * x[1], x[1]], 2, 2))),
        Arc::new(move |x| linalg::rotation2(c0 + c1 * x[0] + c2 * x[1] * x[1])),
        eta,
    )
    .with_jacobian(Arc::new(move |x| {
        let y = linalg::mat_vec(&a2, x, 2, 2);
        let shear = [1.0, 2.0 * eps * y[1], 0.0, 1.0];
        linalg::mat_mul(&shear, &a2, 2, 2, 2)
    }))
}

fn random_generator(rng: &mut StosymRng) -> InfinitesimalStochasticTransformation {
    let m: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let q = rng.random_range(-0.5..0.5);
    let (k0, k1) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let (t0, t1) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let mj = m.clone();
    let y: StateFn = Arc::new(move |x| {
        let l = linalg::mat_vec(&m, x, 2, 2);
        vec![l[0] + q * x[1] * x[1], l[1]]
    });
    InfinitesimalStochasticTransformation::new(
        2,
        2,
        y,
        Arc::new(move |x| planar::ROTATION_GENERATOR.iter().map(|r| (k0 + k1 * x[0] * x[1]) * r).collect()),
        Arc::new(move |x| t0 + t1 * x[0]),
    )
    .with_jacobian(Arc::new(move |x| vec![mj[0], mj[1] + 2.0 * q * x[1], mj[2], mj[3]]))
}

fn transform_algebra(ctx: &RunContext) -> Result<Outcome> {
    let p = ctx.params;
    let instances = p.count("instances", 100, 1)?;
    let n_probe = p.count("probes", 10, 1)?;
    let mut rng = substream(ctx.seed, 0);
    let sde = planar::affine_sde();
    let act = planar::gauge_action();
    let id = StochasticTransformation::identity(2, 2);
    let (mut assoc, mut inverse, mut functor, mut hom) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut table = Table::new("defects", &["instance", "associativity", "inverse", "functoriality", "bracket_homomorphism"]);
    for i in 0..instances {
        let probes: Vec<Vec<f64>> = (0..n_probe).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let t1 = random_transformation(&mut rng, true);
        let t2 = random_transformation(&mut rng, true);
        let t3 = random_transformation(&mut rng, true);
        let a = compose(&compose(&t3, &t2), &t1).distance(&compose(&t3, &compose(&t2, &t1)), &probes);
        let inv = invert(&t1)?;
        let b = compose(&t1, &inv).distance(&id, &probes).max(compose(&inv, &t1).distance(&id, &probes));
        let g1 = random_transformation(&mut rng, false);
        let g2 = random_transformation(&mut rng, false);
        let whole = apply_e(&compose(&g2, &g1), &sde, &act, None)?;
        let staged = apply_e(&g2, &apply_e(&g1, &sde, &act, None)?, &act, None)?;
        let zs = probe_grid(&square(1.0), &planar::driver_group(), n_probe);
        let c = probes.iter().zip(&zs).map(|(x, (_, z))| linalg::max_abs_diff(&whole.eval(x, z), &staged.eval(x, z))).fold(0.0, f64::max);
        let (v1, v2) = (random_generator(&mut rng), random_generator(&mut rng));
        let lhs = push_forward(&t1, &bracket(&v1, &v2))?;
        let rhs = bracket(&push_forward(&t1, &v1)?, &push_forward(&t1, &v2)?);
        let d = lhs.distance(&rhs, &probes);
        table.push(vec![i as f64, a, b, c, d]);
        assoc = assoc.max(a);
        inverse = inverse.max(b);
        functor = functor.max(c);
        hom = hom.max(d);
    }
    Ok(Outcome {
        checks: vec![
            Check::at_most("A12", "composition_associativity", assoc, 1e-5),
            Check::at_most("A12", "two_sided_inverse", inverse, 1e-5),
            Check::at_most("A12", "equation_map_functoriality", functor, 1e-5),
            Check::at_most("A12", "push_forward_bracket_homomorphism", hom, 1e-5),
        ],
        tables: vec![table],
        paths: vec![],
    })
}

// ---------------------------------------------------------------- A13

fn convergence_params(p: &Params) -> Result<(), ConfigError> {
    p.count("paths", 1000, 2)?;
    let levels = p.list("levels", &[4.0, 5.0, 6.0, 7.0])?;
    if levels.len() < 2 || levels.iter().any(|l| l.fract() != 0.0 || *l < 0.0 || *l > 20.0) {
        return Err(ConfigError::BadParameter { key: "levels".into(), reason: "needs at least two integer levels in 0..=20".into() });
    }
    p.f64("mu", 0.1)?;
    p.positive("sigma", 0.5)?;
    p.positive("x0", 1.0)?;
    Ok(())
}

/// Least-squares slope of `ys` against `xs`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn convergence_order(ctx: &RunContext) -> Result<Outcome> {
    let p = ctx.params;
    let paths = p.count("paths", 1000, 2)?;
    let levels: Vec<u32> = p.list("levels", &[4.0, 5.0, 6.0, 7.0])?.iter().map(|l| *l as u32).collect();
    let (mu, sigma, x0) = (p.f64("mu", 0.1)?, p.positive("sigma", 0.5)?, p.positive("x0", 1.0)?);
    let finest = *levels.iter().max().unwrap();
    let n_fine = 1usize << finest;
    let sde = gbm(mu, sigma);
    let seed = ctx.seed;
    let per_path: Vec<Vec<(f64, f64)>> = (0..paths)
        .into_par_iter()
        .map(|i| -> Result<Vec<(f64, f64)>> {
            let w =
                sample(&DriverSpec { kind: DriverKind::Brownian(1), seed: seed.wrapping_add(i as u64), grid: uniform_grid(1.0, n_fine) })?;
            let dw: Vec<f64> = (1..w.len()).map(|s| w.values[s][0] - w.values[s - 1][0]).collect();
            let fine = DiscretizedNoise::scalar_with_closed_form(w.times.clone(), dw)?;
            let exact = x0 * ((mu - 0.5 * sigma * sigma) + sigma * w.final_value()[0]).exp();
            levels
                .iter()
                .map(|&l| {
                    let noise = fine.coarsen(1 << (finest - l))?;
                    let e = euler_solve(&sde, &noise, &[x0])?.final_value()[0];
                    let m = milstein_solve(&sde, &noise, &[x0])?.final_value()[0];
                    Ok(((e - exact).abs(), (m - exact).abs()))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let log_h: Vec<f64> = levels.iter().map(|l| -(*l as f64)).collect();
    let mut table = Table::new("strong_errors", &["log2_step", "euler_error", "milstein_error"]);
    let (mut le, mut lm) = (Vec::new(), Vec::new());
    for (j, lh) in log_h.iter().enumerate() {
        let e = per_path.iter().map(|v| v[j].0).sum::<f64>() / paths as f64;
        let m = per_path.iter().map(|v| v[j].1).sum::<f64>() / paths as f64;
        table.push(vec![*lh, e, m]);
        le.push(e.log2());
        lm.push(m.log2());
    }
    let (se, sm) = (slope(&log_h, &le), slope(&log_h, &lm));
    Ok(Outcome {
        checks: vec![
            Check::at_most("A13", format!("euler_slope_gap(slope={se:.3})"), (se - 0.5).abs(), 0.2),
            Check::at_most("A13", format!("milstein_slope_gap(slope={sm:.3})"), (sm - 1.0).abs(), 0.2),
        ],
        tables: vec![table],
        paths: vec![],
    })
}

/// Used by the CLI to reject configurations before any work starts.
pub fn validate(exp: &Experiment, params: &Params) -> Result<(), ConfigError> {
    params.check_keys(exp.name, exp.params)?;
    (exp.validate)(params)
}

pub fn run(exp: &Experiment, seed: u64, params: &Params) -> Result<Outcome> {
    (exp.run)(&RunContext { seed, params }).with_context(|| format!("experiment {} failed", exp.name))
}
