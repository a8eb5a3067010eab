//! Public-API workflows across modules.

use proptest::prelude::*;
use stosym_core::linalg;
use stosym_core::noise::{sample, DriverKind, DriverSpec};
use stosym_core::planar;
use stosym_core::sde::solve_discrete;
use stosym_core::symmetry::{determining_residual, is_symmetry_pathwise, probe_grid};
use stosym_core::transform::apply_p;

fn planar_spec(seed: u64, steps: usize) -> DriverSpec {
    DriverSpec {
        kind: DriverKind::DiscreteIid { sampler: planar::conjugation_invariant_sampler(0.95, 0.2), group: planar::driver_group() },
        seed,
        grid: vec![0.0, steps as f64],
    }
}

#[test]
fn infinitesimal_and_finite_symmetry_agree() {
    let sde = planar::affine_sde();
    let act = planar::gauge_action();
    let pts = probe_grid(&[(-1.0, 1.0), (-1.0, 1.0)], &planar::driver_group(), 50);
    let r = determining_residual(&sde, &planar::rotation_generator(), &act, None, &pts).unwrap();
    assert!(r.pass, "{}", r.max_abs);
    let p = is_symmetry_pathwise(&sde, &planar::rotation(0.8), &act, None, &planar_spec(4, 100), 5, &[0.2, -1.0]).unwrap();
    assert!(p.pass, "{}", p.max_residual);
}

#[test]
fn reduced_angle_and_radius_reproduce_the_state() {
    let sde = planar::affine_sde();
    let z = sample(&planar_spec(9, 60)).unwrap();
    let x = solve_discrete(&sde, &z, &[0.6, 0.8]).unwrap();
    let (_, zp) = apply_p(&planar::polar_transformation(), &x, &z, &planar::gauge_action(), None).unwrap();
    let y = solve_discrete(&planar::polar_sde(), &zp, &planar::to_polar(&x.values[0])).unwrap();
    for (orig, polar) in x.values.iter().zip(&y.values) {
        assert!(linalg::max_abs_diff(&planar::from_polar(polar), orig) < 1e-9 * (1.0 + linalg::norm(orig)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Rotating the initial state and the driver rotates the whole solution.
    #[test]
    fn rotated_solution_is_solution_of_rotated_data(angle in -3.1f64..3.1, seed in 0u64..1000, x1 in -2.0f64..2.0, x2 in -2.0f64..2.0) {
        let sde = planar::affine_sde();
        let act = planar::gauge_action();
        let t = planar::rotation(angle);
        let z = sample(&planar_spec(seed, 30)).unwrap();
        let x = solve_discrete(&sde, &z, &[x1, x2]).unwrap();
        let (xp, zp) = apply_p(&t, &x, &z, &act, None).unwrap();
        let y = solve_discrete(&sde, &zp, &xp.values[0]).unwrap();
        for (a, b) in y.values.iter().zip(&xp.values) {
            prop_assert!(linalg::max_abs_diff(a, b) < 1e-9 * (1.0 + linalg::norm(b)));
        }
    }
}
