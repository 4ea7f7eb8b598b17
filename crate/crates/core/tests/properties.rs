use std::sync::Arc;

use approx::assert_relative_eq;
use nlfb::*;
use proptest::prelude::*;

fn grid_1d() -> Arc<Grid> {
    Arc::new(Grid::build(1, 0.1, 1.0, 2.0).unwrap())
}

fn grid_2d() -> Arc<Grid> {
    Arc::new(Grid::build(2, 0.2, 1.0, 2.0).unwrap())
}

fn field_from(grid: &Arc<Grid>, coeffs: &[f64]) -> Field {
    sample_field(grid, |x| {
        coeffs[0] + coeffs[1] * (3.0 * x[0]).sin() + coeffs[2] * x.iter().map(|v| v * v).sum::<f64>()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kernels_are_symmetric(s in 0.05..0.95f64, x in -2.0..2.0f64, y in -2.0..2.0f64, z in -2.0..2.0f64) {
        prop_assume!((x - y).abs() > 1e-3);
        let kernels = [
            KernelSpec::fractional(2, s).unwrap(),
            KernelSpec::modulated(2, s, 1.0, 3.0, 2.5).unwrap(),
            KernelSpec::checkerboard(2, s, 1.0, 2.0, 0.3, vec![1.0, 1.5, 2.0]).unwrap(),
        ];
        for k in &kernels {
            let a = eval_kernel(k, &[x, z], &[y, -z]).unwrap();
            let b = eval_kernel(k, &[y, -z], &[x, z]).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn rescaled_kernel_matches_definition(s in 0.1..0.9f64, r in 0.2..3.0f64, x0 in -1.0..1.0f64,
                                          x in -1.0..1.0f64, y in -1.0..1.0f64) {
        prop_assume!((x - y).abs() > 1e-2);
        let k = KernelSpec::modulated(1, s, 0.5, 1.5, 4.0).unwrap();
        let kr = rescale_kernel(&k, &[x0], r).unwrap();
        let lhs = eval_kernel(&kr, &[x], &[y]).unwrap();
        let rhs = r.powf(1.0 + 2.0 * s) * eval_kernel(&k, &[x0 + r * x], &[x0 + r * y]).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs());
    }

    #[test]
    fn energy_is_nonnegative_and_quadratic(c in prop::array::uniform3(-2.0..2.0f64), t in -3.0..3.0f64) {
        let grid = grid_2d();
        let form = assemble_form(&KernelSpec::fractional(2, 0.4).unwrap(), &grid).unwrap();
        let u = field_from(&grid, &c);
        let e = dirichlet_energy(&form, &u).unwrap();
        prop_assert!(e >= 0.0);
        let tu = Field::new(grid.clone(), u.values.iter().map(|v| t * v).collect()).unwrap();
        let et = dirichlet_energy(&form, &tu).unwrap();
        prop_assert!((et - t * t * e).abs() <= 1e-10 * (1.0 + e));
    }

    #[test]
    fn parallelogram_law(a in prop::array::uniform3(-1.0..1.0f64), b in prop::array::uniform3(-1.0..1.0f64)) {
        let grid = grid_1d();
        let form = assemble_form(&KernelSpec::modulated(1, 0.6, 1.0, 2.0, 2.0).unwrap(), &grid).unwrap();
        let u = field_from(&grid, &a);
        let v = field_from(&grid, &b);
        let combine = |sign: f64| {
            let vals = u.values.iter().zip(&v.values).map(|(x, y)| x + sign * y).collect();
            dirichlet_energy(&form, &Field::new(grid.clone(), vals).unwrap()).unwrap()
        };
        let lhs = combine(1.0) + combine(-1.0);
        let rhs = 2.0 * dirichlet_energy(&form, &u).unwrap() + 2.0 * dirichlet_energy(&form, &v).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs));
    }

    #[test]
    fn tail_is_linear(a in prop::array::uniform3(-1.0..1.0f64), b in prop::array::uniform3(-1.0..1.0f64),
                      alpha in -2.0..2.0f64, s in 0.2..0.8f64) {
        let grid = grid_1d();
        let u = field_from(&grid, &a);
        let v = field_from(&grid, &b);
        let w = Field::new(grid.clone(), u.values.iter().zip(&v.values).map(|(x, y)| alpha * x + y).collect()).unwrap();
        let tu = tail(&u, &[0.1], 0.5, s).unwrap();
        let tv = tail(&v, &[0.1], 0.5, s).unwrap();
        let tw = tail(&w, &[0.1], 0.5, s).unwrap();
        prop_assert!((tw - alpha * tu - tv).abs() <= 1e-10 * (1.0 + tu.abs() + tv.abs()));
    }

    #[test]
    fn energy_splits_into_dirichlet_and_volume(c in prop::array::uniform3(-1.0..1.0f64), rho in 0.0..2.0f64,
                                                xi in -0.5..0.5f64) {
        let grid = grid_2d();
        let form = assemble_form(&KernelSpec::fractional(2, 0.5).unwrap(), &grid).unwrap();
        let u = field_from(&grid, &c);
        let b = total_energy(&form, &u, rho, xi).unwrap();
        let count = grid.interior().iter().filter(|&&i| u.values[i] > xi).count();
        prop_assert_eq!(b.support_count, count);
        assert_relative_eq!(b.dirichlet, dirichlet_energy(&form, &u).unwrap(), max_relative = 1e-14);
        assert_relative_eq!(b.volume, rho * count as f64 * grid.cell_measure, max_relative = 1e-14, epsilon = 1e-300);
        assert_relative_eq!(b.total, b.dirichlet + b.volume, max_relative = 1e-14, epsilon = 1e-300);
    }

    #[test]
    fn free_boundary_matches_edge_scan(c in prop::array::uniform3(-1.0..1.0f64), xi in -0.3..0.3f64) {
        let grid = grid_2d();
        let u = field_from(&grid, &c);
        let fb = free_boundary(&u, xi);
        let mut pairs = Vec::new();
        for &i in grid.interior() {
            for &j in grid.interior() {
                let step: f64 = grid.position(i).iter().zip(grid.position(j)).map(|(a, b)| (a - b).abs()).sum();
                let adjacent = (step - grid.h).abs() < 1e-9 * grid.h;
                if adjacent && u.values[i] <= xi && u.values[j] > xi {
                    pairs.push((i, j));
                }
            }
        }
        let mut found = fb.pairs.clone();
        found.sort_unstable();
        pairs.sort_unstable();
        prop_assert_eq!(found, pairs);
    }

    #[test]
    fn growth_slope_is_scale_invariant(amp in 0.1..10.0f64, s in 0.2..0.8f64) {
        let grid = Arc::new(Grid::build(1, 0.005, 1.0, 2.0).unwrap());
        let profile = |a: f64| sample_field(&grid, |x| a * x[0].max(0.0).powf(s)).unwrap();
        let base = growth_exponent(&profile(1.0), &[0.0], 0.02, 0.5, 5).unwrap();
        let scaled = growth_exponent(&profile(amp), &[0.0], 0.02, 0.5, 5).unwrap();
        prop_assert!((base.slope - scaled.slope).abs() < 1e-9);
        prop_assert!((base.slope - s).abs() < 0.05);
    }
}

#[test]
fn coordinate_descent_never_increases_energy() {
    let grid = grid_1d();
    let kernel = KernelSpec::fractional(1, 0.5).unwrap();
    let g = sample_field(&grid, |x| if x[0] >= 1.0 { 1.0 } else { 0.3 }).unwrap();
    for (phase, xi) in [(Phase::OnePhase, 0.0), (Phase::TwoPhase, 0.2)] {
        let problem = Problem::assemble(&kernel, &grid, &g, 0.4, xi, phase).unwrap();
        let values = (0..grid.len())
            .map(|i| {
                if grid.is_interior(i) {
                    0.5 + 0.4 * (5.0 * grid.position(i)[0]).cos()
                } else {
                    g.values[i]
                }
            })
            .collect();
        let init = Field::new(grid.clone(), values).unwrap();
        let result = coordinate_descent(&problem, &init, 5).unwrap();
        assert!(result.trace.len() >= 2);
        for w in result.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0), "trace rose: {:?}", w);
        }
    }
}

#[test]
fn minimize_json_is_reproducible() {
    let grid = Arc::new(Grid::build_coarse(1, 0.2, 1.0, 2.0).unwrap());
    let kernel = KernelSpec::fractional(1, 0.4).unwrap();
    let g = sample_field(&grid, |x| if x[0] > 0.0 { 1.0 } else { 0.5 }).unwrap();
    let problem = Problem::assemble(&kernel, &grid, &g, 0.2, 0.0, Phase::OnePhase).unwrap();
    let a = minimize(&problem, 4, 11).unwrap().to_json();
    let b = minimize(&problem, 4, 11).unwrap().to_json();
    assert_eq!(a, b);
    let parsed: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert!(parsed.get("energy").is_some());
}

#[test]
fn solver_agrees_with_oracle_on_small_instance() {
    let grid = Arc::new(Grid::build_coarse(1, 0.2, 1.0, 2.0).unwrap());
    let kernel = KernelSpec::modulated(1, 0.3, 1.0, 2.0, 3.0).unwrap();
    let g = sample_field(&grid, |x| 0.5 + 0.5 * x[0].signum()).unwrap();
    let problem = Problem::assemble(&kernel, &grid, &g, 0.05, 0.1, Phase::TwoPhase).unwrap();
    let exact = oracle_minimize(&problem).unwrap();
    let found = minimize(&problem, 8, 3).unwrap();
    assert_relative_eq!(found.energy.total, exact.energy.total, max_relative = 1e-9);
}
