//! Matrix-free operators against dense matrices built without FFTs.

use std::sync::Arc;

use dslab::resolvent::{self, ResolventQuery};
use dslab::{assemble, Complex64, ComplexField, DampedOperator, DampingSpec, Grid, MetricSpec, WeightChoice};
use nalgebra::DMatrix;

type C = Complex64;

/// `D = -i d/dx` as the explicit discrete-Fourier sum on a 1-D grid.
fn derivative_matrix(grid: &Grid) -> DMatrix<C> {
    let n = grid.n_per_axis();
    let l = grid.half_length();
    let h = grid.spacing();
    let xi: Vec<f64> = (0..n)
        .map(|i| {
            let k = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
            std::f64::consts::PI * k / l
        })
        .collect();
    DMatrix::from_fn(n, n, |j, k| {
        let dx = (j as f64 - k as f64) * h;
        xi.iter().map(|&x| C::from_polar(x, x * dx)).sum::<C>() / n as f64
    })
}

fn fourier_multiplier(grid: &Grid, symbol: impl Fn(f64) -> f64) -> DMatrix<C> {
    let n = grid.n_per_axis();
    let l = grid.half_length();
    let h = grid.spacing();
    DMatrix::from_fn(n, n, |j, k| {
        let dx = (j as f64 - k as f64) * h;
        (0..n)
            .map(|i| {
                let m = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
                let x = std::f64::consts::PI * m / l;
                C::from_polar(symbol(x), x * dx)
            })
            .sum::<C>()
            / n as f64
    })
}

fn dense_of(op: &DampedOperator, apply: impl Fn(&ComplexField) -> ComplexField) -> DMatrix<C> {
    let grid = op.grid();
    let n = grid.len();
    let mut m = DMatrix::zeros(n, n);
    for k in 0..n {
        let mut e = vec![C::default(); n];
        e[k] = C::new(1.0, 0.0);
        let col = apply(&ComplexField::from_values(grid, e).unwrap());
        for (j, v) in col.values().iter().enumerate() {
            m[(j, k)] = *v;
        }
    }
    m
}

fn op_1d(alpha: f64) -> DampedOperator {
    let grid = Arc::new(Grid::new(1, 24, 6.0).unwrap());
    assemble(
        &grid,
        &MetricSpec::conformal_bump(0.4, 1.2),
        &DampingSpec::gaussian(0.8, 1.5, alpha),
        WeightChoice::Unit,
        None,
    )
    .unwrap()
}

fn max_abs(m: &DMatrix<C>) -> f64 {
    m.iter().map(|v| v.norm()).fold(0.0, f64::max)
}

#[test]
fn p_matches_dense_divergence_form() {
    let op = op_1d(1.0);
    let grid = op.grid();
    let d = derivative_matrix(grid);
    let metric = op.metric();
    let c = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        grid.len(),
        grid.coordinates().iter().map(|&x| C::from(metric.conformal_factor(&[x]).unwrap())),
    ));
    let oracle = &d * &c * &d;
    let got = dense_of(&op, |f| op.apply_p(f));
    assert!(max_abs(&(got - &oracle)) < 1e-10 * max_abs(&oracle));
}

#[test]
fn b_matches_dense_sandwich() {
    for alpha in [0.0, 0.5, 1.0] {
        let op = op_1d(alpha);
        let grid = op.grid();
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            grid.len(),
            op.damping_coefficient().iter().map(|&v| C::from(v)),
        ));
        let bracket = fourier_multiplier(grid, |x| (1.0 + x * x).powf(0.5 * alpha));
        let oracle = &a * bracket * &a;
        let got = dense_of(&op, |f| op.apply_b_alpha(f));
        assert!(max_abs(&(got - &oracle)) < 1e-12 * max_abs(&oracle).max(1.0), "alpha {alpha}");
        // B is symmetric and non-negative
        let eig = oracle.clone().symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e > -1e-12));
    }
}

#[test]
fn resolvent_solve_matches_lu() {
    let op = op_1d(1.0);
    let grid = op.grid().clone();
    let h = dense_of(&op, |f| op.apply_h(f));
    let f = dslab::model::random_field(&grid, 3);
    for z in [C::new(1.0, 0.2), C::new(-0.5, 0.05), C::new(4.0, 1.0)] {
        let shifted = &h - DMatrix::identity(grid.len(), grid.len()) * z;
        let rhs = nalgebra::DVector::from_column_slice(f.values());
        let exact = shifted.lu().solve(&rhs).unwrap();
        let got = resolvent::solve(&op, z, &f, 1e-12).unwrap();
        let err = got
            .values()
            .iter()
            .zip(exact.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-8 * exact.norm(), "z = {z}: {err}");
    }
}

#[test]
fn weighted_norm_matches_svd() {
    let op = op_1d(1.0);
    let grid = op.grid().clone();
    let h = dense_of(&op, |f| op.apply_h(f));
    let n = grid.len();
    let w = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        n,
        grid.coordinates().iter().map(|x| C::from((1.0 + x * x).powf(-0.5))),
    ));
    for (z, power) in [(C::new(2.0, 0.3), 0usize), (C::new(0.7, 0.5), 1)] {
        let r = (&h - DMatrix::identity(n, n) * z).try_inverse().unwrap();
        let mut rp = r.clone();
        for _ in 0..power {
            rp = &rp * &r;
        }
        let m = &w * rp * &w;
        let sigma = m.singular_values()[0];
        let mut q = ResolventQuery::symmetric(z, power, 1.0);
        q.solver_tol = 1e-12;
        let est = resolvent::weighted_norm_with(
            &op,
            &q,
            &dslab::krylov::PowerConfig {
                rel_tol: 1e-12,
                max_iters: 2000,
            },
        )
        .unwrap();
        assert!(
            (est.norm_estimate - sigma).abs() < 1e-5 * sigma,
            "z = {z}, n = {power}: {} vs {sigma}",
            est.norm_estimate
        );
    }
}

#[test]
fn derivative_check_agrees_with_dense_square() {
    let op = op_1d(0.5);
    let grid = op.grid().clone();
    let h = dense_of(&op, |f| op.apply_h(f));
    let n = grid.len();
    let z = C::new(1.3, 0.4);
    let r = (&h - DMatrix::identity(n, n) * z).try_inverse().unwrap();
    let f = dslab::model::random_field(&grid, 11);
    let report = resolvent::derivative_power_check(&op, z, &f).unwrap();
    assert!(report.first_order(), "{:?}", report.ratios);
    // the O(h) constant is ‖R³ f‖/‖R² f‖ to leading order
    let v = nalgebra::DVector::from_column_slice(f.values());
    let r2 = &r * &r * &v;
    let r3 = &r * &r2;
    let predicted = r3.norm() / r2.norm();
    let c = report.error_constants.last().unwrap();
    assert!((c - predicted).abs() < 0.01 * predicted, "{c} vs {predicted}");
}

#[test]
fn two_dimensional_h_adjoint_is_transpose() {
    let grid = Arc::new(Grid::new(2, 8, 3.0).unwrap());
    let op = assemble(
        &grid,
        &MetricSpec::conformal_bump(0.3, 1.0),
        &DampingSpec::gaussian(1.0, 1.0, 1.0),
        WeightChoice::Unit,
        None,
    )
    .unwrap();
    let h = dense_of(&op, |f| op.apply_h(f));
    let ha = dense_of(&op, |f| op.apply_h_adjoint(f));
    assert!(max_abs(&(ha - h.adjoint())) < 1e-10 * max_abs(&h));
}
