//! Matrix-free Krylov machinery: restarted right-preconditioned GMRES,
//! power iteration for the top eigenvalue of a Hermitian nonnegative
//! operator, and Arnoldi approximation of `e^{τA} v` with substepping.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::spectral::{axpy, inner, norm_sqr};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GmresConfig {
    /// Relative residual target `‖b - Ax‖ / ‖b‖`.
    pub tol: f64,
    pub restart: usize,
    /// Cap on the total number of Arnoldi steps.
    pub max_iters: usize,
}

impl Default for GmresConfig {
    fn default() -> Self {
        GmresConfig {
            tol: 1e-8,
            restart: 50,
            max_iters: 5000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GmresOutcome {
    pub x: Vec<C64>,
    pub iterations: usize,
    /// True relative residual of the returned iterate.
    pub residual: f64,
    pub converged: bool,
}

/// Solves `A x = b` with GMRES(restart) on the right-preconditioned system
/// `A M y = b`, `x = M y`. The residual reported is the true residual of
/// the original system, recomputed after every restart cycle.
pub fn gmres<A, M>(mut apply: A, mut precond: M, b: &[C64], cfg: &GmresConfig) -> GmresOutcome
where
    A: FnMut(&[C64]) -> Vec<C64>,
    M: FnMut(&[C64]) -> Vec<C64>,
{
    let n = b.len();
    let b_norm = norm_sqr(b).sqrt();
    let mut x = vec![C64::default(); n];
    if b_norm == 0.0 {
        return GmresOutcome {
            x,
            iterations: 0,
            residual: 0.0,
            converged: true,
        };
    }
    let mut total = 0;
    let mut r = b.to_vec();
    let mut best = (f64::INFINITY, x.clone());
    loop {
        let beta = norm_sqr(&r).sqrt();
        let rel = beta / b_norm;
        if rel < best.0 {
            best = (rel, x.clone());
        }
        if rel <= cfg.tol || total >= cfg.max_iters {
            break;
        }
        let m = cfg.restart.min(cfg.max_iters - total).max(1);
        let mut basis: Vec<Vec<C64>> = Vec::with_capacity(m + 1);
        basis.push(r.iter().map(|v| v / beta).collect());
        // Hessenberg columns, rotated in place.
        let mut hcols: Vec<Vec<C64>> = Vec::with_capacity(m);
        let mut cs = Vec::with_capacity(m);
        let mut sn = Vec::with_capacity(m);
        let mut g = vec![C64::default(); m + 1];
        g[0] = C64::from(beta);
        let mut k_used = 0;
        for k in 0..m {
            total += 1;
            let mut w = apply(&precond(&basis[k]));
            let mut h = vec![C64::default(); k + 2];
            for (j, vj) in basis.iter().enumerate() {
                let hj = inner(&w, vj);
                h[j] = hj;
                axpy(&mut w, -hj, vj);
            }
            // One reorthogonalization pass keeps the basis clean near the
            // real axis, where the iteration counts get large.
            for (j, vj) in basis.iter().enumerate() {
                let c = inner(&w, vj);
                h[j] += c;
                axpy(&mut w, -c, vj);
            }
            let hn = norm_sqr(&w).sqrt();
            h[k + 1] = C64::from(hn);
            for j in 0..k {
                let (c, s): (f64, C64) = (cs[j], sn[j]);
                let t = c * h[j] + s * h[j + 1];
                h[j + 1] = -s.conj() * h[j] + c * h[j + 1];
                h[j] = t;
            }
            let (c, s) = givens(h[k], h[k + 1]);
            h[k] = c * h[k] + s * h[k + 1];
            h[k + 1] = C64::default();
            g[k + 1] = -s.conj() * g[k];
            g[k] *= c;
            cs.push(c);
            sn.push(s);
            hcols.push(h);
            k_used = k + 1;
            let est = g[k + 1].norm() / b_norm;
            if est <= 0.5 * cfg.tol || hn <= 1e-300 {
                break;
            }
            basis.push(w.iter().map(|v| v / hn).collect());
        }
        // Back substitution for the least-squares coefficients.
        let mut y = vec![C64::default(); k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in i + 1..k_used {
                s -= hcols[j][i] * y[j];
            }
            y[i] = s / hcols[i][i];
        }
        let mut update = vec![C64::default(); n];
        for (yi, vi) in y.iter().zip(&basis) {
            axpy(&mut update, *yi, vi);
        }
        let dx = precond(&update);
        axpy(&mut x, C64::from(1.0), &dx);
        let ax = apply(&x);
        r = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    }
    let converged = best.0 <= cfg.tol;
    GmresOutcome {
        x: best.1,
        iterations: total,
        residual: best.0,
        converged,
    }
}

fn givens(a: C64, b: C64) -> (f64, C64) {
    let na = a.norm();
    let nb = b.norm();
    if nb == 0.0 {
        return (1.0, C64::default());
    }
    if na == 0.0 {
        return (0.0, b.conj() / nb);
    }
    let r = na.hypot(nb);
    (na / r, (a / na) * b.conj() / r)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerConfig {
    /// Stop once successive eigenvalue estimates differ by this fraction.
    pub rel_tol: f64,
    pub max_iters: usize,
}

impl Default for PowerConfig {
    fn default() -> Self {
        PowerConfig {
            rel_tol: 1e-4,
            max_iters: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PowerOutcome {
    pub eigenvalue: f64,
    pub iterations: usize,
    pub converged: bool,
    pub vector: Vec<C64>,
}

/// Power iteration for the largest eigenvalue of a Hermitian nonnegative
/// operator (typically `M†M`). Estimates are Rayleigh quotients, so they
/// approach the top eigenvalue from below.
pub fn power_iteration<F>(mut apply: F, start: Vec<C64>, cfg: &PowerConfig) -> Result<PowerOutcome>
where
    F: FnMut(&[C64]) -> Result<Vec<C64>>,
{
    let mut v = start;
    let nv = norm_sqr(&v).sqrt();
    if nv == 0.0 {
        return Err(Error::InvalidParameter("power iteration start vector is zero".into()));
    }
    v.iter_mut().for_each(|c| *c /= nv);
    let mut prev = f64::NAN;
    for it in 1..=cfg.max_iters {
        let w = apply(&v)?;
        let lambda = inner(&w, &v).re;
        let nw = norm_sqr(&w).sqrt();
        if nw == 0.0 {
            return Ok(PowerOutcome {
                eigenvalue: 0.0,
                iterations: it,
                converged: true,
                vector: v,
            });
        }
        v = w.into_iter().map(|c| c / nw).collect();
        if (lambda - prev).abs() <= cfg.rel_tol * lambda.abs() {
            return Ok(PowerOutcome {
                eigenvalue: lambda,
                iterations: it,
                converged: true,
                vector: v,
            });
        }
        prev = lambda;
    }
    Ok(PowerOutcome {
        eigenvalue: prev,
        iterations: cfg.max_iters,
        converged: false,
        vector: v,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpmConfig {
    /// Krylov subspace dimension.
    pub dim: usize,
    /// Local error target relative to `‖v‖`, per unit of time.
    pub tol: f64,
}

impl Default for ExpmConfig {
    fn default() -> Self {
        ExpmConfig {
            dim: 10,
            tol: 1e-12,
        }
    }
}

/// `e^{t A} v` by Arnoldi projection with adaptive substeps. Each substep
/// is accepted when the a-posteriori estimate
/// `β h_{m+1,m} |[e^{τ H_m}]_{m,1}|` is below `tol · ‖v‖ · τ / t`.
pub fn expm_apply<A>(mut apply: A, v: &[C64], t: f64, cfg: &ExpmConfig) -> Vec<C64>
where
    A: FnMut(&[C64]) -> Vec<C64>,
{
    let v_norm = norm_sqr(v).sqrt();
    if v_norm == 0.0 || t == 0.0 {
        return v.to_vec();
    }
    let mut w = v.to_vec();
    let mut elapsed = 0.0;
    let mut tau = t;
    let mut guard = 0;
    while elapsed < t * (1.0 - 1e-14) {
        guard += 1;
        assert!(guard < 100_000, "Krylov exponential failed to advance");
        tau = tau.min(t - elapsed);
        let beta = norm_sqr(&w).sqrt();
        if beta == 0.0 {
            break;
        }
        let (basis, h, h_next) = arnoldi(&mut apply, &w, beta, cfg.dim);
        let m = basis.len();
        loop {
            let e = (h.clone() * C64::from(tau)).exp();
            let err = if h_next == 0.0 {
                0.0
            } else {
                beta * h_next * e[(m - 1, 0)].norm()
            };
            if err <= cfg.tol * v_norm * tau / t || tau < t * 1e-9 {
                let mut next = vec![C64::default(); w.len()];
                for (j, vj) in basis.iter().enumerate() {
                    axpy(&mut next, e[(j, 0)] * beta, vj);
                }
                w = next;
                elapsed += tau;
                if err < 0.01 * cfg.tol * v_norm * tau / t {
                    tau *= 2.0;
                }
                break;
            }
            tau *= 0.5;
        }
    }
    w
}

fn arnoldi<A>(apply: &mut A, v: &[C64], beta: f64, dim: usize) -> (Vec<Vec<C64>>, DMatrix<C64>, f64)
where
    A: FnMut(&[C64]) -> Vec<C64>,
{
    let mut basis: Vec<Vec<C64>> = vec![v.iter().map(|c| c / beta).collect()];
    let mut h = DMatrix::<C64>::zeros(dim, dim);
    let mut h_next = 0.0;
    for k in 0..dim {
        let mut w = apply(&basis[k]);
        for _ in 0..2 {
            for (j, vj) in basis.iter().enumerate() {
                let c = inner(&w, vj);
                h[(j, k)] += c;
                axpy(&mut w, -c, vj);
            }
        }
        let hn = norm_sqr(&w).sqrt();
        let scale = h.column(k).iter().map(|c| c.norm()).fold(0.0, f64::max);
        if hn <= 1e-14 * scale.max(1e-300) {
            // Happy breakdown: the subspace is invariant and the projection exact.
            let m = k + 1;
            return (basis, h.view((0, 0), (m, m)).into_owned(), 0.0);
        }
        if k + 1 < dim {
            h[(k + 1, k)] = C64::from(hn);
            basis.push(w.iter().map(|c| c / hn).collect());
        } else {
            h_next = hn;
        }
    }
    (basis, h, h_next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_apply(m: &DMatrix<C64>) -> impl FnMut(&[C64]) -> Vec<C64> + '_ {
        move |v: &[C64]| {
            let x = nalgebra::DVector::from_column_slice(v);
            (m * x).iter().cloned().collect()
        }
    }

    fn test_matrix(n: usize) -> DMatrix<C64> {
        DMatrix::from_fn(n, n, |i, j| {
            let base = if i == j { C64::new(3.0 + i as f64 * 0.1, 0.5) } else { C64::default() };
            base + C64::new(((i * 7 + j * 3) % 5) as f64 * 0.05, ((i + 2 * j) % 3) as f64 * 0.04)
        })
    }

    #[test]
    fn gmres_matches_direct_solve() {
        let n = 40;
        let a = test_matrix(n);
        let b: Vec<C64> = (0..n).map(|i| C64::new(i as f64, 1.0)).collect();
        let cfg = GmresConfig {
            tol: 1e-12,
            restart: 7,
            max_iters: 2000,
        };
        let out = gmres(dense_apply(&a), |v: &[C64]| v.to_vec(), &b, &cfg);
        assert!(out.converged);
        let exact = a.clone().lu().solve(&nalgebra::DVector::from_column_slice(&b)).unwrap();
        let err: f64 = out.x.iter().zip(exact.iter()).map(|(x, e)| (x - e).norm_sqr()).sum::<f64>().sqrt();
        assert!(err / exact.norm() < 1e-10);
    }

    #[test]
    fn gmres_reports_non_convergence() {
        let a = test_matrix(30);
        let b = vec![C64::new(1.0, 0.0); 30];
        let cfg = GmresConfig {
            tol: 1e-14,
            restart: 2,
            max_iters: 3,
        };
        let out = gmres(dense_apply(&a), |v: &[C64]| v.to_vec(), &b, &cfg);
        assert!(!out.converged);
        assert!(out.residual > 1e-14 && out.residual < 1.0);
    }

    #[test]
    fn power_iteration_finds_top_eigenvalue() {
        let d: Vec<f64> = (0..20).map(|i| 1.0 + i as f64 * 0.5).collect();
        let out = power_iteration(
            |v| Ok(v.iter().zip(&d).map(|(v, d)| v * d).collect()),
            vec![C64::new(1.0, 0.0); 20],
            &PowerConfig {
                rel_tol: 1e-12,
                max_iters: 2000,
            },
        )
        .unwrap();
        assert!((out.eigenvalue - 10.5).abs() < 1e-8);
    }

    #[test]
    fn krylov_exponential_matches_dense() {
        let n = 30;
        let a = test_matrix(n) * C64::new(0.0, -1.0);
        let v: Vec<C64> = (0..n).map(|i| C64::new(1.0 / (1.0 + i as f64), 0.2)).collect();
        let t = 1.7;
        let out = expm_apply(dense_apply(&a), &v, t, &ExpmConfig { dim: 8, tol: 1e-12 });
        let exact = (a.clone() * C64::from(t)).exp() * nalgebra::DVector::from_column_slice(&v);
        let err: f64 = out.iter().zip(exact.iter()).map(|(x, e)| (x - e).norm_sqr()).sum::<f64>().sqrt();
        assert!(err / exact.norm() < 1e-10, "err {err}");
    }
}
