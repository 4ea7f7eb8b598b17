//! Small linear-algebra kernels used by the solvers.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcgOutcome {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradients for an SPD operator, starting
/// from the contents of `x`. Stops at `||r|| <= tol ||rhs||`.
pub fn pcg(
    apply: impl Fn(&[f64], &mut [f64]),
    diag: &[f64],
    rhs: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> PcgOutcome {
    let n = rhs.len();
    let rhs_norm = dot(rhs, rhs).sqrt();
    let mut ax = vec![0.0; n];
    apply(x, &mut ax);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let scale = if rhs_norm > 0.0 { rhs_norm } else { 1.0 };
    let mut res = dot(&r, &r).sqrt() / scale;
    if res <= tol || n == 0 {
        return PcgOutcome {
            iterations: 0,
            relative_residual: res,
            converged: true,
        };
    }
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(ri, d)| ri / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 1..=max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return PcgOutcome {
                iterations: it,
                relative_residual: res,
                converged: false,
            };
        }
        let alpha = rz / pap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        res = dot(&r, &r).sqrt() / scale;
        if res <= tol {
            return PcgOutcome {
                iterations: it,
                relative_residual: res,
                converged: true,
            };
        }
        for k in 0..n {
            z[k] = r[k] / diag[k];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    PcgOutcome {
        iterations: max_iter,
        relative_residual: res,
        converged: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BoundState {
    Free,
    Lower,
    Upper,
}

/// Exact minimizer of `x^T A x - 2 b^T x` over the box `lower <= x <= upper`
/// for SPD `A`, by a primal active-set method. Infinite bounds are allowed.
pub fn box_qp(a: &DMatrix<f64>, b: &DVector<f64>, lower: &[f64], upper: &[f64]) -> DVector<f64> {
    let n = b.len();
    let mut x = DVector::from_fn(n, |i, _| 0.0f64.clamp(lower[i], upper[i]));
    let mut state: Vec<BoundState> = (0..n)
        .map(|i| {
            if lower[i] == upper[i] {
                BoundState::Lower
            } else {
                BoundState::Free
            }
        })
        .collect();
    let fixed: Vec<bool> = (0..n).map(|i| lower[i] == upper[i]).collect();

    for _ in 0..(50 * (n + 1)) {
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == BoundState::Free).collect();
        // Newton step on the free variables with the others held
        let target = if free.is_empty() {
            DVector::zeros(0)
        } else {
            let k = free.len();
            let sub = DMatrix::from_fn(k, k, |p, q| a[(free[p], free[q])]);
            let mut rhs = DVector::from_fn(k, |p, _| b[free[p]]);
            for (p, &i) in free.iter().enumerate() {
                for j in 0..n {
                    if state[j] != BoundState::Free {
                        rhs[p] -= a[(i, j)] * x[j];
                    }
                }
            }
            match sub.clone().cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => sub.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(k)),
            }
        };
        let mut alpha = 1.0f64;
        let mut blocking = None;
        for (p, &i) in free.iter().enumerate() {
            let d = target[p] - x[i];
            if d < 0.0 && lower[i].is_finite() {
                let t = (x[i] - lower[i]) / -d;
                if t < alpha {
                    alpha = t;
                    blocking = Some((i, BoundState::Lower));
                }
            } else if d > 0.0 && upper[i].is_finite() {
                let t = (upper[i] - x[i]) / d;
                if t < alpha {
                    alpha = t;
                    blocking = Some((i, BoundState::Upper));
                }
            }
        }
        for (p, &i) in free.iter().enumerate() {
            x[i] += alpha * (target[p] - x[i]);
            x[i] = x[i].clamp(lower[i], upper[i]);
        }
        if let Some((i, side)) = blocking {
            x[i] = if side == BoundState::Lower { lower[i] } else { upper[i] };
            state[i] = side;
            continue;
        }
        // multipliers: the gradient of the objective is 2 (A x - b)
        let grad = a * &x - b;
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..n {
            if fixed[i] {
                continue;
            }
            let violation = match state[i] {
                BoundState::Lower => -grad[i],
                BoundState::Upper => grad[i],
                BoundState::Free => continue,
            };
            if violation > 0.0 && worst.is_none_or(|(_, v)| violation > v) {
                worst = Some((i, violation));
            }
        }
        let scale = 1e-14 * (1.0 + b.amax() + a.amax() * x.amax());
        match worst {
            Some((i, v)) if v > scale => state[i] = BoundState::Free,
            _ => break,
        }
    }
    x
}
