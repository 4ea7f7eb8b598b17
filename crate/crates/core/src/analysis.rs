//! Diagnostics on computed fields: free boundary, growth, nondegeneracy,
//! density, subsolution residual, lifting distance and the scaling identity.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::energy::{assemble_form, breakdown_of, pair_weight, pairwise_sum, tail, unit_ball_volume, QuadraticForm};
use crate::error::{NlfbError, Result};
use crate::grid::{Field, Grid, Point};
use crate::kernel::{distance, rescale_kernel};
use crate::solver::{harmonic_lifting, Ball, Problem};

/// Relative tolerance of the subsolution check.
pub const SUBSOLUTION_TOL: f64 = 1e-8;
/// Largest number of points chosen by automatic free-boundary sampling.
pub const AUTO_POINTS: usize = 5;

fn pad(x: &[f64]) -> Point {
    let mut p = [0.0; 2];
    p[..x.len()].copy_from_slice(x);
    p
}

/// Sign changes of `u - xi` across lattice edges between interior nodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreeBoundary {
    /// Nodes with `u <= xi` next to a node with `u > xi`.
    pub off_side: Vec<usize>,
    pub on_side: Vec<usize>,
    /// `(off, on)` edges, sorted.
    pub pairs: Vec<(usize, usize)>,
    /// Union of both sides, sorted.
    pub nodes: Vec<usize>,
}

impl FreeBoundary {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Edge midpoints, one per pair.
    pub fn points(&self, grid: &Grid) -> Vec<Point> {
        self.pairs
            .iter()
            .map(|&(a, b)| {
                let (pa, pb) = (pad(grid.position(a)), pad(grid.position(b)));
                [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]
            })
            .collect()
    }

    /// Distance from `x` to the nearest edge midpoint.
    pub fn distance(&self, grid: &Grid, x: &[f64]) -> f64 {
        let d = grid.dim;
        self.points(grid)
            .iter()
            .map(|p| distance(&p[..d], &x[..d]))
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn free_boundary(field: &Field, xi: f64) -> FreeBoundary {
    let grid = field.grid();
    let u = &field.values;
    let mut pairs = Vec::new();
    for &i in grid.interior() {
        if u[i] > xi {
            continue;
        }
        for j in grid.neighbors(i) {
            if grid.is_interior(j) && u[j] > xi {
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    let mut off_side: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let mut on_side: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    off_side.dedup();
    on_side.sort_unstable();
    on_side.dedup();
    let mut nodes: Vec<usize> = off_side.iter().chain(&on_side).copied().collect();
    nodes.sort_unstable();
    FreeBoundary {
        off_side,
        on_side,
        pairs,
        nodes,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthFit {
    pub x0: Point,
    /// Every dyadic radius tried, with its supremum.
    pub radii: Vec<f64>,
    /// Largest node distance from `x0` inside each ball; the fit runs on these.
    pub effective_radii: Vec<f64>,
    pub sups: Vec<f64>,
    /// Radii actually entering the fit.
    pub used: Vec<bool>,
    /// Radii dropped for being below `2h` or having zero supremum.
    pub excluded: usize,
    pub slope: f64,
    /// `exp(intercept)`, so `sup ≈ constant r^slope`.
    pub constant: f64,
}

/// Least-squares fit of `log y` against `log x`; returns `(slope, intercept)`.
pub fn log_log_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (a, b) in lx.iter().zip(&ly) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Fits `sup_{B_r(x0)} u ≈ C r^slope` over radii `r_min 2^k`, `k < n_dyadic`,
/// `r <= r_max`. Each ball is measured by the distance to its farthest node,
/// which is the radius the discrete ball actually has.
pub fn growth_exponent(field: &Field, x0: &[f64], r_min: f64, r_max: f64, n_dyadic: usize) -> Result<GrowthFit> {
    let grid = field.grid();
    if n_dyadic < 3 {
        return Err(NlfbError::config(format!("need at least 3 dyadic radii, got {n_dyadic}")));
    }
    if !(r_min > 0.0 && r_max >= r_min) {
        return Err(NlfbError::config(format!("invalid radius range [{r_min}, {r_max}]")));
    }
    let x0n = distance(&x0[..grid.dim], &[0.0, 0.0][..grid.dim]);
    if r_max > grid.omega_radius - x0n + 1e-12 {
        return Err(NlfbError::domain(format!(
            "largest radius {r_max} leaves Omega around the given point"
        )));
    }
    let mut radii = Vec::new();
    let mut effective_radii = Vec::new();
    let mut sups = Vec::new();
    let mut used = Vec::new();
    for k in 0..n_dyadic {
        let r = r_min * (1u64 << k) as f64;
        if r > r_max * (1.0 + 1e-12) {
            break;
        }
        let sup = field.sup_over_ball(x0, r)?;
        let reach = grid.ball(x0, r).map(|i| grid.distance_to(i, x0)).fold(0.0, f64::max);
        radii.push(r);
        effective_radii.push(reach);
        sups.push(sup);
        used.push(r >= 2.0 * grid.h && sup > 0.0);
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = effective_radii
        .iter()
        .zip(&sups)
        .zip(&used)
        .filter(|(_, &u)| u)
        .map(|((&r, &s), _)| (r, s))
        .unzip();
    if xs.len() < 3 {
        return Err(NlfbError::data(format!(
            "only {} usable radii for the growth fit (need 3)",
            xs.len()
        )));
    }
    let (slope, intercept) = log_log_fit(&xs, &ys);
    Ok(GrowthFit {
        x0: pad(x0),
        excluded: used.iter().filter(|u| !**u).count(),
        radii,
        effective_radii,
        sups,
        used,
        slope,
        constant: intercept.exp(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Nondegeneracy {
    pub c_min: f64,
    pub argmin: usize,
    pub tested: usize,
}

/// `min (u - xi) / dist(x, FB)^s` over interior nodes with `u > xi` at
/// distance at least `2h` from the free boundary. Distances are measured to
/// the midpoints of the sign-change edges.
pub fn nondegeneracy(field: &Field, xi: f64, s: f64) -> Result<Nondegeneracy> {
    let grid = field.grid();
    let fb = free_boundary(field, xi);
    if fb.is_empty() {
        return Err(NlfbError::data("free boundary is empty"));
    }
    let points = fb.points(grid);
    let d = grid.dim;
    let mut best: Option<(f64, usize)> = None;
    let mut tested = 0;
    for &i in grid.interior() {
        let u = field.values[i];
        if u <= xi {
            continue;
        }
        let x = grid.position(i);
        let dist = points
            .iter()
            .map(|p| distance(&p[..d], x))
            .fold(f64::INFINITY, f64::min);
        if dist < 2.0 * grid.h * (1.0 - 1e-12) {
            continue;
        }
        tested += 1;
        let ratio = (u - xi) / dist.powf(s);
        if best.is_none_or(|(b, _)| ratio < b) {
            best = Some((ratio, i));
        }
    }
    let (c_min, argmin) = best.ok_or_else(|| NlfbError::data("no positive node at distance >= 2h from the free boundary"))?;
    Ok(Nondegeneracy { c_min, argmin, tested })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DensityRow {
    pub r: f64,
    pub sup: f64,
    pub zero_ratio: f64,
    pub pos_ratio: f64,
}

/// Fractions of the closed ball `B_r(x0)` (by cell measure) where `u <= xi`
/// and `u > xi`.
pub fn density(field: &Field, xi: f64, x0: &[f64], radii: &[f64]) -> Result<Vec<DensityRow>> {
    let grid = field.grid();
    radii
        .iter()
        .map(|&r| {
            let (mut total, mut pos) = (0usize, 0usize);
            for i in grid.ball(x0, r) {
                total += 1;
                if field.values[i] > xi {
                    pos += 1;
                }
            }
            if total == 0 {
                return Err(NlfbError::domain(format!("ball of radius {r} contains no grid node")));
            }
            let m = grid.cell_measure;
            let pos_ratio = (m * pos as f64) / (m * total as f64);
            Ok(DensityRow {
                r,
                sup: field.sup_over_ball(x0, r)?,
                zero_ratio: 1.0 - pos_ratio,
                pos_ratio,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubsolutionReport {
    /// `max_i sum_j w_ij (u_i - u_j)` over interior nodes.
    pub max_pairing: f64,
    pub argmax: usize,
    /// `max_i D_i * osc(u)`.
    pub row_scale: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Pairing of the Dirichlet form between `u` and the hat function of each
/// interior node.
pub fn subsolution_residual(form: &QuadraticForm, field: &Field) -> Result<SubsolutionReport> {
    if !field.same_grid(form.grid()) {
        return Err(NlfbError::config("field and form live on different grids"));
    }
    let grid = form.grid();
    let u = &field.values;
    let pairings: Vec<f64> = grid
        .interior()
        .par_iter()
        .enumerate()
        .map(|(slot, &i)| {
            let row = form.row(slot);
            let ui = u[i];
            row.iter().zip(u).map(|(w, uj)| w * (ui - uj)).sum()
        })
        .collect();
    let (argmax_slot, max_pairing) = pairings
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (k, v)| if v > bv { (k, v) } else { (bi, bv) });
    let (lo, hi) = u
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let osc = if u.is_empty() { 0.0 } else { hi - lo };
    let row_scale = form.diagonal().iter().fold(0.0f64, |m, &d| m.max(d)) * osc;
    let tolerance = SUBSOLUTION_TOL * row_scale;
    let argmax = grid.interior().get(argmax_slot).copied().unwrap_or(0);
    let max_pairing = if pairings.is_empty() { 0.0 } else { max_pairing };
    Ok(SubsolutionReport {
        max_pairing,
        argmax,
        row_scale,
        tolerance,
        pass: max_pairing <= tolerance,
    })
}

/// Mean-square distance between `u` and its harmonic lifting over `region`.
pub fn lifting_distance(form: &QuadraticForm, field: &Field, region: &Ball) -> Result<f64> {
    let lifted = harmonic_lifting(form, field, region)?;
    let grid = form.grid();
    let m = grid.cell_measure;
    let (mut num, mut den) = (0.0, 0.0);
    for &i in grid.interior() {
        if grid.distance_to(i, &region.center) < region.radius {
            let d = field.values[i] - lifted.values[i];
            num += m * d * d;
            den += m;
        }
    }
    Ok(num / den)
}

/// Checks the rescaling identity on node values.
///
/// With `v(x) = kappa (u(x0 + r x) - xi)` on the mapped lattice, rescaled
/// kernel, penalty `kappa^2 r^(2s) rho` and threshold `kappa (xi_p - xi)`
/// (where `xi_p` is the threshold of `problem`), the rescaled functional of
/// `v` equals `kappa^2 r^(2s - d)` times the part of the original functional
/// of `u` seen by `B_r(x0)`. Returns the relative difference.
pub fn scaling_discrepancy(problem: &Problem, field: &Field, x0: &[f64], r: f64, kappa: f64, xi: f64) -> Result<f64> {
    let grid = problem.grid();
    if !field.same_grid(grid) {
        return Err(NlfbError::config("field lives on a different grid than the problem"));
    }
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(NlfbError::config(format!("kappa must be finite and nonnegative, got {kappa}")));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(NlfbError::config(format!("r must be positive, got {r}")));
    }
    let d = grid.dim;
    if distance(&x0[..d], &[0.0, 0.0][..d]) + r > grid.r_inf {
        return Err(NlfbError::domain(format!(
            "ball of radius {r} around {:?} leaves the node coverage",
            &x0[..d]
        )));
    }
    if kappa == 0.0 {
        return Ok(0.0);
    }
    let kernel = problem.kernel();
    let s = kernel.s;
    let mapped = Arc::new(grid.affine_image(x0, r)?);
    if mapped.interior().is_empty() {
        return Err(NlfbError::domain(format!("ball of radius {r} contains no grid node")));
    }
    let scaled_kernel = rescale_kernel(kernel, x0, r)?;
    let scaled_form = assemble_form(&scaled_kernel, &mapped)?;
    let v: Vec<f64> = field.values.iter().map(|u| kappa * (u - xi)).collect();
    let scaled_rho = kappa * kappa * r.powf(2.0 * s) * problem.rho;
    let scaled_xi = kappa * (problem.xi - xi);
    let lhs = breakdown_of(&scaled_form, &v, scaled_rho, scaled_xi).total;

    // the same pairs, weighted by the original kernel on original positions
    let u = &field.values;
    let m = grid.cell_measure;
    let partials: Vec<f64> = mapped
        .interior()
        .par_iter()
        .map(|&i| {
            let xi_pos = grid.position(i);
            let mut acc = 0.0;
            for j in 0..grid.len() {
                if j == i || (mapped.is_interior(j) && j < i) {
                    continue;
                }
                let w = pair_weight(kernel, xi_pos, grid.position(j), m);
                let diff = u[i] - u[j];
                acc += w * diff * diff;
            }
            acc
        })
        .collect();
    let count = mapped.interior().iter().filter(|&&i| u[i] > problem.xi).count();
    let part = pairwise_sum(&partials) + problem.rho * (m * count as f64);
    let rhs = kappa * kappa * r.powf(2.0 * s - d as f64) * part;
    if lhs == 0.0 {
        return Ok(if rhs == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((lhs - rhs).abs() / lhs.abs())
}

/// Farthest-point sample of at most `k` points, starting from the first.
pub fn farthest_point_sample(points: &[Point], dim: usize, k: usize) -> Vec<Point> {
    if points.is_empty() || k == 0 {
        return Vec::new();
    }
    let mut chosen = vec![points[0]];
    let mut dist: Vec<f64> = points.iter().map(|p| distance(&p[..dim], &points[0][..dim])).collect();
    while chosen.len() < k {
        let (idx, &best) = dist
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |acc, (i, d)| if *d > *acc.1 { (i, d) } else { acc });
        if best <= 0.0 {
            break;
        }
        chosen.push(points[idx]);
        for (dv, p) in dist.iter_mut().zip(points) {
            *dv = dv.min(distance(&p[..dim], &points[idx][..dim]));
        }
    }
    chosen
}

#[derive(Debug, Clone, PartialEq)]
pub enum PointSelection {
    /// Up to [`AUTO_POINTS`] free-boundary edge midpoints.
    Auto,
    Explicit(Vec<Point>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisOptions {
    pub points: PointSelection,
    pub r_min: f64,
    pub r_max: f64,
    pub n_dyadic: usize,
    /// Region of the lifting distance; `None` skips it.
    pub lifting_region: Option<Ball>,
}

impl AnalysisOptions {
    /// Dyadic radii from `4h` up to `r_max`.
    pub fn for_grid(grid: &Grid, r_max: f64) -> AnalysisOptions {
        let r_min = 4.0 * grid.h;
        let n = if r_max >= r_min { (r_max / r_min).log2().floor() as usize + 1 } else { 1 };
        AnalysisOptions {
            points: PointSelection::Auto,
            r_min,
            r_max,
            n_dyadic: n.max(3),
            lifting_region: Some(Ball::centered(0.5 * grid.omega_radius)),
        }
    }

    fn radii(&self) -> Vec<f64> {
        (0..self.n_dyadic)
            .map(|k| self.r_min * (1u64 << k) as f64)
            .take_while(|&r| r <= self.r_max * (1.0 + 1e-12))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PositiveDensityBound {
    pub exponent: f64,
    /// `min_r |B_r ∩ {u > xi}| / |B_r|^exponent`.
    pub c2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointReport {
    pub x0: Point,
    pub growth: Option<GrowthFit>,
    pub growth_error: Option<String>,
    /// `(mean over B_{r_max} of u^2)^(1/2) + tail(u; x0, r_max / 2)`.
    pub normalization: f64,
    pub normalized_constant: Option<f64>,
    pub density: Vec<DensityRow>,
    /// `min_r zero_ratio`.
    pub c1: f64,
    pub positive_density: Vec<PositiveDensityBound>,
}

impl PointReport {
    /// Per-radius table with header `r,sup,zero_ratio,pos_ratio`.
    pub fn csv(&self) -> String {
        let mut out = String::from("r,sup,zero_ratio,pos_ratio\n");
        for row in &self.density {
            out.push_str(&format!("{},{},{},{}\n", row.r, row.sup, row.zero_ratio, row.pos_ratio));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreeBoundaryReport {
    pub fb_nodes: Vec<usize>,
    pub off_side: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
    pub points: Vec<PointReport>,
    pub nondeg_constant: Option<f64>,
    pub nondeg_node: Option<usize>,
    pub subsolution_max: f64,
    pub subsolution_tolerance: f64,
    pub lifting_l2: Option<f64>,
}

impl FreeBoundaryReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Runs every diagnostic on a field of `problem`.
pub fn analyze(problem: &Problem, field: &Field, options: &AnalysisOptions) -> Result<FreeBoundaryReport> {
    let grid = problem.grid();
    if !field.same_grid(grid) {
        return Err(NlfbError::config("field lives on a different grid than the problem"));
    }
    let xi = problem.xi;
    let s = problem.kernel().s;
    let d = grid.dim;
    let fb = free_boundary(field, xi);
    let points = match &options.points {
        PointSelection::Auto => farthest_point_sample(&fb.points(grid), d, AUTO_POINTS),
        PointSelection::Explicit(p) => p.clone(),
    };
    let radii = options.radii();
    let ball_volume = |r: f64| unit_ball_volume(d) * r.powi(d as i32);
    let point_reports: Vec<PointReport> = points
        .par_iter()
        .map(|x0| {
            let (growth, growth_error) = match growth_exponent(field, x0, options.r_min, options.r_max, options.n_dyadic) {
                Ok(g) => (Some(g), None),
                Err(e) => (None, Some(e.to_string())),
            };
            let normalization =
                field.l2_mean_over_ball(x0, options.r_max)? + tail(field, x0, 0.5 * options.r_max, s)?;
            let normalized_constant = growth
                .as_ref()
                .map(|g| g.constant / normalization)
                .filter(|c| c.is_finite());
            let density = density(field, xi, x0, &radii)?;
            let c1 = density.iter().map(|row| row.zero_ratio).fold(f64::INFINITY, f64::min);
            let mut exponents = vec![1.0];
            if let Some(g) = &growth {
                let e = (s / g.slope).min(1.0);
                if e.is_finite() {
                    exponents.push(e);
                }
            }
            let positive_density = exponents
                .into_iter()
                .map(|e| PositiveDensityBound {
                    exponent: e,
                    c2: density
                        .iter()
                        .map(|row| row.pos_ratio * ball_volume(row.r).powf(1.0 - e))
                        .fold(f64::INFINITY, f64::min),
                })
                .collect();
            Ok(PointReport {
                x0: *x0,
                growth,
                growth_error,
                normalization,
                normalized_constant,
                density,
                c1,
                positive_density,
            })
        })
        .collect::<Result<_>>()?;
    let nondeg = nondegeneracy(field, xi, s).ok();
    let sub = subsolution_residual(problem.form(), field)?;
    let lifting_l2 = match &options.lifting_region {
        Some(region) => Some(lifting_distance(problem.form(), field, region)?),
        None => None,
    };
    Ok(FreeBoundaryReport {
        fb_nodes: fb.nodes,
        off_side: fb.off_side,
        pairs: fb.pairs,
        points: point_reports,
        nondeg_constant: nondeg.map(|n| n.c_min),
        nondeg_node: nondeg.map(|n| n.argmin),
        subsolution_max: sub.max_pairing,
        subsolution_tolerance: sub.tolerance,
        lifting_l2,
    })
}
