//! Minimization of `E(u) + rho |{u > xi} ∩ Omega|` with fixed exterior data.
//!
//! Three independent routes to minimizers:
//! * [`harmonic_lifting`]: the SPD linear solve for the pure quadratic part;
//! * [`coordinate_descent`] / [`minimize`]: exact one-variable thresholding
//!   sweeps, restarted from several initial supports;
//! * [`oracle_minimize`]: enumeration of every candidate support on tiny
//!   grids, giving the global discrete minimum.

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::energy::{assemble_form, breakdown_of, EnergyBreakdown, QuadraticForm};
use crate::error::{NlfbError, Result};
use crate::grid::{Field, Grid, GridSignature, Point};
use crate::kernel::{distance, KernelSpec};
use crate::linalg::{box_qp, pcg};

/// Relative residual required of every linear solve.
pub const LINEAR_TOL: f64 = 1e-10;
/// Residual targeted internally; the solve is accepted anywhere below [`LINEAR_TOL`].
const LINEAR_TARGET: f64 = 1e-13;
/// Largest free block (in entries) copied out for the linear solves.
const GATHER_LIMIT: usize = 1 << 23;
/// Sweep cap of the fixed-support solves inside the support search.
const BOX_SWEEPS: usize = 2_000;
/// Sweep-to-sweep energy change below `STOP_TOL (1 + |J|)` ends the descent.
pub const STOP_TOL: f64 = 1e-13;
/// Largest interior node count accepted by [`oracle_minimize`].
pub const ORACLE_MAX_NODES: usize = 14;
/// Relative energy window inside which oracle supports count as tied.
pub const TIE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    OnePhase,
    TwoPhase,
}

impl Phase {
    fn lower_bound(self) -> f64 {
        match self {
            Phase::OnePhase => 0.0,
            Phase::TwoPhase => f64::NEG_INFINITY,
        }
    }
}

/// A closed-form region `{ |x - center| < radius }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ball {
    pub center: Point,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: &[f64], radius: f64) -> Ball {
        let mut c = [0.0; 2];
        c[..center.len()].copy_from_slice(center);
        Ball { center: c, radius }
    }

    pub fn centered(radius: f64) -> Ball {
        Ball {
            center: [0.0; 2],
            radius,
        }
    }

    fn contains(&self, grid: &Grid, i: usize) -> bool {
        grid.distance_to(i, &self.center) < self.radius
    }
}

/// Minimization problem: kernel and grid (through the assembled form),
/// exterior data, penalty `rho`, threshold `xi` and phase.
#[derive(Debug, Clone)]
pub struct Problem {
    form: Arc<QuadraticForm>,
    exterior: Vec<f64>,
    pub rho: f64,
    pub xi: f64,
    pub phase: Phase,
}

impl Problem {
    /// Interior entries of `exterior` are ignored (stored as 0).
    pub fn new(form: Arc<QuadraticForm>, exterior: &Field, rho: f64, xi: f64, phase: Phase) -> Result<Problem> {
        if !exterior.same_grid(form.grid()) {
            return Err(NlfbError::config("exterior data lives on a different grid than the form"));
        }
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(NlfbError::config(format!("rho must be finite and nonnegative, got {rho}")));
        }
        if !xi.is_finite() {
            return Err(NlfbError::config(format!("xi must be finite, got {xi}")));
        }
        let grid = form.grid();
        let mut data = exterior.values.clone();
        for &i in grid.interior() {
            data[i] = 0.0;
        }
        if phase == Phase::OnePhase && data.iter().any(|&v| v < 0.0) {
            return Err(NlfbError::config("one-phase problems need nonnegative exterior data"));
        }
        Ok(Problem {
            form,
            exterior: data,
            rho,
            xi,
            phase,
        })
    }

    /// Assembles the form and builds the problem in one step.
    pub fn assemble(
        kernel: &KernelSpec,
        grid: &Arc<Grid>,
        exterior: &Field,
        rho: f64,
        xi: f64,
        phase: Phase,
    ) -> Result<Problem> {
        let form = Arc::new(assemble_form(kernel, grid)?);
        Problem::new(form, exterior, rho, xi, phase)
    }

    /// Same data and form with a different penalty.
    pub fn with_rho(&self, rho: f64) -> Result<Problem> {
        Problem::new(self.form.clone(), &self.exterior_field(), rho, self.xi, self.phase)
    }

    pub fn form(&self) -> &Arc<QuadraticForm> {
        &self.form
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.form.grid()
    }

    pub fn kernel(&self) -> &KernelSpec {
        self.form.kernel()
    }

    /// Exterior data with zeros on the interior.
    pub fn exterior_field(&self) -> Field {
        Field::from_parts_unchecked(self.grid().clone(), self.exterior.clone())
    }

    pub fn energy(&self, field: &Field) -> Result<EnergyBreakdown> {
        crate::energy::total_energy(&self.form, field, self.rho, self.xi)
    }

    fn lower(&self) -> f64 {
        self.phase.lower_bound()
    }

    fn check_admissible(&self, field: &Field) -> Result<()> {
        if !field.same_grid(self.grid()) {
            return Err(NlfbError::config("initial field lives on a different grid"));
        }
        let grid = self.grid();
        for i in 0..grid.len() {
            let v = field.values[i];
            if !v.is_finite() {
                return Err(NlfbError::config(format!("initial field is not finite at node {i}")));
            }
            if !grid.is_interior(i) && v != self.exterior[i] {
                return Err(NlfbError::config(format!(
                    "initial field differs from the exterior data at node {i}"
                )));
            }
            if v < self.lower() {
                return Err(NlfbError::config(format!(
                    "initial field violates the one-phase constraint at node {i}"
                )));
            }
        }
        Ok(())
    }
}

fn serialize_field<S: Serializer>(field: &Field, s: S) -> std::result::Result<S::Ok, S::Error> {
    field.values.serialize(s)
}

#[derive(Debug, Clone, Serialize)]
pub struct MinimizeResult {
    pub grid: GridSignature,
    #[serde(serialize_with = "serialize_field")]
    pub field: Field,
    pub energy: EnergyBreakdown,
    /// Interior node indices with `u > xi`.
    pub support: Vec<usize>,
    pub sweeps: usize,
    pub restarts_used: usize,
    pub converged: bool,
    pub best_restart_seed: u64,
    /// Every support whose energy lies within [`TIE_TOL`] of the optimum
    /// (oracle only; empty for descent results).
    pub tied_supports: Vec<Vec<usize>>,
    /// Total energy after every sweep.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

impl MinimizeResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("minimize result serializes")
    }
}

fn support_of(grid: &Grid, values: &[f64], xi: f64) -> Vec<usize> {
    grid.interior().iter().copied().filter(|&i| values[i] > xi).collect()
}

/// Solves the stationarity system on the interior nodes `free`, holding all
/// other values fixed. `values` provides the warm start and receives the
/// solution.
fn solve_on(form: &QuadraticForm, values: &mut [f64], free: &[usize]) -> Result<()> {
    if free.is_empty() {
        return Ok(());
    }
    let slots: Vec<usize> = free
        .iter()
        .map(|&i| form.slot(i).expect("free nodes are interior"))
        .collect();
    let mut masked = values.to_vec();
    for &i in free {
        masked[i] = 0.0;
    }
    let rhs: Vec<f64> = slots.par_iter().map(|&s| form.row_dot(s, &masked)).collect();
    let diag: Vec<f64> = slots.iter().map(|&s| form.diag(s)).collect();
    let k = free.len();
    // gather the free block once when it fits; otherwise read rows each time
    let block: Option<Vec<f64>> = (k * k <= GATHER_LIMIT).then(|| {
        let mut b = vec![0.0; k * k];
        b.par_chunks_mut(k).zip(&slots).for_each(|(dst, &s)| {
            let row = form.row(s);
            for (d, &j) in dst.iter_mut().zip(free) {
                *d = row[j];
            }
        });
        b
    });
    let apply = |x: &[f64], out: &mut [f64]| match &block {
        Some(b) => out.par_iter_mut().enumerate().for_each(|(p, o)| {
            let off: f64 = b[p * k..(p + 1) * k].iter().zip(x).map(|(w, xj)| w * xj).sum();
            *o = diag[p] * x[p] - off;
        }),
        None => out.par_iter_mut().enumerate().for_each(|(p, o)| {
            let row = form.row(slots[p]);
            let off: f64 = free.iter().zip(x).map(|(&j, &xj)| row[j] * xj).sum();
            *o = diag[p] * x[p] - off;
        }),
    };
    let mut x: Vec<f64> = free.iter().map(|&i| values[i]).collect();
    let outcome = pcg(apply, &diag, &rhs, &mut x, LINEAR_TARGET, 50 * free.len().max(1));
    if outcome.relative_residual > LINEAR_TOL || !outcome.relative_residual.is_finite() {
        return Err(NlfbError::Solver {
            message: format!("conjugate gradients stalled after {} iterations", outcome.iterations),
            residual: outcome.relative_residual,
        });
    }
    for (&i, v) in free.iter().zip(x) {
        values[i] = v;
    }
    Ok(())
}

/// Replaces `field` inside `region` by the minimizer of the Dirichlet energy
/// among fields agreeing with it outside the region.
pub fn harmonic_lifting(form: &QuadraticForm, field: &Field, region: &Ball) -> Result<Field> {
    if !field.same_grid(form.grid()) {
        return Err(NlfbError::config("field and form live on different grids"));
    }
    let grid = form.grid();
    let dim = grid.dim;
    let center_norm = distance(&region.center[..dim], &[0.0, 0.0][..dim]);
    if center_norm + region.radius > grid.omega_radius * (1.0 + 1e-12) {
        return Err(NlfbError::domain(format!(
            "lifting region (center {:?}, radius {}) is not contained in Omega",
            &region.center[..dim],
            region.radius
        )));
    }
    let free: Vec<usize> = grid
        .interior()
        .iter()
        .copied()
        .filter(|&i| region.contains(grid, i))
        .collect();
    if free.is_empty() {
        return Err(NlfbError::domain("lifting region contains no interior node"));
    }
    let mut values = field.values.clone();
    solve_on(form, &mut values, &free)?;
    Ok(Field::from_parts_unchecked(grid.clone(), values))
}

/// Exterior data lifted harmonically into all of `Omega`.
pub fn lift_exterior(problem: &Problem) -> Result<Field> {
    let grid = problem.grid();
    let mut values = problem.exterior.clone();
    let free = grid.interior().to_vec();
    solve_on(problem.form(), &mut values, &free)?;
    Ok(Field::from_parts_unchecked(grid.clone(), values))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentOptions {
    pub max_sweeps: usize,
    /// After sweeps that leave the phase pattern unchanged, solve the linear
    /// system on the free nodes and move toward it as far as the phase
    /// regions allow; the move is kept only if it lowers the energy.
    pub polish: bool,
    /// In [`minimize`] and [`rho_continuation`], alternate descent with
    /// single-node support changes until neither lowers the energy.
    pub support_search: bool,
}

impl Default for DescentOptions {
    fn default() -> Self {
        DescentOptions {
            max_sweeps: 20_000,
            polish: true,
            support_search: true,
        }
    }
}

/// Exact minimizer of `a t^2 - 2 b t + pen 1{t > xi}` over `t >= lo`,
/// falling back to `current` unless the minimizer is strictly better.
/// Ties between the on and off candidates go to off.
fn threshold_update(a: f64, b: f64, pen: f64, xi: f64, lo: f64, current: f64) -> f64 {
    let f = |t: f64| a * t * t - 2.0 * b * t + if t > xi { pen } else { 0.0 };
    let vertex = b / a;
    let on = if lo > xi {
        Some(vertex.max(lo))
    } else if vertex > xi {
        Some(vertex)
    } else {
        None
    };
    let off = (lo <= xi).then(|| vertex.clamp(lo, xi));
    let best = match (on, off) {
        (Some(p), Some(q)) => {
            if f(p) < f(q) {
                p
            } else {
                q
            }
        }
        (Some(p), None) => p,
        (None, Some(q)) => q,
        (None, None) => current,
    };
    if f(best) < f(current) {
        best
    } else {
        current
    }
}

/// Phase box of a node: `[lo, xi]` off the support, `[max(lo, xi), inf)` on it.
fn phase_box(on: bool, xi: f64, lo: f64) -> (f64, f64) {
    if on {
        (xi.max(lo), f64::INFINITY)
    } else {
        (lo, xi)
    }
}

/// Solves the linear system on nodes strictly inside their boxes and moves
/// toward the solution as far as the boxes allow.
fn polish_step(problem: &Problem, values: &[f64], on: impl Fn(usize) -> bool) -> Option<Vec<f64>> {
    let grid = problem.grid();
    let (xi, lo) = (problem.xi, problem.lower());
    let free: Vec<usize> = grid
        .interior()
        .iter()
        .copied()
        .filter(|&i| {
            let (a, b) = phase_box(on(i), xi, lo);
            values[i] > a && values[i] < b
        })
        .collect();
    if free.is_empty() {
        return None;
    }
    let mut target = values.to_vec();
    solve_on(problem.form(), &mut target, &free).ok()?;
    let mut alpha = 1.0f64;
    let mut blocking = None;
    for &i in &free {
        let (u, d) = (values[i], target[i] - values[i]);
        let (lower, upper) = phase_box(on(i), xi, lo);
        if d < 0.0 && lower.is_finite() {
            let t = (u - lower) / -d;
            if t < alpha {
                alpha = t;
                blocking = Some((i, lower));
            }
        } else if d > 0.0 && upper.is_finite() {
            let t = (upper - u) / d;
            if t < alpha {
                alpha = t;
                blocking = Some((i, upper));
            }
        }
    }
    let mut out = values.to_vec();
    for &i in &free {
        let (lower, upper) = phase_box(on(i), xi, lo);
        out[i] = (values[i] + alpha * (target[i] - values[i])).clamp(lower, upper);
    }
    if let Some((i, bound)) = blocking {
        out[i] = bound;
    }
    Some(out)
}

/// Minimizes the Dirichlet energy with every node held in the phase box
/// given by `on` (a convex problem), starting from `values`.
fn box_descent(problem: &Problem, mut values: Vec<f64>, on: &[bool]) -> Vec<f64> {
    let form = problem.form();
    let interior = problem.grid().interior();
    let (xi, lo) = (problem.xi, problem.lower());
    for &i in interior {
        let (a, b) = phase_box(on[i], xi, lo);
        values[i] = values[i].clamp(a, b);
    }
    let mut energy = form.energy_of(&values);
    for _ in 0..BOX_SWEEPS {
        for (slot, &i) in interior.iter().enumerate() {
            let (a, b) = phase_box(on[i], xi, lo);
            values[i] = (form.row_dot(slot, &values) / form.diag(slot)).clamp(a, b);
        }
        let mut next = form.energy_of(&values);
        if let Some(candidate) = polish_step(problem, &values, |i| on[i]) {
            let e = form.energy_of(&candidate);
            if e <= next {
                values = candidate;
                next = e;
            }
        }
        let done = (energy - next).abs() < STOP_TOL * (1.0 + next.abs());
        energy = next;
        if done {
            break;
        }
    }
    values
}

/// Best single-node change of the support, each candidate re-optimized
/// with [`box_descent`]. Candidates are interior nodes with a lattice
/// neighbour (interior or exterior) on the other side of `xi`. A winning
/// flip is then extended to all same-phase nodes in balls of doubling
/// radius around it while the energy keeps dropping. Returns the improved
/// values, if any.
fn support_step(problem: &Problem, values: &[f64]) -> Option<Vec<f64>> {
    let grid = problem.grid();
    let (rho, xi, lo) = (problem.rho, problem.xi, problem.lower());
    let on: Vec<bool> = (0..grid.len())
        .map(|i| if grid.is_interior(i) { values[i] > xi } else { problem.exterior[i] > xi })
        .collect();
    let candidates: Vec<usize> = grid
        .interior()
        .iter()
        .copied()
        .filter(|&i| grid.neighbors(i).any(|j| on[j] != on[i]))
        .collect();
    let current = breakdown_of(problem.form(), values, rho, xi).total;
    // flips every node of `i`'s phase within `radius` of it
    let flip = |i: usize, radius: f64| -> Option<(f64, Vec<f64>)> {
        let target = !on[i];
        if target && lo > xi {
            return None;
        }
        let mut flipped = on.clone();
        let mut start = values.to_vec();
        for &j in grid.interior() {
            if on[j] == on[i] && (j == i || grid.distance_to(j, grid.position(i)) <= radius) {
                flipped[j] = target;
                start[j] = if target { values[j].max(xi) } else { values[j].min(xi).max(lo) };
            }
        }
        let v = box_descent(problem, start, &flipped);
        Some((breakdown_of(problem.form(), &v, rho, xi).total, v))
    };
    let (mut best_e, i, mut best_v) = candidates
        .par_iter()
        .filter_map(|&i| flip(i, 0.0).map(|(e, v)| (e, i, v)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))?;
    if !(best_e < current - STOP_TOL * (1.0 + current.abs())) {
        return None;
    }
    // grow the flipped block while that keeps paying off
    let mut radius = grid.h;
    while radius < 2.0 * grid.omega_radius {
        match flip(i, radius) {
            Some((e, v)) if e < best_e => {
                best_e = e;
                best_v = v;
                radius *= 2.0;
            }
            _ => break,
        }
    }
    Some(best_v)
}

pub fn coordinate_descent(problem: &Problem, init: &Field, seed: u64) -> Result<MinimizeResult> {
    coordinate_descent_with(problem, init, seed, &DescentOptions::default())
}

/// Seeded random-order sweeps of exact one-variable minimization. The energy
/// never increases from one visit to the next.
pub fn coordinate_descent_with(
    problem: &Problem,
    init: &Field,
    seed: u64,
    options: &DescentOptions,
) -> Result<MinimizeResult> {
    problem.check_admissible(init)?;
    let form = problem.form();
    let grid = problem.grid();
    let (rho, xi, lo) = (problem.rho, problem.xi, problem.lower());
    let pen = rho * grid.cell_measure;
    let interior = grid.interior();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = init.values.clone();
    let mut energy = breakdown_of(form, &u, rho, xi).total;
    let mut trace = vec![energy];
    let mut order: Vec<usize> = (0..interior.len()).collect();
    let mut converged = false;
    let mut sweeps = 0;

    while sweeps < options.max_sweeps {
        sweeps += 1;
        order.shuffle(&mut rng);
        let before = energy;
        let mut pattern_changed = false;
        for &slot in &order {
            let i = interior[slot];
            let b = form.row_dot(slot, &u);
            let old = u[i];
            let new = threshold_update(form.diag(slot), b, pen, xi, lo, old);
            if new != old {
                pattern_changed |= (new > xi) != (old > xi);
                u[i] = new;
            }
        }
        energy = breakdown_of(form, &u, rho, xi).total;
        if options.polish && (!pattern_changed || sweeps % 16 == 0) {
            let snapshot = u.clone();
            if let Some(candidate) = polish_step(problem, &u, |i| snapshot[i] > xi) {
                let e = breakdown_of(form, &candidate, rho, xi).total;
                if e <= energy {
                    pattern_changed |= candidate
                        .iter()
                        .zip(&u)
                        .any(|(c, v)| (c > &xi) != (v > &xi));
                    u = candidate;
                    energy = e;
                }
            }
        }
        trace.push(energy);
        if !pattern_changed && (before - energy).abs() < STOP_TOL * (1.0 + energy.abs()) {
            converged = true;
            break;
        }
    }

    let field = Field::from_parts_unchecked(grid.clone(), u);
    Ok(MinimizeResult {
        grid: grid.signature(),
        energy: breakdown_of(form, &field.values, rho, xi),
        support: support_of(grid, &field.values, xi),
        field,
        sweeps,
        restarts_used: 1,
        converged,
        best_restart_seed: seed,
        tied_supports: Vec::new(),
        trace,
    })
}

/// Coordinate descent followed by rounds of support search and descent.
pub fn descend(problem: &Problem, init: &Field, seed: u64, options: &DescentOptions) -> Result<MinimizeResult> {
    let mut result = coordinate_descent_with(problem, init, seed, options)?;
    if !options.support_search {
        return Ok(result);
    }
    let limit = 4 * problem.grid().interior().len() + 4;
    for _ in 0..limit {
        let Some(values) = support_step(problem, &result.field.values) else {
            break;
        };
        let start = Field::from_parts_unchecked(problem.grid().clone(), values);
        let next = coordinate_descent_with(problem, &start, seed, options)?;
        let mut trace = std::mem::take(&mut result.trace);
        trace.extend_from_slice(&next.trace);
        let sweeps = result.sweeps + next.sweeps;
        result = next;
        result.trace = trace;
        result.sweeps = sweeps;
    }
    Ok(result)
}

/// Initial field for restart `k`: the lifting of the exterior data, the zero
/// extension, then random supports carrying lifting values.
fn restart_init(problem: &Problem, lifting: &Field, k: usize, seed: u64) -> Field {
    let grid = problem.grid();
    let (xi, lo) = (problem.xi, problem.lower());
    let mut values = problem.exterior.clone();
    match k {
        0 => {
            for &i in grid.interior() {
                values[i] = lifting.values[i].max(lo);
            }
        }
        1 => {}
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for &i in grid.interior() {
                let lifted = lifting.values[i].max(lo);
                values[i] = if rng.gen_bool(0.5) || lo > xi {
                    lifted
                } else {
                    lifted.min(xi).max(lo)
                };
            }
        }
    }
    Field::from_parts_unchecked(grid.clone(), values)
}

/// Best of `n_restarts` descents; restarts run concurrently and the winner is
/// chosen by `(energy, seed)`.
pub fn minimize(problem: &Problem, n_restarts: usize, seed: u64) -> Result<MinimizeResult> {
    minimize_with(problem, n_restarts, seed, &DescentOptions::default())
}

pub fn minimize_with(
    problem: &Problem,
    n_restarts: usize,
    seed: u64,
    options: &DescentOptions,
) -> Result<MinimizeResult> {
    if n_restarts == 0 {
        return Err(NlfbError::config("n_restarts must be at least 1"));
    }
    let lifting = lift_exterior(problem)?;
    let results: Vec<MinimizeResult> = (0..n_restarts)
        .into_par_iter()
        .map(|k| {
            let s = seed.wrapping_add(k as u64);
            let init = restart_init(problem, &lifting, k, s);
            descend(problem, &init, s, options)
        })
        .collect::<Result<_>>()?;
    let mut best = results
        .into_iter()
        .min_by(|a, b| {
            a.energy
                .total
                .total_cmp(&b.energy.total)
                .then(a.best_restart_seed.cmp(&b.best_restart_seed))
        })
        .expect("at least one restart");
    best.restarts_used = n_restarts;
    Ok(best)
}

/// Solves a sequence of penalties from largest to smallest. Each penalty
/// keeps the better of a descent warm-started from the previous minimizer
/// and a fresh [`minimize`]. Results follow the sorted order.
pub fn rho_continuation(problem: &Problem, rhos: &[f64], n_restarts: usize, seed: u64) -> Result<Vec<(f64, MinimizeResult)>> {
    let mut sorted = rhos.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut out: Vec<(f64, MinimizeResult)> = Vec::with_capacity(sorted.len());
    for &rho in &sorted {
        let p = problem.with_rho(rho)?;
        let result = match out.last() {
            None => minimize(&p, n_restarts, seed)?,
            Some((_, prev)) => {
                let warm = descend(&p, &prev.field, seed, &DescentOptions::default())?;
                let fresh = minimize(&p, n_restarts, seed)?;
                if warm.energy.total <= fresh.energy.total {
                    warm
                } else {
                    fresh
                }
            }
        };
        out.push((rho, result));
    }
    Ok(out)
}

/// Global minimum by enumeration of supports.
///
/// For every subset `S` of interior nodes, minimizes the quadratic part
/// subject to `u <= xi` off `S` (and `u >= 0` in one-phase) with an exact
/// active-set solver, then evaluates the true functional. Since the penalty
/// of that field is at most `rho m |S|`, and `S = {u* > xi}` recovers a value
/// no larger than `J(u*)`, the best enumerated field is a global minimizer.
pub fn oracle_minimize(problem: &Problem) -> Result<MinimizeResult> {
    let form = problem.form();
    let grid = problem.grid();
    let interior = grid.interior();
    let k = interior.len();
    if k > ORACLE_MAX_NODES {
        return Err(NlfbError::Capacity(format!(
            "enumeration oracle supports at most {ORACLE_MAX_NODES} interior nodes, got {k}"
        )));
    }
    let (rho, xi, lo) = (problem.rho, problem.xi, problem.lower());
    let a = DMatrix::from_fn(k, k, |p, q| {
        if p == q {
            form.diag(p)
        } else {
            -form.row(p)[interior[q]]
        }
    });
    let b = DVector::from_fn(k, |p, _| form.row_dot(p, &problem.exterior));

    let candidates: Vec<(f64, u32, Vec<f64>)> = (0u32..(1u32 << k))
        .into_par_iter()
        .filter_map(|mask| {
            let on = |p: usize| mask & (1 << p) != 0;
            if lo > xi && (0..k).any(|p| !on(p)) {
                return None;
            }
            let lower = vec![lo; k];
            let upper: Vec<f64> = (0..k).map(|p| if on(p) { f64::INFINITY } else { xi }).collect();
            let x = box_qp(&a, &b, &lower, &upper);
            let mut values = problem.exterior.clone();
            for (p, &i) in interior.iter().enumerate() {
                values[i] = x[p].max(lo);
            }
            let e = breakdown_of(form, &values, rho, xi).total;
            Some((e, mask, values))
        })
        .collect();
    let (best_e, _, best_values) = candidates
        .iter()
        .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)))
        .ok_or_else(|| NlfbError::data("no admissible support"))?;
    let window = TIE_TOL * best_e.abs().max(f64::MIN_POSITIVE);
    let tied: BTreeSet<Vec<usize>> = candidates
        .iter()
        .filter(|c| c.0 - best_e <= window)
        .map(|c| support_of(grid, &c.2, xi))
        .collect();
    let field = Field::from_parts_unchecked(grid.clone(), best_values.clone());
    Ok(MinimizeResult {
        grid: grid.signature(),
        energy: breakdown_of(form, &field.values, rho, xi),
        support: support_of(grid, &field.values, xi),
        field,
        sweeps: 0,
        restarts_used: 0,
        converged: true,
        best_restart_seed: 0,
        tied_supports: tied.into_iter().collect(),
        trace: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::dirichlet_energy;
    use crate::grid::sample_field;

    fn line_problem(h: f64, rho: f64, phase: Phase, data: impl Fn(f64) -> f64) -> Problem {
        let grid = Arc::new(Grid::build_coarse(1, h, 1.0, 2.0).unwrap());
        let kernel = KernelSpec::fractional(1, 0.5).unwrap();
        let g = sample_field(&grid, |x| if x[0].abs() >= 1.0 { data(x[0]) } else { 0.0 }).unwrap();
        Problem::assemble(&kernel, &grid, &g, rho, 0.0, phase).unwrap()
    }

    #[test]
    fn threshold_update_cases() {
        // one-phase, xi = 0: off candidate is exactly 0
        assert_eq!(threshold_update(1.0, -0.5, 0.1, 0.0, 0.0, 0.3), 0.0);
        // vertex 2 with cost -4 + pen
        assert_eq!(threshold_update(1.0, 2.0, 1.0, 0.0, 0.0, 0.0), 2.0);
        assert_eq!(threshold_update(1.0, 2.0, 5.0, 0.0, 0.0, 2.0), 0.0);
        // exact tie resolves to off
        assert_eq!(threshold_update(1.0, 2.0, 4.0, 0.0, 0.0, 1.0), 0.0);
        // two-phase: negative vertex taken without penalty
        assert_eq!(threshold_update(2.0, -1.0, 1.0, 0.0, f64::NEG_INFINITY, 0.0), -0.5);
        // general xi: off candidate clamped to (-inf, xi]
        assert_eq!(threshold_update(1.0, 0.8, 10.0, 0.5, f64::NEG_INFINITY, 0.0), 0.5);
    }

    #[test]
    fn lifting_of_constant_is_constant() {
        let g = Arc::new(Grid::build(1, 0.05, 1.0, 2.0).unwrap());
        let form = assemble_form(&KernelSpec::fractional(1, 0.4).unwrap(), &g).unwrap();
        let c = Field::constant(g.clone(), 1.7);
        let h = harmonic_lifting(&form, &c, &Ball::centered(0.5)).unwrap();
        for v in &h.values {
            assert!((v - 1.7).abs() < 1e-10);
        }
    }

    #[test]
    fn lifting_region_checks() {
        let g = Arc::new(Grid::build(1, 0.05, 1.0, 2.0).unwrap());
        let form = assemble_form(&KernelSpec::fractional(1, 0.4).unwrap(), &g).unwrap();
        let f = Field::zeros(g.clone());
        assert!(matches!(
            harmonic_lifting(&form, &f, &Ball::new(&[0.0], 0.01)),
            Err(NlfbError::Domain(_))
        ));
        assert!(matches!(
            harmonic_lifting(&form, &f, &Ball::new(&[0.8], 0.5)),
            Err(NlfbError::Domain(_))
        ));
    }

    #[test]
    fn lifting_lowers_energy() {
        let g = Arc::new(Grid::build(1, 0.02, 1.0, 2.0).unwrap());
        let form = assemble_form(&KernelSpec::fractional(1, 0.5).unwrap(), &g).unwrap();
        let f = sample_field(&g, |x| (5.0 * x[0]).sin() + x[0]).unwrap();
        let h = harmonic_lifting(&form, &f, &Ball::centered(0.5)).unwrap();
        assert!(dirichlet_energy(&form, &h).unwrap() < dirichlet_energy(&form, &f).unwrap());
    }

    #[test]
    fn zero_data_gives_zero_minimizer() {
        let p = line_problem(0.2, 0.3, Phase::OnePhase, |_| 0.0);
        let r = minimize(&p, 3, 1).unwrap();
        assert!(r.field.values.iter().all(|&v| v == 0.0));
        assert_eq!(r.energy.total, 0.0);
        let o = oracle_minimize(&p).unwrap();
        assert_eq!(o.energy.total, 0.0);
    }

    #[test]
    fn rho_zero_descent_matches_lifting() {
        let p = line_problem(0.05, 0.0, Phase::TwoPhase, |x| x.sin() + 0.3);
        let zero_init = restart_init(&p, &Field::zeros(p.grid().clone()), 1, 0);
        let r = coordinate_descent(&p, &zero_init, 5).unwrap();
        let lift = lift_exterior(&p).unwrap();
        let err = r
            .field
            .values
            .iter()
            .zip(&lift.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-8, "sup error {err}");
        assert!(r.converged);
    }

    #[test]
    fn descent_rejects_bad_init() {
        let p = line_problem(0.1, 0.3, Phase::OnePhase, |_| 1.0);
        let mut bad = p.exterior_field();
        bad.values[p.grid().interior()[0]] = -1.0;
        assert!(matches!(coordinate_descent(&p, &bad, 0), Err(NlfbError::Config(_))));
        let mut moved = p.exterior_field();
        moved.values[0] = 3.0;
        assert!(matches!(coordinate_descent(&p, &moved, 0), Err(NlfbError::Config(_))));
    }

    #[test]
    fn one_restart_equals_descent_from_lifting() {
        let p = line_problem(0.1, 0.05, Phase::OnePhase, |x| if x > 0.0 { 1.0 } else { 0.0 });
        let lift = lift_exterior(&p).unwrap();
        let direct = coordinate_descent(&p, &restart_init(&p, &lift, 0, 11), 11).unwrap();
        let via = minimize(&p, 1, 11).unwrap();
        assert_eq!(direct.field.values, via.field.values);
        assert_eq!(direct.energy, via.energy);
    }

    #[test]
    fn oracle_capacity() {
        let p = line_problem(0.2, 0.1, Phase::OnePhase, |_| 1.0);
        assert!(oracle_minimize(&p).is_ok());
        let big = line_problem(0.1, 0.1, Phase::OnePhase, |_| 1.0);
        assert!(matches!(oracle_minimize(&big), Err(NlfbError::Capacity(_))));
    }

    #[test]
    fn oracle_without_penalty_is_lifting() {
        let p = line_problem(0.2, 0.0, Phase::OnePhase, |x| 1.0 + 0.5 * x);
        let o = oracle_minimize(&p).unwrap();
        let lift = lift_exterior(&p).unwrap();
        for (a, b) in o.field.values.iter().zip(&lift.values) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(o.support.len(), 10);
    }

    #[test]
    fn json_is_stable() {
        let p = line_problem(0.2, 0.05, Phase::OnePhase, |x| if x > 0.0 { 1.0 } else { 0.2 });
        let a = minimize(&p, 4, 3).unwrap().to_json();
        let b = minimize(&p, 4, 3).unwrap().to_json();
        assert_eq!(a, b);
        assert!(a.contains("\"support\""));
    }
}
