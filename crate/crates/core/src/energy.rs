//! Discrete Dirichlet form and the penalized functional.
//!
//! The double integral over `R^{2d} \ (Omega^c)^2` becomes a sum over
//! unordered node pairs that are not both exterior, each with weight
//! `w_ij = 2 K(x_i, x_j) m^2` (midpoint rule, self-pairs dropped). Only rows
//! of interior nodes are ever needed: the energy is
//!
//! ```text
//! E(u) = sum over interior i, then j exterior or interior with j > i, of w_ij (u_i - u_j)^2.
//! ```
//!
//! All reductions run in a fixed order (sequential inside a row, pairwise
//! tree across rows) so results do not depend on the thread count.

use std::borrow::Cow;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{NlfbError, Result};
use crate::grid::{Field, Grid};
use crate::kernel::KernelSpec;

/// Row-major `interior x all-nodes` tables above this many entries are
/// recomputed on the fly instead of stored.
pub const DENSE_ENTRY_LIMIT: usize = 1 << 25;

const NO_SLOT: usize = usize::MAX;
const TREE_LEAF: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoragePolicy {
    Auto,
    Dense,
    MatrixFree,
}

#[derive(Debug, Clone)]
enum Storage {
    Dense(Vec<f64>),
    MatrixFree,
}

/// Symmetric pairwise weights of the discrete Dirichlet energy.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    grid: Arc<Grid>,
    kernel: KernelSpec,
    slot_of: Vec<usize>,
    storage: Storage,
    diag: Vec<f64>,
}

/// `2 K(x, y) m^2`.
#[inline]
pub fn pair_weight(kernel: &KernelSpec, x: &[f64], y: &[f64], cell_measure: f64) -> f64 {
    2.0 * kernel.eval_unchecked(x, y) * cell_measure * cell_measure
}

/// Sums with a fixed binary tree over blocks of 32.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= TREE_LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn assemble_form(kernel: &KernelSpec, grid: &Arc<Grid>) -> Result<QuadraticForm> {
    assemble_form_with(kernel, grid, StoragePolicy::Auto)
}

pub fn assemble_form_with(kernel: &KernelSpec, grid: &Arc<Grid>, policy: StoragePolicy) -> Result<QuadraticForm> {
    kernel.validate()?;
    if kernel.dim != grid.dim {
        return Err(NlfbError::config(format!(
            "kernel dimension {} does not match grid dimension {}",
            kernel.dim, grid.dim
        )));
    }
    let n = grid.len();
    let interior = grid.interior();
    let mut slot_of = vec![NO_SLOT; n];
    for (slot, &i) in interior.iter().enumerate() {
        slot_of[i] = slot;
    }
    let entries = interior.len() * n;
    let dense = match policy {
        StoragePolicy::Dense => true,
        StoragePolicy::MatrixFree => false,
        StoragePolicy::Auto => entries <= DENSE_ENTRY_LIMIT,
    };
    let mut form = QuadraticForm {
        grid: grid.clone(),
        kernel: kernel.clone(),
        slot_of,
        storage: Storage::MatrixFree,
        diag: Vec::new(),
    };
    if dense && n > 0 {
        let mut table = vec![0.0; entries];
        table
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(slot, row)| form.fill_row(slot, row));
        form.storage = Storage::Dense(table);
    }
    form.diag = (0..interior.len())
        .into_par_iter()
        .map(|slot| form.row(slot).iter().sum())
        .collect();
    Ok(form)
}

impl QuadraticForm {
    fn fill_row(&self, slot: usize, row: &mut [f64]) {
        let grid = &self.grid;
        let i = grid.interior()[slot];
        let xi = grid.position(i);
        let m = grid.cell_measure;
        for (j, w) in row.iter_mut().enumerate() {
            *w = if j == i {
                0.0
            } else {
                pair_weight(&self.kernel, xi, grid.position(j), m)
            };
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.storage, Storage::Dense(_))
    }

    pub fn n_interior(&self) -> usize {
        self.diag.len()
    }

    /// Interior slot of node `i`, if it is interior.
    pub fn slot(&self, i: usize) -> Option<usize> {
        match self.slot_of[i] {
            NO_SLOT => None,
            s => Some(s),
        }
    }

    /// Weights from the interior node in `slot` to every node (0 at itself).
    pub fn row(&self, slot: usize) -> Cow<'_, [f64]> {
        let n = self.grid.len();
        match &self.storage {
            Storage::Dense(table) => Cow::Borrowed(&table[slot * n..(slot + 1) * n]),
            Storage::MatrixFree => {
                let mut row = vec![0.0; n];
                self.fill_row(slot, &mut row);
                Cow::Owned(row)
            }
        }
    }

    /// `sum_j w_ij` for the interior node in `slot`.
    pub fn diag(&self, slot: usize) -> f64 {
        self.diag[slot]
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    /// `sum_j w_ij v_j` for the interior node in `slot`.
    pub fn row_dot(&self, slot: usize, values: &[f64]) -> f64 {
        self.row(slot).iter().zip(values).map(|(w, v)| w * v).sum()
    }

    /// Stored weight of the unordered pair `{i, j}`; 0 for self-pairs and
    /// exterior-exterior pairs.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        match (self.slot(i), self.slot(j)) {
            (Some(s), _) => self.row(s)[j],
            (None, Some(s)) => self.row(s)[i],
            (None, None) => 0.0,
        }
    }

    pub fn stored_pair_count(&self) -> usize {
        let n = self.grid.len();
        let k = self.n_interior();
        k * (k.saturating_sub(1)) / 2 + k * (n - k)
    }

    /// Dirichlet energy of raw node values.
    pub fn energy_of(&self, values: &[f64]) -> f64 {
        let grid = &self.grid;
        let partials: Vec<f64> = grid
            .interior()
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let row = self.row(slot);
                let ui = values[i];
                let mut acc = 0.0;
                for (j, (&w, &uj)) in row.iter().zip(values).enumerate() {
                    if self.slot_of[j] == NO_SLOT || j > i {
                        let d = ui - uj;
                        acc += w * d * d;
                    }
                }
                acc
            })
            .collect();
        pairwise_sum(&partials)
    }

    fn check_field(&self, field: &Field) -> Result<()> {
        if !field.same_grid(&self.grid) {
            return Err(NlfbError::config("field and quadratic form live on different grids"));
        }
        Ok(())
    }
}

pub fn dirichlet_energy(form: &QuadraticForm, field: &Field) -> Result<f64> {
    form.check_field(field)?;
    Ok(form.energy_of(&field.values))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyBreakdown {
    pub dirichlet: f64,
    pub volume: f64,
    pub total: f64,
    pub support_count: usize,
    pub truncation_bound: f64,
}

impl EnergyBreakdown {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("energy breakdown serializes")
    }
}

/// Number of interior nodes with `u > xi` (strict).
pub fn support_count(grid: &Grid, values: &[f64], xi: f64) -> usize {
    grid.interior().iter().filter(|&&i| values[i] > xi).count()
}

pub(crate) fn breakdown_of(form: &QuadraticForm, values: &[f64], rho: f64, xi: f64) -> EnergyBreakdown {
    let grid = form.grid();
    let dirichlet = form.energy_of(values);
    let count = support_count(grid, values, xi);
    let volume = rho * (grid.cell_measure * count as f64);
    let sup = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let kernel = form.kernel();
    EnergyBreakdown {
        dirichlet,
        volume,
        total: dirichlet + volume,
        support_count: count,
        truncation_bound: truncation_error_bound(grid, kernel.s, kernel.lambda_up, sup),
    }
}

/// `E(u) + rho |{u > xi} ∩ Omega_h|`.
pub fn total_energy(form: &QuadraticForm, field: &Field, rho: f64, xi: f64) -> Result<EnergyBreakdown> {
    form.check_field(field)?;
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(NlfbError::config(format!("rho must be finite and nonnegative, got {rho}")));
    }
    Ok(breakdown_of(form, &field.values, rho, xi))
}

/// `R^(2s) sum_{|x_i - x0| > R} m u_i |x_i - x0|^(-d - 2s)`; nodes beyond
/// `R_inf` are absent and contribute nothing. The sum is signed.
pub fn tail(field: &Field, x0: &[f64], radius: f64, s: f64) -> Result<f64> {
    if !(radius > 0.0) {
        return Err(NlfbError::config(format!("tail radius must be positive, got {radius}")));
    }
    let grid = field.grid();
    let p = grid.dim as f64 + 2.0 * s;
    let m = grid.cell_measure;
    let terms: Vec<f64> = (0..grid.len())
        .filter_map(|i| {
            let r = grid.distance_to(i, x0);
            (r > radius).then(|| m * field.values[i] * r.powf(-p))
        })
        .collect();
    Ok(radius.powf(2.0 * s) * pairwise_sum(&terms))
}

/// Volume of the unit ball in dimension `d`.
pub fn unit_ball_volume(d: usize) -> f64 {
    match d {
        1 => 2.0,
        2 => std::f64::consts::PI,
        _ => {
            let half = d as f64 / 2.0;
            std::f64::consts::PI.powf(half) / gamma_half_integer(half + 1.0)
        }
    }
}

fn gamma_half_integer(x: f64) -> f64 {
    // x is a positive integer or half-integer
    if (x - 1.0).abs() < 1e-12 {
        1.0
    } else if (x - 0.5).abs() < 1e-12 {
        std::f64::consts::PI.sqrt()
    } else {
        (x - 1.0) * gamma_half_integer(x - 1.0)
    }
}

/// Upper bound on the pair mass dropped by treating `u` as 0 beyond `R_inf`.
///
/// Only pairs with one point in `Omega` are part of the functional, and
/// then `|x - y| >= R_inf - omega >= R_inf / 2`, so
/// `bound = (1 - s) Lambda sup^2 |Omega| (d omega_d / s) (R_inf / 2)^(-2s)`.
pub fn truncation_error_bound(grid: &Grid, s: f64, lambda_up: f64, field_sup: f64) -> f64 {
    let d = grid.dim;
    let omega = unit_ball_volume(d) * grid.omega_radius.powi(d as i32);
    let surface_factor = d as f64 * unit_ball_volume(d) / s;
    (1.0 - s) * lambda_up * field_sup * field_sup * omega * surface_factor * (0.5 * grid.r_inf).powf(-2.0 * s)
}
