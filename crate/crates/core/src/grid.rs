//! Cell-centred lattices over `B_{R_inf}` and the fields that live on them.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{NlfbError, Result};
use crate::kernel::distance;

/// A point in up to two dimensions; 1D grids leave the second coordinate at 0.
pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Interior,
    Exterior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub position: Point,
    /// Integer lattice coordinates; position = (lattice + 1/2) * h + offset.
    pub lattice: [i64; 2],
    pub role: Role,
}

/// Parameters that identify a grid. Two fields are compatible iff their
/// grids have equal signatures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridSignature {
    pub dim: usize,
    pub h: f64,
    pub omega_radius: f64,
    pub r_inf: f64,
}

impl GridSignature {
    /// `# d h omega R_inf`, using shortest round-trip float formatting.
    pub fn header_line(&self) -> String {
        format!("# {} {} {} {}", self.dim, self.h, self.omega_radius, self.r_inf)
    }

    pub fn parse_header(line: &str) -> Result<Self> {
        let body = line
            .trim()
            .strip_prefix('#')
            .ok_or_else(|| NlfbError::config("grid signature line must start with `#`"))?;
        let parts: Vec<&str> = body.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(NlfbError::config("grid signature must be `# d h omega R_inf`"));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| NlfbError::config(format!("bad number `{s}` in grid signature")))
        };
        let dim = parts[0]
            .parse::<usize>()
            .map_err(|_| NlfbError::config(format!("bad dimension `{}` in grid signature", parts[0])))?;
        Ok(GridSignature {
            dim,
            h: num(parts[1])?,
            omega_radius: num(parts[2])?,
            r_inf: num(parts[3])?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Grid {
    pub dim: usize,
    pub h: f64,
    pub omega_radius: f64,
    pub r_inf: f64,
    pub cell_measure: f64,
    nodes: Vec<Node>,
    interior: Vec<usize>,
    lookup: HashMap<[i64; 2], usize>,
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.signature() == other.signature() && self.nodes == other.nodes
    }
}

impl Grid {
    /// Builds the lattice of cell centres inside `B_{R_inf}`, ordered
    /// lexicographically by coordinates.
    ///
    /// Requires `h < omega_radius / 4` and `R_inf >= 2 omega_radius`.
    pub fn build(dim: usize, h: f64, omega_radius: f64, r_inf: f64) -> Result<Grid> {
        if !(h < omega_radius / 4.0) {
            return Err(NlfbError::config(format!(
                "spacing h = {h} must be below omega_radius / 4 = {}",
                omega_radius / 4.0
            )));
        }
        Grid::build_coarse(dim, h, omega_radius, r_inf)
    }

    /// As [`Grid::build`] but only requires `h <= omega_radius`; used for the
    /// micro-scale instances of the enumeration oracle.
    pub fn build_coarse(dim: usize, h: f64, omega_radius: f64, r_inf: f64) -> Result<Grid> {
        if dim != 1 && dim != 2 {
            return Err(NlfbError::config(format!("dimension must be 1 or 2, got {dim}")));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(NlfbError::config(format!("spacing must be positive, got {h}")));
        }
        if !(omega_radius > 0.0 && omega_radius.is_finite()) {
            return Err(NlfbError::config(format!("omega_radius must be positive, got {omega_radius}")));
        }
        if !(h <= omega_radius) {
            return Err(NlfbError::config(format!("spacing h = {h} exceeds omega_radius = {omega_radius}")));
        }
        if !(r_inf >= 2.0 * omega_radius && r_inf.is_finite()) {
            return Err(NlfbError::config(format!(
                "truncation radius {r_inf} must be at least 2 * omega_radius = {}",
                2.0 * omega_radius
            )));
        }
        let kmax = (r_inf / h).ceil() as i64 + 1;
        let center = |k: i64| (k as f64 + 0.5) * h;
        let mut nodes = Vec::new();
        let ks: Vec<i64> = (-kmax..kmax).collect();
        if dim == 1 {
            for &k in &ks {
                let p = [center(k), 0.0];
                if p[0].abs() <= r_inf {
                    nodes.push((p, [k, 0]));
                }
            }
        } else {
            for &k1 in &ks {
                for &k2 in &ks {
                    let p = [center(k1), center(k2)];
                    if distance(&p, &[0.0, 0.0]) <= r_inf {
                        nodes.push((p, [k1, k2]));
                    }
                }
            }
        }
        let nodes = nodes
            .into_iter()
            .map(|(position, lattice)| {
                let role = if distance(&position[..dim], &[0.0, 0.0][..dim]) < omega_radius {
                    Role::Interior
                } else {
                    Role::Exterior
                };
                Node {
                    position,
                    lattice,
                    role,
                }
            })
            .collect();
        Ok(Grid::from_nodes(dim, h, omega_radius, r_inf, nodes))
    }

    fn from_nodes(dim: usize, h: f64, omega_radius: f64, r_inf: f64, nodes: Vec<Node>) -> Grid {
        let interior = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.role == Role::Interior)
            .map(|(i, _)| i)
            .collect();
        let lookup = nodes.iter().enumerate().map(|(i, n)| (n.lattice, i)).collect();
        Grid {
            dim,
            h,
            omega_radius,
            r_inf,
            cell_measure: h.powi(dim as i32),
            nodes,
            interior,
            lookup,
        }
    }

    /// Image of the node set under `x -> (x - x0) / r`, with `B_1` as the new
    /// domain. Lattice coordinates (and so neighbour relations) are kept; the
    /// truncation radius becomes `(R_inf + |x0|) / r`, which still encloses
    /// every mapped node.
    pub fn affine_image(&self, x0: &[f64], r: f64) -> Result<Grid> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(NlfbError::config(format!("map radius must be positive, got {r}")));
        }
        let d = self.dim;
        let nodes: Vec<Node> = self
            .nodes
            .iter()
            .map(|n| {
                let mut p = [0.0; 2];
                for k in 0..d {
                    p[k] = (n.position[k] - x0[k]) / r;
                }
                let role = if distance(&p[..d], &[0.0, 0.0][..d]) < 1.0 {
                    Role::Interior
                } else {
                    Role::Exterior
                };
                Node {
                    position: p,
                    lattice: n.lattice,
                    role,
                }
            })
            .collect();
        let x0_norm = distance(&x0[..d], &[0.0, 0.0][..d]);
        Ok(Grid::from_nodes(d, self.h / r, 1.0, (self.r_inf + x0_norm) / r, nodes))
    }

    pub fn signature(&self) -> GridSignature {
        GridSignature {
            dim: self.dim,
            h: self.h,
            omega_radius: self.omega_radius,
            r_inf: self.r_inf,
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Indices of interior nodes in node order.
    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.nodes[i].position[..self.dim]
    }

    pub fn role(&self, i: usize) -> Role {
        self.nodes[i].role
    }

    pub fn is_interior(&self, i: usize) -> bool {
        self.nodes[i].role == Role::Interior
    }

    pub fn norm(&self, i: usize) -> f64 {
        distance(self.position(i), &[0.0, 0.0][..self.dim])
    }

    pub fn distance_to(&self, i: usize, x: &[f64]) -> f64 {
        distance(self.position(i), &x[..self.dim])
    }

    /// Lattice neighbours at distance `h` (2 in 1D, 4 in 2D).
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let [a, b] = self.nodes[i].lattice;
        let offsets: &[[i64; 2]] = if self.dim == 1 {
            &[[-1, 0], [1, 0]]
        } else {
            &[[-1, 0], [1, 0], [0, -1], [0, 1]]
        };
        offsets
            .iter()
            .filter_map(move |o| self.lookup.get(&[a + o[0], b + o[1]]).copied())
    }

    /// Node indices within distance `r` of `x0` (closed ball).
    pub fn ball(&self, x0: &[f64], r: f64) -> impl Iterator<Item = usize> + '_ {
        let x0 = [x0[0], if self.dim > 1 { x0[1] } else { 0.0 }];
        (0..self.nodes.len()).filter(move |&i| self.distance_to(i, &x0) <= r)
    }

    /// Measure of the discrete domain, `h^d * #interior`.
    pub fn omega_measure(&self) -> f64 {
        self.cell_measure * self.interior.len() as f64
    }
}

pub fn build_grid(dim: usize, h: f64, omega_radius: f64, r_inf: f64) -> Result<Grid> {
    Grid::build(dim, h, omega_radius, r_inf)
}

/// Node values of a function on a grid; values are 0 beyond `R_inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Arc<Grid>,
    pub values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Field> {
        if values.len() != grid.len() {
            return Err(NlfbError::config(format!(
                "field has {} values but grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(NlfbError::data(format!("non-finite field value at node {i}")));
        }
        Ok(Field { grid, values })
    }

    pub(crate) fn from_parts_unchecked(grid: Arc<Grid>, values: Vec<f64>) -> Field {
        debug_assert_eq!(values.len(), grid.len());
        Field { grid, values }
    }

    pub fn zeros(grid: Arc<Grid>) -> Field {
        let n = grid.len();
        Field {
            grid,
            values: vec![0.0; n],
        }
    }

    pub fn constant(grid: Arc<Grid>, c: f64) -> Field {
        let n = grid.len();
        Field {
            grid,
            values: vec![c; n],
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn same_grid(&self, grid: &Arc<Grid>) -> bool {
        Arc::ptr_eq(&self.grid, grid) || *self.grid == **grid
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest value over the closed ball; when the ball reaches beyond
    /// `R_inf` the implicit zero also competes.
    pub fn sup_over_ball(&self, x0: &[f64], r: f64) -> Result<f64> {
        let beyond = distance(&x0[..self.grid.dim], &[0.0, 0.0][..self.grid.dim]) + r > self.grid.r_inf;
        let sup = self.grid.ball(x0, r).map(|i| self.values[i]).reduce(f64::max);
        match (sup, beyond) {
            (Some(v), true) => Ok(v.max(0.0)),
            (Some(v), false) => Ok(v),
            (None, true) => Ok(0.0),
            (None, false) => Err(NlfbError::domain(format!("ball of radius {r} contains no grid node"))),
        }
    }

    /// `(mean over ball of u^2)^(1/2)` with cell-measure weights.
    pub fn l2_mean_over_ball(&self, x0: &[f64], r: f64) -> Result<f64> {
        let m = self.grid.cell_measure;
        let (mut num, mut den) = (0.0, 0.0);
        for i in self.grid.ball(x0, r) {
            num += m * self.values[i] * self.values[i];
            den += m;
        }
        if den == 0.0 {
            return Err(NlfbError::domain(format!("ball of radius {r} contains no grid node")));
        }
        Ok((num / den).sqrt())
    }

    /// CSV with a `# d h omega R_inf` signature line and columns
    /// `index,x1[,x2],role,value`.
    pub fn to_csv(&self) -> String {
        let g = &self.grid;
        let mut out = g.signature().header_line();
        out.push('\n');
        out.push_str(if g.dim == 1 {
            "index,x1,role,value\n"
        } else {
            "index,x1,x2,role,value\n"
        });
        for (i, node) in g.nodes().iter().enumerate() {
            let role = match node.role {
                Role::Interior => "interior",
                Role::Exterior => "exterior",
            };
            let _ = write!(out, "{i},{}", node.position[0]);
            if g.dim == 2 {
                let _ = write!(out, ",{}", node.position[1]);
            }
            let _ = writeln!(out, ",{role},{}", self.values[i]);
        }
        out
    }

    /// Parses [`Field::to_csv`] output, validating it against `grid`.
    pub fn from_csv(grid: Arc<Grid>, text: &str) -> Result<Field> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| NlfbError::config("field file is empty"))?;
        let sig = GridSignature::parse_header(header)?;
        if sig != grid.signature() {
            return Err(NlfbError::config(format!(
                "field grid signature {:?} does not match grid {:?}",
                sig,
                grid.signature()
            )));
        }
        let cols = if grid.dim == 1 { 4 } else { 5 };
        let mut values = vec![f64::NAN; grid.len()];
        let mut seen = 0usize;
        for (n, line) in lines {
            let line_no = n + 1;
            if line.starts_with("index") {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() != cols {
                return Err(NlfbError::config(format!("line {line_no}: expected {cols} columns")));
            }
            let idx: usize = parts[0]
                .parse()
                .map_err(|_| NlfbError::config(format!("line {line_no}: bad index `{}`", parts[0])))?;
            if idx >= grid.len() {
                return Err(NlfbError::config(format!("line {line_no}: node index {idx} out of range")));
            }
            for k in 0..grid.dim {
                let x: f64 = parts[1 + k]
                    .parse()
                    .map_err(|_| NlfbError::config(format!("line {line_no}: bad coordinate")))?;
                if x != grid.nodes()[idx].position[k] {
                    return Err(NlfbError::config(format!(
                        "line {line_no}: coordinate of node {idx} does not match the grid"
                    )));
                }
            }
            let value: f64 = parts[cols - 1]
                .parse()
                .map_err(|_| NlfbError::data(format!("line {line_no}: bad value `{}`", parts[cols - 1])))?;
            if !values[idx].is_nan() {
                return Err(NlfbError::config(format!("line {line_no}: duplicate node {idx}")));
            }
            values[idx] = value;
            seen += 1;
        }
        if seen != grid.len() {
            return Err(NlfbError::config(format!(
                "field file lists {seen} nodes, grid has {}",
                grid.len()
            )));
        }
        Field::new(grid, values)
    }
}

/// Samples `f` at every node position.
pub fn sample_field(grid: &Arc<Grid>, f: impl Fn(&[f64]) -> f64) -> Result<Field> {
    let values: Vec<f64> = (0..grid.len()).map(|i| f(grid.position(i))).collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(NlfbError::data(format!(
            "sampled function is not finite at node {i} ({:?})",
            grid.position(i)
        )));
    }
    Ok(Field::from_parts_unchecked(grid.clone(), values))
}
