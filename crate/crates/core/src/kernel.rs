//! Elliptic interaction kernels `K(x, y)`.
//!
//! Every family is a multiplicative modulation of the fractional kernel
//! `(1 - s) |x - y|^(-d - 2s)`. The ratio `K(x, y) |x - y|^(d + 2s) / (1 - s)`
//! must stay inside `[lambda, lambda_up]` for the kernel to belong to the
//! ellipticity class; [`check_ellipticity`] measures that ratio empirically.
//!
//! Kernels carry an affine frame so that the rescaled kernel
//! `r^(d + 2s) K(x0 + r x, x0 + r y)` is again a [`KernelSpec`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{NlfbError, Result};

/// Relative slack used when comparing empirical envelope ratios.
pub const ELLIPTICITY_TOL: f64 = 1e-12;

/// Half-width of the box `[-L, L]^d` sampled by [`check_ellipticity`].
pub const ELLIPTICITY_BOX: f64 = 4.0;

/// Symmetric block-pair multipliers loaded from a table file.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierTable {
    pub block_size: f64,
    entries: BTreeMap<(i64, i64), f64>,
}

impl MultiplierTable {
    pub fn new(block_size: f64) -> Self {
        MultiplierTable {
            block_size,
            entries: BTreeMap::new(),
        }
    }

    /// Inserts `m(i, j) = m(j, i) = value`; conflicting duplicates are rejected.
    pub fn insert(&mut self, i: i64, j: i64, value: f64) -> Result<()> {
        let key = (i.min(j), i.max(j));
        if let Some(&old) = self.entries.get(&key) {
            if old != value {
                return Err(NlfbError::config(format!(
                    "asymmetric multiplier table: ({i}, {j}) has {value} but its mirror has {old}"
                )));
            }
        }
        self.entries.insert(key, value);
        Ok(())
    }

    /// Multiplier for the block pair; unlisted pairs default to 1.
    pub fn get(&self, i: i64, j: i64) -> f64 {
        let key = (i.min(j), i.max(j));
        self.entries.get(&key).copied().unwrap_or(1.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.values().copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelFamily {
    FractionalLaplacian,
    /// `scale * (1 + amplitude * sin(frequency * (x1 + y1)))`.
    Modulated {
        amplitude: f64,
        frequency: f64,
        scale: f64,
    },
    /// `multipliers[(b(x) + b(y)) mod n]` where `b` sums the block coordinates
    /// `floor(x_k / block_size)`.
    Checkerboard {
        block_size: f64,
        multipliers: Vec<f64>,
    },
    /// Block index `floor(x1 / block_size)` along the first axis, multipliers
    /// looked up in the table.
    CustomTable(Arc<MultiplierTable>),
}

impl KernelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::FractionalLaplacian => "fractional_laplacian",
            KernelFamily::Modulated { .. } => "modulated",
            KernelFamily::Checkerboard { .. } => "checkerboard",
            KernelFamily::CustomTable(_) => "custom_table",
        }
    }
}

/// `x -> origin + scale * x`, with the kernel multiplied by `scale^(d + 2s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Frame {
    pub origin: [f64; 2],
    pub scale: f64,
}

impl Frame {
    pub const IDENTITY: Frame = Frame {
        origin: [0.0, 0.0],
        scale: 1.0,
    };

    fn is_identity(&self) -> bool {
        *self == Frame::IDENTITY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub s: f64,
    pub lambda: f64,
    pub lambda_up: f64,
    pub dim: usize,
    pub frame: Frame,
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}(d={}, s={}, lambda={}, Lambda={})",
            self.family.name(),
            self.dim,
            self.s,
            self.lambda,
            self.lambda_up
        )
    }
}

impl KernelSpec {
    pub fn new(family: KernelFamily, s: f64, lambda: f64, lambda_up: f64, dim: usize) -> Result<Self> {
        let spec = KernelSpec {
            family,
            s,
            lambda,
            lambda_up,
            dim,
            frame: Frame::IDENTITY,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Fractional kernel `(1 - s) |x - y|^(-d - 2s)` with `lambda = Lambda = 1`.
    pub fn fractional(dim: usize, s: f64) -> Result<Self> {
        KernelSpec::new(KernelFamily::FractionalLaplacian, s, 1.0, 1.0, dim)
    }

    /// Modulated kernel centred inside `[lambda, lambda_up]`.
    pub fn modulated(dim: usize, s: f64, lambda: f64, lambda_up: f64, frequency: f64) -> Result<Self> {
        let scale = 0.5 * (lambda + lambda_up);
        let amplitude = (lambda_up - lambda) / (lambda_up + lambda);
        KernelSpec::new(
            KernelFamily::Modulated {
                amplitude,
                frequency,
                scale,
            },
            s,
            lambda,
            lambda_up,
            dim,
        )
    }

    pub fn checkerboard(
        dim: usize,
        s: f64,
        lambda: f64,
        lambda_up: f64,
        block_size: f64,
        multipliers: Vec<f64>,
    ) -> Result<Self> {
        KernelSpec::new(
            KernelFamily::Checkerboard {
                block_size,
                multipliers,
            },
            s,
            lambda,
            lambda_up,
            dim,
        )
    }

    /// Structural validation. The envelope itself is only enforced for
    /// table kernels; other families are checked with [`check_ellipticity`].
    pub fn validate(&self) -> Result<()> {
        let s = self.s;
        if !(s > 0.0 && s < 1.0) {
            return Err(NlfbError::config(format!("order s must lie in (0, 1), got {s}")));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(NlfbError::config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.lambda_up >= self.lambda && self.lambda_up.is_finite()) {
            return Err(NlfbError::config(format!(
                "Lambda must be finite and >= lambda, got {} < {}",
                self.lambda_up, self.lambda
            )));
        }
        if self.dim != 1 && self.dim != 2 {
            return Err(NlfbError::config(format!("dimension must be 1 or 2, got {}", self.dim)));
        }
        if !(self.frame.scale > 0.0 && self.frame.scale.is_finite())
            || !self.frame.origin.iter().all(|v| v.is_finite())
        {
            return Err(NlfbError::config("kernel frame must have finite origin and positive scale"));
        }
        match &self.family {
            KernelFamily::FractionalLaplacian => {}
            KernelFamily::Modulated {
                amplitude,
                frequency,
                scale,
            } => {
                if !(amplitude.is_finite() && frequency.is_finite() && *scale > 0.0 && scale.is_finite()) {
                    return Err(NlfbError::config("modulated kernel parameters must be finite, scale > 0"));
                }
                if amplitude.abs() >= 1.0 {
                    return Err(NlfbError::config(format!(
                        "modulation amplitude must satisfy |a| < 1 to keep the kernel positive, got {amplitude}"
                    )));
                }
            }
            KernelFamily::Checkerboard {
                block_size,
                multipliers,
            } => {
                if !(*block_size > 0.0 && block_size.is_finite()) {
                    return Err(NlfbError::config(format!("block size must be positive, got {block_size}")));
                }
                if multipliers.is_empty() || multipliers.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
                    return Err(NlfbError::config("checkerboard multipliers must be a nonempty list of positive reals"));
                }
            }
            KernelFamily::CustomTable(table) => {
                if !(table.block_size > 0.0 && table.block_size.is_finite()) {
                    return Err(NlfbError::config(format!(
                        "block size must be positive, got {}",
                        table.block_size
                    )));
                }
                // unlisted pairs take multiplier 1, so 1 must be admissible too
                let tol_lo = self.lambda * (1.0 - ELLIPTICITY_TOL);
                let tol_hi = self.lambda_up * (1.0 + ELLIPTICITY_TOL);
                for m in table.values().chain(std::iter::once(1.0)) {
                    if !(m >= tol_lo && m <= tol_hi) {
                        return Err(NlfbError::config(format!(
                            "table multiplier {m} outside the ellipticity envelope [{}, {}]",
                            self.lambda, self.lambda_up
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// `d + 2s`, the homogeneity degree of the kernel singularity.
    pub fn exponent(&self) -> f64 {
        self.dim as f64 + 2.0 * self.s
    }

    /// Evaluates `K(x, y)`; only the first `dim` coordinates are read.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let dist = distance(&x[..self.dim], &y[..self.dim]);
        if dist == 0.0 {
            return Err(NlfbError::domain("kernel evaluated at coincident points"));
        }
        Ok(self.eval_unchecked(x, y))
    }

    /// As [`KernelSpec::eval`] without the coincidence check; the caller
    /// guarantees `x != y`.
    #[inline]
    pub fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        let d = self.dim;
        if self.frame.is_identity() {
            return self.base(&x[..d], &y[..d]);
        }
        let Frame { origin, scale } = self.frame;
        let mut xs = [0.0; 2];
        let mut ys = [0.0; 2];
        for k in 0..d {
            xs[k] = origin[k] + scale * x[k];
            ys[k] = origin[k] + scale * y[k];
        }
        scale.powf(self.exponent()) * self.base(&xs[..d], &ys[..d])
    }

    fn base(&self, x: &[f64], y: &[f64]) -> f64 {
        let dist = distance(x, y);
        let fractional = (1.0 - self.s) * dist.powf(-self.exponent());
        self.multiplier(x, y) * fractional
    }

    /// Envelope ratio `K |x - y|^(d + 2s) / (1 - s)` in the base frame.
    fn multiplier(&self, x: &[f64], y: &[f64]) -> f64 {
        match &self.family {
            KernelFamily::FractionalLaplacian => 1.0,
            KernelFamily::Modulated {
                amplitude,
                frequency,
                scale,
            } => scale * (1.0 + amplitude * (frequency * (x[0] + y[0])).sin()),
            KernelFamily::Checkerboard {
                block_size,
                multipliers,
            } => {
                let bx: i64 = x.iter().map(|v| (v / block_size).floor() as i64).sum();
                let by: i64 = y.iter().map(|v| (v / block_size).floor() as i64).sum();
                multipliers[(bx + by).rem_euclid(multipliers.len() as i64) as usize]
            }
            KernelFamily::CustomTable(table) => {
                let i = (x[0] / table.block_size).floor() as i64;
                let j = (y[0] / table.block_size).floor() as i64;
                table.get(i, j)
            }
        }
    }

    /// Parses the line-based table format
    /// (`d s lambda Lambda block_size`, then `i_block j_block multiplier`).
    pub fn from_table_str(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(n, l)| (n + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines
            .next()
            .ok_or_else(|| NlfbError::config("kernel table is empty"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(NlfbError::config(format!(
                "line {hline}: header must be `d s lambda Lambda block_size`"
            )));
        }
        let dim: usize = fields[0]
            .parse()
            .map_err(|_| NlfbError::config(format!("line {hline}: bad dimension `{}`", fields[0])))?;
        let num = |k: usize| -> Result<f64> {
            fields[k]
                .parse::<f64>()
                .map_err(|_| NlfbError::config(format!("line {hline}: bad number `{}`", fields[k])))
        };
        let (s, lambda, lambda_up, block_size) = (num(1)?, num(2)?, num(3)?, num(4)?);
        let mut table = MultiplierTable::new(block_size);
        for (n, line) in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(NlfbError::config(format!(
                    "line {n}: expected `i_block j_block multiplier`"
                )));
            }
            let i: i64 = parts[0]
                .parse()
                .map_err(|_| NlfbError::config(format!("line {n}: bad block index `{}`", parts[0])))?;
            let j: i64 = parts[1]
                .parse()
                .map_err(|_| NlfbError::config(format!("line {n}: bad block index `{}`", parts[1])))?;
            let m: f64 = parts[2]
                .parse()
                .map_err(|_| NlfbError::config(format!("line {n}: bad multiplier `{}`", parts[2])))?;
            table
                .insert(i, j, m)
                .map_err(|e| NlfbError::config(format!("line {n}: {e}")))?;
        }
        KernelSpec::new(KernelFamily::CustomTable(Arc::new(table)), s, lambda, lambda_up, dim)
    }

    pub fn from_table_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| NlfbError::config(format!("cannot read kernel table {}: {e}", path.display())))?;
        KernelSpec::from_table_str(&text)
    }
}

/// Euclidean distance over the common prefix of `x` and `y`.
#[inline]
pub fn distance(x: &[f64], y: &[f64]) -> f64 {
    if x.len() == 1 {
        return (x[0] - y[0]).abs();
    }
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

pub fn eval_kernel(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    spec.eval(x, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EllipticityReport {
    pub empirical_lambda: f64,
    pub empirical_lambda_up: f64,
    pub pass: bool,
}

/// Samples `n_samples` pairs uniformly in `[-L, L]^d` and reports the
/// extreme envelope ratios.
pub fn check_ellipticity(spec: &KernelSpec, n_samples: usize, seed: u64) -> Result<EllipticityReport> {
    spec.validate()?;
    if n_samples == 0 {
        return Err(NlfbError::config("n_samples must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.dim;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut taken = 0;
    while taken < n_samples {
        let mut x = [0.0; 2];
        let mut y = [0.0; 2];
        for k in 0..d {
            x[k] = rng.gen_range(-ELLIPTICITY_BOX..ELLIPTICITY_BOX);
            y[k] = rng.gen_range(-ELLIPTICITY_BOX..ELLIPTICITY_BOX);
        }
        let dist = distance(&x[..d], &y[..d]);
        if dist == 0.0 {
            continue;
        }
        let ratio = spec.eval_unchecked(&x, &y) * dist.powf(spec.exponent()) / (1.0 - spec.s);
        lo = lo.min(ratio);
        hi = hi.max(ratio);
        taken += 1;
    }
    let pass = lo >= spec.lambda * (1.0 - ELLIPTICITY_TOL) && hi <= spec.lambda_up * (1.0 + ELLIPTICITY_TOL);
    Ok(EllipticityReport {
        empirical_lambda: lo,
        empirical_lambda_up: hi,
        pass,
    })
}

/// Returns the kernel `r^(d + 2s) K(x0 + r x, x0 + r y)`. Ellipticity
/// constants carry over unchanged.
pub fn rescale_kernel(spec: &KernelSpec, x0: &[f64], r: f64) -> Result<KernelSpec> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(NlfbError::config(format!("rescale radius must be positive, got {r}")));
    }
    let mut out = spec.clone();
    let Frame { origin, scale } = spec.frame;
    for k in 0..spec.dim {
        out.frame.origin[k] = origin[k] + scale * x0[k];
    }
    out.frame.scale = scale * r;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fractional_value() {
        let k = KernelSpec::fractional(1, 0.5).unwrap();
        assert_eq!(k.eval(&[0.0], &[2.0]).unwrap(), 0.125);
    }

    #[test]
    fn coincident_points_rejected() {
        let k = KernelSpec::fractional(2, 0.3).unwrap();
        assert!(matches!(k.eval(&[0.1, 0.2], &[0.1, 0.2]), Err(NlfbError::Domain(_))));
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(KernelSpec::fractional(1, 1.0).is_err());
        assert!(KernelSpec::fractional(3, 0.5).is_err());
        assert!(KernelSpec::new(KernelFamily::FractionalLaplacian, 0.5, 2.0, 1.0, 1).is_err());
        assert!(KernelSpec::checkerboard(1, 0.5, 1.0, 2.0, 0.0, vec![1.0]).is_err());
        assert!(KernelSpec::new(
            KernelFamily::Modulated {
                amplitude: 1.2,
                frequency: 1.0,
                scale: 1.0
            },
            0.5,
            0.1,
            3.0,
            1
        )
        .is_err());
    }

    #[test]
    fn fractional_envelope_is_exactly_one() {
        let k = KernelSpec::fractional(2, 0.4).unwrap();
        let rep = check_ellipticity(&k, 1000, 3).unwrap();
        assert!(rep.pass);
        assert!((rep.empirical_lambda - 1.0).abs() < 1e-12);
        assert!((rep.empirical_lambda_up - 1.0).abs() < 1e-12);
    }

    #[test]
    fn modulation_beyond_envelope_detected() {
        // scale * (1 + a) = 2 * Lambda
        let k = KernelSpec::new(
            KernelFamily::Modulated {
                amplitude: 0.5,
                frequency: 3.0,
                scale: 4.0 / 3.0,
            },
            0.5,
            0.5,
            1.0,
            1,
        )
        .unwrap();
        let rep = check_ellipticity(&k, 10_000, 1).unwrap();
        assert!(!rep.pass);
        assert!(rep.empirical_lambda_up > 1.9);
    }

    #[test]
    fn checkerboard_ratio_takes_multiplier_values() {
        let k = KernelSpec::checkerboard(1, 0.5, 1.0, 1.5, 0.25, vec![1.0, 1.5]).unwrap();
        let rep = check_ellipticity(&k, 5000, 9).unwrap();
        assert!(rep.pass);
        assert!((rep.empirical_lambda - 1.0).abs() < 1e-12);
        assert!((rep.empirical_lambda_up - 1.5).abs() < 1e-12);
    }

    #[test]
    fn zero_samples_rejected() {
        let k = KernelSpec::fractional(1, 0.5).unwrap();
        assert!(check_ellipticity(&k, 0, 0).is_err());
    }

    #[test]
    fn rescaled_checkerboard_doubles_block_boundaries() {
        let k = KernelSpec::checkerboard(1, 0.5, 1.0, 1.5, 1.0, vec![1.0, 1.5]).unwrap();
        let half = rescale_kernel(&k, &[0.0], 0.5).unwrap();
        // in rescaled coordinates the first block boundary sits at 2.0
        let ratio = |spec: &KernelSpec, x: f64, y: f64| {
            spec.eval(&[x], &[y]).unwrap() * (x - y).abs().powf(spec.exponent()) / (1.0 - spec.s)
        };
        assert!((ratio(&half, 1.9, 0.1) - 1.0).abs() < 1e-12);
        assert!((ratio(&half, 2.1, 0.1) - 1.5).abs() < 1e-12);
        let rep = check_ellipticity(&half, 5000, 2).unwrap();
        assert!(rep.pass);
    }

    #[test]
    fn rescale_composes() {
        let k = KernelSpec::modulated(2, 0.6, 1.0, 2.0, 5.0).unwrap();
        let once = rescale_kernel(&rescale_kernel(&k, &[0.3, -0.2], 0.7).unwrap(), &[0.1, 0.4], 1.3).unwrap();
        let single = rescale_kernel(&k, &[0.3 + 0.7 * 0.1, -0.2 + 0.7 * 0.4], 0.7 * 1.3).unwrap();
        let (x, y) = ([0.2, 0.5], [-0.4, 0.1]);
        let a = once.eval(&x, &y).unwrap();
        let b = single.eval(&x, &y).unwrap();
        assert!((a - b).abs() <= 1e-13 * b);
    }

    #[test]
    fn table_parsing() {
        let text = "# user kernel\n1 0.5 0.5 2.0 0.25\n0 1 1.5\n1 0 1.5\n-2 3 0.75\n";
        let k = KernelSpec::from_table_str(text).unwrap();
        let KernelFamily::CustomTable(table) = &k.family else {
            panic!("expected table family")
        };
        assert_eq!(table.len(), 2);
        assert_eq!(table.get(1, 0), 1.5);
        assert_eq!(table.get(3, -2), 0.75);
        assert_eq!(table.get(5, 5), 1.0);
        assert!(check_ellipticity(&k, 2000, 4).unwrap().pass);
    }

    #[test]
    fn table_asymmetry_rejected() {
        let text = "1 0.5 0.5 2.0 0.25\n0 1 1.5\n1 0 1.25\n";
        let err = KernelSpec::from_table_str(text).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn table_envelope_enforced_at_load() {
        assert!(KernelSpec::from_table_str("1 0.5 0.5 2.0 0.25\n0 1 3.0\n").is_err());
        // default multiplier 1 must be admissible
        assert!(KernelSpec::from_table_str("1 0.5 1.5 2.0 0.25\n0 1 1.75\n").is_err());
    }
}
