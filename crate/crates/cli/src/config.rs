//! Flat `section.key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; missing keys take the defaults listed in [`ExperimentConfig`]'s
//! `Default` impl. Unknown or repeated keys are errors naming the line.

use std::path::{Path, PathBuf};

use nlfb::{NlfbError, Phase, Point, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum KernelChoice {
    FractionalLaplacian,
    Modulated { frequency: f64 },
    Checkerboard { block_size: f64, multipliers: Vec<f64> },
    CustomTable { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelConfig {
    pub family: KernelChoice,
    pub s: f64,
    pub lambda: f64,
    pub lambda_up: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub d: usize,
    pub h: f64,
    pub omega_radius: f64,
    pub r_inf: f64,
}

/// Exterior data. Named profiles are scaled by `value`.
#[derive(Debug, Clone, PartialEq)]
pub enum DataChoice {
    Zero,
    Constant(f64),
    /// `value` where `x1 > 0`, zero elsewhere.
    HalfSpace(f64),
    /// Smooth bump in `x1` centred at `2 omega` with half-width `0.8 omega`.
    Bump(f64),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConfig {
    pub g: DataChoice,
    pub rho: f64,
    pub xi: f64,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub restarts: usize,
    pub seed: u64,
    pub max_sweeps: usize,
    pub polish: bool,
    pub support_search: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub rhos: Vec<f64>,
    pub region_radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub levels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub instances: usize,
    pub rho_min: f64,
    pub rho_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PointsChoice {
    AutoFb,
    Explicit(Vec<Point>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub points: PointsChoice,
    /// `None` means four grid spacings.
    pub r_min: Option<f64>,
    pub r_max: f64,
    /// `None` means as many doublings as fit below `r_max`.
    pub n_dyadic: Option<usize>,
    pub lifting_radius: Option<f64>,
    pub field: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub json: bool,
    pub csv: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kernel: KernelConfig,
    pub grid: GridConfig,
    pub problem: ProblemConfig,
    pub solver: SolverConfig,
    pub sweep: SweepConfig,
    pub refine: RefineConfig,
    pub oracle: OracleConfig,
    pub analysis: AnalysisConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kernel: KernelConfig {
                family: KernelChoice::FractionalLaplacian,
                s: 0.5,
                lambda: 1.0,
                lambda_up: 1.0,
            },
            grid: GridConfig {
                d: 1,
                h: 0.02,
                omega_radius: 1.0,
                r_inf: 4.0,
            },
            problem: ProblemConfig {
                g: DataChoice::Zero,
                rho: 1.0,
                xi: 0.0,
                phase: Phase::OnePhase,
            },
            solver: SolverConfig {
                restarts: 4,
                seed: 0,
                max_sweeps: 20_000,
                polish: true,
                support_search: true,
            },
            sweep: SweepConfig {
                rhos: Vec::new(),
                region_radius: 0.5,
            },
            refine: RefineConfig { levels: 2 },
            oracle: OracleConfig {
                instances: 50,
                rho_min: 1e-3,
                rho_max: 1.0,
            },
            analysis: AnalysisConfig {
                points: PointsChoice::AutoFb,
                r_min: None,
                r_max: 0.25,
                n_dyadic: None,
                lifting_radius: Some(0.5),
                field: None,
            },
            output: OutputConfig {
                dir: PathBuf::from("out"),
                json: true,
                csv: true,
            },
        }
    }
}

const KEYS: &[&str] = &[
    "kernel.family",
    "kernel.s",
    "kernel.lambda",
    "kernel.lambda_up",
    "kernel.frequency",
    "kernel.block_size",
    "kernel.multipliers",
    "kernel.table",
    "grid.d",
    "grid.h",
    "grid.omega_radius",
    "grid.r_inf",
    "problem.g",
    "problem.g_value",
    "problem.g_file",
    "problem.rho",
    "problem.xi",
    "problem.phase",
    "solver.restarts",
    "solver.seed",
    "solver.max_sweeps",
    "solver.polish",
    "solver.support_search",
    "sweep.rhos",
    "sweep.region_radius",
    "refine.levels",
    "oracle.instances",
    "oracle.rho_min",
    "oracle.rho_max",
    "analysis.points",
    "analysis.r_min",
    "analysis.r_max",
    "analysis.n_dyadic",
    "analysis.lifting_radius",
    "analysis.field",
    "output.dir",
    "output.formats",
];

fn err(line: usize, msg: impl std::fmt::Display) -> NlfbError {
    NlfbError::Config(format!("line {line}: {msg}"))
}

/// One `key = value` entry with its line number.
#[derive(Debug, Clone)]
struct Entry {
    line: usize,
    key: String,
    value: String,
}

impl Entry {
    fn f64(&self) -> Result<f64> {
        self.value
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| err(self.line, format!("`{}` expects a number, got `{}`", self.key, self.value)))
    }

    fn positive(&self) -> Result<f64> {
        let v = self.f64()?;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(err(self.line, format!("`{}` must be positive, got {v}", self.key)))
        }
    }

    fn usize(&self) -> Result<usize> {
        self.value
            .parse::<usize>()
            .map_err(|_| err(self.line, format!("`{}` expects a nonnegative integer, got `{}`", self.key, self.value)))
    }

    fn u64(&self) -> Result<u64> {
        self.value
            .parse::<u64>()
            .map_err(|_| err(self.line, format!("`{}` expects a nonnegative integer, got `{}`", self.key, self.value)))
    }

    fn bool(&self) -> Result<bool> {
        match self.value.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(err(self.line, format!("`{}` expects true or false, got `{v}`", self.key))),
        }
    }

    fn list(&self) -> Result<Vec<f64>> {
        self.value
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| {
                p.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(self.line, format!("`{}`: bad number `{p}`", self.key)))
            })
            .collect()
    }

    fn path(&self, base: &Path) -> PathBuf {
        let p = PathBuf::from(&self.value);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    }

    fn existing_path(&self, base: &Path) -> Result<PathBuf> {
        let p = self.path(base);
        if p.is_file() {
            Ok(p)
        } else {
            Err(err(self.line, format!("`{}`: file {} does not exist", self.key, p.display())))
        }
    }
}

fn split_entries(text: &str) -> Result<Vec<Entry>> {
    let mut entries: Vec<Entry> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| err(line, format!("expected `key = value`, got `{trimmed}`")))?;
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(err(line, format!("unknown key `{key}`")));
        }
        if let Some(prev) = entries.iter().find(|e| e.key == key) {
            return Err(err(line, format!("key `{key}` already set on line {}", prev.line)));
        }
        entries.push(Entry {
            line,
            key: key.to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(entries)
}

fn parse_points(e: &Entry, dim_hint: usize) -> Result<PointsChoice> {
    if e.value == "auto-fb" {
        return Ok(PointsChoice::AutoFb);
    }
    let mut points = Vec::new();
    for part in e.value.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let coords: Vec<f64> = part
            .split_whitespace()
            .map(|c| c.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<_>>()
            .ok_or_else(|| err(e.line, format!("bad point `{part}`")))?;
        if coords.len() != dim_hint {
            return Err(err(
                e.line,
                format!("point `{part}` has {} coordinates, grid has dimension {dim_hint}", coords.len()),
            ));
        }
        let mut p = [0.0; 2];
        p[..dim_hint].copy_from_slice(&coords);
        points.push(p);
    }
    if points.is_empty() {
        return Err(err(e.line, "`analysis.points` needs `auto-fb` or at least one point"));
    }
    Ok(PointsChoice::Explicit(points))
}

impl ExperimentConfig {
    /// Parses config text; relative paths are resolved against `base`.
    pub fn parse_str(text: &str, base: &Path) -> Result<ExperimentConfig> {
        let entries = split_entries(text)?;
        let get = |key: &str| entries.iter().find(|e| e.key == key);
        let mut c = ExperimentConfig::default();

        if let Some(e) = get("grid.d") {
            c.grid.d = e.usize()?;
            if c.grid.d != 1 && c.grid.d != 2 {
                return Err(err(e.line, format!("`grid.d` must be 1 or 2, got {}", c.grid.d)));
            }
        }
        if let Some(e) = get("grid.h") {
            c.grid.h = e.positive()?;
        }
        if let Some(e) = get("grid.omega_radius") {
            c.grid.omega_radius = e.positive()?;
        }
        if let Some(e) = get("grid.r_inf") {
            c.grid.r_inf = e.positive()?;
        }

        if let Some(e) = get("kernel.s") {
            c.kernel.s = e.f64()?;
        }
        if let Some(e) = get("kernel.lambda") {
            c.kernel.lambda = e.positive()?;
        }
        if let Some(e) = get("kernel.lambda_up") {
            c.kernel.lambda_up = e.positive()?;
        }
        let family = get("kernel.family").map(|e| (e.line, e.value.as_str()));
        let allow = |key: &str, wanted: &str| -> Result<()> {
            match get(key) {
                Some(e) if family.map(|(_, f)| f) != Some(wanted) => {
                    Err(err(e.line, format!("`{key}` only applies to kernel.family = {wanted}")))
                }
                _ => Ok(()),
            }
        };
        allow("kernel.frequency", "modulated")?;
        allow("kernel.block_size", "checkerboard")?;
        allow("kernel.multipliers", "checkerboard")?;
        allow("kernel.table", "custom_table")?;
        c.kernel.family = match family {
            None | Some((_, "fractional_laplacian")) => KernelChoice::FractionalLaplacian,
            Some((_, "modulated")) => KernelChoice::Modulated {
                frequency: get("kernel.frequency").map(Entry::f64).transpose()?.unwrap_or(2.0),
            },
            Some((_, "checkerboard")) => KernelChoice::Checkerboard {
                block_size: get("kernel.block_size").map(Entry::positive).transpose()?.unwrap_or(0.25),
                multipliers: get("kernel.multipliers")
                    .map(Entry::list)
                    .transpose()?
                    .unwrap_or_else(|| vec![1.0, 2.0]),
            },
            Some((line, "custom_table")) => KernelChoice::CustomTable {
                path: get("kernel.table")
                    .ok_or_else(|| err(line, "custom_table needs `kernel.table`"))?
                    .existing_path(base)?,
            },
            Some((line, other)) => {
                return Err(err(
                    line,
                    format!("unknown kernel family `{other}` (fractional_laplacian, modulated, checkerboard, custom_table)"),
                ))
            }
        };

        let value = get("problem.g_value").map(Entry::f64).transpose()?;
        let g_file = get("problem.g_file");
        c.problem.g = match get("problem.g") {
            None => DataChoice::Zero,
            Some(e) => match e.value.as_str() {
                "zero" => DataChoice::Zero,
                "constant" => DataChoice::Constant(value.unwrap_or(1.0)),
                "half_space" => DataChoice::HalfSpace(value.unwrap_or(1.0)),
                "bump" => DataChoice::Bump(value.unwrap_or(1.0)),
                "file" => DataChoice::File(
                    g_file
                        .ok_or_else(|| err(e.line, "`problem.g = file` needs `problem.g_file`"))?
                        .existing_path(base)?,
                ),
                other => {
                    return Err(err(
                        e.line,
                        format!("unknown profile `{other}` (zero, constant, half_space, bump, file)"),
                    ))
                }
            },
        };
        if let (Some(f), false) = (g_file, matches!(c.problem.g, DataChoice::File(_))) {
            return Err(err(f.line, "`problem.g_file` requires `problem.g = file`"));
        }
        if let Some(e) = get("problem.rho") {
            c.problem.rho = e.f64()?;
            if c.problem.rho < 0.0 {
                return Err(err(e.line, "`problem.rho` must be nonnegative"));
            }
        }
        if let Some(e) = get("problem.xi") {
            c.problem.xi = e.f64()?;
        }
        if let Some(e) = get("problem.phase") {
            c.problem.phase = match e.value.as_str() {
                "one" => Phase::OnePhase,
                "two" => Phase::TwoPhase,
                v => return Err(err(e.line, format!("`problem.phase` must be one or two, got `{v}`"))),
            };
        }

        if let Some(e) = get("solver.restarts") {
            c.solver.restarts = e.usize()?;
            if c.solver.restarts == 0 {
                return Err(err(e.line, "`solver.restarts` must be at least 1"));
            }
        }
        if let Some(e) = get("solver.seed") {
            c.solver.seed = e.u64()?;
        }
        if let Some(e) = get("solver.max_sweeps") {
            c.solver.max_sweeps = e.usize()?;
        }
        if let Some(e) = get("solver.polish") {
            c.solver.polish = e.bool()?;
        }
        if let Some(e) = get("solver.support_search") {
            c.solver.support_search = e.bool()?;
        }

        if let Some(e) = get("sweep.rhos") {
            c.sweep.rhos = e.list()?;
            if c.sweep.rhos.iter().any(|&r| r <= 0.0) {
                return Err(err(e.line, "`sweep.rhos` entries must be positive"));
            }
        }
        if let Some(e) = get("sweep.region_radius") {
            c.sweep.region_radius = e.positive()?;
        }
        if let Some(e) = get("refine.levels") {
            c.refine.levels = e.usize()?;
        }
        if let Some(e) = get("oracle.instances") {
            c.oracle.instances = e.usize()?;
        }
        if let Some(e) = get("oracle.rho_min") {
            c.oracle.rho_min = e.positive()?;
        }
        if let Some(e) = get("oracle.rho_max") {
            c.oracle.rho_max = e.positive()?;
            if c.oracle.rho_max < c.oracle.rho_min {
                return Err(err(e.line, "`oracle.rho_max` is below `oracle.rho_min`"));
            }
        }

        if let Some(e) = get("analysis.points") {
            c.analysis.points = parse_points(e, c.grid.d)?;
        }
        if let Some(e) = get("analysis.r_min") {
            c.analysis.r_min = Some(e.positive()?);
        }
        if let Some(e) = get("analysis.r_max") {
            c.analysis.r_max = e.positive()?;
        }
        if let Some(e) = get("analysis.n_dyadic") {
            let n = e.usize()?;
            if n < 2 {
                return Err(err(e.line, "`analysis.n_dyadic` must be at least 2"));
            }
            c.analysis.n_dyadic = Some(n);
        }
        if let Some(e) = get("analysis.lifting_radius") {
            let r = e.f64()?;
            c.analysis.lifting_radius = if r > 0.0 { Some(r) } else { None };
        }
        if let Some(e) = get("analysis.field") {
            c.analysis.field = Some(e.existing_path(base)?);
        }

        if let Some(e) = get("output.dir") {
            c.output.dir = e.path(base);
        }
        if let Some(e) = get("output.formats") {
            c.output.json = false;
            c.output.csv = false;
            for f in e.value.split(',').map(str::trim).filter(|f| !f.is_empty()) {
                match f {
                    "json" => c.output.json = true,
                    "csv" => c.output.csv = true,
                    other => return Err(err(e.line, format!("unknown output format `{other}` (json, csv)"))),
                }
            }
        }
        Ok(c)
    }
}

/// Reads and parses a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| NlfbError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    ExperimentConfig::parse_str(&text, base)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse_str(text, Path::new("."))
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(parse("").unwrap(), ExperimentConfig::default());
        assert_eq!(parse("# only a comment\n\n").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let e = parse("problem.rho = 1\nproblem.rho_ = 2\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("line 2") && msg.contains("problem.rho_"), "{msg}");
    }

    #[test]
    fn repeated_key_is_rejected() {
        let msg = parse("grid.h = 0.1\ngrid.h = 0.2\n").unwrap_err().to_string();
        assert!(msg.contains("line 2") && msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn sections_are_read() {
        let c = parse(
            "kernel.family = checkerboard\nkernel.block_size = 0.5\nkernel.multipliers = 1, 3\n\
             grid.d = 2\nproblem.phase = two\nproblem.g = half_space\nproblem.g_value = 2\n\
             sweep.rhos = 1e-3, 1e-2\nanalysis.points = 0.1 0.2; 0 0\noutput.formats = json\n",
        )
        .unwrap();
        assert_eq!(
            c.kernel.family,
            KernelChoice::Checkerboard {
                block_size: 0.5,
                multipliers: vec![1.0, 3.0]
            }
        );
        assert_eq!(c.grid.d, 2);
        assert_eq!(c.problem.phase, Phase::TwoPhase);
        assert_eq!(c.problem.g, DataChoice::HalfSpace(2.0));
        assert_eq!(c.sweep.rhos, vec![1e-3, 1e-2]);
        assert_eq!(c.analysis.points, PointsChoice::Explicit(vec![[0.1, 0.2], [0.0, 0.0]]));
        assert!(c.output.json && !c.output.csv);
    }

    #[test]
    fn family_specific_keys_need_their_family() {
        let msg = parse("kernel.frequency = 3\n").unwrap_err().to_string();
        assert!(msg.contains("line 1") && msg.contains("modulated"), "{msg}");
    }

    #[test]
    fn missing_file_is_rejected() {
        let msg = parse("problem.g = file\nproblem.g_file = /nonexistent/g.csv\n")
            .unwrap_err()
            .to_string();
        assert!(msg.contains("does not exist"), "{msg}");
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(parse("grid.h = -1\n").is_err());
        assert!(parse("grid.d = 3\n").is_err());
        assert!(parse("problem.phase = three\n").is_err());
        assert!(parse("solver.polish = yes\n").is_err());
        assert!(parse("just text\n").is_err());
        assert!(parse("analysis.points = 0.1 0.2\n").is_err());
    }
}
