//! Subcommand drivers and artifact persistence.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nlfb::analysis::log_log_fit;
use nlfb::solver::{minimize_with, rho_continuation, DescentOptions};
use nlfb::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{DataChoice, ExperimentConfig, KernelChoice, PointsChoice};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Solve,
    RhoSweep,
    Refine,
    OracleCompare,
    Analyze,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Solve => "solve",
            Subcommand::RhoSweep => "rho-sweep",
            Subcommand::Refine => "refine",
            Subcommand::OracleCompare => "oracle-compare",
            Subcommand::Analyze => "analyze",
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Core(NlfbError),
    Io { path: PathBuf, source: std::io::Error },
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io { path, source } => write!(f, "i/o error on {}: {source}", path.display()),
        }
    }
}

impl std::error::Error for CliError {}

impl From<NlfbError> for CliError {
    fn from(e: NlfbError) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(NlfbError::Config(_)) => 2,
            CliError::Core(NlfbError::Data(_)) => 3,
            CliError::Core(NlfbError::Solver { .. }) => 4,
            CliError::Core(NlfbError::Capacity(_)) => 5,
            CliError::Core(NlfbError::Domain(_)) => 6,
            CliError::Io { .. } => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Collects artifacts as `<name>.partial` files and renames them into place
/// only once the whole run has succeeded, with the manifest last.
pub struct ArtifactWriter {
    dir: PathBuf,
    staged: Vec<String>,
}

impl ArtifactWriter {
    pub fn new(dir: &Path) -> CliResult<ArtifactWriter> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(ArtifactWriter {
            dir: dir.to_path_buf(),
            staged: Vec::new(),
        })
    }

    fn partial(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.partial"))
    }

    pub fn stage(&mut self, name: &str, contents: &str) -> CliResult<()> {
        let path = self.partial(name);
        fs::write(&path, contents).map_err(io_err(&path))?;
        self.staged.push(name.to_string());
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.staged
    }

    pub fn commit(self, manifest: &str) -> CliResult<()> {
        for name in &self.staged {
            let from = self.partial(name);
            let to = self.dir.join(name);
            fs::rename(&from, &to).map_err(io_err(&to))?;
        }
        let from = self.partial("manifest.json");
        fs::write(&from, manifest).map_err(io_err(&from))?;
        let to = self.dir.join("manifest.json");
        fs::rename(&from, &to).map_err(io_err(&to))
    }
}

fn smooth_bump(t: f64) -> f64 {
    if t.abs() < 1.0 {
        (1.0 - 1.0 / (1.0 - t * t)).exp()
    } else {
        0.0
    }
}

fn build_kernel(config: &ExperimentConfig) -> Result<KernelSpec> {
    let k = &config.kernel;
    let d = config.grid.d;
    let spec = match &k.family {
        KernelChoice::FractionalLaplacian => {
            KernelSpec::new(KernelFamily::FractionalLaplacian, k.s, k.lambda, k.lambda_up, d)?
        }
        KernelChoice::Modulated { frequency } => KernelSpec::modulated(d, k.s, k.lambda, k.lambda_up, *frequency)?,
        KernelChoice::Checkerboard {
            block_size,
            multipliers,
        } => KernelSpec::checkerboard(d, k.s, k.lambda, k.lambda_up, *block_size, multipliers.clone())?,
        KernelChoice::CustomTable { path } => KernelSpec::from_table_file(path)?,
    };
    if spec.dim != d {
        return Err(NlfbError::Config(format!(
            "kernel dimension {} does not match grid.d = {d}",
            spec.dim
        )));
    }
    Ok(spec)
}

fn build_data(config: &ExperimentConfig, grid: &Arc<Grid>) -> Result<Field> {
    let omega = grid.omega_radius;
    match &config.problem.g {
        DataChoice::Zero => Ok(Field::zeros(grid.clone())),
        DataChoice::Constant(c) => Ok(Field::constant(grid.clone(), *c)),
        DataChoice::HalfSpace(c) => sample_field(grid, |x| if x[0] > 0.0 { *c } else { 0.0 }),
        DataChoice::Bump(c) => sample_field(grid, |x| c * smooth_bump((x[0] - 2.0 * omega) / (0.8 * omega))),
        DataChoice::File(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| NlfbError::Config(format!("cannot read {}: {e}", path.display())))?;
            Field::from_csv(grid.clone(), &text)
        }
    }
}

fn descent_options(config: &ExperimentConfig) -> DescentOptions {
    DescentOptions {
        max_sweeps: config.solver.max_sweeps,
        polish: config.solver.polish,
        support_search: config.solver.support_search,
    }
}

/// Everything a subcommand needs, validated before any solve starts.
struct Setup {
    grid: Arc<Grid>,
    kernel: KernelSpec,
    data: Field,
}

impl Setup {
    fn new(config: &ExperimentConfig, h: f64, coarse: bool) -> Result<Setup> {
        let g = &config.grid;
        let grid = if coarse {
            Grid::build_coarse(g.d, h, g.omega_radius, g.r_inf)?
        } else {
            Grid::build(g.d, h, g.omega_radius, g.r_inf)?
        };
        let grid = Arc::new(grid);
        let kernel = build_kernel(config)?;
        let data = build_data(config, &grid)?;
        Ok(Setup { grid, kernel, data })
    }

    fn problem(&self, config: &ExperimentConfig) -> Result<Problem> {
        let p = &config.problem;
        Problem::assemble(&self.kernel, &self.grid, &self.data, p.rho, p.xi, p.phase)
    }
}

fn analysis_options(config: &ExperimentConfig, grid: &Grid) -> AnalysisOptions {
    let a = &config.analysis;
    let mut options = AnalysisOptions::for_grid(grid, a.r_max);
    if let Some(r_min) = a.r_min {
        options.r_min = r_min;
        let n = if a.r_max >= r_min { (a.r_max / r_min).log2().floor() as usize + 1 } else { 1 };
        options.n_dyadic = n.max(3);
    }
    if let Some(n) = a.n_dyadic {
        options.n_dyadic = n;
    }
    options.points = match &a.points {
        PointsChoice::AutoFb => PointSelection::Auto,
        PointsChoice::Explicit(p) => PointSelection::Explicit(p.clone()),
    };
    options.lifting_region = a.lifting_radius.map(Ball::centered);
    options
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn solve(config: &ExperimentConfig, out: &mut ArtifactWriter) -> CliResult<Value> {
    let setup = Setup::new(config, config.grid.h, false)?;
    let problem = setup.problem(config)?;
    let result = minimize_with(&problem, config.solver.restarts, config.solver.seed, &descent_options(config))?;
    if config.output.json {
        out.stage("result.json", &result.to_json())?;
    }
    if config.output.csv {
        out.stage("field.csv", &result.field.to_csv())?;
    }
    Ok(json!({
        "energy": result.energy.total,
        "dirichlet": result.energy.dirichlet,
        "volume": result.energy.volume,
        "support_count": result.energy.support_count,
        "converged": result.converged,
        "sweeps": result.sweeps,
        "best_restart_seed": result.best_restart_seed,
    }))
}

fn rho_sweep(config: &ExperimentConfig, out: &mut ArtifactWriter) -> CliResult<Value> {
    if config.sweep.rhos.is_empty() {
        return Err(NlfbError::Config("rho-sweep needs a list in `sweep.rhos`".into()).into());
    }
    let setup = Setup::new(config, config.grid.h, false)?;
    let problem = setup.problem(config)?;
    let region = Ball::centered(config.sweep.region_radius);
    let runs = rho_continuation(&problem, &config.sweep.rhos, config.solver.restarts, config.solver.seed)?;
    let mut csv = String::from("rho,lifting_distance\n");
    let mut rows = Vec::new();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (rho, result) in runs.iter().rev() {
        let dist = lifting_distance(problem.form(), &result.field, &region)?;
        csv.push_str(&format!("{rho},{dist}\n"));
        rows.push(json!({"rho": rho, "lifting_distance": dist, "energy": result.energy.total}));
        if dist > 0.0 && dist.is_finite() {
            xs.push(*rho);
            ys.push(dist);
        }
    }
    if config.output.csv {
        out.stage("rho_sweep.csv", &csv)?;
    }
    if config.output.json {
        out.stage("rho_sweep.json", &serde_json::to_string_pretty(&rows).expect("rows serialize"))?;
    }
    let slope = if xs.len() >= 2 { log_log_fit(&xs, &ys).0 } else { f64::NAN };
    Ok(json!({
        "slope": finite_or_null(slope),
        "points_fitted": xs.len(),
        "region_radius": config.sweep.region_radius,
    }))
}

fn refine(config: &ExperimentConfig, out: &mut ArtifactWriter) -> CliResult<Value> {
    if matches!(config.problem.g, DataChoice::File(_)) && config.refine.levels > 0 {
        return Err(NlfbError::Config("refine cannot resample file data; use a named profile".into()).into());
    }
    let setups: Vec<Setup> = (0..=config.refine.levels)
        .map(|k| Setup::new(config, config.grid.h / (1u64 << k) as f64, false))
        .collect::<Result<_>>()?;
    let mut csv = String::from("level,h,n_interior,total,dirichlet,volume,support_count,converged\n");
    let mut levels = Vec::new();
    for (k, setup) in setups.iter().enumerate() {
        let problem = setup.problem(config)?;
        let r = minimize_with(&problem, config.solver.restarts, config.solver.seed, &descent_options(config))?;
        let e = &r.energy;
        csv.push_str(&format!(
            "{k},{},{},{},{},{},{},{}\n",
            setup.grid.h,
            setup.grid.interior().len(),
            e.total,
            e.dirichlet,
            e.volume,
            e.support_count,
            r.converged
        ));
        if config.output.json {
            out.stage(&format!("result_level{k}.json"), &r.to_json())?;
        }
        levels.push(json!({"level": k, "h": setup.grid.h, "energy": e.total}));
    }
    if config.output.csv {
        out.stage("refine.csv", &csv)?;
    }
    Ok(json!({ "levels": levels }))
}

/// Relative agreement threshold between solver and oracle energies.
const AGREEMENT_TOL: f64 = 1e-9;

fn oracle_compare(config: &ExperimentConfig, out: &mut ArtifactWriter) -> CliResult<Value> {
    let setup = Setup::new(config, config.grid.h, true)?;
    let base = setup.problem(config)?;
    let options = descent_options(config);
    let (lo, hi) = (config.oracle.rho_min.ln(), config.oracle.rho_max.ln());
    let mut csv = String::from("instance,seed,rho,solver_energy,oracle_energy,agree\n");
    let mut agree = 0usize;
    for i in 0..config.oracle.instances {
        let seed = config.solver.seed.wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rho = if hi > lo { rng.gen_range(lo..hi).exp() } else { lo.exp() };
        let problem = base.with_rho(rho)?;
        let exact = oracle_minimize(&problem)?;
        let found = minimize_with(&problem, config.solver.restarts, seed, &options)?;
        let (a, b) = (found.energy.total, exact.energy.total);
        let ok = (a - b).abs() <= AGREEMENT_TOL * (1.0 + b.abs());
        agree += ok as usize;
        csv.push_str(&format!("{i},{seed},{rho},{a},{b},{ok}\n"));
    }
    if config.output.csv {
        out.stage("oracle_compare.csv", &csv)?;
    }
    let n = config.oracle.instances;
    let percent = if n == 0 { 100.0 } else { 100.0 * agree as f64 / n as f64 };
    Ok(json!({
        "instances": n,
        "agreements": agree,
        "agreement_percent": percent,
        "interior_nodes": setup.grid.interior().len(),
    }))
}

fn analyze_cmd(config: &ExperimentConfig, out: &mut ArtifactWriter) -> CliResult<Value> {
    let setup = Setup::new(config, config.grid.h, false)?;
    let field = match &config.analysis.field {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            Some(Field::from_csv(setup.grid.clone(), &text)?)
        }
        None => None,
    };
    let problem = setup.problem(config)?;
    let field = match field {
        Some(f) => f,
        None => {
            let r = minimize_with(&problem, config.solver.restarts, config.solver.seed, &descent_options(config))?;
            if config.output.csv {
                out.stage("field.csv", &r.field.to_csv())?;
            }
            r.field
        }
    };
    let report = analyze(&problem, &field, &analysis_options(config, &setup.grid))?;
    if config.output.json {
        out.stage("report.json", &report.to_json())?;
    }
    if config.output.csv {
        for (k, p) in report.points.iter().enumerate() {
            out.stage(&format!("density_{k}.csv"), &p.csv())?;
        }
    }
    let slopes: Vec<Value> = report
        .points
        .iter()
        .map(|p| p.growth.as_ref().map_or(Value::Null, |g| finite_or_null(g.slope)))
        .collect();
    Ok(json!({
        "fb_nodes": report.fb_nodes.len(),
        "points": report.points.len(),
        "growth_slopes": slopes,
        "nondeg_constant": report.nondeg_constant,
        "subsolution_max": report.subsolution_max,
        "subsolution_tolerance": report.subsolution_tolerance,
    }))
}

pub fn config_hash(text: &[u8]) -> String {
    hex::encode(Sha256::digest(text))
}

/// Runs one subcommand and writes its artifacts plus `manifest.json` under
/// `out_dir`. Returns the manifest.
pub fn run(command: Subcommand, config: &ExperimentConfig, config_text: &[u8], out_dir: &Path) -> CliResult<Value> {
    let start = Instant::now();
    let mut out = ArtifactWriter::new(out_dir)?;
    let results = match command {
        Subcommand::Solve => solve(config, &mut out)?,
        Subcommand::RhoSweep => rho_sweep(config, &mut out)?,
        Subcommand::Refine => refine(config, &mut out)?,
        Subcommand::OracleCompare => oracle_compare(config, &mut out)?,
        Subcommand::Analyze => analyze_cmd(config, &mut out)?,
    };
    let manifest = json!({
        "command": command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "config_sha256": config_hash(config_text),
        "seeds": {
            "base": config.solver.seed,
            "restarts": config.solver.restarts,
        },
        "results": results,
        "artifacts": out.names(),
        "timing": {
            "wall_seconds": start.elapsed().as_secs_f64(),
        },
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    out.commit(&text)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            CliError::Core(NlfbError::Config(String::new())).exit_code(),
            CliError::Core(NlfbError::Data(String::new())).exit_code(),
            CliError::Core(NlfbError::Solver {
                message: String::new(),
                residual: 0.0,
            })
            .exit_code(),
            CliError::Core(NlfbError::Capacity(String::new())).exit_code(),
            CliError::Core(NlfbError::Domain(String::new())).exit_code(),
        ];
        for (i, a) in codes.iter().enumerate() {
            assert_ne!(*a, 0);
            for b in &codes[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn hash_is_sha256() {
        assert_eq!(
            config_hash(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn bump_profile_vanishes_outside_support() {
        assert_eq!(smooth_bump(1.0), 0.0);
        assert_eq!(smooth_bump(0.0), 1.0);
    }
}
