//! Batch front end: `solve`, `oracle-check`, `nash` and `validate`.
//!
//! A run is described by a TOML [`RunConfig`], optionally overridden by
//! `--set key=value` (dotted keys reach into sections). The fully resolved
//! configuration, defaults included, is written verbatim into every
//! manifest. Outputs are deterministic for a given configuration.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::catalog;
use crate::error::MfgError;
use crate::fbsde::{
    relative_snorm_distance, solve_continuation, solve_coupled_picard, write_field_csv, write_manifest, SolutionField,
    SolverConfig,
};
use crate::lq_oracle::{oracle_field, solve_riccati};
use crate::model::{coupling_budget, validate_assumptions, ModelSpec};
use crate::nash::{scaling_report, Deviation, GapEstimator, NashConfig, NashReport};
use crate::stochastics::{sample_bundle, PathBundle, TimeGrid};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "mfg", version, about = "Major-minor mean field game solver and Nash harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the limit system and write the solution field.
    Solve(CommonArgs),
    /// Compare solver output with the linear-quadratic oracle.
    OracleCheck(CommonArgs),
    /// Finite-game chaos and epsilon-Nash scaling over N.
    Nash(CommonArgs),
    /// Check the model's structural assumptions on samples.
    Validate(CommonArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set fbsde.n_steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed of every random stream (solver and Nash harness).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverChoice {
    #[default]
    Picard,
    Continuation,
    Both,
}

impl SolverChoice {
    fn names(self) -> &'static [&'static str] {
        match self {
            SolverChoice::Picard => &["picard"],
            SolverChoice::Continuation => &["continuation"],
            SolverChoice::Both => &["picard", "continuation"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateConfig {
    pub sample_budget: usize,
    pub tol: f64,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self { sample_budget: 500, tol: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Largest accepted relative S-norm error.
    pub tolerance: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { tolerance: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NashSection {
    pub ns: Vec<usize>,
    pub n_replications: usize,
    pub limit_particles: usize,
    pub seed: u64,
    pub game: u64,
    pub minor_agent: usize,
    pub estimator: GapEstimator,
    /// Omitted means the default family.
    pub family: Option<Vec<Deviation>>,
}

impl Default for NashSection {
    fn default() -> Self {
        let d = NashConfig::default();
        Self {
            ns: vec![8, 16, 32, 64, 128, 256, 512],
            n_replications: d.n_replications,
            limit_particles: d.limit_particles,
            seed: d.seed,
            game: d.game,
            minor_agent: d.minor_agent,
            estimator: d.estimator,
            family: None,
        }
    }
}

impl NashSection {
    fn to_config(&self) -> NashConfig {
        NashConfig {
            n_replications: self.n_replications,
            limit_particles: self.limit_particles,
            seed: self.seed,
            game: self.game,
            minor_agent: self.minor_agent,
            family: self.family.clone(),
            estimator: self.estimator,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Minor particles written per scenario in field CSVs.
    pub max_particles: usize,
    /// Also dump the solver noise bundle in binary form.
    pub write_bundle: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { max_particles: 8, write_bundle: false }
    }
}

/// Everything a run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Catalog name (e.g. `lq-a`) or path of a model file.
    pub model: String,
    #[serde(default = "default_out")]
    pub out: String,
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub solver: SolverChoice,
    #[serde(default)]
    pub fbsde: SolverConfig,
    #[serde(default)]
    pub validate: ValidateConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub nash: NashSection,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_out() -> String {
    "out".into()
}

/// A failed command: exit code and message.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

/// Exit code for a library error.
pub fn exit_code(e: &MfgError) -> i32 {
    match e {
        MfgError::Io(_) => EXIT_IO,
        MfgError::PicardDivergence { .. }
        | MfgError::PicardNonConvergence { .. }
        | MfgError::ContinuationStalled { .. }
        | MfgError::RiccatiEscape { .. }
        | MfgError::ModelEvaluation { .. }
        | MfgError::MinimizerNotFound { .. }
        | MfgError::DegenerateBasis { .. } => EXIT_DIVERGENCE,
        _ => EXIT_CONFIG,
    }
}

impl From<MfgError> for CliError {
    fn from(e: MfgError) -> Self {
        CliError::new(exit_code(&e), e.to_string())
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new(EXIT_IO, format!("{}: {e}", path.display()))
}

type CliResult<T> = std::result::Result<T, CliError>;

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> CliResult<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::new(EXIT_CONFIG, format!("empty key in `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::new(EXIT_CONFIG, format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parses `v` as a TOML value, falling back to a plain string.
fn parse_value(v: &str) -> toml::Value {
    format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()))
}

/// Reads the config file, applies overrides and flags, and returns the
/// configuration with the directory that relative model paths resolve
/// against.
pub fn resolve_config(args: &CommonArgs) -> CliResult<(RunConfig, PathBuf)> {
    let (mut table, base) = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::new(EXIT_CONFIG, format!("cannot read config {}: {e}", path.display())))?;
            let table: toml::Table =
                text.parse().map_err(|e| CliError::new(EXIT_CONFIG, format!("config {}: {e}", path.display())))?;
            (table, path.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (toml::Table::new(), PathBuf::new()),
    };
    for s in &args.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::new(EXIT_CONFIG, format!("`--set {s}` is not of the form key=value")))?;
        set_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    if let Some(seed) = args.seed {
        let seed = toml::Value::Integer(i64::try_from(seed).map_err(|_| CliError::new(EXIT_CONFIG, "seed too large"))?);
        set_path(&mut table, "fbsde.seed", seed.clone())?;
        set_path(&mut table, "nash.seed", seed)?;
    }
    if let Some(out) = &args.out {
        set_path(&mut table, "out", toml::Value::String(out.display().to_string()))?;
    }
    if let Some(t) = args.threads {
        set_path(&mut table, "threads", toml::Value::Integer(t as i64))?;
    }
    let cfg: RunConfig = table.try_into().map_err(|e| CliError::new(EXIT_CONFIG, format!("config: {e}")))?;
    cfg.fbsde.validate()?;
    if cfg.validate.sample_budget == 0 || !(cfg.validate.tol > 0.0) {
        return Err(CliError::new(EXIT_CONFIG, "validate.sample_budget and validate.tol must be positive"));
    }
    if !(cfg.oracle.tolerance > 0.0) {
        return Err(CliError::new(EXIT_CONFIG, "oracle.tolerance must be positive"));
    }
    Ok((cfg, base))
}

fn resolved_text(cfg: &RunConfig) -> CliResult<String> {
    toml::to_string(cfg).map_err(|e| CliError::new(EXIT_CONFIG, format!("cannot serialize config: {e}")))
}

/// Catalog instance, or a model file. Malformed files are configuration
/// errors; well-formed files whose parameters break the model's
/// assumptions (e.g. a negative control weight) are validation failures.
fn load_spec(cfg: &RunConfig, base: &Path) -> CliResult<ModelSpec> {
    if let Some(spec) = catalog::by_name(&cfg.model) {
        return Ok(spec);
    }
    let path = Path::new(&cfg.model);
    let path = if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
    if !path.exists() {
        return Err(CliError::new(EXIT_CONFIG, format!("model `{}` is neither a catalog name nor a file", cfg.model)));
    }
    let file = catalog::ModelFile::load(&path)?;
    file.build().map_err(|e| match e {
        MfgError::InvalidArgument(m) => CliError::new(EXIT_VALIDATION, format!("model {}: {m}", path.display())),
        e => e.into(),
    })
}

fn out_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = PathBuf::from(&cfg.out);
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn run_validation(spec: &ModelSpec, cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    let report = validate_assumptions(spec, cfg.validate.sample_budget, cfg.validate.tol)?;
    let text = format!("model {}\ncoupling budget {}\n{report}", spec.name, coupling_budget(spec));
    let path = dir.join("validation.txt");
    fs::write(&path, &text).map_err(|e| io_err(&path, e))?;
    if !report.passed() {
        let names: Vec<&str> = report.failures().map(|c| c.name).collect();
        return Err(CliError::new(EXIT_VALIDATION, format!("assumption checks failed: {}", names.join(", "))));
    }
    Ok(())
}

fn solver_bundle(spec: &ModelSpec, cfg: &SolverConfig) -> CliResult<PathBundle> {
    let grid = TimeGrid::new(spec.horizon, cfg.n_steps)?;
    Ok(sample_bundle(grid, cfg.n_scenarios, cfg.n_particles, spec.init_major, spec.init_minor, cfg.seed)?)
}

fn solve_with(name: &str, spec: &ModelSpec, bundle: &PathBundle, cfg: &SolverConfig) -> CliResult<SolutionField> {
    let field = match name {
        "picard" => solve_coupled_picard(spec, bundle, cfg),
        _ => solve_continuation(spec, bundle, cfg),
    };
    field.map_err(|e| CliError::new(exit_code(&e), format!("{name}: {e}")))
}

fn write_solution(dir: &Path, resolved: &str, field: &SolutionField, cfg: &RunConfig) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_field_csv(dir, "", field, Some(cfg.output.max_particles))?;
    write_manifest(&dir.join("manifest.txt"), resolved, Some(field))?;
    let path = dir.join("residuals.csv");
    let mut text = crate::fbsde::schema_line("residuals");
    text.push_str("iteration,residual,consistency\n");
    let d = &field.diagnostics;
    for (i, r) in d.residuals.iter().enumerate() {
        let c = d.consistency.get(i).map(|c| c.to_string()).unwrap_or_default();
        let _ = writeln!(text, "{},{r},{c}", i + 1);
    }
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn cmd_validate(cfg: &RunConfig, base: &Path) -> CliResult<String> {
    let dir = out_dir(cfg)?;
    write_manifest(&dir.join("manifest.txt"), &resolved_text(cfg)?, None)?;
    let spec = load_spec(cfg, base)?;
    run_validation(&spec, cfg, &dir)?;
    Ok(format!("{}: all assumption checks passed", spec.name))
}

fn cmd_solve(cfg: &RunConfig, base: &Path) -> CliResult<String> {
    let dir = out_dir(cfg)?;
    let resolved = resolved_text(cfg)?;
    write_manifest(&dir.join("manifest.txt"), &resolved, None)?;
    let spec = load_spec(cfg, base)?;
    run_validation(&spec, cfg, &dir)?;
    let bundle = solver_bundle(&spec, &cfg.fbsde)?;
    if cfg.output.write_bundle {
        let path = dir.join("bundle.bin");
        let f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        bundle.write_to(BufWriter::new(f))?;
    }
    let mut summary = String::new();
    let mut fields = Vec::new();
    for name in cfg.solver.names() {
        let field = solve_with(name, &spec, &bundle, &cfg.fbsde)?;
        write_solution(&dir.join(name), &resolved, &field, cfg)?;
        let d = &field.diagnostics;
        let _ = writeln!(
            summary,
            "{name}: converged, {} iterations, last residual {:e}",
            d.residuals.len(),
            d.residuals.last().copied().unwrap_or(0.0)
        );
        fields.push(field);
    }
    if let [a, b] = &fields[..] {
        let rel = relative_snorm_distance(a, b, a)?;
        let path = dir.join("comparison.csv");
        let text = format!("{}quantity,value\npicard_vs_continuation_relative_snorm,{rel}\n", crate::fbsde::schema_line("comparison"));
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        let _ = writeln!(summary, "picard vs continuation relative S-norm distance {rel:e}");
    }
    Ok(summary.trim_end().to_string())
}

/// `(max |a - b| / max |b|, mean |a - b| / mean |b|)`, absolute errors when
/// the reference vanishes.
fn relative_errors(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (mut max_e, mut max_b, mut sum_e, mut sum_b) = (0.0f64, 0.0f64, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let e = (x - y).abs();
        max_e = max_e.max(e);
        max_b = max_b.max(y.abs());
        sum_e += e;
        sum_b += y.abs();
    }
    let n = a.len().max(1) as f64;
    let max_rel = if max_b > 0.0 { max_e / max_b } else { max_e };
    let mean_rel = if sum_b > 0.0 { sum_e / sum_b } else { sum_e / n };
    (max_rel, mean_rel)
}

fn cmd_oracle_check(cfg: &RunConfig, base: &Path) -> CliResult<String> {
    let dir = out_dir(cfg)?;
    let resolved = resolved_text(cfg)?;
    write_manifest(&dir.join("manifest.txt"), &resolved, None)?;
    let spec = load_spec(cfg, base)?;
    let lq = spec.lq.ok_or_else(|| {
        CliError::new(EXIT_CONFIG, format!("oracle unavailable: model {} is not linear-quadratic", spec.name))
    })?;
    run_validation(&spec, cfg, &dir)?;
    let bundle = solver_bundle(&spec, &cfg.fbsde)?;
    let rs = solve_riccati(&lq, &bundle.grid)?;
    let oracle = oracle_field(&rs, &spec, &bundle)?;
    let mut csv = crate::fbsde::schema_line("oracle-check");
    csv.push_str("solver,quantity,max_rel_err,mean_rel_err\n");
    let mut summary = String::new();
    let mut pass = true;
    for name in cfg.solver.names() {
        let field = solve_with(name, &spec, &bundle, &cfg.fbsde)?;
        let quantities: [(&str, &Vec<f64>, &Vec<f64>); 9] = [
            ("x0", &field.major.x0, &oracle.major.x0),
            ("p0", &field.major.p0, &oracle.major.p0),
            ("q0", &field.major.q0, &oracle.major.q0),
            ("u0", &field.major.u0, &oracle.major.u0),
            ("x", &field.minor.x, &oracle.minor.x),
            ("p", &field.minor.p, &oracle.minor.p),
            ("q", &field.minor.q, &oracle.minor.q),
            ("q_tilde", &field.minor.q_tilde, &oracle.minor.q_tilde),
            ("u", &field.minor.u, &oracle.minor.u),
        ];
        for (q, a, b) in quantities {
            let (mx, mn) = relative_errors(a, b);
            let _ = writeln!(csv, "{name},{q},{mx},{mn}");
        }
        let rel = relative_snorm_distance(&field, &oracle, &oracle)?;
        let _ = writeln!(csv, "{name},snorm,{rel},{rel}");
        let ok = rel <= cfg.oracle.tolerance;
        pass &= ok;
        let _ = writeln!(
            summary,
            "{name}: relative S-norm error {rel:e} ({} tolerance {})",
            if ok { "within" } else { "above" },
            cfg.oracle.tolerance
        );
    }
    let path = dir.join("oracle_check.csv");
    fs::write(&path, csv).map_err(|e| io_err(&path, e))?;
    if !pass {
        return Err(CliError::new(EXIT_VALIDATION, summary.trim_end().to_string()));
    }
    Ok(summary.trim_end().to_string())
}

fn nash_manifest(resolved: &str, report: &NashReport) -> String {
    let mut out = crate::fbsde::schema_line("manifest");
    out.push_str("[config]\n");
    out.push_str(resolved);
    let _ = writeln!(out, "\n[nash_results]");
    let _ = writeln!(out, "ns = {:?}", report.ns);
    let _ = writeln!(out, "completed = {}", report.chaos.len());
    for (name, fit) in [("chaos", report.chaos_fit), ("major", report.major_fit), ("minor", report.minor_fit)] {
        match fit {
            Some(f) => {
                let _ = writeln!(
                    out,
                    "{name}_slope = {{ slope = {}, ci = [{}, {}], intercept = {} }}",
                    f.slope, f.slope_ci.0, f.slope_ci.1, f.intercept
                );
            }
            None => {
                let _ = writeln!(out, "{name}_slope = \"degenerate\"");
            }
        }
    }
    if let Some(f) = &report.failure {
        let _ = writeln!(out, "failure = {f:?}");
    }
    out
}

fn cmd_nash(cfg: &RunConfig, base: &Path) -> CliResult<String> {
    let mut ns = cfg.nash.ns.clone();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 3 || ns[0] == 0 {
        return Err(CliError::new(EXIT_CONFIG, "nash.ns needs at least 3 distinct positive agent counts"));
    }
    let dir = out_dir(cfg)?;
    let resolved = resolved_text(cfg)?;
    write_manifest(&dir.join("manifest.txt"), &resolved, None)?;
    let spec = load_spec(cfg, base)?;
    run_validation(&spec, cfg, &dir)?;
    let bundle = solver_bundle(&spec, &cfg.fbsde)?;
    let name = if cfg.solver == SolverChoice::Continuation { "continuation" } else { "picard" };
    let field = solve_with(name, &spec, &bundle, &cfg.fbsde)?;
    let report = scaling_report(&spec, &field, &ns, &cfg.nash.to_config())?;
    report.write_csv(&dir.join("nash.csv"))?;
    report.write_plot_data(&dir.join("nash_plot.csv"))?;
    report.write_members_csv(&dir.join("nash_members.csv"))?;
    let path = dir.join("manifest.txt");
    fs::write(&path, nash_manifest(&resolved, &report)).map_err(|e| io_err(&path, e))?;
    let mut summary = String::new();
    for (label, fit) in [("chaos gap", report.chaos_fit), ("major gap", report.major_fit), ("minor gap", report.minor_fit)] {
        match fit {
            Some(f) => {
                let _ = writeln!(summary, "{label}: slope {:.3} [{:.3}, {:.3}]", f.slope, f.slope_ci.0, f.slope_ci.1);
            }
            None => {
                let _ = writeln!(summary, "{label}: degenerate, no fit");
            }
        }
    }
    if let Some(f) = report.failure {
        return Err(CliError::new(EXIT_DIVERGENCE, format!("{}incomplete sweep: {f}", summary)));
    }
    Ok(summary.trim_end().to_string())
}

/// Runs one command and returns its summary line(s).
pub fn execute(command: &Command) -> CliResult<String> {
    let (args, f): (&CommonArgs, fn(&RunConfig, &Path) -> CliResult<String>) = match command {
        Command::Solve(a) => (a, cmd_solve),
        Command::OracleCheck(a) => (a, cmd_oracle_check),
        Command::Nash(a) => (a, cmd_nash),
        Command::Validate(a) => (a, cmd_validate),
    };
    let (cfg, base) = resolve_config(args)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::new(EXIT_CONFIG, format!("thread pool: {e}")))?;
    pool.install(|| f(&cfg, &base))
}

/// Parses `args` (program name first), runs the command, prints the outcome
/// and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(summary) => {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
