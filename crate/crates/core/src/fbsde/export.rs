//! CSV and manifest output for solution fields.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::SolutionField;
use crate::error::Result;

/// Bumped whenever a column is added, removed or reinterpreted.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub(crate) fn schema_line(kind: &str) -> String {
    format!("# mfg {kind} csv schema v{CSV_SCHEMA_VERSION}\n")
}

/// One CSV per quantity (`scenario,particle,step,time,value`). Major files
/// leave `particle` empty. `max_particles` caps the minor particles written
/// per scenario. Returns the paths written, in order.
pub fn write_field_csv(dir: &Path, prefix: &str, field: &SolutionField, max_particles: Option<usize>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let n = field.n_steps();
    let mut written = Vec::new();
    let major = [
        ("x0", &field.major.x0),
        ("p0", &field.major.p0),
        ("q0", &field.major.q0),
        ("u0", &field.major.u0),
    ];
    for (name, data) in major {
        if data.is_empty() {
            continue;
        }
        let path = dir.join(format!("{prefix}{name}.csv"));
        let mut w = BufWriter::new(fs::File::create(&path)?);
        w.write_all(schema_line("field").as_bytes())?;
        writeln!(w, "scenario,particle,step,time,value")?;
        for s in 0..field.n_scenarios {
            for k in 0..=n {
                writeln!(w, "{s},,{k},{},{}", field.grid.t(k), data[field.major_idx(s, k)])?;
            }
        }
        w.flush()?;
        written.push(path);
    }
    let m = max_particles.map_or(field.n_particles, |c| c.min(field.n_particles));
    let minor = [
        ("x", &field.minor.x),
        ("p", &field.minor.p),
        ("q", &field.minor.q),
        ("q_tilde", &field.minor.q_tilde),
        ("u", &field.minor.u),
    ];
    for (name, data) in minor {
        if data.is_empty() {
            continue;
        }
        let path = dir.join(format!("{prefix}{name}.csv"));
        let mut w = BufWriter::new(fs::File::create(&path)?);
        w.write_all(schema_line("field").as_bytes())?;
        writeln!(w, "scenario,particle,step,time,value")?;
        for s in 0..field.n_scenarios {
            for j in 0..m {
                for k in 0..=n {
                    writeln!(w, "{s},{j},{k},{},{}", field.grid.t(k), data[field.minor_idx(s, j, k)])?;
                }
            }
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}

/// Plain-text run manifest: the resolved configuration verbatim, then the
/// solver diagnostics of `field` if given.
pub fn write_manifest(path: &Path, resolved_config: &str, field: Option<&SolutionField>) -> Result<()> {
    let mut out = String::new();
    out.push_str(&schema_line("manifest"));
    out.push_str("[config]\n");
    out.push_str(resolved_config);
    if !resolved_config.ends_with('\n') {
        out.push('\n');
    }
    if let Some(f) = field {
        let d = &f.diagnostics;
        let _ = writeln!(out, "\n[diagnostics]");
        let _ = writeln!(out, "gamma = {}", f.gamma);
        let _ = writeln!(out, "n_steps = {}", f.n_steps());
        let _ = writeln!(out, "n_scenarios = {}", f.n_scenarios);
        let _ = writeln!(out, "n_particles = {}", f.n_particles);
        let _ = writeln!(out, "picard_iterations = {}", d.residuals.len());
        let _ = writeln!(out, "residuals = {}", list(&d.residuals));
        let _ = writeln!(out, "consistency = {}", list(&d.consistency));
        let _ = writeln!(out, "regression_residual = {}", d.regression_residual);
        for (i, step) in d.continuation.iter().enumerate() {
            let _ = writeln!(
                out,
                "continuation.{i} = {{ gamma = {}, eta = {}, iterations = {}, ratio = {} }}",
                step.gamma, step.eta, step.iterations, step.ratio
            );
        }
        let ratios: Vec<f64> = d.continuation.iter().map(|s| s.ratio).collect();
        let _ = writeln!(out, "contraction_ratios = {}", list(&ratios));
        for w in &d.warnings {
            let _ = writeln!(out, "warning = {w:?}");
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub(crate) fn list(v: &[f64]) -> String {
    let items: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", items.join(", "))
}
