//! Time grids, seeded Brownian path bundles, particle ensembles and the exact
//! one-dimensional Wasserstein-2 distance between equal-size empirical measures.
//!
//! Every random draw comes from its own ChaCha stream keyed by
//! `(seed, population, scenario, agent)`, so growing a bundle (more scenarios,
//! more particles) never changes the draws already present.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MfgError, Result};

/// Uniform partition of `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(MfgError::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(MfgError::InvalidArgument("time grid needs at least one step".into()));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Knot `t_k = k T / n`; the last knot is exactly `T`.
    pub fn t(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.n_steps as f64
        }
    }

    pub fn knots(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.t(k)).collect()
    }

    /// Same horizon, `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> Self {
        Self { horizon: self.horizon, n_steps: self.n_steps * factor.max(1) }
    }
}

/// Initial distribution of a state variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum InitialLaw {
    PointMass { mean: f64 },
    Uniform { mean: f64, std: f64 },
    Gaussian { mean: f64, std: f64 },
}

impl InitialLaw {
    pub fn mean(&self) -> f64 {
        match *self {
            InitialLaw::PointMass { mean }
            | InitialLaw::Uniform { mean, .. }
            | InitialLaw::Gaussian { mean, .. } => mean,
        }
    }

    pub fn std(&self) -> f64 {
        match *self {
            InitialLaw::PointMass { .. } => 0.0,
            InitialLaw::Uniform { std, .. } | InitialLaw::Gaussian { std, .. } => std,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            InitialLaw::PointMass { mean } => mean,
            InitialLaw::Uniform { mean, std } => {
                let half_width = std * 3f64.sqrt();
                mean + half_width * (2.0 * rng.random::<f64>() - 1.0)
            }
            InitialLaw::Gaussian { mean, std } => {
                let z: f64 = rng.sample(StandardNormal);
                mean + std * z
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (m, s) = (self.mean(), self.std());
        if !m.is_finite() || !s.is_finite() || s < 0.0 {
            return Err(MfgError::InvalidArgument(format!("bad initial law {self:?}")));
        }
        Ok(())
    }
}

/// Which family of idiosyncratic noises a bundle carries. The common noise and
/// the major's initial state depend only on `(seed, scenario)` and are shared
/// by every population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Population {
    /// Particles representing the conditional law inside the solver.
    Solver,
    /// Agents of a finite game; the index separates independent games drawn on
    /// the same common-noise scenario.
    Game(u64),
}

#[derive(Debug, Clone, Copy)]
enum Stream {
    CommonNoise { scenario: u64 },
    MajorInit { scenario: u64 },
    IdioNoise { population: u64, scenario: u64, agent: u64 },
    MinorInit { population: u64, scenario: u64, agent: u64 },
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn population_code(p: Population) -> u64 {
    match p {
        Population::Solver => 0,
        Population::Game(g) => g.wrapping_add(1),
    }
}

fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let words: [u64; 4] = match stream {
        Stream::CommonNoise { scenario } => [1, scenario, 0, 0],
        Stream::MajorInit { scenario } => [2, scenario, 0, 0],
        Stream::IdioNoise { population, scenario, agent } => [3, population, scenario, agent],
        Stream::MinorInit { population, scenario, agent } => [4, population, scenario, agent],
    };
    let mut h = splitmix64(seed);
    for w in words {
        h = splitmix64(h ^ w);
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn gaussian_increments(rng: &mut ChaCha8Rng, n: usize, sqrt_dt: f64, out: &mut Vec<f64>) {
    for _ in 0..n {
        let z: f64 = rng.sample(StandardNormal);
        out.push(z * sqrt_dt);
    }
}

/// Brownian increments and initial states for `n_scenarios` common-noise paths,
/// each carrying `n_particles` idiosyncratic paths.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub seed: u64,
    pub grid: TimeGrid,
    pub n_scenarios: usize,
    pub n_particles: usize,
    /// `xi0[s]`
    pub xi0: Vec<f64>,
    /// `dw0[s * n + k]`
    pub dw0: Vec<f64>,
    /// `xi[s * M + j]`
    pub xi: Vec<f64>,
    /// `dw[(s * M + j) * n + k]`
    pub dw: Vec<f64>,
}

/// Draws a solver bundle. See [`PathBundle::sample`].
pub fn sample_bundle(
    grid: TimeGrid,
    n_scenarios: usize,
    n_particles: usize,
    init_major: InitialLaw,
    init_minor: InitialLaw,
    seed: u64,
) -> Result<PathBundle> {
    PathBundle::sample(grid, n_scenarios, n_particles, init_major, init_minor, seed, Population::Solver)
}

impl PathBundle {
    pub fn sample(
        grid: TimeGrid,
        n_scenarios: usize,
        n_particles: usize,
        init_major: InitialLaw,
        init_minor: InitialLaw,
        seed: u64,
        population: Population,
    ) -> Result<Self> {
        if n_scenarios == 0 || n_particles == 0 {
            return Err(MfgError::EmptyBundle(format!(
                "{n_scenarios} scenarios x {n_particles} particles"
            )));
        }
        init_major.validate()?;
        init_minor.validate()?;
        let n = grid.n_steps();
        let sqrt_dt = grid.dt().sqrt();
        let pop = population_code(population);

        let mut xi0 = Vec::with_capacity(n_scenarios);
        let mut dw0 = Vec::with_capacity(n_scenarios * n);
        let mut xi = Vec::with_capacity(n_scenarios * n_particles);
        let mut dw = Vec::with_capacity(n_scenarios * n_particles * n);
        for s in 0..n_scenarios as u64 {
            let mut rng = stream_rng(seed, Stream::MajorInit { scenario: s });
            xi0.push(init_major.sample(&mut rng));
            let mut rng = stream_rng(seed, Stream::CommonNoise { scenario: s });
            gaussian_increments(&mut rng, n, sqrt_dt, &mut dw0);
            for j in 0..n_particles as u64 {
                let mut rng =
                    stream_rng(seed, Stream::MinorInit { population: pop, scenario: s, agent: j });
                xi.push(init_minor.sample(&mut rng));
                let mut rng =
                    stream_rng(seed, Stream::IdioNoise { population: pop, scenario: s, agent: j });
                gaussian_increments(&mut rng, n, sqrt_dt, &mut dw);
            }
        }
        Ok(Self { seed, grid, n_scenarios, n_particles, xi0, dw0, xi, dw })
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn common(&self, scenario: usize) -> &[f64] {
        let n = self.n_steps();
        &self.dw0[scenario * n..(scenario + 1) * n]
    }

    pub fn idiosyncratic(&self, scenario: usize, particle: usize) -> &[f64] {
        let n = self.n_steps();
        let row = scenario * self.n_particles + particle;
        &self.dw[row * n..(row + 1) * n]
    }

    pub fn xi(&self, scenario: usize, particle: usize) -> f64 {
        self.xi[scenario * self.n_particles + particle]
    }

    const MAGIC: &'static [u8; 8] = b"MFGPATH1";

    /// Binary dump: magic, seed, horizon, step count, scenario and particle
    /// counts, then `xi0`, `dw0`, `xi`, `dw` as little-endian `f64`, row-major.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.grid.horizon().to_le_bytes())?;
        for c in [self.n_steps(), self.n_scenarios, self.n_particles] {
            w.write_all(&(c as u64).to_le_bytes())?;
        }
        for block in [&self.xi0, &self.dw0, &self.xi, &self.dw] {
            for v in block.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(MfgError::Config("not a path bundle dump".into()));
        }
        let mut word = [0u8; 8];
        let mut next = |r: &mut R| -> Result<[u8; 8]> {
            r.read_exact(&mut word)?;
            Ok(word)
        };
        let seed = u64::from_le_bytes(next(&mut r)?);
        let horizon = f64::from_le_bytes(next(&mut r)?);
        let n = u64::from_le_bytes(next(&mut r)?) as usize;
        let k = u64::from_le_bytes(next(&mut r)?) as usize;
        let m = u64::from_le_bytes(next(&mut r)?) as usize;
        let grid = TimeGrid::new(horizon, n)?;
        let mut block = |len: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(len);
            let mut buf = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut buf)?;
                out.push(f64::from_le_bytes(buf));
            }
            Ok(out)
        };
        let xi0 = block(k)?;
        let dw0 = block(k * n)?;
        let xi = block(k * m)?;
        let dw = block(k * m * n)?;
        Ok(Self { seed, grid, n_scenarios: k, n_particles: m, xi0, dw0, xi, dw })
    }
}

/// Empirical law of the particles sharing one common-noise path.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub scenario_id: usize,
    states: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn new(scenario_id: usize, states: Vec<f64>) -> Result<Self> {
        if states.is_empty() {
            return Err(MfgError::EmptyBundle("ensemble without particles".into()));
        }
        if let Some(bad) = states.iter().find(|v| !v.is_finite()) {
            return Err(MfgError::InvalidArgument(format!("non-finite particle state {bad}")));
        }
        Ok(Self { scenario_id, states })
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.states.iter().sum::<f64>() / self.states.len() as f64
    }

    pub fn second_moment(&self) -> f64 {
        self.states.iter().map(|x| x * x).sum::<f64>() / self.states.len() as f64
    }
}

/// Exact W2 between two equal-size empirical measures on the line.
pub fn w2_distance_empirical(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(w2_squared(a, b)?.sqrt())
}

pub(crate) fn w2_squared(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MfgError::SizeMismatch { left: a.len(), right: b.len() });
    }
    if a.is_empty() {
        return Err(MfgError::EmptyBundle("empty sample".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let sum: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// Returns `(W2^2, index-paired mean squared difference)`; the first never
/// exceeds the second because the index pairing is one admissible coupling.
pub fn pairing_bound_check(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<(f64, f64)> {
    if a.scenario_id != b.scenario_id {
        return Err(MfgError::ScenarioMismatch { left: a.scenario_id, right: b.scenario_id });
    }
    let w2 = w2_squared(a.states(), b.states())?;
    let paired = a
        .states()
        .iter()
        .zip(b.states())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    Ok((w2, paired))
}

/// Uniform average of `kernel` over the particles.
pub fn measure_summary<F: Fn(f64) -> f64>(e: &ParticleEnsemble, kernel: F) -> Result<f64> {
    let mut acc = 0.0;
    for &y in e.states() {
        let v = kernel(y);
        if !v.is_finite() {
            return Err(MfgError::ModelEvaluation { function: "measure kernel", tuple: format!("y = {y}") });
        }
        acc += v;
    }
    Ok(acc / e.len() as f64)
}
