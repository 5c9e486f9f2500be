//! `key = value` experiment files.
//!
//! One assignment per line, `#` starts a comment. Values are numbers,
//! words, or comma-separated lists of numbers. Every key must be consumed
//! by the command being configured; leftovers are rejected.

use std::collections::BTreeMap;
use std::fmt;

use kinlab::master_sim::{InitialCondition, KernelSpec, Process, SimConfig};
use kinlab::observables::Observable;
use kinlab::{ConservationMode, ManifoldSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    Spectrum,
    Sample,
    SimSphere,
    SimBp,
    Rayleigh,
    GapScan,
    MarginalCompare,
    FpeMoments,
    Chaos,
}

impl CommandKind {
    pub const ALL: [CommandKind; 9] = [
        CommandKind::Spectrum,
        CommandKind::Sample,
        CommandKind::SimSphere,
        CommandKind::SimBp,
        CommandKind::Rayleigh,
        CommandKind::GapScan,
        CommandKind::MarginalCompare,
        CommandKind::FpeMoments,
        CommandKind::Chaos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Spectrum => "spectrum",
            CommandKind::Sample => "sample",
            CommandKind::SimSphere => "sim-sphere",
            CommandKind::SimBp => "sim-bp",
            CommandKind::Rayleigh => "rayleigh",
            CommandKind::GapScan => "gap-scan",
            CommandKind::MarginalCompare => "marginal-compare",
            CommandKind::FpeMoments => "fpe-moments",
            CommandKind::Chaos => "chaos",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitChoice {
    None,
    Auto,
    Range { t0: f64, t1: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentModel {
    Fpe,
    Landau,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChaosProcess {
    Sphere,
    Pair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Task {
    Spectrum {
        j_max: u32,
    },
    Sample {
        samples: usize,
        init: InitialCondition,
    },
    Simulate {
        config: SimConfig,
        init: InitialCondition,
        observables: Vec<String>,
        fit: FitChoice,
        fit_offset: f64,
        plot: bool,
    },
    Rayleigh {
        kernel: KernelSpec,
        samples: usize,
    },
    GapScan {
        gamma: f64,
        n_list: Vec<usize>,
        samples: usize,
    },
    MarginalCompare {
        samples: usize,
        n_list: Vec<usize>,
        r_max: f64,
        points: usize,
    },
    FpeMoments {
        model: MomentModel,
        u: [f64; 3],
        eps0: f64,
        gamma: f64,
        m0: [f64; 3],
        second0: [[f64; 3]; 3],
        t_end: f64,
        points: usize,
        plot: bool,
    },
    Chaos {
        process: ChaosProcess,
        gamma: f64,
        n_list: Vec<usize>,
        pair_samples: usize,
        dt: f64,
        t_end: f64,
        bins: usize,
        half_width: f64,
        init: InitialCondition,
    },
}

/// A validated experiment. Serialized verbatim into the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub command: CommandKind,
    pub seed: u64,
    /// Absent for commands that fix their own manifolds (gap-scan,
    /// fpe-moments).
    pub spec: Option<ManifoldSpec>,
    pub task: Task,
}

impl ExperimentPlan {
    /// Replaces the seed everywhere it is stored.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let Task::Simulate { config, .. } = &mut self.task {
            config.seed = seed;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub messages: Vec<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.messages.join("\n"))
    }
}

impl std::error::Error for ConfigError {}

struct Entry {
    value: String,
    line: usize,
    used: bool,
}

struct Fields {
    map: BTreeMap<String, Entry>,
    errors: Vec<String>,
}

impl Fields {
    fn parse(text: &str) -> Self {
        let mut map: BTreeMap<String, Entry> = BTreeMap::new();
        let mut errors = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                errors.push(format!("line {line}: expected `key = value`, got `{body}`"));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || !k.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_') {
                errors.push(format!("line {line}: invalid key `{k}`"));
                continue;
            }
            if let Some(prev) = map.get(k) {
                errors.push(format!("duplicate key `{k}` on lines {} and {line}", prev.line));
                continue;
            }
            map.insert(k.to_string(), Entry { value: v.to_string(), line, used: false });
        }
        Fields { map, errors }
    }

    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.map.get_mut(key).map(|e| {
            e.used = true;
            (e.value.clone(), e.line)
        })
    }

    fn line(&self, key: &str) -> String {
        match self.map.get(key) {
            Some(e) => format!("line {}", e.line),
            None => "default".into(),
        }
    }

    fn fail(&mut self, key: &str, msg: impl fmt::Display) {
        let at = self.line(key);
        self.errors.push(format!("{at}: {key}: {msg}"));
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str, default: T) -> T {
        match self.take(key) {
            None => default,
            Some((v, line)) => match v.parse() {
                Ok(x) => x,
                Err(_) => {
                    self.errors.push(format!("line {line}: {key}: cannot parse `{v}`"));
                    default
                }
            },
        }
    }

    fn f64(&mut self, key: &str, default: f64) -> f64 {
        let x: f64 = self.parsed(key, default);
        if !x.is_finite() {
            self.fail(key, "must be finite");
            return default;
        }
        x
    }

    fn positive(&mut self, key: &str, default: f64) -> f64 {
        let x = self.f64(key, default);
        if x <= 0.0 {
            self.fail(key, format!("must be positive, got {x}"));
        }
        x
    }

    fn count(&mut self, key: &str, default: usize, min: usize) -> usize {
        let x: usize = self.parsed(key, default);
        if x < min {
            self.fail(key, format!("must be at least {min}, got {x}"));
        }
        x
    }

    fn bool(&mut self, key: &str, default: bool) -> bool {
        self.parsed(key, default)
    }

    fn floats(&mut self, key: &str, default: &[f64], len: Option<usize>) -> Vec<f64> {
        let Some((v, line)) = self.take(key) else {
            return default.to_vec();
        };
        let parsed: std::result::Result<Vec<f64>, _> = v.split(',').map(|s| s.trim().parse::<f64>()).collect();
        match parsed {
            Ok(xs) if xs.iter().all(|x| x.is_finite()) => {
                if let Some(n) = len {
                    if xs.len() != n {
                        self.errors.push(format!("line {line}: {key}: expected {n} values, got {}", xs.len()));
                        return default.to_vec();
                    }
                }
                xs
            }
            _ => {
                self.errors.push(format!("line {line}: {key}: expected comma-separated numbers, got `{v}`"));
                default.to_vec()
            }
        }
    }

    fn vec3(&mut self, key: &str, default: [f64; 3]) -> [f64; 3] {
        let v = self.floats(key, &default, Some(3));
        [v[0], v[1], v[2]]
    }

    fn mat3(&mut self, key: &str, default: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let flat: Vec<f64> = default.iter().flatten().copied().collect();
        let v = self.floats(key, &flat, Some(9));
        [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]]
    }

    fn n_list(&mut self, key: &str, default: &[usize]) -> Vec<usize> {
        let Some((v, line)) = self.take(key) else {
            return default.to_vec();
        };
        let parsed: std::result::Result<Vec<usize>, _> = v.split(',').map(|s| s.trim().parse::<usize>()).collect();
        match parsed {
            Ok(xs) if !xs.is_empty() && xs.windows(2).all(|w| w[0] < w[1]) && xs[0] >= 2 => xs,
            _ => {
                self.errors.push(format!(
                    "line {line}: {key}: expected strictly increasing particle counts ≥ 2, got `{v}`"
                ));
                default.to_vec()
            }
        }
    }

    fn word<T: Copy>(&mut self, key: &str, default: T, options: &[(&str, T)]) -> T {
        let Some((v, line)) = self.take(key) else {
            return default;
        };
        match options.iter().find(|(name, _)| *name == v) {
            Some(&(_, x)) => x,
            None => {
                let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                self.errors.push(format!("line {line}: {key}: expected one of {}, got `{v}`", names.join(", ")));
                default
            }
        }
    }

    fn finish(mut self) -> std::result::Result<(), ConfigError> {
        let mut leftovers: Vec<(usize, String)> =
            self.map.iter().filter(|(_, e)| !e.used).map(|(k, e)| (e.line, k.clone())).collect();
        leftovers.sort();
        for (line, k) in leftovers {
            self.errors.push(format!("line {line}: unknown key `{k}` for this command"));
        }
        if self.errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { messages: self.errors })
        }
    }
}

/// Manifold keys: `mode`, `u`, `eps` and, unless `with_n` is false, `n`.
fn manifold(f: &mut Fields, with_n: bool, n_default: usize) -> Option<ManifoldSpec> {
    let n = if with_n { f.count("n", 16, 2) } else { n_default };
    let mode = f.word(
        "mode",
        ConservationMode::EnergyMomentum,
        &[("energy", ConservationMode::EnergyOnly), ("energy-momentum", ConservationMode::EnergyMomentum)],
    );
    let u = f.vec3("u", [0.0; 3]);
    let eps = f.positive("eps", 1.0);
    if mode == ConservationMode::EnergyOnly && u != [0.0; 3] {
        f.fail("u", "must be 0, 0, 0 when mode = energy");
        return None;
    }
    let eps0 = eps - 0.5 * (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
    if mode == ConservationMode::EnergyMomentum && eps > 0.0 && eps0 <= 0.0 {
        f.fail("eps", format!("ε₀ = eps - |u|²/2 must be > 0, got {eps0}"));
        return None;
    }
    ManifoldSpec::new(n.max(2), mode, u, eps).ok()
}

fn initial_condition(f: &mut Fields, n: usize) -> InitialCondition {
    let kind = f.word("init", 0u8, &[("uniform", 0), ("linear", 1), ("tagged", 2)]);
    match kind {
        1 => {
            let matrix = f.mat3("init_matrix", [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
            let shift = f.vec3("init_shift", [0.0; 3]);
            InitialCondition::Linear { matrix, shift }
        }
        2 => {
            let k = f.count("tagged_particle", 1, 1);
            if k > n {
                f.fail("tagged_particle", format!("must be at most n = {n}"));
            }
            let offset = f.vec3("tagged_offset", [1.0, 0.0, 0.0]);
            InitialCondition::Tagged { particle: k.saturating_sub(1), offset }
        }
        _ => InitialCondition::Uniform,
    }
}

fn fit_choice(f: &mut Fields) -> FitChoice {
    let Some((v, line)) = f.take("fit") else {
        return FitChoice::Auto;
    };
    match v.as_str() {
        "auto" => FitChoice::Auto,
        "none" => FitChoice::None,
        _ => {
            let xs: Vec<Option<f64>> = v.split(',').map(|s| s.trim().parse().ok()).collect();
            match xs.as_slice() {
                [Some(t0), Some(t1)] if t0.is_finite() && t1.is_finite() && t0 < t1 => {
                    FitChoice::Range { t0: *t0, t1: *t1 }
                }
                _ => {
                    f.errors.push(format!("line {line}: fit: expected auto, none or `t0, t1` with t0 < t1, got `{v}`"));
                    FitChoice::Auto
                }
            }
        }
    }
}

fn kernel(f: &mut Fields, spec: Option<&ManifoldSpec>) -> KernelSpec {
    let gamma = f.f64("gamma", -3.0);
    if gamma <= -5.0 {
        f.fail("gamma", format!("must exceed -5, got {gamma}"));
    }
    let default_cutoff = spec.map_or(1e-8, |s| s.default_cutoff());
    let cutoff = f.positive("cutoff", default_cutoff);
    KernelSpec::new(gamma, cutoff).unwrap_or_else(|_| KernelSpec::new(-3.0, default_cutoff).unwrap())
}

/// Parses and validates a config for `command`. All violations are
/// reported together.
pub fn parse_config(command: CommandKind, text: &str) -> std::result::Result<ExperimentPlan, ConfigError> {
    let mut f = Fields::parse(text);
    if let Some((v, line)) = f.take("command") {
        if CommandKind::from_name(&v) != Some(command) {
            f.errors.push(format!("line {line}: command: file is for `{v}`, invoked as `{}`", command.name()));
        }
    }
    let seed: u64 = f.parsed("seed", 0);
    let mut spec = None;
    let task = match command {
        CommandKind::Spectrum => {
            spec = manifold(&mut f, true, 0);
            Task::Spectrum { j_max: f.parsed("j_max", 4) }
        }
        CommandKind::Sample => {
            spec = manifold(&mut f, true, 0);
            let n = spec.map_or(2, |s| s.n_particles());
            Task::Sample { samples: f.count("samples", 1000, 1), init: initial_condition(&mut f, n) }
        }
        CommandKind::SimSphere | CommandKind::SimBp => {
            spec = manifold(&mut f, true, 0);
            let n = spec.map_or(2, |s| s.n_particles());
            let process = if command == CommandKind::SimBp {
                Process::PairDiffusion { kernel: kernel(&mut f, spec.as_ref()) }
            } else {
                Process::SphereDiffusion
            };
            let config = SimConfig {
                dt: f.positive("dt", 1e-3),
                t_end: f.f64("t_end", 1.0),
                n_replicas: f.count("replicas", 256, 1),
                seed,
                process,
                record_every: f.count("record_every", 10, 1),
            };
            if config.t_end < 0.0 {
                f.fail("t_end", "must be non-negative");
            }
            let init = initial_condition(&mut f, n);
            let obs_line = f.line("observables");
            let observables: Vec<String> = f
                .take("observables")
                .map_or_else(|| "p1_deg1_1".to_string(), |(v, _)| v)
                .split(',')
                .map(|s| s.trim().to_string())
                .collect();
            for name in &observables {
                match Observable::parse(name) {
                    Ok(Observable::Tagged { k, .. }) if k >= n => {
                        f.errors.push(format!("{obs_line}: observables: `{name}` refers to a particle beyond n = {n}"));
                    }
                    Ok(Observable::Trial) if spec.is_some_and(|s| s.mode() != ConservationMode::EnergyMomentum) => {
                        f.errors.push(format!("{obs_line}: observables: `trial` needs mode = energy-momentum"));
                    }
                    Ok(_) => {}
                    Err(_) => f.errors.push(format!("{obs_line}: observables: unknown observable `{name}`")),
                }
            }
            Task::Simulate {
                config,
                init,
                observables,
                fit: fit_choice(&mut f),
                fit_offset: f.f64("fit_offset", 0.0),
                plot: f.bool("plot", false),
            }
        }
        CommandKind::Rayleigh => {
            spec = manifold(&mut f, true, 0);
            if spec.is_some_and(|s| s.mode() != ConservationMode::EnergyMomentum) {
                f.fail("mode", "rayleigh needs mode = energy-momentum");
            }
            Task::Rayleigh {
                kernel: kernel(&mut f, spec.as_ref()),
                samples: f.count("samples", 100_000, kinlab::spectral::MIN_RAYLEIGH_SAMPLES),
            }
        }
        CommandKind::GapScan => {
            let gamma = f.f64("gamma", -3.0);
            if gamma <= -5.0 {
                f.fail("gamma", format!("must exceed -5, got {gamma}"));
            }
            let n_list = f.n_list("n_list", &[8, 16, 32, 64]);
            if n_list.len() < 3 {
                f.fail("n_list", "needs at least 3 values for the power-law fit");
            }
            Task::GapScan {
                gamma,
                n_list,
                samples: f.count("samples", 100_000, kinlab::spectral::MIN_RAYLEIGH_SAMPLES),
            }
        }
        CommandKind::MarginalCompare => {
            spec = manifold(&mut f, true, 0);
            if spec.is_some_and(|s| s.mode() != ConservationMode::EnergyOnly) {
                f.fail("mode", "marginal-compare needs mode = energy");
            }
            Task::MarginalCompare {
                samples: f.count("samples", 100_000, 1),
                n_list: f.n_list("n_list", &[8, 32, 128]),
                r_max: f.positive("r_max", 4.0),
                points: f.count("points", 401, 2),
            }
        }
        CommandKind::FpeMoments => {
            let model = f.word("model", MomentModel::Fpe, &[("fpe", MomentModel::Fpe), ("landau", MomentModel::Landau)]);
            let gamma = f.f64("gamma", 0.0);
            if model == MomentModel::Landau && gamma != 0.0 {
                f.fail("gamma", "the closed moment flow exists only for gamma = 0");
            }
            Task::FpeMoments {
                model,
                u: f.vec3("u", [0.0; 3]),
                eps0: f.positive("eps0", 1.0),
                gamma,
                m0: f.vec3("m0", [1.0, 0.0, 0.0]),
                second0: f.mat3("second0", [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
                t_end: f.positive("t_end", 2.0),
                points: f.count("points", 41, 2),
                plot: f.bool("plot", false),
            }
        }
        CommandKind::Chaos => {
            let n_list = f.n_list("n_list", &[8, 32, 128]);
            spec = manifold(&mut f, false, n_list[0]);
            let process = f.word("process", ChaosProcess::Sphere, &[("sphere", ChaosProcess::Sphere), ("pair", ChaosProcess::Pair)]);
            let gamma = f.f64("gamma", -3.0);
            if gamma <= -5.0 {
                f.fail("gamma", format!("must exceed -5, got {gamma}"));
            }
            let init = initial_condition(&mut f, n_list[0]);
            Task::Chaos {
                process,
                gamma,
                n_list,
                pair_samples: f.count("pair_samples", 1 << 16, 1),
                dt: f.positive("dt", 5e-3),
                t_end: f.positive("t_end", 0.5),
                bins: f.count("bins", 3, 1),
                half_width: f.positive("half_width", 1.5),
                init,
            }
        }
    };
    f.finish()?;
    Ok(ExperimentPlan { command, seed, spec, task })
}
