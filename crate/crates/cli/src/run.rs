//! Executes a validated plan and writes its artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use kinlab::geometry::sample_uniform;
use kinlab::kinetic_limits::{
    fpe_moment_flow, landau_moment_flow, maxwellian_eval, relative_entropy, stationary_marginal_eval, LimitParams,
};
use kinlab::master_sim::{evolve_ensemble, run_ensemble, EnsembleSnapshot, KernelSpec, Process, SimConfig};
use kinlab::observables::{
    chaos_distance, decay_rate_fit, marginal_histogram, radial_ks_test, FitWindow, Grid, Observable, PairPooling,
};
use kinlab::rng::{derive_seed, stream, INIT_STEP};
use kinlab::spectral::{gap_scan, rayleigh_quotient_mc, spectrum_table, TrialFunction};
use kinlab::{KinError, ManifoldSpec};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{ChaosProcess, CommandKind, ExperimentPlan, FitChoice, MomentModel, Task};
use crate::output::{svg_plot, Cell, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

pub const GIT_DESCRIBE: &str = env!("KINLAB_GIT_DESCRIBE");

#[derive(Debug)]
pub enum RunError {
    Kin(KinError),
    Io(String),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Kin(e) => write!(f, "{e}"),
            RunError::Io(e) => f.write_str(e),
        }
    }
}

impl From<KinError> for RunError {
    fn from(e: KinError) -> Self {
        RunError::Kin(e)
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e.to_string())
    }
}

impl From<csv::Error> for RunError {
    fn from(e: csv::Error) -> Self {
        RunError::Io(e.to_string())
    }
}

/// Computed artifacts, before anything touches the disk.
pub struct Outputs {
    pub table: Table,
    pub results: Value,
    pub plot: Option<String>,
}

fn spec_of(plan: &ExperimentPlan) -> Result<ManifoldSpec, RunError> {
    plan.spec.ok_or_else(|| RunError::Kin(KinError::InvalidSpec("plan has no manifold".into())))
}

pub fn compute(plan: &ExperimentPlan) -> Result<Outputs, RunError> {
    let seed = plan.seed;
    let out = match &plan.task {
        Task::Spectrum { j_max } => {
            let spec = spec_of(plan)?;
            let st = spectrum_table(&spec, *j_max);
            let mut t = Table::new("spectrum", &["j", "unscaled", "scaled", "limit"]);
            for e in &st.entries {
                t.push(vec![Cell::Int(e.j as i64), Cell::Num(e.unscaled), Cell::Num(e.scaled), Cell::Num(e.limit)]);
            }
            Outputs { table: t, results: json!({ "eps_eff": st.eps_eff, "dim": spec.dim() }), plot: None }
        }
        Task::Sample { samples, init } => {
            let spec = spec_of(plan)?;
            let mut t = Table::new("samples", &["sample", "particle", "v1", "v2", "v3"]);
            let mut worst: f64 = 0.0;
            for i in 0..*samples {
                let v = init.sample(&spec, &mut stream(seed, i as u64, INIT_STEP))?;
                worst = worst.max(v.constraint_residual(&spec));
                for k in 0..spec.n_particles() {
                    let p = v.particle(k);
                    t.push(vec![
                        Cell::Int(i as i64),
                        Cell::Int(k as i64 + 1),
                        Cell::Num(p[0]),
                        Cell::Num(p[1]),
                        Cell::Num(p[2]),
                    ]);
                }
            }
            Outputs { table: t, results: json!({ "max_constraint_residual": worst }), plot: None }
        }
        Task::Simulate { config, init, observables, fit, fit_offset, plot } => {
            let spec = spec_of(plan)?;
            let obs: Vec<Observable> = observables.iter().map(|n| Observable::parse(n)).collect::<Result<_, _>>()?;
            let series = run_ensemble(&spec, config, init, &obs)?;
            let mut headers = vec!["time".to_string()];
            for s in &series {
                headers.push(format!("{}_mean", s.name));
                headers.push(format!("{}_stderr", s.name));
            }
            let mut t = Table { name: "series".into(), headers, rows: Vec::new() };
            let n_rows = series.first().map_or(0, |s| s.len());
            for i in 0..n_rows {
                let mut row = vec![Cell::Num(series[0].times[i])];
                for s in &series {
                    row.push(Cell::Num(s.means[i]));
                    row.push(Cell::Num(s.stderrs[i]));
                }
                t.push(row);
            }
            let mut fits = serde_json::Map::new();
            let window = match *fit {
                FitChoice::None => None,
                FitChoice::Auto => Some(FitWindow::Auto),
                FitChoice::Range { t0, t1 } => Some(FitWindow::Range { t0, t1 }),
            };
            if let Some(w) = window {
                for s in series.iter().filter(|s| s.len() >= 3) {
                    let v = match decay_rate_fit(s, w, *fit_offset) {
                        Ok(f) => serde_json::to_value(f).unwrap_or(Value::Null),
                        Err(e) => json!({ "error": e.to_string() }),
                    };
                    fits.insert(s.name.clone(), v);
                }
            }
            let svg = plot.then(|| {
                let ys: Vec<usize> = (0..series.len()).map(|i| 1 + 2 * i).collect();
                svg_plot(&t, 0, &ys, "ensemble means")
            });
            Outputs { table: t, results: json!({ "fits": fits, "n_steps": config.n_steps() }), plot: svg }
        }
        Task::Rayleigh { kernel, samples } => {
            let spec = spec_of(plan)?;
            let tf = TrialFunction::standard(spec.n_particles())?;
            let r = rayleigh_quotient_mc(&spec, &tf, kernel, *samples, seed)?;
            let bound = kinlab::spectral::lambda1_bound(spec.n_particles());
            let mut t = Table::new("rayleigh", &["n", "estimate", "stderr", "bound"]);
            t.push(vec![Cell::Int(spec.n_particles() as i64), Cell::Num(r.estimate), Cell::Num(r.stderr), Cell::Num(bound)]);
            Outputs { table: t, results: serde_json::to_value(r).unwrap_or(Value::Null), plot: None }
        }
        Task::GapScan { gamma, n_list, samples } => {
            let scan = gap_scan(n_list, *gamma, *samples, seed)?;
            let mut t = Table::new("gap_scan", &["n", "estimate", "stderr", "bound"]);
            for r in &scan.rows {
                t.push(vec![Cell::Int(r.n_particles as i64), Cell::Num(r.estimate), Cell::Num(r.stderr), Cell::Num(r.bound)]);
            }
            Outputs {
                table: t,
                results: json!({ "exponent": scan.exponent, "exponent_stderr": scan.exponent_stderr }),
                plot: None,
            }
        }
        Task::MarginalCompare { samples, n_list, r_max, points } => {
            let spec = spec_of(plan)?;
            let states = (0..*samples)
                .map(|r| sample_uniform(&spec, &mut stream(seed, r as u64, 0)))
                .collect::<Result<Vec<_>, _>>()?;
            let ks = radial_ks_test(&spec, &EnsembleSnapshot { time: 0.0, states })?;
            let specs: Vec<ManifoldSpec> = n_list.iter().map(|&n| spec.with_particles(n)).collect::<Result<_, _>>()?;
            let p = LimitParams::from_spec(&spec);
            let mut headers = vec!["r".to_string()];
            headers.extend(n_list.iter().map(|n| format!("marginal_n{n}")));
            headers.push("maxwellian".into());
            let mut t = Table { name: "marginal".into(), headers, rows: Vec::new() };
            let mut sup = vec![0.0f64; specs.len()];
            for i in 0..*points {
                let r = r_max * i as f64 / (*points - 1) as f64;
                let m = maxwellian_eval(&p, [r, 0.0, 0.0]);
                let mut row = vec![Cell::Num(r)];
                for (j, s) in specs.iter().enumerate() {
                    let f = stationary_marginal_eval(s, &[[r, 0.0, 0.0]])?;
                    sup[j] = sup[j].max((f - m).abs());
                    row.push(Cell::Num(f));
                }
                row.push(Cell::Num(m));
                t.push(row);
            }
            let sup_json: serde_json::Map<String, Value> =
                n_list.iter().zip(&sup).map(|(n, d)| (n.to_string(), json!(d))).collect();
            Outputs {
                table: t,
                results: json!({
                    "ks": { "statistic": ks.statistic, "critical_99": ks.critical_99, "n": ks.n, "passes": ks.passes() },
                    "sup_norm_vs_maxwellian": sup_json,
                }),
                plot: None,
            }
        }
        Task::FpeMoments { model, u, eps0, gamma, m0, second0, t_end, points, plot } => {
            let p = LimitParams::new(*u, *eps0)?;
            let kernel = KernelSpec::new(*gamma, 1e-8)?;
            let mut headers = vec!["t", "mean_1", "mean_2", "mean_3"];
            let names = ["second_11", "second_12", "second_13", "second_21", "second_22", "second_23", "second_31", "second_32", "second_33"];
            headers.extend(names);
            let mut t = Table::new("moments", &headers);
            for i in 0..*points {
                let time = t_end * i as f64 / (*points - 1) as f64;
                let m = match model {
                    MomentModel::Fpe => fpe_moment_flow(&p, *m0, *second0, time)?,
                    MomentModel::Landau => landau_moment_flow(&kernel, *m0, *second0, time)?,
                };
                let mut row = vec![Cell::Num(time)];
                row.extend(m.mean.iter().map(|&x| Cell::Num(x)));
                row.extend(m.second.iter().flatten().map(|&x| Cell::Num(x)));
                t.push(row);
            }
            let svg = plot.then(|| svg_plot(&t, 0, &[1, 2, 3, 4, 5, 8], "moment flow"));
            Outputs { table: t, results: json!({ "sigma": p.sigma() }), plot: svg }
        }
        Task::Chaos { process, gamma, n_list, pair_samples, dt, t_end, bins, half_width, init } => {
            let base = spec_of(plan)?;
            let mut t = Table::new("chaos", &["n", "replicas", "chaos_distance", "relative_entropy"]);
            for &n in n_list {
                let spec = base.with_particles(n)?;
                let p = LimitParams::from_spec(&spec);
                let grid = Grid::centered(0.0, half_width * p.sigma(), *bins)?;
                let grids = [Grid::centered(spec.u()[0], grid.hi, *bins)?, Grid::centered(spec.u()[1], grid.hi, *bins)?, Grid::centered(spec.u()[2], grid.hi, *bins)?];
                let process = match process {
                    ChaosProcess::Sphere => Process::SphereDiffusion,
                    ChaosProcess::Pair => Process::PairDiffusion { kernel: KernelSpec::with_default_cutoff(*gamma, &spec)? },
                };
                let replicas = pair_samples.div_ceil(n / 2).max(1);
                let cfg = SimConfig { dt: *dt, t_end: *t_end, n_replicas: replicas, seed: derive_seed(seed, n as u64), process, record_every: usize::MAX };
                let egrid = p.entropy_grid(10)?;
                let mut d = f64::NAN;
                let mut s = f64::NAN;
                let n_steps = cfg.n_steps();
                evolve_ensemble(&spec, &cfg, init, |snap| {
                    if (snap.time - n_steps as f64 * cfg.dt).abs() <= 1e-12 * snap.time.max(1.0) {
                        let h1 = marginal_histogram(snap, 1, grids, PairPooling::AllOrdered)?;
                        let h2 = marginal_histogram(snap, 2, grids, PairPooling::Disjoint)?;
                        d = chaos_distance(&h2, &h1)?;
                        s = relative_entropy(&marginal_histogram(snap, 1, egrid, PairPooling::AllOrdered)?, &p)?;
                    }
                    Ok(())
                })?;
                t.push(vec![Cell::Int(n as i64), Cell::Int(replicas as i64), Cell::Num(d), Cell::Num(s)]);
            }
            Outputs { table: t, results: json!({}), plot: None }
        }
    };
    Ok(out)
}

/// Writes `manifest.json`, the table (`<name>.csv` or `<name>.json`) and
/// an optional `<name>.svg` into `out_dir`. Returns the written paths.
pub fn write_outputs(plan: &ExperimentPlan, outputs: &Outputs, out_dir: &Path, format: Format) -> Result<Vec<PathBuf>, RunError> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let table_path = match format {
        Format::Csv => {
            let path = out_dir.join(format!("{}.csv", outputs.table.name));
            outputs.table.write_csv(fs::File::create(&path)?)?;
            path
        }
        Format::Json => {
            let path = out_dir.join(format!("{}.json", outputs.table.name));
            let body = serde_json::to_string_pretty(&outputs.table.to_json()).map_err(|e| RunError::Io(e.to_string()))?;
            fs::write(&path, body + "\n")?;
            path
        }
    };
    written.push(table_path);
    if let Some(svg) = &outputs.plot {
        let path = out_dir.join(format!("{}.svg", outputs.table.name));
        fs::write(&path, svg)?;
        written.push(path);
    }
    let files: Vec<String> =
        written.iter().filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned())).collect();
    let manifest = json!({
        "tool": "kinlab",
        "version": env!("CARGO_PKG_VERSION"),
        "git_describe": GIT_DESCRIBE,
        "command": plan.command.name(),
        "seed": plan.seed,
        "plan": plan,
        "results": outputs.results,
        "outputs": files,
    });
    let path = out_dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest).map_err(|e| RunError::Io(e.to_string()))?;
    fs::write(&path, body + "\n")?;
    written.push(path);
    Ok(written)
}

pub fn run(plan: &ExperimentPlan, out_dir: &Path, format: Format) -> Result<Vec<PathBuf>, RunError> {
    let outputs = compute(plan)?;
    write_outputs(plan, &outputs, out_dir, format)
}

/// Default output directory name for a command.
pub fn default_out_dir(command: CommandKind) -> PathBuf {
    PathBuf::from("runs").join(command.name())
}
