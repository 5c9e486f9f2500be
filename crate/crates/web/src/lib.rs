//! Browser bindings. Each export takes plain numbers and returns a JSON
//! string; the `*_json` functions are the same operations for native use.

use kinlab::kinetic_limits::{maxwellian_eval, stationary_marginal_eval, LimitParams};
use kinlab::master_sim::{run_ensemble, InitialCondition, Process, SimConfig};
use kinlab::observables::{decay_rate_fit, FitWindow};
use kinlab::spectral::{eigenvalue_scaled, spectrum_table, EigenFamily};
use kinlab::{ConservationMode, ManifoldSpec, Observable};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Browser budgets stay small enough to run on the main thread.
pub const MAX_REPLICAS: usize = 4096;
pub const MAX_PARTICLES: usize = 4096;

fn mode_of(momentum: bool) -> ConservationMode {
    if momentum {
        ConservationMode::EnergyMomentum
    } else {
        ConservationMode::EnergyOnly
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

pub fn spectrum_json(n: usize, momentum: bool, eps: f64, j_max: u32) -> Result<String, String> {
    if n > MAX_PARTICLES || j_max > 64 {
        return Err(format!("keep N ≤ {MAX_PARTICLES} and j ≤ 64"));
    }
    let spec = ManifoldSpec::new(n, mode_of(momentum), [0.0; 3], eps).map_err(err)?;
    let t = spectrum_table(&spec, j_max);
    Ok(json!({
        "n": n,
        "dim": spec.dim(),
        "eps_eff": t.eps_eff,
        "entries": t.entries,
    })
    .to_string())
}

/// Stationary one-particle marginal of the energy sphere along a ray,
/// against the Maxwellian with the same temperature.
pub fn marginal_json(n: usize, eps: f64, r_max: f64, points: usize) -> Result<String, String> {
    if n > MAX_PARTICLES || !(2..=2000).contains(&points) || !(r_max > 0.0) {
        return Err("need N ≤ 4096, 2 ≤ points ≤ 2000 and r_max > 0".into());
    }
    let spec = ManifoldSpec::energy_only(n, eps).map_err(err)?;
    let p = LimitParams::from_spec(&spec);
    let mut r = Vec::with_capacity(points);
    let mut marginal = Vec::with_capacity(points);
    let mut maxwellian = Vec::with_capacity(points);
    for i in 0..points {
        let x = r_max * i as f64 / (points - 1) as f64;
        r.push(x);
        marginal.push(stationary_marginal_eval(&spec, &[[x, 0.0, 0.0]]).map_err(err)?);
        maxwellian.push(maxwellian_eval(&p, [x, 0.0, 0.0]));
    }
    let sup = marginal.iter().zip(&maxwellian).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(json!({ "r": r, "marginal": marginal, "maxwellian": maxwellian, "sup_distance": sup }).to_string())
}

/// Runs sphere diffusion from a perturbed start, fits the decay of a
/// symmetrised harmonic and compares it with the eigenvalue of its degree.
/// `degree` 1 perturbs the mean, 2 applies a shear, 3 kicks one particle
/// along (1, 1, 1). Linear maps of the uniform start leave odd harmonics at
/// zero mean, hence the kick.
pub fn sphere_decay_json(
    n: usize,
    momentum: bool,
    degree: u32,
    replicas: usize,
    dt: f64,
    t_end: f64,
    seed: u32,
) -> Result<String, String> {
    if n > 256 || replicas > MAX_REPLICAS || t_end / dt > 20_000.0 {
        return Err("keep N ≤ 256, replicas ≤ 4096 and t_end/dt ≤ 20000".into());
    }
    let spec = ManifoldSpec::new(n, mode_of(momentum), [0.0; 3], 1.0).map_err(err)?;
    let (family, init) = match degree {
        1 if momentum => return Err("the degree-1 harmonic is frozen by momentum conservation".into()),
        1 => (EigenFamily::Deg1 { s: 0 }, InitialCondition::Linear { matrix: IDENTITY, shift: [1.0, 0.0, 0.0] }),
        2 => (EigenFamily::Deg2Cross { a: 0, b: 1 }, InitialCondition::Linear { matrix: SHEAR, shift: [0.0; 3] }),
        3 => (EigenFamily::Deg3Triple, InitialCondition::Tagged { particle: 0, offset: [1.5, 1.5, 1.5] }),
        _ => return Err("degree must be 1, 2 or 3".into()),
    };
    let steps = (t_end / dt).round().max(1.0) as usize;
    let cfg = SimConfig {
        dt,
        t_end,
        n_replicas: replicas,
        seed: seed.into(),
        process: Process::SphereDiffusion,
        record_every: (steps / 40).max(1),
    };
    let series = run_ensemble(&spec, &cfg, &init, &[Observable::Eigen(family)]).map_err(err)?;
    let s = &series[0];
    let fit = decay_rate_fit(s, FitWindow::Auto, 0.0).ok();
    Ok(json!({
        "observable": s.name,
        "times": s.times,
        "means": s.means,
        "stderrs": s.stderrs,
        "predicted_rate": eigenvalue_scaled(&spec, degree),
        "fit": fit,
    })
    .to_string())
}

const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
const SHEAR: [[f64; 3]; 3] = [[1.0, 0.8, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[wasm_bindgen]
pub fn spectrum(n: usize, momentum: bool, eps: f64, j_max: u32) -> Result<String, JsValue> {
    spectrum_json(n, momentum, eps, j_max).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn marginal(n: usize, eps: f64, r_max: f64, points: usize) -> Result<String, JsValue> {
    marginal_json(n, eps, r_max, points).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn sphere_decay(
    n: usize,
    momentum: bool,
    degree: u32,
    replicas: usize,
    dt: f64,
    t_end: f64,
    seed: u32,
) -> Result<String, JsValue> {
    sphere_decay_json(n, momentum, degree, replicas, dt, t_end, seed).map_err(|e| JsValue::from_str(&e))
}
