//! Constraint manifolds of N-particle velocity space.
//!
//! A state `V = (v_1, ..., v_N)` lives either on the energy sphere
//! `½Σ|v_k|² = Nε` (radius `√(2Nε)`, dimension `3N-1`) or on the
//! energy-momentum sphere `Σv_k = Nu`, `½Σ|v_k|² = Nε` (radius `√(2Nε₀)`,
//! dimension `3N-4`, centred at `U = (u, ..., u)`).
//!
//! Besides sampling and projection onto these manifolds, this module holds
//! the two-dimensional pair-collision submanifolds `B²_kl` on which pair
//! momentum `v_k + v_l` and pair energy are frozen.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{KinError, Result};

/// Relative tolerance for a state to count as lying on its manifold.
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// Default pair cutoff relative to `√ε`.
pub const DEFAULT_CUTOFF_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConservationMode {
    /// Energy only, `C = 1`.
    EnergyOnly,
    /// Energy and momentum, `C = 4`.
    EnergyMomentum,
}

impl ConservationMode {
    /// Number of scalar constraints `C`.
    pub fn constraints(self) -> usize {
        match self {
            ConservationMode::EnergyOnly => 1,
            ConservationMode::EnergyMomentum => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSpec {
    n_particles: usize,
    mode: ConservationMode,
    u: [f64; 3],
    eps: f64,
}

impl ManifoldSpec {
    pub fn new(n_particles: usize, mode: ConservationMode, u: [f64; 3], eps: f64) -> Result<Self> {
        if n_particles < 2 {
            return Err(KinError::InvalidSpec(format!(
                "n_particles must be at least 2, got {n_particles}"
            )));
        }
        if !(eps.is_finite() && eps > 0.0) {
            return Err(KinError::InvalidSpec(format!("eps must be positive, got {eps}")));
        }
        if u.iter().any(|x| !x.is_finite()) {
            return Err(KinError::InvalidSpec("u must be finite".into()));
        }
        match mode {
            ConservationMode::EnergyOnly if u != [0.0; 3] => {
                return Err(KinError::InvalidSpec(
                    "u must be zero in energy-only mode".into(),
                ))
            }
            ConservationMode::EnergyMomentum => {
                let eps0 = eps - 0.5 * norm_sq3(&u);
                if eps0 <= 0.0 {
                    return Err(KinError::InvalidSpec(format!(
                        "eps0 = eps - |u|²/2 must be positive, got {eps0}"
                    )));
                }
            }
            _ => {}
        }
        Ok(Self { n_particles, mode, u, eps })
    }

    pub fn energy_only(n_particles: usize, eps: f64) -> Result<Self> {
        Self::new(n_particles, ConservationMode::EnergyOnly, [0.0; 3], eps)
    }

    pub fn energy_momentum(n_particles: usize, u: [f64; 3], eps: f64) -> Result<Self> {
        Self::new(n_particles, ConservationMode::EnergyMomentum, u, eps)
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn mode(&self) -> ConservationMode {
        self.mode
    }

    pub fn u(&self) -> [f64; 3] {
        self.u
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Energy per particle in the centre-of-mass frame. Equals `eps` in
    /// energy-only mode.
    pub fn eps0(&self) -> f64 {
        self.eps - 0.5 * norm_sq3(&self.u)
    }

    /// Squared radius of the sphere: `2Nε` or `2Nε₀`.
    pub fn radius_sq(&self) -> f64 {
        2.0 * self.n_particles as f64 * self.eps0()
    }

    /// Manifold dimension `3N - C`.
    pub fn dim(&self) -> usize {
        3 * self.n_particles - self.mode.constraints()
    }

    pub fn len(&self) -> usize {
        3 * self.n_particles
    }

    /// Default singularity cutoff for `|v_k - v_l|`.
    pub fn default_cutoff(&self) -> f64 {
        DEFAULT_CUTOFF_SCALE * self.eps.sqrt()
    }

    /// Same spec with a different particle count.
    pub fn with_particles(&self, n_particles: usize) -> Result<Self> {
        Self::new(n_particles, self.mode, self.u, self.eps)
    }
}

/// A point `V ∈ R^{3N}`, stored flat as `[v_11, v_12, v_13, v_21, ...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityState {
    v: Vec<f64>,
}

impl VelocityState {
    pub fn from_vec(spec: &ManifoldSpec, v: Vec<f64>) -> Result<Self> {
        if v.len() != spec.len() {
            return Err(KinError::DimensionMismatch { expected: spec.len(), got: v.len() });
        }
        Ok(Self { v })
    }

    #[cfg_attr(not(test), allow(dead_code))]
    pub(crate) fn from_raw(v: Vec<f64>) -> Self {
        Self { v }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.v
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.v
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.v
    }

    pub fn n_particles(&self) -> usize {
        self.v.len() / 3
    }

    pub fn particle(&self, k: usize) -> [f64; 3] {
        [self.v[3 * k], self.v[3 * k + 1], self.v[3 * k + 2]]
    }

    pub fn set_particle(&mut self, k: usize, p: [f64; 3]) {
        self.v[3 * k..3 * k + 3].copy_from_slice(&p);
    }

    /// `e(V) = ½Σ|v_k|²`.
    pub fn energy(&self) -> f64 {
        0.5 * self.v.iter().map(|x| x * x).sum::<f64>()
    }

    /// `p(V) = Σv_k`.
    pub fn momentum(&self) -> [f64; 3] {
        let mut p = [0.0; 3];
        for c in self.v.chunks_exact(3) {
            for s in 0..3 {
                p[s] += c[s];
            }
        }
        p
    }

    /// Checks the energy (and momentum) constraints at relative tolerance `tol`.
    pub fn is_feasible(&self, spec: &ManifoldSpec, tol: f64) -> bool {
        self.constraint_residual(spec) <= tol
    }

    /// Largest relative constraint violation: energy relative to `Nε`,
    /// momentum components relative to `√N`.
    pub fn constraint_residual(&self, spec: &ManifoldSpec) -> f64 {
        let n = spec.n_particles() as f64;
        let target = n * spec.eps();
        let mut r = (self.energy() - target).abs() / target;
        if spec.mode() == ConservationMode::EnergyMomentum {
            let p = self.momentum();
            let u = spec.u();
            for s in 0..3 {
                r = r.max((p[s] - n * u[s]).abs() / n.sqrt());
            }
        }
        r
    }
}

/// Decomposition of a particle pair into frozen pair momentum `alpha`,
/// frozen relative speed `beta` and the free direction `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairFrame {
    pub k: usize,
    pub l: usize,
    pub alpha: [f64; 3],
    pub beta: f64,
    /// Unit vector `(v_k - v_l)/β`; `None` when `β` is below the cutoff.
    pub n: Option<[f64; 3]>,
}

impl PairFrame {
    /// Rebuilds `(v_k, v_l)`; the direction defaults to zero if undefined.
    pub fn reconstruct(&self) -> ([f64; 3], [f64; 3]) {
        let n = self.n.unwrap_or([0.0; 3]);
        let mut vk = [0.0; 3];
        let mut vl = [0.0; 3];
        for s in 0..3 {
            vk[s] = 0.5 * (self.alpha[s] + self.beta * n[s]);
            vl[s] = 0.5 * (self.alpha[s] - self.beta * n[s]);
        }
        (vk, vl)
    }
}

pub fn pair_frame(v: &VelocityState, k: usize, l: usize, cutoff: f64) -> PairFrame {
    let a = v.particle(k);
    let b = v.particle(l);
    let alpha = [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
    let g = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let beta = norm_sq3(&g).sqrt();
    let n = (beta >= cutoff && beta > 0.0).then(|| [g[0] / beta, g[1] / beta, g[2] / beta]);
    PairFrame { k, l, alpha, beta, n }
}

/// Draws a point from the uniform surface measure on the manifold.
///
/// Standard normals are projected onto the constraint subspace and the
/// centred part is rescaled to the sphere radius; rotation invariance of
/// the Gaussian makes the direction uniform.
pub fn sample_uniform<R: Rng + ?Sized>(spec: &ManifoldSpec, rng: &mut R) -> Result<VelocityState> {
    let mut v: Vec<f64> = (0..spec.len()).map(|_| rng.sample(StandardNormal)).collect();
    if spec.mode() == ConservationMode::EnergyMomentum {
        remove_mean(&mut v);
    }
    let norm_sq: f64 = v.iter().map(|x| x * x).sum();
    if norm_sq == 0.0 {
        return Err(KinError::DegenerateState);
    }
    let scale = (spec.radius_sq() / norm_sq).sqrt();
    let u = spec.u();
    for (i, x) in v.iter_mut().enumerate() {
        *x = *x * scale + u[i % 3];
    }
    Ok(VelocityState { v })
}

/// Projects a nearly feasible state back onto the manifold: momentum is
/// restored by a uniform shift, energy by rescaling the deviations from `u`.
pub fn renormalize(spec: &ManifoldSpec, v: &VelocityState) -> Result<VelocityState> {
    let mut out = v.clone();
    renormalize_in_place(spec, &mut out)?;
    Ok(out)
}

pub fn renormalize_in_place(spec: &ManifoldSpec, state: &mut VelocityState) -> Result<()> {
    let u = spec.u();
    let v = &mut state.v;
    match spec.mode() {
        ConservationMode::EnergyOnly => {
            let norm_sq: f64 = v.iter().map(|x| x * x).sum();
            if norm_sq == 0.0 {
                return Err(KinError::DegenerateState);
            }
            let scale = (spec.radius_sq() / norm_sq).sqrt();
            v.iter_mut().for_each(|x| *x *= scale);
        }
        ConservationMode::EnergyMomentum => {
            remove_mean(v);
            let norm_sq: f64 = v.iter().map(|x| x * x).sum();
            if norm_sq == 0.0 {
                return Err(KinError::DegenerateState);
            }
            let scale = (spec.radius_sq() / norm_sq).sqrt();
            for (i, x) in v.iter_mut().enumerate() {
                *x = *x * scale + u[i % 3];
            }
        }
    }
    Ok(())
}

/// Orthogonal projection of `x` onto the tangent space of the manifold at `v`.
///
/// `C = 1`: `P = I - VV/|V|²`. `C = 4`: `P = I - ww/|w|² - (1/N)Σ_σ e_σ⊗e_σ`
/// with `w = V - U`; the four normals are mutually orthogonal.
pub fn tangent_project_manifold(spec: &ManifoldSpec, v: &VelocityState, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != spec.len() || v.v.len() != spec.len() {
        return Err(KinError::DimensionMismatch { expected: spec.len(), got: x.len() });
    }
    let mut out = x.to_vec();
    project_in_place(spec, &v.v, &mut out)?;
    Ok(out)
}

pub(crate) fn project_in_place(spec: &ManifoldSpec, v: &[f64], x: &mut [f64]) -> Result<()> {
    let u = spec.u();
    let momentum = spec.mode() == ConservationMode::EnergyMomentum;
    if momentum {
        remove_mean(x);
    }
    let mut ww = 0.0;
    let mut wx = 0.0;
    for (i, (&vi, &xi)) in v.iter().zip(x.iter()).enumerate() {
        let wi = if momentum { vi - u[i % 3] } else { vi };
        ww += wi * wi;
        wx += wi * xi;
    }
    if ww == 0.0 {
        return Err(KinError::DegenerateState);
    }
    let c = wx / ww;
    for (i, (&vi, xi)) in v.iter().zip(x.iter_mut()).enumerate() {
        let wi = if momentum { vi - u[i % 3] } else { vi };
        *xi -= c * wi;
    }
    Ok(())
}

/// Applies the tangent projector of `B²_kl`: block `k` receives
/// `½P⊥(x_k - x_l)`, block `l` its negative, all other blocks zero.
pub fn pair_projector_apply(
    v: &VelocityState,
    k: usize,
    l: usize,
    x: &[f64],
    cutoff: f64,
) -> Result<Vec<f64>> {
    if x.len() != v.v.len() {
        return Err(KinError::DimensionMismatch { expected: v.v.len(), got: x.len() });
    }
    let frame = pair_frame(v, k, l, cutoff);
    let n = frame
        .n
        .ok_or(KinError::PairBelowCutoff { k, l, beta: frame.beta })?;
    let d = [
        x[3 * k] - x[3 * l],
        x[3 * k + 1] - x[3 * l + 1],
        x[3 * k + 2] - x[3 * l + 2],
    ];
    let p = perp(&n, &d);
    let mut out = vec![0.0; x.len()];
    for s in 0..3 {
        out[3 * k + s] = 0.5 * p[s];
        out[3 * l + s] = -0.5 * p[s];
    }
    Ok(out)
}

/// `ln|S^D_r|` for the D-dimensional sphere of radius `r` in `R^{D+1}`.
pub fn ln_sphere_area(dim: usize, radius: f64) -> f64 {
    let h = 0.5 * (dim as f64 + 1.0);
    std::f64::consts::LN_2 + h * std::f64::consts::PI.ln() + dim as f64 * radius.ln() - libm::lgamma(h)
}

/// `|S^D_r| = 2π^{(D+1)/2} r^D / Γ((D+1)/2)`, evaluated through log-Γ.
pub fn sphere_area(dim: usize, radius: f64) -> f64 {
    ln_sphere_area(dim, radius).exp()
}

/// `P⊥_n x = x - (n·x)n` for a unit vector `n`.
#[inline]
pub(crate) fn perp(n: &[f64; 3], x: &[f64; 3]) -> [f64; 3] {
    let d = n[0] * x[0] + n[1] * x[1] + n[2] * x[2];
    [x[0] - d * n[0], x[1] - d * n[1], x[2] - d * n[2]]
}

#[inline]
pub(crate) fn norm_sq3(x: &[f64; 3]) -> f64 {
    x[0] * x[0] + x[1] * x[1] + x[2] * x[2]
}

/// Subtracts the per-component particle mean.
pub(crate) fn remove_mean(x: &mut [f64]) {
    let n = (x.len() / 3) as f64;
    let mut m = [0.0; 3];
    for c in x.chunks_exact(3) {
        for s in 0..3 {
            m[s] += c[s];
        }
    }
    for s in 0..3 {
        m[s] /= n;
    }
    for c in x.chunks_exact_mut(3) {
        for s in 0..3 {
            c[s] -= m[s];
        }
    }
}
