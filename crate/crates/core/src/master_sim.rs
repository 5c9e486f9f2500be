//! Time stepping for the two master-equation diffusions.
//!
//! * Sphere diffusion: Brownian motion on the constraint manifold with
//!   generator `Δ_M`, discretised as projected Euler-Maruyama increments
//!   followed by exact projection back onto the manifold.
//! * Pair diffusion: the Balescu-Prigogine process, a superposition of
//!   Brownian motions on the pair submanifolds `B²_kl` with diffusivity
//!   `w_kl = |v_k - v_l|^{2+γ}`. Every pair is visited once per step in a
//!   shuffled order, and each pair move keeps `v_k + v_l` and `|v_k - v_l|`
//!   exactly.
//!
//! [`generator_apply`] and [`laplace_beltrami_apply`] give the exact action
//! of the two generators on quadratic test polynomials; they are the
//! oracles for the weak-consistency checks of the steppers.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{KinError, Result};
use crate::geometry::{
    perp, project_in_place, remove_mean, renormalize_in_place, sample_uniform, ConservationMode,
    ManifoldSpec, VelocityState,
};
use crate::observables::{moment_series_from_values, Observable, ObservableSeries};
use crate::rng::{stream, SimRng, INIT_STEP};

/// Collision-kernel exponent `γ` with the pair-distance cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    gamma: f64,
    cutoff: f64,
}

impl KernelSpec {
    pub fn new(gamma: f64, cutoff: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > -5.0) {
            return Err(KinError::InvalidKernel(format!("gamma must exceed -5, got {gamma}")));
        }
        if !(cutoff.is_finite() && cutoff > 0.0) {
            return Err(KinError::InvalidKernel(format!("cutoff must be positive, got {cutoff}")));
        }
        Ok(Self { gamma, cutoff })
    }

    /// Coulomb case `γ = -3` with the default cutoff for `spec`.
    pub fn coulomb(spec: &ManifoldSpec) -> Self {
        Self { gamma: -3.0, cutoff: spec.default_cutoff() }
    }

    pub fn with_default_cutoff(gamma: f64, spec: &ManifoldSpec) -> Result<Self> {
        Self::new(gamma, spec.default_cutoff())
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    /// `w(β) = β^{2+γ}`; for `γ < -2` the argument is floored at the cutoff
    /// so the diffusivity stays bounded.
    pub fn weight(&self, beta: f64) -> f64 {
        let p = 2.0 + self.gamma;
        if p < 0.0 {
            beta.max(self.cutoff).powf(p)
        } else if p == 0.0 {
            1.0
        } else {
            beta.powf(p)
        }
    }

    /// [`KernelSpec::weight`] from the squared distance, avoiding `powf`
    /// for the common integer exponents.
    #[inline]
    pub fn weight_sq(&self, beta_sq: f64) -> f64 {
        let p = 2.0 + self.gamma;
        let b2 = if p < 0.0 { beta_sq.max(self.cutoff * self.cutoff) } else { beta_sq };
        match p {
            0.0 => 1.0,
            2.0 => b2,
            4.0 => b2 * b2,
            5.0 => b2 * b2 * b2.sqrt(),
            1.0 => b2.sqrt(),
            -1.0 => 1.0 / b2.sqrt(),
            -2.0 => 1.0 / b2,
            _ => b2.powf(0.5 * p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Process {
    SphereDiffusion,
    PairDiffusion { kernel: KernelSpec },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub t_end: f64,
    pub n_replicas: usize,
    pub seed: u64,
    pub process: Process,
    pub record_every: usize,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.dt.is_finite() && self.dt > 0.0) {
            bad.push(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.t_end.is_finite() && self.t_end >= 0.0) {
            bad.push(format!("t_end must be non-negative, got {}", self.t_end));
        }
        if self.n_replicas == 0 {
            bad.push("n_replicas must be at least 1".into());
        }
        if self.record_every == 0 {
            bad.push("record_every must be at least 1".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(KinError::InvalidArgument(bad.join("; ")))
        }
    }

    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    /// Step indices at which observables are recorded: every
    /// `record_every` steps plus the final step. Empty when `t_end = 0`.
    pub fn record_steps(&self) -> Vec<usize> {
        let n = self.n_steps();
        if n == 0 {
            return Vec::new();
        }
        let mut s: Vec<usize> = (0..=n).step_by(self.record_every).collect();
        if *s.last().unwrap() != n {
            s.push(n);
        }
        s
    }
}

/// How replicas are initialised. Non-uniform variants transform a uniform
/// sample and project the result back onto the manifold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialCondition {
    Uniform,
    /// `v_k ← M(v_k - u) + u + shift` for every particle.
    Linear { matrix: [[f64; 3]; 3], shift: [f64; 3] },
    /// Adds `offset` to one particle.
    Tagged { particle: usize, offset: [f64; 3] },
}

impl InitialCondition {
    pub fn sample<R: Rng + ?Sized>(&self, spec: &ManifoldSpec, rng: &mut R) -> Result<VelocityState> {
        let mut v = sample_uniform(spec, rng)?;
        let u = spec.u();
        match *self {
            InitialCondition::Uniform => return Ok(v),
            InitialCondition::Linear { matrix, shift } => {
                for k in 0..spec.n_particles() {
                    let p = v.particle(k);
                    let w = [p[0] - u[0], p[1] - u[1], p[2] - u[2]];
                    let mut q = [0.0; 3];
                    for (a, row) in matrix.iter().enumerate() {
                        q[a] = row[0] * w[0] + row[1] * w[1] + row[2] * w[2] + u[a] + shift[a];
                    }
                    v.set_particle(k, q);
                }
            }
            InitialCondition::Tagged { particle, offset } => {
                if particle >= spec.n_particles() {
                    return Err(KinError::InvalidArgument(format!(
                        "tagged particle {particle} out of range"
                    )));
                }
                let p = v.particle(particle);
                v.set_particle(particle, [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]]);
            }
        }
        renormalize_in_place(spec, &mut v)?;
        Ok(v)
    }
}

/// One time slice of the replica ensemble.
#[derive(Debug, Clone)]
pub struct EnsembleSnapshot {
    pub time: f64,
    pub states: Vec<VelocityState>,
}

// ---------------------------------------------------------------------------
// Sphere diffusion

/// One projected Euler-Maruyama step of Brownian motion with generator `Δ_M`.
pub fn step_sphere_diffusion<R: Rng + ?Sized>(
    spec: &ManifoldSpec,
    v: &VelocityState,
    dt: f64,
    rng: &mut R,
) -> Result<VelocityState> {
    let xi: Vec<f64> = (0..spec.len()).map(|_| rng.sample(StandardNormal)).collect();
    sphere_step_with_noise(spec, v, dt, &xi)
}

/// Sphere step driven by a caller-supplied standard normal vector `xi`.
pub fn sphere_step_with_noise(
    spec: &ManifoldSpec,
    v: &VelocityState,
    dt: f64,
    xi: &[f64],
) -> Result<VelocityState> {
    if xi.len() != spec.len() {
        return Err(KinError::DimensionMismatch { expected: spec.len(), got: xi.len() });
    }
    let mut out = v.clone();
    let mut buf = xi.to_vec();
    sphere_step_in_place(spec, &mut out, dt, &mut buf)?;
    Ok(out)
}

fn sphere_step_in_place(spec: &ManifoldSpec, v: &mut VelocityState, dt: f64, xi: &mut [f64]) -> Result<()> {
    if dt == 0.0 {
        return Ok(());
    }
    project_in_place(spec, v.as_slice(), xi)?;
    let amp = (2.0 * dt).sqrt();
    for (x, d) in v.as_mut_slice().iter_mut().zip(xi.iter()) {
        *x += amp * d;
    }
    renormalize_in_place(spec, v)
}

// ---------------------------------------------------------------------------
// Pair diffusion

/// Unordered pairs `(k, l)`, `k < l`, in lexicographic order.
pub fn pair_list(n: usize) -> Vec<(u32, u32)> {
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for k in 0..n as u32 {
        for l in k + 1..n as u32 {
            out.push((k, l));
        }
    }
    out
}

/// One sweep of the pair-diffusion process over all pairs in random order.
pub fn step_pair_diffusion<R: Rng + ?Sized>(
    spec: &ManifoldSpec,
    v: &VelocityState,
    kernel: &KernelSpec,
    dt: f64,
    rng: &mut R,
) -> Result<VelocityState> {
    let mut out = v.clone();
    let mut scratch = PairScratch::new(spec.n_particles());
    pair_step_in_place(spec, &mut out, kernel, dt, rng, &mut scratch)?;
    Ok(out)
}

/// Pair sweep with an explicit visiting `order` (indices into
/// [`pair_list`]) and three standard normals per visited pair.
pub fn pair_sweep_with_noise(
    spec: &ManifoldSpec,
    v: &VelocityState,
    kernel: &KernelSpec,
    dt: f64,
    order: &[usize],
    noise: &[f64],
) -> Result<VelocityState> {
    let pairs = pair_list(spec.n_particles());
    if order.len() != pairs.len() || noise.len() != 3 * pairs.len() {
        return Err(KinError::InvalidArgument(format!(
            "need {} pair indices and {} normals",
            pairs.len(),
            3 * pairs.len()
        )));
    }
    let mut out = v.clone();
    if dt == 0.0 {
        return Ok(out);
    }
    let n = spec.n_particles();
    for (p, &idx) in order.iter().enumerate() {
        let (k, l) = pairs[idx];
        let eta = [noise[3 * p], noise[3 * p + 1], noise[3 * p + 2]];
        pair_move(out.as_mut_slice(), k as usize, l as usize, n, kernel, dt, eta);
    }
    renormalize_in_place(spec, &mut out)?;
    Ok(out)
}

struct PairScratch {
    pairs: Vec<(u32, u32)>,
    order: Vec<u32>,
}

impl PairScratch {
    fn new(n: usize) -> Self {
        let pairs = pair_list(n);
        let order = (0..pairs.len() as u32).collect();
        Self { pairs, order }
    }
}

fn pair_step_in_place<R: Rng + ?Sized>(
    spec: &ManifoldSpec,
    v: &mut VelocityState,
    kernel: &KernelSpec,
    dt: f64,
    rng: &mut R,
    scratch: &mut PairScratch,
) -> Result<()> {
    if dt == 0.0 {
        return Ok(());
    }
    let n = spec.n_particles();
    scratch.order.shuffle(rng);
    let x = v.as_mut_slice();
    for &idx in &scratch.order {
        let (k, l) = scratch.pairs[idx as usize];
        let eta = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        pair_move(x, k as usize, l as usize, n, kernel, dt, eta);
    }
    renormalize_in_place(spec, v)
}

/// Brownian move on `B²_kl` with generator `a·Δ_B`, `a = 2w/(N-1)`.
///
/// In the relative coordinate `g = v_k - v_l` the projected increment
/// `√(2a dt)·P_B ξ` becomes `2√(a dt)·P⊥η` with `η ~ N(0, I₃)`; `g` is then
/// rescaled to its old length and the pair rebuilt around `v_k + v_l`.
#[inline]
fn pair_move(x: &mut [f64], k: usize, l: usize, n: usize, kernel: &KernelSpec, dt: f64, eta: [f64; 3]) {
    let (ik, il) = (3 * k, 3 * l);
    let alpha = [x[ik] + x[il], x[ik + 1] + x[il + 1], x[ik + 2] + x[il + 2]];
    let g = [x[ik] - x[il], x[ik + 1] - x[il + 1], x[ik + 2] - x[il + 2]];
    let beta_sq = g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
    let beta = beta_sq.sqrt();
    if beta < kernel.cutoff() {
        return;
    }
    let a = 2.0 * kernel.weight_sq(beta_sq) / (n as f64 - 1.0);
    let unit = [g[0] / beta, g[1] / beta, g[2] / beta];
    let d = perp(&unit, &eta);
    let amp = 2.0 * (a * dt).sqrt();
    let mut h = [g[0] + amp * d[0], g[1] + amp * d[1], g[2] + amp * d[2]];
    let hn = (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt();
    let s = beta / hn;
    for c in h.iter_mut() {
        *c *= s;
    }
    for c in 0..3 {
        x[ik + c] = 0.5 * (alpha[c] + h[c]);
        x[il + c] = 0.5 * (alpha[c] - h[c]);
    }
}

// ---------------------------------------------------------------------------
// Generators on quadratic test polynomials

/// Catalog of test functions with closed-form generator action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TestPolynomial {
    /// `v_{k,σ}`.
    Coordinate { k: usize, s: usize },
    /// `v_{k,σ} v_{l,τ}`.
    Product { k: usize, s: usize, l: usize, t: usize },
    /// `m(V) = N`.
    Mass,
    /// `e(V) = ½Σ|v_k|²`.
    Energy,
    /// `p_σ(V) = Σ_k v_{k,σ}`.
    Momentum { s: usize },
    /// `Σ_k v_{k,a} v_{k,b}`.
    SumProduct { a: usize, b: usize },
}

/// `φ(V) = c + l·V + ½VᵀHV` with dense symmetric `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticPoly {
    pub constant: f64,
    pub linear: Vec<f64>,
    pub hessian: Vec<f64>,
    dim: usize,
}

impl QuadraticPoly {
    fn zero(dim: usize) -> Self {
        Self { constant: 0.0, linear: vec![0.0; dim], hessian: vec![0.0; dim * dim], dim }
    }

    fn add_product(&mut self, i: usize, j: usize, c: f64) {
        self.hessian[i * self.dim + j] += c;
        self.hessian[j * self.dim + i] += c;
    }

    pub fn h(&self, i: usize, j: usize) -> f64 {
        self.hessian[i * self.dim + j]
    }

    pub fn eval(&self, v: &[f64]) -> f64 {
        let mut acc = self.constant;
        for i in 0..self.dim {
            acc += self.linear[i] * v[i];
            let row = &self.hessian[i * self.dim..(i + 1) * self.dim];
            let hv: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
            acc += 0.5 * v[i] * hv;
        }
        acc
    }

    pub fn gradient(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| {
                let row = &self.hessian[i * self.dim..(i + 1) * self.dim];
                self.linear[i] + row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }
}

impl TestPolynomial {
    pub fn to_poly(&self, n: usize) -> Result<QuadraticPoly> {
        let dim = 3 * n;
        let mut p = QuadraticPoly::zero(dim);
        let check = |k: usize, s: usize| {
            if k >= n || s >= 3 {
                Err(KinError::InvalidArgument(format!("index ({k}, {s}) out of range")))
            } else {
                Ok(3 * k + s)
            }
        };
        match *self {
            TestPolynomial::Coordinate { k, s } => p.linear[check(k, s)?] = 1.0,
            TestPolynomial::Product { k, s, l, t } => {
                let (i, j) = (check(k, s)?, check(l, t)?);
                p.add_product(i, j, 1.0);
            }
            TestPolynomial::Mass => p.constant = n as f64,
            TestPolynomial::Energy => {
                for i in 0..dim {
                    p.hessian[i * dim + i] = 1.0;
                }
            }
            TestPolynomial::Momentum { s } => {
                for k in 0..n {
                    p.linear[check(k, s)?] = 1.0;
                }
            }
            TestPolynomial::SumProduct { a, b } => {
                for k in 0..n {
                    p.add_product(check(k, a)?, check(k, b)?, 1.0);
                }
            }
        }
        Ok(p)
    }

    pub fn eval(&self, v: &VelocityState) -> Result<f64> {
        Ok(self.to_poly(v.n_particles())?.eval(v.as_slice()))
    }
}

/// Exact value of `-L^(N)φ` at `V` for the pair-diffusion generator
/// `-L^(N) = (1/(N-1)) Σ_{k≠l} w_kl Δ_{B²_kl}`.
///
/// With `D = ∂_{v_k} - ∂_{v_l}` and `g = v_k - v_l`, the pair Laplacian is
/// `Δ_B φ = ½[P⊥_g : DDφ - 4 g·Dφ / |g|²]`; the second term comes from
/// differentiating the projector field (`D·P⊥_g = -4g/|g|²`). Pairs with
/// `|g|` below the cutoff use the capped weight; coincident pairs
/// (`g = 0`) have no defined direction and contribute nothing.
///
/// Mass, energy and momentum are invariants of every pair move (`Δ_B`
/// annihilates functions of `v_k + v_l` and `|v_k - v_l|`), so they return
/// an exact zero.
pub fn generator_apply(v: &VelocityState, kernel: &KernelSpec, phi: &TestPolynomial) -> Result<f64> {
    let n = v.n_particles();
    let poly = phi.to_poly(n)?;
    if matches!(phi, TestPolynomial::Mass | TestPolynomial::Energy | TestPolynomial::Momentum { .. }) {
        return Ok(0.0);
    }
    Ok(generator_apply_poly(v, kernel, &poly))
}

pub fn generator_apply_poly(v: &VelocityState, kernel: &KernelSpec, poly: &QuadraticPoly) -> f64 {
    let n = v.n_particles();
    let x = v.as_slice();
    let grad = poly.gradient(x);
    let mut total = 0.0;
    for k in 0..n {
        for l in k + 1..n {
            let g = [x[3 * k] - x[3 * l], x[3 * k + 1] - x[3 * l + 1], x[3 * k + 2] - x[3 * l + 2]];
            let g2 = g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
            if g2 == 0.0 {
                continue;
            }
            let w = kernel.weight_sq(g2);
            let mut dphi = [0.0; 3];
            for s in 0..3 {
                dphi[s] = grad[3 * k + s] - grad[3 * l + s];
            }
            // P⊥ : DDφ with DDφ = H_kk - H_kl - H_lk + H_ll.
            let mut contr = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    let dd = poly.h(3 * k + a, 3 * k + b) - poly.h(3 * k + a, 3 * l + b)
                        - poly.h(3 * l + a, 3 * k + b)
                        + poly.h(3 * l + a, 3 * l + b);
                    let p = if a == b { 1.0 } else { 0.0 } - g[a] * g[b] / g2;
                    contr += p * dd;
                }
            }
            let radial = (g[0] * dphi[0] + g[1] * dphi[1] + g[2] * dphi[2]) / g2;
            let lap_b = 0.5 * (contr - 4.0 * radial);
            // Both orderings (k,l) and (l,k) give the same Δ_B.
            total += 2.0 * w * lap_b;
        }
    }
    total / (n as f64 - 1.0)
}

/// Exact value of `Δ_M φ` at `V` for the sphere diffusion:
/// `Δ_M φ = tr(P∇²φ) - (D/R²)·w·∇φ`, with `P` the tangent projector,
/// `D` the manifold dimension and `w = V - U`. The second term is the
/// mean-curvature correction for the ambient extension of `φ`.
pub fn laplace_beltrami_apply(spec: &ManifoldSpec, v: &VelocityState, phi: &TestPolynomial) -> Result<f64> {
    let n = spec.n_particles();
    let poly = phi.to_poly(n)?;
    let dim = spec.len();
    let x = v.as_slice();
    let u = spec.u();
    let momentum = spec.mode() == ConservationMode::EnergyMomentum;
    let w: Vec<f64> = (0..dim).map(|i| if momentum { x[i] - u[i % 3] } else { x[i] }).collect();
    let ww: f64 = w.iter().map(|a| a * a).sum();
    let mut tr = (0..dim).map(|i| poly.h(i, i)).sum::<f64>();
    if momentum {
        for s in 0..3 {
            let mut acc = 0.0;
            for k in 0..n {
                for l in 0..n {
                    acc += poly.h(3 * k + s, 3 * l + s);
                }
            }
            tr -= acc / n as f64;
        }
    }
    let mut whw = 0.0;
    for i in 0..dim {
        for j in 0..dim {
            whw += w[i] * poly.h(i, j) * w[j];
        }
    }
    tr -= whw / ww;
    let grad = poly.gradient(x);
    let wg: f64 = w.iter().zip(&grad).map(|(a, b)| a * b).sum();
    Ok(tr - spec.dim() as f64 / ww * wg)
}

/// Maps a state on the standard manifold (`u = 0`, `ε = 1`) to `spec`:
/// `V = U + √ε₀·Ṽ`. Under this map the pair-diffusion generator picks up
/// the time factor [`standard_time_factor`].
pub fn from_standard(spec: &ManifoldSpec, standard: &VelocityState) -> Result<VelocityState> {
    let s = spec.eps0().sqrt();
    let u = spec.u();
    let v = standard.as_slice().iter().enumerate().map(|(i, x)| u[i % 3] + s * x).collect();
    VelocityState::from_vec(spec, v)
}

/// Inverse of [`from_standard`].
pub fn to_standard(spec: &ManifoldSpec, v: &VelocityState) -> Result<(ManifoldSpec, VelocityState)> {
    let std_spec = ManifoldSpec::new(spec.n_particles(), spec.mode(), [0.0; 3], 1.0)?;
    let s = spec.eps0().sqrt();
    let u = spec.u();
    let out = v.as_slice().iter().enumerate().map(|(i, x)| (x - u[i % 3]) / s).collect();
    Ok((std_spec, VelocityState::from_vec(&std_spec, out)?))
}

/// `-L` on `spec` equals `ε₀^{γ/2}` times the standard-case generator.
pub fn standard_time_factor(spec: &ManifoldSpec, kernel: &KernelSpec) -> f64 {
    spec.eps0().powf(0.5 * kernel.gamma())
}

// ---------------------------------------------------------------------------
// Ensembles

struct Replica {
    state: VelocityState,
    noise: Vec<f64>,
    pairs: Option<PairScratch>,
}

fn advance(
    spec: &ManifoldSpec,
    config: &SimConfig,
    r: usize,
    rep: &mut Replica,
    from: usize,
    to: usize,
) -> Result<()> {
    for s in from..to {
        let mut rng: SimRng = stream(config.seed, r as u64, s as u64);
        match config.process {
            Process::SphereDiffusion => {
                for x in rep.noise.iter_mut() {
                    *x = rng.sample(StandardNormal);
                }
                sphere_step_in_place(spec, &mut rep.state, config.dt, &mut rep.noise)?;
            }
            Process::PairDiffusion { kernel } => {
                let scratch = rep.pairs.as_mut().expect("pair scratch");
                pair_step_in_place(spec, &mut rep.state, &kernel, config.dt, &mut rng, scratch)?;
            }
        }
    }
    Ok(())
}

/// Evolves `n_replicas` independent replicas and calls `on_record` at each
/// recording step. Replica `r` at step `s` draws from the stream
/// `(seed, r, s)`, so results do not depend on the thread count.
pub fn evolve_ensemble<F>(
    spec: &ManifoldSpec,
    config: &SimConfig,
    init: &InitialCondition,
    mut on_record: F,
) -> Result<()>
where
    F: FnMut(&EnsembleSnapshot) -> Result<()>,
{
    config.validate()?;
    let records = config.record_steps();
    if records.is_empty() {
        return Ok(());
    }
    let mut replicas: Vec<Replica> = (0..config.n_replicas)
        .map(|r| {
            let mut rng = stream(config.seed, r as u64, INIT_STEP);
            let state = init.sample(spec, &mut rng)?;
            let pairs = matches!(config.process, Process::PairDiffusion { .. })
                .then(|| PairScratch::new(spec.n_particles()));
            Ok(Replica { state, noise: vec![0.0; spec.len()], pairs })
        })
        .collect::<Result<_>>()?;

    let mut current = 0;
    for &target in &records {
        if target > current {
            let (from, to) = (current, target);
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                replicas
                    .par_iter_mut()
                    .enumerate()
                    .try_for_each(|(r, rep)| advance(spec, config, r, rep, from, to))?;
            }
            #[cfg(not(feature = "parallel"))]
            for (r, rep) in replicas.iter_mut().enumerate() {
                advance(spec, config, r, rep, from, to)?;
            }
            current = target;
        }
        let snapshot = EnsembleSnapshot {
            time: target as f64 * config.dt,
            states: replicas.iter().map(|r| r.state.clone()).collect(),
        };
        on_record(&snapshot)?;
    }
    Ok(())
}

/// Runs the ensemble and returns one mean ± standard-error series per
/// observable.
pub fn run_ensemble(
    spec: &ManifoldSpec,
    config: &SimConfig,
    init: &InitialCondition,
    observables: &[Observable],
) -> Result<Vec<ObservableSeries>> {
    let mut values: Vec<Vec<(f64, Vec<f64>)>> = vec![Vec::new(); observables.len()];
    evolve_ensemble(spec, config, init, |snap| {
        for (obs, out) in observables.iter().zip(values.iter_mut()) {
            let vals = snap
                .states
                .iter()
                .map(|s| obs.eval(spec, s))
                .collect::<Result<Vec<f64>>>()?;
            out.push((snap.time, vals));
        }
        Ok(())
    })?;
    Ok(observables
        .iter()
        .zip(values)
        .map(|(obs, recs)| moment_series_from_values(&obs.name(), config.n_replicas, &recs))
        .collect())
}

/// Centered Gaussian noise that sums to zero per component; used by
/// tests that need momentum-free perturbations.
pub fn momentum_free_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut x: Vec<f64> = (0..3 * n).map(|_| rng.sample(StandardNormal)).collect();
    remove_mean(&mut x);
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::eigenvalue_scaled;

    fn state(spec: &ManifoldSpec, seed: u64) -> VelocityState {
        sample_uniform(spec, &mut stream(seed, 0, 0)).unwrap()
    }

    #[test]
    fn kernel_validation_and_weight() {
        assert!(KernelSpec::new(-5.0, 1e-8).is_err());
        assert!(KernelSpec::new(-3.0, 0.0).is_err());
        let k = KernelSpec::new(-3.0, 1e-3).unwrap();
        assert_eq!(k.weight(2.0), 0.5);
        assert_eq!(k.weight(1e-6), 1e3);
        let k0 = KernelSpec::new(0.0, 1e-3).unwrap();
        assert_eq!(k0.weight(3.0), 9.0);
        for gamma in [-3.0, -2.5, -2.0, -1.0, 0.0, 0.7, 2.0, 3.0] {
            let k = KernelSpec::new(gamma, 1e-3).unwrap();
            for b in [1e-5, 0.3, 1.0, 2.7] {
                let (x, y) = (k.weight(b), k.weight_sq(b * b));
                assert!((x - y).abs() <= 1e-12 * x, "γ={gamma} β={b}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn zero_dt_is_identity() {
        let spec = ManifoldSpec::energy_momentum(5, [0.1, 0.0, 0.0], 1.0).unwrap();
        let v = state(&spec, 1);
        let mut rng = stream(0, 0, 1);
        assert_eq!(step_sphere_diffusion(&spec, &v, 0.0, &mut rng).unwrap(), v);
        let k = KernelSpec::coulomb(&spec);
        assert_eq!(step_pair_diffusion(&spec, &v, &k, 0.0, &mut rng).unwrap(), v);
    }

    #[test]
    fn steps_conserve_constraints() {
        for spec in [
            ManifoldSpec::energy_only(7, 1.3).unwrap(),
            ManifoldSpec::energy_momentum(7, [0.3, -0.1, 0.2], 1.1).unwrap(),
        ] {
            let mut v = state(&spec, 2);
            let mut rng = stream(1, 0, 0);
            for _ in 0..50 {
                v = step_sphere_diffusion(&spec, &v, 0.01, &mut rng).unwrap();
                assert!(v.constraint_residual(&spec) <= 1e-12);
            }
        }
        let spec = ManifoldSpec::energy_momentum(6, [0.3, -0.1, 0.2], 1.1).unwrap();
        let k = KernelSpec::coulomb(&spec);
        let mut v = state(&spec, 3);
        let mut rng = stream(2, 0, 0);
        for _ in 0..50 {
            v = step_pair_diffusion(&spec, &v, &k, 0.01, &mut rng).unwrap();
            assert!(v.constraint_residual(&spec) <= 1e-12);
        }
    }

    #[test]
    fn pair_move_keeps_pair_invariants() {
        let spec = ManifoldSpec::energy_momentum(4, [0.0; 3], 1.0).unwrap();
        let v = state(&spec, 4);
        let k = KernelSpec::coulomb(&spec);
        let mut x = v.as_slice().to_vec();
        let before = crate::geometry::pair_frame(&v, 0, 2, 0.0);
        pair_move(&mut x, 0, 2, 4, &k, 0.05, [0.7, -1.2, 0.4]);
        let after = crate::geometry::pair_frame(&VelocityState::from_raw(x.clone()), 0, 2, 0.0);
        for s in 0..3 {
            assert!((before.alpha[s] - after.alpha[s]).abs() < 1e-15);
        }
        assert!((before.beta - after.beta).abs() < 1e-14);
        assert_ne!(before.n, after.n);
        assert_eq!(&x[3..6], &v.as_slice()[3..6]);
    }

    #[test]
    fn generator_annihilates_conserved_quantities() {
        let spec = ManifoldSpec::energy_momentum(6, [0.2, 0.1, -0.4], 1.5).unwrap();
        let v = state(&spec, 5);
        for gamma in [-3.0, -2.0, 0.0, 3.0] {
            let k = KernelSpec::with_default_cutoff(gamma, &spec).unwrap();
            assert_eq!(generator_apply(&v, &k, &TestPolynomial::Mass).unwrap(), 0.0);
            for s in 0..3 {
                assert_eq!(generator_apply(&v, &k, &TestPolynomial::Momentum { s }).unwrap(), 0.0);
            }
            assert_eq!(generator_apply(&v, &k, &TestPolynomial::Energy).unwrap(), 0.0);
            let e = generator_apply_poly(&v, &k, &TestPolynomial::Energy.to_poly(6).unwrap());
            assert!(e.abs() < 1e-12, "{e}");
            let p = generator_apply_poly(&v, &k, &TestPolynomial::Momentum { s: 1 }.to_poly(6).unwrap());
            assert!(p.abs() < 1e-12, "{p}");
        }
    }

    #[test]
    fn generator_two_particle_closed_form() {
        // N = 2, γ = -3, φ = v_11: -Lφ = -4 (v_11 - v_21)/|v_1 - v_2|³.
        let spec = ManifoldSpec::energy_only(2, 1.0).unwrap();
        let k = KernelSpec::coulomb(&spec);
        for seed in 0..10 {
            let v = state(&spec, 10 + seed);
            let (a, b) = (v.particle(0), v.particle(1));
            let g = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
            let r = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            let expect = -4.0 * g[0] / r.powi(3);
            let got = generator_apply(&v, &k, &TestPolynomial::Coordinate { k: 0, s: 0 }).unwrap();
            assert!((got - expect).abs() < 1e-13 * expect.abs().max(1.0));
        }
    }

    /// Central finite-difference divergence of `w(V)·P_B(V)∇φ(V)` summed
    /// over pairs; independent of the symbolic route.
    fn generator_fd(v: &VelocityState, kernel: &KernelSpec, phi: &TestPolynomial) -> f64 {
        let n = v.n_particles();
        let poly = phi.to_poly(n).unwrap();
        let h = 1e-5;
        let field = |x: &[f64], k: usize, l: usize| -> Vec<f64> {
            let st = VelocityState::from_raw(x.to_vec());
            let grad = poly.gradient(x);
            let f = crate::geometry::pair_frame(&st, k, l, 0.0);
            let w = kernel.weight(f.beta);
            crate::geometry::pair_projector_apply(&st, k, l, &grad, 0.0)
                .unwrap()
                .into_iter()
                .map(|c| w * c)
                .collect()
        };
        let mut total = 0.0;
        for k in 0..n {
            for l in k + 1..n {
                for i in 0..3 * n {
                    let mut xp = v.as_slice().to_vec();
                    let mut xm = xp.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    total += 2.0 * (field(&xp, k, l)[i] - field(&xm, k, l)[i]) / (2.0 * h);
                }
            }
        }
        total / (n as f64 - 1.0)
    }

    #[test]
    fn generator_matches_finite_differences() {
        let spec = ManifoldSpec::energy_momentum(4, [0.0; 3], 1.0).unwrap();
        let catalog = [
            TestPolynomial::Coordinate { k: 0, s: 0 },
            TestPolynomial::Product { k: 0, s: 0, l: 1, t: 1 },
            TestPolynomial::Product { k: 2, s: 1, l: 2, t: 1 },
            TestPolynomial::SumProduct { a: 0, b: 2 },
        ];
        for gamma in [-3.0, 0.0, 1.5] {
            let k = KernelSpec::with_default_cutoff(gamma, &spec).unwrap();
            for seed in 0..3 {
                let v = state(&spec, 20 + seed);
                for phi in &catalog {
                    let exact = generator_apply(&v, &k, phi).unwrap();
                    let fd = generator_fd(&v, &k, phi);
                    assert!(
                        (exact - fd).abs() < 1e-5 * exact.abs().max(1.0),
                        "{phi:?} γ={gamma}: {exact} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn maxwell_molecule_sum_product_is_eigenfunction() {
        // For γ = 0 and u = 0, Σ_k v_k1 v_k2 satisfies -LΦ = -12N/(N-1)·Φ.
        for n in [3, 5, 8] {
            let spec = ManifoldSpec::energy_momentum(n, [0.0; 3], 1.0).unwrap();
            let k = KernelSpec::new(0.0, 1e-8).unwrap();
            let phi = TestPolynomial::SumProduct { a: 0, b: 1 };
            let v = state(&spec, 30 + n as u64);
            let lhs = generator_apply(&v, &k, &phi).unwrap();
            let rhs = -12.0 * n as f64 / (n as f64 - 1.0) * phi.eval(&v).unwrap();
            assert!((lhs - rhs).abs() < 1e-11 * rhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn laplace_beltrami_on_harmonics() {
        let spec = ManifoldSpec::energy_only(5, 1.3).unwrap();
        let v = state(&spec, 40);
        let phi = TestPolynomial::Momentum { s: 0 };
        let got = laplace_beltrami_apply(&spec, &v, &phi).unwrap();
        let expect = -eigenvalue_scaled(&spec, 1) * phi.eval(&v).unwrap();
        assert!((got - expect).abs() < 1e-12);

        let spec4 = ManifoldSpec::energy_momentum(6, [0.0; 3], 0.8).unwrap();
        let v = state(&spec4, 41);
        for phi in [TestPolynomial::SumProduct { a: 0, b: 1 }, TestPolynomial::Product { k: 0, s: 1, l: 0, t: 2 }] {
            let got = laplace_beltrami_apply(&spec4, &v, &phi).unwrap();
            let expect = -eigenvalue_scaled(&spec4, 2) * phi.eval(&v).unwrap();
            assert!((got - expect).abs() < 1e-12, "{phi:?}");
        }
        assert!(laplace_beltrami_apply(&spec4, &v, &TestPolynomial::Energy).unwrap().abs() < 1e-12);
    }

    #[test]
    fn standard_transformation_uses_square_root() {
        let spec = ManifoldSpec::energy_momentum(4, [0.5, -0.3, 0.2], 2.7).unwrap();
        let std_spec = ManifoldSpec::energy_momentum(4, [0.0; 3], 1.0).unwrap();
        let vt = state(&std_spec, 50);
        let v = from_standard(&spec, &vt).unwrap();
        assert!(v.is_feasible(&spec, 1e-12));
        let (_, back) = to_standard(&spec, &v).unwrap();
        for (a, b) in back.as_slice().iter().zip(vt.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
        let kernel = KernelSpec::new(-3.0, 1e-12).unwrap();
        let phi = TestPolynomial::Coordinate { k: 1, s: 2 };
        let s = spec.eps0().sqrt();
        let scaled = generator_apply(&v, &kernel, &phi).unwrap();
        let base = generator_apply(&vt, &kernel, &phi).unwrap();
        // φ(V) = u + s·φ(Ṽ), so -Lφ(V) = s · ε₀^{γ/2} · (-Lφ)(Ṽ).
        let expect = s * standard_time_factor(&spec, &kernel) * base;
        assert!((scaled - expect).abs() < 1e-12 * expect.abs());
        // Scaling by ε₀ instead of √ε₀ does not land on the manifold.
        let wrong: Vec<f64> = vt.as_slice().iter().enumerate().map(|(i, x)| spec.u()[i % 3] + spec.eps0() * x).collect();
        assert!(!VelocityState::from_vec(&spec, wrong).unwrap().is_feasible(&spec, 1e-6));
    }

    #[test]
    fn exchangeability_with_permuted_noise() {
        let spec = ManifoldSpec::energy_momentum(5, [0.0; 3], 1.0).unwrap();
        let v = state(&spec, 60);
        let perm = [3usize, 0, 4, 1, 2];
        let permute = |x: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; x.len()];
            for (new, &old) in perm.iter().enumerate() {
                out[3 * new..3 * new + 3].copy_from_slice(&x[3 * old..3 * old + 3]);
            }
            out
        };
        let mut rng = stream(61, 0, 0);
        let xi: Vec<f64> = (0..15).map(|_| rng.sample(StandardNormal)).collect();
        let a = sphere_step_with_noise(&spec, &v, 0.01, &xi).unwrap();
        let vp = VelocityState::from_vec(&spec, permute(v.as_slice())).unwrap();
        let b = sphere_step_with_noise(&spec, &vp, 0.01, &permute(&xi)).unwrap();
        for (x, y) in permute(a.as_slice()).iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }

        // Pair sweep: pair (k,l) in the original labelling corresponds to
        // (inv[k], inv[l]) after relabelling.
        let kernel = KernelSpec::coulomb(&spec);
        let pairs = pair_list(5);
        let order: Vec<usize> = (0..pairs.len()).rev().collect();
        let noise: Vec<f64> = (0..3 * pairs.len()).map(|_| rng.sample(StandardNormal)).collect();
        let a = pair_sweep_with_noise(&spec, &v, &kernel, 0.01, &order, &noise).unwrap();
        let mut inv = [0usize; 5];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut order_p = Vec::new();
        let mut noise_p = Vec::new();
        for (p, &idx) in order.iter().enumerate() {
            let (k, l) = pairs[idx];
            let (nk, nl) = (inv[k as usize], inv[l as usize]);
            let (lo, hi, sign) = if nk < nl { (nk, nl, 1.0) } else { (nl, nk, -1.0) };
            order_p.push(pairs.iter().position(|&q| q == (lo as u32, hi as u32)).unwrap());
            // Swapping the roles of k and l flips g; flipping η keeps the move identical.
            noise_p.extend((0..3).map(|c| sign * noise[3 * p + c]));
        }
        let b = pair_sweep_with_noise(&spec, &vp, &kernel, 0.01, &order_p, &noise_p).unwrap();
        for (x, y) in permute(a.as_slice()).iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sphere_weak_consistency_against_laplace_beltrami() {
        let spec = ManifoldSpec::energy_momentum(4, [0.3, 0.0, -0.2], 1.2).unwrap();
        let v = state(&spec, 70);
        let dt = 1e-4;
        let samples = 100_000;
        let catalog = [TestPolynomial::Coordinate { k: 0, s: 0 }, TestPolynomial::Product { k: 0, s: 0, l: 1, t: 1 }];
        let mut rng = stream(71, 0, 0);
        let mut acc = vec![0.0; catalog.len()];
        for _ in 0..samples / 2 {
            let xi: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
            let neg: Vec<f64> = xi.iter().map(|x| -x).collect();
            let a = sphere_step_with_noise(&spec, &v, dt, &xi).unwrap();
            let b = sphere_step_with_noise(&spec, &v, dt, &neg).unwrap();
            for (i, phi) in catalog.iter().enumerate() {
                let p0 = phi.eval(&v).unwrap();
                acc[i] += (phi.eval(&a).unwrap() - p0) + (phi.eval(&b).unwrap() - p0);
            }
        }
        for (i, phi) in catalog.iter().enumerate() {
            let drift = acc[i] / samples as f64 / dt;
            let exact = laplace_beltrami_apply(&spec, &v, phi).unwrap();
            assert!((drift - exact).abs() < 0.05 * exact.abs(), "{phi:?}: {drift} vs {exact}");
        }
    }

    #[test]
    fn record_steps_layout() {
        let mut c = SimConfig {
            dt: 0.1,
            t_end: 0.1,
            n_replicas: 1,
            seed: 0,
            process: Process::SphereDiffusion,
            record_every: 1,
        };
        assert_eq!(c.record_steps(), vec![0, 1]);
        c.t_end = 0.0;
        assert!(c.record_steps().is_empty());
        c.t_end = 1.0;
        c.record_every = 3;
        assert_eq!(c.record_steps(), vec![0, 3, 6, 9, 10]);
    }
}
