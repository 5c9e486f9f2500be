//! Closed-form limit objects: Maxwellians, stationary finite-N marginals,
//! relative entropy, and the moment flows of the linear Fokker-Planck and
//! Maxwell-molecule Landau equations.

use serde::{Deserialize, Serialize};

use crate::error::{KinError, Result};
use crate::geometry::{ln_sphere_area, ConservationMode, ManifoldSpec};
use crate::master_sim::KernelSpec;
use crate::observables::{Grid, MarginalHistogram};
use crate::quad;

pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitParams {
    pub u: [f64; 3],
    pub eps0: f64,
}

impl LimitParams {
    pub fn new(u: [f64; 3], eps0: f64) -> Result<Self> {
        if !(eps0.is_finite() && eps0 > 0.0) {
            return Err(KinError::InvalidArgument(format!("eps0 must be positive, got {eps0}")));
        }
        Ok(Self { u, eps0 })
    }

    pub fn from_spec(spec: &ManifoldSpec) -> Self {
        Self { u: spec.u(), eps0: spec.eps0() }
    }

    /// Per-axis standard deviation of the Maxwellian, `√(2ε₀/3)`.
    pub fn sigma(&self) -> f64 {
        (2.0 * self.eps0 / 3.0).sqrt()
    }

    /// Cubic grid over `[u - 5σ, u + 5σ]` on every axis.
    pub fn entropy_grid(&self, bins: usize) -> Result<[Grid; 3]> {
        let s = 5.0 * self.sigma();
        Ok([
            Grid::new(self.u[0] - s, self.u[0] + s, bins)?,
            Grid::new(self.u[1] - s, self.u[1] + s, bins)?,
            Grid::new(self.u[2] - s, self.u[2] + s, bins)?,
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub mean: [f64; 3],
    /// `∫ v⊗v f`.
    pub second: Mat3,
}

impl MomentState {
    pub fn covariance(&self) -> Mat3 {
        let mut c = self.second;
        for a in 0..3 {
            for b in 0..3 {
                c[a][b] -= self.mean[a] * self.mean[b];
            }
        }
        c
    }

    /// `½ tr M₂`.
    pub fn energy(&self) -> f64 {
        0.5 * (self.second[0][0] + self.second[1][1] + self.second[2][2])
    }
}

/// `(3/(4πε₀))^{3/2} exp(-3|v-u|²/(4ε₀))`.
pub fn maxwellian_eval(p: &LimitParams, v: [f64; 3]) -> f64 {
    let r2: f64 = (0..3).map(|s| (v[s] - p.u[s]).powi(2)).sum();
    (3.0 / (4.0 * std::f64::consts::PI * p.eps0)).powf(1.5) * (-0.75 * r2 / p.eps0).exp()
}

/// Mass of the Maxwellian in the box `[lo, hi]`, one erf factor per axis.
pub fn maxwellian_box_mass(p: &LimitParams, lo: [f64; 3], hi: [f64; 3]) -> f64 {
    let s = p.sigma() * std::f64::consts::SQRT_2;
    (0..3)
        .map(|a| 0.5 * (libm::erf((hi[a] - p.u[a]) / s) - libm::erf((lo[a] - p.u[a]) / s)))
        .product()
}

/// `n`-velocity marginal of the uniform distribution on the energy sphere
/// `S^{3N-1}` of radius² `2Nε`:
///
/// `(|S^{3(N-n)-1}|/|S^{3N-1}|)·(2Nε)^{-3n/2}·(1 - Σ|v_k|²/(2Nε))^{(3(N-n)-2)/2}`,
///
/// and zero outside the ball. The exponent follows from the coarea formula:
/// the fibre over `(v_1..v_n)` is a `(3(N-n)-1)`-sphere of radius `ρ`, and
/// its area `∝ ρ^{3(N-n)-1}` times the slope factor `R/ρ` gives `ρ^{3(N-n)-2}`.
pub fn stationary_marginal_eval(spec: &ManifoldSpec, vs: &[[f64; 3]]) -> Result<f64> {
    if spec.mode() != ConservationMode::EnergyOnly {
        return Err(KinError::InvalidSpec("stationary marginal is implemented for the energy sphere".into()));
    }
    let n = vs.len();
    let big_n = spec.n_particles();
    if n == 0 || n >= big_n {
        return Err(KinError::InvalidArgument(format!("marginal order must be in 1..{big_n}, got {n}")));
    }
    let r2 = spec.radius_sq();
    let s: f64 = vs.iter().flat_map(|v| v.iter()).map(|x| x * x).sum();
    let x = 1.0 - s / r2;
    if x <= 0.0 {
        return Ok(0.0);
    }
    let m = 3 * (big_n - n);
    let ln_pref = ln_sphere_area(m - 1, 1.0) - ln_sphere_area(3 * big_n - 1, 1.0) - 1.5 * n as f64 * r2.ln();
    Ok((ln_pref + 0.5 * (m as f64 - 2.0) * x.ln()).exp())
}

/// CDF of `|v_1|` under the one-particle stationary marginal, by quadrature
/// of `4πr² F^{(1|N)}(r)`.
pub fn stationary_radial_cdf(spec: &ManifoldSpec, r: f64) -> Result<f64> {
    let rmax = spec.radius_sq().sqrt();
    let r = r.clamp(0.0, rmax);
    let mut err = None;
    let v = quad::integrate(
        |x| match stationary_marginal_eval(spec, &[[x, 0.0, 0.0]]) {
            Ok(f) => 4.0 * std::f64::consts::PI * x * x * f,
            Err(e) => {
                err = Some(e);
                0.0
            }
        },
        0.0,
        r,
        64,
        16,
    );
    match err {
        Some(e) => Err(e),
        None => Ok(v.min(1.0)),
    }
}

/// Boltzmann relative entropy `S(f|f_M) = -Σ_bins p ln(p/q)` of a
/// one-particle histogram, with `p` the bin mass of `f` and `q` the exact
/// Maxwellian mass of the same bin. `S ≤ 0` with equality iff `p = q`.
pub fn relative_entropy(hist: &MarginalHistogram, p: &LimitParams) -> Result<f64> {
    if hist.order() != 1 {
        return Err(KinError::InvalidArgument("relative entropy needs a one-particle histogram".into()));
    }
    if hist.total_samples() == 0 {
        return Err(KinError::Empty("histogram".into()));
    }
    let grids = hist.grids();
    let mut s = 0.0;
    for (cell, mass) in hist.iter_cells() {
        if mass <= 0.0 {
            continue;
        }
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            let (l, h) = grids[a].bin_edges(cell[a]);
            lo[a] = l;
            hi[a] = h;
        }
        let q = maxwellian_box_mass(p, lo, hi);
        if q <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        s -= mass * (mass / q).ln();
    }
    Ok(s)
}

/// Moments of the linear Fokker-Planck flow
/// `∂_t f = ∂·(∂f + κ(v-u)f)`, `κ = 3/(2ε₀)`.
///
/// Testing against `v` and `v⊗v` and integrating by parts gives
/// `dm/dt = -κ(m - u)` and `dC/dt = 2I - 2κC` for the covariance
/// `C = M₂ - m⊗m`, so the mean relaxes at rate `κ` and `C` at rate `2κ`
/// towards `(2ε₀/3)I`.
pub fn fpe_moment_flow(p: &LimitParams, m0: [f64; 3], second0: Mat3, t: f64) -> Result<MomentState> {
    if !(t >= 0.0) {
        return Err(KinError::InvalidArgument(format!("time must be non-negative, got {t}")));
    }
    let kappa = 1.5 / p.eps0;
    let e1 = (-kappa * t).exp();
    let e2 = e1 * e1;
    let c_inf = 1.0 / kappa;
    let init = MomentState { mean: m0, second: second0 };
    let c0 = init.covariance();
    let mut mean = [0.0; 3];
    for a in 0..3 {
        mean[a] = p.u[a] + (m0[a] - p.u[a]) * e1;
    }
    let mut second = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            let iso = if a == b { c_inf } else { 0.0 };
            second[a][b] = iso + (c0[a][b] - iso) * e2 + mean[a] * mean[b];
        }
    }
    Ok(MomentState { mean, second })
}

/// Moments of the Landau equation with the Maxwell-molecule kernel
/// `Q(z) = |z|² P⊥_z` (`γ = 0`).
///
/// For `φ(v) = v_a v_b` the weak form
/// `d/dt ∫φf = ½∬ ff_* (∂_v - ∂_w)·[Q(v-w)(∇φ(v) - ∇φ(w))]` reduces with
/// `∇φ(v) - ∇φ(w) = Bz`, `B = e_a e_bᵀ + e_b e_aᵀ` to
/// `∬ ff_* (|z|² tr B - 3 zᵀBz)`. Since `E[z⊗z] = 2C`:
///
/// `dC/dt = 4 tr(C) I - 12 C`, `dm/dt = 0`.
///
/// The trace is conserved and the traceless part decays at rate 12.
pub fn landau_moment_flow(kernel: &KernelSpec, m0: [f64; 3], second0: Mat3, t: f64) -> Result<MomentState> {
    if kernel.gamma() != 0.0 {
        return Err(KinError::InvalidKernel(format!(
            "second moments close only for gamma = 0, got {}",
            kernel.gamma()
        )));
    }
    if !(t >= 0.0) {
        return Err(KinError::InvalidArgument(format!("time must be non-negative, got {t}")));
    }
    let init = MomentState { mean: m0, second: second0 };
    let c0 = init.covariance();
    let tr = c0[0][0] + c0[1][1] + c0[2][2];
    let decay = (-LANDAU_MAXWELL_ANISOTROPY_RATE * t).exp();
    let mut second = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            let iso = if a == b { tr / 3.0 } else { 0.0 };
            second[a][b] = iso + (c0[a][b] - iso) * decay + m0[a] * m0[b];
        }
    }
    Ok(MomentState { mean: m0, second })
}

pub const LANDAU_MAXWELL_ANISOTROPY_RATE: f64 = 12.0;

/// One-particle moments with exactly exponential evolution under the
/// sphere diffusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MarginalMoment {
    /// `∫ v F^{(1|N)}`, the ensemble mean of a single particle.
    Mean { s: usize },
    /// `∫ (v-u)_a (v-u)_b F^{(1|N)}`, `a ≠ b`.
    Cross { a: usize, b: usize },
    /// `∫ ((v-u)_a² - (v-u)_b²) F^{(1|N)}`.
    DiagDiff { a: usize, b: usize },
    /// `∫ (v-u)_1 (v-u)_2 (v-u)_3 F^{(1|N)}`.
    Triple,
    /// `∫ ½|v|² F^{(1|N)}`.
    Energy,
}

impl MarginalMoment {
    /// Degree of the harmonic polynomial, or `None` for the energy.
    pub fn degree(&self) -> Option<u32> {
        match self {
            MarginalMoment::Mean { .. } => Some(1),
            MarginalMoment::Cross { .. } | MarginalMoment::DiagDiff { .. } => Some(2),
            MarginalMoment::Triple => Some(3),
            MarginalMoment::Energy => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalRate {
    pub moment: MarginalMoment,
    /// Exact decay rate at this `N`; zero for stationary moments.
    pub rate: f64,
    /// `N → ∞` rate of the limiting Fokker-Planck equation.
    pub limit_rate: f64,
}

/// Exact decay rates of low-order one-particle moments.
///
/// For a harmonic polynomial `p` of degree `j` in `w_1 = v_1 - u` alone,
/// the Laplace-Beltrami operator
/// `Δ_M p = tr(P∇²p) - (D/R²) w·∇p` simplifies: `tr ∇²p = Δp = 0`, the
/// momentum normals give `Σ_σ ∂²p/∂v_{1σ}² = 0`, Euler's identity gives
/// `wᵀ∇²p w = j(j-1)p` and `w·∇p = jp`, and `|w|² = R²`. Hence
/// `Δ_M p = -(j(j-1) + Dj)/R²·p`, and since `∂_t ∫pF = ∫pΔ_M F` the
/// moment decays at that rate. The same computation in the limit uses
/// the Ornstein-Uhlenbeck generator `Δ - κw·∇`, whose harmonic
/// eigenvalues are `κj`.
pub fn finite_n_marginal_rates(spec: &ManifoldSpec) -> Vec<MarginalRate> {
    let dim = spec.dim() as f64;
    let r2 = spec.radius_sq();
    let kappa = 1.5 / spec.eps0();
    let catalog = [
        MarginalMoment::Mean { s: 0 },
        MarginalMoment::Cross { a: 0, b: 1 },
        MarginalMoment::DiagDiff { a: 0, b: 1 },
        MarginalMoment::Triple,
        MarginalMoment::Energy,
    ];
    catalog
        .into_iter()
        .map(|moment| {
            let frozen = matches!(moment, MarginalMoment::Energy)
                || (matches!(moment, MarginalMoment::Mean { .. }) && spec.mode() == ConservationMode::EnergyMomentum);
            let j = moment.degree().unwrap_or(0) as f64;
            let (rate, limit_rate) = if frozen {
                (0.0, 0.0)
            } else {
                ((j * (j - 1.0) + dim * j) / r2, kappa * j)
            };
            MarginalRate { moment, rate, limit_rate }
        })
        .collect()
}

/// Exact rate for the mean of a single tagged particle with momentum
/// conservation: `v_1 - u` is a degree-1 harmonic on the manifold even
/// though the symmetric mean is frozen.
pub fn tagged_mean_rate(spec: &ManifoldSpec) -> f64 {
    spec.dim() as f64 / spec.radius_sq()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{eigenvalue_scaled, limit_eigenvalue};
    use std::f64::consts::PI;

    #[test]
    fn maxwellian_normalisation_and_moments() {
        let p = LimitParams::new([0.3, -0.2, 0.1], 1.0).unwrap();
        assert!((maxwellian_eval(&p, p.u) - (3.0 / (4.0 * PI)).powf(1.5)).abs() < 1e-15);
        let q = LimitParams::new([0.0; 3], 1.7).unwrap();
        let f = |r: f64| maxwellian_eval(&q, [r, 0.0, 0.0]);
        let mass = quad::integrate(|r| 4.0 * PI * r * r * f(r), 0.0, 15.0, 40, 16);
        let m2 = quad::integrate(|r| 4.0 * PI * r.powi(4) * f(r), 0.0, 15.0, 40, 16);
        assert!((mass - 1.0).abs() < 1e-8);
        assert!((m2 - 2.0 * q.eps0).abs() < 1e-8);
        let big = 50.0;
        assert!((maxwellian_box_mass(&p, [-big; 3], [big; 3]) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn stationary_marginal_value_and_normalisation() {
        let s2 = ManifoldSpec::energy_only(2, 1.0).unwrap();
        let f0 = stationary_marginal_eval(&s2, &[[0.0; 3]]).unwrap();
        assert!((f0 - 1.0 / (2.0 * PI * PI)).abs() < 1e-14);
        for n in [2, 8] {
            let spec = ManifoldSpec::energy_only(n, 1.0).unwrap();
            let total = stationary_radial_cdf(&spec, f64::INFINITY).unwrap();
            assert!((total - 1.0).abs() < 1e-6, "N={n}: {total}");
        }
        assert_eq!(stationary_marginal_eval(&s2, &[[3.0, 0.0, 0.0]]).unwrap(), 0.0);
        assert!(stationary_marginal_eval(&ManifoldSpec::energy_momentum(3, [0.0; 3], 1.0).unwrap(), &[[0.0; 3]]).is_err());
    }

    #[test]
    fn two_particle_marginal_integrates_to_one() {
        // n = 2 of N = 4: integrate over the product of two balls in radial
        // coordinates.
        let spec = ManifoldSpec::energy_only(4, 1.0).unwrap();
        let rmax = spec.radius_sq().sqrt();
        let total = quad::integrate(
            |r1| {
                let rem = (spec.radius_sq() - r1 * r1).max(0.0).sqrt();
                4.0 * PI * r1 * r1
                    * quad::integrate(
                        |r2| 4.0 * PI * r2 * r2 * stationary_marginal_eval(&spec, &[[r1, 0.0, 0.0], [0.0, r2, 0.0]]).unwrap(),
                        0.0,
                        rem,
                        16,
                        12,
                    )
            },
            0.0,
            rmax,
            32,
            12,
        );
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn marginal_approaches_maxwellian() {
        let mut prev = f64::INFINITY;
        for n in [8, 32, 128] {
            let spec = ManifoldSpec::energy_only(n, 1.0).unwrap();
            let p = LimitParams::from_spec(&spec);
            let d = (0..200)
                .map(|i| {
                    let r = 0.02 * i as f64;
                    (stationary_marginal_eval(&spec, &[[r, 0.0, 0.0]]).unwrap() - maxwellian_eval(&p, [r, 0.0, 0.0])).abs()
                })
                .fold(0.0, f64::max);
            assert!(d < prev);
            prev = d;
        }
    }

    #[test]
    fn fpe_flow_properties() {
        let p = LimitParams::new([0.5, 0.0, -0.2], 1.2).unwrap();
        let m0 = [1.5, 0.3, 0.0];
        let mut second0 = [[0.4, 0.1, 0.0], [0.1, 0.9, 0.0], [0.0, 0.0, 0.6]];
        for a in 0..3 {
            for b in 0..3 {
                second0[a][b] += m0[a] * m0[b];
            }
        }
        let s0 = fpe_moment_flow(&p, m0, second0, 0.0).unwrap();
        for a in 0..3 {
            assert!((s0.mean[a] - m0[a]).abs() < 1e-15);
            for b in 0..3 {
                assert!((s0.second[a][b] - second0[a][b]).abs() < 1e-15);
            }
        }
        let th = 2.0 * p.eps0 / 3.0 * 2f64.ln();
        let s = fpe_moment_flow(&p, m0, second0, th).unwrap();
        assert!((s.mean[0] - p.u[0] - 0.5 * (m0[0] - p.u[0])).abs() < 1e-14);
        let inf = fpe_moment_flow(&p, m0, second0, 200.0).unwrap();
        let eps = p.eps0 + 0.5 * p.u.iter().map(|x| x * x).sum::<f64>();
        assert!((inf.energy() - eps).abs() < 1e-12);
        assert!(fpe_moment_flow(&p, m0, second0, -1.0).is_err());
    }

    #[test]
    fn landau_flow_properties() {
        let k = KernelSpec::new(0.0, 1e-8).unwrap();
        let m0 = [0.2, 0.0, -0.1];
        let iso = [[0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5]];
        let mut iso2 = iso;
        for a in 0..3 {
            for b in 0..3 {
                iso2[a][b] += m0[a] * m0[b];
            }
        }
        let s = landau_moment_flow(&k, m0, iso2, 3.0).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                assert!((s.second[a][b] - iso2[a][b]).abs() < 1e-15);
            }
        }
        let aniso = [[1.0, 0.3, 0.0], [0.3, 0.4, 0.0], [0.0, 0.0, 0.1]];
        let s = landau_moment_flow(&k, [0.0; 3], aniso, 0.1).unwrap();
        assert!((s.second[0][1] - 0.3 * (-1.2f64).exp()).abs() < 1e-15);
        assert!((s.energy() - 0.75).abs() < 1e-15);
        assert!(landau_moment_flow(&KernelSpec::new(-3.0, 1e-8).unwrap(), m0, aniso, 0.1).is_err());
    }

    #[test]
    fn marginal_rates_match_spectrum() {
        for spec in [
            ManifoldSpec::energy_only(16, 1.0).unwrap(),
            ManifoldSpec::energy_momentum(16, [0.3, 0.0, 0.0], 1.4).unwrap(),
        ] {
            for r in finite_n_marginal_rates(&spec) {
                match r.moment.degree() {
                    Some(j) if r.rate != 0.0 => {
                        assert!((r.rate - eigenvalue_scaled(&spec, j)).abs() < 1e-14);
                        assert!((r.limit_rate - limit_eigenvalue(j, spec.eps0())).abs() < 1e-14);
                    }
                    _ => assert_eq!(r.rate, 0.0),
                }
            }
        }
        let c1 = ManifoldSpec::energy_only(16, 1.0).unwrap();
        assert_eq!(finite_n_marginal_rates(&c1)[0].rate, 47.0 / 32.0);
        let c4 = ManifoldSpec::energy_momentum(16, [0.0; 3], 1.0).unwrap();
        assert_eq!(finite_n_marginal_rates(&c4)[0].rate, 0.0);
        assert!((tagged_mean_rate(&c4) - 44.0 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn marginal_rates_converge() {
        for j in 0..4 {
            let mut prev = f64::INFINITY;
            for n in [8, 32, 128, 512] {
                let spec = ManifoldSpec::energy_only(n, 1.0).unwrap();
                let r = finite_n_marginal_rates(&spec)[j];
                let d = (r.rate - r.limit_rate).abs();
                assert!(d <= prev);
                prev = d;
            }
            assert!(prev < 0.01);
        }
    }
}
