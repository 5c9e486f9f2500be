//! Spectra of the sphere Laplacians and variational estimates for the
//! pair-diffusion generator.
//!
//! On the energy sphere `S^{3N-1}` of radius `r` the eigenvalues of `-Δ` are
//! `j(j+3N-2)/r²`, with harmonic polynomials of degree `j` as
//! eigenfunctions. With momentum conservation the manifold is a
//! `(3N-4)`-sphere and the eigenvalues become `j(j+3N-5)/r₀²`.
//!
//! For the pair-diffusion process only an upper bound on the gap is
//! available. It comes from the Rayleigh quotient of the trial function
//! `ψ̂ = A(Σ_i v_{i,1}²/2 - C)`, which is estimated here by Monte Carlo.

use serde::{Deserialize, Serialize};

use crate::error::{KinError, Result};
use crate::geometry::{ln_sphere_area, sample_uniform, ConservationMode, ManifoldSpec, VelocityState};
use crate::master_sim::KernelSpec;
use crate::rng::{derive_seed, stream};
use crate::stats::{weighted_linear_fit, MeanAcc};

/// `j(j + D - 1)` for the `D`-dimensional manifold sphere.
pub fn eigenvalue_unscaled(spec: &ManifoldSpec, j: u32) -> f64 {
    let j = j as f64;
    j * (j + spec.dim() as f64 - 1.0)
}

/// Eigenvalue of `-Δ_M` on the sphere of radius² `2Nε` (or `2Nε₀`).
pub fn eigenvalue_scaled(spec: &ManifoldSpec, j: u32) -> f64 {
    eigenvalue_unscaled(spec, j) / spec.radius_sq()
}

/// `N → ∞` limit `3j/(2ε_eff)`, the spectrum of the harmonic oscillator.
pub fn limit_eigenvalue(j: u32, eps_eff: f64) -> f64 {
    1.5 * j as f64 / eps_eff
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEntry {
    pub j: u32,
    pub unscaled: f64,
    pub scaled: f64,
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumTable {
    pub mode: ConservationMode,
    pub n_particles: usize,
    /// `ε` for energy-only, `ε₀` with momentum conservation.
    pub eps_eff: f64,
    pub entries: Vec<SpectrumEntry>,
}

pub fn spectrum_table(spec: &ManifoldSpec, j_max: u32) -> SpectrumTable {
    let entries = (0..=j_max)
        .map(|j| SpectrumEntry {
            j,
            unscaled: eigenvalue_unscaled(spec, j),
            scaled: eigenvalue_scaled(spec, j),
            limit: limit_eigenvalue(j, spec.eps0()),
        })
        .collect();
    SpectrumTable { mode: spec.mode(), n_particles: spec.n_particles(), eps_eff: spec.eps0(), entries }
}

/// Symmetrised harmonics `Σ_k p(v_k - u)` of low degree. Each `p` is a
/// harmonic homogeneous polynomial on `R³`, so the sum is an eigenfunction
/// of the sphere Laplacian in both conservation modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EigenFamily {
    /// `p = v_σ`.
    Deg1 { s: usize },
    /// `p = v_a v_b`, `a ≠ b`.
    Deg2Cross { a: usize, b: usize },
    /// `p = v_a² - v_b²`, `a ≠ b`.
    Deg2Diff { a: usize, b: usize },
    /// `p = v_1² + v_2² - 2v_3²`.
    Deg2Axial,
    /// `p = v_1 v_2 v_3`.
    Deg3Triple,
    /// `p = v_a³ - 3 v_a v_b²`, `a ≠ b`.
    Deg3Cubic { a: usize, b: usize },
}

impl EigenFamily {
    pub fn degree(&self) -> u32 {
        match self {
            EigenFamily::Deg1 { .. } => 1,
            EigenFamily::Deg2Cross { .. } | EigenFamily::Deg2Diff { .. } | EigenFamily::Deg2Axial => 2,
            EigenFamily::Deg3Triple | EigenFamily::Deg3Cubic { .. } => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            EigenFamily::Deg1 { s } => s < 3,
            EigenFamily::Deg2Cross { a, b } | EigenFamily::Deg2Diff { a, b } | EigenFamily::Deg3Cubic { a, b } => {
                a < 3 && b < 3 && a != b
            }
            EigenFamily::Deg2Axial | EigenFamily::Deg3Triple => true,
        };
        if ok {
            Ok(())
        } else {
            Err(KinError::InvalidArgument(format!("invalid component indices in {self:?}")))
        }
    }

    /// Degree-1 sums are the momentum, which is frozen with momentum
    /// conservation.
    pub fn is_constant_on(&self, spec: &ManifoldSpec) -> bool {
        self.degree() == 1 && spec.mode() == ConservationMode::EnergyMomentum
    }

    pub fn one_particle(&self, w: [f64; 3]) -> f64 {
        match *self {
            EigenFamily::Deg1 { s } => w[s],
            EigenFamily::Deg2Cross { a, b } => w[a] * w[b],
            EigenFamily::Deg2Diff { a, b } => w[a] * w[a] - w[b] * w[b],
            EigenFamily::Deg2Axial => w[0] * w[0] + w[1] * w[1] - 2.0 * w[2] * w[2],
            EigenFamily::Deg3Triple => w[0] * w[1] * w[2],
            EigenFamily::Deg3Cubic { a, b } => w[a] * w[a] * w[a] - 3.0 * w[a] * w[b] * w[b],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenValue {
    pub value: f64,
    /// Set when the family is constant on this manifold.
    pub degenerate: bool,
}

/// Evaluates `Σ_k p(v_k - u)`.
pub fn symmetric_eigenfunction(spec: &ManifoldSpec, v: &VelocityState, family: &EigenFamily) -> Result<EigenValue> {
    family.validate()?;
    if v.n_particles() != spec.n_particles() {
        return Err(KinError::DimensionMismatch { expected: spec.len(), got: v.as_slice().len() });
    }
    let u = spec.u();
    let value = (0..v.n_particles())
        .map(|k| {
            let p = v.particle(k);
            family.one_particle([p[0] - u[0], p[1] - u[1], p[2] - u[2]])
        })
        .sum();
    Ok(EigenValue { value, degenerate: family.is_constant_on(spec) })
}

/// `ψ̂ = A(Σ_i v_{i,1}²/2 - C)` on the standard manifold (`u = 0`, `ε = 1`,
/// momentum conserved).
///
/// `a_const` normalises `ψ̂` in `L²` of the uniform probability measure,
/// which is what [`rayleigh_quotient_mc`] samples from. The constant for
/// the unnormalised surface measure is [`TrialFunction::a_lebesgue`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialFunction {
    pub n_particles: usize,
    pub c_const: f64,
    pub a_const: f64,
}

impl TrialFunction {
    /// `C = N/3` makes `ψ̂` orthogonal to constants. `Σ_i v_{i,1}²` is
    /// `2N` times a `Beta((N-1)/2, N-1)` variable, so
    /// `Var(Σ v_{i,1}²/2) = 4N²/(9(3N-1))` and `A = 3√(3N-1)/(2N)`.
    pub fn standard(n_particles: usize) -> Result<Self> {
        if n_particles < 2 {
            return Err(KinError::InvalidArgument("trial function needs N >= 2".into()));
        }
        let n = n_particles as f64;
        Ok(Self { n_particles, c_const: n / 3.0, a_const: 1.5 * (3.0 * n - 1.0).sqrt() / n })
    }

    /// `(3/2N)·√((3N-1)/|M^{3N-4}|)`.
    pub fn a_lebesgue(&self) -> f64 {
        let n = self.n_particles;
        let ln_area = ln_sphere_area(3 * n - 4, (2.0 * n as f64).sqrt());
        self.a_const * (-0.5 * ln_area).exp()
    }

    fn standard_spec(&self) -> ManifoldSpec {
        ManifoldSpec::energy_momentum(self.n_particles, [0.0; 3], 1.0).expect("standard manifold")
    }

    /// `∂ψ̂/∂v_i = A v_{i,1} e₁`.
    pub fn gradient(&self, v: &VelocityState) -> Vec<f64> {
        let mut g = vec![0.0; v.as_slice().len()];
        for (i, c) in g.chunks_exact_mut(3).enumerate() {
            c[0] = self.a_const * v.as_slice()[3 * i];
        }
        g
    }
}

fn is_standard(spec: &ManifoldSpec) -> bool {
    spec.mode() == ConservationMode::EnergyMomentum && spec.u() == [0.0; 3] && spec.eps() == 1.0
}

pub fn trial_eval(tf: &TrialFunction, spec: &ManifoldSpec, v: &VelocityState) -> Result<f64> {
    if !is_standard(spec) {
        return Err(KinError::InvalidSpec(
            "trial function is defined on the standard manifold; map the state with to_standard".into(),
        ));
    }
    if v.n_particles() != tf.n_particles {
        return Err(KinError::DimensionMismatch { expected: 3 * tf.n_particles, got: v.as_slice().len() });
    }
    let s: f64 = v.as_slice().chunks_exact(3).map(|c| 0.5 * c[0] * c[0]).sum();
    Ok(tf.a_const * (s - tf.c_const))
}

/// Dirichlet-form density of `-L^(N)` at `V` for a function with gradient
/// `grad`: `(1/(N-1)) Σ_{k<l} w_kl |P⊥_{g}(∇_k φ - ∇_l φ)|²`.
///
/// Its uniform average is `⟨φ, -L^(N) φ⟩`; by exchangeability that equals
/// `(N/2)·E[w₁₂ |P⊥(∂₂ - ∂₁)φ|²]`, and averaging over all pairs only
/// lowers the variance. Coincident pairs have no direction and are skipped.
pub fn dirichlet_integrand(v: &VelocityState, kernel: &KernelSpec, grad: &[f64]) -> f64 {
    let n = v.n_particles();
    let x = v.as_slice();
    let mut total = 0.0;
    for k in 0..n {
        for l in k + 1..n {
            let g = [x[3 * k] - x[3 * l], x[3 * k + 1] - x[3 * l + 1], x[3 * k + 2] - x[3 * l + 2]];
            let g2 = g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
            if g2 == 0.0 {
                continue;
            }
            let d = [
                grad[3 * k] - grad[3 * l],
                grad[3 * k + 1] - grad[3 * l + 1],
                grad[3 * k + 2] - grad[3 * l + 2],
            ];
            let dg = d[0] * g[0] + d[1] * g[1] + d[2] * g[2];
            let perp_sq = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2] - dg * dg / g2).max(0.0);
            total += kernel.weight_sq(g2) * perp_sq;
        }
    }
    total / (n as f64 - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RayleighEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub n_samples: usize,
}

pub const MIN_RAYLEIGH_SAMPLES: usize = 1000;
const CHUNK: usize = 256;

/// Monte Carlo estimate of `⟨ψ̂, -L^(N) ψ̂⟩` over uniform samples of the
/// manifold of `spec`.
///
/// The state is mapped to the standard manifold before `ψ̂` is evaluated,
/// and the generator picks up the factor `ε₀^{γ/2}`. Chunk `c` of
/// samples draws from stream `(seed, c, 0)`.
pub fn rayleigh_quotient_mc(
    spec: &ManifoldSpec,
    tf: &TrialFunction,
    kernel: &KernelSpec,
    n_samples: usize,
    seed: u64,
) -> Result<RayleighEstimate> {
    if n_samples < MIN_RAYLEIGH_SAMPLES {
        return Err(KinError::InvalidArgument(format!(
            "at least {MIN_RAYLEIGH_SAMPLES} samples required, got {n_samples}"
        )));
    }
    if spec.n_particles() != tf.n_particles || spec.mode() != ConservationMode::EnergyMomentum {
        return Err(KinError::InvalidSpec("trial function needs the momentum-conserving manifold with matching N".into()));
    }
    let std_spec = tf.standard_spec();
    let factor = crate::master_sim::standard_time_factor(spec, kernel);
    let n_chunks = n_samples.div_ceil(CHUNK);
    let chunk = |c: usize| -> Result<MeanAcc> {
        let mut rng = stream(seed, c as u64, 0);
        let mut acc = MeanAcc::default();
        let count = CHUNK.min(n_samples - c * CHUNK);
        for _ in 0..count {
            let v = sample_uniform(&std_spec, &mut rng)?;
            acc.push(dirichlet_integrand(&v, kernel, &tf.gradient(&v)));
        }
        Ok(acc)
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<MeanAcc> = {
        use rayon::prelude::*;
        (0..n_chunks).into_par_iter().map(chunk).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<MeanAcc> = (0..n_chunks).map(chunk).collect::<Result<_>>()?;
    let mut acc = MeanAcc::default();
    parts.iter().for_each(|p| acc.merge(p));
    Ok(RayleighEstimate { estimate: factor * acc.mean(), stderr: factor * acc.stderr(), n_samples })
}

/// Upper bound `9/(5√π)·(3N-4)^{-1/2}` on the pair-diffusion gap.
pub fn lambda1_bound(n_particles: usize) -> f64 {
    9.0 / (5.0 * std::f64::consts::PI.sqrt()) / (3.0 * n_particles as f64 - 4.0).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapScanRow {
    pub n_particles: usize,
    pub estimate: f64,
    pub stderr: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapScan {
    pub gamma: f64,
    pub rows: Vec<GapScanRow>,
    /// Slope of `ln(estimate)` against `ln N`.
    pub exponent: f64,
    pub exponent_stderr: f64,
}

/// Rayleigh estimates on the standard manifold for each `N`, followed by a
/// weighted power-law fit. Each `N` uses its own derived seed.
pub fn gap_scan(n_list: &[usize], gamma: f64, n_samples: usize, seed: u64) -> Result<GapScan> {
    if n_list.len() < 3 || n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(KinError::InvalidArgument("gap scan needs at least 3 ascending N".into()));
    }
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let spec = ManifoldSpec::energy_momentum(n, [0.0; 3], 1.0)?;
        let kernel = KernelSpec::with_default_cutoff(gamma, &spec)?;
        let tf = TrialFunction::standard(n)?;
        let r = rayleigh_quotient_mc(&spec, &tf, &kernel, n_samples, derive_seed(seed, n as u64))?;
        rows.push(GapScanRow { n_particles: n, estimate: r.estimate, stderr: r.stderr, bound: lambda1_bound(n) });
    }
    let x: Vec<f64> = rows.iter().map(|r| (r.n_particles as f64).ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.estimate.ln()).collect();
    // Var(ln X) ≈ (σ/X)².
    let w: Vec<f64> = rows
        .iter()
        .map(|r| {
            let rel = r.stderr / r.estimate;
            if rel > 0.0 {
                1.0 / (rel * rel)
            } else {
                1.0
            }
        })
        .collect();
    let fit = weighted_linear_fit(&x, &y, &w).ok_or_else(|| KinError::InvalidArgument("degenerate gap scan fit".into()))?;
    Ok(GapScan { gamma, rows, exponent: fit.slope, exponent_stderr: fit.slope_stderr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::master_sim::{laplace_beltrami_apply, TestPolynomial};

    #[test]
    fn eigenvalue_examples() {
        let s2 = ManifoldSpec::energy_only(2, 1.0).unwrap();
        assert_eq!(eigenvalue_scaled(&s2, 0), 0.0);
        assert_eq!(eigenvalue_scaled(&s2, 1), 1.25);
        let s16 = ManifoldSpec::energy_only(16, 1.0).unwrap();
        assert_eq!(eigenvalue_scaled(&s16, 1), 1.46875);
        assert_eq!(limit_eigenvalue(2, 1.0), 3.0);
        for n in [4, 10, 100] {
            let s = ManifoldSpec::energy_only(n, 1.0).unwrap();
            let gap = eigenvalue_scaled(&s, 1) - limit_eigenvalue(1, 1.0);
            assert!((gap + 0.5 / n as f64).abs() < 1e-14);
        }
    }

    #[test]
    fn table_is_increasing_and_converges() {
        let spec = ManifoldSpec::energy_momentum(8, [0.2, 0.0, 0.0], 1.0).unwrap();
        let t = spectrum_table(&spec, 5);
        assert!(t.entries.windows(2).all(|w| w[0].scaled < w[1].scaled));
        for e in &t.entries {
            assert!((e.scaled - e.unscaled / (16.0 * spec.eps0())).abs() < 1e-14);
        }
        for j in 1..4 {
            let mut prev = f64::INFINITY;
            for n in [8, 32, 128, 512] {
                let s = ManifoldSpec::energy_momentum(n, [0.0; 3], 1.0).unwrap();
                let d = (eigenvalue_scaled(&s, j) - limit_eigenvalue(j, 1.0)).abs();
                assert!(d < prev);
                prev = d;
            }
        }
    }

    #[test]
    fn families_are_eigenfunctions_of_the_sphere_laplacian() {
        // Compare against the closed-form Laplace-Beltrami operator for
        // the quadratic families.
        let spec = ManifoldSpec::energy_momentum(6, [0.0; 3], 1.0).unwrap();
        let v = sample_uniform(&spec, &mut stream(3, 0, 0)).unwrap();
        let fam = EigenFamily::Deg2Cross { a: 0, b: 1 };
        let val = symmetric_eigenfunction(&spec, &v, &fam).unwrap().value;
        let lap = laplace_beltrami_apply(&spec, &v, &TestPolynomial::SumProduct { a: 0, b: 1 }).unwrap();
        assert!((lap + eigenvalue_scaled(&spec, 2) * val).abs() < 1e-12);
    }

    #[test]
    fn degree_one_is_flagged_constant_with_momentum() {
        let spec = ManifoldSpec::energy_momentum(5, [0.0; 3], 1.0).unwrap();
        let mut rng = stream(4, 0, 0);
        for _ in 0..10 {
            let v = sample_uniform(&spec, &mut rng).unwrap();
            let e = symmetric_eigenfunction(&spec, &v, &EigenFamily::Deg1 { s: 0 }).unwrap();
            assert!(e.degenerate);
            assert!(e.value.abs() < 1e-12);
        }
        assert!(symmetric_eigenfunction(&spec, &sample_uniform(&spec, &mut rng).unwrap(), &EigenFamily::Deg2Diff { a: 1, b: 1 }).is_err());
    }

    #[test]
    fn axial_quadratic_is_not_constant() {
        let spec = ManifoldSpec::energy_only(8, 1.0).unwrap();
        let mut rng = stream(5, 0, 0);
        let xs: Vec<f64> = (0..20_000)
            .map(|_| symmetric_eigenfunction(&spec, &sample_uniform(&spec, &mut rng).unwrap(), &EigenFamily::Deg2Axial).unwrap().value)
            .collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(m.abs() < 0.1);
        assert!(var > 1.0, "variance {var}");
    }

    #[test]
    fn trial_function_constants() {
        let tf = TrialFunction::standard(8).unwrap();
        assert_eq!(tf.c_const, 8.0 / 3.0);
        let area = crate::geometry::sphere_area(20, 4.0);
        let expect = 1.5 / 8.0 * (23.0 / area).sqrt();
        assert!((tf.a_lebesgue() - expect).abs() < 1e-12 * expect);
        let spec = ManifoldSpec::energy_momentum(8, [0.0; 3], 1.0).unwrap();
        let mut v = vec![0.0; 24];
        for k in 0..8 {
            let s = if k % 2 == 0 { 1.0 } else { -1.0 };
            v[3 * k + 1] = s * 2f64.sqrt();
        }
        let st = VelocityState::from_vec(&spec, v).unwrap();
        assert!(st.is_feasible(&spec, 1e-12));
        assert!((trial_eval(&tf, &spec, &st).unwrap() + tf.a_const * 8.0 / 3.0).abs() < 1e-12);
        let other = ManifoldSpec::energy_momentum(8, [0.0; 3], 2.0).unwrap();
        assert!(trial_eval(&tf, &other, &st).is_err());
    }

    #[test]
    fn conserved_quantities_have_zero_dirichlet_form() {
        let spec = ManifoldSpec::energy_momentum(6, [0.1, 0.2, 0.3], 1.0).unwrap();
        let v = sample_uniform(&spec, &mut stream(6, 0, 0)).unwrap();
        let k = KernelSpec::coulomb(&spec);
        assert_eq!(dirichlet_integrand(&v, &k, &vec![0.0; 18]), 0.0);
        let e_grad = v.as_slice().to_vec();
        assert!(dirichlet_integrand(&v, &k, &e_grad).abs() < 1e-12);
        for s in 0..3 {
            let g: Vec<f64> = (0..18).map(|i| if i % 3 == s { 1.0 } else { 0.0 }).collect();
            assert_eq!(dirichlet_integrand(&v, &k, &g), 0.0);
        }
    }

    #[test]
    fn two_particle_quotient_is_exact() {
        // N = 2: g = v_1 - v_2 has |g|² = 8 and a uniform direction n, and
        // the integrand is A²·8n₁²(1-n₁²)/(2√2); E[n₁²(1-n₁²)] = 2/15 gives
        // 3/(2√2).
        let spec = ManifoldSpec::energy_momentum(2, [0.0; 3], 1.0).unwrap();
        let tf = TrialFunction::standard(2).unwrap();
        let k = KernelSpec::coulomb(&spec);
        let r = rayleigh_quotient_mc(&spec, &tf, &k, 200_000, 1).unwrap();
        let exact = 1.5 / 2f64.sqrt();
        assert!((r.estimate - exact).abs() < 4.0 * r.stderr, "{r:?}");
        assert!(rayleigh_quotient_mc(&spec, &tf, &k, 999, 1).is_err());
    }

    #[test]
    fn bound_values() {
        assert!((lambda1_bound(2) - 0.718_096).abs() < 1e-6);
        assert!((lambda1_bound(8) - 0.227_082).abs() < 1e-6);
        assert!(lambda1_bound(9) < lambda1_bound(8));
    }

    #[test]
    fn rayleigh_is_reproducible() {
        let spec = ManifoldSpec::energy_momentum(4, [0.0; 3], 1.0).unwrap();
        let tf = TrialFunction::standard(4).unwrap();
        let k = KernelSpec::new(1.0, 1e-8).unwrap();
        let a = rayleigh_quotient_mc(&spec, &tf, &k, 5000, 9).unwrap();
        let b = rayleigh_quotient_mc(&spec, &tf, &k, 5000, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.estimate > 0.0);
    }
}
