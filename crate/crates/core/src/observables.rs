//! Estimators over replica ensembles: named observables, mean/stderr time
//! series, pooled marginal histograms, the radial KS test, decay-rate fits
//! and the propagation-of-chaos distance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{KinError, Result};
use crate::geometry::{ManifoldSpec, VelocityState};
use crate::kinetic_limits::stationary_radial_cdf;
use crate::master_sim::{to_standard, EnsembleSnapshot};
use crate::spectral::{symmetric_eigenfunction, trial_eval, EigenFamily, TrialFunction};
use crate::stats::{mean_stderr, weighted_linear_fit};

/// Catalog of scalar observables. Names use 1-based particle and component
/// indices, e.g. `p1_deg2_cross_12` or `tagged_1_3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Observable {
    /// `e(V)/N`.
    Energy,
    /// `p_σ(V)/N`.
    Momentum { s: usize },
    /// Symmetrised harmonic `Σ_k p(v_k - u)`.
    Eigen(EigenFamily),
    /// `v_{k,σ}` of one particle.
    Tagged { k: usize, s: usize },
    /// `(1/N) Σ_k v_{k,a} v_{k,b}`.
    SecondMoment { a: usize, b: usize },
    /// The gap trial function, evaluated after mapping to the standard manifold.
    Trial,
}

fn digit(c: char) -> Option<usize> {
    c.to_digit(10).filter(|d| (1..=3).contains(d)).map(|d| d as usize - 1)
}

fn two_digits(s: &str) -> Option<(usize, usize)> {
    let mut it = s.chars();
    let a = digit(it.next()?)?;
    let b = digit(it.next()?)?;
    it.next().is_none().then_some((a, b))
}

impl Observable {
    pub fn parse(name: &str) -> Result<Self> {
        let unknown = || KinError::UnknownObservable(name.to_string());
        let obs = match name {
            "energy" => Observable::Energy,
            "trial" => Observable::Trial,
            "p1_deg2_axial" => Observable::Eigen(EigenFamily::Deg2Axial),
            "p1_deg3_123" => Observable::Eigen(EigenFamily::Deg3Triple),
            _ => {
                let (head, tail) = name.rsplit_once('_').ok_or_else(unknown)?;
                match head {
                    "momentum" | "p1_deg1" => {
                        let mut c = tail.chars();
                        let s = digit(c.next().ok_or_else(unknown)?).ok_or_else(unknown)?;
                        if c.next().is_some() {
                            return Err(unknown());
                        }
                        if head == "momentum" {
                            Observable::Momentum { s }
                        } else {
                            Observable::Eigen(EigenFamily::Deg1 { s })
                        }
                    }
                    "p1_deg2_cross" | "p1_deg2_diff" | "p1_deg3_cubic" | "m2" => {
                        let (a, b) = two_digits(tail).ok_or_else(unknown)?;
                        match head {
                            "p1_deg2_cross" => Observable::Eigen(EigenFamily::Deg2Cross { a, b }),
                            "p1_deg2_diff" => Observable::Eigen(EigenFamily::Deg2Diff { a, b }),
                            "p1_deg3_cubic" => Observable::Eigen(EigenFamily::Deg3Cubic { a, b }),
                            _ => Observable::SecondMoment { a, b },
                        }
                    }
                    _ => {
                        let (h2, k) = head.rsplit_once('_').ok_or_else(unknown)?;
                        if h2 != "tagged" {
                            return Err(unknown());
                        }
                        let k: usize = k.parse().map_err(|_| unknown())?;
                        let mut c = tail.chars();
                        let s = digit(c.next().ok_or_else(unknown)?).ok_or_else(unknown)?;
                        if k == 0 || c.next().is_some() {
                            return Err(unknown());
                        }
                        Observable::Tagged { k: k - 1, s }
                    }
                }
            }
        };
        if let Observable::Eigen(f) = obs {
            f.validate().map_err(|_| unknown())?;
        }
        Ok(obs)
    }

    pub fn name(&self) -> String {
        match *self {
            Observable::Energy => "energy".into(),
            Observable::Trial => "trial".into(),
            Observable::Momentum { s } => format!("momentum_{}", s + 1),
            Observable::Tagged { k, s } => format!("tagged_{}_{}", k + 1, s + 1),
            Observable::SecondMoment { a, b } => format!("m2_{}{}", a + 1, b + 1),
            Observable::Eigen(f) => match f {
                EigenFamily::Deg1 { s } => format!("p1_deg1_{}", s + 1),
                EigenFamily::Deg2Cross { a, b } => format!("p1_deg2_cross_{}{}", a + 1, b + 1),
                EigenFamily::Deg2Diff { a, b } => format!("p1_deg2_diff_{}{}", a + 1, b + 1),
                EigenFamily::Deg2Axial => "p1_deg2_axial".into(),
                EigenFamily::Deg3Triple => "p1_deg3_123".into(),
                EigenFamily::Deg3Cubic { a, b } => format!("p1_deg3_cubic_{}{}", a + 1, b + 1),
            },
        }
    }

    pub fn eval(&self, spec: &ManifoldSpec, v: &VelocityState) -> Result<f64> {
        let n = v.n_particles();
        match *self {
            Observable::Energy => Ok(v.energy() / n as f64),
            Observable::Momentum { s } => Ok(v.momentum()[s] / n as f64),
            Observable::Eigen(f) => Ok(symmetric_eigenfunction(spec, v, &f)?.value),
            Observable::Tagged { k, s } => {
                if k >= n {
                    return Err(KinError::InvalidArgument(format!("particle {} out of range", k + 1)));
                }
                Ok(v.particle(k)[s])
            }
            Observable::SecondMoment { a, b } => {
                Ok(v.as_slice().chunks_exact(3).map(|c| c[a] * c[b]).sum::<f64>() / n as f64)
            }
            Observable::Trial => {
                let (std_spec, w) = to_standard(spec, v)?;
                trial_eval(&TrialFunction::standard(n)?, &std_spec, &w)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableSeries {
    pub name: String,
    pub times: Vec<f64>,
    pub means: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub n_replicas: usize,
}

impl ObservableSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

pub(crate) fn moment_series_from_values(name: &str, n_replicas: usize, records: &[(f64, Vec<f64>)]) -> ObservableSeries {
    let mut s = ObservableSeries { name: name.into(), times: vec![], means: vec![], stderrs: vec![], n_replicas };
    for (t, vals) in records {
        let (m, e) = mean_stderr(vals);
        s.times.push(*t);
        s.means.push(m);
        s.stderrs.push(e);
    }
    s
}

/// Mean and standard error of a named observable across stored snapshots.
pub fn moment_series(spec: &ManifoldSpec, snapshots: &[EnsembleSnapshot], name: &str) -> Result<ObservableSeries> {
    let obs = Observable::parse(name)?;
    let n_replicas = snapshots.first().map_or(0, |s| s.states.len());
    let records = snapshots
        .iter()
        .map(|snap| {
            let vals = snap.states.iter().map(|v| obs.eval(spec, v)).collect::<Result<Vec<_>>>()?;
            Ok((snap.time, vals))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(moment_series_from_values(&obs.name(), n_replicas, &records))
}

// ---------------------------------------------------------------------------
// Histograms

/// Equal-width bins on `[lo, hi)`. Samples outside are counted in the edge
/// bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Grid {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) || bins == 0 {
            return Err(KinError::InvalidArgument(format!("invalid grid [{lo}, {hi}) with {bins} bins")));
        }
        Ok(Self { lo, hi, bins })
    }

    /// Symmetric grid `[c - r, c + r)`.
    pub fn centered(c: f64, r: f64, bins: usize) -> Result<Self> {
        Self::new(c - r, c + r, bins)
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    pub fn index(&self, x: f64) -> usize {
        let i = ((x - self.lo) / self.width()).floor();
        if i < 0.0 || i.is_nan() {
            0
        } else {
            (i as usize).min(self.bins - 1)
        }
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = self.width();
        (self.lo + i as f64 * w, self.lo + (i + 1) as f64 * w)
    }
}

/// Which particle pairs are pooled into a two-particle histogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairPooling {
    /// Every ordered pair `(k, l)`, `k ≠ l`.
    AllOrdered,
    /// `(0,1), (2,3), ...`: independent-looking but fewer samples.
    Disjoint,
}

/// Pooled empirical `n`-particle marginal on a product grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalHistogram {
    order: usize,
    grids: [Grid; 3],
    dense: Vec<u64>,
    sparse: BTreeMap<(u32, u32), u64>,
    total: u64,
}

impl MarginalHistogram {
    pub fn new(order: usize, grids: [Grid; 3]) -> Result<Self> {
        if !(1..=2).contains(&order) {
            return Err(KinError::InvalidArgument(format!("marginal order must be 1 or 2, got {order}")));
        }
        let cells = grids.iter().map(|g| g.bins).product::<usize>();
        let dense = if order == 1 { vec![0; cells] } else { Vec::new() };
        Ok(Self { order, grids, dense, sparse: BTreeMap::new(), total: 0 })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn grids(&self) -> &[Grid; 3] {
        &self.grids
    }

    pub fn total_samples(&self) -> u64 {
        self.total
    }

    fn cell(&self, v: [f64; 3]) -> u32 {
        let g = &self.grids;
        ((g[0].index(v[0]) * g[1].bins + g[1].index(v[1])) * g[2].bins + g[2].index(v[2])) as u32
    }

    fn unflatten(&self, c: u32) -> [usize; 3] {
        let c = c as usize;
        let (b1, b2) = (self.grids[1].bins, self.grids[2].bins);
        [c / (b1 * b2), (c / b2) % b1, c % b2]
    }

    pub fn push1(&mut self, v: [f64; 3]) {
        let c = self.cell(v) as usize;
        self.dense[c] += 1;
        self.total += 1;
    }

    pub fn push2(&mut self, a: [f64; 3], b: [f64; 3]) {
        let key = (self.cell(a), self.cell(b));
        *self.sparse.entry(key).or_insert(0) += 1;
        self.total += 1;
    }

    /// Nonzero one-particle cells with their probability mass.
    pub fn iter_cells(&self) -> impl Iterator<Item = ([usize; 3], f64)> + '_ {
        let t = self.total as f64;
        self.dense
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(move |(i, &c)| (self.unflatten(i as u32), c as f64 / t))
    }

    /// Mass of a one-particle cell by flat index.
    pub fn mass1(&self, flat: u32) -> f64 {
        self.dense[flat as usize] as f64 / self.total as f64
    }

    /// Nonzero two-particle cells `(flat_a, flat_b)` with their mass.
    pub fn iter_pairs(&self) -> impl Iterator<Item = ((u32, u32), f64)> + '_ {
        let t = self.total as f64;
        self.sparse.iter().map(move |(&k, &c)| (k, c as f64 / t))
    }

    pub fn total_mass(&self) -> f64 {
        if self.order == 1 {
            self.iter_cells().map(|(_, m)| m).sum()
        } else {
            self.iter_pairs().map(|(_, m)| m).sum()
        }
    }
}

/// Histogram of the `n`-particle marginal pooled over replicas and, by
/// exchangeability, over particle indices.
pub fn marginal_histogram(
    snapshot: &EnsembleSnapshot,
    n: usize,
    grids: [Grid; 3],
    pooling: PairPooling,
) -> Result<MarginalHistogram> {
    if snapshot.states.is_empty() {
        return Err(KinError::Empty("snapshot".into()));
    }
    let mut h = MarginalHistogram::new(n, grids)?;
    for v in &snapshot.states {
        let np = v.n_particles();
        if n == 1 {
            (0..np).for_each(|k| h.push1(v.particle(k)));
        } else {
            match pooling {
                PairPooling::AllOrdered => {
                    for k in 0..np {
                        for l in 0..np {
                            if k != l {
                                h.push2(v.particle(k), v.particle(l));
                            }
                        }
                    }
                }
                PairPooling::Disjoint => {
                    for k in (0..np - 1).step_by(2) {
                        h.push2(v.particle(k), v.particle(k + 1));
                    }
                }
            }
        }
    }
    Ok(h)
}

/// L¹ distance between a two-particle histogram and the product of a
/// one-particle histogram with itself. Cells absent from `h2` contribute
/// their full product mass, which is accounted for through
/// `Σ p = 1`: `L¹ = 1 + Σ_{supp h2} (|h2 - p| - p)`.
pub fn chaos_distance(h2: &MarginalHistogram, h1: &MarginalHistogram) -> Result<f64> {
    if h2.order != 2 || h1.order != 1 {
        return Err(KinError::GridMismatch("expected a 2-marginal and a 1-marginal".into()));
    }
    if h2.grids != h1.grids {
        return Err(KinError::GridMismatch("histograms use different grids".into()));
    }
    if h1.total == 0 || h2.total == 0 {
        return Err(KinError::Empty("histogram".into()));
    }
    let mut d = 1.0;
    for ((a, b), m) in h2.iter_pairs() {
        let p = h1.mass1(a) * h1.mass1(b);
        d += (m - p).abs() - p;
    }
    Ok(d.max(0.0))
}

// ---------------------------------------------------------------------------
// Kolmogorov-Smirnov on |v|

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    /// 99% asymptotic critical value `1.6276/√n`.
    pub critical_99: f64,
    pub n: usize,
}

impl KsResult {
    pub fn passes(&self) -> bool {
        self.statistic < self.critical_99
    }
}

pub fn ks_statistic<F: FnMut(f64) -> Result<f64>>(samples: &mut [f64], mut cdf: F) -> Result<KsResult> {
    if samples.is_empty() {
        return Err(KinError::Empty("samples".into()));
    }
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let mut d: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x)?;
        d = d.max(f - i as f64 / n as f64).max((i + 1) as f64 / n as f64 - f);
    }
    Ok(KsResult { statistic: d, critical_99: 1.6276 / (n as f64).sqrt(), n })
}

/// KS test of pooled one-particle speeds against the stationary marginal
/// of the energy sphere. The reference CDF is tabulated once on a fine
/// radial grid and interpolated linearly.
pub fn radial_ks_test(spec: &ManifoldSpec, snapshot: &EnsembleSnapshot) -> Result<KsResult> {
    let rmax = spec.radius_sq().sqrt();
    let m = 4096;
    let mut table = Vec::with_capacity(m + 1);
    let mut acc = 0.0;
    table.push(0.0);
    for i in 0..m {
        let a = rmax * i as f64 / m as f64;
        let b = rmax * (i + 1) as f64 / m as f64;
        acc += stationary_radial_cdf(spec, b)? - stationary_radial_cdf(spec, a)?;
        table.push(acc);
    }
    let mut r: Vec<f64> = snapshot
        .states
        .iter()
        .flat_map(|v| (0..v.n_particles()).map(move |k| v.particle(k)))
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .collect();
    ks_statistic(&mut r, |x| {
        let pos = (x / rmax * m as f64).clamp(0.0, m as f64);
        let i = (pos.floor() as usize).min(m - 1);
        let f = pos - i as f64;
        Ok(table[i] * (1.0 - f) + table[i + 1] * f)
    })
}

// ---------------------------------------------------------------------------
// Decay fits

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FitWindow {
    /// Leading points with `|mean - offset| > 5·stderr`.
    Auto,
    /// Points with `t0 ≤ t ≤ t1`.
    Range { t0: f64, t1: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub rate: f64,
    pub stderr: f64,
    /// 95% interval.
    pub ci: (f64, f64),
    pub r_squared: f64,
    pub n_points: usize,
    /// Set when `R² < 0.9`: the profile is not convincingly exponential.
    pub poor_fit: bool,
}

/// Weighted regression of `ln|mean - offset|` on `t`; the rate is minus the
/// slope. Weights are `(mean/stderr)²` from error propagation, or uniform
/// if any standard error in the window is zero.
pub fn decay_rate_fit(series: &ObservableSeries, window: FitWindow, offset: f64) -> Result<DecayFit> {
    let mut idx = Vec::new();
    for i in 0..series.len() {
        let y = series.means[i] - offset;
        let keep = match window {
            FitWindow::Auto => {
                if y.abs() <= 5.0 * series.stderrs[i] {
                    break;
                }
                true
            }
            FitWindow::Range { t0, t1 } => series.times[i] >= t0 && series.times[i] <= t1,
        };
        if keep {
            idx.push(i);
        }
    }
    if idx.len() < 2 {
        return Err(KinError::InvalidArgument(format!("fit window of {} needs at least 2 points", series.name)));
    }
    let sign = (series.means[idx[0]] - offset).signum();
    if sign == 0.0 || idx.iter().any(|&i| (series.means[i] - offset).signum() != sign) {
        return Err(KinError::InvalidArgument(format!("{} changes sign inside the fit window", series.name)));
    }
    let x: Vec<f64> = idx.iter().map(|&i| series.times[i]).collect();
    let y: Vec<f64> = idx.iter().map(|&i| (series.means[i] - offset).abs().ln()).collect();
    let exact = idx.iter().any(|&i| series.stderrs[i] == 0.0);
    let w: Vec<f64> = idx
        .iter()
        .map(|&i| if exact { 1.0 } else { ((series.means[i] - offset) / series.stderrs[i]).powi(2) })
        .collect();
    let fit = weighted_linear_fit(&x, &y, &w)
        .ok_or_else(|| KinError::InvalidArgument(format!("degenerate fit window for {}", series.name)))?;
    let rate = -fit.slope;
    let half = 1.96 * fit.slope_stderr;
    Ok(DecayFit {
        rate,
        stderr: fit.slope_stderr,
        ci: (rate - half, rate + half),
        r_squared: fit.r_squared,
        n_points: idx.len(),
        poor_fit: fit.r_squared < 0.9,
    })
}
