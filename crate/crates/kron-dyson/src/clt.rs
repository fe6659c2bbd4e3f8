//! Test functions, the variance functional `V[g]`, mesoscopic linear statistics
//! and the Monte Carlo CLT experiment.

use std::f64::consts::PI;
use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::algebra::c64;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::mde;
use crate::sampler;

/// Minimal density accepted as bulk by the CLT experiment.
pub const BULK_THRESHOLD: f64 = 0.05;

fn gl_rule(degree: usize) -> Vec<(f64, f64)> {
    GaussLegendre::new(NonZeroUsize::new(degree).expect("positive degree")).as_node_weight_pairs().to_vec()
}

/// Composite Gauss–Legendre nodes and weights on `[a, b]` with uniform panels.
fn composite(a: f64, b: f64, panels: usize, rule: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let h = (b - a) / panels as f64;
    let mut out = Vec::with_capacity(panels * rule.len());
    for p in 0..panels {
        let lo = a + p as f64 * h;
        for &(x, w) in rule {
            out.push((lo + 0.5 * h * (x + 1.0), 0.5 * h * w));
        }
    }
    out
}

/// Composite rule between `a` and `b` (either order) with panels shrinking
/// geometrically toward `a`.
fn graded(a: f64, b: f64, levels: usize, rule: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity((levels + 1) * rule.len());
    let mut hi = 1.0;
    for k in 0..=levels {
        let lo = if k == levels { 0.0 } else { hi * 0.5 };
        let (pa, pb) = (a + (b - a) * lo, a + (b - a) * hi);
        for &(x, w) in rule {
            out.push((0.5 * (pa + pb) + 0.5 * (pb - pa) * x, 0.5 * (pb - pa).abs() * w));
        }
        hi = lo;
    }
    out
}

/// Clamped cubic spline through equispaced samples on `[−σ, σ]`, zero outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SplineSamples", into = "SplineSamples")]
pub struct CustomSpline {
    sigma: f64,
    values: Vec<f64>,
    second: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplineSamples {
    pub sigma: f64,
    pub values: Vec<f64>,
}

impl TryFrom<SplineSamples> for CustomSpline {
    type Error = Error;
    fn try_from(s: SplineSamples) -> Result<Self> {
        CustomSpline::new(s.sigma, s.values)
    }
}

impl From<CustomSpline> for SplineSamples {
    fn from(c: CustomSpline) -> Self {
        SplineSamples { sigma: c.sigma, values: c.values }
    }
}

impl CustomSpline {
    /// The end samples must vanish; the slope is clamped to zero at `±σ`.
    pub fn new(sigma: f64, values: Vec<f64>) -> Result<Self> {
        let k = values.len();
        if !(sigma > 0.0) || k < 4 {
            return Err(Error::InvalidParameter("custom test function needs sigma > 0 and at least 4 samples".into()));
        }
        if values[0].abs() > 1e-14 || values[k - 1].abs() > 1e-14 || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("custom test function must vanish at ±sigma".into()));
        }
        let h = 2.0 * sigma / (k - 1) as f64;
        // Tridiagonal system for the second derivatives with zero end slopes.
        let mut diag = vec![4.0 * h / 6.0; k];
        diag[0] = 2.0 * h / 6.0;
        diag[k - 1] = 2.0 * h / 6.0;
        let off = h / 6.0;
        let mut rhs = vec![0.0; k];
        rhs[0] = (values[1] - values[0]) / h;
        rhs[k - 1] = -(values[k - 1] - values[k - 2]) / h;
        for i in 1..k - 1 {
            rhs[i] = (values[i + 1] - 2.0 * values[i] + values[i - 1]) / h;
        }
        for i in 1..k {
            let m = off / diag[i - 1];
            diag[i] -= m * off;
            rhs[i] -= m * rhs[i - 1];
        }
        let mut second = vec![0.0; k];
        second[k - 1] = rhs[k - 1] / diag[k - 1];
        for i in (0..k - 1).rev() {
            second[i] = (rhs[i] - off * second[i + 1]) / diag[i];
        }
        Ok(CustomSpline { sigma, values, second })
    }

    fn locate(&self, x: f64) -> Option<(usize, f64, f64)> {
        if !(x.abs() <= self.sigma) {
            return None;
        }
        let k = self.values.len();
        let h = 2.0 * self.sigma / (k - 1) as f64;
        let i = (((x + self.sigma) / h) as usize).min(k - 2);
        let t = (x + self.sigma - i as f64 * h) / h;
        Some((i, t, h))
    }

    fn eval(&self, x: f64) -> f64 {
        self.locate(x).map_or(0.0, |(i, t, h)| {
            let (y0, y1, m0, m1) = (self.values[i], self.values[i + 1], self.second[i], self.second[i + 1]);
            let a = 1.0 - t;
            a * y0 + t * y1 + h * h / 6.0 * ((a * a * a - a) * m0 + (t * t * t - t) * m1)
        })
    }

    fn d1(&self, x: f64) -> f64 {
        self.locate(x).map_or(0.0, |(i, t, h)| {
            let (y0, y1, m0, m1) = (self.values[i], self.values[i + 1], self.second[i], self.second[i + 1]);
            let a = 1.0 - t;
            (y1 - y0) / h + h / 6.0 * (-(3.0 * a * a - 1.0) * m0 + (3.0 * t * t - 1.0) * m1)
        })
    }

    fn d2(&self, x: f64) -> f64 {
        self.locate(x).map_or(0.0, |(i, t, _)| (1.0 - t) * self.second[i] + t * self.second[i + 1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunction {
    /// `(1 − x²)³` on `[−1, 1]`.
    Bump3,
    /// `exp(−x²/(2w²))·(1 − x²)³` on `[−1, 1]`.
    GaussianTruncated { width: f64 },
    Custom { spline: CustomSpline },
}

impl Default for TestFunction {
    fn default() -> Self {
        TestFunction::Bump3
    }
}

impl TestFunction {
    pub fn tag(&self) -> &'static str {
        match self {
            TestFunction::Bump3 => "bump3",
            TestFunction::GaussianTruncated { .. } => "gaussian_truncated",
            TestFunction::Custom { .. } => "custom",
        }
    }

    pub fn sigma(&self) -> f64 {
        match self {
            TestFunction::Custom { spline } => spline.sigma,
            _ => 1.0,
        }
    }

    /// `(g, g′, g″)` at `x`.
    pub fn jet(&self, x: f64) -> (f64, f64, f64) {
        match self {
            TestFunction::Custom { spline } => (spline.eval(x), spline.d1(x), spline.d2(x)),
            _ if x.abs() >= 1.0 || x.is_nan() => (0.0, 0.0, 0.0),
            TestFunction::Bump3 => {
                let u = 1.0 - x * x;
                (u * u * u, -6.0 * x * u * u, -6.0 * u * u + 24.0 * x * x * u)
            }
            TestFunction::GaussianTruncated { width } => {
                let s2 = width * width;
                let e = (-x * x / (2.0 * s2)).exp();
                let (e1, e2) = (-x / s2 * e, (x * x / (s2 * s2) - 1.0 / s2) * e);
                let u = 1.0 - x * x;
                let (p, p1, p2) = (u * u * u, -6.0 * x * u * u, -6.0 * u * u + 24.0 * x * x * u);
                (e * p, e1 * p + e * p1, e2 * p + 2.0 * e1 * p1 + e * p2)
            }
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.jet(x).0
    }

    /// `(‖g‖₁, ‖g′‖₁, ‖g″‖₁)`.
    pub fn l1_norms(&self) -> [f64; 3] {
        let s = self.sigma();
        let nodes = composite(-s, s, 256, &gl_rule(8));
        let mut out = [0.0; 3];
        for (x, w) in nodes {
            let (a, b, c) = self.jet(x);
            out[0] += w * a.abs();
            out[1] += w * b.abs();
            out[2] += w * c.abs();
        }
        out
    }
}

fn variance_integral(g: &TestFunction, panels: usize) -> f64 {
    let s = g.sigma();
    let nodes = composite(-s, s, panels, &gl_rule(16));
    let vals: Vec<(f64, f64, f64)> = nodes.iter().map(|&(x, _)| g.jet(x)).collect();
    let mut inner = 0.0;
    for (i, &(x, wx)) in nodes.iter().enumerate() {
        for (j, &(y, wy)) in nodes.iter().enumerate() {
            let q = if i == j { vals[i].1 } else { (vals[i].0 - vals[j].0) / (x - y) };
            inner += wx * wy * q * q;
        }
    }
    let tail: f64 = nodes.iter().zip(&vals).map(|(&(x, w), v)| w * v.0 * v.0 * (1.0 / (s - x) + 1.0 / (s + x))).sum();
    inner + 2.0 * tail
}

/// `V[g] = (1/(2βπ²)) ∬ ((g(x) − g(y))/(x − y))² dx dy`.
pub fn vg_quadrature(g: &TestFunction, beta: u8) -> Result<f64> {
    if beta != 1 && beta != 2 {
        return Err(Error::InvalidParameter(format!("beta must be 1 or 2, got {beta}")));
    }
    let coarse = variance_integral(g, 8);
    let fine = variance_integral(g, 16);
    if (coarse - fine).abs() > 1e-6 * fine.abs().max(f64::MIN_POSITIVE) && (coarse - fine).abs() > 1e-300 {
        return Err(Error::Quadrature(format!("variance functional resolutions disagree: {coarse} vs {fine}")));
    }
    Ok(fine / (2.0 * beta as f64 * PI * PI))
}

/// `f_N(x) = g((x − E0)/η0)` with `η0 = N^{−γ}`.
#[derive(Debug, Clone)]
pub struct ScaledFunction {
    pub g: TestFunction,
    pub e0: f64,
    pub eta0: f64,
}

impl ScaledFunction {
    pub fn new(g: TestFunction, e0: f64, gamma: f64, big_n: usize) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidParameter(format!("gamma must lie in (0, 1), got {gamma}")));
        }
        Ok(ScaledFunction { g, e0, eta0: (big_n as f64).powf(-gamma) })
    }

    pub fn jet(&self, x: f64) -> (f64, f64, f64) {
        let (a, b, c) = self.g.jet((x - self.e0) / self.eta0);
        (a, b / self.eta0, c / (self.eta0 * self.eta0))
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.g.eval((x - self.e0) / self.eta0)
    }

    pub fn support(&self) -> (f64, f64) {
        let w = self.g.sigma() * self.eta0;
        (self.e0 - w, self.e0 + w)
    }

    /// `(‖f_N‖₁, ‖f_N′‖₁, ‖f_N″‖₁)` by quadrature in the original variable.
    pub fn l1_norms(&self) -> [f64; 3] {
        let (a, b) = self.support();
        let mut out = [0.0; 3];
        for (x, w) in composite(a, b, 300, &gl_rule(7)) {
            let (f0, f1, f2) = self.jet(x);
            out[0] += w * f0.abs();
            out[1] += w * f1.abs();
            out[2] += w * f2.abs();
        }
        out
    }

    /// Largest relative deviation from `‖f_N‖₁ = η0‖g‖₁`, `‖f_N′‖₁ = ‖g′‖₁` and
    /// `‖f_N″‖₁ = ‖g″‖₁/η0`.
    pub fn norm_identity_error(&self) -> f64 {
        let f = self.l1_norms();
        let g = self.g.l1_norms();
        let want = [self.eta0 * g[0], g[1], g[2] / self.eta0];
        (0..3).map(|k| ((f[k] - want[k]) / want[k]).abs()).fold(0.0, f64::max)
    }
}

/// `Σ_i f_N(λ_i)` over sorted eigenvalues.
pub fn linear_statistic(eigs: &[f64], f: &ScaledFunction) -> f64 {
    let (a, b) = f.support();
    let lo = eigs.partition_point(|&x| x < a);
    let hi = eigs.partition_point(|&x| x <= b);
    eigs[lo..hi].iter().map(|&x| f.eval(x)).sum()
}

/// Quadrature nodes for the almost-analytic extension
/// `f̃(x + iy) = (f(x) + iy f′(x)) χ(y)` with `χ = 1` on `[0, δ]`, `δ = ση0`.
struct HsGrid {
    lo: f64,
    hi: f64,
    delta: f64,
    /// `(x, weight·f″(x))` for the band `0 < y < δ` after integrating in `y`.
    band: Vec<(f64, f64)>,
    /// Fine rule for the band near an eigenvalue.
    rule: Vec<(f64, f64)>,
    levels: usize,
    /// `(x + iy, weight·∂̄f̃)` for `δ < y < 2δ`.
    cap: Vec<(c64, c64)>,
}

fn smoothstep(t: f64) -> (f64, f64) {
    let t = t.clamp(0.0, 1.0);
    (t * t * t * (10.0 - 15.0 * t + 6.0 * t * t), 30.0 * t * t * (1.0 - t) * (1.0 - t))
}

impl HsGrid {
    fn new(f: &ScaledFunction, resolution: usize) -> Self {
        let (lo, hi) = f.support();
        let delta = f.g.sigma() * f.eta0;
        let rule = gl_rule(8);
        let panels = 8 * resolution;
        let band = composite(lo, hi, panels, &rule).into_iter().map(|(x, w)| (x, w * f.jet(x).2)).collect();
        let mut cap = Vec::new();
        for (y, wy) in composite(delta, 2.0 * delta, 2 * resolution, &rule) {
            let (s, ds) = smoothstep((y - delta) / delta);
            let (chi, dchi) = (1.0 - s, -ds / delta);
            for &(x, wx) in &composite(lo, hi, panels, &rule) {
                let (f0, f1, f2) = f.jet(x);
                let i = c64::new(0.0, 1.0);
                let dbar = (i * (y * f2 * chi) + i * c64::new(f0, y * f1) * dchi) * 0.5;
                cap.push((c64::new(x, y), dbar * (wx * wy)));
            }
        }
        HsGrid { lo, hi, delta, band, rule, levels: 20 + 4 * resolution, cap }
    }

    /// `∫_0^δ y/(a − iy) dy`.
    fn kernel(&self, a: f64) -> c64 {
        let d = self.delta;
        let i = c64::new(0.0, 1.0);
        if a == 0.0 {
            return i * d;
        }
        let l0 = c64::new(a.abs().ln(), if a < 0.0 { -PI } else { 0.0 });
        i * d + (c64::new(a, -d).ln() - l0) * a
    }

    fn band_integral(&self, lambda: f64, f: &ScaledFunction) -> c64 {
        let mut acc = c64::ZERO;
        if lambda > self.lo && lambda < self.hi {
            for (a, b) in [(lambda, self.lo), (lambda, self.hi)] {
                for (x, w) in graded(a, b, self.levels, &self.rule) {
                    acc += self.kernel(lambda - x) * (w * f.jet(x).2);
                }
            }
        } else {
            for &(x, wf) in &self.band {
                acc += self.kernel(lambda - x) * wf;
            }
        }
        acc * c64::new(0.0, 0.5)
    }

    fn point(&self, lambda: f64, f: &ScaledFunction) -> f64 {
        let mut u = self.band_integral(lambda, f);
        for &(z, w) in &self.cap {
            u += w / (c64::new(lambda, 0.0) - z);
        }
        2.0 * u.re / PI
    }
}

/// `(1/π) ∬ ∂̄f̃(z) Tr G(z) d²z` with `Tr G(z) = Σ_i 1/(λ_i − z)`, evaluated on two
/// grids.
pub fn hs_statistic(eigs: &[f64], f: &ScaledFunction) -> Result<f64> {
    let coarse = HsGrid::new(f, 1);
    let fine = HsGrid::new(f, 2);
    let a: f64 = eigs.iter().map(|&l| coarse.point(l, f)).sum();
    let b: f64 = eigs.iter().map(|&l| fine.point(l, f)).sum();
    if (a - b).abs() > 1e-6 * (1.0 + b.abs()) {
        return Err(Error::Quadrature(format!("Helffer-Sjostrand grids disagree: {a} vs {b}")));
    }
    Ok(b)
}

#[derive(Debug, Clone, Serialize)]
pub struct CltReport {
    pub ensemble_hash: String,
    #[serde(rename = "N")]
    pub big_n: usize,
    pub gamma: f64,
    #[serde(rename = "E0")]
    pub e0: f64,
    pub beta: u8,
    pub test_function: String,
    pub samples: usize,
    pub master_seed: u64,
    pub statistics: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    /// Standard error of the variance estimate.
    pub variance_se: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub skewness_z: f64,
    pub kurtosis_z: f64,
    pub v_theory: f64,
    pub variance_ratio: f64,
    pub ks_distance: Option<f64>,
}

impl CltReport {
    /// CSV with columns `sample_index,statistic,seed_substream`.
    pub fn statistics_csv(&self) -> String {
        let mut s = String::from("sample_index,statistic,seed_substream\n");
        for (k, v) in self.statistics.iter().enumerate() {
            s.push_str(&format!("{k},{v:.16e},{k}\n"));
        }
        s
    }
}

pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub variance_se: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub skewness_z: f64,
    pub kurtosis_z: f64,
}

pub fn moments(x: &[f64]) -> Moments {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let m2 = c.iter().map(|v| v * v).sum::<f64>() / n;
    let m3 = c.iter().map(|v| v * v * v).sum::<f64>() / n;
    let m4 = c.iter().map(|v| v * v * v * v).sum::<f64>() / n;
    let variance = m2 * n / (n - 1.0);
    let (skewness, excess_kurtosis) = if m2 > 0.0 { (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0) } else { (0.0, 0.0) };
    let se_skew = (6.0 * n * (n - 1.0) / ((n - 2.0) * (n + 1.0) * (n + 3.0))).sqrt();
    let se_kurt = 2.0 * se_skew * ((n * n - 1.0) / ((n - 3.0) * (n + 5.0))).sqrt();
    Moments {
        mean,
        variance,
        variance_se: ((m4 - m2 * m2) / n).max(0.0).sqrt(),
        skewness,
        excess_kurtosis,
        skewness_z: skewness / se_skew,
        kurtosis_z: excess_kurtosis / se_kurt,
    }
}

/// Kolmogorov–Smirnov distance of centred data against `Normal(0, var)`.
pub fn ks_distance(x: &[f64], mean: f64, variance: f64) -> Option<f64> {
    if !(variance > 0.0) {
        return None;
    }
    let normal = Normal::new(0.0, variance.sqrt()).ok()?;
    let mut c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    c.sort_by(f64::total_cmp);
    let n = c.len() as f64;
    let mut d: f64 = 0.0;
    for (i, v) in c.iter().enumerate() {
        let f = normal.cdf(*v);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    Some(d)
}

/// Window `(E0, γ)` of a linear statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    #[serde(rename = "E0")]
    pub e0: f64,
    pub gamma: f64,
}

/// CLT reports for several windows on one batch of spectra.
pub fn clt_reports(ens: &Ensemble, batch: &sampler::SampleBatch, g: &TestFunction, windows: &[Window]) -> Result<Vec<CltReport>> {
    let v = vg_quadrature(g, ens.beta())?;
    windows
        .iter()
        .map(|w| {
            let f = ScaledFunction::new(g.clone(), w.e0, w.gamma, batch.big_n)?;
            let statistics: Vec<f64> = batch.eigenvalues.iter().map(|e| linear_statistic(e, &f)).collect();
            let m = moments(&statistics);
            Ok(CltReport {
                ensemble_hash: batch.ensemble_hash.clone(),
                big_n: batch.big_n,
                gamma: w.gamma,
                e0: w.e0,
                beta: ens.beta(),
                test_function: g.tag().into(),
                samples: statistics.len(),
                master_seed: batch.master_seed,
                ks_distance: ks_distance(&statistics, m.mean, m.variance),
                mean: m.mean,
                variance: m.variance,
                variance_se: m.variance_se,
                skewness: m.skewness,
                excess_kurtosis: m.excess_kurtosis,
                skewness_z: m.skewness_z,
                kurtosis_z: m.kurtosis_z,
                v_theory: v,
                variance_ratio: m.variance / v,
                statistics,
            })
        })
        .collect()
}

/// Draws `samples` spectra once and reports every window; each `E0` must be in
/// the bulk.
pub fn run_clt_windows(
    ens: &Ensemble,
    g: &TestFunction,
    windows: &[Window],
    big_n: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<CltReport>> {
    if samples < 100 {
        return Err(Error::InvalidParameter(format!("the CLT experiment needs at least 100 samples, got {samples}")));
    }
    for w in windows {
        mde::bulk_point(ens, w.e0, BULK_THRESHOLD)?;
        ScaledFunction::new(g.clone(), w.e0, w.gamma, big_n)?;
    }
    let batch = sampler::draw_batch(ens, big_n, samples, seed)?;
    clt_reports(ens, &batch, g, windows)
}

pub fn run_clt_experiment(
    ens: &Ensemble,
    g: &TestFunction,
    e0: f64,
    gamma: f64,
    big_n: usize,
    samples: usize,
    seed: u64,
) -> Result<CltReport> {
    Ok(run_clt_windows(ens, g, &[Window { e0, gamma }], big_n, samples, seed)?.remove(0))
}

/// Helffer–Sjöstrand and direct statistics on each sample, in parallel.
pub fn hs_comparison(ens: &Ensemble, f: &ScaledFunction, big_n: usize, samples: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    (0..samples as u64)
        .into_par_iter()
        .map(|k| {
            let e = sampler::eigenvalues(&sampler::draw_matrix(ens, big_n, seed, k)?, ens.beta())?;
            Ok((hs_statistic(&e, f)?, linear_statistic(&e, f)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{self, re};
    use proptest::prelude::*;

    const V_BUMP3_BETA2: f64 = 0.17292148674958979660;

    /// Midpoint double Riemann sum over the support plus the exact tails.
    fn riemann_v(g: &TestFunction, beta: u8, m: usize) -> f64 {
        let s = g.sigma();
        let h = 2.0 * s / m as f64;
        let xs: Vec<f64> = (0..m).map(|k| -s + (k as f64 + 0.5) * h).collect();
        let gs: Vec<(f64, f64, f64)> = xs.iter().map(|&x| g.jet(x)).collect();
        let mut acc = 0.0;
        for i in 0..m {
            for j in 0..m {
                let q = if i == j { gs[i].1 } else { (gs[i].0 - gs[j].0) / (xs[i] - xs[j]) };
                acc += q * q;
            }
            acc += 2.0 * gs[i].0 * gs[i].0 * (1.0 / (s - xs[i]) + 1.0 / (s + xs[i])) / h;
        }
        acc * h * h / (2.0 * beta as f64 * PI * PI)
    }

    #[test]
    fn bump_variance_constant() {
        let v = vg_quadrature(&TestFunction::Bump3, 2).unwrap();
        assert!((v - V_BUMP3_BETA2).abs() <= 1e-12);
        assert!((vg_quadrature(&TestFunction::Bump3, 1).unwrap() - 2.0 * V_BUMP3_BETA2).abs() <= 1e-12);
        let brute = riemann_v(&TestFunction::Bump3, 2, 4000);
        assert!((brute - V_BUMP3_BETA2).abs() <= 1e-5 * V_BUMP3_BETA2, "{brute}");
        assert!(vg_quadrature(&TestFunction::Bump3, 3).is_err());
    }

    #[test]
    fn variance_of_other_functions() {
        let g = TestFunction::GaussianTruncated { width: 0.4 };
        let v = vg_quadrature(&g, 2).unwrap();
        assert!((riemann_v(&g, 2, 3000) - v).abs() <= 1e-5 * v);
        let zero = TestFunction::Custom { spline: CustomSpline::new(1.0, vec![0.0; 9]).unwrap() };
        assert_eq!(vg_quadrature(&zero, 2).unwrap(), 0.0);
    }

    fn spline_of(g: &TestFunction, sigma: f64, count: usize, scale: f64, shift: f64) -> TestFunction {
        let values: Vec<f64> = mde::linspace(-sigma, sigma, count).iter().map(|&x| scale * g.eval(x - shift)).collect();
        TestFunction::Custom { spline: CustomSpline::new(sigma, values).unwrap() }
    }

    #[test]
    fn spline_reproduces_bump() {
        let s = spline_of(&TestFunction::Bump3, 1.0, 401, 1.0, 0.0);
        for x in [-0.77, -0.1, 0.0, 0.33, 0.9] {
            let (a, b, c) = s.jet(x);
            let (p, q, r) = TestFunction::Bump3.jet(x);
            assert!((a - p).abs() < 1e-8 && (b - q).abs() < 1e-5 && (c - r).abs() < 1e-2);
        }
        assert_eq!(s.eval(1.5), 0.0);
        assert!(CustomSpline::new(1.0, vec![1.0, 0.0, 0.0, 0.0]).is_err());
        let v = vg_quadrature(&s, 2).unwrap();
        assert!((v - V_BUMP3_BETA2).abs() <= 1e-4 * V_BUMP3_BETA2);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<TestFunction>(&json).unwrap(), s);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn variance_homogeneous_and_translation_invariant(c in 0.2f64..3.0, shift in -0.5f64..0.5) {
            let base = spline_of(&TestFunction::Bump3, 2.0, 161, 1.0, 0.0);
            let scaled = spline_of(&TestFunction::Bump3, 2.0, 161, c, 0.0);
            let moved = spline_of(&TestFunction::Bump3, 2.0, 161, 1.0, shift);
            let v = vg_quadrature(&base, 2).unwrap();
            prop_assert!((vg_quadrature(&scaled, 2).unwrap() - c * c * v).abs() <= 1e-9 * c * c * v);
            // Translation is exact up to the spline's resampling error.
            prop_assert!((vg_quadrature(&moved, 2).unwrap() - v).abs() <= 1e-4 * v);
            let values: Vec<f64> = mde::linspace(-2.0, 2.0, 161).iter().map(|&x| TestFunction::Bump3.eval(-x - shift)).collect();
            let reflected = TestFunction::Custom { spline: CustomSpline::new(2.0, values).unwrap() };
            prop_assert!((vg_quadrature(&reflected, 2).unwrap() - vg_quadrature(&moved, 2).unwrap()).abs() <= 1e-9 * v);
        }
    }

    #[test]
    fn scaled_function_identities() {
        let f = ScaledFunction::new(TestFunction::Bump3, 0.3, 0.2, 1024).unwrap();
        assert_eq!(f.eval(0.3), 1.0);
        let (a, b) = f.support();
        assert!(((b - a) - 2.0 * 1024f64.powf(-0.2)).abs() < 1e-15);
        assert!(f.norm_identity_error() <= 1e-4);
        let f2 = f.l1_norms()[2];
        let g2 = TestFunction::Bump3.l1_norms()[2];
        assert!((f2 - 1024f64.powf(0.2) * g2).abs() <= 1e-4 * f2);
        assert!(ScaledFunction::new(TestFunction::Bump3, 0.0, 1.0, 10).is_err());
        assert!(ScaledFunction::new(TestFunction::Bump3, 0.0, 0.0, 10).is_err());
    }

    #[test]
    fn linear_statistic_examples() {
        let zero = ScaledFunction::new(TestFunction::Custom { spline: CustomSpline::new(1.0, vec![0.0; 5]).unwrap() }, 0.0, 0.5, 100).unwrap();
        assert_eq!(linear_statistic(&[0.0, 0.05], &zero), 0.0);
        let f = ScaledFunction::new(TestFunction::Bump3, 0.2, 0.3, 64).unwrap();
        assert_eq!(linear_statistic(&[0.2], &f), 1.0);
        let mut rng = algebra::testutil::rng(4);
        let mut e: Vec<f64> = (0..10).map(|_| rand::Rng::random_range(&mut rng, -0.3..0.7)).collect();
        e.sort_by(f64::total_cmp);
        let direct: f64 = e.iter().map(|&x| f.eval(x)).sum();
        assert!((linear_statistic(&e, &f) - direct).abs() <= 1e-15);
    }

    #[test]
    fn hs_point_evaluation() {
        let f = ScaledFunction::new(TestFunction::Bump3, 0.1, 0.2, 256).unwrap();
        assert!((hs_statistic(&[0.1], &f).unwrap() - 1.0).abs() <= 1e-3);
        let (a, b) = f.support();
        for x in [a + 0.3 * (b - a), b - 1e-4, a + 1e-9] {
            assert!((hs_statistic(&[x], &f).unwrap() - f.eval(x)).abs() <= 1e-6);
        }
        let far = [a - 3.0 * (b - a), b + 5.0 * (b - a), 10.0];
        assert!(hs_statistic(&far, &f).unwrap().abs() <= 1e-6);
        let g = ScaledFunction::new(TestFunction::GaussianTruncated { width: 0.5 }, -0.2, 0.4, 500).unwrap();
        assert!((hs_statistic(&[-0.21], &g).unwrap() - g.eval(-0.21)).abs() <= 1e-6);
    }

    #[test]
    fn hs_matches_direct_on_wigner() {
        let e = Ensemble::semicircle(2);
        let f = ScaledFunction::new(TestFunction::Bump3, 0.0, 0.2, 256).unwrap();
        for (hs, direct) in hs_comparison(&e, &f, 256, 2, 3).unwrap() {
            assert!((hs - direct).abs() / (1.0 + direct.abs()) <= 1e-3, "{hs} {direct}");
        }
    }

    #[test]
    fn moments_and_ks() {
        let m = moments(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.variance - 5.0 / 3.0).abs() < 1e-15);
        assert!(m.skewness.abs() < 1e-15);
        assert!(ks_distance(&[1.0, 1.0], 1.0, 0.0).is_none());
        let d = ks_distance(&[0.0], 0.0, 1.0).unwrap();
        assert!((d - 0.5).abs() < 1e-15);
    }

    #[test]
    fn deterministic_variance_is_zero() {
        let k0 = algebra::diag(&[re(-0.4), re(0.1), re(0.6)]);
        let e = Ensemble::deterministic(k0).unwrap();
        let batch = sampler::draw_batch(&e, 64, 5, 1).unwrap();
        let r = clt_reports(&e, &batch, &TestFunction::Bump3, &[Window { e0: 0.1, gamma: 0.2 }]).unwrap();
        assert_eq!(r[0].variance, 0.0);
        assert!(r[0].ks_distance.is_none());
        assert!(run_clt_experiment(&e, &TestFunction::Bump3, 0.35, 0.2, 64, 100, 1).is_err());
    }

    #[test]
    fn csv_format() {
        let e = Ensemble::semicircle(2);
        let batch = sampler::draw_batch(&e, 16, 3, 2).unwrap();
        let r = clt_reports(&e, &batch, &TestFunction::Bump3, &[Window { e0: 0.0, gamma: 0.3 }]).unwrap();
        let csv = r[0].statistics_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "sample_index,statistic,seed_substream");
        assert_eq!(lines.len(), 4);
        let v: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(v, r[0].statistics[0]);
    }
}
