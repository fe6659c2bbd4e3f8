//! The matrix Dyson equation `−M⁻¹ = zI − K0 + Γ[M]`, its boundary values on the
//! real axis and the self-consistent density of states.

use rayon::prelude::*;
use serde::Serialize;

use crate::algebra::{self, c64, cx, CMat, SuperOperator};
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct MdeOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Residual below which guarded Newton steps are attempted.
    pub newton_switch: f64,
    pub warm_start: Option<CMat>,
}

impl Default for MdeOptions {
    fn default() -> Self {
        MdeOptions { tol: 1e-11, max_iter: 10_000, newton_switch: 1e-2, warm_start: None }
    }
}

impl MdeOptions {
    pub fn warm(m: &CMat) -> Self {
        MdeOptions { warm_start: Some(m.clone()), ..Default::default() }
    }
}

#[derive(Debug, Clone)]
pub struct MdePoint {
    pub z: c64,
    pub m: CMat,
    pub residual: f64,
    pub iterations: usize,
}

fn shifted(ens: &Ensemble, z: c64, m: &CMat) -> CMat {
    let n = ens.n();
    let mut a = &ens.gamma(m) - ens.k0();
    for i in 0..n {
        a[(i, i)] += z;
    }
    a
}

/// `−(zI − K0 + Γ[M])⁻¹`, the fixed-point map.
fn fixed_point_map(ens: &Ensemble, z: c64, m: &CMat) -> CMat {
    algebra::scale(cx(-1.0, 0.0), &algebra::inverse(&shifted(ens, z, m)))
}

/// `‖M + (zI − K0 + Γ[M])⁻¹‖_HS`.
pub fn residual(ens: &Ensemble, z: c64, m: &CMat) -> f64 {
    let r = m - fixed_point_map(ens, z, m);
    let v = algebra::hs_norm(&r);
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

fn min_im(m: &CMat) -> f64 {
    algebra::min_eig(&algebra::im_part(m))
}

/// One guarded Newton step on `F(M) = M + (zI − K0 + Γ[M])⁻¹`.
fn newton_step(ens: &Ensemble, z: c64, m: &CMat, res: f64, keep_positive: bool) -> Option<(CMat, f64)> {
    let n = ens.n();
    let g = algebra::inverse(&shifted(ens, z, m));
    let f = m + &g;
    let jac = SuperOperator::identity(n).minus(&algebra::sandwich(&g, &g).compose(ens.gamma_superop()));
    let delta = jac.solve(&algebra::scale(cx(-1.0, 0.0), &f));
    if !algebra::is_finite(&delta) {
        return None;
    }
    let mut t = 1.0;
    for _ in 0..8 {
        let cand = m + algebra::scale(cx(t, 0.0), &delta);
        let ok = !keep_positive || min_im(&cand) > 0.0;
        if ok {
            let r = residual(ens, z, &cand);
            if r < res {
                return Some((cand, r));
            }
        }
        t *= 0.5;
    }
    None
}

/// Solves the Dyson equation at `z` in the upper half-plane.
///
/// Damped fixed-point iteration from `iI` (or the warm start), with guarded
/// Newton steps once the residual is small. Every accepted iterate keeps
/// `Im M ≻ 0`.
pub fn solve_mde_at(ens: &Ensemble, z: c64, opts: &MdeOptions) -> Result<MdePoint> {
    if !(z.im > 0.0) || !z.re.is_finite() {
        return Err(Error::InvalidParameter(format!("spectral parameter must satisfy Im z > 0, got {z}")));
    }
    let n = ens.n();
    let mut m = match &opts.warm_start {
        Some(w) if w.nrows() == n && min_im(w) > 0.0 => w.clone(),
        _ => algebra::scale(algebra::I, &algebra::identity(n)),
    };
    let mut res = residual(ens, z, &m);
    let mut lambda = 1.0f64;
    let mut it = 0;
    while res > opts.tol && it < opts.max_iter {
        it += 1;
        if res < opts.newton_switch {
            if let Some((cand, r)) = newton_step(ens, z, &m, res, true) {
                m = cand;
                res = r;
                continue;
            }
        }
        let g = fixed_point_map(ens, z, &m);
        let cand = &algebra::scale(cx(1.0 - lambda, 0.0), &m) + &algebra::scale(cx(lambda, 0.0), &g);
        let r = residual(ens, z, &cand);
        if r > res {
            lambda = (lambda * 0.5).max(1e-6);
        } else {
            lambda = (lambda * 2.0).min(1.0);
        }
        m = cand;
        res = r;
    }
    let lo = min_im(&m);
    if !(lo > 0.0) {
        return Err(Error::PositivityLoss(lo));
    }
    if res > opts.tol {
        return Err(Error::NonConvergence { iterations: it, residual: res });
    }
    Ok(MdePoint { z, m, residual: res, iterations: it })
}

/// `M(z)` anywhere off the real axis, using `M(z̄) = M(z)*` below it.
pub fn solve_mde_any(ens: &Ensemble, z: c64, opts: &MdeOptions) -> Result<MdePoint> {
    if z.im > 0.0 {
        return solve_mde_at(ens, z, opts);
    }
    let mut o = opts.clone();
    o.warm_start = opts.warm_start.as_ref().map(algebra::adjoint);
    let p = solve_mde_at(ens, z.conj(), &o)?;
    Ok(MdePoint { z, m: algebra::adjoint(&p.m), residual: p.residual, iterations: p.iterations })
}

/// Newton iteration directly at a real energy, started from a nearby solution.
pub fn polish_on_real_axis(ens: &Ensemble, x: f64, start: &CMat, tol: f64) -> Result<MdePoint> {
    let z = cx(x, 0.0);
    let mut m = start.clone();
    let mut res = residual(ens, z, &m);
    let mut it = 0;
    while res > tol && it < 100 {
        it += 1;
        match newton_step(ens, z, &m, res, false) {
            Some((c, r)) => {
                m = c;
                res = r;
            }
            None => break,
        }
    }
    if res > tol {
        return Err(Error::NonConvergence { iterations: it, residual: res });
    }
    Ok(MdePoint { z, m, residual: res, iterations: it })
}

#[derive(Debug, Clone)]
pub struct ContinuationOptions {
    /// Strictly decreasing imaginary parts.
    pub etas: Vec<f64>,
    /// Successive values further apart than `10·flag_tol` flag the point.
    pub flag_tol: f64,
    pub mde: MdeOptions,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        ContinuationOptions { etas: geometric_etas(1e-1, 1e-6, 11), flag_tol: 1e-4, mde: MdeOptions::default() }
    }
}

pub fn geometric_etas(top: f64, floor: f64, count: usize) -> Vec<f64> {
    let r = (floor / top).ln() / (count - 1) as f64;
    (0..count).map(|k| if k + 1 == count { floor } else { top * (r * k as f64).exp() }).collect()
}

#[derive(Debug, Clone)]
pub struct RealAxisPoint {
    pub x: f64,
    /// Value at the smallest η reached.
    pub m: CMat,
    /// One-step Richardson extrapolation to η = 0.
    pub m_extrapolated: CMat,
    /// `max |M(η_last) − M(η_prev)|`.
    pub error_indicator: f64,
    pub flagged: bool,
    pub eta_used: f64,
    pub residual: f64,
}

impl RealAxisPoint {
    pub fn rho(&self) -> f64 {
        (algebra::avg_trace(&algebra::im_part(&self.m_extrapolated)).re / std::f64::consts::PI).max(0.0)
    }
}

/// Boundary value `lim_{η↓0} M(x + iη)` by warm-started continuation.
pub fn continue_to_real_axis(ens: &Ensemble, x: f64, opts: &ContinuationOptions) -> Result<RealAxisPoint> {
    if opts.etas.is_empty() || opts.etas.windows(2).any(|w| !(w[1] < w[0])) || opts.etas[0] <= 0.0 {
        return Err(Error::InvalidParameter("eta sequence must be positive and strictly decreasing".into()));
    }
    let mut mo = opts.mde.clone();
    let mut path: Vec<(f64, MdePoint)> = Vec::with_capacity(opts.etas.len());
    let mut failed = false;
    for &eta in &opts.etas {
        match solve_mde_at(ens, cx(x, eta), &mo) {
            Ok(p) => {
                mo.warm_start = Some(p.m.clone());
                path.push((eta, p));
            }
            Err(e) if path.is_empty() => return Err(e),
            Err(_) => {
                failed = true;
                break;
            }
        }
    }
    let (eta_last, last) = path.last().expect("nonempty");
    let (m_ex, ind) = if path.len() >= 2 {
        let (eta_prev, prev) = &path[path.len() - 2];
        let w = 1.0 / (eta_prev - eta_last);
        let ex = &algebra::scale(cx(eta_prev * w, 0.0), &last.m) - &algebra::scale(cx(eta_last * w, 0.0), &prev.m);
        (ex, algebra::max_abs(&(&last.m - &prev.m)))
    } else {
        (last.m.clone(), f64::INFINITY)
    };
    Ok(RealAxisPoint {
        x,
        m: last.m.clone(),
        m_extrapolated: m_ex,
        error_indicator: ind,
        flagged: failed || ind > 10.0 * opts.flag_tol,
        eta_used: *eta_last,
        residual: last.residual,
    })
}

/// Boundary value at a bulk energy to full precision: continuation followed by
/// Newton on the real axis.
pub fn solve_on_real_axis(ens: &Ensemble, x: f64) -> Result<MdePoint> {
    let c = continue_to_real_axis(ens, x, &ContinuationOptions::default())?;
    polish_on_real_axis(ens, x, &c.m_extrapolated, 1e-13)
}

#[derive(Debug, Clone, Serialize)]
pub struct DosCurve {
    pub grid: Vec<f64>,
    pub rho: Vec<f64>,
    #[serde(skip)]
    pub m_boundary: Vec<CMat>,
    pub residual: Vec<f64>,
    pub eta_used: Vec<f64>,
    pub flagged: Vec<bool>,
    pub eta_floor: f64,
    pub mass: f64,
}

impl DosCurve {
    /// Linear interpolation of ρ, zero outside the grid.
    pub fn rho_at(&self, x: f64) -> f64 {
        let g = &self.grid;
        if x < g[0] || x > g[g.len() - 1] {
            return 0.0;
        }
        let k = g.partition_point(|&y| y <= x).clamp(1, g.len() - 1);
        let t = (x - g[k - 1]) / (g[k] - g[k - 1]);
        (1.0 - t) * self.rho[k - 1] + t * self.rho[k]
    }

    /// Grid energies with `ρ ≥ theta`.
    pub fn bulk(&self, theta: f64) -> Vec<f64> {
        self.grid.iter().zip(&self.rho).filter(|(_, &r)| r >= theta).map(|(&x, _)| x).collect()
    }
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(a, b)| 0.5 * (a[1] - a[0]) * (b[0] + b[1])).sum()
}

pub fn linspace(a: f64, b: f64, count: usize) -> Vec<f64> {
    (0..count).map(|k| a + (b - a) * k as f64 / (count - 1) as f64).collect()
}

/// Uniform grid over `[−R, R]` with the support radius heuristic.
pub fn default_grid(ens: &Ensemble, count: usize) -> Vec<f64> {
    let r = ens.support_radius();
    linspace(-r, r, count)
}

pub const MASS_TOL: f64 = 1e-2;

/// `ρ(x) = ⟨Im M(x)⟩/π` on a grid; the grid must bracket the spectrum.
pub fn density_of_states(ens: &Ensemble, grid: &[f64], opts: &ContinuationOptions) -> Result<DosCurve> {
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter("grid must be ascending with at least two points".into()));
    }
    let pts: Vec<RealAxisPoint> =
        grid.par_iter().map(|&x| continue_to_real_axis(ens, x, opts)).collect::<Result<Vec<_>>>()?;
    let rho: Vec<f64> = pts.iter().map(|p| p.rho()).collect();
    let mass = trapezoid(grid, &rho);
    if (mass - 1.0).abs() > MASS_TOL {
        return Err(Error::MassDeviation(mass));
    }
    Ok(DosCurve {
        grid: grid.to_vec(),
        rho,
        residual: pts.iter().map(|p| p.residual).collect(),
        eta_used: pts.iter().map(|p| p.eta_used).collect(),
        flagged: pts.iter().map(|p| p.flagged).collect(),
        m_boundary: pts.into_iter().map(|p| p.m_extrapolated).collect(),
        eta_floor: *opts.etas.last().expect("nonempty"),
        mass,
    })
}

/// Stability form `Id − C_M Γ`.
pub fn stability_form(ens: &Ensemble, m: &CMat) -> SuperOperator {
    SuperOperator::identity(ens.n()).minus(&algebra::sandwich(m, m).compose(ens.gamma_superop()))
}

pub const SINGULAR_COND: f64 = 1e12;

/// `M′(z)` from `(Id − C_M Γ)[M′] = M²`.
pub fn mde_derivative(ens: &Ensemble, point: &MdePoint) -> Result<CMat> {
    let s = stability_form(ens, &point.m);
    let cond = s.cond();
    if !(cond <= SINGULAR_COND) {
        return Err(Error::Singular { what: "stability operator", cond });
    }
    Ok(s.solve(&algebra::mul(&point.m, &point.m)))
}

/// Bulk test `ρ(E0) ≥ theta` from the boundary value.
pub fn bulk_point(ens: &Ensemble, e0: f64, theta: f64) -> Result<MdePoint> {
    let c = continue_to_real_axis(ens, e0, &ContinuationOptions::default())?;
    if c.rho() < theta {
        return Err(Error::NotInBulk { e0, rho: c.rho() });
    }
    polish_on_real_axis(ens, e0, &c.m_extrapolated, 1e-13)
}

#[derive(Debug, Clone, Serialize)]
pub struct PropertyReport {
    /// `max |z|²·‖M(z) + I/z‖` over the large-|z| probes.
    pub asymptotic_constant: f64,
    pub max_norm_m: f64,
    /// `max ‖M⁻¹(z)‖/(1 + |z|)`.
    pub max_norm_m_inv: f64,
    /// Range of `eig(Im M(x))/ρ(x)` over the bulk.
    pub im_band: (f64, f64),
    pub max_reflection_error: f64,
}

/// Numerical probes of boundedness, asymptotics, reflection and the Im M band.
pub fn property_probes(ens: &Ensemble, probes: &[c64], dos: &DosCurve, theta: f64) -> Result<PropertyReport> {
    let mut asym = 0.0f64;
    for r in [10.0, 100.0] {
        for k in 0..8 {
            let phi = std::f64::consts::PI * (k as f64 + 0.5) / 8.0;
            let z = c64::from_polar(r, phi);
            let p = solve_mde_at(ens, z, &MdeOptions::default())?;
            let d = &p.m + &algebra::scale(c64::new(1.0, 0.0) / z, &algebra::identity(ens.n()));
            asym = asym.max(algebra::op_norm(&d) * r * r);
        }
    }
    let (mut nm, mut nmi, mut refl) = (0.0f64, 0.0f64, 0.0f64);
    for &z in probes {
        let p = solve_mde_at(ens, z, &MdeOptions::default())?;
        nm = nm.max(algebra::op_norm(&p.m));
        nmi = nmi.max(algebra::op_norm(&algebra::inverse(&p.m)) / (1.0 + z.norm()));
        let q = solve_mde_any(ens, z.conj(), &MdeOptions::default())?;
        refl = refl.max(algebra::max_abs(&(&q.m - &algebra::adjoint(&p.m))));
    }
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for (k, &r) in dos.rho.iter().enumerate() {
        if r >= theta {
            let e = algebra::herm_eigenvalues(&algebra::im_part(&dos.m_boundary[k]));
            lo = lo.min(e[0] / r);
            hi = hi.max(e[e.len() - 1] / r);
        }
    }
    Ok(PropertyReport { asymptotic_constant: asym, max_norm_m: nm, max_norm_m_inv: nmi, im_band: (lo, hi), max_reflection_error: refl })
}

/// Closed-form Stieltjes transform of the semicircle law, Herglotz branch.
pub fn m_semicircle(z: c64) -> c64 {
    let s = (z * z - 4.0).sqrt();
    let m = (-z + s) * 0.5;
    if m.im * z.im.signum() > 0.0 || (z.im == 0.0 && m.norm() <= 1.0) {
        m
    } else {
        (-z - s) * 0.5
    }
}
