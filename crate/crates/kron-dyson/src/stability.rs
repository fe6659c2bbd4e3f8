//! One- and two-point stability operators, the pole of `B_{z,ζ}` across the real
//! axis, the balanced polar decomposition and the saturated self-energy.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::algebra::{self, c64, cx, re, CMat, FlipPermutation, SuperOperator};
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::mde::{self, MdeOptions, MdePoint};

pub const NEAR_POLE_COND: f64 = 1e12;

fn checked_inverse(m: &CMat, what: &'static str) -> Result<CMat> {
    let s = m.singular_values().expect("svd");
    let cond = s[0] / s[s.len() - 1];
    if !(cond <= NEAR_POLE_COND) {
        return Err(Error::Singular { what, cond });
    }
    Ok(algebra::inverse(m))
}

#[derive(Debug, Clone)]
pub struct OnePoint {
    /// `B_z = C_M⁻¹ − Γ`.
    pub b: SuperOperator,
    /// `Id − C_M Γ`.
    pub stability_form: SuperOperator,
}

pub fn build_one_point(ens: &Ensemble, m: &CMat) -> Result<OnePoint> {
    let mi = checked_inverse(m, "M")?;
    Ok(OnePoint {
        b: algebra::sandwich(&mi, &mi).minus(ens.gamma_superop()),
        stability_form: mde::stability_form(ens, m),
    })
}

pub fn invert_one_point(op: &OnePoint, r: &CMat) -> Result<CMat> {
    let cond = op.b.cond();
    if !(cond <= NEAR_POLE_COND) {
        return Err(Error::Singular { what: "one-point stability operator", cond });
    }
    Ok(op.b.solve(r))
}

#[derive(Debug, Clone)]
pub struct TwoPointOperator {
    pub z: c64,
    pub zeta: c64,
    pub m_z: CMat,
    pub m_zeta: CMat,
    /// `B_{z,ζ} = C⁻¹_{M(z),M(ζ)} − Γ`.
    pub superop: SuperOperator,
    pub half_plane_tag: (i8, i8),
    scale: f64,
}

impl TwoPointOperator {
    /// `(‖C⁻¹_{M(z),M(ζ)}‖ + ‖Γ‖) / σ_min(B_{z,ζ})`, so that exact cancellation
    /// between the two terms counts as ill-conditioned even when `n = 1`.
    pub fn cond(&self) -> f64 {
        let s = self.superop.singular_values();
        self.scale / s[s.len() - 1]
    }
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

pub fn build_two_point(ens: &Ensemble, z: c64, m_z: &CMat, zeta: c64, m_zeta: &CMat) -> Result<TwoPointOperator> {
    let a = checked_inverse(m_z, "M(z)")?;
    let b = checked_inverse(m_zeta, "M(zeta)")?;
    let c = algebra::sandwich(&a, &b);
    Ok(TwoPointOperator {
        z,
        zeta,
        m_z: m_z.clone(),
        m_zeta: m_zeta.clone(),
        superop: c.minus(ens.gamma_superop()),
        half_plane_tag: (sign(z.im), sign(zeta.im)),
        scale: c.norm() + ens.gamma_superop().norm(),
    })
}

/// Solves `M^B = M(z) B M(ζ) + M(z) Γ[M^B] M(ζ)`; returns the solution and the
/// condition number of `B_{z,ζ}`.
pub fn invert_two_point(op: &TwoPointOperator, b: &CMat) -> Result<(CMat, f64)> {
    let cond = op.cond();
    if !(cond <= NEAR_POLE_COND) {
        return Err(Error::NearPole(cond));
    }
    Ok((op.superop.solve(b), cond))
}

/// `‖M^B − M(z)BM(ζ) − M(z)Γ[M^B]M(ζ)‖_HS`.
pub fn two_point_residual(ens: &Ensemble, op: &TwoPointOperator, mb: &CMat, b: &CMat) -> f64 {
    let r = mb - &algebra::mul3(&op.m_z, &(b + &ens.gamma(mb)), &op.m_zeta);
    algebra::hs_norm(&r)
}

/// `α = i⟨Im M0⟩ / (2‖Im M0‖²_HS)`.
pub fn alpha(m0: &CMat) -> c64 {
    let im = algebra::im_part(m0);
    let n2 = algebra::hs_dot(&im, &im).re;
    algebra::I * algebra::avg_trace(&im) / (2.0 * n2)
}

/// Linear model of the small eigenvalue of `B_{E0+w, E0+ξ}`.
pub fn lambda_model(alpha: c64, w: c64, xi: c64) -> c64 {
    if w.im < 0.0 {
        -alpha.conj() * w - alpha * xi
    } else {
        -alpha * w - alpha.conj() * xi
    }
}

/// The rank-one map `R ↦ (2i/⟨Im M0⟩)·Im M0·⟨Im M0, R⟩`.
pub fn pole_operator(m0: &CMat) -> SuperOperator {
    let n = m0.nrows();
    let im = algebra::im_part(m0);
    let v = algebra::vectorize(&im);
    let k = algebra::I * 2.0 / (algebra::avg_trace(&im).re * n as f64);
    SuperOperator::from_matrix(n, algebra::scale(k, &(&v * v.adjoint())))
}

#[derive(Debug, Clone)]
pub struct PoleDecomposition {
    pub theta: i8,
    pub pole: SuperOperator,
    /// Remainder `B⁻¹ − ϑ·pole/(z−ζ)`.
    pub j: SuperOperator,
    pub lambda: c64,
    /// Modulus of the next eigenvalue.
    pub mu2: f64,
    pub alpha: c64,
    pub lambda_model: c64,
    pub j_norm: f64,
    /// Relative distance between `ϑ·pole/(z−ζ) + J` and the LU inverse.
    pub reconstruction_error: f64,
}

/// Pole decomposition of `B_{z,ζ}⁻¹` for `z = E0 + w`, `ζ = E0 + ξ` in opposite
/// half-planes, with `M0 = M(E0)` on the real axis.
pub fn pole_decompose(ens: &Ensemble, m0: &CMat, e0: f64, w: c64, xi: c64) -> Result<PoleDecomposition> {
    if w.im * xi.im >= 0.0 {
        return Err(Error::InvalidParameter("w and xi must lie in opposite half-planes".into()));
    }
    let n = ens.n();
    let opts = MdeOptions { tol: 1e-13, ..Default::default() };
    let (z, zeta) = (re(e0) + w, re(e0) + xi);
    let mz = mde::solve_mde_any(ens, z, &opts)?;
    let mzeta = mde::solve_mde_any(ens, zeta, &opts)?;
    let op = build_two_point(ens, z, &mz.m, zeta, &mzeta.m)?;
    let theta: i8 = if z.im > 0.0 { 1 } else { -1 };

    let b = op.superop.matrix();
    let eig = b.eigen().map_err(|_| Error::Singular { what: "two-point eigendecomposition", cond: f64::INFINITY })?;
    let s = eig.S().column_vector();
    let u = eig.U().to_owned();
    let dim = n * n;
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| s[a].norm().total_cmp(&s[b].norm()));
    let k = order[0];
    let lambda = s[k];
    let mu2 = if dim > 1 { s[order[1]].norm() } else { f64::INFINITY };
    if mu2 < 3.0 * lambda.norm() {
        return Err(Error::DegenerateGap(lambda.norm(), mu2));
    }
    let ui = algebra::inverse(&u);
    let p = Mat::from_fn(dim, dim, |a, c| u[(a, k)] * ui[(k, c)]);
    let id = algebra::identity(dim);
    let deflated = b + &algebra::scale(re(1.0) - lambda, &p);
    let regular = &algebra::inverse(&deflated) * &(&id - &p);

    let pole = pole_operator(m0);
    let th = re(theta as f64) / (z - zeta);
    let j = &(&regular + &algebra::scale(re(1.0) / lambda, &p)) - &algebra::scale(th, pole.matrix());
    let j = SuperOperator::from_matrix(n, j);

    let direct = algebra::inverse(b);
    let recon = &algebra::scale(th, pole.matrix()) + j.matrix();
    let reconstruction_error = algebra::max_abs(&(&recon - &direct)) / algebra::max_abs(&direct);
    let a = alpha(m0);
    Ok(PoleDecomposition {
        theta,
        j_norm: j.norm(),
        pole,
        j,
        lambda,
        mu2,
        alpha: a,
        lambda_model: lambda_model(a, w, xi),
        reconstruction_error,
    })
}

#[derive(Debug, Clone)]
pub struct PolarParts {
    pub q: CMat,
    pub u: CMat,
    pub w: CMat,
    pub t: CMat,
}

/// Balanced polar decomposition `M = Q* U Q` with `U` unitary.
pub fn balanced_polar(m: &CMat) -> Result<PolarParts> {
    let im = algebra::im_part(m);
    let lo = algebra::min_eig(&im);
    if !(lo > 0.0) {
        return Err(Error::PositivityLoss(lo));
    }
    let s = algebra::herm_fn(&im, f64::sqrt);
    let si = algebra::herm_fn(&im, |x| 1.0 / x.sqrt());
    let t = algebra::re_part(&algebra::mul3(&si, &algebra::re_part(m), &si));
    let w = algebra::herm_fn(&t, |x| (1.0 + x * x).powf(0.25));
    let wi = algebra::herm_fn(&t, |x| (1.0 + x * x).powf(-0.25));
    let n = m.nrows();
    let ti = &t + &algebra::scale(algebra::I, &algebra::identity(n));
    Ok(PolarParts { q: algebra::mul(&w, &s), u: algebra::mul3(&wi, &ti, &wi), w, t })
}

#[derive(Debug, Clone)]
pub struct SaturatedSpectrum {
    pub f: SuperOperator,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub top_vector: CMat,
    pub gap: f64,
    pub self_adjoint_error: f64,
    /// `|cos|` between the top eigenvector and `Im U`.
    pub top_cosine: f64,
}

impl SaturatedSpectrum {
    pub fn top(&self) -> f64 {
        *self.eigenvalues.last().expect("nonempty")
    }
}

/// `F = C* Γ C` with `C = C_{√Im M} C_W`.
pub fn saturated_self_energy(ens: &Ensemble, m: &CMat) -> Result<SaturatedSpectrum> {
    let parts = balanced_polar(m)?;
    let s = algebra::herm_fn(&algebra::im_part(m), f64::sqrt);
    let a = algebra::mul(&s, &parts.w);
    let aa = algebra::adjoint(&a);
    let c = algebra::sandwich(&a, &aa);
    let cs = algebra::sandwich(&aa, &a);
    let f = cs.compose(ens.gamma_superop()).compose(&c);
    let self_adjoint_error = f.dist(&f.adjoint());
    let n = ens.n();
    let (vals, vecs) = algebra::herm_eigen(f.matrix());
    let top = vals.len() - 1;
    let top_vector = algebra::unvectorize(&Mat::from_fn(n * n, 1, |i, _| vecs[(i, top)]), n);
    let second = vals[..top].iter().map(|x| x.abs()).fold(0.0, f64::max);
    let imu = algebra::im_part(&parts.u);
    let top_cosine = algebra::hs_dot(&top_vector, &imu).norm() / (algebra::hs_norm(&top_vector) * algebra::hs_norm(&imu));
    Ok(SaturatedSpectrum { f, gap: 1.0 - second, eigenvalues: vals, top_vector, self_adjoint_error, top_cosine })
}

/// The pair-space operator `B̂_{z,ζ}`, built from its definition and by conjugating
/// `B_{z,ζ} ⊗ Id` with the flip.
#[derive(Debug, Clone)]
pub struct RealTwoPoint {
    pub n: usize,
    pub by_definition: CMat,
    pub by_conjugation: CMat,
    pub flip: FlipPermutation,
    b_inverse: CMat,
}

impl RealTwoPoint {
    /// `B̂⁻¹ = Φ (B⁻¹ ⊗ Id) Φ`.
    pub fn inverse(&self) -> CMat {
        self.flip.conjugate(&self.b_inverse.kron(algebra::identity(self.n * self.n)))
    }

    pub fn apply(&self, v: &CMat) -> CMat {
        &self.by_definition * v
    }

    /// Deterministic value of `G̃^B`: `T = B̂⁻¹[I ⊗ I]` read as the matrix
    /// `Σ t_{ij,kl} E_ij ⊗ E_kl` acting on `vec(B)`.
    pub fn tilde_limit(&self, b: &CMat) -> CMat {
        let n = self.n;
        let n2 = n * n;
        let id = Mat::from_fn(n2 * n2, 1, |p, _| {
            let (x, y) = (p / n2, p % n2);
            if x / n == x % n && y / n == y % n {
                re(1.0)
            } else {
                c64::ZERO
            }
        });
        let t = &self.inverse() * &id;
        let op = Mat::from_fn(n2, n2, |r, c| t[(((r / n) * n + c / n) * n2 + (r % n) * n + c % n, 0)]);
        algebra::unvectorize(&(&op * &algebra::vectorize(b)), n)
    }
}

pub fn real_two_point(ens: &Ensemble, m_z: &CMat, m_zeta: &CMat) -> Result<RealTwoPoint> {
    if ens.beta() != 1 {
        return Err(Error::InvalidSymmetry("the pair-space operator needs beta = 1".into()));
    }
    let n = ens.n();
    let a = checked_inverse(m_z, "M(z)")?;
    let b = checked_inverse(m_zeta, "M(zeta)")?;
    let id = algebra::identity(n);
    let left = |x: &CMat| algebra::sandwich(x, &id).into_matrix();
    let right = |y: &CMat| algebra::sandwich(&id, y).into_matrix();
    let mut def = left(&a).kron(right(&b));
    for l in ens.structure() {
        let lt = algebra::transpose(l);
        def -= left(l).kron(right(&lt));
        def -= left(&lt).kron(right(l));
    }
    let two = algebra::sandwich(&a, &b).minus(ens.gamma_superop());
    let flip = algebra::flip_involution(n);
    let conj = flip.conjugate(&two.matrix().kron(algebra::identity(n * n)));
    Ok(RealTwoPoint { n, by_definition: def, by_conjugation: conj, flip, b_inverse: algebra::inverse(two.matrix()) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Plain,
    Tilde,
}

/// Leading pole term of `G^B` (plain) or `G̃^B` (tilde) near the bulk energy
/// with boundary value `m0`, for `z`, `ζ` in opposite half-planes.
pub fn two_point_leading_term(m0: &CMat, z: c64, zeta: c64, b: &CMat, variant: Variant) -> Result<CMat> {
    if z.im * zeta.im >= 0.0 {
        return Err(Error::InvalidParameter("z and zeta must lie in opposite half-planes".into()));
    }
    let theta = if z.im > 0.0 { 1.0 } else { -1.0 };
    let im = algebra::im_part(m0);
    let tr = algebra::avg_trace(&im).re;
    let k = algebra::I * (2.0 * theta) / (z - zeta);
    Ok(match variant {
        Variant::Plain => algebra::scale(k * algebra::hs_dot(&im, b) / tr, &im),
        Variant::Tilde => algebra::scale(k / (tr * m0.nrows() as f64), &algebra::mul3(&im, &algebra::transpose(b), &im)),
    })
}

/// As `two_point_leading_term`, with `M0` solved at `E0` after a bulk check.
pub fn deterministic_two_point_approx(
    ens: &Ensemble,
    e0: f64,
    z: c64,
    zeta: c64,
    b: &CMat,
    variant: Variant,
    theta: f64,
) -> Result<CMat> {
    let p = mde::bulk_point(ens, e0, theta)?;
    two_point_leading_term(&p.m, z, zeta, b, variant)
}

/// `‖Γ[Im M] − M^{-*} Im M M⁻¹‖` at a real point.
pub fn ward_residual(ens: &Ensemble, m0: &CMat) -> f64 {
    let im = algebra::im_part(m0);
    let mi = algebra::inverse(m0);
    algebra::max_abs(&(&ens.gamma(&im) - &algebra::mul3(&algebra::adjoint(&mi), &im, &mi)))
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelCheck {
    /// `‖B_{E0,E0}[Im M0]‖`.
    pub residual: f64,
    pub smallest_singular: f64,
    pub second_singular: f64,
}

impl KernelCheck {
    pub fn one_dimensional(&self, ratio: f64) -> bool {
        self.second_singular >= ratio * self.smallest_singular
    }
}

/// Kernel of `C⁻¹_{M0*, M0} − Γ` at a real bulk point.
pub fn kernel_check(ens: &Ensemble, m0: &CMat) -> Result<KernelCheck> {
    let op = build_two_point(ens, re(0.0), &algebra::adjoint(m0), re(0.0), m0)?;
    let im = algebra::im_part(m0);
    let s = op.superop.singular_values();
    let k = s.len();
    Ok(KernelCheck {
        residual: algebra::max_abs(&op.superop.apply(&im)),
        smallest_singular: s[k - 1],
        second_singular: if k > 1 { s[k - 2] } else { f64::INFINITY },
    })
}

/// `⟨Γ[Im M0 M0⁻¹ M0′] Im M0⟩` and the target `(i/2)⟨Im M0⟩`.
pub fn trace_identity(ens: &Ensemble, m0: &MdePoint) -> Result<(c64, c64)> {
    let d = mde::mde_derivative(ens, m0)?;
    let im = algebra::im_part(&m0.m);
    let x = algebra::mul3(&im, &algebra::inverse(&m0.m), &d);
    let lhs = algebra::avg_trace(&algebra::mul(&ens.gamma(&x), &im));
    Ok((lhs, algebra::I * 0.5 * algebra::avg_trace(&im)))
}

/// `(2i/⟨Im M0⟩)·⟨Γ[Im M0 M0⁻¹ M0′] Im M0⟩`, which equals −1.
pub fn phi_plus_minus(ens: &Ensemble, m0: &MdePoint) -> Result<c64> {
    let (lhs, _) = trace_identity(ens, m0)?;
    let tr = algebra::avg_trace(&algebra::im_part(&m0.m)).re;
    Ok(algebra::I * 2.0 / tr * lhs)
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityProbe {
    #[serde(rename = "E0")]
    pub e0: f64,
    pub lambda_model_error: Vec<f64>,
    pub alpha: (f64, f64),
    pub gap: f64,
    pub kernel_dim_check: KernelCheck,
    pub phi_plus_minus: (f64, f64),
    pub ward_residual: f64,
}

/// Runs the real-point identities and the eigenvalue model at `E0` with
/// `w = −iε`, `ξ = iε` for each `ε` in `eps`.
pub fn stability_probe(ens: &Ensemble, e0: f64, eps: &[f64], theta: f64) -> Result<StabilityProbe> {
    let m0 = mde::bulk_point(ens, e0, theta)?;
    let mut errs = Vec::with_capacity(eps.len());
    let mut a = c64::ZERO;
    for &e in eps {
        let pd = pole_decompose(ens, &m0.m, e0, cx(0.0, -e), cx(0.0, e))?;
        errs.push((pd.lambda - pd.lambda_model).norm());
        a = pd.alpha;
    }
    if eps.is_empty() {
        a = alpha(&m0.m);
    }
    let sat = saturated_self_energy(ens, &m0.m)?;
    let phi = phi_plus_minus(ens, &m0)?;
    Ok(StabilityProbe {
        e0,
        lambda_model_error: errs,
        alpha: (a.re, a.im),
        gap: sat.gap,
        kernel_dim_check: kernel_check(ens, &m0.m)?,
        phi_plus_minus: (phi.re, phi.im),
        ward_residual: ward_residual(ens, &m0.m),
    })
}
