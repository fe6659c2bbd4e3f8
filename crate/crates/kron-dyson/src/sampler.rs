//! Random realizations of `H`, their spectra and resolvents, and the empirical
//! local-law and multiresolvent measurements.

use std::io::{Read, Write};
use std::path::Path;

use faer::{Mat, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::algebra::{self, c64, re, BlockMatrix, CMat};
use crate::ensemble::{Ensemble, EntryLaw};
use crate::error::{Error, Result};
use crate::mde::{self, DosCurve, MdeOptions};

const HERMITIAN_TOL: f64 = 1e-12;

/// Substream `index` of the master seed.
pub fn substream(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

fn draw_real(rng: &mut impl Rng, law: EntryLaw, var: f64) -> f64 {
    match law {
        EntryLaw::Gaussian => var.sqrt() * rng.sample::<f64, _>(StandardNormal),
        EntryLaw::Rademacher => {
            if rng.random::<bool>() {
                var.sqrt()
            } else {
                -var.sqrt()
            }
        }
        EntryLaw::Uniform => {
            let a = (3.0 * var).sqrt();
            rng.random_range(-a..=a)
        }
    }
}

/// `N×N` matrix of i.i.d. centred entries with `E|x|² = 1/N`; real for `β = 1`,
/// independent real and imaginary parts of variance `1/(2N)` for `β = 2`.
pub fn draw_entries(rng: &mut impl Rng, big_n: usize, beta: u8, law: EntryLaw) -> CMat {
    let mut x = Mat::zeros(big_n, big_n);
    let nn = big_n as f64;
    for i in 0..big_n {
        for j in 0..big_n {
            x[(i, j)] = if beta == 1 {
                re(draw_real(rng, law, 1.0 / nn))
            } else {
                let a = draw_real(rng, law, 0.5 / nn);
                let b = draw_real(rng, law, 0.5 / nn);
                c64::new(a, b)
            };
        }
    }
    x
}

/// `H = K0⊗I + Σ_α (L_α⊗X_α + L_α*⊗X_α*)` drawn from substream `index`.
pub fn draw_matrix(ens: &Ensemble, big_n: usize, master_seed: u64, index: u64) -> Result<BlockMatrix> {
    if big_n < 2 {
        return Err(Error::InvalidParameter(format!("N must be at least 2, got {big_n}")));
    }
    let mut rng = substream(master_seed, index);
    let mut h = ens.k0().kron(algebra::identity(big_n));
    for l in ens.structure() {
        let x = draw_entries(&mut rng, big_n, ens.beta(), ens.entry_law());
        h += l.kron(&x);
        h += algebra::adjoint(l).kron(algebra::adjoint(&x));
    }
    BlockMatrix::new(ens.n(), big_n, h)
}

fn check_hermitian(h: &CMat) -> Result<()> {
    let scale = 1.0 + algebra::max_abs(h);
    if !algebra::is_hermitian(h, HERMITIAN_TOL * scale) {
        return Err(Error::InvalidSymmetry("sampled H is not Hermitian".into()));
    }
    Ok(())
}

fn real_part(h: &CMat) -> Mat<f64> {
    Mat::from_fn(h.nrows(), h.ncols(), |i, j| h[(i, j)].re)
}

/// Sorted eigenvalues; real symmetric arithmetic is used for `β = 1`.
pub fn eigenvalues(h: &BlockMatrix, beta: u8) -> Result<Vec<f64>> {
    check_hermitian(h.matrix())?;
    let mut v = if beta == 1 {
        real_part(h.matrix()).self_adjoint_eigenvalues(Side::Lower)
    } else {
        h.matrix().self_adjoint_eigenvalues(Side::Lower)
    }
    .map_err(|_| Error::NonConvergence { iterations: 0, residual: f64::NAN })?;
    v.sort_by(f64::total_cmp);
    Ok(v)
}

#[derive(Debug, Clone)]
enum Vectors {
    Real(Mat<f64>),
    Complex(CMat),
}

/// Eigenpairs of a sample, from which resolvents at many spectral parameters
/// are assembled.
#[derive(Debug, Clone)]
pub struct Spectrum {
    n: usize,
    big_n: usize,
    pub values: Vec<f64>,
    vectors: Vectors,
}

impl Spectrum {
    pub fn new(h: &BlockMatrix, beta: u8) -> Result<Self> {
        check_hermitian(h.matrix())?;
        let fail = |_| Error::NonConvergence { iterations: 0, residual: f64::NAN };
        let (values, vectors) = if beta == 1 {
            let e = real_part(h.matrix()).self_adjoint_eigen(Side::Lower).map_err(fail)?;
            let s = e.S().column_vector();
            ((0..s.nrows()).map(|i| s[i]).collect(), Vectors::Real(e.U().to_owned()))
        } else {
            let e = h.matrix().self_adjoint_eigen(Side::Lower).map_err(fail)?;
            let s = e.S().column_vector();
            ((0..s.nrows()).map(|i| s[i].re).collect(), Vectors::Complex(e.U().to_owned()))
        };
        Ok(Spectrum { n: h.inner_dim(), big_n: h.outer_dim(), values, vectors })
    }

    /// Largest imaginary part among eigenvector entries.
    pub fn max_imag_vector_entry(&self) -> f64 {
        match &self.vectors {
            Vectors::Real(_) => 0.0,
            Vectors::Complex(u) => u.col_iter().flat_map(|c| c.iter().map(|x| x.im.abs()).collect::<Vec<_>>()).fold(0.0, f64::max),
        }
    }

    /// `G(z) = U diag(1/(λ − z)) U*`.
    pub fn resolvent(&self, z: c64) -> BlockMatrix {
        let d: Vec<c64> = self.values.iter().map(|&l| re(1.0) / (re(l) - z)).collect();
        let g = match &self.vectors {
            Vectors::Real(u) => {
                let ur = Mat::<f64>::from_fn(u.nrows(), u.ncols(), |i, k| u[(i, k)] * d[k].re);
                let ui = Mat::<f64>::from_fn(u.nrows(), u.ncols(), |i, k| u[(i, k)] * d[k].im);
                let gr = &ur * u.transpose();
                let gi = &ui * u.transpose();
                Mat::from_fn(u.nrows(), u.nrows(), |i, j| c64::new(gr[(i, j)], gi[(i, j)]))
            }
            Vectors::Complex(u) => {
                let ud = Mat::from_fn(u.nrows(), u.ncols(), |i, k| u[(i, k)] * d[k]);
                &ud * u.adjoint()
            }
        };
        BlockMatrix::new(self.n, self.big_n, g).expect("dimensions")
    }

    /// `Tr G(z) = Σ_i 1/(λ_i − z)`.
    pub fn trace_resolvent(&self, z: c64) -> c64 {
        self.values.iter().map(|&l| re(1.0) / (re(l) - z)).sum()
    }
}

/// `(H − z)⁻¹` by LU.
pub fn resolvent(h: &BlockMatrix, z: c64) -> Result<BlockMatrix> {
    if z.im == 0.0 {
        return Err(Error::InvalidParameter("resolvent needs Im z != 0".into()));
    }
    let m = h.matrix() - &algebra::scale(z, &algebra::identity(h.matrix().nrows()));
    BlockMatrix::new(h.inner_dim(), h.outer_dim(), algebra::inverse(&m))
}

/// `‖(G_{H+hR} − G_{H−hR})/(2h) + G R G‖` with `h = 1e-6`.
pub fn directional_derivative_check(h: &CMat, z: c64, r: &CMat) -> f64 {
    let step = 1e-6;
    let id = algebra::identity(h.nrows());
    let zi = algebra::scale(z, &id);
    let g = |x: &CMat| algebra::inverse(&(x - &zi));
    let dr = algebra::scale(re(step), r);
    let plus = g(&(h + &dr));
    let minus = g(&(h - &dr));
    let g0 = g(h);
    let fd = algebra::scale(re(0.5 / step), &(&plus - &minus));
    algebra::op_norm(&(&fd + &algebra::mul3(&g0, r, &g0)))
}

fn check_pair(gz: &BlockMatrix, gzeta: &BlockMatrix, b: &CMat) -> Result<()> {
    if gz.inner_dim() != gzeta.inner_dim() || gz.outer_dim() != gzeta.outer_dim() || b.nrows() != gz.inner_dim() {
        return Err(Error::DimensionMismatch("resolvent blocks and B disagree".into()));
    }
    Ok(())
}

fn contract(gz: &BlockMatrix, gzeta: &BlockMatrix, b: &CMat, transposed: bool) -> CMat {
    let (n, nn) = (gz.inner_dim(), gz.outer_dim());
    let (x, y) = (gz.matrix(), gzeta.matrix());
    let mut out = Mat::zeros(n, n);
    for a in 0..n {
        for c in 0..n {
            let mut acc = c64::ZERO;
            for bb in 0..n {
                for d in 0..n {
                    let w = b[(bb, d)];
                    if w == c64::ZERO {
                        continue;
                    }
                    let mut s = c64::ZERO;
                    for l in 0..nn {
                        for k in 0..nn {
                            let right = if transposed { y[(d * nn + l, c * nn + k)] } else { y[(d * nn + k, c * nn + l)] };
                            s += x[(a * nn + l, bb * nn + k)] * right;
                        }
                    }
                    acc += w * s;
                }
            }
            out[(a, c)] = acc / nn as f64;
        }
    }
    out
}

/// `G^B = (1/N) Σ_{k,l} G_lk(z) B G_kl(ζ)`.
pub fn multiresolvent_plain(gz: &BlockMatrix, gzeta: &BlockMatrix, b: &CMat) -> Result<CMat> {
    check_pair(gz, gzeta, b)?;
    Ok(contract(gz, gzeta, b, false))
}

/// `G̃^B = (1/N) Σ_{k,l} G_lk(z) B G_lk(ζ)`; only defined for real symmetric samples.
pub fn multiresolvent_tilde(gz: &BlockMatrix, gzeta: &BlockMatrix, b: &CMat, beta: u8) -> Result<CMat> {
    if beta != 1 {
        return Err(Error::InvalidSymmetry("the transposed multiresolvent needs beta = 1".into()));
    }
    check_pair(gz, gzeta, b)?;
    Ok(contract(gz, gzeta, b, true))
}

/// `‖G^B − M(z)BM(ζ) − M(z)Γ[G^B]M(ζ)‖_HS`.
pub fn self_consistency_residual(ens: &Ensemble, gb: &CMat, m_z: &CMat, m_zeta: &CMat, b: &CMat) -> f64 {
    let r = gb - &algebra::mul3(m_z, &(b + &ens.gamma(gb)), m_zeta);
    algebra::hs_norm(&r)
}

/// Plain and (for `β = 1`) transposed multiresolvents of one sample at
/// `z = E0 + iη`, `ζ = z̄`.
#[derive(Debug, Clone)]
pub struct TwoPointSample {
    pub index: u64,
    pub eta: f64,
    pub plain: CMat,
    pub tilde: Option<CMat>,
}

/// Multiresolvents across the real axis for each `η`, one eigendecomposition per
/// sample.
pub fn two_point_batch(
    ens: &Ensemble,
    e0: f64,
    etas: &[f64],
    big_n: usize,
    samples: usize,
    seed: u64,
    b: &CMat,
) -> Result<Vec<TwoPointSample>> {
    let per: Vec<Vec<TwoPointSample>> = (0..samples as u64)
        .into_par_iter()
        .map(|k| {
            let h = draw_matrix(ens, big_n, seed, k)?;
            let s = Spectrum::new(&h, ens.beta())?;
            etas.iter()
                .map(|&eta| {
                    let gz = s.resolvent(c64::new(e0, eta));
                    let gq = BlockMatrix::new(ens.n(), big_n, algebra::adjoint(gz.matrix()))?;
                    let plain = multiresolvent_plain(&gz, &gq, b)?;
                    let tilde = if ens.beta() == 1 { Some(multiresolvent_tilde(&gz, &gq, b, 1)?) } else { None };
                    Ok(TwoPointSample { index: k, eta, plain, tilde })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Linear interpolation quantile of unsorted data.
pub fn quantile(data: &[f64], q: f64) -> f64 {
    let mut v = data.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Least-squares slope and intercept of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let k = x.len() as f64;
    let mx = x.iter().sum::<f64>() / k;
    let my = y.iter().sum::<f64>() / k;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalLawReport {
    pub z: (f64, f64),
    #[serde(rename = "N")]
    pub big_n: usize,
    /// `max_ij ‖G_ij − δ_ij M‖_F` per sample.
    pub entrywise_err: Vec<f64>,
    /// `‖(1/N) Σ_i G_ii − M‖_F` per sample.
    pub averaged_err: Vec<f64>,
    pub predicted_entrywise: f64,
    pub predicted_averaged: f64,
    pub entrywise_median: f64,
    pub entrywise_p90: f64,
    pub averaged_median: f64,
    pub averaged_p90: f64,
}

fn local_law_errors(g: &BlockMatrix, m: &CMat) -> (f64, f64) {
    let (n, nn) = (g.inner_dim(), g.outer_dim());
    let x = g.matrix();
    let mut worst: f64 = 0.0;
    for i in 0..nn {
        for j in 0..nn {
            let mut s = 0.0;
            for a in 0..n {
                for c in 0..n {
                    let mut v = x[(a * nn + i, c * nn + j)];
                    if i == j {
                        v -= m[(a, c)];
                    }
                    s += v.norm_sqr();
                }
            }
            worst = worst.max(s);
        }
    }
    let avg = algebra::scale(re(1.0 / nn as f64), &algebra::partial_trace(g));
    (worst.sqrt(), algebra::frob(&(&avg - m)))
}

/// Entrywise and averaged local-law errors of `samples` draws at `z`.
pub fn local_law_report(ens: &Ensemble, big_n: usize, z: c64, samples: usize, seed: u64) -> Result<LocalLawReport> {
    if z.im <= 0.0 {
        return Err(Error::InvalidParameter("local law needs Im z > 0".into()));
    }
    let m = mde::solve_mde_at(ens, z, &MdeOptions::default())?.m;
    let errs: Vec<(f64, f64)> = (0..samples as u64)
        .into_par_iter()
        .map(|k| {
            let h = draw_matrix(ens, big_n, seed, k)?;
            let g = resolvent(&h, z)?;
            Ok(local_law_errors(&g, &m))
        })
        .collect::<Result<_>>()?;
    let entrywise_err: Vec<f64> = errs.iter().map(|e| e.0).collect();
    let averaged_err: Vec<f64> = errs.iter().map(|e| e.1).collect();
    let neta = big_n as f64 * z.im;
    Ok(LocalLawReport {
        z: (z.re, z.im),
        big_n,
        predicted_entrywise: neta.powf(-0.5),
        predicted_averaged: 1.0 / neta,
        entrywise_median: quantile(&entrywise_err, 0.5),
        entrywise_p90: quantile(&entrywise_err, 0.9),
        averaged_median: quantile(&averaged_err, 0.5),
        averaged_p90: quantile(&averaged_err, 0.9),
        entrywise_err,
        averaged_err,
    })
}

/// How `η` depends on `N` in a sweep.
#[derive(Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EtaRule {
    /// `η` fixed.
    Fixed(f64),
    /// `η = N^{-p}`.
    Power(f64),
}

impl EtaRule {
    pub fn eta(&self, big_n: usize) -> f64 {
        match *self {
            EtaRule::Fixed(e) => e,
            EtaRule::Power(p) => (big_n as f64).powf(-p),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalLawSweep {
    pub e0: f64,
    pub eta_rule: EtaRule,
    pub reports: Vec<LocalLawReport>,
    /// Log-log slope of the median entrywise error against `(Nη)^{-1/2}`.
    pub entrywise_slope: f64,
    /// Log-log slope of the median averaged error against `(Nη)^{-1}`.
    pub averaged_slope: f64,
}

pub fn local_law_sweep(ens: &Ensemble, ns: &[usize], e0: f64, eta: EtaRule, samples: usize, seed: u64) -> Result<LocalLawSweep> {
    let reports = ns
        .iter()
        .map(|&nn| local_law_report(ens, nn, c64::new(e0, eta.eta(nn)), samples, seed))
        .collect::<Result<Vec<_>>>()?;
    let fit = |pred: fn(&LocalLawReport) -> f64, obs: fn(&LocalLawReport) -> f64| {
        let x: Vec<f64> = reports.iter().map(|r| pred(r).ln()).collect();
        let y: Vec<f64> = reports.iter().map(|r| obs(r).ln()).collect();
        linear_fit(&x, &y).0
    };
    Ok(LocalLawSweep {
        e0,
        eta_rule: eta,
        entrywise_slope: fit(|r| r.predicted_entrywise, |r| r.entrywise_median),
        averaged_slope: fit(|r| r.predicted_averaged, |r| r.averaged_median),
        reports,
    })
}

/// Sorted spectra of independent samples.
#[derive(Debug, Clone, Serialize)]
pub struct SampleBatch {
    pub ensemble_hash: String,
    #[serde(rename = "N")]
    pub big_n: usize,
    pub master_seed: u64,
    pub indices: Vec<u64>,
    pub eigenvalues: Vec<Vec<f64>>,
}

pub fn draw_batch(ens: &Ensemble, big_n: usize, samples: usize, seed: u64) -> Result<SampleBatch> {
    let indices: Vec<u64> = (0..samples as u64).collect();
    let eigenvalues = indices
        .par_iter()
        .map(|&k| eigenvalues(&draw_matrix(ens, big_n, seed, k)?, ens.beta()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleBatch { ensemble_hash: ens.hash(), big_n, master_seed: seed, indices, eigenvalues })
}

impl SampleBatch {
    /// Each spectrum as a little-endian `u64` length followed by `f64` values.
    pub fn write_eigen_dump(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for v in &self.eigenvalues {
            f.write_all(&(v.len() as u64).to_le_bytes())?;
            for x in v {
                f.write_all(&x.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }
}

pub fn read_eigen_dump(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut out = Vec::new();
    let mut pos = 0;
    let take8 = |pos: &mut usize| -> Result<[u8; 8]> {
        let s = bytes.get(*pos..*pos + 8).ok_or_else(|| Error::Parse("truncated eigenvalue dump".into()))?;
        *pos += 8;
        Ok(s.try_into().expect("8 bytes"))
    };
    while pos < bytes.len() {
        let len = u64::from_le_bytes(take8(&mut pos)?) as usize;
        let mut v = Vec::with_capacity(len);
        for _ in 0..len {
            v.push(f64::from_le_bytes(take8(&mut pos)?));
        }
        out.push(v);
    }
    Ok(out)
}

/// L¹ distance between the pooled eigenvalue histogram and `ρ`, using bins of
/// roughly `total^{-1/3}` relative width on the DOS grid.
pub fn global_law_distance(dos: &DosCurve, spectra: &[Vec<f64>]) -> f64 {
    let total: usize = spectra.iter().map(Vec::len).sum();
    let (lo, hi) = (dos.grid[0], *dos.grid.last().expect("grid"));
    let bins = ((total as f64).cbrt().ceil() as usize).max(4);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    let mut outside = 0usize;
    for x in spectra.iter().flatten() {
        if *x < lo || *x > hi {
            outside += 1;
            continue;
        }
        let k = (((x - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let mut dist = outside as f64 / total as f64;
    for (k, c) in counts.iter().enumerate() {
        let a = lo + k as f64 * width;
        let fine: Vec<f64> = mde::linspace(a, a + width, 33);
        let rho: Vec<f64> = fine.iter().map(|&x| dos.rho_at(x)).collect();
        let mass = mde::trapezoid(&fine, &rho);
        dist += (*c as f64 / total as f64 - mass).abs();
    }
    dist
}
