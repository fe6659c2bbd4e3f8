//! Structure ensembles `H = K0⊗I + Σ_α (L_α⊗X_α + L_α*⊗X_α*)`, validation and the
//! flatness condition on the self-energy.

use std::path::Path;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::algebra::{self, c64, cx, re, CMat, SuperOperator};
use crate::error::{Error, Result, Violation};

const HERMITIAN_TOL: f64 = 1e-12;
const REAL_TOL: f64 = 1e-14;
const SUPPORT_TOL: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryLaw {
    #[default]
    Gaussian,
    Rademacher,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

/// On-disk form of an ensemble, before validation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleFile {
    pub n: usize,
    pub d: usize,
    pub beta: u8,
    #[serde(rename = "K0")]
    pub k0: Vec<Vec<Entry>>,
    #[serde(rename = "L")]
    pub l: Vec<Vec<Vec<Entry>>>,
    #[serde(default)]
    pub entry_law: EntryLaw,
}

/// A validated ensemble. The self-energy superoperator is built once.
#[derive(Debug, Clone)]
pub struct Ensemble {
    n: usize,
    beta: u8,
    k0: CMat,
    l: Vec<CMat>,
    entry_law: EntryLaw,
    gamma: SuperOperator,
}

pub(crate) fn to_entries(a: &CMat) -> Vec<Vec<Entry>> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| Entry { re: a[(i, j)].re, im: a[(i, j)].im }).collect())
        .collect()
}

fn from_entries(rows: &[Vec<Entry>], n: usize, field: &str, out: &mut Vec<Violation>) -> Option<CMat> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        out.push(Violation { field: field.into(), message: format!("expected a {n}x{n} matrix") });
        return None;
    }
    let m = Mat::from_fn(n, n, |i, j| cx(rows[i][j].re, rows[i][j].im));
    if !algebra::is_finite(&m) {
        out.push(Violation { field: field.into(), message: "non-finite entry".into() });
        return None;
    }
    Some(m)
}

fn check_real(m: &CMat, field: &str, out: &mut Vec<Violation>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if m[(i, j)].im.abs() > REAL_TOL {
                out.push(Violation {
                    field: format!("{field}[{i}][{j}]"),
                    message: "complex entry in the real symmetry class".into(),
                });
                return;
            }
        }
    }
}

/// Validates a raw ensemble, collecting every violation.
pub fn validate(raw: &EnsembleFile) -> Result<Ensemble> {
    let mut v = Vec::new();
    let n = raw.n;
    if n == 0 {
        v.push(Violation { field: "n".into(), message: "must be positive".into() });
        return Err(Error::Invalid(v));
    }
    if raw.beta != 1 && raw.beta != 2 {
        v.push(Violation { field: "beta".into(), message: format!("must be 1 or 2, got {}", raw.beta) });
    }
    if raw.l.len() != raw.d {
        v.push(Violation { field: "d".into(), message: format!("d = {} but {} structure matrices given", raw.d, raw.l.len()) });
    }
    let k0 = from_entries(&raw.k0, n, "K0", &mut v);
    let ls: Vec<Option<CMat>> =
        raw.l.iter().enumerate().map(|(a, m)| from_entries(m, n, &format!("L[{a}]"), &mut v)).collect();
    if let Some(k0) = &k0 {
        if !algebra::is_hermitian(k0, HERMITIAN_TOL) {
            v.push(Violation { field: "K0".into(), message: "not Hermitian".into() });
        }
        if raw.beta == 1 {
            check_real(k0, "K0", &mut v);
        }
    }
    if raw.beta == 1 {
        for (a, l) in ls.iter().enumerate() {
            if let Some(l) = l {
                check_real(l, &format!("L[{a}]"), &mut v);
            }
        }
    }
    if !v.is_empty() {
        return Err(Error::Invalid(v));
    }
    let l: Vec<CMat> = ls.into_iter().map(|m| m.expect("checked")).collect();
    let gamma = algebra::gamma_superop(&l, n);
    Ok(Ensemble { n, beta: raw.beta, k0: k0.expect("checked"), l, entry_law: raw.entry_law, gamma })
}

impl Ensemble {
    pub fn new(beta: u8, k0: CMat, l: Vec<CMat>, entry_law: EntryLaw) -> Result<Self> {
        let n = k0.nrows();
        let raw = EnsembleFile {
            n,
            d: l.len(),
            beta,
            k0: to_entries(&k0),
            l: l.iter().map(to_entries).collect(),
            entry_law,
        };
        validate(&raw)
    }

    /// Wigner matrices: `n = 1`, `L_1 = 1/√2`.
    pub fn semicircle(beta: u8) -> Self {
        let l = Mat::from_fn(1, 1, |_, _| re(std::f64::consts::FRAC_1_SQRT_2));
        Self::new(beta, algebra::zeros(1), vec![l], EntryLaw::Gaussian).expect("valid")
    }

    /// The four-block, seven-direction example with a 3-flat self-energy.
    pub fn four_block_example(beta: u8) -> Self {
        let e = |i: usize, j: usize| algebra::unit(4, i - 1, j - 1);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let sum = |ms: &[CMat]| ms.iter().fold(algebra::zeros(4), |acc, m| &acc + m);
        let l = vec![
            algebra::scale(re(s), &sum(&[e(1, 1), e(1, 2), e(2, 1), e(3, 3)])),
            algebra::scale(re(s), &e(2, 2)),
            algebra::scale(re(s), &e(3, 3)),
            algebra::scale(re(s), &e(4, 4)),
            e(1, 2),
            sum(&[e(2, 4), e(3, 4)]),
            e(3, 4),
        ];
        Self::new(beta, algebra::zeros(4), l, EntryLaw::Gaussian).expect("valid")
    }

    /// `d = 0`: the deterministic matrix `K0 ⊗ I`.
    pub fn deterministic(k0: CMat) -> Result<Self> {
        Self::new(2, k0, Vec::new(), EntryLaw::Gaussian)
    }

    pub fn with_entry_law(mut self, law: EntryLaw) -> Self {
        self.entry_law = law;
        self
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: EnsembleFile = serde_json::from_str(s)?;
        validate(&raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_json(&s)
    }

    pub fn to_file(&self) -> EnsembleFile {
        EnsembleFile {
            n: self.n,
            d: self.l.len(),
            beta: self.beta,
            k0: to_entries(&self.k0),
            l: self.l.iter().map(to_entries).collect(),
            entry_law: self.entry_law,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("serializable")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.l.len()
    }

    pub fn beta(&self) -> u8 {
        self.beta
    }

    pub fn k0(&self) -> &CMat {
        &self.k0
    }

    pub fn structure(&self) -> &[CMat] {
        &self.l
    }

    pub fn entry_law(&self) -> EntryLaw {
        self.entry_law
    }

    pub fn gamma(&self, r: &CMat) -> CMat {
        algebra::gamma_unchecked(&self.l, r)
    }

    pub fn gamma_superop(&self) -> &SuperOperator {
        &self.gamma
    }

    pub fn gamma_tilde(&self, r: &CMat) -> Result<CMat> {
        if self.beta != 1 {
            return Err(Error::InvalidSymmetry("the transposed self-energy needs beta = 1".into()));
        }
        algebra::gamma_tilde_apply(&self.l, r)
    }

    /// Heuristic radius containing the spectrum, `2 + ‖K0‖ + 2Σ‖L_α‖`.
    pub fn support_radius(&self) -> f64 {
        2.0 + algebra::op_norm(&self.k0) + 2.0 * self.l.iter().map(algebra::op_norm).sum::<f64>()
    }
}

/// 0/1 pattern with row index `k` and column index `l`.
pub type Pattern = Vec<Vec<u8>>;

pub fn support_pattern(ens: &Ensemble) -> Pattern {
    let n = ens.n();
    let mut z = vec![vec![0u8; n]; n];
    for k in 0..n {
        for l in 0..n {
            let w: f64 = ens.structure().iter().map(|m| m[(l, k)].norm_sqr() + m[(k, l)].norm_sqr()).sum();
            if k == l || w > SUPPORT_TOL {
                z[k][l] = 1;
            }
        }
    }
    z
}

/// Smallest `L ≤ cap` with `Z^L` entrywise positive.
pub fn primitivity_exponent(z: &Pattern, cap: Option<usize>) -> Option<usize> {
    let n = z.len();
    let cap = cap.unwrap_or(n * n);
    let mut p: Vec<Vec<bool>> = z.iter().map(|r| r.iter().map(|&x| x != 0).collect()).collect();
    for l in 1..=cap {
        if p.iter().all(|r| r.iter().all(|&x| x)) {
            return Some(l);
        }
        p = (0..n)
            .map(|i| (0..n).map(|j| (0..n).any(|k| p[i][k] && z[k][j] != 0)).collect())
            .collect();
    }
    None
}

#[derive(Debug, Clone, Serialize)]
pub struct FlatnessReport {
    #[serde(rename = "Z")]
    pub z: Pattern,
    pub exponent: Option<usize>,
    pub c_estimate: f64,
    pub certified: bool,
    pub samples_used: usize,
    /// Best value found after each restart.
    pub minima_trace: Vec<f64>,
}

/// Smallest generalized eigenvalue of `(A, diag(dg))` on the range of the diagonal,
/// with its minimizing vector.
fn min_ratio(a: &CMat, dg: &[f64]) -> Option<(f64, Vec<c64>)> {
    let top = dg.iter().cloned().fold(0.0, f64::max);
    if top <= 0.0 {
        return None;
    }
    let idx: Vec<usize> = (0..dg.len()).filter(|&i| dg[i] > 1e-13 * top).collect();
    let m = idx.len();
    let k = Mat::from_fn(m, m, |i, j| a[(idx[i], idx[j])] / (dg[idx[i]] * dg[idx[j]]).sqrt());
    let (vals, u) = algebra::herm_eigen(&k);
    let mut x = vec![c64::ZERO; dg.len()];
    for (r, &i) in idx.iter().enumerate() {
        x[i] = u[(r, 0)] / dg[i].sqrt();
    }
    Some((vals[0].max(0.0), x))
}

fn outer_sum(ls: &[CMat], v: &[c64], adj_first: bool) -> CMat {
    let n = v.len();
    let vm = Mat::from_fn(n, 1, |i, _| v[i]);
    let mut a = algebra::zeros(n);
    for l in ls {
        let la = algebra::adjoint(l);
        let (p, q) = if adj_first { (&la * &vm, l * &vm) } else { (l * &vm, &la * &vm) };
        a += &p * p.adjoint();
        a += &q * q.adjoint();
    }
    a
}

fn normalize(v: &mut [c64]) {
    let s = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
}

/// Multistart alternating minimization of the flatness ratio.
///
/// The returned value is the smallest ratio found, so it bounds the true
/// constant from above; it is not a certificate.
pub fn estimate_flatness_constant(ens: &Ensemble, z: &Pattern, budget: usize, seed: u64) -> FlatnessReport {
    let n = ens.n();
    let ls = ens.structure();
    let zf = |k: usize, l: usize| z[k][l] as f64;
    let mut best = f64::INFINITY;
    let mut trace = Vec::with_capacity(budget);
    for s in 0..budget {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s as u64);
        let mut v: Vec<c64> = (0..n)
            .map(|_| cx(rng.sample(StandardNormal), if ens.beta() == 2 { rng.sample(StandardNormal) } else { 0.0 }))
            .collect();
        normalize(&mut v);
        let mut val = f64::INFINITY;
        for _ in 0..2000 {
            // minimize over u with v fixed
            let dv: Vec<f64> = (0..n).map(|l| (0..n).map(|k| zf(k, l) * v[k].norm_sqr()).sum()).collect();
            let Some((_, mut u)) = min_ratio(&outer_sum(ls, &v, false), &dv) else { break };
            normalize(&mut u);
            // then over v with u fixed
            let du: Vec<f64> = (0..n).map(|k| (0..n).map(|l| zf(k, l) * u[l].norm_sqr()).sum()).collect();
            let Some((r, mut v2)) = min_ratio(&outer_sum(ls, &u, true), &du) else { break };
            normalize(&mut v2);
            v = v2;
            let done = val.is_finite() && val - r <= 1e-13 * val;
            val = val.min(r);
            if done {
                break;
            }
        }
        if val.is_finite() {
            best = best.min(val);
        }
        trace.push(best);
    }
    if !best.is_finite() {
        best = 0.0;
    }
    FlatnessReport {
        z: z.clone(),
        exponent: primitivity_exponent(z, None),
        c_estimate: best,
        certified: false,
        samples_used: budget,
        minima_trace: trace,
    }
}

/// `Σ_l (Σ_k z_kl R_kk) E_ll`.
pub fn flatness_lower_form(z: &Pattern, r: &CMat) -> CMat {
    let n = z.len();
    let d: Vec<c64> = (0..n).map(|l| (0..n).map(|k| r[(k, k)] * z[k][l] as f64).sum()).collect();
    algebra::diag(&d)
}
