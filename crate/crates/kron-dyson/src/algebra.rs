//! Matrix and superoperator primitives.
//!
//! `n×n` matrices are vectorized row-major, `vec(R)[i*n + j] = R[i, j]`, so that
//! the map `R ↦ A R B` has matrix `A ⊗ Bᵗ`. All inner products are normalized,
//! `⟨S, T⟩ = Tr(S* T) / n`.

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{Mat, Side};

use crate::error::{Error, Result};

pub use faer::c64;

pub type CMat = Mat<c64>;

pub const I: c64 = c64 { re: 0.0, im: 1.0 };

#[inline]
pub fn cx(re: f64, im: f64) -> c64 {
    c64::new(re, im)
}

#[inline]
pub fn re(x: f64) -> c64 {
    c64::new(x, 0.0)
}

pub fn identity(n: usize) -> CMat {
    Mat::identity(n, n)
}

pub fn zeros(n: usize) -> CMat {
    Mat::zeros(n, n)
}

/// Matrix unit `E_ij` (zero-based indices).
pub fn unit(n: usize, i: usize, j: usize) -> CMat {
    let mut e = zeros(n);
    e[(i, j)] = re(1.0);
    e
}

pub fn diag(d: &[c64]) -> CMat {
    let n = d.len();
    Mat::from_fn(n, n, |i, j| if i == j { d[i] } else { c64::ZERO })
}

pub fn adjoint(a: &CMat) -> CMat {
    a.adjoint().to_owned()
}

pub fn transpose(a: &CMat) -> CMat {
    a.transpose().to_owned()
}

pub fn conj(a: &CMat) -> CMat {
    a.conjugate().to_owned()
}

pub fn scale(k: c64, a: &CMat) -> CMat {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| k * a[(i, j)])
}

pub fn add(a: &CMat, b: &CMat) -> CMat {
    a + b
}

pub fn sub(a: &CMat, b: &CMat) -> CMat {
    a - b
}

pub fn mul(a: &CMat, b: &CMat) -> CMat {
    a * b
}

pub fn mul3(a: &CMat, b: &CMat, c: &CMat) -> CMat {
    &(a * b) * c
}

/// `(A + A*)/2`.
pub fn re_part(a: &CMat) -> CMat {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| (a[(i, j)] + a[(j, i)].conj()) * 0.5)
}

/// `(A − A*)/(2i)`.
pub fn im_part(a: &CMat) -> CMat {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| (a[(i, j)] - a[(j, i)].conj()) * cx(0.0, -0.5))
}

pub fn max_abs(a: &CMat) -> f64 {
    let mut m = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max(a[(i, j)].norm());
        }
    }
    m
}

pub fn is_finite(a: &CMat) -> bool {
    (0..a.ncols()).all(|j| (0..a.nrows()).all(|i| a[(i, j)].re.is_finite() && a[(i, j)].im.is_finite()))
}

/// Hermiticity test with tolerance `tol·‖A‖_max`.
pub fn is_hermitian(a: &CMat, tol: f64) -> bool {
    if a.nrows() != a.ncols() {
        return false;
    }
    let scale = max_abs(a);
    max_abs(&(a - a.adjoint())) <= tol * scale
}

pub fn frob(a: &CMat) -> f64 {
    a.norm_l2()
}

/// Spectral norm.
pub fn op_norm(a: &CMat) -> f64 {
    a.singular_values().map(|s| s.first().copied().unwrap_or(0.0)).unwrap_or(f64::NAN)
}

fn check_square_pair(s: &CMat, t: &CMat) -> Result<()> {
    if s.nrows() != s.ncols() || t.nrows() != t.ncols() || s.nrows() != t.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            s.nrows(),
            s.ncols(),
            t.nrows(),
            t.ncols()
        )));
    }
    Ok(())
}

/// `Tr(S* T)/r`.
pub fn hs_inner(s: &CMat, t: &CMat) -> Result<c64> {
    check_square_pair(s, t)?;
    Ok(hs_dot(s, t))
}

/// Unchecked `hs_inner`; panics on a shape mismatch.
pub fn hs_dot(s: &CMat, t: &CMat) -> c64 {
    let r = s.nrows();
    let mut acc = c64::ZERO;
    for j in 0..r {
        for i in 0..r {
            acc += s[(i, j)].conj() * t[(i, j)];
        }
    }
    acc / r as f64
}

pub fn hs_norm(t: &CMat) -> f64 {
    hs_dot(t, t).re.max(0.0).sqrt()
}

/// Normalized trace `⟨T⟩ = Tr T / r`.
pub fn avg_trace(t: &CMat) -> c64 {
    let r = t.nrows();
    let mut acc = c64::ZERO;
    for i in 0..r {
        acc += t[(i, i)];
    }
    acc / r as f64
}

pub fn inverse(a: &CMat) -> CMat {
    a.partial_piv_lu().inverse()
}

/// Eigen-decomposition of the Hermitian part, ascending eigenvalues.
pub fn herm_eigen(a: &CMat) -> (Vec<f64>, CMat) {
    let h = re_part(a);
    let e = h.self_adjoint_eigen(Side::Lower).expect("hermitian eigendecomposition");
    let s = e.S().column_vector();
    let vals = (0..h.nrows()).map(|i| s[i].re).collect();
    (vals, e.U().to_owned())
}

pub fn herm_eigenvalues(a: &CMat) -> Vec<f64> {
    re_part(a).self_adjoint_eigenvalues(Side::Lower).expect("hermitian eigenvalues")
}

pub fn min_eig(a: &CMat) -> f64 {
    herm_eigenvalues(a).first().copied().unwrap_or(f64::NAN)
}

/// `f(A)` for Hermitian `A` through its eigenbasis.
pub fn herm_fn(a: &CMat, f: impl Fn(f64) -> f64) -> CMat {
    let (vals, u) = herm_eigen(a);
    let fd: Vec<c64> = vals.iter().map(|&x| re(f(x))).collect();
    mul3(&u, &diag(&fd), &adjoint(&u))
}

/// Self-energy `Γ[R] = Σ_α (L_α R L_α* + L_α* R L_α)`.
pub fn gamma_apply(ls: &[CMat], r: &CMat) -> Result<CMat> {
    check_dims(ls, r)?;
    Ok(gamma_unchecked(ls, r))
}

pub(crate) fn gamma_unchecked(ls: &[CMat], r: &CMat) -> CMat {
    let mut out = zeros(r.nrows());
    for l in ls {
        out += mul3(l, r, &adjoint(l));
        out += mul3(&adjoint(l), r, l);
    }
    out
}

/// Real-case companion `Γ̃[R] = Σ_α (L_α R L_α + L_αᵗ R L_αᵗ)`.
pub fn gamma_tilde_apply(ls: &[CMat], r: &CMat) -> Result<CMat> {
    check_dims(ls, r)?;
    let mut out = zeros(r.nrows());
    for l in ls {
        let lt = transpose(l);
        out += mul3(l, r, l);
        out += mul3(&lt, r, &lt);
    }
    Ok(out)
}

fn check_dims(ls: &[CMat], r: &CMat) -> Result<()> {
    let n = r.nrows();
    if r.ncols() != n || ls.iter().any(|l| l.nrows() != n || l.ncols() != n) {
        return Err(Error::DimensionMismatch(format!("R is {}x{}, structure matrices do not match", n, r.ncols())));
    }
    Ok(())
}

pub fn vectorize(r: &CMat) -> CMat {
    let n = r.nrows();
    Mat::from_fn(n * n, 1, |k, _| r[(k / n, k % n)])
}

pub fn unvectorize(v: &CMat, n: usize) -> CMat {
    Mat::from_fn(n, n, |i, j| v[(i * n + j, 0)])
}

/// Linear map on `n×n` matrices stored as an `n²×n²` matrix.
#[derive(Debug, Clone)]
pub struct SuperOperator {
    n: usize,
    mat: CMat,
}

impl SuperOperator {
    pub fn from_matrix(n: usize, mat: CMat) -> Self {
        assert_eq!(mat.nrows(), n * n);
        assert_eq!(mat.ncols(), n * n);
        SuperOperator { n, mat }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_matrix(n, identity(n * n))
    }

    pub fn zero(n: usize) -> Self {
        Self::from_matrix(n, zeros(n * n))
    }

    /// Builds the matrix of an arbitrary linear map column by column.
    pub fn from_map(n: usize, f: impl Fn(&CMat) -> CMat) -> Self {
        let mut mat = zeros(n * n);
        for i in 0..n {
            for j in 0..n {
                let img = f(&unit(n, i, j));
                for a in 0..n {
                    for b in 0..n {
                        mat[(a * n + b, i * n + j)] = img[(a, b)];
                    }
                }
            }
        }
        Self::from_matrix(n, mat)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &CMat {
        &self.mat
    }

    pub fn into_matrix(self) -> CMat {
        self.mat
    }

    pub fn apply(&self, r: &CMat) -> CMat {
        unvectorize(&(&self.mat * vectorize(r)), self.n)
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &SuperOperator) -> SuperOperator {
        Self::from_matrix(self.n, &self.mat * &other.mat)
    }

    pub fn plus(&self, other: &SuperOperator) -> SuperOperator {
        Self::from_matrix(self.n, &self.mat + &other.mat)
    }

    pub fn minus(&self, other: &SuperOperator) -> SuperOperator {
        Self::from_matrix(self.n, &self.mat - &other.mat)
    }

    pub fn scaled(&self, k: c64) -> SuperOperator {
        Self::from_matrix(self.n, scale(k, &self.mat))
    }

    /// Adjoint with respect to the HS inner product.
    pub fn adjoint(&self) -> SuperOperator {
        Self::from_matrix(self.n, adjoint(&self.mat))
    }

    pub fn singular_values(&self) -> Vec<f64> {
        let mut s = self.mat.singular_values().expect("svd");
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    /// Operator norm induced by the HS norm.
    pub fn norm(&self) -> f64 {
        self.singular_values()[0]
    }

    pub fn cond(&self) -> f64 {
        let s = self.singular_values();
        s[0] / s[s.len() - 1]
    }

    pub fn inverse(&self) -> SuperOperator {
        Self::from_matrix(self.n, inverse(&self.mat))
    }

    /// Solves `self[X] = R` by LU.
    pub fn solve(&self, r: &CMat) -> CMat {
        let x = self.mat.partial_piv_lu().solve(vectorize(r));
        unvectorize(&x, self.n)
    }

    pub fn dist(&self, other: &SuperOperator) -> f64 {
        max_abs(&(&self.mat - &other.mat))
    }
}

/// Superoperator of `R ↦ A R B`, i.e. the matrix `A ⊗ Bᵗ`.
pub fn superop_of_sandwich(a: &CMat, b: &CMat) -> Result<SuperOperator> {
    check_square_pair(a, b)?;
    Ok(sandwich(a, b))
}

pub(crate) fn sandwich(a: &CMat, b: &CMat) -> SuperOperator {
    let n = a.nrows();
    SuperOperator::from_matrix(n, a.kron(b.transpose()))
}

pub fn gamma_superop(ls: &[CMat], n: usize) -> SuperOperator {
    let mut g = SuperOperator::zero(n);
    for l in ls {
        let la = adjoint(l);
        g = g.plus(&sandwich(l, &la)).plus(&sandwich(&la, l));
    }
    g
}

pub fn gamma_tilde_superop(ls: &[CMat], n: usize) -> SuperOperator {
    let mut g = SuperOperator::zero(n);
    for l in ls {
        let lt = transpose(l);
        g = g.plus(&sandwich(l, l)).plus(&sandwich(&lt, &lt));
    }
    g
}

/// Index of `E_ij ⊗ E_kl` in the vectorized pair space of dimension `n⁴`.
#[inline]
pub fn pair_index(n: usize, i: usize, j: usize, k: usize, l: usize) -> usize {
    ((i * n + j) * n + k) * n + l
}

/// The flip `Φ[E_ij ⊗ E_kl] = E_il ⊗ E_kj`, stored as an index permutation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlipPermutation {
    n: usize,
    perm: Vec<usize>,
}

pub fn flip_involution(n: usize) -> FlipPermutation {
    let mut perm = vec![0; n * n * n * n];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                for l in 0..n {
                    perm[pair_index(n, i, j, k, l)] = pair_index(n, i, l, k, j);
                }
            }
        }
    }
    FlipPermutation { n, perm }
}

impl FlipPermutation {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Image of basis element `q`.
    pub fn image(&self, q: usize) -> usize {
        self.perm[q]
    }

    pub fn compose(&self, other: &FlipPermutation) -> FlipPermutation {
        FlipPermutation { n: self.n, perm: other.perm.iter().map(|&q| self.perm[q]).collect() }
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(q, &p)| q == p)
    }

    pub fn apply_vec(&self, v: &[c64]) -> Vec<c64> {
        let mut out = vec![c64::ZERO; v.len()];
        for (q, &p) in self.perm.iter().enumerate() {
            out[p] = v[q];
        }
        out
    }

    /// `Φ A Φ` for a dense operator `A` on the pair space.
    pub fn conjugate(&self, a: &CMat) -> CMat {
        let dim = self.perm.len();
        let mut out = Mat::zeros(dim, dim);
        for c in 0..dim {
            for r in 0..dim {
                out[(self.perm[r], self.perm[c])] = a[(r, c)];
            }
        }
        out
    }
}

/// `nN×nN` matrix with `n×n` left matrix coefficients; index `(a, i) ↦ a·N + i`.
#[derive(Debug, Clone)]
pub struct BlockMatrix {
    n: usize,
    big_n: usize,
    mat: CMat,
}

impl BlockMatrix {
    pub fn new(n: usize, big_n: usize, mat: CMat) -> Result<Self> {
        if mat.nrows() != n * big_n || mat.ncols() != n * big_n {
            return Err(Error::DimensionMismatch(format!(
                "expected {0}x{0}, got {1}x{2}",
                n * big_n,
                mat.nrows(),
                mat.ncols()
            )));
        }
        Ok(BlockMatrix { n, big_n, mat })
    }

    /// `A ⊗ B` with `A` of size `n` and `B` of size `N`.
    pub fn kron(a: &CMat, b: &CMat) -> Self {
        BlockMatrix { n: a.nrows(), big_n: b.nrows(), mat: a.kron(b) }
    }

    pub fn from_blocks(n: usize, big_n: usize, f: impl Fn(usize, usize) -> CMat) -> Self {
        let mut mat = Mat::zeros(n * big_n, n * big_n);
        for i in 0..big_n {
            for j in 0..big_n {
                let b = f(i, j);
                for a in 0..n {
                    for c in 0..n {
                        mat[(a * big_n + i, c * big_n + j)] = b[(a, c)];
                    }
                }
            }
        }
        BlockMatrix { n, big_n, mat }
    }

    pub fn inner_dim(&self) -> usize {
        self.n
    }

    pub fn outer_dim(&self) -> usize {
        self.big_n
    }

    pub fn matrix(&self) -> &CMat {
        &self.mat
    }

    pub fn into_matrix(self) -> CMat {
        self.mat
    }

    /// Left matrix coefficient `R_ij`.
    pub fn block(&self, i: usize, j: usize) -> CMat {
        let nn = self.big_n;
        Mat::from_fn(self.n, self.n, |a, c| self.mat[(a * nn + i, c * nn + j)])
    }
}

/// `(Id_n ⊗ Tr_N)[R] = Σ_j R_jj`.
pub fn partial_trace(r: &BlockMatrix) -> CMat {
    let nn = r.big_n;
    Mat::from_fn(r.n, r.n, |a, c| {
        let mut acc = c64::ZERO;
        for j in 0..nn {
            acc += r.mat[(a * nn + j, c * nn + j)];
        }
        acc
    })
}
