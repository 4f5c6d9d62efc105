//! Dense small-matrix kernels: symmetric and generalized eigenproblems,
//! nullspaces, principal angles, central finite differences and
//! golden-section search.
//!
//! Everything is double precision on `nalgebra` dynamic matrices. Matrices
//! here are small (a few hundred rows at most), so all routines are direct.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default relative rank tolerance for nullspace and orthonormalization.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Relative asymmetry accepted by [`sym_eig`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Eigen-decomposition of a symmetric matrix, ascending.
#[derive(Debug, Clone)]
pub struct SymSpectrum {
    pub eigenvalues: DVector<f64>,
    /// Eigenvectors as columns, in the same order as `eigenvalues`.
    pub eigenvectors: DMatrix<f64>,
}

impl SymSpectrum {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn values(&self) -> Vec<f64> {
        self.eigenvalues.iter().copied().collect()
    }
}

/// Orthonormal basis of a subspace, stored as matrix columns.
#[derive(Debug, Clone)]
pub struct SubspaceBasis {
    pub columns: DMatrix<f64>,
    pub tol_used: f64,
}

impl SubspaceBasis {
    pub fn dim(&self) -> usize {
        self.columns.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.columns.nrows()
    }

    pub fn empty(ambient: usize, tol_used: f64) -> Self {
        SubspaceBasis { columns: DMatrix::zeros(ambient, 0), tol_used }
    }

    /// Orthogonal projector `U Uᵀ` onto the subspace.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.columns * self.columns.transpose()
    }

    /// Projects `v` onto the subspace.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.columns * (self.columns.transpose() * v)
    }
}

pub fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

fn check_square(a: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

fn check_symmetric(a: &DMatrix<f64>) -> Result<()> {
    check_square(a, "matrix")?;
    let asym = max_asymmetry(a);
    let scale = a.amax().max(f64::MIN_POSITIVE);
    if asym > SYMMETRY_TOL * scale.max(1.0) {
        return Err(Error::NotSymmetric { max_asymmetry: asym });
    }
    Ok(())
}

/// Flips each column so that its first entry of non-negligible magnitude is
/// positive.
fn normalize_signs(v: &mut DMatrix<f64>) {
    for mut col in v.column_iter_mut() {
        let scale = col.amax();
        if scale == 0.0 {
            continue;
        }
        if let Some(first) = col.iter().copied().find(|x| x.abs() > 1e-10 * scale) {
            if first < 0.0 {
                col.neg_mut();
            }
        }
    }
}

/// Symmetric eigen-decomposition with ascending eigenvalues and the
/// first-nonzero-entry-positive sign convention on eigenvectors.
pub fn sym_eig(a: &DMatrix<f64>) -> Result<SymSpectrum> {
    check_symmetric(a)?;
    let n = a.nrows();
    if n == 0 {
        return Ok(SymSpectrum { eigenvalues: DVector::zeros(0), eigenvectors: DMatrix::zeros(0, 0) });
    }
    // Symmetrize exactly so the solver sees a symmetric input.
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    normalize_signs(&mut eigenvectors);
    Ok(SymSpectrum { eigenvalues, eigenvectors })
}

/// Eigenvalues only, ascending.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    Ok(sym_eig(a)?.values())
}

/// Full right-singular decomposition of `a`: singular values (descending)
/// and all `ncols` right singular vectors as columns of `v`. Missing
/// singular values (when `a` is wide) are reported as zero.
fn full_right_svd(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (rows, cols) = a.shape();
    if cols == 0 {
        return (Vec::new(), DMatrix::zeros(0, 0));
    }
    // Pad with zero rows so that the SVD returns a complete set of right
    // singular vectors.
    let padded = if rows < cols {
        let mut p = DMatrix::zeros(cols, cols);
        p.view_mut((0, 0), (rows, cols)).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let values: Vec<f64> = order.iter().map(|&i| sv[i]).collect();
    let mut v = DMatrix::zeros(cols, order.len());
    for (dst, &src) in order.iter().enumerate() {
        v.set_column(dst, &v_t.row(src).transpose());
    }
    (values, v)
}

/// Singular values in descending order.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    if a.is_empty() {
        return Vec::new();
    }
    let mut sv: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Orthonormal basis of `{x : A x ≈ 0}`: right singular vectors whose
/// singular value is at most `tol · σ_max`. The zero matrix yields the whole
/// space.
pub fn nullspace(a: &DMatrix<f64>, tol: f64) -> Result<SubspaceBasis> {
    if !(tol > 0.0) {
        return Err(Error::Validation(format!("nullspace tolerance must be positive, got {tol}")));
    }
    let cols = a.ncols();
    let (sv, v) = full_right_svd(a);
    let sigma_max = sv.first().copied().unwrap_or(0.0);
    let keep: Vec<usize> = (0..cols).filter(|&i| sv[i] <= tol * sigma_max).collect();
    let mut basis = DMatrix::zeros(cols, keep.len());
    for (dst, &src) in keep.iter().enumerate() {
        basis.set_column(dst, &v.column(src));
    }
    normalize_signs(&mut basis);
    Ok(SubspaceBasis { columns: basis, tol_used: tol })
}

/// Numerical rank with relative tolerance.
pub fn rank(a: &DMatrix<f64>, tol: f64) -> usize {
    let sv = singular_values(a);
    let sigma_max = sv.first().copied().unwrap_or(0.0);
    if sigma_max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * sigma_max).count()
}

/// Orthonormal basis of the column span of `a` (relative rank tolerance).
pub fn orthonormal_span(a: &DMatrix<f64>, tol: f64) -> SubspaceBasis {
    let rows = a.nrows();
    if a.ncols() == 0 || a.amax() == 0.0 {
        return SubspaceBasis::empty(rows, tol);
    }
    let svd = a.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let sv = &svd.singular_values;
    let sigma_max = sv.iter().copied().fold(0.0, f64::max);
    let mut keep: Vec<usize> = (0..sv.len()).filter(|&i| sv[i] > tol * sigma_max).collect();
    keep.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let mut basis = DMatrix::zeros(rows, keep.len());
    for (dst, &src) in keep.iter().enumerate() {
        basis.set_column(dst, &u.column(src));
    }
    normalize_signs(&mut basis);
    SubspaceBasis { columns: basis, tol_used: tol }
}

/// Orthonormal basis of the Euclidean orthogonal complement of `basis`.
pub fn orthogonal_complement(basis: &SubspaceBasis) -> Result<SubspaceBasis> {
    let ambient = basis.ambient_dim();
    if basis.dim() == 0 {
        return Ok(SubspaceBasis { columns: DMatrix::identity(ambient, ambient), tol_used: basis.tol_used });
    }
    nullspace(&basis.columns.transpose(), basis.tol_used.max(DEFAULT_RANK_TOL))
}

/// Principal angles between two subspaces, ascending, in `[0, π/2]`.
pub fn principal_angles(u: &SubspaceBasis, w: &SubspaceBasis) -> Result<Vec<f64>> {
    if u.ambient_dim() != w.ambient_dim() {
        return Err(Error::Dimension(format!(
            "principal angles need equal ambient dimension ({} vs {})",
            u.ambient_dim(),
            w.ambient_dim()
        )));
    }
    let k = u.dim().min(w.dim());
    if k == 0 {
        return Ok(Vec::new());
    }
    // acos loses half the digits near 0, so small angles come from the
    // sines: singular values of the part of the smaller basis outside the
    // larger one.
    let (small, large) = if u.dim() <= w.dim() { (u, w) } else { (w, u) };
    let cross = small.columns.transpose() * &large.columns;
    let cosines = singular_values(&cross);
    let residual = &small.columns - &large.columns * &cross.transpose();
    let mut sines = singular_values(&residual);
    sines.reverse();
    let angles: Vec<f64> = (0..k)
        .map(|i| {
            let c = cosines[i].clamp(0.0, 1.0);
            if c * c >= 0.5 {
                sines[i].clamp(0.0, 1.0).asin()
            } else {
                c.acos()
            }
        })
        .collect();
    Ok(angles)
}

/// Generalized symmetric eigenproblem `A x = λ B x` with `B` positive
/// definite. Eigenvectors are `B`-orthonormal.
pub fn gen_sym_eig(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<SymSpectrum> {
    check_symmetric(a)?;
    check_symmetric(b)?;
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("pencil shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let b_spec = sym_eig(b)?;
    let (lmin, lmax) = (b_spec.min(), b_spec.max());
    if b.nrows() > 0 && !(lmin > 1e-12 * lmax && lmax > 0.0) {
        return Err(Error::NotPositiveDefinite { lambda_min: lmin });
    }
    // B = V diag(μ) Vᵀ, so B^{-1/2} = V diag(μ^{-1/2}) Vᵀ.
    let inv_sqrt = DVector::from_iterator(b_spec.len(), b_spec.eigenvalues.iter().map(|&l| l.sqrt().recip()));
    let v = &b_spec.eigenvectors;
    let b_inv_sqrt = v * DMatrix::from_diagonal(&inv_sqrt) * v.transpose();
    let c = &b_inv_sqrt * a * &b_inv_sqrt;
    let c = (&c + c.transpose()) * 0.5;
    let inner = sym_eig(&c)?;
    let mut vectors = &b_inv_sqrt * inner.eigenvectors;
    normalize_signs(&mut vectors);
    Ok(SymSpectrum { eigenvalues: inner.eigenvalues, eigenvectors: vectors })
}

/// Default central-difference step `1e-5 · max(1, ‖x‖_∞)`.
pub fn default_fd_step(x: &DVector<f64>) -> f64 {
    1e-5 * x.amax().max(1.0)
}

/// Central-difference gradient of a scalar field.
pub fn fd_gradient<F>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let mut g = DVector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        g[i] = (up - down) / (2.0 * h);
    }
    g
}

/// Central-difference Jacobian of a vector field; column `i` is `∂F/∂x_i`.
pub fn fd_jacobian<F>(f: F, x: &DVector<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut probe = x.clone();
    let mut cols = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        cols.push((up - down) / (2.0 * h));
    }
    if cols.is_empty() {
        let rows = f(x).len();
        return DMatrix::zeros(rows, 0);
    }
    DMatrix::from_columns(&cols)
}

/// Golden-section minimization of a unimodal function on `[lo, hi]`.
/// Returns `(argmin, min)`; the argmin is bracketed to within `tol`.
pub fn minimize_1d<F>(f: F, lo: f64, hi: f64, tol: f64) -> Result<(f64, f64)>
where
    F: Fn(f64) -> f64,
{
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Validation(format!("invalid bracket [{lo}, {hi}]")));
    }
    if !(tol > 0.0) {
        return Err(Error::Validation(format!("tolerance must be positive, got {tol}")));
    }
    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    let fx = f(x);
    // Return the best point seen at the final bracket.
    let best = [(x, fx), (c, fc), (d, fd)]
        .into_iter()
        .min_by(|p, q| p.1.total_cmp(&q.1))
        .expect("non-empty");
    Ok(best)
}
