//! Pseudo-inverse, null-space completion, saturation and sign.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};

/// Residual tolerance for the identities `B B† = I` and `[B; C][B† F] = I`.
pub const IDENTITY_TOL: f64 = 1e-9;

/// Largest accepted condition number of `B` before it is treated as
/// rank deficient.
pub const MAX_CONDITION: f64 = 1e12;

/// `B`, its right inverse `B†`, and the completion pair `(C, F)` with
/// `[B; C] [B† F] = I`.
#[derive(Clone, Debug)]
pub struct SystemMatrices {
    pub b: DMatrix<f64>,
    pub b_dagger: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub f: DMatrix<f64>,
}

impl SystemMatrices {
    pub fn new(b: DMatrix<f64>) -> Result<Self> {
        let b_dagger = right_pseudo_inverse(&b)?;
        let (c, f) = complete(&b, &b_dagger)?;
        Ok(SystemMatrices { b, b_dagger, c, f })
    }

    pub fn rows(&self) -> usize {
        self.b.nrows()
    }

    pub fn cols(&self) -> usize {
        self.b.ncols()
    }

    /// `z = B† x + F y`.
    pub fn z(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        &self.b_dagger * x + &self.f * y
    }

    /// Max-abs residual of `B B† - I`.
    pub fn right_inverse_residual(&self) -> f64 {
        let m = self.rows();
        (&self.b * &self.b_dagger - DMatrix::identity(m, m)).amax()
    }

    /// Max-abs residual of `[B; C][B† F] - I`.
    pub fn completion_residual(&self) -> f64 {
        let top = stack_rows(&self.b, &self.c);
        let right = stack_cols(&self.b_dagger, &self.f);
        let k = self.cols();
        (top * right - DMatrix::identity(k, k)).amax()
    }

    /// Max-abs entries of `B F` and `C B†`.
    pub fn block_residuals(&self) -> (f64, f64) {
        let bf = if self.f.ncols() == 0 { 0.0 } else { (&self.b * &self.f).amax() };
        let cb = if self.c.nrows() == 0 { 0.0 } else { (&self.c * &self.b_dagger).amax() };
        (bf, cb)
    }

    /// `max_i sum_j |B†_ij|`, the bound on `|(B† sigma)_i|` for sign vectors.
    pub fn dagger_row_sum_max(&self) -> f64 {
        row_abs_sum_max(&self.b_dagger)
    }
}

fn stack_rows(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.view_mut((0, 0), top.shape()).copy_from(top);
    if bottom.nrows() > 0 {
        out.view_mut((top.nrows(), 0), bottom.shape()).copy_from(bottom);
    }
    out
}

fn stack_cols(left: &DMatrix<f64>, right: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(left.nrows(), left.ncols() + right.ncols());
    out.view_mut((0, 0), left.shape()).copy_from(left);
    if right.ncols() > 0 {
        out.view_mut((0, left.ncols()), right.shape()).copy_from(right);
    }
    out
}

pub fn row_abs_sum_max(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|row| row.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Moore-Penrose right inverse `Bᵀ (B Bᵀ)⁻¹` of a full-row-rank matrix.
pub fn right_pseudo_inverse(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (rows, cols) = b.shape();
    if rows == 0 || rows > cols {
        return Err(Error::Numeric(format!(
            "a {rows}x{cols} matrix has no right inverse"
        )));
    }
    let gram = b * b.transpose();
    let eig = gram.clone().symmetric_eigen();
    let hi = eig.eigenvalues.max();
    let lo = eig.eigenvalues.min();
    if !(lo > 0.0) || (hi / lo).sqrt() > MAX_CONDITION {
        return Err(Error::Numeric(format!(
            "matrix is rank deficient (Gram eigenvalues in [{lo:e}, {hi:e}])"
        )));
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Numeric("Gram matrix is not positive definite".into()))?;
    // B† = Bᵀ G⁻¹ = (G⁻¹ B)ᵀ since G is symmetric.
    let dagger = chol.solve(b).transpose();
    let residual = (b * &dagger - DMatrix::identity(rows, rows)).amax();
    if residual > IDENTITY_TOL {
        return Err(Error::Numeric(format!(
            "right-inverse residual {residual:e} exceeds {IDENTITY_TOL:e}"
        )));
    }
    Ok(dagger)
}

/// Completes `B` and `B†` to a square inverse pair.
///
/// `F` is an orthonormal basis of `ker B` and `C = Fᵀ`.
pub fn complete(b: &DMatrix<f64>, b_dagger: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (rows, cols) = b.shape();
    check_len("pseudo-inverse rows", b_dagger.nrows(), cols)?;
    check_len("pseudo-inverse cols", b_dagger.ncols(), rows)?;
    let residual = (b * b_dagger - DMatrix::identity(rows, rows)).amax();
    if residual > IDENTITY_TOL {
        return Err(Error::Structure(format!(
            "B B† differs from I by {residual:e}"
        )));
    }
    let nullity = cols - rows;
    if nullity == 0 {
        return Ok((DMatrix::zeros(0, cols), DMatrix::zeros(cols, 0)));
    }

    // I - B†B projects onto ker B; its unit eigenvectors span the kernel.
    let projector = DMatrix::identity(cols, cols) - b_dagger * b;
    let eig = projector.symmetric_eigen();
    let mut kernel: Vec<usize> = (0..cols).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    if kernel.len() != nullity {
        return Err(Error::Structure(format!(
            "null space has dimension {}, expected {nullity}",
            kernel.len()
        )));
    }
    kernel.sort_unstable();
    let mut f = DMatrix::zeros(cols, nullity);
    for (k, &i) in kernel.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = col.iamax();
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        f.set_column(k, &col);
    }
    let c = f.transpose();
    Ok((c, f))
}

/// Componentwise clamp of `xi` into `[lo, hi]`.
pub fn saturate(xi: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("saturation lower bound", lo.len(), xi.len())?;
    check_len("saturation upper bound", hi.len(), xi.len())?;
    if let Some(i) = (0..xi.len()).find(|&i| lo[i] > hi[i]) {
        return Err(Error::Domain(format!(
            "saturation bound {i}: lower {} exceeds upper {}",
            lo[i], hi[i]
        )));
    }
    Ok(DVector::from_iterator(
        xi.len(),
        (0..xi.len()).map(|i| {
            if xi[i] > hi[i] {
                hi[i]
            } else if xi[i] < lo[i] {
                lo[i]
            } else {
                xi[i]
            }
        }),
    ))
}

/// Componentwise sign with `sgn(0) = 0` (signed zero included).
pub fn sign_vector(x: &DVector<f64>) -> DVector<f64> {
    x.map(sign)
}

pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
