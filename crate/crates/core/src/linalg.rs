//! Small dense linear-algebra helpers on top of `nalgebra`, plus a few
//! slice kernels used inside the simulation loops.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Orthonormal basis for the column space of `p`, built by Gram-Schmidt
/// that always takes the remaining column with the largest residual norm.
/// Ties go to the lower column index. Stops after `rank` vectors.
pub fn pivoted_gram_schmidt(p: &DMatrix<f64>, rank: usize) -> DMatrix<f64> {
    let n = p.nrows();
    let mut residual: Vec<DVector<f64>> =
        (0..p.ncols()).map(|j| p.column(j).into_owned()).collect();
    let mut used = vec![false; p.ncols()];
    let mut basis = DMatrix::zeros(n, rank);
    for k in 0..rank {
        let mut best = None;
        let mut best_norm = -1.0;
        for (j, r) in residual.iter().enumerate() {
            if used[j] {
                continue;
            }
            let norm = r.norm();
            if norm > best_norm {
                best_norm = norm;
                best = Some(j);
            }
        }
        let Some(j) = best else { break };
        used[j] = true;
        let q = &residual[j] / best_norm;
        for (i, r) in residual.iter_mut().enumerate() {
            if !used[i] {
                let c = q.dot(r);
                r.axpy(-c, &q, 1.0);
            }
        }
        basis.set_column(k, &q);
    }
    basis
}

/// Nearest orthogonal matrix `u (uᵀu)^{-1/2}`.
pub fn polar_orthogonalize(u: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = u.transpose() * u;
    let eig = SymmetricEigen::new(gram);
    let inv_sqrt = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|l| 1.0 / l.sqrt()),
    );
    let v = &eig.eigenvectors;
    u * v * DMatrix::from_diagonal(&inv_sqrt) * v.transpose()
}

/// `max |uᵀu - I|` entrywise.
pub fn orthogonality_drift(u: &DMatrix<f64>) -> f64 {
    let g = u.transpose() * u;
    let mut worst: f64 = 0.0;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

/// Exponential of a symmetric matrix via its eigendecomposition.
pub fn sym_expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let e = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|l| l.exp()),
    );
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&e) * v.transpose()
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues_ascending(a: &DMatrix<f64>) -> Vec<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let mut vals: Vec<f64> = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    vals.sort_by(|x, y| x.total_cmp(y));
    vals
}

/// Largest entrywise deviation between two matrices.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Angle in `(-π, π]` of a 2×2 rotation (the orthogonal part is assumed).
pub fn rotation_angle_2x2(r: &DMatrix<f64>) -> f64 {
    r[(1, 0)].atan2(r[(0, 0)])
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut x = a.rem_euclid(two_pi);
    if x > std::f64::consts::PI {
        x -= two_pi;
    }
    x
}

/// One Björck step `u ← u (3I - uᵀu) / 2` on a column-major `n × n` slice.
/// Returns the drift `max |uᵀu - I|` measured before the step.
pub(crate) fn bjorck_step(u: &mut [f64], n: usize, scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    scratch.resize(2 * n * n, 0.0);
    let (g, out) = scratch.split_at_mut(n * n);
    let mut drift: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let v = dot(&u[i * n..(i + 1) * n], &u[j * n..(j + 1) * n]);
            g[j * n + i] = v;
            drift = drift.max((v - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    for c in 0..n {
        for r in 0..n {
            let mut s = 1.5 * u[c * n + r];
            for k in 0..n {
                s -= 0.5 * u[k * n + r] * g[c * n + k];
            }
            out[c * n + r] = s;
        }
    }
    u.copy_from_slice(out);
    drift
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
