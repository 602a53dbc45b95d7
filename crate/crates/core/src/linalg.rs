//! Dense kernels that run outside the autodiff tape.

use crate::error::{MateError, Result};
use crate::tensor::{softmax, Tensor};

const MAX_SWEEPS: usize = 100;

/// `A = U · diag(S) · Vᵀ` with orthogonal `U`, `V` and descending `S`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

impl SvdFactors {
    pub fn dim(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Tensor {
        let n = self.dim();
        let mut out = vec![0.0; n * n];
        for k in 0..n {
            let sk = self.s[k];
            for i in 0..n {
                let uik = self.u.get2(i, k) * sk;
                if uik == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += uik * self.v.get2(j, k);
                }
            }
        }
        Tensor::matrix(n, n, out).expect("square")
    }
}

/// Singular value decomposition of a square matrix by one-sided Jacobi
/// rotations.
///
/// Columns are ordered by descending singular value (ties keep the original
/// column order) and each column of `U` has its largest-magnitude entry
/// made nonnegative, with the matching column of `V` flipped alongside.
/// Identical input bits give identical output bits.
pub fn svd(a: &Tensor) -> Result<SvdFactors> {
    let (rows, cols) = a
        .dims2("svd")
        .map_err(|_| MateError::param(format!("svd needs a matrix, got {:?}", a.shape())))?;
    if rows != cols {
        return Err(MateError::param(format!(
            "svd needs a square matrix, got {rows}x{cols}"
        )));
    }
    if !a.is_finite() {
        return Err(MateError::param("svd input has non-finite entries"));
    }
    let n = rows;

    // Column-major working copies: w[j] is column j of A·V.
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| a.get2(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let tol = f64::EPSILON;
    // Columns below this squared norm are rounding noise of a null direction.
    let frob2: f64 = a.data().iter().map(|x| x * x).sum();
    let negligible = frob2 * (n as f64 * f64::EPSILON).powi(2);
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma == 0.0
                    || gamma.abs() <= tol * (alpha * beta).sqrt()
                    || alpha.min(beta) <= negligible
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(MateError::numeric(format!(
            "jacobi svd did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let sigma: Vec<f64> = w.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the original column order on ties.
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).expect("finite"));

    let smax = order.first().map(|&i| sigma[i]).unwrap_or(0.0);
    let null_tol = smax * n as f64 * f64::EPSILON;
    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut v_cols = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for &j in &order {
        s.push(sigma[j]);
        v_cols.push(v[j].clone());
        if sigma[j] > null_tol && sigma[j] > 0.0 {
            u_cols.push(Some(w[j].iter().map(|x| x / sigma[j]).collect()));
        } else {
            u_cols.push(None);
        }
    }
    let mut u_cols = complete_basis(u_cols, n);

    for (uc, vc) in u_cols.iter_mut().zip(v_cols.iter_mut()) {
        let mut best = 0;
        for i in 1..n {
            if uc[i].abs() > uc[best].abs() {
                best = i;
            }
        }
        if uc[best] < 0.0 {
            uc.iter_mut().for_each(|x| *x = -*x);
            vc.iter_mut().for_each(|x| *x = -*x);
        }
    }

    Ok(SvdFactors {
        u: from_columns(&u_cols),
        s,
        v: from_columns(&v_cols),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills `None` columns with unit vectors orthogonal to every other column,
/// drawn from the standard basis by two passes of Gram-Schmidt.
fn complete_basis(cols: Vec<Option<Vec<f64>>>, n: usize) -> Vec<Vec<f64>> {
    let mut done: Vec<Vec<f64>> = Vec::with_capacity(n);
    let known: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut candidate = 0;
    let mut out = Vec::with_capacity(n);
    for col in cols {
        match col {
            Some(c) => out.push(c),
            None => loop {
                let mut e = vec![0.0; n];
                e[candidate % n] = 1.0;
                candidate += 1;
                for _ in 0..2 {
                    for basis in known.iter().chain(done.iter()) {
                        let proj = dot(&e, basis);
                        e.iter_mut().zip(basis).for_each(|(x, b)| *x -= proj * b);
                    }
                }
                let norm = dot(&e, &e).sqrt();
                if norm > 1e-8 {
                    e.iter_mut().for_each(|x| *x /= norm);
                    done.push(e.clone());
                    out.push(e);
                    break;
                }
            },
        }
    }
    out
}

fn from_columns(cols: &[Vec<f64>]) -> Tensor {
    let n = cols.len();
    let mut data = vec![0.0; n * n];
    for (j, col) in cols.iter().enumerate() {
        for (i, x) in col.iter().enumerate() {
            data[i * n + j] = *x;
        }
    }
    Tensor::matrix(n, n, data).expect("square")
}

/// Softmax applied independently to every row of a matrix.
pub fn row_softmax(a: &Tensor) -> Result<Tensor> {
    a.dims2("row_softmax")?;
    softmax(a, 1.0)
}

/// Arithmetic mean of equal-length vectors.
pub fn corpus_mean(xs: &[Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| MateError::param("corpus mean of an empty list"))?;
    let d = first.numel();
    let mut acc = vec![0.0; d];
    for x in xs {
        if x.numel() != d {
            return Err(MateError::Shape {
                op: "corpus_mean",
                lhs: first.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        acc.iter_mut().zip(x.data()).for_each(|(a, v)| *a += v);
    }
    let m = xs.len() as f64;
    Ok(Tensor::vector(acc.into_iter().map(|a| a / m).collect()))
}
