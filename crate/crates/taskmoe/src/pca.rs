//! Principal component analysis via power iteration with deflation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAX_ITER: usize = 10_000;

/// Top-k eigenpairs of a symmetric matrix by power iteration, deflating
/// `a := a − λ v vᵀ` after each component. `tol` bounds the change in the
/// eigenvector between iterations.
pub fn sym_eigen_top<S: Scalar>(
    a: &Tensor<S>,
    k: usize,
    tol: S,
) -> Result<Vec<(S, Tensor<S>)>> {
    let (n, m) = a.dims2()?;
    if n != m {
        return Err(Error::shape(format!("matrix is {n}x{m}, expected square")));
    }
    if k > n {
        return Err(Error::config(format!("asked for {k} eigenpairs of a {n}x{n} matrix")));
    }
    let tiny = S::from_f64_lossy(1e-300);
    let mut work = a.clone();
    let mut out = Vec::with_capacity(k);
    for comp in 0..k {
        // Deterministic starts: all-ones first, then each basis vector.
        // A start can sit in the null space (or be orthogonal to the
        // dominant eigenvector), so several candidates are tried before
        // the remaining spectrum is declared zero.
        let mut found: Option<Tensor<S>> = None;
        let mut stalled = false;
        'candidates: for cand in 0..=n {
            let mut v = if cand == 0 {
                normalized(&Tensor::full(&[n], S::one()))
            } else {
                basis_vector(n, cand - 1)
            };
            for iter in 0..MAX_ITER {
                let av = matvec(&work, &v);
                let norm = l2(&av);
                if norm < tiny {
                    continue 'candidates;
                }
                let av = av.scale(S::one() / norm);
                let delta = v
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&x, &y)| (x - y).abs().min((x + y).abs()))
                    .fold(S::zero(), |acc, d| acc.max(d));
                v = av;
                if delta < tol && iter > 0 {
                    found = Some(v);
                    break 'candidates;
                }
            }
            stalled = true;
        }
        match found {
            Some(v) => {
                let av = matvec(&work, &v);
                let lambda = v.dot(&av);
                let v = canonical_sign(v);
                for i in 0..n {
                    for j in 0..n {
                        let upd = work.at(i, j) - lambda * v.data()[i] * v.data()[j];
                        work.set(i, j, upd);
                    }
                }
                out.push((lambda, v));
            }
            None if stalled => {
                return Err(Error::numeric("power iteration did not converge"));
            }
            None => {
                // Every start collapsed: nothing left but zeros.
                out.push((S::zero(), basis_vector(n, comp)));
            }
        }
    }
    Ok(out)
}

fn basis_vector<S: Scalar>(n: usize, i: usize) -> Tensor<S> {
    let mut v = Tensor::zeros(&[n]);
    v.data_mut()[i.min(n - 1)] = S::one();
    v
}

fn matvec<S: Scalar>(a: &Tensor<S>, v: &Tensor<S>) -> Tensor<S> {
    let (n, m) = a.dims2().unwrap();
    let mut out = Tensor::zeros(&[n]);
    for i in 0..n {
        let mut acc = S::zero();
        for j in 0..m {
            acc = acc + a.at(i, j) * v.data()[j];
        }
        out.data_mut()[i] = acc;
    }
    out
}

fn l2<S: Scalar>(v: &Tensor<S>) -> S {
    v.data().iter().map(|&x| x * x).sum::<S>().sqrt()
}

fn normalized<S: Scalar>(v: &Tensor<S>) -> Tensor<S> {
    let n = l2(v);
    v.scale(S::one() / n)
}

/// Fix the overall sign so the largest-magnitude entry is positive.
fn canonical_sign<S: Scalar>(v: Tensor<S>) -> Tensor<S> {
    let mut best = 0usize;
    for (i, x) in v.data().iter().enumerate() {
        if x.abs() > v.data()[best].abs() {
            best = i;
        }
    }
    if v.data()[best] < S::zero() {
        v.scale(-S::one())
    } else {
        v
    }
}

/// Project the K rows of `rows` onto their top `d_out` principal
/// directions. Columns are centered first. Requires `K > d_out >= 1`.
///
/// The decomposition runs on the K×K Gram matrix of the centered rows,
/// which has the same nonzero spectrum as the feature covariance; scores
/// come out directly as `u √λ` per component.
pub fn pca_reduce<S: Scalar>(rows: &Tensor<S>, d_out: usize) -> Result<Tensor<S>> {
    let (k, p) = rows.dims2()?;
    if d_out < 1 || k <= d_out {
        return Err(Error::config(format!(
            "pca needs more rows than output dims (rows {k}, d_out {d_out})"
        )));
    }
    let mut centered = rows.clone();
    for j in 0..p {
        let mean = (0..k)
            .map(|i| rows.at(i, j))
            .sum::<S>()
            / S::from_usize(k).unwrap();
        for i in 0..k {
            centered.set(i, j, rows.at(i, j) - mean);
        }
    }
    let gram = centered.matmul_nt(&centered)?;
    let tol = S::from_f64_lossy(1e-10);
    let pairs = sym_eigen_top(&gram, d_out, tol)?;
    let mut scores = Tensor::zeros(&[k, d_out]);
    for (c, (lambda, u)) in pairs.iter().enumerate() {
        let scale = lambda.max(S::zero()).sqrt();
        for i in 0..k {
            scores.set(i, c, u.data()[i] * scale);
        }
    }
    Ok(scores)
}
