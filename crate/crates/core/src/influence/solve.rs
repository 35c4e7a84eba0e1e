//! Symmetric positive definite solves: a dense Cholesky factorization with
//! iterative refinement, and conjugate gradients as a fallback.

use ndarray::{Array1, Array2};

use super::hessian::LastLayerHessian;
use crate::error::{Error, Result};

/// Relative residual `||Hx - g|| / ||g||` every public solve must meet.
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;

const REFINEMENT_STEPS: usize = 3;

/// Lower-triangular `L` with `H = L L^T`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: Array2<f64>,
}

impl Cholesky {
    pub fn factor(matrix: &Array2<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if matrix.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: matrix.ncols(),
            });
        }
        let mut l = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let mut s = matrix[[i, j]];
                {
                    let li = l.row(i);
                    let lj = l.row(j);
                    for k in 0..j {
                        s -= li[k] * lj[k];
                    }
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite { pivot: i, value: s });
                    }
                    l[[i, i]] = s.sqrt();
                } else {
                    l[[i, j]] = s / l[[j, j]];
                }
            }
        }
        Ok(Cholesky { lower: l })
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Solves `L y = b`.
    pub fn forward(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut y = b.to_vec();
        for i in 0..n {
            let row = self.lower.row(i);
            let mut s = y[i];
            for k in 0..i {
                s -= row[k] * y[k];
            }
            y[i] = s / row[i];
        }
        y
    }

    /// Solves `L^T x = y`.
    pub fn backward(&self, y: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut x = y.to_vec();
        for i in (0..n).rev() {
            let row = self.lower.row(i);
            x[i] /= row[i];
            let xi = x[i];
            for k in 0..i {
                x[k] -= row[k] * xi;
            }
        }
        x
    }

    /// `H^{-1} b` without refinement.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.backward(&self.forward(b))
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(m: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    m.dot(&Array1::from(x.to_vec())).to_vec()
}

/// `||M x - g|| / ||g||`, or `||M x||` when `g = 0`.
pub fn relative_residual(m: &Array2<f64>, x: &[f64], g: &[f64]) -> f64 {
    let hx = matvec(m, x);
    let r: Vec<f64> = hx.iter().zip(g).map(|(a, b)| a - b).collect();
    let gn = norm(g);
    if gn == 0.0 {
        norm(&r)
    } else {
        norm(&r) / gn
    }
}

/// Conjugate gradients on a symmetric positive definite matrix.
pub fn conjugate_gradient(m: &Array2<f64>, g: &[f64], tol: f64, max_iter: usize) -> Vec<f64> {
    let n = g.len();
    let mut x = vec![0.0; n];
    let mut r = g.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let target = tol * norm(g);
    for _ in 0..max_iter {
        if rr.sqrt() <= target {
            break;
        }
        let mp = matvec(m, &p);
        let alpha = rr / dot(&p, &mp);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * mp[i];
        }
        let rr_next = dot(&r, &r);
        let beta = rr_next / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_next;
    }
    x
}

/// A factorized Hessian, reusable across many right-hand sides.
#[derive(Debug, Clone)]
pub struct HessianFactor<'a> {
    pub hessian: &'a LastLayerHessian,
    pub cholesky: Cholesky,
}

impl LastLayerHessian {
    /// Fails with [`Error::NotPositiveDefinite`] when the damping is too small.
    pub fn factor(&self) -> Result<HessianFactor<'_>> {
        Ok(HessianFactor {
            hessian: self,
            cholesky: Cholesky::factor(&self.matrix)?,
        })
    }
}

impl HessianFactor<'_> {
    pub fn dim(&self) -> usize {
        self.cholesky.dim()
    }

    fn check(&self, g: &[f64]) -> Result<()> {
        if g.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: g.len(),
            });
        }
        Ok(())
    }

    /// `g^T H^{-1} g` as `||L^{-1} g||^2`, nonnegative by construction.
    pub fn quadratic(&self, g: &[f64]) -> Result<f64> {
        self.check(g)?;
        let y = self.cholesky.forward(g);
        Ok(dot(&y, &y))
    }

    /// `a^T H^{-1} b` as `(L^{-1} a) . (L^{-1} b)`, symmetric in `a` and `b`.
    pub fn bilinear(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check(a)?;
        self.check(b)?;
        let ya = self.cholesky.forward(a);
        let yb = self.cholesky.forward(b);
        Ok(dot(&ya, &yb))
    }

    /// `H^{-1} g` meeting [`RESIDUAL_TOLERANCE`]: Cholesky, then iterative
    /// refinement, then conjugate gradients if the residual is still large.
    pub fn solve(&self, g: &[f64]) -> Result<Vec<f64>> {
        self.check(g)?;
        if g.iter().all(|&v| v == 0.0) {
            return Ok(vec![0.0; g.len()]);
        }
        let m = &self.hessian.matrix;
        let mut x = self.cholesky.solve(g);
        let mut res = relative_residual(m, &x, g);
        for _ in 0..REFINEMENT_STEPS {
            if res <= RESIDUAL_TOLERANCE {
                return Ok(x);
            }
            let hx = matvec(m, &x);
            let r: Vec<f64> = g.iter().zip(&hx).map(|(a, b)| a - b).collect();
            let dx = self.cholesky.solve(&r);
            x.iter_mut().zip(dx).for_each(|(xi, d)| *xi += d);
            res = relative_residual(m, &x, g);
        }
        if res <= RESIDUAL_TOLERANCE {
            return Ok(x);
        }
        let cg = conjugate_gradient(m, g, RESIDUAL_TOLERANCE * 0.1, 10 * g.len());
        let cg_res = relative_residual(m, &cg, g);
        if cg_res <= RESIDUAL_TOLERANCE {
            return Ok(cg);
        }
        Err(Error::SolveDidNotConverge {
            target: RESIDUAL_TOLERANCE,
            achieved: res.min(cg_res),
        })
    }
}

/// One-shot `H^{-1} g`.
pub fn solve(hessian: &LastLayerHessian, g: &[f64]) -> Result<Vec<f64>> {
    hessian.factor()?.solve(g)
}
