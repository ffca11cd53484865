//! Linear-solver kernels for the per-step implicit systems: a direct solver
//! for periodic block-tridiagonal matrices (1D meshes) and a restarted,
//! right-preconditioned GMRES for the matrix-free 2D path.

use crate::error::{Result, SolverError};
use nalgebra::{DMatrix, DVector};

type Lu = nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>;

/// Periodic block-tridiagonal system
/// A_e x_{e-1} + D_e x_e + B_e x_{e+1} = rhs_e (indices mod n).
pub struct BlockTriPeriodic {
    pub n: usize,
    pub block: usize,
    pub lower: Vec<DMatrix<f64>>,
    pub diag: Vec<DMatrix<f64>>,
    pub upper: Vec<DMatrix<f64>>,
}

enum FactorKind {
    /// Small systems (n <= 2): plain dense LU of the gathered matrix.
    Dense(Lu),
    /// Bordered block-Thomas: the chain 0..n-2 is solved as an affine
    /// function of the border unknown x_{n-1}.
    Chain {
        t_lu: Vec<Lu>,
        /// Elimination multipliers L_e = A_e T_{e-1}^{-1} for e = 1..n-2.
        l: Vec<DMatrix<f64>>,
        /// x_e = u_e + V_e x_border during back substitution.
        v: Vec<DMatrix<f64>>,
        upper_chain: Vec<DMatrix<f64>>,
        border_lu: Lu,
        a_last: DMatrix<f64>,
        b_last: DMatrix<f64>,
    },
}

pub struct BlockTriFactor {
    n: usize,
    block: usize,
    kind: FactorKind,
}

impl BlockTriPeriodic {
    pub fn factor(&self) -> Result<BlockTriFactor> {
        let (n, s) = (self.n, self.block);
        assert!(n >= 1 && self.diag.len() == n);
        if n <= 2 {
            let mut full = DMatrix::zeros(n * s, n * s);
            for e in 0..n {
                let prev = (e + n - 1) % n;
                let next = (e + 1) % n;
                add_block(&mut full, e, e, &self.diag[e], s);
                add_block(&mut full, e, prev, &self.lower[e], s);
                add_block(&mut full, e, next, &self.upper[e], s);
            }
            let lu = full.lu();
            if lu.determinant() == 0.0 {
                return Err(SolverError::NumericalFailure(
                    "singular step system (dense fallback)".into(),
                ));
            }
            return Ok(BlockTriFactor {
                n,
                block: s,
                kind: FactorKind::Dense(lu),
            });
        }

        // Chain rows 0..n-2 with border coupling: row 0 couples to the border
        // through its lower block, row n-2 through its upper block.
        let chain = n - 1;
        let mut t: Vec<DMatrix<f64>> = Vec::with_capacity(chain);
        let mut w: Vec<DMatrix<f64>> = Vec::with_capacity(chain);
        let mut l: Vec<DMatrix<f64>> = Vec::with_capacity(chain.saturating_sub(1));
        let mut t_lu: Vec<Lu> = Vec::with_capacity(chain);
        t.push(self.diag[0].clone());
        w.push(self.lower[0].clone());
        t_lu.push(t[0].clone().lu());
        for e in 1..chain {
            // Elimination multiplier L_e = A_e T_{e-1}^{-1}.
            let t_inv = t[e - 1].clone().try_inverse().ok_or_else(|| {
                SolverError::NumericalFailure("singular pivot block in periodic solve".into())
            })?;
            let le = &self.lower[e] * &t_inv;
            t.push(&self.diag[e] - &le * &self.upper[e - 1]);
            let mut we = &le * &w[e - 1] * -1.0;
            if e == chain - 1 {
                we += &self.upper[e];
            }
            w.push(we);
            l.push(le);
            t_lu.push(t[e].clone().lu());
        }
        // Affine back substitution for the border-coupling matrices:
        // V_{n-2} = -T^{-1} W, V_e = -T_e^{-1} (W_e + B_e V_{e+1}).
        let mut v = vec![DMatrix::zeros(s, s); chain];
        let last = chain - 1;
        v[last] = t_lu[last]
            .solve(&w[last])
            .ok_or_else(|| SolverError::NumericalFailure("singular pivot block".into()))?
            * -1.0;
        for e in (0..last).rev() {
            let rhs = &w[e] + &self.upper[e] * &v[e + 1];
            v[e] = t_lu[e]
                .solve(&rhs)
                .ok_or_else(|| SolverError::NumericalFailure("singular pivot block".into()))?
                * -1.0;
        }
        // Border system: (D + A_{n-1} V_{n-2} + B_{n-1} V_0) x_b = ...
        let border = &self.diag[n - 1] + &self.lower[n - 1] * &v[last] + &self.upper[n - 1] * &v[0];
        let border_lu = border.lu();
        if border_lu.determinant() == 0.0 {
            return Err(SolverError::NumericalFailure(
                "singular border block in periodic solve".into(),
            ));
        }
        Ok(BlockTriFactor {
            n,
            block: s,
            kind: FactorKind::Chain {
                t_lu,
                l,
                v,
                upper_chain: self.upper[..chain].to_vec(),
                border_lu,
                a_last: self.lower[n - 1].clone(),
                b_last: self.upper[n - 1].clone(),
            },
        })
    }
}

fn add_block(full: &mut DMatrix<f64>, row: usize, col: usize, blk: &DMatrix<f64>, s: usize) {
    for i in 0..s {
        for j in 0..s {
            full[(row * s + i, col * s + j)] += blk[(i, j)];
        }
    }
}

impl BlockTriFactor {
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let s = self.block;
        let n = self.n;
        assert_eq!(rhs.len(), n * s);
        match &self.kind {
            FactorKind::Dense(lu) => {
                let b = DVector::from_column_slice(rhs);
                let x = lu
                    .solve(&b)
                    .ok_or_else(|| SolverError::NumericalFailure("dense solve failed".into()))?;
                Ok(x.as_slice().to_vec())
            }
            FactorKind::Chain {
                t_lu,
                l,
                v,
                upper_chain,
                border_lu,
                a_last,
                b_last,
            } => {
                let chain = n - 1;
                // Forward sweep on the right-hand side.
                let mut r: Vec<DVector<f64>> = (0..chain)
                    .map(|e| DVector::from_column_slice(&rhs[e * s..(e + 1) * s]))
                    .collect();
                for e in 1..chain {
                    let correction = &l[e - 1] * &r[e - 1];
                    r[e] -= correction;
                }
                // Back substitution for the affine offsets u_e.
                let mut u = vec![DVector::zeros(s); chain];
                u[chain - 1] = t_lu[chain - 1]
                    .solve(&r[chain - 1])
                    .ok_or_else(|| SolverError::NumericalFailure("back substitution".into()))?;
                for e in (0..chain - 1).rev() {
                    let rhs_e = &r[e] - &upper_chain[e] * &u[e + 1];
                    u[e] = t_lu[e]
                        .solve(&rhs_e)
                        .ok_or_else(|| SolverError::NumericalFailure("back substitution".into()))?;
                }
                // Border solve.
                let rb = DVector::from_column_slice(&rhs[(n - 1) * s..]);
                let rhs_b = rb - a_last * &u[chain - 1] - b_last * &u[0];
                let xb = border_lu
                    .solve(&rhs_b)
                    .ok_or_else(|| SolverError::NumericalFailure("border solve".into()))?;
                let mut out = vec![0.0; n * s];
                for e in 0..chain {
                    let xe = &u[e] + &v[e] * &xb;
                    out[e * s..(e + 1) * s].copy_from_slice(xe.as_slice());
                }
                out[(n - 1) * s..].copy_from_slice(xb.as_slice());
                Ok(out)
            }
        }
    }
}

/// Outcome of a converged GMRES solve.
pub struct GmresStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Restarted GMRES with right preconditioning. `apply` is the system
/// operator, `precond` an approximate inverse; both map a slice to a
/// preallocated output slice. Convergence is on the true relative residual.
pub fn gmres<A, P>(
    apply: A,
    precond: P,
    b: &[f64],
    x0: Option<&[f64]>,
    tol_rel: f64,
    restart: usize,
    max_iter: usize,
) -> Result<(Vec<f64>, GmresStats)>
where
    A: Fn(&[f64], &mut [f64]),
    P: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let bnorm = norm(b);
    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    if bnorm == 0.0 {
        return Ok((
            vec![0.0; n],
            GmresStats {
                iterations: 0,
                relative_residual: 0.0,
            },
        ));
    }
    let mut scratch = vec![0.0; n];
    let mut total_iters = 0usize;
    let mut r = vec![0.0; n];
    loop {
        apply(&x, &mut scratch);
        for i in 0..n {
            r[i] = b[i] - scratch[i];
        }
        let beta = norm(&r);
        if beta <= tol_rel * bnorm {
            return Ok((
                x,
                GmresStats {
                    iterations: total_iters,
                    relative_residual: beta / bnorm,
                },
            ));
        }
        if total_iters >= max_iter {
            return Err(SolverError::NumericalFailure(format!(
                "GMRES stalled: relative residual {:.3e} after {total_iters} iterations (target {tol_rel:.1e})",
                beta / bnorm
            )));
        }
        // Arnoldi with modified Gram-Schmidt and Givens rotations.
        let m = restart;
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
        basis.push(r.iter().map(|v| v / beta).collect());
        let mut h = vec![vec![0.0; m]; m + 1];
        let mut cs = vec![0.0; m];
        let mut sn = vec![0.0; m];
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for j in 0..m {
            precond(&basis[j], &mut scratch);
            let z = scratch.clone();
            let mut w = vec![0.0; n];
            apply(&z, &mut w);
            for (i, vi) in basis.iter().enumerate().take(j + 1) {
                let hij = dot(&w, vi);
                h[i][j] = hij;
                for (wk, vk) in w.iter_mut().zip(vi) {
                    *wk -= hij * vk;
                }
            }
            let hn = norm(&w);
            h[j + 1][j] = hn;
            // Apply accumulated rotations to the new column.
            for i in 0..j {
                let t = cs[i] * h[i][j] + sn[i] * h[i + 1][j];
                h[i + 1][j] = -sn[i] * h[i][j] + cs[i] * h[i + 1][j];
                h[i][j] = t;
            }
            let denom = (h[j][j] * h[j][j] + hn * hn).sqrt();
            if denom == 0.0 {
                k_used = j;
                break;
            }
            cs[j] = h[j][j] / denom;
            sn[j] = hn / denom;
            h[j][j] = denom;
            g[j + 1] = -sn[j] * g[j];
            g[j] *= cs[j];
            total_iters += 1;
            k_used = j + 1;
            if hn == 0.0 || g[j + 1].abs() <= tol_rel * bnorm || total_iters >= max_iter {
                break;
            }
            basis.push(w.iter().map(|v| v / hn).collect());
        }
        // Solve the small triangular system and update x.
        let k = k_used;
        if k == 0 {
            return Err(SolverError::NumericalFailure(
                "GMRES breakdown with zero Krylov step".into(),
            ));
        }
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let mut acc = g[i];
            for j in (i + 1)..k {
                acc -= h[i][j] * y[j];
            }
            y[i] = acc / h[i][i];
        }
        let mut correction = vec![0.0; n];
        for (j, yj) in y.iter().enumerate() {
            for (c, v) in correction.iter_mut().zip(&basis[j]) {
                *c += yj * v;
            }
        }
        precond(&correction, &mut scratch);
        for (xi, si) in x.iter_mut().zip(&scratch) {
            *xi += si;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
