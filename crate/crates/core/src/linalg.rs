//! Gaussian elimination over `K` with minimal-valuation full pivoting.
//!
//! The pivot at each step is the remaining entry of smallest p-adic valuation
//! (largest p-adic absolute value), so the precision spent is exactly the
//! valuation of the determinant of the pivot block. The right-hand side is
//! generic: plain scalars for numeric solves, affine forms for the Frobenius
//! constraint assembly.

use crate::error::{Error, Result};
use crate::field::FieldContext;
use crate::scalar::{CycloScalar, INF_EXP};

/// Anything that can sit on the right-hand side of an elimination.
pub trait PivotRhs: Clone {
    fn sub_scaled(&mut self, ctx: &FieldContext, coef: &CycloScalar, other: &Self);
    fn div_by(&mut self, ctx: &FieldContext, coef: &CycloScalar) -> Result<()>;
    /// Valuation (or certified vanishing order) used for residual reporting.
    fn residual_valuation(&self) -> i64;
}

impl PivotRhs for CycloScalar {
    fn sub_scaled(&mut self, ctx: &FieldContext, coef: &CycloScalar, other: &Self) {
        *self = self.sub(ctx, &coef.mul(ctx, other));
    }

    fn div_by(&mut self, ctx: &FieldContext, coef: &CycloScalar) -> Result<()> {
        *self = self.div(ctx, coef)?;
        Ok(())
    }

    fn residual_valuation(&self) -> i64 {
        self.valuation_or_bound()
    }
}

#[derive(Clone, Debug)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    data: Vec<CycloScalar>,
}

impl Mat {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> CycloScalar) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn at(&self, r: usize, c: usize) -> &CycloScalar {
        &self.data[r * self.cols + c]
    }

    fn at_mut(&mut self, r: usize, c: usize) -> &mut CycloScalar {
        &mut self.data[r * self.cols + c]
    }
}

#[derive(Debug)]
pub struct LinearSolution<R> {
    /// Solution vector, one entry per column.
    pub x: Vec<R>,
    /// Total valuation of the pivots: the precision spent by elimination.
    pub pivot_valuation: i64,
    pub rank: usize,
    /// `b - A x` per input row, from the original data.
    pub residuals: Vec<R>,
    /// Min residual valuation over rows not consumed as pivots
    /// (`INF_EXP` when the system is exactly determined).
    pub residual_valuation: i64,
}

/// Solve `A x = b` for square or overdetermined `A`.
pub fn solve_linear_system<R: PivotRhs>(
    ctx: &FieldContext,
    a: &Mat,
    b: &[R],
    context: &str,
) -> Result<LinearSolution<R>> {
    let (rows, cols) = (a.rows, a.cols);
    assert_eq!(b.len(), rows, "rhs length mismatch");
    if rows < cols {
        return Err(Error::Config(format!(
            "underdetermined system ({rows} rows, {cols} cols) in {context}"
        )));
    }
    let mut m = a.clone();
    let mut rhs: Vec<R> = b.to_vec();
    let mut used_row = vec![false; rows];
    let mut used_col = vec![false; cols];
    // (row, col) of pivot per elimination step
    let mut pivots: Vec<(usize, usize)> = Vec::with_capacity(cols);
    let mut pivot_valuation = 0i64;

    for _step in 0..cols {
        let mut best: Option<(i64, usize, usize)> = None;
        for r in 0..rows {
            if used_row[r] {
                continue;
            }
            for c in 0..cols {
                if used_col[c] {
                    continue;
                }
                if let Some(v) = m.at(r, c).valuation() {
                    if best.map_or(true, |(bv, br, bc)| (v, r, c) < (bv, br, bc)) {
                        best = Some((v, r, c));
                    }
                }
            }
        }
        let Some((v, pr, pc)) = best else {
            return Err(Error::RankDeficient { rank: pivots.len(), cols, context: context.into() });
        };
        pivot_valuation += v;
        used_row[pr] = true;
        used_col[pc] = true;
        pivots.push((pr, pc));
        let pivot = m.at(pr, pc).clone();
        let rhs_pivot = rhs[pr].clone();
        for r in 0..rows {
            if used_row[r] {
                continue;
            }
            if m.at(r, pc).is_zero_form() {
                continue;
            }
            let factor = m.at(r, pc).div(ctx, &pivot)?;
            for c in 0..cols {
                if used_col[c] && c != pc {
                    continue;
                }
                let delta = factor.mul(ctx, m.at(pr, c));
                let v = m.at(r, c).sub(ctx, &delta);
                *m.at_mut(r, c) = v;
            }
            rhs[r].sub_scaled(ctx, &factor, &rhs_pivot);
        }
    }

    // back substitution in reverse pivot order
    let mut x: Vec<Option<R>> = vec![None; cols];
    for (k, &(pr, pc)) in pivots.iter().enumerate().rev() {
        let mut val = rhs[pr].clone();
        for &(_, c2) in pivots.iter().skip(k + 1) {
            if let Some(xc) = &x[c2] {
                val.sub_scaled(ctx, m.at(pr, c2), xc);
            }
        }
        val.div_by(ctx, m.at(pr, pc))?;
        x[pc] = Some(val);
    }
    let x: Vec<R> = x.into_iter().map(|o| o.expect("all columns pivoted")).collect();

    // residuals from the original data
    let mut residuals = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut res = b[r].clone();
        for (c, xc) in x.iter().enumerate() {
            res.sub_scaled(ctx, a.at(r, c), xc);
        }
        residuals.push(res);
    }
    let mut residual_valuation = INF_EXP;
    for r in 0..rows {
        if !used_row[r] {
            residual_valuation = residual_valuation.min(residuals[r].residual_valuation());
        }
    }

    Ok(LinearSolution { x, pivot_valuation, rank: cols, residuals, residual_valuation })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> FieldContext {
        FieldContext::build(5, 4, 30).unwrap()
    }

    #[test]
    fn identity_system_costs_nothing() {
        let ctx = ctx();
        let a = Mat::from_fn(3, 3, |r, c| {
            if r == c { CycloScalar::one(&ctx) } else { CycloScalar::zero(&ctx) }
        });
        let b = vec![
            CycloScalar::from_i128(&ctx, 7),
            CycloScalar::from_i128(&ctx, -2),
            CycloScalar::from_i128(&ctx, 30),
        ];
        let sol = solve_linear_system(&ctx, &a, &b, "test").unwrap();
        assert_eq!(sol.pivot_valuation, 0);
        for (xi, bi) in sol.x.iter().zip(&b) {
            assert!(xi.agreement_valuation(&ctx, bi) >= 30);
        }
    }

    #[test]
    fn one_by_one_spends_a_digit() {
        let ctx = ctx();
        let a = Mat::from_fn(1, 1, |_, _| CycloScalar::from_i128(&ctx, 5));
        let b = vec![CycloScalar::from_i128(&ctx, 25)];
        let sol = solve_linear_system(&ctx, &a, &b, "test").unwrap();
        assert_eq!(sol.pivot_valuation, 1);
        assert_eq!(sol.x[0].valuation(), Some(1));
        assert!(sol.x[0].agreement_valuation(&ctx, &CycloScalar::from_i128(&ctx, 5)) >= 30);
    }

    #[test]
    fn vandermonde_pivots_match_determinant() {
        // nodes q, q^2, q^3 in Q_5(zeta_4): pivot valuation must equal the
        // valuation of prod_{i<j} (x_j - x_i)
        let ctx = ctx();
        let nodes = [5i128, 25, 125];
        let a = Mat::from_fn(3, 3, |r, c| {
            CycloScalar::from_i128(&ctx, nodes[r]).pow(&ctx, c as u32)
        });
        let b = vec![
            CycloScalar::from_i128(&ctx, 1),
            CycloScalar::from_i128(&ctx, 2),
            CycloScalar::from_i128(&ctx, 3),
        ];
        let sol = solve_linear_system(&ctx, &a, &b, "test").unwrap();
        let mut det = CycloScalar::one(&ctx);
        for i in 0..3 {
            for j in i + 1..3 {
                let d = CycloScalar::from_i128(&ctx, nodes[j] - nodes[i]);
                det = det.mul(&ctx, &d);
            }
        }
        assert_eq!(sol.pivot_valuation, det.valuation().unwrap());
    }

    #[test]
    fn overdetermined_consistent_reports_residual() {
        let ctx = ctx();
        // y = 3 + 2n sampled at four points, fit a degree-1 polynomial
        let nodes = [1i128, 2, 3, 4];
        let a = Mat::from_fn(4, 2, |r, c| CycloScalar::from_i128(&ctx, nodes[r]).pow(&ctx, c as u32));
        let b: Vec<_> =
            nodes.iter().map(|&n| CycloScalar::from_i128(&ctx, 3 + 2 * n)).collect();
        let sol = solve_linear_system(&ctx, &a, &b, "test").unwrap();
        assert!(sol.x[0].agreement_valuation(&ctx, &CycloScalar::from_i128(&ctx, 3)) >= 30);
        assert!(sol.x[1].agreement_valuation(&ctx, &CycloScalar::from_i128(&ctx, 2)) >= 30);
        assert!(sol.residual_valuation >= 30, "residual {}", sol.residual_valuation);
    }

    #[test]
    fn rank_deficiency_is_structured() {
        let ctx = ctx();
        let a = Mat::from_fn(2, 2, |r, _| {
            if r == 0 { CycloScalar::one(&ctx) } else { CycloScalar::from_i128(&ctx, 2) }
        });
        let b = vec![CycloScalar::one(&ctx), CycloScalar::from_i128(&ctx, 2)];
        match solve_linear_system(&ctx, &a, &b, "test") {
            Err(Error::RankDeficient { rank, cols, .. }) => {
                assert_eq!((rank, cols), (1, 2));
            }
            other => panic!("expected rank error, got {other:?}"),
        }
    }
}
