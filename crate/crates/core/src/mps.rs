//! M-power series functions through exact samples and p-adic extrapolation.
//!
//! A function known on one congruence class through samples at p-adically
//! small integers is pinned down, up to a certified tail, by a truncated
//! Taylor jet at 0: a Vandermonde solve recovers the coefficients and the
//! residual at held-out nodes *is* the certificate. Limits along `l*q^N` are
//! jet constant terms; "divide by n^s and delete principal parts" is a jet
//! shift.

use crate::cache::{eval_sigma_batch_cached, CacheStats, SampleCache};
use crate::error::{Error, Result};
use crate::field::FieldContext;
use crate::linalg::{solve_linear_system, Mat};
use crate::scalar::{CycloScalar, INF_EXP};
use crate::sums::{IterIndex, SampleRequest};

/// Exact samples of one function on one congruence class.
#[derive(Clone, Debug)]
pub struct SampleGrid {
    /// Class representative `l` in `[1, M]`.
    pub class: u32,
    pub nodes: Vec<u64>,
    pub values: Vec<CycloScalar>,
}

/// Truncated Taylor expansion at 0 on one class, with its tail certificate.
#[derive(Clone, Debug)]
pub struct Jet {
    pub class: u32,
    /// `a_0 .. a_D`, each already capped at its certified precision.
    pub coeffs: Vec<CycloScalar>,
    /// Lower bound on the valuation of the model error at the sample nodes.
    pub certified_valuation: i64,
    /// Precision spent by the Vandermonde elimination.
    pub pivot_valuation: i64,
}

/// Grid nodes `l * q^N` for `N` in `[n_min, n_max]`.
pub fn class_nodes(ctx: &FieldContext, l: u32, n_min: u32, n_max: u32) -> Result<Vec<u64>> {
    let q = ctx.q()?;
    let mut out = Vec::with_capacity((n_max - n_min + 1) as usize);
    for n in n_min..=n_max {
        let mut v: u128 = l as u128;
        for _ in 0..n {
            v = v.checked_mul(q).ok_or(Error::Budget { needed: u64::MAX, budget: 0 })?;
        }
        let v = u64::try_from(v).map_err(|_| Error::Budget { needed: u64::MAX, budget: 0 })?;
        out.push(v);
    }
    Ok(out)
}

/// The first `count` integers `n` with `val_p(n) >= val_floor` and
/// `n = l (mod M)`: the dense node family for decomposition fits.
pub fn dense_nodes(ctx: &FieldContext, l: u32, val_floor: u32, count: usize) -> Result<Vec<u64>> {
    let p = ctx.p();
    let m = ctx.level();
    let mut pv: u64 = 1;
    for _ in 0..val_floor {
        pv = pv.checked_mul(p).ok_or(Error::Budget { needed: u64::MAX, budget: 0 })?;
    }
    let step = pv.checked_mul(m).ok_or(Error::Budget { needed: u64::MAX, budget: 0 })?;
    // n = pv * t with pv * t = l (mod M)
    let pv_mod_m = pv % m;
    let inv =
        crate::limb::mod_inverse_u64(pv_mod_m.max(1) % m.max(2), m.max(2));
    let t0 = if m == 1 {
        0
    } else {
        let inv = inv.ok_or_else(|| Error::Config("p^v not invertible mod M".into()))?;
        (l as u64 % m) * inv % m
    };
    let mut start = pv * t0;
    if start == 0 {
        start = step;
    }
    let mut out = Vec::with_capacity(count);
    let mut n = start;
    for _ in 0..count {
        out.push(n);
        n = n.checked_add(step).ok_or(Error::Budget { needed: u64::MAX, budget: 0 })?;
    }
    Ok(out)
}

/// Sample an arbitrary evaluator at the given nodes (slow generic path).
pub fn sample_series(
    class: u32,
    nodes: &[u64],
    mut eval: impl FnMut(u64) -> Result<CycloScalar>,
) -> Result<SampleGrid> {
    let mut values = Vec::with_capacity(nodes.len());
    for &n in nodes {
        values.push(eval(n)?);
    }
    Ok(SampleGrid { class, nodes: nodes.to_vec(), values })
}

/// Grids of a sigma-kind index at `l * q^N` for every class, one shared pass.
pub fn index_grids(
    ctx: &FieldContext,
    cache: &SampleCache,
    idx: &IterIndex,
    n_min: u32,
    n_max: u32,
    budget: u64,
) -> Result<(Vec<SampleGrid>, CacheStats)> {
    let m = ctx.level() as u32;
    let mut requests = Vec::with_capacity(m as usize);
    for l in 1..=m {
        requests.push(SampleRequest { index: idx.clone(), cuts: class_nodes(ctx, l, n_min, n_max)? });
    }
    let (values, stats) = eval_sigma_batch_cached(ctx, cache, &requests, budget)?;
    let grids = requests
        .into_iter()
        .zip(values)
        .enumerate()
        .map(|(k, (req, vals))| SampleGrid { class: k as u32 + 1, nodes: req.cuts, values: vals })
        .collect();
    Ok((grids, stats))
}

/// Prefix sums `F(n) = sum_{0 < k <= n} f(k)` captured at cut points,
/// streaming over one forward pass of the term evaluator.
pub fn stream_prefix_inclusive(
    ctx: &FieldContext,
    cuts: &[u64],
    budget: u64,
    mut term: impl FnMut(u64) -> Result<CycloScalar>,
) -> Result<Vec<CycloScalar>> {
    if cuts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("cuts must be sorted and distinct".into()));
    }
    let n_max = cuts.last().copied().unwrap_or(0);
    if n_max > budget {
        return Err(Error::Budget { needed: n_max, budget });
    }
    let mut out = Vec::with_capacity(cuts.len());
    let mut acc = CycloScalar::zero(ctx);
    let mut next = 0;
    for k in 1..=n_max {
        acc = acc.add(ctx, &term(k)?);
        while next < cuts.len() && cuts[next] == k {
            out.push(acc.clone());
            next += 1;
        }
    }
    Ok(out)
}

/// Fit a degree-`d` jet through the grid. The elimination picks its own fit
/// rows by minimal-valuation pivoting; the residual over the remaining nodes
/// is the tail certificate. Per-coefficient precision is measured, not
/// assumed: the fit is repeated with the most tail-contaminated node (the
/// p-adically largest one) dropped, and each coefficient is capped at the
/// agreement of the two fits.
pub fn extract_jet(ctx: &FieldContext, grid: &SampleGrid, d: u32) -> Result<Jet> {
    let cols = d as usize + 1;
    if grid.nodes.len() < cols {
        return Err(Error::Config(format!(
            "jet order {d} needs at least {cols} nodes, grid has {}",
            grid.nodes.len()
        )));
    }
    let val_of = |n: u64| {
        let mut v = 0i64;
        let mut n = n;
        while n % ctx.p() == 0 {
            n /= ctx.p();
            v += 1;
        }
        v
    };
    let power_rows = |nodes: &[u64]| -> Vec<Vec<CycloScalar>> {
        nodes
            .iter()
            .map(|&n| {
                let x = CycloScalar::from_i128(ctx, n as i128);
                let mut row = Vec::with_capacity(cols);
                let mut cur = CycloScalar::one(ctx);
                for _ in 0..cols {
                    row.push(cur.clone());
                    cur = cur.mul(ctx, &x);
                }
                row
            })
            .collect()
    };
    let rows = power_rows(&grid.nodes);
    let a = Mat::from_fn(grid.nodes.len(), cols, |r, c| rows[r][c].clone());
    let sol = solve_linear_system(ctx, &a, &grid.values, "extract_jet")?;

    // certificate: worst residual over every node (pivot rows contribute
    // their solve noise, held-out rows the true model error)
    let mut cert = INF_EXP;
    for r in &sol.residuals {
        cert = cert.min(r.valuation_or_bound());
    }

    // stability fit without the smallest-valuation node
    let coeffs = if grid.nodes.len() > cols {
        let drop = grid
            .nodes
            .iter()
            .enumerate()
            .min_by_key(|&(k, &n)| (val_of(n), k))
            .map(|(k, _)| k)
            .unwrap();
        let nodes_b: Vec<u64> = grid
            .nodes
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != drop)
            .map(|(_, &n)| n)
            .collect();
        let values_b: Vec<CycloScalar> = grid
            .values
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != drop)
            .map(|(_, v)| v.clone())
            .collect();
        let rows_b = power_rows(&nodes_b);
        let a_b = Mat::from_fn(nodes_b.len(), cols, |r, c| rows_b[r][c].clone());
        let sol_b = solve_linear_system(ctx, &a_b, &values_b, "extract_jet stability")?;
        sol.x
            .iter()
            .zip(&sol_b.x)
            .map(|(x, y)| {
                let agree = x.agreement_valuation(ctx, y);
                x.cap_abs(ctx, agree.min(cert))
            })
            .collect()
    } else {
        sol.x.iter().map(|x| x.cap_abs(ctx, cert)).collect()
    };
    Ok(Jet { class: grid.class, coeffs, certified_valuation: cert, pivot_valuation: sol.pivot_valuation })
}

/// `extract_jet` plus the "is this really an M-power series function at this
/// order and precision" gate.
pub fn extract_jet_checked(
    ctx: &FieldContext,
    grid: &SampleGrid,
    d: u32,
    cert_floor: i64,
    context: &str,
) -> Result<Jet> {
    let jet = extract_jet(ctx, grid, d)?;
    if jet.certified_valuation < cert_floor {
        return Err(Error::Certificate {
            got: jet.certified_valuation,
            floor: cert_floor,
            context: context.to_string(),
        });
    }
    Ok(jet)
}

/// The limit along `l*q^N`: the jet constant term at its certified precision.
pub fn mps_limit(jet: &Jet) -> CycloScalar {
    jet.coeffs[0].clone()
}

/// Discard the first `s` coefficients and reindex: divide by `n^s`, then
/// delete principal parts.
pub fn jet_shift(jet: &Jet, s: u32) -> Result<Jet> {
    if jet.coeffs.len() <= s as usize {
        return Err(Error::Config(format!(
            "jet_shift by {s} needs order >= {s}, jet has order {}",
            jet.coeffs.len() - 1
        )));
    }
    Ok(Jet {
        class: jet.class,
        coeffs: jet.coeffs[s as usize..].to_vec(),
        certified_valuation: jet.certified_valuation,
        pivot_valuation: jet.pivot_valuation,
    })
}

/// Evaluate a jet at an integer (for resynthesis checks).
pub fn jet_eval(ctx: &FieldContext, jet: &Jet, n: u64) -> CycloScalar {
    let x = CycloScalar::from_i128(ctx, n as i128);
    let mut acc = CycloScalar::zero(ctx);
    let mut pw = CycloScalar::one(ctx);
    for c in &jet.coeffs {
        acc = acc.add(ctx, &c.mul(ctx, &pw));
        pw = pw.mul(ctx, &x);
    }
    acc
}
