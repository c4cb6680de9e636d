//! Regularization of the iterated sum series over the `sigma_p` basis.
//!
//! Every `sigma(s;i;m)` is a linear combination of the divergence-carrying
//! basis functions `sigma_p(t;j)`, `t <= s`, with M-power-series coefficient
//! functions. Two independent constructions of that decomposition live here:
//!
//! * [`decompose_fit`] — the production path: one overdetermined linear solve
//!   per congruence class, unknowns = jet coefficients of every basis
//!   coefficient function, sampled at dense p-adically small nodes;
//! * [`decompose_constructive`] — the oracle path: peel one summation layer
//!   at a time by Abel summation, prefix sums, jet shifts and character
//!   splitting, operating on exact dense sample vectors.
//!
//! The regularized series is the empty-basis coefficient; its limits along
//! `l*q^N` are the cis values.

use crate::cache::{eval_sigma_batch_cached, SampleCache};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::field::FieldContext;
use crate::linalg::{solve_linear_system, Mat};
use crate::mps::{dense_nodes, extract_jet, jet_eval, Jet, SampleGrid};
use crate::scalar::{CycloScalar, INF_EXP};
use crate::sums::{IterIndex, Kind, SampleRequest};
use rayon::prelude::*;
use std::collections::{BTreeMap, BTreeSet};

/// Names `sigma_p(t; j)`; the empty pair names the constant 1.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BasisIndex {
    pub t: Vec<u32>,
    pub j: Vec<u32>,
}

impl BasisIndex {
    pub fn empty() -> Self {
        BasisIndex { t: Vec::new(), j: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn to_index(&self) -> IterIndex {
        IterIndex::sigma_p(self.t.clone(), self.j.clone()).expect("basis rows aligned")
    }

    pub fn label(&self) -> String {
        let join = |v: &[u32]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        if self.is_empty() {
            "1".to_string()
        } else {
            format!("sigma_p({};{})", join(&self.t), join(&self.j))
        }
    }
}

/// All `t <= s` in the componentwise-subsequence order (entries >= 1),
/// crossed with all zeta rows `j`, plus the empty index. Deterministic order:
/// the empty index first, then sorted.
pub fn enumerate_basis(s: &[u32], m_level: u32) -> Vec<BasisIndex> {
    let mut t_set: BTreeSet<Vec<u32>> = BTreeSet::new();
    fn gen(s: &[u32], pos: usize, cur: &mut Vec<u32>, out: &mut BTreeSet<Vec<u32>>) {
        if pos == s.len() {
            out.insert(cur.clone());
            return;
        }
        gen(s, pos + 1, cur, out); // skip this position
        for v in 1..=s[pos] {
            cur.push(v);
            gen(s, pos + 1, cur, out);
            cur.pop();
        }
    }
    gen(s, 0, &mut Vec::new(), &mut t_set);
    let mut out = vec![BasisIndex::empty()];
    for t in t_set {
        if t.is_empty() {
            continue;
        }
        let mut js = vec![Vec::new()];
        for _ in 0..t.len() {
            let mut next = Vec::new();
            for j in js {
                for v in 0..m_level {
                    let mut j2: Vec<u32> = j.clone();
                    j2.push(v);
                    next.push(j2);
                }
            }
            js = next;
        }
        for j in js {
            out.push(BasisIndex { t: t.clone(), j });
        }
    }
    out
}

fn enumerate_basis_checked(
    s: &[u32],
    m_level: u32,
    jet_order: u32,
    column_cap: u64,
) -> Result<Vec<BasisIndex>> {
    let basis = enumerate_basis(s, m_level);
    let cols = basis.len() as u64 * (jet_order as u64 + 1);
    if cols > column_cap {
        return Err(Error::Combinatorial {
            count: cols,
            cap: column_cap,
            what: "fit columns (|basis| * (D+1))".to_string(),
        });
    }
    Ok(basis)
}

/// A decomposition of `target` over the `sigma_p` basis: per congruence
/// class, one jet per basis element; the empty-basis jet is the jet of the
/// regularized series.
#[derive(Clone, Debug)]
pub struct Decomposition {
    pub target: IterIndex,
    pub basis: Vec<BasisIndex>,
    /// `class_jets[l-1][b]` = jet of the coefficient of `basis[b]` at class l.
    pub class_jets: Vec<Vec<Jet>>,
    pub per_class_residual: Vec<i64>,
    /// Worst resynthesis residual across classes.
    pub residual_valuation: i64,
    pub pivot_valuation: i64,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

impl Decomposition {
    /// Jet of the regularized series at class `l`.
    pub fn sigma_tilde_jet(&self, l: u32) -> &Jet {
        debug_assert!(self.basis[0].is_empty());
        &self.class_jets[l as usize - 1][0]
    }

    pub fn coefficient_jet(&self, l: u32, b: &BasisIndex) -> Option<&Jet> {
        let k = self.basis.iter().position(|x| x == b)?;
        Some(&self.class_jets[l as usize - 1][k])
    }
}

struct FitSamples {
    /// nodes[l-1]
    nodes: Vec<Vec<u64>>,
    /// target_vals[l-1][node]
    target_vals: Vec<Vec<CycloScalar>>,
    /// basis_vals[l-1][b][node]; the empty basis holds ones
    basis_vals: Vec<Vec<Vec<CycloScalar>>>,
    hits: u64,
    misses: u64,
}

fn gather_fit_samples(
    ctx: &FieldContext,
    cache: &SampleCache,
    cfg: &RunConfig,
    target: &IterIndex,
    basis: &[BasisIndex],
    nodes_per_class: usize,
    val_floor: u32,
) -> Result<FitSamples> {
    let m = ctx.level() as u32;
    let mut nodes = Vec::with_capacity(m as usize);
    for l in 1..=m {
        nodes.push(dense_nodes(ctx, l, val_floor, nodes_per_class)?);
    }
    let mut requests = Vec::new();
    for l in 1..=m as usize {
        requests.push(SampleRequest { index: target.clone(), cuts: nodes[l - 1].clone() });
        for b in basis.iter().skip(1) {
            requests.push(SampleRequest { index: b.to_index(), cuts: nodes[l - 1].clone() });
        }
    }
    let (values, stats) = eval_sigma_batch_cached(ctx, cache, &requests, cfg.step_budget)?;
    let per_class = basis.len(); // target + (basis.len()-1) sigma_p's
    let mut target_vals = Vec::with_capacity(m as usize);
    let mut basis_vals = Vec::with_capacity(m as usize);
    for l in 0..m as usize {
        let chunk = &values[l * per_class..(l + 1) * per_class];
        target_vals.push(chunk[0].clone());
        let mut per_basis = Vec::with_capacity(basis.len());
        per_basis.push(vec![CycloScalar::one(ctx); nodes[l].len()]);
        for bvals in chunk[1..].iter() {
            per_basis.push(bvals.clone());
        }
        basis_vals.push(per_basis);
    }
    Ok(FitSamples { nodes, target_vals, basis_vals, hits: stats.hits, misses: stats.misses })
}

/// Production decomposition: solve for all coefficient jets at once.
///
/// Freeness of the basis shows up as full column rank; rank deficiency at
/// working precision is a structured error, never silently regularized.
pub fn decompose_fit(
    ctx: &FieldContext,
    cache: &SampleCache,
    cfg: &RunConfig,
    target: &IterIndex,
) -> Result<Decomposition> {
    if target.kind != Kind::Sigma {
        return Err(Error::Config("decompose_fit takes sigma-kind targets".into()));
    }
    target.validate(ctx)?;
    let d = cfg.jet_order;
    let basis = enumerate_basis_checked(&target.s, ctx.level() as u32, d, cfg.column_cap)?;
    let cols = basis.len() * (d as usize + 1);
    let nodes_per_class = cols + cfg.holdout as usize;
    let val_floor = cfg.fit_valuation_for(ctx);
    let samples =
        gather_fit_samples(ctx, cache, cfg, target, &basis, nodes_per_class, val_floor)?;
    let cert_floor = cfg.cert_floor_for(ctx);

    let m = ctx.level() as usize;
    let class_results: Result<Vec<(Vec<Jet>, i64, i64)>> = (0..m)
        .into_par_iter()
        .map(|lidx| {
            fit_one_class(
                ctx,
                &basis,
                d,
                &samples.nodes[lidx],
                &samples.basis_vals[lidx],
                &samples.target_vals[lidx],
                lidx as u32 + 1,
                cert_floor,
            )
        })
        .collect();
    let class_results = class_results?;
    let per_class_residual: Vec<i64> = class_results.iter().map(|r| r.1).collect();
    let residual_valuation = per_class_residual.iter().copied().min().unwrap_or(INF_EXP);
    let pivot_valuation = class_results.iter().map(|r| r.2).max().unwrap_or(0);
    Ok(Decomposition {
        target: target.clone(),
        basis,
        class_jets: class_results.into_iter().map(|r| r.0).collect(),
        per_class_residual,
        residual_valuation,
        pivot_valuation,
        cache_hits: samples.hits,
        cache_misses: samples.misses,
    })
}

#[allow(clippy::too_many_arguments)]
fn fit_one_class(
    ctx: &FieldContext,
    basis: &[BasisIndex],
    d: u32,
    nodes: &[u64],
    basis_vals: &[Vec<CycloScalar>],
    target_vals: &[CycloScalar],
    class: u32,
    cert_floor: i64,
) -> Result<(Vec<Jet>, i64, i64)> {
    let dd = d as usize + 1;
    let cols = basis.len() * dd;
    let rows = nodes.len();
    let build = |keep: &dyn Fn(usize) -> bool| -> (Mat, Vec<CycloScalar>) {
        let kept: Vec<usize> = (0..rows).filter(|&r| keep(r)).collect();
        let mut powers: Vec<Vec<CycloScalar>> = Vec::with_capacity(kept.len());
        for &r in &kept {
            let x = CycloScalar::from_i128(ctx, nodes[r] as i128);
            let mut pw = Vec::with_capacity(dd);
            let mut cur = CycloScalar::one(ctx);
            for _ in 0..dd {
                pw.push(cur.clone());
                cur = cur.mul(ctx, &x);
            }
            powers.push(pw);
        }
        let mat = Mat::from_fn(kept.len(), cols, |ri, c| {
            let (b, deg) = (c / dd, c % dd);
            basis_vals[b][kept[ri]].mul(ctx, &powers[ri][deg])
        });
        let rhs: Vec<CycloScalar> = kept.iter().map(|&r| target_vals[r].clone()).collect();
        (mat, rhs)
    };

    let (mat_a, rhs_a) = build(&|_| true);
    let sol_a = solve_linear_system(ctx, &mat_a, &rhs_a, "decompose_fit (raise P or N range)")?;
    // stability solve without the first node (the p-adically largest one)
    let (mat_b, rhs_b) = build(&|r| r != 0);
    let sol_b = solve_linear_system(ctx, &mat_b, &rhs_b, "decompose_fit stability")?;

    let mut cert = INF_EXP;
    for r in &sol_a.residuals {
        cert = cert.min(r.valuation_or_bound());
    }
    if cert < cert_floor {
        return Err(Error::Certificate {
            got: cert,
            floor: cert_floor,
            context: format!(
                "decompose_fit class {class}: insufficient jet order D or node valuation"
            ),
        });
    }
    let mut jets = Vec::with_capacity(basis.len());
    for b in 0..basis.len() {
        let coeffs: Vec<CycloScalar> = (0..dd)
            .map(|deg| {
                let xa = &sol_a.x[b * dd + deg];
                let xb = &sol_b.x[b * dd + deg];
                let agree = xa.agreement_valuation(ctx, xb);
                xa.cap_abs(ctx, agree.min(cert))
            })
            .collect();
        jets.push(Jet {
            class,
            coeffs,
            certified_valuation: cert,
            pivot_valuation: sol_a.pivot_valuation,
        });
    }
    Ok((jets, cert, sol_a.pivot_valuation))
}

// ---------------------------------------------------------------------------
// Constructive path: Abel summation, prefix sums, character splitting.
// ---------------------------------------------------------------------------

/// Exact sample vector of a function on `1..=n_max` (index 0 unused).
#[derive(Clone)]
struct DenseFn {
    vals: Vec<CycloScalar>,
}

impl DenseFn {
    fn n_max(&self) -> u64 {
        self.vals.len() as u64 - 1
    }

    fn zeros(ctx: &FieldContext, n_max: u64) -> Self {
        DenseFn { vals: vec![CycloScalar::zero(ctx); n_max as usize + 1] }
    }

    fn build(ctx: &FieldContext, n_max: u64, mut f: impl FnMut(u64) -> CycloScalar) -> Self {
        let mut vals = Vec::with_capacity(n_max as usize + 1);
        vals.push(CycloScalar::zero(ctx));
        for a in 1..=n_max {
            vals.push(f(a));
        }
        DenseFn { vals }
    }

    fn at(&self, a: u64) -> &CycloScalar {
        &self.vals[a as usize]
    }

    /// `F(n) = sum_{0 < k <= n} f(k)`.
    fn prefix_inclusive(&self, ctx: &FieldContext) -> DenseFn {
        let mut vals = Vec::with_capacity(self.vals.len());
        vals.push(CycloScalar::zero(ctx));
        let mut acc = CycloScalar::zero(ctx);
        for a in 1..self.vals.len() {
            acc = acc.add(ctx, &self.vals[a]);
            vals.push(acc.clone());
        }
        DenseFn { vals }
    }

    /// `G(n) = sum_{0 < k < n} f(k)` = inclusive prefix shifted by one.
    fn prefix_exclusive(&self, ctx: &FieldContext) -> DenseFn {
        let mut vals = Vec::with_capacity(self.vals.len());
        vals.push(CycloScalar::zero(ctx));
        let mut acc = CycloScalar::zero(ctx);
        for a in 1..self.vals.len() {
            vals.push(acc.clone());
            acc = acc.add(ctx, &self.vals[a]);
        }
        DenseFn { vals }
    }

    fn add_assign(&mut self, ctx: &FieldContext, other: &DenseFn, sign: i32) {
        for (a, v) in other.vals.iter().enumerate() {
            let term = if sign >= 0 { v.clone() } else { v.neg(ctx) };
            self.vals[a] = self.vals[a].add(ctx, &term);
        }
    }

    fn add_const(&mut self, ctx: &FieldContext, c: &CycloScalar, sign: i32) {
        let term = if sign >= 0 { c.clone() } else { c.neg(ctx) };
        for a in 1..self.vals.len() {
            self.vals[a] = self.vals[a].add(ctx, &term);
        }
    }
}

struct ConstructiveCtx<'a> {
    ctx: &'a FieldContext,
    jet_order: u32,
    n_max: u64,
    /// Per class `l`: dense extraction nodes, all `<= n_max`.
    class_nodes: Vec<Vec<u64>>,
}

impl<'a> ConstructiveCtx<'a> {
    /// Class representative in `[1, M]` of an integer.
    fn class_of(&self, a: u64) -> u32 {
        let m = self.ctx.level();
        let r = (a % m) as u32;
        if r == 0 {
            m as u32
        } else {
            r
        }
    }

    fn jets_of(&self, f: &DenseFn) -> Result<Vec<Jet>> {
        let mut out = Vec::with_capacity(self.class_nodes.len());
        for (lidx, nodes) in self.class_nodes.iter().enumerate() {
            let grid = SampleGrid {
                class: lidx as u32 + 1,
                nodes: nodes.clone(),
                values: nodes.iter().map(|&n| f.at(n).clone()).collect(),
            };
            out.push(extract_jet(self.ctx, &grid, self.jet_order)?);
        }
        Ok(out)
    }

    fn decompose(&self, target: &IterIndex) -> Result<BTreeMap<BasisIndex, DenseFn>> {
        let ctx = self.ctx;
        let mut out: BTreeMap<BasisIndex, DenseFn> = BTreeMap::new();
        if target.depth() == 0 {
            out.insert(
                BasisIndex::empty(),
                DenseFn::build(ctx, self.n_max, |_| CycloScalar::one(ctx)),
            );
            return Ok(out);
        }
        let inner = self.decompose(&target.inner())?;
        let dd = target.depth();
        let (s_k, i_k, m_k) = (target.s[dd - 1], target.i[dd - 1], target.m[dd - 1]);
        let p = ctx.p();
        for (b, u) in &inner {
            if m_k % p as u32 != 0 {
                // unit denominators: the whole factor is an M-power series fn
                let f = DenseFn::build(ctx, self.n_max, |a| {
                    if (a % p) as u32 != m_k % p as u32 {
                        return CycloScalar::zero(ctx);
                    }
                    let zexp = (i_k as u64 * (a % ctx.level()) % ctx.level()) as i64;
                    let z = CycloScalar::from_unit_kelt(ctx, ctx.zeta_pow(zexp).clone());
                    let a_pow = CycloScalar::from_i128(ctx, a as i128).pow(ctx, s_k);
                    z.mul(ctx, u.at(a))
                        .div(ctx, &a_pow)
                        .expect("unit denominator")
                });
                self.g_case(&f, b, 1, &mut out)?;
            } else {
                let f = DenseFn::build(ctx, self.n_max, |a| {
                    if a % p != 0 {
                        return CycloScalar::zero(ctx);
                    }
                    let zexp = (i_k as u64 * (a % ctx.level()) % ctx.level()) as i64;
                    let z = CycloScalar::from_unit_kelt(ctx, ctx.zeta_pow(zexp).clone());
                    z.mul(ctx, u.at(a))
                });
                if s_k == 0 {
                    self.g_case(&f, b, 1, &mut out)?;
                } else {
                    self.h_case(&f, s_k, b, 1, &mut out)?;
                }
            }
        }
        Ok(out)
    }

    /// Accumulate `sum_{0<a<n} f(a) sigma_p(b)(a)` into the output map.
    fn g_case(
        &self,
        f: &DenseFn,
        b: &BasisIndex,
        sign: i32,
        out: &mut BTreeMap<BasisIndex, DenseFn>,
    ) -> Result<()> {
        let ctx = self.ctx;
        if b.is_empty() {
            let g = f.prefix_exclusive(ctx);
            entry(out, ctx, self.n_max, BasisIndex::empty()).add_assign(ctx, &g, sign);
            return Ok(());
        }
        // Abel summation: g = F(n-1) sigma_p(b)(n) - h-layer of the inner basis
        let f_incl = f.prefix_inclusive(ctx);
        let shifted = DenseFn::build(ctx, self.n_max, |n| f_incl.at(n - 1).clone());
        entry(out, ctx, self.n_max, b.clone()).add_assign(ctx, &shifted, sign);
        let e = b.t.len();
        let (t_last, j_last) = (b.t[e - 1], b.j[e - 1]);
        let inner_b = BasisIndex { t: b.t[..e - 1].to_vec(), j: b.j[..e - 1].to_vec() };
        let p = ctx.p();
        let f2 = DenseFn::build(ctx, self.n_max, |a| {
            if a % p != 0 {
                return CycloScalar::zero(ctx);
            }
            let zexp = (j_last as u64 * (a % ctx.level()) % ctx.level()) as i64;
            let z = CycloScalar::from_unit_kelt(ctx, ctx.zeta_pow(zexp).clone());
            z.mul(ctx, f_incl.at(a))
        });
        self.h_case(&f2, t_last, &inner_b, -sign, out)
    }

    /// Accumulate `sum_{0<a<n, p|a} (f(a)/a^s) sigma_p(b)(a)`:
    /// peel the sub-`s` jet coefficients into deeper basis elements through
    /// character orthogonality, then recurse on the tail.
    fn h_case(
        &self,
        f: &DenseFn,
        s: u32,
        b: &BasisIndex,
        sign: i32,
        out: &mut BTreeMap<BasisIndex, DenseFn>,
    ) -> Result<()> {
        let ctx = self.ctx;
        if s > self.jet_order + 1 {
            return Err(Error::Config(format!(
                "constructive path needs jet order >= {}, have D = {}",
                s - 1,
                self.jet_order
            )));
        }
        let jets = self.jets_of(f)?;
        let m = ctx.level() as u32;
        let inv_m = CycloScalar::from_i128(ctx, m as i128).inv(ctx)?;
        for i in 0..s {
            for j_new in 0..m {
                // (1/M) sum_l b_{i,l} zeta^(-j_new * l)
                let mut c = CycloScalar::zero(ctx);
                for (lidx, jet) in jets.iter().enumerate() {
                    let l = lidx as i64 + 1;
                    let term = jet.coeffs[i as usize]
                        .mul_unit(ctx, ctx.zeta_pow(-(j_new as i64) * l));
                    c = c.add(ctx, &term);
                }
                c = c.mul(ctx, &inv_m);
                let mut nb = b.clone();
                nb.t.push(s - i);
                nb.j.push(j_new);
                entry(out, ctx, self.n_max, nb).add_const(ctx, &c, sign);
            }
        }
        // tail: (f(a) - fitted sub-s polynomial) / a^s, gated to p | a
        let p = ctx.p();
        let f_bar = DenseFn::build(ctx, self.n_max, |a| {
            if a % p != 0 {
                return CycloScalar::zero(ctx);
            }
            let l = self.class_of(a);
            let jet = &jets[l as usize - 1];
            let x = CycloScalar::from_i128(ctx, a as i128);
            let mut poly = CycloScalar::zero(ctx);
            let mut pw = CycloScalar::one(ctx);
            for i in 0..s as usize {
                poly = poly.add(ctx, &jet.coeffs[i].mul(ctx, &pw));
                pw = pw.mul(ctx, &x);
            }
            let num = f.at(a).sub(ctx, &poly);
            num.div(ctx, &x.pow(ctx, s)).expect("a is nonzero")
        });
        self.g_case(&f_bar, b, sign, out)
    }
}

fn entry<'m>(
    map: &'m mut BTreeMap<BasisIndex, DenseFn>,
    ctx: &FieldContext,
    n_max: u64,
    key: BasisIndex,
) -> &'m mut DenseFn {
    map.entry(key).or_insert_with(|| DenseFn::zeros(ctx, n_max))
}

/// Oracle decomposition following the layer-peeling construction. Produces
/// the same `Decomposition` shape as the fit, from an entirely different
/// algorithm, and is the cross-path check at small depth.
pub fn decompose_constructive(
    ctx: &FieldContext,
    cache: &SampleCache,
    cfg: &RunConfig,
    target: &IterIndex,
) -> Result<Decomposition> {
    if target.kind != Kind::Sigma {
        return Err(Error::Config("decompose_constructive takes sigma-kind targets".into()));
    }
    target.validate(ctx)?;
    if target.depth() > 3 {
        return Err(Error::Combinatorial {
            count: target.depth() as u64,
            cap: 3,
            what: "constructive recursion depth".to_string(),
        });
    }
    let d = cfg.jet_order;
    let val_floor = cfg.fit_valuation_for(ctx);
    let m = ctx.level() as u32;
    let per_class = (d + 1 + cfg.holdout) as usize;
    let mut class_nodes = Vec::with_capacity(m as usize);
    let mut n_max = 0u64;
    for l in 1..=m {
        let nodes = dense_nodes(ctx, l, val_floor, per_class)?;
        n_max = n_max.max(*nodes.last().unwrap());
        class_nodes.push(nodes);
    }
    if n_max > cfg.step_budget {
        return Err(Error::Budget { needed: n_max, budget: cfg.step_budget });
    }
    let cctx = ConstructiveCtx { ctx, jet_order: d, n_max, class_nodes };
    let coeffs = cctx.decompose(target)?;

    // align with the canonical basis enumeration; anything the construction
    // produced must be inside it (the subsequence bound is a theorem)
    let basis = enumerate_basis(&target.s, m);
    for key in coeffs.keys() {
        if !basis.contains(key) {
            return Err(Error::Config(format!(
                "constructive path produced {} outside the t <= s basis",
                key.label()
            )));
        }
    }

    let mut class_jets: Vec<Vec<Jet>> = Vec::with_capacity(m as usize);
    for lidx in 0..m as usize {
        let mut jets = Vec::with_capacity(basis.len());
        for b in &basis {
            match coeffs.get(b) {
                Some(f) => {
                    let grid = SampleGrid {
                        class: lidx as u32 + 1,
                        nodes: cctx.class_nodes[lidx].clone(),
                        values: cctx.class_nodes[lidx]
                            .iter()
                            .map(|&n| f.at(n).clone())
                            .collect(),
                    };
                    jets.push(extract_jet(ctx, &grid, d)?);
                }
                None => jets.push(Jet {
                    class: lidx as u32 + 1,
                    coeffs: vec![CycloScalar::zero(ctx); d as usize + 1],
                    certified_valuation: INF_EXP,
                    pivot_valuation: 0,
                }),
            }
        }
        class_jets.push(jets);
    }

    // resynthesis residual at the extraction nodes
    let mut requests = Vec::new();
    for lidx in 0..m as usize {
        requests.push(SampleRequest { index: target.clone(), cuts: cctx.class_nodes[lidx].clone() });
        for b in basis.iter().skip(1) {
            requests
                .push(SampleRequest { index: b.to_index(), cuts: cctx.class_nodes[lidx].clone() });
        }
    }
    let (values, _) = eval_sigma_batch_cached(ctx, cache, &requests, cfg.step_budget)?;
    let mut per_class_residual = Vec::with_capacity(m as usize);
    let per_chunk = basis.len();
    for lidx in 0..m as usize {
        let chunk = &values[lidx * per_chunk..(lidx + 1) * per_chunk];
        let mut worst = INF_EXP;
        for (ni, &n) in cctx.class_nodes[lidx].iter().enumerate() {
            let mut synth = CycloScalar::zero(ctx);
            for (bi, _b) in basis.iter().enumerate() {
                let coeff = jet_eval(ctx, &class_jets[lidx][bi], n);
                let bval = if bi == 0 { CycloScalar::one(ctx) } else { chunk[bi][ni].clone() };
                synth = synth.add(ctx, &coeff.mul(ctx, &bval));
            }
            worst = worst.min(synth.agreement_valuation(ctx, &chunk[0][ni]));
        }
        per_class_residual.push(worst);
    }
    let residual_valuation = per_class_residual.iter().copied().min().unwrap_or(INF_EXP);
    Ok(Decomposition {
        target: target.clone(),
        basis,
        class_jets,
        per_class_residual,
        residual_valuation,
        pivot_valuation: 0,
        cache_hits: 0,
        cache_misses: 0,
    })
}

/// The cis value: limit of the regularized series along `l*q^N`.
pub fn cis_sigma(dec: &Decomposition, l: u32) -> CycloScalar {
    crate::mps::mps_limit(dec.sigma_tilde_jet(l))
}

/// The regularized gamma limit `zeta^(l i_k) a_(s_k, l)` from the inner
/// decomposition; 0 when the congruence gate is closed on the limit nodes.
pub fn cis_gamma(
    ctx: &FieldContext,
    idx: &IterIndex,
    inner_dec: &Decomposition,
    l: u32,
) -> Result<CycloScalar> {
    if idx.kind != Kind::Gamma {
        return Err(Error::Config("cis_gamma takes a gamma-kind index".into()));
    }
    let d = idx.depth();
    let (s_k, i_k, m_k) = (idx.s[d - 1], idx.i[d - 1], idx.m[d - 1]);
    if m_k % ctx.p() as u32 != 0 {
        return Ok(CycloScalar::zero(ctx));
    }
    let jet = inner_dec.sigma_tilde_jet(l);
    if jet.coeffs.len() <= s_k as usize {
        return Err(Error::Config(format!(
            "cis_gamma needs jet order >= s_k = {s_k}, have {}",
            jet.coeffs.len() - 1
        )));
    }
    Ok(jet.coeffs[s_k as usize].mul_unit(ctx, ctx.zeta_pow(i_k as i64 * l as i64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mps::{class_nodes, mps_limit, sample_series};
    use crate::sums::eval_sigma;

    fn cfg_for(ctx: &FieldContext, precision: u32) -> RunConfig {
        let mut cfg = RunConfig::desk(ctx.p(), ctx.level());
        cfg.precision = precision;
        cfg
    }

    #[test]
    fn basis_enumeration_examples() {
        // s = (1), M = 2
        let b = enumerate_basis(&[1], 2);
        assert_eq!(
            b,
            vec![
                BasisIndex::empty(),
                BasisIndex { t: vec![1], j: vec![0] },
                BasisIndex { t: vec![1], j: vec![1] },
            ]
        );
        // s = empty
        assert_eq!(enumerate_basis(&[], 4), vec![BasisIndex::empty()]);
        // s = (2,1), M = 1: subsequences with componentwise bound
        let b = enumerate_basis(&[2, 1], 1);
        let ts: Vec<Vec<u32>> = b.iter().map(|x| x.t.clone()).collect();
        assert_eq!(ts, vec![vec![], vec![1], vec![1, 1], vec![2], vec![2, 1]]);
    }

    #[test]
    fn fit_reproduces_basis_element() {
        let ctx = FieldContext::build(3, 2, 60).unwrap();
        let cfg = cfg_for(&ctx, 60);
        let cache = SampleCache::disabled();
        let target = IterIndex::sigma_p(vec![1], vec![1]).unwrap();
        let dec = decompose_fit(&ctx, &cache, &cfg, &target).unwrap();
        let want = BasisIndex { t: vec![1], j: vec![1] };
        for l in 1..=2u32 {
            let jet = dec.coefficient_jet(l, &want).unwrap();
            assert!(
                jet.coeffs[0].agreement_valuation(&ctx, &CycloScalar::one(&ctx))
                    >= dec.residual_valuation.min(20),
                "unit coefficient expected"
            );
            for c in &jet.coeffs[1..] {
                assert!(c.valuation_or_bound() >= 8, "higher jet coefficients should vanish");
            }
            // all other nonempty coefficients vanish
            for b in dec.basis.iter().filter(|b| !b.is_empty() && **b != want) {
                let j = dec.coefficient_jet(l, b).unwrap();
                for c in &j.coeffs {
                    assert!(c.valuation_or_bound() >= 8);
                }
            }
            // and sigma_tilde is ~0 for a pure basis element
            let st = dec.sigma_tilde_jet(l);
            for c in &st.coeffs {
                assert!(c.valuation_or_bound() >= 8);
            }
        }
        assert!(dec.residual_valuation >= 15, "residual {}", dec.residual_valuation);
    }

    #[test]
    fn fit_convergent_target_is_power_series_only() {
        // all m_j != 0: the series itself is an M-power series function
        let ctx = FieldContext::build(3, 2, 60).unwrap();
        let cfg = cfg_for(&ctx, 60);
        let cache = SampleCache::disabled();
        let target = IterIndex::sigma(vec![1], vec![1], vec![2]).unwrap();
        let dec = decompose_fit(&ctx, &cache, &cfg, &target).unwrap();
        for l in 1..=2u32 {
            for b in dec.basis.iter().filter(|b| !b.is_empty()) {
                let j = dec.coefficient_jet(l, b).unwrap();
                for c in &j.coeffs {
                    assert!(
                        c.valuation_or_bound() >= 8,
                        "nonempty coefficient should vanish within certificate"
                    );
                }
            }
        }
    }

    #[test]
    fn constructive_matches_fit_depth_one() {
        // p=3, M=1, target sigma((1);(0);(1)): both paths agree on sigma_tilde
        let ctx = FieldContext::build(3, 1, 80).unwrap();
        let cfg = cfg_for(&ctx, 80);
        let cache = SampleCache::disabled();
        let target = IterIndex::sigma(vec![1], vec![0], vec![1]).unwrap();
        let fit = decompose_fit(&ctx, &cache, &cfg, &target).unwrap();
        let con = decompose_constructive(&ctx, &cache, &cfg, &target).unwrap();
        let tol = fit.residual_valuation.min(con.residual_valuation).min(12);
        assert!(tol >= 10, "certificates too weak: {tol}");
        let (jf, jc) = (fit.sigma_tilde_jet(1), con.sigma_tilde_jet(1));
        for (a, b) in jf.coeffs.iter().zip(&jc.coeffs) {
            let agree = a.agreement_valuation(&ctx, b);
            let claim = a.abs_precision().min(b.abs_precision()).min(tol);
            assert!(agree >= claim, "agree {agree} < claim {claim}");
        }
    }

    #[test]
    fn constructive_matches_fit_depth_two() {
        let ctx = FieldContext::build(3, 2, 80).unwrap();
        let cfg = cfg_for(&ctx, 80);
        let cache = SampleCache::disabled();
        let target = IterIndex::sigma(vec![1, 1], vec![0, 0], vec![1, 0]).unwrap();
        let fit = decompose_fit(&ctx, &cache, &cfg, &target).unwrap();
        let con = decompose_constructive(&ctx, &cache, &cfg, &target).unwrap();
        for l in 1..=2u32 {
            let tol = fit.per_class_residual[l as usize - 1]
                .min(con.per_class_residual[l as usize - 1])
                .min(10);
            assert!(tol >= 6, "certificates too weak at class {l}: {tol}");
            let (jf, jc) = (fit.sigma_tilde_jet(l), con.sigma_tilde_jet(l));
            for (a, b) in jf.coeffs.iter().zip(&jc.coeffs) {
                let agree = a.agreement_valuation(&ctx, b);
                let claim = a.abs_precision().min(b.abs_precision()).min(tol);
                assert!(agree >= claim, "class {l}: agree {agree} < claim {claim}");
            }
        }
    }

    #[test]
    fn cis_depth_zero_is_one() {
        let ctx = FieldContext::build(5, 4, 40).unwrap();
        let cfg = cfg_for(&ctx, 40);
        let cache = SampleCache::disabled();
        let target = IterIndex::sigma(vec![], vec![], vec![]).unwrap();
        let dec = decompose_fit(&ctx, &cache, &cfg, &target).unwrap();
        for l in 1..=4 {
            let v = cis_sigma(&dec, l);
            assert!(v.agreement_valuation(&ctx, &CycloScalar::one(&ctx)) >= 10);
        }
    }

    #[test]
    fn convergent_cis_equals_plain_limit() {
        // m != 0: regularization must be invisible; compare against the
        // plain extrapolated limit of raw samples at l*q^N
        let ctx = FieldContext::build(3, 2, 60).unwrap();
        let cfg = cfg_for(&ctx, 60);
        let cache = SampleCache::disabled();
        let target = IterIndex::sigma(vec![2], vec![1], vec![1]).unwrap();
        let dec = decompose_fit(&ctx, &cache, &cfg, &target).unwrap();
        for l in 1..=2u32 {
            let nodes = class_nodes(&ctx, l, cfg.n_min, cfg.n_max).unwrap();
            let grid = sample_series(l, &nodes, |n| eval_sigma(&ctx, &target, n, cfg.step_budget))
                .unwrap();
            let jet = extract_jet(&ctx, &grid, cfg.jet_order).unwrap();
            let plain = mps_limit(&jet);
            let reg = cis_sigma(&dec, l);
            let claim = plain.abs_precision().min(reg.abs_precision()).min(8);
            assert!(
                reg.agreement_valuation(&ctx, &plain) >= claim,
                "class {l}: {} < {claim}",
                reg.agreement_valuation(&ctx, &plain)
            );
        }
    }

    #[test]
    fn cis_gamma_cases() {
        let ctx = FieldContext::build(3, 2, 60).unwrap();
        let cfg = cfg_for(&ctx, 60);
        let cache = SampleCache::disabled();
        // gate closed on limit nodes
        let g = IterIndex::gamma(vec![1], vec![0], vec![1]).unwrap();
        let inner = decompose_fit(&ctx, &cache, &cfg, &IterIndex::sigma(vec![], vec![], vec![]).unwrap()).unwrap();
        let v = cis_gamma(&ctx, &g, &inner, 1).unwrap();
        assert!(v.is_exact_zero());
        // depth-1 gamma((1);(0);(0)) over inner sigma(empty): jet (1,0,..),
        // a_1 is certified zero
        let g = IterIndex::gamma(vec![1], vec![0], vec![0]).unwrap();
        let v = cis_gamma(&ctx, &g, &inner, 1).unwrap();
        assert!(v.valuation().is_none(), "a_1 of the constant jet must vanish");
        assert!(v.valuation_or_bound() >= 8);
    }

    #[test]
    fn constructive_depth_one_m_zero_is_unit_coefficient() {
        // sigma((s);(i);(0)) = sigma_p((s);(i)) definitionally
        let ctx = FieldContext::build(3, 2, 60).unwrap();
        let cfg = cfg_for(&ctx, 60);
        let cache = SampleCache::disabled();
        let target = IterIndex::sigma(vec![2], vec![1], vec![0]).unwrap();
        let fit = decompose_fit(&ctx, &cache, &cfg, &target).unwrap();
        let con = decompose_constructive(&ctx, &cache, &cfg, &target).unwrap();
        let want = BasisIndex { t: vec![2], j: vec![1] };
        for dec in [&fit, &con] {
            for l in 1..=2u32 {
                let jet = dec.coefficient_jet(l, &want).unwrap();
                assert!(
                    jet.coeffs[0].agreement_valuation(&ctx, &CycloScalar::one(&ctx)) >= 8
                );
            }
        }
    }
}
