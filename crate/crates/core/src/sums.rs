//! Exact evaluation of the cyclotomic p-adic iterated sum series.
//!
//! `sigma(s;i;m)(n) = sum over 0 < n_1 < ... < n_k < n, p | (n_j - m_j), of
//! zeta^(i.n) / n^s`, evaluated by a depth-layered prefix DP: one forward pass
//! over `a = 1..n` costs `O(depth)` field operations per step and can emit
//! values at any set of cut points. `gamma` is the gated boundary term of the
//! same recursion. The quasi-shuffle expansion is kept alongside as the
//! product oracle for the test suites.

use crate::error::{Error, Result};
use crate::field::FieldContext;
use crate::limb::Limbs;
use crate::scalar::CycloScalar;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Kind {
    Sigma,
    Gamma,
}

/// The triple `(s, i, m)` naming an iterated sum series.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct IterIndex {
    pub kind: Kind,
    pub s: Vec<u32>,
    pub i: Vec<u32>,
    pub m: Vec<u32>,
}

impl IterIndex {
    pub fn sigma(s: Vec<u32>, i: Vec<u32>, m: Vec<u32>) -> Result<Self> {
        if s.len() != i.len() || s.len() != m.len() {
            return Err(Error::Config("index rows s, i, m must have equal length".into()));
        }
        Ok(IterIndex { kind: Kind::Sigma, s, i, m })
    }

    pub fn gamma(s: Vec<u32>, i: Vec<u32>, m: Vec<u32>) -> Result<Self> {
        if s.len() != i.len() || s.len() != m.len() {
            return Err(Error::Config("index rows s, i, m must have equal length".into()));
        }
        if s.is_empty() {
            return Err(Error::Config("gamma requires depth at least 1".into()));
        }
        Ok(IterIndex { kind: Kind::Gamma, s, i, m })
    }

    /// `sigma_p(s; i) := sigma(s; i; 0)`.
    pub fn sigma_p(s: Vec<u32>, i: Vec<u32>) -> Result<Self> {
        let m = vec![0; s.len()];
        Self::sigma(s, i, m)
    }

    pub fn depth(&self) -> usize {
        self.s.len()
    }

    pub fn weight(&self) -> u32 {
        self.s.iter().sum()
    }

    /// Validate residue ranges against a field context.
    pub fn validate(&self, ctx: &FieldContext) -> Result<()> {
        let m_lvl = ctx.level() as u32;
        let p = ctx.p() as u32;
        if self.i.iter().any(|&x| x >= m_lvl) {
            return Err(Error::Config(format!("zeta exponent out of range [0, {m_lvl})")));
        }
        if self.m.iter().any(|&x| x >= p) {
            return Err(Error::Config(format!("congruence residue out of range [0, {p})")));
        }
        Ok(())
    }

    /// Inner index `(s', i', m')` with the last slot removed.
    pub fn inner(&self) -> IterIndex {
        let d = self.depth();
        IterIndex {
            kind: Kind::Sigma,
            s: self.s[..d - 1].to_vec(),
            i: self.i[..d - 1].to_vec(),
            m: self.m[..d - 1].to_vec(),
        }
    }

    pub fn canonical_string(&self) -> String {
        let join = |v: &[u32]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let k = match self.kind {
            Kind::Sigma => "sigma",
            Kind::Gamma => "gamma",
        };
        format!("{k}({};{};{})", join(&self.s), join(&self.i), join(&self.m))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        let (kind, rest) = if let Some(r) = text.strip_prefix("sigma") {
            (Kind::Sigma, r)
        } else if let Some(r) = text.strip_prefix("gamma") {
            (Kind::Gamma, r)
        } else {
            return Err(Error::Config(format!("index must start with sigma or gamma: {text}")));
        };
        let rest = rest
            .trim()
            .strip_prefix('(')
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| Error::Config(format!("malformed index: {text}")))?;
        let parts: Vec<&str> = rest.split(';').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!("index needs three rows s;i;m: {text}")));
        }
        let row = |t: &str| -> Result<Vec<u32>> {
            if t.trim().is_empty() {
                return Ok(Vec::new());
            }
            t.split(',')
                .map(|x| {
                    x.trim()
                        .parse::<u32>()
                        .map_err(|e| Error::Config(format!("bad index entry {x}: {e}")))
                })
                .collect()
        };
        let (s, i, m) = (row(parts[0])?, row(parts[1])?, row(parts[2])?);
        match kind {
            Kind::Sigma => IterIndex::sigma(s, i, m),
            Kind::Gamma => IterIndex::gamma(s, i, m),
        }
    }
}

/// One batched request: a sigma-kind index sampled at sorted cut points.
#[derive(Clone, Debug)]
pub struct SampleRequest {
    pub index: IterIndex,
    pub cuts: Vec<u64>,
}

struct IndexState {
    s: Vec<u32>,
    i: Vec<u32>,
    m: Vec<u32>,
    /// acc[j] = sigma of the depth-j prefix evaluated at (current a)+1
    acc: Vec<CycloScalar>,
    cuts: Vec<u64>,
    next_cut: usize,
    out: Vec<CycloScalar>,
}

/// Inverses of the p-unit parts of a window of consecutive integers,
/// amortized 3 multiplications each through a batched inversion.
struct UnitInvWindow {
    units: Vec<Limbs>,
    invs: Vec<Limbs>,
    vals: Vec<u32>,
    start: u64,
}

impl UnitInvWindow {
    fn fill(ctx: &FieldContext, start: u64, len: usize) -> Self {
        let pm = ctx.modulus();
        let p = ctx.p();
        let mut units = Vec::with_capacity(len);
        let mut vals = Vec::with_capacity(len);
        for off in 0..len {
            let mut a = start + off as u64;
            let mut v = 0u32;
            while a % p == 0 {
                a /= p;
                v += 1;
            }
            let mut limb = pm.zero();
            limb[0] = a;
            // a < p^P is guaranteed by the budget check for any sane config
            units.push(limb);
            vals.push(v);
        }
        // prefix products, one inversion, unwind
        let mut prefix = Vec::with_capacity(len);
        let mut acc = pm.one();
        for u in &units {
            acc = pm.mul(&acc, u);
            prefix.push(acc.clone());
        }
        let mut inv_acc = pm.inv_unit(&acc).expect("product of units is a unit");
        let mut invs = vec![pm.zero(); len];
        for k in (0..len).rev() {
            if k == 0 {
                invs[0] = inv_acc.clone();
            } else {
                invs[k] = pm.mul(&inv_acc, &prefix[k - 1]);
                inv_acc = pm.mul(&inv_acc, &units[k]);
            }
        }
        UnitInvWindow { units, invs, vals, start }
    }

    fn get(&self, a: u64) -> (&Limbs, &Limbs, u32) {
        let k = (a - self.start) as usize;
        (&self.units[k], &self.invs[k], self.vals[k])
    }
}

const INV_WINDOW: usize = 512;

/// Evaluate several sigma-kind indices at their cut points in one forward pass.
pub fn eval_sigma_batch(
    ctx: &FieldContext,
    requests: &[SampleRequest],
    budget: u64,
) -> Result<Vec<Vec<CycloScalar>>> {
    for r in requests {
        if r.index.kind != Kind::Sigma {
            return Err(Error::Config("eval_sigma_batch takes sigma-kind indices".into()));
        }
        r.index.validate(ctx)?;
        if r.cuts.windows(2).any(|w| w[0] >= w[1]) || r.cuts.iter().any(|&c| c == 0) {
            return Err(Error::Config("cut points must be positive, sorted, distinct".into()));
        }
    }
    let n_max = requests.iter().flat_map(|r| r.cuts.iter().copied()).max().unwrap_or(1);
    if n_max.saturating_sub(1) > budget {
        return Err(Error::Budget { needed: n_max - 1, budget });
    }

    let mut states: Vec<IndexState> = requests
        .iter()
        .map(|r| {
            let d = r.index.depth();
            let mut acc = Vec::with_capacity(d + 1);
            acc.push(CycloScalar::one(ctx));
            for _ in 0..d {
                acc.push(CycloScalar::zero(ctx));
            }
            IndexState {
                s: r.index.s.clone(),
                i: r.index.i.clone(),
                m: r.index.m.clone(),
                acc,
                cuts: r.cuts.clone(),
                next_cut: 0,
                out: Vec::with_capacity(r.cuts.len()),
            }
        })
        .collect();

    // cut at n = 1: empty sums
    for st in states.iter_mut() {
        while st.next_cut < st.cuts.len() && st.cuts[st.next_cut] == 1 {
            st.out.push(st.acc.last().unwrap().clone());
            st.next_cut += 1;
        }
    }

    let p = ctx.p();
    let m_lvl = ctx.level();
    let mut window: Option<UnitInvWindow> = None;

    for a in 1..n_max {
        let need_window = match &window {
            Some(w) => a < w.start || a >= w.start + w.units.len() as u64,
            None => true,
        };
        if need_window {
            let len = INV_WINDOW.min((n_max - a) as usize).max(1);
            window = Some(UnitInvWindow::fill(ctx, a, len));
        }
        let w = window.as_ref().unwrap();
        let (_, inv_unit, val_a) = w.get(a);
        let a_mod_p = (a % p) as u32;
        let a_mod_m = (a % m_lvl) as u32;

        for st in states.iter_mut() {
            let depth = st.s.len();
            // top-down so that level j reads acc[j-1] before it absorbs a
            for j in (1..=depth).rev() {
                if a_mod_p != st.m[j - 1] % p as u32 {
                    continue;
                }
                if st.acc[j - 1].is_exact_zero() {
                    continue;
                }
                let s_j = st.s[j - 1];
                // zeta^(i_j * a) / a^(s_j)
                let zexp = (st.i[j - 1] as u64 * a_mod_m as u64 % m_lvl) as i64;
                let mut unit_inv_pow = ctx.modulus().one();
                for _ in 0..s_j {
                    unit_inv_pow = ctx.modulus().mul(&unit_inv_pow, inv_unit);
                }
                let mut kelt = ctx.k_zero();
                kelt[0] = unit_inv_pow;
                let kelt = ctx.k_mul(&kelt, ctx.zeta_pow(zexp));
                let term =
                    CycloScalar::from_unit_kelt(ctx, kelt).shift_exp(-((s_j * val_a) as i64));
                let contrib = term.mul(ctx, &st.acc[j - 1]);
                st.acc[j] = st.acc[j].add(ctx, &contrib);
            }
            while st.next_cut < st.cuts.len() && st.cuts[st.next_cut] == a + 1 {
                st.out.push(st.acc.last().unwrap().clone());
                st.next_cut += 1;
            }
        }
    }

    Ok(states.into_iter().map(|st| st.out).collect())
}

/// `sigma(idx)(n)` by a single-pass evaluation.
pub fn eval_sigma(ctx: &FieldContext, idx: &IterIndex, n: u64, budget: u64) -> Result<CycloScalar> {
    let out = eval_sigma_batch(
        ctx,
        &[SampleRequest { index: idx.clone(), cuts: vec![n] }],
        budget,
    )?;
    Ok(out.into_iter().next().unwrap().into_iter().next().unwrap())
}

/// `gamma(idx)(n)`: the congruence-gated boundary factor times the inner sum.
pub fn eval_gamma(ctx: &FieldContext, idx: &IterIndex, n: u64, budget: u64) -> Result<CycloScalar> {
    if idx.kind != Kind::Gamma {
        return Err(Error::Config("eval_gamma takes a gamma-kind index".into()));
    }
    idx.validate(ctx)?;
    let d = idx.depth();
    let (s_k, i_k, m_k) = (idx.s[d - 1], idx.i[d - 1], idx.m[d - 1]);
    if (n % ctx.p()) as u32 != m_k % ctx.p() as u32 {
        return Ok(CycloScalar::zero(ctx));
    }
    let inner = eval_sigma(ctx, &idx.inner(), n, budget)?;
    let zexp = (i_k as u64 * (n % ctx.level()) % ctx.level()) as i64;
    let n_scalar = CycloScalar::from_i128(ctx, n as i128);
    let factor = CycloScalar::from_unit_kelt(ctx, ctx.zeta_pow(zexp).clone())
        .div(ctx, &n_scalar.pow(ctx, s_k))?;
    Ok(factor.mul(ctx, &inner))
}

/// Pointwise finite difference `f(n + p) - f(n)`.
pub fn delta_op(
    ctx: &FieldContext,
    f: &mut dyn FnMut(u64) -> Result<CycloScalar>,
    n: u64,
) -> Result<CycloScalar> {
    Ok(f(n + ctx.p())?.sub(ctx, &f(n)?))
}

/// Pointwise finite difference `f(n + pM) - f(n)`.
pub fn delta_m_op(
    ctx: &FieldContext,
    f: &mut dyn FnMut(u64) -> Result<CycloScalar>,
    n: u64,
) -> Result<CycloScalar> {
    Ok(f(n + ctx.p() * ctx.level())?.sub(ctx, &f(n)?))
}

/// Quasi-shuffle expansion of a product of two sigma-kind indices with the
/// same upper bound: interleavings plus merge terms where one slot from each
/// side collides; a merge requires equal congruence residues and adds the
/// `s` entries and the `zeta` exponents mod `M`.
pub fn quasi_shuffle_expand(
    a: &IterIndex,
    b: &IterIndex,
    m_level: u32,
) -> Result<Vec<(IterIndex, i64)>> {
    if a.kind != Kind::Sigma || b.kind != Kind::Sigma {
        return Err(Error::Config("quasi-shuffle is defined on sigma-kind indices".into()));
    }
    type Slots = Vec<(u32, u32, u32)>;
    fn slots(x: &IterIndex) -> Slots {
        x.s.iter().zip(&x.i).zip(&x.m).map(|((&s, &i), &m)| (s, i, m)).collect()
    }
    fn expand(a: &[(u32, u32, u32)], b: &[(u32, u32, u32)], m_level: u32) -> BTreeMap<Slots, i64> {
        let mut out = BTreeMap::new();
        if a.is_empty() {
            out.insert(b.to_vec(), 1);
            return out;
        }
        if b.is_empty() {
            out.insert(a.to_vec(), 1);
            return out;
        }
        let (la, lb) = (*a.last().unwrap(), *b.last().unwrap());
        for (mut key, coef) in expand(&a[..a.len() - 1], b, m_level) {
            key.push(la);
            *out.entry(key).or_insert(0) += coef;
        }
        for (mut key, coef) in expand(a, &b[..b.len() - 1], m_level) {
            key.push(lb);
            *out.entry(key).or_insert(0) += coef;
        }
        if la.2 == lb.2 {
            let merged = (la.0 + lb.0, (la.1 + lb.1) % m_level, la.2);
            for (mut key, coef) in expand(&a[..a.len() - 1], &b[..b.len() - 1], m_level) {
                key.push(merged);
                *out.entry(key).or_insert(0) += coef;
            }
        }
        out
    }
    let expanded = expand(&slots(a), &slots(b), m_level);
    Ok(expanded
        .into_iter()
        .filter(|(_, c)| *c != 0)
        .map(|(key, coef)| {
            let (s, rest): (Vec<u32>, Vec<(u32, u32)>) =
                key.iter().map(|&(s, i, m)| (s, (i, m))).unzip();
            let (i, m): (Vec<u32>, Vec<u32>) = rest.into_iter().unzip();
            (IterIndex { kind: Kind::Sigma, s, i, m }, coef)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const B: u64 = 1_000_000;

    #[test]
    fn depth_zero_is_one() {
        let ctx = FieldContext::build(5, 4, 20).unwrap();
        let idx = IterIndex::sigma(vec![], vec![], vec![]).unwrap();
        for n in [1u64, 2, 17] {
            let v = eval_sigma(&ctx, &idx, n, B).unwrap();
            assert!(v.agreement_valuation(&ctx, &CycloScalar::one(&ctx)) >= 20);
        }
    }

    #[test]
    fn depth_one_direct_enumeration() {
        // p=3, M=2, sigma((1);(1);(1))(5) = (-1)^1/1 + (-1)^4/4 = -3/4
        let ctx = FieldContext::build(3, 2, 20).unwrap();
        let idx = IterIndex::sigma(vec![1], vec![1], vec![1]).unwrap();
        let v = eval_sigma(&ctx, &idx, 5, B).unwrap();
        let expected = CycloScalar::from_ratio(&ctx, -3, 4);
        assert!(v.agreement_valuation(&ctx, &expected) >= 20);
    }

    #[test]
    fn sigma_p_direct_enumeration() {
        // p=3, sigma_p((1);(0))(7) = 1/3 + 1/6 = 1/2
        let ctx = FieldContext::build(3, 1, 20).unwrap();
        let idx = IterIndex::sigma_p(vec![1], vec![0]).unwrap();
        let v = eval_sigma(&ctx, &idx, 7, B).unwrap();
        let expected = CycloScalar::from_ratio(&ctx, 1, 2);
        assert!(v.agreement_valuation(&ctx, &expected) >= 19);
    }

    #[test]
    fn gamma_examples() {
        let ctx = FieldContext::build(3, 2, 20).unwrap();
        // gate closed: 3 does not divide 5 - 1
        let g = IterIndex::gamma(vec![1], vec![0], vec![1]).unwrap();
        let v = eval_gamma(&ctx, &g, 5, B).unwrap();
        assert!(v.is_exact_zero());
        // gate open at n = 4: (1/4) * sigma(empty)(4) = 1/4
        let v = eval_gamma(&ctx, &g, 4, B).unwrap();
        assert!(v.agreement_valuation(&ctx, &CycloScalar::from_ratio(&ctx, 1, 4)) >= 20);
        // depth 2: (1/6) * sigma((1);(0);(1))(6) = (1/6)(1 + 1/4) = 5/24
        let g2 = IterIndex::gamma(vec![1, 1], vec![0, 0], vec![1, 0]).unwrap();
        let v = eval_gamma(&ctx, &g2, 6, B).unwrap();
        assert!(v.agreement_valuation(&ctx, &CycloScalar::from_ratio(&ctx, 5, 24)) >= 19);
    }

    #[test]
    fn delta_identity_depth_one() {
        // p=3: delta sigma_p((1);(0))(6) = 1/6 = (zeta^0/6) sigma_p(empty)(6)
        let ctx = FieldContext::build(3, 1, 20).unwrap();
        let idx = IterIndex::sigma_p(vec![1], vec![0]).unwrap();
        let mut f = |n: u64| eval_sigma(&ctx, &idx, n, B);
        let d = delta_op(&ctx, &mut f, 6).unwrap();
        assert!(d.agreement_valuation(&ctx, &CycloScalar::from_ratio(&ctx, 1, 6)) >= 19);
    }

    #[test]
    fn delta_of_constant_vanishes() {
        let ctx = FieldContext::build(5, 4, 20).unwrap();
        let mut f = |_: u64| Ok(CycloScalar::from_i128(&ctx, 42));
        let d = delta_op(&ctx, &mut f, 10).unwrap();
        assert!(d.is_zero_form() && d.abs_precision() >= 20);
    }

    #[test]
    fn delta_m_telescopes_through_delta() {
        let ctx = FieldContext::build(3, 2, 25).unwrap();
        let idx = IterIndex::sigma_p(vec![1, 1], vec![1, 0]).unwrap();
        let eval = |n: u64| eval_sigma(&ctx, &idx, n, B);
        for n in [6u64, 9, 12] {
            let mut f = |x: u64| eval(x);
            let dm = delta_m_op(&ctx, &mut f, n).unwrap();
            let mut sum = CycloScalar::zero(&ctx);
            for l in 0..ctx.level() {
                let mut f2 = |x: u64| eval(x);
                let d = delta_op(&ctx, &mut f2, n + ctx.p() * l).unwrap();
                sum = sum.add(&ctx, &d);
            }
            assert!(dm.agreement_valuation(&ctx, &sum) >= 20);
        }
    }

    #[test]
    fn streaming_cuts_match_from_scratch() {
        let ctx = FieldContext::build(5, 4, 25).unwrap();
        let idx = IterIndex::sigma(vec![2, 1], vec![3, 1], vec![0, 2]).unwrap();
        let cuts = vec![1u64, 7, 30, 101];
        let batch = eval_sigma_batch(
            &ctx,
            &[SampleRequest { index: idx.clone(), cuts: cuts.clone() }],
            B,
        )
        .unwrap();
        for (k, &n) in cuts.iter().enumerate() {
            let single = eval_sigma(&ctx, &idx, n, B).unwrap();
            assert!(batch[0][k].eq_certified(&ctx, &single));
        }
    }

    #[test]
    fn increment_adds_gated_boundary_term() {
        // sigma(idx)(n+1) - sigma(idx)(n) is the gamma-style summand at n
        let ctx = FieldContext::build(3, 2, 40).unwrap();
        let idx = IterIndex::sigma(vec![1, 2], vec![1, 1], vec![1, 0]).unwrap();
        for n in 2u64..40 {
            let inc = eval_sigma(&ctx, &idx, n + 1, B)
                .unwrap()
                .sub(&ctx, &eval_sigma(&ctx, &idx, n, B).unwrap());
            let gamma = IterIndex::gamma(idx.s.clone(), idx.i.clone(), idx.m.clone()).unwrap();
            let boundary = eval_gamma(&ctx, &gamma, n, B).unwrap();
            assert!(
                inc.agreement_valuation(&ctx, &boundary) >= 20,
                "mismatch at n = {n}"
            );
        }
    }

    #[test]
    fn quasi_shuffle_no_merge_when_residues_differ() {
        let a = IterIndex::sigma(vec![1], vec![0], vec![1]).unwrap();
        let b = IterIndex::sigma(vec![1], vec![0], vec![2]).unwrap();
        let terms = quasi_shuffle_expand(&a, &b, 4).unwrap();
        assert_eq!(terms.len(), 2);
        assert!(terms.iter().all(|(t, c)| t.depth() == 2 && *c == 1));
    }

    #[test]
    fn quasi_shuffle_unit() {
        let unit = IterIndex::sigma(vec![], vec![], vec![]).unwrap();
        let b = IterIndex::sigma(vec![2, 1], vec![1, 0], vec![0, 1]).unwrap();
        let terms = quasi_shuffle_expand(&unit, &b, 4).unwrap();
        assert_eq!(terms, vec![(b, 1)]);
    }

    #[test]
    fn quasi_shuffle_classical_stuffle() {
        // sigma_p((1);(0))^2 = 2 sigma_p((1,1);(0,0)) + sigma_p((2);(0))
        let a = IterIndex::sigma_p(vec![1], vec![0]).unwrap();
        let terms = quasi_shuffle_expand(&a, &a, 1).unwrap();
        let mut sorted = terms.clone();
        sorted.sort();
        assert_eq!(
            sorted,
            vec![
                (IterIndex::sigma_p(vec![1, 1], vec![0, 0]).unwrap(), 2),
                (IterIndex::sigma_p(vec![2], vec![0]).unwrap(), 1),
            ]
        );
    }

    #[test]
    fn quasi_shuffle_pointwise() {
        let ctx = FieldContext::build(5, 4, 40).unwrap();
        let pairs = [
            (
                IterIndex::sigma(vec![1], vec![0], vec![1]).unwrap(),
                IterIndex::sigma(vec![1], vec![0], vec![2]).unwrap(),
                12u64,
            ),
            (
                IterIndex::sigma_p(vec![1], vec![2]).unwrap(),
                IterIndex::sigma(vec![2], vec![1], vec![3]).unwrap(),
                40,
            ),
            (
                IterIndex::sigma(vec![1, 1], vec![2, 0], vec![0, 1]).unwrap(),
                IterIndex::sigma(vec![2], vec![3], vec![0]).unwrap(),
                35,
            ),
        ];
        for (a, b, n) in pairs {
            let lhs = eval_sigma(&ctx, &a, n, B).unwrap().mul(&ctx, &eval_sigma(&ctx, &b, n, B).unwrap());
            let mut rhs = CycloScalar::zero(&ctx);
            for (t, c) in quasi_shuffle_expand(&a, &b, 4).unwrap() {
                let v = eval_sigma(&ctx, &t, n, B).unwrap();
                let scaled = v.mul(&ctx, &CycloScalar::from_i128(&ctx, c as i128));
                rhs = rhs.add(&ctx, &scaled);
            }
            assert!(lhs.agreement_valuation(&ctx, &rhs) >= 20, "failed for {} * {}", a.canonical_string(), b.canonical_string());
        }
    }

    #[test]
    fn budget_refusal() {
        let ctx = FieldContext::build(5, 4, 20).unwrap();
        let idx = IterIndex::sigma_p(vec![1], vec![0]).unwrap();
        match eval_sigma(&ctx, &idx, 1000, 10) {
            Err(Error::Budget { needed, budget }) => {
                assert_eq!((needed, budget), (999, 10));
            }
            other => panic!("expected budget refusal, got {other:?}"),
        }
    }

    #[test]
    fn index_parse_roundtrip() {
        for text in ["sigma(1,2;0,0;1,0)", "gamma(1;3;0)", "sigma(;;)"] {
            let idx = IterIndex::parse(text).unwrap();
            assert_eq!(idx.canonical_string(), text);
        }
    }
}
