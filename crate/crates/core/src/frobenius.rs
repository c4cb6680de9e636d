//! Weight-by-weight solver for the Frobenius coefficient system.
//!
//! The series `g_F` in the free algebra on `e_0..e_M` satisfies, coefficient
//! by coefficient, a differential equation whose right-hand side mixes
//! resolved lower-weight series with the unknown `g_i` coefficients of the
//! current weight. Integrating it gives, for each word `I`,
//! `n * g_F{e^I}(n) = [z^(n-1)] RHS` — a sequence that is affinely an
//! M-power-series function in `n`. Its limits along `l*q^N` vanish, which
//! (together with the `h` shuffle relation and the hard normalizations)
//! pins down every coefficient, weight by weight.
//!
//! All series kernels (`omega_i`, pulled-back `omega_i`) are geometric, so
//! the integration streams in `O(1)` state per term with no stored series.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::field::{FieldContext, KElt};
use crate::linalg::{solve_linear_system, Mat, PivotRhs};
use crate::mps::dense_nodes;
use crate::scalar::{CycloScalar, INF_EXP};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;

// ---------------------------------------------------------------------------
// Words and symbols
// ---------------------------------------------------------------------------

/// A monomial in the letters `e_0..e_M`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Word(pub Vec<u8>);

impl Word {
    pub fn empty() -> Self {
        Word(Vec::new())
    }

    pub fn weight(&self) -> u32 {
        self.0.len() as u32
    }

    /// Number of letters different from `e_0`.
    pub fn depth(&self) -> u32 {
        self.0.iter().filter(|&&c| c != 0).count() as u32
    }

    pub fn label(&self) -> String {
        if self.0.is_empty() {
            "1".to_string()
        } else {
            self.0.iter().map(|c| format!("e{c}")).collect::<Vec<_>>().join(" ")
        }
    }

    /// Parse a multi-zeta word `e_0^(s_k - 1) e_(i_k) ... e_0^(s_1 - 1) e_(i_1)`;
    /// `None` unless every zero-run is terminated by a nonzero letter.
    pub fn zeta_shape(&self) -> Option<(Vec<u32>, Vec<u32>)> {
        if self.0.is_empty() || *self.0.last().unwrap() == 0 {
            return None;
        }
        let mut s_desc = Vec::new();
        let mut i_desc = Vec::new();
        let mut zeros = 0u32;
        for &c in &self.0 {
            if c == 0 {
                zeros += 1;
            } else {
                s_desc.push(zeros + 1);
                i_desc.push(c as u32);
                zeros = 0;
            }
        }
        Some((s_desc, i_desc))
    }
}

/// All words of exactly weight `w` in lexicographic order.
pub fn words_of_weight(m_level: u32, w: u32) -> Vec<Word> {
    let mut out = vec![Word::empty()];
    for _ in 0..w {
        let mut next = Vec::with_capacity(out.len() * (m_level as usize + 1));
        for word in &out {
            for c in 0..=m_level as u8 {
                let mut v = word.0.clone();
                v.push(c);
                next.push(Word(v));
            }
        }
        out = next;
    }
    out
}

/// `i_underline`: the unique representative in `[1, M]` with
/// `p * i_underline = i (mod M)`; `e_0` maps to itself.
pub fn underline_index(ctx: &FieldContext, i: u32) -> u32 {
    if i == 0 {
        return 0;
    }
    let m = ctx.level();
    for cand in 1..=m as u32 {
        if (ctx.p() as u128 * cand as u128) % m as u128 == (i as u64 % m) as u128 {
            return cand;
        }
    }
    unreachable!("p is invertible mod M");
}

/// `[z^n]` of `omega_i` viewed as a series multiplier of `dz`
/// (`omega_0 = dz/z` is the pole and has no regular coefficients).
pub fn omega_coefficient(ctx: &FieldContext, i: u32, n: u64) -> CycloScalar {
    assert!(i >= 1, "omega_0 is the dlog pole; no regular z-expansion");
    let e = -(i as i64) * ((n + 1) % ctx.level()) as i64;
    CycloScalar::from_unit_kelt(ctx, ctx.zeta_pow(e).clone()).neg(ctx)
}

/// `[z^n]` of the Frobenius pullback of `omega_i` under `z -> z^p`:
/// supported only in degrees `p(j+1) - 1`.
pub fn pullback_omega_coefficient(ctx: &FieldContext, i: u32, n: u64) -> CycloScalar {
    assert!(i >= 1);
    let p = ctx.p();
    if (n + 1) % p != 0 {
        return CycloScalar::zero(ctx);
    }
    let j1 = (n + 1) / p;
    let e = -((i as u64 * (j1 % ctx.level())) as i64);
    CycloScalar::from_unit_kelt(ctx, ctx.zeta_pow(e).clone())
        .mul(ctx, &CycloScalar::from_i128(ctx, -(p as i128)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    /// `g_i`, `i` in `[1, M]`.
    G(u8),
    H,
}

/// Unknowns of one weight layer: `(source, word)` pairs, densely numbered.
#[derive(Clone, Debug)]
pub struct SymbolTable {
    pub weight: u32,
    pub words: Vec<Word>,
    m_level: u32,
}

impl SymbolTable {
    pub fn new(m_level: u32, weight: u32) -> Self {
        SymbolTable { weight, words: words_of_weight(m_level, weight), m_level }
    }

    pub fn count(&self) -> usize {
        (self.m_level as usize + 1) * self.words.len()
    }

    pub fn id(&self, source: Source, word: &Word) -> u32 {
        let widx = self
            .words
            .binary_search(word)
            .expect("word of the layer weight");
        let block = match source {
            Source::G(i) => {
                debug_assert!(i >= 1 && i as u32 <= self.m_level);
                (i - 1) as usize
            }
            Source::H => self.m_level as usize,
        };
        (block * self.words.len() + widx) as u32
    }

    pub fn describe(&self, id: u32) -> (Source, Word) {
        let widx = id as usize % self.words.len();
        let block = id as usize / self.words.len();
        let source = if block == self.m_level as usize {
            Source::H
        } else {
            Source::G(block as u8 + 1)
        };
        (source, self.words[widx].clone())
    }
}

// ---------------------------------------------------------------------------
// Affine forms
// ---------------------------------------------------------------------------

/// `constant + sum coeff_s * X_s` over the current layer's unknowns.
#[derive(Clone, Debug)]
pub struct AffineForm {
    pub constant: CycloScalar,
    /// Sorted by symbol id.
    pub linear: Vec<(u32, CycloScalar)>,
}

impl AffineForm {
    pub fn zero(ctx: &FieldContext) -> Self {
        AffineForm { constant: CycloScalar::zero(ctx), linear: Vec::new() }
    }

    pub fn from_const(c: CycloScalar) -> Self {
        AffineForm { constant: c, linear: Vec::new() }
    }

    pub fn from_symbol(ctx: &FieldContext, id: u32, coeff: CycloScalar) -> Self {
        AffineForm { constant: CycloScalar::zero(ctx), linear: vec![(id, coeff)] }
    }

    pub fn is_constant(&self) -> bool {
        self.linear.is_empty()
    }

    pub fn add(&self, ctx: &FieldContext, other: &Self) -> Self {
        let mut linear = Vec::with_capacity(self.linear.len() + other.linear.len());
        let (mut a, mut b) = (self.linear.iter().peekable(), other.linear.iter().peekable());
        loop {
            match (a.peek(), b.peek()) {
                (Some(&&(ia, _)), Some(&&(ib, _))) if ia == ib => {
                    let (_, ca) = a.next().unwrap();
                    let (_, cb) = b.next().unwrap();
                    linear.push((ia, ca.add(ctx, cb)));
                }
                (Some(&&(ia, _)), Some(&&(ib, _))) if ia < ib => {
                    let (_, ca) = a.next().unwrap();
                    linear.push((ia, ca.clone()));
                }
                (Some(_), Some(_)) | (None, Some(_)) => {
                    let (ib, cb) = b.next().unwrap();
                    linear.push((*ib, cb.clone()));
                }
                (Some(_), None) => {
                    let (ia, ca) = a.next().unwrap();
                    linear.push((*ia, ca.clone()));
                }
                (None, None) => break,
            }
        }
        AffineForm { constant: self.constant.add(ctx, &other.constant), linear }
    }

    pub fn neg(&self, ctx: &FieldContext) -> Self {
        AffineForm {
            constant: self.constant.neg(ctx),
            linear: self.linear.iter().map(|(i, c)| (*i, c.neg(ctx))).collect(),
        }
    }

    pub fn sub(&self, ctx: &FieldContext, other: &Self) -> Self {
        self.add(ctx, &other.neg(ctx))
    }

    pub fn scale(&self, ctx: &FieldContext, k: &CycloScalar) -> Self {
        AffineForm {
            constant: self.constant.mul(ctx, k),
            linear: self.linear.iter().map(|(i, c)| (*i, c.mul(ctx, k))).collect(),
        }
    }

    /// Product; at most one factor may carry a linear part (the triangular
    /// structure of the weight recursion guarantees this).
    pub fn mul(&self, ctx: &FieldContext, other: &Self) -> Self {
        assert!(
            self.is_constant() || other.is_constant(),
            "product of two non-constant affine forms"
        );
        if self.is_constant() {
            other.scale(ctx, &self.constant)
        } else {
            self.scale(ctx, &other.constant)
        }
    }

    pub fn valuation_floor(&self) -> i64 {
        let mut v = self.constant.valuation_or_bound();
        for (_, c) in &self.linear {
            v = v.min(c.valuation_or_bound());
        }
        v
    }

    pub fn cap_abs(&self, ctx: &FieldContext, abs: i64) -> Self {
        AffineForm {
            constant: self.constant.cap_abs(ctx, abs),
            linear: self.linear.iter().map(|(i, c)| (*i, c.cap_abs(ctx, abs))).collect(),
        }
    }

    /// Substitute resolved symbol values.
    pub fn eval(&self, ctx: &FieldContext, values: &[CycloScalar]) -> CycloScalar {
        let mut acc = self.constant.clone();
        for (id, c) in &self.linear {
            acc = acc.add(ctx, &c.mul(ctx, &values[*id as usize]));
        }
        acc
    }
}

impl PivotRhs for AffineForm {
    fn sub_scaled(&mut self, ctx: &FieldContext, coef: &CycloScalar, other: &Self) {
        *self = self.sub(ctx, &other.scale(ctx, coef));
    }

    fn div_by(&mut self, ctx: &FieldContext, coef: &CycloScalar) -> Result<()> {
        let inv = coef.inv(ctx)?;
        *self = self.scale(ctx, &inv);
        Ok(())
    }

    fn residual_valuation(&self) -> i64 {
        self.valuation_floor()
    }
}

// ---------------------------------------------------------------------------
// Resolved coefficient store
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    Stacked,
    HardZero,
    EZeroChain,
    HTelescope,
    Pair,
}

/// All coefficients of `g_1..g_M` and `h` resolved so far.
#[derive(Clone, Debug)]
pub struct Resolved {
    m_level: u32,
    g: Vec<BTreeMap<Word, CycloScalar>>,
    h: BTreeMap<Word, CycloScalar>,
    routes: BTreeMap<(u8, Word), Route>,
    pub max_weight: u32,
}

impl Resolved {
    pub fn new(ctx: &FieldContext) -> Self {
        let m = ctx.level() as u32;
        let mut g = Vec::with_capacity(m as usize);
        for _ in 0..m {
            let mut map = BTreeMap::new();
            map.insert(Word::empty(), CycloScalar::one(ctx));
            g.push(map);
        }
        let mut h = BTreeMap::new();
        h.insert(Word::empty(), CycloScalar::one(ctx));
        Resolved { m_level: m, g, h, routes: BTreeMap::new(), max_weight: 0 }
    }

    /// `g_i[word]`; `i` in `[1, M]`.
    pub fn g_coeff(&self, i: u32, word: &Word) -> Option<&CycloScalar> {
        self.g[i as usize - 1].get(word)
    }

    pub fn h_coeff(&self, word: &Word) -> Option<&CycloScalar> {
        self.h.get(word)
    }

    pub fn route(&self, source: Source, word: &Word) -> Option<&Route> {
        let tag = match source {
            Source::G(i) => i,
            Source::H => 0,
        };
        self.routes.get(&(tag, word.clone()))
    }

    fn insert(&mut self, source: Source, word: Word, value: CycloScalar, route: Route) {
        match source {
            Source::G(i) => {
                self.routes.insert((i, word.clone()), route);
                self.g[i as usize - 1].insert(word, value);
            }
            Source::H => {
                self.routes.insert((0, word.clone()), route);
                self.h.insert(word, value);
            }
        }
    }

    /// Antipode coefficients `g_i^{-1}[word]` for all words of weight <= `w`,
    /// from resolved data only.
    pub fn antipode(&self, ctx: &FieldContext, i: u32, w: u32) -> BTreeMap<Word, CycloScalar> {
        let mut inv: BTreeMap<Word, CycloScalar> = BTreeMap::new();
        inv.insert(Word::empty(), CycloScalar::one(ctx));
        for weight in 1..=w {
            for word in words_of_weight(self.m_level, weight) {
                // inv[W] = - sum_{U V = W, U nonempty} g[U] inv[V]
                let mut acc = CycloScalar::zero(ctx);
                for cut in 1..=word.0.len() {
                    let u = Word(word.0[..cut].to_vec());
                    let v = Word(word.0[cut..].to_vec());
                    let (Some(gu), Some(iv)) = (self.g_coeff(i, &u), inv.get(&v)) else {
                        continue;
                    };
                    acc = acc.add(ctx, &gu.mul(ctx, iv));
                }
                inv.insert(word, acc.neg(ctx));
            }
        }
        inv
    }
}

// ---------------------------------------------------------------------------
// Streaming layer integration
// ---------------------------------------------------------------------------

enum Term {
    /// `+p * coef * B_(m,prefix)(n)` with `B(n) = zeta^-m (B(n-1) + S_A(n-1))`.
    Conv { m: u32, prefix_len: usize, coef: CycloScalar, state: AffineForm },
    /// `-p * coef * S_A(n)` (the `omega_0` pole against a shorter word).
    Pole { prefix_len: usize, coef: CycloScalar },
    /// `sign * p * zeta^(-m n) * X_sym`.
    Linear { sym: u32, sign: i8, m: u32 },
}

struct WordPlan {
    word: Word,
    /// Index of the word minus its first letter (None for the empty word).
    inner: Option<usize>,
    first: u8,
    terms: Vec<Term>,
    /// Ring of the last p+1 values of S (coefficients of g_F[word]).
    ring: Vec<AffineForm>,
    /// Ring of the last p+1 values of the pulled-back-omega convolution.
    t1_ring: Vec<AffineForm>,
    capture_at: Vec<u64>,
    next_capture: usize,
    captured: Vec<AffineForm>,
}

/// Output of one integration pass.
pub struct LayerSamples {
    /// Captured `r_n = n * g_F{e^I}(n)` per word at its requested points.
    pub coefficient_samples: BTreeMap<Word, Vec<AffineForm>>,
}

fn ring_get<'r>(
    plans: &'r [WordPlan],
    zero: &'r AffineForm,
    one: &'r AffineForm,
    idx: usize,
    n: u64,
    lag: u64,
    p: u64,
) -> &'r AffineForm {
    if n < lag {
        return zero;
    }
    let at = n - lag;
    if at == 0 {
        return if plans[idx].word.0.is_empty() { one } else { zero };
    }
    &plans[idx].ring[(at % (p + 1)) as usize]
}

/// Integrate every word of weight <= `top_weight`, with the unknowns being
/// the `(g_i, word)` symbols of weight `top_weight - 1`, capturing
/// `n * g_F{e^I}(n)` at the requested points.
pub fn integrate_layer(
    ctx: &FieldContext,
    resolved: &Resolved,
    symbols: &SymbolTable,
    top_weight: u32,
    n_max: u64,
    capture: &BTreeMap<Word, Vec<u64>>,
    budget: u64,
) -> Result<LayerSamples> {
    if n_max > budget {
        return Err(Error::Budget { needed: n_max, budget });
    }
    let m = ctx.level() as u32;
    let p = ctx.p();
    let w_solve = top_weight - 1;

    let mut words: Vec<Word> = Vec::new();
    for w in 0..=top_weight {
        words.extend(words_of_weight(m, w));
    }
    let index_of: BTreeMap<Word, usize> =
        words.iter().enumerate().map(|(k, w)| (w.clone(), k)).collect();

    let antipodes: Vec<BTreeMap<Word, CycloScalar>> =
        (1..=m).map(|i| resolved.antipode(ctx, i, w_solve.saturating_sub(1))).collect();

    let zero_aff = AffineForm::zero(ctx);
    let one_aff = AffineForm::from_const(CycloScalar::one(ctx));

    let mut plans: Vec<WordPlan> = Vec::with_capacity(words.len());
    for word in &words {
        let letters = &word.0;
        let len = letters.len();
        let is_top = word.weight() == top_weight;
        let inner =
            if len == 0 { None } else { Some(index_of[&Word(letters[1..].to_vec())]) };
        // merged resolved coefficient tables keyed by (m, prefix_len)
        let mut conv: BTreeMap<(u32, usize), CycloScalar> = BTreeMap::new();
        let mut poles: BTreeMap<usize, CycloScalar> = BTreeMap::new();
        let mut linear: Vec<Term> = Vec::new();
        for j in 0..len {
            let i = letters[j] as u32;
            let k_word = Word(letters[j + 1..].to_vec());
            let j_word = &letters[..j];
            if i == 0 {
                // g_0 = 1: only K = empty contributes, through omega_0
                if k_word.0.is_empty() {
                    let e = poles.entry(j).or_insert_with(|| CycloScalar::zero(ctx));
                    *e = e.add(ctx, &CycloScalar::one(ctx));
                }
                continue;
            }
            let mu = underline_index(ctx, i);
            let top_k = is_top && w_solve >= 1 && k_word.weight() == w_solve && j == 0;
            if top_k {
                linear.push(Term::Linear { sym: symbols.id(Source::G(i as u8), &k_word), sign: 1, m: mu });
                continue;
            }
            let gamma = resolved
                .g_coeff(i, &k_word)
                .cloned()
                .ok_or_else(|| Error::Unresolved(format!("g_{i}[{}]", k_word.label())))?;
            if gamma.is_exact_zero() {
                continue;
            }
            for a in 0..=j {
                let b_word = Word(j_word[a..].to_vec());
                let top_b = is_top
                    && w_solve >= 1
                    && b_word.weight() == w_solve
                    && a == 0
                    && k_word.0.is_empty();
                if top_b {
                    // affine antipode: -X_(g_i, B) plus a resolved remainder
                    linear.push(Term::Linear {
                        sym: symbols.id(Source::G(i as u8), &b_word),
                        sign: -1,
                        m: mu,
                    });
                    let mut rest = CycloScalar::zero(ctx);
                    for cut in 1..b_word.0.len() {
                        let u = Word(b_word.0[..cut].to_vec());
                        let v = Word(b_word.0[cut..].to_vec());
                        if let (Some(gu), Some(iv)) =
                            (resolved.g_coeff(i, &u), antipodes[i as usize - 1].get(&v))
                        {
                            rest = rest.add(ctx, &gu.mul(ctx, iv));
                        }
                    }
                    let coef = rest.neg(ctx).mul(ctx, &gamma);
                    if !coef.is_exact_zero() {
                        let e = conv.entry((mu, a)).or_insert_with(|| CycloScalar::zero(ctx));
                        *e = e.add(ctx, &coef);
                    }
                    continue;
                }
                let beta = antipodes[i as usize - 1]
                    .get(&b_word)
                    .cloned()
                    .ok_or_else(|| Error::Unresolved(format!("g_{i}^-1[{}]", b_word.label())))?;
                let coef = beta.mul(ctx, &gamma);
                if coef.is_exact_zero() {
                    continue;
                }
                let e = conv.entry((mu, a)).or_insert_with(|| CycloScalar::zero(ctx));
                *e = e.add(ctx, &coef);
            }
        }
        let mut terms: Vec<Term> = Vec::new();
        for ((mu, a), coef) in conv {
            if !coef.is_exact_zero() {
                terms.push(Term::Conv { m: mu, prefix_len: a, coef, state: zero_aff.clone() });
            }
        }
        for (a, coef) in poles {
            if !coef.is_exact_zero() {
                terms.push(Term::Pole { prefix_len: a, coef });
            }
        }
        terms.extend(linear);
        plans.push(WordPlan {
            word: word.clone(),
            inner,
            first: letters.first().copied().unwrap_or(0),
            terms,
            ring: vec![zero_aff.clone(); p as usize + 1],
            t1_ring: vec![zero_aff.clone(); p as usize + 1],
            capture_at: capture.get(word).cloned().unwrap_or_default(),
            next_capture: 0,
            captured: Vec::new(),
        });
    }

    let p_scalar = CycloScalar::from_i128(ctx, p as i128);
    for n in 1..=n_max {
        let n_scalar = CycloScalar::from_i128(ctx, n as i128);
        let n_inv = n_scalar.inv(ctx)?;
        for w_idx in 0..plans.len() {
            if plans[w_idx].word.0.is_empty() {
                continue;
            }
            let mut r = AffineForm::zero(ctx);
            // F* omega_(first) against the series of the word minus one letter
            let inner = plans[w_idx].inner.unwrap();
            if plans[w_idx].first == 0 {
                // p * S_inner(n) — inner is shorter, already updated this step
                let s_now = ring_get(&plans, &zero_aff, &one_aff, inner, n, 0, p);
                r = r.add(ctx, &s_now.scale(ctx, &p_scalar));
            } else {
                let a0 = plans[w_idx].first as i64;
                let t1_prev = if n >= p {
                    plans[w_idx].t1_ring[((n - p) % (p + 1)) as usize].clone()
                } else {
                    zero_aff.clone()
                };
                let s_lag = ring_get(&plans, &zero_aff, &one_aff, inner, n, p, p).clone();
                let zeta = ctx.zeta_pow(-a0);
                let t1 = t1_prev
                    .sub(ctx, &s_lag.scale(ctx, &p_scalar))
                    .scale(ctx, &CycloScalar::from_unit_kelt(ctx, zeta.clone()));
                plans[w_idx].t1_ring[(n % (p + 1)) as usize] = t1.clone();
                r = r.add(ctx, &t1);
            }
            // split terms
            let mut local_updates: Vec<(usize, AffineForm)> = Vec::new();
            for (t_idx, term) in plans[w_idx].terms.iter().enumerate() {
                match term {
                    Term::Conv { m, prefix_len, coef, state } => {
                        let a_idx = index_of[&Word(plans[w_idx].word.0[..*prefix_len].to_vec())];
                        let s_prev = ring_get(&plans, &zero_aff, &one_aff, a_idx, n, 1, p);
                        let zeta = CycloScalar::from_unit_kelt(ctx, ctx.zeta_pow(-(*m as i64)).clone());
                        let new_state = state.add(ctx, s_prev).scale(ctx, &zeta);
                        r = r.add(ctx, &new_state.scale(ctx, &p_scalar.mul(ctx, coef)));
                        local_updates.push((t_idx, new_state));
                    }
                    Term::Pole { prefix_len, coef } => {
                        let a_idx = index_of[&Word(plans[w_idx].word.0[..*prefix_len].to_vec())];
                        let s_now = ring_get(&plans, &zero_aff, &one_aff, a_idx, n, 0, p);
                        let scaled = s_now.scale(ctx, &p_scalar.mul(ctx, coef)).neg(ctx);
                        r = r.add(ctx, &scaled);
                    }
                    Term::Linear { sym, sign, m } => {
                        let e = -((*m as u64 * (n % ctx.level()) % ctx.level()) as i64);
                        let mut c = p_scalar.mul_unit(ctx, ctx.zeta_pow(e));
                        if *sign < 0 {
                            c = c.neg(ctx);
                        }
                        r = r.add(ctx, &AffineForm::from_symbol(ctx, *sym, c));
                    }
                }
            }
            for (t_idx, new_state) in local_updates {
                if let Term::Conv { state, .. } = &mut plans[w_idx].terms[t_idx] {
                    *state = new_state;
                }
            }
            // capture r_n then update the value ring with S(n) = r_n / n
            while plans[w_idx].next_capture < plans[w_idx].capture_at.len()
                && plans[w_idx].capture_at[plans[w_idx].next_capture] == n
            {
                plans[w_idx].captured.push(r.clone());
                plans[w_idx].next_capture += 1;
            }
            let value = r.scale(ctx, &n_inv);
            let slot = (n % (p + 1)) as usize;
            plans[w_idx].ring[slot] = value;
        }
    }

    let mut coefficient_samples = BTreeMap::new();
    for plan in plans {
        if !plan.capture_at.is_empty() {
            if plan.captured.len() != plan.capture_at.len() {
                return Err(Error::Config("capture points beyond n_max".into()));
            }
            coefficient_samples.insert(plan.word, plan.captured);
        }
    }
    Ok(LayerSamples { coefficient_samples })
}

// ---------------------------------------------------------------------------
// Constraint assembly
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ConstraintRow {
    pub form: AffineForm,
    pub label: String,
    /// Certificate of the extraction that produced this row (INF for exact rows).
    pub quality: i64,
}

pub struct AssembledSystem {
    pub symbols: SymbolTable,
    pub rows: Vec<ConstraintRow>,
}

/// Affine jet fit at the given nodes; returns the constant term and the
/// residual certificate (same dual-fit scheme as the scalar path).
fn affine_jet_constant(
    ctx: &FieldContext,
    nodes: &[u64],
    values: &[AffineForm],
    d: u32,
) -> Result<(AffineForm, i64)> {
    let cols = d as usize + 1;
    let build = |skip_first: bool| -> (Mat, Vec<AffineForm>) {
        let kept: Vec<usize> =
            (0..nodes.len()).filter(|&r| !(skip_first && r == 0)).collect();
        let mat = Mat::from_fn(kept.len(), cols, |ri, c| {
            CycloScalar::from_i128(ctx, nodes[kept[ri]] as i128).pow(ctx, c as u32)
        });
        let rhs: Vec<AffineForm> = kept.iter().map(|&r| values[r].clone()).collect();
        (mat, rhs)
    };
    let (mat_a, rhs_a) = build(false);
    let sol_a = solve_linear_system(ctx, &mat_a, &rhs_a, "limit constraint jet")?;
    let (mat_b, rhs_b) = build(true);
    let sol_b = solve_linear_system(ctx, &mat_b, &rhs_b, "limit constraint jet stability")?;
    let mut cert = INF_EXP;
    for r in &sol_a.residuals {
        cert = cert.min(r.valuation_floor());
    }
    let agree = sol_a.x[0].sub(ctx, &sol_b.x[0]).valuation_floor();
    let a0 = sol_a.x[0].cap_abs(ctx, cert.min(agree));
    Ok((a0, cert.min(agree)))
}

/// The limit-vanishing rows: for every top word and class, the constant term
/// of the class jet of `n * g_F{e^I}(n)` equals 0.
fn limit_rows(
    ctx: &FieldContext,
    samples: &LayerSamples,
    class_nodes: &[Vec<u64>],
    d: u32,
    cert_floor: i64,
) -> Result<Vec<ConstraintRow>> {
    let m = class_nodes.len();
    let jobs: Vec<(&Word, &Vec<AffineForm>)> = samples.coefficient_samples.iter().collect();
    let rows: Result<Vec<Vec<ConstraintRow>>> = jobs
        .par_iter()
        .map(|(word, vals)| {
            let mut out = Vec::new();
            for l in 1..=m {
                let count = class_nodes[l - 1].len();
                let offset: usize = class_nodes[..l - 1].iter().map(|v| v.len()).sum();
                let chunk = &vals[offset..offset + count];
                let (a0, quality) = affine_jet_constant(ctx, &class_nodes[l - 1], chunk, d)?;
                if quality < cert_floor {
                    return Err(Error::Certificate {
                        got: quality,
                        floor: cert_floor,
                        context: format!(
                            "limit constraint for {} at class {l}: raise D or the node range",
                            word.label()
                        ),
                    });
                }
                // an identically-zero row carries no information
                if a0.is_constant() && a0.constant.valuation_or_bound() >= quality {
                    continue;
                }
                out.push(ConstraintRow {
                    form: a0,
                    label: format!("limit[{} | l={l}]", word.label()),
                    quality,
                });
            }
            Ok(out)
        })
        .collect();
    Ok(rows?.into_iter().flatten().collect())
}

/// Coefficient of `word` in `h * sum_i g_i^-1 e_i g_i - sum_i e_i * h`,
/// affine in the weight-`w` unknowns.
fn h_relation_row(
    ctx: &FieldContext,
    resolved: &Resolved,
    symbols: &SymbolTable,
    antipodes: &[BTreeMap<Word, CycloScalar>],
    word: &Word,
) -> AffineForm {
    let w = symbols.weight;
    let m = ctx.level() as u32;
    let letters = &word.0;
    let len = letters.len();
    let h_of = |wd: &Word| -> AffineForm {
        if wd.weight() == w {
            AffineForm::from_symbol(ctx, symbols.id(Source::H, wd), CycloScalar::one(ctx))
        } else {
            AffineForm::from_const(resolved.h_coeff(wd).cloned().expect("lower h resolved"))
        }
    };
    let g_of = |i: u32, wd: &Word| -> AffineForm {
        if i == 0 {
            return if wd.0.is_empty() {
                AffineForm::from_const(CycloScalar::one(ctx))
            } else {
                AffineForm::zero(ctx)
            };
        }
        if wd.weight() == w {
            AffineForm::from_symbol(ctx, symbols.id(Source::G(i as u8), wd), CycloScalar::one(ctx))
        } else {
            AffineForm::from_const(resolved.g_coeff(i, wd).cloned().expect("lower g resolved"))
        }
    };
    let ginv_of = |i: u32, wd: &Word| -> AffineForm {
        if i == 0 {
            return if wd.0.is_empty() {
                AffineForm::from_const(CycloScalar::one(ctx))
            } else {
                AffineForm::zero(ctx)
            };
        }
        if wd.weight() == w {
            // -X_(g_i, wd) + resolved remainder
            let mut rest = CycloScalar::zero(ctx);
            for cut in 1..wd.0.len() {
                let u = Word(wd.0[..cut].to_vec());
                let v = Word(wd.0[cut..].to_vec());
                if let (Some(gu), Some(iv)) =
                    (resolved.g_coeff(i, &u), antipodes[i as usize - 1].get(&v))
                {
                    rest = rest.add(ctx, &gu.mul(ctx, iv));
                }
            }
            let mut f = AffineForm::from_symbol(
                ctx,
                symbols.id(Source::G(i as u8), wd),
                CycloScalar::from_i128(ctx, -1),
            );
            f.constant = rest.neg(ctx);
            f
        } else {
            AffineForm::from_const(
                antipodes[i as usize - 1].get(wd).cloned().expect("lower antipode"),
            )
        }
    };

    let mut lhs = AffineForm::zero(ctx);
    // word = W_h . W_1 . e_i . W_2
    for split_i in 0..len {
        let i = letters[split_i] as u32;
        if i > m {
            continue;
        }
        for split_h in 0..=split_i {
            let w_h = Word(letters[..split_h].to_vec());
            let w_1 = Word(letters[split_h..split_i].to_vec());
            let w_2 = Word(letters[split_i + 1..].to_vec());
            let term = h_of(&w_h).mul(ctx, &ginv_of(i, &w_1)).mul(ctx, &g_of(i, &w_2));
            lhs = lhs.add(ctx, &term);
        }
    }
    // rhs: word = e_i . W'
    let rhs = h_of(&Word(letters[1..].to_vec()));
    lhs.sub(ctx, &rhs)
}

#[allow(clippy::too_many_arguments)]
pub fn assemble_weight_system(
    ctx: &FieldContext,
    resolved: &Resolved,
    w: u32,
    samples: &LayerSamples,
    class_nodes: &[Vec<u64>],
    d: u32,
    cert_floor: i64,
) -> Result<AssembledSystem> {
    let m = ctx.level() as u32;
    let symbols = SymbolTable::new(m, w);
    let mut rows = limit_rows(ctx, samples, class_nodes, d, cert_floor)?;
    let antipodes: Vec<BTreeMap<Word, CycloScalar>> =
        (1..=m).map(|i| resolved.antipode(ctx, i, w.saturating_sub(1))).collect();
    for word in words_of_weight(m, w + 1) {
        let form = h_relation_row(ctx, resolved, &symbols, &antipodes, &word);
        if form.is_constant() && form.constant.valuation_or_bound() >= ctx.precision() as i64 / 2 {
            continue;
        }
        rows.push(ConstraintRow {
            form,
            label: format!("h-rel[{}]", word.label()),
            quality: INF_EXP,
        });
    }
    // hard normalizations: g_i[e_i^w] = 0 and h[e_0^w] = 0
    for i in 1..=m {
        let word = Word(vec![i as u8; w as usize]);
        rows.push(ConstraintRow {
            form: AffineForm::from_symbol(
                ctx,
                symbols.id(Source::G(i as u8), &word),
                CycloScalar::one(ctx),
            ),
            label: format!("hard[g_{i}[{}] = 0]", word.label()),
            quality: INF_EXP,
        });
    }
    let e0w = Word(vec![0u8; w as usize]);
    rows.push(ConstraintRow {
        form: AffineForm::from_symbol(ctx, symbols.id(Source::H, &e0w), CycloScalar::one(ctx)),
        label: format!("hard[h[{}] = 0]", e0w.label()),
        quality: INF_EXP,
    });
    Ok(AssembledSystem { symbols, rows })
}

/// Rank of the affine rows over the layer symbols (pivots with certified
/// nonzero coefficients only). With `augmented` the constant column is
/// included, so rank equality detects both linear implication and
/// right-hand-side consistency.
pub fn system_rank(
    ctx: &FieldContext,
    rows: &[AffineForm],
    symbol_count: usize,
    augmented: bool,
) -> usize {
    let n_symbols = symbol_count + augmented as usize;
    let mut mat: Vec<Vec<CycloScalar>> = rows
        .iter()
        .map(|r| {
            let mut dense = vec![CycloScalar::zero(ctx); n_symbols];
            for (id, c) in &r.linear {
                dense[*id as usize] = c.clone();
            }
            if augmented {
                dense[symbol_count] = r.constant.clone();
            }
            dense
        })
        .collect();
    let mut used_row = vec![false; mat.len()];
    let mut rank = 0;
    for _ in 0..n_symbols {
        let mut best: Option<(i64, usize, usize)> = None;
        for (r, row) in mat.iter().enumerate() {
            if used_row[r] {
                continue;
            }
            for (c, entry) in row.iter().enumerate() {
                if let Some(v) = entry.valuation() {
                    if best.map_or(true, |b| (v, r, c) < b) {
                        best = Some((v, r, c));
                    }
                }
            }
        }
        let Some((_, pr, pc)) = best else { break };
        rank += 1;
        used_row[pr] = true;
        let pivot = mat[pr][pc].clone();
        let pivot_row = mat[pr].clone();
        for (r, row) in mat.iter_mut().enumerate() {
            if used_row[r] || row[pc].is_zero_form() {
                continue;
            }
            let factor = row[pc].div(ctx, &pivot).expect("pivot is a unit at its precision");
            for c in 0..n_symbols {
                let delta = factor.mul(ctx, &pivot_row[c]);
                row[c] = row[c].sub(ctx, &delta);
            }
        }
    }
    rank
}

// ---------------------------------------------------------------------------
// Weight solving
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct WeightReport {
    pub weight: u32,
    pub symbols: usize,
    pub rows: usize,
    pub rank: usize,
    pub pivot_valuation: i64,
    pub residual_valuation: i64,
    pub route: String,
    /// Do the solved `g_i` coefficient multisets coincide across `i`?
    pub coefficient_sets_match: bool,
}

pub struct FrobeniusSolver<'c> {
    ctx: &'c FieldContext,
    cfg: RunConfig,
    pub resolved: Resolved,
    pub reports: Vec<WeightReport>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveRoute {
    /// One stacked elimination; fall back to the derivation order on rank loss.
    StackedThenFallback,
    /// Force the paper-order derivation (used by the route-independence checks).
    PaperOrder,
}

impl<'c> FrobeniusSolver<'c> {
    pub fn new(ctx: &'c FieldContext, cfg: &RunConfig) -> Self {
        FrobeniusSolver {
            ctx,
            cfg: cfg.clone(),
            resolved: Resolved::new(ctx),
            reports: Vec::new(),
        }
    }

    /// Dense class nodes used for the limit constraints.
    pub fn solver_nodes(&self) -> Result<Vec<Vec<u64>>> {
        let m = self.ctx.level() as u32;
        let d = self.cfg.jet_order;
        let count = (d + 1 + self.cfg.holdout) as usize;
        let val_floor = self.cfg.fit_valuation_for(self.ctx);
        (1..=m).map(|l| dense_nodes(self.ctx, l, val_floor, count)).collect()
    }

    fn layer_n_max(&self, class_nodes: &[Vec<u64>]) -> u64 {
        let natural = class_nodes.iter().filter_map(|v| v.last().copied()).max().unwrap_or(0);
        self.cfg.n_override.unwrap_or(natural)
    }

    pub fn solve_weight(&mut self, w: u32, route: SolveRoute) -> Result<()> {
        let system = self.assemble_for_weight(w)?;
        self.solve_assembled(&system, route)
    }

    /// Integrate the layer and assemble the full constraint system for the
    /// weight-`w` unknowns (limit rows, h-relation rows, hard rows).
    pub fn assemble_for_weight(&self, w: u32) -> Result<AssembledSystem> {
        assert_eq!(self.resolved.max_weight + 1, w, "weights resolve in order");
        let ctx = self.ctx;
        let class_nodes = self.solver_nodes()?;
        let n_max = self.layer_n_max(&class_nodes);
        let symbols = SymbolTable::new(ctx.level() as u32, w);

        let mut capture: BTreeMap<Word, Vec<u64>> = BTreeMap::new();
        let all_nodes: Vec<u64> = {
            let mut v: Vec<u64> = class_nodes.iter().flatten().copied().collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        for word in words_of_weight(ctx.level() as u32, w + 1) {
            capture.insert(word, all_nodes.clone());
        }
        let samples = integrate_layer(
            ctx,
            &self.resolved,
            &symbols,
            w + 1,
            n_max,
            &capture,
            self.cfg.step_budget,
        )?;
        // re-slice captures to per-class node lists
        let node_pos: BTreeMap<u64, usize> =
            all_nodes.iter().enumerate().map(|(k, &n)| (n, k)).collect();
        let class_sliced = LayerSamples {
            coefficient_samples: samples
                .coefficient_samples
                .iter()
                .map(|(word, vals)| {
                    let mut per_class = Vec::new();
                    for nodes in &class_nodes {
                        for &n in nodes {
                            per_class.push(vals[node_pos[&n]].clone());
                        }
                    }
                    (word.clone(), per_class)
                })
                .collect(),
        };
        let cert_floor = self.cfg.cert_floor_for(ctx);
        assemble_weight_system(
            ctx,
            &self.resolved,
            w,
            &class_sliced,
            &class_nodes,
            self.cfg.jet_order,
            cert_floor,
        )
    }

    /// Solve an assembled system and record the resolved symbols.
    pub fn solve_assembled(&mut self, system: &AssembledSystem, route: SolveRoute) -> Result<()> {
        let w = system.symbols.weight;
        assert_eq!(self.resolved.max_weight + 1, w, "weights resolve in order");
        let cert_floor = self.cfg.cert_floor_for(self.ctx);
        let (values, routes, report) = match route {
            SolveRoute::StackedThenFallback => match self.solve_stacked(system, cert_floor) {
                Ok(out) => out,
                Err(Error::RankDeficient { .. }) => self.solve_paper_order(system)?,
                Err(e) => return Err(e),
            },
            SolveRoute::PaperOrder => self.solve_paper_order(system)?,
        };

        for (id, value) in values.iter().enumerate() {
            let (source, word) = system.symbols.describe(id as u32);
            self.resolved.insert(source, word, value.clone(), routes[id].clone());
        }
        self.resolved.max_weight = w;
        let mut report = report;
        report.coefficient_sets_match = self.coefficient_sets_match(w);
        self.reports.push(report);
        Ok(())
    }

    fn solve_stacked(
        &self,
        system: &AssembledSystem,
        cert_floor: i64,
    ) -> Result<(Vec<CycloScalar>, Vec<Route>, WeightReport)> {
        let ctx = self.ctx;
        let cols = system.symbols.count();
        let rows = system.rows.len();
        let mat = Mat::from_fn(rows, cols, |r, c| {
            system.rows[r]
                .form
                .linear
                .iter()
                .find(|(id, _)| *id == c as u32)
                .map(|(_, coef)| coef.clone())
                .unwrap_or_else(|| CycloScalar::zero(ctx))
        });
        let rhs: Vec<CycloScalar> =
            system.rows.iter().map(|r| r.form.constant.neg(ctx)).collect();
        let sol = solve_linear_system(ctx, &mat, &rhs, "frobenius weight solve")?;
        if sol.residual_valuation < cert_floor {
            return Err(Error::Certificate {
                got: sol.residual_valuation,
                floor: cert_floor,
                context: "constraint system inconsistent beyond certificates".into(),
            });
        }
        let report = WeightReport {
            weight: system.symbols.weight,
            symbols: cols,
            rows,
            rank: sol.rank,
            pivot_valuation: sol.pivot_valuation,
            residual_valuation: sol.residual_valuation,
            route: "stacked".into(),
            coefficient_sets_match: false,
        };
        Ok((sol.x, vec![Route::Stacked; cols], report))
    }

    /// The derivation-order fallback: hard zeros, then words containing an
    /// `e_0` through anchored rotation chains of limit rows, then `h` by the
    /// telescope, then pure words by rotation plus 2x2 pairing.
    fn solve_paper_order(
        &self,
        system: &AssembledSystem,
    ) -> Result<(Vec<CycloScalar>, Vec<Route>, WeightReport)> {
        let ctx = self.ctx;
        let symbols = &system.symbols;
        let w = symbols.weight;
        let m = ctx.level() as u32;
        let cols = symbols.count();
        let mut values: Vec<Option<CycloScalar>> = vec![None; cols];
        let mut routes: Vec<Option<Route>> = vec![None; cols];

        // index rows by the symbols they touch
        let rows_for_symbol = |id: u32| -> Vec<usize> {
            system
                .rows
                .iter()
                .enumerate()
                .filter(|(_, r)| r.form.linear.iter().any(|(s, _)| *s == id))
                .map(|(k, _)| k)
                .collect()
        };

        // 1. hard zeros
        for i in 1..=m {
            let word = Word(vec![i as u8; w as usize]);
            let id = symbols.id(Source::G(i as u8), &word) as usize;
            values[id] = Some(CycloScalar::zero(ctx));
            routes[id] = Some(Route::HardZero);
        }
        {
            let id = symbols.id(Source::H, &Word(vec![0u8; w as usize])) as usize;
            values[id] = Some(CycloScalar::zero(ctx));
            routes[id] = Some(Route::HardZero);
        }

        // resolve a single unknown from a row where every other symbol is known
        let solve_from_row = |row: &ConstraintRow,
                              id: usize,
                              values: &[Option<CycloScalar>]|
         -> Option<CycloScalar> {
            let mut acc = row.form.constant.clone();
            let mut coef = None;
            for (s, c) in &row.form.linear {
                if *s as usize == id {
                    coef = Some(c.clone());
                } else {
                    let v = values[*s as usize].as_ref()?;
                    acc = acc.add(ctx, &c.mul(ctx, v));
                }
            }
            let coef = coef?;
            if coef.is_zero_form() {
                return None;
            }
            Some(acc.div(ctx, &coef).ok()?.neg(ctx))
        };

        // 2. g-symbols whose word contains an e_0: rotate until the partner
        // disappears (last letter e_0) or is already known
        let g_words: Vec<Word> = symbols.words.clone();
        let mut progress = true;
        while progress {
            progress = false;
            for i in 1..=m {
                for word in &g_words {
                    if !word.0.contains(&0) {
                        continue;
                    }
                    let id = symbols.id(Source::G(i as u8), word) as usize;
                    if values[id].is_some() {
                        continue;
                    }
                    for row_idx in rows_for_symbol(id as u32) {
                        let row = &system.rows[row_idx];
                        if !row.label.starts_with("limit") {
                            continue;
                        }
                        if let Some(v) = solve_from_row(row, id, &values) {
                            values[id] = Some(v);
                            routes[id] = Some(Route::EZeroChain);
                            progress = true;
                            break;
                        }
                    }
                }
            }
        }

        // 3. h telescope: resolve h[V] in decreasing order of trailing
        // freedom — induct on the length of the leading e_0 run
        let mut h_order: Vec<Word> = symbols.words.clone();
        h_order.sort_by_key(|wd| {
            let lead = wd.0.iter().take_while(|&&c| c == 0).count();
            std::cmp::Reverse(lead)
        });
        for word in &h_order {
            let id = symbols.id(Source::H, word) as usize;
            if values[id].is_some() {
                continue;
            }
            for row_idx in rows_for_symbol(id as u32) {
                let row = &system.rows[row_idx];
                if !row.label.starts_with("h-rel") {
                    continue;
                }
                if let Some(v) = solve_from_row(row, id, &values) {
                    values[id] = Some(v);
                    routes[id] = Some(Route::HTelescope);
                    break;
                }
            }
        }

        // 4. pure words: rotate trailing e_i to the front via the h-relation
        // rows (key identity), anchored by 2x2 pairing with a limit row
        let pure_pending = |values: &[Option<CycloScalar>]| -> Vec<(u32, Word)> {
            let mut out = Vec::new();
            for i in 1..=m {
                for word in &g_words {
                    let id = symbols.id(Source::G(i as u8), word) as usize;
                    if values[id].is_none() {
                        out.push((i, word.clone()));
                    }
                }
            }
            out
        };
        let mut rounds = 0;
        while !pure_pending(&values).is_empty() {
            rounds += 1;
            if rounds > 4 * cols {
                let left: Vec<String> = pure_pending(&values)
                    .iter()
                    .map(|(i, wd)| format!("g_{i}[{}]", wd.label()))
                    .collect();
                return Err(Error::Unresolved(left.join(", ")));
            }
            let mut advanced = false;
            for (i, word) in pure_pending(&values) {
                let id = symbols.id(Source::G(i as u8), &word) as usize;
                // try any single-unknown row first
                let mut done = false;
                for row_idx in rows_for_symbol(id as u32) {
                    if let Some(v) = solve_from_row(&system.rows[row_idx], id, &values) {
                        values[id] = Some(v);
                        routes[id] = Some(Route::Pair);
                        done = true;
                        break;
                    }
                }
                if done {
                    advanced = true;
                    continue;
                }
                // 2x2 pairing: find two independent rows touching exactly
                // this symbol and one other unknown partner
                let candidate_rows = rows_for_symbol(id as u32);
                'pairs: for (ka, &ra) in candidate_rows.iter().enumerate() {
                    for &rb in candidate_rows.iter().skip(ka + 1) {
                        let mut unknowns: Vec<u32> = Vec::new();
                        for r in [ra, rb] {
                            for (s, _) in &system.rows[r].form.linear {
                                if values[*s as usize].is_none() && !unknowns.contains(s) {
                                    unknowns.push(*s);
                                }
                            }
                        }
                        if unknowns.len() != 2 {
                            continue;
                        }
                        let reduce = |r: usize| -> (CycloScalar, CycloScalar, CycloScalar) {
                            let row = &system.rows[r];
                            let mut c0 = row.form.constant.clone();
                            let mut cx = CycloScalar::zero(ctx);
                            let mut cy = CycloScalar::zero(ctx);
                            for (s, c) in &row.form.linear {
                                if *s == unknowns[0] {
                                    cx = cx.add(ctx, c);
                                } else if *s == unknowns[1] {
                                    cy = cy.add(ctx, c);
                                } else {
                                    c0 = c0.add(
                                        ctx,
                                        &c.mul(ctx, values[*s as usize].as_ref().unwrap()),
                                    );
                                }
                            }
                            (c0, cx, cy)
                        };
                        let (a0, ax, ay) = reduce(ra);
                        let (b0, bx, by) = reduce(rb);
                        // det = ax by - ay bx must be a unit-ish pivot
                        let det = ax.mul(ctx, &by).sub(ctx, &ay.mul(ctx, &bx));
                        if det.is_zero_form() {
                            continue;
                        }
                        let x = ay
                            .mul(ctx, &b0)
                            .sub(ctx, &by.mul(ctx, &a0))
                            .div(ctx, &det)?;
                        let y = bx
                            .mul(ctx, &a0)
                            .sub(ctx, &ax.mul(ctx, &b0))
                            .div(ctx, &det)?;
                        values[unknowns[0] as usize] = Some(x);
                        routes[unknowns[0] as usize] = Some(Route::Pair);
                        values[unknowns[1] as usize] = Some(y);
                        routes[unknowns[1] as usize] = Some(Route::Pair);
                        advanced = true;
                        break 'pairs;
                    }
                }
            }
            if !advanced {
                let left: Vec<String> = pure_pending(&values)
                    .iter()
                    .map(|(i, wd)| format!("g_{i}[{}]", wd.label()))
                    .collect();
                return Err(Error::Unresolved(left.join(", ")));
            }
        }

        // h-symbols that never anchored (shouldn't happen; report loudly)
        if values.iter().any(|v| v.is_none()) {
            let mut left = Vec::new();
            for (id, v) in values.iter().enumerate() {
                if v.is_none() {
                    let (source, wd) = symbols.describe(id as u32);
                    let name = match source {
                        Source::G(i) => format!("g_{i}[{}]", wd.label()),
                        Source::H => format!("h[{}]", wd.label()),
                    };
                    left.push(name);
                }
            }
            return Err(Error::Unresolved(left.join(", ")));
        }

        let values: Vec<CycloScalar> = values.into_iter().map(|v| v.unwrap()).collect();
        let routes: Vec<Route> = routes.into_iter().map(|r| r.unwrap()).collect();
        let report = WeightReport {
            weight: w,
            symbols: cols,
            rows: system.rows.len(),
            rank: cols,
            pivot_valuation: 0,
            residual_valuation: INF_EXP,
            route: "paper-order".into(),
            coefficient_sets_match: false,
        };
        Ok((values, routes, report))
    }

    /// Whether the multisets of solved values coincide across the `g_i`
    /// at weight `w` (compared through truncated canonical digits).
    fn coefficient_sets_match(&self, w: u32) -> bool {
        let ctx = self.ctx;
        let m = ctx.level() as u32;
        if m == 1 {
            return true;
        }
        let digits = 8;
        let fingerprint = |i: u32| -> Vec<String> {
            let mut v: Vec<String> = words_of_weight(m, w)
                .iter()
                .map(|word| {
                    let c = self.resolved.g_coeff(i, word).cloned().unwrap();
                    let capped = c.cap_abs(ctx, digits);
                    let rec = capped.to_record(ctx);
                    format!("{}:{}", rec.exp.min(digits), rec.coeffs.join("|"))
                })
                .collect();
            v.sort();
            v
        };
        let base = fingerprint(m);
        (1..m).all(|i| fingerprint(i) == base)
    }

    pub fn solve_through(&mut self, weight_max: u32) -> Result<()> {
        for w in self.resolved.max_weight + 1..=weight_max {
            self.solve_weight(w, SolveRoute::StackedThenFallback)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// The multi-zeta table
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct CmvEntry {
    /// Exponent row, in the order `(s_k, ..., s_1)`.
    pub s: Vec<u32>,
    /// Root-of-unity row `(i_k, ..., i_1)`.
    pub i: Vec<u32>,
    pub word: String,
    pub weight: u32,
    pub depth: u32,
    pub value: crate::scalar::ScalarRecord,
    pub certified_digits: i64,
    pub route: String,
    pub insufficient_precision: bool,
}

/// The table of `zeta_p(s; i) = g_M[word] / p^(sum s)` for every resolved
/// multi-zeta-shaped word of weight <= `weight_max`.
pub fn cmv_table(
    ctx: &FieldContext,
    resolved: &Resolved,
    weight_max: u32,
) -> Result<Vec<CmvEntry>> {
    let m = ctx.level() as u32;
    let mut out = Vec::new();
    for w in 1..=weight_max {
        for word in words_of_weight(m, w) {
            let Some((s, i)) = word.zeta_shape() else {
                continue;
            };
            let g = resolved
                .g_coeff(m, &word)
                .cloned()
                .ok_or_else(|| Error::Unresolved(format!("g_M[{}]", word.label())))?;
            let weight: u32 = s.iter().sum();
            let value = g.shift_exp(-(weight as i64));
            let certified = if value.is_zero_form() {
                value.abs_precision().min(ctx.precision() as i64)
            } else {
                value.precision_digits() as i64
            };
            let route = resolved
                .route(Source::G(m as u8), &word)
                .map(|r| serde_json::to_value(r).unwrap().as_str().unwrap_or("?").to_string())
                .unwrap_or_else(|| "?".into());
            out.push(CmvEntry {
                depth: word.depth(),
                weight: w,
                word: word.label(),
                s,
                i,
                value: value.to_record(ctx),
                certified_digits: certified,
                route,
                insufficient_precision: certified <= 0,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk(p: u64, m: u64, prec: u32) -> (FieldContext, RunConfig) {
        let ctx = FieldContext::build(p, m, prec).unwrap();
        let mut cfg = RunConfig::desk(p, m);
        cfg.precision = prec;
        (ctx, cfg)
    }

    #[test]
    fn underline_examples() {
        let (ctx, _) = desk(5, 4, 10);
        assert_eq!(underline_index(&ctx, 1), 1); // 5*1 = 1 mod 4
        assert_eq!(underline_index(&ctx, 2), 2);
        assert_eq!(underline_index(&ctx, 3), 3);
        let (ctx, _) = desk(2, 3, 10);
        assert_eq!(underline_index(&ctx, 1), 2); // 2*2 = 1 mod 3
        assert_eq!(underline_index(&ctx, 2), 1);
        let (ctx, _) = desk(3, 1, 10);
        assert_eq!(underline_index(&ctx, 1), 1);
    }

    #[test]
    fn pullback_expansion_examples() {
        let (ctx, _) = desk(5, 4, 20);
        // [z^0] of omega_1 = -zeta^-1
        let c = omega_coefficient(&ctx, 1, 0);
        let want = CycloScalar::from_unit_kelt(&ctx, ctx.zeta_pow(-1).clone()).neg(&ctx);
        assert!(c.agreement_valuation(&ctx, &want) >= 20);
        // pullback supported only in degrees = -1 mod p
        for n in 0..40u64 {
            let c = pullback_omega_coefficient(&ctx, 2, n);
            if (n + 1) % 5 != 0 {
                assert!(c.is_exact_zero());
            } else {
                assert_eq!(c.valuation(), Some(1));
            }
        }
        // M = 1: omega_1 = -sum z^j
        let (ctx1, _) = desk(3, 1, 20);
        for n in 0..10u64 {
            let c = omega_coefficient(&ctx1, 1, n);
            assert!(c.agreement_valuation(&ctx1, &CycloScalar::from_i128(&ctx1, -1)) >= 20);
        }
    }

    #[test]
    fn word_shapes() {
        let w = Word(vec![0, 2, 0, 0, 1]);
        assert_eq!(w.weight(), 5);
        assert_eq!(w.depth(), 2);
        let (s, i) = w.zeta_shape().unwrap();
        assert_eq!(s, vec![2, 3]);
        assert_eq!(i, vec![2, 1]);
        assert!(Word(vec![1, 0]).zeta_shape().is_none());
        assert!(Word(vec![]).zeta_shape().is_none());
    }

    /// Brute-force re-derivation of the coefficient recursion directly from
    /// the displayed differential equation: truncated polynomial arithmetic,
    /// full convolutions, no streaming state.
    fn brute_force_series(
        ctx: &FieldContext,
        resolved: &Resolved,
        symbols: &SymbolTable,
        top_weight: u32,
        n_max: usize,
    ) -> BTreeMap<Word, Vec<AffineForm>> {
        let m = ctx.level() as u32;
        let p = ctx.p();
        let zero = AffineForm::zero(ctx);
        let mut series: BTreeMap<Word, Vec<AffineForm>> = BTreeMap::new();
        let mut empty_series = vec![zero.clone(); n_max + 1];
        empty_series[0] = AffineForm::from_const(CycloScalar::one(ctx));
        series.insert(Word::empty(), empty_series);
        let w_solve = top_weight - 1;

        for weight in 1..=top_weight {
            for word in words_of_weight(m, weight) {
                let letters = &word.0;
                let len = letters.len();
                let is_top = weight == top_weight;
                // rhs[k] = [z^k] of the right-hand side
                let mut rhs = vec![zero.clone(); n_max + 1];
                // F* omega_(first) * S_(inner)
                let inner = series[&Word(letters[1..].to_vec())].clone();
                let a0 = letters[0] as u32;
                for k in 0..=n_max {
                    if a0 == 0 {
                        // p z^-1: [z^(n-1)] -> p S(n)
                        if k + 1 <= n_max {
                            let t = inner[k + 1].scale(ctx, &CycloScalar::from_i128(ctx, p as i128));
                            rhs[k] = rhs[k].add(ctx, &t);
                        }
                    } else {
                        // sum over j with p(j+1)-1 + t = k
                        let mut j1 = 1u64;
                        while (p * j1 - 1) as usize <= k {
                            let t_deg = k - (p * j1 - 1) as usize;
                            let c = pullback_omega_coefficient(ctx, a0, p * j1 - 1);
                            rhs[k] = rhs[k].add(ctx, &inner[t_deg].scale(ctx, &c));
                            j1 += 1;
                        }
                    }
                }
                // -p sum over (J, i, K)
                for split_i in 0..len {
                    let i = letters[split_i] as u32;
                    let k_word = Word(letters[split_i + 1..].to_vec());
                    let j_word = Word(letters[..split_i].to_vec());
                    // (g_F g_i^-1)[e^J] as an affine-coefficient series
                    let mut left = vec![zero.clone(); n_max + 1];
                    for cut in 0..=j_word.0.len() {
                        let a_word = Word(j_word.0[..cut].to_vec());
                        let b_word = Word(j_word.0[cut..].to_vec());
                        let inv_b: AffineForm = if i == 0 {
                            if b_word.0.is_empty() {
                                AffineForm::from_const(CycloScalar::one(ctx))
                            } else {
                                continue;
                            }
                        } else if b_word.weight() == w_solve && !b_word.0.is_empty() {
                            let ant = resolved.antipode(ctx, i, w_solve.saturating_sub(1));
                            let mut rest = CycloScalar::zero(ctx);
                            for c2 in 1..b_word.0.len() {
                                let u = Word(b_word.0[..c2].to_vec());
                                let v = Word(b_word.0[c2..].to_vec());
                                if let (Some(gu), Some(iv)) =
                                    (resolved.g_coeff(i, &u), ant.get(&v))
                                {
                                    rest = rest.add(ctx, &gu.mul(ctx, iv));
                                }
                            }
                            let mut f = AffineForm::from_symbol(
                                ctx,
                                symbols.id(Source::G(i as u8), &b_word),
                                CycloScalar::from_i128(ctx, -1),
                            );
                            f.constant = rest.neg(ctx);
                            f
                        } else {
                            let ant = resolved.antipode(ctx, i, b_word.weight());
                            match ant.get(&b_word) {
                                Some(v) => AffineForm::from_const(v.clone()),
                                None => continue,
                            }
                        };
                        let a_series = &series[&a_word];
                        for k in 0..=n_max {
                            let t = a_series[k].mul(ctx, &inv_b);
                            left[k] = left[k].add(ctx, &t);
                        }
                    }
                    // times g_i[e^K]
                    let g_k: AffineForm = if i == 0 {
                        if k_word.0.is_empty() {
                            AffineForm::from_const(CycloScalar::one(ctx))
                        } else {
                            continue;
                        }
                    } else if is_top && k_word.weight() == w_solve {
                        AffineForm::from_symbol(
                            ctx,
                            symbols.id(Source::G(i as u8), &k_word),
                            CycloScalar::one(ctx),
                        )
                    } else {
                        match resolved.g_coeff(i, &k_word) {
                            Some(v) => AffineForm::from_const(v.clone()),
                            None => continue,
                        }
                    };
                    // times omega_(underline i), full convolution
                    let mu = underline_index(ctx, i);
                    for k in 0..=n_max {
                        let mut acc = AffineForm::zero(ctx);
                        if mu == 0 {
                            // omega_0 = z^-1: [z^k] -> left[k+1]
                            if k + 1 <= n_max {
                                acc = left[k + 1].clone();
                            }
                        } else {
                            for t in 0..=k {
                                let c = omega_coefficient(ctx, mu, (k - t) as u64);
                                acc = acc.add(ctx, &left[t].scale(ctx, &c));
                            }
                        }
                        let term = acc
                            .mul(ctx, &g_k)
                            .scale(ctx, &CycloScalar::from_i128(ctx, -(p as i128)));
                        rhs[k] = rhs[k].add(ctx, &term);
                    }
                }
                // integrate: coefficient of z^n is rhs[n-1]/n; store r_n = rhs[n-1]
                let mut s = vec![zero.clone(); n_max + 1];
                for n in 1..=n_max {
                    let n_inv = CycloScalar::from_i128(ctx, n as i128).inv(ctx).unwrap();
                    s[n] = rhs[n - 1].scale(ctx, &n_inv);
                }
                series.insert(word, s);
            }
        }
        series
    }

    #[test]
    fn weight_one_closed_form() {
        // g_F{e_a}(n) = p zeta^(-underline(a) n) / n for p not | n, else 0
        let (ctx, cfg) = desk(5, 4, 40);
        let resolved = Resolved::new(&ctx);
        let symbols = SymbolTable::new(4, 1);
        let n_max = 2000u64;
        let mut capture = BTreeMap::new();
        for a in 1..=4u8 {
            capture.insert(Word(vec![a]), (1..=n_max).collect::<Vec<u64>>());
        }
        capture.insert(Word(vec![0]), (1..=n_max).collect::<Vec<u64>>());
        let out = integrate_layer(&ctx, &resolved, &symbols, 1, n_max, &capture, cfg.step_budget)
            .unwrap();
        for a in 1..=4u32 {
            let samples = &out.coefficient_samples[&Word(vec![a as u8])];
            let ua = underline_index(&ctx, a);
            for n in 1..=n_max {
                let r = &samples[n as usize - 1];
                assert!(r.is_constant());
                let want = if n % 5 == 0 {
                    CycloScalar::zero(&ctx)
                } else {
                    CycloScalar::from_i128(&ctx, 5)
                        .mul_unit(&ctx, ctx.zeta_pow(-((ua as u64 * n) as i64)))
                };
                assert!(
                    r.constant.agreement_valuation(&ctx, &want) >= 38,
                    "a={a} n={n}"
                );
            }
        }
        // g_F[e_0] = 0 identically
        let zeros = &out.coefficient_samples[&Word(vec![0])];
        for r in zeros {
            assert!(r.constant.valuation_or_bound() >= 38);
        }
    }

    #[test]
    fn streaming_matches_brute_force_weight_two() {
        let (ctx, cfg) = desk(5, 4, 30);
        let resolved = Resolved::new(&ctx);
        let symbols = SymbolTable::new(4, 1);
        let n_max = 60usize;
        let brute = brute_force_series(&ctx, &resolved, &symbols, 2, n_max);
        let mut capture = BTreeMap::new();
        for word in words_of_weight(4, 2) {
            capture.insert(word, (1..=n_max as u64).collect::<Vec<u64>>());
        }
        let out = integrate_layer(
            &ctx,
            &resolved,
            &symbols,
            2,
            n_max as u64,
            &capture,
            cfg.step_budget,
        )
        .unwrap();
        for (word, samples) in &out.coefficient_samples {
            let brute_s = &brute[word];
            for n in 1..=n_max {
                // streaming emits r_n; brute force stored r_n / n
                let n_scalar = CycloScalar::from_i128(&ctx, n as i128);
                let stream_val = samples[n - 1].scale(&ctx, &n_scalar.inv(&ctx).unwrap());
                let diff = stream_val.sub(&ctx, &brute_s[n]);
                assert!(
                    diff.valuation_floor() >= 25,
                    "word {} n {n}: {:?}",
                    word.label(),
                    diff
                );
            }
        }
    }

    #[test]
    fn solve_weight_one_m1() {
        // p = 3, M = 1: the pmv case; weight-1 symbols resolve and g_1[e_1] = 0
        let (ctx, cfg) = desk(3, 1, 60);
        let mut solver = FrobeniusSolver::new(&ctx, &cfg);
        solver.solve_through(1).unwrap();
        let g_e1 = solver.resolved.g_coeff(1, &Word(vec![1])).unwrap();
        assert!(g_e1.valuation_or_bound() >= 10, "g_1[e_1] should be 0");
        let g_e0 = solver.resolved.g_coeff(1, &Word(vec![0])).unwrap();
        assert!(g_e0.valuation_or_bound() >= 10, "g_1[e_0] should be 0");
        assert_eq!(solver.reports[0].route, "stacked");
    }

    #[test]
    fn solve_weight_one_m4_routes_agree() {
        let (ctx, cfg) = desk(5, 4, 60);
        let mut stacked = FrobeniusSolver::new(&ctx, &cfg);
        stacked.solve_weight(1, SolveRoute::StackedThenFallback).unwrap();
        let mut paper = FrobeniusSolver::new(&ctx, &cfg);
        paper.solve_weight(1, SolveRoute::PaperOrder).unwrap();
        for i in 1..=4u32 {
            for word in words_of_weight(4, 1) {
                let a = stacked.resolved.g_coeff(i, &word).unwrap();
                let b = paper.resolved.g_coeff(i, &word).unwrap();
                let agree = a.agreement_valuation(&ctx, b);
                let claim = a.abs_precision().min(b.abs_precision()).min(10);
                assert!(agree >= claim, "g_{i}[{}]: {agree} < {claim}", word.label());
            }
        }
    }

    #[test]
    fn cmv_table_weight_one() {
        let (ctx, cfg) = desk(5, 4, 60);
        let mut solver = FrobeniusSolver::new(&ctx, &cfg);
        solver.solve_through(1).unwrap();
        let table = cmv_table(&ctx, &solver.resolved, 1).unwrap();
        // weight-1 entries are exactly the words e_i, i = 1..M
        assert_eq!(table.len(), 4);
        for entry in &table {
            assert_eq!(entry.s, vec![1]);
            assert_eq!(entry.weight, 1);
            // zeta_p(1; i) = g_M[e_i]/p
            let g = solver
                .resolved
                .g_coeff(4, &Word(vec![entry.i[0] as u8]))
                .unwrap();
            let want = g.shift_exp(-1);
            let got = CycloScalar::from_record(&ctx, &entry.value).unwrap();
            assert!(got.agreement_valuation(&ctx, &want) >= want.abs_precision().min(10));
        }
    }
}
