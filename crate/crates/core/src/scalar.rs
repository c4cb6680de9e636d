//! `CycloScalar`: an element of `K = Q_p(zeta_M)` with certified precision.
//!
//! Representation: `x = p^exp * (unit + O(p^prec))` where `unit` is a
//! polynomial in `zeta` with some coefficient a p-unit. The pair `(exp, prec)`
//! tracks exactly how many p-adic digits past the valuation are certified;
//! `prec = 0` with a zero unit is the "zero form": all that is known is
//! `x = O(p^exp)`. Subtraction of nearly-equal elements and division spend
//! precision; nothing ever silently rounds.

use crate::error::{Error, Result};
use crate::field::{FieldContext, KElt};
use serde::{Deserialize, Serialize};

/// Sentinel exponent for the exact zero ("known to infinite precision").
pub const INF_EXP: i64 = i64::MAX / 4;

#[derive(Clone, Debug)]
pub struct CycloScalar {
    exp: i64,
    prec: u32,
    unit: KElt,
}

impl CycloScalar {
    pub fn zero(ctx: &FieldContext) -> Self {
        CycloScalar { exp: INF_EXP, prec: 0, unit: ctx.k_zero() }
    }

    /// Zero form: certified only that the value is `O(p^abs)`.
    pub fn zero_at(ctx: &FieldContext, abs: i64) -> Self {
        CycloScalar { exp: abs.min(INF_EXP), prec: 0, unit: ctx.k_zero() }
    }

    pub fn one(ctx: &FieldContext) -> Self {
        CycloScalar { exp: 0, prec: ctx.precision(), unit: ctx.k_one() }
    }

    pub fn from_i128(ctx: &FieldContext, v: i128) -> Self {
        if v == 0 {
            return Self::zero(ctx);
        }
        let mut exp = 0i64;
        let mut v = v;
        let p = ctx.p() as i128;
        while v % p == 0 {
            v /= p;
            exp += 1;
        }
        CycloScalar { exp, prec: ctx.precision(), unit: ctx.k_from_i128(v) }
    }

    pub fn from_ratio(ctx: &FieldContext, num: i128, den: i128) -> Self {
        let n = Self::from_i128(ctx, num);
        let d = Self::from_i128(ctx, den);
        n.div(ctx, &d).expect("from_ratio: zero denominator")
    }

    /// A unit of `K` given by a full-precision polynomial in zeta.
    /// Returns the zero scalar when the element is 0; panics if the element
    /// is a nonzero non-unit (callers pass roots of unity and small units).
    pub fn from_unit_kelt(ctx: &FieldContext, unit: KElt) -> Self {
        if ctx.k_is_zero(&unit) {
            return Self::zero(ctx);
        }
        debug_assert_eq!(ctx.k_valuation_at_most(&unit, 1), Some(0));
        CycloScalar { exp: 0, prec: ctx.precision(), unit }
    }

    pub fn is_zero_form(&self) -> bool {
        self.prec == 0
    }

    pub fn is_exact_zero(&self) -> bool {
        self.prec == 0 && self.exp >= INF_EXP
    }

    /// Valuation; `None` for the zero form (only a lower bound is known).
    pub fn valuation(&self) -> Option<i64> {
        if self.is_zero_form() {
            None
        } else {
            Some(self.exp)
        }
    }

    /// Valuation for nonzero, otherwise the certified vanishing order.
    pub fn valuation_or_bound(&self) -> i64 {
        self.exp
    }

    /// Absolute precision: the value is known modulo `p^abs`.
    pub fn abs_precision(&self) -> i64 {
        self.exp.saturating_add(self.prec as i64).min(INF_EXP)
    }

    pub fn precision_digits(&self) -> u32 {
        self.prec
    }

    pub fn unit_part(&self) -> &KElt {
        &self.unit
    }

    pub fn neg(&self, ctx: &FieldContext) -> Self {
        CycloScalar { exp: self.exp, prec: self.prec, unit: ctx.k_neg(&self.unit) }
    }

    pub fn add(&self, ctx: &FieldContext, other: &Self) -> Self {
        let abs = self.abs_precision().min(other.abs_precision());
        let operands: Vec<&Self> =
            [self, other].into_iter().filter(|s| !s.is_zero_form()).collect();
        if operands.is_empty() {
            return Self::zero_at(ctx, abs);
        }
        let e = operands.iter().map(|s| s.exp).min().unwrap();
        let window = abs.saturating_sub(e).min(INF_EXP);
        if window <= 0 {
            return Self::zero_at(ctx, abs);
        }
        let window = (window as u64).min(ctx.precision() as u64) as u32;
        let mut acc = ctx.k_zero();
        for s in operands {
            let shift = (s.exp - e).min(ctx.precision() as i64) as u32;
            let shifted = ctx.k_shift_up(&s.unit, shift);
            ctx.k_add_assign(&mut acc, &shifted);
        }
        Self::normalize(ctx, e, window, acc)
    }

    pub fn sub(&self, ctx: &FieldContext, other: &Self) -> Self {
        self.add(ctx, &other.neg(ctx))
    }

    fn normalize(ctx: &FieldContext, e: i64, window: u32, value: KElt) -> Self {
        match ctx.k_valuation_at_most(&value, window) {
            None => Self::zero_at(ctx, e.saturating_add(window as i64)),
            Some(v) if v >= window => Self::zero_at(ctx, e.saturating_add(window as i64)),
            Some(v) => CycloScalar {
                exp: e + v as i64,
                prec: window - v,
                unit: if v == 0 { value } else { ctx.k_shift_down(&value, v) },
            },
        }
    }

    pub fn mul(&self, ctx: &FieldContext, other: &Self) -> Self {
        if self.is_zero_form() || other.is_zero_form() {
            let bound = self.exp.saturating_add(other.exp).min(INF_EXP);
            return Self::zero_at(ctx, bound);
        }
        CycloScalar {
            exp: self.exp + other.exp,
            prec: self.prec.min(other.prec),
            unit: ctx.k_mul(&self.unit, &other.unit),
        }
    }

    pub fn div(&self, ctx: &FieldContext, other: &Self) -> Result<Self> {
        if other.is_zero_form() {
            return Err(Error::Precision(format!(
                "division by an element indistinguishable from 0 (certified only O(p^{}))",
                other.exp
            )));
        }
        let inv = ctx
            .k_inv_unit(&other.unit)
            .ok_or_else(|| Error::Precision("division by non-unit unit part".into()))?;
        if self.is_zero_form() {
            return Ok(Self::zero_at(ctx, self.exp.saturating_sub(other.exp)));
        }
        Ok(CycloScalar {
            exp: self.exp - other.exp,
            prec: self.prec.min(other.prec),
            unit: ctx.k_mul(&self.unit, &inv),
        })
    }

    pub fn inv(&self, ctx: &FieldContext) -> Result<Self> {
        Self::one(ctx).div(ctx, self)
    }

    pub fn pow(&self, ctx: &FieldContext, k: u32) -> Self {
        let mut acc = Self::one(ctx);
        let mut base = self.clone();
        let mut k = k;
        while k > 0 {
            if k & 1 == 1 {
                acc = acc.mul(ctx, &base);
            }
            base = base.mul(ctx, &base);
            k >>= 1;
        }
        acc
    }

    /// Exact multiplication by `p^k` (k may be negative): shifts the exponent.
    pub fn shift_exp(&self, k: i64) -> Self {
        let mut out = self.clone();
        if !out.is_exact_zero() {
            out.exp = out.exp.saturating_add(k).min(INF_EXP);
        }
        out
    }

    /// Multiply by a full-precision unit (e.g. a root of unity): no loss.
    pub fn mul_unit(&self, ctx: &FieldContext, unit: &KElt) -> Self {
        if self.is_zero_form() {
            return self.clone();
        }
        CycloScalar { exp: self.exp, prec: self.prec, unit: ctx.k_mul(&self.unit, unit) }
    }

    /// Cap the absolute precision at `abs` (no-op if already coarser).
    pub fn cap_abs(&self, ctx: &FieldContext, abs: i64) -> Self {
        if self.abs_precision() <= abs {
            return self.clone();
        }
        if self.is_zero_form() {
            return Self::zero_at(ctx, abs);
        }
        let prec = abs - self.exp;
        if prec <= 0 {
            Self::zero_at(ctx, abs)
        } else {
            CycloScalar { exp: self.exp, prec: (prec as u64).min(self.prec as u64) as u32, unit: self.unit.clone() }
        }
    }

    /// Valuation of `self - other`: the number of agreed p-adic digits.
    pub fn agreement_valuation(&self, ctx: &FieldContext, other: &Self) -> i64 {
        self.sub(ctx, other).exp
    }

    /// The unit truncated to its certified digits (canonical content).
    pub fn canonical_unit(&self, ctx: &FieldContext) -> KElt {
        ctx.k_truncate(&self.unit, self.prec)
    }

    /// Exact structural equality of certified content.
    pub fn eq_certified(&self, ctx: &FieldContext, other: &Self) -> bool {
        self.exp == other.exp
            && self.prec == other.prec
            && self.canonical_unit(ctx) == other.canonical_unit(ctx)
    }

    pub fn to_record(&self, ctx: &FieldContext) -> ScalarRecord {
        let coeffs = if self.is_zero_form() {
            Vec::new()
        } else {
            self.canonical_unit(ctx)
                .iter()
                .map(|c| {
                    ctx.modulus()
                        .digits(c)
                        .iter()
                        .take(self.prec as usize)
                        .map(|d| d.to_string())
                        .collect::<Vec<_>>()
                        .join(",")
                })
                .collect()
        };
        ScalarRecord { exp: self.exp, prec: self.prec, coeffs }
    }

    pub fn from_record(ctx: &FieldContext, rec: &ScalarRecord) -> Result<Self> {
        if rec.coeffs.is_empty() {
            return Ok(Self::zero_at(ctx, rec.exp));
        }
        if rec.coeffs.len() != ctx.residue_degree() as usize {
            return Err(Error::Cache("scalar record has wrong coefficient count".into()));
        }
        let mut unit = ctx.k_zero();
        for (i, s) in rec.coeffs.iter().enumerate() {
            let digits: std::result::Result<Vec<u64>, _> =
                s.split(',').filter(|t| !t.is_empty()).map(|t| t.parse::<u64>()).collect();
            let digits = digits.map_err(|e| Error::Cache(format!("bad digit string: {e}")))?;
            if digits.iter().any(|&d| d >= ctx.p()) {
                return Err(Error::Cache("digit out of range for p".into()));
            }
            unit[i] = ctx.modulus().from_digits(&digits);
        }
        Ok(CycloScalar { exp: rec.exp, prec: rec.prec.min(ctx.precision()), unit })
    }
}

/// Serialized form: exponent, certified digits, and per-coefficient
/// little-endian base-p digit strings (empty for the zero form).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ScalarRecord {
    pub exp: i64,
    pub prec: u32,
    pub coeffs: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ctx54() -> FieldContext {
        FieldContext::build(5, 4, 20).unwrap()
    }

    #[test]
    fn unit_inversion_in_q5i() {
        let ctx = ctx54();
        let quarter = CycloScalar::from_ratio(&ctx, 1, 4);
        assert_eq!(quarter.valuation(), Some(0));
        let four = CycloScalar::from_i128(&ctx, 4);
        let prod = quarter.mul(&ctx, &four);
        assert!(prod.agreement_valuation(&ctx, &CycloScalar::one(&ctx)) >= 20);
    }

    #[test]
    fn valuation_of_p_cubed_times_unit() {
        let ctx = ctx54();
        let x = CycloScalar::from_i128(&ctx, 125 * 7);
        assert_eq!(x.valuation(), Some(3));
        let inv = x.inv(&ctx).unwrap();
        assert_eq!(inv.valuation(), Some(-3));
    }

    #[test]
    fn cyclotomic_sum_vanishes() {
        let ctx = ctx54();
        let mut acc = CycloScalar::zero(&ctx);
        for e in 0..4 {
            let z = CycloScalar::from_unit_kelt(&ctx, ctx.zeta_pow(e).clone());
            acc = acc.add(&ctx, &z);
        }
        assert!(acc.is_zero_form());
        assert!(acc.abs_precision() >= 20);
    }

    #[test]
    fn subtraction_spends_precision() {
        let ctx = ctx54();
        let a = CycloScalar::from_i128(&ctx, 1 + 125);
        let b = CycloScalar::from_i128(&ctx, 1);
        let d = a.sub(&ctx, &b);
        assert_eq!(d.valuation(), Some(3));
        // 20 certified digits at valuation 0 leave 17 past valuation 3
        assert_eq!(d.precision_digits(), 17);
    }

    #[test]
    fn division_by_zero_form_is_an_error() {
        let ctx = ctx54();
        let z = CycloScalar::zero_at(&ctx, 12);
        let err = CycloScalar::one(&ctx).div(&ctx, &z).unwrap_err();
        assert!(err.to_string().contains("O(p^12)"));
    }

    #[test]
    fn record_roundtrip() {
        let ctx = ctx54();
        for v in [0i128, 1, -1, 7, 625, -126, 1 << 40] {
            let x = CycloScalar::from_i128(&ctx, v);
            let rec = x.to_record(&ctx);
            let y = CycloScalar::from_record(&ctx, &rec).unwrap();
            assert!(x.eq_certified(&ctx, &y), "roundtrip failed for {v}");
        }
        let z = CycloScalar::from_unit_kelt(&ctx, ctx.zeta_pow(1).clone())
            .shift_exp(-4);
        let rec = z.to_record(&ctx);
        let y = CycloScalar::from_record(&ctx, &rec).unwrap();
        assert!(z.eq_certified(&ctx, &y));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn ring_axioms(a in -2000i128..2000, b in -2000i128..2000, c in -2000i128..2000) {
            let ctx = FieldContext::build(5, 4, 30).unwrap();
            let (x, y, z) = (
                CycloScalar::from_i128(&ctx, a),
                CycloScalar::from_i128(&ctx, b),
                CycloScalar::from_i128(&ctx, c),
            );
            let assoc_l = x.mul(&ctx, &y).mul(&ctx, &z);
            let assoc_r = x.mul(&ctx, &y.mul(&ctx, &z));
            prop_assert!(assoc_l.agreement_valuation(&ctx, &assoc_r) >= assoc_l.abs_precision().min(assoc_r.abs_precision()));
            let distr_l = x.mul(&ctx, &y.add(&ctx, &z));
            let distr_r = x.mul(&ctx, &y).add(&ctx, &x.mul(&ctx, &z));
            prop_assert!(distr_l.agreement_valuation(&ctx, &distr_r) >= distr_l.abs_precision().min(distr_r.abs_precision()));
        }

        #[test]
        fn inverse_negates_valuation(a in 1i128..100_000) {
            let ctx = FieldContext::build(3, 1, 40).unwrap();
            let x = CycloScalar::from_i128(&ctx, a);
            let v = x.valuation().unwrap();
            let inv = x.inv(&ctx).unwrap();
            prop_assert_eq!(inv.valuation().unwrap(), -v);
            let prod = x.mul(&ctx, &inv);
            prop_assert!(prod.agreement_valuation(&ctx, &CycloScalar::one(&ctx)) >= 40);
        }
    }
}
