//! Exact arithmetic in `Z/p^P` on little-endian `u64` limb vectors.
//!
//! Everything downstream (the cyclotomic field, iterated sums, the solver)
//! reduces to these kernels, so they are hand-rolled rather than routed
//! through a general bignum: fixed width, no per-operation allocation,
//! Barrett reduction by the precomputed `p^P` (bitmask when `p = 2`).

use arrayvec::ArrayVec;
use serde::{Deserialize, Serialize};

/// Hard cap on the modulus width; `p^P` must fit in `MAX_LIMBS * 64` bits.
pub const MAX_LIMBS: usize = 16;

/// Little-endian residue, always exactly `width` limbs long and `< p^P`.
pub type Limbs = ArrayVec<u64, MAX_LIMBS>;

fn zero_limbs(width: usize) -> Limbs {
    let mut l = Limbs::new();
    for _ in 0..width {
        l.push(0);
    }
    l
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum ReduceKind {
    /// `p = 2`: reduction is a bitmask on the top limb.
    Pow2 { bits: u32 },
    /// Odd `p`: Barrett with `mu = floor(2^(128w) / p^P)`.
    Barrett { mu: Vec<u64> },
}

/// The working modulus `p^P` with precomputed reduction data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PowerModulus {
    p: u64,
    exponent: u32,
    width: usize,
    modulus: Vec<u64>,
    reduce: ReduceKind,
    /// `p^k` for `k = 0..=P`, each `width` limbs.
    p_pows: Vec<Vec<u64>>,
}

impl PowerModulus {
    pub fn new(p: u64, exponent: u32) -> Result<Self, String> {
        if p < 2 {
            return Err(format!("p = {p} is not a prime"));
        }
        if exponent == 0 {
            return Err("precision must be at least 1".into());
        }
        let bits = (p as f64).log2() * exponent as f64;
        if bits > (MAX_LIMBS * 64 - 2) as f64 {
            return Err(format!(
                "p^P needs ~{bits:.0} bits; the engine is capped at {} bits",
                MAX_LIMBS * 64 - 2
            ));
        }
        // p^P by repeated multiplication in a wide buffer.
        let mut m = vec![1u64];
        for _ in 0..exponent {
            let mut carry: u128 = 0;
            for limb in m.iter_mut() {
                let v = *limb as u128 * p as u128 + carry;
                *limb = v as u64;
                carry = v >> 64;
            }
            while carry > 0 {
                m.push(carry as u64);
                carry >>= 64;
            }
        }
        let width = m.len();
        let reduce = if p == 2 {
            ReduceKind::Pow2 { bits: exponent }
        } else {
            ReduceKind::Barrett { mu: barrett_mu(&m) }
        };
        let mut p_pows = Vec::with_capacity(exponent as usize + 1);
        let mut cur = vec![0u64; width];
        cur[0] = 1;
        for _ in 0..=exponent {
            p_pows.push(cur.clone());
            let mut carry: u128 = 0;
            for limb in cur.iter_mut() {
                let v = *limb as u128 * p as u128 + carry;
                *limb = v as u64;
                carry = v >> 64;
            }
            // overflow past width means p^k >= p^P; those entries are unused
        }
        Ok(PowerModulus { p, exponent, width, modulus: m, reduce, p_pows })
    }

    pub fn p(&self) -> u64 {
        self.p
    }

    pub fn exponent(&self) -> u32 {
        self.exponent
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn zero(&self) -> Limbs {
        zero_limbs(self.width)
    }

    pub fn one(&self) -> Limbs {
        let mut l = self.zero();
        l[0] = 1;
        l
    }

    pub fn is_zero(&self, a: &Limbs) -> bool {
        a.iter().all(|&x| x == 0)
    }

    pub fn from_u128(&self, v: u128) -> Limbs {
        let mut wide = [0u64; 2 * MAX_LIMBS];
        wide[0] = v as u64;
        wide[1] = (v >> 64) as u64;
        let mut out = self.zero();
        self.reduce_wide(&mut wide, 2, &mut out);
        out
    }

    pub fn from_i128(&self, v: i128) -> Limbs {
        if v >= 0 {
            self.from_u128(v as u128)
        } else {
            let a = self.from_u128(v.unsigned_abs());
            self.neg(&a)
        }
    }

    /// `p^k mod p^P` (zero when `k >= P`).
    pub fn p_pow(&self, k: u32) -> Limbs {
        let mut out = self.zero();
        if k < self.exponent {
            out.copy_from_slice(&self.p_pows[k as usize][..self.width]);
        } else if k == self.exponent {
            // p^P = modulus, which is 0 mod p^P
        }
        out
    }

    pub fn add(&self, a: &Limbs, b: &Limbs) -> Limbs {
        let mut out = a.clone();
        self.add_assign(&mut out, b);
        out
    }

    pub fn add_assign(&self, a: &mut Limbs, b: &Limbs) {
        let mut carry = 0u64;
        for i in 0..self.width {
            let (s1, c1) = a[i].overflowing_add(b[i]);
            let (s2, c2) = s1.overflowing_add(carry);
            a[i] = s2;
            carry = (c1 as u64) + (c2 as u64);
        }
        if carry != 0 {
            // true sum is 2^(64w) + a; subtracting m borrows exactly once,
            // cancelling the carry (a + b < 2m)
            let borrow = sub_slices_in_place(a, &self.modulus);
            debug_assert_eq!(borrow, 1);
        } else if cmp_slices(a, &self.modulus) != std::cmp::Ordering::Less {
            let borrow = sub_slices_in_place(a, &self.modulus);
            debug_assert_eq!(borrow, 0);
        }
    }

    pub fn sub(&self, a: &Limbs, b: &Limbs) -> Limbs {
        let mut out = a.clone();
        self.sub_assign(&mut out, b);
        out
    }

    pub fn sub_assign(&self, a: &mut Limbs, b: &Limbs) {
        let mut borrow = 0u64;
        for i in 0..self.width {
            let (d1, b1) = a[i].overflowing_sub(b[i]);
            let (d2, b2) = d1.overflowing_sub(borrow);
            a[i] = d2;
            borrow = (b1 as u64) + (b2 as u64);
        }
        if borrow != 0 {
            // wrapped below zero: add the modulus back
            let mut carry = 0u64;
            for i in 0..self.width {
                let (s1, c1) = a[i].overflowing_add(self.modulus[i]);
                let (s2, c2) = s1.overflowing_add(carry);
                a[i] = s2;
                carry = (c1 as u64) + (c2 as u64);
            }
            debug_assert_eq!(carry, 1);
        }
    }

    pub fn neg(&self, a: &Limbs) -> Limbs {
        if self.is_zero(a) {
            a.clone()
        } else {
            let mut out = self.zero();
            out.copy_from_slice(&self.modulus);
            let mut borrow = 0u64;
            for i in 0..self.width {
                let (d1, b1) = out[i].overflowing_sub(a[i]);
                let (d2, b2) = d1.overflowing_sub(borrow);
                out[i] = d2;
                borrow = (b1 as u64) + (b2 as u64);
            }
            debug_assert_eq!(borrow, 0);
            out
        }
    }

    pub fn mul(&self, a: &Limbs, b: &Limbs) -> Limbs {
        let mut wide = [0u64; 2 * MAX_LIMBS];
        schoolbook_mul(a, b, &mut wide);
        let mut out = self.zero();
        self.reduce_wide(&mut wide, 2 * self.width, &mut out);
        out
    }

    pub fn mul_small(&self, a: &Limbs, k: u64) -> Limbs {
        let mut wide = [0u64; 2 * MAX_LIMBS];
        let mut carry: u128 = 0;
        for i in 0..self.width {
            let v = a[i] as u128 * k as u128 + carry;
            wide[i] = v as u64;
            carry = v >> 64;
        }
        wide[self.width] = carry as u64;
        let mut out = self.zero();
        self.reduce_wide(&mut wide, self.width + 1, &mut out);
        out
    }

    /// Reduce a wide (`<= 2*width` limb) value in place and write the residue.
    fn reduce_wide(&self, wide: &mut [u64; 2 * MAX_LIMBS], used: usize, out: &mut Limbs) {
        let w = self.width;
        match &self.reduce {
            ReduceKind::Pow2 { bits } => {
                let whole = (*bits as usize) / 64;
                let rem = (*bits as usize) % 64;
                for (i, o) in out.iter_mut().enumerate() {
                    *o = if i < used { wide[i] } else { 0 };
                }
                if whole < w {
                    if rem == 0 {
                        for o in out.iter_mut().skip(whole) {
                            *o = 0;
                        }
                    } else {
                        out[whole] &= (1u64 << rem) - 1;
                        for o in out.iter_mut().skip(whole + 1) {
                            *o = 0;
                        }
                    }
                }
            }
            ReduceKind::Barrett { mu } => {
                // HAC 14.42 with b = 2^64, k = width.
                let k = w;
                let _ = used;
                // q1 = floor(x / b^(k-1)); q2 = q1 * mu; q3 = floor(q2 / b^(k+1))
                let q1 = &wide[k - 1..2 * k];
                let mut q2 = [0u64; 2 * MAX_LIMBS + 2];
                schoolbook_mul_slices(q1, mu, &mut q2);
                let q3 = &q2[k + 1..2 * k + 2];
                // r2 = (q3 * m) mod b^(k+1)
                let mut r2 = [0u64; MAX_LIMBS + 1];
                truncated_mul(q3, &self.modulus, &mut r2[..k + 1]);
                // r = (x mod b^(k+1)) - r2  (mod b^(k+1))
                let mut r = [0u64; MAX_LIMBS + 1];
                r[..k + 1].copy_from_slice(&wide[..k + 1]);
                let mut borrow = 0u64;
                for i in 0..k + 1 {
                    let (d1, b1) = r[i].overflowing_sub(r2[i]);
                    let (d2, b2) = d1.overflowing_sub(borrow);
                    r[i] = d2;
                    borrow = (b1 as u64) + (b2 as u64);
                }
                // borrow here would mean the estimate was off by more than
                // b^(k+1), which HAC rules out
                debug_assert_eq!(borrow, 0);
                // at most two corrective subtractions
                for _ in 0..3 {
                    if ge_extended(&r[..k + 1], &self.modulus) {
                        sub_extended(&mut r[..k + 1], &self.modulus);
                    } else {
                        break;
                    }
                }
                debug_assert!(!ge_extended(&r[..k + 1], &self.modulus));
                for (i, o) in out.iter_mut().enumerate() {
                    *o = r[i];
                }
            }
        }
    }

    /// p-adic valuation of `a`, together with `a / p^v`; `None` if `a == 0`.
    pub fn valuation(&self, a: &Limbs) -> Option<(u32, Limbs)> {
        if self.is_zero(a) {
            return None;
        }
        let mut v = 0u32;
        let mut cur = a.clone();
        loop {
            let (q, r) = div_rem_small(&cur, self.p);
            if r != 0 {
                return Some((v, cur));
            }
            cur = q;
            v += 1;
        }
    }

    /// Valuation only, capped by the caller's interest.
    pub fn valuation_at_most(&self, a: &Limbs, cap: u32) -> Option<u32> {
        if self.is_zero(a) {
            return None;
        }
        let mut v = 0u32;
        let mut cur = a.clone();
        while v < cap {
            let (q, r) = div_rem_small(&cur, self.p);
            if r != 0 {
                return Some(v);
            }
            cur = q;
            v += 1;
        }
        Some(cap)
    }

    pub fn is_one(&self, a: &Limbs) -> bool {
        a[0] == 1 && a.iter().skip(1).all(|&x| x == 0)
    }

    /// `a * p^k mod p^P`.
    pub fn shift_up(&self, a: &Limbs, k: u32) -> Limbs {
        if k == 0 {
            return a.clone();
        }
        if k >= self.exponent {
            return self.zero();
        }
        let mut pk = self.zero();
        pk.copy_from_slice(&self.p_pows[k as usize][..self.width]);
        self.mul(a, &pk)
    }

    /// Exact division by `p^k`; caller must guarantee `p^k | a`.
    pub fn shift_down(&self, a: &Limbs, k: u32) -> Limbs {
        let mut cur = a.clone();
        for _ in 0..k {
            let (q, r) = div_rem_small(&cur, self.p);
            debug_assert_eq!(r, 0, "shift_down: operand not divisible by p");
            cur = q;
        }
        cur
    }

    /// Truncate to the low `digits` base-p digits: `a mod p^digits`.
    pub fn truncate(&self, a: &Limbs, digits: u32) -> Limbs {
        if digits >= self.exponent {
            return a.clone();
        }
        match &self.reduce {
            ReduceKind::Pow2 { .. } => {
                let mut out = a.clone();
                let whole = (digits as usize) / 64;
                let rem = (digits as usize) % 64;
                for i in 0..self.width {
                    if i > whole {
                        out[i] = 0;
                    } else if i == whole {
                        out[i] &= if rem == 0 { 0 } else { (1u64 << rem) - 1 };
                    }
                }
                out
            }
            ReduceKind::Barrett { .. } => {
                // a mod p^digits via division by p, digit by digit
                let mut digits_vec = Vec::with_capacity(digits as usize);
                let mut cur = a.clone();
                for _ in 0..digits {
                    let (q, r) = div_rem_small(&cur, self.p);
                    digits_vec.push(r);
                    cur = q;
                }
                let mut out = self.zero();
                for &d in digits_vec.iter().rev() {
                    // out = out * p + d
                    out = self.mul_small(&out, self.p);
                    let dl = self.from_u128(d as u128);
                    self.add_assign(&mut out, &dl);
                }
                out
            }
        }
    }

    /// Inverse of a p-unit by Newton lifting from the inverse mod p.
    pub fn inv_unit(&self, a: &Limbs) -> Option<Limbs> {
        let (_, r) = div_rem_small_peek(a, self.p);
        if r == 0 {
            return None;
        }
        let inv_mod_p = mod_inverse_u64(r, self.p)?;
        let mut z = self.from_u128(inv_mod_p as u128);
        let two = self.from_u128(2);
        // precision doubles each round
        let mut prec = 1u32;
        while prec < self.exponent {
            let t = self.mul(a, &z);
            let t = self.sub(&two, &t);
            z = self.mul(&z, &t);
            prec *= 2;
        }
        Some(z)
    }

    /// Base-p digits, little-endian, exactly `P` of them.
    pub fn digits(&self, a: &Limbs) -> Vec<u64> {
        let mut out = Vec::with_capacity(self.exponent as usize);
        let mut cur = a.clone();
        for _ in 0..self.exponent {
            let (q, r) = div_rem_small(&cur, self.p);
            out.push(r);
            cur = q;
        }
        out
    }

    pub fn from_digits(&self, digits: &[u64]) -> Limbs {
        let mut out = self.zero();
        for &d in digits.iter().rev() {
            out = self.mul_small(&out, self.p);
            let dl = self.from_u128(d as u128);
            self.add_assign(&mut out, &dl);
        }
        out
    }

    pub fn eq(&self, a: &Limbs, b: &Limbs) -> bool {
        a == b
    }
}

fn cmp_slices(a: &[u64], b: &[u64]) -> std::cmp::Ordering {
    debug_assert_eq!(a.len(), b.len());
    for i in (0..a.len()).rev() {
        match a[i].cmp(&b[i]) {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    std::cmp::Ordering::Equal
}

fn sub_slices_in_place(a: &mut [u64], b: &[u64]) -> u64 {
    let mut borrow = 0u64;
    for i in 0..b.len() {
        let (d1, b1) = a[i].overflowing_sub(b[i]);
        let (d2, b2) = d1.overflowing_sub(borrow);
        a[i] = d2;
        borrow = (b1 as u64) + (b2 as u64);
    }
    borrow
}

/// `r` may be one limb longer than `m`.
fn ge_extended(r: &[u64], m: &[u64]) -> bool {
    if r[r.len() - 1] != 0 {
        return true;
    }
    cmp_slices(&r[..m.len()], m) != std::cmp::Ordering::Less
}

fn sub_extended(r: &mut [u64], m: &[u64]) {
    let mut borrow = 0u64;
    for i in 0..r.len() {
        let sub = if i < m.len() { m[i] } else { 0 };
        let (d1, b1) = r[i].overflowing_sub(sub);
        let (d2, b2) = d1.overflowing_sub(borrow);
        r[i] = d2;
        borrow = (b1 as u64) + (b2 as u64);
    }
    debug_assert_eq!(borrow, 0);
}

fn schoolbook_mul(a: &Limbs, b: &Limbs, out: &mut [u64; 2 * MAX_LIMBS]) {
    out.fill(0);
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0 {
            continue;
        }
        let mut carry: u128 = 0;
        for (j, &bj) in b.iter().enumerate() {
            let v = ai as u128 * bj as u128 + out[i + j] as u128 + carry;
            out[i + j] = v as u64;
            carry = v >> 64;
        }
        let mut k = i + b.len();
        while carry > 0 {
            let v = out[k] as u128 + carry;
            out[k] = v as u64;
            carry = v >> 64;
            k += 1;
        }
    }
}

fn schoolbook_mul_slices(a: &[u64], b: &[u64], out: &mut [u64]) {
    for o in out.iter_mut() {
        *o = 0;
    }
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0 {
            continue;
        }
        let mut carry: u128 = 0;
        for (j, &bj) in b.iter().enumerate() {
            let v = ai as u128 * bj as u128 + out[i + j] as u128 + carry;
            out[i + j] = v as u64;
            carry = v >> 64;
        }
        let mut k = i + b.len();
        while carry > 0 {
            let v = out[k] as u128 + carry;
            out[k] = v as u64;
            carry = v >> 64;
            k += 1;
        }
    }
}

/// Low-`out.len()` limbs of `a * b` only.
fn truncated_mul(a: &[u64], b: &[u64], out: &mut [u64]) {
    let n = out.len();
    for o in out.iter_mut() {
        *o = 0;
    }
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0 || i >= n {
            continue;
        }
        let mut carry: u128 = 0;
        for (j, &bj) in b.iter().enumerate() {
            if i + j >= n {
                break;
            }
            let v = ai as u128 * bj as u128 + out[i + j] as u128 + carry;
            out[i + j] = v as u64;
            carry = v >> 64;
        }
        if i + b.len() < n && carry > 0 {
            let mut k = i + b.len();
            while carry > 0 && k < n {
                let v = out[k] as u128 + carry;
                out[k] = v as u64;
                carry = v >> 64;
                k += 1;
            }
        }
    }
}

/// `mu = floor(2^(128*w) / m)` by binary long division.
fn barrett_mu(m: &[u64]) -> Vec<u64> {
    let w = m.len();
    let total_bits = 128 * w;
    let mut quotient = vec![0u64; w + 2];
    let mut rem = vec![0u64; w + 1];
    for bit in (0..=total_bits).rev() {
        // rem = rem << 1 | (bit of dividend); dividend = 2^(128w) has only bit 128w set
        let mut carry = if bit == total_bits { 1u64 } else { 0u64 };
        for r in rem.iter_mut() {
            let new_carry = *r >> 63;
            *r = (*r << 1) | carry;
            carry = new_carry;
        }
        debug_assert_eq!(carry, 0);
        if ge_extended(&rem, m) {
            sub_extended(&mut rem, m);
            quotient[bit / 64] |= 1u64 << (bit % 64);
        }
    }
    while quotient.len() > w + 1 && *quotient.last().unwrap() == 0 {
        quotient.pop();
    }
    quotient
}

pub fn div_rem_small(a: &Limbs, d: u64) -> (Limbs, u64) {
    let mut q = a.clone();
    let mut rem: u128 = 0;
    for i in (0..a.len()).rev() {
        let cur = (rem << 64) | a[i] as u128;
        q[i] = (cur / d as u128) as u64;
        rem = cur % d as u128;
    }
    (q, rem as u64)
}

fn div_rem_small_peek(a: &Limbs, d: u64) -> ((), u64) {
    let mut rem: u128 = 0;
    for i in (0..a.len()).rev() {
        let cur = (rem << 64) | a[i] as u128;
        rem = cur % d as u128;
    }
    ((), rem as u64)
}

/// Inverse of `a` modulo `m` (both fit in u64), extended Euclid.
pub fn mod_inverse_u64(a: u64, m: u64) -> Option<u64> {
    let (mut old_r, mut r) = (a as i128, m as i128);
    let (mut old_s, mut s) = (1i128, 0i128);
    while r != 0 {
        let q = old_r / r;
        (old_r, r) = (r, old_r - q * r);
        (old_s, s) = (s, old_s - q * s);
    }
    if old_r != 1 {
        return None;
    }
    let mut inv = old_s % m as i128;
    if inv < 0 {
        inv += m as i128;
    }
    Some(inv as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigUint;
    use rand::{Rng, SeedableRng};

    fn to_big(l: &Limbs) -> BigUint {
        let mut bytes = Vec::new();
        for &limb in l.iter() {
            bytes.extend_from_slice(&limb.to_le_bytes());
        }
        BigUint::from_bytes_le(&bytes)
    }

    fn from_big(pm: &PowerModulus, b: &BigUint) -> Limbs {
        let mut out = pm.zero();
        for (i, limb) in b.to_u64_digits().iter().enumerate() {
            out[i] = *limb;
        }
        out
    }

    fn modulus_big(p: u64, e: u32) -> BigUint {
        BigUint::from(p).pow(e)
    }

    #[test]
    fn ops_match_bigint_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &(p, e) in &[(5u64, 200u32), (3, 200), (2, 200), (7, 37), (101, 80), (5, 1), (3, 40), (2, 64)] {
            let pm = PowerModulus::new(p, e).unwrap();
            let m = modulus_big(p, e);
            for _ in 0..200 {
                let a_big = BigUint::from_bytes_le(
                    &(0..pm.width() * 8).map(|_| rng.gen::<u8>()).collect::<Vec<_>>(),
                ) % &m;
                let b_big = BigUint::from_bytes_le(
                    &(0..pm.width() * 8).map(|_| rng.gen::<u8>()).collect::<Vec<_>>(),
                ) % &m;
                let a = from_big(&pm, &a_big);
                let b = from_big(&pm, &b_big);
                assert_eq!(to_big(&pm.add(&a, &b)), (&a_big + &b_big) % &m);
                assert_eq!(
                    to_big(&pm.sub(&a, &b)),
                    ((&m + &a_big) - &b_big) % &m,
                );
                assert_eq!(to_big(&pm.mul(&a, &b)), (&a_big * &b_big) % &m);
            }
        }
    }

    #[test]
    fn inverse_and_valuation() {
        let pm = PowerModulus::new(5, 100).unwrap();
        let a = pm.from_u128(123456789);
        let inv = pm.inv_unit(&a).unwrap();
        assert_eq!(pm.mul(&a, &inv), pm.one());
        // 5^3 * 12 has valuation 3
        let b = pm.from_u128(125 * 12);
        let (v, unit) = pm.valuation(&b).unwrap();
        assert_eq!(v, 3);
        assert_eq!(to_big(&unit), BigUint::from(12u32));
        assert!(pm.inv_unit(&b).is_none());
        assert!(pm.valuation(&pm.zero()).is_none());
    }

    #[test]
    fn shifts_and_digits() {
        for &(p, e) in &[(5u64, 60u32), (2, 130)] {
            let pm = PowerModulus::new(p, e).unwrap();
            let a = pm.from_u128(987654321987654321);
            let up = pm.shift_up(&a, 7);
            assert_eq!(pm.shift_down(&up, 7), pm.truncate(&a, e - 7));
            let d = pm.digits(&a);
            assert_eq!(pm.from_digits(&d), a);
            assert!(d.iter().all(|&x| x < p));
        }
    }

    #[test]
    fn truncate_is_mod_p_pow() {
        let pm = PowerModulus::new(7, 30).unwrap();
        let a = pm.from_u128(u128::MAX / 3);
        let t = pm.truncate(&a, 4);
        let m4 = BigUint::from(7u32).pow(4);
        assert_eq!(to_big(&t), to_big(&a) % m4);
    }
}
