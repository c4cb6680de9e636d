//! The coefficient field `K = Q_p(zeta_M)` for `p` prime, `p` not dividing `M`.
//!
//! `K` is unramified of degree `f` = (multiplicative order of `p` mod `M`), and
//! its ring of integers at precision `P` is `Z/p^P [x] / h(x)` where `h` is an
//! irreducible degree-`f` factor of the `M`-th cyclotomic polynomial, found mod
//! `p` and Hensel-lifted to `p^P`. The class of `x` is a primitive `M`-th root
//! of unity, which is how `zeta` enters every downstream formula.

use crate::error::{Error, Result};
use crate::limb::{mod_inverse_u64, Limbs, PowerModulus};
use sha2::{Digest, Sha256};

/// An element of the ring of integers of `K` at full working precision:
/// a polynomial of degree `< f` with `Z/p^P` coefficients.
pub type KElt = Vec<Limbs>;

#[derive(Clone, Debug)]
pub struct FieldContext {
    p: u64,
    m_root: u64,
    precision: u32,
    f: u32,
    /// `q = p^f`; `None` if it overflows u128 (nodes `l*q^N` are then refused).
    q: Option<u128>,
    pm: PowerModulus,
    /// Monic, degree `f`, coefficients mod `p^P`. Divides `Phi_M` mod `p^P`.
    h_poly: Vec<Limbs>,
    /// `h_poly` reduced mod p, for residue-field inversions.
    h_mod_p: Vec<u64>,
    /// `zeta^0 .. zeta^(M-1)`.
    zeta_pows: Vec<KElt>,
    digest: String,
}

pub fn is_prime_u64(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for &sp in &[2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        if n == sp {
            return true;
        }
        if n % sp == 0 {
            return false;
        }
    }
    // deterministic Miller-Rabin for u64
    let mut d = n - 1;
    let mut r = 0u32;
    while d % 2 == 0 {
        d /= 2;
        r += 1;
    }
    let mul = |a: u64, b: u64| ((a as u128 * b as u128) % n as u128) as u64;
    let powmod = |mut base: u64, mut e: u64| {
        let mut acc = 1u64;
        base %= n;
        while e > 0 {
            if e & 1 == 1 {
                acc = mul(acc, base);
            }
            base = mul(base, base);
            e >>= 1;
        }
        acc
    };
    'witness: for &a in &[2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let mut x = powmod(a, d);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 0..r - 1 {
            x = mul(x, x);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

fn mult_order(p: u64, m: u64) -> u32 {
    if m == 1 {
        return 1;
    }
    let mut t = p % m;
    let mut f = 1u32;
    while t != 1 {
        t = (t as u128 * p as u128 % m as u128) as u64;
        f += 1;
    }
    f
}

// ---- dense polynomials over F_p (u64 coefficients), used only at build time ----

fn pp_trim(c: &mut Vec<u64>) {
    while c.len() > 1 && *c.last().unwrap() == 0 {
        c.pop();
    }
}

fn pp_mul(a: &[u64], b: &[u64], p: u64) -> Vec<u64> {
    let mut out = vec![0u64; a.len() + b.len() - 1];
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0 {
            continue;
        }
        for (j, &bj) in b.iter().enumerate() {
            out[i + j] = ((out[i + j] as u128 + ai as u128 * bj as u128) % p as u128) as u64;
        }
    }
    pp_trim(&mut out);
    out
}

fn pp_rem(a: &[u64], m: &[u64], p: u64) -> Vec<u64> {
    let mut r = a.to_vec();
    pp_trim(&mut r);
    let dm = m.len() - 1;
    if dm == 0 {
        return vec![0];
    }
    let lead_inv = mod_inverse_u64(m[dm], p).expect("modulus leading coeff must be a unit");
    while r.len() > dm {
        let k = r.len() - 1 - dm;
        let c = (r[r.len() - 1] as u128 * lead_inv as u128 % p as u128) as u64;
        if c != 0 {
            for (j, &mj) in m.iter().enumerate() {
                let sub = c as u128 * mj as u128 % p as u128;
                let idx = k + j;
                r[idx] = ((r[idx] as u128 + p as u128 - sub) % p as u128) as u64;
            }
        }
        r.pop();
        pp_trim(&mut r);
    }
    r
}

fn pp_gcd(a: &[u64], b: &[u64], p: u64) -> Vec<u64> {
    let (mut x, mut y) = (a.to_vec(), b.to_vec());
    pp_trim(&mut x);
    pp_trim(&mut y);
    while !(y.len() == 1 && y[0] == 0) {
        let r = pp_rem(&x, &y, p);
        x = y;
        y = r;
    }
    // normalize monic
    let inv = mod_inverse_u64(*x.last().unwrap(), p);
    if let Some(inv) = inv {
        for c in x.iter_mut() {
            *c = (*c as u128 * inv as u128 % p as u128) as u64;
        }
    }
    x
}

fn pp_powmod(base: &[u64], mut e: u128, m: &[u64], p: u64) -> Vec<u64> {
    let mut acc = vec![1u64];
    let mut b = pp_rem(base, m, p);
    while e > 0 {
        if e & 1 == 1 {
            acc = pp_rem(&pp_mul(&acc, &b, p), m, p);
        }
        b = pp_rem(&pp_mul(&b, &b, p), m, p);
        e >>= 1;
    }
    acc
}

/// Extended Euclid over F_p[x]: returns (g, s, t) with s*a + t*b = g, g monic.
fn pp_ext_gcd(a: &[u64], b: &[u64], p: u64) -> (Vec<u64>, Vec<u64>, Vec<u64>) {
    let neg = |v: &[u64]| v.iter().map(|&c| (p - c % p) % p).collect::<Vec<_>>();
    let add = |x: &[u64], y: &[u64]| {
        let mut out = vec![0u64; x.len().max(y.len())];
        for (i, &c) in x.iter().enumerate() {
            out[i] = c;
        }
        for (i, &c) in y.iter().enumerate() {
            out[i] = (out[i] + c) % p;
        }
        pp_trim(&mut out);
        out
    };
    let divrem = |x: &[u64], y: &[u64]| -> (Vec<u64>, Vec<u64>) {
        let mut r = x.to_vec();
        pp_trim(&mut r);
        let dy = y.len() - 1;
        let lead_inv = mod_inverse_u64(y[dy], p).unwrap();
        if dy == 0 {
            let q: Vec<u64> =
                r.iter().map(|&c| (c as u128 * lead_inv as u128 % p as u128) as u64).collect();
            return (q, vec![0]);
        }
        let mut q = vec![0u64; r.len().saturating_sub(dy).max(1)];
        while r.len() > dy {
            let k = r.len() - 1 - dy;
            let c = (r[r.len() - 1] as u128 * lead_inv as u128 % p as u128) as u64;
            q[k] = (q[k] + c) % p;
            if c != 0 {
                for (j, &yj) in y.iter().enumerate() {
                    let sub = c as u128 * yj as u128 % p as u128;
                    r[k + j] = ((r[k + j] as u128 + p as u128 - sub) % p as u128) as u64;
                }
            }
            r.pop();
            pp_trim(&mut r);
        }
        pp_trim(&mut q);
        (q, r)
    };
    let (mut old_r, mut r) = (a.to_vec(), b.to_vec());
    let (mut old_s, mut s) = (vec![1u64], vec![0u64]);
    let (mut old_t, mut t) = (vec![0u64], vec![1u64]);
    pp_trim(&mut old_r);
    pp_trim(&mut r);
    while !(r.len() == 1 && r[0] == 0) {
        let (q, rem) = divrem(&old_r, &r);
        old_r = r;
        r = rem;
        let new_s = add(&old_s, &neg(&pp_mul(&q, &s, p)));
        old_s = s;
        s = new_s;
        let new_t = add(&old_t, &neg(&pp_mul(&q, &t, p)));
        old_t = t;
        t = new_t;
    }
    let lead = *old_r.last().unwrap();
    let inv = mod_inverse_u64(lead, p).unwrap();
    let scale = |v: &[u64]| {
        v.iter().map(|&c| (c as u128 * inv as u128 % p as u128) as u64).collect::<Vec<_>>()
    };
    (scale(&old_r), scale(&old_s), scale(&old_t))
}

/// Cyclotomic polynomial `Phi_M` with coefficients in `Z/p^P`:
/// `Phi_M = (x^M - 1) / prod_{d | M, d < M} Phi_d`, division exact (monic).
fn cyclotomic_mod(pm: &PowerModulus, m: u64) -> Vec<Limbs> {
    if m == 1 {
        // x - 1
        return vec![pm.neg(&pm.one()), pm.one()];
    }
    let mut num = vec![pm.zero(); m as usize + 1];
    num[0] = pm.neg(&pm.one());
    num[m as usize] = pm.one();
    for d in 1..m {
        if m % d == 0 {
            let phi_d = cyclotomic_mod(pm, d);
            num = poly_div_exact_monic(pm, &num, &phi_d);
        }
    }
    num
}

fn poly_mul_big(pm: &PowerModulus, a: &[Limbs], b: &[Limbs]) -> Vec<Limbs> {
    let mut out = vec![pm.zero(); a.len() + b.len() - 1];
    for (i, ai) in a.iter().enumerate() {
        if pm.is_zero(ai) {
            continue;
        }
        for (j, bj) in b.iter().enumerate() {
            let prod = pm.mul(ai, bj);
            let target = pm.add(&out[i + j], &prod);
            out[i + j] = target;
        }
    }
    out
}

fn poly_trim_big(pm: &PowerModulus, v: &mut Vec<Limbs>) {
    while v.len() > 1 && pm.is_zero(v.last().unwrap()) {
        v.pop();
    }
}

/// Exact division of `a` by monic `m` over `Z/p^P`; remainder must vanish.
fn poly_div_exact_monic(pm: &PowerModulus, a: &[Limbs], m: &[Limbs]) -> Vec<Limbs> {
    let (q, r) = poly_divrem_monic(pm, a, m);
    debug_assert!(r.iter().all(|c| pm.is_zero(c)), "division expected to be exact");
    q
}

/// Division with remainder by a monic polynomial over `Z/p^P`.
fn poly_divrem_monic(pm: &PowerModulus, a: &[Limbs], m: &[Limbs]) -> (Vec<Limbs>, Vec<Limbs>) {
    let dm = m.len() - 1;
    debug_assert!(pm.eq(&m[dm], &pm.one()), "divisor must be monic");
    let mut r: Vec<Limbs> = a.to_vec();
    if r.len() <= dm {
        return (vec![pm.zero()], r);
    }
    let mut q = vec![pm.zero(); r.len() - dm];
    for k in (0..r.len() - dm).rev() {
        let c = r[k + dm].clone();
        if pm.is_zero(&c) {
            continue;
        }
        q[k] = c.clone();
        for (j, mj) in m.iter().enumerate() {
            let sub = pm.mul(&c, mj);
            let v = pm.sub(&r[k + j], &sub);
            r[k + j] = v;
        }
    }
    r.truncate(dm.max(1));
    while r.len() < dm.max(1) {
        r.push(pm.zero());
    }
    (q, r)
}

fn poly_mod_p(pm: &PowerModulus, a: &[Limbs]) -> Vec<u64> {
    a.iter().map(|c| pm.digits(c)[0]).collect()
}

/// Tiny deterministic generator so factor selection is reproducible.
struct SplitMix(u64);
impl SplitMix {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
}

/// One monic irreducible degree-`f` factor of the squarefree, equal-degree
/// product `a` over F_p (Cantor-Zassenhaus; trace map for p = 2).
fn equal_degree_factor(a: &[u64], f: u32, p: u64, seed: u64) -> Result<Vec<u64>> {
    let mut cur = a.to_vec();
    pp_trim(&mut cur);
    let mut rng = SplitMix(seed);
    let mut rounds = 0;
    while cur.len() - 1 > f as usize {
        rounds += 1;
        if rounds > 10_000 {
            return Err(Error::Config("cyclotomic factor search failed to converge".into()));
        }
        let deg = cur.len() - 1;
        let t: Vec<u64> = (0..deg).map(|_| rng.next() % p).collect();
        let mut t = t;
        pp_trim(&mut t);
        if t.len() == 1 && t[0] == 0 {
            continue;
        }
        let b = if p == 2 {
            // trace map T + T^2 + ... + T^(2^(f-1))
            let mut acc = vec![0u64];
            let mut cur_pow = pp_rem(&t, &cur, p);
            for _ in 0..f {
                acc = {
                    let mut s = vec![0u64; acc.len().max(cur_pow.len())];
                    for (i, &c) in acc.iter().enumerate() {
                        s[i] = c;
                    }
                    for (i, &c) in cur_pow.iter().enumerate() {
                        s[i] ^= c; // addition in F_2
                    }
                    pp_trim(&mut s);
                    s
                };
                cur_pow = pp_rem(&pp_mul(&cur_pow, &cur_pow, p), &cur, p);
            }
            acc
        } else {
            let pf = (p as u128).checked_pow(f).ok_or_else(|| {
                Error::Config(format!("residue degree f = {f} too large for factor search"))
            })?;
            let e = (pf - 1) / 2;
            let mut b = pp_powmod(&t, e, &cur, p);
            // b - 1
            if b.is_empty() {
                b = vec![0];
            }
            b[0] = (b[0] + p - 1) % p;
            pp_trim(&mut b);
            b
        };
        if b.len() == 1 && b[0] == 0 {
            continue;
        }
        let g = pp_gcd(&b, &cur, p);
        let dg = g.len() - 1;
        if dg == 0 || dg == cur.len() - 1 {
            continue;
        }
        // keep whichever side is smaller but still a multiple of f
        let other = {
            let mut q = pp_rem_quotient(&cur, &g, p);
            pp_trim(&mut q);
            q
        };
        let (cand1, cand2) = if g.len() <= other.len() { (g, other) } else { (other, g) };
        cur = if (cand1.len() - 1) % f as usize == 0 && cand1.len() - 1 >= f as usize {
            cand1
        } else {
            cand2
        };
    }
    // normalize monic
    let inv = mod_inverse_u64(*cur.last().unwrap(), p).unwrap();
    for c in cur.iter_mut() {
        *c = (*c as u128 * inv as u128 % p as u128) as u64;
    }
    Ok(cur)
}

fn pp_rem_quotient(a: &[u64], m: &[u64], p: u64) -> Vec<u64> {
    // quotient of exact division a / m over F_p
    let mut r = a.to_vec();
    pp_trim(&mut r);
    let dm = m.len() - 1;
    let mut q = vec![0u64; r.len() - dm];
    let lead_inv = mod_inverse_u64(m[dm], p).unwrap();
    for k in (0..q.len()).rev() {
        let c = (r[k + dm] as u128 * lead_inv as u128 % p as u128) as u64;
        q[k] = c;
        if c != 0 {
            for (j, &mj) in m.iter().enumerate() {
                let sub = c as u128 * mj as u128 % p as u128;
                r[k + j] = ((r[k + j] as u128 + p as u128 - sub) % p as u128) as u64;
            }
        }
    }
    q
}

fn pp_is_irreducible(h: &[u64], p: u64, f: u32) -> bool {
    if h.len() - 1 != f as usize {
        return false;
    }
    // x^(p^f) == x mod h, and gcd(x^(p^(f/l)) - x, h) = 1 for primes l | f
    let x = vec![0u64, 1];
    let x_mod_h = pp_rem(&x, h, p);
    let frob = |e: u32| -> Option<Vec<u64>> {
        let pe = (p as u128).checked_pow(e)?;
        Some(pp_powmod(&x, pe, h, p))
    };
    // frobenius-power minus x, reduced mod h
    let frob_diff = |e: u32| -> Option<Vec<u64>> {
        let xe = frob(e)?;
        let mut d = vec![0u64; xe.len().max(x_mod_h.len())];
        for (i, &c) in xe.iter().enumerate() {
            d[i] = c;
        }
        for (i, &c) in x_mod_h.iter().enumerate() {
            d[i] = ((d[i] + p) - c % p) % p;
        }
        pp_trim(&mut d);
        Some(d)
    };
    match frob_diff(f) {
        Some(d) if d.len() == 1 && d[0] == 0 => {}
        _ => return false,
    }
    let mut l = 2u32;
    let mut ff = f;
    while ff > 1 {
        if ff % l == 0 {
            let Some(d) = frob_diff(f / l) else { return false };
            if !(d.len() == 1 && d[0] == 0) {
                let g = pp_gcd(&d, h, p);
                if g.len() != 1 {
                    return false;
                }
            } else {
                return false; // x^(p^(f/l)) = x would mean h splits
            }
            while ff % l == 0 {
                ff /= l;
            }
        }
        l += 1;
    }
    true
}

impl FieldContext {
    /// Build the field `Q_p(zeta_M)` at precision `P`.
    pub fn build(p: u64, m: u64, precision: u32) -> Result<Self> {
        if !is_prime_u64(p) {
            return Err(Error::Config(format!("p = {p} is not prime")));
        }
        if m == 0 {
            return Err(Error::Config("M must be positive".into()));
        }
        if m % p == 0 {
            return Err(Error::Config(format!("p = {p} divides M = {m}")));
        }
        if precision == 0 {
            return Err(Error::Config("precision must be at least 1".into()));
        }
        let pm = PowerModulus::new(p, precision).map_err(Error::Config)?;
        let f = mult_order(p, m);
        let q = (p as u128).checked_pow(f);

        // Phi_M over Z/p^P and its reduction mod p.
        let phi = cyclotomic_mod(&pm, m);
        let phi_mod_p = poly_mod_p(&pm, &phi);
        let deg_phi = phi.len() - 1;

        let h_poly = if deg_phi == f as usize {
            phi.clone()
        } else {
            let h0 = equal_degree_factor(&phi_mod_p, f, p, p.wrapping_mul(0x9e37).wrapping_add(m))?;
            hensel_lift_factor(&pm, &phi, &h0, p)?
        };
        let h_mod_p = poly_mod_p(&pm, &h_poly);
        if !pp_is_irreducible(&h_mod_p, p, f) {
            return Err(Error::Config(
                "internal: selected cyclotomic factor is not irreducible mod p".into(),
            ));
        }

        let mut ctx = FieldContext {
            p,
            m_root: m,
            precision,
            f,
            q,
            pm,
            h_poly,
            h_mod_p,
            zeta_pows: Vec::new(),
            digest: String::new(),
        };
        // zeta = class of x (constant -h0 when f = 1)
        let zeta = if f == 1 {
            vec![ctx.pm.neg(&ctx.h_poly[0])]
        } else {
            let mut z = vec![ctx.pm.zero(); f as usize];
            z[1] = ctx.pm.one();
            z
        };
        let mut pows = Vec::with_capacity(m as usize);
        let mut cur = ctx.k_one();
        for _ in 0..m {
            pows.push(cur.clone());
            cur = ctx.k_mul(&cur, &zeta);
        }
        // zeta^M = 1 exactly, zeta^d - 1 a unit for 0 < d < M
        if !ctx.k_eq(&cur, &ctx.k_one()) {
            return Err(Error::Config("internal: zeta^M != 1 after Hensel lift".into()));
        }
        for d in 1..m as usize {
            let diff = ctx.k_sub(&pows[d], &ctx.k_one());
            let unit = diff.iter().any(|c| {
                ctx.pm.valuation_at_most(c, 1).map(|v| v == 0).unwrap_or(false)
            });
            if !unit {
                return Err(Error::Config(format!(
                    "internal: zeta^{d} = 1, zeta is not a primitive M-th root"
                )));
            }
        }
        ctx.zeta_pows = pows;

        let mut hasher = Sha256::new();
        hasher.update(format!("p={p};M={m};P={precision};h="));
        for c in &ctx.h_poly {
            hasher.update(
                ctx.pm.digits(c).iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","),
            );
            hasher.update(";");
        }
        ctx.digest = format!("{:x}", hasher.finalize());
        Ok(ctx)
    }

    pub fn p(&self) -> u64 {
        self.p
    }

    /// The cyclotomic level `M`.
    pub fn level(&self) -> u64 {
        self.m_root
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    pub fn residue_degree(&self) -> u32 {
        self.f
    }

    /// `q = p^f`, the residue field cardinality.
    pub fn q(&self) -> Result<u128> {
        self.q.ok_or_else(|| Error::Budget { needed: u64::MAX, budget: 0 })
    }

    pub fn modulus(&self) -> &PowerModulus {
        &self.pm
    }

    pub fn h_poly(&self) -> &[Limbs] {
        &self.h_poly
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    // ---- arithmetic on raw K elements (full precision, no tracking) ----

    pub fn k_zero(&self) -> KElt {
        vec![self.pm.zero(); self.f as usize]
    }

    pub fn k_one(&self) -> KElt {
        let mut e = self.k_zero();
        e[0] = self.pm.one();
        e
    }

    pub fn k_from_i128(&self, v: i128) -> KElt {
        let mut e = self.k_zero();
        e[0] = self.pm.from_i128(v);
        e
    }

    pub fn k_is_zero(&self, a: &KElt) -> bool {
        a.iter().all(|c| self.pm.is_zero(c))
    }

    pub fn k_eq(&self, a: &KElt, b: &KElt) -> bool {
        a == b
    }

    pub fn k_add(&self, a: &KElt, b: &KElt) -> KElt {
        a.iter().zip(b).map(|(x, y)| self.pm.add(x, y)).collect()
    }

    pub fn k_add_assign(&self, a: &mut KElt, b: &KElt) {
        for (x, y) in a.iter_mut().zip(b) {
            self.pm.add_assign(x, y);
        }
    }

    pub fn k_sub(&self, a: &KElt, b: &KElt) -> KElt {
        a.iter().zip(b).map(|(x, y)| self.pm.sub(x, y)).collect()
    }

    pub fn k_neg(&self, a: &KElt) -> KElt {
        a.iter().map(|x| self.pm.neg(x)).collect()
    }

    pub fn k_is_one(&self, a: &KElt) -> bool {
        self.pm.is_one(&a[0]) && a.iter().skip(1).all(|c| self.pm.is_zero(c))
    }

    pub fn k_mul(&self, a: &KElt, b: &KElt) -> KElt {
        if self.k_is_one(b) {
            return a.clone();
        }
        if self.k_is_one(a) {
            return b.clone();
        }
        let f = self.f as usize;
        if f == 1 {
            return vec![self.pm.mul(&a[0], &b[0])];
        }
        // schoolbook then reduce by monic h
        let mut wide = vec![self.pm.zero(); 2 * f - 1];
        for (i, ai) in a.iter().enumerate() {
            if self.pm.is_zero(ai) {
                continue;
            }
            for (j, bj) in b.iter().enumerate() {
                let prod = self.pm.mul(ai, bj);
                let s = self.pm.add(&wide[i + j], &prod);
                wide[i + j] = s;
            }
        }
        for k in (f..2 * f - 1).rev() {
            let c = wide[k].clone();
            if self.pm.is_zero(&c) {
                continue;
            }
            wide[k] = self.pm.zero();
            for (j, hj) in self.h_poly.iter().enumerate().take(f) {
                let sub = self.pm.mul(&c, hj);
                let v = self.pm.sub(&wide[k - f + j], &sub);
                wide[k - f + j] = v;
            }
        }
        wide.truncate(f);
        wide
    }

    pub fn k_mul_small(&self, a: &KElt, k: u64) -> KElt {
        a.iter().map(|c| self.pm.mul_small(c, k)).collect()
    }

    /// Inverse of a unit (some coefficient a p-unit) by Newton lifting.
    pub fn k_inv_unit(&self, a: &KElt) -> Option<KElt> {
        // inverse mod p via extended Euclid in F_p[x]/(h)
        let a_mod_p = poly_mod_p(&self.pm, a);
        let mut a_mod_p = a_mod_p;
        pp_trim(&mut a_mod_p);
        if a_mod_p.len() == 1 && a_mod_p[0] == 0 {
            return None;
        }
        let (g, s, _) = pp_ext_gcd(&a_mod_p, &self.h_mod_p, self.p);
        if g.len() != 1 {
            return None;
        }
        let ginv = mod_inverse_u64(g[0], self.p)?;
        let mut z = self.k_zero();
        for (i, &c) in s.iter().enumerate() {
            if i < z.len() {
                z[i] = self.pm.from_u128((c as u128 * ginv as u128) % self.p as u128);
            }
        }
        // Newton: z <- z(2 - a z), doubling precision each round
        let two = self.k_from_i128(2);
        let mut prec = 1u32;
        while prec < self.precision {
            let t = self.k_mul(a, &z);
            let t = self.k_sub(&two, &t);
            z = self.k_mul(&z, &t);
            prec *= 2;
        }
        Some(z)
    }

    /// Minimum p-adic valuation over coefficients, capped at `cap`.
    pub fn k_valuation_at_most(&self, a: &KElt, cap: u32) -> Option<u32> {
        let mut best: Option<u32> = None;
        for c in a {
            if let Some(v) = self.pm.valuation_at_most(c, cap) {
                best = Some(best.map_or(v, |b| b.min(v)));
                if best == Some(0) {
                    break;
                }
            }
        }
        best
    }

    pub fn k_shift_up(&self, a: &KElt, k: u32) -> KElt {
        a.iter().map(|c| self.pm.shift_up(c, k)).collect()
    }

    pub fn k_shift_down(&self, a: &KElt, k: u32) -> KElt {
        a.iter().map(|c| self.pm.shift_down(c, k)).collect()
    }

    pub fn k_truncate(&self, a: &KElt, digits: u32) -> KElt {
        a.iter().map(|c| self.pm.truncate(c, digits)).collect()
    }

    /// `zeta^e` for any integer exponent (reduced mod M).
    pub fn zeta_pow(&self, e: i64) -> &KElt {
        let m = self.m_root as i64;
        let idx = ((e % m) + m) % m;
        &self.zeta_pows[idx as usize]
    }
}

/// Lift the factorization `phi = h0 * g0 mod p` to `phi = h * g mod p^P`
/// (quadratic Hensel with Bezout updates; h stays monic).
fn hensel_lift_factor(
    pm: &PowerModulus,
    phi: &[Limbs],
    h0: &[u64],
    p: u64,
) -> Result<Vec<Limbs>> {
    let phi_mod_p = poly_mod_p(pm, phi);
    let g0 = pp_rem_quotient(&phi_mod_p, h0, p);
    let (one, s0, t0) = pp_ext_gcd(&g0, h0, p);
    if one.len() != 1 {
        return Err(Error::Config(
            "internal: cyclotomic factor not coprime to cofactor (p | M?)".into(),
        ));
    }
    let lift = |v: &[u64]| -> Vec<Limbs> {
        v.iter().map(|&c| pm.from_u128(c as u128)).collect()
    };
    let mut h = lift(h0);
    let mut g = lift(&g0);
    let mut s = lift(&s0);
    let mut t = lift(&t0);

    let padd = |a: &[Limbs], b: &[Limbs]| -> Vec<Limbs> {
        let mut out = vec![pm.zero(); a.len().max(b.len())];
        for (i, c) in a.iter().enumerate() {
            out[i] = c.clone();
        }
        for (i, c) in b.iter().enumerate() {
            let v = pm.add(&out[i], c);
            out[i] = v;
        }
        out
    };
    let psub = |a: &[Limbs], b: &[Limbs]| -> Vec<Limbs> {
        let mut out = vec![pm.zero(); a.len().max(b.len())];
        for (i, c) in a.iter().enumerate() {
            out[i] = c.clone();
        }
        for (i, c) in b.iter().enumerate() {
            let v = pm.sub(&out[i], c);
            out[i] = v;
        }
        out
    };

    let mut prec = 1u32;
    while prec < pm.exponent() {
        // e = phi - g h
        let gh = poly_mul_big(pm, &g, &h);
        let mut e = psub(phi, &gh);
        poly_trim_big(pm, &mut e);
        // (q, r) = divrem(s e, h)
        let se = poly_mul_big(pm, &s, &e);
        let (qq, rr) = poly_divrem_monic(pm, &se, &h);
        // g* = g + t e + q g ; h* = h + r
        let te = poly_mul_big(pm, &t, &e);
        let qg = poly_mul_big(pm, &qq, &g);
        let mut g_new = padd(&padd(&g, &te), &qg);
        let mut h_new = padd(&h, &rr);
        poly_trim_big(pm, &mut g_new);
        // keep h at its exact degree
        h_new.truncate(h.len());
        while h_new.len() < h.len() {
            h_new.push(pm.zero());
        }
        g = g_new;
        h = h_new;
        // Bezout update: b = s g + t h - 1 ; (c, d) = divrem(s b, h)
        let sg = poly_mul_big(pm, &s, &g);
        let th = poly_mul_big(pm, &t, &h);
        let mut b = padd(&sg, &th);
        b[0] = pm.sub(&b[0], &pm.one());
        poly_trim_big(pm, &mut b);
        let sb = poly_mul_big(pm, &s, &b);
        let (cc, dd) = poly_divrem_monic(pm, &sb, &h);
        let mut s_new = psub(&s, &dd);
        let tb = poly_mul_big(pm, &t, &b);
        let cg = poly_mul_big(pm, &cc, &g);
        let mut t_new = psub(&psub(&t, &tb), &cg);
        poly_trim_big(pm, &mut s_new);
        poly_trim_big(pm, &mut t_new);
        s = s_new;
        t = t_new;
        prec *= 2;
    }
    // final exactness check at full precision
    let gh = poly_mul_big(pm, &g, &h);
    let mut e = psub(phi, &gh);
    poly_trim_big(pm, &mut e);
    if !(e.len() == 1 && pm.is_zero(&e[0])) {
        return Err(Error::Config("internal: Hensel lift failed to reach full precision".into()));
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_q5_zeta4() {
        // f = 1, q = 5, zeta is a square root of -1 lifted from 2 or 3 mod 5
        let ctx = FieldContext::build(5, 4, 20).unwrap();
        assert_eq!(ctx.residue_degree(), 1);
        assert_eq!(ctx.q().unwrap(), 5);
        let zeta = ctx.zeta_pow(1).clone();
        let z2 = ctx.k_mul(&zeta, &zeta);
        assert_eq!(z2, ctx.k_from_i128(-1));
        let first_digit = ctx.modulus().digits(&zeta[0])[0];
        assert!(first_digit == 2 || first_digit == 3);
    }

    #[test]
    fn build_q2_zeta3() {
        // x^2 + x + 1 is irreducible mod 2: f = 2, q = 4, no splitting needed
        let ctx = FieldContext::build(2, 3, 10).unwrap();
        assert_eq!(ctx.residue_degree(), 2);
        assert_eq!(ctx.q().unwrap(), 4);
        let h = ctx.h_poly();
        assert_eq!(h.len(), 3);
        let digits: Vec<u64> = h.iter().map(|c| ctx.modulus().digits(c)[0]).collect();
        assert_eq!(digits, vec![1, 1, 1]);
    }

    #[test]
    fn build_m1_degenerate() {
        let ctx = FieldContext::build(3, 1, 10).unwrap();
        assert_eq!(ctx.residue_degree(), 1);
        assert_eq!(ctx.q().unwrap(), 3);
        assert_eq!(ctx.zeta_pow(0), &ctx.k_one());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(FieldContext::build(3, 6, 10).is_err());
        assert!(FieldContext::build(4, 3, 10).is_err());
        assert!(FieldContext::build(5, 4, 0).is_err());
    }

    #[test]
    fn zeta_has_exact_order_m() {
        for &(p, m, prec) in &[(5u64, 4u64, 50u32), (3, 8, 40), (7, 12, 30), (2, 3, 64), (2, 15, 40)] {
            let ctx = FieldContext::build(p, m, prec).unwrap();
            let mut acc = ctx.k_one();
            for d in 1..=m {
                acc = ctx.k_mul(&acc, ctx.zeta_pow(1));
                if d < m {
                    assert_ne!(acc, ctx.k_one(), "zeta^{d} = 1 at (p,M)=({p},{m})");
                } else {
                    assert_eq!(acc, ctx.k_one());
                }
            }
        }
    }

    #[test]
    fn sum_of_all_roots_vanishes() {
        // zeta + zeta^2 + zeta^3 + 1 = 0 for M = 4
        let ctx = FieldContext::build(5, 4, 20).unwrap();
        let mut acc = ctx.k_zero();
        for e in 0..4 {
            acc = ctx.k_add(&acc, ctx.zeta_pow(e));
        }
        assert!(ctx.k_is_zero(&acc));
    }

    #[test]
    fn k_inverse_roundtrip() {
        let ctx = FieldContext::build(2, 3, 40).unwrap();
        let a = {
            let mut v = ctx.k_from_i128(7);
            v[1] = ctx.modulus().from_u128(3);
            v
        };
        let inv = ctx.k_inv_unit(&a).unwrap();
        assert_eq!(ctx.k_mul(&a, &inv), ctx.k_one());
    }
}
