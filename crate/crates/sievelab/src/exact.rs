//! Exact arithmetic: big rationals, symbolic polynomials in logarithms of
//! integers, and double-double rendering of their values.
//!
//! Logs are irrational, so "exact mode" keeps every multiplicative factor
//! as a rational and isolates log terms symbolically: a sum like
//! `sum h(d) (log(D/d))^2` is a degree-2 polynomial in the symbols
//! `log D, log 2, log 3, log 5, ...` with rational coefficients.  Identities
//! that must be bit-exact (quadratic-form diagonalization, inversion
//! round-trips, additivity of the moment sums) are checked as coefficient
//! equalities; numeric output evaluates the symbols in double-double
//! precision (about 106 effective bits).

use std::collections::BTreeMap;
use std::sync::{Mutex, OnceLock};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

pub type Rat = BigRational;

pub fn rat(num: i64, den: i64) -> Rat {
    Rat::new(BigInt::from(num), BigInt::from(den))
}

pub fn rat_u(n: u64) -> Rat {
    Rat::from_integer(BigInt::from(n))
}

pub fn rat_to_f64(r: &Rat) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

// ---------------------------------------------------------------------------
// Symbols
// ---------------------------------------------------------------------------

/// A log symbol: the level marker `log Delta` or `log p` for a prime `p`.
/// The level gets its own marker (rather than being factored) so that the
/// same polynomial code serves any integer level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Sym {
    Delta,
    LogP(u64),
}

// ---------------------------------------------------------------------------
// Double-double scalars
// ---------------------------------------------------------------------------

/// An unevaluated sum of two floats with `|lo| <= ulp(hi)/2`: roughly
/// 106 bits of significand.
#[derive(Clone, Copy, Debug, Default)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let err = b - (s - a);
    (s, err)
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let err = a.mul_add(b, -p);
    (p, err)
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    pub fn from_f64(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn from_parts(hi: f64, lo: f64) -> Dd {
        let (s, e) = quick_two_sum(hi, lo);
        Dd { hi: s, lo: e }
    }

    pub fn value(self) -> f64 {
        self.hi + self.lo
    }

    pub fn add(self, rhs: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, rhs.hi);
        let e = e + self.lo + rhs.lo;
        let (hi, lo) = quick_two_sum(s, e);
        Dd { hi, lo }
    }

    pub fn sub(self, rhs: Dd) -> Dd {
        self.add(Dd {
            hi: -rhs.hi,
            lo: -rhs.lo,
        })
    }

    pub fn mul(self, rhs: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, rhs.hi);
        let e = e + self.hi * rhs.lo + self.lo * rhs.hi;
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }

    pub fn div(self, rhs: Dd) -> Dd {
        let q1 = self.hi / rhs.hi;
        let r = self.sub(rhs.mul(Dd::from_f64(q1)));
        let q2 = r.hi / rhs.hi;
        let r2 = r.sub(rhs.mul(Dd::from_f64(q2)));
        let q3 = r2.hi / rhs.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd::from_parts(hi, lo + q3)
    }
}

/// Converts an exact rational to double-double.
pub fn rat_to_dd(r: &Rat) -> Dd {
    let num = bigint_to_dd(r.numer());
    let den = bigint_to_dd(r.denom());
    num.div(den)
}

fn bigint_to_dd(x: &BigInt) -> Dd {
    use num_traits::FromPrimitive;
    let hi = x.to_f64().unwrap_or(f64::NAN);
    if !hi.is_finite() {
        return Dd::from_f64(hi);
    }
    // to_f64 of an integer is integral, so the inverse conversion is exact
    let exact = BigInt::from_f64(hi).expect("finite float");
    let lo = (x - exact).to_f64().unwrap_or(0.0);
    Dd::from_parts(hi, lo)
}

// ---------------------------------------------------------------------------
// ln(k) to double-double precision
// ---------------------------------------------------------------------------

/// `ln k` for an integer `k >= 1`, accurate to well below the double-double
/// ulp.  Computed from the atanh series in fixed-point big-integer
/// arithmetic: with `x = k / 2^e` in `[1, 2)` and `t = (x-1)/(x+1) <= 1/3`,
/// `ln x = 2 (t + t^3/3 + t^5/5 + ...)`, then `ln k = ln x + e ln 2`.
pub fn ln_dd(k: u64) -> Dd {
    assert!(k >= 1);
    if k == 1 {
        return Dd::ZERO;
    }
    static CACHE: OnceLock<Mutex<BTreeMap<u64, Dd>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(BTreeMap::new()));
    if let Some(v) = cache.lock().unwrap().get(&k) {
        return *v;
    }
    const FRAC_BITS: u64 = 192;
    // Reduce k = x * 2^e with x in [1, 2); the base case k = 2 runs the
    // series on x = 2 itself (t = 1/3) to anchor the recursion.
    let e = if k == 2 {
        0
    } else {
        63 - k.leading_zeros() as u64 // 2^e <= k < 2^(e+1)
    };
    // t = (k - 2^e) / (k + 2^e) in fixed point
    let num = BigInt::from(k - (1u64 << e)) << FRAC_BITS;
    let den = BigInt::from(k + (1u64 << e));
    let t: BigInt = num / den;
    let t2: BigInt = (&t * &t) >> FRAC_BITS;
    let mut acc = BigInt::zero();
    let mut pow = t.clone();
    let mut j = 0u64;
    while !pow.is_zero() {
        acc += &pow / BigInt::from(2 * j + 1);
        pow = (&pow * &t2) >> FRAC_BITS;
        j += 1;
        debug_assert!(j < 400);
    }
    let frac = Rat::new(acc * BigInt::from(2), BigInt::one() << FRAC_BITS);
    let mut result = rat_to_dd(&frac);
    if e > 0 {
        result = result.add(ln_dd(2).mul(Dd::from_f64(e as f64)));
    }
    cache.lock().unwrap().insert(k, result);
    result
}

// ---------------------------------------------------------------------------
// Log polynomials
// ---------------------------------------------------------------------------

/// A polynomial of degree at most 2 in log symbols, with rational
/// coefficients.  Quadratic keys are stored with the symbol pair sorted.
#[derive(Clone, Debug, Default)]
pub struct LogPoly {
    pub constant: Rat,
    pub linear: BTreeMap<Sym, Rat>,
    pub quadratic: BTreeMap<(Sym, Sym), Rat>,
}

impl LogPoly {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: Rat) -> Self {
        LogPoly {
            constant: c,
            ..Self::default()
        }
    }

    pub fn symbol(s: Sym) -> Self {
        let mut p = Self::default();
        p.linear.insert(s, Rat::one());
        p
    }

    /// `log(delta / d)` expanded over the prime factors of squarefree `d`.
    pub fn log_delta_over(d_primes: &[u64]) -> Self {
        let mut p = Self::symbol(Sym::Delta);
        for &q in d_primes {
            *p.linear.entry(Sym::LogP(q)).or_insert_with(Rat::zero) -= Rat::one();
        }
        p
    }

    pub fn is_linear(&self) -> bool {
        self.quadratic.is_empty()
    }

    pub fn add_assign(&mut self, rhs: &LogPoly) {
        self.constant += &rhs.constant;
        for (s, c) in &rhs.linear {
            *self.linear.entry(*s).or_insert_with(Rat::zero) += c;
        }
        for (ss, c) in &rhs.quadratic {
            *self.quadratic.entry(*ss).or_insert_with(Rat::zero) += c;
        }
    }

    pub fn sub_assign(&mut self, rhs: &LogPoly) {
        self.constant -= &rhs.constant;
        for (s, c) in &rhs.linear {
            *self.linear.entry(*s).or_insert_with(Rat::zero) -= c;
        }
        for (ss, c) in &rhs.quadratic {
            *self.quadratic.entry(*ss).or_insert_with(Rat::zero) -= c;
        }
    }

    pub fn scaled(&self, c: &Rat) -> LogPoly {
        if c.is_zero() {
            return LogPoly::zero();
        }
        LogPoly {
            constant: &self.constant * c,
            linear: self.linear.iter().map(|(s, v)| (*s, v * c)).collect(),
            quadratic: self.quadratic.iter().map(|(s, v)| (*s, v * c)).collect(),
        }
    }

    pub fn add_scaled(&mut self, rhs: &LogPoly, c: &Rat) {
        if c.is_zero() {
            return;
        }
        self.constant += &rhs.constant * c;
        for (s, v) in &rhs.linear {
            *self.linear.entry(*s).or_insert_with(Rat::zero) += v * c;
        }
        for (ss, v) in &rhs.quadratic {
            *self.quadratic.entry(*ss).or_insert_with(Rat::zero) += v * c;
        }
    }

    /// Product of two polynomials of degree at most 1.
    ///
    /// Panics when either factor has a quadratic part: the crate never
    /// forms degrees above 2.
    pub fn mul_linear(&self, rhs: &LogPoly) -> LogPoly {
        assert!(self.is_linear() && rhs.is_linear());
        let mut out = LogPoly::constant(&self.constant * &rhs.constant);
        for (s, c) in &rhs.linear {
            let v = &self.constant * c;
            if !v.is_zero() {
                *out.linear.entry(*s).or_insert_with(Rat::zero) += v;
            }
        }
        for (s, c) in &self.linear {
            let v = &rhs.constant * c;
            if !v.is_zero() {
                *out.linear.entry(*s).or_insert_with(Rat::zero) += v;
            }
        }
        for (s1, c1) in &self.linear {
            for (s2, c2) in &rhs.linear {
                let v = c1 * c2;
                if v.is_zero() {
                    continue;
                }
                let key = if s1 <= s2 { (*s1, *s2) } else { (*s2, *s1) };
                *out.quadratic.entry(key).or_insert_with(Rat::zero) += v;
            }
        }
        out
    }

    pub fn square_linear(&self) -> LogPoly {
        self.mul_linear(self)
    }

    fn normalized(&self) -> LogPoly {
        LogPoly {
            constant: self.constant.clone(),
            linear: self
                .linear
                .iter()
                .filter(|(_, c)| !c.is_zero())
                .map(|(s, c)| (*s, c.clone()))
                .collect(),
            quadratic: self
                .quadratic
                .iter()
                .filter(|(_, c)| !c.is_zero())
                .map(|(s, c)| (*s, c.clone()))
                .collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        let n = self.normalized();
        n.constant.is_zero() && n.linear.is_empty() && n.quadratic.is_empty()
    }

    /// Largest absolute coefficient of the difference, as a quick distance
    /// diagnostic for tests.
    pub fn max_coeff_diff(&self, rhs: &LogPoly) -> Rat {
        let mut d = self.clone();
        d.sub_assign(rhs);
        let n = d.normalized();
        let mut m = n.constant.abs();
        for c in n.linear.values().chain(n.quadratic.values()) {
            if c.abs() > m {
                m = c.abs();
            }
        }
        m
    }

    /// Evaluates with `Sym::Delta = ln(delta)` in double-double precision.
    pub fn eval_dd(&self, delta: u64) -> Dd {
        let sym_val = |s: &Sym| -> Dd {
            match s {
                Sym::Delta => ln_dd(delta),
                Sym::LogP(p) => ln_dd(*p),
            }
        };
        let mut acc = rat_to_dd(&self.constant);
        for (s, c) in &self.linear {
            acc = acc.add(rat_to_dd(c).mul(sym_val(s)));
        }
        for ((s1, s2), c) in &self.quadratic {
            acc = acc.add(rat_to_dd(c).mul(sym_val(s1)).mul(sym_val(s2)));
        }
        acc
    }

    pub fn eval_f64(&self, delta: u64) -> f64 {
        self.eval_dd(delta).value()
    }
}

impl PartialEq for LogPoly {
    fn eq(&self, other: &Self) -> bool {
        let a = self.normalized();
        let b = other.normalized();
        a.constant == b.constant && a.linear == b.linear && a.quadratic == b.quadratic
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_dd_agrees_with_f64_ln() {
        for k in [2u64, 3, 5, 7, 10, 97, 1000, 27000, 1_000_003] {
            let v = ln_dd(k).value();
            let want = (k as f64).ln();
            assert!(
                (v - want).abs() <= 4.0 * f64::EPSILON * want.abs().max(1.0),
                "k={k}: {v} vs {want}"
            );
        }
    }

    #[test]
    fn ln_dd_additive_beyond_f64_precision() {
        // ln 6 = ln 2 + ln 3 must hold to double-double accuracy
        let lhs = ln_dd(6);
        let rhs = ln_dd(2).add(ln_dd(3));
        let diff = lhs.sub(rhs).value().abs();
        assert!(diff < 1e-30, "diff={diff:e}");

        let lhs = ln_dd(1 << 20);
        let rhs = ln_dd(2).mul(Dd::from_f64(20.0));
        assert!(lhs.sub(rhs).value().abs() < 1e-28);
    }

    #[test]
    fn dd_division_roundtrip() {
        let a = Dd::from_f64(1.0).div(Dd::from_f64(3.0));
        let b = a.mul(Dd::from_f64(3.0));
        assert!(b.sub(Dd::from_f64(1.0)).value().abs() < 1e-31);
    }

    #[test]
    fn rat_to_dd_is_sharper_than_f64() {
        let r = rat(1, 3);
        let dd = rat_to_dd(&r);
        // residual against the exact value 1/3
        let err = dd.sub(Dd::from_f64(1.0).div(Dd::from_f64(3.0))).value();
        assert!(err.abs() < 1e-31);
    }

    #[test]
    fn logpoly_product_and_equality() {
        // (LD - L2)(LD - L3) == LD^2 - (L2+L3)LD + L2 L3
        let a = LogPoly::log_delta_over(&[2]);
        let b = LogPoly::log_delta_over(&[3]);
        let prod = a.mul_linear(&b);

        let mut expect = LogPoly::symbol(Sym::Delta).square_linear();
        let mut cross = LogPoly::symbol(Sym::LogP(2));
        cross.add_assign(&LogPoly::symbol(Sym::LogP(3)));
        let cross = cross.mul_linear(&LogPoly::symbol(Sym::Delta));
        expect.sub_assign(&cross);
        expect.add_assign(
            &LogPoly::symbol(Sym::LogP(2)).mul_linear(&LogPoly::symbol(Sym::LogP(3))),
        );
        assert_eq!(prod, expect);
        assert!(prod.max_coeff_diff(&expect).is_zero());
    }

    #[test]
    fn logpoly_eval_matches_f64_arithmetic() {
        // h * (log(30/6))^2 at delta = 30
        let p = LogPoly::log_delta_over(&[2, 3]).square_linear().scaled(&rat(1, 2));
        let want = 0.5 * (30.0f64 / 6.0).ln().powi(2);
        assert!((p.eval_f64(30) - want).abs() < 1e-12);
    }
}
