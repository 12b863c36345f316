//! Arithmetic substrate: prime generation, multiplicative-function
//! primitives, real primitive Dirichlet characters, and `L(1, chi)`.
//!
//! Everything here is pure and deterministic.  The prime table is built
//! once behind a lock and shared read-only afterwards.

use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::util::{isqrt, CompensatedSum};

// ---------------------------------------------------------------------------
// Primes
// ---------------------------------------------------------------------------

/// A read-only view of the shared prime table, restricted to primes `<= limit`.
pub struct Primes {
    all: Arc<Vec<u64>>,
    upto: usize,
}

impl std::ops::Deref for Primes {
    type Target = [u64];
    fn deref(&self) -> &[u64] {
        &self.all[..self.upto]
    }
}

struct PrimeCache {
    limit: u64,
    primes: Arc<Vec<u64>>,
}

fn prime_cache() -> &'static Mutex<PrimeCache> {
    static CACHE: OnceLock<Mutex<PrimeCache>> = OnceLock::new();
    CACHE.get_or_init(|| {
        Mutex::new(PrimeCache {
            limit: 0,
            primes: Arc::new(Vec::new()),
        })
    })
}

fn simple_sieve(limit: u64) -> Vec<u64> {
    if limit < 2 {
        return Vec::new();
    }
    let n = limit as usize;
    let mut composite = vec![false; n + 1];
    let mut primes = Vec::new();
    for i in 2..=n {
        if !composite[i] {
            primes.push(i as u64);
            let mut j = i * i;
            while j <= n {
                composite[j] = true;
                j += i;
            }
        }
    }
    primes
}

/// All primes `<= limit`, from a shared cached table that only grows.
///
/// Desk-scale runs stay below the default ceiling of 10^7; the table is
/// extended on demand (geometrically) up to a hard cap of 2^32.
pub fn primes_up_to(limit: u64) -> Primes {
    assert!(
        limit <= u32::MAX as u64,
        "prime table limited to 2^32; use for_each_prime_in for larger ranges"
    );
    let mut cache = prime_cache().lock().unwrap();
    if cache.limit < limit {
        let new_limit = limit.max(cache.limit.saturating_mul(2)).max(1 << 17);
        cache.primes = Arc::new(simple_sieve(new_limit));
        cache.limit = new_limit;
    }
    let all = Arc::clone(&cache.primes);
    let upto = all.partition_point(|&p| p <= limit);
    Primes { all, upto }
}

/// Visits every prime in `[lo, hi]` in increasing order.
///
/// Small ranges come straight from the cached table; large ranges are
/// sieved in segments so no table of size `hi` is ever allocated.
pub fn for_each_prime_in(lo: u64, hi: u64, mut f: impl FnMut(u64)) {
    if hi < 2 || hi < lo {
        return;
    }
    let lo = lo.max(2);
    {
        let cache = prime_cache().lock().unwrap();
        if cache.limit >= hi {
            let ps = &cache.primes;
            let start = ps.partition_point(|&p| p < lo);
            let end = ps.partition_point(|&p| p <= hi);
            for &p in &ps[start..end] {
                f(p);
            }
            return;
        }
    }
    if hi <= 1 << 22 {
        for &p in primes_up_to(hi).iter() {
            if p >= lo {
                f(p);
            }
        }
        return;
    }
    let base = primes_up_to(isqrt(hi));
    const SEG: u64 = 1 << 20;
    let mut seg_lo = lo;
    let mut composite = vec![false; SEG as usize];
    while seg_lo <= hi {
        let seg_hi = seg_lo.saturating_add(SEG - 1).min(hi);
        let len = (seg_hi - seg_lo + 1) as usize;
        composite[..len].fill(false);
        for &p in base.iter() {
            if p * p > seg_hi {
                break;
            }
            let mut m = seg_lo.div_ceil(p).max(2) * p;
            while m <= seg_hi {
                composite[(m - seg_lo) as usize] = true;
                m += p;
            }
        }
        for (i, &c) in composite[..len].iter().enumerate() {
            if !c {
                let n = seg_lo + i as u64;
                if n >= 2 {
                    f(n);
                }
            }
        }
        seg_lo = seg_hi + 1;
    }
}

/// Exact count of primes `p <= x` with `p = a (mod q)`.
pub fn prime_count_in_progression(x: u64, q: u64, a: u64) -> u64 {
    let r = a % q;
    let mut count = 0;
    for_each_prime_in(2, x, |p| {
        if p % q == r {
            count += 1;
        }
    });
    count
}

pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    let mut divisible = false;
    for &p in primes_up_to(isqrt(n)).iter() {
        if n % p == 0 {
            divisible = true;
            break;
        }
    }
    !divisible
}

// ---------------------------------------------------------------------------
// Factorization and multiplicative primitives
// ---------------------------------------------------------------------------

/// Prime factorization `n = prod p_i^{e_i}` with the primes strictly
/// increasing and every exponent at least 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Factorization {
    pub n: u64,
    pub prime_powers: Vec<(u64, u32)>,
}

impl Factorization {
    pub fn of(n: u64) -> Self {
        assert!(n >= 1, "factorization requires n >= 1");
        let mut rest = n;
        let mut prime_powers = Vec::new();
        for &p in primes_up_to(isqrt(n)).iter() {
            if p * p > rest {
                break;
            }
            if rest % p == 0 {
                let mut e = 0;
                while rest % p == 0 {
                    rest /= p;
                    e += 1;
                }
                prime_powers.push((p, e));
            }
        }
        if rest > 1 {
            prime_powers.push((rest, 1));
        }
        Factorization { n, prime_powers }
    }

    /// Number of distinct prime factors.
    pub fn omega(&self) -> u32 {
        self.prime_powers.len() as u32
    }

    pub fn is_squarefree(&self) -> bool {
        self.prime_powers.iter().all(|&(_, e)| e == 1)
    }
}

/// Mobius function.
pub fn mobius(n: u64) -> i32 {
    let f = Factorization::of(n);
    if !f.is_squarefree() {
        return 0;
    }
    if f.omega() % 2 == 0 {
        1
    } else {
        -1
    }
}

pub fn is_squarefree(n: u64) -> bool {
    mobius(n) != 0
}

/// Ternary divisor function: the number of ordered triples `(a, b, c)`
/// with `abc = n`.  Multiplicative, `(e+1)(e+2)/2` at a prime power,
/// hence `3^omega(n)` on squarefree `n`.
pub fn tau3(n: u64) -> u64 {
    Factorization::of(n)
        .prime_powers
        .iter()
        .map(|&(_, e)| ((e as u64 + 1) * (e as u64 + 2)) / 2)
        .product()
}

/// Smallest-prime-factor table for bulk factorization of `n <= limit`.
pub struct SpfTable {
    spf: Vec<u32>,
}

impl SpfTable {
    pub fn new(limit: u64) -> Self {
        assert!(limit <= u32::MAX as u64, "spf table limited to 2^32");
        let n = limit as usize;
        let mut spf = vec![0u32; n + 1];
        let mut primes: Vec<u32> = Vec::new();
        for i in 2..=n {
            if spf[i] == 0 {
                spf[i] = i as u32;
                primes.push(i as u32);
            }
            for &p in &primes {
                if p > spf[i] || (i as u64) * (p as u64) > limit {
                    break;
                }
                spf[i * p as usize] = p;
            }
        }
        SpfTable { spf }
    }

    pub fn limit(&self) -> u64 {
        (self.spf.len() - 1) as u64
    }

    /// Smallest prime factor of `n >= 2`.
    pub fn factor_smallest(&self, n: u64) -> u64 {
        debug_assert!(n >= 2 && n <= self.limit());
        self.spf[n as usize] as u64
    }

    pub fn factor(&self, n: u64) -> Factorization {
        assert!(n >= 1 && n <= self.limit());
        let mut rest = n as usize;
        let mut prime_powers = Vec::new();
        while rest > 1 {
            let p = self.spf[rest] as u64;
            let mut e = 0;
            while rest as u64 % p == 0 {
                rest /= p as usize;
                e += 1;
            }
            prime_powers.push((p, e));
        }
        Factorization { n, prime_powers }
    }

    /// Appends the distinct prime factors of `n` to `out` in increasing order.
    pub fn distinct_primes(&self, n: u64, out: &mut Vec<u64>) {
        let mut rest = n as usize;
        while rest > 1 {
            let p = self.spf[rest];
            out.push(p as u64);
            while rest % p as usize == 0 {
                rest /= p as usize;
            }
        }
    }

    pub fn mobius(&self, n: u64) -> i32 {
        let mut rest = n as usize;
        let mut sign = 1;
        while rest > 1 {
            let p = self.spf[rest] as usize;
            rest /= p;
            if rest % p == 0 {
                return 0;
            }
            sign = -sign;
        }
        sign
    }

    pub fn is_squarefree(&self, n: u64) -> bool {
        self.mobius(n) != 0
    }
}

// ---------------------------------------------------------------------------
// Quadratic symbols
// ---------------------------------------------------------------------------

/// Jacobi symbol `(a/n)` for odd positive `n`.
pub fn jacobi(a: i64, n: u64) -> i32 {
    assert!(n % 2 == 1, "jacobi requires odd n");
    let mut a = a.rem_euclid(n as i64) as u64;
    let mut n = n;
    let mut sign = 1i32;
    while a != 0 {
        while a % 2 == 0 {
            a /= 2;
            if n % 8 == 3 || n % 8 == 5 {
                sign = -sign;
            }
        }
        std::mem::swap(&mut a, &mut n);
        if a % 4 == 3 && n % 4 == 3 {
            sign = -sign;
        }
        a %= n;
    }
    if n == 1 {
        sign
    } else {
        0
    }
}

/// Kronecker symbol `(a/n)`, defined for all integers.
pub fn kronecker(a: i64, n: i64) -> i32 {
    // (a/2) as a function of a mod 8.
    const TAB2: [i32; 8] = [0, 1, 0, -1, 0, -1, 0, 1];
    if n == 0 {
        return if a == 1 || a == -1 { 1 } else { 0 };
    }
    if a % 2 == 0 && n % 2 == 0 {
        return 0;
    }
    let mut a = a;
    let mut n = n;
    let mut v = 0u32;
    while n % 2 == 0 {
        n /= 2;
        v += 1;
    }
    let mut k = if v % 2 == 0 {
        1
    } else {
        TAB2[a.rem_euclid(8) as usize]
    };
    if n < 0 {
        n = -n;
        if a < 0 {
            k = -k;
        }
    }
    loop {
        // invariant: n odd, n > 0
        if a == 0 {
            return if n > 1 { 0 } else { k };
        }
        let mut v = 0u32;
        while a % 2 == 0 {
            a /= 2;
            v += 1;
        }
        if v % 2 == 1 {
            k *= TAB2[(n & 7) as usize];
        }
        if a & n & 2 != 0 {
            k = -k;
        }
        let r = a.unsigned_abs() as i64;
        a = n % r;
        n = r;
    }
}

/// Whether `d` is a fundamental discriminant (of a quadratic field),
/// i.e. either `d = 1 (mod 4)` and squarefree, or `d = 4m` with
/// `m = 2, 3 (mod 4)` and squarefree.  `d = 1` is excluded.
pub fn is_fundamental_discriminant(d: i64) -> bool {
    if d == 0 || d == 1 {
        return false;
    }
    if d.rem_euclid(4) == 1 {
        return is_squarefree(d.unsigned_abs());
    }
    if d % 4 != 0 {
        return false;
    }
    let m = d / 4;
    let r = m.rem_euclid(4);
    (r == 2 || r == 3) && is_squarefree(m.unsigned_abs())
}

// ---------------------------------------------------------------------------
// Real primitive characters
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
enum CharKind {
    /// Quadratic-residue (Legendre) character mod an odd prime.
    LegendreOddPrime,
    /// Kronecker symbol of a fundamental discriminant `d`; modulus `|d|`.
    Kronecker(i64),
}

/// A real primitive Dirichlet character mod `q`: completely multiplicative,
/// periodic with period `q`, zero exactly on residues sharing a factor
/// with `q`, and non-principal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RealCharacter {
    modulus: u64,
    kind: CharKind,
}

impl RealCharacter {
    /// The Legendre character mod an odd prime `q`.
    pub fn quadratic_residue(q: u64) -> Result<Self> {
        if q < 3 || q % 2 == 0 || !is_prime(q) {
            return Err(Error::NoRealCharacter(q));
        }
        Ok(RealCharacter {
            modulus: q,
            kind: CharKind::LegendreOddPrime,
        })
    }

    /// The character `n -> (d/n)` for a fundamental discriminant `d`.
    pub fn kronecker_of(d: i64) -> Result<Self> {
        if !is_fundamental_discriminant(d) {
            return Err(Error::NoRealCharacter(d.unsigned_abs()));
        }
        Ok(RealCharacter {
            modulus: d.unsigned_abs(),
            kind: CharKind::Kronecker(d),
        })
    }

    /// The real primitive character of modulus `q`, when one exists:
    /// the Legendre character for odd prime `q`, otherwise the Kronecker
    /// character of whichever of `+q`, `-q` is a fundamental discriminant
    /// (preferring `+q`).
    pub fn for_modulus(q: u64) -> Result<Self> {
        if q < 2 {
            return Err(Error::NoRealCharacter(q));
        }
        if q % 2 == 1 && is_prime(q) {
            return Self::quadratic_residue(q);
        }
        let qi = q as i64;
        if is_fundamental_discriminant(qi) {
            return Self::kronecker_of(qi);
        }
        if is_fundamental_discriminant(-qi) {
            return Self::kronecker_of(-qi);
        }
        Err(Error::NoRealCharacter(q))
    }

    pub fn modulus(&self) -> u64 {
        self.modulus
    }

    /// `chi(n)`, evaluated on the residue of `n` mod `q` (so the periodic
    /// extension is used for negative arguments).
    pub fn eval(&self, n: i64) -> i32 {
        let r = n.rem_euclid(self.modulus as i64);
        match self.kind {
            CharKind::LegendreOddPrime => jacobi(r, self.modulus),
            CharKind::Kronecker(d) => kronecker(d, r),
        }
    }

    /// One full period of values `chi(0), ..., chi(q-1)`.
    pub fn period_values(&self) -> Vec<i32> {
        (0..self.modulus as i64).map(|n| self.eval(n)).collect()
    }
}

// ---------------------------------------------------------------------------
// L(1, chi)
// ---------------------------------------------------------------------------

/// Rigorous evaluation data for the tail of `sum chi(n)/n` past a cutoff.
///
/// With `S(n) = sum_{m<=n} chi(m)` (periodic, zero on full periods) and
/// `mu` its mean over a period, Abel summation twice gives, for any cutoff
/// `N` that is a multiple of the period (so `S(N) = 0`),
///
///   sum_{n>N} chi(n)/n  =  mu/(N+1) + E,   |E| <= B2 / ((N+1)(N+2)),
///
/// where `B2` bounds the partial sums of `S - mu` from any starting phase.
struct TailData {
    mean: f64,
    b2: f64,
}

fn tail_data(chi: &RealCharacter) -> TailData {
    let q = chi.modulus() as usize;
    let vals = chi.period_values();
    // prefix sums of chi over one period
    let mut s = vec![0i64; q + 1];
    for n in 1..=q {
        s[n] = s[n - 1] + vals[n % q] as i64;
    }
    debug_assert_eq!(s[q], 0, "character must sum to zero over a period");
    let mean = (1..=q).map(|n| s[n]).sum::<i64>() as f64 / q as f64;
    // partial sums of D(n) = S(n) - mean over two periods; the spread
    // bounds |sum_{m=b+1}^{c} D(m)| for any window of length <= q.
    let mut p = 0.0f64;
    let mut pmax = 0.0f64;
    let mut pmin = 0.0f64;
    for n in 1..=2 * q {
        let sn = s[if n % q == 0 { q } else { n % q }] as f64;
        p += sn - mean;
        pmax = pmax.max(p);
        pmin = pmin.min(p);
    }
    TailData {
        mean,
        b2: pmax - pmin,
    }
}

/// `L(1, chi) = sum chi(n)/n` to within `eps`, with a rigorous tail bound.
///
/// The crude Abel bound for a cutoff `N` is `q/N`; the mean-corrected form
/// used here shrinks the tail to `O((q/N)^2)`, so the default cutoff
/// ceiling `max(10^6, q*10^4)` covers `eps = 1e-6` for every `q <= 100`.
pub fn l1(chi: &RealCharacter, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "l1 tolerance must be positive, got {eps}"
        )));
    }
    let q = chi.modulus();
    let cutoff = 1_000_000u64.max(q.saturating_mul(10_000));
    let tail = tail_data(chi);
    // cutoff must sit on a period boundary so the partial character sum
    // vanishes there
    let mut n = (2 * q).max(64).next_multiple_of(q);
    while tail.b2 / ((n as f64 + 1.0) * (n as f64 + 2.0)) > eps / 2.0 {
        n = n.saturating_mul(2);
        if n > cutoff {
            return Err(Error::Tolerance { eps, cutoff });
        }
    }
    let vals = chi.period_values();
    let mut sum = CompensatedSum::new();
    for m in 1..=n {
        let c = vals[(m % q) as usize];
        if c != 0 {
            sum.add(c as f64 / m as f64);
        }
    }
    Ok(sum.total() + tail.mean / (n as f64 + 1.0))
}

/// Raw partial sum `sum_{n<=cutoff} chi(n)/n`, whose distance from
/// `L(1, chi)` is at most `q/cutoff`.
pub fn l1_with_cutoff(chi: &RealCharacter, cutoff: u64) -> f64 {
    let q = chi.modulus();
    let vals = chi.period_values();
    let mut sum = CompensatedSum::new();
    for m in 1..=cutoff {
        let c = vals[(m % q) as usize];
        if c != 0 {
            sum.add(c as f64 / m as f64);
        }
    }
    sum.total()
}

// ---------------------------------------------------------------------------
