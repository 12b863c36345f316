//! Concrete sifting sequences: exact congruence sums, remainders against a
//! density model, exact sifting counts, and the two evaluations of the
//! lower-bound sum.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::arith::{self, Factorization, RealCharacter, SpfTable};
use crate::density::{for_each_squarefree, Density};
use crate::error::{Error, Result};
use crate::selberg::{self, WeightSet};
use crate::util::{isqrt, ln_u64, CompensatedSum};

/// Largest span stored densely; longer supports fall back to re-scanning
/// a generator.
pub const DENSE_SPAN_LIMIT: u64 = 100_000_000;
/// Largest `x` for which the divisor-convolution weights are bulk-sieved;
/// beyond it each value is recomputed from the factorization on demand.
const LAMBDA_SIEVE_LIMIT: u64 = 20_000_000;
/// Cost ceilings for the quadratic-cost oracles.
pub const EXACT_REMAINDER_BUDGET: u64 = 10_000_000;
pub const REMAINDER_SCAN_BUDGET: u64 = 1 << 25;
const SPF_ORACLE_LIMIT: u64 = 20_000_000;

enum Store {
    /// Weights indexed by `n - n_min`.
    Dense(Vec<f64>),
    Sparse(BTreeMap<u64, f64>),
    Generator(Arc<dyn Fn(u64) -> f64 + Send + Sync>),
}

/// A finite sequence of nonnegative weights `a_n` on `[n_min, n_max]`.
pub struct SiftingSequence {
    n_min: u64,
    n_max: u64,
    store: Store,
}

impl SiftingSequence {
    pub fn n_min(&self) -> u64 {
        self.n_min
    }

    pub fn n_max(&self) -> u64 {
        self.n_max
    }

    /// Unit weights on `[n_min, n_max]`.
    pub fn unit(n_min: u64, n_max: u64) -> Result<Self> {
        if n_min == 0 || n_min > n_max {
            return Err(Error::InvalidParameter(format!(
                "unit sequence needs 1 <= n_min <= n_max, got [{n_min}, {n_max}]"
            )));
        }
        let span = n_max - n_min + 1;
        let store = if span <= DENSE_SPAN_LIMIT {
            Store::Dense(vec![1.0; span as usize])
        } else {
            Store::Generator(Arc::new(|_| 1.0))
        };
        Ok(SiftingSequence {
            n_min,
            n_max,
            store,
        })
    }

    /// The divisor-convolution weights `a_n = sum_{d|n} chi(d)` restricted
    /// to `n = a (mod q)` on `[1, x]`, zero elsewhere.
    pub fn lambda(chi: &RealCharacter, a: u64, x: u64) -> Result<Self> {
        let q = chi.modulus();
        if x < q {
            return Err(Error::InvalidParameter(format!(
                "lambda sequence needs x >= q, got x={x} q={q}"
            )));
        }
        let a = a % q;
        if x <= LAMBDA_SIEVE_LIMIT {
            let lam = lambda_table(chi, x);
            let mut weights = vec![0.0f64; x as usize];
            let mut n = a.max(1);
            if n % q != a {
                n += q;
            }
            while n <= x {
                weights[(n - 1) as usize] = lam[n as usize] as f64;
                n += q;
            }
            Ok(SiftingSequence {
                n_min: 1,
                n_max: x,
                store: Store::Dense(weights),
            })
        } else {
            let chi = chi.clone();
            Ok(SiftingSequence {
                n_min: 1,
                n_max: x,
                store: Store::Generator(Arc::new(move |n| {
                    if n % q == a {
                        lambda_at(&chi, n) as f64
                    } else {
                        0.0
                    }
                })),
            })
        }
    }

    /// A sequence from explicit `(n, a_n)` entries.
    pub fn from_entries(entries: BTreeMap<u64, f64>) -> Result<Self> {
        let Some((&lo, _)) = entries.first_key_value() else {
            return Err(Error::InvalidParameter("empty sequence".into()));
        };
        let (&hi, _) = entries.last_key_value().unwrap();
        if lo == 0 {
            return Err(Error::InvalidParameter("support must start at n >= 1".into()));
        }
        if entries.values().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidParameter(
                "sequence weights must be nonnegative".into(),
            ));
        }
        Ok(SiftingSequence {
            n_min: lo,
            n_max: hi,
            store: Store::Sparse(entries),
        })
    }

    /// Parses `n,a_n` CSV rows (blank lines, `#` comments, and an optional
    /// header tolerated).
    pub fn from_csv_str(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Csv {
                path: origin.to_string(),
                line: line_no,
                msg,
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 2 {
                return Err(err(format!("expected 2 fields, found {}", fields.len())));
            }
            if idx == 0 && fields[0].parse::<u64>().is_err() {
                continue; // header
            }
            let n: u64 = fields[0]
                .parse()
                .map_err(|e| err(format!("bad n field {:?}: {e}", fields[0])))?;
            let a: f64 = fields[1]
                .parse()
                .map_err(|e| err(format!("bad weight {:?}: {e}", fields[1])))?;
            if !(a >= 0.0) || !a.is_finite() {
                return Err(err(format!("weight must be finite and >= 0, got {a}")));
            }
            if entries.insert(n, a).is_some() {
                return Err(err(format!("n = {n} listed twice")));
            }
        }
        Self::from_entries(entries).map_err(|e| match e {
            Error::InvalidParameter(msg) => Error::Csv {
                path: origin.to_string(),
                line: 0,
                msg,
            },
            other => other,
        })
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let mut text = String::new();
        std::fs::File::open(path)?.read_to_string(&mut text)?;
        Self::from_csv_str(&text, &path.display().to_string())
    }

    pub fn weight_at(&self, n: u64) -> f64 {
        if n < self.n_min || n > self.n_max {
            return 0.0;
        }
        match &self.store {
            Store::Dense(v) => v[(n - self.n_min) as usize],
            Store::Sparse(m) => m.get(&n).copied().unwrap_or(0.0),
            Store::Generator(f) => f(n),
        }
    }

    /// Exact congruence sum `A_d = sum_{n = 0 (mod d)} a_n`.
    pub fn congruence_sum(&self, d: u64) -> f64 {
        assert!(d >= 1, "modulus must be positive");
        let mut acc = CompensatedSum::new();
        match &self.store {
            Store::Sparse(m) => {
                for (&n, &a) in m {
                    if n % d == 0 {
                        acc.add(a);
                    }
                }
            }
            _ => {
                let mut n = self.n_min.next_multiple_of(d);
                while n <= self.n_max {
                    acc.add(self.weight_at(n));
                    n += d;
                }
            }
        }
        acc.total()
    }

    pub fn total(&self) -> f64 {
        self.congruence_sum(1)
    }

    /// `sum a_p` over primes `lo < p <= hi`.
    pub fn sum_over_primes(&self, lo: u64, hi: u64) -> f64 {
        let mut acc = CompensatedSum::new();
        arith::for_each_prime_in(lo + 1, hi.min(self.n_max), |p| {
            let a = self.weight_at(p);
            if a != 0.0 {
                acc.add(a);
            }
        });
        acc.total()
    }

    /// Exact sifting sum: total weight on `n` coprime to every prime
    /// below `z`.
    pub fn sift_exact(&self, z: u64) -> f64 {
        if z <= 2 {
            return self.total();
        }
        match &self.store {
            Store::Sparse(m) => {
                let mut acc = CompensatedSum::new();
                'entry: for (&n, &a) in m {
                    if a == 0.0 {
                        continue;
                    }
                    let mut hit = false;
                    arith::for_each_prime_in(2, (z - 1).min(n), |p| {
                        if !hit && n % p == 0 {
                            hit = true;
                        }
                    });
                    if hit {
                        continue 'entry;
                    }
                    acc.add(a);
                }
                acc.total()
            }
            _ => {
                const CHUNK: u64 = 1 << 22;
                let mut acc = CompensatedSum::new();
                let mut marked = vec![false; CHUNK as usize];
                let mut lo = self.n_min;
                while lo <= self.n_max {
                    let hi = lo.saturating_add(CHUNK - 1).min(self.n_max);
                    let len = (hi - lo + 1) as usize;
                    marked[..len].fill(false);
                    arith::for_each_prime_in(2, z - 1, |p| {
                        let mut m = lo.next_multiple_of(p);
                        while m <= hi {
                            marked[(m - lo) as usize] = true;
                            m += p;
                        }
                    });
                    for (i, &hit) in marked[..len].iter().enumerate() {
                        if !hit {
                            let a = self.weight_at(lo + i as u64);
                            if a != 0.0 {
                                acc.add(a);
                            }
                        }
                    }
                    lo = hi + 1;
                }
                acc.total()
            }
        }
    }

    fn support_entries(&self) -> Option<&BTreeMap<u64, f64>> {
        match &self.store {
            Store::Sparse(m) => Some(m),
            _ => None,
        }
    }
}

/// `lambda(p^e)` for the divisor convolution of the unit with `chi`.
fn lambda_prime_power(chi_p: i32, e: u32) -> u64 {
    match chi_p {
        1 => e as u64 + 1,
        0 => 1,
        _ => {
            if e % 2 == 0 {
                1
            } else {
                0
            }
        }
    }
}

/// Bulk table `lambda(n)` for `n <= x` by a smallest-prime-factor sieve.
fn lambda_table(chi: &RealCharacter, x: u64) -> Vec<u32> {
    let spf = SpfTable::new(x.max(2));
    let q = chi.modulus();
    let period = chi.period_values();
    let mut lam = vec![0u32; x as usize + 1];
    if x >= 1 {
        lam[1] = 1;
    }
    for n in 2..=x {
        let p = spf.factor_smallest(n);
        let mut m = n / p;
        let mut e = 1u32;
        while m % p == 0 {
            m /= p;
            e += 1;
        }
        let chi_p = period[(p % q) as usize];
        lam[n as usize] = lam[m as usize] * lambda_prime_power(chi_p, e) as u32;
    }
    lam
}

fn lambda_at(chi: &RealCharacter, n: u64) -> u64 {
    Factorization::of(n)
        .prime_powers
        .iter()
        .map(|&(p, e)| lambda_prime_power(chi.eval(p as i64), e))
        .product()
}

// ---------------------------------------------------------------------------
// Approximation model and remainders
// ---------------------------------------------------------------------------

/// The model `A_d = g(d) X + r_d` a sequence is measured against.
pub struct ApproximationModel {
    pub x_scale: f64,
    pub density: Density,
    /// Largest modulus with a defined remainder.
    pub d_max: u64,
}

/// One remainder row for audit output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RdRow {
    pub d: u64,
    pub a_d: f64,
    pub g_x: f64,
    pub r_d: f64,
    pub tau3: u64,
    pub ratio: f64,
}

/// Result of scanning remainders below a cutoff.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RemainderScan {
    pub y: u64,
    /// `R(y) = sum_{d < y} tau3(d) |r_d|` over squarefree `d`.
    pub big_r: f64,
    /// Per-modulus rows for `d <= keep_below` (the scan itself covers
    /// every squarefree `d < y`).
    pub rows: Vec<RdRow>,
}

/// Scans squarefree `d < y`, accumulating the weighted remainder sum and
/// keeping per-`d` rows up to `keep_below`.  The ratio column normalizes
/// `|r_d|` by `tau3(d) sqrt(x/d)` with `x` the end of the support.
pub fn remainders(
    seq: &SiftingSequence,
    model: &ApproximationModel,
    y: u64,
    keep_below: u64,
) -> Result<RemainderScan> {
    if y > model.d_max {
        return Err(Error::Precondition(format!(
            "remainders requested below y = {y}, but the model defines them only below {}",
            model.d_max
        )));
    }
    if y > REMAINDER_SCAN_BUDGET {
        return Err(Error::BudgetExceeded(format!(
            "remainder scan to y = {y} exceeds the budget {REMAINDER_SCAN_BUDGET}"
        )));
    }
    let x_end = seq.n_max() as f64;
    let mut big_r = CompensatedSum::new();
    let mut rows = Vec::new();
    if y > 1 {
        model.density.check_prime_range(y - 1)?;
        let gp = |p: u64| model.density.g_f64(p);
        for_each_squarefree(1, y - 1, &gp, &mut |d, gd, om, _| {
            let a_d = seq.congruence_sum(d);
            let g_x = gd * model.x_scale;
            let r_d = a_d - g_x;
            let tau3 = 3u64.pow(om);
            big_r.add(tau3 as f64 * r_d.abs());
            if d <= keep_below {
                let ratio = r_d.abs() / (tau3 as f64 * (x_end / d as f64).sqrt());
                rows.push(RdRow {
                    d,
                    a_d,
                    g_x,
                    r_d,
                    tau3,
                    ratio,
                });
            }
        });
    }
    Ok(RemainderScan {
        y,
        big_r: big_r.total(),
        rows,
    })
}

/// CSV rows `d, A_d, gX, r_d, tau3, ratio`.
pub fn export_rd_csv(rows: &[RdRow], out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "d,A_d,gX,r_d,tau3,ratio")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.17e},{:.17e},{:.17e},{},{:.17e}",
            r.d, r.a_d, r.g_x, r.r_d, r.tau3, r.ratio
        )?;
    }
    Ok(())
}

/// Memoized point access to `r_d = A_d - g(d) X`.
struct RdCache<'a> {
    seq: &'a SiftingSequence,
    model: &'a ApproximationModel,
    cache: HashMap<u64, f64>,
}

impl<'a> RdCache<'a> {
    fn new(seq: &'a SiftingSequence, model: &'a ApproximationModel) -> Self {
        RdCache {
            seq,
            model,
            cache: HashMap::new(),
        }
    }

    fn r(&mut self, d: u64) -> Result<f64> {
        if let Some(&v) = self.cache.get(&d) {
            return Ok(v);
        }
        let (g, _) = self.model.density.gh(d)?;
        let v = self.seq.congruence_sum(d) - g * self.model.x_scale;
        self.cache.insert(d, v);
        Ok(v)
    }
}

// ---------------------------------------------------------------------------
// The lower-bound sum
// ---------------------------------------------------------------------------

/// Direct evaluation of the lower-bound sum
/// `sum_n a_n (1 - #{p|n, p<z}) (sum_{d|n} rho_d)^2` over the support.
pub fn s_minus_direct(
    seq: &SiftingSequence,
    weights: &WeightSet,
    z: u64,
) -> Result<f64> {
    let delta = weights.delta();
    let mut acc = CompensatedSum::new();
    let mut eval = |n: u64, a: f64, primes: &[u64]| {
        if a == 0.0 {
            return;
        }
        let omega_z = primes.iter().filter(|&&p| p < z).count() as f64;
        let s = divisor_rho_sum(weights, primes, delta);
        acc.add(a * (1.0 - omega_z) * s * s);
    };
    match seq.support_entries() {
        Some(entries) => {
            for (&n, &a) in entries {
                if a == 0.0 {
                    continue;
                }
                let f = Factorization::of(n);
                let primes: Vec<u64> = f.prime_powers.iter().map(|&(p, _)| p).collect();
                eval(n, a, &primes);
            }
        }
        None => {
            if seq.n_max() > SPF_ORACLE_LIMIT {
                return Err(Error::BudgetExceeded(format!(
                    "direct lower-sum scan needs a factor table up to {}, over the {} limit",
                    seq.n_max(),
                    SPF_ORACLE_LIMIT
                )));
            }
            let spf = SpfTable::new(seq.n_max());
            let mut primes = Vec::new();
            for n in seq.n_min()..=seq.n_max() {
                let a = seq.weight_at(n);
                if a == 0.0 {
                    continue;
                }
                primes.clear();
                spf.distinct_primes(n, &mut primes);
                primes.reverse(); // ascending for the bounded divisor walk
                eval(n, a, &primes);
            }
        }
    }
    Ok(acc.total())
}

/// `sum rho_d` over squarefree divisors `d <= delta` built from `primes`
/// (ascending).  Depth-first over subsets, pruning on the level.
fn divisor_rho_sum(weights: &WeightSet, primes: &[u64], delta: u64) -> f64 {
    fn rec(weights: &WeightSet, primes: &[u64], from: usize, prod: u64, delta: u64) -> f64 {
        let mut s = weights.rho(prod);
        for i in from..primes.len() {
            match prod.checked_mul(primes[i]) {
                Some(np) if np <= delta => {
                    s += rec(weights, primes, i + 1, np, delta);
                }
                _ => break, // primes ascend, so later ones overshoot too
            }
        }
        s
    }
    rec(weights, primes, 0, 1, delta)
}

/// The split of the lower-bound sum into main term and remainder.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Decomposed {
    pub xw: f64,
    pub script_r: f64,
    /// Whether the remainder was assembled exactly from congruence sums
    /// (in range) or inferred as `direct - XW` (degraded).
    pub script_r_exact: bool,
    pub r_delta2: f64,
    pub r_zdelta2: f64,
    /// `R(delta^2) + 2 log(delta) R(z delta^2)`.
    pub bound_2_14: f64,
    /// Whether both scans reached their nominal cutoffs; capped scans
    /// leave the bound partial.
    pub bound_complete: bool,
    /// Direct evaluation, for the identity check (always computed).
    pub s_minus: f64,
}

/// Splits the lower-bound sum as `X W + script_r` and bounds the
/// remainder by `R(delta^2) + 2 log(delta) R(z delta^2)`.
///
/// The exact remainder assembles `r` at every least common multiple of
/// weight pairs and sifting primes, which is only attempted when
/// `z delta^2` stays under `EXACT_REMAINDER_BUDGET` and under the model's
/// `d_max`; otherwise the remainder is inferred from the direct sum and
/// flagged.
pub fn s_minus_decomposed(
    seq: &SiftingSequence,
    model: &ApproximationModel,
    weights: &WeightSet,
    z: u64,
) -> Result<Decomposed> {
    let delta = weights.delta();
    let x_w = model.x_scale * selberg::w_diag(&model.density, weights, z)?;
    let s_minus = s_minus_direct(seq, weights, z)?;

    let delta2 = delta.saturating_mul(delta);
    let z_delta2 = z.saturating_mul(delta2);
    let exact_feasible = z_delta2 <= EXACT_REMAINDER_BUDGET && z_delta2 <= model.d_max;

    let script_r;
    let script_r_exact;
    if exact_feasible {
        let mut cache = RdCache::new(seq, model);
        let mut sift_primes = Vec::new();
        if z > 2 {
            arith::for_each_prime_in(2, z - 1, |p| sift_primes.push(p));
        }
        let support: Vec<u64> = weights
            .support()
            .iter()
            .copied()
            .filter(|&d| weights.rho(d) != 0.0)
            .collect();
        let mut acc = CompensatedSum::new();
        for &d1 in &support {
            for &d2 in &support {
                let l = d1 / num_integer::gcd(d1, d2) * d2;
                let mut term = cache.r(l)?;
                for &p in &sift_primes {
                    let m = if l % p == 0 { l } else { l * p };
                    term -= cache.r(m)?;
                }
                acc.add(weights.rho(d1) * weights.rho(d2) * term);
            }
        }
        script_r = acc.total();
        script_r_exact = true;
    } else {
        script_r = s_minus - x_w;
        script_r_exact = false;
    }

    let y1 = delta2.min(model.d_max).min(REMAINDER_SCAN_BUDGET);
    let y2 = z_delta2.min(model.d_max).min(REMAINDER_SCAN_BUDGET);
    let bound_complete = y1 == delta2 && y2 == z_delta2;
    let scan_delta2 = remainders(seq, model, y1, 0)?;
    let scan_zdelta2 = remainders(seq, model, y2, 0)?;
    let bound = scan_delta2.big_r + 2.0 * ln_u64(delta) * scan_zdelta2.big_r;
    if script_r_exact && bound_complete && script_r.abs() > bound * (1.0 + 1e-9) + 1e-9 {
        return Err(Error::Precondition(format!(
            "remainder bound violated: |{script_r}| > {bound} (internal inconsistency)"
        )));
    }

    Ok(Decomposed {
        xw: x_w,
        script_r,
        script_r_exact,
        r_delta2: scan_delta2.big_r,
        r_zdelta2: scan_zdelta2.big_r,
        bound_2_14: bound,
        bound_complete,
        s_minus,
    })
}

// ---------------------------------------------------------------------------
// The character-driven sequence
// ---------------------------------------------------------------------------

/// The sieve-ready package for the divisor-convolution sequence in one
/// residue class: the sequence, its approximation model
/// (`X = 2 L(1,chi) x / q` with the character density), and a remainder
/// profile against the `tau3(d) sqrt(x/d)` envelope.
pub struct ExceptionalSetup {
    pub seq: SiftingSequence,
    pub model: ApproximationModel,
    pub chi_a: i32,
    /// Set when `chi(a) != 1`: the progression conclusion needs the
    /// residue split by the character.
    pub chi_a_warning: bool,
    pub rd_profile: RemainderScan,
    pub max_ratio: f64,
    pub l1_value: f64,
}

pub fn exceptional_sequence(
    q: u64,
    a: u64,
    x: u64,
    profile_d_max: u64,
) -> Result<ExceptionalSetup> {
    let chi = RealCharacter::for_modulus(q)?;
    if x < q {
        return Err(Error::InvalidParameter(format!(
            "need x >= q, got x={x}, q={q}"
        )));
    }
    let chi_a = chi.eval(a as i64);
    let seq = SiftingSequence::lambda(&chi, a, x)?;
    let l1_value = arith::l1(&chi, 1e-9)?;
    let x_scale = 2.0 * l1_value * x as f64 / q as f64;
    let density = Density::exceptional_from(chi.clone(), u64::MAX, crate::density::Mode::Float);
    let model = ApproximationModel {
        x_scale,
        density,
        d_max: x,
    };
    let rd_profile = remainders(&seq, &model, profile_d_max + 1, profile_d_max)?;
    let max_ratio = rd_profile
        .rows
        .iter()
        .fold(0.0f64, |m, row| m.max(row.ratio));
    Ok(ExceptionalSetup {
        seq,
        model,
        chi_a,
        chi_a_warning: chi_a != 1,
        rd_profile,
        max_ratio,
        l1_value,
    })
}

// ---------------------------------------------------------------------------
