//! Small numeric helpers used across the crate.

/// Neumaier-compensated accumulator.  All the long floating-point sums in
/// this crate run through it so that results are reproducible and the
/// accumulated rounding stays near one ulp of the true sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn total(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Floor of the integer square root.
pub fn isqrt(n: u64) -> u64 {
    if n == 0 {
        return 0;
    }
    let mut r = (n as f64).sqrt() as u64;
    while r.checked_mul(r).map_or(true, |rr| rr > n) {
        r -= 1;
    }
    while (r + 1).checked_mul(r + 1).map_or(false, |rr| rr <= n) {
        r += 1;
    }
    r
}

/// `ln(n)` for a positive integer.
#[inline]
pub fn ln_u64(n: u64) -> f64 {
    (n as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isqrt_exact_boundaries() {
        for n in 0..2000u64 {
            let r = isqrt(n);
            assert!(r * r <= n && (r + 1) * (r + 1) > n, "n={n} r={r}");
        }
        assert_eq!(isqrt(u64::MAX), (1u64 << 32) - 1);
        assert_eq!(isqrt(10_u64.pow(12)), 10_u64.pow(6));
    }

    #[test]
    fn compensated_sum_beats_naive() {
        // 1 + 1e-16 added 1e6 times loses the small parts naively.
        let mut c = CompensatedSum::new();
        c.add(1.0);
        for _ in 0..1_000_000 {
            c.add(1e-16);
        }
        let exact = 1.0 + 1e-10;
        assert!((c.total() - exact).abs() < 1e-15);
    }
}
