use serde::{Deserialize, Serialize};

/// `P(X ≥ k)` for `X ~ Binomial(n, 1/2)`.
pub fn binomial_upper_tail(k: usize, n: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    // Binomial coefficients are exact in f64 for the seed counts used here.
    let mut c = 1.0;
    let mut total = 0.0;
    for i in 0..=n {
        if i >= k {
            total += c;
        }
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    (total / 2f64.powi(n as i32)).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub successes: usize,
    pub n: usize,
    pub p_value: f64,
}

impl SignTest {
    pub fn passes(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// One-sided sign test that `a` tends to be below `b`. With `ties_succeed`,
/// equal pairs count for the hypothesis (for `a ≤ b`); otherwise they are
/// dropped.
pub fn sign_test(a: &[f64], b: &[f64], ties_succeed: bool) -> SignTest {
    let mut successes = 0;
    let mut n = 0;
    for (x, y) in a.iter().zip(b) {
        if x < y || (ties_succeed && x == y) {
            successes += 1;
            n += 1;
        } else if x > y {
            n += 1;
        }
    }
    SignTest { successes, n, p_value: binomial_upper_tail(successes, n) }
}
