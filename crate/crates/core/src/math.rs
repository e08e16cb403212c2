//! Scalar special functions used by the variational updates and the
//! evidence lower bound.

/// Asymptotic region boundary for both series below. Above this the
/// Bernoulli-number tails are below 1e-16 relative.
const ASYMPTOTIC_MIN: f64 = 10.0;

/// Digamma function Ψ(x) = d/dx ln Γ(x).
///
/// Arguments below the asymptotic region are raised with the recurrence
/// Ψ(x) = Ψ(x+1) − 1/x, then the standard asymptotic series is applied.
/// Relative accuracy is better than 1e-12 on [1e-3, 1e6]. Returns NaN
/// outside the domain (x ≤ 0 or non-finite x).
pub fn digamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut shift = 0.0;
    let mut x = x;
    while x < ASYMPTOTIC_MIN {
        shift -= 1.0 / x;
        x += 1.0;
    }
    // Ψ(x) ~ ln x − 1/(2x) − Σ_{n≥1} B_{2n} / (2n x^{2n})
    let w = 1.0 / (x * x);
    let series = w
        * (1.0 / 12.0
            - w * (1.0 / 120.0
                - w * (1.0 / 252.0
                    - w * (1.0 / 240.0
                        - w * (1.0 / 132.0 - w * (691.0 / 32760.0 - w / 12.0))))));
    shift + x.ln() - 0.5 / x - series
}

/// Natural log of the gamma function for x > 0.
///
/// Same scheme as [`digamma`]: recurrence ln Γ(x) = ln Γ(x+1) − ln x into
/// the Stirling series region. Returns NaN outside the domain.
pub fn ln_gamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut shift = 0.0;
    let mut x = x;
    while x < ASYMPTOTIC_MIN {
        shift -= x.ln();
        x += 1.0;
    }
    const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_8;
    // ln Γ(x) ~ (x−½)ln x − x + ½ln 2π + Σ_{n≥1} B_{2n} / (2n(2n−1) x^{2n−1})
    let w = 1.0 / (x * x);
    let series = (1.0 / 12.0
        - w * (1.0 / 360.0
            - w * (1.0 / 1260.0
                - w * (1.0 / 1680.0 - w * (1.0 / 1188.0 - w * 691.0 / 360360.0)))))
        / x;
    shift + (x - 0.5) * x.ln() - x + HALF_LN_TWO_PI + series
}

/// ln B(a, b) = ln Γ(a) + ln Γ(b) − ln Γ(a+b).
pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Normalizes log-space weights in place into probabilities, using
/// max-subtraction. Returns false when the weights cannot be normalized
/// (empty slice or non-finite values).
pub fn log_normalize(log_w: &mut [f64]) -> bool {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return false;
    }
    let mut sum = 0.0;
    for w in log_w.iter_mut() {
        *w = (*w - max).exp();
        sum += *w;
    }
    if !(sum > 0.0) || !sum.is_finite() {
        return false;
    }
    for w in log_w.iter_mut() {
        *w /= sum;
    }
    true
}
