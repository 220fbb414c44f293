/// Logistic sigmoid `1 / (1 + exp(-a))`, computed without overflow for
/// large `|a|`.
pub fn sigm(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Derivative of the sigmoid, `sigm(a) * (1 - sigm(a))`.
pub fn sigm_deriv(a: f64) -> f64 {
    let s = sigm(a);
    s * (1.0 - s)
}

/// `log(1 + exp(a))`, the antiderivative of the sigmoid. Stable for large
/// positive and negative `a`.
pub fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

/// Inverse sigmoid. Requires `p` strictly inside (0, 1).
pub fn logit(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0, "logit domain is (0,1), got {p}");
    (p / (1.0 - p)).ln()
}
