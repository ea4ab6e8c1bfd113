//! Small numeric helpers shared across modules.

/// log(e^a + e^b) without overflow.
pub(crate) fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a.is_infinite() && a < 0.0 {
        return b;
    }
    if b.is_infinite() && b < 0.0 {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// log(1 + e^x), the softplus.
pub(crate) fn log1p_exp(x: f64) -> f64 {
    if x > 33.0 {
        x
    } else if x < -33.0 {
        0.0
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function with saturation guards; never returns exactly 0 or 1.
pub(crate) fn logistic(x: f64) -> f64 {
    let x = x.clamp(-700.0, 700.0);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// splitmix64 step: mixes a 64-bit state into a well-distributed word.
///
/// This is the only primitive behind the keyed random streams used by the
/// synthetic-data generator; it is stated here so that the streams can be
/// reproduced outside this crate from (seed, tags...) alone.
pub(crate) fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
