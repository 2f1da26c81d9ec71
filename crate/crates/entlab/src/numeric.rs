//! Small numerical utilities shared across the crate.

/// Log of the sum of exponentials, evaluated with max subtraction.
///
/// Returns `-inf` for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// Log-softmax of a logit row (natural log).
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let z = logsumexp(logits);
    logits.iter().map(|x| x - z).collect()
}

/// Softmax of a logit row, computed with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// splitmix64 step; used to derive independent sub-seeds from one run seed.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed with up to two stream identifiers (step, lane).
pub fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    splitmix64(base ^ splitmix64(a.wrapping_mul(0x9e37_79b9).wrapping_add(b)))
}

/// Central finite differences of a scalar function of the logit table,
/// evaluated for every action of the listed states:
/// `(f(z + h e) - f(z - h e)) / 2h`.
///
/// This is the numerical oracle that analytic gradients are checked against;
/// it never calls any analytic-gradient path.
pub fn finite_diff_logit_grad(
    policy: &crate::policy::PolicyTable,
    states: &[usize],
    h: f64,
    f: impl Fn(&crate::policy::PolicyTable) -> f64,
) -> Vec<(usize, Vec<f64>)> {
    let mut out = Vec::with_capacity(states.len());
    for &s in states {
        let mut row = Vec::with_capacity(policy.num_actions());
        for a in 0..policy.num_actions() {
            let z = policy.logit(s, a);
            let mut plus = policy.clone();
            plus.set_logit(s, a, z + h);
            let mut minus = policy.clone();
            minus.set_logit(s, a, z - h);
            row.push((f(&plus) - f(&minus)) / (2.0 * h));
        }
        out.push((s, row));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn logsumexp_matches_naive_for_moderate_inputs() {
        let xs: [f64; 3] = [0.3, -1.2, 2.0];
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert_abs_diff_eq!(logsumexp(&xs), naive, epsilon = 1e-14);
    }

    #[test]
    fn logsumexp_stable_for_large_inputs() {
        let xs = [1000.0, 1000.0];
        assert_abs_diff_eq!(logsumexp(&xs), 1000.0 + 2.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn softmax_handles_large_logits() {
        let p = softmax(&[1000.0, 1000.0]);
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn mix_seed_changes_with_each_argument() {
        let s = mix_seed(7, 1, 2);
        assert_ne!(s, mix_seed(8, 1, 2));
        assert_ne!(s, mix_seed(7, 2, 2));
        assert_ne!(s, mix_seed(7, 1, 3));
    }
}
