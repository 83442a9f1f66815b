//! Auxiliary-variable updates for the contamination channel.
//!
//! For row `s` let `a = n_ss`, `b = n_{s,1-s}`, `N = a + b` and `h = α/2`.
//! Expanding `(r + (1-r) q*_ss)^a` binomially introduces a count `v ∈ 0..=a`
//! of concordant transitions; both pmfs below are over that count.

use crate::model::ContaminationModel;
use crate::special::{ln_beta_sf, log_add_exp, sample_log_weights, sample_truncated_beta};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use statrs::function::gamma::ln_gamma;

/// Unnormalized `ln h_s(v)` for `v = 0..=a`, used to integrate out `Q*`
/// when updating the concordance `r_s`:
///
/// `C(a,v)·B(a+h-v, b+h)·B(v+rα, N-v+rβ)·S(r* | v+rα, N-v+rβ)`
/// where `S` is the beta survival function.
pub fn concordance_log_weights(a: u64, b: u64, h: f64, r_alpha: f64, r_beta: f64, r_floor: f64) -> Vec<f64> {
    let n = (a + b) as f64;
    let af = a as f64;
    let mut out = Vec::with_capacity(a as usize + 1);
    // v = 0 anchor
    let mut lw = ln_gamma(af + h) + ln_gamma(b as f64 + h) - ln_gamma(n + 2.0 * h) + ln_gamma(r_alpha) + ln_gamma(n + r_beta)
        - ln_gamma(n + r_alpha + r_beta);
    let mut log_surv = ln_beta_sf(r_alpha, n + r_beta, r_floor);
    // log term(v) in S(v+1) = S(v) + term(v), carried by its ratio
    let x = r_floor;
    let log_odds_x = (x / (1.0 - x)).ln();
    let mut log_term = ln_gamma(n + r_alpha + r_beta) - ln_gamma(r_alpha + 1.0) - ln_gamma(n + r_beta)
        + r_alpha * x.ln()
        + (n + r_beta - 1.0) * (1.0 - x).ln();
    out.push(lw + log_surv);
    for v in 0..a {
        let vf = v as f64;
        let a1 = vf + r_alpha;
        let b1 = n - vf + r_beta;
        lw += ((af - vf) * (n + 2.0 * h - vf - 1.0) * a1 / ((vf + 1.0) * (af + h - vf - 1.0) * (b1 - 1.0))).ln();
        log_surv = log_add_exp(log_surv, log_term).min(0.0);
        log_term += log_odds_x + ((b1 - 1.0) / (a1 + 1.0)).ln();
        out.push(lw + log_surv);
    }
    out
}

/// Unnormalized `ln l_s(v) = ln[C(a,v)·B(a+h-v, b+h)·ρ^v]` with `ρ = r/(1-r)`,
/// used to update `q*_s` given `r_s`.
pub fn qstar_log_weights(a: u64, b: u64, h: f64, r: f64) -> Vec<f64> {
    let n = (a + b) as f64;
    let af = a as f64;
    let mut out = Vec::with_capacity(a as usize + 1);
    if r >= 1.0 {
        // ρ = ∞: all mass on v = a
        out.resize(a as usize, f64::NEG_INFINITY);
        out.push(0.0);
        return out;
    }
    let log_rho = r.ln() - (1.0 - r).ln();
    let mut lw = ln_gamma(af + h) + ln_gamma(b as f64 + h) - ln_gamma(n + 2.0 * h);
    out.push(lw);
    for v in 0..a {
        let vf = v as f64;
        lw += ((af - vf) * (n + 2.0 * h - vf - 1.0) / ((vf + 1.0) * (af + h - vf - 1.0))).ln() + log_rho;
        out.push(lw);
    }
    out
}

fn row_counts(n: &crate::model::TransitionCounts, s: usize) -> (u64, u64) {
    (n.get(s, s), n.get(s, 1 - s))
}

fn draw_count<R: Rng + ?Sized>(rng: &mut R, log_w: &[f64], what: &str) -> u64 {
    if log_w.iter().all(|w| !w.is_finite()) {
        log::warn!("{what}: auxiliary pmf degenerate; using the most concordant atom");
        return (log_w.len() - 1) as u64;
    }
    sample_log_weights(rng, log_w) as u64
}

/// Redraws `r_0, r_1` with `Q*` integrated out; returns the auxiliary counts.
pub fn update_concordance<R: Rng + ?Sized>(
    rng: &mut R,
    model: &mut ContaminationModel,
    counts: &crate::model::TransitionCounts,
) -> [u64; 2] {
    let h = model.alpha / 2.0;
    let mut aux = [0u64; 2];
    for s in 0..2 {
        let (a, b) = row_counts(counts, s);
        let w = concordance_log_weights(a, b, h, model.r_alpha, model.r_beta, model.r_floor);
        let v = draw_count(rng, &w, "concordance");
        let total = (a + b) as f64;
        model.r[s] = sample_truncated_beta(rng, v as f64 + model.r_alpha, total - v as f64 + model.r_beta, model.r_floor);
        aux[s] = v;
    }
    aux
}

/// Redraws both rows of `Q*` given `r`; returns the auxiliary counts.
pub fn update_qstar<R: Rng + ?Sized>(rng: &mut R, model: &mut ContaminationModel, counts: &crate::model::TransitionCounts) -> [u64; 2] {
    let h = model.alpha / 2.0;
    let mut aux = [0u64; 2];
    for s in 0..2 {
        let (a, b) = row_counts(counts, s);
        let w = qstar_log_weights(a, b, h, model.r[s]);
        let u = draw_count(rng, &w, "q*");
        let diag = (a - u) as f64 + h;
        let off = b as f64 + h;
        assert!(diag > 0.0 && off > 0.0);
        let q_ss = Beta::new(diag, off).expect("positive shapes").sample(rng);
        model.q_star[s][s] = q_ss;
        model.q_star[s][1 - s] = 1.0 - q_ss;
        aux[s] = u;
    }
    aux
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::{ln_beta, ln_choose, log_sum_exp};

    fn direct_h(a: u64, b: u64, h: f64, ra: f64, rb: f64, x: f64) -> Vec<f64> {
        let n = (a + b) as f64;
        (0..=a)
            .map(|v| {
                let vf = v as f64;
                ln_choose(a, v)
                    + ln_beta(a as f64 + h - vf, b as f64 + h)
                    + ln_beta(vf + ra, n - vf + rb)
                    + ln_beta_sf(vf + ra, n - vf + rb, x)
            })
            .collect()
    }

    fn direct_l(a: u64, b: u64, h: f64, r: f64) -> Vec<f64> {
        (0..=a).map(|v| ln_choose(a, v) + ln_beta((a - v) as f64 + h, b as f64 + h) + v as f64 * (r / (1.0 - r)).ln()).collect()
    }

    fn normalized(w: &[f64]) -> Vec<f64> {
        let z = log_sum_exp(w);
        w.iter().map(|x| (x - z).exp()).collect()
    }

    #[test]
    fn recurrences_match_direct_evaluation() {
        for &(a, b) in &[(0u64, 0u64), (0, 5), (1, 0), (7, 3), (40, 2), (300, 25), (2000, 150)] {
            for &(h, ra, rb) in &[(0.5, 1.0, 1.0), (1.5, 2.0, 0.7)] {
                let fast = concordance_log_weights(a, b, h, ra, rb, 0.85);
                let slow = direct_h(a, b, h, ra, rb, 0.85);
                let (pf, ps) = (normalized(&fast), normalized(&slow));
                for (x, y) in pf.iter().zip(&ps) {
                    assert!((x - y).abs() < 1e-9, "h a={a} b={b}: {x} vs {y}");
                }
                let fast = qstar_log_weights(a, b, h, 0.93);
                let slow = direct_l(a, b, h, 0.93);
                for (x, y) in normalized(&fast).iter().zip(&normalized(&slow)) {
                    assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn pmfs_normalize_and_singleton_support() {
        let w = normalized(&concordance_log_weights(12, 4, 0.5, 1.0, 1.0, 0.85));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let w = normalized(&qstar_log_weights(12, 4, 0.5, 0.9));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(concordance_log_weights(0, 9, 0.5, 1.0, 1.0, 0.85).len(), 1);
        assert_eq!(qstar_log_weights(0, 9, 0.5, 0.9).len(), 1);
    }

    #[test]
    fn qstar_with_no_diagonal_counts_is_prior_shifted() {
        // a = 0 forces U = 0, so q*_ss ~ Beta(h, m + h).
        let mut rng = crate::rng::substream(5, "test", 0, "qstar");
        let mut model = ContaminationModel::default();
        let counts = crate::model::TransitionCounts { n00: 0, n01: 6, n10: 0, n11: 0 };
        let reps = 40_000;
        let mut mean = 0.0;
        for _ in 0..reps {
            update_qstar(&mut rng, &mut model, &counts);
            mean += model.q_star[0][0];
        }
        mean /= reps as f64;
        let (a, b) = (0.5, 6.5);
        let want = a / (a + b);
        let sd = (a * b / ((a + b) * (a + b) * (a + b + 1.0)) / reps as f64).sqrt();
        assert!((mean - want).abs() < 4.0 * sd, "{mean} vs {want}");
    }

    #[test]
    fn concordance_draws_stay_above_floor() {
        let mut rng = crate::rng::substream(6, "test", 0, "conc");
        let mut model = ContaminationModel::default();
        let counts = crate::model::TransitionCounts { n00: 50, n01: 30, n10: 20, n11: 60 };
        for _ in 0..2000 {
            update_concordance(&mut rng, &mut model, &counts);
            assert!(model.r[0] > model.r_floor && model.r[1] > model.r_floor);
            assert!(model.r[0] <= 1.0 && model.r[1] <= 1.0);
        }
    }
}
