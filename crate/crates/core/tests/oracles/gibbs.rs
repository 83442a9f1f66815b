//! Brute-force and Monte Carlo oracles for the clustering sampler. Each
//! public check panics on failure; the test targets call them directly.

use bacon_core::gibbs::{
    sweep, update_allocation, update_concordance, update_qstar, ClusteringChainState, DiscountQuadrature, SweepSchedule,
};
use bacon_core::matrix::BinaryDesignMatrix;
use bacon_core::model::{AllocationState, ContaminationModel, LatentMatrix, MassPrior, PdpHyper, TransitionCounts};
use bacon_core::rng::substream;
use bacon_core::special::{gauss_legendre_unit, log_sum_exp, sample_truncated_beta};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Log joint density of (c, V, X) given p*, Q and PDP parameters, evaluated
/// with dense loops and sequential seating (no shared code with the sampler).
fn log_joint(labels: &[usize], v: &[Vec<u8>], x: &[Vec<u8>], p_star: f64, q: &[[f64; 2]; 2], m: f64, d: f64) -> f64 {
    let mut lp = 0.0;
    let mut sizes: Vec<f64> = Vec::new();
    for (j, &l) in labels.iter().enumerate() {
        if j > 0 {
            let w = if l < sizes.len() { sizes[l] - d } else { m + sizes.len() as f64 * d };
            lp += (w / (m + j as f64)).ln();
        }
        if l == sizes.len() {
            sizes.push(0.0);
        }
        sizes[l] += 1.0;
    }
    for row in v {
        for &b in row {
            lp += if b == 1 { p_star.ln() } else { (1.0 - p_star).ln() };
        }
    }
    for (i, xrow) in x.iter().enumerate() {
        for (j, &xv) in xrow.iter().enumerate() {
            lp += q[v[i][labels[j]] as usize][xv as usize].ln();
        }
    }
    lp
}

fn chi2_pvalue(observed: &[u64], expected_p: &[f64], total: u64) -> f64 {
    // pool cells with small expectation into one
    let mut stat = 0.0;
    let mut cells = 0;
    let (mut pool_o, mut pool_e) = (0.0, 0.0);
    for (&o, &p) in observed.iter().zip(expected_p) {
        let e = p * total as f64;
        if e < 5.0 {
            pool_o += o as f64;
            pool_e += e;
        } else {
            stat += (o as f64 - e).powi(2) / e;
            cells += 1;
        }
    }
    if pool_e > 0.0 {
        stat += (pool_o - pool_e).powi(2) / pool_e.max(1e-12);
        cells += 1;
    }
    1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat)
}

pub fn allocation_conditional_matches_enumeration() {
    // 20 repeated χ² tests per covariate at level 0.001. With fixed seeds a
    // correct sampler still fails each with probability 0.001; three or more
    // of 40 has probability about 1e-5.
    let failures = allocation_conditional_check(20, 20_000);
    assert!(failures <= 2, "{failures} chi-square failures out of 40");
}

pub fn allocation_conditional_high_power() {
    assert_eq!(allocation_conditional_check(1, 1_000_000), 0);
}

fn allocation_conditional_check(repeats: u64, draws: u64) -> usize {
    let xr: Vec<Vec<u8>> = vec![vec![1, 1, 0, 1], vec![0, 1, 0, 0], vec![1, 0, 1, 1]];
    let x = BinaryDesignMatrix::from_rows(&xr).unwrap();
    let n = 3;
    let contam = ContaminationModel { r: [0.9, 0.88], q_star: [[0.3, 0.7], [0.6, 0.4]], ..Default::default() };
    let q = contam.derive_q();
    let hyper = PdpHyper { mass: 1.3, discount: 0.35, mass_prior: MassPrior::Fixed };
    let p_star = 0.4;
    let start_labels = [0usize, 0, 1, 2];
    let start_v: Vec<Vec<u8>> = vec![vec![1, 0, 1], vec![0, 0, 1], vec![1, 1, 0]];
    let mut failures = 0;
    for &j in &[0usize, 3] {
        // Enumerate outcomes after detaching j.
        let mut others = start_labels.to_vec();
        let mut cols: Vec<Vec<u8>> = (0..3).map(|k| (0..n).map(|i| start_v[i][k]).collect()).collect();
        let solo = others.iter().filter(|&&l| l == others[j]).count() == 1;
        if solo {
            let k = others[j];
            cols.remove(k);
        }
        let q_minus = cols.len();
        let mut outcomes: Vec<(usize, Vec<u8>)> = (0..q_minus).map(|k| (k, vec![])).collect();
        for bits in 0..(1u8 << n) {
            outcomes.push((q_minus, (0..n).map(|i| (bits >> i) & 1).collect()));
        }
        let lj: Vec<f64> = outcomes
            .iter()
            .map(|(k, newcol)| {
                // relabel: others keep their cluster index (solo j's cluster is last)
                others[j] = *k;
                let mut all_cols = cols.clone();
                if *k == q_minus {
                    all_cols.push(newcol.clone());
                }
                let canon = AllocationState::from_labels(&others);
                // map canonical labels to column order
                let mut map = vec![usize::MAX; all_cols.len()];
                for (jj, &l) in others.iter().enumerate() {
                    map[l] = canon.label(jj);
                }
                let mut vrows = vec![vec![0u8; all_cols.len()]; n];
                for (k2, col) in all_cols.iter().enumerate() {
                    for i in 0..n {
                        vrows[i][map[k2]] = col[i];
                    }
                }
                log_joint(canon.labels(), &vrows, &xr, p_star, &q, hyper.mass, hyper.discount)
            })
            .collect();
        let z = log_sum_exp(&lj);
        let probs: Vec<f64> = lj.iter().map(|l| (l - z).exp()).collect();

        for rep in 0..repeats {
            let mut rng = substream(100 + rep, "oracle", j as u64, "alloc");
            let mut counts = vec![0u64; outcomes.len()];
            for _ in 0..draws {
                let alloc = AllocationState::from_labels(&start_labels);
                let mut latent = LatentMatrix::new(n, 0, p_star, 1.0);
                for k in 0..3 {
                    let mut w = 0u64;
                    for i in 0..n {
                        w |= (start_v[i][k] as u64) << i;
                    }
                    latent.push_column(&[w]);
                }
                let mut st = ClusteringChainState { alloc, latent, contam, hyper, sweep_index: 0 };
                update_allocation(&mut rng, j, &mut st, &x);
                let k = st.alloc.label(j);
                let idx = if k < q_minus {
                    k
                } else {
                    let bits = st.latent.column(k)[0] as usize;
                    q_minus + bits
                };
                counts[idx] += 1;
            }
            let pv = chi2_pvalue(&counts, &probs, draws);
            if pv <= 0.001 {
                failures += 1;
            }
        }
    }
    failures
}

/// Batch-means standard error of a correlated series.
fn batch_se(xs: &[f64]) -> f64 {
    let b = 50;
    let len = xs.len() / b;
    let means: Vec<f64> = (0..b).map(|i| xs[i * len..(i + 1) * len].iter().sum::<f64>() / len as f64).collect();
    let m = means.iter().sum::<f64>() / b as f64;
    (means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / ((b - 1) * b) as f64).sqrt()
}

fn iid_se(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / ((xs.len() - 1) * xs.len()) as f64).sqrt()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

struct Params {
    alloc: AllocationState,
    latent: LatentMatrix,
    contam: ContaminationModel,
    hyper: PdpHyper,
}

fn draw_prior<R: Rng>(rng: &mut R, n: usize, p: usize, base: &ContaminationModel, mass: f64) -> Params {
    let d = if rng.random::<bool>() { 0.0 } else { rng.random::<f64>() };
    let alloc = bacon_core::model::sample_pdp_partition(rng, p, mass, d);
    let p_star: f64 = Beta::new(0.5f64, 0.5).unwrap().sample(rng);
    let p_star = p_star.clamp(1e-300, 1.0 - 1e-16);
    let mut latent = LatentMatrix::new(n, alloc.q(), p_star, 1.0);
    for k in 0..alloc.q() {
        for i in 0..n {
            latent.set(i, k, rng.random::<f64>() < p_star);
        }
    }
    let mut contam = *base;
    let h = base.alpha / 2.0;
    for s in 0..2 {
        contam.r[s] = sample_truncated_beta(rng, base.r_alpha, base.r_beta, base.r_floor);
        let t = Beta::new(h, h).unwrap().sample(rng);
        contam.q_star[s] = [t, 1.0 - t];
    }
    Params { alloc, latent, contam, hyper: PdpHyper { mass, discount: d, mass_prior: MassPrior::Fixed } }
}

fn draw_data<R: Rng>(
    rng: &mut R,
    n: usize,
    p: usize,
    alloc: &AllocationState,
    latent: &LatentMatrix,
    contam: &ContaminationModel,
) -> BinaryDesignMatrix {
    let q = contam.derive_q();
    BinaryDesignMatrix::from_fn(n, p, |i, j| {
        let v = usize::from(latent.get(i, alloc.label(j)));
        rng.random::<f64>() < q[v][1]
    })
}

pub fn successive_conditional_joint_distribution() {
    let (n, p, mass) = (4, 5, 1.0);
    let base = ContaminationModel::default();
    let draws = 100_000;
    let stats =
        |par: &Params| -> [f64; 5] { [par.alloc.q() as f64, par.hyper.discount, par.latent.p_star, par.contam.r[0], par.contam.r[1]] };
    // (a) forward simulation from the prior
    let mut rng = substream(7, "geweke", 0, "forward");
    let mut forward: Vec<Vec<f64>> = (0..5).map(|_| Vec::with_capacity(draws)).collect();
    for _ in 0..draws {
        let par = draw_prior(&mut rng, n, p, &base, mass);
        for (k, v) in stats(&par).iter().enumerate() {
            forward[k].push(*v);
        }
    }
    // (b) Gibbs sweep alternating with fresh data given parameters
    let mut rng = substream(7, "geweke", 0, "chain");
    let par = draw_prior(&mut rng, n, p, &base, mass);
    let mut state = ClusteringChainState { alloc: par.alloc, latent: par.latent, contam: par.contam, hyper: par.hyper, sweep_index: 0 };
    let schedule = SweepSchedule::default();
    let quad = DiscountQuadrature::new(5);
    let mut buf = Vec::new();
    let mut chain: Vec<Vec<f64>> = (0..5).map(|_| Vec::with_capacity(draws)).collect();
    for _ in 0..draws {
        let x = draw_data(&mut rng, n, p, &state.alloc, &state.latent, &state.contam);
        sweep(&mut rng, &mut state, &x, &schedule, &quad, &mut buf);
        let s = [state.alloc.q() as f64, state.hyper.discount, state.latent.p_star, state.contam.r[0], state.contam.r[1]];
        for (k, v) in s.iter().enumerate() {
            chain[k].push(*v);
        }
    }
    let names = ["q", "d", "p_star", "r0", "r1"];
    for k in 0..5 {
        for power in [1, 2] {
            let f: Vec<f64> = forward[k].iter().map(|v| v.powi(power)).collect();
            let c: Vec<f64> = chain[k].iter().map(|v| v.powi(power)).collect();
            let se = (iid_se(&f).powi(2) + batch_se(&c).powi(2)).sqrt();
            let diff = mean(&f) - mean(&c);
            assert!(diff.abs() < 4.0 * se, "{} moment {power}: forward {} chain {} se {se}", names[k], mean(&f), mean(&c));
        }
    }
}

/// `[X_s | r]` for one channel row with `Q*` integrated out by quadrature
/// in the angle `t = sin²θ` (α = 1, so the Dir(½,½) density becomes uniform in θ).
fn row_evidence_angle(a: u64, b: u64, r: f64, nodes: &[f64], weights: &[f64]) -> f64 {
    let half_pi = std::f64::consts::FRAC_PI_2;
    let mut acc = 0.0;
    for (u, w) in nodes.iter().zip(weights) {
        let t = (u * half_pi).sin().powi(2);
        acc += w * half_pi * 2.0 / std::f64::consts::PI * (r + (1.0 - r) * t).powi(a as i32) * ((1.0 - r) * (1.0 - t)).powi(b as i32);
    }
    acc
}

pub fn concordance_posterior_matches_importance_sampling() {
    // n = 3, p = 3; allocation and latent vectors integrated exactly.
    let xr: Vec<Vec<u8>> = vec![vec![1, 1, 0], vec![0, 1, 0], vec![1, 1, 1]];
    let x = BinaryDesignMatrix::from_rows(&xr).unwrap();
    let (n, p, mass) = (3usize, 3usize, 1.0);
    let base = ContaminationModel::default();
    let (gl_d, gl_dw) = gauss_legendre_unit(12);
    let (gl_t, gl_tw) = gauss_legendre_unit(60);

    // Enumerate (partition, V): weight = P(c) P(V) and transition counts.
    let partitions: Vec<Vec<usize>> = vec![vec![0, 0, 0], vec![0, 0, 1], vec![0, 1, 0], vec![0, 1, 1], vec![0, 1, 2]];
    let mut configs: Vec<(f64, TransitionCounts)> = Vec::new();
    for labels in &partitions {
        let st = AllocationState::from_labels(labels);
        let q = st.q();
        let eppf = |d: f64| bacon_core::model::log_eppf(&st, &PdpHyper { mass, discount: d, mass_prior: MassPrior::Fixed }).exp();
        let prior_c = 0.5 * eppf(0.0) + 0.5 * gl_d.iter().zip(&gl_dw).map(|(d, w)| w * eppf(*d)).sum::<f64>();
        for bits in 0..(1u32 << (n * q)) {
            let ones = bits.count_ones() as f64;
            let nq = (n * q) as f64;
            // p* integrated against Beta(½,½)
            let pv = bacon_core::special::ln_beta(0.5 + ones, 0.5 + nq - ones).exp() / std::f64::consts::PI;
            let mut c = TransitionCounts::default();
            for i in 0..n {
                for j in 0..p {
                    let v = (bits >> (labels[j] * n + i)) & 1;
                    match (v, xr[i][j]) {
                        (0, 0) => c.n00 += 1,
                        (0, _) => c.n01 += 1,
                        (_, 0) => c.n10 += 1,
                        _ => c.n11 += 1,
                    }
                }
            }
            configs.push((prior_c * pv, c));
        }
    }

    // Aggregate configurations by count table, then cache row evidence per draw.
    let mut groups: std::collections::BTreeMap<(u64, u64, u64, u64), f64> = Default::default();
    for (w, c) in &configs {
        *groups.entry((c.n00, c.n01, c.n10, c.n11)).or_default() += w;
    }
    let distinct = |f: &dyn Fn(&(u64, u64, u64, u64)) -> (u64, u64)| {
        let mut v: Vec<(u64, u64)> = groups.keys().map(f).collect();
        v.sort();
        v.dedup();
        v
    };
    let rows0 = distinct(&|k| (k.0, k.1));
    let rows1 = distinct(&|k| (k.3, k.2));
    let table: Vec<(usize, usize, f64)> =
        groups.iter().map(|(k, w)| (rows0.binary_search(&(k.0, k.1)).unwrap(), rows1.binary_search(&(k.3, k.2)).unwrap(), *w)).collect();

    // Importance sampling with the truncated prior as proposal.
    let mut rng = substream(21, "oracle", 0, "is");
    let m = 50_000;
    let (mut sw, mut s0, mut s1) = (0.0, 0.0, 0.0);
    let mut ws = Vec::with_capacity(m);
    let mut r0s = Vec::with_capacity(m);
    let mut r1s = Vec::with_capacity(m);
    let mut e0 = vec![0.0; rows0.len()];
    let mut e1 = vec![0.0; rows1.len()];
    for _ in 0..m {
        let r0 = sample_truncated_beta(&mut rng, 1.0, 1.0, base.r_floor);
        let r1 = sample_truncated_beta(&mut rng, 1.0, 1.0, base.r_floor);
        for (e, &(a, b)) in e0.iter_mut().zip(&rows0) {
            *e = row_evidence_angle(a, b, r0, &gl_t, &gl_tw);
        }
        for (e, &(a, b)) in e1.iter_mut().zip(&rows1) {
            *e = row_evidence_angle(a, b, r1, &gl_t, &gl_tw);
        }
        let w: f64 = table.iter().map(|&(i0, i1, pc)| pc * e0[i0] * e1[i1]).sum();
        sw += w;
        s0 += w * r0;
        s1 += w * r1;
        ws.push(w);
        r0s.push(r0);
        r1s.push(r1);
    }
    let is_mean = [s0 / sw, s1 / sw];
    let is_se = |rs: &[f64], mu: f64| {
        let num: f64 = ws.iter().zip(rs).map(|(w, r)| (w * (r - mu)).powi(2)).sum();
        num.sqrt() / sw
    };
    let is_ses = [is_se(&r0s, is_mean[0]), is_se(&r1s, is_mean[1])];

    // Full Gibbs chain (mass fixed).
    let mut rng = substream(21, "oracle", 0, "chain");
    let alloc = AllocationState::singletons(p);
    let latent = LatentMatrix::new(n, p, 0.5, 1.0);
    let mut state = ClusteringChainState { alloc, latent, contam: base, hyper: PdpHyper::new(mass, 0.25).unwrap(), sweep_index: 0 };
    let schedule = SweepSchedule::default();
    let quad = DiscountQuadrature::new(5);
    let mut buf = Vec::new();
    for _ in 0..2_000 {
        sweep(&mut rng, &mut state, &x, &schedule, &quad, &mut buf);
    }
    let sweeps = 200_000;
    let mut tr: [Vec<f64>; 2] = [Vec::with_capacity(sweeps), Vec::with_capacity(sweeps)];
    for _ in 0..sweeps {
        sweep(&mut rng, &mut state, &x, &schedule, &quad, &mut buf);
        tr[0].push(state.contam.r[0]);
        tr[1].push(state.contam.r[1]);
    }
    for s in 0..2 {
        let cm = mean(&tr[s]);
        let se = (batch_se(&tr[s]).powi(2) + is_ses[s].powi(2)).sqrt();
        assert!((cm - is_mean[s]).abs() < 3.0 * se, "r{s}: chain {cm} vs IS {} (se {se})", is_mean[s]);
    }
}

pub fn channel_evidence_two_estimators_agree() {
    let counts = TransitionCounts { n00: 3, n01: 1, n10: 1, n11: 2 };
    let base = ContaminationModel::default();
    let h = base.alpha / 2.0;
    // Direct: binomial expansion over the concordant count, r integrated by quadrature.
    let (nodes, weights) = gauss_legendre_unit(40);
    let row = |a: u64, b: u64| -> f64 {
        let nn = (a + b) as f64;
        let mut acc = 0.0;
        for (t, w) in nodes.iter().zip(&weights) {
            let r = base.r_floor + (1.0 - base.r_floor) * t;
            let prior = 1.0 / (1.0 - base.r_floor);
            let mut s = 0.0;
            for v in 0..=a {
                s += bacon_core::special::ln_choose(a, v).exp()
                    * r.powi(v as i32)
                    * (1.0 - r).powf(nn - v as f64)
                    * (bacon_core::special::ln_beta((a - v) as f64 + h, b as f64 + h) - bacon_core::special::ln_beta(h, h)).exp();
            }
            acc += w * (1.0 - base.r_floor) * prior * s;
        }
        acc
    };
    let direct = row(counts.n00, counts.n01) * row(counts.n11, counts.n10);

    // Monte Carlo over prior draws of (r, Q*).
    let mut rng = substream(31, "oracle", 0, "evidence");
    let m = 400_000;
    let mut vals = Vec::with_capacity(m);
    for _ in 0..m {
        let mut model = base;
        for s in 0..2 {
            model.r[s] = sample_truncated_beta(&mut rng, base.r_alpha, base.r_beta, base.r_floor);
            let t = Beta::new(h, h).unwrap().sample(&mut rng);
            model.q_star[s] = [t, 1.0 - t];
        }
        vals.push(bacon_core::model::log_contamination_likelihood(&counts, &model.derive_q()).exp());
    }
    let mc = mean(&vals);
    let se = iid_se(&vals);
    assert!((mc - direct).abs() < 3.0 * se, "MC {mc} vs direct {direct} (se {se})");
}

pub fn qstar_update_preserves_its_conditional() {
    // Given r, repeated Q* updates on fixed counts must target
    // p(q*_s | r, N) ∝ (r + (1-r)t)^a ((1-r)(1-t))^b Beta(t; h, h).
    let counts = TransitionCounts { n00: 9, n01: 3, n10: 2, n11: 7 };
    let mut model = ContaminationModel { r: [0.9, 0.87], ..Default::default() };
    let mut rng = substream(41, "oracle", 0, "qstar");
    let reps = 100_000;
    let mut t0 = Vec::with_capacity(reps);
    for _ in 0..reps {
        update_qstar(&mut rng, &mut model, &counts);
        t0.push(model.q_star[0][0]);
    }
    let (nodes, weights) = gauss_legendre_unit(80);
    let half_pi = std::f64::consts::FRAC_PI_2;
    let r = 0.9;
    let (mut z, mut m1) = (0.0, 0.0);
    for (u, w) in nodes.iter().zip(&weights) {
        let t = (u * half_pi).sin().powi(2);
        let f = w * (r + (1.0 - r) * t).powi(9) * ((1.0 - r) * (1.0 - t)).powi(3);
        z += f;
        m1 += f * t;
    }
    let want = m1 / z;
    assert!((mean(&t0) - want).abs() < 4.0 * iid_se(&t0), "{} vs {want}", mean(&t0));
    // r-update keeps the floor
    for _ in 0..1000 {
        update_concordance(&mut rng, &mut model, &counts);
        assert!(model.r.iter().all(|&r| r > model.r_floor));
    }
}
