//! Zero-shot retrieval scoring and the statistical protocol.
//!
//! Queries are ranked against a candidate pool by cosine similarity with
//! deterministic tie-breaking (lower candidate index wins). The random
//! baseline is analytic: E[Recall@k] = 100 k / n and E[MRR] = H_n / n under
//! uniform random ranking. Significance uses Student's t via the regularized
//! incomplete beta function.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-query 1-based rank of the true candidate plus summary metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub n_candidates: usize,
    /// (k, percentage) in ascending k.
    pub recall_at: Vec<(usize, f64)>,
    pub mrr: f64,
    pub ranks: Vec<usize>,
    pub seed: u64,
    pub config_digest: String,
    pub source_tag: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestKind {
    OneSample,
    Paired,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatResult {
    pub t: f64,
    pub df: f64,
    pub p_two_sided: f64,
    pub kind: TestKind,
}

/// Rank each query's true candidate under descending cosine similarity.
///
/// Rows must be unit-norm (the dot product is taken as the cosine). Ties are
/// broken in favor of the lower candidate index.
pub fn rank_queries(
    queries: &[Vec<f64>],
    candidates: &[Vec<f64>],
    truth: &[usize],
) -> Result<Vec<usize>> {
    let n = candidates.len();
    let mut ranks = Vec::with_capacity(queries.len());
    for (qi, q) in queries.iter().enumerate() {
        let ti = truth[qi];
        if ti >= n {
            return Err(Error::TruthOutOfRange {
                index: ti,
                n_candidates: n,
            });
        }
        let sims: Vec<f64> = candidates.iter().map(|c| dot(q, c)).collect();
        for (ci, &s) in sims.iter().enumerate() {
            if !s.is_finite() {
                return Err(Error::NonFiniteSimilarity { row: qi, col: ci });
            }
        }
        let s_true = sims[ti];
        // rank = 1 + strictly better + equal candidates with lower index
        let better = sims.iter().filter(|&&s| s > s_true).count();
        let tied_before = sims[..ti].iter().filter(|&&s| s == s_true).count();
        ranks.push(1 + better + tied_before);
    }
    Ok(ranks)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Percentage of queries whose true candidate ranks within the top k.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyRanks);
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(100.0 * hits as f64 / ranks.len() as f64)
}

/// Mean reciprocal rank.
pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyRanks);
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Build a report from realized ranks.
pub fn report_from_ranks(
    ranks: Vec<usize>,
    n_candidates: usize,
    ks: &[usize],
    seed: u64,
    config_digest: &str,
    source_tag: &str,
) -> Result<RetrievalReport> {
    let recall_at = ks
        .iter()
        .map(|&k| recall_at_k(&ranks, k).map(|r| (k, r)))
        .collect::<Result<Vec<_>>>()?;
    let mrr = mrr(&ranks)?;
    Ok(RetrievalReport {
        n_candidates,
        recall_at,
        mrr,
        ranks,
        seed,
        config_digest: config_digest.to_string(),
        source_tag: source_tag.to_string(),
    })
}

/// Harmonic number H_n.
fn harmonic(n: usize) -> f64 {
    (1..=n).map(|r| 1.0 / r as f64).sum()
}

/// Analytic expectations under uniform random ranking of n candidates.
pub fn random_baseline(n: usize, ks: &[usize]) -> RetrievalReport {
    let recall_at = ks
        .iter()
        .map(|&k| (k, 100.0 * k.min(n) as f64 / n as f64))
        .collect();
    RetrievalReport {
        n_candidates: n,
        recall_at,
        mrr: harmonic(n) / n as f64,
        ranks: Vec::new(),
        seed: 0,
        config_digest: String::new(),
        source_tag: "analytic-random-baseline".into(),
    }
}

fn sample_mean_sd(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One-sample two-sided t-test of `samples` against `mu0`.
pub fn one_sample_t(samples: &[f64], mu0: f64) -> Result<StatResult> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples(samples.len()));
    }
    let (mean, sd) = sample_mean_sd(samples);
    if sd == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let n = samples.len() as f64;
    let t = (mean - mu0) / (sd / n.sqrt());
    let df = n - 1.0;
    Ok(StatResult {
        t,
        df,
        p_two_sided: two_sided_p(t, df),
        kind: TestKind::OneSample,
    })
}

/// Paired two-sided t-test on the per-index differences a[i] - b[i].
pub fn paired_t(a: &[f64], b: &[f64]) -> Result<StatResult> {
    if a.len() != b.len() {
        return Err(Error::UnequalLengths(a.len(), b.len()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mut res = one_sample_t(&diffs, 0.0)?;
    res.kind = TestKind::Paired;
    Ok(res)
}

/// Two-sided p-value from Student's t distribution:
/// p = I_{df/(df+t^2)}(df/2, 1/2).
pub fn two_sided_p(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    reg_inc_beta(0.5 * df, 0.5, x)
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7.
    const COEF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // reflection
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Regularized incomplete beta I_x(a, b) via the Lentz continued fraction.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front = (a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b)).exp();
    // use the symmetry that keeps the fraction well-conditioned
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - (a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b)).exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Render a report as deterministic text: percentages at 2 decimals, MRR at 4.
pub fn render_report(r: &RetrievalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "ssense retrieval report");
    let _ = writeln!(out, "seed: {}", r.seed);
    let _ = writeln!(out, "config_digest: {}", r.config_digest);
    let _ = writeln!(out, "provider: {}", r.source_tag);
    let _ = writeln!(out, "candidates: {}", r.n_candidates);
    let _ = writeln!(out, "queries: {}", r.ranks.len());
    for &(k, v) in &r.recall_at {
        let _ = writeln!(out, "recall@{k}: {v:.2}");
    }
    let _ = writeln!(out, "mrr: {:.4}", r.mrr);
    let ranks: Vec<String> = r.ranks.iter().map(|x| x.to_string()).collect();
    let _ = writeln!(out, "ranks: {}", ranks.join(" "));
    out
}

/// Parse a report rendered by [`render_report`]. Metrics are recomputed from
/// the stored per-query ranks at full precision.
pub fn parse_report(text: &str, path_hint: &str) -> Result<RetrievalReport> {
    let mut seed = 0u64;
    let mut config_digest = String::new();
    let mut source_tag = String::new();
    let mut n_candidates = 0usize;
    let mut ks: Vec<usize> = Vec::new();
    let mut ranks: Vec<usize> = Vec::new();
    let bad = |reason: String| Error::Format {
        path: path_hint.into(),
        reason,
    };
    for line in text.lines() {
        let Some((key, value)) = line.split_once(':') else {
            continue;
        };
        let value = value.trim();
        match key.trim() {
            "seed" => seed = value.parse().map_err(|e| bad(format!("seed: {e}")))?,
            "config_digest" => config_digest = value.to_string(),
            "provider" => source_tag = value.to_string(),
            "candidates" => {
                n_candidates = value.parse().map_err(|e| bad(format!("candidates: {e}")))?
            }
            "ranks" => {
                ranks = value
                    .split_whitespace()
                    .map(|s| s.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(format!("ranks: {e}")))?
            }
            k if k.starts_with("recall@") => {
                ks.push(
                    k["recall@".len()..]
                        .parse()
                        .map_err(|e| bad(format!("{k}: {e}")))?,
                );
            }
            _ => {}
        }
    }
    if ranks.is_empty() {
        return Err(bad("report has no ranks".into()));
    }
    report_from_ranks(ranks, n_candidates, &ks, seed, &config_digest, &source_tag)
}

/// Mean and sample SD (n-1 denominator) per metric across reports, rendered
/// as a Table-1 style block with the analytic baseline row.
pub fn render_aggregate(reports: &[RetrievalReport], label: &str) -> String {
    let mut out = String::new();
    if reports.is_empty() {
        return out;
    }
    let ks: Vec<usize> = reports[0].recall_at.iter().map(|&(k, _)| k).collect();
    let header: Vec<String> = ks.iter().map(|k| format!("Recall@{k}")).collect();
    let _ = writeln!(out, "Method\t{}\tMRR", header.join("\t"));
    let mut cells: Vec<String> = Vec::new();
    for (ki, _) in ks.iter().enumerate() {
        let vals: Vec<f64> = reports.iter().map(|r| r.recall_at[ki].1).collect();
        cells.push(mean_sd_cell(&vals, 2));
    }
    let mrrs: Vec<f64> = reports.iter().map(|r| r.mrr).collect();
    cells.push(mean_sd_cell(&mrrs, 4));
    let _ = writeln!(out, "{label}\t{}", cells.join("\t"));
    let n = reports[0].n_candidates;
    let baseline = random_baseline(n, &ks);
    let base_cells: Vec<String> = baseline
        .recall_at
        .iter()
        .map(|&(_, v)| format!("{v:.2}"))
        .collect();
    let _ = writeln!(
        out,
        "Random sentence retrieval\t{}\t{:.4}",
        base_cells.join("\t"),
        baseline.mrr
    );
    out
}

fn mean_sd_cell(vals: &[f64], decimals: usize) -> String {
    if vals.len() == 1 {
        return format!("{:.*}", decimals, vals[0]);
    }
    let (mean, sd) = sample_mean_sd(vals);
    format!("{mean:.decimals$} \u{b1} {sd:.decimals$}")
}

/// Aggregate (mean, sample SD) of one metric across reports.
pub fn aggregate_metric(vals: &[f64]) -> (f64, f64) {
    sample_mean_sd(vals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit(i: usize, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    #[test]
    fn self_similarity_gives_rank_one() {
        let c: Vec<Vec<f64>> = (0..5).map(|i| unit(i, 8)).collect();
        let truth: Vec<usize> = (0..5).collect();
        let ranks = rank_queries(&c, &c, &truth).unwrap();
        assert_eq!(ranks, vec![1; 5]);
    }

    #[test]
    fn rank_matches_brute_force_sort() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.random_range(2..10usize);
            let dim = 6;
            let mut cands: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.iter_mut().for_each(|x| *x /= norm);
                    v
                })
                .collect();
            // inject ties occasionally
            if n > 2 && rng.random_range(0..2) == 0 {
                cands[1] = cands[0].clone();
            }
            let q = vec![cands[rng.random_range(0..n)].clone()];
            let truth = vec![rng.random_range(0..n)];
            let ranks = rank_queries(&q, &cands, &truth).unwrap();
            // brute force: stable sort by (-sim, index)
            let sims: Vec<f64> = cands.iter().map(|c| dot(&q[0], c)).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b)));
            let expect = order.iter().position(|&i| i == truth[0]).unwrap() + 1;
            assert_eq!(ranks[0], expect);
        }
    }

    #[test]
    fn identical_candidates_tie_break_by_index() {
        let c = vec![unit(0, 4), unit(0, 4), unit(0, 4)];
        let q = vec![unit(0, 4)];
        assert_eq!(rank_queries(&q, &c, &[0]).unwrap(), vec![1]);
        assert_eq!(rank_queries(&q, &c, &[2]).unwrap(), vec![3]);
    }

    #[test]
    fn truth_out_of_range() {
        let c = vec![unit(0, 4)];
        assert!(matches!(
            rank_queries(&c.clone(), &c, &[5]),
            Err(Error::TruthOutOfRange { .. })
        ));
    }

    #[test]
    fn recall_and_mrr_hand_arithmetic() {
        let ranks = vec![1, 2, 3, 4];
        assert_relative_eq!(recall_at_k(&ranks, 1).unwrap(), 25.0);
        assert_relative_eq!(recall_at_k(&ranks, 2).unwrap(), 50.0);
        assert_relative_eq!(recall_at_k(&ranks, 4).unwrap(), 100.0);
        let expect = (1.0 + 0.5 + 1.0 / 3.0 + 0.25) / 4.0;
        assert_relative_eq!(mrr(&ranks).unwrap(), expect, epsilon = 1e-15);
        assert_relative_eq!(recall_at_k(&[1, 1, 1], 1).unwrap(), 100.0);
        assert_relative_eq!(mrr(&[1, 1, 1]).unwrap(), 1.0);
        assert!(recall_at_k(&[], 1).is_err());
    }

    #[test]
    fn baseline_matches_published_row() {
        let b = random_baseline(292, &[1, 10, 50]);
        assert_eq!(format!("{:.2}", b.recall_at[0].1), "0.34");
        assert_eq!(format!("{:.2}", b.recall_at[1].1), "3.42");
        assert_eq!(format!("{:.2}", b.recall_at[2].1), "17.12");
        assert_eq!(format!("{:.4}", b.mrr), "0.0214");
        let single = random_baseline(1, &[1]);
        assert_relative_eq!(single.recall_at[0].1, 100.0);
        assert_relative_eq!(single.mrr, 1.0);
    }

    #[test]
    fn baseline_matches_monte_carlo() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let n = 292;
        let trials = 100_000;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut order: Vec<usize> = (1..=n).collect();
        let mut sum_r10 = 0.0f64;
        let mut sum_mrr = 0.0f64;
        for _ in 0..trials {
            order.shuffle(&mut rng);
            let rank = order[0]; // rank of the true candidate under a uniform permutation
            if rank <= 10 {
                sum_r10 += 100.0;
            }
            sum_mrr += 1.0 / rank as f64;
        }
        let b = random_baseline(n, &[10]);
        let mc_r10 = sum_r10 / trials as f64;
        let mc_mrr = sum_mrr / trials as f64;
        // 3 standard errors
        let p10 = 10.0 / n as f64;
        let se_r10 = 100.0 * (p10 * (1.0 - p10) / trials as f64).sqrt();
        assert!((mc_r10 - b.recall_at[0].1).abs() < 3.0 * se_r10);
        let var_mrr: f64 = (1..=n).map(|r| {
            let x = 1.0 / r as f64 - b.mrr;
            x * x
        }).sum::<f64>() / n as f64;
        let se_mrr = (var_mrr / trials as f64).sqrt();
        assert!((mc_mrr - b.mrr).abs() < 3.0 * se_mrr);
    }

    #[test]
    fn t_test_centered_sample() {
        let r = one_sample_t(&[1.0, 2.0, 3.0], 2.0).unwrap();
        assert_relative_eq!(r.t, 0.0, epsilon = 1e-12);
        assert_relative_eq!(r.p_two_sided, 1.0, epsilon = 1e-12);
        assert_relative_eq!(r.df, 2.0);
    }

    #[test]
    fn t_test_reference_value() {
        let r = one_sample_t(&[1.0, 2.0, 3.0, 4.0, 5.0], 2.0).unwrap();
        assert_relative_eq!(r.t, 2.0f64.sqrt(), epsilon = 1e-5);
        assert_relative_eq!(r.df, 4.0);
        assert!((r.p_two_sided - 0.2302).abs() < 1e-3, "p = {}", r.p_two_sided);
    }

    #[test]
    fn paired_degenerate() {
        let a = [1.0, 2.0, 3.0];
        assert!(matches!(paired_t(&a, &a), Err(Error::ZeroVariance)));
    }

    #[test]
    fn p_value_symmetry() {
        let x = [1.0, 2.5, 3.0, 4.25, 7.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let a = one_sample_t(&x, 2.0).unwrap();
        let b = one_sample_t(&neg, -2.0).unwrap();
        assert_relative_eq!(a.p_two_sided, b.p_two_sided, epsilon = 1e-12);
        assert_relative_eq!(a.t, -b.t, epsilon = 1e-12);
    }

    /// Adaptive Simpson integration of the t density, the independent oracle
    /// for the incomplete-beta CDF path.
    fn t_pdf(x: f64, df: f64) -> f64 {
        let c = (ln_gamma((df + 1.0) / 2.0)
            - ln_gamma(df / 2.0)
            - 0.5 * (df * std::f64::consts::PI).ln())
        .exp();
        c * (1.0 + x * x / df).powf(-(df + 1.0) / 2.0)
    }

    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += f(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn t_cdf_grid_against_integration_oracle() {
        for &df in &[1.0f64, 2.0, 4.0, 9.0, 30.0, 100.0] {
            for &t in &[0.0f64, 0.5, 1.0, 1.41421356, 2.0, 3.5, 6.0] {
                // two-sided p = 1 - 2 * integral from 0 to t (finite interval,
                // so heavy tails cost nothing)
                let p_oracle = if t == 0.0 {
                    1.0
                } else {
                    1.0 - 2.0 * simpson(&|x| t_pdf(x, df), 0.0, t, 100_000)
                };
                let p = two_sided_p(t, df);
                assert!(
                    (p - p_oracle).abs() < 1e-8,
                    "df={df} t={t}: {p} vs {p_oracle}"
                );
            }
        }
    }

    #[test]
    fn rotation_invariance_of_ranks() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let dim = 4;
        // Givens rotation in coordinates (0, 2)
        let theta: f64 = 0.7;
        let rotate = |v: &[f64]| {
            let mut w = v.to_vec();
            w[0] = theta.cos() * v[0] - theta.sin() * v[2];
            w[2] = theta.sin() * v[0] + theta.cos() * v[2];
            w
        };
        let cands: Vec<Vec<f64>> = (0..6)
            .map(|_| {
                let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= norm);
                v
            })
            .collect();
        let queries = vec![cands[3].clone(), cands[5].clone()];
        let truth = vec![3, 1];
        let r1 = rank_queries(&queries, &cands, &truth).unwrap();
        let qr: Vec<Vec<f64>> = queries.iter().map(|v| rotate(v)).collect();
        let cr: Vec<Vec<f64>> = cands.iter().map(|v| rotate(v)).collect();
        let r2 = rank_queries(&qr, &cr, &truth).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn report_render_parse_round_trip() {
        let r = report_from_ranks(vec![1, 4, 2, 9], 64, &[1, 8], 3, "deadbeef", "file:x.sstx")
            .unwrap();
        let text = render_report(&r);
        let back = parse_report(&text, "test").unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn recall_monotone_in_k() {
        let r = report_from_ranks(vec![3, 1, 8, 5, 2], 10, &[1, 2, 5, 10], 0, "", "").unwrap();
        for w in r.recall_at.windows(2) {
            assert!(w[1].1 >= w[0].1);
        }
        assert_relative_eq!(r.recall_at.last().unwrap().1, 100.0);
    }
}
