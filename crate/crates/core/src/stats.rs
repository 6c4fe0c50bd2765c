//! Statistical tests and estimators used by the validation harnesses:
//! Kolmogorov-Smirnov (one- and two-sample), chi-square goodness-of-fit and
//! independence, block-averaged standard errors and log-linear rate fits.
//!
//! All tests report a statistic together with an asymptotic p-value; the
//! harnesses compare p-values against a fixed 1% level.

use crate::error::{Error, Result};
use statrs::function::gamma::gamma_ur;

/// Outcome of a Kolmogorov-Smirnov test.
#[derive(Debug, Clone, serde::Serialize)]
pub struct KsReport {
    pub statistic: f64,
    pub p_value: f64,
    /// Effective sample size (n for one-sample, nm/(n+m) for two-sample).
    pub n_effective: f64,
}

/// Outcome of a chi-square test.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Chi2Report {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Survival function of the Kolmogorov distribution,
/// `Q(t) = 2 Σ_{k≥1} (-1)^{k-1} exp(-2 k² t²)`.
pub fn kolmogorov_q(t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    if t < 0.15 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * t * t).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn ks_p_value(d: f64, n_eff: f64) -> f64 {
    // Stephens' small-sample correction for the asymptotic distribution.
    let s = n_eff.sqrt();
    kolmogorov_q(d * (s + 0.12 + 0.11 / s))
}

/// One-sample KS test of `samples` against the distribution with CDF `cdf`.
pub fn ks_one_sample(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<KsReport> {
    if samples.len() < 8 {
        return Err(Error::statistics("KS test needs at least 8 samples"));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("samples must be comparable"));
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, x) in xs.iter().enumerate() {
        let f = cdf(*x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    Ok(KsReport { statistic: d, p_value: ks_p_value(d, n), n_effective: n })
}

/// Two-sample KS test. Identical samples give statistic 0 and p-value 1.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsReport> {
    if a.len() < 8 || b.len() < 8 {
        return Err(Error::statistics("KS test needs at least 8 samples per side"));
    }
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(|x, y| x.partial_cmp(y).expect("samples must be comparable"));
    xb.sort_by(|x, y| x.partial_cmp(y).expect("samples must be comparable"));
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let mut d = 0.0f64;
    let (mut i, mut j) = (0usize, 0usize);
    while i < xa.len() && j < xb.len() {
        // Advance both sides past the smaller value so ties do not
        // inflate the statistic.
        let v = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= v {
            i += 1;
        }
        while j < xb.len() && xb[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let n_eff = na * nb / (na + nb);
    Ok(KsReport { statistic: d, p_value: ks_p_value(d, n_eff), n_effective: n_eff })
}

/// Upper tail of the chi-square distribution with `dof` degrees of freedom.
pub fn chi2_survival(x: f64, dof: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_ur(dof as f64 / 2.0, x / 2.0)
}

/// Chi-square goodness of fit of observed counts against expected counts.
/// Adjacent cells are pooled until every expected count is at least 5.
pub fn chi2_goodness_of_fit(observed: &[f64], expected: &[f64]) -> Result<Chi2Report> {
    if observed.len() != expected.len() || observed.is_empty() {
        return Err(Error::statistics("chi-square needs matching nonempty count vectors"));
    }
    let mut pooled: Vec<(f64, f64)> = Vec::new();
    let (mut acc_o, mut acc_e) = (0.0f64, 0.0f64);
    for (&o, &e) in observed.iter().zip(expected) {
        acc_o += o;
        acc_e += e;
        if acc_e >= 5.0 {
            pooled.push((acc_o, acc_e));
            acc_o = 0.0;
            acc_e = 0.0;
        }
    }
    if acc_e > 0.0 || acc_o > 0.0 {
        match pooled.last_mut() {
            Some(last) => {
                last.0 += acc_o;
                last.1 += acc_e;
            }
            None => return Err(Error::statistics("expected counts too small to pool")),
        }
    }
    if pooled.len() < 2 {
        return Err(Error::statistics("chi-square needs at least 2 pooled cells"));
    }
    let stat: f64 = pooled.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let dof = pooled.len() - 1;
    Ok(Chi2Report { statistic: stat, dof, p_value: chi2_survival(stat, dof) })
}

/// Chi-square test of independence on a contingency table (rows x cols of
/// counts). Rows or columns with zero total are dropped.
pub fn chi2_independence(table: &[Vec<f64>]) -> Result<Chi2Report> {
    let rows: Vec<&Vec<f64>> = table.iter().filter(|r| r.iter().sum::<f64>() > 0.0).collect();
    if rows.is_empty() {
        return Err(Error::statistics("empty contingency table"));
    }
    let ncol = rows[0].len();
    if rows.iter().any(|r| r.len() != ncol) {
        return Err(Error::statistics("ragged contingency table"));
    }
    let col_totals: Vec<f64> =
        (0..ncol).map(|j| rows.iter().map(|r| r[j]).sum()).collect();
    let keep: Vec<usize> =
        (0..ncol).filter(|&j| col_totals[j] > 0.0).collect();
    if rows.len() < 2 || keep.len() < 2 {
        return Err(Error::statistics("contingency table needs at least 2x2 occupied cells"));
    }
    let grand: f64 = col_totals.iter().sum();
    let mut stat = 0.0;
    for r in &rows {
        let row_total: f64 = r.iter().sum();
        for &j in &keep {
            let e = row_total * col_totals[j] / grand;
            let o = r[j];
            stat += (o - e) * (o - e) / e;
        }
    }
    let dof = (rows.len() - 1) * (keep.len() - 1);
    Ok(Chi2Report { statistic: stat, dof, p_value: chi2_survival(stat, dof) })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Mean and block-averaged standard error over `n_blocks` equal blocks
/// (trailing remainder dropped).
pub fn block_mean_stderr(xs: &[f64], n_blocks: usize) -> Result<(f64, f64)> {
    if n_blocks < 2 || xs.len() < 2 * n_blocks {
        return Err(Error::statistics(format!(
            "block averaging needs at least {} samples, got {}",
            2 * n_blocks,
            xs.len()
        )));
    }
    let block_len = xs.len() / n_blocks;
    let used = block_len * n_blocks;
    let blocks: Vec<f64> = (0..n_blocks)
        .map(|b| mean(&xs[b * block_len..(b + 1) * block_len]))
        .collect();
    let m = mean(&xs[..used]);
    let var_blocks = variance(&blocks);
    Ok((m, (var_blocks / n_blocks as f64).sqrt()))
}

/// Weighted least-squares fit of `ln y = c - rate * t`.
///
/// Returns `(rate, c, residual_rms)` where the residual is measured in log
/// space. Points with `y <= 0` are rejected.
pub fn fit_log_decay(ts: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if ts.len() != ys.len() || ts.len() < 3 {
        return Err(Error::statistics("log-decay fit needs at least 3 points"));
    }
    if ys.iter().any(|y| *y <= 0.0) {
        return Err(Error::statistics("log-decay fit requires positive values"));
    }
    let ln: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = ts.len() as f64;
    let st = mean(ts);
    let sl = mean(&ln);
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (t, l) in ts.iter().zip(&ln) {
        sxx += (t - st) * (t - st);
        sxy += (t - st) * (l - sl);
    }
    if sxx <= 0.0 {
        return Err(Error::statistics("log-decay fit needs distinct abscissae"));
    }
    let slope = sxy / sxx;
    let c = sl - slope * st;
    let rss: f64 = ts
        .iter()
        .zip(&ln)
        .map(|(t, l)| {
            let r = l - (c + slope * t);
            r * r
        })
        .sum();
    Ok((-slope, c, (rss / n).sqrt()))
}

/// Empirical quantile (linear interpolation between order statistics).
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("samples must be comparable"));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < v.len() {
        v[i] * (1.0 - frac) + v[i + 1] * frac
    } else {
        v[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;
    use rand_distr::{Distribution, Exp, StandardNormal};

    #[test]
    fn ks_accepts_exponential_samples() {
        let mut rng = stream_rng(11, 0);
        let exp = Exp::new(2.0).unwrap();
        let xs: Vec<f64> = (0..4000).map(|_| exp.sample(&mut rng)).collect();
        let rep = ks_one_sample(&xs, |t| 1.0 - (-2.0 * t).exp()).unwrap();
        assert!(rep.p_value > 0.01, "p = {}", rep.p_value);
    }

    #[test]
    fn ks_rejects_wrong_rate() {
        let mut rng = stream_rng(12, 0);
        let exp = Exp::new(2.0).unwrap();
        let xs: Vec<f64> = (0..4000).map(|_| exp.sample(&mut rng)).collect();
        let rep = ks_one_sample(&xs, |t| 1.0 - (-1.0 * t).exp()).unwrap();
        assert!(rep.p_value < 1e-6, "p = {}", rep.p_value);
    }

    #[test]
    fn ks_two_sample_identical_gives_p_one() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let rep = ks_two_sample(&xs, &xs).unwrap();
        assert_eq!(rep.statistic, 0.0);
        assert_eq!(rep.p_value, 1.0);
    }

    #[test]
    fn ks_two_sample_detects_rate_change() {
        let mut rng = stream_rng(13, 0);
        let a: Vec<f64> = (0..2000).map(|_| Exp::new(1.0).unwrap().sample(&mut rng)).collect();
        let b: Vec<f64> = (0..2000).map(|_| Exp::new(2.0).unwrap().sample(&mut rng)).collect();
        let rep = ks_two_sample(&a, &b).unwrap();
        assert!(rep.p_value < 1e-6);
    }

    #[test]
    fn chi2_gof_uniform_counts() {
        let mut rng = stream_rng(14, 0);
        let mut counts = vec![0.0; 16];
        for _ in 0..8000 {
            counts[rng.random_range(0..16)] += 1.0;
        }
        let expected = vec![500.0; 16];
        let rep = chi2_goodness_of_fit(&counts, &expected).unwrap();
        assert!(rep.p_value > 0.01, "p = {}", rep.p_value);
    }

    #[test]
    fn chi2_independence_detects_association() {
        // Strong diagonal association.
        let table = vec![vec![90.0, 10.0], vec![12.0, 88.0]];
        let rep = chi2_independence(&table).unwrap();
        assert!(rep.p_value < 1e-6);
        // Product structure is accepted.
        let indep = vec![vec![50.0, 50.0], vec![48.0, 52.0]];
        let rep = chi2_independence(&indep).unwrap();
        assert!(rep.p_value > 0.01);
    }

    #[test]
    fn block_stderr_scales_with_n() {
        let mut rng = stream_rng(15, 0);
        let xs: Vec<f64> = (0..32000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let (m, se) = block_mean_stderr(&xs, 32).unwrap();
        assert!(m.abs() < 4.0 * se, "mean {m} se {se}");
        assert!((se - 1.0 / (32000f64).sqrt()).abs() < 0.5 * se);
    }

    #[test]
    fn log_decay_fit_recovers_rate() {
        let ts: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> = ts.iter().map(|t| 3.0 * (-1.7 * t).exp()).collect();
        let (rate, c, res) = fit_log_decay(&ts, &ys).unwrap();
        assert!((rate - 1.7).abs() < 1e-12);
        assert!((c - 3.0f64.ln()).abs() < 1e-12);
        assert!(res < 1e-12);
    }
}
