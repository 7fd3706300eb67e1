//! Convergence diagnostics and posterior summaries.

use rustfft::{num_complex::Complex, FftPlanner};

use crate::sampler::DrawsMatrix;

/// One row of a posterior summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// 2.5% quantile.
    pub lower: f64,
    /// 97.5% quantile.
    pub upper: f64,
    /// Split R-hat; NaN when there are too few draws to define it.
    pub rhat: f64,
    pub ess: f64,
}

/// Quantile of already sorted values by linear interpolation between order
/// statistics (position `(len - 1) * prob`).
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], prob: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, prob)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Mean by running update. Exact for constant input.
pub fn running_mean(x: &[f64]) -> f64 {
    x.iter()
        .enumerate()
        .fold(0.0, |m, (i, v)| m + (v - m) / (i + 1) as f64)
}

/// Sample variance with `n - 1` denominator; zero for fewer than two values.
pub fn variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

/// Potential scale reduction over half-chains.
///
/// Every chain is split in half (a middle draw of an odd-length chain is
/// dropped) and all halves are truncated to the shortest half length.
/// Returns NaN when fewer than two halves of at least two draws exist, 1 when
/// all draws are identical and `+inf` when the halves are individually
/// constant but differ from each other.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let half = chains.iter().map(|c| c.len() / 2).min().unwrap_or(0);
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..half], &c[c.len() - half..]])
        .collect();
    if halves.len() < 2 || half < 2 {
        return f64::NAN;
    }
    let s = half as f64;
    let w = halves.iter().map(|h| variance(h)).sum::<f64>() / halves.len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let b = s * variance(&means);
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (s - 1.0) / s * w + b / s;
    (var_plus / w).sqrt()
}

/// Biased autocovariance `acov[t] = (1/n) sum (x_i - m)(x_{i+t} - m)` via FFT.
pub fn autocovariance(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let m = mean(x);
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .map(|v| Complex::new(v - m, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in &mut buf {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    buf[..n]
        .iter()
        .map(|c| c.re / (size as f64 * n as f64))
        .collect()
}

/// Multi-chain effective sample size with Geyer's initial monotone sequence
/// truncation. Chains are truncated to the shortest chain length. Constant
/// input returns the total draw count.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let m = chains.len();
    let total = (m * n) as f64;
    if m == 0 || n < 4 {
        return total;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let first = chains[0][0];
    if chains.iter().all(|c| c.iter().all(|&v| v == first)) {
        return total;
    }
    let nf = n as f64;
    let acov: Vec<Vec<f64>> = chains.iter().map(|c| autocovariance(c)).collect();
    let chain_mean: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let chain_var: Vec<f64> = acov.iter().map(|a| a[0] * nf / (nf - 1.0)).collect();
    let mean_var = mean(&chain_var);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += variance(&chain_mean);
    }
    if !(var_plus > 0.0) {
        return total;
    }
    let rho_at = |lag: usize| 1.0 - (mean_var - acov.iter().map(|a| a[lag]).sum::<f64>() / m as f64) / var_plus;

    let mut rho = vec![0.0; n];
    let mut rho_even = 1.0;
    let mut rho_odd = rho_at(1);
    rho[0] = rho_even;
    rho[1] = rho_odd;
    let mut s = 1;
    while s + 4 < n && rho_even + rho_odd > 0.0 {
        rho_even = rho_at(s + 1);
        rho_odd = rho_at(s + 2);
        if rho_even + rho_odd >= 0.0 {
            rho[s + 1] = rho_even;
            rho[s + 2] = rho_odd;
        }
        s += 2;
    }
    let max_s = s;
    if rho_even > 0.0 && max_s + 1 < n {
        rho[max_s + 1] = rho_even;
    }
    let mut s = 1;
    while s + 3 <= max_s {
        if rho[s + 1] + rho[s + 2] > rho[s - 1] + rho[s] {
            rho[s + 1] = (rho[s - 1] + rho[s]) / 2.0;
            rho[s + 2] = rho[s + 1];
        }
        s += 2;
    }
    let tail = if max_s + 1 < n { rho[max_s + 1] } else { 0.0 };
    let tau = -1.0 + 2.0 * rho[..max_s].iter().sum::<f64>() + tail;
    total / tau.max(1.0 / total.log10())
}

/// Summary of one scalar quantity given its draws grouped by chain.
pub fn summarize_column(name: &str, chains: &[Vec<f64>]) -> SummaryRow {
    let mut all: Vec<f64> = chains.iter().flatten().copied().collect();
    assert!(!all.is_empty(), "no draws for `{name}`");
    let mean = mean(&all);
    let sd = variance(&all).sqrt();
    all.sort_by(f64::total_cmp);
    SummaryRow {
        name: name.to_string(),
        mean,
        sd,
        lower: quantile_sorted(&all, 0.025),
        upper: quantile_sorted(&all, 0.975),
        rhat: split_rhat(chains),
        ess: ess(chains),
    }
}

/// One summary row per parameter, in layout order.
pub fn summarize(draws: &DrawsMatrix) -> Vec<SummaryRow> {
    draws
        .names
        .iter()
        .enumerate()
        .map(|(j, name)| summarize_column(name, &draws.column(j)))
        .collect()
}

/// Monte Carlo standard errors of the posterior mean and standard deviation.
pub fn mcse_mean_sd(chains: &[Vec<f64>]) -> (f64, f64) {
    let all: Vec<f64> = chains.iter().flatten().copied().collect();
    let m = mean(&all);
    let sd = variance(&all).sqrt();
    let mcse_mean = sd / ess(chains).sqrt();
    let centered: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| c.iter().map(|v| (v - m) * (v - m)).collect())
        .collect();
    let sq: Vec<f64> = centered.iter().flatten().copied().collect();
    let mcse_var = variance(&sq).sqrt() / ess(&centered).sqrt();
    (mcse_mean, mcse_var / (2.0 * sd))
}
