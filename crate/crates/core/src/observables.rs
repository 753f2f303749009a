//! Connected `σ^z` correlations, chord lengths and power-law fits.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::rnn::ModelParams;
use crate::vmc::MEASURE_STREAM_BASE;
use crate::wavefunction::{enumerate_probabilities, sample, SpinConfig};

pub const CORRELATION_CSV_HEADER: &str = "r,chord_length,C,stderr";
/// Minimum sample count accepted by [`measure_correlations`].
pub const MIN_MEASURE_SAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPoint {
    pub r: usize,
    pub c: f64,
    pub stderr: f64,
}

/// `C(r) = ⟨σ_i σ_{i+r}⟩ − ⟨σ_i⟩⟨σ_{i+r}⟩` for `r = 1..=N/2`, where `i` is
/// the 1-based site `max(1, ⌊N/4⌋)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSeries {
    pub n_sites: usize,
    /// 1-based reference site.
    pub reference_site: usize,
    pub points: Vec<CorrelationPoint>,
}

impl CorrelationSeries {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CORRELATION_CSV_HEADER);
        out.push('\n');
        for p in &self.points {
            let l = chord_length(self.n_sites, p.r).expect("r ≤ N/2");
            let _ = writeln!(out, "{},{:e},{:e},{:e}", p.r, l, p.c, p.stderr);
        }
        out
    }
}

pub fn reference_site(n_sites: usize) -> usize {
    (n_sites / 4).max(1)
}

fn check_sites(n_sites: usize) -> Result<()> {
    if n_sites < 2 {
        return Err(Error::InvalidInput(format!("correlations need N ≥ 2, got {n_sites}")));
    }
    Ok(())
}

/// Connected correlations from a fixed set of samples, with jackknife
/// standard errors.
pub fn correlations_from_samples(samples: &[SpinConfig]) -> Result<CorrelationSeries> {
    let n_samples = samples.len();
    if n_samples < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 samples, got {n_samples}")));
    }
    let n_sites = samples[0].len();
    check_sites(n_sites)?;
    if let Some(bad) = samples.iter().find(|s| s.len() != n_sites) {
        return Err(Error::shape("correlation samples", n_sites, bad.len()));
    }
    let i = reference_site(n_sites) - 1;
    let ns = n_samples as f64;
    let m = ns - 1.0;
    let sum_a: f64 = samples.iter().map(|s| s.get(i) as f64).sum();
    let mut points = Vec::with_capacity(n_sites / 2);
    for r in 1..=n_sites / 2 {
        let j = i + r;
        let sum_b: f64 = samples.iter().map(|s| s.get(j) as f64).sum();
        let sum_ab: f64 = samples.iter().map(|s| (s.get(i) * s.get(j)) as f64).sum();
        let c = sum_ab / ns - (sum_a / ns) * (sum_b / ns);
        // Leave-one-out estimates in O(1) each.
        let loo: Vec<f64> = samples
            .iter()
            .map(|s| {
                let (a, b) = (s.get(i) as f64, s.get(j) as f64);
                (sum_ab - a * b) / m - ((sum_a - a) / m) * ((sum_b - b) / m)
            })
            .collect();
        let mean_loo = loo.iter().sum::<f64>() / ns;
        let var = loo.iter().map(|x| (x - mean_loo).powi(2)).sum::<f64>() * (ns - 1.0) / ns;
        points.push(CorrelationPoint {
            r,
            c,
            stderr: var.sqrt(),
        });
    }
    Ok(CorrelationSeries {
        n_sites,
        reference_site: i + 1,
        points,
    })
}

/// Monte Carlo correlations from `n_samples` configurations drawn on the
/// measurement streams.
pub fn measure_correlations(
    params: &ModelParams,
    n_sites: usize,
    n_samples: usize,
    seed: u64,
) -> Result<CorrelationSeries> {
    if n_samples < MIN_MEASURE_SAMPLES {
        return Err(Error::InvalidInput(format!(
            "need at least {MIN_MEASURE_SAMPLES} samples, got {n_samples}"
        )));
    }
    check_sites(n_sites)?;
    let samples = (0..n_samples)
        .into_par_iter()
        .map(|k| sample(params, n_sites, &mut RngStream::new(seed, MEASURE_STREAM_BASE | k as u64)))
        .collect::<Result<Vec<_>>>()?;
    correlations_from_samples(&samples)
}

/// Correlations weighted by the exact enumerated distribution (zero stderr).
pub fn exact_correlations(params: &ModelParams, n_sites: usize) -> Result<CorrelationSeries> {
    check_sites(n_sites)?;
    let probs = enumerate_probabilities(params, n_sites)?;
    let i = reference_site(n_sites) - 1;
    let spin = |idx: usize, k: usize| if idx >> k & 1 == 1 { 1.0 } else { -1.0 };
    let ea: f64 = probs.iter().enumerate().map(|(idx, p)| p * spin(idx, i)).sum();
    let points = (1..=n_sites / 2)
        .map(|r| {
            let j = i + r;
            let (mut eb, mut eab) = (0.0, 0.0);
            for (idx, p) in probs.iter().enumerate() {
                eb += p * spin(idx, j);
                eab += p * spin(idx, i) * spin(idx, j);
            }
            CorrelationPoint {
                r,
                c: eab - ea * eb,
                stderr: 0.0,
            }
        })
        .collect();
    Ok(CorrelationSeries {
        n_sites,
        reference_site: i + 1,
        points,
    })
}

/// `L_r = (N/π) sin(πr/N)`; symmetric under `r → N − r` by construction.
pub fn chord_length(n_sites: usize, r: usize) -> Result<f64> {
    if n_sites == 0 || r > n_sites {
        return Err(Error::InvalidInput(format!("separation {r} outside [0, {n_sites}]")));
    }
    let r = r.min(n_sites - r);
    let n = n_sites as f64;
    Ok(n / PI * (PI * r as f64 / n).sin())
}

/// Which separations enter the power-law fit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitWindow {
    /// Partner sites `i + r` inside `[N/4, 3N/4]`: `r ∈ [2, N/2]`.
    #[default]
    SitePositions,
    /// Separations themselves in `[N/4, 3N/4]`, capped at the measured `N/2`.
    Separations,
}

impl FitWindow {
    pub fn range(&self, n_sites: usize) -> (usize, usize) {
        match self {
            FitWindow::SitePositions => (2, n_sites / 2),
            FitWindow::Separations => ((n_sites / 4).max(1), (3 * n_sites / 4).min(n_sites / 2)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub eta: f64,
    pub eta_stderr: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// The fitted `log C` values have no spread, so R² is undefined and
    /// reported as 0.
    pub zero_variance: bool,
    pub n_points: usize,
    /// Points in the window with `C(r) ≤ 0`, left out of the log fit.
    pub excluded: usize,
}

/// Least-squares line through `(x, y)`: slope, intercept, slope stderr, R²
/// and whether `y` has zero variance.
pub(crate) fn ols(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64, bool) {
    let n = x.len() as f64;
    let shifted_mean = |v: &[f64]| v[0] + v.iter().map(|t| t - v[0]).sum::<f64>() / n;
    let (mx, my) = (shifted_mean(x), shifted_mean(y));
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let stderr = if n > 2.0 { (ssr / (n - 2.0) / sxx).sqrt() } else { f64::NAN };
    let zero_var = syy == 0.0;
    let r2 = if zero_var { 0.0 } else { (1.0 - ssr / syy).clamp(0.0, 1.0) };
    (slope, intercept, stderr, r2, zero_var)
}

/// Fit `log C(r) = a − η log L_r` over `window`.
pub fn fit_power_law(series: &CorrelationSeries, window: FitWindow) -> Result<PowerLawFit> {
    let (lo, hi) = window.range(series.n_sites);
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut excluded = 0;
    for p in series.points.iter().filter(|p| (lo..=hi).contains(&p.r)) {
        if p.c > 0.0 {
            x.push(chord_length(series.n_sites, p.r)?.ln());
            y.push(p.c.ln());
        } else {
            excluded += 1;
        }
    }
    if x.len() < 3 {
        return Err(Error::Fit {
            reason: format!("{} usable points in r ∈ [{lo}, {hi}], need 3", x.len()),
            excluded,
        });
    }
    let (slope, intercept, stderr, r2, zero_variance) = ols(&x, &y);
    Ok(PowerLawFit {
        eta: -slope,
        eta_stderr: stderr,
        intercept,
        r_squared: r2,
        zero_variance,
        n_points: x.len(),
        excluded,
    })
}

/// JSON sidecar of a correlation measurement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub eta: f64,
    pub eta_stderr: f64,
    #[serde(rename = "R2")]
    pub r_squared: f64,
    pub zero_variance: bool,
    pub window: FitWindow,
    pub window_r: (usize, usize),
    pub excluded_points: usize,
    pub seed: u64,
}

impl FitReport {
    pub fn new(fit: &PowerLawFit, window: FitWindow, n_sites: usize, seed: u64) -> Self {
        Self {
            eta: fit.eta,
            eta_stderr: fit.eta_stderr,
            r_squared: fit.r_squared,
            zero_variance: fit.zero_variance,
            window,
            window_r: window.range(n_sites),
            excluded_points: fit.excluded,
            seed,
        }
    }
}
