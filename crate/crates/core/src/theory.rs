//! Linearized recurrent models: memory kernels, first-order correlation
//! series, their generating-function singularities, minimal-path
//! combinatorics of dilated connections, and brute-force oracles.
//!
//! Conventions: kernels `k_m` are indexed from lag `m = 1`, where the input
//! edge consumes one unit of lag, so a vanilla mode contributes
//! `c λ^{m−1}` and a dilated path to lag `m` spends a jump budget of `m − 1`.
//! Correlation series `C_n` are indexed from `n = 1` with `C_1 = β`.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use num_complex::Complex64;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observables::ols;

/// Weak-coupling parameter above which first-order results are flagged.
pub const WEAK_COUPLING_LIMIT: f64 = 0.1;
/// Largest sequence length accepted by [`exact_correlator`].
pub const MAX_CORRELATOR_SITES: usize = 20;
/// Minimum positive tail points for [`decay_classifier`].
pub const MIN_TAIL_POINTS: usize = 64;
const UNIT_CIRCLE_GRID: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Vanilla,
    Dilated,
}

/// Diagonal linear recurrence with scalar input and output. Mode `j` has
/// eigenvalue `λ_j` and coupling `c_j = u_j w_j`. In dilated mode layer `l`
/// (1-based) has dilation `base^{l−1}` and every layer shares the `λ_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModelSpec {
    pub mode: Mode,
    pub lambdas: Vec<f64>,
    pub couplings: Vec<f64>,
    pub bias: f64,
    #[serde(default = "default_base")]
    pub base: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
}

fn default_base() -> usize {
    2
}

fn default_depth() -> usize {
    1
}

impl LinearModelSpec {
    pub fn vanilla(lambdas: Vec<f64>, couplings: Vec<f64>, bias: f64) -> Self {
        Self {
            mode: Mode::Vanilla,
            lambdas,
            couplings,
            bias,
            base: 2,
            depth: 1,
        }
    }

    pub fn dilated(lambdas: Vec<f64>, couplings: Vec<f64>, bias: f64, base: usize, depth: usize) -> Self {
        Self {
            mode: Mode::Dilated,
            lambdas,
            couplings,
            bias,
            base,
            depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.len() != self.couplings.len() {
            return Err(Error::Config(format!(
                "{} eigenvalues but {} couplings",
                self.lambdas.len(),
                self.couplings.len()
            )));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
            return Err(Error::Config(format!(
                "eigenvalue {l} outside (0, 1); each hidden mode must satisfy 0 < λ < 1 to be stable"
            )));
        }
        if !self.bias.is_finite() || self.couplings.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config("bias and couplings must be finite".into()));
        }
        if self.mode == Mode::Dilated {
            if self.base < 2 {
                return Err(Error::Config(format!("dilation base must be ≥ 2, got {}", self.base)));
            }
            if self.depth == 0 {
                return Err(Error::Config("dilated depth must be ≥ 1".into()));
            }
        }
        Ok(())
    }

    /// Number of stacked layers the kernel runs through.
    pub fn layers(&self) -> usize {
        match self.mode {
            Mode::Vanilla => 1,
            Mode::Dilated => self.depth,
        }
    }

    /// Dilations `base^{l−1}` for `l = 1..=layers`.
    pub fn dilations(&self) -> Vec<usize> {
        (0..self.layers()).map(|l| self.base.pow(l as u32)).collect()
    }

    /// `β = 1 − tanh² b`.
    pub fn beta(&self) -> f64 {
        let t = self.bias.tanh();
        1.0 - t * t
    }

    /// `ε = Σ_j |c_j| / (1 − λ_j)^{layers}`, the bound on `Σ_m |k_m|`.
    pub fn epsilon(&self) -> f64 {
        let layers = self.layers() as i32;
        self.lambdas
            .iter()
            .zip(&self.couplings)
            .map(|(l, c)| c.abs() / (1.0 - l).powi(layers))
            .sum()
    }

    pub fn weak_coupling_violated(&self) -> bool {
        self.epsilon() >= WEAK_COUPLING_LIMIT
    }

    /// Same spec with couplings rescaled so that `ε` equals `target`.
    pub fn with_epsilon(&self, target: f64) -> Self {
        let e = self.epsilon();
        let s = if e > 0.0 { target / e } else { 0.0 };
        Self {
            couplings: self.couplings.iter().map(|c| c * s).collect(),
            ..self.clone()
        }
    }

    /// Predicted exponent `α_j = −(B−1) log_B λ_j` of the slowest mode with
    /// a positive coupling.
    pub fn alpha(&self) -> Option<f64> {
        let b = self.base as f64;
        self.lambdas
            .iter()
            .zip(&self.couplings)
            .filter(|(_, c)| **c > 0.0)
            .map(|(l, _)| -(b - 1.0) * l.ln() / b.ln())
            .min_by(f64::total_cmp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesLabel {
    Kernel,
    ApproxCorrelator,
    ExactCorrelator,
}

/// Coefficients indexed from 1: `values[0]` is the `m = 1` (or `n = 1`) term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheorySeries {
    pub label: SeriesLabel,
    pub values: Vec<f64>,
}

impl TheorySeries {
    /// Coefficient at 1-based index `i`.
    pub fn at(&self, i: usize) -> f64 {
        self.values[i - 1]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,value\n");
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{},{:e}", i + 1, v);
        }
        out
    }
}

/// Base-`B` digit sum; `s_B(0) = 0`.
pub fn digit_sum(mut m: u64, base: u64) -> Result<u64> {
    if base < 2 {
        return Err(Error::InvalidInput(format!("base must be ≥ 2, got {base}")));
    }
    let mut s = 0;
    while m > 0 {
        s += m % base;
        m /= base;
    }
    Ok(s)
}

fn jumps(base: u64, depth: Option<usize>, max: u64) -> Vec<u64> {
    let mut out = vec![1];
    let mut j = base;
    while j <= max && depth.is_none_or(|d| out.len() < d) {
        out.push(j);
        j = match j.checked_mul(base) {
            Some(x) => x,
            None => break,
        };
    }
    out
}

/// Fewest forward jumps of sizes `{1, B, …, B^{L−1}}` reaching each
/// displacement `0..=max`, by breadth-first search. `depth = None` allows
/// every power of `B` up to `max`.
pub fn lmin_bfs_table(max: u64, base: u64, depth: Option<usize>) -> Result<Vec<u64>> {
    if base < 2 {
        return Err(Error::InvalidInput(format!("base must be ≥ 2, got {base}")));
    }
    if depth == Some(0) {
        return Err(Error::InvalidInput("depth must be ≥ 1".into()));
    }
    let steps = jumps(base, depth, max);
    let mut dist = vec![u64::MAX; max as usize + 1];
    let mut queue = std::collections::VecDeque::from([0u64]);
    dist[0] = 0;
    while let Some(x) = queue.pop_front() {
        for &s in &steps {
            let y = x + s;
            if y <= max && dist[y as usize] == u64::MAX {
                dist[y as usize] = dist[x as usize] + 1;
                queue.push_back(y);
            }
        }
    }
    Ok(dist)
}

pub fn lmin_bfs_oracle(m: u64, base: u64, depth: Option<usize>) -> Result<u64> {
    Ok(lmin_bfs_table(m, base, depth)?[m as usize])
}

fn box_size(r: u32, base: u64) -> Result<u64> {
    const LIMIT: u64 = 1 << 24;
    match base.checked_pow(r + 1) {
        Some(n) if n <= LIMIT => Ok(n),
        _ => Err(Error::Resource(format!("{base}^{} exceeds 2^24", r + 1))),
    }
}

/// Maximum of `s_B` over `[0, B^{R+1})` and the first argument attaining it.
pub fn max_digit_sum(r: u32, base: u64) -> Result<(u64, u64)> {
    let n = box_size(r, base)?;
    let mut best = (0, 0);
    for m in 0..n {
        let s = digit_sum(m, base)?;
        if s > best.0 {
            best = (s, m);
        }
    }
    Ok(best)
}

/// Exact mean of `s_B` over `[0, B^{R+1})` and the closed form `(B−1)(R+1)/2`.
pub fn average_digit_sum_check(r: u32, base: u64) -> Result<(Ratio<u64>, Ratio<u64>)> {
    let n = box_size(r, base)?;
    let mut total = 0u64;
    for m in 0..n {
        total += digit_sum(m, base)?;
    }
    Ok((Ratio::new(total, n), Ratio::new((base - 1) * (r as u64 + 1), 2)))
}

fn require_mode(spec: &LinearModelSpec, mode: Mode) -> Result<()> {
    spec.validate()?;
    if spec.mode != mode {
        return Err(Error::Config(format!("expected a {mode:?} spec, got {:?}", spec.mode)));
    }
    Ok(())
}

/// `k_m = Σ_j c_j λ_j^{m−1}` for `1 ≤ m ≤ m_max`.
pub fn kernel_vanilla(spec: &LinearModelSpec, m_max: usize) -> Result<TheorySeries> {
    require_mode(spec, Mode::Vanilla)?;
    let values = (1..=m_max)
        .map(|m| {
            spec.lambdas
                .iter()
                .zip(&spec.couplings)
                .map(|(l, c)| c * l.powi(m as i32 - 1))
                .sum()
        })
        .collect();
    Ok(TheorySeries {
        label: SeriesLabel::Kernel,
        values,
    })
}

/// Impulse response of the stacked recursion for one mode: entry `n` of the
/// result is the top-layer state at position `n` after a unit input at
/// position 1, for `n ∈ 0..=len`.
fn impulse_response(lambda: f64, dilations: &[usize], len: usize) -> Vec<f64> {
    let mut h = vec![0.0; len + 1];
    for n in 2..=len {
        h[n] = if n == 2 { 1.0 } else { 0.0 } + lambda * h[n - 1];
    }
    for &s in &dilations[1..] {
        let below = h.clone();
        for n in 0..=len {
            h[n] = below[n] + if n >= s { lambda * h[n - s] } else { 0.0 };
        }
    }
    h
}

/// Exact dilated kernel from the impulse response of the layer recursions.
pub fn kernel_dilated(spec: &LinearModelSpec, m_max: usize) -> Result<TheorySeries> {
    require_mode(spec, Mode::Dilated)?;
    let dil = spec.dilations();
    let mut values = vec![0.0; m_max];
    for (l, c) in spec.lambdas.iter().zip(&spec.couplings) {
        let h = impulse_response(*l, &dil, m_max + 1);
        for (m, v) in values.iter_mut().enumerate() {
            *v += c * h[m + 2];
        }
    }
    Ok(TheorySeries {
        label: SeriesLabel::Kernel,
        values,
    })
}

pub fn kernel(spec: &LinearModelSpec, m_max: usize) -> Result<TheorySeries> {
    match spec.mode {
        Mode::Vanilla => kernel_vanilla(spec, m_max),
        Mode::Dilated => kernel_dilated(spec, m_max),
    }
}

/// First-order correlations `C_1 = β`, `C_n = β Σ_{k<n} k_{n−k} C_k`.
pub fn capp_series(spec: &LinearModelSpec, n_max: usize) -> Result<TheorySeries> {
    let k = kernel(spec, n_max.saturating_sub(1))?;
    Ok(TheorySeries {
        label: SeriesLabel::ApproxCorrelator,
        values: capp_from_kernel(&k.values, spec.beta(), n_max),
    })
}

fn capp_from_kernel(k: &[f64], beta: f64, n_max: usize) -> Vec<f64> {
    let mut c = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        if n == 1 {
            c.push(beta);
            continue;
        }
        // Σ_{k=1}^{n−1} k_{n−k} C_k
        let s: f64 = (1..n).map(|i| k[n - i - 1] * c[i - 1]).sum();
        c.push(beta * s);
    }
    c
}

/// Exact `C_n = E[x_n x_1] − E[x_n] E[x_1]` for `n = 1..=n_sites` under the
/// logistic conditionals `P(x_n = ±1 | x_{<n}) = e^{±o_n} / (2 cosh o_n)`
/// with `o_n = b + Σ_m k_m x_{n−m}`, summed over all `2^{n_sites}` sequences.
pub fn exact_correlator(spec: &LinearModelSpec, n_sites: usize) -> Result<TheorySeries> {
    if n_sites == 0 {
        return Err(Error::InvalidInput("need at least one site".into()));
    }
    if n_sites > MAX_CORRELATOR_SITES {
        return Err(Error::Resource(format!(
            "enumerating 2^{n_sites} sequences exceeds the limit of 2^{MAX_CORRELATOR_SITES}"
        )));
    }
    let k = kernel(spec, n_sites)?.values;
    let mut ex = vec![0.0; n_sites];
    let mut exx1 = vec![0.0; n_sites];
    let mut xs = vec![0.0; n_sites];
    dfs(&k, spec.bias, 0, 1.0, &mut xs, &mut ex, &mut exx1);
    let values = (0..n_sites).map(|n| exx1[n] - ex[n] * ex[0]).collect();
    Ok(TheorySeries {
        label: SeriesLabel::ExactCorrelator,
        values,
    })
}

/// Accumulate `p · E[x_n | prefix]` and `p · x_1 E[x_n | prefix]` at depth `n`.
fn dfs(k: &[f64], b: f64, n: usize, p: f64, xs: &mut [f64], ex: &mut [f64], exx1: &mut [f64]) {
    if n == xs.len() {
        return;
    }
    let o = b + (1..=n).map(|m| k[m - 1] * xs[n - m]).sum::<f64>();
    let t = o.tanh();
    ex[n] += p * t;
    // For n = 0 the partner x_1 is x_n itself and E[x_1²] = 1.
    exx1[n] += if n == 0 { p } else { p * xs[0] * t };
    let up = 0.5 * (1.0 + t);
    for (x, q) in [(1.0, up), (-1.0, 1.0 - up)] {
        if q == 0.0 {
            continue;
        }
        xs[n] = x;
        dfs(k, b, n + 1, p * q, xs, ex, exx1);
    }
}

/// Polynomial coefficients in ascending powers.
fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_eval(p: &[f64], z: Complex64) -> Complex64 {
    p.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, c| acc * z + c)
}

/// Roots of `Σ p_i z^i` from the companion-matrix eigenvalues.
fn poly_roots(p: &[f64]) -> Vec<Complex64> {
    let mut p = p.to_vec();
    while p.len() > 1 && p.last().is_some_and(|c| c.abs() < 1e-300) {
        p.pop();
    }
    let deg = p.len() - 1;
    if deg == 0 {
        return Vec::new();
    }
    let lead = p[deg];
    let mut c = DMatrix::<f64>::zeros(deg, deg);
    for i in 1..deg {
        c[(i, i - 1)] = 1.0;
    }
    for i in 0..deg {
        c[(i, deg - 1)] = -p[i] / lead;
    }
    c.complex_eigenvalues().iter().copied().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularityReport {
    /// Smallest positive real zero of `D(z) = 1 − βK(z)`, if any.
    pub z_star: Option<f64>,
    pub multiplicity: Option<usize>,
    /// `ρ = 1/z_*`.
    pub rho: Option<f64>,
    /// `sup_{|z|=1} |βK(z)| < 1` on the boundary grid.
    pub unit_disk_safe: bool,
    pub sup_beta_k: f64,
    /// `|z_*| = 1` within tolerance: no asymptotic claim is made.
    pub marginal: bool,
}

/// Relative tolerance for grouping companion-matrix roots into one root of
/// higher multiplicity.
pub const ROOT_CLUSTER_TOL: f64 = 1e-5;

/// Dominant positive singularity of the vanilla first-order generating
/// function `C(z) = βz / (1 − βK(z))`, `K(z) = Σ_j c_j z / (1 − λ_j z)`.
pub fn singularity_report(spec: &LinearModelSpec) -> Result<SingularityReport> {
    require_mode(spec, Mode::Vanilla)?;
    let beta = spec.beta();
    // Merge equal eigenvalues and drop silent modes so numerator and
    // denominator of D share no factor.
    let mut modes: Vec<(f64, f64)> = Vec::new();
    for (&l, &c) in spec.lambdas.iter().zip(&spec.couplings) {
        match modes.iter_mut().find(|(m, _)| (m - l).abs() <= 1e-12 * l) {
            Some(entry) => entry.1 += c,
            None => modes.push((l, c)),
        }
    }
    modes.retain(|(_, c)| *c != 0.0);

    let k_of = |z: Complex64| -> Complex64 { modes.iter().map(|(l, c)| c * z / (1.0 - l * z)).sum() };
    let sup_beta_k = (0..UNIT_CIRCLE_GRID)
        .map(|i| {
            let th = 2.0 * std::f64::consts::PI * i as f64 / UNIT_CIRCLE_GRID as f64;
            (beta * k_of(Complex64::from_polar(1.0, th))).norm()
        })
        .fold(0.0, f64::max);

    // P(z) = Π_j (1 − λ_j z) − β Σ_j c_j z Π_{i≠j} (1 − λ_i z)
    let mut p = vec![1.0];
    for (l, _) in &modes {
        p = poly_mul(&p, &[1.0, -l]);
    }
    for (j, (_, c)) in modes.iter().enumerate() {
        let mut t = vec![0.0, -beta * c];
        for (i, (l, _)) in modes.iter().enumerate() {
            if i != j {
                t = poly_mul(&t, &[1.0, -l]);
            }
        }
        for (i, x) in t.iter().enumerate() {
            p[i] += x;
        }
    }

    let roots = poly_roots(&p);
    let positive: Vec<f64> = roots
        .iter()
        .filter(|z| z.re > 0.0 && z.im.abs() <= 1e-7 * z.norm().max(1.0))
        .map(|z| z.re)
        .collect();
    let z_star = positive.iter().copied().min_by(f64::total_cmp);
    let multiplicity = z_star.map(|zs| {
        roots
            .iter()
            .filter(|z| (*z - Complex64::new(zs, 0.0)).norm() <= ROOT_CLUSTER_TOL * zs.max(1.0))
            .count()
    });
    // Polish the reported root against the polynomial (simple roots only).
    let z_star = match (z_star, multiplicity) {
        (Some(z), Some(1)) => Some(newton(&p, z)),
        (z, _) => z,
    };
    Ok(SingularityReport {
        z_star,
        multiplicity,
        rho: z_star.map(|z| 1.0 / z),
        unit_disk_safe: sup_beta_k < 1.0,
        sup_beta_k,
        marginal: z_star.is_some_and(|z| (z - 1.0).abs() < 1e-9),
    })
}

fn newton(p: &[f64], mut z: f64) -> f64 {
    let dp: Vec<f64> = p.iter().enumerate().skip(1).map(|(i, c)| i as f64 * c).collect();
    for _ in 0..20 {
        let f = poly_eval(p, Complex64::new(z, 0.0)).re;
        let d = poly_eval(&dp, Complex64::new(z, 0.0)).re;
        if d == 0.0 {
            break;
        }
        let step = f / d;
        z -= step;
        if step.abs() <= 1e-16 * z.abs() {
            break;
        }
    }
    z
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DecayClass {
    Exponential { rate: f64 },
    PowerLaw { exponent: f64 },
    Undetermined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub class: DecayClass,
    pub r2_exp: Option<f64>,
    pub r2_pow: Option<f64>,
    /// `log C` against `n`: `−rate`.
    pub exp_slope: Option<f64>,
    /// `log C` against `log n`: `−exponent`.
    pub pow_slope: Option<f64>,
    pub n_points: usize,
}

/// Compare exponential and power-law fits of `series` on the 1-based tail
/// `lo..=hi`; values that are not positive normal floats are skipped.
pub fn decay_classifier(series: &TheorySeries, lo: usize, hi: usize) -> DecayFit {
    let hi = hi.min(series.len());
    let mut n = Vec::new();
    let mut logn = Vec::new();
    let mut y = Vec::new();
    for i in lo.max(1)..=hi {
        let v = series.at(i);
        if v.is_finite() && v >= f64::MIN_POSITIVE {
            n.push(i as f64);
            logn.push((i as f64).ln());
            y.push(v.ln());
        }
    }
    if y.len() < MIN_TAIL_POINTS {
        return DecayFit {
            class: DecayClass::Undetermined,
            r2_exp: None,
            r2_pow: None,
            exp_slope: None,
            pow_slope: None,
            n_points: y.len(),
        };
    }
    let (se, _, _, r2e, _) = ols(&n, &y);
    let (sp, _, _, r2p, _) = ols(&logn, &y);
    let class = if r2e >= r2p {
        DecayClass::Exponential { rate: -se }
    } else {
        DecayClass::PowerLaw { exponent: -sp }
    };
    DecayFit {
        class,
        r2_exp: Some(r2e),
        r2_pow: Some(r2p),
        exp_slope: Some(se),
        pow_slope: Some(sp),
        n_points: y.len(),
    }
}

/// JSON report combining the singularity analysis (vanilla), the predicted
/// exponent (dilated) and the tail classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub mode: Mode,
    pub z_star: Option<f64>,
    pub q: Option<usize>,
    pub rho: Option<f64>,
    pub alpha: Option<f64>,
    pub unit_disk_safe: Option<bool>,
    pub classifier: DecayClass,
    pub fit_r2_exp: Option<f64>,
    pub fit_r2_pow: Option<f64>,
    pub epsilon: f64,
    pub weak_coupling_violated: bool,
}

pub fn theory_report(spec: &LinearModelSpec, capp: &TheorySeries, tail: (usize, usize)) -> Result<TheoryReport> {
    spec.validate()?;
    let fit = decay_classifier(capp, tail.0, tail.1);
    let sing = match spec.mode {
        Mode::Vanilla => Some(singularity_report(spec)?),
        Mode::Dilated => None,
    };
    Ok(TheoryReport {
        mode: spec.mode,
        z_star: sing.as_ref().and_then(|s| s.z_star),
        q: sing.as_ref().and_then(|s| s.multiplicity),
        rho: sing.as_ref().and_then(|s| s.rho),
        alpha: match spec.mode {
            Mode::Dilated => spec.alpha(),
            Mode::Vanilla => None,
        },
        unit_disk_safe: sing.as_ref().map(|s| s.unit_disk_safe),
        classifier: fit.class,
        fit_r2_exp: fit.r2_exp,
        fit_r2_pow: fit.r2_pow,
        epsilon: spec.epsilon(),
        weak_coupling_violated: spec.weak_coupling_violated(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn digit_sum_examples() {
        assert_eq!(digit_sum(7, 2).unwrap(), 3);
        assert_eq!(digit_sum(15, 2).unwrap(), 4);
        assert_eq!(digit_sum(9, 3).unwrap(), 1);
        assert_eq!(digit_sum(0, 3).unwrap(), 0);
        assert!(digit_sum(5, 1).is_err());
    }

    #[test]
    fn bfs_oracle_agrees_with_digit_sum() {
        for base in [2u64, 3] {
            let table = lmin_bfs_table(4096, base, None).unwrap();
            for m in 1..=4096u64 {
                assert_eq!(table[m as usize], digit_sum(m, base).unwrap(), "m={m} B={base}");
            }
            assert_eq!(lmin_bfs_oracle(base.pow(5), base, None).unwrap(), 1);
        }
        assert_eq!(lmin_bfs_oracle(37, 2, Some(1)).unwrap(), 37);
    }

    #[test]
    fn corollary_box_max_and_average() {
        for base in [2u64, 3] {
            for r in 0..=10u32 {
                if base.pow(r + 1) > 1 << 24 {
                    assert!(matches!(max_digit_sum(r, base), Err(Error::Resource(_))));
                    continue;
                }
                let (mx, arg) = max_digit_sum(r, base).unwrap();
                assert_eq!(mx, (base - 1) * (r as u64 + 1));
                assert_eq!(arg, base.pow(r + 1) - 1);
                let (mean, expected) = average_digit_sum_check(r, base).unwrap();
                assert_eq!(mean, expected);
            }
        }
        assert_eq!(average_digit_sum_check(3, 2).unwrap().0, Ratio::from_integer(2));
        assert_eq!(average_digit_sum_check(1, 3).unwrap().0, Ratio::from_integer(2));
        assert_eq!(average_digit_sum_check(7, 2).unwrap().0, Ratio::from_integer(4));
    }

    #[test]
    fn validation_mentions_stability() {
        let err = LinearModelSpec::vanilla(vec![1.2], vec![0.1], 0.0).validate().unwrap_err();
        assert!(err.to_string().contains("stable"));
        assert!(LinearModelSpec::vanilla(vec![0.5, 0.2], vec![0.1], 0.0).validate().is_err());
        assert!(LinearModelSpec::dilated(vec![0.5], vec![0.1], 0.0, 1, 2).validate().is_err());
    }

    #[test]
    fn vanilla_kernel_examples() {
        let k = kernel_vanilla(&LinearModelSpec::vanilla(vec![0.5], vec![0.1], 0.0), 3).unwrap();
        assert!(close(k.at(1), 0.1, 1e-15) && close(k.at(3), 0.025, 1e-15));
        let k = kernel_vanilla(&LinearModelSpec::vanilla(vec![0.5], vec![0.0], 0.0), 5).unwrap();
        assert!(k.values.iter().all(|&v| v == 0.0));
        let k = kernel_vanilla(&LinearModelSpec::vanilla(vec![0.5, 0.25], vec![0.1, 0.2], 0.0), 2).unwrap();
        assert!(close(k.at(2), 0.1, 1e-15));
    }

    /// Sum over ordered jump sequences: layer `l` takes `a_l ≥ 0` jumps of
    /// size `B^{l−1}`, weighted by `λ^{Σ a_l}`, with `Σ a_l B^{l−1} = budget`.
    fn path_sum(lambda: f64, dil: &[usize], budget: usize) -> f64 {
        fn rec(lambda: f64, dil: &[usize], rest: usize, jumps: i32) -> f64 {
            match dil.split_first() {
                None => {
                    if rest == 0 {
                        lambda.powi(jumps)
                    } else {
                        0.0
                    }
                }
                Some((&s, tail)) => (0..=rest / s).map(|a| rec(lambda, tail, rest - a * s, jumps + a as i32)).sum(),
            }
        }
        rec(lambda, dil, budget, 0)
    }

    #[test]
    fn dilated_kernel_equals_path_enumeration() {
        let spec = LinearModelSpec::dilated(vec![0.5], vec![0.1], 0.0, 2, 2);
        assert!(close(kernel_dilated(&spec, 3).unwrap().at(3), 0.075, 1e-15));
        for (base, depth) in [(2, 3), (3, 3), (2, 5)] {
            let spec = LinearModelSpec::dilated(vec![0.7, 0.3], vec![0.2, -0.1], 0.3, base, depth);
            let k = kernel_dilated(&spec, 60).unwrap();
            let dil = spec.dilations();
            for m in 1..=60 {
                let expected: f64 = spec
                    .lambdas
                    .iter()
                    .zip(&spec.couplings)
                    .map(|(l, c)| c * path_sum(*l, &dil, m - 1))
                    .sum();
                assert!(close(k.at(m), expected, 1e-13), "B={base} L={depth} m={m}");
            }
        }
    }

    #[test]
    fn depth_one_dilated_is_vanilla() {
        let v = LinearModelSpec::vanilla(vec![0.9, 0.4, 0.66], vec![0.01, -0.2, 0.05], 0.7);
        let d = LinearModelSpec {
            mode: Mode::Dilated,
            ..v.clone()
        };
        let kv = kernel_vanilla(&v, 300).unwrap();
        let kd = kernel_dilated(&d, 300).unwrap();
        for (a, b) in kv.values.iter().zip(&kd.values) {
            assert!(close(*a, *b, 1e-14));
        }
    }

    #[test]
    fn dilated_kernel_lower_bound() {
        let spec = LinearModelSpec::dilated(vec![0.6, 0.9], vec![1e-3, 2e-4], 0.2, 2, 11);
        let k = kernel_dilated(&spec, 2048).unwrap();
        for m in 1..=2048u64 {
            let bound = spec
                .lambdas
                .iter()
                .zip(&spec.couplings)
                .map(|(l, c)| c * l.powi(digit_sum(m - 1, 2).unwrap() as i32))
                .fold(0.0, f64::max);
            assert!(k.at(m as usize) >= bound * (1.0 - 1e-12), "m={m}");
        }
    }

    #[test]
    fn capp_examples() {
        let zero = LinearModelSpec::vanilla(vec![0.5], vec![0.0], 0.4);
        let c = capp_series(&zero, 5).unwrap();
        assert_eq!(c.at(1), zero.beta());
        assert!(c.values[1..].iter().all(|&v| v == 0.0));
        let one = LinearModelSpec::vanilla(vec![0.5], vec![0.1], 0.0);
        let c = capp_series(&one, 3).unwrap();
        assert!(close(c.at(2), 0.1, 1e-15));
        // C_3 = β(k_2 C_1 + k_1 C_2) = 0.05 + 0.01
        assert!(close(c.at(3), 0.06, 1e-15));
    }

    #[test]
    fn exact_correlator_trivial_cases() {
        let c = exact_correlator(&LinearModelSpec::vanilla(vec![0.5], vec![0.0], 0.0), 6).unwrap();
        assert_eq!(c.at(1), 1.0);
        assert!(c.values[1..].iter().all(|v| v.abs() < 1e-15));
        assert!(matches!(
            exact_correlator(&LinearModelSpec::vanilla(vec![0.5], vec![0.1], 0.0), 21),
            Err(Error::Resource(_))
        ));
    }

    /// Brute force over sequences with explicit probabilities.
    fn brute_correlator(spec: &LinearModelSpec, n: usize) -> Vec<f64> {
        let k = kernel(spec, n).unwrap().values;
        let mut ex = vec![0.0; n];
        let mut exx1 = vec![0.0; n];
        for bits in 0..1usize << n {
            let x: Vec<f64> = (0..n).map(|i| if bits >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
            let mut p = 1.0;
            for t in 0..n {
                let o = spec.bias + (1..=t).map(|m| k[m - 1] * x[t - m]).sum::<f64>();
                p *= (x[t] * o).exp() / (2.0 * o.cosh());
            }
            for t in 0..n {
                ex[t] += p * x[t];
                exx1[t] += p * x[t] * x[0];
            }
        }
        (0..n).map(|t| exx1[t] - ex[t] * ex[0]).collect()
    }

    #[test]
    fn exact_correlator_matches_brute_force() {
        for spec in [
            LinearModelSpec::vanilla(vec![0.8, 0.3], vec![0.4, -0.6], 0.5),
            LinearModelSpec::dilated(vec![0.7], vec![0.5], -0.3, 2, 3),
        ] {
            let fast = exact_correlator(&spec, 10).unwrap();
            for (a, b) in fast.values.iter().zip(brute_correlator(&spec, 10)) {
                assert!(close(*a, b, 1e-13));
                assert!(a.abs() <= 2.0);
            }
        }
    }

    #[test]
    fn first_order_error_is_quadratic() {
        let base = LinearModelSpec::vanilla(vec![0.8, 0.5], vec![0.3, 0.2], 0.4);
        for eps in [0.01, 0.005] {
            let spec = base.with_epsilon(eps);
            assert!(close(spec.epsilon(), eps, 1e-15));
            let exact = exact_correlator(&spec, 14).unwrap();
            let approx = capp_series(&spec, 14).unwrap();
            for n in 1..=14 {
                assert!((exact.at(n) - approx.at(n)).abs() <= 10.0 * eps * eps, "eps={eps} n={n}");
            }
        }
    }

    #[test]
    fn single_mode_singularity() {
        let r = singularity_report(&LinearModelSpec::vanilla(vec![0.5], vec![0.1], 0.0)).unwrap();
        assert!(close(r.z_star.unwrap(), 1.0 / 0.6, 1e-12));
        assert_eq!(r.multiplicity, Some(1));
        assert!(r.unit_disk_safe);
        let r = singularity_report(&LinearModelSpec::vanilla(vec![0.5], vec![0.0], 0.0)).unwrap();
        assert_eq!(r.z_star, None);
        assert_eq!(r.rho, None);
    }

    #[test]
    fn repeated_and_silent_modes_do_not_fake_roots() {
        // Equal eigenvalues merge; a zero coupling contributes no pole.
        let a = singularity_report(&LinearModelSpec::vanilla(vec![0.5, 0.5], vec![0.05, 0.05], 0.0)).unwrap();
        assert!(close(a.z_star.unwrap(), 1.0 / 0.6, 1e-12));
        let b = singularity_report(&LinearModelSpec::vanilla(vec![0.5, 0.25], vec![0.0, 0.25], 0.0)).unwrap();
        assert!(close(b.z_star.unwrap(), 2.0, 1e-12));
        assert_eq!(b.multiplicity, Some(1));
    }

    #[test]
    fn double_root_is_detected() {
        // P(z) = 1 − a1 z + a2 z² with a1² = 4 a2 for λ = (0.5, 0.25), c1 = −0.05.
        let c2 = (0.6 - (0.36f64 - 0.16).sqrt()) / 2.0;
        let spec = LinearModelSpec::vanilla(vec![0.5, 0.25], vec![-0.05, c2], 0.0);
        let r = singularity_report(&spec).unwrap();
        assert_eq!(r.multiplicity, Some(2));
        assert!(close(r.z_star.unwrap(), 2.0 / (0.7 + c2), 1e-6));
    }

    #[test]
    fn vanilla_tail_rate_matches_singularity() {
        let mut rng = RngStream::new(17, 0);
        for _ in 0..5 {
            let lambda = rng.uniform(0.6, 0.95);
            let target = rng.uniform(0.3, 0.9);
            let spec = LinearModelSpec::vanilla(vec![lambda], vec![target * (1.0 - lambda)], 0.1);
            let rep = singularity_report(&spec).unwrap();
            let capp = capp_series(&spec, 1000).unwrap();
            let fit = decay_classifier(&capp, 200, 1000);
            let DecayClass::Exponential { rate } = fit.class else {
                panic!("expected exponential decay, got {fit:?}");
            };
            let expected = rep.z_star.unwrap().ln();
            assert!((rate - expected).abs() <= 0.01 * expected, "{rate} vs {expected}");
        }
    }

    #[test]
    fn classifier_examples() {
        let geo = TheorySeries {
            label: SeriesLabel::Kernel,
            values: (1..=500).map(|n| 0.9f64.powi(n)).collect(),
        };
        match decay_classifier(&geo, 100, 500).class {
            DecayClass::Exponential { rate } => assert!(close(rate, -(0.9f64.ln()), 1e-10)),
            c => panic!("{c:?}"),
        }
        let pl = TheorySeries {
            label: SeriesLabel::Kernel,
            values: (1..=500).map(|n| (n as f64).powf(-0.6)).collect(),
        };
        match decay_classifier(&pl, 100, 500).class {
            DecayClass::PowerLaw { exponent } => assert!(close(exponent, 0.6, 1e-10)),
            c => panic!("{c:?}"),
        }
        let short = TheorySeries {
            label: SeriesLabel::Kernel,
            values: vec![0.5; 40],
        };
        assert_eq!(decay_classifier(&short, 1, 40).class, DecayClass::Undetermined);
    }

    #[test]
    fn dilated_capp_prefers_power_law() {
        let spec = LinearModelSpec::dilated(vec![0.8], vec![1.0], 0.0, 2, 11).with_epsilon(0.5);
        let c = capp_series(&spec, 2048).unwrap();
        let fit = decay_classifier(&c, 256, 2048);
        assert!(matches!(fit.class, DecayClass::PowerLaw { .. }), "{fit:?}");
    }
}
