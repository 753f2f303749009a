//! Autoregressive sampling and amplitude bookkeeping.
//!
//! `ψ(σ) = sqrt(P(σ)) e^{iφ(σ)}` with `P` the product of per-site softmax
//! conditionals and `φ` the sum of per-site `π·softsign` phases. Spin `-1`
//! selects slot 0 of each two-way output, `+1` selects slot 1.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::numerics::{softplus, softsign_pi_grad, softsign_pi_scalar, RngStream};
use crate::rnn::{
    dilated_backward, dilated_forward, forward_from, spin_slot, ModelParams, ParamGrad, Tape,
};

/// Largest chain handled by exhaustive enumeration.
pub const MAX_ENUMERATION_SITES: usize = 20;

/// A configuration of `N ≥ 1` spins, each exactly `±1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SpinConfig {
    spins: Vec<i8>,
}

impl SpinConfig {
    pub fn new(spins: Vec<i8>) -> Result<Self> {
        if spins.is_empty() {
            return Err(Error::InvalidInput("configuration must have at least one spin".into()));
        }
        if let Some(bad) = spins.iter().find(|&&s| s != 1 && s != -1) {
            return Err(Error::InvalidInput(format!("spin value {bad} is not ±1")));
        }
        Ok(Self { spins })
    }

    pub fn all_up(n: usize) -> Self {
        Self { spins: vec![1; n] }
    }

    /// Basis state `index`: bit `i` set means spin `i` is `+1`.
    pub fn from_index(index: usize, n: usize) -> Self {
        Self {
            spins: (0..n).map(|i| if index >> i & 1 == 1 { 1 } else { -1 }).collect(),
        }
    }

    pub fn to_index(&self) -> usize {
        self.spins
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > 0)
            .fold(0, |acc, (i, _)| acc | 1 << i)
    }

    pub fn len(&self) -> usize {
        self.spins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spins.is_empty()
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.spins
    }

    pub fn get(&self, i: usize) -> i8 {
        self.spins[i]
    }

    pub fn flipped(&self, sites: &[usize]) -> Self {
        let mut spins = self.spins.clone();
        for &i in sites {
            spins[i] = -spins[i];
        }
        Self { spins }
    }
}

/// `log P(σ)` and `φ(σ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmplitudeResult {
    pub log_prob: f64,
    pub phase: f64,
}

impl AmplitudeResult {
    /// `log ψ = ½ log P + iφ`.
    pub fn log_psi(&self) -> Complex64 {
        Complex64::new(0.5 * self.log_prob, self.phase)
    }
}

/// Log of the selected softmax entry of a two-way logit pair.
#[inline]
pub(crate) fn log_conditional(logits: &[f64; 2], spin: i8) -> f64 {
    let k = spin_slot(spin);
    -softplus(logits[1 - k] - logits[k])
}

#[inline]
pub(crate) fn conditional_phase(logits: &[f64; 2], spin: i8) -> f64 {
    softsign_pi_scalar(logits[spin_slot(spin)])
}

/// Probability that the next spin is `+1` given its logits.
#[inline]
fn prob_up(logits: &[f64; 2]) -> f64 {
    1.0 / (1.0 + (logits[0] - logits[1]).exp())
}

/// Per-site log-conditionals and phases read off a tape.
pub fn amplitude_from_tape(tape: &Tape) -> AmplitudeResult {
    amplitude_from_site(tape, 0)
}

pub(crate) fn amplitude_from_site(tape: &Tape, start: usize) -> AmplitudeResult {
    let spins = tape.spins();
    let mut log_prob = 0.0;
    let mut phase = 0.0;
    for j in start..tape.n_sites() {
        log_prob += log_conditional(&tape.logits_p()[j], spins[j]);
        if tape.is_complex() {
            phase += conditional_phase(&tape.logits_phi()[j], spins[j]);
        }
    }
    AmplitudeResult { log_prob, phase }
}

/// Draw a configuration by exact ancestral sampling, returning the tape of
/// the forward pass that generated it.
pub fn sample_with_tape(params: &ModelParams, n_sites: usize, rng: &mut RngStream) -> Result<Tape> {
    let shape = params.shape().with_sites(n_sites)?;
    let mut tape = Tape::new(&shape, n_sites);
    forward_from(params, &mut tape, 0, |_, logits| {
        if rng.next_f64() < prob_up(logits) {
            1
        } else {
            -1
        }
    });
    Ok(tape)
}

pub fn sample(params: &ModelParams, n_sites: usize, rng: &mut RngStream) -> Result<SpinConfig> {
    let tape = sample_with_tape(params, n_sites, rng)?;
    Ok(SpinConfig {
        spins: tape.spins().to_vec(),
    })
}

pub fn evaluate(params: &ModelParams, sigma: &SpinConfig) -> Result<AmplitudeResult> {
    let tape = dilated_forward(params, sigma.as_slice())?;
    Ok(amplitude_from_tape(&tape))
}

/// Upstream gradient of `log P` with respect to the probability logits.
pub fn log_prob_upstream(tape: &Tape, scale: f64) -> Vec<[f64; 2]> {
    tape.logits_p()
        .iter()
        .zip(tape.spins())
        .map(|(l, &s)| {
            let up = prob_up(l);
            let k = spin_slot(s);
            let mut d = [-(1.0 - up), -up];
            d[k] += 1.0;
            [scale * d[0], scale * d[1]]
        })
        .collect()
}

/// Upstream gradient of `φ` with respect to the phase logits.
pub fn phase_upstream(tape: &Tape, scale: f64) -> Vec<[f64; 2]> {
    tape.logits_phi()
        .iter()
        .zip(tape.spins())
        .map(|(l, &s)| {
            let k = spin_slot(s);
            let mut d = [0.0; 2];
            d[k] = scale * softsign_pi_grad(l[k]);
            d
        })
        .collect()
}

/// Complex parameter-gradient record: `re + i·im`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrad {
    pub re: ParamGrad,
    pub im: ParamGrad,
}

/// `∂_θ log ψ*(σ) = ½ ∂_θ log P − i ∂_θ φ`.
pub fn grad_log_amplitude(params: &ModelParams, sigma: &SpinConfig) -> Result<ComplexGrad> {
    let tape = dilated_forward(params, sigma.as_slice())?;
    grad_log_amplitude_tape(params, &tape)
}

pub fn grad_log_amplitude_tape(params: &ModelParams, tape: &Tape) -> Result<ComplexGrad> {
    let n = tape.n_sites();
    let zeros = vec![[0.0; 2]; n];
    let re = dilated_backward(params, tape, &log_prob_upstream(tape, 0.5), None)?;
    let im = if params.shape().complex {
        dilated_backward(params, tape, &zeros, Some(&phase_upstream(tape, -1.0)))?
    } else {
        ParamGrad::zeros(params.len())
    };
    Ok(ComplexGrad { re, im })
}

fn check_enumerable(n_sites: usize) -> Result<()> {
    if n_sites == 0 {
        return Err(Error::InvalidInput("need at least one site".into()));
    }
    if n_sites > MAX_ENUMERATION_SITES {
        return Err(Error::Resource(format!(
            "enumerating 2^{n_sites} configurations exceeds the limit of 2^{MAX_ENUMERATION_SITES}"
        )));
    }
    Ok(())
}

/// `log ψ` of every basis state, indexed by [`SpinConfig::to_index`].
pub fn enumerate_amplitudes(params: &ModelParams, n_sites: usize) -> Result<Vec<AmplitudeResult>> {
    check_enumerable(n_sites)?;
    params.shape().with_sites(n_sites)?;
    (0..1usize << n_sites)
        .map(|idx| evaluate(params, &SpinConfig::from_index(idx, n_sites)))
        .collect()
}

/// Exact `P_θ(σ)` of every basis state, indexed by [`SpinConfig::to_index`].
pub fn enumerate_probabilities(params: &ModelParams, n_sites: usize) -> Result<Vec<f64>> {
    Ok(enumerate_amplitudes(params, n_sites)?
        .into_iter()
        .map(|a| a.log_prob.exp())
        .collect())
}

/// Amplitude ratios `ψ(σ')/ψ(σ)` in log space, for configurations `σ'`
/// obtained from a fixed reference `σ` by flipping a set of sites.
pub trait AmplitudeRatio {
    fn n_sites(&self) -> usize;

    /// `log ψ(σ') − log ψ(σ)` where `σ'` is the reference with `flips`
    /// (ascending, distinct) flipped.
    fn log_ratio(&mut self, flips: &[usize]) -> Complex64;
}

/// Ratio source backed by a forward tape: everything before the first
/// flipped site is reused, only the remaining suffix is recomputed.
pub struct TapeAmplitude<'a> {
    params: &'a ModelParams,
    tape: &'a Tape,
    scratch: Option<Tape>,
}

impl<'a> TapeAmplitude<'a> {
    pub fn new(params: &'a ModelParams, tape: &'a Tape) -> Self {
        Self {
            params,
            tape,
            scratch: None,
        }
    }
}

impl AmplitudeRatio for TapeAmplitude<'_> {
    fn n_sites(&self) -> usize {
        self.tape.n_sites()
    }

    fn log_ratio(&mut self, flips: &[usize]) -> Complex64 {
        let Some(&first) = flips.iter().min() else {
            return Complex64::new(0.0, 0.0);
        };
        let orig = self.tape;
        let n = orig.n_sites();
        let mut target = orig.spins().to_vec();
        for &i in flips {
            target[i] = -target[i];
        }
        let scratch = self.scratch.get_or_insert_with(|| orig.clone());
        scratch.copy_prefix_from(orig, first + 1);
        scratch.set_spin(first, target[first]);
        if first + 1 < n {
            forward_from(self.params, scratch, first + 1, |j, _| target[j]);
        }
        let new = amplitude_from_site(scratch, first);
        let old = amplitude_from_site(orig, first);
        Complex64::new(0.5 * (new.log_prob - old.log_prob), new.phase - old.phase)
    }
}

/// Ratio source from an arbitrary amplitude function.
pub struct FnAmplitude<F> {
    sigma: SpinConfig,
    base: Complex64,
    amp_of: F,
}

impl<F: Fn(&SpinConfig) -> AmplitudeResult> FnAmplitude<F> {
    pub fn new(sigma: SpinConfig, amp_of: F) -> Self {
        let base = amp_of(&sigma).log_psi();
        Self { sigma, base, amp_of }
    }
}

impl<F: Fn(&SpinConfig) -> AmplitudeResult> AmplitudeRatio for FnAmplitude<F> {
    fn n_sites(&self) -> usize {
        self.sigma.len()
    }

    fn log_ratio(&mut self, flips: &[usize]) -> Complex64 {
        (self.amp_of)(&self.sigma.flipped(flips)).log_psi() - self.base
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rnn::ModelShape;

    fn shape(layers: usize, hidden: usize, n: usize, complex: bool) -> ModelShape {
        ModelShape {
            layers,
            hidden,
            n_sites: n,
            complex,
        }
    }

    fn random_params(s: ModelShape, seed: u64) -> ModelParams {
        let mut p = ModelParams::zeros(s).unwrap();
        let mut rng = RngStream::new(seed, 0);
        for v in p.values_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        p
    }

    #[test]
    fn spin_config_validation_and_index() {
        assert!(SpinConfig::new(vec![]).is_err());
        assert!(SpinConfig::new(vec![1, 0]).is_err());
        for idx in 0..32 {
            assert_eq!(SpinConfig::from_index(idx, 5).to_index(), idx);
        }
        assert_eq!(SpinConfig::from_index(1, 3).as_slice(), &[1, -1, -1]);
    }

    #[test]
    fn zero_params_uniform_amplitude() {
        let p = ModelParams::zeros(shape(2, 3, 4, true)).unwrap();
        let a = evaluate(&p, &SpinConfig::new(vec![1, -1, -1, 1]).unwrap()).unwrap();
        assert!((a.log_prob - 4.0 * 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(a.phase, 0.0);
        let probs = enumerate_probabilities(&ModelParams::zeros(shape(1, 2, 2, false)).unwrap(), 2).unwrap();
        assert_eq!(probs, vec![0.25; 4]);
    }

    #[test]
    fn zero_params_sample_fair_spins() {
        let p = ModelParams::zeros(shape(2, 3, 4, false)).unwrap();
        let n = 100_000;
        let mut sums = [0i64; 4];
        for k in 0..n {
            let s = sample(&p, 4, &mut RngStream::new(5, k)).unwrap();
            for (acc, &v) in sums.iter_mut().zip(s.as_slice()) {
                *acc += v as i64;
            }
        }
        let sd = 1.0 / (n as f64).sqrt();
        for s in sums {
            assert!((s as f64 / n as f64).abs() < 4.0 * sd);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let p = random_params(shape(2, 3, 6, true), 4);
        let a = sample(&p, 6, &mut RngStream::new(9, 17)).unwrap();
        let b = sample(&p, 6, &mut RngStream::new(9, 17)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn normalization_by_enumeration() {
        for (seed, n) in [(1u64, 1usize), (2, 3), (3, 7), (4, 12)] {
            let layers = ModelShape::max_layers(n).min(3);
            let p = random_params(shape(layers, 3, n, seed % 2 == 0), seed);
            let total: f64 = enumerate_probabilities(&p, n).unwrap().iter().sum();
            assert!((total - 1.0).abs() < 1e-10, "N = {n}: {total}");
        }
    }

    #[test]
    fn sampled_log_prob_matches_evaluate_exactly() {
        let p = random_params(shape(3, 4, 8, true), 12);
        for k in 0..50 {
            let tape = sample_with_tape(&p, 8, &mut RngStream::new(1, k)).unwrap();
            let from_sampling = amplitude_from_tape(&tape);
            let sigma = SpinConfig::new(tape.spins().to_vec()).unwrap();
            let evaluated = evaluate(&p, &sigma).unwrap();
            assert_eq!(from_sampling.log_prob.to_bits(), evaluated.log_prob.to_bits());
            assert_eq!(from_sampling.phase.to_bits(), evaluated.phase.to_bits());
        }
    }

    #[test]
    fn phase_range_and_stoquastic_zero_phase() {
        let pc = random_params(shape(2, 3, 5, true), 3);
        let pr = random_params(shape(2, 3, 5, false), 3);
        for idx in 0..32 {
            let s = SpinConfig::from_index(idx, 5);
            let tape = dilated_forward(&pc, s.as_slice()).unwrap();
            for (l, &sp) in tape.logits_phi().iter().zip(s.as_slice()) {
                assert!(conditional_phase(l, sp).abs() < std::f64::consts::PI);
            }
            assert!(evaluate(&pc, &s).unwrap().phase.abs() < 5.0 * std::f64::consts::PI);
            assert_eq!(evaluate(&pr, &s).unwrap().phase, 0.0);
        }
    }

    #[test]
    fn enumeration_limit() {
        let p = ModelParams::zeros(shape(1, 2, 21, false)).unwrap();
        assert!(matches!(enumerate_probabilities(&p, 21), Err(Error::Resource(_))));
    }

    fn fd_check(p: &ModelParams, sigma: &SpinConfig) {
        let g = grad_log_amplitude(p, sigma).unwrap();
        let h = 1e-5;
        for i in 0..p.len() {
            let mut pp = p.clone();
            pp.values_mut()[i] += h;
            let mut pm = p.clone();
            pm.values_mut()[i] -= h;
            let ap = evaluate(&pp, sigma).unwrap();
            let am = evaluate(&pm, sigma).unwrap();
            let fd_re = 0.5 * (ap.log_prob - am.log_prob) / (2.0 * h);
            let fd_im = -(ap.phase - am.phase) / (2.0 * h);
            for (fd, an) in [(fd_re, g.re.values[i]), (fd_im, g.im.values[i])] {
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                assert!(err <= 1e-6, "param {i}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn log_amplitude_gradient_matches_finite_differences() {
        for (seed, n, layers, hidden) in [(1u64, 4usize, 2usize, 3usize), (2, 6, 3, 2), (3, 5, 1, 4)] {
            let p = random_params(shape(layers, hidden, n, true), seed);
            let sigma = sample(&p, n, &mut RngStream::new(seed, 3)).unwrap();
            fd_check(&p, &sigma);
        }
    }

    #[test]
    fn stoquastic_gradient_has_no_imaginary_part() {
        let p = random_params(shape(2, 3, 4, false), 6);
        let g = grad_log_amplitude(&p, &SpinConfig::new(vec![1, 1, -1, 1]).unwrap()).unwrap();
        assert!(g.im.values.iter().all(|&v| v == 0.0));
        assert!(g.re.values.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn doubling_upstream_doubles_gradient() {
        let p = random_params(shape(2, 3, 4, true), 6);
        let t = dilated_forward(&p, &[1, -1, -1, 1]).unwrap();
        let g1 = dilated_backward(&p, &t, &log_prob_upstream(&t, 0.5), Some(&phase_upstream(&t, 1.0))).unwrap();
        let g2 = dilated_backward(&p, &t, &log_prob_upstream(&t, 1.0), Some(&phase_upstream(&t, 2.0))).unwrap();
        for (a, b) in g1.values.iter().zip(&g2.values) {
            assert!((2.0 * a - b).abs() <= 1e-14 * b.abs().max(1.0));
        }
    }

    #[test]
    fn tape_ratio_matches_full_evaluation() {
        let p = random_params(shape(3, 3, 7, true), 21);
        let sigma = sample(&p, 7, &mut RngStream::new(2, 2)).unwrap();
        let tape = dilated_forward(&p, sigma.as_slice()).unwrap();
        let mut cached = TapeAmplitude::new(&p, &tape);
        let mut direct = FnAmplitude::new(sigma.clone(), |s: &SpinConfig| evaluate(&p, s).unwrap());
        for flips in [vec![0], vec![3], vec![6], vec![2, 4], vec![0, 6], vec![1, 2, 5]] {
            let a = cached.log_ratio(&flips);
            let b = direct.log_ratio(&flips);
            assert!((a - b).norm() < 1e-12, "{flips:?}: {a} vs {b}");
        }
        assert_eq!(cached.log_ratio(&[]), Complex64::new(0.0, 0.0));
    }
}
