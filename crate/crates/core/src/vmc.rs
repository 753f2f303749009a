//! Variational Monte Carlo: energy and gradient estimators, Adam, the
//! training loop, checkpoints and run metrics.
//!
//! Every random draw comes from an [`RngStream`] whose stream index is a pure
//! function of (iteration, sample index), and per-sample work is reduced in
//! fixed-size chunks in sample order. Results therefore do not depend on the
//! number of worker threads.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonians::{expectation, local_energy, HamiltonianSpec, PauliTerm};
use crate::numerics::RngStream;
use crate::rnn::{backward_accumulate, dilated_forward, BackwardWorkspace, ModelParams, ModelShape, ParamGrad, Tape};
use crate::wavefunction::{
    amplitude_from_tape, evaluate, log_prob_upstream, phase_upstream, sample_with_tape, SpinConfig, TapeAmplitude,
    MAX_ENUMERATION_SITES,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DNQS";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const METRICS_HEADER: &str = "iter,energy_mean,energy_stderr,grad_norm,seconds";

/// Samples per reduction chunk. Fixed so the summation tree is independent
/// of the thread count.
const REDUCE_CHUNK: usize = 8;

/// Stream-index bases. Training iteration `t`, sample `k` uses `(t << 32) | k`.
pub const EVAL_STREAM_BASE: u64 = 1 << 63;
pub const MEASURE_STREAM_BASE: u64 = 1 << 62;
pub const INIT_STREAM: u64 = u64::MAX;

pub fn training_stream(iteration: usize, sample: usize) -> u64 {
    ((iteration as u64) << 32) | sample as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmcConfig {
    pub hamiltonian: HamiltonianSpec,
    pub shape: ModelShape,
    pub n_samples: usize,
    pub n_samples_eval: usize,
    pub learning_rate: f64,
    pub n_iterations: usize,
    pub seed: u64,
}

impl VmcConfig {
    /// Training hyperparameters of the reference TFIM runs.
    pub fn tfim_defaults(n_sites: usize, field: f64) -> Self {
        Self {
            hamiltonian: HamiltonianSpec::tfim(n_sites, field),
            shape: ModelShape {
                layers: ModelShape::max_layers(n_sites),
                hidden: 32,
                n_sites,
                complex: false,
            },
            n_samples: 100,
            n_samples_eval: 100_000,
            learning_rate: 1e-4,
            n_iterations: 100_000,
            seed: 0,
        }
    }

    /// Training hyperparameters of the reference cluster-state run.
    pub fn cluster_defaults(n_sites: usize) -> Self {
        Self {
            hamiltonian: HamiltonianSpec::cluster(n_sites),
            shape: ModelShape {
                layers: ModelShape::max_layers(n_sites),
                hidden: 256,
                n_sites,
                complex: true,
            },
            n_samples: 100,
            n_samples_eval: 50_000,
            learning_rate: 1e-3,
            n_iterations: 100_000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hamiltonian.validate()?;
        self.shape.validate()?;
        if self.shape.n_sites != self.hamiltonian.n_sites {
            return Err(Error::Config(format!(
                "model has {} sites but the Hamiltonian has {}",
                self.shape.n_sites, self.hamiltonian.n_sites
            )));
        }
        if self.n_samples < 2 || self.n_samples_eval < 2 {
            return Err(Error::Config("sample counts must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.n_samples > u32::MAX as usize {
            return Err(Error::Config("n_samples exceeds the 32-bit stream index".into()));
        }
        Ok(())
    }
}

/// One configuration drawn from `|ψ|²` with the forward tape that produced it
/// and its local energy.
#[derive(Debug, Clone)]
pub struct Sample {
    pub tape: Tape,
    pub local_energy: Complex64,
}

impl Sample {
    pub fn config(&self) -> SpinConfig {
        SpinConfig::new(self.tape.spins().to_vec()).expect("tape spins are ±1")
    }
}

#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub samples: Vec<Sample>,
}

impl SampleBatch {
    pub fn local_energies(&self) -> Vec<Complex64> {
        self.samples.iter().map(|s| s.local_energy).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn sample_one(
    params: &ModelParams,
    terms: &[PauliTerm],
    n_sites: usize,
    seed: u64,
    stream: u64,
) -> Result<Sample> {
    let mut rng = RngStream::new(seed, stream);
    let tape = sample_with_tape(params, n_sites, &mut rng)?;
    let sigma = SpinConfig::new(tape.spins().to_vec())?;
    let e = local_energy(terms, &sigma, &mut TapeAmplitude::new(params, &tape))?;
    Ok(Sample { tape, local_energy: e })
}

/// Draw `n_samples` configurations; sample `k` uses stream `stream_of(k)`.
pub fn sample_batch(
    params: &ModelParams,
    spec: &HamiltonianSpec,
    n_samples: usize,
    seed: u64,
    stream_of: impl Fn(usize) -> u64 + Sync,
) -> Result<SampleBatch> {
    let terms = spec.terms()?;
    let samples = (0..n_samples)
        .into_par_iter()
        .map(|k| sample_one(params, &terms, spec.n_sites, seed, stream_of(k)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleBatch { samples })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyEstimate {
    pub mean: Complex64,
    /// Standard error of the real part's mean.
    pub stderr: f64,
}

/// Sample mean and `std/√n` (unbiased variance of `|E − Ē|`).
pub fn energy_stats(local_energies: &[Complex64]) -> Result<EnergyEstimate> {
    let n = local_energies.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 samples, got {n}")));
    }
    let mean = mean_of(local_energies);
    let var = local_energies.iter().map(|e| (e - mean).norm_sqr()).sum::<f64>() / (n - 1) as f64;
    Ok(EnergyEstimate {
        mean,
        stderr: (var / n as f64).sqrt(),
    })
}

fn ordered_sum(it: impl Iterator<Item = Complex64>) -> Complex64 {
    it.fold(Complex64::new(0.0, 0.0), |a, b| a + b)
}

/// Mean as an offset from the first element, so identical inputs return
/// that value exactly.
fn mean_of(v: &[Complex64]) -> Complex64 {
    let first = v[0];
    first + ordered_sum(v.iter().map(|e| e - first)) / v.len() as f64
}

/// Monte Carlo energy from `n_samples` fresh samples on the evaluation streams.
pub fn estimate_energy(
    params: &ModelParams,
    spec: &HamiltonianSpec,
    n_samples: usize,
    seed: u64,
) -> Result<EnergyEstimate> {
    if n_samples < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 samples, got {n_samples}")));
    }
    // Stream in chunks so large evaluation budgets do not hold every tape.
    const BLOCK: usize = 4096;
    let terms = spec.terms()?;
    let mut energies = Vec::with_capacity(n_samples);
    for start in (0..n_samples).step_by(BLOCK) {
        let end = (start + BLOCK).min(n_samples);
        let block = (start..end)
            .into_par_iter()
            .map(|k| {
                sample_one(params, &terms, spec.n_sites, seed, EVAL_STREAM_BASE | k as u64).map(|s| s.local_energy)
            })
            .collect::<Result<Vec<_>>>()?;
        energies.extend(block);
    }
    energy_stats(&energies)
}

/// `Σ_k w_k · 2 Re[(E_k − Ē) ∂_θ log ψ*(σ_k)]` for arbitrary weights.
fn weighted_gradient(
    params: &ModelParams,
    tapes: &[&Tape],
    local_energies: &[Complex64],
    weights: &[f64],
    baseline: Complex64,
) -> Result<ParamGrad> {
    let n_sites = match tapes.first() {
        Some(t) => t.n_sites(),
        None => return Ok(ParamGrad::zeros(params.len())),
    };
    let complex = params.shape().complex;
    let idx: Vec<usize> = (0..tapes.len()).collect();
    let partials = idx
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; params.len()];
            let mut ws = BackwardWorkspace::new(params.shape(), n_sites);
            for &k in chunk {
                let de = (local_energies[k] - baseline) * (2.0 * weights[k]);
                if de == Complex64::new(0.0, 0.0) {
                    continue;
                }
                // Re[ΔE (½∂logP − i∂φ)] = Re ΔE · ½∂logP + Im ΔE · ∂φ
                let up_p = log_prob_upstream(tapes[k], 0.5 * de.re);
                let up_phi = complex.then(|| phase_upstream(tapes[k], de.im));
                backward_accumulate(params, tapes[k], &up_p, up_phi.as_deref(), &mut g, &mut ws)?;
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = ParamGrad::zeros(params.len());
    for g in partials {
        for (t, x) in total.values.iter_mut().zip(&g) {
            *t += x;
        }
    }
    Ok(total)
}

/// Baseline-subtracted log-derivative estimator `2 Re⟨(E_loc − Ē) O*⟩`.
pub fn estimate_gradient(params: &ModelParams, batch: &SampleBatch) -> Result<ParamGrad> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty sample batch".into()));
    }
    let energies = batch.local_energies();
    let baseline = mean_of(&energies);
    let tapes: Vec<&Tape> = batch.samples.iter().map(|s| &s.tape).collect();
    weighted_gradient(params, &tapes, &energies, &vec![1.0 / n as f64; n], baseline)
}

/// Exact `⟨H⟩` and its parameter gradient by summing over all `2^N`
/// configurations.
pub fn exact_energy_and_gradient(params: &ModelParams, spec: &HamiltonianSpec) -> Result<(f64, ParamGrad)> {
    let n = spec.n_sites;
    if n > MAX_ENUMERATION_SITES {
        return Err(Error::Resource(format!("cannot enumerate 2^{n} configurations")));
    }
    let terms = spec.terms()?;
    let tapes = (0..1usize << n)
        .into_par_iter()
        .map(|idx| dilated_forward(params, SpinConfig::from_index(idx, n).as_slice()))
        .collect::<Result<Vec<_>>>()?;
    let weights: Vec<f64> = tapes.iter().map(|t| amplitude_from_tape(t).log_prob.exp()).collect();
    let energies = tapes
        .par_iter()
        .map(|t| {
            let sigma = SpinConfig::new(t.spins().to_vec())?;
            local_energy(&terms, &sigma, &mut TapeAmplitude::new(params, t))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = ordered_sum(energies.iter().zip(&weights).map(|(e, w)| e * w));
    let refs: Vec<&Tape> = tapes.iter().collect();
    let grad = weighted_gradient(params, &refs, &energies, &weights, mean)?;
    Ok((mean.re, grad))
}

/// Exact `⟨H⟩` by enumeration.
pub fn exact_energy(params: &ModelParams, spec: &HamiltonianSpec) -> Result<f64> {
    let n = spec.n_sites;
    if n > MAX_ENUMERATION_SITES {
        return Err(Error::Resource(format!("cannot enumerate 2^{n} configurations")));
    }
    let psi = (0..1usize << n)
        .into_par_iter()
        .map(|idx| Ok(evaluate(params, &SpinConfig::from_index(idx, n))?.log_psi().exp()))
        .collect::<Result<Vec<Complex64>>>()?;
    expectation(spec, &psi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// Bias-corrected Adam update applied in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    if params.len() != grad.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape("adam_step", params.len(), grad.len()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub energy_mean: f64,
    pub energy_stderr: f64,
    pub grad_norm: f64,
    /// Wall time of the iteration.
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRecord {
    records: Vec<IterationRecord>,
}

impl RunRecord {
    pub fn push(&mut self, r: IterationRecord) {
        self.records.push(r);
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    /// Metrics CSV. With `timing = false` the `seconds` column is left empty
    /// so that reruns produce identical bytes.
    pub fn to_csv(&self, timing: bool) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = write!(out, "{},{:e},{:e},{:e},", r.iter, r.energy_mean, r.energy_stderr, r.grad_norm);
            if timing {
                let _ = write!(out, "{:.6}", r.seconds);
            }
            out.push('\n');
        }
        out
    }
}

/// Everything a checkpoint holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub shape: ModelShape,
    pub seed: u64,
    pub params: Vec<f64>,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(64 + 24 * self.params.len());
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for x in [self.shape.layers, self.shape.hidden, self.shape.n_sites] {
            b.extend_from_slice(&(x as u32).to_le_bytes());
        }
        b.push(self.shape.complex as u8);
        b.extend_from_slice(&self.seed.to_le_bytes());
        for arr in [&self.params, &self.adam.m, &self.adam.v] {
            for x in arr.iter() {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        b.extend_from_slice(&self.adam.step.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(bad("truncated file"));
            }
            let (head, tail) = r.split_at(n);
            r = tail;
            Ok(head)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err(bad("missing DNQS magic bytes"));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
        let version = u32_at(take(4)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                path: path.to_path_buf(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let layers = u32_at(take(4)?) as usize;
        let hidden = u32_at(take(4)?) as usize;
        let n_sites = u32_at(take(4)?) as usize;
        let complex = match take(1)?[0] {
            0 => false,
            1 => true,
            _ => return Err(bad("invalid complex flag")),
        };
        let shape = ModelShape {
            layers,
            hidden,
            n_sites,
            complex,
        };
        shape.validate().map_err(|e| bad(&format!("invalid model shape: {e}")))?;
        let seed = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let len = ModelParams::zeros(shape)?.len();
        let mut arrays = Vec::with_capacity(3);
        for _ in 0..3 {
            let raw = take(8 * len)?;
            arrays.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect::<Vec<_>>(),
            );
        }
        let step = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let v = arrays.pop().expect("three arrays");
        let m = arrays.pop().expect("three arrays");
        let params = arrays.pop().expect("three arrays");
        Ok(Self {
            shape,
            seed,
            params,
            adam: AdamState { m, v, step },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, path)
    }

    pub fn model(&self) -> Result<ModelParams> {
        ModelParams::from_values(self.shape, self.params.clone())
    }
}

/// Periodic checkpointing during [`Trainer::run`].
#[derive(Debug, Clone)]
pub struct CheckpointPolicy {
    pub dir: PathBuf,
    pub every: usize,
}

impl CheckpointPolicy {
    pub fn path_for(&self, iteration: usize) -> PathBuf {
        self.dir.join(format!("checkpoint-{iteration:08}.bin"))
    }
}

/// Training state: parameters, optimizer and metrics.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: VmcConfig,
    params: ModelParams,
    adam: AdamState,
    record: RunRecord,
}

impl Trainer {
    pub fn new(config: VmcConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init_random(config.shape, &mut RngStream::new(config.seed, INIT_STREAM))?;
        let adam = AdamState::new(params.len());
        Ok(Self {
            config,
            params,
            adam,
            record: RunRecord::default(),
        })
    }

    /// Continue from a checkpoint written by the same configuration. The
    /// metrics of earlier iterations are not part of the checkpoint.
    pub fn resume(config: VmcConfig, checkpoint: &Checkpoint) -> Result<Self> {
        config.validate()?;
        if checkpoint.shape != config.shape {
            return Err(Error::Config(format!(
                "checkpoint shape {:?} does not match configured shape {:?}",
                checkpoint.shape, config.shape
            )));
        }
        if checkpoint.seed != config.seed {
            return Err(Error::Config(format!(
                "checkpoint seed {} does not match configured seed {}",
                checkpoint.seed, config.seed
            )));
        }
        Ok(Self {
            params: checkpoint.model()?,
            adam: checkpoint.adam.clone(),
            config,
            record: RunRecord::default(),
        })
    }

    pub fn config(&self) -> &VmcConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    /// Number of completed iterations.
    pub fn iteration(&self) -> usize {
        self.adam.step as usize
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            shape: self.config.shape,
            seed: self.config.seed,
            params: self.params.values().to_vec(),
            adam: self.adam.clone(),
        }
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<IterationRecord> {
        let start = Instant::now();
        let t = self.iteration();
        let batch = sample_batch(
            &self.params,
            &self.config.hamiltonian,
            self.config.n_samples,
            self.config.seed,
            |k| training_stream(t, k),
        )?;
        let stats = energy_stats(&batch.local_energies())?;
        let grad = estimate_gradient(&self.params, &batch)?;
        adam_step(&mut self.adam, self.params.values_mut(), &grad.values, self.config.learning_rate)?;
        let rec = IterationRecord {
            iter: t,
            energy_mean: stats.mean.re,
            energy_stderr: stats.stderr,
            grad_norm: grad.norm(),
            seconds: start.elapsed().as_secs_f64(),
        };
        self.record.push(rec);
        Ok(rec)
    }

    /// Run until `n_iterations` are complete or `max_wall_seconds` elapses,
    /// checkpointing per `policy`. `on_step` sees every iteration record.
    pub fn run(
        &mut self,
        policy: Option<&CheckpointPolicy>,
        max_wall_seconds: Option<f64>,
        mut on_step: impl FnMut(&IterationRecord),
    ) -> Result<()> {
        let start = Instant::now();
        while self.iteration() < self.config.n_iterations {
            if max_wall_seconds.is_some_and(|w| start.elapsed().as_secs_f64() >= w) {
                break;
            }
            let rec = self.step()?;
            on_step(&rec);
            if let Some(p) = policy {
                let done = self.iteration();
                if p.every > 0 && done % p.every == 0 {
                    let path = p.path_for(done);
                    self.checkpoint().save(&path).map_err(|e| match e {
                        Error::Io { path, source, .. } => Error::io_at(path, done, source),
                        other => other,
                    })?;
                }
            }
        }
        Ok(())
    }
}

/// Train from scratch per `config`.
pub fn train(config: VmcConfig, policy: Option<&CheckpointPolicy>) -> Result<(ModelParams, RunRecord)> {
    let mut trainer = Trainer::new(config)?;
    trainer.run(policy, None, |_| {})?;
    Ok((trainer.params, trainer.record))
}
