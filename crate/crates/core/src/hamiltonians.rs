//! Periodic transverse-field Ising chain and the cluster-state
//! (entanglement-swapping) Hamiltonian: local energies and exact
//! diagonalization.
//!
//! Conventions (sites 0-based below):
//! * TFIM: `H = −Σ_{i<N} Z_i Z_{(i+1) mod N} − g Σ_i X_i`. For `N = 2` both
//!   bonds are the same pair and count twice.
//! * Cluster: `H = −Σ_{k=1}^{N−3} X_{k−1} Z_k X_{k+1} − Z_0 X_1 − X_{N−2} X_{N−1}
//!   − X_{N−3} Z_{N−2} Z_{N−1}`, boundary terms exactly as printed in the
//!   source Hamiltonian, without symmetrization.

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, RngStream};
use crate::wavefunction::{AmplitudeRatio, SpinConfig};

/// Largest chain accepted by [`exact_diag`].
pub const MAX_EXACT_SITES: usize = 16;
/// Up to this size the dense matrix is diagonalized directly.
const DENSE_LIMIT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HamiltonianKind {
    #[serde(alias = "tfim")]
    TfimPbc,
    #[serde(alias = "cluster")]
    ClusterEs,
}

impl fmt::Display for HamiltonianKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HamiltonianKind::TfimPbc => "tfim",
            HamiltonianKind::ClusterEs => "cluster",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianSpec {
    pub kind: HamiltonianKind,
    pub n_sites: usize,
    /// Transverse field `g`; ignored for the cluster Hamiltonian.
    pub field: f64,
}

impl HamiltonianSpec {
    pub fn tfim(n_sites: usize, field: f64) -> Self {
        Self {
            kind: HamiltonianKind::TfimPbc,
            n_sites,
            field,
        }
    }

    pub fn cluster(n_sites: usize) -> Self {
        Self {
            kind: HamiltonianKind::ClusterEs,
            n_sites,
            field: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            HamiltonianKind::TfimPbc => {
                if self.n_sites < 2 {
                    return Err(Error::Config("periodic TFIM needs at least 2 sites".into()));
                }
                if !(self.field >= 0.0 && self.field.is_finite()) {
                    return Err(Error::Config(format!("field g = {} must be finite and ≥ 0", self.field)));
                }
            }
            HamiltonianKind::ClusterEs => {
                if self.n_sites < 4 {
                    return Err(Error::Config(format!(
                        "cluster Hamiltonian needs N ≥ 4 for distinct boundary terms, got {}",
                        self.n_sites
                    )));
                }
            }
        }
        Ok(())
    }

    /// Whether the Hamiltonian is stoquastic in the σ^z basis.
    pub fn is_stoquastic(&self) -> bool {
        matches!(self.kind, HamiltonianKind::TfimPbc)
    }

    /// The operator as a list of Pauli strings built from X and Z only.
    pub fn terms(&self) -> Result<Vec<PauliTerm>> {
        self.validate()?;
        let n = self.n_sites;
        let mut terms = Vec::new();
        match self.kind {
            HamiltonianKind::TfimPbc => {
                for i in 0..n {
                    terms.push(PauliTerm::new(-1.0, &[], &[i, (i + 1) % n]));
                }
                if self.field != 0.0 {
                    for i in 0..n {
                        terms.push(PauliTerm::new(-self.field, &[i], &[]));
                    }
                }
            }
            HamiltonianKind::ClusterEs => {
                for k in 1..=n - 3 {
                    terms.push(PauliTerm::new(-1.0, &[k - 1, k + 1], &[k]));
                }
                terms.push(PauliTerm::new(-1.0, &[1], &[0]));
                terms.push(PauliTerm::new(-1.0, &[n - 2, n - 1], &[]));
                terms.push(PauliTerm::new(-1.0, &[n - 3], &[n - 2, n - 1]));
            }
        }
        Ok(terms)
    }
}

/// `coeff · Π_{x_sites} X · Π_{z_sites} Z` with X and Z on distinct sites.
/// A repeated Z site (the `N = 2` periodic bond) squares to the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct PauliTerm {
    pub coeff: f64,
    pub x_sites: Vec<usize>,
    pub z_sites: Vec<usize>,
}

impl PauliTerm {
    fn new(coeff: f64, x: &[usize], z: &[usize]) -> Self {
        let mut x_sites = x.to_vec();
        x_sites.sort_unstable();
        Self {
            coeff,
            x_sites,
            z_sites: z.to_vec(),
        }
    }

    fn flip_mask(&self) -> usize {
        self.x_sites.iter().fold(0, |m, &i| m | 1 << i)
    }
}

/// `Σ_{σ'} H_{σσ'} ψ(σ')/ψ(σ)` for an arbitrary Pauli-term Hamiltonian.
/// The Z factors are read on the flipped configuration `σ'`, which coincides
/// with `σ` on Z sites because no term has X and Z on the same site.
pub fn local_energy(
    terms: &[PauliTerm],
    sigma: &SpinConfig,
    amp: &mut impl AmplitudeRatio,
) -> Result<Complex64> {
    if amp.n_sites() != sigma.len() {
        return Err(Error::shape("local_energy amplitude source", sigma.len(), amp.n_sites()));
    }
    let s = sigma.as_slice();
    let mut diag = 0.0;
    let mut off = Complex64::new(0.0, 0.0);
    for t in terms {
        let z: f64 = t.z_sites.iter().map(|&i| s[i] as f64).product();
        if t.x_sites.is_empty() {
            diag += t.coeff * z;
        } else {
            off += t.coeff * z * amp.log_ratio(&t.x_sites).exp();
        }
    }
    Ok(off + diag)
}

fn check_kind(spec: &HamiltonianSpec, kind: HamiltonianKind, sigma: &SpinConfig) -> Result<()> {
    if spec.kind != kind {
        return Err(Error::Config(format!("expected a {kind} Hamiltonian, got {}", spec.kind)));
    }
    if sigma.len() != spec.n_sites {
        return Err(Error::shape("local energy configuration", spec.n_sites, sigma.len()));
    }
    Ok(())
}

pub fn local_energy_tfim(
    spec: &HamiltonianSpec,
    sigma: &SpinConfig,
    amp: &mut impl AmplitudeRatio,
) -> Result<Complex64> {
    check_kind(spec, HamiltonianKind::TfimPbc, sigma)?;
    local_energy(&spec.terms()?, sigma, amp)
}

pub fn local_energy_cluster(
    spec: &HamiltonianSpec,
    sigma: &SpinConfig,
    amp: &mut impl AmplitudeRatio,
) -> Result<Complex64> {
    check_kind(spec, HamiltonianKind::ClusterEs, sigma)?;
    local_energy(&spec.terms()?, sigma, amp)
}

/// Sign of the Z string on basis state `b` (bit set means spin +1).
#[inline]
fn z_sign(b: usize, z_sites: &[usize]) -> f64 {
    z_sites
        .iter()
        .map(|&i| if b >> i & 1 == 1 { 1.0 } else { -1.0 })
        .product()
}

/// `y = H x` on the full `2^N` basis.
fn apply(terms: &[(f64, usize, Vec<usize>)], x: &[f64], y: &mut [f64]) {
    for (b, yb) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (coeff, mask, z) in terms {
            let bp = b ^ mask;
            acc += coeff * z_sign(bp, z) * x[bp];
        }
        *yb = acc;
    }
}

fn compiled(spec: &HamiltonianSpec) -> Result<Vec<(f64, usize, Vec<usize>)>> {
    Ok(spec
        .terms()?
        .into_iter()
        .map(|t| (t.coeff, t.flip_mask(), t.z_sites.clone()))
        .collect())
}

/// Dense `2^N × 2^N` matrix in the basis of [`SpinConfig::from_index`].
pub fn dense_matrix(spec: &HamiltonianSpec) -> Result<DMatrix<f64>> {
    if spec.n_sites > 12 {
        return Err(Error::Resource(format!(
            "dense matrix for N = {} would need 4^N entries",
            spec.n_sites
        )));
    }
    let terms = compiled(spec)?;
    let dim = 1usize << spec.n_sites;
    let mut h = DMatrix::zeros(dim, dim);
    for b in 0..dim {
        for (coeff, mask, z) in &terms {
            let bp = b ^ mask;
            h[(b, bp)] += coeff * z_sign(bp, z);
        }
    }
    Ok(h)
}

#[derive(Debug, Clone)]
pub struct GroundState {
    pub energy: f64,
    /// Normalized real ground vector (both Hamiltonians are real symmetric).
    pub vector: Vec<f64>,
}

/// Ground energy and vector. Dense symmetric eigendecomposition for
/// `N ≤ 10`, Lanczos with full reorthogonalization beyond.
pub fn exact_diag(spec: &HamiltonianSpec) -> Result<GroundState> {
    spec.validate()?;
    if spec.n_sites > MAX_EXACT_SITES {
        return Err(Error::Resource(format!(
            "exact diagonalization limited to N ≤ {MAX_EXACT_SITES}, got {}",
            spec.n_sites
        )));
    }
    if spec.n_sites <= DENSE_LIMIT {
        dense_ground_state(spec)
    } else {
        lanczos_ground_state(spec)
    }
}

pub fn dense_ground_state(spec: &HamiltonianSpec) -> Result<GroundState> {
    let h = dense_matrix(spec)?;
    let eig = SymmetricEigen::new(h);
    let (k, &energy) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty spectrum");
    Ok(GroundState {
        energy,
        vector: eig.eigenvectors.column(k).iter().copied().collect(),
    })
}

pub fn lanczos_ground_state(spec: &HamiltonianSpec) -> Result<GroundState> {
    spec.validate()?;
    if spec.n_sites > MAX_EXACT_SITES {
        return Err(Error::Resource(format!("Lanczos limited to N ≤ {MAX_EXACT_SITES}")));
    }
    let terms = compiled(spec)?;
    let dim = 1usize << spec.n_sites;
    let max_iter = dim.min(400);
    let mut rng = RngStream::new(0x5eed, 0);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let nrm = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= nrm);

    let mut basis: Vec<Vec<f64>> = vec![v];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut w = vec![0.0; dim];
    let mut last = f64::INFINITY;
    let mut ritz = (0.0, Vec::new());
    for it in 0..max_iter {
        apply(&terms, &basis[it], &mut w);
        let a = dot(&w, &basis[it]);
        alpha.push(a);
        // full reorthogonalization, twice
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&w, q);
                w.iter_mut().zip(q).for_each(|(wi, qi)| *wi -= c * qi);
            }
        }
        let b = dot(&w, &w).sqrt();
        let k = alpha.len();
        if (k % 5 == 0) || b < 1e-12 || k == max_iter {
            let t = DMatrix::from_fn(k, k, |i, j| {
                if i == j {
                    alpha[i]
                } else if i + 1 == j {
                    beta[i]
                } else if j + 1 == i {
                    beta[j]
                } else {
                    0.0
                }
            });
            let eig = SymmetricEigen::new(t);
            let (idx, &e) = eig
                .eigenvalues
                .iter()
                .enumerate()
                .min_by(|x, y| x.1.total_cmp(y.1))
                .expect("nonempty");
            let y: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
            let residual = (b * y[k - 1]).abs();
            ritz = (e, y);
            if b < 1e-12 || (residual < 1e-10 && (e - last).abs() < 1e-13) {
                break;
            }
            last = e;
        }
        if b < 1e-12 {
            break;
        }
        beta.push(b);
        basis.push(w.iter().map(|x| x / b).collect());
    }
    let (energy, y) = ritz;
    let mut vector = vec![0.0; dim];
    for (coef, q) in y.iter().zip(&basis) {
        vector.iter_mut().zip(q).for_each(|(vi, qi)| *vi += coef * qi);
    }
    let nrm = dot(&vector, &vector).sqrt();
    vector.iter_mut().for_each(|x| *x /= nrm);
    Ok(GroundState { energy, vector })
}

/// `⟨ψ|H|ψ⟩/⟨ψ|ψ⟩` for a dense complex state via the sparse term action.
pub fn expectation(spec: &HamiltonianSpec, psi: &[Complex64]) -> Result<f64> {
    let terms = compiled(spec)?;
    let dim = 1usize << spec.n_sites;
    if psi.len() != dim {
        return Err(Error::shape("expectation state", dim, psi.len()));
    }
    let re: Vec<f64> = psi.iter().map(|c| c.re).collect();
    let im: Vec<f64> = psi.iter().map(|c| c.im).collect();
    let mut hre = vec![0.0; dim];
    let mut him = vec![0.0; dim];
    apply(&terms, &re, &mut hre);
    apply(&terms, &im, &mut him);
    let num = dot(&re, &hre) + dot(&im, &him);
    let den = dot(&re, &re) + dot(&im, &im);
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavefunction::{AmplitudeResult, FnAmplitude};

    fn uniform(_: &SpinConfig) -> AmplitudeResult {
        AmplitudeResult {
            log_prob: 0.0,
            phase: 0.0,
        }
    }

    #[test]
    fn tfim_local_energy_examples() {
        let s = SpinConfig::all_up(4);
        let e0 = local_energy_tfim(&HamiltonianSpec::tfim(4, 0.0), &s, &mut FnAmplitude::new(s.clone(), uniform)).unwrap();
        assert_eq!(e0, Complex64::new(-4.0, 0.0));
        let e1 = local_energy_tfim(&HamiltonianSpec::tfim(4, 1.0), &s, &mut FnAmplitude::new(s.clone(), uniform)).unwrap();
        assert_eq!(e1, Complex64::new(-8.0, 0.0));
    }

    #[test]
    fn cluster_has_no_diagonal_part() {
        let spec = HamiltonianSpec::cluster(6);
        assert!(spec.terms().unwrap().iter().all(|t| !t.x_sites.is_empty()));
        assert_eq!(spec.terms().unwrap().len(), 6);
    }

    #[test]
    fn kind_and_size_checks() {
        let s = SpinConfig::all_up(3);
        let mut amp = FnAmplitude::new(s.clone(), uniform);
        assert!(local_energy_cluster(&HamiltonianSpec::cluster(3), &s, &mut amp).is_err());
        assert!(local_energy_cluster(&HamiltonianSpec::tfim(3, 1.0), &s, &mut amp).is_err());
        assert!(matches!(
            exact_diag(&HamiltonianSpec::tfim(20, 1.0)),
            Err(Error::Resource(_))
        ));
    }

    #[test]
    fn classical_ferromagnet() {
        assert!((exact_diag(&HamiltonianSpec::tfim(3, 0.0)).unwrap().energy + 3.0).abs() < 1e-12);
        // two identical bonds on a periodic pair
        assert!((exact_diag(&HamiltonianSpec::tfim(2, 0.0)).unwrap().energy + 2.0).abs() < 1e-12);
    }

    #[test]
    fn dense_matrix_is_symmetric() {
        for spec in [HamiltonianSpec::tfim(5, 0.7), HamiltonianSpec::cluster(6)] {
            let h = dense_matrix(&spec).unwrap();
            assert_eq!(h, h.transpose());
        }
    }

    #[test]
    fn lanczos_matches_dense() {
        for spec in [HamiltonianSpec::tfim(8, 1.0), HamiltonianSpec::cluster(8), HamiltonianSpec::tfim(9, 0.4)] {
            let d = dense_ground_state(&spec).unwrap();
            let l = lanczos_ground_state(&spec).unwrap();
            assert!((d.energy - l.energy).abs() < 1e-10, "{spec:?}");
            let psi: Vec<Complex64> = l.vector.iter().map(|&x| Complex64::new(x, 0.0)).collect();
            assert!((expectation(&spec, &psi).unwrap() - d.energy).abs() < 1e-8);
        }
    }

    #[test]
    fn cluster_ground_energy_is_minus_n() {
        assert!((exact_diag(&HamiltonianSpec::cluster(8)).unwrap().energy + 8.0).abs() < 1e-10);
        assert!((exact_diag(&HamiltonianSpec::cluster(12)).unwrap().energy + 12.0).abs() < 1e-9);
    }

    #[test]
    fn ed_vector_local_energy_is_constant() {
        // Local energies of an exact eigenstate equal the eigenvalue wherever ψ ≠ 0.
        let spec = HamiltonianSpec::tfim(6, 1.0);
        let gs = exact_diag(&spec).unwrap();
        let amp = |s: &SpinConfig| {
            let a = gs.vector[s.to_index()];
            AmplitudeResult {
                log_prob: 2.0 * a.abs().ln(),
                phase: if a < 0.0 { std::f64::consts::PI } else { 0.0 },
            }
        };
        for idx in [0usize, 5, 17, 63] {
            let s = SpinConfig::from_index(idx, 6);
            let e = local_energy_tfim(&spec, &s, &mut FnAmplitude::new(s.clone(), amp)).unwrap();
            assert!((e.re - gs.energy).abs() < 1e-9 && e.im.abs() < 1e-9);
        }
    }

    #[test]
    fn sampled_mean_matches_quadratic_form_by_enumeration() {
        use crate::rnn::{dilated_forward, ModelParams, ModelShape};
        use crate::wavefunction::{enumerate_amplitudes, TapeAmplitude};
        let n = 6;
        for (k, spec) in (0..20).flat_map(|k| [(k, HamiltonianSpec::tfim(n, 0.8)), (k, HamiltonianSpec::cluster(n))]) {
            let shape = ModelShape { layers: 2, hidden: 5, n_sites: n, complex: true };
            let params = ModelParams::init_random(shape, &mut RngStream::new(k, 11)).unwrap();
            let amps = enumerate_amplitudes(&params, n).unwrap();
            let psi: Vec<Complex64> = amps.iter().map(|a| a.log_psi().exp()).collect();
            let exact = expectation(&spec, &psi).unwrap();
            let mut mean = Complex64::new(0.0, 0.0);
            for (idx, a) in amps.iter().enumerate() {
                let s = SpinConfig::from_index(idx, n);
                let tape = dilated_forward(&params, s.as_slice()).unwrap();
                let e = local_energy(&spec.terms().unwrap(), &s, &mut TapeAmplitude::new(&params, &tape)).unwrap();
                mean += a.log_prob.exp() * e;
            }
            assert!((mean.re - exact).abs() < 1e-9, "{spec:?} {} vs {exact}", mean.re);
            assert!(mean.im.abs() < 1e-9);
        }
    }

    fn free_fermion_energy(n: usize, g: f64) -> f64 {
        -(1..=n)
            .map(|m| {
                let k = (2 * m - 1) as f64 * std::f64::consts::PI / n as f64;
                (1.0 + g * g - 2.0 * g * k.cos()).sqrt()
            })
            .sum::<f64>()
    }

    #[test]
    fn tfim_matches_free_fermions() {
        let e = exact_diag(&HamiltonianSpec::tfim(10, 1.0)).unwrap().energy;
        assert!((e - free_fermion_energy(10, 1.0)).abs() < 1e-9);
        assert!((e + 12.7849).abs() < 1e-4);
        for (n, g) in [(8, 0.5), (9, 2.0), (14, 1.0), (12, 0.3)] {
            let e = exact_diag(&HamiltonianSpec::tfim(n, g)).unwrap().energy;
            assert!((e - free_fermion_energy(n, g)).abs() < 1e-9, "N={n} g={g}: {e}");
        }
    }
}
