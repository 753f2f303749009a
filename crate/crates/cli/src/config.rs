//! Flat TOML run configuration with per-benchmark presets.

use std::fs;
use std::path::{Path, PathBuf};

use dnqs_core::hamiltonians::{HamiltonianKind, HamiltonianSpec};
use dnqs_core::observables::FitWindow;
use dnqs_core::rnn::ModelShape;
use dnqs_core::theory::{LinearModelSpec, Mode};
use dnqs_core::vmc::VmcConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Keys a config file may set. Anything left out comes from the preset of
/// the chosen benchmark.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    benchmark: Option<HamiltonianKind>,
    n_sites: Option<usize>,
    field: Option<f64>,
    layers: Option<usize>,
    hidden: Option<usize>,
    complex: Option<bool>,
    n_samples: Option<usize>,
    n_samples_eval: Option<usize>,
    learning_rate: Option<f64>,
    n_iterations: Option<usize>,
    seed: Option<u64>,
    checkpoint_every: Option<usize>,
    max_wall_seconds: Option<f64>,
    fit_window: Option<FitWindow>,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub benchmark: HamiltonianKind,
    pub n_sites: usize,
    pub field: f64,
    pub layers: usize,
    pub hidden: usize,
    pub complex: bool,
    pub n_samples: usize,
    pub n_samples_eval: usize,
    pub learning_rate: f64,
    pub n_iterations: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_wall_seconds: Option<f64>,
    pub fit_window: FitWindow,
}

impl RunConfig {
    /// Reference hyperparameters for each benchmark.
    pub fn preset(kind: HamiltonianKind) -> Self {
        let vmc = match kind {
            HamiltonianKind::TfimPbc => VmcConfig::tfim_defaults(100, 1.0),
            HamiltonianKind::ClusterEs => {
                let mut c = VmcConfig::cluster_defaults(64);
                c.shape.layers = 6;
                c
            }
        };
        Self {
            benchmark: kind,
            n_sites: vmc.shape.n_sites,
            field: vmc.hamiltonian.field,
            layers: vmc.shape.layers,
            hidden: vmc.shape.hidden,
            complex: vmc.shape.complex,
            n_samples: vmc.n_samples,
            n_samples_eval: vmc.n_samples_eval,
            learning_rate: vmc.learning_rate,
            n_iterations: vmc.n_iterations,
            seed: vmc.seed,
            checkpoint_every: 1000,
            max_wall_seconds: None,
            fit_window: FitWindow::default(),
        }
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", origin.display())))?;
        let mut c = Self::preset(raw.benchmark.unwrap_or(HamiltonianKind::TfimPbc));
        if let Some(n) = raw.n_sites {
            c.n_sites = n;
            // Depth follows the chain length unless set explicitly.
            c.layers = ModelShape::max_layers(n);
        }
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = raw.$f { c.$f = v; } )* };
        }
        take!(field, layers, hidden, complex, n_samples, n_samples_eval, learning_rate, n_iterations, seed, checkpoint_every, fit_window);
        c.max_wall_seconds = raw.max_wall_seconds.or(c.max_wall_seconds);
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = read_file(path)?;
        Self::parse(&text, path)
    }

    pub fn hamiltonian(&self) -> HamiltonianSpec {
        HamiltonianSpec {
            kind: self.benchmark,
            n_sites: self.n_sites,
            field: self.field,
        }
    }

    pub fn vmc(&self) -> VmcConfig {
        VmcConfig {
            hamiltonian: self.hamiltonian(),
            shape: ModelShape {
                layers: self.layers,
                hidden: self.hidden,
                n_sites: self.n_sites,
                complex: self.complex,
            },
            n_samples: self.n_samples,
            n_samples_eval: self.n_samples_eval,
            learning_rate: self.learning_rate,
            n_iterations: self.n_iterations,
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::read(path, e))
}

/// Theory pipeline input: the linear model plus series lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    #[serde(flatten)]
    pub model: LinearModelSpec,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    /// 1-based tail range for the decay classifier.
    pub tail: Option<(usize, usize)>,
    /// Sequence length of the brute-force correlator; 0 disables it.
    #[serde(default = "default_exact_sites")]
    pub exact_sites: usize,
    /// Largest displacement for the digit-sum/BFS oracle.
    #[serde(default = "default_oracle_max")]
    pub oracle_max: u64,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_max() -> usize {
    2048
}

fn default_exact_sites() -> usize {
    14
}

fn default_oracle_max() -> u64 {
    4096
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            model: LinearModelSpec::dilated(vec![0.8], vec![1.0], 0.0, 2, 11).with_epsilon(0.05),
            n_max: default_n_max(),
            tail: None,
            exact_sites: default_exact_sites(),
            oracle_max: default_oracle_max(),
            seed: 0,
        }
    }
}

impl TheoryConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = read_file(path)?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn tail(&self) -> (usize, usize) {
        self.tail.unwrap_or(match self.model.mode {
            Mode::Vanilla => (200, self.n_max.min(1000)),
            Mode::Dilated => (256, self.n_max),
        })
    }
}

/// `<out>/<label>-<seed>-<unix seconds>`, with a numeric suffix if taken.
pub fn run_dir(out: &Path, label: &str, seed: u64) -> Result<PathBuf, CliError> {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let base = out.join(format!("{label}-{seed}-{stamp}"));
    let mut dir = base.clone();
    let mut k = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}.{k}", base.display()));
        k += 1;
    }
    fs::create_dir_all(&dir).map_err(|e| CliError::write(&dir, e))?;
    Ok(dir)
}
