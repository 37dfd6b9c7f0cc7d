//! Experiment files: one TOML table whose keys mirror the columns of the
//! training and GDD hyperparameter tables.
//!
//! Lists in a file run from the input side to the output side, the way the
//! tables print them ("0.08-0.04" is `[0.08, 0.04]`, input weights first).
//! The library itself numbers layers from the output, so lists are reversed
//! on the way in.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Hyperparams, Mode};
use crate::numerics::ActivationKind;
use crate::phases::Algorithm;
use crate::training::{NetSpec, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Discrete,
    RealTime,
}

/// One learning-rate setting: a single value for every layer, or one per
/// layer (input side first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EtaSpec {
    Uniform(f64),
    PerLayer(Vec<f64>),
}

impl EtaSpec {
    /// Rates in library order, output side first.
    pub fn expand(&self, n_rates: usize) -> Result<Vec<f64>> {
        match self {
            EtaSpec::Uniform(v) => Ok(vec![*v; n_rates]),
            EtaSpec::PerLayer(v) if v.len() == n_rates => Ok(v.iter().rev().copied().collect()),
            EtaSpec::PerLayer(v) => Err(Error::Config(format!(
                "expected {n_rates} learning rates, got {}",
                v.len()
            ))),
        }
    }
}

fn default_input_size() -> usize {
    784
}
fn default_output_size() -> usize {
    10
}
fn default_batch_size() -> usize {
    20
}
fn default_convergence_tol() -> f64 {
    1e-6
}
fn default_samples() -> usize {
    20
}
fn default_epochs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub activation: ActivationKind,
    pub mode: ModeName,
    /// Real-time step size.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(rename = "T")]
    pub t_free: usize,
    #[serde(rename = "K")]
    pub k_nudge: usize,
    pub beta: f64,
    #[serde(default)]
    pub random_beta: bool,
    /// Input side first; the first rate drives the input weights.
    pub learning_rates: EtaSpec,
    /// Initial angle in degrees between forward and backward weights (C-VF).
    #[serde(default)]
    pub psi: Option<f64>,
    /// Hidden layer sizes, input side first.
    pub hidden: Vec<usize>,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default = "default_output_size")]
    pub output_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Leading slice of the training set; all of it when absent.
    #[serde(default)]
    pub train_size: Option<usize>,
    #[serde(default)]
    pub test_size: Option<usize>,
    /// Enables the rescaled C-EP update with `η_tiny = lr_tiny_scale · η`.
    #[serde(default)]
    pub lr_tiny_scale: Option<f64>,
    #[serde(default = "default_convergence_tol")]
    pub convergence_tol: f64,
    /// β values swept by `gdd`; defaults to `[beta]`.
    #[serde(default)]
    pub betas: Option<Vec<f64>>,
    /// Learning-rate settings swept by `gdd`; defaults to `[learning_rates]`.
    #[serde(default)]
    pub etas: Option<Vec<EtaSpec>>,
    /// Number of samples averaged by `gdd`.
    #[serde(default = "default_samples")]
    pub samples: usize,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn n_rates(&self) -> usize {
        self.hidden.len() + 1
    }

    fn validate(&self) -> Result<()> {
        self.mode()?;
        self.learning_rates.expand(self.n_rates())?;
        if let Some(etas) = &self.etas {
            for e in etas {
                e.expand(self.n_rates())?;
            }
        }
        if self.algorithm != Algorithm::Cvf && self.psi.is_some_and(|p| p != 0.0) {
            return Err(Error::Config("psi only applies to cvf".into()));
        }
        if self.hidden.contains(&0) || self.input_size == 0 || self.output_size == 0 {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn mode(&self) -> Result<Mode> {
        match (self.mode, self.epsilon) {
            (ModeName::Discrete, None) => Ok(Mode::DiscreteTime),
            (ModeName::Discrete, Some(_)) => Err(Error::Config("epsilon needs mode = \"real_time\"".into())),
            (ModeName::RealTime, Some(epsilon)) => Ok(Mode::RealTime { epsilon }),
            (ModeName::RealTime, None) => Err(Error::Config("real_time mode needs epsilon".into())),
        }
    }

    pub fn net_spec(&self) -> Result<NetSpec> {
        let mut layer_sizes = vec![self.output_size];
        layer_sizes.extend(self.hidden.iter().rev());
        Ok(NetSpec {
            layer_sizes,
            input_size: self.input_size,
            activation: self.activation,
            mode: self.mode()?,
            tied: !self.algorithm.needs_untied(),
        })
    }

    pub fn hyperparams(&self) -> Result<Hyperparams> {
        Ok(Hyperparams {
            t_free: self.t_free,
            k_nudge: self.k_nudge,
            beta: self.beta,
            lr: self.learning_rates.expand(self.n_rates())?,
            random_beta: self.random_beta,
            lr_tiny_scale: self.lr_tiny_scale,
            convergence_tol: self.convergence_tol,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            algorithm: self.algorithm,
            hyper: self.hyperparams()?,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            init_angle_deg: match self.algorithm {
                Algorithm::Cvf => Some(self.psi.unwrap_or(0.0)),
                _ => None,
            },
        })
    }

    pub fn sweep_betas(&self) -> Vec<f64> {
        self.betas.clone().unwrap_or_else(|| vec![self.beta])
    }

    pub fn sweep_etas(&self) -> Result<Vec<Vec<f64>>> {
        match &self.etas {
            Some(etas) => etas.iter().map(|e| e.expand(self.n_rates())).collect(),
            None => Ok(vec![self.learning_rates.expand(self.n_rates())?]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EP_1H: &str = r#"
algorithm = "ep"
activation = "sigmoid"
mode = "discrete"
T = 30
K = 10
beta = 0.1
random_beta = false
epochs = 30
learning_rates = [0.08, 0.04]
hidden = [512]
"#;

    #[test]
    fn training_row_parses() {
        let cfg = ExperimentConfig::from_toml(EP_1H).unwrap();
        assert_eq!(cfg.activation, ActivationKind::ShiftedSigmoid);
        assert_eq!(cfg.batch_size, 20);
        let spec = cfg.net_spec().unwrap();
        assert_eq!(spec.layer_sizes, vec![10, 512]);
        assert_eq!(spec.input_size, 784);
        assert!(spec.tied);
        let h = cfg.hyperparams().unwrap();
        assert_eq!((h.t_free, h.k_nudge, h.beta), (30, 10, 0.1));
        assert_eq!(h.lr, vec![0.04, 0.08]);
        assert_eq!(cfg.train_config().unwrap().init_angle_deg, None);
    }

    #[test]
    fn gdd_row_with_sweep() {
        let text = r#"
algorithm = "cvf"
activation = "tanh"
mode = "real_time"
epsilon = 0.08
T = 800
K = 80
beta = 0.01
learning_rates = 0.0
etas = [0.0, 1.5e-5]
psi = 45.0
hidden = [512]
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.mode().unwrap(), Mode::RealTime { epsilon: 0.08 });
        assert_eq!(cfg.sweep_etas().unwrap(), vec![vec![0.0; 2], vec![1.5e-5; 2]]);
        assert_eq!(cfg.sweep_betas(), vec![0.01]);
        assert!(!cfg.net_spec().unwrap().tied);
        assert_eq!(cfg.train_config().unwrap().init_angle_deg, Some(45.0));
    }

    #[test]
    fn lists_are_reversed_into_library_order() {
        let text = EP_1H
            .replace("[0.08, 0.04]", "[0.2, 0.05, 0.005]")
            .replace("[512]", "[300, 100]");
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.net_spec().unwrap().layer_sizes, vec![10, 100, 300]);
        assert_eq!(cfg.hyperparams().unwrap().lr, vec![0.005, 0.05, 0.2]);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(ExperimentConfig::from_toml(&format!("{EP_1H}\nbogus = 1")).is_err());
        let wrong_rates = EP_1H.replace("[0.08, 0.04]", "[0.08]");
        assert!(ExperimentConfig::from_toml(&wrong_rates).is_err());
        let no_eps = EP_1H.replace("\"discrete\"", "\"real_time\"");
        assert!(ExperimentConfig::from_toml(&no_eps).is_err());
        assert!(matches!(
            ExperimentConfig::load(Path::new("/nonexistent/x.cfg")),
            Err(Error::Io { .. })
        ));
    }
}
