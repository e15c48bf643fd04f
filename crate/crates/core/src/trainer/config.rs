use serde::{Deserialize, Serialize};

use crate::distortion::sampler::SamplerConfig;
use crate::distortion::tsm::PhaseMode;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_e: f64,
    pub lambda_w: f64,
    /// Weight of the adversarial term.
    pub lambda_adv: f64,
    pub learning_rate: f64,
    /// Discriminator learning rate; the codec rate when unset.
    pub disc_learning_rate: Option<f64>,
    /// Codec learning rate from the start of stage 2; unchanged when unset.
    pub stage2_learning_rate: Option<f64>,
    pub batch_size: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Leave stage 1 early once the clean accuracy averaged over the last
    /// `exit_window` steps reaches this value.
    pub stage1_exit_acc: Option<f64>,
    pub exit_window: usize,
    /// Global gradient-norm limit for the codec update.
    pub grad_clip: Option<f64>,
    pub train_discriminator: bool,
    pub phase_mode: PhaseMode,
    pub sampler: SamplerConfig,
    pub seed: u64,
    /// Steps between metric records; every step when 1.
    pub log_every: usize,
    /// Steps between checkpoints when a checkpoint directory is given.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_e: 1.0,
            lambda_w: 0.01,
            lambda_adv: 0.01,
            learning_rate: 1e-5,
            disc_learning_rate: None,
            stage2_learning_rate: None,
            batch_size: 4,
            stage1_steps: 2000,
            stage2_steps: 2000,
            stage1_exit_acc: Some(0.99),
            exit_window: 20,
            grad_clip: None,
            train_discriminator: true,
            phase_mode: PhaseMode::default(),
            sampler: SamplerConfig::default_pool(),
            seed: 0,
            log_every: 1,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_e", self.lambda_e),
            ("lambda_w", self.lambda_w),
            ("lambda_adv", self.lambda_adv),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        let lrs = [Some(self.learning_rate), self.disc_learning_rate, self.stage2_learning_rate];
        if lrs.iter().flatten().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 || self.exit_window == 0 {
            return Err(Error::Config(
                "log_every, checkpoint_every and exit_window must be positive".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        if let Some(a) = self.stage1_exit_acc {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("stage1_exit_acc must lie in [0, 1], got {a}")));
            }
        }
        self.sampler.build().map(|_| ())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_toml() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.lambda_e, c.lambda_w, c.lambda_adv), (1.0, 0.01, 0.01));
        assert_eq!(c.learning_rate, 1e-5);
        let text = toml::to_string(&c).unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), c);
        let partial = TrainConfig::from_toml("lambda_w = 1.0\nseed = 7\n").unwrap();
        assert_eq!(partial.lambda_w, 1.0);
        assert_eq!(partial.seed, 7);
        assert!(TrainConfig::from_toml("lambda_e = -1.0").is_err());
        assert!(TrainConfig::from_toml("learning_rate = 0.0").is_err());
        assert!(TrainConfig::from_toml("unknown = 1").is_err());
    }
}
