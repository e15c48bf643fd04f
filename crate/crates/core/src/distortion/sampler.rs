//! Categorical attack sampling over a leveled pool.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AttackKind, AttackSpec, AttackTemplate};
use crate::error::{Error, Result};

/// Slack allowed when checking that the pool mass does not exceed one.
const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    High,
    Medium,
    Low,
}

impl Level {
    pub fn weight(self) -> f64 {
        match self {
            Level::High => 0.3,
            Level::Medium => 0.1,
            Level::Low => 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub template: AttackTemplate,
    pub weight: f64,
}

impl PoolEntry {
    pub fn new(template: &str, weight: f64) -> Result<Self> {
        Ok(Self {
            template: template.parse()?,
            weight,
        })
    }

    pub fn leveled(template: &str, level: Level) -> Result<Self> {
        Self::new(template, level.weight())
    }

    pub fn kind(&self) -> Result<AttackKind> {
        AttackKind::from_name(&self.template.name)
    }
}

/// Serialized form of one pool entry. Exactly one of `level` and `weight`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntryConfig {
    pub attack: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<Level>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub pool: Vec<PoolEntryConfig>,
    #[serde(default = "default_true")]
    pub include_identity: bool,
    /// Attack names removed from the pool, for ablations.
    #[serde(default)]
    pub exclude: Vec<String>,
}

fn default_true() -> bool {
    true
}

impl SamplerConfig {
    pub fn identity_only() -> Self {
        Self {
            pool: Vec::new(),
            include_identity: true,
            exclude: Vec::new(),
        }
    }

    pub fn from_entries(entries: &[(&str, f64)]) -> Self {
        Self {
            pool: entries
                .iter()
                .map(|&(a, w)| PoolEntryConfig {
                    attack: a.into(),
                    level: None,
                    weight: Some(w),
                })
                .collect(),
            include_identity: true,
            exclude: Vec::new(),
        }
    }

    /// Default training pool. Leveled by difficulty (desynchronization high,
    /// common processing medium, mild processing low) and then scaled by 3/4
    /// so the total stays below one, leaving 0.1 for identity.
    pub fn default_pool() -> Self {
        const SCALE: f64 = 0.75;
        let entries = [
            ("tsm:rate=0.8..1.2", Level::High),
            ("pitch:ratio=0.9..1.1", Level::High),
            ("noise:snr=20..40", Level::Medium),
            ("mp3:kbps=64", Level::Medium),
            ("jitter:k=100", Level::Medium),
            ("crop:fraction=0..0.3,position=random", Level::Medium),
            ("amplitude:scale=0.5..1.5", Level::Low),
            ("resample:ratio=0.5..0.9", Level::Low),
            ("requantize:bits=8", Level::Low),
            ("lowpass:cutoff=4000..8000", Level::Low),
        ];
        Self {
            pool: entries
                .iter()
                .map(|&(a, l)| PoolEntryConfig {
                    attack: a.into(),
                    level: None,
                    weight: Some(l.weight() * SCALE),
                })
                .collect(),
            include_identity: true,
            exclude: Vec::new(),
        }
    }

    pub fn build(&self) -> Result<AttackSampler> {
        let mut entries = Vec::with_capacity(self.pool.len());
        for e in &self.pool {
            let weight = match (e.level, e.weight) {
                (Some(l), None) => l.weight(),
                (None, Some(w)) => w,
                _ => {
                    return Err(Error::Config(format!(
                        "pool entry '{}' needs exactly one of level or weight",
                        e.attack
                    )))
                }
            };
            entries.push(PoolEntry::new(&e.attack, weight)?);
        }
        let excluded = self
            .exclude
            .iter()
            .map(|n| AttackKind::from_name(n))
            .collect::<Result<Vec<_>>>()?;
        AttackSampler::new(entries, self.include_identity)?.excluding(&excluded)
    }
}

/// Draws one attack per call. Identity receives the mass not assigned to the
/// pool; with `include_identity` off, pool weights are renormalized instead.
#[derive(Clone, Debug)]
pub struct AttackSampler {
    entries: Vec<PoolEntry>,
    include_identity: bool,
}

impl AttackSampler {
    pub fn new(entries: Vec<PoolEntry>, include_identity: bool) -> Result<Self> {
        let mut mass = 0.0;
        for e in &entries {
            if !(e.weight >= 0.0 && e.weight.is_finite()) {
                return Err(Error::Config(format!(
                    "weight of '{}' must be non-negative, got {}",
                    e.template, e.weight
                )));
            }
            // Reject unparseable templates up front.
            e.template.instantiate(&mut ChaCha8Rng::seed_from_u64(0))?;
            mass += e.weight;
        }
        if mass > 1.0 + MASS_TOLERANCE {
            return Err(Error::Config(format!("attack pool mass {mass} exceeds 1")));
        }
        Ok(Self {
            entries,
            include_identity,
        })
    }

    pub fn identity_only() -> Self {
        Self {
            entries: Vec::new(),
            include_identity: true,
        }
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    fn pool_mass(&self) -> f64 {
        self.entries.iter().map(|e| e.weight).sum()
    }

    /// Probability of drawing each pool entry, in pool order.
    pub fn probabilities(&self) -> Vec<f64> {
        let mass = self.pool_mass();
        let norm = if self.include_identity || mass == 0.0 {
            1.0
        } else {
            mass
        };
        self.entries.iter().map(|e| e.weight / norm).collect()
    }

    pub fn identity_mass(&self) -> f64 {
        (1.0 - self.probabilities().iter().sum::<f64>()).max(0.0)
    }

    /// Drops every entry of the given kinds.
    pub fn excluding(mut self, kinds: &[AttackKind]) -> Result<Self> {
        let mut kept = Vec::new();
        for e in self.entries {
            if !kinds.contains(&e.kind()?) {
                kept.push(e);
            }
        }
        self.entries = kept;
        Ok(self)
    }

    /// Index of the drawn entry, or `None` for identity.
    pub fn draw_index<R: RngCore + ?Sized>(&self, rng: &mut R) -> Option<usize> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in self.probabilities().into_iter().enumerate() {
            acc += p;
            if u < acc {
                return Some(i);
            }
        }
        None
    }

    pub fn sample_with<R: RngCore + ?Sized>(&self, rng: &mut R) -> Result<AttackSpec> {
        match self.draw_index(rng) {
            Some(i) => self.entries[i].template.instantiate(rng),
            None => Ok(AttackSpec::Identity),
        }
    }

    pub fn sample(&self, seed: u64) -> Result<AttackSpec> {
        self.sample_with(&mut ChaCha8Rng::seed_from_u64(seed))
    }
}
