use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sign of the correction term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Push away from tokens the attribute model prefers.
    #[default]
    Suppress,
    /// Push toward them.
    Amplify,
}

pub const DEFAULT_ALPHA: f64 = 5.0;
pub const DEFAULT_TOP_P: f64 = 0.9;
pub const DEFAULT_K_SAMPLES: usize = 25;
pub const DEFAULT_MAX_NEW_TOKENS: usize = 20;

/// Everything decoding needs besides the models and the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSteeringConfig", into = "RawSteeringConfig")]
pub struct SteeringConfig {
    alpha: f64,
    top_p: f64,
    direction: Direction,
    k_samples: usize,
    max_new_tokens: usize,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct RawSteeringConfig {
    #[serde(default = "default_alpha")]
    alpha: f64,
    #[serde(default = "default_top_p")]
    top_p: f64,
    #[serde(default)]
    direction: Direction,
    #[serde(default = "default_k")]
    k_samples: usize,
    #[serde(default = "default_max_new")]
    max_new_tokens: usize,
    seed: u64,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_top_p() -> f64 {
    DEFAULT_TOP_P
}
fn default_k() -> usize {
    DEFAULT_K_SAMPLES
}
fn default_max_new() -> usize {
    DEFAULT_MAX_NEW_TOKENS
}

impl TryFrom<RawSteeringConfig> for SteeringConfig {
    type Error = Error;

    fn try_from(r: RawSteeringConfig) -> Result<Self> {
        SteeringConfig::new(r.alpha, r.top_p, r.direction, r.k_samples, r.max_new_tokens, r.seed)
    }
}

impl From<SteeringConfig> for RawSteeringConfig {
    fn from(c: SteeringConfig) -> Self {
        RawSteeringConfig {
            alpha: c.alpha,
            top_p: c.top_p,
            direction: c.direction,
            k_samples: c.k_samples,
            max_new_tokens: c.max_new_tokens,
            seed: c.seed,
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_finite() && alpha >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("alpha must be finite and >= 0, got {alpha}")))
    }
}

impl SteeringConfig {
    pub fn new(
        alpha: f64,
        top_p: f64,
        direction: Direction,
        k_samples: usize,
        max_new_tokens: usize,
        seed: u64,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        if !(top_p > 0.0 && top_p <= 1.0) {
            return Err(Error::InvalidConfig(format!("top_p must be in (0, 1], got {top_p}")));
        }
        if k_samples == 0 {
            return Err(Error::InvalidConfig("k_samples must be >= 1".into()));
        }
        if max_new_tokens == 0 {
            return Err(Error::InvalidConfig("max_new_tokens must be >= 1".into()));
        }
        Ok(SteeringConfig { alpha, top_p, direction, k_samples, max_new_tokens, seed })
    }

    /// Defaults for everything but the seed: α = 5, p = 0.9, suppress, k = 25,
    /// 20 new tokens.
    pub fn with_seed(seed: u64) -> Self {
        SteeringConfig {
            alpha: DEFAULT_ALPHA,
            top_p: DEFAULT_TOP_P,
            direction: Direction::Suppress,
            k_samples: DEFAULT_K_SAMPLES,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            seed,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn top_p(&self) -> f64 {
        self.top_p
    }
    pub fn direction(&self) -> Direction {
        self.direction
    }
    pub fn k_samples(&self) -> usize {
        self.k_samples
    }
    pub fn max_new_tokens(&self) -> usize {
        self.max_new_tokens
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn set_alpha(mut self, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        self.alpha = alpha;
        Ok(self)
    }

    pub fn set_top_p(self, top_p: f64) -> Result<Self> {
        Self::new(self.alpha, top_p, self.direction, self.k_samples, self.max_new_tokens, self.seed)
    }

    pub fn set_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }

    pub fn set_k_samples(self, k: usize) -> Result<Self> {
        Self::new(self.alpha, self.top_p, self.direction, k, self.max_new_tokens, self.seed)
    }

    pub fn set_max_new_tokens(self, n: usize) -> Result<Self> {
        Self::new(self.alpha, self.top_p, self.direction, self.k_samples, n, self.seed)
    }

    pub fn set_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}
