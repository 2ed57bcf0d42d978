use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("mix must be three integer percentages summing to 100, got {0:?}")]
    Mix(String),
    #[error("load factor must be positive, got {0}")]
    LoadFactor(f64),
    #[error("{0} must be at least 1")]
    Zero(&'static str),
    #[error("prefill of {nodes} keys does not fit in a key range of {keys}")]
    KeyRange { nodes: u64, keys: u64 },
    #[error("unknown {what} {value:?}")]
    Unknown { what: &'static str, value: String },
}

/// Operation mix in percent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mix {
    pub lookup: u8,
    pub insert: u8,
    pub delete: u8,
}

impl Mix {
    pub const READ_MOSTLY: Mix = Mix {
        lookup: 90,
        insert: 5,
        delete: 5,
    };
    pub const BALANCED: Mix = Mix {
        lookup: 34,
        insert: 33,
        delete: 33,
    };

    pub fn new(lookup: u8, insert: u8, delete: u8) -> Result<Mix, ConfigError> {
        if lookup as u16 + insert as u16 + delete as u16 != 100 {
            return Err(ConfigError::Mix(format!("{lookup},{insert},{delete}")));
        }
        Ok(Mix {
            lookup,
            insert,
            delete,
        })
    }

    /// Insert and delete rates match, so the population stays put.
    pub fn is_steady(&self) -> bool {
        self.insert == self.delete
    }
}

impl FromStr for Mix {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Mix, ConfigError> {
        let parts: Vec<u8> = s
            .split([',', '/'])
            .map(|p| p.trim().parse::<u8>())
            .collect::<Result<_, _>>()
            .map_err(|_| ConfigError::Mix(s.into()))?;
        match parts[..] {
            [l, i, d] => Mix::new(l, i, d).map_err(|_| ConfigError::Mix(s.into())),
            _ => Err(ConfigError::Mix(s.into())),
        }
    }
}

impl fmt::Display for Mix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.lookup, self.insert, self.delete)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RebuildMode {
    Off,
    /// Rebuild back and forth between the initial and the alternate bucket
    /// count for the whole run. With `same_hash` both tables use the initial
    /// hash function.
    Continuous {
        alt_buckets: usize,
        same_hash: bool,
    },
}

impl RebuildMode {
    pub fn name(&self) -> &'static str {
        match self {
            RebuildMode::Off => "off",
            RebuildMode::Continuous { .. } => "continuous",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pinning {
    PerformanceFirst,
    None,
}

impl FromStr for Pinning {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Pinning, ConfigError> {
        match s {
            "perf-first" => Ok(Pinning::PerformanceFirst),
            "none" => Ok(Pinning::None),
            _ => Err(ConfigError::Unknown {
                what: "pinning",
                value: s.into(),
            }),
        }
    }
}

impl fmt::Display for Pinning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pinning::PerformanceFirst => "perf-first",
            Pinning::None => "none",
        })
    }
}

/// One benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub mix: Mix,
    /// Prefilled nodes per bucket (α).
    pub load_factor: f64,
    /// Initial bucket count (β).
    pub buckets: usize,
    /// Keys are drawn uniformly from `0..key_range`.
    pub key_range: u64,
    pub threads: usize,
    pub duration: Duration,
    pub rebuild: RebuildMode,
    pub seed: u64,
    pub pinning: Pinning,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            mix: Mix::READ_MOSTLY,
            load_factor: 2.0,
            buckets: 1024,
            key_range: 10_000_000,
            threads: 1,
            duration: Duration::from_secs(10),
            rebuild: RebuildMode::Off,
            seed: 1,
            pinning: Pinning::None,
        }
    }
}

impl WorkloadConfig {
    /// Number of keys inserted before the run, α·β rounded to nearest.
    pub fn prefill_count(&self) -> u64 {
        (self.load_factor * self.buckets as f64).round() as u64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        Mix::new(self.mix.lookup, self.mix.insert, self.mix.delete)?;
        if !(self.load_factor > 0.0 && self.load_factor.is_finite()) {
            return Err(ConfigError::LoadFactor(self.load_factor));
        }
        if self.buckets == 0 {
            return Err(ConfigError::Zero("buckets"));
        }
        if self.threads == 0 {
            return Err(ConfigError::Zero("threads"));
        }
        if self.key_range == 0 {
            return Err(ConfigError::Zero("key range"));
        }
        if let RebuildMode::Continuous { alt_buckets: 0, .. } = self.rebuild {
            return Err(ConfigError::Zero("alternate buckets"));
        }
        let nodes = self.prefill_count();
        if nodes > self.key_range {
            return Err(ConfigError::KeyRange {
                nodes,
                keys: self.key_range,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_parsing() {
        assert_eq!("90,5,5".parse::<Mix>().unwrap(), Mix::READ_MOSTLY);
        assert_eq!("34/33/33".parse::<Mix>().unwrap(), Mix::BALANCED);
        assert!("90,5".parse::<Mix>().is_err());
        assert!("90,5,6".parse::<Mix>().is_err());
        assert_eq!(Mix::READ_MOSTLY.to_string(), "90/5/5");
    }

    #[test]
    fn prefill_must_fit_key_range() {
        let c = WorkloadConfig {
            load_factor: 2.0,
            buckets: 4,
            key_range: 7,
            ..Default::default()
        };
        assert_eq!(
            c.validate(),
            Err(ConfigError::KeyRange { nodes: 8, keys: 7 })
        );
        let c = WorkloadConfig { key_range: 8, ..c };
        assert!(c.validate().is_ok());
        assert_eq!(c.prefill_count(), 8);
    }

    #[test]
    fn rejects_degenerate_values() {
        let base = WorkloadConfig::default();
        assert!(WorkloadConfig {
            threads: 0,
            ..base.clone()
        }
        .validate()
        .is_err());
        assert!(WorkloadConfig {
            buckets: 0,
            ..base.clone()
        }
        .validate()
        .is_err());
        assert!(WorkloadConfig {
            load_factor: 0.0,
            ..base.clone()
        }
        .validate()
        .is_err());
        assert!(WorkloadConfig {
            rebuild: RebuildMode::Continuous {
                alt_buckets: 0,
                same_hash: false
            },
            ..base
        }
        .validate()
        .is_err());
    }
}
