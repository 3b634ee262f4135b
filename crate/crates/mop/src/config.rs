//! JSON experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context;
use mop_core::planted::{LayerShape, PlantedSpec};
use mop_core::prune::{SearchMode, DEFAULT_BUDGET};
use mop_core::Method;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A config invariant violation, reported with the offending field path.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

fn violation(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_domains: usize,
    pub specialists_per_domain: usize,
    pub n_generalists: usize,
    pub duplicate_noise: f32,
    pub domain_separation: f32,
    pub seed: u64,
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub top_k: usize,
}

impl ModelConfig {
    pub fn spec(&self) -> PlantedSpec {
        PlantedSpec {
            n_domains: self.n_domains,
            specialists_per_domain: self.specialists_per_domain,
            n_generalists: self.n_generalists,
            duplicate_noise: self.duplicate_noise,
            domain_separation: self.domain_separation,
            seed: self.seed,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.spec().n_experts()
    }

    pub fn shape(&self) -> LayerShape {
        LayerShape {
            n_experts: self.n_experts(),
            hidden_dim: self.hidden_dim,
            ff_dim: self.ff_dim,
            top_k: self.top_k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub tokens_per_domain: usize,
    pub seed: u64,
}

/// A pruning method as named in configs and on the command line. `enum`
/// picks exhaustive or greedy search from the subset budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodChoice {
    Fixed(Method),
    EnumAuto,
}

impl MethodChoice {
    pub fn resolve(self, n: usize, r: usize, budget: u64) -> Method {
        match self {
            MethodChoice::Fixed(m) => m,
            MethodChoice::EnumAuto => match SearchMode::infer(n, r, budget) {
                SearchMode::Exhaustive => Method::EnumExhaustive,
                SearchMode::Greedy => Method::EnumGreedy,
            },
        }
    }

    pub fn uses_m(self) -> bool {
        matches!(self, MethodChoice::Fixed(m) if m.uses_m())
    }
}

impl std::str::FromStr for MethodChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "enum" {
            return Ok(MethodChoice::EnumAuto);
        }
        s.parse().map(MethodChoice::Fixed).map_err(|_| {
            let names: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
            format!(
                "unknown method `{s}` (expected enum or one of {})",
                names.join(", ")
            )
        })
    }
}

impl fmt::Display for MethodChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodChoice::Fixed(m) => m.fmt(f),
            MethodChoice::EnumAuto => f.write_str("enum"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub method: String,
    pub r: usize,
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_budget() -> u64 {
    DEFAULT_BUDGET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub calibration: SplitConfig,
    pub heldout: SplitConfig,
    pub methods: Vec<MethodEntry>,
    /// Largest number of subsets exhaustive search may evaluate.
    #[serde(default = "default_budget")]
    pub budget: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let entry = |method: &str, m| MethodEntry {
            method: method.into(),
            r: 4,
            m,
            seeds: vec![0],
        };
        Self {
            model: ModelConfig {
                n_domains: 3,
                specialists_per_domain: 2,
                n_generalists: 2,
                duplicate_noise: 0.05,
                domain_separation: 12.0,
                seed: 0,
                hidden_dim: 16,
                ff_dim: 32,
                top_k: 2,
            },
            calibration: SplitConfig {
                tokens_per_domain: 100,
                seed: 1,
            },
            heldout: SplitConfig {
                tokens_per_domain: 100,
                seed: 2,
            },
            methods: vec![
                entry("enum", None),
                entry("random", None),
                entry("frequency", None),
                entry("gvp", Some(1)),
                entry("mop", Some(1)),
            ],
            budget: DEFAULT_BUDGET,
            output_dir: PathBuf::from("mop-out"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    /// Hex SHA-256 of everything that determines the experiment's numbers,
    /// which excludes `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let digest = Sha256::digest(serde_json::to_vec(&c).expect("config serialises"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        if let Err(e) = m.spec().validate() {
            return Err(violation("model", e.to_string()));
        }
        if m.hidden_dim < m.n_domains {
            return Err(violation(
                "model.hidden_dim",
                format!("must be at least n_domains ({})", m.n_domains),
            ));
        }
        if m.ff_dim == 0 {
            return Err(violation("model.ff_dim", "must be at least 1"));
        }
        let n = m.n_experts();
        if m.top_k == 0 || m.top_k > n {
            return Err(violation("model.top_k", format!("must lie in [1, {n}]")));
        }
        for (name, split) in [
            ("calibration", &self.calibration),
            ("heldout", &self.heldout),
        ] {
            if split.tokens_per_domain == 0 {
                return Err(violation(
                    format!("{name}.tokens_per_domain"),
                    "must be at least 1",
                ));
            }
        }
        if self.calibration.seed == self.heldout.seed {
            return Err(violation(
                "calibration.seed",
                "must differ from heldout.seed so the two splits are disjoint draws",
            ));
        }
        if self.budget == 0 {
            return Err(violation("budget", "must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(violation("methods", "must list at least one method"));
        }
        for (i, e) in self.methods.iter().enumerate() {
            let at = |f: &str| format!("methods[{i}].{f}");
            let choice: MethodChoice = e
                .method
                .parse()
                .map_err(|msg| violation(at("method"), msg))?;
            if e.r == 0 || e.r > n {
                return Err(violation(at("r"), format!("must lie in [1, {n}]")));
            }
            match (choice.uses_m(), e.m) {
                (true, Some(mm)) if mm >= e.r => {
                    return Err(violation(
                        at("m"),
                        format!("must be smaller than r ({})", e.r),
                    ))
                }
                (false, Some(_)) => {
                    return Err(violation(
                        at("m"),
                        format!("`{}` does not take m", e.method),
                    ))
                }
                _ => {}
            }
            if e.seeds.is_empty() {
                return Err(violation(at("seeds"), "must list at least one seed"));
            }
        }
        Ok(())
    }
}
