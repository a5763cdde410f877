//! Experiment configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! source = "synthetic"        # or a path to a MovieLens-style ratings file
//! q = 1.0
//! [data.synthetic]
//! num_users = 2000
//! num_items = 800
//!
//! [model]
//! family = "mf"
//! dim = 32
//!
//! [federation]
//! eta = 1.0
//! round_batch = 256
//! rounds = 500
//!
//! [attack]
//! kind = "pieckuea"
//! malicious_ratio = 0.05
//!
//! [aggregator]
//! kind = "sum"
//!
//! [defense]
//! enabled = false
//!
//! [eval]
//! k = 10
//! every = 10
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{AttackKind, AttackParams};
use crate::defense::{AggregatorSpec, DefenseParams};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::synthetic::SyntheticSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// `"synthetic"` or a ratings file path.
    pub source: String,
    /// Negatives sampled per training positive.
    pub q: f64,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: "synthetic".to_string(),
            q: 1.0,
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl DataConfig {
    pub fn is_synthetic(&self) -> bool {
        self.source == "synthetic"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederationConfig {
    pub eta: f64,
    /// Users selected per round, |U^r|.
    pub round_batch: usize,
    pub rounds: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            eta: 0.3,
            round_batch: 256,
            rounds: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Share of all clients that are malicious, p̃.
    pub malicious_ratio: f64,
    /// Explicit target items; empty selects `num_targets` cold items.
    pub targets: Vec<usize>,
    pub num_targets: usize,
    #[serde(flatten)]
    pub params: AttackParams,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::None,
            malicious_ratio: 0.05,
            targets: Vec::new(),
            num_targets: 1,
            params: AttackParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k: usize,
    pub every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k: 10, every: 10 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub federation: FederationConfig,
    pub attack: AttackConfig,
    pub aggregator: AggregatorSpec,
    pub defense: DefenseParams,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|e| e.context(format!("config {}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let fed = &self.federation;
        if !(fed.eta >= 0.0) || !fed.eta.is_finite() {
            return fail(format!("eta must be finite and >= 0, got {}", fed.eta));
        }
        if fed.round_batch == 0 {
            return fail("round_batch must be >= 1".into());
        }
        if !(self.data.q > 0.0) {
            return fail(format!("q must be > 0, got {}", self.data.q));
        }
        if self.model.dim == 0 {
            return fail("model dim must be >= 1".into());
        }
        if self.model.family == crate::model::ModelFamily::Dl && self.model.hidden.is_empty() {
            return fail("DL model needs at least one hidden layer".into());
        }
        let atk = &self.attack;
        if !(0.0..1.0).contains(&atk.malicious_ratio) {
            return fail(format!(
                "malicious_ratio must be in [0, 1), got {}",
                atk.malicious_ratio
            ));
        }
        if atk.targets.is_empty() && atk.num_targets == 0 {
            return fail("need at least one target item".into());
        }
        if !(atk.params.lambda > 0.0 && atk.params.lambda <= 1.0) {
            return fail(format!(
                "lambda must be in (0, 1], got {}",
                atk.params.lambda
            ));
        }
        if atk.params.uea_batch == 0 {
            return fail("uea_batch must be >= 1".into());
        }
        if atk.params.mined_count == Some(0) {
            return fail("mined_count must be >= 1".into());
        }
        let def = &self.defense;
        if !(def.beta >= 0.0 && def.gamma >= 0.0) {
            return fail("beta and gamma must be >= 0".into());
        }
        if def.mined_count == 0 {
            return fail("defense mined_count must be >= 1".into());
        }
        let agg = &self.aggregator;
        if !(agg.norm_bound > 0.0) {
            return fail("norm_bound must be > 0".into());
        }
        if !(0.0..0.5).contains(&agg.byzantine_fraction) {
            return fail("byzantine_fraction must be in [0, 0.5)".into());
        }
        if self.eval.k == 0 || self.eval.every == 0 {
            return fail("eval k and every must be >= 1".into());
        }
        Ok(())
    }
}
