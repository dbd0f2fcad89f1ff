//! Run configuration: one JSON document for simulation, tracking and
//! learning. Unknown keys are rejected.
//!
//! All randomness derives from the top-level `seed`: the scenario and the
//! tracker take it verbatim and separate the IMU, measurement and filter
//! draws by ChaCha stream id (1, 2 and 3); EM iteration `t` runs the tracker
//! with seed `seed + t`, and the map initialization uses stream 4.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::filter::{FilterConfig, FilterModels};
use crate::learning::LearnConfig;
use crate::neural::{MapArchitecture, NeuralMap};
use crate::scenario::Scenario;
use crate::signal::{ResponseModel, SignalConfig};

pub const STREAM_MAP_INIT: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalSection {
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub spacing_hz: f64,
    pub antennas: usize,
}

impl Default for SignalSection {
    fn default() -> Self {
        Self { carrier_hz: 6e9, bandwidth_hz: 100e6, spacing_hz: 2e6, antennas: 4 }
    }
}

impl SignalSection {
    /// Uncalibrated model with a half-wavelength ULA.
    pub fn response_model(&self) -> Result<ResponseModel> {
        ResponseModel::with_ula(SignalConfig::new(self.carrier_hz, self.bandwidth_hz, self.spacing_hz, self.antennas)?)
    }
}

/// Map architecture; `extent` defaults to the scenario extent and
/// `gamma_scale` to the prior mean LOS variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapSection {
    pub features: usize,
    pub encodings: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub extent: Option<f64>,
    pub gamma_scale: Option<f64>,
}

impl Default for MapSection {
    fn default() -> Self {
        let a = MapArchitecture::default();
        Self { features: a.features, encodings: a.encodings, hidden1: a.hidden1, hidden2: a.hidden2, extent: None, gamma_scale: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub scenario: Scenario,
    #[serde(default)]
    pub signal: SignalSection,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub models: FilterModels,
    #[serde(default)]
    pub learn: LearnConfig,
    #[serde(default)]
    pub map: MapSection,
}

impl RunConfig {
    /// Parses and validates; the top-level seed overrides the nested ones.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text)?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Format(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.scenario.seed = seed;
        self.filter.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.filter.validate()?;
        self.models.validate()?;
        self.learn.validate()?;
        self.architecture()?.validate()?;
        self.signal.response_model()?;
        if self.scenario.bs_count() == 0 {
            return invalid("scenario needs at least one BS");
        }
        Ok(())
    }

    pub fn response_model(&self) -> Result<ResponseModel> {
        self.signal.response_model()
    }

    pub fn architecture(&self) -> Result<MapArchitecture> {
        let m = &self.map;
        let extent = match m.extent {
            Some(e) => e,
            None => self.scenario.extent()?,
        };
        Ok(MapArchitecture {
            features: m.features,
            encodings: m.encodings,
            hidden1: m.hidden1,
            hidden2: m.hidden2,
            extent,
            gamma_scale: m.gamma_scale.unwrap_or(self.models.priors.los_gamma_mean),
        })
    }

    /// Fresh map initialized inside the scenario bounding box.
    pub fn initial_map(&self) -> Result<NeuralMap> {
        let mut rng = crate::scenario::seeded(self.seed, STREAM_MAP_INIT);
        NeuralMap::init(self.architecture()?, self.scenario.bounding_box()?, &mut rng)
    }
}
