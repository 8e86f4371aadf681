//! Built-in occupation prompt bank: 26 occupations, eight bias axes.

use serde::Deserialize;

use crate::error::ConfigError;
use crate::model::{validate_config, AuditConfig, BiasAxis};

const OCCUPATION_BANK: &str = include_str!("../data/occupation_axes.json");

#[derive(Debug, Clone, Deserialize)]
pub struct OccupationBank {
    pub template: String,
    pub occupations: Vec<String>,
    pub axes: Vec<BiasAxis>,
}

impl OccupationBank {
    pub fn load() -> Self {
        serde_json::from_str(OCCUPATION_BANK).expect("bundled occupation bank parses")
    }

    pub fn prompt_for(&self, occupation: &str) -> String {
        self.template.replace("{occupation}", occupation)
    }

    /// Validated config auditing `occupation` on all eight axes.
    pub fn config_for(&self, occupation: &str) -> Result<AuditConfig, ConfigError> {
        if !self.occupations.iter().any(|o| o == occupation) {
            return Err(ConfigError::single(format!("unknown occupation `{occupation}`")));
        }
        let mut config = AuditConfig::new(self.axes.clone(), self.prompt_for(occupation));
        config.subject = Some(occupation.to_string());
        validate_config(config)
    }
}
