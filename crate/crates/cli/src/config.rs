//! Optional TOML run configuration. Precedence: command-line flags beat
//! config file values beat built-in defaults (the published schedule).

use serde::Deserialize;

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub weights: WeightsSection,
    #[serde(default)]
    pub network: NetworkSection,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out_dir: Option<String>,
    pub optimizer: Option<String>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub warm_start: Option<usize>,
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub decay_factor: Option<f64>,
    pub decay_every: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    pub matching: Option<f64>,
    pub deformed_recon: Option<f64>,
    pub static_recon: Option<f64>,
    pub offset: Option<f64>,
    pub one_to_one: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub encoder_widths: Option<Vec<usize>>,
    pub deform_widths: Option<Vec<usize>>,
    pub offset_hidden: Option<usize>,
    pub gnn_latent: Option<usize>,
    pub gnn_hidden: Option<usize>,
    pub gnn_rounds: Option<usize>,
    pub score_hidden: Option<usize>,
    pub score_prior: Option<f64>,
    pub freeze_universe_topology: Option<bool>,
    pub cond_cap: Option<f64>,
}

pub fn load(path: &std::path::Path) -> Result<FileConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
}
