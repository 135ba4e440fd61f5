//! The run configuration shared by all subcommands.

use std::path::Path;

use repaintlab::denoiser::DenoiserConfig;
use repaintlab::diffusion::TrainConfig;
use repaintlab::evalharness::EvalConfig;
use repaintlab::metrics::{EmbedderConfig, EmbedderTrainConfig};
use repaintlab::Error;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            per_class: 500,
            size: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RepaintConfig {
    pub jump: usize,
    pub seed: u64,
}

impl Default for RepaintConfig {
    fn default() -> Self {
        Self { jump: 5, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub embedder: EmbedderConfig,
    pub train: EmbedderTrainConfig,
    /// Seed of the perturbation battery.
    pub seed: u64,
}

/// Every section is optional; missing fields take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub repaint: RepaintConfig,
    pub metrics: MetricsConfig,
    pub evaluate: EvalConfig,
}

impl RunConfig {
    /// Parses a JSON document. Errors carry a JSON pointer to the bad field.
    pub fn from_json(text: &str) -> Result<Self, Error> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = pointer_of(&e.path().to_string());
            Error::config(pointer, e.into_inner().to_string())
        })?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, Error> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| Error::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                Self::from_json(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let c = &self.corpus;
        if c.classes < 2 {
            return Err(Error::config(
                "/corpus/classes",
                "needs at least two classes",
            ));
        }
        if c.per_class == 0 {
            return Err(Error::config("/corpus/per_class", "must be positive"));
        }
        if c.size < 32 {
            return Err(Error::config(
                "/corpus/size",
                "patches must be at least 32 pixels wide",
            ));
        }
        if self.repaint.jump == 0 {
            return Err(Error::config("/repaint/jump", "must be at least 1"));
        }
        self.denoiser.validate()?;
        self.train.validate()?;
        self.metrics.embedder.validate()?;
        self.evaluate.validate()
    }
}

/// `a.b[2].c` as `/a/b/2/c`; the root path `.` maps to the empty pointer.
fn pointer_of(path: &str) -> String {
    if path == "." {
        return String::new();
    }
    path.split('.')
        .flat_map(|seg| {
            let mut parts = Vec::new();
            let mut rest = seg;
            while let Some(open) = rest.find('[') {
                if open > 0 {
                    parts.push(rest[..open].to_string());
                }
                let close = rest[open..].find(']').map_or(rest.len(), |c| open + c);
                parts.push(rest[open + 1..close].to_string());
                rest = &rest[(close + 1).min(rest.len())..];
            }
            if !rest.is_empty() {
                parts.push(rest.to_string());
            }
            parts
        })
        .map(|p| format!("/{}", p.replace('~', "~0").replace('/', "~1")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pointer(text: &str) -> String {
        match RunConfig::from_json(text) {
            Err(Error::Config { pointer, .. }) => pointer,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn shipped_desk_config_is_valid() {
        let cfg = RunConfig::from_json(include_str!("../../../configs/desk.json")).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.denoiser.diffusion_steps, 64);
    }

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_pointer() {
        assert_eq!(
            pointer(r#"{"train": {"learning_rat": 1}}"#),
            "/train/learning_rat"
        );
        assert_eq!(pointer(r#"{"tarin": {}}"#), "/tarin");
        assert_eq!(
            pointer(r#"{"metrics": {"embedder": {"widths": [1, 2, "x", 4]}}}"#),
            "/metrics/embedder/widths/2"
        );
    }

    #[test]
    fn invalid_values_report_their_field() {
        let cfg = RunConfig::from_json(r#"{"train": {"vlb_weight": 3.0}}"#).unwrap();
        match cfg.validate() {
            Err(Error::Config { pointer, .. }) => assert_eq!(pointer, "/train/vlb_weight"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::from_json(r#"{"repaint": {"jump": 3}}"#).unwrap();
        assert_eq!(cfg.repaint.jump, 3);
        assert_eq!(cfg.repaint.seed, 0);
        assert_eq!(cfg.train, TrainConfig::default());
    }
}
