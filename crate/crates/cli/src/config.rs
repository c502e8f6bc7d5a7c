//! Run configuration: a sectioned TOML file.
//!
//! ```toml
//! seed = 7
//!
//! [scenario]
//! n_tasks = 5
//! # dataset = "features.txt"   # a gccd-features v1 file instead of synthetic data
//!
//! [scenario.synthetic]
//! drift = { kind = "rotation", angle_deg = 15.0 }
//!
//! [method]
//! method = "CAMP"              # CAMP | GCD | GCD_FD; other keys override the preset
//! epochs = 40
//!
//! [output]
//! dir = "out"
//! formats = ["json", "csv", "tsv"]
//!
//! [sweep]                      # only read by `gccd sweep`
//! distiller = ["fd", "mlp"]
//! adapter = ["identity", "linear"]
//! ```
//!
//! Unknown keys are rejected in every section. Method fields left out take the
//! preset of the selected method.

use std::path::{Path, PathBuf};

use gccd_core::adaptation::AdapterKind;
use gccd_core::datagen::{self, Scenario, SplitSpec, SyntheticConfig};
use gccd_core::engine::{Distiller, Method, MethodConfig};
use gccd_core::eval::ReportFormat;
use serde::{Deserialize, Serialize};

use crate::{CliError, Phase};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub n_tasks: usize,
    /// Feature file to cut into tasks; synthetic data when absent.
    pub dataset: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    /// Split of a feature file. `split.n_tasks` must agree with `n_tasks`.
    pub split: SplitSpec,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            n_tasks: 5,
            dataset: None,
            synthetic: SyntheticConfig::default(),
            split: SplitSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub formats: Vec<ReportFormat>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("gccd-out"),
            formats: vec![ReportFormat::Json, ReportFormat::Csv, ReportFormat::Tsv],
        }
    }
}

/// Axes of a sweep. Empty axes keep the configured value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub distiller: Vec<Distiller>,
    pub adapter: Vec<AdapterKind>,
    pub alpha: Vec<f64>,
    pub exemplars_per_class: Vec<usize>,
    /// Replicate seeds averaged in every row; the run seed when empty.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    scenario: ScenarioSection,
    #[serde(default)]
    method: toml::Table,
    #[serde(default)]
    output: OutputSection,
    #[serde(default)]
    sweep: SweepSection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: ScenarioSection,
    pub method: MethodConfig,
    pub output: OutputSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenario: ScenarioSection::default(),
            method: MethodConfig::camp(),
            output: OutputSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl RunConfig {
    /// Read and validate a config file. Relative dataset paths resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        let method = method_from_table(raw.method)?;
        let mut scenario = raw.scenario;
        if let Some(p) = &scenario.dataset {
            if p.is_relative() {
                scenario.dataset = Some(base_dir.join(p));
            }
        }
        let cfg = Self {
            seed: raw.seed,
            scenario,
            method,
            output: raw.output,
            sweep: raw.sweep,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Range checks done before any computation.
    pub fn validate(&self) -> Result<(), CliError> {
        let s = &self.scenario;
        if s.n_tasks == 0 {
            return Err(CliError::Config("scenario.n_tasks must be at least 1".into()));
        }
        match &s.dataset {
            Some(path) => {
                if !path.is_file() {
                    return Err(CliError::Config(format!("dataset file {} does not exist", path.display())));
                }
                if s.split.n_tasks != s.n_tasks {
                    return Err(CliError::Config(format!(
                        "scenario.split.n_tasks = {} disagrees with scenario.n_tasks = {}",
                        s.split.n_tasks, s.n_tasks
                    )));
                }
            }
            None => s
                .synthetic
                .validate()
                .map_err(|e| CliError::Config(format!("[scenario.synthetic] {e}")))?,
        }
        self.method
            .validate()
            .map_err(|e| CliError::Config(format!("[method] {e}")))?;
        if self.output.formats.is_empty() {
            return Err(CliError::Config("output.formats is empty".into()));
        }
        if self.sweep.alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(CliError::Config("sweep.alpha values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn build_scenario(&self) -> Result<Scenario, CliError> {
        let s = &self.scenario;
        let built = match &s.dataset {
            Some(path) => datagen::load_feature_dataset(path, &s.split, self.seed),
            None => datagen::make_synthetic_scenario(&s.synthetic, s.n_tasks, self.seed),
        };
        built.map_err(|source| CliError::Runtime {
            phase: Phase::Scenario,
            source,
        })
    }
}

/// Overlay the user's `[method]` keys on the preset of the chosen method.
fn method_from_table(user: toml::Table) -> Result<MethodConfig, CliError> {
    let bad = |e: String| CliError::Config(format!("[method] {e}"));
    let method = match user.get("method") {
        Some(v) => Method::deserialize(v.clone()).map_err(|e| bad(e.to_string()))?,
        None => Method::Camp,
    };
    let preset = MethodConfig::for_method(method);
    let table = toml::Table::try_from(&preset).map_err(|e| bad(e.to_string()))?;
    MethodConfig::deserialize(merge(table, user)).map_err(|e| bad(e.message().to_string()))
}

fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        let v = match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => toml::Value::Table(merge(b, o)),
            (_, v) => v,
        };
        base.insert(k, v);
    }
    base
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, CliError> {
        RunConfig::parse(text, Path::new("."))
    }

    #[test]
    fn empty_file_is_the_camp_default() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn method_preset_then_overrides() {
        let cfg = parse("[method]\nmethod = \"GCD\"\nepochs = 3\n").unwrap();
        assert_eq!(cfg.method, MethodConfig { epochs: 3, ..MethodConfig::gcd() });
        let cfg = parse("[method]\nadapter = { kind = \"mlp\" }\n").unwrap();
        let adapter = cfg.method.adapter.unwrap();
        assert_eq!(adapter.kind, AdapterKind::Mlp);
        assert_eq!(adapter.width, 384);
    }

    #[test]
    fn unknown_keys_name_the_key() {
        for text in ["bogus = 1", "[method]\nlearning_rate = 1.0", "[scenario.synthetic]\nwidth = 3", "[output]\nfoo = 1"] {
            let err = parse(text).unwrap_err();
            assert_eq!(err.exit_code(), 2);
            let key = text.rsplit('\n').next().unwrap().split(' ').next().unwrap();
            assert!(err.to_string().contains(key), "{err}");
        }
    }

    #[test]
    fn ranges_checked_up_front() {
        assert!(parse("[method]\nbeta = 1.5").is_err());
        assert!(parse("[scenario]\nn_tasks = 0").is_err());
        assert!(parse("[method]\nmethod = \"GCD\"\ndistiller = \"mlp\"").is_err());
        assert!(parse("[sweep]\nalpha = [2.0]").is_err());
    }

    #[test]
    fn missing_dataset_is_a_config_error() {
        let err = parse("[scenario]\ndataset = \"/nonexistent/features.txt\"").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
