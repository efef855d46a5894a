//! Experiment plan assembly from a config file and command-line overrides.

use std::path::{Path, PathBuf};

use cdand::pipeline::{ExperimentPlan, ScenarioSource};
use cdand::position::{FilterConfig, Method};
use cdand::scenario::{FileFormat, Preset};
use clap::Args;
use serde::Deserialize;

use crate::CliError;

pub const DEFAULT_PRESET: Preset = Preset::InfDhFr1;
pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_DROPS: usize = 1000;

/// Flat plan file (TOML or JSON). Every key is optional; flags win over the file.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub preset: Option<Preset>,
    /// Measurement file, relative paths resolved against the plan file.
    pub input: Option<PathBuf>,
    pub label: Option<String>,
    pub seed: Option<u64>,
    pub drops: Option<usize>,
    pub folds: Option<usize>,
    pub fold_by_instance: Option<bool>,
    pub lambda: Option<f64>,
    pub re_ratio: Option<f64>,
    pub rs_ratio: Option<f64>,
    #[serde(alias = "K")]
    pub components: Option<usize>,
    pub eps: Option<f64>,
    pub t_max: Option<usize>,
    pub cem_eps: Option<f64>,
    pub cem_max_iter: Option<usize>,
    pub methods: Option<Vec<Method>>,
    pub subset_size: Option<usize>,
    pub sd_threshold: Option<f64>,
    pub threads: Option<usize>,
}

impl PlanFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read plan file {}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut file: PlanFile = if is_json {
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        };
        if let (Some(input), Some(dir)) = (&file.input, path.parent()) {
            if input.is_relative() {
                file.input = Some(dir.join(input));
            }
        }
        Ok(file)
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct PlanArgs {
    /// Plan file (TOML, or JSON by extension) with flat keys named like the flags.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Synthetic scenario preset: inf-sh-fr1, inf-sh-fr2, inf-dh-fr1 or inf-dh-fr2.
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Measurement file (.csv or .json) used instead of synthetic data.
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Seed of every random stream (data, folds, mixture fits).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of UE drops to synthesize.
    #[arg(long)]
    pub drops: Option<usize>,
    /// Cross-validation folds for the soft-decision survey fit.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Keep the drops of one scenario instantiation in the same fold.
    #[arg(long)]
    pub fold_by_instance: bool,
    /// Dispersion multiplier of the adaptive hard-decision threshold.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Fraction of PELs kept by residual filtering, applied to every method.
    #[arg(long)]
    pub re_ratio: Option<f64>,
    /// Fraction of PELs kept by range-sum filtering, applied to every method.
    #[arg(long)]
    pub rs_ratio: Option<f64>,
    /// Gaussian components of the score mixture.
    #[arg(long = "K", value_name = "K")]
    pub components: Option<usize>,
    /// Refinement convergence tolerance.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Refinement iteration cap.
    #[arg(long)]
    pub t_max: Option<usize>,
    /// Comma-separated estimators, e.g. LS,CDA_ND_RERS_SD.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

/// A resolved plan plus the execution settings that do not affect results.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub plan: ExperimentPlan,
    pub threads: Option<usize>,
}

impl PlanArgs {
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let file = match &self.config {
            Some(path) => PlanFile::load(path)?,
            None => PlanFile::default(),
        };
        let preset = self.preset.or(file.preset).unwrap_or(DEFAULT_PRESET);
        let seed = self.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
        let drops = self.drops.or(file.drops).unwrap_or(DEFAULT_DROPS);
        let mut plan = ExperimentPlan::for_preset(preset, seed, drops);

        if let Some(input) = self.input.clone().or(file.input) {
            let format = FileFormat::from_path(&input).ok_or_else(|| {
                CliError::Usage(format!(
                    "cannot infer format of {} (use .csv or .json)",
                    input.display()
                ))
            })?;
            plan.label = input
                .file_stem()
                .map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned());
            plan.scenario = ScenarioSource::File { path: input, format };
        }
        if let Some(label) = file.label {
            plan.label = label;
        }
        if let Some(v) = self.folds.or(file.folds) {
            plan.folds = v;
        }
        plan.fold_by_instance = self.fold_by_instance || file.fold_by_instance.unwrap_or(false);
        if let Some(v) = self.lambda.or(file.lambda) {
            plan.lambda = v;
        }
        if let Some(v) = self.components.or(file.components) {
            plan.components = v;
        }
        if let Some(v) = self.eps.or(file.eps) {
            plan.eps = v;
        }
        if let Some(v) = self.t_max.or(file.t_max) {
            plan.t_max = v;
        }
        if let Some(v) = file.cem_eps {
            plan.cem_eps = v;
        }
        if let Some(v) = file.cem_max_iter {
            plan.cem_max_iter = v;
        }
        if let Some(v) = self.methods.clone().or(file.methods) {
            plan.methods = v;
        }
        if let Some(v) = file.subset_size {
            plan.subset_size = v;
        }
        if let Some(v) = file.sd_threshold {
            plan.sd_threshold = v;
        }

        let re = self.re_ratio.or(file.re_ratio);
        let rs = self.rs_ratio.or(file.rs_ratio);
        if re.is_some() || rs.is_some() {
            for filter in [
                &mut plan.filters.cda_rers,
                &mut plan.filters.nd_rers_hd,
                &mut plan.filters.nd_rers_sd,
            ] {
                let updated = FilterConfig::new(re.unwrap_or(filter.re_ratio), rs.unwrap_or(filter.rs_ratio))
                    .map_err(|e| CliError::Usage(e.to_string()))?;
                *filter = updated;
            }
        }

        plan.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let threads = self.threads.or(file.threads);
        if threads == Some(0) {
            return Err(CliError::Usage("threads must be positive".into()));
        }
        Ok(Resolved { plan, threads })
    }
}
