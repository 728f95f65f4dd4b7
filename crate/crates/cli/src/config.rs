//! TOML configuration files for the CLI, layered over the library defaults.

use std::path::PathBuf;

use loramux_core::engine::{ComputeMode, EngineSetup, LatencyModel};
use loramux_core::pool::capacity_for_budget;
use loramux_core::sched::SchedulerConfig;
use loramux_core::settings;
use loramux_core::workload::SyntheticConfig;
use serde::Deserialize;

#[derive(Debug, Deserialize, Default, Clone)]
#[serde(deny_unknown_fields, default)]
pub struct PoolSection {
    pub page_size: Option<usize>,
    pub capacity_pages: Option<usize>,
    /// Alternative to `capacity_pages`: derive the page count from a byte
    /// budget, minus a reservation for temporary activation storage.
    pub budget_bytes: Option<u64>,
    pub activation_reserve_bytes: Option<u64>,
}

#[derive(Debug, Deserialize, Default, Clone)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub n_adapters: Vec<usize>,
}

/// One experiment: a workload (inline synthetic or a trace file), the
/// serving setup, and where outputs go.
#[derive(Debug, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    /// Named model/adapter configuration supplying the rank list.
    pub setting: Option<String>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub mode: Option<ComputeMode>,
    /// Path to a pre-generated trace file; mutually exclusive with
    /// `[workload]`.
    pub trace: Option<PathBuf>,
    pub workload: Option<SyntheticConfig>,
    #[serde(default)]
    pub pool: PoolSection,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub latency: LatencyModel,
    pub num_layers: Option<usize>,
    pub projections_per_layer: Option<usize>,
    pub sweep: Option<SweepSection>,
}

impl ExperimentFile {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| format!("config: {e}"))
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.trace.is_some() && self.workload.is_some() {
            return Err("config: specify either `trace` or `[workload]`, not both".into());
        }
        if self.trace.is_none() && self.workload.is_none() {
            return Err("config: one of `trace` or `[workload]` is required".into());
        }
        if let Some(name) = &self.setting {
            if settings::setting(name).is_none() {
                let known: Vec<&str> = settings::SETTINGS.iter().map(|s| s.name).collect();
                return Err(format!("config: unknown setting {name:?}; known: {known:?}"));
            }
        }
        if self.pool.capacity_pages.is_some() && self.pool.budget_bytes.is_some() {
            return Err("config: specify either pool.capacity_pages or pool.budget_bytes".into());
        }
        if let Some(sweep) = &self.sweep {
            if self.trace.is_some() {
                return Err("config: sweeps regenerate the workload; they cannot use `trace`".into());
            }
            if sweep.n_adapters.is_empty() {
                return Err("config: sweep.n_adapters must be nonempty".into());
            }
        }
        if let Some(w) = &self.workload {
            self.synthetic_for(w.n_adapters).validate().map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    /// The inline workload with setting rank list and top-level seed applied.
    pub fn synthetic_for(&self, n_adapters: usize) -> SyntheticConfig {
        let mut workload = self.workload.clone().unwrap_or_default();
        workload.n_adapters = n_adapters;
        if let Some(seed) = self.seed {
            workload.seed = seed;
        }
        if let Some(name) = &self.setting {
            if let Some(s) = settings::setting(name) {
                workload.rank_list = s.rank_list.to_vec();
            }
        }
        workload
    }

    pub fn engine_setup(&self) -> EngineSetup {
        let defaults = EngineSetup::default();
        let page_size = self.pool.page_size.unwrap_or(defaults.pool_page_size);
        let capacity = match (self.pool.capacity_pages, self.pool.budget_bytes) {
            (Some(pages), _) => pages,
            (None, Some(bytes)) => capacity_for_budget(
                bytes,
                page_size,
                self.pool.activation_reserve_bytes.unwrap_or(0),
            ),
            (None, None) => defaults.pool_capacity_pages,
        };
        EngineSetup {
            scheduler: self.scheduler.clone(),
            latency: self.latency.clone(),
            mode: self.mode.unwrap_or(ComputeMode::Factored),
            pool_page_size: page_size,
            pool_capacity_pages: capacity,
            num_layers: self.num_layers.unwrap_or(defaults.num_layers),
            projections_per_layer: self
                .projections_per_layer
                .unwrap_or(defaults.projections_per_layer),
        }
    }
}

/// Config for trace generation: a synthetic workload, or a raw log to
/// downsample.
#[derive(Debug, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
pub struct GenerateFile {
    pub setting: Option<String>,
    #[serde(default)]
    pub workload: SyntheticConfig,
    /// Downsample this raw `timestamp,model,input_len,output_len` log
    /// instead of generating synthetically.
    pub real_log: Option<PathBuf>,
    pub rate: Option<f64>,
    pub duration: Option<f64>,
}

impl GenerateFile {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| format!("config: {e}"))
    }

    pub fn workload(&self) -> SyntheticConfig {
        let mut workload = self.workload.clone();
        if let Some(name) = &self.setting {
            if let Some(s) = loramux_core::settings::setting(name) {
                workload.rank_list = s.rank_list.to_vec();
            }
        }
        workload
    }
}
