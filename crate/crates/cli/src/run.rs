//! Run directory layout:
//!
//! ```text
//! run/
//!   data.csv        copy of the input data
//!   spec.toml       configuration the draws were produced with
//!   draws.bin       unconstrained draws
//!   draws_meta.txt  per-chain sampler statistics
//!   report.txt      human-readable fit report
//!   summary/*.csv   tables written by the analysis commands
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use msfpca::dataset::{load_long_records, read_csv_path, write_csv, MultiBlockDataset};
use msfpca::experiments::{analyze, prepare_dataset, report_grid, FitResult};
use msfpca::io::{format_chain_stats, load_draws, save_draws};
use msfpca::model::{ModelData, ModelSpec};

use crate::config::FitConfig;
use crate::error::CliError;

pub fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::FileNotFound(path.to_path_buf()))
    }
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    require(path)?;
    fs::read_to_string(path).map_err(CliError::failed)
}

pub fn load_dataset(path: &Path) -> Result<MultiBlockDataset, CliError> {
    require(path)?;
    let rows = read_csv_path(path).map_err(|e| CliError::ConfigParse(format!("{}: {e}", path.display())))?;
    load_long_records(&rows).map_err(CliError::failed)
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(CliError::failed)?;
    }
    fs::write(path, contents).map_err(CliError::failed)
}

pub fn create(path: &Path) -> Result<fs::File, CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(CliError::failed)?;
    }
    fs::File::create(path).map_err(CliError::failed)
}

/// A loaded run directory, re-analyzed from its draws.
pub struct Run {
    pub dir: PathBuf,
    pub config: FitConfig,
    pub spec: ModelSpec<f64>,
    pub model_data: ModelData<f64>,
    pub fit: FitResult,
}

impl Run {
    pub fn block_names(&self) -> Vec<String> {
        self.fit.dataset.blocks().to_vec()
    }

    pub fn summary_path(&self, name: &str) -> PathBuf {
        self.dir.join("summary").join(name)
    }

    pub fn load(dir: &Path, grid: usize) -> Result<Self, CliError> {
        require(dir)?;
        let mut config = FitConfig::parse(&read_text(&dir.join("spec.toml"))?)?;
        let raw = load_dataset(&dir.join("data.csv"))?;
        config.align_to_data(raw.blocks())?;
        let spec = config.model_spec()?;
        let draws_path = dir.join("draws.bin");
        require(&draws_path)?;
        let stored = load_draws(&draws_path).map_err(CliError::failed)?;
        let dataset = prepare_dataset(&raw).map_err(CliError::failed)?;
        let model_data = ModelData::new(&dataset, &spec)?;
        let expected = msfpca::model::ParamLayout::new(&spec, dataset.n_subjects());
        if stored.descriptor != expected.describe() {
            return Err(CliError::SpecMismatch("draws.bin does not match spec.toml and data.csv".into()));
        }
        let fit = analyze(dataset, &spec, stored.draws, &report_grid(grid))?;
        Ok(Self { dir: dir.to_path_buf(), config, spec, model_data, fit })
    }
}

pub fn save(dir: &Path, config: &FitConfig, raw: &MultiBlockDataset, fit: &FitResult) -> Result<(), CliError> {
    fs::create_dir_all(dir.join("summary")).map_err(CliError::failed)?;
    write_csv(create(&dir.join("data.csv"))?, &raw.to_records()).map_err(CliError::failed)?;
    write_file(&dir.join("spec.toml"), config.to_toml())?;
    save_draws(dir.join("draws.bin"), &fit.draws, &fit.layout.describe()).map_err(CliError::failed)?;
    write_file(&dir.join("draws_meta.txt"), format_chain_stats(&fit.draws.stats))?;
    Ok(())
}
