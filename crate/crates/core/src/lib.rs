//! Meta-learned initialization for balancing counterfactual-regression
//! networks.
//!
//! The pipeline: [`dgp`] simulates populations with known potential
//! outcomes, [`tasking`] cuts them into overlapping subgroup tasks, [`cinet`]
//! trains the representation/hypothesis network on one task, [`meta`] runs
//! Reptile with separate interpolation rates for the two blocks, and
//! [`experiment`] evaluates everything leave-one-task-out.

pub mod cinet;
pub mod dgp;
pub mod error;
pub mod experiment;
pub mod mathcore;
pub mod meta;
pub mod tasking;

use std::io::Write;
use std::path::Path;

pub use error::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
