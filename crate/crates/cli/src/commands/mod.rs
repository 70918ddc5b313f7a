pub mod apps;
pub mod evaluate;
pub mod invert;
pub mod loss_compare;
pub mod train_teacher;

use std::path::Path;

use anyhow::{Context, Result};
use classinv::classifier::{load_checkpoint, ClassifierHandle};

/// Loads a classifier checkpoint and returns it with its content digest.
pub fn load_teacher(path: &Path) -> Result<(ClassifierHandle, String)> {
    let handle =
        load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let digest = handle.digest();
    Ok((handle, digest))
}
