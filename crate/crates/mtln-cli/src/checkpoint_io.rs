//! Checkpoint files: the binary training container stored on disk.

use std::fs;
use std::path::Path;

use mtln_core::train::{decode_checkpoint, encode_checkpoint, Checkpoint};

use crate::{CliError, Result};

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    fs::write(path, bytes).map_err(CliError::io(path))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    Ok(decode_checkpoint(&bytes)?)
}
