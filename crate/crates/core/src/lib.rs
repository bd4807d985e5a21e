//! Translation between embedding spaces with a small feed-forward network.
//!
//! The pipeline: pair ingestion ([`data`]), the network ([`nn`]), the
//! cosine objective and Adam ([`objective`]), the training loop and
//! evaluation statistics ([`training`]), and brute-force cosine retrieval
//! for comparing translated against ground-truth queries ([`retrieval`]).

pub mod data;
pub mod exec;
pub mod format;
pub mod nn;
pub mod numerics;
pub mod objective;
pub mod rng;

pub use exec::Exec;
pub use numerics::{EmbeddingVector, Matrix};
pub mod retrieval;
pub mod training;

use std::io::Write as _;
use std::path::Path;

/// Writes `bytes` to a temporary file beside `path`, then renames it into
/// place, so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
