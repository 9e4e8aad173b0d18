//! Embedding files: raw little-endian f32, channel-major `[embed_dim, frames]`,
//! one file per utterance, listed in a JSON-lines index.

use std::io::Write;
use std::path::Path;

use diffanon_core::seed::{derive_indexed, derive_seed, rng};
use diffanon_core::{Tensor, World};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const INDEX_FILE: &str = "index.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub speaker: usize,
    /// Seed of the generator that produced the utterance.
    pub seed: u64,
    pub file: String,
    pub shape: [usize; 2],
}

pub fn write_f32(path: &Path, t: &Tensor) -> Result<()> {
    let bytes: Vec<u8> = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_f32(path: &Path, shape: [usize; 2]) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    if bytes.len() != 4 * shape[0] * shape[1] {
        return Err(CliError::format(path, format!("expected {} f32 values, found {} bytes", shape[0] * shape[1], bytes.len())));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok(Tensor::new(shape.to_vec(), data)?)
}

pub fn write_index(path: &Path, entries: &[IndexEntry]) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e).map_err(|err| CliError::format(path, err.to_string()))?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| CliError::io(path, e))
}

pub fn read_index(path: &Path) -> Result<Vec<IndexEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::format(path, e.to_string())))
        .collect()
}

/// Seed of dumped utterance `i`; `rng(seed)` regenerates it.
pub fn utterance_seed(global: u64, i: u64) -> u64 {
    derive_indexed(derive_seed(global, "dump"), i)
}

/// Writes `n_utt` clean utterances, speakers in rotation, plus the index.
pub fn dump_world(world: &World, n_utt: usize, seed: u64, dir: &Path) -> Result<Vec<IndexEntry>> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut entries = Vec::with_capacity(n_utt);
    for i in 0..n_utt {
        let speaker = i % world.config.n_speakers;
        let s = utterance_seed(seed, i as u64);
        let u = world.generate_utterance(speaker, &mut rng(s))?;
        let id = format!("utt{i:05}");
        let file = format!("{id}.f32");
        write_f32(&dir.join(&file), &u.x0)?;
        entries.push(IndexEntry { id, speaker, seed: s, file, shape: [u.x0.channels(), u.x0.frames()] });
    }
    write_index(&dir.join(INDEX_FILE), &entries)?;
    Ok(entries)
}

/// Appends one JSON value as a line to `w`.
pub fn json_line<T: Serialize>(w: &mut impl Write, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")
}
