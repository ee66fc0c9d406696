//! Self-contained model checkpoints: a magic line, a JSON manifest with the
//! run config and vocabulary, then every tensor as little-endian f64.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::config::{ModelDims, RunConfig};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::types::{LearnedState, Modality};
use crate::vocab::Vocabulary;

const MAGIC: &[u8; 10] = b"MICLCKPT1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dims: ModelDims,
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub vocab: String,
    /// Number of tasks trained into these weights.
    pub task_index: usize,
    pub modalities: Vec<Modality>,
    pub learned: LearnedState,
    pub config: RunConfig,
    pub tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: ModelState,
    pub vocab: Vocabulary,
}

pub fn write_checkpoint<W: Write>(
    mut out: W,
    model: &ModelState,
    vocab: &Vocabulary,
    config: &RunConfig,
    task_index: usize,
    learned: &LearnedState,
) -> Result<()> {
    let manifest = Manifest {
        dims: model.dims,
        vocab_size: model.vocab_size,
        vocab_hash: vocab.content_hash(),
        vocab: vocab.to_text(),
        task_index,
        modalities: model.modalities(),
        learned: learned.clone(),
        config: config.clone(),
        tensors: model
            .params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                rows: p.value.nrows(),
                cols: p.value.ncols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for p in &model.params {
        for v in p.value.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    model: &ModelState,
    vocab: &Vocabulary,
    config: &RunConfig,
    task_index: usize,
    learned: &LearnedState,
) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(f, model, vocab, config, task_index, learned)
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 10];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::InvalidCheckpoint("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::InvalidCheckpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    input
        .read_exact(&mut len)
        .map_err(|_| Error::InvalidCheckpoint("truncated header".into()))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 64 << 20 {
        return Err(Error::InvalidCheckpoint(format!("manifest of {len} bytes")));
    }
    let mut json = vec![0u8; len];
    input
        .read_exact(&mut json)
        .map_err(|_| Error::InvalidCheckpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    let vocab = Vocabulary::from_text(&manifest.vocab)?;
    if vocab.content_hash() != manifest.vocab_hash || vocab.len() != manifest.vocab_size {
        return Err(Error::InvalidCheckpoint("vocabulary does not match its hash".into()));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut buf = [0u8; 8];
    for t in &manifest.tensors {
        let mut data = Vec::with_capacity(t.rows * t.cols);
        for _ in 0..t.rows * t.cols {
            input
                .read_exact(&mut buf)
                .map_err(|_| Error::InvalidCheckpoint(format!("truncated tensor '{}'", t.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        let m = Mat::from_shape_vec((t.rows, t.cols), data).map_err(|e| Error::InvalidCheckpoint(e.to_string()))?;
        tensors.push((t.name.clone(), m));
    }
    if input.read(&mut buf)? != 0 {
        return Err(Error::InvalidCheckpoint("trailing bytes".into()));
    }
    let model = ModelState::from_tensors(manifest.dims, manifest.vocab_size, &manifest.modalities, tensors)?;
    Ok(Checkpoint { manifest, model, vocab })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::syndata::grammar_corpus;

    fn fixture() -> (ModelState, Vocabulary, RunConfig) {
        let vocab = Vocabulary::build(&grammar_corpus()).unwrap();
        let mut cfg = RunConfig::default();
        cfg.model = ModelDims {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            context: 40,
            rank: 2,
            feat_dim: 8,
        };
        let model = ModelState::new(cfg.model, vocab.len(), 5).unwrap();
        (model, vocab, cfg)
    }

    #[test]
    fn round_trip_is_exact() {
        let (model, vocab, cfg) = fixture();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &model, &vocab, &cfg, 2, &LearnedState::new()).unwrap();
        let ck = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(ck.model.content_hash(), model.content_hash());
        assert_eq!(ck.vocab, vocab);
        assert_eq!(ck.manifest.task_index, 2);
        assert_eq!(ck.manifest.config, cfg);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (model, vocab, cfg) = fixture();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &model, &vocab, &cfg, 1, &LearnedState::new()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::InvalidCheckpoint(_))));
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(read_checkpoint(short), Err(Error::InvalidCheckpoint(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(read_checkpoint(long.as_slice()), Err(Error::InvalidCheckpoint(_))));
    }
}
