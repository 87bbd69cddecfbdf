//! Checkpoint directories.
//!
//! ```text
//! manifest.txt   name<TAB>shape<TAB>byte offset, one line per parameter
//! params.bin     f32 little-endian parameter values, concatenated
//! adam_m.bin     first moments, same layout as params.bin
//! adam_v.bin     second moments
//! state.txt      version, step, seed and rng position
//! config.txt     model config as key=value lines
//! ```
//!
//! Directories are written next to the target and renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::{parse_kv, ModelConfig};
use crate::error::{Error, Result};
use crate::model::{build_any, Model};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    /// A fresh model with zeroed optimizer state.
    pub fn fresh(model: Model<f32>, rng_seed: u64) -> Self {
        let adam = AdamState::new(model.store());
        Self {
            model,
            adam,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        }
    }
}

fn shape_str(s: &[usize]) -> String {
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

fn blob(buffers: impl Iterator<Item = impl AsRef<[f32]>>) -> Vec<u8> {
    let mut out = Vec::new();
    for b in buffers {
        for v in b.as_ref() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Format(format!("state.txt: malformed rng seed '{s}'"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

/// Writes `ckpt` to `dir`, replacing any previous checkpoint there.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let store = ckpt.model.store();
    let tmp = sibling(dir, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

    let mut manifest = String::new();
    let mut offset = 0usize;
    for (_, name, t) in store.iter() {
        manifest.push_str(&format!("{name}\t{}\t{offset}\n", shape_str(t.shape())));
        offset += 4 * t.numel();
    }
    write(&tmp.join("manifest.txt"), manifest.as_bytes())?;
    write(&tmp.join("params.bin"), &blob(store.iter().map(|(_, _, t)| t.data())))?;
    write(&tmp.join("adam_m.bin"), &blob(ckpt.adam.m.iter()))?;
    write(&tmp.join("adam_v.bin"), &blob(ckpt.adam.v.iter()))?;
    let state = format!(
        "version={CHECKPOINT_VERSION}\nstep={}\nmodel_seed={}\nrng_seed={}\nrng_stream={}\nrng_word_pos={}\n",
        ckpt.adam.step,
        ckpt.model.seed(),
        hex(&ckpt.rng.get_seed()),
        ckpt.rng.get_stream(),
        ckpt.rng.get_word_pos()
    );
    write(&tmp.join("state.txt"), state.as_bytes())?;
    write(&tmp.join("config.txt"), ckpt.model.config().to_kv_text().as_bytes())?;

    let old = sibling(dir, "old");
    if dir.exists() {
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

fn sibling(dir: &Path, tag: &str) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "ckpt".into());
    dir.with_file_name(format!(".{name}.{tag}"))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

struct ManifestRow {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || Error::Format(format!("manifest.txt: malformed line '{l}'"));
            if f.len() != 3 {
                return Err(bad());
            }
            let shape = f[1]
                .split(',')
                .map(|d| d.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            Ok(ManifestRow {
                name: f[0].to_string(),
                shape,
                offset: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn slice_f32(bytes: &[u8], offset: usize, n: usize, what: &str) -> Result<Vec<f32>> {
    let end = offset + 4 * n;
    if end > bytes.len() {
        return Err(Error::Format(format!("{what}: data truncated at byte {}", bytes.len())));
    }
    Ok(bytes[offset..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Reads only the model config of a checkpoint.
pub fn read_checkpoint_config(dir: &Path) -> Result<ModelConfig> {
    ModelConfig::from_kv_text(&read_text(&dir.join("config.txt"))?)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    if !dir.is_dir() {
        return Err(Error::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint directory not found"),
        });
    }
    let state: std::collections::HashMap<String, String> =
        parse_kv(&read_text(&dir.join("state.txt"))?)?.into_iter().collect();
    let field = |k: &str| {
        state
            .get(k)
            .ok_or_else(|| Error::Format(format!("state.txt: missing field '{k}'")))
    };
    let version: u32 = field("version")?
        .parse()
        .map_err(|_| Error::Format("state.txt: version is not an integer".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let num = |k: &str| -> Result<u128> {
        field(k)?
            .parse()
            .map_err(|_| Error::Format(format!("state.txt: field '{k}' is not an integer")))
    };
    let step = num("step")? as u64;
    let model_seed = num("model_seed")? as u64;
    let mut rng = ChaCha8Rng::from_seed(unhex(field("rng_seed")?)?);
    rng.set_stream(num("rng_stream")? as u64);
    rng.set_word_pos(num("rng_word_pos")?);

    let config = read_checkpoint_config(dir)?;
    let mut model: Model<f32> = build_any(&config, model_seed)?;
    let rows = parse_manifest(&read_text(&dir.join("manifest.txt"))?)?;
    let params = read_bytes(&dir.join("params.bin"))?;
    let m_bytes = read_bytes(&dir.join("adam_m.bin"))?;
    let v_bytes = read_bytes(&dir.join("adam_v.bin"))?;
    let mut adam = AdamState::new(model.store());
    adam.step = step;
    fill_store(model.store_mut(), &rows, &params, Some((&m_bytes, &v_bytes, &mut adam)))?;
    Ok(Checkpoint { model, adam, rng })
}

fn fill_store(
    store: &mut ParamStore<f32>,
    rows: &[ManifestRow],
    params: &[u8],
    mut moments: Option<(&[u8], &[u8], &mut AdamState<f32>)>,
) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let name = store.name(id).to_string();
        let row = rows
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor '{name}'")))?;
        let shape = store.get(id).shape().to_vec();
        if row.shape != shape {
            return Err(Error::Format(format!(
                "tensor '{name}' has shape ({}) in the checkpoint, model expects ({})",
                shape_str(&row.shape),
                shape_str(&shape)
            )));
        }
        let n = store.get(id).numel();
        *store.get_mut(id) = Tensor::new(shape, slice_f32(params, row.offset, n, "params.bin")?)?;
        if let Some((m, v, adam)) = moments.as_mut() {
            adam.m[i] = slice_f32(m, row.offset, n, "adam_m.bin")?;
            adam.v[i] = slice_f32(v, row.offset, n, "adam_v.bin")?;
        }
    }
    if let Some(extra) = rows.iter().find(|r| store.id_of(&r.name).is_none()) {
        return Err(Error::Format(format!(
            "checkpoint tensor '{}' does not belong to the configured model",
            extra.name
        )));
    }
    Ok(())
}

/// Loads just the model (parameters and config) from a checkpoint.
pub fn load_model(dir: &Path) -> Result<Model<f32>> {
    Ok(load_checkpoint(dir)?.model)
}
