//! Binary model checkpoints.
//!
//! Layout (little-endian): magic `SEQM`, then u32 fields `version, task,
//! input_dim, hidden_dim, n_out, bidirectional, emb_dim` (`emb_dim` 0 means
//! no projection), then every parameter as f64 in [`SeqModel::tensors`]
//! order. Identical models produce identical bytes.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{de::DeserializeOwned, Serialize};

use super::model::{ModelSpec, SeqModel};
use crate::error::{Error, Result};
use crate::Task;

pub const SEQM_MAGIC: &[u8; 4] = b"SEQM";
pub const SEQM_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, model: &SeqModel) -> std::io::Result<()> {
    let s = &model.spec;
    w.write_all(SEQM_MAGIC)?;
    for v in [
        SEQM_VERSION,
        match s.task {
            Task::Expr => 0,
            Task::Va => 1,
        },
        s.input_dim as u32,
        s.hidden_dim as u32,
        s.n_out() as u32,
        s.bidirectional as u32,
        s.emb_dim.unwrap_or(0) as u32,
    ] {
        w.write_u32::<LittleEndian>(v)?;
    }
    for (_, t) in model.tensors() {
        for &v in t {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<SeqModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Malformed("checkpoint shorter than its header".into()))?;
    if &magic != SEQM_MAGIC {
        return Err(Error::Malformed("not a SEQM checkpoint".into()));
    }
    let mut fields = [0u32; 7];
    for f in fields.iter_mut() {
        *f = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::Malformed("checkpoint header truncated".into()))?;
    }
    let [version, task, input_dim, hidden_dim, n_out, bidir, emb_dim] = fields;
    if version != SEQM_VERSION {
        return Err(Error::Malformed(format!("unsupported checkpoint version {version}")));
    }
    let task = match task {
        0 => Task::Expr,
        1 => Task::Va,
        t => return Err(Error::Malformed(format!("unknown task code {t}"))),
    };
    if bidir > 1 {
        return Err(Error::Malformed(format!("bidirectional flag {bidir}")));
    }
    let spec = ModelSpec {
        task,
        input_dim: input_dim as usize,
        hidden_dim: hidden_dim as usize,
        bidirectional: bidir == 1,
        emb_dim: (emb_dim > 0).then_some(emb_dim as usize),
    };
    if spec.n_out() != n_out as usize {
        return Err(Error::Malformed(format!("n_out {n_out} does not match task {task}")));
    }
    let mut model = SeqModel::zeros(spec).map_err(|e| Error::Malformed(e.to_string()))?;
    for (name, t) in model.tensors_mut() {
        for v in t.iter_mut() {
            *v = r
                .read_f64::<LittleEndian>()
                .map_err(|_| Error::Malformed(format!("checkpoint truncated in {name}")))?;
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::Malformed(e.to_string()))? != 0 {
        return Err(Error::Malformed("trailing bytes after checkpoint parameters".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &SeqModel) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<SeqModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(bytes.as_slice())
}

/// `<checkpoint>.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_sidecar<T: Serialize>(path: &Path, meta: &T) -> Result<()> {
    let p = sidecar_path(path);
    let text = serde_json::to_string_pretty(meta)?;
    std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
}

pub fn load_sidecar<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let p = sidecar_path(path);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}
