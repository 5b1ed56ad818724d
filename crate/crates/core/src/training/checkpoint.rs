//! Binary checkpoints: magic string, config snapshot, tensor manifest,
//! then raw little-endian f64 data in manifest order.

use std::collections::HashSet;
use std::path::Path;

use crate::config::{ConfigFile, TrainConfig};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::Rng;

pub const MAGIC: &[u8] = b"TIMGEN1\n";
const SEPARATOR: &str = "%%";

/// Serialize the config snapshot plus every named tensor.
pub fn save_checkpoint(params: &ModelParams, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(cfg.snapshot().as_bytes());
    bytes.extend_from_slice(format!("{SEPARATOR}\n").as_bytes());
    let tensors = params.tensors();
    for (name, m) in &tensors {
        bytes.extend_from_slice(format!("{name} {} {}\n", m.rows(), m.cols()).as_bytes());
    }
    bytes.extend_from_slice(format!("{SEPARATOR}\n").as_bytes());
    for (_, m) in &tensors {
        for v in m.as_slice() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Read one text line from `data` starting at `*pos`; advances past the
/// newline. Errors if no newline is found before the buffer ends.
fn read_line<'a>(data: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &data[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::CheckpointTruncated("missing newline in header".into()))?;
    let line = std::str::from_utf8(&rest[..end])
        .map_err(|_| Error::CheckpointManifest("non-utf8 header line".into()))?;
    *pos += end + 1;
    Ok(line)
}

/// Load a checkpoint, reconstructing the parameters at the shapes the
/// stored config dictates.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, TrainConfig)> {
    let data = std::fs::read(path)?;
    if data.len() < MAGIC.len() || &data[..MAGIC.len()] != MAGIC {
        return Err(Error::CheckpointVersion(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let mut pos = MAGIC.len();

    let mut config_text = String::new();
    loop {
        let line = read_line(&data, &mut pos)?;
        if line == SEPARATOR {
            break;
        }
        config_text.push_str(line);
        config_text.push('\n');
    }
    let cfg = TrainConfig::from_config(
        ConfigFile::parse(&config_text)
            .map_err(|e| Error::CheckpointManifest(format!("config snapshot: {e}")))?,
    )
    .map_err(|e| Error::CheckpointManifest(format!("config snapshot: {e}")))?;

    let mut manifest: Vec<(String, usize, usize)> = Vec::new();
    loop {
        let line = read_line(&data, &mut pos)?;
        if line == SEPARATOR {
            break;
        }
        let mut fields = line.split(' ');
        let name = fields.next().unwrap_or_default().to_string();
        let rows: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::CheckpointManifest(format!("bad manifest line '{line}'")))?;
        let cols: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::CheckpointManifest(format!("bad manifest line '{line}'")))?;
        if name.is_empty() || fields.next().is_some() {
            return Err(Error::CheckpointManifest(format!("bad manifest line '{line}'")));
        }
        manifest.push((name, rows, cols));
    }

    // The values are overwritten below; the init RNG only sets shapes.
    let mut params = ModelParams::init(&cfg, &mut Rng::new(0))?;
    let expected: HashSet<String> = params.tensors().iter().map(|(n, _)| n.clone()).collect();
    let mut seen = HashSet::new();
    for (name, _, _) in &manifest {
        if !expected.contains(name) {
            return Err(Error::CheckpointManifest(format!("unknown tensor '{name}'")));
        }
        if !seen.insert(name.clone()) {
            return Err(Error::CheckpointManifest(format!("duplicate tensor '{name}'")));
        }
    }
    if seen.len() != expected.len() {
        let missing: Vec<String> = expected.difference(&seen).cloned().collect();
        return Err(Error::CheckpointManifest(format!(
            "missing tensors: {}",
            missing.join(", ")
        )));
    }

    for (name, rows, cols) in &manifest {
        let mut tensors = params.tensors_mut();
        let (_, tensor) = tensors
            .iter_mut()
            .find(|(n, _)| n == name)
            .expect("name checked against the expected set");
        if tensor.rows() != *rows || tensor.cols() != *cols {
            return Err(Error::CheckpointShape(format!(
                "tensor '{name}' is {rows}x{cols} in the file but {}x{} in the config",
                tensor.rows(),
                tensor.cols()
            )));
        }
        let n_bytes = rows * cols * 8;
        if pos + n_bytes > data.len() {
            return Err(Error::CheckpointTruncated(format!(
                "tensor '{name}' data ends early"
            )));
        }
        for (i, v) in tensor.as_mut_slice().iter_mut().enumerate() {
            let off = pos + i * 8;
            *v = f64::from_le_bytes(data[off..off + 8].try_into().expect("8 bytes"));
        }
        pos += n_bytes;
    }
    if pos != data.len() {
        return Err(Error::CheckpointManifest(format!(
            "{} trailing bytes after tensor data",
            data.len() - pos
        )));
    }
    Ok((params, cfg))
}
