//! Model checkpoints.
//!
//! Layout: a UTF-8 header of `key = value` lines, starting with the format
//! line `ralm-checkpoint 1`, then one `tensor <name> <rows> <cols>` line per
//! parameter in [`ModelParams::named_tensors`] order, then `end`. Directly
//! after the newline following `end` come the tensors' entries as
//! little-endian `f32`, row-major, in the same order. Every float written
//! is read back bit-identically.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ralm_core::model::{LoraTargets, Model, ModelConfig, PositionScheme};

use crate::error::{CliError, CliResult};

pub const MAGIC: &str = "ralm-checkpoint";
pub const VERSION: u32 = 1;

/// Writes `model` with the seed it was (originally) initialised from.
pub fn write_checkpoint(w: &mut impl Write, model: &Model<f32>, seed: u64) -> std::io::Result<()> {
    let c = &model.cfg;
    let mut header = format!("{MAGIC} {VERSION}\n");
    let fields: [(&str, String); 13] = [
        ("layers", c.layers.to_string()),
        ("hidden", c.hidden.to_string()),
        ("heads", c.heads.to_string()),
        ("mlp_dim", c.mlp_dim.to_string()),
        ("vocab_base", c.vocab_base.to_string()),
        ("max_seq", c.max_seq.to_string()),
        ("lora_rank", c.lora_rank.to_string()),
        ("lora_alpha", c.lora_alpha.to_string()),
        ("lora_targets", c.lora_targets.name().to_string()),
        ("position", c.position.name().to_string()),
        ("rope_base", c.rope_base.to_string()),
        ("norm_eps", c.norm_eps.to_string()),
        ("seed", seed.to_string()),
    ];
    for (k, v) in fields {
        header.push_str(&format!("{k} = {v}\n"));
    }
    let tensors = model.params.named_tensors();
    for (name, t) in &tensors {
        header.push_str(&format!("tensor {name} {} {}\n", t.rows(), t.cols()));
    }
    header.push_str("end\n");
    w.write_all(header.as_bytes())?;
    for (_, t) in &tensors {
        let mut buf = Vec::with_capacity(t.data().len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()
}

pub fn save(path: &Path, model: &Model<f32>, seed: u64) -> CliResult<()> {
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    write_checkpoint(&mut std::io::BufWriter::new(file), model, seed).map_err(|e| CliError::io(path, e))
}

fn field<T: std::str::FromStr>(fields: &[(String, String)], key: &str) -> CliResult<T> {
    let (_, v) = fields
        .iter()
        .find(|(k, _)| k == key)
        .ok_or_else(|| CliError::data(format!("checkpoint header lacks {key}")))?;
    v.parse().map_err(|_| CliError::data(format!("checkpoint header: bad {key} = {v:?}")))
}

/// Reads a checkpoint, returning the model and its recorded seed.
pub fn read_checkpoint(r: impl Read) -> CliResult<(Model<f32>, u64)> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let next_line = |r: &mut BufReader<_>, line: &mut String| -> CliResult<()> {
        line.clear();
        let n = r.read_line(line).map_err(|e| CliError::data(format!("checkpoint header: {e}")))?;
        if n == 0 {
            return Err(CliError::data("checkpoint header ends before `end`"));
        }
        Ok(())
    };
    next_line(&mut r, &mut line)?;
    let version = line
        .trim_end()
        .strip_prefix(MAGIC)
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| CliError::data("not a checkpoint file"))?;
    if version != VERSION {
        return Err(CliError::data(format!("checkpoint version {version} is not supported (expected {VERSION})")));
    }
    let mut fields = Vec::new();
    let mut shapes: Vec<(String, usize, usize)> = Vec::new();
    loop {
        next_line(&mut r, &mut line)?;
        let l = line.trim_end();
        if l == "end" {
            break;
        }
        if let Some(rest) = l.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            let parsed = match parts.as_slice() {
                [name, rows, cols] => rows.parse().ok().zip(cols.parse().ok()).map(|(r, c)| (name.to_string(), r, c)),
                _ => None,
            };
            shapes.push(parsed.ok_or_else(|| CliError::data(format!("checkpoint header: bad tensor line {l:?}")))?);
        } else if let Some((k, v)) = l.split_once('=') {
            fields.push((k.trim().to_string(), v.trim().to_string()));
        } else {
            return Err(CliError::data(format!("checkpoint header: bad line {l:?}")));
        }
    }
    let targets: String = field(&fields, "lora_targets")?;
    let position: String = field(&fields, "position")?;
    let cfg = ModelConfig {
        layers: field(&fields, "layers")?,
        hidden: field(&fields, "hidden")?,
        heads: field(&fields, "heads")?,
        mlp_dim: field(&fields, "mlp_dim")?,
        vocab_base: field(&fields, "vocab_base")?,
        max_seq: field(&fields, "max_seq")?,
        lora_rank: field(&fields, "lora_rank")?,
        lora_alpha: field(&fields, "lora_alpha")?,
        lora_targets: LoraTargets::parse(&targets)
            .ok_or_else(|| CliError::data(format!("checkpoint header: bad lora_targets {targets:?}")))?,
        position: PositionScheme::parse(&position)
            .ok_or_else(|| CliError::data(format!("checkpoint header: bad position {position:?}")))?,
        rope_base: field(&fields, "rope_base")?,
        norm_eps: field(&fields, "norm_eps")?,
    };
    let seed: u64 = field(&fields, "seed")?;
    let mut model = Model::<f32>::init(cfg, seed)?;
    let mut tensors = model.params.named_tensors_mut();
    if tensors.len() != shapes.len() {
        return Err(CliError::data(format!("checkpoint lists {} tensors, model has {}", shapes.len(), tensors.len())));
    }
    for ((name, t), (want, rows, cols)) in tensors.iter_mut().zip(&shapes) {
        if name != want || t.rows() != *rows || t.cols() != *cols {
            return Err(CliError::data(format!(
                "checkpoint tensor {want} [{rows}x{cols}] does not match model tensor {name} [{}x{}]",
                t.rows(),
                t.cols()
            )));
        }
        let mut buf = vec![0u8; rows * cols * 4];
        r.read_exact(&mut buf).map_err(|_| CliError::data(format!("checkpoint truncated in tensor {want}")))?;
        for (v, b) in t.data_mut().iter_mut().zip(buf.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
    }
    drop(tensors);
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| CliError::data(format!("checkpoint: {e}")))? != 0 {
        return Err(CliError::data("checkpoint has trailing bytes"));
    }
    model.check_shapes()?;
    Ok((model, seed))
}

pub fn load(path: &Path) -> CliResult<(Model<f32>, u64)> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_checkpoint(file).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}
