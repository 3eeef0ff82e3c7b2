//! Checkpoint files: a versioned header, the canonical configuration text
//! and named `T4v1` tensor blocks.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::network::{ModelConfig, Network};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::params::ParamStore;
use crate::tensor::Tensor4;

pub const CHECKPOINT_HEADER: &str = "rcn-checkpoint 1";

pub fn write_checkpoint<W: Write>(net: &Network, mut out: W) -> Result<()> {
    let text = net.config().to_kv().to_text();
    writeln!(out, "{CHECKPOINT_HEADER}")?;
    writeln!(out, "config {}", text.len())?;
    out.write_all(text.as_bytes())?;
    writeln!(out, "tensors {}", net.params().len())?;
    for (name, t) in net.params().iter() {
        writeln!(out, "{name}")?;
        t.write_to(&mut out)?;
    }
    Ok(())
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn read_line<R: BufRead>(input: &mut R) -> Result<String> {
    let mut line = String::new();
    if input.read_line(&mut line)? == 0 {
        return Err(format_err("unexpected end of checkpoint"));
    }
    Ok(line.trim_end_matches('\n').to_string())
}

fn counted(line: &str, key: &str) -> Result<usize> {
    line.strip_prefix(key)
        .and_then(|s| s.strip_prefix(' '))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err(format!("expected `{key} <count>`, found `{line}`")))
}

pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<Network> {
    let header = read_line(&mut input)?;
    if header != CHECKPOINT_HEADER {
        return Err(format_err(format!("unsupported checkpoint header `{header}`")));
    }
    let len = counted(&read_line(&mut input)?, "config")?;
    let mut text = vec![0u8; len];
    input.read_exact(&mut text)?;
    let text = String::from_utf8(text).map_err(|_| format_err("configuration is not UTF-8"))?;
    let config = ModelConfig::from_kv(&KvMap::parse(&text)?)?;
    let count = counted(&read_line(&mut input)?, "tensors")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = read_line(&mut input)?;
        if params.get(&name).is_some() {
            return Err(format_err(format!("duplicate tensor `{name}`")));
        }
        params.insert(name, Tensor4::read_from(&mut input)?);
    }
    Network::with_params(config, params)
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_checkpoint(net, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let file = File::open(path).map_err(|e| Error::Load { path: path.to_path_buf(), msg: e.to_string() })?;
    read_checkpoint(BufReader::new(file)).map_err(|e| match e {
        Error::Load { .. } => e,
        other => Error::Load { path: path.to_path_buf(), msg: other.to_string() },
    })
}
