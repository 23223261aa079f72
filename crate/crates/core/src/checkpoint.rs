//! Checkpoint container: a text header naming every tensor, followed by
//! little-endian f32 blobs.
//!
//! ```text
//! LNGRAM-CKPT v1
//! config_hash <hex>
//! config <model config json>
//! train <optional train config json>
//! param <name> <rows>x<cols> f32 <offset>
//! ...
//! end
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::config_hash;
use crate::error::{LngramError, Result};
use crate::model::{Decoder, DecoderConfig};
use crate::numerics::Real;
use crate::train::TrainConfig;

const MAGIC: &str = "LNGRAM-CKPT v1";

fn bad(msg: impl Into<String>) -> LngramError {
    LngramError::Checkpoint(msg.into())
}

pub fn write_checkpoint<F: Real, W: Write>(mut w: W, model: &Decoder<F>, train: Option<&TrainConfig>) -> Result<()> {
    let mut header = format!("{MAGIC}\nconfig_hash {}\nconfig {}\n", config_hash(&model.config)?, serde_json::to_string(&model.config)?);
    if let Some(t) = train {
        header.push_str(&format!("train {}\n", serde_json::to_string(t)?));
    }
    let mut offset = 0usize;
    for (name, _, t) in model.tensors() {
        header.push_str(&format!("param {name} {}x{} f32 {offset}\n", t.nrows(), t.ncols()));
        offset += 4 * t.len();
    }
    header.push_str("end\n");
    w.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(offset);
    for (_, _, t) in model.tensors() {
        for &x in t.iter() {
            buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn save_checkpoint<F: Real>(path: &Path, model: &Decoder<F>, train: Option<&TrainConfig>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, model, train)?;
    w.flush()?;
    Ok(())
}

/// A decoded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<F: Real> {
    pub model: Decoder<F>,
    pub config_hash: String,
    pub train: Option<TrainConfig>,
}

/// Reads a checkpoint. With `expected`, the stored config hash must match
/// the hash of that config.
pub fn read_checkpoint<F: Real, R: Read>(r: R, expected: Option<&DecoderConfig>) -> Result<Checkpoint<F>> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let next = |r: &mut BufReader<R>, line: &mut String| -> Result<()> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(bad("header is truncated"));
        }
        Ok(())
    };
    next(&mut r, &mut line)?;
    if line.trim_end() != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    next(&mut r, &mut line)?;
    let hash = line.trim_end().strip_prefix("config_hash ").ok_or_else(|| bad("missing config hash"))?.to_string();
    next(&mut r, &mut line)?;
    let json = line.trim_end().strip_prefix("config ").ok_or_else(|| bad("missing config"))?;
    let config: DecoderConfig = serde_json::from_str(json).map_err(|e| bad(format!("unreadable config: {e}")))?;
    if config_hash(&config)? != hash {
        return Err(bad("stored config does not match its hash"));
    }
    if let Some(exp) = expected {
        let want = config_hash(exp)?;
        if want != hash {
            return Err(bad(format!("config hash mismatch: checkpoint {hash}, expected {want}")));
        }
    }
    let mut train = None;
    let mut params = Vec::new();
    loop {
        next(&mut r, &mut line)?;
        let l = line.trim_end();
        if l == "end" {
            break;
        }
        if let Some(json) = l.strip_prefix("train ") {
            train = Some(serde_json::from_str(json).map_err(|e| bad(format!("unreadable train config: {e}")))?);
            continue;
        }
        let parts: Vec<&str> = l.split(' ').collect();
        let [tag, name, shape, dtype, offset] = parts.as_slice() else {
            return Err(bad(format!("malformed header line `{l}`")));
        };
        if *tag != "param" || *dtype != "f32" {
            return Err(bad(format!("malformed header line `{l}`")));
        }
        let (rows, cols) = shape.split_once('x').ok_or_else(|| bad(format!("bad shape `{shape}`")))?;
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number `{s}`")));
        params.push((name.to_string(), parse(rows)?, parse(cols)?, parse(offset)?));
    }

    // the layout comes from the config; the header must describe it exactly
    let mut model = Decoder::<F>::init(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let layout: Vec<(String, usize, usize)> = model.tensors().into_iter().map(|(n, _, t)| (n, t.nrows(), t.ncols())).collect();
    if layout.len() != params.len() {
        return Err(bad(format!("header lists {} tensors, config implies {}", params.len(), layout.len())));
    }
    let mut expected_offset = 0;
    for ((n, rows, cols), (pn, pr, pc, po)) in layout.iter().zip(&params) {
        if n != pn || rows != pr || cols != pc || *po != expected_offset {
            return Err(bad(format!("tensor `{pn}` does not match the configured layout")));
        }
        expected_offset += 4 * rows * cols;
    }
    let mut blob = Vec::with_capacity(expected_offset);
    r.read_to_end(&mut blob)?;
    if blob.len() != expected_offset {
        return Err(bad(format!("expected {expected_offset} data bytes, found {}", blob.len())));
    }
    let mut chunks = blob.chunks_exact(4);
    for (_, _, t) in model.tensors_mut() {
        for x in t.iter_mut() {
            let c = chunks.next().expect("length checked");
            *x = F::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        }
    }
    Ok(Checkpoint { model, config_hash: hash, train })
}

pub fn load_checkpoint<F: Real>(path: &Path, expected: Option<&DecoderConfig>) -> Result<Checkpoint<F>> {
    read_checkpoint(std::fs::File::open(path)?, expected)
}
