//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "O2SRCKPT"
//! version u16
//! cfg_len u32      UTF-8 `key = value` block (model config echo, step,
//!                  optional training seed)
//! count   u32      tensor count
//! per tensor:
//!   name_len u16, name bytes
//!   dtype    u8   (1 = f64, 0 = f32)
//!   ndim     u8, dims u32 x ndim
//!   payload  little-endian floats
//! ```
//!
//! Training checkpoints carry the optimizer moments as extra tensors under
//! the `adam.` prefix so an interrupted run resumes bit-exactly; inference
//! ignores them. Parameter payloads are written as f64 because resuming and
//! the round-trip contract require full precision.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::config;
use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, ModelParams};

pub const MAGIC: &[u8; 8] = b"O2SRCKPT";
pub const VERSION: u16 = 1;

/// A fully parsed checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: ModelParams,
    /// Optimizer state tensors (`adam.m.*`, `adam.v.*`), empty for
    /// inference-only checkpoints.
    pub opt_state: BTreeMap<String, Vec<f64>>,
    /// Seed echoed from the training run, if any.
    pub train_seed: Option<u64>,
}

impl Checkpoint {
    /// Error with the first differing field when `expected` does not match
    /// the embedded model config.
    pub fn ensure_compatible(&self, expected: &ModelConfig) -> Result<()> {
        ensure_config_compatible(&self.config, expected)
    }
}

pub fn ensure_config_compatible(actual: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    let a = config::model_to_kv(actual);
    let b = config::model_to_kv(expected);
    for (key, av) in &a {
        if key == "model.seed" {
            continue; // seed only affects initialization, not the shapes
        }
        let bv = &b[key];
        if av != bv {
            return Err(Error::Incompatible(format!(
                "{key}: checkpoint has {av}, expected {bv}"
            )));
        }
    }
    Ok(())
}

fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_u16(buf, name.len() as u16);
    buf.extend_from_slice(name.as_bytes());
    buf.push(1); // f64
    buf.push(shape.len() as u8);
    for &d in shape {
        put_u32(buf, d as u32);
    }
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize a checkpoint. `opt_state` tensors ride along verbatim.
pub fn save_checkpoint_full(
    params: &ModelParams,
    cfg: &ModelConfig,
    step: u64,
    opt_state: &BTreeMap<String, Vec<f64>>,
    train_seed: Option<u64>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut kv = config::model_to_kv(cfg);
    kv.insert("step".to_string(), step.to_string());
    if let Some(seed) = train_seed {
        kv.insert("train.seed".to_string(), seed.to_string());
    }
    let cfg_block = config::serialize_kv(&kv);

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u16(&mut buf, VERSION);
    put_u32(&mut buf, cfg_block.len() as u32);
    buf.extend_from_slice(cfg_block.as_bytes());

    let mut count = 0u32;
    params.visit(|_, _, _| count += 1);
    count += opt_state.len() as u32;
    put_u32(&mut buf, count);
    params.visit(|name, shape, data| write_tensor(&mut buf, name, shape, data));
    for (name, data) in opt_state {
        write_tensor(&mut buf, name, &[data.len()], data);
    }

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Serialize parameters and config only (no optimizer state).
pub fn save_checkpoint(
    params: &ModelParams,
    cfg: &ModelConfig,
    step: u64,
    path: impl AsRef<Path>,
) -> Result<()> {
    save_checkpoint_full(params, cfg, step, &BTreeMap::new(), None, path)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Integrity(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parse and validate a checkpoint file. Every tensor named by the config's
/// shape chart must be present with the declared shape.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::Integrity(format!(
            "{}: bad magic bytes",
            path.display()
        )));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint format version {version}, this build reads {VERSION}"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Integrity("config block is not UTF-8".into()))?;
    let kv = config::parse_kv(cfg_text).map_err(|e| Error::Integrity(e.to_string()))?;
    let cfg = config::model_from_kv(&kv).map_err(|e| Error::Integrity(e.to_string()))?;
    let step: u64 = kv
        .get("step")
        .ok_or_else(|| Error::Integrity("config block missing 'step'".into()))?
        .parse()
        .map_err(|_| Error::Integrity("invalid 'step' value".into()))?;
    let train_seed = match kv.get("train.seed") {
        Some(v) => Some(
            v.parse()
                .map_err(|_| Error::Integrity("invalid 'train.seed' value".into()))?,
        ),
        None => None,
    };

    let count = r.u32()? as usize;
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1)?[0];
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match dtype {
            1 => r.take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            0 => r.take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            other => {
                return Err(Error::Integrity(format!(
                    "tensor '{name}': unknown dtype tag {other}"
                )))
            }
        };
        tensors.insert(name, (shape, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after tensor table",
            bytes.len() - r.pos
        )));
    }

    // Rebuild the parameter structure from the config and fill it in.
    let mut params = build_model(&cfg)?;
    let mut missing = Vec::new();
    params.visit_mut(|name, shape, data| match tensors.remove(name) {
        Some((s, d)) if &s == shape && d.len() == data.len() => *data = d,
        Some((s, _)) => missing.push(format!("{name}: shape {s:?}, expected {shape:?}")),
        None => missing.push(format!("{name}: missing")),
    });
    if !missing.is_empty() {
        return Err(Error::Integrity(format!(
            "checkpoint does not satisfy the shape chart: {}",
            missing.join("; ")
        )));
    }
    let mut opt_state = BTreeMap::new();
    for (name, (_, data)) in tensors {
        if name.starts_with("adam.") {
            opt_state.insert(name, data);
        } else {
            return Err(Error::Integrity(format!(
                "unexpected tensor '{name}' not in the shape chart"
            )));
        }
    }
    Ok(Checkpoint {
        config: cfg,
        step,
        params,
        opt_state,
        train_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_map, EncoderVariant};
    use crate::tensor::FeatureMap;
    use crate::util;
    use rand::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            scale: 2,
            channels: 4,
            decoder_blocks: 1,
            heads: 2,
            window_size: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.o2ck");
        let cfg = cfg();
        let params = build_model(&cfg).unwrap();
        save_checkpoint(&params, &cfg, 17, &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.step, 17);
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.params, params);

        // Forward outputs identical on a fixed input.
        let mut rng = util::rng_for(1, "ckpt");
        let lr =
            FeatureMap::from_vec(1, 8, 8, (0..64).map(|_| rng.random::<f64>()).collect()).unwrap();
        let (a, _) = forward_map(&lr, &params, &cfg).unwrap();
        let (b, _) = forward_map(&lr, &ck.params, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_magic_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.o2ck");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn truncated_file_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.o2ck");
        let cfg = cfg();
        let params = build_model(&cfg).unwrap();
        save_checkpoint(&params, &cfg, 0, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn version_mismatch_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.o2ck");
        let cfg = cfg();
        let params = build_model(&cfg).unwrap();
        save_checkpoint(&params, &cfg, 0, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99; // version low byte
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Incompatible(_))));
    }

    #[test]
    fn scale_mismatch_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.o2ck");
        let cfg2 = cfg();
        let params = build_model(&cfg2).unwrap();
        save_checkpoint(&params, &cfg2, 0, &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        let cfg4 = ModelConfig { scale: 4, ..cfg2 };
        match ck.ensure_compatible(&cfg4) {
            Err(Error::Incompatible(msg)) => assert!(msg.contains("model.scale"), "{msg}"),
            other => panic!("expected incompatibility, got {other:?}"),
        }
    }

    #[test]
    fn encoder_variants_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        for variant in [
            EncoderVariant::None,
            EncoderVariant::PlainCnn,
            EncoderVariant::Attention,
            EncoderVariant::Ours,
        ] {
            let cfg = ModelConfig {
                encoder: variant,
                ..cfg()
            };
            let path = dir.path().join(format!("{}.o2ck", variant.name()));
            let params = build_model(&cfg).unwrap();
            save_checkpoint(&params, &cfg, 3, &path).unwrap();
            let ck = load_checkpoint(&path).unwrap();
            assert_eq!(ck.params, params, "{}", variant.name());
        }
    }
}
