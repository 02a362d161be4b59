//! Binary checkpoints: the `NAUSCKPT 1` magic line, a length-prefixed
//! `key=value` config block, a parameter count, then every parameter block in
//! declared order as little-endian `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelError, ModelParams, Result};

const MAGIC_PREFIX: &[u8] = b"NAUSCKPT ";
const VERSION: &[u8] = b"1\n";

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut out: W) -> Result<()> {
    out.write_all(MAGIC_PREFIX)?;
    out.write_all(VERSION)?;
    let cfg = params.config.to_kv();
    out.write_all(&(cfg.len() as u32).to_le_bytes())?;
    out.write_all(cfg.as_bytes())?;
    out.write_all(&(params.num_params() as u64).to_le_bytes())?;
    for block in params.blocks() {
        for &x in block {
            out.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    write_checkpoint(params, BufWriter::new(File::create(path)?))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ModelParams> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let corrupt = |m: &str| ModelError::CorruptFile(m.to_string());
    if !buf.starts_with(MAGIC_PREFIX) {
        return Err(corrupt("missing NAUSCKPT magic"));
    }
    let rest = &buf[MAGIC_PREFIX.len()..];
    let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("unterminated header"))?;
    if &rest[..=nl] != VERSION {
        return Err(ModelError::VersionMismatch(String::from_utf8_lossy(&rest[..nl]).into_owned()));
    }
    let mut pos = MAGIC_PREFIX.len() + nl + 1;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= buf.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &buf[pos..end];
        pos = end;
        Ok(s)
    };
    let cfg_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let cfg_text = std::str::from_utf8(take(cfg_len)?).map_err(|_| corrupt("config is not UTF-8"))?;
    let config = ModelConfig::from_kv(cfg_text).map_err(|e| corrupt(&e.to_string()))?;
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let mut params = ModelParams::init(&config, 0)?;
    if count != params.num_params() {
        return Err(corrupt("parameter count does not match config"));
    }
    let data = take(count.checked_mul(4).ok_or_else(|| corrupt("size overflow"))?)?;
    let mut values = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    for block in params.blocks_mut() {
        for x in block.iter_mut() {
            *x = values.next().expect("length checked");
        }
    }
    if pos != buf.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(params)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, Positional};

    fn params() -> ModelParams {
        let cfg = ModelConfig { layers: 2, heads: 2, model_dim: 8, attn_dim: 4, ffn_dim: 12, vocab_size: 6, max_len: 9, positional: Positional::Learned };
        ModelParams::init(&cfg, 17).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let p = params();
        let mut a = Vec::new();
        write_checkpoint(&p, &mut a).unwrap();
        assert!(a.starts_with(b"NAUSCKPT 1\n"));
        let back = read_checkpoint(&a[..]).unwrap();
        let mut b = Vec::new();
        write_checkpoint(&back, &mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(back.config, p.config);
    }

    #[test]
    fn forward_unchanged_by_round_trip() {
        let mut p = params();
        p.round_to_f32();
        let mut bytes = Vec::new();
        write_checkpoint(&p, &mut bytes).unwrap();
        let back = read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back, p);
        let ids = [0, 3, 5, 6, 1];
        assert_eq!(forward(&p, &ids).unwrap(), forward(&back, &ids).unwrap());
    }

    #[test]
    fn truncated_and_mismatched_files() {
        let mut bytes = Vec::new();
        write_checkpoint(&params(), &mut bytes).unwrap();
        for cut in [5, 20, bytes.len() - 1] {
            assert!(matches!(read_checkpoint(&bytes[..cut]), Err(ModelError::CorruptFile(_))), "cut {cut}");
        }
        let mut v2 = bytes.clone();
        v2[9] = b'2';
        assert!(matches!(read_checkpoint(&v2[..]), Err(ModelError::VersionMismatch(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(read_checkpoint(&extra[..]), Err(ModelError::CorruptFile(_))));
    }
}
