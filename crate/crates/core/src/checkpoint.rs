//! Parameter checkpoint files.
//!
//! Layout: a UTF-8 text header followed by raw little-endian `f64` data.
//!
//! ```text
//! csan-checkpoint 1
//! tensors <count>
//! <name> <dim0>x<dim1>...
//! ...
//! end
//! <binary payload: every tensor's values, row-major, in header order>
//! ```

use std::io::{BufRead, Write};

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "csan-checkpoint 1";

pub fn write_checkpoint<W: Write>(mut w: W, config: &EncoderConfig, params: &EncoderParams) -> Result<()> {
    let names = EncoderParams::names(config);
    let tensors = params.tensors();
    if names.len() != tensors.len() {
        return Err(Error::invalid("parameters do not match the encoder config"));
    }
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "tensors {}", tensors.len())?;
    for (name, t) in names.iter().zip(&tensors) {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        writeln!(w, "{name} {}", dims.join("x"))?;
    }
    writeln!(w, "end")?;
    for t in &tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(Error::Parse("checkpoint header truncated".into()));
    }
    Ok(line.trim_end_matches('\n').to_string())
}

/// Reads a checkpoint, checking names and shapes against `config`.
pub fn read_checkpoint<R: BufRead>(mut r: R, config: &EncoderConfig) -> Result<EncoderParams> {
    if read_line(&mut r)? != MAGIC {
        return Err(Error::Parse("not a csan checkpoint".into()));
    }
    let count_line = read_line(&mut r)?;
    let count: usize = count_line
        .strip_prefix("tensors ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::Parse(format!("bad tensor count line {count_line:?}")))?;

    let expected_names = EncoderParams::names(config);
    let expected_shapes = EncoderParams::shapes(config);
    if count != expected_names.len() {
        return Err(Error::Parse(format!(
            "checkpoint holds {count} tensors, config needs {}",
            expected_names.len()
        )));
    }
    for (name, shape) in expected_names.iter().zip(&expected_shapes) {
        let line = read_line(&mut r)?;
        let (got_name, dims) = line
            .split_once(' ')
            .ok_or_else(|| Error::Parse(format!("bad tensor line {line:?}")))?;
        let got_shape = dims
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("bad shape in {line:?}: {e}")))?;
        if got_name != name || &got_shape != shape {
            return Err(Error::Parse(format!(
                "expected {name} {shape:?}, found {got_name} {got_shape:?}"
            )));
        }
    }
    if read_line(&mut r)? != "end" {
        return Err(Error::Parse("missing header terminator".into()));
    }

    let mut tensors = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for shape in &expected_shapes {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Parse("checkpoint payload truncated".into()))?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::Parse("trailing bytes after checkpoint payload".into()));
    }
    EncoderParams::from_tensors(config, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (EncoderConfig, EncoderParams) {
        let config = EncoderConfig::gradcheck_toy(AttentionMode::Conv1d { window: 2 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = EncoderParams::init(&config, &mut rng).unwrap();
        (config, params)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (config, params) = setup();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &config, &params).unwrap();
        let header = String::from_utf8_lossy(&bytes[..200]);
        assert!(header.starts_with("csan-checkpoint 1\ntensors 27\nembedding 8x8\nlayers.0.attention.w_q 8x8\n"));
        let back = read_checkpoint(&bytes[..], &config).unwrap();
        assert_eq!(back, params);
    }

    #[test]
    fn payload_is_little_endian_f64() {
        let (config, params) = setup();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &config, &params).unwrap();
        let payload_start = bytes.windows(4).position(|w| w == b"end\n").unwrap() + 4;
        let first = f64::from_le_bytes(bytes[payload_start..payload_start + 8].try_into().unwrap());
        assert_eq!(first, params.embedding.data()[0]);
        assert_eq!(bytes.len() - payload_start, 8 * params.count());
    }

    #[test]
    fn rejects_mismatched_or_truncated_files() {
        let (config, params) = setup();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &config, &params).unwrap();

        let other = EncoderConfig::new(8, 2, 32, vec![AttentionMode::Global; 2], 8, 32).unwrap();
        assert!(read_checkpoint(&bytes[..], &other).is_err());
        assert!(read_checkpoint(&bytes[..bytes.len() - 3], &config).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_checkpoint(&extra[..], &config).is_err());
        assert!(read_checkpoint(&b"garbage\n"[..], &config).is_err());
    }
}
