//! Binary parameter checkpoints.
//!
//! Layout: magic `CDW1`, little-endian `u32` count of layer sizes, the sizes
//! as `u32`, then for every linear layer its `out x in` weights (row-major)
//! followed by its biases, all little-endian `f64`.

use std::io::{Read, Write};

use super::mlp::{Activation, MlpParams};
use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 4] = b"CDW1";

pub fn write_params<W: Write>(w: &mut W, params: &MlpParams) -> Result<()> {
    w.write_all(PARAMS_MAGIC)?;
    write_u32(w, params.sizes().len() as u32)?;
    for &s in params.sizes() {
        write_u32(w, s as u32)?;
    }
    for block in params.blocks() {
        write_f64s(w, block)?;
    }
    Ok(())
}

pub fn read_params<R: Read>(r: &mut R) -> Result<MlpParams> {
    expect_magic(r, PARAMS_MAGIC)?;
    let n = read_u32(r)? as usize;
    if !(2..=64).contains(&n) {
        return Err(Error::Format(format!("implausible layer count {n}")));
    }
    let mut sizes = Vec::with_capacity(n);
    for _ in 0..n {
        sizes.push(read_u32(r)? as usize);
    }
    let mut params = MlpParams::zeros(&sizes, Activation::Mish).map_err(|_| Error::Format(format!("invalid layer sizes {sizes:?}")))?;
    for block in params.blocks_mut() {
        read_f64s(r, block)?;
    }
    if !params.is_finite() {
        return Err(Error::Format("non-finite parameter in checkpoint".into()));
    }
    Ok(params)
}

pub(crate) fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    if &buf != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&buf),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Io(e),
    })
}

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, vals: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 8);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, out: &mut [f64]) -> Result<()> {
    let mut buf = vec![0u8; out.len() * 8];
    read_exact(r, &mut buf)?;
    for (o, chunk) in out.iter_mut().zip(buf.chunks_exact(8)) {
        *o = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(())
}

pub(crate) fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 16 {
        return Err(Error::Format(format!("string length {n} too large")));
    }
    let mut buf = vec![0u8; n];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("invalid UTF-8 string".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = MlpParams::init(&[4, 8, 3], Activation::Mish, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        assert_eq!(&buf[..4], b"CDW1");
        assert_eq!(buf.len(), 4 + 4 + 3 * 4 + 8 * p.param_count());
        let q = read_params(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = MlpParams::zeros(&[2, 2], Activation::Mish).unwrap();
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_params(&mut bad.as_slice()), Err(Error::Format(_))));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(read_params(&mut &short[..]), Err(Error::Format(_))));
    }
}
