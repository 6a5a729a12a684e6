//! `.lprb` parameter container.
//!
//! ```text
//! "LPRB1"
//! u32 LE metadata length, metadata bytes (UTF-8 JSON, may be empty)
//! repeated until EOF:
//!     u32 LE name length, name bytes (UTF-8)
//!     4 x u32 LE dims (n, c, h, w)
//!     n*c*h*w x f64 LE
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

pub const MAGIC: &[u8; 5] = b"LPRB1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor4)>,
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_checkpoint(mut w: impl Write, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(&mut w, ckpt.metadata.len())?;
    w.write_all(ckpt.metadata.as_bytes())?;
    for (name, t) in &ckpt.tensors {
        put_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        for d in t.shape().dims() {
            put_u32(&mut w, d)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn truncated(what: &str) -> Error {
    Error::Checkpoint(format!("truncated checkpoint while reading {what}"))
}

fn get_u32(r: &mut impl Read, what: &str) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => truncated(what),
        _ => Error::Io(e),
    })?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_string(r: &mut impl Read, len: usize, what: &str) -> Result<String> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| truncated(what))?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| truncated("magic"))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an LPRB1 file".into()));
    }
    let meta_len = get_u32(&mut r, "metadata length")?;
    let metadata = get_string(&mut r, meta_len, "metadata")?;

    let mut tensors = Vec::new();
    loop {
        // A clean EOF is only allowed at a tensor boundary.
        let mut first = [0u8; 1];
        if r.read(&mut first)? == 0 {
            break;
        }
        let mut rest = [0u8; 3];
        r.read_exact(&mut rest).map_err(|_| truncated("name length"))?;
        let name_len = u32::from_le_bytes([first[0], rest[0], rest[1], rest[2]]) as usize;
        let name = get_string(&mut r, name_len, "tensor name")?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = get_u32(&mut r, "dims")?;
        }
        let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3])?;
        let mut bytes = vec![0u8; shape.len() * 8];
        r.read_exact(&mut bytes).map_err(|_| truncated(&name))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push((name, Tensor4::from_vec(shape, data)?));
    }
    Ok(Checkpoint { metadata, tensors })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), ckpt)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    read_checkpoint(BufReader::new(File::open(path)?))
}
