//! Parameter checkpoint files.
//!
//! Little-endian binary: the magic bytes "TGDN", a u32 format version, then
//! tensor records until end of file. Each record is a u32 name length, the
//! UTF-8 name, a u32 rank, one u64 per dimension, and the raw f64 values.
//! Writing the same records always produces the same bytes, and values
//! survive a round trip bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TGDN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, values: Vec<f64>) -> TensorRecord {
        let record = TensorRecord { name: name.into(), dims, values };
        debug_assert_eq!(record.dims.iter().product::<usize>(), record.values.len());
        record
    }
}

pub fn save(path: &Path, records: &[TensorRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for r in records {
        let expect: usize = r.dims.iter().product();
        if expect != r.values.len() {
            return Err(Error::Checkpoint(format!(
                "record {:?} has {} values for dims {:?}",
                r.name,
                r.values.len(),
                r.dims
            )));
        }
        w.write_all(&(r.name.len() as u32).to_le_bytes())?;
        w.write_all(r.name.as_bytes())?;
        w.write_all(&(r.dims.len() as u32).to_le_bytes())?;
        for &d in &r.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &r.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("truncated while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load(path: &Path) -> Result<Vec<TensorRecord>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }

    let mut records = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            // Clean end of file between records.
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact_or(&mut r, &mut name_bytes, "record name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;

        let rank = read_u32(&mut r, "rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            read_exact_or(&mut r, &mut b, "dimension")?;
            dims.push(u64::from_le_bytes(b) as usize);
        }
        let count: usize = dims.iter().copied().try_fold(1usize, |acc, d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("dims {dims:?} overflow")))?;

        let mut values = Vec::with_capacity(count);
        let mut b = [0u8; 8];
        for _ in 0..count {
            read_exact_or(&mut r, &mut b, &format!("values of {name:?}"))?;
            values.push(f64::from_le_bytes(b));
        }
        records.push(TensorRecord { name, dims, values });
    }
    Ok(records)
}
