//! Checkpoint container: magic "ODIS", a u32 format version, then a
//! count-prefixed list of named tensor records. Each record is
//! (name length, UTF-8 name, rank, extents as u64, raw little-endian
//! f32 data). The same container carries parameter sets, optimizer
//! moments, head centers, the step counter, and exported feature tables.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{OdisError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ODIS";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_records(path: &Path, records: &[(String, Tensor<f32>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, tensor) in records {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    reader: BufReader<File>,
    path: &'a Path,
    offset: u64,
}

impl<'a> Cursor<'a> {
    fn fail(&self, msg: impl Into<String>) -> OdisError {
        OdisError::Parse {
            file: self.path.to_path_buf(),
            offset: self.offset,
            msg: msg.into(),
        }
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.reader
            .read_exact(&mut buf)
            .map_err(|e| self.fail(format!("short read of {n} bytes: {e}")))?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn read_records(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut c = Cursor {
        reader: BufReader::new(File::open(path)?),
        path,
        offset: 0,
    };
    let magic = c.bytes(4)?;
    if magic != MAGIC {
        return Err(c.fail(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(c.fail(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let count = c.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        if name_len > 4096 {
            return Err(c.fail(format!("implausible name length {name_len}")));
        }
        let name_bytes = c.bytes(name_len)?;
        let name = String::from_utf8(name_bytes).map_err(|e| c.fail(format!("name not UTF-8: {e}")))?;
        let rank = c.u32()? as usize;
        if rank > 8 {
            return Err(c.fail(format!("implausible rank {rank} for record {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = c.bytes(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| c.fail(format!("record {name}: {e}")))?;
        records.push((name, tensor));
    }
    Ok(records)
}
