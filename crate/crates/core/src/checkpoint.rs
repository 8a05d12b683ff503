//! Self-describing binary checkpoint: header, config as JSON, then every
//! parameter tensor with its name, shape and little-endian values.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{DType, Matrix, Real};
use crate::params::Visit;
use crate::stack::OneTrans;

const MAGIC: &[u8; 8] = b"ONETRANS";
const VERSION: u32 = 1;

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 1,
        DType::F64 => 2,
    }
}

fn named_tensors<T: Real>(model: &OneTrans<T>) -> Vec<(String, &Matrix<T>)> {
    let mut out = Vec::new();
    model.dense.visit("dense", &mut |n, m| out.push((n.to_owned(), m)));
    model.embeddings.visit("emb", &mut |n, m| out.push((n.to_owned(), m)));
    out
}

pub fn to_bytes<T: Real>(model: &OneTrans<T>) -> Result<Vec<u8>> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.push(dtype_code(T::DTYPE));
    b.extend_from_slice(&model.seed().to_le_bytes());
    b.extend_from_slice(&model.revision().to_le_bytes());
    let config = serde_json::to_vec(&model.config)?;
    b.extend_from_slice(&(config.len() as u64).to_le_bytes());
    b.extend_from_slice(&config);
    let tensors = named_tensors(model);
    b.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, m) in tensors {
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        b.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for &v in m.data() {
            v.write_le(&mut b);
        }
    }
    Ok(b)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows".into()))
    }
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<OneTrans<T>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let dtype = r.take(1)?[0];
    if dtype != dtype_code(T::DTYPE) {
        return Err(Error::Checkpoint(format!(
            "stored dtype code {dtype} does not match requested {:?}",
            T::DTYPE
        )));
    }
    let seed = r.u64()?;
    let revision = r.u64()?;
    let n = r.len()?;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?)?;
    let mut model = OneTrans::<T>::new(config, seed)?;
    model.set_revision(revision);

    let count = r.len()?;
    let mut stored = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let (rows, cols) = (r.len()?, r.len()?);
        let len = rows
            .checked_mul(cols)
            .and_then(|v| v.checked_mul(T::BYTES))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: shape overflows")))?;
        let data: Vec<T> = r.take(len)?.chunks_exact(T::BYTES).map(T::read_le).collect();
        stored.push((name, Matrix::new(rows, cols, data)?));
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }

    let expected: Vec<(String, (usize, usize))> = named_tensors(&model)
        .into_iter()
        .map(|(n, m)| (n, m.shape()))
        .collect();
    if expected.len() != stored.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            stored.len()
        )));
    }
    for ((name, shape), (got, m)) in expected.iter().zip(&stored) {
        if name != got || *shape != m.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor mismatch: expected {name} {shape:?}, found {got} {:?}",
                m.shape()
            )));
        }
    }
    let mut it = stored.into_iter().map(|(_, m)| m);
    model.dense.visit_mut("", &mut |_, m| *m = it.next().expect("counted"));
    model.embeddings.visit_mut("", &mut |_, m| *m = it.next().expect("counted"));
    Ok(model)
}

pub fn save<T: Real>(model: &OneTrans<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<OneTrans<T>> {
    from_bytes(&fs::read(path)?)
}
