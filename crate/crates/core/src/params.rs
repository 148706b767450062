//! Named parameter store and the flat key→array checkpoint archive.
//!
//! Archive layout (little endian):
//! `b"MGRA"`, `u32` version, `u32` entry count, then per entry
//! `u32` key length, key bytes (UTF-8), `u64` rows, `u64` cols, `rows*cols` `f64`s.
//! Entries are written in key order so identical stores produce identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"MGRA";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    values: BTreeMap<String, Matrix>,
    frozen: BTreeSet<String>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.values.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.values.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.values.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.values().map(Matrix::len).sum()
    }

    /// Marks every parameter whose key starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        let keys: Vec<String> = self.values.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        self.frozen.extend(keys);
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Xavier-style normal init for a `fan_in × fan_out` weight.
    pub fn init_weight<R: Rng + ?Sized>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        self.insert(name, Matrix::randn(fan_in, fan_out, std, rng));
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Matrix::zeros(rows, cols));
    }

    pub fn init_ones(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Matrix::filled(rows, cols, 1.0));
    }

    /// Sub-store of keys under `prefix` (prefix retained).
    pub fn with_prefix(&self, prefix: &str) -> Params {
        let values = self.values.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect();
        let frozen = self.frozen.iter().filter(|k| k.starts_with(prefix)).cloned().collect();
        Params { values, frozen }
    }

    pub fn merge(&mut self, other: Params) {
        self.values.extend(other.values);
        self.frozen.extend(other.frozen);
    }

    pub fn write_archive<W: Write>(&self, w: &mut W) -> Result<()> {
        write_archive(w, self.values.iter().map(|(k, v)| (k.as_str(), v)), self.values.len())
    }

    pub fn read_archive<R: Read>(r: &mut R) -> Result<Self> {
        let values = read_archive(r)?;
        Ok(Params { values, frozen: BTreeSet::new() })
    }
}

pub fn write_archive<'a, W: Write>(
    w: &mut W,
    entries: impl Iterator<Item = (&'a str, &'a Matrix)>,
    count: usize,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(count as u32)?;
    for (k, m) in entries {
        w.write_u32::<LittleEndian>(k.len() as u32)?;
        w.write_all(k.as_bytes())?;
        w.write_u64::<LittleEndian>(m.rows() as u64)?;
        w.write_u64::<LittleEndian>(m.cols() as u64)?;
        for &v in m.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_archive<R: Read>(r: &mut R) -> Result<BTreeMap<String, Matrix>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::InvalidInput("not a parameter archive".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::InvalidInput(format!("unsupported archive version {version}")));
    }
    let count = r.read_u32::<LittleEndian>()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let klen = r.read_u32::<LittleEndian>()? as usize;
        let mut kb = vec![0u8; klen];
        r.read_exact(&mut kb)?;
        let key = String::from_utf8(kb).map_err(|_| Error::InvalidInput("non-UTF-8 archive key".into()))?;
        let rows = r.read_u64::<LittleEndian>()? as usize;
        let cols = r.read_u64::<LittleEndian>()? as usize;
        let mut data = vec![0.0; rows * cols];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        out.insert(key, Matrix::from_vec(rows, cols, data));
    }
    Ok(out)
}
