use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::hashing::{sha256_bytes, to_hex};

const MAGIC: &[u8; 7] = b"JGEMB1\n";

/// Content-addressed hidden-state store: hex SHA-256 of the exact utf8
/// text maps to that text's [L, d] encoder output (CLS is row 0).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingStore {
    d_model: usize,
    records: BTreeMap<[u8; 32], Tensor<f32>>,
}

impl EmbeddingStore {
    pub fn new(d_model: usize) -> Self {
        EmbeddingStore { d_model, records: BTreeMap::new() }
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insert(&mut self, text: &str, h: Tensor<f32>) -> Result<()> {
        if h.rank() != 2 || h.cols() != self.d_model || h.rows() == 0 {
            return Err(Error::dim(
                "embedding_store",
                format!("expected [L, {}] with L >= 1, got {:?}", self.d_model, h.shape()),
            ));
        }
        let key = sha256_bytes(text);
        if let Some(existing) = self.records.get(&key) {
            if existing != &h {
                return Err(Error::data(format!(
                    "hash collision: differing content stored under {}",
                    to_hex(&key)
                )));
            }
            return Ok(());
        }
        self.records.insert(key, h);
        Ok(())
    }

    pub fn get(&self, text: &str) -> Result<&Tensor<f32>> {
        let key = sha256_bytes(text);
        self.records.get(&key).ok_or(Error::Lookup { hash: to_hex(&key) })
    }

    pub fn contains(&self, text: &str) -> bool {
        self.records.contains_key(&sha256_bytes(text))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        w.write_all(&(self.d_model as u32).to_le_bytes())?;
        for (hash, h) in &self.records {
            w.write_all(hash)?;
            w.write_all(&(h.rows() as u32).to_le_bytes())?;
            for &v in h.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut r = OffsetReader::new(BufReader::new(file));
        Self::read_from(&mut r)
    }

    pub fn read_from(r: &mut OffsetReader<impl Read>) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact_at(&mut magic, "magic bytes")?;
        if &magic != MAGIC {
            return Err(Error::format(0, "not an embedding container (bad magic)"));
        }
        let count = r.read_u64("record count")?;
        let d_model = r.read_u32("d_model")? as usize;
        if d_model == 0 {
            return Err(Error::format(r.offset(), "d_model must be nonzero"));
        }
        let mut store = EmbeddingStore::new(d_model);
        for _ in 0..count {
            let mut hash = [0u8; 32];
            r.read_exact_at(&mut hash, "record hash")?;
            let l = r.read_u32("record length")? as usize;
            if l == 0 {
                return Err(Error::format(r.offset(), "record with zero rows"));
            }
            let mut data = vec![0f32; l * d_model];
            for v in data.iter_mut() {
                *v = f32::from_le_bytes(r.read_array::<4>("embedding value")?);
            }
            if store.records.insert(hash, Tensor::matrix(l, d_model, data)?).is_some() {
                return Err(Error::format(r.offset(), format!("duplicate record hash {}", to_hex(&hash))));
            }
        }
        Ok(store)
    }
}

/// Reader that tracks the byte offset so format errors can cite where
/// the stream went wrong.
pub struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    pub fn new(inner: R) -> Self {
        OffsetReader { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner
            .read_exact(buf)
            .map_err(|e| Error::format(at, format!("truncated while reading {what}: {e}")))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub fn read_array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.read_exact_at(&mut buf, what)?;
        Ok(buf)
    }

    pub fn read_u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.read_array::<4>(what)?))
    }

    pub fn read_u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.read_array::<8>(what)?))
    }
}
