use std::collections::HashMap;
use std::io::{Read, Write};

use super::{Array, DiffError};

/// Handle to a parameter inside a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Array,
    grad: Array,
    adam_m: Array,
    adam_v: Array,
    touched: bool,
}

/// Named trainable arrays with gradient accumulators and optimizer moments.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Array) -> Result<ParamId, DiffError> {
        if self.index.contains_key(name) {
            return Err(DiffError::DuplicateParameter(name.to_string()));
        }
        let shape = value.shape().to_vec();
        self.entries.push(Entry {
            name: name.to_string(),
            grad: Array::zeros(&shape),
            adam_m: Array::zeros(&shape),
            adam_v: Array::zeros(&shape),
            value,
            touched: false,
        });
        let id = self.entries.len() - 1;
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    /// Look up a parameter by name and check its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<ParamId, DiffError> {
        let id = self
            .id(name)
            .ok_or_else(|| DiffError::MissingParameter(name.to_string()))?;
        let found = self.value(id).shape();
        if found != shape {
            return Err(DiffError::Shape {
                op: "parameter lookup",
                left: found.to_vec(),
                right: shape.to_vec(),
            });
        }
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array {
        &self.entries[id.0].grad
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let e = &mut self.entries[id.0];
        for (g, d) in e.grad.data_mut().iter_mut().zip(grad) {
            *g += d;
        }
        e.touched = true;
    }

    /// Whether the parameter received a gradient since the last optimizer step.
    pub fn touched(&self, id: ParamId) -> bool {
        self.entries[id.0].touched
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
            e.touched = false;
        }
    }

    pub(crate) fn apply_adam(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for e in &mut self.entries {
            if !e.touched {
                continue;
            }
            let g = e.grad.data();
            let m = e.adam_m.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
            }
            let v = e.adam_v.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            let m = e.adam_m.data();
            let v = e.adam_v.data();
            for ((w, mi), vi) in e.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            e.grad.data_mut().fill(0.0);
            e.touched = false;
        }
    }

    /// Serialize the store body (step counter, then every entry in insertion order).
    pub fn write_body(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            let shape = e.value.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for arr in [&e.value, &e.adam_m, &e.adam_v] {
                for x in arr.data() {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_body(r: &mut impl Read) -> Result<Self, DiffError> {
        let mut store = ParameterStore::new();
        store.step = read_u64(r)?;
        let count = read_u32(r)?;
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            if name_len > 1 << 16 {
                return Err(DiffError::Corrupt(format!("name length {name_len}")));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name)
                .map_err(|_| DiffError::Corrupt("parameter name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            if rank == 0 || rank > 8 {
                return Err(DiffError::Corrupt(format!("rank {rank} for {name}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(r)? as usize);
            }
            let n: usize = shape.iter().product();
            if n == 0 || n > 1 << 28 {
                return Err(DiffError::Corrupt(format!("shape {shape:?} for {name}")));
            }
            let mut arrays = Vec::with_capacity(3);
            for _ in 0..3 {
                let mut data = Vec::with_capacity(n);
                for _ in 0..n {
                    data.push(read_f64(r)?);
                }
                arrays.push(Array::new(shape.clone(), data)?);
            }
            let adam_v = arrays.pop().unwrap();
            let adam_m = arrays.pop().unwrap();
            let value = arrays.pop().unwrap();
            let id = store.add(&name, value)?;
            store.entries[id.0].adam_m = adam_m;
            store.entries[id.0].adam_v = adam_v;
        }
        Ok(store)
    }
}

/// Magic bytes opening every checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 9] = b"SSNPCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Write a checkpoint: magic, version, length-prefixed metadata blob, store body.
pub fn write_checkpoint(
    w: &mut impl Write,
    store: &ParameterStore,
    metadata: &[u8],
) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(metadata.len() as u32).to_le_bytes())?;
    w.write_all(metadata)?;
    store.write_body(w)
}

/// Inverse of [`write_checkpoint`]; returns the store and the metadata blob.
pub fn read_checkpoint(r: &mut impl Read) -> Result<(ParameterStore, Vec<u8>), DiffError> {
    let mut magic = [0u8; 9];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(DiffError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(DiffError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta_len = read_u32(r)? as usize;
    if meta_len > 1 << 26 {
        return Err(DiffError::Corrupt(format!("metadata length {meta_len}")));
    }
    let mut metadata = vec![0u8; meta_len];
    r.read_exact(&mut metadata).map_err(truncated)?;
    let store = ParameterStore::read_body(r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(DiffError::Io)? != 0 {
        return Err(DiffError::Corrupt("trailing bytes after checkpoint".into()));
    }
    Ok((store, metadata))
}

fn truncated(e: std::io::Error) -> DiffError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        DiffError::Truncated
    } else {
        DiffError::Io(e)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, DiffError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, DiffError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, DiffError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(f64::from_le_bytes(b))
}
