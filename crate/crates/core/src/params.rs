//! Named parameter storage and its binary file format.
//!
//! File layout (all integers little-endian `u32`):
//!
//! ```text
//! "PATD" | version | scalar width in bytes (4 or 8)
//! repeated until EOF:
//!   name length | name bytes (UTF-8) | rank | extents[rank] | scalars
//! ```

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PATD";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T: Real = f32> {
    name: String,
    value: Arc<Tensor<T>>,
    grad: Option<Tensor<T>>,
    trainable: bool,
}

impl<T: Real> Parameter<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real = f32> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    /// Registers a parameter under a unique name. Running statistics and other
    /// buffers are registered with `trainable = false`.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value: Arc::new(value), grad: None, trainable });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_value",
                detail: format!("`{}` is {:?}, got {:?}", p.name, p.value.shape(), value.shape()),
            });
        }
        p.value = Arc::new(value);
        Ok(())
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn num_trainable_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable && p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    /// Sets every trainable parameter under `prefix` to `value`.
    pub fn fill_prefix(&mut self, prefix: &str, value: T) {
        for p in self.params.iter_mut().filter(|p| p.trainable && p.name.starts_with(prefix)) {
            Arc::make_mut(&mut p.value).fill(value);
        }
    }

    /// Overwrites every trainable parameter with uniform noise in `[-scale, scale]`.
    pub fn randomize<R: Rng>(&mut self, rng: &mut R, scale: f64) {
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            for v in Arc::make_mut(&mut p.value).data_mut() {
                *v = T::lit(rng.random_range(-scale..=scale));
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grads` into the stored gradients. Trainable parameters that the
    /// graph did not reach receive an explicit zero gradient.
    pub fn accumulate(&mut self, grads: &BTreeMap<ParamId, Tensor<T>>) {
        for (i, p) in self.params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let slot = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            if let Some(g) = grads.get(&ParamId(i)) {
                slot.add_assign(g);
            }
        }
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub(crate) fn param_parts_mut(p: &mut Parameter<T>) -> (&mut Tensor<T>, Option<&Tensor<T>>) {
        (Arc::make_mut(&mut p.value), p.grad.as_ref())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in p.value.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Decodes a parameter file into `(name, tensor)` records in file order.
    pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Invalid("not a parameter file (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Invalid(format!("unsupported parameter file version {version}")));
        }
        let width = cur.u32()? as usize;
        if width != T::BYTES {
            return Err(Error::Invalid(format!(
                "parameter file holds {width}-byte scalars, expected {}",
                T::BYTES
            )));
        }
        let mut records = Vec::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Invalid("parameter name is not UTF-8".into()))?;
            let rank = cur.u32()? as usize;
            let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = cur.take(n * width)?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            records.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(records)
    }

    /// Builds a standalone store from a parameter file; every record is marked trainable.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut store = Self::new();
        for (name, t) in Self::decode(bytes)? {
            store.register(name, t, true)?;
        }
        Ok(store)
    }

    /// Replaces the values of already-registered parameters with those in `bytes`.
    /// Every registered parameter must be present with a matching shape.
    pub fn load_values(&mut self, bytes: &[u8]) -> Result<()> {
        let records: HashMap<_, _> = Self::decode(bytes)?.into_iter().collect();
        for p in &mut self.params {
            let t = records
                .get(&p.name)
                .ok_or_else(|| Error::Invalid(format!("parameter `{}` missing from file", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "load_values",
                    detail: format!("`{}`: {:?} vs {:?}", p.name, t.shape(), p.value.shape()),
                });
            }
            p.value = Arc::new(t.clone());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load_values_from(&mut self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        self.load_values(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Invalid(format!("truncated parameter file at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
