//! Named parameter storage and the binary checkpoint format.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "ODGS" | version u32 | count u32
//! [version 2 only] meta_len u32 | meta bytes (UTF-8 JSON)
//! count × ( name_len u16 | name | rank u8 | extents u32×rank | dtype u8 | payload )
//! ```
//!
//! `dtype` is 0 for f32 and 1 for f64. Version 1 files carry no metadata
//! block; version 2 embeds a JSON document (model configuration) after the
//! header counts.

use std::collections::HashMap;
use std::path::Path;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ODGS";

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Copies every tensor whose name and shape match from `other`.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, value) in other.names.iter().zip(&other.values) {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter {name}")))?;
            if self.values[id.0].shape() != value.shape() {
                return Err(Error::shape("load", self.values[id.0].shape(), value.shape()));
            }
            self.values[id.0] = value.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self, meta: Option<&str>) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(if meta.is_some() { 2u32 } else { 1u32 }).to_le_bytes());
        out.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        if let Some(meta) = meta {
            out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
            out.extend_from_slice(meta.as_bytes());
        }
        for (name, value) in self.names.iter().zip(&self.values) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(value.rank() as u8);
            for &e in value.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            out.push(T::DTYPE_FLAG);
            for &v in value.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Parses a checkpoint, converting payloads to `T` when the stored width differs.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Option<String>)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != 1 && version != 2 {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let meta = if version == 2 {
            let n = r.u32()? as usize;
            let raw = r.take(n)?;
            Some(String::from_utf8(raw.to_vec()).map_err(|_| Error::Format("metadata is not UTF-8".into()))?)
        } else {
            None
        };
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let data: Vec<T> = match r.u8()? {
                0 => r
                    .take(n * 4)?
                    .chunks(4)
                    .map(|c| T::lit(f32::read_le(c) as f64))
                    .collect(),
                1 => r.take(n * 8)?.chunks(8).map(|c| T::lit(f64::read_le(c))).collect(),
                other => return Err(Error::Format(format!("unknown dtype flag {other}"))),
            };
            if store.id(&name).is_some() {
                return Err(Error::Format(format!("duplicate parameter {name}")));
            }
            store.add(name, Tensor::new(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok((store, meta))
    }

    pub fn save(&self, path: &Path, meta: Option<&str>) -> Result<()> {
        std::fs::write(path, self.to_bytes(meta))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Option<String>)> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// A tape with every parameter of a store bound as a leaf.
pub struct Session<T> {
    pub tape: Tape<T>,
    vars: Vec<Var>,
}

impl<T: Scalar> Session<T> {
    /// Binds the store's parameters; `track` controls whether they receive gradients.
    pub fn new(store: &ParamStore<T>, track: bool) -> Self {
        let tape = Tape::new();
        let vars = store
            .values()
            .iter()
            .map(|v| {
                if track {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Self { tape, vars }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients for every parameter, in store order.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|&v| {
                grads.take(v).unwrap_or_else(|| {
                    let shape = self.tape.shape(v);
                    Tensor::zeros(&shape)
                })
            })
            .collect()
    }
}
