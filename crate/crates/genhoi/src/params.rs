//! Named parameter storage, graph binding, and the checkpoint container.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer treatment of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Main learning rate.
    Main,
    /// Text-initialized classifier rows, fine-tuned at the classifier rate.
    Classifier,
    /// Never updated.
    Frozen,
}

impl ParamGroup {
    fn code(self) -> u8 {
        match self {
            ParamGroup::Main => 0,
            ParamGroup::Classifier => 1,
            ParamGroup::Frozen => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ParamGroup::Main),
            1 => Some(ParamGroup::Classifier),
            2 => Some(ParamGroup::Frozen),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
    /// Excluded from weight decay (biases, norms, embeddings).
    pub no_decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Registers a parameter; panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup, no_decay: bool) -> ParamId {
        let name = name.into();
        let id = self.params.len();
        assert!(self.index.insert(name.clone(), id).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, group, no_decay });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn set_group(&mut self, id: ParamId, group: ParamGroup) {
        self.params[id.0].group = group;
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Creates one leaf per parameter; frozen parameters and evaluation-mode
    /// bindings do not track gradients.
    pub fn bind(&self, g: &Graph, train: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), train && p.group != ParamGroup::Frozen))
            .collect();
        Bound { vars }
    }

    /// Overwrites values from `other` by name; shapes must agree and every
    /// parameter must be present.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .id(&p.name)
                .map(|id| other.value(id))
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if src.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}

/// Graph leaves for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

const CKPT_MAGIC: &[u8; 4] = b"GHCK";
const CKPT_VERSION: u32 = 1;

/// Serializes parameters (as little-endian f32) together with a JSON
/// configuration document.
///
/// Layout: magic, u32 version, u64 config length, config bytes, u64 count,
/// then per parameter: u32 name length, name, u8 group, u8 no_decay,
/// u64 rows, u64 cols, f32 payload.
pub fn save_checkpoint(path: &Path, store: &ParamStore, config_json: &str) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(config_json.as_bytes());
    buf.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (_, p) in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(p.group.code());
        buf.push(u8::from(p.no_decay));
        buf.extend_from_slice(&(p.value.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(p.value.cols() as u64).to_le_bytes());
        for &v in p.value.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} overflows")))
    }
}

/// Reads a checkpoint, returning the stored parameters and configuration JSON.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, String)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = c.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let n = c.u64()?;
    let config = String::from_utf8(c.take(n)?.to_vec())
        .map_err(|_| Error::Checkpoint("configuration is not UTF-8".into()))?;
    let count = c.u64()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let group = ParamGroup::from_code(c.u8()?)
            .ok_or_else(|| Error::Checkpoint(format!("bad group code for {name}")))?;
        let no_decay = c.u8()? != 0;
        let rows = c.u64()?;
        let cols = c.u64()?;
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
        let data = c
            .take(len)?
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
            .collect::<Vec<_>>();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("{name}: non-finite value")));
        }
        if store.id(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        store.add(name, Tensor::from_vec(rows, cols, data), group, no_decay);
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok((store, config))
}
