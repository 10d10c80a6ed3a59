//! Parameter registry, binding onto a tape, and checkpoint files.
//!
//! Parameter `k` (registration order) is initialised from RNG stream `k + 1`
//! of the model seed, so its value depends only on `(seed, k, init)`. This lets
//! a [`ParamStore`] run in *lazy* mode: nothing is held in memory and each
//! parameter is regenerated when a forward pass asks for it. Lazy mode is how
//! the full-scale configuration runs inference in a few GB.

use std::cell::RefCell;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal { std: f64 },
    /// Identity on the last two axes (square).
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StoreMode {
    Eager,
    Lazy,
}

#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    mode: StoreMode,
    entries: Vec<Entry>,
    values: Vec<Rc<Tensor>>,
    prefix: Vec<String>,
}

impl ParamStore {
    pub fn new(seed: u64, mode: StoreMode) -> Self {
        Self {
            seed,
            mode,
            entries: Vec::new(),
            values: Vec::new(),
            prefix: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> StoreMode {
        self.mode
    }

    /// Names registered inside `f` are prefixed with `scope/`.
    pub fn scoped<T>(&mut self, scope: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(scope.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let mut full = self.prefix.join("/");
        if !full.is_empty() {
            full.push('/');
        }
        full.push_str(name);
        let id = ParamId(self.entries.len());
        let entry = Entry {
            name: full,
            shape: shape.to_vec(),
            init,
        };
        if self.mode == StoreMode::Eager {
            self.values.push(Rc::new(generate(self.seed, id, &entry)));
        }
        self.entries.push(entry);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count, computed from shapes alone.
    pub fn num_scalars(&self) -> u64 {
        self.entries.iter().map(|e| numel(&e.shape) as u64).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> Rc<Tensor> {
        match self.mode {
            StoreMode::Eager => Rc::clone(&self.values[id.0]),
            StoreMode::Lazy => Rc::new(generate(self.seed, id, &self.entries[id.0])),
        }
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if self.mode == StoreMode::Lazy {
            return Err(Error::Contract("parameters of a lazy store cannot be modified".into()));
        }
        if value.shape() != self.entries[id.0].shape.as_slice() {
            return Err(Error::shape(
                "ParamStore::set",
                format!("{} expects {:?}, got {:?}", self.entries[id.0].name, self.entries[id.0].shape, value.shape()),
            ));
        }
        self.values[id.0] = Rc::new(value);
        Ok(())
    }

    /// Mutable access for optimisers (eager stores only).
    pub fn value_mut(&mut self, id: ParamId) -> Result<&mut Tensor> {
        if self.mode == StoreMode::Lazy {
            return Err(Error::Contract("parameters of a lazy store cannot be modified".into()));
        }
        Ok(Rc::make_mut(&mut self.values[id.0]))
    }

    /// All parameters concatenated in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.ids().flat_map(|id| self.value(id).data().to_vec()).collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() as u64 != self.num_scalars() {
            return Err(Error::shape("ParamStore::unflatten", "length differs from parameter count"));
        }
        let mut off = 0;
        for id in self.ids().collect::<Vec<_>>() {
            let shape = self.entries[id.0].shape.clone();
            let n = numel(&shape);
            self.set(id, Tensor::new(shape, flat[off..off + n].to_vec())?)?;
            off += n;
        }
        Ok(())
    }

    /// SHA-256 over the little-endian bytes of every parameter.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for id in self.ids() {
            for v in self.value(id).data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut payload = Vec::with_capacity(self.num_scalars() as usize * 8);
        for id in self.ids() {
            for v in self.value(id).data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            seed: self.seed,
            params: self
                .entries
                .iter()
                .map(|e| CheckpointEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                })
                .collect(),
            sha256: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header)?;
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::with_capacity(payload.len() + header.len() + 16);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&payload);
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Overwrites the values of this (eager) store from a checkpoint whose
    /// names and shapes must match exactly.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |d: &str| Error::format(path, d.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        if bytes.len() < 16 + hlen {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[16..16 + hlen]).map_err(|e| bad(&format!("header: {e}")))?;
        let payload = &bytes[16 + hlen..];
        if hex::encode(Sha256::digest(payload)) != header.sha256 {
            return Err(bad("payload hash mismatch"));
        }
        if header.params.len() != self.entries.len() {
            return Err(bad(&format!(
                "checkpoint has {} parameters, model has {}",
                header.params.len(),
                self.entries.len()
            )));
        }
        for (e, c) in self.entries.iter().zip(&header.params) {
            if e.name != c.name || e.shape != c.shape {
                return Err(bad(&format!(
                    "parameter mismatch: model {} {:?} vs checkpoint {} {:?}",
                    e.name, e.shape, c.name, c.shape
                )));
            }
        }
        if payload.len() as u64 != self.num_scalars() * 8 {
            return Err(bad("payload length does not match shapes"));
        }
        let flat: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        self.unflatten(&flat)
    }
}

/// Hash recorded in a checkpoint header, without loading the payload.
pub fn checkpoint_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + hlen.min(bytes.len() - 16)])
        .map_err(|e| Error::format(path, format!("header: {e}")))?;
    Ok(header.sha256)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"BRSTCKP1";
const CHECKPOINT_FORMAT: &str = "brightstack-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    seed: u64,
    params: Vec<CheckpointEntry>,
    sha256: String,
}

fn generate(seed: u64, id: ParamId, e: &Entry) -> Tensor {
    let n = numel(&e.shape);
    let data = match e.init {
        Init::Zeros => vec![0.0; n],
        Init::Const(c) => vec![c; n],
        Init::Normal { std } => Rng::with_stream(seed, id.0 as u64 + 1).normal_vec(n, std),
        Init::Identity => {
            let k = *e.shape.last().unwrap_or(&1);
            (0..n).map(|i| if (i / k) % k == i % k { 1.0 } else { 0.0 }).collect()
        }
    };
    Tensor::new(e.shape.clone(), data).expect("shape")
}

/// Parameters placed on a tape for one forward pass.
///
/// With `track` every parameter becomes a cached leaf whose gradient can be
/// read back after `backward`. Without it parameters are uncached constants,
/// so a lazy store drops each one as soon as the op using it is done.
pub struct Binding<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    track: bool,
    leaves: RefCell<HashMap<ParamId, Var<'t>>>,
}

impl<'t, 's> Binding<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore, track: bool) -> Self {
        Self {
            tape,
            store,
            track: track && tape.is_recording(),
            leaves: RefCell::new(HashMap::new()),
        }
    }

    /// Binding whose parameters resolve to the given vars; used to feed
    /// parameter values through a gradient check.
    pub fn with_overrides(
        tape: &'t Tape,
        store: &'s ParamStore,
        vars: impl IntoIterator<Item = (ParamId, Var<'t>)>,
    ) -> Self {
        Self {
            tape,
            store,
            track: true,
            leaves: RefCell::new(vars.into_iter().collect()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        if !self.track {
            return self.tape.constant_rc(self.store.value(id));
        }
        self.leaves
            .borrow_mut()
            .entry(id)
            .or_insert_with(|| self.tape.leaf_rc(self.store.value(id)))
            .clone()
    }

    /// Gradient per parameter (zeros for parameters that were not reached).
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        let leaves = self.leaves.borrow();
        self.store
            .ids()
            .map(|id| {
                leaves
                    .get(&id)
                    .and_then(|v| grads.wrt(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(self.store.shape(id)))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store(mode: StoreMode) -> ParamStore {
        let mut s = ParamStore::new(9, mode);
        s.scoped("layer0", |s| {
            s.add("w", &[3, 4], Init::Normal { std: 0.5 });
            s.add("a", &[2, 2], Init::Identity);
        });
        s.add("b", &[4], Init::Const(0.25));
        s
    }

    #[test]
    fn lazy_and_eager_agree() {
        let e = sample_store(StoreMode::Eager);
        let l = sample_store(StoreMode::Lazy);
        assert_eq!(e.content_hash(), l.content_hash());
        assert_eq!(e.name(ParamId(0)), "layer0/w");
        assert_eq!(e.value(ParamId(1)).data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(e.num_scalars(), 12 + 4 + 4);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut a = sample_store(StoreMode::Eager);
        a.set(ParamId(2), Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        a.save(&path).unwrap();
        let mut b = sample_store(StoreMode::Eager);
        b.load(&path).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(b.load(&path).unwrap_err().to_string().contains("hash"));
    }

    #[test]
    fn lazy_store_is_read_only() {
        let mut l = sample_store(StoreMode::Lazy);
        assert!(l.set(ParamId(2), Tensor::zeros(&[4])).is_err());
    }
}
