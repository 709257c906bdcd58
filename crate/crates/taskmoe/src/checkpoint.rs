//! Checkpoint files: a JSON header followed by named f64 tensors.
//!
//! Layout, all integers little-endian u64:
//!
//! ```text
//! magic "TMOE1\n"
//! header_len, header JSON (utf-8)
//! tensor_count
//! repeated: name_len, name, ndim, dims..., data (f64 LE)
//! ```
//!
//! Values round-trip bit for bit. The header carries arbitrary JSON
//! (model config, RNG state, parameter metadata).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rngutil::RngState;
use crate::tensor::Tensor;

type S = crate::F;
type Tensor64 = Tensor<S>;

const MAGIC: &[u8; 6] = b"TMOE1\n";

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub header: Value,
    pub tensors: Vec<(String, Tensor64)>,
}

/// Per-parameter metadata stored in the header so a [`ParamStore`] can be
/// reassembled exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub group: usize,
    pub frozen: bool,
}

impl Checkpoint {
    pub fn new(header: Value) -> Checkpoint {
        Checkpoint {
            header,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor64) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor64> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Store every parameter under `prefix`, and record its metadata in the
    /// header at `header["params"][prefix]`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<S>) {
        let mut metas = Vec::with_capacity(store.len());
        for id in store.ids() {
            let name = store.name(id).to_string();
            metas.push(ParamMeta {
                name: name.clone(),
                group: store.group(id),
                frozen: store.is_frozen(id),
            });
            self.push(format!("{prefix}.{name}"), store.get(id).clone());
        }
        let params = self
            .header
            .as_object_mut()
            .expect("checkpoint header must be a JSON object")
            .entry("params")
            .or_insert_with(|| Value::Object(Default::default()));
        params
            .as_object_mut()
            .unwrap()
            .insert(prefix.to_string(), serde_json::to_value(&metas).unwrap());
    }

    /// Rebuild a store saved with [`push_store`]. Tensor order, groups and
    /// frozen flags are restored from the header metadata.
    pub fn load_store(&self, prefix: &str) -> Result<ParamStore<S>> {
        let metas: Vec<ParamMeta> = self
            .header
            .get("params")
            .and_then(|p| p.get(prefix))
            .cloned()
            .map(serde_json::from_value)
            .transpose()?
            .ok_or_else(|| Error::data(format!("checkpoint has no '{prefix}' parameters")))?;
        let mut store = ParamStore::new();
        for meta in metas {
            let key = format!("{prefix}.{}", meta.name);
            let t = self
                .get(&key)
                .ok_or_else(|| Error::data(format!("checkpoint missing tensor '{key}'")))?
                .clone();
            let id = store.add(meta.name, t, meta.group);
            store.set_frozen(id, meta.frozen);
        }
        Ok(store)
    }

    pub fn set_rng(&mut self, state: &RngState) {
        self.header
            .as_object_mut()
            .expect("checkpoint header must be a JSON object")
            .insert("rng".into(), serde_json::to_value(state).unwrap());
    }

    pub fn rng(&self) -> Result<Option<RngState>> {
        match self.header.get("rng") {
            None | Some(Value::Null) => Ok(None),
            Some(v) => Ok(Some(serde_json::from_value(v.clone())?)),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u64).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::data("not a checkpoint file (bad magic)"));
        }
        let header_len = read_u64(&mut r)? as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: Value = serde_json::from_slice(&header_bytes)?;
        let count = read_u64(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u64(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::data("tensor name is not utf-8"))?;
            let ndim = read_u64(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { header, tensors })
    }
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{GROUP_BASE, GROUP_ROUTER};
    use crate::rngutil::seeded_rng;
    use rand::RngCore;
    use serde_json::json;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut rng = seeded_rng(42);
        let mut store: ParamStore<f64> = ParamStore::new();
        let a = store.add("w", Tensor::randn(&[3, 5], 1.0, &mut rng), GROUP_BASE);
        let b = store.add("r", Tensor::randn(&[7], 0.5, &mut rng), GROUP_ROUTER);
        store.set_frozen(b, true);

        let mut ck = Checkpoint::new(json!({"kind": "test", "step": 17}));
        ck.push_store("model", &store);
        ck.set_rng(&RngState::capture(&rng));
        ck.save(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.header["kind"], "test");
        assert_eq!(loaded.header["step"], 17);
        let restored = loaded.load_store("model").unwrap();
        assert_eq!(restored.len(), 2);
        for (orig, new) in [(a, "w"), (b, "r")] {
            let nid = restored.id_by_name(new).unwrap();
            let x = store.get(orig);
            let y = restored.get(nid);
            assert_eq!(x.shape(), y.shape());
            for (p, q) in x.data().iter().zip(y.data()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
        let bid = restored.id_by_name("r").unwrap();
        assert!(restored.is_frozen(bid));
        assert_eq!(restored.group(bid), GROUP_ROUTER);

        let mut resumed = loaded.rng().unwrap().unwrap().restore();
        assert_eq!(resumed.next_u64(), rng.clone().next_u64());
    }

    #[test]
    fn special_float_values_survive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let vals = vec![
            0.0f64,
            -0.0,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::MIN_POSITIVE,
            1e-300,
            std::f64::consts::PI,
        ];
        let mut ck = Checkpoint::new(json!({}));
        ck.push("x", Tensor::new(vec![vals.len()], vals.clone()).unwrap());
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let x = loaded.get("x").unwrap();
        for (p, q) in vals.iter().zip(x.data()) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTACHECKPOINT").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn missing_store_prefix_is_an_error() {
        let ck = Checkpoint::new(json!({}));
        assert!(ck.load_store("model").is_err());
    }
}
