//! Versioned JSON tensor dump.
//!
//! Each tensor carries its name, shape, and a base64 payload of float64
//! little-endian values. The `checksum` field is a SHA-256 over the metadata
//! and every tensor, and is verified on load.
//!
//! ```json
//! {"format":"logoprompt.tensors","version":1,"kind":"surrogate",
//!  "meta":{...},"tensors":[{"name":"image.w1","shape":[96,96],"data":"..."}],
//!  "checksum":"<hex>"}
//! ```

use crate::error::{Error, Result};
use crate::tensor::{hex_digest, update_digest, Tensor};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const FORMAT: &str = "logoprompt.tensors";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorDump {
    pub kind: String,
    pub meta: Map<String, Value>,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDump {
    format: String,
    version: u32,
    kind: String,
    meta: Map<String, Value>,
    tensors: Vec<RawTensor>,
    checksum: String,
}

impl TensorDump {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            meta: Map::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: &Tensor) {
        let t = Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec()).expect("valid tensor");
        self.tensors.push((name.into(), t));
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<Value>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Format(format!("missing integer meta field `{key}`")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::Format(format!("missing numeric meta field `{key}`")))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Format(format!("missing string meta field `{key}`")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{name}`")))?;
        Ok(self.tensors.remove(pos).1)
    }

    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.kind.as_bytes());
        hasher.update([0]);
        hasher.update(serde_json::to_string(&self.meta).expect("json meta").as_bytes());
        for (name, t) in &self.tensors {
            hasher.update(name.as_bytes());
            hasher.update([0]);
            update_digest(&mut hasher, t);
        }
        hex_digest(hasher)
    }

    pub fn to_json(&self) -> String {
        let raw = RawDump {
            format: FORMAT.into(),
            version: VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| RawTensor {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    data: B64.encode(t.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()),
                })
                .collect(),
            checksum: self.checksum(),
        };
        serde_json::to_string(&raw).expect("serializable dump")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawDump = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if raw.format != FORMAT {
            return Err(Error::Format(format!("unexpected format `{}`", raw.format)));
        }
        if raw.version != VERSION {
            return Err(Error::Format(format!("unsupported version {}", raw.version)));
        }
        let mut tensors = Vec::with_capacity(raw.tensors.len());
        for rt in raw.tensors {
            let bytes = B64
                .decode(rt.data.as_bytes())
                .map_err(|e| Error::Format(format!("tensor `{}`: {e}", rt.name)))?;
            if bytes.len() % 8 != 0 {
                return Err(Error::Format(format!("tensor `{}` payload is not float64", rt.name)));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(rt.shape, data).map_err(|e| Error::Format(format!("tensor `{}`: {e}", rt.name)))?;
            tensors.push((rt.name, t));
        }
        let dump = TensorDump {
            kind: raw.kind,
            meta: raw.meta,
            tensors,
        };
        let actual = dump.checksum();
        if actual != raw.checksum {
            return Err(Error::Format(format!(
                "checksum mismatch: file says {}, content hashes to {actual}",
                raw.checksum
            )));
        }
        Ok(dump)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TensorDump {
        let mut d = TensorDump::new("test");
        d.set_meta("m", 4u64);
        d.push("a", &Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap());
        d.push("b", &Tensor::scalar(0.07));
        d
    }

    #[test]
    fn rejects_tampering() {
        let json = sample().to_json();
        let tampered = json.replace("\"m\":4", "\"m\":5");
        assert!(matches!(TensorDump::from_json(&tampered), Err(Error::Format(_))));
        let wrong_version = json.replace("\"version\":1", "\"version\":2");
        assert!(TensorDump::from_json(&wrong_version).is_err());
    }

    #[test]
    fn meta_accessors() {
        let d = sample();
        assert_eq!(d.meta_u64("m").unwrap(), 4);
        assert!(d.meta_str("m").is_err());
        assert!(d.get("zzz").is_err());
    }

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let mut d = TensorDump::new("p");
            d.push("x", &Tensor::vector(values.clone()));
            let back = TensorDump::from_json(&d.to_json()).unwrap();
            let got: Vec<u64> = back.get("x").unwrap().data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
            prop_assert_eq!(back.checksum(), d.checksum());
        }
    }
}
