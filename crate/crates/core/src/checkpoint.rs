//! JSON checkpoints of a whole network. Floats are written with shortest
//! round-trip formatting, so save → load is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{NetConfig, VqaNet};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "mrn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    tensor: Tensor,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: NetConfig,
    params: Vec<NamedTensor>,
}

pub fn to_json(net: &VqaNet) -> String {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: net.config,
        params: net
            .store
            .ids()
            .map(|id| NamedTensor {
                name: net.store.name(id).to_string(),
                tensor: net.store.get(id).clone(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&ck).expect("checkpoint serialises");
    s.push('\n');
    s
}

pub fn from_json(text: &str) -> Result<VqaNet> {
    #[derive(Deserialize)]
    struct Header {
        format: String,
        version: u32,
    }
    let parse = |e: serde_json::Error| {
        let offset = text
            .lines()
            .take(e.line().saturating_sub(1))
            .map(|l| l.len() + 1)
            .sum::<usize>()
            + e.column().saturating_sub(1);
        Error::Parse {
            offset,
            msg: e.to_string(),
        }
    };
    let h: Header = serde_json::from_str(text).map_err(parse)?;
    if h.format != CHECKPOINT_FORMAT {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("not a checkpoint (format {:?})", h.format),
        });
    }
    if h.version != CHECKPOINT_VERSION {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("unsupported checkpoint version {}", h.version),
        });
    }
    let ck: Checkpoint = serde_json::from_str(text).map_err(parse)?;
    let mut net = VqaNet::new(ck.config)?;
    if ck.params.len() != net.store.len() {
        return Err(Error::Contract(format!(
            "checkpoint has {} tensors, network has {}",
            ck.params.len(),
            net.store.len()
        )));
    }
    for nt in ck.params {
        let id = net
            .store
            .find(&nt.name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {}", nt.name)))?;
        if nt.tensor.shape() != net.store.get(id).shape() {
            return Err(Error::dim(
                "checkpoint tensor",
                nt.tensor.shape(),
                net.store.get(id).shape(),
            ));
        }
        if nt.tensor.len() != nt.tensor.shape().iter().product::<usize>() {
            return Err(Error::Contract(format!("tensor {} has a wrong element count", nt.name)));
        }
        net.store.set(id, nt.tensor);
    }
    Ok(net)
}

pub fn save(net: &VqaNet, path: &Path) -> Result<()> {
    fs::write(path, to_json(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<VqaNet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::small_net_config;
    use crate::model::Variant;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut net = VqaNet::initialized(small_net_config(Variant::E, 2), 0.3, 4).unwrap();
        let id = net.store.ids().next().unwrap();
        net.store.get_mut(id).data_mut()[0] = 0.1 + 0.2;
        net.store.get_mut(id).data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        let back = from_json(&to_json(&net)).unwrap();
        assert_eq!(back, net);
        for id in net.store.ids() {
            let a: Vec<u64> = net.store.get(id).data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = back.store.get(id).data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(to_json(&back), to_json(&net));
    }

    #[test]
    fn rejects_other_versions_and_garbage() {
        let net = VqaNet::initialized(small_net_config(Variant::B, 1), 0.3, 4).unwrap();
        let text = to_json(&net).replacen("\"version\": 1", "\"version\": 9", 1);
        assert!(matches!(from_json(&text), Err(Error::Parse { offset: 0, .. })));
        let good = to_json(&net);
        assert!(matches!(from_json(&good[..good.len() / 2]), Err(Error::Parse { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let net = VqaNet::initialized(small_net_config(Variant::Mn, 2), 0.3, 5).unwrap();
        save(&net, &path).unwrap();
        assert_eq!(load(&path).unwrap(), net);
        assert!(matches!(load(&dir.path().join("missing.json")), Err(Error::Io { .. })));
    }
}
