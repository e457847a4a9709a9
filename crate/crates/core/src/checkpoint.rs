//! Binary model checkpoints.
//!
//! Layout: magic `EVF1`, format version (u32 LE), config blob length (u32 LE)
//! and UTF-8 TOML blob, then one record per parameter until end of file:
//! name length (u32), name bytes, rank (u32), each dim (u32), values as
//! little-endian f64 in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{BaselineRegressor, CrossDatasetBranch, EifModel, FusionFlags, NetworkConfig, SingleDatasetBranch};
use crate::partition::PartitionSpec;

pub const MAGIC: &[u8; 4] = b"EVF1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Eif(EifModel),
    Baseline {
        network: NetworkConfig,
        model: BaselineRegressor,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ModelKind {
    Eif,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BranchMeta {
    dataset_id: String,
    partitions: Vec<PartitionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    kind: ModelKind,
    network: NetworkConfig,
    #[serde(default)]
    flags: Option<FusionFlags>,
    #[serde(default)]
    branches: Vec<BranchMeta>,
    #[serde(default)]
    cross_partitions: Option<Vec<PartitionSpec>>,
}

impl Checkpoint {
    fn meta(&self) -> Meta {
        match self {
            Checkpoint::Eif(m) => Meta {
                kind: ModelKind::Eif,
                network: m.config.clone(),
                flags: Some(m.flags),
                branches: m
                    .branches
                    .iter()
                    .map(|b| BranchMeta {
                        dataset_id: b.dataset_id.clone(),
                        partitions: b.partitions().to_vec(),
                    })
                    .collect(),
                cross_partitions: m.cross.as_ref().map(|c| c.partitions().to_vec()),
            },
            Checkpoint::Baseline { network, .. } => Meta {
                kind: ModelKind::Baseline,
                network: network.clone(),
                flags: None,
                branches: Vec::new(),
                cross_partitions: None,
            },
        }
    }

    fn stores(&self) -> Vec<&ParamStore> {
        match self {
            Checkpoint::Eif(m) => m.stores(),
            Checkpoint::Baseline { model, .. } => vec![&model.store],
        }
    }

    pub fn into_eif(self) -> Result<EifModel> {
        match self {
            Checkpoint::Eif(m) => Ok(m),
            Checkpoint::Baseline { .. } => Err(Error::Checkpoint("expected an EIF checkpoint, found a baseline".into())),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let blob = toml::to_string(&self.meta()).map_err(|e| Error::Checkpoint(format!("config blob: {e}")))?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&len_u32(blob.len())?.to_le_bytes())?;
        w.write_all(blob.as_bytes())?;
        for store in self.stores() {
            for p in store.iter() {
                w.write_all(&len_u32(p.name.len())?.to_le_bytes())?;
                w.write_all(p.name.as_bytes())?;
                let shape = p.tensor.shape();
                w.write_all(&len_u32(shape.len())?.to_le_bytes())?;
                for &d in shape {
                    w.write_all(&len_u32(d)?.to_le_bytes())?;
                }
                for v in p.tensor.values() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not an EVF1 checkpoint".into()));
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let blob_len = r.u32("config blob length")? as usize;
        let blob = std::str::from_utf8(r.take(blob_len, "config blob")?)
            .map_err(|_| Error::Checkpoint("config blob is not UTF-8".into()))?;
        let meta: Meta = toml::from_str(blob).map_err(|e| Error::Checkpoint(format!("config blob: {e}")))?;
        let mut ckpt = skeleton(&meta)?;
        let mut seen = 0usize;
        while !r.at_end() {
            let name_len = r.u32("parameter name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("parameter rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("parameter dim").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count * 8, &format!("values of {name}"))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let tensor = Tensor::new(shape, values)?;
            store_for(&mut ckpt, &name)?
                .assign(&name, tensor)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            seen += 1;
        }
        let expected: usize = ckpt.stores().iter().map(|s| s.len()).sum();
        if seen != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {seen} parameters, model needs {expected}"
            )));
        }
        Ok(ckpt)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} does not fit in u32")))
}

/// Model with the checkpoint's structure; values are overwritten on load.
fn skeleton(meta: &Meta) -> Result<Checkpoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bad = |e: Error| Error::Checkpoint(format!("config blob describes an invalid model: {e}"));
    match meta.kind {
        ModelKind::Baseline => Ok(Checkpoint::Baseline {
            network: meta.network.clone(),
            model: BaselineRegressor::new(&meta.network, &mut rng).map_err(bad)?,
        }),
        ModelKind::Eif => {
            let branches = meta
                .branches
                .iter()
                .enumerate()
                .map(|(n, b)| SingleDatasetBranch::new(n, &b.dataset_id, &meta.network, b.partitions.clone(), &mut rng))
                .collect::<Result<Vec<_>>>()
                .map_err(bad)?;
            let mut model = EifModel::new(meta.network.clone(), branches).map_err(bad)?;
            if let Some(p) = &meta.cross_partitions {
                model.cross = Some(
                    CrossDatasetBranch::new(&meta.network, model.branch_count(), p.clone(), &mut rng).map_err(bad)?,
                );
            }
            model.flags = meta.flags.unwrap_or_default();
            Ok(Checkpoint::Eif(model))
        }
    }
}

fn store_for<'a>(ckpt: &'a mut Checkpoint, name: &str) -> Result<&'a mut ParamStore> {
    let unknown = || Error::Checkpoint(format!("unknown parameter {name}"));
    match ckpt {
        Checkpoint::Baseline { model, .. } => Ok(&mut model.store),
        Checkpoint::Eif(m) => {
            let head = name.split('/').next().unwrap_or_default();
            if head == "cross" {
                return m.cross.as_mut().map(|c| &mut c.store).ok_or_else(unknown);
            }
            let n: usize = head
                .strip_prefix("branch")
                .and_then(|s| s.parse().ok())
                .ok_or_else(unknown)?;
            m.branches.get_mut(n).map(|b| &mut b.store).ok_or_else(unknown)
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated checkpoint while reading {what} at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
