//! Single-file checkpoints: a JSON manifest followed by named `f64` arrays,
//! including optimizer moments so training can resume exactly.
//!
//! Layout (little endian): `b"CDCK"`, `u32` version, `u64` manifest length,
//! manifest bytes, `u64` tensor count, then per tensor: `u32` name length,
//! name, `u32` rank, `u64` dims, `f64` data.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use corrdet_tensor::{AdamW, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Stage;
use crate::detector::{Detector, ModelConfig};
use crate::error::{Error, Result};
use crate::types::{ClassId, ClassSplit};

const MAGIC: &[u8; 4] = b"CDCK";
const VERSION: u32 = 1;
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub stage: Stage,
    pub model: ModelConfig,
    pub num_dataset_classes: usize,
    pub split: ClassSplit,
    /// Support classes per episode used in training.
    pub episode_classes: usize,
    pub step: u64,
    pub config_sha256: String,
    pub k_shot: Option<usize>,
    pub support_seed: Option<u64>,
    /// Image ids of the K-shot support set, when fine-tuned.
    pub support_manifest: Option<BTreeMap<ClassId, Vec<u64>>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn detector(&self) -> Detector {
        Detector {
            config: self.manifest.model.clone(),
            params: self.params.clone(),
            num_dataset_classes: self.manifest.num_dataset_classes,
        }
    }

    pub fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.manifest.stage != stage {
            return Err(Error::StageMismatch {
                expected: stage.to_string(),
                found: self.manifest.stage.to_string(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let m = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        out.extend_from_slice(&(m.len() as u64).to_le_bytes());
        out.extend_from_slice(&m);
        let mut entries: Vec<(String, &Tensor)> = self.params.iter().map(|(k, v)| (k.to_string(), v)).collect();
        let mut adam_step = None;
        if let Some(opt) = &self.optimizer {
            let (step, first, second) = opt.state();
            adam_step = Some(step);
            entries.extend(first.iter().map(|(k, v)| (format!("{ADAM_M}{k}"), v)));
            entries.extend(second.iter().map(|(k, v)| (format!("{ADAM_V}{k}"), v)));
        }
        let step_t = adam_step.map(|s| Tensor::from_vec(&[1], vec![s as f64]));
        if let Some(t) = &step_t {
            entries.push(("adam.step".into(), t));
        }
        out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (name, t) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let fail = |d: &str| Error::Format {
            what: "checkpoint",
            detail: d.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| fail("truncated header"))?;
        if &magic != MAGIC {
            return Err(fail("bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let mlen = read_u64(&mut r)? as usize;
        let m = take(&mut r, mlen)?;
        let manifest: CheckpointManifest = serde_json::from_slice(m).map_err(|e| fail(&format!("manifest: {e}")))?;
        let count = read_u64(&mut r)?;
        let mut params = ParamStore::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        let mut adam_step = None;
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            let name = String::from_utf8(take(&mut r, nlen)?.to_vec()).map_err(|_| fail("tensor name"))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = take(&mut r, n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::from_vec(&shape, data);
            if name == "adam.step" {
                adam_step = Some(t.data()[0] as u64);
            } else if let Some(k) = name.strip_prefix(ADAM_M) {
                first.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(ADAM_V) {
                second.insert(k.to_string(), t);
            } else {
                params.insert(name, t);
            }
        }
        if !r.is_empty() {
            return Err(fail("trailing bytes"));
        }
        let optimizer = adam_step.map(|step| {
            let mut opt = AdamW::new(0.0);
            opt.restore(step, first, second);
            opt
        });
        Ok(Self {
            manifest,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Format {
            what: "checkpoint",
            detail: "truncated".into(),
        });
    }
    let (a, b) = r.split_at(n);
    *r = b;
    Ok(a)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r, 4)?.try_into().expect("4 bytes")))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(r, 8)?.try_into().expect("8 bytes")))
}
