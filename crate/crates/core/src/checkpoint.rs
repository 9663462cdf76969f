//! The KGMC model checkpoint.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "KGMC"           4 bytes magic
//! version          u16 (= 1)
//! header length    u32, then that many bytes of UTF-8 JSON (configs, classes, counters)
//! blob count       u32
//! blobs            per blob: u32 name length + UTF-8 name, u32 rank, rank x u32 dims,
//!                  prod(dims) f32 values
//! ```
//!
//! Blobs hold every parameter under its store name, the Adam moments as
//! `adam.<group>.m.<name>` / `adam.<group>.v.<name>`, and the frozen anchors
//! as `anchors` when present.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msnet::{MsnetConfig, MsnetParams};
use crate::nn::{ParamStore, Scalar, Tensor};
use crate::rgcn::{RgcnConfig, RgcnParams};
use crate::trainer::{AdamState, ModelState, TrainConfig};

pub const KGMC_MAGIC: &[u8; 4] = b"KGMC";
pub const KGMC_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    train_config: TrainConfig,
    msnet: MsnetConfig,
    rgcn: RgcnConfig,
    class_names: Vec<String>,
    anchor_nodes: Vec<usize>,
    epoch: usize,
    adam_steps: [u64; 3],
}

const GROUPS: [&str; 3] = ["msnet", "classifier", "rgcn"];

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_blob<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    Ok(())
}

fn stores<T: Scalar>(s: &ModelState<T>) -> [(&ParamStore<T>, &AdamState<T>); 3] {
    [
        (&s.msnet.features, &s.opt_msnet),
        (&s.msnet.classifier, &s.opt_classifier),
        (&s.rgcn.store, &s.opt_rgcn),
    ]
}

/// Serializes the model, with parameters stored as f32.
pub fn checkpoint_bytes<T: Scalar>(state: &ModelState<T>) -> Result<Vec<u8>> {
    let header = Header {
        train_config: state.train_config.clone(),
        msnet: state.msnet.config.clone(),
        rgcn: state.rgcn.config,
        class_names: state.class_names.clone(),
        anchor_nodes: state.anchor_nodes.clone(),
        epoch: state.epoch,
        adam_steps: [state.opt_msnet.t, state.opt_classifier.t, state.opt_rgcn.t],
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(KGMC_MAGIC);
    out.extend_from_slice(&KGMC_VERSION.to_le_bytes());
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);

    let mut blobs: Vec<(String, &Tensor<T>)> = Vec::new();
    for (group, (store, opt)) in GROUPS.iter().zip(stores(state)) {
        for (i, p) in store.params().iter().enumerate() {
            blobs.push((p.name.clone(), &p.value));
            blobs.push((format!("adam.{group}.m.{}", p.name), &opt.m[i]));
            blobs.push((format!("adam.{group}.v.{}", p.name), &opt.v[i]));
        }
    }
    if let Some(a) = &state.anchors {
        blobs.push(("anchors".into(), a));
    }
    put_u32(&mut out, blobs.len())?;
    for (name, t) in blobs {
        put_blob(&mut out, &name, t)?;
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

/// Parses a checkpoint produced by [`checkpoint_bytes`].
pub fn checkpoint_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<ModelState<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != KGMC_MAGIC {
        return Err(Error::Checkpoint("bad magic, not a KGMC checkpoint".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != KGMC_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {KGMC_VERSION}"
        )));
    }
    let hlen = r.u32()?;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

    let mut blobs: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    let count = r.u32()?;
    for _ in 0..count {
        let nlen = r.u32()?;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| Error::Checkpoint("blob name is not UTF-8".into()))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("blob too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        blobs.insert(name, Tensor::from_vec(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    // Build the parameter layout, then overwrite every value from the blobs.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut msnet = MsnetParams::<T>::init(header.msnet.clone(), &mut rng)?;
    let mut rgcn = RgcnParams::<T>::init(header.rgcn, &mut rng);
    let mut take = |name: &str, like: &Tensor<T>| -> Result<Tensor<T>> {
        let t = blobs
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing blob `{name}`")))?;
        if t.shape() != like.shape() {
            return Err(Error::Checkpoint(format!(
                "blob `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                like.shape()
            )));
        }
        Ok(t)
    };
    let mut opts = Vec::with_capacity(3);
    for (gi, store) in [&mut msnet.features, &mut msnet.classifier, &mut rgcn.store]
        .into_iter()
        .enumerate()
    {
        let mut opt = AdamState::new(store);
        opt.t = header.adam_steps[gi];
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            p.value = take(&p.name, &p.value)?;
            opt.m[i] = take(&format!("adam.{}.m.{}", GROUPS[gi], p.name), &p.value)?;
            opt.v[i] = take(&format!("adam.{}.v.{}", GROUPS[gi], p.name), &p.value)?;
        }
        opts.push(opt);
    }
    let anchors = blobs.remove("anchors");
    if let Some(a) = &anchors {
        if a.shape() != [header.class_names.len(), header.msnet.d] {
            return Err(Error::Checkpoint(format!("anchors have shape {:?}", a.shape())));
        }
    }
    if let Some(extra) = blobs.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected blob `{extra}`")));
    }
    let opt_rgcn = opts.pop().expect("three groups");
    let opt_classifier = opts.pop().expect("three groups");
    let opt_msnet = opts.pop().expect("three groups");
    Ok(ModelState {
        train_config: header.train_config,
        class_names: header.class_names,
        anchor_nodes: header.anchor_nodes,
        msnet,
        rgcn,
        opt_msnet,
        opt_classifier,
        opt_rgcn,
        epoch: header.epoch,
        anchors,
    })
}

pub fn save_checkpoint<T: Scalar>(state: &ModelState<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(state)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelState<T>> {
    let path = path.as_ref();
    checkpoint_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
