//! Binary checkpoints: a small header, JSON metadata, then named f64 tensor
//! blocks. All integers and floats are little-endian.
//!
//! ```text
//! magic "RATCKPT1" | u32 version | str kind | u64 len + JSON metadata
//! u32 block count | per block: str name | u32 ndim | u64 dims.. | f64 data..
//! ```
//! `str` is a u32 byte length followed by UTF-8.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::FORMAT_VERSION;
use crate::nn::{Activation, Dense, GaussianPolicy, MlpParams};
use crate::ppo::ActorCritic;
use crate::rat::{RatMeta, RatPolicy};
use crate::suprat::{InverseDynamicsModel, InverseMeta};
use crate::upn::{UniversalPolicy, UpnMeta};

pub const MAGIC: &[u8; 8] = b"RATCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// Provenance written into every checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_id: String,
    pub format_version: u32,
}

impl Provenance {
    pub fn new(seed: u64, config_id: impl Into<String>) -> Self {
        Provenance {
            seed,
            config_id: config_id.into(),
            format_version: FORMAT_VERSION,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope<M> {
    provenance: Provenance,
    model: M,
}

/// A model that splits into JSON metadata plus tensor blocks.
pub trait Checkpoint: Sized {
    const KIND: &'static str;
    type Meta: Serialize + DeserializeOwned;

    fn meta(&self) -> &Self::Meta;
    fn blocks(&self) -> Vec<Block>;
    fn from_parts(meta: Self::Meta, blocks: &mut BlockReader) -> Result<Self>;
}

/// Hands out blocks by name in write order.
pub struct BlockReader {
    blocks: std::vec::IntoIter<Block>,
}

impl BlockReader {
    pub fn take(&mut self, name: &str) -> Result<Block> {
        match self.blocks.next() {
            Some(b) if b.name == name => Ok(b),
            Some(b) => Err(Error::Checkpoint(format!("expected block {name}, found {}", b.name))),
            None => Err(Error::Checkpoint(format!("missing block {name}"))),
        }
    }

    fn finish(mut self) -> Result<()> {
        match self.blocks.next() {
            None => Ok(()),
            Some(b) => Err(Error::Checkpoint(format!("unexpected trailing block {}", b.name))),
        }
    }

    pub fn take_vector(&mut self, name: &str) -> Result<Vec<f64>> {
        let b = self.take(name)?;
        if b.dims.len() != 1 {
            return Err(Error::Checkpoint(format!("block {name} should be a vector, has dims {:?}", b.dims)));
        }
        Ok(b.data)
    }

    pub fn take_mlp(&mut self, prefix: &str) -> Result<MlpParams> {
        let shape = self.take(&format!("{prefix}.shape"))?;
        let layers = shape.data.len().saturating_sub(1);
        if layers == 0 {
            return Err(Error::Checkpoint(format!("{prefix} has no layers")));
        }
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let w = self.take(&format!("{prefix}.{l}.weights"))?;
            let b = self.take(&format!("{prefix}.{l}.biases"))?;
            let (fan_in, fan_out) = match w.dims[..] {
                [i, o] => (i, o),
                _ => return Err(Error::Checkpoint(format!("{prefix}.{l}.weights is not a matrix"))),
            };
            out.push(Dense {
                fan_in,
                fan_out,
                weights: w.data,
                biases: b.data,
            });
        }
        let net = MlpParams {
            layers: out,
            activation: Activation::Tanh,
        };
        net.validate()
            .map_err(|e| Error::Checkpoint(format!("{prefix}: {e}")))?;
        Ok(net)
    }
}

fn mlp_blocks(prefix: &str, net: &MlpParams, out: &mut Vec<Block>) {
    let mut sizes: Vec<f64> = vec![net.input_dim() as f64];
    sizes.extend(net.layers.iter().map(|l| l.fan_out as f64));
    out.push(Block {
        name: format!("{prefix}.shape"),
        dims: vec![sizes.len()],
        data: sizes,
    });
    for (l, layer) in net.layers.iter().enumerate() {
        out.push(Block {
            name: format!("{prefix}.{l}.weights"),
            dims: vec![layer.fan_in, layer.fan_out],
            data: layer.weights.clone(),
        });
        out.push(Block {
            name: format!("{prefix}.{l}.biases"),
            dims: vec![layer.fan_out],
            data: layer.biases.clone(),
        });
    }
}

fn vector_block(name: &str, data: &[f64]) -> Block {
    Block {
        name: name.to_string(),
        dims: vec![data.len()],
        data: data.to_vec(),
    }
}

fn actor_critic_blocks(model: &ActorCritic) -> Vec<Block> {
    let mut out = Vec::new();
    mlp_blocks("actor", &model.actor.net, &mut out);
    out.push(vector_block("actor.log_std", &model.actor.log_std));
    mlp_blocks("critic", &model.critic, &mut out);
    out
}

fn read_actor_critic(r: &mut BlockReader) -> Result<ActorCritic> {
    let net = r.take_mlp("actor")?;
    let log_std = r.take_vector("actor.log_std")?;
    let critic = r.take_mlp("critic")?;
    let model = ActorCritic {
        actor: GaussianPolicy { net, log_std },
        critic,
    };
    model.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(model)
}

impl Checkpoint for UniversalPolicy {
    const KIND: &'static str = "upn";
    type Meta = UpnMeta;

    fn meta(&self) -> &UpnMeta {
        &self.meta
    }

    fn blocks(&self) -> Vec<Block> {
        actor_critic_blocks(&self.model)
    }

    fn from_parts(meta: UpnMeta, r: &mut BlockReader) -> Result<Self> {
        let p = UniversalPolicy {
            model: read_actor_critic(r)?,
            meta,
        };
        p.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(p)
    }
}

impl Checkpoint for RatPolicy {
    const KIND: &'static str = "rat";
    type Meta = RatMeta;

    fn meta(&self) -> &RatMeta {
        &self.meta
    }

    fn blocks(&self) -> Vec<Block> {
        actor_critic_blocks(&self.model)
    }

    fn from_parts(meta: RatMeta, r: &mut BlockReader) -> Result<Self> {
        let p = RatPolicy {
            model: read_actor_critic(r)?,
            meta,
        };
        p.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(p)
    }
}

impl Checkpoint for InverseDynamicsModel {
    const KIND: &'static str = "suprat";
    type Meta = InverseMeta;

    fn meta(&self) -> &InverseMeta {
        &self.meta
    }

    fn blocks(&self) -> Vec<Block> {
        let mut out = Vec::new();
        mlp_blocks("net", &self.net, &mut out);
        out.push(vector_block("input_mean", &self.input_mean));
        out.push(vector_block("input_std", &self.input_std));
        out
    }

    fn from_parts(meta: InverseMeta, r: &mut BlockReader) -> Result<Self> {
        let m = InverseDynamicsModel {
            net: r.take_mlp("net")?,
            input_mean: r.take_vector("input_mean")?,
            input_std: r.take_vector("input_std")?,
            meta,
        };
        m.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(m)
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode<M: Checkpoint>(model: &M, provenance: &Provenance) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_str(&mut buf, M::KIND);
    let meta = serde_json::to_vec(&Envelope {
        provenance: provenance.clone(),
        model: model.meta(),
    })?;
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    let blocks = model.blocks();
    buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in &blocks {
        put_str(&mut buf, &b.name);
        buf.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
        for &d in &b.dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &b.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Checkpoint(format!("{what} does not fit in memory")))
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

pub fn decode<M: Checkpoint>(bytes: &[u8]) -> Result<(M, Provenance)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = c.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let kind = c.str("kind")?;
    if kind != M::KIND {
        return Err(Error::Checkpoint(format!("expected a {} checkpoint, found {kind}", M::KIND)));
    }
    let meta_len = c.len("metadata length")?;
    let envelope: Envelope<M::Meta> = serde_json::from_slice(c.take(meta_len, "metadata")?)?;
    let count = c.u32("block count")?;
    let mut blocks = Vec::new();
    for _ in 0..count {
        let name = c.str("block name")?;
        let ndim = c.u32("block rank")? as usize;
        let mut dims = Vec::new();
        for _ in 0..ndim {
            dims.push(c.len("block dims")?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Checkpoint(format!("block {name} dims {dims:?} exceed the file size")))?;
        let raw = c.take(n * 8, "block data")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        blocks.push(Block { name, dims, data });
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let mut reader = BlockReader {
        blocks: blocks.into_iter(),
    };
    let model = M::from_parts(envelope.model, &mut reader)?;
    reader.finish()?;
    Ok((model, envelope.provenance))
}

pub fn save<M: Checkpoint>(model: &M, provenance: &Provenance, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model, provenance)?)?;
    Ok(())
}

pub fn load<M: Checkpoint>(path: &Path) -> Result<(M, Provenance)> {
    decode(&std::fs::read(path)?)
}

/// `<kind>_<env>_<seed>.ckpt`
pub fn file_name(kind: &str, env: &str, seed: u64) -> String {
    format!("{kind}_{env}_{seed}.ckpt")
}

/// Human-readable JSON beside a checkpoint: `<name>.ckpt.meta.json`.
pub fn write_sidecar<M: Checkpoint>(model: &M, provenance: &Provenance, ckpt_path: &Path, extra: serde_json::Value) -> Result<()> {
    let mut name = ckpt_path.as_os_str().to_owned();
    name.push(".meta.json");
    let doc = serde_json::json!({
        "kind": M::KIND,
        "provenance": provenance,
        "model": model.meta(),
        "summary": extra,
    });
    std::fs::write(name, serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}
