//! A network together with its parameters, and the checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "E2NETCKP"
//! version    u32       1
//! header     u32 length + UTF-8 JSON (model config and free-form metadata)
//! count      u32       number of tensors
//! per tensor:
//!   name     u32 length + UTF-8 module path
//!   kind     u8        0 trainable, 1 buffer
//!   shape    4 × u32   (N, C, H, W)
//!   data     f32 × N·C·H·W
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::e2net::{sigmoid, E2Net, E2NetConfig, StageTwoLogits};
use crate::engine::{Builder, Graph, Mode, ParamKind, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{R2UNet, R2UNetConfig};

pub const MAGIC: &[u8; 8] = b"E2NETCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    R2unet(R2UNetConfig),
    E2net(E2NetConfig),
}

impl ModelConfig {
    pub fn out_channels(&self) -> usize {
        match self {
            ModelConfig::R2unet(c) => c.out_channels,
            ModelConfig::E2net(c) => c.out_channels,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Network {
    R2unet(R2UNet),
    E2net(E2Net),
}

/// Logits of one forward pass: `s1` for single-branch networks, plus the
/// edge and fused heads when present.
pub type Logits = StageTwoLogits;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub net: Network,
    pub store: ParamStore,
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: BTreeMap<String, String>,
}

impl Model {
    /// Builds a freshly initialized model; weights depend only on `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = {
            let mut b = Builder::new(&mut store, &mut rng);
            match &config {
                ModelConfig::R2unet(c) => Network::R2unet(R2UNet::new(&mut b, c)?),
                ModelConfig::E2net(c) => Network::E2net(E2Net::new(&mut b, c)?),
            }
        };
        Ok(Model { config, net, store, meta: BTreeMap::new() })
    }

    pub fn forward(net: &Network, g: &mut Graph, image: Var) -> Result<Logits> {
        match net {
            Network::R2unet(n) => Ok(StageTwoLogits { s1: n.forward(g, image)?.logits, e: None, s2: None }),
            Network::E2net(n) => n.forward(g, image),
        }
    }

    /// Inference-mode probabilities of the final head, `(N, K, H, W)`.
    pub fn predict(&mut self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&mut self.store, Mode::Eval);
        let x = g.input(image.clone());
        let out = Self::forward(&self.net, &mut g, x)?;
        Ok(g.value(out.final_logits()).map(sigmoid))
    }

    pub fn num_trainable(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        // Write to a sibling file first so a failed save never leaves a
        // truncated checkpoint behind.
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let header = serde_json::to_vec(&Header { model: self.config.clone(), meta: self.meta.clone() })
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        write_bytes(w, &header).map_err(io)?;
        w.write_all(&(self.store.len() as u32).to_le_bytes()).map_err(io)?;
        for (_, e) in self.store.iter() {
            write_bytes(w, e.name.as_bytes()).map_err(io)?;
            w.write_all(&[match e.kind {
                ParamKind::Trainable => 0,
                ParamKind::Buffer => 1,
            }])
            .map_err(io)?;
            for d in e.value.shape() {
                w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
            }
            let data: Vec<u8> = e.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            w.write_all(&data).map_err(io)?;
        }
        Ok(())
    }

    /// Rebuilds the network from the stored config, then fills every
    /// tensor by name. Missing, extra or mis-shaped tensors are errors.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let header: Header =
            serde_json::from_slice(&read_bytes(r)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut model = Model::new(header.model, 0)?;
        model.meta = header.meta;
        let count = read_u32(r)? as usize;
        if count != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {count} tensors, model expects {}",
                model.store.len()
            )));
        }
        for _ in 0..count {
            let name =
                String::from_utf8(read_bytes(r)?).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let mut kind = [0u8; 1];
            read_exact(r, &mut kind)?;
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = read_u32(r)? as usize;
            }
            let id = model.store.lookup(&name).ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            if model.store.get(id).shape() != shape {
                return Err(Error::Checkpoint(format!("tensor {name} has shape {shape:?}")));
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; 4 * n];
            read_exact(r, &mut raw)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            *model.store.get_mut(id) = Tensor::from_vec(shape, data);
        }
        Ok(model)
    }
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> std::io::Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    if n > 1 << 30 {
        return Err(Error::Checkpoint("implausible field length".into()));
    }
    let mut b = vec![0u8; n];
    read_exact(r, &mut b)?;
    Ok(b)
}
