//! Versioned checkpoint container: a text header followed by a little-endian
//! `f32` payload. See the README for the byte layout.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::{ConfigMap, ExperimentConfig};
use crate::error::{bail, Error, Result};
use crate::generator::ModelState;
use crate::pyramid::{Codebook, PatchEmbed};
use crate::scalar::Scalar;
use crate::training::AdamW;

pub const CHECKPOINT_MAGIC: &str = "SARLAB-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Raw container: ordered metadata plus named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<Tensor>,
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

impl Container {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut index = String::new();
        for t in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            let start = payload.len();
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            writeln!(
                index,
                "tensor {} {} {} {}",
                t.name,
                dims.join("x"),
                start,
                payload.len() - start
            )
            .expect("string write");
        }
        let mut head = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
        for (k, v) in &self.meta {
            writeln!(head, "meta {k} = {v}").expect("string write");
        }
        head.push_str(&index);
        let digest = Sha256::digest(&payload);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        writeln!(head, "payload {} sha256 {hex}", payload.len()).expect("string write");
        let mut out = head.into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| integrity("truncated header"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| integrity("header is not UTF-8"))
        };
        let first = next_line()?;
        let Some(version) = first.strip_prefix(CHECKPOINT_MAGIC).map(str::trim) else {
            bail!(Integrity, "not a checkpoint (bad magic)");
        };
        if version != CHECKPOINT_VERSION.to_string() {
            bail!(
                Integrity,
                "unsupported checkpoint version {version:?} (expected {CHECKPOINT_VERSION})"
            );
        }
        let mut meta = BTreeMap::new();
        let mut index = Vec::new();
        let (payload_len, digest) = loop {
            let line = next_line()?;
            if let Some(kv) = line.strip_prefix("meta ") {
                let (k, v) = kv
                    .split_once(" = ")
                    .ok_or_else(|| integrity(format!("bad meta line {line:?}")))?;
                meta.insert(k.to_string(), v.to_string());
            } else if let Some(t) = line.strip_prefix("tensor ") {
                let f: Vec<&str> = t.split(' ').collect();
                if f.len() != 4 {
                    bail!(Integrity, "bad tensor line {line:?}");
                }
                let shape = f[1]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| integrity(format!("bad shape in {line:?}")))?;
                let start: usize = f[2]
                    .parse()
                    .map_err(|_| integrity(format!("bad offset in {line:?}")))?;
                let len: usize = f[3]
                    .parse()
                    .map_err(|_| integrity(format!("bad length in {line:?}")))?;
                index.push((f[0].to_string(), shape, start, len));
            } else if let Some(p) = line.strip_prefix("payload ") {
                let f: Vec<&str> = p.split(' ').collect();
                if f.len() != 3 || f[1] != "sha256" {
                    bail!(Integrity, "bad payload line {line:?}");
                }
                let n: usize = f[0].parse().map_err(|_| integrity("bad payload length"))?;
                break (n, f[2].to_string());
            } else {
                bail!(Integrity, "unexpected header line {line:?}");
            }
        };
        let payload = &bytes[pos..];
        if payload.len() != payload_len {
            bail!(
                Integrity,
                "payload is {} bytes, header says {payload_len} (truncated or padded file)",
                payload.len()
            );
        }
        let actual: String = Sha256::digest(payload)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        if actual != digest {
            bail!(Integrity, "payload checksum mismatch");
        }
        let mut tensors = Vec::with_capacity(index.len());
        for (name, shape, start, len) in index {
            let count: usize = shape.iter().product();
            if len != count * 4 || start.checked_add(len).map_or(true, |e| e > payload.len()) {
                bail!(Integrity, "tensor {name} does not fit the payload");
            }
            let data = payload[start..start + len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        Ok(Self { meta, tensors })
    }
}

/// Everything needed to resume or sample from a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub config: ExperimentConfig,
    pub state: ModelState<S>,
    pub codebook: Option<Codebook<S>>,
    pub patch: PatchEmbed<S>,
    pub optimizer: AdamW<S>,
    /// Optimizer steps taken; with the config seed this is the full RNG state,
    /// since every stream is keyed by (seed, step, item).
    pub step: u64,
}

fn to_f32<S: Scalar>(v: &[S]) -> Vec<f32> {
    v.iter().map(|x| x.as_f64() as f32).collect()
}

fn from_f32<S: Scalar>(v: &[f32]) -> Vec<S> {
    v.iter().map(|&x| S::of(x as f64)).collect()
}

fn meta<'a>(c: &'a Container, key: &str) -> Result<&'a str> {
    c.meta
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| integrity(format!("missing metadata {key}")))
}

fn tensor<'a>(c: &'a Container, name: &str) -> Result<&'a Tensor> {
    c.tensor(name)
        .ok_or_else(|| integrity(format!("missing tensor {name}")))
}

impl<S: Scalar> Checkpoint<S> {
    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        for (k, v) in self.config.to_map().iter() {
            c.meta.insert(format!("config.{k}"), v.to_string());
        }
        c.meta.insert("step".into(), self.step.to_string());
        c.meta
            .insert("rng.seed".into(), self.config.seed.to_string());
        c.meta.insert("rng.step".into(), self.step.to_string());
        c.meta
            .insert("adam.t".into(), self.optimizer.steps().to_string());
        c.meta.insert("params".into(), self.state.len().to_string());
        for spec in self.state.layout().specs() {
            c.tensors.push(Tensor {
                name: format!("model.{}", spec.name),
                shape: spec.shape.clone(),
                data: to_f32(&self.state.values()[spec.range()]),
            });
        }
        if let Some(cb) = &self.codebook {
            c.tensors.push(Tensor {
                name: "codebook".into(),
                shape: vec![cb.size(), cb.dim()],
                data: to_f32(cb.entries()),
            });
        }
        let p = &self.patch;
        c.tensors.push(Tensor {
            name: "patch".into(),
            shape: vec![p.dim(), p.patch() * p.patch() * p.channels()],
            data: to_f32(p.weights()),
        });
        let (m, v) = self.optimizer.moments();
        c.tensors.push(Tensor {
            name: "adam.m".into(),
            shape: vec![m.len()],
            data: to_f32(m),
        });
        c.tensors.push(Tensor {
            name: "adam.v".into(),
            shape: vec![v.len()],
            data: to_f32(v),
        });
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let mut map = ConfigMap::default();
        for (k, v) in &c.meta {
            if let Some(key) = k.strip_prefix("config.") {
                map.set(key, v);
            }
        }
        let config = ExperimentConfig::from_map(&map)
            .map_err(|e| integrity(format!("embedded config: {e}")))?;
        let gcfg = config.generator_config();
        let mut values = Vec::new();
        let probe = crate::generator::ParamLayout::for_config(&gcfg);
        for spec in probe.specs() {
            let t = tensor(c, &format!("model.{}", spec.name))?;
            if t.shape != spec.shape {
                bail!(
                    Integrity,
                    "tensor model.{} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape,
                    spec.shape
                );
            }
            values.extend(from_f32::<S>(&t.data));
        }
        let state = ModelState::from_values(&gcfg, values)?;
        let codebook = match c.tensor("codebook") {
            Some(t) if t.shape.len() == 2 => {
                Some(Codebook::new(t.shape[0], t.shape[1], from_f32(&t.data))?)
            }
            Some(_) => bail!(Integrity, "codebook tensor must be 2-D"),
            None => None,
        };
        if codebook.is_some() != gcfg.is_discrete() {
            bail!(
                Integrity,
                "codebook presence does not match the configured vocab"
            );
        }
        let p = tensor(c, "patch")?;
        let patch = PatchEmbed::from_weights(
            config.patch_side(),
            config.dataset.channels,
            config.latent_dim,
            from_f32(&p.data),
        )?;
        let parse_u64 = |key: &str| -> Result<u64> {
            meta(c, key)?
                .parse()
                .map_err(|_| integrity(format!("bad {key}")))
        };
        let step = parse_u64("step")?;
        let t = parse_u64("adam.t")?;
        let m = from_f32(&tensor(c, "adam.m")?.data);
        let v = from_f32(&tensor(c, "adam.v")?.data);
        if m.len() != state.len() || v.len() != state.len() {
            bail!(Integrity, "optimizer moments do not match the model");
        }
        let optimizer = AdamW::from_parts(config.train.adamw(), m, v, t)?;
        Ok(Self {
            config,
            state,
            codebook,
            patch,
            optimizer,
            step,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }

    /// Writes through a temporary file and a rename so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
