//! Binary checkpoint format.
//!
//! Layout: the magic `CANETCKPT`, one version byte, the config as a u64-LE
//! length-prefixed UTF-8 `key = value` block, then tensors until end of file.
//! Each tensor is a length-prefixed UTF-8 name, a u64 rank, u64 extents and
//! f32 values, all little-endian and row-major. The tensor inventory is fixed
//! by the config: parameters, then running statistics, then momentum buffers.

use std::path::Path;

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::image::pgm::write_atomic;
use crate::model::Model;
use crate::tensor::{Sgd, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"CANETCKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

const STEP_KEY: &str = "checkpoint_step";
const THRESHOLD_KEY: &str = "checkpoint_threshold";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Optimizer updates applied so far.
    pub step: u64,
    /// Adaptively selected threshold from the evaluation that produced this checkpoint.
    pub threshold: Option<f64>,
    pub model: Model<f32>,
    pub optimizer: Sgd<f32>,
}

fn inventory(model: &Model<f32>) -> Vec<(String, Vec<usize>)> {
    let p = &model.params;
    let mut v: Vec<(String, Vec<usize>)> = p.params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
    for n in &p.norms {
        v.push((format!("{}.running_mean", n.name), vec![n.running_mean.len()]));
        v.push((format!("{}.running_var", n.name), vec![n.running_var.len()]));
    }
    v.extend(p.params.iter().map(|p| (format!("velocity/{}", p.name), p.value.shape().to_vec())));
    v
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f32]) {
    put_str(out, name);
    put_u64(out, shape.len() as u64);
    for &d in shape {
        put_u64(out, d as u64);
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn new(config: TrainConfig, model: Model<f32>, optimizer: Sgd<f32>, threshold: Option<f64>) -> Self {
        Self {
            config,
            step: optimizer.steps,
            threshold,
            model,
            optimizer,
        }
    }

    /// A freshly initialized model and zeroed optimizer for `config`.
    pub fn fresh(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::<f32>::build(&config.model)?;
        let shapes: Vec<&[usize]> = model.params.params.iter().map(|p| p.value.shape()).collect();
        let opt = Sgd::new(config.momentum, &shapes)?;
        Ok(Self::new(config, model, opt, None))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.push(CHECKPOINT_VERSION);
        let mut text = self.config.to_text();
        text.push_str(&format!("{STEP_KEY} = {}\n", self.step));
        text.push_str(&format!(
            "{THRESHOLD_KEY} = {}\n",
            self.threshold.map_or("none".into(), |t| t.to_string())
        ));
        put_str(&mut out, &text);
        let p = &self.model.params;
        for prm in &p.params {
            put_tensor(&mut out, &prm.name, prm.value.shape(), prm.value.data());
        }
        for n in &p.norms {
            put_tensor(&mut out, &format!("{}.running_mean", n.name), &[n.running_mean.len()], &n.running_mean);
            put_tensor(&mut out, &format!("{}.running_var", n.name), &[n.running_var.len()], &n.running_var);
        }
        for (prm, v) in p.params.iter().zip(&self.optimizer.velocities) {
            put_tensor(&mut out, &format!("velocity/{}", prm.name), v.shape(), v.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len(), "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.take(1, "version")?[0];
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unknown version {version}")));
        }
        let text = r.string("config")?;
        let mut step = None;
        let mut threshold = None;
        let mut cfg_text = String::new();
        for line in text.lines() {
            match line.split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
                Some((STEP_KEY, v)) => {
                    step = Some(v.parse::<u64>().map_err(|_| Error::Checkpoint(format!("bad {STEP_KEY} {v:?}")))?)
                }
                Some((THRESHOLD_KEY, "none")) => {}
                Some((THRESHOLD_KEY, v)) => {
                    threshold = Some(v.parse::<f64>().map_err(|_| Error::Checkpoint(format!("bad {THRESHOLD_KEY} {v:?}")))?)
                }
                _ => {
                    cfg_text.push_str(line);
                    cfg_text.push('\n');
                }
            }
        }
        let step = step.ok_or_else(|| Error::Checkpoint(format!("missing {STEP_KEY}")))?;
        let config = TrainConfig::parse(&cfg_text).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let mut ck = Self::fresh(config)?;
        ck.step = step;
        ck.optimizer.steps = step;
        ck.threshold = threshold;

        let expected = inventory(&ck.model);
        let mut tensors = Vec::with_capacity(expected.len());
        for (name, shape) in &expected {
            if r.remaining() == 0 {
                return Err(Error::Checkpoint(format!("missing tensor {name}")));
            }
            let got = r.string("tensor name")?;
            if &got != name {
                return Err(Error::Checkpoint(format!("expected tensor {name}, found {got}")));
            }
            let rank = r.u64(name)? as usize;
            if rank != shape.len() {
                return Err(Error::Checkpoint(format!("{name}: rank {rank}, expected {}", shape.len())));
            }
            let dims = (0..rank).map(|_| r.u64(name).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if &dims != shape {
                return Err(Error::Checkpoint(format!("{name}: shape {dims:?}, expected {shape:?}")));
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n * 4, name)?;
            let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push(values);
        }
        if r.remaining() != 0 {
            let name = r.string("trailing tensor").unwrap_or_else(|_| "<unreadable>".into());
            return Err(Error::Checkpoint(format!("unexpected extra tensor {name}")));
        }

        let mut it = tensors.into_iter();
        let p = &mut ck.model.params;
        for prm in &mut p.params {
            prm.value = Tensor::new(prm.value.shape(), it.next().expect("inventory"))?;
        }
        for n in &mut p.norms {
            n.running_mean = it.next().expect("inventory");
            n.running_var = it.next().expect("inventory");
        }
        for v in &mut ck.optimizer.velocities {
            *v = Tensor::new(v.shape(), it.next().expect("inventory"))?;
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u64(what)?;
        if n > self.remaining() as u64 {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let raw = self.take(n as usize, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}
