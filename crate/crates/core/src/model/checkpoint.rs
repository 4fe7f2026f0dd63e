//! Binary checkpoints: magic, little-endian header length, JSON header, then
//! the raw `f64` data of every tensor.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::substrate::{Adam, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STLABCK1";

/// Trainer state that must survive a restart.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: u64,
    pub opt: Adam,
    /// Lowest total loss seen so far.
    pub best_metric: Option<f64>,
}

impl Default for TrainState {
    fn default() -> Self {
        Self {
            step: 0,
            opt: Adam::transformer(),
            best_metric: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct OptHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

impl OptHeader {
    fn of(a: &Adam) -> Self {
        Self {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            step: a.step,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    group: String,
    name: String,
    shape: Vec<usize>,
    /// In `f64` units from the start of the data section.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    best_metric: Option<f64>,
    opt: OptHeader,
    approx_opt: Option<OptHeader>,
    approx_lr: Option<f64>,
    tensors: Vec<Entry>,
}

struct Writer {
    entries: Vec<Entry>,
    data: Vec<f64>,
}

impl Writer {
    fn push(&mut self, group: &str, name: &str, shape: &[usize], values: &[f64]) {
        self.entries.push(Entry {
            group: group.into(),
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.data.len(),
        });
        self.data.extend_from_slice(values);
    }

    fn store(&mut self, group: &str, store: &ParamStore, opt: &Adam) {
        for (_, name, t) in store.iter() {
            self.push(group, name, t.shape(), t.data());
        }
        let (m, v) = opt.moments();
        for (k, (id, name, t)) in store.iter().enumerate() {
            debug_assert_eq!(id.0, k);
            if let (Some(m), Some(v)) = (m.get(k), v.get(k)) {
                self.push(&format!("{group}.m"), name, t.shape(), m);
                self.push(&format!("{group}.v"), name, t.shape(), v);
            }
        }
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, state: &TrainState) -> Result<()> {
    let mut w = Writer {
        entries: Vec::new(),
        data: Vec::new(),
    };
    w.store("param", &model.store, &state.opt);
    if let Some(a) = &model.approx {
        w.store("approx", &a.store, &a.opt);
    }
    let header = Header {
        config: model.cfg.clone(),
        step: state.step,
        best_metric: state.best_metric,
        opt: OptHeader::of(&state.opt),
        approx_opt: model.approx.as_ref().map(|a| OptHeader::of(&a.opt)),
        approx_lr: model.approx.as_ref().map(|a| a.lr),
        tensors: w.entries,
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let mut bytes = Vec::with_capacity(12 + json.len() + 8 * w.data.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&len.to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in &w.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn restore(
    group: &str,
    header: &Header,
    data: &[f64],
    store: &mut ParamStore,
    opt: &mut Adam,
    saved: &OptHeader,
) -> Result<()> {
    let bad = |msg: String| Error::Checkpoint(msg);
    let mut m = vec![Vec::new(); store.len()];
    let mut v = vec![Vec::new(); store.len()];
    let mut seen = vec![false; store.len()];
    let (gm, gv) = (format!("{group}.m"), format!("{group}.v"));
    for e in &header.tensors {
        let which = if e.group == group {
            0
        } else if e.group == gm {
            1
        } else if e.group == gv {
            2
        } else {
            continue;
        };
        let id = store
            .by_name(&e.name)
            .ok_or_else(|| bad(format!("unknown tensor {}/{}", e.group, e.name)))?;
        if store.get(id).shape() != e.shape.as_slice() {
            return Err(bad(format!(
                "{} has shape {:?}, expected {:?}",
                e.name,
                e.shape,
                store.get(id).shape()
            )));
        }
        let n: usize = e.shape.iter().product();
        let values = data
            .get(e.offset..e.offset + n)
            .ok_or_else(|| bad(format!("{} lies outside the data section", e.name)))?
            .to_vec();
        match which {
            0 => {
                store.set(id, Tensor::new(e.shape.clone(), values)?)?;
                seen[id.0] = true;
            }
            1 => m[id.0] = values,
            _ => v[id.0] = values,
        }
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        return Err(bad(format!("missing tensor {}", store.name(crate::substrate::ParamId(k)))));
    }
    *opt = Adam::new(saved.beta1, saved.beta2, saved.eps);
    let has_m = m.iter().any(|x| !x.is_empty());
    if has_m {
        for (k, x) in m.iter_mut().enumerate() {
            if x.is_empty() {
                *x = vec![0.0; store.get(crate::substrate::ParamId(k)).len()];
            }
        }
        for (k, x) in v.iter_mut().enumerate() {
            if x.is_empty() {
                *x = vec![0.0; store.get(crate::substrate::ParamId(k)).len()];
            }
        }
        opt.set_moments(saved.step, m, v)?;
    } else {
        opt.step = saved.step;
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, TrainState)> {
    let bytes = fs::read(path.as_ref())?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.as_ref().display()));
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let raw = &bytes[12 + len..];
    if raw.len() % 8 != 0 {
        return Err(bad("data section is not a whole number of values"));
    }
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut model = Model::new(header.config.clone())?;
    let mut state = TrainState {
        step: header.step,
        best_metric: header.best_metric,
        ..TrainState::default()
    };
    restore("param", &header, &data, &mut model.store, &mut state.opt, &header.opt)?;
    match (&mut model.approx, &header.approx_opt) {
        (Some(a), Some(saved)) => {
            let mut opt = Adam::transformer();
            restore("approx", &header, &data, &mut a.store, &mut opt, saved)?;
            a.opt = opt;
            if let Some(lr) = header.approx_lr {
                a.lr = lr;
            }
        }
        (None, None) => {}
        _ => return Err(bad("approximation network presence disagrees with the config")),
    }
    Ok((model, state))
}
