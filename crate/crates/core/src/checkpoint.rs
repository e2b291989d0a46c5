//! Binary checkpoint format.
//!
//! ```text
//! "RGIN"  u32 version  u32 array_count
//! per array: u32 name_len, name (UTF-8), u32 rank, u64 extent × rank,
//!            f32 × product(extents)
//! u32 config_len, config snapshot (UTF-8 key = value lines)
//! ```
//! All integers and floats are little-endian. Array names are namespaced:
//! `param/`, `buffer/`, `adam.m/`, `adam.v/`, plus `priors` and `state`.

use std::collections::HashSet;
use std::path::Path;

use rgin_tensor::Tensor;

use crate::config::RunConfig;
use crate::error::{Result, RginError};
use crate::model::Model;
use crate::optim::Adam;
use crate::params::{init_params, Params};
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 4] = b"RGIN";
pub const VERSION: u32 = 1;

/// Training progress stored with the weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_precision: f64,
    pub best_val_loss: f64,
    /// Epochs since the validation loss last improved.
    pub bad_epochs: usize,
}

impl Default for TrainState {
    fn default() -> Self {
        TrainState {
            epoch: 0,
            best_epoch: 0,
            best_precision: -1.0,
            best_val_loss: f64::INFINITY,
            bad_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub adam: Adam,
    pub state: TrainState,
}

fn put_array(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend((e as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut arrays: Vec<(String, Tensor<f32>)> = Vec::new();
        let mut add = |prefix: &str, p: &Params<f32>| {
            for (k, v) in p.iter() {
                arrays.push((format!("{prefix}/{k}"), v.clone()));
            }
        };
        add("param", &self.model.params);
        add("buffer", &self.model.buffers);
        add("adam.m", &self.adam.m);
        add("adam.v", &self.adam.v);
        let priors: Vec<f32> = self
            .model
            .priors
            .iter()
            .flat_map(|&(w, h)| [w as f32, h as f32])
            .collect();
        arrays.push((
            "priors".into(),
            Tensor::new(vec![self.model.priors.len(), 2], priors).unwrap(),
        ));
        let s = &self.state;
        let state = vec![
            s.epoch as f32,
            s.best_epoch as f32,
            s.best_precision as f32,
            if s.best_val_loss.is_finite() {
                s.best_val_loss as f32
            } else {
                f32::MAX
            },
            s.bad_epochs as f32,
            self.adam.step as f32,
        ];
        arrays.push(("state".into(), Tensor::new(vec![6], state).unwrap()));

        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((arrays.len() as u32).to_le_bytes());
        for (name, t) in &arrays {
            put_array(&mut out, name, t);
        }
        let text = self.config.to_text();
        out.extend((text.len() as u32).to_le_bytes());
        out.extend(text.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("missing RGIN magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut arrays = Vec::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| bad("array name is not UTF-8"))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(bad(format!("duplicate array {name}")));
            }
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(bad(format!("array {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let e = usize::try_from(r.u64()?).map_err(|_| bad("extent overflows"))?;
                numel = numel
                    .checked_mul(e)
                    .ok_or_else(|| bad("array size overflows"))?;
                shape.push(e);
            }
            let raw = r.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| bad("array size overflows"))?,
            )?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| bad(format!("array {name}: {e}")))?;
            if !t.all_finite() {
                return Err(bad(format!("array {name} has non-finite values")));
            }
            arrays.push((name, t));
        }
        let text_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| bad("config snapshot is not UTF-8"))?;
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let config = RunConfig::parse(text)?;
        assemble(config, arrays)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so an interrupted save never clobbers the last good file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| RginError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| RginError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| RginError::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn bad(msg: impl Into<String>) -> RginError {
    RginError::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn assemble(config: RunConfig, arrays: Vec<(String, Tensor<f32>)>) -> Result<Checkpoint> {
    let vocab = Vocabulary::synthetic();
    let (expect_params, expect_buffers) = init_params(&config.model, vocab.size(), 0);
    let mut params = Params::new();
    let mut buffers = Params::new();
    let mut adam = Adam::default();
    let mut priors = None;
    let mut state = None;
    for (name, t) in arrays {
        let (ns, key) = name.split_once('/').unwrap_or((name.as_str(), ""));
        let expected = match ns {
            "param" | "adam.m" | "adam.v" => expect_params.get(key),
            "buffer" => expect_buffers.get(key),
            _ => None,
        };
        match ns {
            "param" | "buffer" | "adam.m" | "adam.v" => {
                let want = expected.ok_or_else(|| bad(format!("unexpected array {name}")))?;
                if want.shape() != t.shape() {
                    return Err(bad(format!(
                        "{name} has shape {:?}, expected {:?}",
                        t.shape(),
                        want.shape()
                    )));
                }
                let dest = match ns {
                    "param" => &mut params,
                    "buffer" => &mut buffers,
                    "adam.m" => &mut adam.m,
                    _ => &mut adam.v,
                };
                dest.insert(key, t);
            }
            "priors" if key.is_empty() => priors = Some(t),
            "state" if key.is_empty() => state = Some(t),
            _ => return Err(bad(format!("unexpected array {name}"))),
        }
    }
    for (label, got, want) in [
        ("parameter", &params, &expect_params),
        ("buffer", &buffers, &expect_buffers),
    ] {
        if let Some(missing) = want.names().find(|n| got.get(n).is_none()) {
            return Err(bad(format!("missing {label} {missing}")));
        }
    }
    if adam.m.names().ne(adam.v.names()) {
        return Err(bad("optimizer moments are incomplete"));
    }
    let priors = priors.ok_or_else(|| bad("missing priors"))?;
    if priors.shape() != [config.model.priors, 2]
        || !priors.data().iter().all(|v| v.is_finite() && *v > 0.0)
    {
        return Err(bad(format!(
            "priors array {:?} invalid for {} priors",
            priors.shape(),
            config.model.priors
        )));
    }
    let priors: Vec<(f64, f64)> = priors
        .data()
        .chunks(2)
        .map(|c| (c[0] as f64, c[1] as f64))
        .collect();
    let state = state.ok_or_else(|| bad("missing training state"))?;
    if state.shape() != [6] || !state.data().iter().all(|v| v.is_finite()) {
        return Err(bad("invalid training state"));
    }
    let s = state.data();
    let count = |v: f32| -> Result<usize> {
        if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
            Ok(v as usize)
        } else {
            Err(bad(format!("invalid counter {v}")))
        }
    };
    adam.step = count(s[5])? as u64;
    let state = TrainState {
        epoch: count(s[0])?,
        best_epoch: count(s[1])?,
        best_precision: s[2] as f64,
        best_val_loss: if s[3] == f32::MAX {
            f64::INFINITY
        } else {
            s[3] as f64
        },
        bad_epochs: count(s[4])?,
    };
    let model = Model {
        cfg: config.model.clone(),
        vocab,
        priors,
        params,
        buffers,
    };
    Ok(Checkpoint {
        config,
        model,
        adam,
        state,
    })
}
