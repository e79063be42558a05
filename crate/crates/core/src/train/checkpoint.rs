//! Checkpoint container.
//!
//! Layout (little-endian): `SDCK`, u32 version, u64 header length, JSON
//! header (configs, step, RNG state, optimizer steps, code usage), u32 array
//! count, then per array sorted by name: u32 name length, name, u8 dtype
//! (0 = f32, 1 = f64), u32 rank, u64 dims, raw data.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Trainer;
use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SDCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::format(0, "malformed rng state");
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    dtype: String,
    step: u64,
    rng: RngState,
    opt_g_step: u64,
    opt_d_step: u64,
    last_used: BTreeMap<String, Vec<u64>>,
}

fn dtype_code(d: DType) -> Result<u8> {
    match d {
        DType::F32 => Ok(0),
        DType::F64 => Ok(1),
        other => Err(Error::Contract(format!("cannot store {other:?} arrays"))),
    }
}

fn dtype_name(d: DType) -> &'static str {
    if d == DType::F64 {
        "f64"
    } else {
        "f32"
    }
}

fn collect_arrays(tr: &Trainer) -> BTreeMap<String, Tensor> {
    let mut arrays = BTreeMap::new();
    for (n, v) in tr.model.params().iter() {
        arrays.insert(format!("gen/{n}"), v.as_tensor().clone());
    }
    for (n, v) in tr.disc.params().iter() {
        arrays.insert(format!("disc/{n}"), v.as_tensor().clone());
    }
    for (prefix, opt) in [("opt_g", &tr.opt_g), ("opt_d", &tr.opt_d)] {
        for (n, t) in &opt.first {
            arrays.insert(format!("{prefix}.m/{n}"), t.clone());
        }
        for (n, t) in &opt.second {
            arrays.insert(format!("{prefix}.v/{n}"), t.clone());
        }
    }
    arrays
}

pub fn encode_checkpoint(tr: &Trainer) -> Result<Vec<u8>> {
    let header = Header {
        config: tr.cfg.clone(),
        dtype: dtype_name(tr.model.dtype()).to_string(),
        step: tr.step,
        rng: RngState::capture(&tr.rng),
        opt_g_step: tr.opt_g.step,
        opt_d_step: tr.opt_d.step,
        last_used: tr.last_used.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Contract(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let arrays = collect_arrays(tr);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in &arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype_code(t.dtype())?);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match t.dtype() {
            DType::F64 => {
                for v in t.flatten_all()?.to_vec1::<f64>()? {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            _ => {
                for v in t.flatten_all()?.to_vec1::<f32>()? {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

pub fn save_checkpoint(tr: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(tr)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// A parsed checkpoint file.
pub struct CheckpointData {
    pub config: RunConfig,
    header: Header,
    arrays: BTreeMap<String, Tensor>,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<CheckpointData> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::config(
            "checkpoint.version",
            format!("version {version}, this build reads {VERSION}"),
        ));
    }
    let hlen = r.u64("header length")? as usize;
    let hpos = r.pos;
    let header: Header = serde_json::from_slice(r.take(hlen, "header")?)
        .map_err(|e| Error::format(hpos, format!("header: {e}")))?;
    let count = r.u32("array count")?;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let nlen = r.u32("name length")? as usize;
        let npos = r.pos;
        let name = std::str::from_utf8(r.take(nlen, "name")?)
            .map_err(|_| Error::format(npos, "array name is not UTF-8"))?
            .to_string();
        let dpos = r.pos;
        let dtype = match r.take(1, "dtype")?[0] {
            0 => DType::F32,
            1 => DType::F64,
            other => return Err(Error::format(dpos, format!("unknown dtype code {other}"))),
        };
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| Ok(r.u64("dims")? as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let t = match dtype {
            DType::F64 => {
                let raw = r.take(n * 8, &format!("data of `{name}`"))?;
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            _ => {
                let raw = r.take(n * 4, &format!("data of `{name}`"))?;
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
        };
        arrays.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos, "trailing bytes after the last array"));
    }
    Ok(CheckpointData {
        config: header.config.clone(),
        header,
        arrays,
    })
}

fn group(arrays: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    arrays
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
        .collect()
}

fn restore_moments(
    target: &mut BTreeMap<String, Tensor>,
    values: BTreeMap<String, Tensor>,
    field: &str,
) -> Result<()> {
    if values.len() != target.len() || values.keys().ne(target.keys()) {
        return Err(Error::config(field, "optimizer state does not match the parameters"));
    }
    for (k, v) in values {
        let cur = target.get_mut(&k).expect("same keys");
        if cur.dims() != v.dims() {
            return Err(Error::config(format!("{field}.{k}"), "shape mismatch"));
        }
        *cur = v.to_dtype(cur.dtype())?;
    }
    Ok(())
}

impl CheckpointData {
    pub fn step(&self) -> u64 {
        self.header.step
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        let dtype = if self.header.dtype == "f64" { DType::F64 } else { DType::F32 };
        let mut tr = Trainer::with_dtype(&self.config, dtype)?;
        tr.model.params().assign(&group(&self.arrays, "gen/"))?;
        tr.disc.params().assign(&group(&self.arrays, "disc/"))?;
        restore_moments(&mut tr.opt_g.first, group(&self.arrays, "opt_g.m/"), "opt_g")?;
        restore_moments(&mut tr.opt_g.second, group(&self.arrays, "opt_g.v/"), "opt_g")?;
        restore_moments(&mut tr.opt_d.first, group(&self.arrays, "opt_d.m/"), "opt_d")?;
        restore_moments(&mut tr.opt_d.second, group(&self.arrays, "opt_d.v/"), "opt_d")?;
        tr.opt_g.step = self.header.opt_g_step;
        tr.opt_d.step = self.header.opt_d_step;
        tr.step = self.header.step;
        tr.rng = self.header.rng.restore()?;
        if self.header.last_used.keys().ne(tr.last_used.keys()) {
            return Err(Error::config("checkpoint.last_used", "quantizer layers do not match"));
        }
        tr.last_used = self.header.last_used;
        Ok(tr)
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)?.into_trainer()
}

/// Loads a checkpoint whose configuration must equal `expected` (paths aside).
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: &RunConfig) -> Result<Trainer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let data = decode_checkpoint(&bytes)?;
    if let Some(field) = first_difference(expected, &data.config) {
        return Err(Error::config(field, "differs between the checkpoint and the requested config"));
    }
    data.into_trainer()
}

/// Dotted path of the first field where two configs differ, ignoring `paths`.
pub fn first_difference(a: &RunConfig, b: &RunConfig) -> Option<String> {
    let a = serde_json::to_value(a).expect("config serializes");
    let b = serde_json::to_value(b).expect("config serializes");
    diff_value(&a, &b, "")
}

fn diff_value(a: &serde_json::Value, b: &serde_json::Value, path: &str) -> Option<String> {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                if p == "paths" {
                    continue;
                }
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => {
                        if let Some(d) = diff_value(u, v, &p) {
                            return Some(d);
                        }
                    }
                    _ => return Some(p),
                }
            }
            None
        }
        _ if a == b => None,
        _ => Some(path.to_string()),
    }
}
