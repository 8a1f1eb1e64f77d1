//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "ADVOCKPT" | version u32 | dtype str | config (TOML) str | mode u8
//! dropout rng: seed [u8; 32], stream u64, word_pos u128
//! partitions u32, each: name str, frozen u8, adam t u64, tensors u32,
//!     each: name str, rank u32, dims u64 x rank, value, adam m, adam v
//! networks u32 (judge, encoders, decoders), each: layers u32,
//!     each: channels u32, mean, var
//! checksum u64 (FNV-1a over every preceding byte)
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Mode;
use crate::error::{Error, Result};
use crate::layers::PartitionName;
use crate::model::{AdvocacyModel, ModelConfig};
use crate::seed::fnv1a;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"ADVOCKPT";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn values<T: Scalar>(&mut self, vs: &[T]) {
        for &v in vs {
            v.write_le(&mut self.0);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn bad(message: impl Into<String>) -> Error {
    Error::Format { what: "checkpoint", message: message.into() }
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("string is not UTF-8"))
    }
    fn values<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = self.take(n.checked_mul(T::WIDTH).ok_or_else(|| bad("tensor too large"))?)?;
        Ok(bytes.chunks_exact(T::WIDTH).map(T::read_le).collect())
    }
}

pub fn encode<T: Scalar>(model: &AdvocacyModel<T>) -> Result<Vec<u8>> {
    let mut w = Writer(MAGIC.to_vec());
    w.u32(VERSION as usize);
    w.str(T::DTYPE);
    let config = toml::to_string(&model.config).map_err(|e| bad(format!("config echo: {e}")))?;
    w.str(&config);
    w.u8(u8::from(model.mode == Mode::Train));
    let rng = &model.dropout_rng;
    w.0.extend_from_slice(&rng.get_seed());
    w.u64(rng.get_stream());
    w.0.extend_from_slice(&rng.get_word_pos().to_le_bytes());

    w.u32(model.partitions.len());
    for (p, adam) in model.partitions.iter().zip(&model.adam) {
        w.str(&p.name.to_string());
        w.u8(u8::from(p.frozen));
        w.u64(adam.t);
        w.u32(p.tensors.len());
        for (k, (name, t)) in p.names.iter().zip(&p.tensors).enumerate() {
            w.str(name);
            w.u32(t.ndim());
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.values(t.data());
            w.values(adam.m[k].data());
            w.values(adam.v[k].data());
        }
    }

    let nets: Vec<_> = std::iter::once(&model.judge).chain(&model.encoders).chain(&model.decoders).collect();
    w.u32(nets.len());
    for net in nets {
        w.u32(net.running_stats().len());
        for s in net.running_stats() {
            w.u32(s.mean.len());
            w.values(&s.mean);
            w.values(&s.var);
        }
    }
    let sum = fnv1a(&w.0);
    w.u64(sum);
    Ok(w.0)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<AdvocacyModel<T>> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing ADVOCKPT magic"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if fnv1a(body) != stored {
        return Err(bad("checksum mismatch"));
    }
    let mut r = Reader { bytes: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
    }
    let dtype = r.str()?;
    if dtype != T::DTYPE {
        return Err(bad(format!("stored dtype {dtype}, requested {}", T::DTYPE)));
    }
    let config: ModelConfig = toml::from_str(&r.str()?).map_err(|e| bad(format!("config echo: {e}")))?;
    let mode = if r.u8()? == 1 { Mode::Train } else { Mode::Eval };
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    let mut dropout_rng = ChaCha8Rng::from_seed(seed);
    dropout_rng.set_stream(stream);
    dropout_rng.set_word_pos(word_pos);

    // Parameters are overwritten below; the init stream only fixes the architecture.
    let mut model = AdvocacyModel::<T>::new(config, &mut ChaCha8Rng::seed_from_u64(0), dropout_rng)?;
    model.mode = mode;

    let count = r.u32()?;
    if count != model.partitions.len() {
        return Err(bad(format!("{count} partitions, architecture has {}", model.partitions.len())));
    }
    for (p, adam) in model.partitions.iter_mut().zip(model.adam.iter_mut()) {
        let name: PartitionName = r.str()?.parse()?;
        if name != p.name {
            return Err(bad(format!("partition `{name}` where `{}` was expected", p.name)));
        }
        p.frozen = r.u8()? == 1;
        adam.t = r.u64()?;
        let tensors = r.u32()?;
        if tensors != p.tensors.len() {
            return Err(bad(format!("partition `{name}` has {tensors} tensors, expected {}", p.tensors.len())));
        }
        for k in 0..tensors {
            let tname = r.str()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if tname != p.names[k] || shape != p.tensors[k].shape() {
                return Err(bad(format!("tensor `{tname}` {shape:?} does not match `{}` {:?}", p.names[k], p.tensors[k].shape())));
            }
            let n = p.tensors[k].numel();
            p.tensors[k] = Tensor::new(shape.clone(), r.values(n)?)?;
            adam.m[k] = Tensor::new(shape.clone(), r.values(n)?)?;
            adam.v[k] = Tensor::new(shape, r.values(n)?)?;
        }
    }

    let nets = r.u32()?;
    let expected = 1 + model.encoders.len() + model.decoders.len();
    if nets != expected {
        return Err(bad(format!("{nets} networks of running statistics, expected {expected}")));
    }
    let AdvocacyModel { judge, encoders, decoders, .. } = &mut model;
    for net in std::iter::once(judge).chain(encoders.iter_mut()).chain(decoders.iter_mut()) {
        let layers = r.u32()?;
        if layers != net.running_stats().len() {
            return Err(bad(format!("{layers} batch-norm layers, expected {}", net.running_stats().len())));
        }
        for s in net.running_stats_mut() {
            let channels = r.u32()?;
            if channels != s.mean.len() {
                return Err(bad(format!("batch norm over {channels} channels, expected {}", s.mean.len())));
            }
            s.mean = r.values(channels)?;
            s.var = r.values(channels)?;
        }
    }
    if r.pos != body.len() {
        return Err(bad(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(model)
}

pub fn save<T: Scalar>(model: &AdvocacyModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<AdvocacyModel<T>> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
