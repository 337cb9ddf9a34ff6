//! Binary model checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic     8 bytes  "FEASFLOW"
//! version   u32
//! kind      u8       1 = flow, 2 = one-class SVM
//! length    u64      payload byte count
//! payload   length bytes
//! digest    32 bytes SHA-256 of everything above
//! ```
//!
//! Flow payload:
//!
//! ```text
//! dim u64, layers u64
//! per layer: scale_clamp f64, mask [u8; dim], s_net, t_net
//! base tag u8 (0 = gaussian, 1 = resampling)
//! resampling only: truncation u64, z_ema f64, ema_decay f64, accept_net
//! net: dense count u64, then per dense layer
//!      in u64, out u64, activation u8, weights [f64; out*in], bias [f64; out]
//! ```
//!
//! One-class SVM payload:
//!
//! ```text
//! dim u64, count u64, gamma f64, nu f64, rho f64,
//! alphas [f64; count], support [f64; count*dim]
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::base::{BaseDistribution, ResamplingBase};
use crate::coupling::CouplingLayer;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::nn::{Activation, Dense, DenseNet};
use crate::ocsvm::OcSvmModel;

pub const MAGIC: &[u8; 8] = b"FEASFLOW";
pub const VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 1 + 8;
const DIGEST: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Flow = 1,
    OcSvm = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Flow(FlowModel),
    OcSvm(OcSvmModel),
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.f64(*x));
    }
    fn net(&mut self, net: &DenseNet) {
        self.usize(net.layers().len());
        for d in net.layers() {
            self.usize(d.in_dim());
            self.usize(d.out_dim());
            self.u8(d.activation().tag());
            self.f64s(d.weights());
            self.f64s(d.bias());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("payload truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    /// A count that must fit in the remaining payload at `unit` bytes each.
    fn count(&mut self, unit: usize) -> Result<usize> {
        let v = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if v.saturating_mul(unit.max(1) as u64) > remaining {
            return Err(Error::Checkpoint(format!("count {v} exceeds payload")));
        }
        Ok(v as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn net(&mut self) -> Result<DenseNet> {
        let n = self.count(17)?;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let i = self.count(0)?;
            let o = self.count(0)?;
            let tag = self.u8()?;
            let act = Activation::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown activation tag {tag}")))?;
            let w = self.f64s(i.checked_mul(o).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let b = self.f64s(o)?;
            layers.push(Dense::new(i, o, act, w, b).map_err(invalid)?);
        }
        DenseNet::new(layers).map_err(invalid)
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing payload bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn invalid(e: Error) -> Error {
    Error::Checkpoint(format!("invalid model: {e}"))
}

fn wrap(kind: CheckpointKind, payload: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + payload.len() + DIGEST);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind as u8);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn unwrap(bytes: &[u8]) -> Result<(CheckpointKind, &[u8])> {
    if bytes.len() < HEADER + DIGEST {
        return Err(Error::Checkpoint("file truncated".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}, expected {VERSION}")));
    }
    let length = u64::from_le_bytes(bytes[13..21].try_into().expect("8 bytes"));
    if length != (bytes.len() - HEADER - DIGEST) as u64 {
        return Err(Error::Checkpoint("file truncated or padded".into()));
    }
    let body = &bytes[..bytes.len() - DIGEST];
    if Sha256::digest(body).as_slice() != &bytes[bytes.len() - DIGEST..] {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let kind = match bytes[12] {
        1 => CheckpointKind::Flow,
        2 => CheckpointKind::OcSvm,
        k => return Err(Error::Checkpoint(format!("unknown model kind {k}"))),
    };
    Ok((kind, &body[HEADER..]))
}

pub fn encode_flow(model: &FlowModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.usize(model.dim());
    w.usize(model.layers().len());
    for layer in model.layers() {
        w.f64(layer.scale_clamp());
        layer.mask().iter().for_each(|&m| w.u8(m as u8));
        w.net(layer.s_net());
        w.net(layer.t_net());
    }
    match model.base() {
        BaseDistribution::Gaussian(_) => w.u8(0),
        BaseDistribution::Resampling(r) => {
            w.u8(1);
            w.usize(r.truncation());
            w.f64(r.z_ema());
            w.f64(r.ema_decay());
            w.net(r.accept_net());
        }
    }
    wrap(CheckpointKind::Flow, w.0)
}

fn decode_flow_payload(payload: &[u8]) -> Result<FlowModel> {
    let mut r = Reader { buf: payload, pos: 0 };
    let dim = r.count(0)?;
    let n_layers = r.count(dim + 8)?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let clamp = r.f64()?;
        let mask = r
            .take(dim)?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::Checkpoint(format!("invalid mask byte {b}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let s = r.net()?;
        let t = r.net()?;
        layers.push(CouplingLayer::new(mask, s, t, clamp).map_err(invalid)?);
    }
    let base = match r.u8()? {
        0 => BaseDistribution::gaussian(dim),
        1 => {
            let truncation = r.count(0)?;
            let z = r.f64()?;
            let decay = r.f64()?;
            let net = r.net()?;
            BaseDistribution::Resampling(ResamplingBase::from_parts(dim, net, truncation, z, decay).map_err(invalid)?)
        }
        t => return Err(Error::Checkpoint(format!("unknown base tag {t}"))),
    };
    r.finish()?;
    FlowModel::from_parts(dim, layers, base).map_err(invalid)
}

pub fn encode_ocsvm(model: &OcSvmModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.usize(model.dim());
    w.usize(model.num_support());
    w.f64(model.gamma());
    w.f64(model.nu());
    w.f64(model.rho());
    w.f64s(model.alphas());
    w.f64s(model.support());
    wrap(CheckpointKind::OcSvm, w.0)
}

fn decode_ocsvm_payload(payload: &[u8]) -> Result<OcSvmModel> {
    let mut r = Reader { buf: payload, pos: 0 };
    let dim = r.count(0)?;
    let n = r.count(8)?;
    let gamma = r.f64()?;
    let nu = r.f64()?;
    let rho = r.f64()?;
    let alphas = r.f64s(n)?;
    let support = r.f64s(n.checked_mul(dim).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
    r.finish()?;
    OcSvmModel::from_parts(dim, support, alphas, rho, gamma, nu).map_err(invalid)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let (kind, payload) = unwrap(bytes)?;
    Ok(match kind {
        CheckpointKind::Flow => Checkpoint::Flow(decode_flow_payload(payload)?),
        CheckpointKind::OcSvm => Checkpoint::OcSvm(decode_ocsvm_payload(payload)?),
    })
}

pub fn decode_flow(bytes: &[u8]) -> Result<FlowModel> {
    match decode(bytes)? {
        Checkpoint::Flow(m) => Ok(m),
        Checkpoint::OcSvm(_) => Err(Error::Checkpoint("expected a flow checkpoint, found a one-class SVM".into())),
    }
}

pub fn decode_ocsvm(bytes: &[u8]) -> Result<OcSvmModel> {
    match decode(bytes)? {
        Checkpoint::OcSvm(m) => Ok(m),
        Checkpoint::Flow(_) => Err(Error::Checkpoint("expected a one-class SVM checkpoint, found a flow".into())),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(model: &FlowModel, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_flow(model))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<FlowModel> {
    decode_flow(&read(path.as_ref())?)
}

pub fn save_ocsvm(model: &OcSvmModel, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_ocsvm(model))
}

pub fn load_ocsvm(path: impl AsRef<Path>) -> Result<OcSvmModel> {
    decode_ocsvm(&read(path.as_ref())?)
}

/// Reads a checkpoint of either kind.
pub fn load_any(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&read(path.as_ref())?)
}
