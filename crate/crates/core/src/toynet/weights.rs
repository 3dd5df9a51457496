//! Little-endian weight container.
//!
//! Layout: `b"ANKT"`, `u32` version, `u32` tensor count, then per tensor a
//! `u32` name length, the UTF-8 name, a `u32` rank, `rank` `u32` dims and the
//! `f32` payload. Tensors appear in [`Network::convs`] order as
//! `<conv>.weight` followed by `<conv>.bias`.

use super::network::{NetConfig, Network};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ANKT";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, dims.len() as u32);
    for &d in dims {
        put_u32(out, d as u32);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_weights(net: &Network<f32>) -> Vec<u8> {
    let convs = net.convs();
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, VERSION);
    put_u32(&mut out, 2 * convs.len() as u32);
    for c in convs {
        put_tensor(&mut out, &format!("{}.weight", c.name), c.weight.dims(), c.weight.data());
        put_tensor(&mut out, &format!("{}.bias", c.name), &[c.bias.len()], &c.bias);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Weights(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Weights("tensor name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Weights("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Ok((name, dims, data))
    }
}

/// Loads weights for the topology described by `config`; every tensor name
/// and shape must match.
pub fn load_weights(bytes: &[u8], config: &NetConfig) -> Result<Network<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Weights("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Weights(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut net = Network::<f32>::zeros(config)?;
    let mut convs = net.convs_mut();
    if count != 2 * convs.len() {
        return Err(Error::Weights(format!(
            "{count} tensors, topology needs {}",
            2 * convs.len()
        )));
    }
    for conv in convs.iter_mut() {
        let (name, dims, data) = r.tensor()?;
        if name != format!("{}.weight", conv.name) || dims != conv.weight.dims() {
            return Err(Error::Weights(format!(
                "expected {}.weight {:?}, found {name} {dims:?}",
                conv.name,
                conv.weight.dims()
            )));
        }
        conv.weight = Tensor::from_vec(&dims, data)?;
        let (name, dims, data) = r.tensor()?;
        if name != format!("{}.bias", conv.name) || dims != [conv.bias.len()] {
            return Err(Error::Weights(format!(
                "expected {}.bias [{}], found {name} {dims:?}",
                conv.name,
                conv.bias.len()
            )));
        }
        conv.bias = data;
    }
    if r.pos != bytes.len() {
        return Err(Error::Weights(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(net)
}
