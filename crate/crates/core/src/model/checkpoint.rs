//! Binary checkpoint container for a backbone plus its adapter.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes   b"TAUGCKPT"
//! version      u32       currently 1
//! method_len   u8        followed by method_len bytes of UTF-8 method name
//! sharpness    f64       gate sharpness s (0 for ungated adapters)
//! lora_rank    u32       0 unless the adapter is LoRA
//! lora_alpha   f64       0 unless the adapter is LoRA
//! n_arrays     u32
//! n_arrays × { name_len u16, name UTF-8, rows u32, cols u32, rows·cols × f64 }
//! ```
//!
//! Backbone arrays are named `backbone.<w1|b1|...>`, adapter arrays
//! `adapter.<param name>` using the names from [`Adapter::params`].

use std::path::PathBuf;

use super::{Adapter, Backbone, LoraParams, Method, TauGateParams, BACKBONE_NAMES};
use crate::error::{Error, Result};
use crate::ndcore::{Matrix, Real};

pub const MAGIC: &[u8; 8] = b"TAUGCKPT";
pub const VERSION: u32 = 1;

pub fn encode(bb: &Backbone, ad: &Adapter) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let name = ad.method().name().as_bytes();
    out.push(name.len() as u8);
    out.extend_from_slice(name);
    out.extend_from_slice(&ad.sharpness().unwrap_or(0.0).to_le_bytes());
    let (rank, alpha) = match ad {
        Adapter::Lora(p) => (p.rank as u32, p.alpha),
        _ => (0, 0.0),
    };
    out.extend_from_slice(&rank.to_le_bytes());
    out.extend_from_slice(&alpha.to_le_bytes());

    let mut arrays: Vec<(String, &Matrix)> = BACKBONE_NAMES
        .iter()
        .zip(bb.arrays())
        .map(|(n, m)| (format!("backbone.{n}"), m))
        .collect();
    arrays.extend(ad.params().into_iter().map(|(n, m)| (format!("adapter.{n}"), m)));
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, m) in arrays {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        out.extend_from_slice(&m.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(bad("unexpected end of checkpoint")),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<Real> {
        Ok(Real::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("non-UTF-8 name"))
    }
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        path: PathBuf::from("<checkpoint>"),
        reason: reason.into(),
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Backbone, Adapter)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let name_len = r.u8()? as usize;
    let method: Method = r.string(name_len)?.parse()?;
    let sharpness = r.f64()?;
    let rank = r.u32()? as usize;
    let alpha = r.f64()?;
    let n = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = r.string(len)?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let data = r
            .take(rows * cols * 8)?
            .chunks_exact(8)
            .map(|c| Real::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes after last array"));
    }

    let mut take = |name: &str| -> Result<Matrix> {
        let pos = arrays
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| bad(format!("missing array {name}")))?;
        Ok(arrays.swap_remove(pos).1)
    };
    let [w1, b1, w2, b2, w3, b3] = BACKBONE_NAMES.map(|n| take(&format!("backbone.{n}")));
    let bb = Backbone {
        w1: w1?,
        b1: b1?,
        w2: w2?,
        b2: b2?,
        w3: w3?,
        b3: b3?,
    };
    let mut a = |n: &str| take(&format!("adapter.{n}"));
    let ad = match method {
        Method::Frozen => Adapter::Frozen,
        Method::FullFt => Adapter::FullFt(Backbone {
            w1: a("w1")?,
            b1: a("b1")?,
            w2: a("w2")?,
            b2: a("b2")?,
            w3: a("w3")?,
            b3: a("b3")?,
        }),
        Method::BitFit => Adapter::BitFit {
            bias_delta: [a("db1")?, a("db2")?, a("db3")?],
        },
        Method::GainOnly => Adapter::GainOnly {
            gamma: [a("gamma1")?, a("gamma2")?],
        },
        Method::TauOnly => Adapter::TauOnly {
            tau: [a("tau1")?, a("tau2")?],
            sharpness,
        },
        Method::TauGate => Adapter::TauGate(TauGateParams {
            tau: [a("tau1")?, a("tau2")?],
            gamma: [a("gamma1")?, a("gamma2")?],
            sharpness,
        }),
        Method::Lora => Adapter::Lora(LoraParams {
            a: [a("lora_a1")?, a("lora_a2")?, a("lora_a3")?],
            b: [a("lora_b1")?, a("lora_b2")?, a("lora_b3")?],
            rank,
            alpha,
        }),
    };
    if !arrays.is_empty() {
        return Err(bad(format!("unexpected array {}", arrays[0].0)));
    }
    Ok((bb, ad))
}
