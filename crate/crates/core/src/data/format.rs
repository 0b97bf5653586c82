//! Binary dataset format.
//!
//! ```text
//! "NDCD" | version u32 | d u32 | L u32 | count u32 | config hash u64
//!        | config JSON length u32 | config JSON
//! per instance:
//!   payload length u32            (bytes that follow, up to the next instance)
//!   seed u64 | config hash u64 | gold u32 | count u32 | text rows u32 | attributes u32
//!   text f32[rows * d] | images f32[L * d] | cross f32[L * d]
//!   masks u8[count * L] | attrs u8[L * attributes]
//!   clauses (attribute u32, positive u8)[count], present only when attributes > 0
//! ```
//!
//! All integers and floats are little-endian. Ingested embeddings from other
//! sources use `attributes = 0` and an arbitrary JSON blob.

use std::fs;
use std::path::Path;

use crate::data::{Clause, GenConfig, Instance};
use crate::error::{Error, Result};
use crate::io::Reader;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NDCD";
pub const VERSION: u32 = 1;

/// File-level metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub d: usize,
    pub candidates: usize,
    pub count: usize,
    pub config_hash: u64,
    /// Raw JSON blob as stored.
    pub config_json: String,
}

impl DatasetHeader {
    /// Generator config, when the blob holds one.
    pub fn gen_config(&self) -> Option<GenConfig> {
        let value: serde_json::Value = serde_json::from_str(&self.config_json).ok()?;
        let obj = value.as_object()?;
        if !(obj.contains_key("d") && obj.contains_key("candidates")) {
            return None;
        }
        serde_json::from_value(value).ok()
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize a dataset. All instances must share `d` and `L`.
pub fn write_dataset_bytes(
    config_json: &str,
    config_hash: u64,
    instances: &[Instance],
) -> Result<Vec<u8>> {
    let (d, l) = match instances.first() {
        Some(i) => (i.d(), i.candidates()),
        None => {
            let cfg: GenConfig = serde_json::from_str(config_json).map_err(|e| {
                Error::Config(format!("empty dataset needs a generator config: {e}"))
            })?;
            (cfg.d, cfg.candidates)
        }
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, d);
    put_u32(&mut out, l);
    put_u32(&mut out, instances.len());
    out.extend_from_slice(&config_hash.to_le_bytes());
    put_u32(&mut out, config_json.len());
    out.extend_from_slice(config_json.as_bytes());
    for (idx, inst) in instances.iter().enumerate() {
        if inst.d() != d
            || inst.candidates() != l
            || inst.text.cols() != d
            || inst.cross.shape() != [l, d]
        {
            return Err(Error::Dimension(format!(
                "instance {idx} has shape d={} L={}, dataset has d={d} L={l}",
                inst.d(),
                inst.candidates()
            )));
        }
        let n_attr = inst.attrs.first().map_or(0, Vec::len);
        let mut body = Vec::new();
        body.extend_from_slice(&inst.seed.to_le_bytes());
        body.extend_from_slice(&inst.config_hash.to_le_bytes());
        put_u32(&mut body, inst.gold);
        put_u32(&mut body, inst.count);
        put_u32(&mut body, inst.text.rows());
        put_u32(&mut body, n_attr);
        put_f32s(&mut body, &inst.text);
        put_f32s(&mut body, &inst.images);
        put_f32s(&mut body, &inst.cross);
        for row in &inst.masks {
            body.extend(row.iter().map(|&b| b as u8));
        }
        if n_attr > 0 {
            for row in &inst.attrs {
                body.extend(row.iter().map(|&b| b as u8));
            }
            for c in &inst.clauses {
                put_u32(&mut body, c.attribute);
                body.push(c.positive as u8);
            }
        }
        put_u32(&mut out, body.len());
        out.extend_from_slice(&body);
    }
    Ok(out)
}

pub fn write_dataset(
    path: impl AsRef<Path>,
    config: &GenConfig,
    instances: &[Instance],
) -> Result<()> {
    let json = serde_json::to_string(config).expect("config serializes");
    let bytes = write_dataset_bytes(&json, config.hash(), instances)?;
    fs::write(path, bytes)?;
    Ok(())
}

fn bools(r: &mut Reader<'_>, n: usize) -> Result<Vec<bool>> {
    let at = r.offset();
    r.take(n)?
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::format(at, format!("boolean byte {other}"))),
        })
        .collect()
}

fn read_header(r: &mut Reader<'_>) -> Result<DatasetHeader> {
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::format(
            0,
            format!("bad magic {magic:?}, expected \"NDCD\""),
        ));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(
            4,
            format!("unsupported dataset version {version}"),
        ));
    }
    let d = r.u32()? as usize;
    let candidates = r.u32()? as usize;
    let count = r.u32()? as usize;
    let config_hash = r.u64()?;
    if d == 0 || candidates == 0 {
        return Err(Error::format(
            8,
            format!("header has d={d}, L={candidates}"),
        ));
    }
    let json_at = r.offset();
    let len = r.u32()? as usize;
    let config_json = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::format(json_at + 4, "config blob is not UTF-8"))?
        .to_string();
    let header = DatasetHeader {
        d,
        candidates,
        count,
        config_hash,
        config_json,
    };
    if let Some(cfg) = header.gen_config() {
        if cfg.d != d || cfg.candidates != candidates {
            return Err(Error::Dimension(format!(
                "header d={d} L={candidates} disagrees with embedded config d={} L={}",
                cfg.d, cfg.candidates
            )));
        }
    }
    Ok(header)
}

/// Parse only the file header.
pub fn read_header_bytes(bytes: &[u8]) -> Result<DatasetHeader> {
    read_header(&mut Reader::new(bytes))
}

pub fn read_dataset_bytes(bytes: &[u8]) -> Result<(DatasetHeader, Vec<Instance>)> {
    let mut r = Reader::new(bytes);
    let header = read_header(&mut r)?;
    let (d, l) = (header.d, header.candidates);
    let mut instances = Vec::with_capacity(header.count.min(1 << 20));
    for idx in 0..header.count {
        let start = r.offset();
        let payload = r.u32()? as usize;
        let body_at = r.offset();
        let seed = r.u64()?;
        let config_hash = r.u64()?;
        let gold = r.u32()? as usize;
        let count = r.u32()? as usize;
        let rows = r.u32()? as usize;
        let n_attr = r.u32()? as usize;
        let expected = 32usize
            .checked_add(rows.saturating_mul(d).saturating_mul(4))
            .and_then(|v| v.checked_add(2 * l * d * 4))
            .and_then(|v| v.checked_add(count.saturating_mul(l)))
            .and_then(|v| v.checked_add(l.saturating_mul(n_attr)))
            .and_then(|v| {
                v.checked_add(if n_attr > 0 {
                    count.saturating_mul(5)
                } else {
                    0
                })
            });
        if expected != Some(payload) {
            return Err(Error::format(
                start,
                format!(
                    "instance {idx}: payload is {payload} bytes but header d={d}, L={l} implies {}",
                    expected.map_or("overflow".to_string(), |v| v.to_string())
                ),
            ));
        }
        if rows < 2 || count == 0 || gold >= l {
            return Err(Error::format(
                body_at,
                format!("instance {idx}: text rows {rows}, count {count}, gold {gold} (L={l})"),
            ));
        }
        let text = Tensor::matrix(rows, d, r.f32s(rows * d)?)?;
        let images = Tensor::matrix(l, d, r.f32s(l * d)?)?;
        let cross = Tensor::matrix(l, d, r.f32s(l * d)?)?;
        let mut masks = Vec::with_capacity(count);
        for _ in 0..count {
            masks.push(bools(&mut r, l)?);
        }
        let mut attrs = Vec::new();
        let mut clauses = Vec::new();
        if n_attr > 0 {
            for _ in 0..l {
                attrs.push(bools(&mut r, n_attr)?);
            }
            for _ in 0..count {
                let at = r.offset();
                let attribute = r.u32()? as usize;
                let positive = r.u8()?;
                if attribute >= n_attr || positive > 1 {
                    return Err(Error::format(
                        at,
                        format!("bad clause ({attribute}, {positive})"),
                    ));
                }
                clauses.push(Clause {
                    attribute,
                    positive: positive == 1,
                });
            }
        }
        instances.push(Instance {
            text,
            images,
            cross,
            gold,
            count,
            masks,
            attrs,
            clauses,
            seed,
            config_hash,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::format(
            r.offset(),
            "trailing bytes after last instance",
        ));
    }
    Ok((header, instances))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<(DatasetHeader, Vec<Instance>)> {
    read_dataset_bytes(&fs::read(path)?)
}
