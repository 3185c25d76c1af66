//! Checkpoint format: magic "GMSF", format version, config hash, per-tensor
//! records (path, dtype tag, rank, dims, little-endian payload), trailing
//! CRC-32 over everything before it. Round trips are bit-exact and carry the
//! full training state: parameters, batch-norm buffers, optimizer moments,
//! the step counter, and the data-stream RNG state.

use std::collections::BTreeMap;
use std::path::Path;

use crate::checksum::crc32;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::ParamSet;
use crate::rng::Rng;
use crate::training::OptimState;

const MAGIC: &[u8; 4] = b"GMSF";
const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U64: u8 = 2;

/// Full resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointState {
    pub params: ParamSet<f32>,
    pub optim: OptimState<f32>,
    pub rng: Rng,
}

struct Record {
    path: String,
    dtype: u8,
    dims: Vec<u32>,
    payload: Vec<u8>,
}

fn push_matrix_record(out: &mut Vec<Record>, path: String, m: &Matrix<f32>) {
    let mut payload = Vec::with_capacity(m.len() * 4);
    for &v in m.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    out.push(Record {
        path,
        dtype: DTYPE_F32,
        dims: vec![m.rows() as u32, m.cols() as u32],
        payload,
    });
}

fn push_u64_record(out: &mut Vec<Record>, path: String, values: &[u64]) {
    let mut payload = Vec::with_capacity(values.len() * 8);
    for &v in values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    out.push(Record {
        path,
        dtype: DTYPE_U64,
        dims: vec![values.len() as u32],
        payload,
    });
}

/// Serialize and write a checkpoint.
pub fn save_checkpoint(path: &Path, state: &CheckpointState, config_hash: u64) -> Result<()> {
    let mut records = Vec::new();
    for (p, m) in state.params.params() {
        push_matrix_record(&mut records, format!("param/{p}"), m);
    }
    for (p, m) in state.params.buffers() {
        push_matrix_record(&mut records, format!("buffer/{p}"), m);
    }
    for (p, m) in &state.optim.m {
        push_matrix_record(&mut records, format!("optim/m/{p}"), m);
    }
    for (p, m) in &state.optim.v {
        push_matrix_record(&mut records, format!("optim/v/{p}"), m);
    }
    push_u64_record(&mut records, "meta/step".into(), &[state.optim.step]);
    push_u64_record(&mut records, "meta/rng".into(), &state.rng.state());

    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&config_hash.to_le_bytes());
    bytes.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for rec in &records {
        bytes.extend_from_slice(&(rec.path.len() as u32).to_le_bytes());
        bytes.extend_from_slice(rec.path.as_bytes());
        bytes.push(rec.dtype);
        bytes.extend_from_slice(&(rec.dims.len() as u32).to_le_bytes());
        for &d in &rec.dims {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        bytes.extend_from_slice(&rec.payload);
    }
    let crc = crc32(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, bytes)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("checkpoint truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn dtype_size(dtype: u8) -> Result<usize> {
    match dtype {
        DTYPE_F32 => Ok(4),
        DTYPE_U64 => Ok(8),
        other => Err(Error::format(format!("unknown dtype tag {other}"))),
    }
}

fn parse_records(bytes: &[u8], expected_hash: u64) -> Result<Vec<Record>> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 4 + 4 {
        return Err(Error::format("checkpoint too short"));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32(body) != stored_crc {
        return Err(Error::format("checkpoint CRC mismatch"));
    }
    let mut cur = Cursor { bytes: body, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::format("bad checkpoint magic"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let hash = cur.u64()?;
    if hash != expected_hash {
        return Err(Error::format(format!(
            "checkpoint config hash {hash:#018x} does not match expected {expected_hash:#018x}"
        )));
    }
    let n_records = cur.u32()? as usize;
    let mut records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let path_len = cur.u32()? as usize;
        let path = String::from_utf8(cur.take(path_len)?.to_vec())
            .map_err(|_| Error::format("non-utf8 record path"))?;
        let dtype = cur.u8()?;
        let rank = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut count = 1usize;
        for _ in 0..rank {
            let d = cur.u32()?;
            count = count
                .checked_mul(d as usize)
                .ok_or_else(|| Error::format("record dims overflow"))?;
            dims.push(d);
        }
        let payload = cur.take(count * dtype_size(dtype)?)?.to_vec();
        records.push(Record {
            path,
            dtype,
            dims,
            payload,
        });
    }
    if cur.pos != body.len() {
        return Err(Error::format("trailing bytes after checkpoint records"));
    }
    Ok(records)
}

fn record_matrix(rec: &Record) -> Result<Matrix<f32>> {
    if rec.dtype != DTYPE_F32 || rec.dims.len() != 2 {
        return Err(Error::format(format!(
            "record {} is not an f32 matrix",
            rec.path
        )));
    }
    let data: Vec<f32> = rec
        .payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Matrix::from_vec(rec.dims[0] as usize, rec.dims[1] as usize, data))
}

fn record_u64s(rec: &Record) -> Result<Vec<u64>> {
    if rec.dtype != DTYPE_U64 || rec.dims.len() != 1 {
        return Err(Error::format(format!("record {} is not u64", rec.path)));
    }
    Ok(rec
        .payload
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Read a checkpoint, verifying magic, version, CRC, and the config hash.
/// Construction is all-or-nothing: any inconsistency leaves no partial state.
pub fn load_checkpoint(path: &Path, expected_hash: u64) -> Result<CheckpointState> {
    let bytes = std::fs::read(path)?;
    let records = parse_records(&bytes, expected_hash)?;
    let mut params = ParamSet::new();
    let mut optim_m: BTreeMap<String, Matrix<f32>> = BTreeMap::new();
    let mut optim_v: BTreeMap<String, Matrix<f32>> = BTreeMap::new();
    let mut step = None;
    let mut rng_state = None;
    for rec in &records {
        if let Some(p) = rec.path.strip_prefix("param/") {
            params.insert_param(p.to_string(), record_matrix(rec)?);
        } else if let Some(p) = rec.path.strip_prefix("buffer/") {
            params.insert_buffer(p.to_string(), record_matrix(rec)?);
        } else if let Some(p) = rec.path.strip_prefix("optim/m/") {
            optim_m.insert(p.to_string(), record_matrix(rec)?);
        } else if let Some(p) = rec.path.strip_prefix("optim/v/") {
            optim_v.insert(p.to_string(), record_matrix(rec)?);
        } else if rec.path == "meta/step" {
            let v = record_u64s(rec)?;
            if v.len() != 1 {
                return Err(Error::format("meta/step must hold one value"));
            }
            step = Some(v[0]);
        } else if rec.path == "meta/rng" {
            let v = record_u64s(rec)?;
            if v.len() != 4 {
                return Err(Error::format("meta/rng must hold four state words"));
            }
            rng_state = Some([v[0], v[1], v[2], v[3]]);
        } else {
            return Err(Error::format(format!("unknown record path {}", rec.path)));
        }
    }
    let step = step.ok_or_else(|| Error::format("checkpoint missing meta/step"))?;
    let rng_state = rng_state.ok_or_else(|| Error::format("checkpoint missing meta/rng"))?;
    // Optimizer moments must cover exactly the parameters, shape for shape.
    for (path, p) in params.params() {
        for (name, map) in [("m", &optim_m), ("v", &optim_v)] {
            let mom = map.get(path).ok_or_else(|| {
                Error::format(format!("checkpoint missing optim/{name}/{path}"))
            })?;
            if mom.shape() != p.shape() {
                return Err(Error::format(format!(
                    "optim/{name}/{path} shape {:?} != parameter shape {:?}",
                    mom.shape(),
                    p.shape()
                )));
            }
        }
    }
    if optim_m.len() != params.params().count() || optim_v.len() != params.params().count() {
        return Err(Error::format("checkpoint has orphan optimizer records"));
    }
    Ok(CheckpointState {
        params,
        optim: OptimState {
            m: optim_m,
            v: optim_v,
            step,
        },
        rng: Rng::from_state(rng_state),
    })
}
