//! Bitwise-exact model checkpoints.
//!
//! Layout, all integers little-endian: `"FMIM"` magic, format version `u32`,
//! record count `u32`, then per record: name length `u32`, name bytes (UTF-8),
//! rank `u32`, one `u64` extent per dimension, a dtype tag byte, and the raw
//! little-endian values. Model tensors are stored under their wire names in
//! wire order, run metadata under `meta/`, and a token codebook under `tok/`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelKind, ModelParams};
use crate::numerics::tensor::{Dtype, Real, Tensor};
use crate::tokenizer::Codebook;

const MAGIC: &[u8; 4] = b"FMIM";
pub(crate) const VERSION: u32 = 1;

/// One named tensor in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub extents: Vec<usize>,
    pub data: RecordData,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl Record {
    pub fn numel(&self) -> usize {
        self.extents.iter().product()
    }

    fn len(&self) -> usize {
        match &self.data {
            RecordData::F32(v) => v.len(),
            RecordData::F64(v) => v.len(),
            RecordData::U64(v) => v.len(),
        }
    }

    fn dtype(&self) -> Dtype {
        match &self.data {
            RecordData::F32(_) => Dtype::F32,
            RecordData::F64(_) => Dtype::F64,
            RecordData::U64(_) => Dtype::U64,
        }
    }

    fn scalar_u64(name: &str, value: u64) -> Record {
        Record {
            name: name.to_string(),
            extents: vec![1],
            data: RecordData::U64(vec![value]),
        }
    }
}

/// Serialize records in the given order.
pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(records.len()).map_err(|_| {
        Error::contract(format!("{} records exceed the container limit", records.len()))
    })?
    .to_le_bytes());
    for record in records {
        if record.len() != record.numel() {
            return Err(Error::contract(format!(
                "record {:?} holds {} values for extents {:?}",
                record.name,
                record.len(),
                record.extents
            )));
        }
        let name = record.name.as_bytes();
        out.extend_from_slice(
            &u32::try_from(name.len())
                .map_err(|_| Error::contract(format!("record name {:?} too long", record.name)))?
                .to_le_bytes(),
        );
        out.extend_from_slice(name);
        out.extend_from_slice(&(record.extents.len() as u32).to_le_bytes());
        for &extent in &record.extents {
            out.extend_from_slice(&(extent as u64).to_le_bytes());
        }
        out.push(record.dtype().tag());
        match &record.data {
            RecordData::F32(values) => {
                for v in values {
                    v.write_le(&mut out);
                }
            }
            RecordData::F64(values) => {
                for v in values {
                    v.write_le(&mut out);
                }
            }
            RecordData::U64(values) => {
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read records back in stored order.
pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let bytes = fs::read(path)?;
    let fail = |msg: String| Error::format(format!("{}: {msg}", path.display()));
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let slice = bytes
            .get(at..at + n)
            .ok_or_else(|| fail(format!("truncated at byte {at}")))?;
        at += n;
        Ok(slice)
    };
    if take(4)? != MAGIC {
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| fail("record name is not UTF-8".into()))?;
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let tag = take(1)?[0];
        let dtype = Dtype::from_tag(tag).map_err(|_| fail(format!("unknown dtype tag {tag}")))?;
        let numel: usize = extents.iter().product();
        let raw = take(numel * dtype.size())?;
        let data = match dtype {
            Dtype::F32 => RecordData::F32(
                raw.chunks_exact(4).map(f32::read_le).collect(),
            ),
            Dtype::F64 => RecordData::F64(
                raw.chunks_exact(8).map(f64::read_le).collect(),
            ),
            Dtype::U64 => RecordData::U64(
                raw.chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        records.push(Record {
            name,
            extents,
            data,
        });
    }
    if at != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - at)));
    }
    Ok(records)
}

fn float_record<F: Real>(name: &str, extents: Vec<usize>, values: &[F]) -> Record {
    let data = match F::DTYPE {
        Dtype::F32 => RecordData::F32(values.iter().map(|&v| v.to_f64() as f32).collect()),
        _ => RecordData::F64(values.iter().map(|&v| v.to_f64()).collect()),
    };
    Record {
        name: name.to_string(),
        extents,
        data,
    }
}

fn float_values<F: Real>(record: &Record) -> Result<Vec<F>> {
    match (&record.data, F::DTYPE) {
        (RecordData::F32(v), Dtype::F32) => Ok(v.iter().map(|&x| F::from_f64(x as f64)).collect()),
        (RecordData::F64(v), Dtype::F64) => Ok(v.iter().map(|&x| F::from_f64(x)).collect()),
        (data, want) => Err(Error::format(format!(
            "record {:?} holds {:?} values but this run uses {want:?}; \
             re-run with the matching precision",
            record.name,
            match data {
                RecordData::F32(_) => Dtype::F32,
                RecordData::F64(_) => Dtype::F64,
                RecordData::U64(_) => Dtype::U64,
            }
        ))),
    }
}

/// Config fields serialized under `meta/config`, in struct order.
fn config_words(cfg: &ModelConfig) -> Vec<u64> {
    [
        cfg.image_h,
        cfg.image_w,
        cfg.channels,
        cfg.patch,
        cfg.dim,
        cfg.depth,
        cfg.heads,
        cfg.mlp_ratio,
        cfg.dec_dim,
        cfg.dec_depth,
        cfg.vocab,
        cfg.num_classes,
    ]
    .iter()
    .map(|&v| v as u64)
    .collect()
}

fn config_from_words(words: &[u64]) -> Result<ModelConfig> {
    if words.len() != 12 {
        return Err(Error::format(format!(
            "meta/config holds {} words, expected 12",
            words.len()
        )));
    }
    let w: Vec<usize> = words.iter().map(|&v| v as usize).collect();
    let cfg = ModelConfig {
        image_h: w[0],
        image_w: w[1],
        channels: w[2],
        patch: w[3],
        dim: w[4],
        depth: w[5],
        heads: w[6],
        mlp_ratio: w[7],
        dec_dim: w[8],
        dec_depth: w[9],
        vocab: w[10],
        num_classes: w[11],
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Write model params (wire order), config metadata, and optionally a token
/// codebook, as one checkpoint file.
pub fn save_checkpoint<F: Real>(
    path: &Path,
    cfg: &ModelConfig,
    params: &ModelParams<F>,
    codebook: Option<&Codebook<F>>,
) -> Result<()> {
    let mut records = Vec::new();
    for (name, tensor) in params.names().iter().zip(params.tensors()) {
        records.push(float_record(name, tensor.shape().to_vec(), tensor.data()));
    }
    records.push(Record {
        name: "meta/config".into(),
        extents: vec![12],
        data: RecordData::U64(config_words(cfg)),
    });
    records.push(Record::scalar_u64("meta/kind", params.kind().tag()));
    if let Some(cb) = codebook {
        records.push(float_record(
            "tok/centroids",
            vec![cb.len(), cb.dim()],
            cb.centroids(),
        ));
        records.push(Record::scalar_u64("tok/iterations", cb.iterations as u64));
        records.push(Record::scalar_u64("tok/seed", cb.seed));
        records.push(Record {
            name: "tok/inertia".into(),
            extents: vec![1],
            data: RecordData::F64(vec![cb.inertia]),
        });
    }
    write_records(path, &records)
}

/// Everything a checkpoint can carry.
pub struct Checkpoint<F: Real> {
    pub cfg: ModelConfig,
    pub params: ModelParams<F>,
    pub codebook: Option<Codebook<F>>,
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    let records = read_records(path)?;
    let by_name: HashMap<&str, &Record> =
        records.iter().map(|r| (r.name.as_str(), r)).collect();
    let fetch = |name: &str| {
        by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::format(format!("{}: missing record {name:?}", path.display())))
    };

    let cfg = match &fetch("meta/config")?.data {
        RecordData::U64(words) => config_from_words(words)?,
        _ => return Err(Error::format("meta/config is not a u64 record")),
    };
    let kind_tag = match &fetch("meta/kind")?.data {
        RecordData::U64(words) if words.len() == 1 => words[0],
        _ => return Err(Error::format("meta/kind is not a u64 scalar")),
    };
    let kind = ModelKind::from_tag(kind_tag)
        .ok_or_else(|| Error::format(format!("unknown model kind tag {kind_tag}")))?;

    let mut tensors = HashMap::new();
    for record in &records {
        if record.name.starts_with("meta/") || record.name.starts_with("tok/") {
            continue;
        }
        let values: Vec<F> = float_values(record)?;
        let mut tensor = Tensor::new(record.extents.clone(), values)?;
        tensor.requires_grad = true;
        tensors.insert(record.name.clone(), tensor);
    }
    let params = ModelParams::from_named(&cfg, kind, tensors)?;

    let codebook = match by_name.get("tok/centroids") {
        Some(record) => {
            if record.extents.len() != 2 {
                return Err(Error::format("tok/centroids is not a matrix"));
            }
            let mut cb = Codebook::from_centroids(float_values(record)?, record.extents[1])?;
            if let RecordData::U64(v) = &fetch("tok/iterations")?.data {
                cb.iterations = v[0] as usize;
            }
            if let RecordData::U64(v) = &fetch("tok/seed")?.data {
                cb.seed = v[0];
            }
            if let RecordData::F64(v) = &fetch("tok/inertia")?.data {
                cb.inertia = v[0];
            }
            Some(cb)
        }
        None => None,
    };

    Ok(Checkpoint {
        cfg,
        params,
        codebook,
    })
}
