//! On-disk data formats: the `FIMG` binary image container, its sibling label
//! CSV, and partition manifest CSVs for bit-exact split replay.
//!
//! Container layout, all integers little-endian:
//! `"FIMG"` · version `u32` · count `u32` · height `u16` · width `u16` ·
//! channels `u8` · pixel-encoding tag `u8` · raw image bytes. Encoding 0 is
//! one byte per pixel value, divided by 255 on load.

use std::fs;
use std::path::Path;

use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::numerics::tensor::Real;

const MAGIC: &[u8; 4] = b"FIMG";
pub(crate) const VERSION: u32 = 1;
const ENCODING_U8: u8 = 0;

/// Write images as an `FIMG` container, quantizing pixels to bytes.
pub fn save_images<F: Real>(path: &Path, images: &[F], shape: ImageShape) -> Result<()> {
    let n = shape.numel();
    if n == 0 || images.len() % n != 0 {
        return Err(Error::contract(format!(
            "{} pixel values do not tile {}×{}×{} images",
            images.len(),
            shape.h,
            shape.w,
            shape.c
        )));
    }
    let count = images.len() / n;
    for (name, extent, max) in [
        ("count", count, u32::MAX as usize),
        ("height", shape.h, u16::MAX as usize),
        ("width", shape.w, u16::MAX as usize),
        ("channels", shape.c, u8::MAX as usize),
    ] {
        if extent > max {
            return Err(Error::contract(format!(
                "{name} {extent} exceeds the container limit {max}"
            )));
        }
    }
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    out.extend_from_slice(&(shape.h as u16).to_le_bytes());
    out.extend_from_slice(&(shape.w as u16).to_le_bytes());
    out.push(shape.c as u8);
    out.push(ENCODING_U8);
    for &v in images {
        out.push((v.to_f64().clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read an `FIMG` container back into `[0, 1]` pixel values.
pub fn load_images<F: Real>(path: &Path) -> Result<(ImageShape, Vec<F>)> {
    let bytes = fs::read(path)?;
    let fail = |msg: &str| Error::format(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 {
        return Err(fail("truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("not an image container (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let h = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
    let w = u16::from_le_bytes(bytes[14..16].try_into().unwrap()) as usize;
    if bytes.len() < 18 {
        return Err(fail("truncated header"));
    }
    let c = bytes[16] as usize;
    let encoding = bytes[17];
    if encoding != ENCODING_U8 {
        return Err(fail(&format!("unsupported pixel encoding {encoding}")));
    }
    let shape = ImageShape { h, w, c };
    let expect = count * shape.numel();
    let data = &bytes[18..];
    if data.len() != expect {
        return Err(fail(&format!(
            "{} pixel bytes for {count} images of {} pixels",
            data.len(),
            shape.numel()
        )));
    }
    let pixels = data
        .iter()
        .map(|&b| F::from_f64(b as f64 / 255.0))
        .collect();
    Ok((shape, pixels))
}

/// Write the sibling label CSV (`index,label` plus an optional `client_id`).
pub fn save_labels(path: &Path, labels: &[usize], clients: Option<&[usize]>) -> Result<()> {
    if let Some(clients) = clients {
        if clients.len() != labels.len() {
            return Err(Error::contract(format!(
                "{} client ids for {} labels",
                clients.len(),
                labels.len()
            )));
        }
    }
    let mut out = String::new();
    match clients {
        Some(clients) => {
            out.push_str("index,label,client_id\n");
            for (i, (&label, &client)) in labels.iter().zip(clients).enumerate() {
                out.push_str(&format!("{i},{label},{client}\n"));
            }
        }
        None => {
            out.push_str("index,label\n");
            for (i, &label) in labels.iter().enumerate() {
                out.push_str(&format!("{i},{label}\n"));
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a label CSV; returns labels in index order and per-image client ids
/// when the file carries them.
pub fn load_labels(path: &Path) -> Result<(Vec<usize>, Option<Vec<usize>>)> {
    let text = fs::read_to_string(path)?;
    let fail = |line: usize, msg: String| Error::format(format!("{}:{line}: {msg}", path.display()));
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| fail(1, "empty label file".into()))?;
    let with_clients = match header.trim() {
        "index,label" => false,
        "index,label,client_id" => true,
        other => return Err(fail(1, format!("unexpected header {other:?}"))),
    };
    let mut rows: Vec<(usize, usize, Option<usize>)> = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let expect = if with_clients { 3 } else { 2 };
        if fields.len() != expect {
            return Err(fail(i + 1, format!("expected {expect} fields")));
        }
        let parse = |field: &str| {
            field
                .trim()
                .parse::<usize>()
                .map_err(|_| fail(i + 1, format!("bad integer {field:?}")))
        };
        let index = parse(fields[0])?;
        let label = parse(fields[1])?;
        let client = if with_clients { Some(parse(fields[2])?) } else { None };
        rows.push((index, label, client));
    }
    rows.sort_unstable_by_key(|&(index, ..)| index);
    for (pos, &(index, ..)) in rows.iter().enumerate() {
        if index != pos {
            return Err(fail(
                0,
                format!("indices are not exactly 0..{} (saw {index})", rows.len()),
            ));
        }
    }
    let labels = rows.iter().map(|&(_, label, _)| label).collect();
    let clients = with_clients.then(|| rows.iter().map(|r| r.2.unwrap()).collect());
    Ok((labels, clients))
}

/// Write per-client index lists as a `client_id,dataset_index` CSV.
pub fn save_manifest(path: &Path, clients: &[Vec<usize>]) -> Result<()> {
    let mut out = String::from("client_id,dataset_index\n");
    for (k, indices) in clients.iter().enumerate() {
        for &i in indices {
            out.push_str(&format!("{k},{i}\n"));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a manifest back into per-client index lists (row order preserved).
pub fn load_manifest(path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path)?;
    let fail = |line: usize, msg: String| Error::format(format!("{}:{line}: {msg}", path.display()));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "client_id,dataset_index" => {}
        Some((_, other)) => return Err(fail(1, format!("unexpected header {other:?}"))),
        None => return Err(fail(1, "empty manifest".into())),
    }
    let mut clients: Vec<Vec<usize>> = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (client, index) = line
            .split_once(',')
            .ok_or_else(|| fail(i + 1, "expected 2 fields".into()))?;
        let client: usize = client
            .trim()
            .parse()
            .map_err(|_| fail(i + 1, format!("bad client id {client:?}")))?;
        let index: usize = index
            .trim()
            .parse()
            .map_err(|_| fail(i + 1, format!("bad dataset index {index:?}")))?;
        if client >= clients.len() {
            clients.resize(client + 1, Vec::new());
        }
        clients[client].push(index);
    }
    Ok(clients)
}
