//! Integer-code dumps.
//!
//! Layout: the magic `QATCODE1`, the header length as a little-endian `u64`,
//! a JSON header listing each quantized layer (name, bit width, scale, shape,
//! byte offset and length), then the packed codes. Codes of at most 4 bits
//! are stored as two's-complement nibbles, two per byte, low nibble first;
//! wider codes take one byte each.

use std::path::Path;

use anyhow::{ensure, Context};
use qat_core::models::ExportedCodes;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;

pub const MAGIC: &[u8; 8] = b"QATCODE1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    name: String,
    bits: u32,
    scale: f64,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

pub fn pack(codes: &[i8], bits: u32) -> Vec<u8> {
    if bits <= 4 {
        codes.chunks(2).map(|p| (p[0] as u8 & 0x0f) | (p.get(1).map_or(0, |&c| c as u8 & 0x0f) << 4)).collect()
    } else {
        codes.iter().map(|&c| c as u8).collect()
    }
}

pub fn unpack(bytes: &[u8], bits: u32, n: usize) -> Vec<i8> {
    if bits <= 4 {
        // sign-extend each nibble
        let nib = |v: u8| ((v << 4) as i8) >> 4;
        bytes.iter().flat_map(|&b| [nib(b & 0x0f), nib(b >> 4)]).take(n).collect()
    } else {
        bytes.iter().take(n).map(|&b| b as i8).collect()
    }
}

fn packed_len(bits: u32, n: usize) -> usize {
    if bits <= 4 {
        n.div_ceil(2)
    } else {
        n
    }
}

pub fn dump_to_bytes(layers: &[ExportedCodes<f64>]) -> anyhow::Result<Vec<u8>> {
    let mut data = Vec::new();
    let mut entries = Vec::new();
    for l in layers {
        ensure!(
            l.shape.iter().product::<usize>() == l.codes.len(),
            "layer {}: shape does not match code count",
            l.name
        );
        let packed = pack(&l.codes, l.bits);
        entries.push(LayerEntry {
            name: l.name.clone(),
            bits: l.bits,
            scale: l.scale,
            shape: l.shape.clone(),
            offset: data.len(),
            bytes: packed.len(),
        });
        data.extend(packed);
    }
    let json = serde_json::to_vec(&entries)?;
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn dump_from_bytes(bytes: &[u8]) -> anyhow::Result<Vec<ExportedCodes<f64>>> {
    ensure!(bytes.len() >= 16 && &bytes[..8] == MAGIC, "corrupt code dump: bad magic");
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    ensure!(bytes.len() - 16 >= header_len, "corrupt code dump: truncated header");
    let entries: Vec<LayerEntry> =
        serde_json::from_slice(&bytes[16..16 + header_len]).context("corrupt code dump: unreadable header")?;
    let data = &bytes[16 + header_len..];
    entries
        .into_iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            ensure!((2..=8).contains(&e.bits), "corrupt code dump: {} has {} bits", e.name, e.bits);
            ensure!(e.bytes == packed_len(e.bits, n), "corrupt code dump: {} has the wrong length", e.name);
            let raw =
                data.get(e.offset..).and_then(|d| d.get(..e.bytes)).context("corrupt code dump: truncated data")?;
            let codes = unpack(raw, e.bits, n);
            let q = (1i16 << (e.bits - 1)) - 1;
            ensure!(
                codes.iter().all(|&c| (c as i16).abs() <= q),
                "corrupt code dump: {} has codes out of range",
                e.name
            );
            Ok(ExportedCodes { name: e.name, bits: e.bits, scale: e.scale, shape: e.shape, codes })
        })
        .collect()
}

pub fn write_dump(path: &Path, layers: &[ExportedCodes<f64>]) -> anyhow::Result<()> {
    std::fs::write(path, dump_to_bytes(layers)?).with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_dump(path: &Path) -> anyhow::Result<Vec<ExportedCodes<f64>>> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    dump_from_bytes(&bytes).with_context(|| format!("in {}", path.display()))
}

/// Summary of one export.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportSummary {
    pub layers: Vec<(String, u32, f64, usize)>,
    pub file_bytes: usize,
}

/// Reads a checkpoint and writes the integer codes of its quantized layers.
pub fn cmd_export(checkpoint: &Path, out: &Path) -> anyhow::Result<ExportSummary> {
    let ck = Checkpoint::load(checkpoint)?;
    let layers = ck.model.export_codes()?;
    let bytes = dump_to_bytes(&layers)?;
    std::fs::write(out, &bytes).with_context(|| format!("cannot write {}", out.display()))?;
    Ok(ExportSummary {
        layers: layers.iter().map(|l| (l.name.clone(), l.bits, l.scale, l.codes.len())).collect(),
        file_bytes: bytes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nibbles_round_trip() {
        let codes: Vec<i8> = (-7..=7).collect();
        let packed = pack(&codes, 4);
        assert_eq!(packed.len(), 8);
        assert_eq!(unpack(&packed, 4, codes.len()), codes);
        assert_eq!(pack(&[-1, 1], 4), vec![0x1f]);
        let wide: Vec<i8> = vec![-127, 0, 127];
        assert_eq!(unpack(&pack(&wide, 8), 8, 3), wide);
    }

    #[test]
    fn dump_round_trips() {
        let layers = vec![
            ExportedCodes {
                name: "a".into(),
                bits: 4,
                scale: 0.1 + 0.2,
                shape: vec![3, 3],
                codes: vec![-7, 0, 7, 1, 2, 3, -1, -2, -3],
            },
            ExportedCodes { name: "b".into(), bits: 8, scale: 1e-3, shape: vec![2], codes: vec![-127, 99] },
        ];
        let bytes = dump_to_bytes(&layers).unwrap();
        assert_eq!(dump_from_bytes(&bytes).unwrap(), layers);
        let mut bad = bytes.clone();
        bad.truncate(bytes.len() - 1);
        assert!(dump_from_bytes(&bad).is_err());
    }

    #[test]
    fn out_of_range_nibble_is_rejected() {
        let layers = vec![ExportedCodes { name: "a".into(), bits: 4, scale: 1.0, shape: vec![2], codes: vec![-8, 0] }];
        assert!(dump_from_bytes(&dump_to_bytes(&layers).unwrap()).is_err());
    }
}
