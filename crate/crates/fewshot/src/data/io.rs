//! Dataset file container.
//!
//! Layout: magic `FSLD`, u32 version, u64 header length, header (class,
//! domain, split and per-sample maps), an embedded tensor block in the
//! checkpoint format holding all images as one (S,C,H,W) tensor, and a
//! trailing FNV-1a 64 checksum over everything before it. Integers are
//! little-endian; round-trips are bit-exact.

use std::path::Path;

use super::{DataError, DatasetManifest, Result, Role, SampleRecord, Split};
use crate::rng::fnv64;
use crate::tensor::{self, Tensor};

pub const DATASET_MAGIC: [u8; 4] = *b"FSLD";
pub const DATASET_VERSION: u32 = 1;

pub fn save_dataset(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    std::fs::write(path, encode_dataset(manifest)?).map_err(|e| DataError::Io(e.to_string()))
}

pub fn load_dataset(path: &Path) -> Result<DatasetManifest> {
    let bytes = std::fs::read(path).map_err(|e| DataError::Io(e.to_string()))?;
    decode_dataset(&bytes)
}

pub(crate) fn encode_dataset(manifest: &DatasetManifest) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());

    let mut header = Vec::new();
    header.extend_from_slice(&(manifest.class_names.len() as u32).to_le_bytes());
    for (name, split) in manifest.class_names.iter().zip(&manifest.split_map) {
        write_string(&mut header, name);
        header.push(split.tag());
    }
    header.extend_from_slice(&(manifest.domain_names.len() as u32).to_le_bytes());
    for name in &manifest.domain_names {
        write_string(&mut header, name);
    }
    header.extend_from_slice(&(manifest.samples.len() as u32).to_le_bytes());
    for s in &manifest.samples {
        header.extend_from_slice(&(s.class_id as u32).to_le_bytes());
        header.extend_from_slice(&(s.domain_id as u32).to_le_bytes());
        header.push(s.role.tag());
    }
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);

    let images = if manifest.samples.is_empty() {
        Tensor::zeros(vec![0, 0, 0, 0])
    } else {
        let all: Vec<usize> = (0..manifest.samples.len()).collect();
        manifest.gather_images(&all)
    };
    out.extend_from_slice(&tensor::encode_tensors_bytes(&[(
        "images".to_string(),
        images,
    )]));

    let checksum = fnv64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    Ok(out)
}

pub(crate) fn decode_dataset(bytes: &[u8]) -> Result<DatasetManifest> {
    if bytes.len() < 4 {
        return Err(DataError::Format("file shorter than magic".into()));
    }
    if bytes[0..4] != DATASET_MAGIC {
        return Err(DataError::Format(format!(
            "bad magic {:?}, expected {DATASET_MAGIC:?}",
            &bytes[0..4]
        )));
    }
    if bytes.len() < 8 {
        return Err(DataError::Format("file shorter than header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(DataError::VersionMismatch {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    if bytes.len() < 16 {
        return Err(DataError::ChecksumFailure);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv64(body) != stored {
        return Err(DataError::ChecksumFailure);
    }

    let mut pos = 8usize;
    let header_len = read_u64(body, &mut pos)? as usize;
    let header_end = pos + header_len;
    if header_end > body.len() {
        return Err(DataError::Format("header extends past file".into()));
    }

    let mut hp = pos;
    let n_classes = read_u32(body, &mut hp)? as usize;
    let mut class_names = Vec::with_capacity(n_classes);
    let mut split_map = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        class_names.push(read_string(body, &mut hp)?);
        split_map.push(Split::from_tag(read_u8(body, &mut hp)?)?);
    }
    let n_domains = read_u32(body, &mut hp)? as usize;
    let mut domain_names = Vec::with_capacity(n_domains);
    for _ in 0..n_domains {
        domain_names.push(read_string(body, &mut hp)?);
    }
    let n_samples = read_u32(body, &mut hp)? as usize;
    let mut meta = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let class_id = read_u32(body, &mut hp)? as usize;
        let domain_id = read_u32(body, &mut hp)? as usize;
        let role = Role::from_tag(read_u8(body, &mut hp)?)?;
        meta.push((class_id, domain_id, role));
    }
    if hp != header_end {
        return Err(DataError::Format("header length mismatch".into()));
    }

    let tensors = tensor::decode_tensors_bytes(&body[header_end..])
        .map_err(|e| DataError::Format(e.to_string()))?;
    let images = tensors
        .into_iter()
        .find(|(name, _)| name == "images")
        .map(|(_, t)| t)
        .ok_or_else(|| DataError::Format("missing images tensor".into()))?;
    if n_samples > 0 && (images.rank() != 4 || images.shape()[0] != n_samples) {
        return Err(DataError::Format(format!(
            "images tensor shape {:?} does not match {n_samples} samples",
            images.shape()
        )));
    }

    let per = images.numel().checked_div(n_samples).unwrap_or(0);
    let sample_shape: Vec<usize> = if n_samples > 0 {
        images.shape()[1..].to_vec()
    } else {
        Vec::new()
    };
    let samples = meta
        .into_iter()
        .enumerate()
        .map(|(i, (class_id, domain_id, role))| {
            let data = images.data()[i * per..(i + 1) * per].to_vec();
            Ok(SampleRecord {
                image: Tensor::new(sample_shape.clone(), data)?,
                class_id,
                domain_id,
                role,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest {
        samples,
        class_names,
        domain_names,
        split_map,
    };
    manifest.validate()?;
    Ok(manifest)
}

fn write_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_u8(bytes: &[u8], pos: &mut usize) -> Result<u8> {
    if *pos + 1 > bytes.len() {
        return Err(DataError::Format("unexpected end of header".into()));
    }
    let v = bytes[*pos];
    *pos += 1;
    Ok(v)
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    if *pos + 4 > bytes.len() {
        return Err(DataError::Format("unexpected end of header".into()));
    }
    let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
    *pos += 4;
    Ok(v)
}

fn read_u64(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    if *pos + 8 > bytes.len() {
        return Err(DataError::Format("unexpected end of header".into()));
    }
    let v = u64::from_le_bytes(bytes[*pos..*pos + 8].try_into().unwrap());
    *pos += 8;
    Ok(v)
}

fn read_string(bytes: &[u8], pos: &mut usize) -> Result<String> {
    let len = read_u32(bytes, pos)? as usize;
    if *pos + len > bytes.len() {
        return Err(DataError::Format("unexpected end of header".into()));
    }
    let s = String::from_utf8(bytes[*pos..*pos + len].to_vec())
        .map_err(|_| DataError::Format("name is not UTF-8".into()))?;
    *pos += len;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, GeneratorConfig};

    fn small_manifest() -> DatasetManifest {
        generate_synthetic(&GeneratorConfig {
            n_classes: 4,
            samples_per_class: 3,
            base_classes: 2,
            val_classes: 1,
            novel_classes: 1,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_compares_equal_field_by_field() {
        let m = small_manifest();
        let bytes = encode_dataset(&m).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(m, back);
        // and the re-encoding is byte-identical
        assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let bytes = encode_dataset(&small_manifest()).unwrap();
        let err = decode_dataset(&bytes[..bytes.len() - 21]).unwrap_err();
        assert_eq!(err, DataError::ChecksumFailure);
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let mut bytes = encode_dataset(&small_manifest()).unwrap();
        bytes[0] = b'Z';
        assert!(matches!(
            decode_dataset(&bytes).unwrap_err(),
            DataError::Format(_)
        ));
    }

    #[test]
    fn wrong_version_is_reported_as_mismatch() {
        let mut bytes = encode_dataset(&small_manifest()).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        // checksum still matches the original body, so recompute it
        let body_len = bytes.len() - 8;
        let checksum = crate::rng::fnv64(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&checksum.to_le_bytes());
        assert_eq!(
            decode_dataset(&bytes).unwrap_err(),
            DataError::VersionMismatch {
                found: 7,
                expected: 1
            }
        );
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = encode_dataset(&small_manifest()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        assert_eq!(decode_dataset(&bytes).unwrap_err(), DataError::ChecksumFailure);
    }
}
