//! Container encoding and decoding.

use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use super::{DType, Metadata, TensorData, TensorMap, TensorMeta, TensorStoreError};

const METADATA_KEY: &str = "__metadata__";

/// Header entry in the conventional field order used by third-party writers.
#[derive(Serialize)]
struct HeaderEntry<'a> {
    dtype: &'static str,
    shape: &'a [usize],
    data_offsets: [usize; 2],
}

/// Serialize a map to canonical container bytes.
///
/// Canonical means: tensors packed in ascending name order, header entries in
/// the same order (metadata first), compact JSON, fixed per-entry field
/// order. Equal maps always produce byte-identical output.
pub fn write_container_bytes(map: &TensorMap) -> Vec<u8> {
    let mut parts: Vec<String> = Vec::with_capacity(map.len() + 1);
    if let Some(md) = map.metadata() {
        parts.push(format!(
            "\"{METADATA_KEY}\":{}",
            serde_json::to_string(md).expect("string map serialization cannot fail")
        ));
    }
    for meta in map.metas() {
        let entry = HeaderEntry {
            dtype: meta.dtype.as_str(),
            shape: &meta.shape,
            data_offsets: [meta.data_offsets.0, meta.data_offsets.1],
        };
        parts.push(format!(
            "{}:{}",
            serde_json::to_string(&meta.name).expect("name serialization cannot fail"),
            serde_json::to_string(&entry).expect("entry serialization cannot fail")
        ));
    }
    let header_bytes = format!("{{{}}}", parts.join(",")).into_bytes();

    let mut out = Vec::with_capacity(8 + header_bytes.len() + map.data_len());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, tensor) in map.iter() {
        out.extend_from_slice(tensor.data());
    }
    out
}

/// Write a map to a file in canonical form.
pub fn write_container(path: impl AsRef<Path>, map: &TensorMap) -> Result<(), TensorStoreError> {
    std::fs::write(path, write_container_bytes(map))?;
    Ok(())
}

/// Read a container from a file.
pub fn read_container(path: impl AsRef<Path>) -> Result<TensorMap, TensorStoreError> {
    let bytes = std::fs::read(path)?;
    read_container_bytes(&bytes)
}

/// Decode container bytes into a [`TensorMap`].
///
/// Accepts any structurally valid file (tensors in arbitrary data order,
/// trailing whitespace padding inside the header) and verifies:
/// offsets of distinct tensors never overlap, the non-empty ranges tile the
/// data region contiguously from zero, and each range length matches
/// `dtype` × `shape`.
pub fn read_container_bytes(bytes: &[u8]) -> Result<TensorMap, TensorStoreError> {
    if bytes.len() < 8 {
        return Err(TensorStoreError::MalformedHeader(format!(
            "file holds {} bytes, 8 needed for the header length prefix",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[0..8].try_into().expect("checked length")) as usize;
    let header_end = 8usize.checked_add(header_len).ok_or_else(|| {
        TensorStoreError::MalformedHeader("header length overflows".to_string())
    })?;
    if bytes.len() < header_end {
        return Err(TensorStoreError::MalformedHeader(format!(
            "header length {} exceeds file size {}",
            header_len,
            bytes.len()
        )));
    }

    // Some writers pad the header with trailing whitespace for alignment.
    let header_slice = trim_ascii_whitespace_end(&bytes[8..header_end]);
    let value: Value = serde_json::from_slice(header_slice)
        .map_err(|e| TensorStoreError::MalformedHeader(format!("invalid JSON: {e}")))?;
    let Value::Object(entries) = value else {
        return Err(TensorStoreError::MalformedHeader(
            "header is not a JSON object".to_string(),
        ));
    };

    let mut metadata: Option<Metadata> = None;
    let mut metas: Vec<TensorMeta> = Vec::with_capacity(entries.len());
    for (key, entry) in entries {
        if key == METADATA_KEY {
            metadata = Some(parse_metadata(&entry)?);
        } else {
            metas.push(parse_meta(key, &entry)?);
        }
    }

    validate_offsets(&metas, bytes.len(), header_end)?;

    let data = &bytes[header_end..];
    let mut map = TensorMap::new();
    map.set_metadata(metadata);
    for meta in metas {
        let (begin, end) = meta.data_offsets;
        let tensor = TensorData::new(meta.dtype, meta.shape, data[begin..end].to_vec())
            .map_err(|e| annotate_length(e, &meta.name))?;
        map.insert(meta.name, tensor)?;
    }
    Ok(map)
}

fn trim_ascii_whitespace_end(mut bytes: &[u8]) -> &[u8] {
    while let [rest @ .., last] = bytes {
        if matches!(last, b' ' | b'\t' | b'\n' | b'\r') {
            bytes = rest;
        } else {
            break;
        }
    }
    bytes
}

fn parse_metadata(entry: &Value) -> Result<Metadata, TensorStoreError> {
    let obj = entry.as_object().ok_or_else(|| {
        TensorStoreError::MalformedHeader(format!("{METADATA_KEY} is not a JSON object"))
    })?;
    obj.iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k.clone(), s.clone())),
            _ => Err(TensorStoreError::MalformedHeader(format!(
                "{METADATA_KEY} entry {k:?} is not a string"
            ))),
        })
        .collect()
}

fn parse_meta(name: String, entry: &Value) -> Result<TensorMeta, TensorStoreError> {
    let bad = |what: &str| {
        TensorStoreError::MalformedHeader(format!("tensor {name:?}: {what}"))
    };
    let obj = entry
        .as_object()
        .ok_or_else(|| bad("entry is not a JSON object"))?;

    let dtype = DType::parse(
        obj.get("dtype")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("missing or non-string dtype"))?,
    )?;

    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing or non-array shape"))?
        .iter()
        .map(|v| {
            v.as_u64()
                .map(|n| n as usize)
                .ok_or_else(|| bad("shape entries must be non-negative integers"))
        })
        .collect::<Result<Vec<usize>, _>>()?;

    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing or non-array data_offsets"))?;
    if offsets.len() != 2 {
        return Err(bad("data_offsets must hold exactly two integers"));
    }
    let begin = offsets[0]
        .as_u64()
        .ok_or_else(|| bad("data_offsets must be non-negative integers"))? as usize;
    let end = offsets[1]
        .as_u64()
        .ok_or_else(|| bad("data_offsets must be non-negative integers"))? as usize;
    if begin > end {
        return Err(bad("data_offsets begin exceeds end"));
    }

    let meta = TensorMeta {
        name,
        dtype,
        shape,
        data_offsets: (begin, end),
    };
    if end - begin != meta.byte_len() {
        return Err(TensorStoreError::MalformedHeader(format!(
            "tensor {:?}: offsets span {} bytes but {} × {} elements require {}",
            meta.name,
            end - begin,
            meta.dtype,
            meta.element_count(),
            meta.byte_len()
        )));
    }
    Ok(meta)
}

fn validate_offsets(
    metas: &[TensorMeta],
    file_len: usize,
    header_end: usize,
) -> Result<(), TensorStoreError> {
    let data_len = file_len - header_end;
    let max_end = metas.iter().map(|m| m.data_offsets.1).max().unwrap_or(0);
    if max_end > data_len {
        return Err(TensorStoreError::TruncatedData {
            needed: header_end + max_end,
            actual: file_len,
        });
    }

    // Non-empty ranges must tile [0, data_len) exactly; zero-size tensors may
    // sit anywhere inside the region.
    let mut spans: Vec<&TensorMeta> = metas
        .iter()
        .filter(|m| m.data_offsets.0 != m.data_offsets.1)
        .collect();
    spans.sort_by_key(|m| m.data_offsets);
    let mut cursor = 0usize;
    let mut prev: Option<&TensorMeta> = None;
    for meta in spans {
        let (begin, end) = meta.data_offsets;
        if begin < cursor {
            return Err(TensorStoreError::OverlappingOffsets {
                a: prev.map(|p| p.name.clone()).unwrap_or_default(),
                b: meta.name.clone(),
            });
        }
        if begin > cursor {
            return Err(TensorStoreError::MalformedHeader(format!(
                "gap in data region before tensor {:?} (bytes {cursor}..{begin} unreferenced)",
                meta.name
            )));
        }
        cursor = end;
        prev = Some(meta);
    }
    if cursor != data_len {
        return Err(TensorStoreError::MalformedHeader(format!(
            "data region holds {data_len} bytes but tensors cover only {cursor}"
        )));
    }
    Ok(())
}

fn annotate_length(err: TensorStoreError, name: &str) -> TensorStoreError {
    match err {
        TensorStoreError::LengthMismatch {
            dtype,
            count,
            expected,
            actual,
            ..
        } => TensorStoreError::LengthMismatch {
            name: name.to_string(),
            dtype,
            count,
            expected,
            actual,
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_tensor_map() -> TensorMap {
        let mut map = TensorMap::new();
        map.insert("w", TensorData::from_f32(vec![2], &[1.0, 2.0]).unwrap())
            .unwrap();
        map
    }

    /// Assemble a file by hand: header length prefix + JSON + raw data.
    fn assemble(header: &str, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn empty_map_round_trips() {
        let map = TensorMap::new();
        let bytes = write_container_bytes(&map);
        assert_eq!(bytes, assemble("{}", &[]));
        assert_eq!(read_container_bytes(&bytes).unwrap(), map);
    }

    #[test]
    fn single_tensor_matches_hand_assembled_bytes() {
        let map = single_tensor_map();
        let expected = assemble(
            r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#,
            &[0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x40],
        );
        assert_eq!(write_container_bytes(&map), expected);

        let back = read_container_bytes(&expected).unwrap();
        assert_eq!(back.get("w").unwrap().to_f32(), vec![1.0, 2.0]);
        assert_eq!(back, map);
    }

    #[test]
    fn writes_are_deterministic_and_order_independent() {
        let mut ab = TensorMap::new();
        ab.insert("a", TensorData::from_f32(vec![1], &[1.0]).unwrap())
            .unwrap();
        ab.insert("b", TensorData::from_f32(vec![1], &[2.0]).unwrap())
            .unwrap();
        let mut ba = TensorMap::new();
        ba.insert("b", TensorData::from_f32(vec![1], &[2.0]).unwrap())
            .unwrap();
        ba.insert("a", TensorData::from_f32(vec![1], &[1.0]).unwrap())
            .unwrap();
        assert_eq!(write_container_bytes(&ab), write_container_bytes(&ba));
        assert_eq!(write_container_bytes(&ab), write_container_bytes(&ab));
    }

    #[test]
    fn metadata_round_trips() {
        let mut map = single_tensor_map();
        let mut md = Metadata::new();
        md.insert("base_id".to_string(), "sha256:abc".to_string());
        md.insert("note".to_string(), "hello, \"world\"".to_string());
        map.set_metadata(Some(md));
        let back = read_container_bytes(&write_container_bytes(&map)).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn header_padding_is_tolerated() {
        let map = single_tensor_map();
        let header = format!(
            r#"{{"w":{{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}}}{}"#,
            "   \n"
        );
        let bytes = assemble(
            &header,
            &[0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x40],
        );
        assert_eq!(read_container_bytes(&bytes).unwrap(), map);
    }

    #[test]
    fn non_canonical_data_order_is_tolerated() {
        // "a" stored after "b" in the data region; reader must still decode
        // both and the canonical rewrite must come out in name order.
        let header = concat!(
            r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]},"#,
            r#""b":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#
        );
        let mut data = 2.0f32.to_le_bytes().to_vec();
        data.extend_from_slice(&1.0f32.to_le_bytes());
        let map = read_container_bytes(&assemble(header, &data)).unwrap();
        assert_eq!(map.get("a").unwrap().to_f32(), vec![1.0]);
        assert_eq!(map.get("b").unwrap().to_f32(), vec![2.0]);

        let canonical = write_container_bytes(&map);
        let reread = read_container_bytes(&canonical).unwrap();
        assert_eq!(reread, map);
        let metas = reread.metas();
        assert_eq!(metas[0].name, "a");
        assert_eq!(metas[0].data_offsets, (0, 4));
    }

    #[test]
    fn zero_size_tensors_are_supported() {
        let mut map = single_tensor_map();
        map.insert("empty", TensorData::from_f32(vec![0, 3], &[]).unwrap())
            .unwrap();
        let back = read_container_bytes(&write_container_bytes(&map)).unwrap();
        assert_eq!(back, map);
        assert_eq!(back.get("empty").unwrap().element_count(), 0);
    }

    #[test]
    fn scalar_shape_is_one_element() {
        let mut map = TensorMap::new();
        map.insert("s", TensorData::from_f32(vec![], &[7.0]).unwrap())
            .unwrap();
        let back = read_container_bytes(&write_container_bytes(&map)).unwrap();
        assert_eq!(back.get("s").unwrap().to_f32(), vec![7.0]);
    }

    #[test]
    fn rejects_file_shorter_than_prefix() {
        let err = read_container_bytes(&[1, 2, 3]).unwrap_err();
        assert!(matches!(err, TensorStoreError::MalformedHeader(_)), "{err}");
    }

    #[test]
    fn rejects_header_length_past_eof() {
        let mut bytes = 1_000u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        let err = read_container_bytes(&bytes).unwrap_err();
        assert!(matches!(err, TensorStoreError::MalformedHeader(_)), "{err}");
    }

    #[test]
    fn rejects_invalid_json() {
        let err = read_container_bytes(&assemble("{not json", &[])).unwrap_err();
        assert!(matches!(err, TensorStoreError::MalformedHeader(_)), "{err}");
    }

    #[test]
    fn rejects_unknown_dtype() {
        let header = r#"{"w":{"dtype":"F64","shape":[1],"data_offsets":[0,8]}}"#;
        let err = read_container_bytes(&assemble(header, &[0; 8])).unwrap_err();
        assert!(
            matches!(&err, TensorStoreError::MalformedHeader(m) if m.contains("F64")),
            "{err}"
        );
    }

    #[test]
    fn rejects_offset_shape_disagreement() {
        let header = r#"{"w":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#;
        let err = read_container_bytes(&assemble(header, &[0; 8])).unwrap_err();
        assert!(matches!(err, TensorStoreError::MalformedHeader(_)), "{err}");
    }

    #[test]
    fn rejects_overlapping_offsets() {
        let header = concat!(
            r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"#,
            r#""b":{"dtype":"F32","shape":[1],"data_offsets":[2,6]}}"#
        );
        let err = read_container_bytes(&assemble(header, &[0; 6])).unwrap_err();
        assert!(
            matches!(err, TensorStoreError::OverlappingOffsets { .. }),
            "{err}"
        );
    }

    #[test]
    fn rejects_gap_in_data_region() {
        let header = concat!(
            r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"#,
            r#""b":{"dtype":"F32","shape":[1],"data_offsets":[8,12]}}"#
        );
        let err = read_container_bytes(&assemble(header, &[0; 12])).unwrap_err();
        assert!(matches!(err, TensorStoreError::MalformedHeader(_)), "{err}");
    }

    #[test]
    fn rejects_truncated_data_region() {
        let header = r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#;
        let err = read_container_bytes(&assemble(header, &[0; 4])).unwrap_err();
        assert!(
            matches!(
                err,
                TensorStoreError::TruncatedData {
                    needed: _,
                    actual: _
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn rejects_trailing_unreferenced_bytes() {
        let header = r#"{"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#;
        let err = read_container_bytes(&assemble(header, &[0; 9])).unwrap_err();
        assert!(matches!(err, TensorStoreError::MalformedHeader(_)), "{err}");
    }

    #[test]
    fn duplicate_insert_is_rejected() {
        let mut map = single_tensor_map();
        let err = map
            .insert("w", TensorData::from_f32(vec![1], &[0.0]).unwrap())
            .unwrap_err();
        assert!(matches!(err, TensorStoreError::DuplicateName(_)), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.st");
        let map = single_tensor_map();
        write_container(&path, &map).unwrap();
        assert_eq!(read_container(&path).unwrap(), map);
    }
}
