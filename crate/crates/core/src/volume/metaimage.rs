//! MetaImage (`.mhd` + detached payload, or combined `.mha`) reader and writer.
//!
//! Only 3D scalar images are supported. Payload element types `MET_SHORT`,
//! `MET_UCHAR` and `MET_FLOAT` are read; volumes are always written as
//! little-endian `MET_FLOAT`, masks as `MET_UCHAR`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;

use super::{voxel_count, Dims, LabelMask, Unit, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ElementType {
    Short,
    UChar,
    Float,
}

impl ElementType {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "MET_SHORT" => Ok(ElementType::Short),
            "MET_UCHAR" => Ok(ElementType::UChar),
            "MET_FLOAT" => Ok(ElementType::Float),
            other => Err(Error::Format(format!("unsupported ElementType {other}"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            ElementType::Short => "MET_SHORT",
            ElementType::UChar => "MET_UCHAR",
            ElementType::Float => "MET_FLOAT",
        }
    }

    fn size(self) -> usize {
        match self {
            ElementType::Short => 2,
            ElementType::UChar => 1,
            ElementType::Float => 4,
        }
    }
}

#[derive(Debug)]
struct Header {
    dims: Dims,
    spacing: [f64; 3],
    origin: [f64; 3],
    element_type: ElementType,
    msb: bool,
    data_file: String,
}

// Keys we understand but do not need.
const QUIET_KEYS: &[&str] = &["ObjectType", "BinaryData"];

fn parse_triple<T: std::str::FromStr>(key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::Format(format!(
            "{key} must have 3 components, got {value:?}"
        )));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| Error::Format(format!("cannot parse {key} component {p:?}")))?,
        );
    }
    let mut it = out.into_iter();
    Ok([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()])
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Format(format!("{key} expects True/False, got {value:?}"))),
    }
}

fn parse_header(text: &str) -> Result<Header> {
    let mut ndims = None;
    let mut dims = None;
    let mut spacing = [1.0; 3];
    let mut origin = [0.0; 3];
    let mut element_type = None;
    let mut msb = false;
    let mut data_file = None;

    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Format(format!("malformed header line {line:?}")));
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "NDims" => {
                ndims = Some(
                    value
                        .parse::<usize>()
                        .map_err(|_| Error::Format(format!("bad NDims {value:?}")))?,
                )
            }
            "DimSize" => dims = Some(parse_triple::<usize>(key, value)?),
            "ElementType" => element_type = Some(ElementType::parse(value)?),
            "ElementSpacing" => spacing = parse_triple::<f64>(key, value)?,
            "Offset" => origin = parse_triple::<f64>(key, value)?,
            "ElementByteOrderMSB" | "BinaryDataByteOrderMSB" => msb = parse_bool(key, value)?,
            "ElementDataFile" => data_file = Some(value.to_string()),
            k if QUIET_KEYS.contains(&k) => {}
            other => warn!("ignoring MetaImage header key {other}"),
        }
    }

    match ndims {
        Some(3) => {}
        Some(n) => return Err(Error::Format(format!("NDims = {n}, only 3 is supported"))),
        None => return Err(Error::Format("missing NDims".into())),
    }
    let dims = dims.ok_or_else(|| Error::Format("missing DimSize".into()))?;
    let element_type = element_type.ok_or_else(|| Error::Format("missing ElementType".into()))?;
    let data_file = data_file.ok_or_else(|| Error::Format("missing ElementDataFile".into()))?;
    Ok(Header {
        dims,
        spacing,
        origin,
        element_type,
        msb,
        data_file,
    })
}

/// Reads the header and raw payload bytes of a MetaImage file.
fn read_raw(path: &Path) -> Result<(Header, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;

    // Combined files carry the payload right after the ElementDataFile line,
    // which MetaIO requires to be the last header line.
    let marker = b"ElementDataFile";
    let header_end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .and_then(|pos| {
            bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .map(|nl| pos + nl + 1)
        });

    let header_bytes = match header_end {
        Some(end) => &bytes[..end],
        None => &bytes[..],
    };
    let text = std::str::from_utf8(header_bytes)
        .map_err(|_| Error::Format("header is not valid UTF-8".into()))?;
    let header = parse_header(text)?;

    let payload = if header.data_file == "LOCAL" {
        bytes[header_end.unwrap_or(bytes.len())..].to_vec()
    } else {
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let raw_path = base.join(&header.data_file);
        fs::read(&raw_path).map_err(|e| Error::io(raw_path, e))?
    };

    let expected = voxel_count(header.dims) * header.element_type.size();
    if payload.len() != expected {
        return Err(Error::CorruptPayload {
            expected,
            found: payload.len(),
        });
    }
    Ok((header, payload))
}

fn decode(header: &Header, payload: &[u8]) -> Vec<f32> {
    let et = header.element_type;
    payload
        .chunks_exact(et.size())
        .map(|c| match et {
            ElementType::UChar => c[0] as f32,
            ElementType::Short => {
                let b = [c[0], c[1]];
                (if header.msb {
                    i16::from_be_bytes(b)
                } else {
                    i16::from_le_bytes(b)
                }) as f32
            }
            ElementType::Float => {
                let b = [c[0], c[1], c[2], c[3]];
                if header.msb {
                    f32::from_be_bytes(b)
                } else {
                    f32::from_le_bytes(b)
                }
            }
        })
        .collect()
}

/// Loads a MetaImage volume. The result is tagged as HU regardless of what
/// the file holds; use [`Volume::with_unit`] to re-tag pipeline outputs.
pub fn load_mhd(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let (header, payload) = read_raw(path)?;
    let voxels = decode(&header, &payload);
    Volume::new(header.dims, header.spacing, header.origin, voxels, Unit::Hu)
}

/// Loads a label mask stored in any supported element type. Values must be 0 or 1.
pub fn load_mask_mhd(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    let (header, payload) = read_raw(path)?;
    let labels = decode(&header, &payload)
        .into_iter()
        .map(|v| match v {
            v if v == 0.0 => Ok(0u8),
            v if v == 1.0 => Ok(1u8),
            v => Err(Error::Label(format!("mask value {v} not in {{0, 1}}"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelMask::new(header.dims, labels)
}

fn header_text(dims: Dims, spacing: [f64; 3], origin: [f64; 3], et: ElementType, data_file: &str) -> String {
    format!(
        "ObjectType = Image\n\
         NDims = 3\n\
         DimSize = {} {} {}\n\
         ElementType = {}\n\
         ElementSpacing = {} {} {}\n\
         Offset = {} {} {}\n\
         ElementByteOrderMSB = False\n\
         ElementDataFile = {}\n",
        dims[0],
        dims[1],
        dims[2],
        et.name(),
        spacing[0],
        spacing[1],
        spacing[2],
        origin[0],
        origin[1],
        origin[2],
        data_file
    )
}

fn is_combined(path: &Path) -> bool {
    path.extension()
        .map(|e| e.eq_ignore_ascii_case("mha"))
        .unwrap_or(false)
}

fn write_image(path: &Path, header_dims: Dims, spacing: [f64; 3], origin: [f64; 3], et: ElementType, payload: &[u8]) -> Result<()> {
    if is_combined(path) {
        let mut out = header_text(header_dims, spacing, origin, et, "LOCAL").into_bytes();
        out.extend_from_slice(payload);
        fs::write(path, out).map_err(|e| Error::io(path, e))
    } else {
        let raw_path: PathBuf = path.with_extension("raw");
        let raw_name = raw_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Parameter(format!("cannot derive payload name from {}", path.display())))?
            .to_string();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(header_text(header_dims, spacing, origin, et, &raw_name).as_bytes())
            .map_err(|e| Error::io(path, e))?;
        fs::write(&raw_path, payload).map_err(|e| Error::io(raw_path.clone(), e))
    }
}

/// Writes `vol` as little-endian `MET_FLOAT`. A `.mha` path produces a
/// combined file, anything else a header plus a sibling `.raw` payload.
pub fn save_mhd(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    vol.validate()?;
    let payload: Vec<u8> = vol.voxels().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_image(path.as_ref(), vol.dims(), vol.spacing(), vol.origin(), ElementType::Float, &payload)
}

/// Writes a mask as `MET_UCHAR` with the given geometry.
pub fn save_mask_mhd(mask: &LabelMask, spacing: [f64; 3], origin: [f64; 3], path: impl AsRef<Path>) -> Result<()> {
    write_image(path.as_ref(), mask.dims(), spacing, origin, ElementType::UChar, mask.labels())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_header(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn reads_met_short_with_default_spacing() {
        let dir = tempfile::tempdir().unwrap();
        let payload: Vec<u8> = (0..32i16).flat_map(|v| (v * 10 - 100).to_le_bytes()).collect();
        assert_eq!(payload.len(), 64);
        fs::write(dir.path().join("s.raw"), &payload).unwrap();
        let p = write_header(
            dir.path(),
            "s.mhd",
            "NDims = 3\nDimSize = 4 4 2\nElementType = MET_SHORT\nElementDataFile = s.raw\n",
        );
        let v = load_mhd(&p).unwrap();
        assert_eq!(v.dims(), [4, 4, 2]);
        assert_eq!(v.len(), 32);
        assert_eq!(v.spacing(), [1.0, 1.0, 1.0]);
        assert_eq!(v.unit(), Unit::Hu);
        assert_eq!(v.get(1, 0, 0), -90.0);
        assert_eq!(v.get(3, 3, 1), 210.0);
    }

    #[test]
    fn big_endian_short_payload() {
        let dir = tempfile::tempdir().unwrap();
        let payload: Vec<u8> = (0..8i16).flat_map(|v| (-v).to_be_bytes()).collect();
        fs::write(dir.path().join("b.raw"), &payload).unwrap();
        let p = write_header(
            dir.path(),
            "b.mhd",
            "NDims = 3\nDimSize = 2 2 2\nElementType = MET_SHORT\nElementByteOrderMSB = True\nElementDataFile = b.raw\n",
        );
        let v = load_mhd(&p).unwrap();
        assert_eq!(v.voxels(), &[0.0, -1.0, -2.0, -3.0, -4.0, -5.0, -6.0, -7.0]);
    }

    #[test]
    fn missing_data_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_header(dir.path(), "m.mhd", "NDims = 3\nDimSize = 2 2 2\nElementType = MET_FLOAT\n");
        assert!(matches!(load_mhd(&p), Err(Error::Format(_))));
    }

    #[test]
    fn unsupported_element_type_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_header(
            dir.path(),
            "d.mhd",
            "NDims = 3\nDimSize = 2 2 2\nElementType = MET_DOUBLE\nElementDataFile = d.raw\n",
        );
        assert!(matches!(load_mhd(&p), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_ndims_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_header(
            dir.path(),
            "n.mhd",
            "NDims = 2\nDimSize = 2 2\nElementType = MET_UCHAR\nElementDataFile = n.raw\n",
        );
        assert!(matches!(load_mhd(&p), Err(Error::Format(_))));
    }

    #[test]
    fn short_payload_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("c.raw"), [0u8; 10]).unwrap();
        let p = write_header(
            dir.path(),
            "c.mhd",
            "NDims = 3\nDimSize = 2 2 2\nElementType = MET_SHORT\nElementDataFile = c.raw\n",
        );
        assert!(matches!(
            load_mhd(&p),
            Err(Error::CorruptPayload { expected: 16, found: 10 })
        ));
    }

    #[test]
    fn combined_mha_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new(
            [3, 2, 2],
            [0.7, 0.7, 2.5],
            [-10.5, 3.0, 0.25],
            (0..12).map(|i| i as f32 * 0.1 - 0.3).collect(),
            Unit::Hu,
        )
        .unwrap();
        let p = dir.path().join("v.mha");
        save_mhd(&v, &p).unwrap();
        assert_eq!(load_mhd(&p).unwrap(), v);
    }

    #[test]
    fn unknown_keys_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("u.raw"), [1u8; 8]).unwrap();
        let p = write_header(
            dir.path(),
            "u.mhd",
            "NDims = 3\nAnatomicalOrientation = RAI\nDimSize = 2 2 2\nElementType = MET_UCHAR\nElementDataFile = u.raw\n",
        );
        assert_eq!(load_mhd(&p).unwrap().voxels(), &[1.0; 8]);
    }

    #[test]
    fn mask_round_trip_and_rejects_non_binary() {
        let dir = tempfile::tempdir().unwrap();
        let m = LabelMask::new([2, 2, 1], vec![0, 1, 1, 0]).unwrap();
        let p = dir.path().join("m.mhd");
        save_mask_mhd(&m, [1.0; 3], [0.0; 3], &p).unwrap();
        assert_eq!(load_mask_mhd(&p).unwrap(), m);

        let v = Volume::new([2, 1, 1], [1.0; 3], [0.0; 3], vec![0.0, 2.0], Unit::Hu).unwrap();
        let q = dir.path().join("notmask.mhd");
        save_mhd(&v, &q).unwrap();
        assert!(matches!(load_mask_mhd(&q), Err(Error::Label(_))));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let v = Volume::filled([2, 2, 2], 0.0, Unit::Hu).unwrap();
        let r = save_mhd(&v, "/nonexistent-dir/for/sure/v.mhd");
        assert!(matches!(r, Err(Error::Io { .. })));
    }
}
