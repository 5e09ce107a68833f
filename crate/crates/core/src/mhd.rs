//! MetaImage (`.mhd` header + `.raw` payload) reading and writing.
//!
//! In-memory volumes are `(H, W, T)` with depth fastest. On disk the usual
//! MetaImage convention applies: x = width varies fastest, then y = height,
//! then z = depth (slice index). `DimSize` and `ElementSpacing` are written
//! in that x y z order.

use crate::error::{Error, Result};
use crate::volume::Spacing;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    /// `MET_FLOAT`
    F32(Vec<f32>),
    /// `MET_UCHAR`
    U8(Vec<u8>),
}

impl VolumeData {
    pub fn len(&self) -> usize {
        match self {
            VolumeData::F32(v) => v.len(),
            VolumeData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn element_type(&self) -> &'static str {
        match self {
            VolumeData::F32(_) => "MET_FLOAT",
            VolumeData::U8(_) => "MET_UCHAR",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhdVolume {
    /// `(H, W, T)`
    pub dims: [usize; 3],
    pub spacing: Spacing,
    pub data: VolumeData,
}

/// `(h, w, t)` index into the on-disk (x=w, y=h, z=t) ordering.
fn disk_index(dims: [usize; 3], h: usize, w: usize, t: usize) -> usize {
    (t * dims[0] + h) * dims[1] + w
}

fn to_disk<E: Copy>(src: &[E], dims: [usize; 3]) -> Vec<E> {
    let mut out = src.to_vec();
    let mut i = 0;
    for h in 0..dims[0] {
        for w in 0..dims[1] {
            for t in 0..dims[2] {
                out[disk_index(dims, h, w, t)] = src[i];
                i += 1;
            }
        }
    }
    out
}

fn from_disk<E: Copy>(src: &[E], dims: [usize; 3]) -> Vec<E> {
    let mut out = src.to_vec();
    let mut i = 0;
    for h in 0..dims[0] {
        for w in 0..dims[1] {
            for t in 0..dims[2] {
                out[i] = src[disk_index(dims, h, w, t)];
                i += 1;
            }
        }
    }
    out
}

/// Writes `path` (the `.mhd` header) and a sibling `.raw` payload.
pub fn write_mhd(path: &Path, data: &VolumeData, dims: [usize; 3], spacing: Spacing) -> Result<()> {
    let expected: usize = dims.iter().product();
    if data.len() != expected {
        return Err(Error::mismatch("write_mhd", expected, data.len()));
    }
    let raw_path = path.with_extension("raw");
    let raw_name = raw_path.file_name().and_then(|n| n.to_str()).ok_or_else(|| Error::InvalidArgument {
        arg: "path",
        reason: format!("{} has no usable file name", path.display()),
    })?;
    let bytes: Vec<u8> = match data {
        VolumeData::F32(v) => to_disk(v, dims).iter().flat_map(|x| x.to_le_bytes()).collect(),
        VolumeData::U8(v) => to_disk(v, dims),
    };
    let [sh, sw, st] = spacing.0;
    let header = format!(
        "ObjectType = Image\n\
         NDims = 3\n\
         BinaryData = True\n\
         BinaryDataByteOrderMSB = False\n\
         CompressedData = False\n\
         DimSize = {} {} {}\n\
         ElementSpacing = {sw} {sh} {st}\n\
         ElementType = {}\n\
         ElementDataFile = {raw_name}\n",
        dims[1],
        dims[0],
        dims[2],
        data.element_type(),
    );
    std::fs::write(&raw_path, bytes).map_err(Error::io(&raw_path))?;
    std::fs::write(path, header).map_err(Error::io(path))?;
    Ok(())
}

fn parse_header(path: &Path, text: &str) -> Result<BTreeMap<String, String>> {
    let mut fields = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("line {} has no `=`: {line:?}", n + 1),
        })?;
        fields.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(fields)
}

fn numbers<N: std::str::FromStr>(path: &Path, key: &str, value: &str) -> Result<[N; 3]> {
    let parsed: Vec<N> =
        value.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| {
            Error::MalformedHeader { path: path.to_path_buf(), reason: format!("{key} = {value:?} is not numeric") }
        })?;
    parsed.try_into().map_err(|_| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: format!("{key} needs exactly 3 values, got {value:?}"),
    })
}

pub fn read_mhd(path: &Path) -> Result<MhdVolume> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let fields = parse_header(path, &text)?;
    let get = |key: &str| {
        fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::MalformedHeader { path: path.to_path_buf(), reason: format!("missing {key}") })
    };

    if get("NDims")? != "3" {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("NDims must be 3, got {}", get("NDims")?),
        });
    }
    if fields.get("BinaryDataByteOrderMSB").is_some_and(|v| v.eq_ignore_ascii_case("true")) {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "big-endian payloads are not supported".into(),
        });
    }
    if fields.get("CompressedData").is_some_and(|v| v.eq_ignore_ascii_case("true")) {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "compressed payloads are not supported".into(),
        });
    }
    let [x, y, z]: [usize; 3] = numbers(path, "DimSize", get("DimSize")?)?;
    if x == 0 || y == 0 || z == 0 {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "DimSize entries must be positive".into(),
        });
    }
    let [sx, sy, sz] = match fields.get("ElementSpacing") {
        Some(v) => numbers::<f64>(path, "ElementSpacing", v)?,
        None => [1.0; 3],
    };
    let element_size = match get("ElementType")? {
        "MET_FLOAT" => 4,
        "MET_UCHAR" => 1,
        other => return Err(Error::UnsupportedElementType(other.to_string())),
    };
    let file = get("ElementDataFile")?;
    if file.eq_ignore_ascii_case("LOCAL") {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "inline (LOCAL) payloads are not supported".into(),
        });
    }
    let raw_path: PathBuf = path.parent().unwrap_or(Path::new(".")).join(file);
    let bytes = std::fs::read(&raw_path).map_err(Error::io(&raw_path))?;
    let dims = [y, x, z];
    let count = x * y * z;
    let expected = (count * element_size) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::PayloadSize { path: raw_path, expected, actual: bytes.len() as u64 });
    }
    let data = if element_size == 4 {
        let disk: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        VolumeData::F32(from_disk(&disk, dims))
    } else {
        VolumeData::U8(from_disk(&bytes, dims))
    };
    Ok(MhdVolume { dims, spacing: Spacing([sy, sx, sz]), data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let dims = [3, 5, 2];
        let values: Vec<f32> = (0..30).map(|i| (i as f32 * 0.37).sin() * 1e3 + f32::EPSILON).collect();
        let path = dir.path().join("v.mhd");
        write_mhd(&path, &VolumeData::F32(values.clone()), dims, Spacing([0.5, 2.0, 3.0])).unwrap();
        let back = read_mhd(&path).unwrap();
        assert_eq!(back.dims, dims);
        assert_eq!(back.spacing, Spacing([0.5, 2.0, 3.0]));
        let VolumeData::F32(got) = back.data else { panic!("wrong type") };
        assert!(got.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn header_orders_axes_x_y_z() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.mhd");
        let mut data = vec![0u8; 2 * 3 * 4];
        // (h=1, w=2, t=3) in memory order
        data[(3 + 2) * 4 + 3] = 7;
        write_mhd(&path, &VolumeData::U8(data), [2, 3, 4], Spacing::default()).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.contains("DimSize = 3 2 4"));
        let raw = std::fs::read(dir.path().join("l.raw")).unwrap();
        assert_eq!(raw[(3 * 2 + 1) * 3 + 2], 7);
    }

    #[test]
    fn parses_integer_spacing() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.raw"), [0u8; 8]).unwrap();
        let path = dir.path().join("a.mhd");
        std::fs::write(
            &path,
            "NDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 1 1\nElementType = MET_UCHAR\nElementDataFile = a.raw\n",
        )
        .unwrap();
        assert_eq!(read_mhd(&path).unwrap().spacing, Spacing([1.0, 1.0, 1.0]));
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.mhd");
        write_mhd(&path, &VolumeData::F32(vec![1.0; 8]), [2, 2, 2], Spacing::default()).unwrap();

        std::fs::write(dir.path().join("a.raw"), [0u8; 20]).unwrap();
        match read_mhd(&path) {
            Err(Error::PayloadSize { expected: 32, actual: 20, .. }) => {}
            other => panic!("{other:?}"),
        }

        let header = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, header.replace("MET_FLOAT", "MET_DOUBLE")).unwrap();
        assert!(matches!(read_mhd(&path), Err(Error::UnsupportedElementType(t)) if t == "MET_DOUBLE"));

        std::fs::write(&path, header.replace("NDims = 3", "NDims = 2")).unwrap();
        assert!(matches!(read_mhd(&path), Err(Error::MalformedHeader { .. })));
        std::fs::write(&path, header.replace("DimSize = 2 2 2", "DimSize = 2 2")).unwrap();
        assert!(matches!(read_mhd(&path), Err(Error::MalformedHeader { .. })));
    }
}
