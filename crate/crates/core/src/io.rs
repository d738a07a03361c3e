//! On-disk formats.
//!
//! Dictionaries, images and volumes share one binary container:
//!
//! ```text
//! magic    8 bytes  b"RPSFTNSR"
//! hlen     u64 LE   length of the JSON header in bytes
//! header   hlen bytes of UTF-8 JSON (format, version, endianness, shape, ...)
//! payload  64-bit IEEE-754 little-endian values, row-major
//! ```
//!
//! Volumes and dictionaries are stored in `(k, row, col)` order. JSON floats
//! are written in shortest round-trip form, so headers survive bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forward::{Image, ImageKind, ImageMeta, Volume};
use crate::optics::{OpticalConfig, PsfDictionary};

pub const MAGIC: &[u8; 8] = b"RPSFTNSR";
pub const FORMAT_VERSION: u32 = 1;
const LITTLE: &str = "little";

#[derive(Debug, Serialize, Deserialize)]
struct DictionaryHeader {
    format: String,
    version: u32,
    endianness: String,
    shape: [usize; 3],
    order: String,
    config: OpticalConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageHeader {
    format: String,
    version: u32,
    endianness: String,
    rows: usize,
    cols: usize,
    kind: ImageKind,
    #[serde(flatten)]
    meta: ImageMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    format: String,
    version: u32,
    endianness: String,
    shape: [usize; 3],
    order: String,
}

fn encode<H: Serialize>(header: &H, data: impl Iterator<Item = f64>, len: usize) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("headers always serialize");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode<H: DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<(H, Vec<f64>)> {
    let bad = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing RPSFTNSR magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: H = serde_json::from_slice(body).map_err(|e| bad(&format!("bad header: {e}")))?;
    let payload = &bytes[16 + hlen..];
    if payload.len() % 8 != 0 {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, data))
}

fn check_common(path: &Path, format: &str, want: &str, version: u32, endianness: &str) -> Result<()> {
    let detail = if format != want {
        format!("expected a {want} file, found {format}")
    } else if version != FORMAT_VERSION {
        format!("unsupported format version {version}")
    } else if endianness != LITTLE {
        format!("unsupported endianness {endianness}")
    } else {
        return Ok(());
    };
    Err(Error::Format {
        path: path.to_path_buf(),
        detail,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn dictionary_bytes(dict: &PsfDictionary) -> Vec<u8> {
    let s = dict.slices();
    let (d, h, w) = s.dim();
    let header = DictionaryHeader {
        format: "rpsf-dictionary".into(),
        version: FORMAT_VERSION,
        endianness: LITTLE.into(),
        shape: [d, h, w],
        order: "k,row,col".into(),
        config: dict.config().clone(),
    };
    encode(&header, s.iter().copied(), s.len())
}

pub fn write_dictionary(path: impl AsRef<Path>, dict: &PsfDictionary) -> Result<()> {
    write_bytes(path.as_ref(), &dictionary_bytes(dict))
}

pub fn read_dictionary(path: impl AsRef<Path>) -> Result<PsfDictionary> {
    let path = path.as_ref();
    let (header, data) = decode::<DictionaryHeader>(path, &read_bytes(path)?)?;
    check_common(path, &header.format, "rpsf-dictionary", header.version, &header.endianness)?;
    let [d, h, w] = header.shape;
    let slices = Array3::from_shape_vec((d, h, w), data).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: format!("payload does not match shape: {e}"),
    })?;
    PsfDictionary::from_parts(header.config, slices)
}

pub fn image_bytes(img: &Image) -> Vec<u8> {
    let (rows, cols) = img.dim();
    let header = ImageHeader {
        format: "rpsf-image".into(),
        version: FORMAT_VERSION,
        endianness: LITTLE.into(),
        rows,
        cols,
        kind: img.kind,
        meta: img.meta.clone(),
    };
    encode(&header, img.data.iter().copied(), img.data.len())
}

pub fn write_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    write_bytes(path.as_ref(), &image_bytes(img))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let (header, data) = decode::<ImageHeader>(path, &read_bytes(path)?)?;
    check_common(path, &header.format, "rpsf-image", header.version, &header.endianness)?;
    let data = Array2::from_shape_vec((header.rows, header.cols), data).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: format!("payload does not match shape: {e}"),
    })?;
    Ok(Image {
        data,
        kind: header.kind,
        meta: header.meta,
    })
}

pub fn volume_bytes(vol: &Volume) -> Vec<u8> {
    let v = vol.data();
    let (d, h, w) = v.dim();
    let header = VolumeHeader {
        format: "rpsf-volume".into(),
        version: FORMAT_VERSION,
        endianness: LITTLE.into(),
        shape: [d, h, w],
        order: "k,row,col".into(),
    };
    encode(&header, v.iter().copied(), v.len())
}

pub fn write_volume(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    write_bytes(path.as_ref(), &volume_bytes(vol))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let (header, data) = decode::<VolumeHeader>(path, &read_bytes(path)?)?;
    check_common(path, &header.format, "rpsf-volume", header.version, &header.endianness)?;
    let [d, h, w] = header.shape;
    let arr = Array3::from_shape_vec((d, h, w), data).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: format!("payload does not match shape: {e}"),
    })?;
    Volume::new(arr)
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Format {
        path: path.as_ref().to_path_buf(),
        detail: e.to_string(),
    })?;
    bytes.push(b'\n');
    write_bytes(path.as_ref(), &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path.as_ref())?))
}

/// 8-bit grayscale PNG, scaled so the maximum maps to 255. For viewing only.
pub fn export_png(path: impl AsRef<Path>, data: ArrayView2<'_, f64>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = data.dim();
    let peak = data.iter().copied().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = data[[y as usize, x as usize]].max(0.0) * scale;
        image::Luma([v.round().min(255.0) as u8])
    });
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buf.save(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}
