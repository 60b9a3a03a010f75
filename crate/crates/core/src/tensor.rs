//! Planar image-shaped arrays and the `.dnt` binary tensor format.
//!
//! `.dnt` layout (little-endian):
//!
//! ```text
//! b"DNT1" | dtype: u32 (1 = f32) | rank: u32 | dims: rank x u32 | payload | crc32: u32
//! ```
//!
//! The CRC covers every byte before it. Image-shaped maps are stored with dims
//! `[H, W, C]` in row-major order; in memory they are planar (`C x H x W`).

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const DNT_MAGIC: &[u8; 4] = b"DNT1";
pub const DTYPE_F32: u32 = 1;

/// A `C x H x W` planar array of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Map {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f32) -> Self {
        Map {
            channels,
            height,
            width,
            data: vec![v; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "buffer of {} values does not match shape {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Map {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Map {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Map) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn ensure_same_shape(&self, other: &Map, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{what}: shape {}x{}x{} vs {}x{}x{}",
                self.channels, self.height, self.width, other.channels, other.height, other.width
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Map {
        Map {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack maps with equal spatial size along the channel axis.
    pub fn concat(parts: &[&Map]) -> Result<Map> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero maps"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.height != h || p.width != w {
                return Err(Error::invalid("concat: spatial sizes differ"));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Ok(Map {
            channels,
            height: h,
            width: w,
            data,
        })
    }

    /// Copy out channels `[start, start + count)`.
    pub fn channels_range(&self, start: usize, count: usize) -> Map {
        let n = self.pixels();
        Map {
            channels: count,
            height: self.height,
            width: self.width,
            data: self.data[start * n..(start + count) * n].to_vec(),
        }
    }

    /// Interleaved `H x W x C` copy.
    pub fn to_hwc(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.push(self.get(c, y, x));
                }
            }
        }
        out
    }

    pub fn from_hwc(height: usize, width: usize, channels: usize, hwc: &[f32]) -> Result<Map> {
        if hwc.len() != height * width * channels {
            return Err(Error::invalid("interleaved buffer length does not match shape"));
        }
        Ok(Map::from_fn(channels, height, width, |c, y, x| hwc[(y * width + x) * channels + c]))
    }
}

/// Encode a generic tensor (arbitrary dims, row-major) into `.dnt` bytes.
pub fn encode_dnt(dims: &[usize], payload: &[f32]) -> Result<Vec<u8>> {
    let count: usize = dims.iter().product();
    if count != payload.len() {
        return Err(Error::invalid(format!(
            "dims {dims:?} describe {count} values but payload has {}",
            payload.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + 4 * dims.len() + 4 * payload.len());
    out.extend_from_slice(DNT_MAGIC);
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid("dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Decode `.dnt` bytes into `(dims, payload)`, verifying magic, sizes and CRC.
pub fn decode_dnt(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != DNT_MAGIC {
        return Err(Error::format(0, "bad magic, expected DNT1"));
    }
    let dtype = r.u32()?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(4, format!("unsupported dtype code {dtype}")));
    }
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(Error::format(8, format!("implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u32()? as usize);
    }
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let count = count.ok_or_else(|| Error::format(r.pos as u64, "dims overflow"))?;
    let expected = r.pos + count * 4 + 4;
    if bytes.len() != expected {
        return Err(Error::format(
            bytes.len().min(expected) as u64,
            format!("payload length mismatch: file has {} bytes, dims imply {expected}", bytes.len()),
        ));
    }
    let mut payload = Vec::with_capacity(count);
    for _ in 0..count {
        payload.push(f32::from_le_bytes(r.array4()?));
    }
    let body_end = r.pos;
    let stored = r.u32()?;
    let actual = crc32fast::hash(&bytes[..body_end]);
    if stored != actual {
        return Err(Error::format(body_end as u64, format!("crc mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    Ok((dims, payload))
}

pub fn map_to_dnt(map: &Map) -> Vec<u8> {
    encode_dnt(&[map.height, map.width, map.channels], &map.to_hwc()).expect("map shape is consistent")
}

pub fn map_from_dnt(bytes: &[u8]) -> Result<Map> {
    let (dims, payload) = decode_dnt(bytes)?;
    if dims.len() != 3 {
        return Err(Error::format(8, format!("expected rank-3 image tensor, found rank {}", dims.len())));
    }
    Map::from_hwc(dims[0], dims[1], dims[2], &payload)
}

pub fn write_map(path: &Path, map: &Map) -> Result<()> {
    write_atomic(path, &map_to_dnt(map))
}

pub fn read_map(path: &Path) -> Result<Map> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    map_from_dnt(&bytes).map_err(|e| e.with_path(path))
}

/// Little-endian cursor that reports the offset of the first short read.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("unexpected end of data: wanted {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn array4(&mut self) -> Result<[u8; 4]> {
        Ok(self.take(4)?.try_into().expect("length checked"))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array4()?))
    }
}
