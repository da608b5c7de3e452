//! FMAP binary feature-map format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FMAP"            4 bytes magic
//! version           u16 (= 1)
//! C, H, W           u32 x 3
//! label             u8  (0 normal, 1 anomalous, 2 unlabeled)
//! mask flag         u8  (0 absent, 1 present)
//! image_id          u16 length + UTF-8 bytes
//! data              C*H*W f32, channel-major
//! [mask]            u32 height, u32 width, then bit-packed rows,
//!                   MSB first, each row padded to a byte boundary
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
pub const FMAP_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
    Unlabeled,
}

impl Label {
    fn to_byte(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Anomalous => 1,
            Label::Unlabeled => 2,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Label::Normal),
            1 => Ok(Label::Anomalous),
            2 => Ok(Label::Unlabeled),
            other => Err(Error::Format(format!("unknown label byte {other}"))),
        }
    }
}

/// Ground-truth anomaly pixels at image resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn row_bytes(width: usize) -> usize {
        width.div_ceil(8)
    }

    fn packed(&self) -> Vec<u8> {
        let rb = Self::row_bytes(self.width);
        let mut out = vec![0u8; rb * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    out[y * rb + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        out
    }

    fn unpack(height: usize, width: usize, packed: &[u8]) -> Self {
        let rb = Self::row_bytes(width);
        let mut m = Mask::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                m.set(y, x, packed[y * rb + x / 8] & (0x80 >> (x % 8)) != 0);
            }
        }
        m
    }
}

/// One image's activations from one backbone layer, `C x H x W`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub image_id: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub label: Label,
    pub mask: Option<Mask>,
}

impl FeatureMap {
    pub fn new(
        image_id: impl Into<String>,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        label: Label,
    ) -> Result<Self> {
        let map = FeatureMap {
            image_id: image_id.into(),
            channels,
            height,
            width,
            data,
            label,
            mask: None,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn with_mask(mut self, mask: Mask) -> Result<Self> {
        self.mask = Some(mask);
        self.validate()?;
        Ok(self)
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Format(format!(
                "{}: dims must be positive, got {}x{}x{}",
                self.image_id, self.channels, self.height, self.width
            )));
        }
        let expected = self.channels * self.height * self.width;
        if self.data.len() != expected {
            return Err(Error::Length {
                what: "feature data",
                expected: expected * 4,
                actual: self.data.len() * 4,
            });
        }
        if let Some(index) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data {
                index,
                value: self.data[index],
            });
        }
        if let Some(mask) = &self.mask {
            if mask.bits.len() != mask.height * mask.width {
                return Err(Error::Format("mask bit count does not match its dims".into()));
            }
            match self.label {
                Label::Unlabeled => {
                    return Err(Error::Format(format!(
                        "{}: mask present on an unlabeled map",
                        self.image_id
                    )))
                }
                Label::Normal if mask.count_ones() > 0 => {
                    return Err(Error::Format(format!(
                        "{}: normal map carries a non-empty mask",
                        self.image_id
                    )))
                }
                _ => {}
            }
        }
        if self.image_id.len() > u16::MAX as usize {
            return Err(Error::Format("image_id longer than 65535 bytes".into()));
        }
        Ok(())
    }

    /// Size in bytes of the raw f32 payload.
    pub fn payload_bytes(&self) -> usize {
        self.data.len() * 4
    }
}

/// All extraction layers of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub image_id: String,
    pub layers: Vec<FeatureMap>,
}

impl LayerStack {
    pub fn new(image_id: impl Into<String>, layers: Vec<FeatureMap>) -> Result<Self> {
        let image_id = image_id.into();
        if layers.is_empty() {
            return Err(Error::arg(format!("stack {image_id} has no layers")));
        }
        Ok(LayerStack { image_id, layers })
    }

    /// Label and mask are carried by the first layer.
    pub fn label(&self) -> Label {
        self.layers[0].label
    }

    pub fn mask(&self) -> Option<&Mask> {
        self.layers[0].mask.as_ref()
    }

    pub fn last_layer(&self) -> &FeatureMap {
        self.layers.last().expect("stack has at least one layer")
    }

    /// Raw feature bytes across all layers; the unit of replay-buffer storage.
    pub fn stack_bytes(&self) -> usize {
        self.layers.iter().map(FeatureMap::payload_bytes).sum()
    }
}

struct CountingWriter<W> {
    inner: W,
    written: u64,
}

impl<W: Write> CountingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes).map_err(|source| Error::WriteAt {
            offset: self.written,
            source,
        })?;
        self.written += bytes.len() as u64;
        Ok(())
    }
}

pub fn write_fmap<W: Write>(map: &FeatureMap, sink: W) -> Result<()> {
    map.validate()?;
    let mut w = CountingWriter {
        inner: sink,
        written: 0,
    };
    w.put(FMAP_MAGIC)?;
    w.put(&FMAP_VERSION.to_le_bytes())?;
    for dim in [map.channels, map.height, map.width] {
        w.put(&dim_u32(dim)?.to_le_bytes())?;
    }
    w.put(&[map.label.to_byte(), map.mask.is_some() as u8])?;
    w.put(&(map.image_id.len() as u16).to_le_bytes())?;
    w.put(map.image_id.as_bytes())?;
    let mut buf = Vec::with_capacity(map.data.len() * 4);
    for v in &map.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.put(&buf)?;
    if let Some(mask) = &map.mask {
        w.put(&dim_u32(mask.height)?.to_le_bytes())?;
        w.put(&dim_u32(mask.width)?.to_le_bytes())?;
        w.put(&mask.packed())?;
    }
    w.inner.flush().map_err(|source| Error::WriteAt {
        offset: w.written,
        source,
    })
}

pub fn fmap_to_bytes(map: &FeatureMap) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_fmap(map, &mut out)?;
    Ok(out)
}

pub(crate) fn dim_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::arg(format!("dimension {v} exceeds u32")))
}

/// Bounds-checked little-endian cursor shared by the binary readers.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let remaining = self.buf.len() - self.pos;
        if remaining < n {
            return Err(Error::Length {
                what,
                expected: self.pos + n,
                actual: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &'static str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &'static str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, what: &'static str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("{what} length overflows")))?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn string(&mut self, what: &'static str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format(format!("{what} is not valid UTF-8")))
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let b = self.take(4, "magic")?;
        if b != expected {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(b),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub(crate) fn finish(&self, what: &'static str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after {what}",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn read_fmap<R: Read>(mut source: R) -> Result<FeatureMap> {
    let mut buf = Vec::new();
    source.read_to_end(&mut buf)?;
    fmap_from_bytes(&buf)
}

pub fn fmap_from_bytes(buf: &[u8]) -> Result<FeatureMap> {
    let mut c = Cursor::new(buf);
    c.magic(FMAP_MAGIC)?;
    let version = c.u16("header")?;
    if version != FMAP_VERSION {
        return Err(Error::Format(format!("unsupported FMAP version {version}")));
    }
    let channels = c.u32("header")? as usize;
    let height = c.u32("header")? as usize;
    let width = c.u32("header")? as usize;
    let label = Label::from_byte(c.u8("header")?)?;
    let has_mask = match c.u8("header")? {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("bad mask flag {other}"))),
    };
    let image_id = c.string("image_id")?;
    let n = channels
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| Error::Format("C*H*W overflows".into()))?;
    let data = c.f32s(n, "feature data")?;
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data {
            index,
            value: data[index],
        });
    }
    let mask = if has_mask {
        let mh = c.u32("mask header")? as usize;
        let mw = c.u32("mask header")? as usize;
        let packed = c.take(Mask::row_bytes(mw) * mh, "mask bits")?;
        Some(Mask::unpack(mh, mw, packed))
    } else {
        None
    };
    c.finish("FMAP payload")?;
    let map = FeatureMap {
        image_id,
        channels,
        height,
        width,
        data,
        label,
        mask,
    };
    map.validate()?;
    Ok(map)
}
