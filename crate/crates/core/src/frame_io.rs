//! Intermediate files so each pipeline stage can run on its own.
//!
//! `.rv` holds a projected frame, little-endian throughout:
//!
//! ```text
//! magic "RVIM" | version u32 | height u32 | width u32 | channels u32 | points u32
//! channels × height × width f32      (x y z range remission n1 n2 n3)
//! height × width u32                 (owning point, u32::MAX when empty)
//! points u16 rows | points u16 cols | points f32 ranges
//! ```
//!
//! `.lbl` holds a label image: `"RVLB" | height u32 | width u32 | h·w u8`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::LabelImage;
use crate::kitti_io::NUM_CLASSES;
use crate::projection::{channel, PointPixelMap, RangeImage, NO_POINT};

const FRAME_MAGIC: &[u8; 4] = b"RVIM";
const FRAME_VERSION: u32 = 1;
const LABEL_MAGIC: &[u8; 4] = b"RVLB";

pub const FRAME_EXT: &str = "rv";
pub const LABEL_IMAGE_EXT: &str = "lbl";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::malformed(self.path, "file is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n.checked_mul(4).ok_or_else(|| Error::malformed(self.path, "size overflow"))?)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        Ok(self
            .take(n.checked_mul(4).ok_or_else(|| Error::malformed(self.path, "size overflow"))?)?
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn u16s(&mut self, n: usize) -> Result<Vec<u16>> {
        Ok(self
            .take(n.checked_mul(2).ok_or_else(|| Error::malformed(self.path, "size overflow"))?)?
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::malformed(
                self.path,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn write_frame(img: &RangeImage, map: &PointPixelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(24 + img.raw_channels().len() * 4 + img.pixel_points().len() * 4 + map.len() * 8);
    out.extend_from_slice(FRAME_MAGIC);
    for v in [
        FRAME_VERSION,
        img.height() as u32,
        img.width() as u32,
        channel::COUNT as u32,
        map.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in img.raw_channels() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in img.pixel_points() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in map.rows.iter().chain(&map.cols) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &map.ranges {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_frame(path: impl AsRef<Path>) -> Result<(RangeImage, PointPixelMap)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(4)? != FRAME_MAGIC {
        return Err(Error::malformed(path, "not a range-image frame"));
    }
    let version = r.u32()?;
    if version != FRAME_VERSION {
        return Err(Error::malformed(path, format!("unsupported frame version {version}")));
    }
    let (h, w, c, n) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if c != channel::COUNT {
        return Err(Error::malformed(path, format!("{c} channels, expected {}", channel::COUNT)));
    }
    let channels = r.f32s(c * h * w)?;
    let pixel_point = r.u32s(h * w)?;
    let rows = r.u16s(n)?;
    let cols = r.u16s(n)?;
    let ranges = r.f32s(n)?;
    r.finish()?;

    let range = &channels[channel::RANGE * h * w..(channel::RANGE + 1) * h * w];
    for (i, (&p, &rv)) in pixel_point.iter().zip(range).enumerate() {
        let owned = p != NO_POINT;
        if owned && p as usize >= n {
            return Err(Error::malformed(path, format!("pixel {i} owned by point {p} of {n}")));
        }
        if owned != (rv > 0.0) {
            return Err(Error::malformed(path, format!("pixel {i} ownership disagrees with its range")));
        }
    }
    let map = PointPixelMap { rows, cols, ranges };
    map.check_bounds(h, w).map_err(|e| Error::malformed(path, e.to_string()))?;
    Ok((RangeImage::from_parts(h, w, channels, pixel_point), map))
}

pub fn write_label_image(labels: &LabelImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(12 + labels.as_slice().len());
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&(labels.height() as u32).to_le_bytes());
    out.extend_from_slice(&(labels.width() as u32).to_le_bytes());
    out.extend_from_slice(labels.as_slice());
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_label_image(path: impl AsRef<Path>) -> Result<LabelImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(4)? != LABEL_MAGIC {
        return Err(Error::malformed(path, "not a label image"));
    }
    let (h, w) = (r.u32()? as usize, r.u32()? as usize);
    let data = r.take(h * w)?.to_vec();
    r.finish()?;
    if let Some(bad) = data.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::malformed(path, format!("class id {bad} out of range")));
    }
    Ok(LabelImage::from_vec(h, w, data))
}
