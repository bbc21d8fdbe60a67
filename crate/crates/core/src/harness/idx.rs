//! IDX (big-endian, unsigned-byte) image and label files.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn header(bytes: &[u8], magic: u32, what: &str) -> Result<(Vec<usize>, usize)> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
            .ok_or_else(|| Error::Format(format!("{what} file truncated in header")))
    };
    let m = word(0)?;
    if m != magic {
        return Err(Error::Format(format!("{what} file has magic {m:#010x}, expected {magic:#010x}")));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (1..=rank).map(|i| word(i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    Ok((dims, 4 * (rank + 1)))
}

fn body<'a>(bytes: &'a [u8], offset: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    let end = offset.checked_add(len).ok_or_else(|| Error::Format(format!("{what} size overflows")))?;
    match bytes.len().cmp(&end) {
        std::cmp::Ordering::Less => {
            Err(Error::Format(format!("{what} file truncated: {} of {end} bytes", bytes.len())))
        }
        std::cmp::Ordering::Greater => {
            Err(Error::Format(format!("{what} file has {} trailing bytes", bytes.len() - end)))
        }
        std::cmp::Ordering::Equal => Ok(&bytes[offset..]),
    }
}

/// Parses a rank-3 image file into `(count, rows, cols, pixels in [0, 1])`.
pub fn read_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let (dims, off) = header(bytes, IMAGES_MAGIC, "image")?;
    let (m, h, w) = (dims[0], dims[1], dims[2]);
    let len = m.checked_mul(h).and_then(|x| x.checked_mul(w)).ok_or_else(|| Error::Format("image size overflows".into()))?;
    let px = body(bytes, off, len, "image")?;
    Ok((m, h, w, px.iter().map(|&b| b as f32 / 255.0).collect()))
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (dims, off) = header(bytes, LABELS_MAGIC, "label")?;
    Ok(body(bytes, off, dims[0], "label")?.iter().map(|&b| b as usize).collect())
}

/// Loads a single-channel dataset; the class count is one past the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (m, h, w, images) = read_idx_images(&fs::read(images_path)?)?;
    let labels = read_idx_labels(&fs::read(labels_path)?)?;
    if labels.len() != m {
        return Err(Error::Format(format!("{m} images but {} labels", labels.len())));
    }
    let classes = labels.iter().max().map_or(0, |&y| y + 1);
    let d = Dataset { height: h, width: w, channels: 1, classes, images, labels, planted: None };
    d.validate()?;
    Ok(d)
}

fn encode(magic: u32, dims: &[usize], payload: impl Iterator<Item = u8>) -> Result<Vec<u8>> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} does not fit IDX")))?;
        out.extend(d.to_be_bytes());
    }
    out.extend(payload);
    Ok(out)
}

/// Writes a single-channel dataset; pixels are clamped to [0, 1] and
/// quantized to bytes, labels must fit a byte.
pub fn write_idx(d: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    d.validate()?;
    if d.channels != 1 {
        return Err(Error::Format(format!("IDX images are single-channel, got {}", d.channels)));
    }
    if d.labels.iter().any(|&y| y > 255) {
        return Err(Error::Format("labels above 255 do not fit IDX bytes".into()));
    }
    let px = d.images.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
    fs::write(images_path, encode(IMAGES_MAGIC, &[d.len(), d.height, d.width], px)?)?;
    fs::write(labels_path, encode(LABELS_MAGIC, &[d.len()], d.labels.iter().map(|&y| y as u8))?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_file(m: u32, h: u32, w: u32, px: &[u8]) -> Vec<u8> {
        let mut v = vec![0, 0, 8, 3];
        for d in [m, h, w] {
            v.extend(d.to_be_bytes());
        }
        v.extend(px);
        v
    }

    #[test]
    fn parses_and_scales() {
        let (m, h, w, px) = read_idx_images(&image_file(1, 1, 2, &[0, 255])).unwrap();
        assert_eq!((m, h, w), (1, 1, 2));
        assert_eq!(px, vec![0.0, 1.0]);
        assert_eq!(read_idx_labels(&[0, 0, 8, 1, 0, 0, 0, 2, 7, 3]).unwrap(), vec![7, 3]);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(read_idx_images(&image_file(1, 2, 2, &[1, 2, 3])), Err(Error::Format(_))));
        assert!(matches!(read_idx_images(&image_file(1, 1, 1, &[1, 2])), Err(Error::Format(_))));
        assert!(matches!(read_idx_images(&[0, 0, 8, 1, 0, 0, 0, 0]), Err(Error::Format(_))));
        assert!(matches!(read_idx_labels(&[0, 0, 8]), Err(Error::Format(_))));
        assert!(matches!(read_idx_labels(&[0, 0, 8, 3, 0, 0, 0, 0]), Err(Error::Format(_))));
    }
}
