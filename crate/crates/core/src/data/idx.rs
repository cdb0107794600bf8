//! IDX files: big-endian magic, dimensions, then unsigned bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};

use super::Dataset;
use crate::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, position: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        position: format!("byte {position}"),
        msg: msg.into(),
    }
}

fn read_header(path: &Path, r: &mut impl Read, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let eof = |pos| move |_| format_err(path, pos, "truncated header");
    let got = r.read_u32::<BigEndian>().map_err(eof(0))?;
    if got != magic {
        return Err(format_err(
            path,
            0,
            format!("magic 0x{got:08x}, expected 0x{magic:08x}"),
        ));
    }
    (0..dims)
        .map(|i| Ok(r.read_u32::<BigEndian>().map_err(eof(4 + 4 * i as u64))? as usize))
        .collect()
}

fn read_body(path: &Path, r: &mut impl Read, offset: u64, len: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(len);
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(format_err(
            path,
            offset + buf.len() as u64,
            format!("expected {len} data bytes"),
        ));
    }
    Ok(buf)
}

/// Pixels are scaled to `[0, 1]`; the class count is `max(label) + 1`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let mut ir = BufReader::new(File::open(ip)?);
    let dims = read_header(ip, &mut ir, IMAGES_MAGIC, 3)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let pixels = read_body(ip, &mut ir, 16, n * h * w)?;

    let mut lr = BufReader::new(File::open(lp)?);
    let ln = read_header(lp, &mut lr, LABELS_MAGIC, 1)?[0];
    if ln != n {
        return Err(format_err(lp, 4, format!("{ln} labels for {n} images")));
    }
    let labels: Vec<usize> = read_body(lp, &mut lr, 8, n)?.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let features = pixels.into_iter().map(|p| p as f32 / 255.0).collect();
    Dataset::new(features, vec![1, h, w], labels, classes)
}

/// Inverse of [`load_idx`] for single-channel data; features are quantized to bytes.
pub fn write_idx(data: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let [1, h, w] = data.feature_shape[..] else {
        return Err(Error::Config(format!(
            "IDX needs 1xHxW examples, got {:?}",
            data.feature_shape
        )));
    };
    let mut iw = BufWriter::new(File::create(images)?);
    iw.write_u32::<BigEndian>(IMAGES_MAGIC)?;
    for d in [data.len(), h, w] {
        iw.write_u32::<BigEndian>(d as u32)?;
    }
    let bytes: Vec<u8> = data
        .features
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    iw.write_all(&bytes)?;
    iw.flush()?;

    let mut lw = BufWriter::new(File::create(labels)?);
    lw.write_u32::<BigEndian>(LABELS_MAGIC)?;
    lw.write_u32::<BigEndian>(data.len() as u32)?;
    for &l in &data.labels {
        lw.write_u8(u8::try_from(l).map_err(|_| Error::Config(format!("label {l} does not fit a byte")))?)?;
    }
    lw.flush()?;
    Ok(())
}
