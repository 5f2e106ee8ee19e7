//! Binary grayscale (`P5`) export of single-channel maps.

use std::path::{Path, PathBuf};

use satskip_core::Tensor;

use crate::error::{Error, Result};
use crate::tensorfile::write_atomic;

/// `floor(255 v + 0.5)`, so 0.5 maps to 128.
pub fn gray_level(v: f64) -> u8 {
    (255.0 * v + 0.5).floor() as u8
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a file written by [`encode_pgm`].
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::Format("not a P5 image with maxval 255".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    if fields[0] != "P5" || num(fields[3])? != 255 {
        return Err(bad());
    }
    let (w, h) = (num(fields[1])?, num(fields[2])?);
    let pixels = bytes.get(pos..).ok_or_else(bad)?;
    if pixels.len() != w * h {
        return Err(Error::Truncated {
            expected: pos + w * h,
            found: bytes.len(),
        });
    }
    Ok((w, h, pixels.to_vec()))
}

/// A 2-D image: `height` rows of `width` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Plane {
    pub fn to_pgm(&self) -> Result<Vec<u8>> {
        if let Some(v) = self.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("map value {v} outside [0, 1]")));
        }
        let px: Vec<u8> = self.values.iter().map(|&v| gray_level(v)).collect();
        Ok(encode_pgm(self.width, self.height, &px))
    }
}

fn single_map(map: &Tensor) -> Result<(usize, [usize; 3])> {
    let l = map.layout("export_gray_image")?;
    if l.channels != 1 || l.batch != 1 {
        return Err(Error::Format(format!("expected one channel and one sample, got shape {:?}", map.shape())));
    }
    Ok((l.rank, l.spatial))
}

/// The plane of a `[H, W, 1, 1]` map, or for `[H, W, D, 1, 1]` the
/// central slice across each axis in turn.
pub fn planes(map: &Tensor) -> Result<Vec<Plane>> {
    let (rank, [h, w, d]) = single_map(map)?;
    let v = map.data();
    let at = |i: usize, j: usize, k: usize| v[(i * w + j) * d + k];
    if rank == 2 {
        return Ok(vec![Plane {
            width: w,
            height: h,
            values: v.to_vec(),
        }]);
    }
    let collect = |rows: usize, cols: usize, f: &dyn Fn(usize, usize) -> f64| Plane {
        width: cols,
        height: rows,
        values: (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).map(|(r, c)| f(r, c)).collect(),
    };
    Ok(vec![
        collect(w, d, &|r, c| at(h / 2, r, c)),
        collect(h, d, &|r, c| at(r, w / 2, c)),
        collect(h, w, &|r, c| at(r, c, d / 2)),
    ])
}

/// Writes `path` for a 2-D map, or `<stem>_ax0/_ax1/_ax2.pgm` beside it
/// for a 3-D one. Returns the files written.
pub fn export_gray_image(map: &Tensor, path: &Path) -> Result<Vec<PathBuf>> {
    let planes = planes(map)?;
    let encoded = planes.iter().map(Plane::to_pgm).collect::<Result<Vec<_>>>()?;
    let targets: Vec<PathBuf> = if planes.len() == 1 {
        vec![path.to_path_buf()]
    } else {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("map");
        (0..3).map(|a| path.with_file_name(format!("{stem}_ax{a}.pgm"))).collect()
    };
    for (t, bytes) in targets.iter().zip(&encoded) {
        write_atomic(t, bytes)?;
    }
    Ok(targets)
}
