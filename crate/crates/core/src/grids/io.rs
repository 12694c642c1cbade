//! Raster file formats.
//!
//! * PFM (`Pf` one channel for depth, `PF` three channels for normals). Written
//!   little-endian with scale `-1.0`, rows bottom to top as the format requires.
//! * 16-bit binary PGM for depth, with a caller-supplied units-per-meter scale.
//! * 8-bit binary PGM for boolean masks.
//! * Binary PPM (`P6`, maxval 255) for color.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ColorGrid, DepthGrid, Grid2D, NormalGrid};
use crate::error::{Error, Result};

/// Splits a Netpbm-style header into `count` whitespace-separated tokens and
/// returns them with the offset of the first payload byte. `#` comments are
/// skipped.
fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format("truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the payload
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(Error::format("missing separator after header"));
    }
    Ok((tokens, i + 1))
}

fn parse_dim(tok: &str) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::format(format!("bad dimension {tok:?}"))),
    }
}

fn read_pfm_raw(bytes: &[u8], magic: &str, channels: usize) -> Result<(usize, usize, Vec<f32>)> {
    let (tok, off) = header_tokens(bytes, 4)?;
    if tok[0] != magic {
        return Err(Error::format(format!("expected PFM magic {magic}, found {:?}", tok[0])));
    }
    let (w, h) = (parse_dim(&tok[1])?, parse_dim(&tok[2])?);
    let scale: f64 = tok[3]
        .parse()
        .map_err(|_| Error::format(format!("bad PFM scale {:?}", tok[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format("PFM scale must be nonzero"));
    }
    let little = scale < 0.0;
    let n = w * h * channels;
    let payload = &bytes[off..];
    if payload.len() != n * 4 {
        return Err(Error::format(format!(
            "PFM payload is {} bytes, header says {w}x{h}x{channels}",
            payload.len()
        )));
    }
    let mut out = vec![0f32; n];
    let row = w * channels;
    for (r, chunk) in payload.chunks_exact(row * 4).enumerate() {
        // stored bottom row first
        let y = h - 1 - r;
        for (i, b) in chunk.chunks_exact(4).enumerate() {
            let b = [b[0], b[1], b[2], b[3]];
            out[y * row + i] = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        }
    }
    Ok((w, h, out))
}

fn write_pfm_raw(path: &Path, magic: &str, w: usize, h: usize, channels: usize, values: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + values.len() * 4);
    write!(buf, "{magic}\n{w} {h}\n-1.0\n")?;
    let row = w * channels;
    for y in (0..h).rev() {
        for v in &values[y * row..(y + 1) * row] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_depth_pfm(path: impl AsRef<Path>) -> Result<DepthGrid> {
    let bytes = fs::read(path)?;
    decode_depth_pfm(&bytes)
}

pub fn decode_depth_pfm(bytes: &[u8]) -> Result<DepthGrid> {
    let (w, h, v) = read_pfm_raw(bytes, "Pf", 1)?;
    let g = Grid2D::from_vec(w, h, v.into_iter().map(f64::from).collect())?;
    super::validate_depth(&g)?;
    Ok(g)
}

pub fn write_depth_pfm(path: impl AsRef<Path>, g: &DepthGrid) -> Result<()> {
    let v: Vec<f32> = g.data().iter().map(|&d| d as f32).collect();
    write_pfm_raw(path.as_ref(), "Pf", g.width(), g.height(), 1, &v)
}

/// Reads a three-channel PFM of normals. Stored vectors are renormalized, since
/// single-precision storage does not keep them unit length to 1e-6.
pub fn read_normals_pfm(path: impl AsRef<Path>) -> Result<NormalGrid> {
    let bytes = fs::read(path)?;
    let (w, h, v) = read_pfm_raw(&bytes, "PF", 3)?;
    let data = v
        .chunks_exact(3)
        .map(|c| {
            let n = [c[0] as f64, c[1] as f64, c[2] as f64];
            let len = super::norm3(&n);
            if len > 1e-6 && len.is_finite() {
                Ok(n.map(|x| x / len))
            } else {
                Err(Error::format(format!("degenerate normal {n:?}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Grid2D::from_vec(w, h, data)
}

pub fn write_normals_pfm(path: impl AsRef<Path>, g: &NormalGrid) -> Result<()> {
    let v: Vec<f32> = g.data().iter().flatten().map(|&c| c as f32).collect();
    write_pfm_raw(path.as_ref(), "PF", g.width(), g.height(), 3, &v)
}

/// 16-bit PGM depth; stored value = round(depth * units_per_meter).
pub fn write_depth_pgm16(path: impl AsRef<Path>, g: &DepthGrid, units_per_meter: f64) -> Result<()> {
    if !(units_per_meter > 0.0) {
        return Err(Error::invalid("units_per_meter must be positive"));
    }
    let mut buf = Vec::with_capacity(32 + g.len() * 2);
    write!(buf, "P5\n{} {}\n65535\n", g.width(), g.height())?;
    for &d in g.data() {
        let v = (d * units_per_meter).round();
        if v > u16::MAX as f64 {
            return Err(Error::invalid(format!("depth {d} overflows 16-bit PGM at scale {units_per_meter}")));
        }
        buf.extend_from_slice(&(v as u16).to_be_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_depth_pgm16(path: impl AsRef<Path>, units_per_meter: f64) -> Result<DepthGrid> {
    let bytes = fs::read(path)?;
    let (tok, off) = header_tokens(&bytes, 4)?;
    if tok[0] != "P5" {
        return Err(Error::format(format!("expected PGM magic P5, found {:?}", tok[0])));
    }
    let (w, h) = (parse_dim(&tok[1])?, parse_dim(&tok[2])?);
    if tok[3] != "65535" {
        return Err(Error::format(format!("expected 16-bit PGM, maxval {}", tok[3])));
    }
    let payload = &bytes[off..];
    if payload.len() != w * h * 2 {
        return Err(Error::format("PGM payload does not match header dimensions"));
    }
    let data = payload
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / units_per_meter)
        .collect();
    Grid2D::from_vec(w, h, data)
}

pub fn write_mask_pgm(path: impl AsRef<Path>, g: &Grid2D<bool>) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + g.len());
    write!(buf, "P5\n{} {}\n255\n", g.width(), g.height())?;
    buf.extend(g.data().iter().map(|&m| if m { 255u8 } else { 0 }));
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_mask_pgm(path: impl AsRef<Path>) -> Result<Grid2D<bool>> {
    let bytes = fs::read(path)?;
    let (tok, off) = header_tokens(&bytes, 4)?;
    if tok[0] != "P5" || tok[3] != "255" {
        return Err(Error::format("expected 8-bit P5 PGM mask"));
    }
    let (w, h) = (parse_dim(&tok[1])?, parse_dim(&tok[2])?);
    let payload = &bytes[off..];
    if payload.len() != w * h {
        return Err(Error::format("PGM payload does not match header dimensions"));
    }
    Grid2D::from_vec(w, h, payload.iter().map(|&b| b >= 128).collect())
}

pub fn write_color_ppm(path: impl AsRef<Path>, g: &ColorGrid) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + g.len() * 3);
    write!(buf, "P6\n{} {}\n255\n", g.width(), g.height())?;
    for px in g.data() {
        for c in px {
            buf.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_color_ppm(path: impl AsRef<Path>) -> Result<ColorGrid> {
    let bytes = fs::read(path)?;
    let (tok, off) = header_tokens(&bytes, 4)?;
    if tok[0] != "P6" {
        return Err(Error::format(format!("expected PPM magic P6, found {:?}", tok[0])));
    }
    let (w, h) = (parse_dim(&tok[1])?, parse_dim(&tok[2])?);
    if tok[3] != "255" {
        return Err(Error::format(format!("expected 8-bit PPM, maxval {}", tok[3])));
    }
    let payload = &bytes[off..];
    if payload.len() != w * h * 3 {
        return Err(Error::format("PPM payload does not match header dimensions"));
    }
    let data = payload
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]].map(|b| b as f64 / 255.0))
        .collect();
    Grid2D::from_vec(w, h, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_pfm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let g = Grid2D::from_fn(5, 3, |x, y| (x * 10 + y) as f64 * 0.25).unwrap();
        write_depth_pfm(&p, &g).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"Pf\n5 3\n-1.0\n"));
        // first stored row is the bottom one
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(first as f64, *g.get(0, 2));
        assert_eq!(read_depth_pfm(&p).unwrap(), g);
    }

    #[test]
    fn pfm_rejects_magic_and_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.pfm");
        let n = Grid2D::filled(2, 2, [0.0, 0.0, -1.0]).unwrap();
        write_normals_pfm(&p, &n).unwrap();
        assert!(matches!(read_depth_pfm(&p), Err(Error::Format(_))));
        assert_eq!(read_normals_pfm(&p).unwrap(), n);

        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(decode_depth_pfm(&bytes), Err(Error::Format(_))));
        let bad = b"Pf\n3 3\n-1.0\n\0\0\0\0".to_vec();
        assert!(matches!(decode_depth_pfm(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn big_endian_pfm_is_read() {
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_be_bytes());
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        assert_eq!(decode_depth_pfm(&bytes).unwrap().data(), &[1.5, 2.5]);
    }

    #[test]
    fn pgm16_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid2D::from_fn(4, 2, |x, y| (x + y) as f64 * 0.5).unwrap();
        let p = dir.path().join("d.pgm");
        write_depth_pgm16(&p, &g, 1000.0).unwrap();
        assert_eq!(read_depth_pgm16(&p, 1000.0).unwrap(), g);
        assert!(matches!(read_color_ppm(&p), Err(Error::Format(_))));

        let c = Grid2D::from_fn(3, 2, |x, y| [x as f64 / 2.0, y as f64, 0.2]).unwrap();
        let p = dir.path().join("c.ppm");
        write_color_ppm(&p, &c).unwrap();
        let back = read_color_ppm(&p).unwrap();
        for (a, b) in back.data().iter().flatten().zip(c.data().iter().flatten()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }

        let m = Grid2D::from_fn(3, 3, |x, y| x == y).unwrap();
        let p = dir.path().join("m.pgm");
        write_mask_pgm(&p, &m).unwrap();
        assert_eq!(read_mask_pgm(&p).unwrap(), m);
    }
}
