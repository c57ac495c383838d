//! Depth/mask images (binary PGM, PFM) and Wavefront OBJ meshes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::render::DepthFrame;

/// 16-bit PGM of depth in whole millimetres, clipped to `0..=65535`.
pub fn encode_pgm16(frame: &DepthFrame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", frame.width, frame.height).into_bytes();
    for &d in &frame.depth {
        let v = d.round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

/// 8-bit PGM: 255 inside the mask, 0 elsewhere.
pub fn encode_mask_pgm(width: usize, height: usize, mask: &[bool]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    out
}

/// Grayscale PFM, little-endian, rows stored bottom to top.
pub fn encode_pfm(frame: &DepthFrame) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", frame.width, frame.height).into_bytes();
    for row in (0..frame.height).rev() {
        for col in 0..frame.width {
            out.extend_from_slice(&frame.at(col, row).to_le_bytes());
        }
    }
    out
}

struct Header<'a> {
    magic: &'a str,
    width: usize,
    height: usize,
    third: &'a str,
    body: &'a [u8],
}

fn split_header(bytes: &[u8]) -> std::result::Result<Header<'_>, String> {
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ascii header")?);
    }
    // exactly one whitespace byte separates the header from the raster
    let body = bytes.get(pos + 1..).ok_or("missing raster")?;
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad dimension {s}"));
    Ok(Header {
        magic: tokens[0],
        width: num(tokens[1])?,
        height: num(tokens[2])?,
        third: tokens[3],
        body,
    })
}

pub fn decode_pgm16(bytes: &[u8]) -> std::result::Result<DepthFrame, String> {
    let h = split_header(bytes)?;
    if h.magic != "P5" || h.third != "65535" {
        return Err("expected a 16-bit binary PGM".into());
    }
    let n = h.width * h.height;
    if h.body.len() != 2 * n {
        return Err(format!("expected {} raster bytes, found {}", 2 * n, h.body.len()));
    }
    let depth = h.body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f32).collect();
    DepthFrame::from_depth(h.width, h.height, depth).map_err(|e| e.to_string())
}

pub fn decode_mask_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<bool>), String> {
    let h = split_header(bytes)?;
    if h.magic != "P5" || h.third != "255" {
        return Err("expected an 8-bit binary PGM".into());
    }
    if h.body.len() != h.width * h.height {
        return Err("raster size does not match header".into());
    }
    Ok((h.width, h.height, h.body.iter().map(|&b| b > 127).collect()))
}

pub fn decode_pfm(bytes: &[u8]) -> std::result::Result<DepthFrame, String> {
    let h = split_header(bytes)?;
    if h.magic != "Pf" {
        return Err("expected a grayscale PFM".into());
    }
    let scale: f64 = h.third.parse().map_err(|_| "bad PFM scale")?;
    let n = h.width * h.height;
    if h.body.len() != 4 * n {
        return Err("raster size does not match header".into());
    }
    let mut depth = vec![0.0f32; n];
    for (i, c) in h.body.chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, col) = (h.height - 1 - i / h.width, i % h.width);
        depth[row * h.width + col] = v;
    }
    DepthFrame::from_depth(h.width, h.height, depth).map_err(|e| e.to_string())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads a depth frame, choosing the decoder from the file extension.
pub fn read_depth(path: &Path) -> Result<DepthFrame> {
    let bytes = read(path)?;
    let decoded = match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => decode_pfm(&bytes),
        _ => decode_pgm16(&bytes),
    };
    decoded.map_err(|m| Error::parse(path, m))
}

pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    decode_mask_pgm(&read(path)?).map_err(|m| Error::parse(path, m))
}

/// OBJ text; `comment` lines are prefixed with `#`.
pub fn encode_obj(vertices: &[Vec3], triangles: &[[usize; 3]], comment: &str) -> String {
    let mut out = Vec::new();
    for line in comment.lines() {
        writeln!(out, "# {line}").unwrap();
    }
    for v in vertices {
        writeln!(out, "v {:.4} {:.4} {:.4}", v.x, v.y, v.z).unwrap();
    }
    for t in triangles {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).unwrap();
    }
    String::from_utf8(out).expect("ascii")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame() -> DepthFrame {
        let depth = (0..12).map(|i| if i == 5 { 0.0 } else { 1000.0 + i as f32 * 1.5 }).collect();
        DepthFrame::from_depth(4, 3, depth).unwrap()
    }

    #[test]
    fn pfm_roundtrip_is_exact() {
        let f = frame();
        assert_eq!(decode_pfm(&encode_pfm(&f)).unwrap(), f);
    }

    #[test]
    fn pgm16_rounds_to_millimetres() {
        let f = frame();
        let back = decode_pgm16(&encode_pgm16(&f)).unwrap();
        for (a, b) in back.depth.iter().zip(&f.depth) {
            assert_eq!(*a, b.round());
        }
        assert_eq!(back.mask, f.mask);
    }

    #[test]
    fn mask_roundtrip() {
        let m = vec![true, false, false, true, true, false];
        assert_eq!(decode_mask_pgm(&encode_mask_pgm(3, 2, &m)).unwrap(), (3, 2, m));
    }

    #[test]
    fn truncated_files_are_rejected() {
        let bytes = encode_pgm16(&frame());
        assert!(decode_pgm16(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_pgm16(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn obj_counts() {
        let obj = encode_obj(&[Vec3::zeros(), Vec3::x(), Vec3::y()], &[[0, 1, 2]], "hash abc");
        assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), 3);
        assert!(obj.contains("f 1 2 3"));
        assert!(obj.starts_with("# hash abc"));
    }
}
