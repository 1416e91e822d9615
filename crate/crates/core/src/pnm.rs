//! Binary portable anymap I/O: grayscale (P5, 8 or 16 bit) and RGB (P6).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Encodes values in `[0, 1]` as a P5 image with the given `maxval`
/// (255 or 65535).
pub fn encode_pgm(rows: usize, cols: usize, values: &[f64], maxval: u16) -> Vec<u8> {
    let mut out = format!("P5\n{cols} {rows}\n{maxval}\n").into_bytes();
    for &v in values {
        let q = (v.clamp(0.0, 1.0) * maxval as f64).round() as u16;
        if maxval > 255 {
            out.extend_from_slice(&q.to_be_bytes());
        } else {
            out.push(q as u8);
        }
    }
    out
}

pub fn write_pgm(path: &Path, rows: usize, cols: usize, values: &[f64], maxval: u16) -> Result<()> {
    fs::write(path, encode_pgm(rows, cols, values, maxval)).map_err(|e| Error::io(path, e))
}

pub fn encode_ppm(rows: usize, cols: usize, rgb: &[[u8; 3]]) -> Vec<u8> {
    let mut out = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    for px in rgb {
        out.extend_from_slice(px);
    }
    out
}

pub fn write_ppm(path: &Path, rows: usize, cols: usize, rgb: &[[u8; 3]]) -> Result<()> {
    fs::write(path, encode_ppm(rows, cols, rgb)).map_err(|e| Error::io(path, e))
}

/// Parses the three header integers following a magic number, skipping
/// whitespace and `#` comments. Returns the values and the payload offset.
fn parse_header(bytes: &[u8], magic: &[u8]) -> Option<([usize; 3], usize)> {
    if !bytes.starts_with(magic) {
        return None;
    }
    let mut pos = magic.len();
    let mut vals = [0usize; 3];
    for v in vals.iter_mut() {
        loop {
            match bytes.get(pos)? {
                b'#' => {
                    while *bytes.get(pos)? != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos)?.is_ascii_digit() {
            pos += 1;
        }
        *v = std::str::from_utf8(&bytes[start..pos]).ok()?.parse().ok()?;
    }
    // Exactly one whitespace byte separates the header from the payload.
    bytes.get(pos)?.is_ascii_whitespace().then_some((vals, pos + 1))
}

/// Reads a P5 image as `(rows, cols, values in [0, 1])`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f64>), String> {
    let ([cols, rows, maxval], offset) =
        parse_header(bytes, b"P5").ok_or_else(|| "not a binary PGM (P5) image".to_string())?;
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range"));
    }
    let wide = maxval > 255;
    let need = rows * cols * if wide { 2 } else { 1 };
    let payload = &bytes[offset..];
    if payload.len() < need {
        return Err(format!("expected {need} payload bytes, found {}", payload.len()));
    }
    let scale = maxval as f64;
    let values = if wide {
        payload[..need]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / scale)
            .collect()
    } else {
        payload[..need].iter().map(|&b| b as f64 / scale).collect()
    };
    Ok((rows, cols, values))
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<[u8; 3]>), String> {
    let ([cols, rows, maxval], offset) =
        parse_header(bytes, b"P6").ok_or_else(|| "not a binary PPM (P6) image".to_string())?;
    if maxval != 255 {
        return Err(format!("only 8-bit P6 supported, maxval {maxval}"));
    }
    let payload = &bytes[offset..];
    if payload.len() < rows * cols * 3 {
        return Err("truncated P6 payload".into());
    }
    Ok((
        rows,
        cols,
        payload[..rows * cols * 3]
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trips_at_both_depths() {
        let vals = [0.0, 0.25, 1.0, 0.5, 0.75, 1.0];
        for maxval in [255u16, 65535] {
            let bytes = encode_pgm(2, 3, &vals, maxval);
            let (r, c, back) = decode_pgm(&bytes).unwrap();
            assert_eq!((r, c), (2, 3));
            for (a, b) in vals.iter().zip(&back) {
                assert!((a - b).abs() <= 0.5 / maxval as f64 + 1e-12);
            }
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        assert_eq!(decode_pgm(&bytes).unwrap(), (1, 2, vec![0.0, 1.0]));
        assert!(decode_pgm(b"P6\n1 1\n255\nabc").is_err());
        assert!(decode_pgm(b"P5\n4 4\n255\nab").is_err());
    }

    #[test]
    fn ppm_round_trip() {
        let px = vec![[255, 0, 0], [1, 2, 3]];
        let (r, c, back) = decode_ppm(&encode_ppm(1, 2, &px)).unwrap();
        assert_eq!((r, c), (1, 2));
        assert_eq!(back, px);
    }
}
