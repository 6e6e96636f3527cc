//! Binary PGM (P5) image I/O.
//!
//! Images are stored with 16-bit big-endian samples so a full `[0, 1]`
//! intensity range round-trips with 1/65535 resolution — bit-exact for the
//! quantized values, dependency-free, and diffable with standard tools.
//! The reader also accepts 8-bit files (maxval < 256).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maximum sample value written by [`write_pgm`].
pub const PGM_MAXVAL: u32 = 65_535;

/// Write a `[H, W]` (or `[1, H, W]`) tensor as a 16-bit P5 file. Values are
/// clamped to `[0, 1]` and scaled to the full sample range.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = plane_dims(image)?;
    let mut bytes = Vec::with_capacity(32 + 2 * h * w);
    bytes.extend_from_slice(format!("P5\n{w} {h}\n{PGM_MAXVAL}\n").as_bytes());
    for &v in image.data() {
        let q = (v.clamp(0.0, 1.0) * PGM_MAXVAL as f64).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a binary P5 file into a `[H, W]` tensor with values in `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut header = HeaderScanner::new(&bytes, path);
    let magic = header.token()?;
    if magic != b"P5" {
        return Err(header.error("expected P5 magic"));
    }
    let w = header.number()?;
    let h = header.number()?;
    let maxval = header.number()?;
    if !(1..=PGM_MAXVAL as usize).contains(&maxval) {
        return Err(header.error(&format!("maxval {maxval} out of range 1..=65535")));
    }
    if w == 0 || h == 0 {
        return Err(header.error("image extents must be positive"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let body = header.into_body()?;
    let wide = maxval > 255;
    let sample_bytes = if wide { 2 } else { 1 };
    let expected = w * h * sample_bytes;
    if body.len() != expected {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: format!(
                "raster holds {} bytes, expected {expected} for {w}×{h} at {sample_bytes} byte(s)/sample",
                body.len()
            ),
        });
    }
    let scale = 1.0 / maxval as f64;
    let mut data = Vec::with_capacity(w * h);
    if wide {
        for pair in body.chunks_exact(2) {
            data.push(u16::from_be_bytes([pair[0], pair[1]]) as f64 * scale);
        }
    } else {
        for &b in body {
            data.push(b as f64 * scale);
        }
    }
    Tensor::from_vec(&[h, w], data)
}

fn plane_dims(image: &Tensor) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w] => Ok((h, w)),
        [1, h, w] => Ok((h, w)),
        _ => Err(Error::InvalidArgument(format!(
            "PGM writer expects a [H, W] or [1, H, W] tensor, got {:?}",
            image.shape()
        ))),
    }
}

/// Whitespace/comment-aware tokenizer for the PGM header that tracks line
/// numbers for error messages.
struct HeaderScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
    line: usize,
    path: &'a Path,
}

impl<'a> HeaderScanner<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> HeaderScanner<'a> {
        HeaderScanner {
            bytes,
            pos: 0,
            line: 1,
            path,
        }
    }

    fn error(&self, msg: &str) -> Error {
        Error::Parse {
            path: self.path.display().to_string(),
            line: self.line,
            msg: msg.to_string(),
        }
    }

    fn skip_separators(&mut self) -> Result<()> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'\n') => {
                    self.line += 1;
                    self.pos += 1;
                }
                Some(b' ' | b'\t' | b'\r') => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            self.line += 1;
                            break;
                        }
                    }
                }
                Some(_) => return Ok(()),
                None => return Err(self.error("unexpected end of file in header")),
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_separators()?;
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() || b == b'#' {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error("expected a header token"));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.error(&format!("expected a number, got {:?}", String::from_utf8_lossy(tok))))
    }

    /// Consume the single whitespace byte after the last header field and
    /// return the raster.
    fn into_body(self) -> Result<&'a [u8]> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(&self.bytes[self.pos + 1..]),
            _ => Err(self.error("expected one whitespace byte before the raster")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let mut rng = SeededRng::new(77);
        let values = rng.fill_uniform(12 * 9);
        let img = Tensor::from_vec(&[12, 9], values).unwrap();
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.shape(), &[12, 9]);
        for (a, b) in img.data().iter().zip(back.data()) {
            // One quantization step of slack.
            assert!((a - b).abs() <= 0.5 / PGM_MAXVAL as f64 + 1e-12);
        }
        // A second write of the read-back image is byte-identical.
        let path2 = dir.path().join("img2.pgm");
        write_pgm(&path2, &back).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn reads_eight_bit_files_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("small.pgm");
        let mut bytes = b"P5\n# a comment line\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255, 64]);
        std::fs::write(&path, &bytes).unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!(img.shape(), &[2, 2]);
        assert!((img.at(&[0, 0]) - 0.0).abs() < 1e-12);
        assert!((img.at(&[1, 0]) - 1.0).abs() < 1e-12);
        assert!((img.at(&[0, 1]) - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn malformed_files_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P6\n2 2\n255\n0000").unwrap();
        match read_pgm(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&path, b"P5\n2 two\n255\n0000").unwrap();
        match read_pgm(&path) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("number"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        // Truncated raster.
        std::fs::write(&path, b"P5\n2 2\n65535\n\x00\x01").unwrap();
        assert!(matches!(read_pgm(&path), Err(Error::Parse { .. })));
        // Missing file surfaces an I/O error with the path.
        let missing = dir.path().join("absent.pgm");
        assert!(matches!(read_pgm(&missing), Err(Error::Io { .. })));
    }
}
