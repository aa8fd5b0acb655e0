//! Depth maps as PFM or 16-bit PNG.

use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma};

use crate::error::{Error, Result};

/// Little-endian grayscale PFM, rows stored bottom to top as the format requires.
pub fn encode_pfm(width: usize, height: usize, values: &[f32]) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "pfm buffer size");
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(values.len() * 4);
    for y in (0..height).rev() {
        for v in &values[y * width..(y + 1) * width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Pfm {
            path: self.path.to_path_buf(),
            offset: self.at,
            message: message.into(),
        }
    }

    fn token(&mut self) -> Result<(usize, &str)> {
        while self.at < self.bytes.len() && self.bytes[self.at].is_ascii_whitespace() {
            self.at += 1;
        }
        let start = self.at;
        while self.at < self.bytes.len() && !self.bytes[self.at].is_ascii_whitespace() {
            self.at += 1;
        }
        if start == self.at {
            return Err(self.fail("unexpected end of header"));
        }
        std::str::from_utf8(&self.bytes[start..self.at])
            .map(|t| (start, t))
            .map_err(|_| Error::Pfm {
                path: self.path.to_path_buf(),
                offset: start,
                message: "header is not ASCII".into(),
            })
    }
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut c = Cursor { bytes, at: 0, path };
    let (_, magic) = c.token()?;
    match magic {
        "Pf" => {}
        "PF" => {
            return Err(Error::Pfm {
                path: path.into(),
                offset: 0,
                message: "color PFM is not a depth map".into(),
            })
        }
        _ => {
            return Err(Error::Pfm {
                path: path.into(),
                offset: 0,
                message: format!("bad magic `{magic}`"),
            })
        }
    }
    let dim = |c: &mut Cursor| -> Result<usize> {
        let (start, t) = c.token()?;
        let t = t.to_string();
        t.parse::<usize>().ok().filter(|v| *v > 0).ok_or_else(|| Error::Pfm {
            path: path.into(),
            offset: start,
            message: format!("bad dimension `{t}`"),
        })
    };
    let width = dim(&mut c)?;
    let height = dim(&mut c)?;
    let (start, scale_tok) = c.token()?;
    let scale_tok = scale_tok.to_string();
    let scale: f64 = scale_tok
        .parse()
        .ok()
        .filter(|s: &f64| *s != 0.0 && s.is_finite())
        .ok_or_else(|| Error::Pfm {
            path: path.into(),
            offset: start,
            message: format!("bad scale `{scale_tok}`"),
        })?;
    if c.at >= bytes.len() || !bytes[c.at].is_ascii_whitespace() {
        return Err(c.fail("missing separator before data"));
    }
    c.at += 1;
    let need = width * height * 4;
    if bytes.len() - c.at != need {
        return Err(c.fail(format!("expected {need} data bytes, found {}", bytes.len() - c.at)));
    }
    let little = scale < 0.0;
    let data = &bytes[c.at..];
    let mut values = vec![0f32; width * height];
    for (k, chunk) in data.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (row, col) = (k / width, k % width);
        values[(height - 1 - row) * width + col] = v;
    }
    Ok((width, height, values))
}

/// Depth `d` stored as `round(d · scale)`, clamped to the 16-bit range.
pub fn encode_png16(width: usize, height: usize, depth: &[f64], scale: f64) -> Result<Vec<u8>> {
    let raw: Vec<u16> = depth
        .iter()
        .map(|d| (d * scale).round().clamp(0.0, 65535.0) as u16)
        .collect();
    let img = ImageBuffer::<Luma<u16>, _>::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| Error::Shape(format!("{} depth values for {width}x{height}", depth.len())))?;
    encode_png(&img)
}

pub(crate) fn encode_png<P>(img: &ImageBuffer<P, Vec<P::Subpixel>>) -> Result<Vec<u8>>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
{
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Domain(format!("png encode: {e}")))?;
    Ok(out.into_inner())
}

pub fn decode_png16(bytes: &[u8], path: &Path, scale: f64) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::load(path, format!("png decode: {e}")))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let luma = img.into_luma16();
    Ok((
        w,
        h,
        luma.into_raw().into_iter().map(|v| f64::from(v) / scale).collect(),
    ))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes via a temporary sibling and a rename so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pfm_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (w, h) = (7, 5);
        let v: Vec<f32> = (0..w * h).map(|_| rng.gen_range(-1e3f32..1e3)).collect();
        let bytes = encode_pfm(w, h, &v);
        let (w2, h2, back) = decode_pfm(&bytes, Path::new("x.pfm")).unwrap();
        assert_eq!((w2, h2), (w, h));
        assert_eq!(
            back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn pfm_row_order_and_endianness() {
        // Big-endian file, bottom row first.
        let mut bytes = b"Pf\n2 2\n1.0\n".to_vec();
        for v in [3.0f32, 4.0, 1.0, 2.0] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        let (_, _, v) = decode_pfm(&bytes, Path::new("b.pfm")).unwrap();
        assert_eq!(v, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn malformed_pfm_reports_offset() {
        let p = Path::new("bad.pfm");
        let offset = |b: &[u8]| match decode_pfm(b, p) {
            Err(Error::Pfm { offset, .. }) => offset,
            other => panic!("{other:?}"),
        };
        assert_eq!(offset(b"P6\n1 1\n-1\n...."), 0);
        assert_eq!(offset(b"Pf\n1 x\n-1\n...."), 5);
        assert_eq!(offset(b"Pf\n1 1\n0\n...."), 7);
        assert_eq!(offset(b"Pf\n1 1\n-1\n..."), 10);
        let msg = decode_pfm(b"Pf\n2", p).unwrap_err().to_string();
        assert!(msg.contains("bad.pfm") && msg.contains("byte"), "{msg}");
    }

    #[test]
    fn png16_quantization() {
        let d = vec![1.2345, 0.0, 2.0, 70.0];
        let bytes = encode_png16(2, 2, &d, 1000.0).unwrap();
        let (w, h, back) = decode_png16(&bytes, Path::new("d.png"), 1000.0).unwrap();
        assert_eq!((w, h), (2, 2));
        assert!(back[0] == 1.234 || back[0] == 1.235, "{}", back[0]);
        assert_eq!(back[1], 0.0);
        assert_eq!(back[2], 2.0);
        assert_eq!(back[3], 65.535);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/a.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
