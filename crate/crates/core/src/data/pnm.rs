//! Binary PPM (P6, 8-bit) and 16-bit PGM (P5, big-endian) codecs.

use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, px: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> RgbImage {
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        RgbImage {
            width: w,
            height: h,
            data,
        }
    }
}

/// Quantized height raster: `height = value * scale + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
    pub scale: f64,
    pub offset: f64,
}

impl HeightMap {
    pub fn new(width: usize, height: usize, scale: f64, offset: f64) -> Self {
        HeightMap {
            width,
            height,
            data: vec![0; width * height],
            scale,
            offset,
        }
    }

    pub fn height_at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x] as f64 * self.scale + self.offset
    }

    /// Stores the nearest representable value, saturating at the u16 range.
    pub fn set_height(&mut self, x: usize, y: usize, h: f64) {
        let q = ((h - self.offset) / self.scale).round().clamp(0.0, u16::MAX as f64);
        self.data[y * self.width + x] = q as u16;
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> HeightMap {
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            let start = y * self.width + x0;
            data.extend_from_slice(&self.data[start..start + w]);
        }
        HeightMap {
            width: w,
            height: h,
            data,
            ..*self
        }
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_pgm16(map: &HeightMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", map.width, map.height).into_bytes();
    for v in &map.data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn encode_meta(map: &HeightMap) -> String {
    format!("scale={}\noffset={}\n", map.scale, map.offset)
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    let fail = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(fail(format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(fail(format!("missing header field {k}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail(format!("bad header field {k}")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(fail("header must end with one whitespace byte".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(fail(format!("bad dimensions {width}x{height} maxval {maxval}")));
    }
    Ok(Header {
        width,
        height,
        maxval,
        data_start: pos,
    })
}

fn check_len(bytes: &[u8], h: &Header, expected: usize, path: &Path) -> Result<()> {
    let got = bytes.len() - h.data_start;
    if got != expected {
        let msg = if got > expected {
            format!("{} bytes of trailing data", got - expected)
        } else {
            format!("truncated raster: {got} of {expected} bytes")
        };
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg,
        });
    }
    Ok(())
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let h = parse_header(bytes, b"P6", path)?;
    if h.maxval != 255 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("only maxval 255 is supported, got {}", h.maxval),
        });
    }
    check_len(bytes, &h, h.width * h.height * 3, path)?;
    Ok(RgbImage {
        width: h.width,
        height: h.height,
        data: bytes[h.data_start..].to_vec(),
    })
}

/// Decodes a 16-bit P5 raster; `scale`/`offset` come from the sidecar.
pub fn decode_pgm16(bytes: &[u8], path: &Path, scale: f64, offset: f64) -> Result<HeightMap> {
    let h = parse_header(bytes, b"P5", path)?;
    if h.maxval < 256 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected a 16-bit raster, maxval {}", h.maxval),
        });
    }
    check_len(bytes, &h, h.width * h.height * 2, path)?;
    let data: Vec<u16> = bytes[h.data_start..]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    if let Some(v) = data.iter().find(|&&v| v as usize > h.maxval) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("sample {v} exceeds maxval {}", h.maxval),
        });
    }
    Ok(HeightMap {
        width: h.width,
        height: h.height,
        data,
        scale,
        offset,
    })
}

/// Parses a `scale=` / `offset=` sidecar; both keys required, nothing else.
pub fn decode_meta(text: &str, path: &Path) -> Result<(f64, f64)> {
    let (mut scale, mut offset) = (None, None);
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| perr(format!("expected key=value, got {line:?}")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| perr(format!("bad number {v:?}")))?;
        let slot = match k.trim() {
            "scale" => &mut scale,
            "offset" => &mut offset,
            other => return Err(perr(format!("unknown key {other:?}"))),
        };
        if slot.replace(v).is_some() {
            return Err(perr(format!("duplicate key {k:?}")));
        }
    }
    match (scale, offset) {
        (Some(s), Some(o)) if s > 0.0 && s.is_finite() && o.is_finite() => Ok((s, o)),
        _ => Err(Error::Format {
            path: path.to_path_buf(),
            msg: "sidecar needs a positive scale and a finite offset".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn ppm_round_trip() {
        let mut img = RgbImage::new(3, 2);
        img.put(2, 1, [1, 2, 3]);
        img.put(0, 0, [255, 0, 128]);
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(decode_ppm(&bytes, p()).unwrap(), img);
    }

    #[test]
    fn ppm_with_comments_and_garbage() {
        let mut bytes = b"P6 # made by hand\n2 1\n# c\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        assert_eq!(decode_ppm(&bytes, p()).unwrap().get(1, 0), [4, 5, 6]);
        bytes.push(0);
        let err = decode_ppm(&bytes, p()).unwrap_err().to_string();
        assert!(err.contains("trailing"), "{err}");
        bytes.truncate(bytes.len() - 2);
        assert!(decode_ppm(&bytes, p()).is_err());
        assert!(decode_ppm(b"P5\n1 1\n255\n\0", p()).is_err());
    }

    #[test]
    fn pgm_round_trip_and_quantization() {
        let mut m = HeightMap::new(2, 2, 0.01, 0.0);
        m.data = vec![0, 512, 65535, 7];
        let bytes = encode_pgm16(&m);
        let back = decode_pgm16(&bytes, p(), 0.01, 0.0).unwrap();
        assert_eq!(back, m);
        assert_eq!(bytes[bytes.len() - 8..bytes.len() - 6], [0, 0]);
        assert_eq!(bytes[bytes.len() - 6..bytes.len() - 4], [2, 0]);
        assert!((back.height_at(1, 0) - 5.12).abs() < 1e-12);
        let mut q = HeightMap::new(1, 1, 0.01, 0.0);
        q.set_height(0, 0, 1.734);
        assert_eq!(q.data[0], 173);
        q.set_height(0, 0, -3.0);
        assert_eq!(q.data[0], 0);
    }

    #[test]
    fn pgm_rejects_8bit_and_out_of_range() {
        assert!(decode_pgm16(b"P5\n1 1\n255\n\0", p(), 0.01, 0.0).is_err());
        assert!(decode_pgm16(b"P5\n1 1\n1000\n\x10\x00", p(), 0.01, 0.0).is_err());
    }

    #[test]
    fn meta_parsing() {
        assert_eq!(decode_meta("scale=0.01\noffset=0\n", p()).unwrap(), (0.01, 0.0));
        assert!(decode_meta("scale=0.01\n", p()).is_err());
        assert!(decode_meta("scale=0.01\noffset=0\nfoo=1\n", p()).is_err());
        assert!(decode_meta("scale=-1\noffset=0\n", p()).is_err());
        let m = HeightMap::new(1, 1, 0.01, 2.5);
        assert_eq!(decode_meta(&encode_meta(&m), p()).unwrap(), (0.01, 2.5));
    }

    #[test]
    fn crops() {
        let mut img = RgbImage::new(4, 3);
        img.put(2, 1, [9, 9, 9]);
        let c = img.crop(1, 1, 2, 2);
        assert_eq!((c.width, c.height, c.get(1, 0)), (2, 2, [9, 9, 9]));
        let mut m = HeightMap::new(4, 3, 0.01, 0.0);
        m.data[6] = 42;
        assert_eq!(m.crop(1, 1, 2, 2).data, vec![0, 42, 0, 0]);
    }
}
