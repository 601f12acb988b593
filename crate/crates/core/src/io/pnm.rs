//! PGM/PPM (P2, P3, P5, P6) with maxval 255.

use std::path::Path;

use super::{read_file, write_file, IoError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB), interleaved.
    pub channels: usize,
    pub data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        ImageBuffer {
            width,
            height,
            channels,
            data: vec![0; width * height * channels],
        }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn get_f(&self, x: usize, y: usize, c: usize) -> f64 {
        self.get(x, y, c) as f64 / 255.0
    }

    pub fn to_floats(&self) -> Vec<f64> {
        self.data.iter().map(|&b| b as f64 / 255.0).collect()
    }

    pub fn from_floats(width: usize, height: usize, channels: usize, v: &[f64]) -> Self {
        assert_eq!(v.len(), width * height * channels);
        ImageBuffer {
            width,
            height,
            channels,
            data: v.iter().map(|&f| float_to_byte(f)).collect(),
        }
    }
}

/// Clamp to [0, 1] and round half up.
pub fn float_to_byte(f: f64) -> u8 {
    let f = if f.is_nan() { 0.0 } else { f.clamp(0.0, 1.0) };
    (f * 255.0 + 0.5).floor() as u8
}

pub fn gray_of_rgb(r: f64, g: f64, b: f64) -> f64 {
    0.212673 * r + 0.715152 * g + 0.072175 * b
}

/// Rescale an RGB triple so its gray value matches `target`; when the triple
/// is (nearly) black the gray value is used on all channels.
pub fn colorize_scale(rgb: [f64; 3], target: f64) -> [f64; 3] {
    let g = gray_of_rgb(rgb[0], rgb[1], rgb[2]);
    if g < 1e-6 {
        return [target; 3];
    }
    let s = target / g;
    [rgb[0] * s, rgb[1] * s, rgb[2] * s]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnmFormat {
    Ascii,
    Binary,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            if c == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u64, IoError> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(IoError::MalformedHeader(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("digits")
            .parse()
            .map_err(|_| IoError::MalformedHeader(format!("{what} too large")))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<ImageBuffer, IoError> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(IoError::MalformedHeader("missing P magic".into()));
    }
    let (channels, format) = match bytes[1] {
        b'2' => (1, PnmFormat::Ascii),
        b'3' => (3, PnmFormat::Ascii),
        b'5' => (1, PnmFormat::Binary),
        b'6' => (3, PnmFormat::Binary),
        other => {
            return Err(IoError::MalformedHeader(format!(
                "unsupported magic P{}",
                other as char
            )))
        }
    };
    let mut h = Header { bytes, pos: 2 };
    if h.pos < bytes.len() && !bytes[h.pos].is_ascii_whitespace() && bytes[h.pos] != b'#' {
        return Err(IoError::MalformedHeader("no separator after magic".into()));
    }
    let width = h.number("width")? as usize;
    let height = h.number("height")? as usize;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(IoError::MalformedHeader("zero dimension".into()));
    }
    if maxval != 255 {
        return Err(IoError::BadMaxval(maxval));
    }
    let n = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(channels))
        .ok_or_else(|| IoError::MalformedHeader("dimensions overflow".into()))?;
    let data = match format {
        PnmFormat::Binary => {
            if h.pos >= bytes.len() || !bytes[h.pos].is_ascii_whitespace() {
                return Err(IoError::MalformedHeader("no separator before raster".into()));
            }
            let raster = &bytes[h.pos + 1..];
            if raster.len() < n {
                return Err(IoError::Truncated {
                    expected: n,
                    got: raster.len(),
                });
            }
            raster[..n].to_vec()
        }
        PnmFormat::Ascii => {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                h.skip_space();
                if h.pos >= bytes.len() {
                    return Err(IoError::Truncated {
                        expected: n,
                        got: out.len(),
                    });
                }
                let v = h.number("sample").map_err(|_| {
                    IoError::BadSample(format!("at byte {}", h.pos))
                })?;
                if v > 255 {
                    return Err(IoError::BadSample(v.to_string()));
                }
                out.push(v as u8);
            }
            out
        }
    };
    Ok(ImageBuffer {
        width,
        height,
        channels,
        data,
    })
}

pub fn encode_pnm(img: &ImageBuffer, format: PnmFormat) -> Vec<u8> {
    let magic = match (img.channels, format) {
        (1, PnmFormat::Ascii) => "P2",
        (3, PnmFormat::Ascii) => "P3",
        (1, PnmFormat::Binary) => "P5",
        (3, PnmFormat::Binary) => "P6",
        (c, _) => panic!("cannot encode {c}-channel image"),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    match format {
        PnmFormat::Binary => out.extend_from_slice(&img.data),
        PnmFormat::Ascii => {
            let per_line = img.width * img.channels;
            for row in img.data.chunks(per_line) {
                let line: Vec<String> = row.iter().map(|b| b.to_string()).collect();
                out.extend_from_slice(line.join(" ").as_bytes());
                out.push(b'\n');
            }
        }
    }
    out
}

pub fn read_image(path: &Path) -> Result<ImageBuffer, IoError> {
    decode_pnm(&read_file(path)?)
}

/// Binary PGM/PPM.
pub fn write_image(path: &Path, img: &ImageBuffer) -> Result<(), IoError> {
    write_file(path, &encode_pnm(img, PnmFormat::Binary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_p3() {
        let src = b"P3\n# two by two\n2 2\n255\n255 0 0  0 255 0\n0 0 255  10 20 30\n";
        let img = decode_pnm(src).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 2, 3));
        assert_eq!(img.data, vec![255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30]);
        assert_eq!(decode_pnm(&encode_pnm(&img, PnmFormat::Ascii)).unwrap(), img);
    }

    #[test]
    fn binary_round_trip_is_byte_identical() {
        let mut img = ImageBuffer::new(5, 3, 3);
        for (k, b) in img.data.iter_mut().enumerate() {
            *b = (k * 37 % 256) as u8;
        }
        let bytes = encode_pnm(&img, PnmFormat::Binary);
        let back = decode_pnm(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(encode_pnm(&back, PnmFormat::Binary), bytes);
        let g = ImageBuffer { channels: 1, data: vec![7; 15], ..img.clone() };
        assert_eq!(decode_pnm(&encode_pnm(&g, PnmFormat::Binary)).unwrap(), g);
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(decode_pnm(b"P7\n1 1\n255\n"), Err(IoError::MalformedHeader(_))));
        assert!(matches!(decode_pnm(b"P6\n1\n"), Err(IoError::MalformedHeader(_))));
        assert!(matches!(decode_pnm(b"P6\n1 1\n65535\n"), Err(IoError::BadMaxval(65535))));
        assert!(matches!(
            decode_pnm(b"P6\n2 1\n255\nabc"),
            Err(IoError::Truncated { expected: 6, got: 3 })
        ));
        assert!(matches!(decode_pnm(b"P2\n2 1\n255\n1"), Err(IoError::Truncated { .. })));
    }

    #[test]
    fn float_write_clamps_and_rounds_half_up() {
        assert_eq!(float_to_byte(1.2), 255);
        assert_eq!(float_to_byte(-0.5), 0);
        assert_eq!(float_to_byte(0.5), 128);
        assert_eq!(float_to_byte(1.0 / 255.0), 1);
    }

    #[test]
    fn gray_and_colorize() {
        assert!((gray_of_rgb(1.0, 1.0, 1.0) - 1.0).abs() < 1e-9);
        assert_eq!(gray_of_rgb(1.0, 0.0, 0.0), 0.212673);
        assert_eq!(gray_of_rgb(0.0, 0.0, 0.0), 0.0);
        let c = colorize_scale([0.2, 0.4, 0.1], 0.6);
        assert!((gray_of_rgb(c[0], c[1], c[2]) - 0.6).abs() < 1e-12);
        assert_eq!(colorize_scale([0.0; 3], 0.3), [0.3; 3]);
    }
}
