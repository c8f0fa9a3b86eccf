//! Binary PPM (`P6`) and PGM (`P5`) decoding.

/// A decoded image: `h * w * channels` samples scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl RawImage {
    /// Grayscale replicated to three channels; RGB unchanged.
    pub fn into_rgb(self) -> RawImage {
        if self.channels == 3 {
            return self;
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        RawImage {
            channels: 3,
            data,
            ..self
        }
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format!("missing {what} in header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| format!("{what} out of range"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<RawImage, String> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        Some(m) => return Err(format!("unsupported magic {:?}; expected binary P6 or P5", String::from_utf8_lossy(m))),
        None => return Err("file too short".into()),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(format!("maxval {maxval} outside 1..=65535"));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err("header not terminated by whitespace".into()),
    }
    let n = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(channels))
        .ok_or("image dimensions overflow")?;
    let width_bytes = if maxval < 256 { 1 } else { 2 };
    let raster = &bytes[h.pos..];
    if raster.len() < n * width_bytes {
        return Err(format!(
            "truncated raster: {} bytes, expected {}",
            raster.len(),
            n * width_bytes
        ));
    }
    let max = maxval as f32;
    let data: Vec<f32> = if width_bytes == 1 {
        raster[..n].iter().map(|&v| (v as f32 / max).min(1.0)).collect()
    } else {
        raster[..2 * n]
            .chunks_exact(2)
            .map(|b| (u16::from_be_bytes([b[0], b[1]]) as f32 / max).min(1.0))
            .collect()
    };
    Ok(RawImage {
        height,
        width,
        channels,
        data,
    })
}

/// Encodes 8-bit `P6` (3 channels) or `P5` (1 channel) from `[0, 1]` samples.
pub fn encode(img: &RawImage) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}
