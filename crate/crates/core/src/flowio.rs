//! File formats: Middlebury `.flo`, binary PPM (P6), the `SEGM` score/label
//! container, and the Middlebury flow colour coding.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{ClassTable, FlowField, SegMap};

pub const FLO_MAGIC: f32 = 202021.25;

pub fn encode_flo(flow: &FlowField) -> Result<Vec<u8>> {
    if !flow.is_finite() {
        return Err(Error::Format("refusing to write a non-finite flow".into()));
    }
    if flow.width == 0 || flow.height == 0 {
        return Err(Error::Format("empty flow".into()));
    }
    let mut buf = Vec::with_capacity(12 + 8 * flow.len());
    buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(flow.width as i32).to_le_bytes());
    buf.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for (u, v) in flow.u.iter().zip(&flow.v) {
        buf.extend_from_slice(&u.to_le_bytes());
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::Format("flo header truncated".into()));
    }
    let word = |i: usize| <[u8; 4]>::try_from(&bytes[i * 4..i * 4 + 4]).expect("4 bytes");
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(Error::Format(format!("bad flo magic {magic}")));
    }
    let width = i32::from_le_bytes(word(1));
    let height = i32::from_le_bytes(word(2));
    if width <= 0 || height <= 0 {
        return Err(Error::Format(format!("nonpositive flo size {width}x{height}")));
    }
    let n = width as usize * height as usize;
    if bytes.len() != 12 + 8 * n {
        return Err(Error::Format(format!(
            "flo payload is {} bytes, expected {}",
            bytes.len() - 12,
            8 * n
        )));
    }
    let (mut u, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for p in 0..n {
        u.push(f32::from_le_bytes(word(3 + 2 * p)));
        v.push(f32::from_le_bytes(word(4 + 2 * p)));
    }
    FlowField::new(height as usize, width as usize, u, v)
}

pub fn write_flo(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_flo(flow)?)?;
    Ok(())
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flo(&fs::read(path)?)
}

/// 8-bit RGB raster, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut buf = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.reserve(self.pixels.len() * 3);
        for p in &self.pixels {
            buf.extend_from_slice(p);
        }
        buf
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        // header: magic, width, height, maxval, each separated by whitespace; '#' comments allowed
        let mut fields = Vec::new();
        let mut i = 0;
        while fields.len() < 4 {
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
                return Err(Error::Format("ppm header truncated".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
        }
        i += 1;
        if fields[0] != "P6" {
            return Err(Error::Format(format!("not a P6 ppm: {}", fields[0])));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad ppm header field {s:?}")))
        };
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("unsupported ppm maxval {maxval}")));
        }
        let n = width * height;
        if bytes.len() < i || bytes.len() - i != 3 * n {
            return Err(Error::Format("ppm payload size mismatch".into()));
        }
        let pixels = bytes[i..].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok(RgbImage {
            width,
            height,
            pixels,
        })
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode_ppm())?;
        Ok(())
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode_ppm(&fs::read(path)?)
    }
}

/// Middlebury colour wheel: red → yellow → green → cyan → blue → magenta.
const COLOR_WHEEL: [[u8; 3]; 55] = [
    [255, 0, 0], [255, 17, 0], [255, 34, 0], [255, 51, 0], [255, 68, 0],
    [255, 85, 0], [255, 102, 0], [255, 119, 0], [255, 136, 0], [255, 153, 0],
    [255, 170, 0], [255, 187, 0], [255, 204, 0], [255, 221, 0], [255, 238, 0],
    [255, 255, 0], [213, 255, 0], [170, 255, 0], [128, 255, 0], [85, 255, 0],
    [43, 255, 0], [0, 255, 0], [0, 255, 63], [0, 255, 127], [0, 255, 191],
    [0, 255, 255], [0, 232, 255], [0, 209, 255], [0, 186, 255], [0, 163, 255],
    [0, 140, 255], [0, 116, 255], [0, 93, 255], [0, 70, 255], [0, 47, 255],
    [0, 24, 255], [0, 0, 255], [19, 0, 255], [39, 0, 255], [58, 0, 255],
    [78, 0, 255], [98, 0, 255], [117, 0, 255], [137, 0, 255], [156, 0, 255],
    [176, 0, 255], [196, 0, 255], [215, 0, 255], [235, 0, 255], [255, 0, 255],
    [255, 0, 213], [255, 0, 170], [255, 0, 128], [255, 0, 85], [255, 0, 43],
];

pub fn color_wheel() -> &'static [[u8; 3]; 55] {
    &COLOR_WHEEL
}

/// Colour of one normalized flow vector (`|(u, v)| = 1` is full saturation).
pub fn flow_color(u: f32, v: f32) -> [u8; 3] {
    let ncols = COLOR_WHEEL.len();
    let rad = (u * u + v * v).sqrt();
    let a = (-v).atan2(-u) / std::f32::consts::PI;
    let fk = (a + 1.0) / 2.0 * (ncols - 1) as f32;
    let k0 = (fk.floor() as usize).min(ncols - 1);
    let k1 = (k0 + 1) % ncols;
    let f = fk - k0 as f32;
    let mut out = [0u8; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        let c0 = COLOR_WHEEL[k0][ch] as f32 / 255.0;
        let c1 = COLOR_WHEEL[k1][ch] as f32 / 255.0;
        let mut col = (1.0 - f) * c0 + f * c1;
        if rad <= 1.0 {
            col = 1.0 - rad * (1.0 - col);
        } else {
            col *= 0.75;
        }
        *o = (255.0 * col).floor() as u8;
    }
    out
}

/// Renders a flow field with the Middlebury colour coding. With `max_magnitude`
/// unset, the 99th percentile of the per-pixel magnitude is used.
pub fn flow_to_color(flow: &FlowField, max_magnitude: Option<f32>) -> Result<RgbImage> {
    let max = match max_magnitude {
        Some(m) if m > 0.0 && m.is_finite() => m,
        Some(m) => return Err(Error::Config(format!("max_magnitude must be > 0, got {m}"))),
        None => {
            let mut mags: Vec<f32> = flow
                .u
                .iter()
                .zip(&flow.v)
                .map(|(u, v)| (u * u + v * v).sqrt())
                .collect();
            mags.sort_by(f32::total_cmp);
            let q = mags
                .get(((mags.len() as f64 - 1.0) * 0.99).round() as usize)
                .copied()
                .unwrap_or(0.0);
            if q > 0.0 {
                q
            } else {
                1.0
            }
        }
    };
    let pixels = flow
        .u
        .iter()
        .zip(&flow.v)
        .map(|(&u, &v)| flow_color(u / max, v / max))
        .collect();
    Ok(RgbImage {
        width: flow.width,
        height: flow.height,
        pixels,
    })
}

/// Fixed RGB colour per class id.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Palette(pub Vec<[u8; 3]>);

impl Palette {
    /// Cityscapes colours by class name; unknown names get a hashed colour.
    pub fn for_table(table: &ClassTable) -> Self {
        Palette(
            table
                .names
                .iter()
                .enumerate()
                .map(|(i, n)| named_color(n).unwrap_or_else(|| hashed_color(i)))
                .collect(),
        )
    }

    pub fn color(&self, class: usize) -> Result<[u8; 3]> {
        self.0
            .get(class)
            .copied()
            .ok_or_else(|| Error::Domain(format!("no palette entry for class {class}")))
    }
}

fn named_color(name: &str) -> Option<[u8; 3]> {
    Some(match name {
        "road" => [128, 64, 128],
        "sidewalk" => [244, 35, 232],
        "building" => [70, 70, 70],
        "wall" => [102, 102, 156],
        "fence" => [190, 153, 153],
        "pole" => [153, 153, 153],
        "traffic light" => [250, 170, 30],
        "traffic sign" => [220, 220, 0],
        "vegetation" => [107, 142, 35],
        "terrain" => [152, 251, 152],
        "sky" => [70, 130, 180],
        "person" => [220, 20, 60],
        "rider" => [255, 0, 0],
        "car" => [0, 0, 142],
        "truck" => [0, 0, 70],
        "bus" => [0, 60, 100],
        "train" => [0, 80, 100],
        "motorcycle" => [0, 0, 230],
        "bicycle" => [119, 11, 32],
        _ => return None,
    })
}

fn hashed_color(i: usize) -> [u8; 3] {
    let h = (i as u32).wrapping_mul(2_654_435_761);
    [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
}

pub fn labels_to_image(labels: &[u8], width: usize, height: usize, palette: &Palette) -> Result<RgbImage> {
    let pixels = labels
        .iter()
        .map(|&l| palette.color(l as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(RgbImage {
        width,
        height,
        pixels,
    })
}

/// Writes the argmax label view of `seg` as a paletted PPM.
pub fn write_label_png_like(seg: &SegMap, palette: &Palette, path: impl AsRef<Path>) -> Result<()> {
    labels_to_image(&seg.labels(), seg.width, seg.height, palette)?.write_ppm(path)
}

/// Inverse of the paletted rendering: maps every colour back to its class id.
pub fn image_to_labels(img: &RgbImage, palette: &Palette) -> Result<Vec<u8>> {
    img.pixels
        .iter()
        .map(|px| {
            palette
                .0
                .iter()
                .position(|c| c == px)
                .map(|i| i as u8)
                .ok_or_else(|| Error::Format(format!("colour {px:?} not in palette")))
        })
        .collect()
}

pub fn read_label_ppm(path: impl AsRef<Path>, palette: &Palette) -> Result<Vec<u8>> {
    image_to_labels(&RgbImage::read_ppm(path)?, palette)
}

pub const SEGM_MAGIC: &[u8; 4] = b"SEGM";
pub const SEGM_VERSION: u16 = 1;

/// Payload type of a `SEGM` file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmDtype {
    /// `C×H×W` little-endian f32 class scores.
    Scores = 1,
    /// `H×W` u8 class ids; the `C` header field carries the class count.
    Labels = 2,
    /// `H×W` u8 0/1 mask; `C` is 1.
    Mask = 3,
}

/// Decoded `SEGM` payload.
#[derive(Clone, Debug, PartialEq)]
pub enum SegmPayload {
    Scores(SegMap),
    Labels {
        classes: usize,
        height: usize,
        width: usize,
        labels: Vec<u8>,
    },
    Mask {
        height: usize,
        width: usize,
        mask: Vec<bool>,
    },
}

fn segm_header(dtype: SegmDtype, h: usize, w: usize, c: usize) -> Result<Vec<u8>> {
    let fit = |x: usize| {
        u16::try_from(x).map_err(|_| Error::Format(format!("dimension {x} exceeds u16")))
    };
    let mut buf = Vec::with_capacity(16);
    buf.extend_from_slice(SEGM_MAGIC);
    buf.extend_from_slice(&SEGM_VERSION.to_le_bytes());
    buf.extend_from_slice(&fit(h)?.to_le_bytes());
    buf.extend_from_slice(&fit(w)?.to_le_bytes());
    buf.extend_from_slice(&fit(c)?.to_le_bytes());
    buf.extend_from_slice(&(dtype as u16).to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    Ok(buf)
}

pub fn encode_segm(payload: &SegmPayload) -> Result<Vec<u8>> {
    Ok(match payload {
        SegmPayload::Scores(seg) => {
            let mut buf = segm_header(SegmDtype::Scores, seg.height, seg.width, seg.classes)?;
            for s in &seg.scores {
                buf.extend_from_slice(&s.to_le_bytes());
            }
            buf
        }
        SegmPayload::Labels {
            classes,
            height,
            width,
            labels,
        } => {
            let mut buf = segm_header(SegmDtype::Labels, *height, *width, *classes)?;
            buf.extend_from_slice(labels);
            buf
        }
        SegmPayload::Mask {
            height,
            width,
            mask,
        } => {
            let mut buf = segm_header(SegmDtype::Mask, *height, *width, 1)?;
            buf.extend(mask.iter().map(|&m| m as u8));
            buf
        }
    })
}

pub fn decode_segm(bytes: &[u8]) -> Result<SegmPayload> {
    if bytes.len() < 16 || &bytes[..4] != SEGM_MAGIC {
        return Err(Error::Format("missing SEGM header".into()));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
    if u16_at(4) != SEGM_VERSION as usize {
        return Err(Error::Format(format!("unsupported SEGM version {}", u16_at(4))));
    }
    let (h, w, c, dtype) = (u16_at(6), u16_at(8), u16_at(10), u16_at(12));
    let body = &bytes[16..];
    let need = |n: usize| {
        if body.len() != n {
            Err(Error::Format(format!("SEGM payload {} bytes, expected {n}", body.len())))
        } else {
            Ok(())
        }
    };
    match dtype {
        1 => {
            need(4 * c * h * w)?;
            let scores = body
                .chunks(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok(SegmPayload::Scores(SegMap::new(c, h, w, scores)?))
        }
        2 => {
            need(h * w)?;
            if let Some(&bad) = body.iter().find(|&&l| l as usize >= c) {
                return Err(Error::Format(format!("label {bad} >= {c} classes")));
            }
            Ok(SegmPayload::Labels {
                classes: c,
                height: h,
                width: w,
                labels: body.to_vec(),
            })
        }
        3 => {
            need(h * w)?;
            Ok(SegmPayload::Mask {
                height: h,
                width: w,
                mask: body.iter().map(|&b| b != 0).collect(),
            })
        }
        t => Err(Error::Format(format!("unknown SEGM dtype {t}"))),
    }
}

pub fn write_segm(payload: &SegmPayload, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_segm(payload)?)?;
    Ok(())
}

pub fn read_segm(path: impl AsRef<Path>) -> Result<SegmPayload> {
    decode_segm(&fs::read(path)?)
}
