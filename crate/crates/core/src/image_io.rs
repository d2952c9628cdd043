//! Image container, PPM/PNG I/O, bilinear resizing and the synthetic
//! content/style corpus used by the training tests.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `H×W×C` image with values in `[0, 1]`, stored row-major `(row, column, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("image dimensions must be positive".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidInput(format!("pixel value {bad} outside [0,1]")));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// `[1, H, W, C]` tensor.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::new(
            &[1, self.height, self.width, self.channels],
            self.data.iter().map(|&v| S::lit(v as f64)).collect(),
        )
    }

    /// Stacks images of equal shape into one `[B, H, W, C]` tensor.
    pub fn batch_tensor<S: Scalar>(images: &[&ImageTensor]) -> Result<Tensor<S>> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if (img.height, img.width, img.channels) != (first.height, first.width, first.channels) {
                return Err(Error::ShapeMismatch("images in a batch must share a shape".into()));
            }
            data.extend(img.data.iter().map(|&v| S::lit(v as f64)));
        }
        Ok(Tensor::new(
            &[images.len(), first.height, first.width, first.channels],
            data,
        ))
    }

    /// Image from sample `index` of an NHWC tensor, clamped to `[0, 1]`.
    pub fn from_tensor<S: Scalar>(t: &Tensor<S>, index: usize) -> Result<Self> {
        if t.rank() != 4 {
            return Err(Error::ShapeMismatch(format!("expected NHWC tensor, got {:?}", t.shape())));
        }
        let (h, w, c) = (t.shape()[1], t.shape()[2], t.shape()[3]);
        let n = h * w * c;
        let slice = &t.data()[index * n..(index + 1) * n];
        let mut data = Vec::with_capacity(n);
        for &v in slice {
            let v = v.as_f64();
            if !v.is_finite() {
                return Err(Error::InvalidInput("non-finite pixel".into()));
            }
            data.push(v.clamp(0.0, 1.0) as f32);
        }
        ImageTensor::new(h, w, c, data)
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_u8(v)).collect()
    }
}

fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    /// Format implied by a file extension; PPM for anything that is not `.png`.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("png") => ImageFormat::Png,
            _ => ImageFormat::Ppm,
        }
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes)
    } else {
        decode_ppm(&bytes)
    }
}

pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>, format: ImageFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        ImageFormat::Ppm => encode_ppm(img),
        ImageFormat::Png => encode_png(img)?,
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Binary P6 with maxval 255. Single-channel images are written as grey RGB.
pub fn encode_ppm(img: &ImageTensor) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    let raw = img.to_bytes();
    if img.channels == 3 {
        out.extend_from_slice(&raw);
    } else {
        for v in raw {
            out.extend_from_slice(&[v, v, v]);
        }
    }
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor> {
    if bytes.len() < 2 {
        return Err(Error::Malformed("file too short for an image header".into()));
    }
    if &bytes[..2] != b"P6" {
        let magic = String::from_utf8_lossy(&bytes[..2]).into_owned();
        return Err(Error::UnsupportedFormat(format!("magic {magic:?}; only binary P6 PPM and PNG are read")));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Malformed("truncated PPM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Malformed("non-numeric PPM header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Malformed("PPM header field out of range".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("PPM maxval {maxval}; only 8-bit (255) is supported")));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Malformed("missing whitespace after PPM header".into()));
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::Malformed("PPM dimensions overflow".into()))?;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(Error::Malformed(format!(
            "PPM payload has {} bytes, header promises {need}",
            payload.len()
        )));
    }
    let data = payload[..need].iter().map(|&b| b as f32 / 255.0).collect();
    ImageTensor::new(height, width, 3, data)
}

fn encode_png(img: &ImageTensor) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), img.width as u32, img.height as u32);
        enc.set_color(if img.channels == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Malformed(format!("png encode: {e}")))?;
        writer
            .write_image_data(&img.to_bytes())
            .map_err(|e| Error::Malformed(format!("png encode: {e}")))?;
    }
    Ok(out)
}

fn decode_png(bytes: &[u8]) -> Result<ImageTensor> {
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Malformed(format!("png: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Malformed(format!("png: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!(
            "PNG bit depth {:?}; only 8-bit is supported",
            info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let raw = &buf[..info.buffer_size()];
    let (channels, data): (usize, Vec<f32>) = match info.color_type {
        png::ColorType::Rgb => (3, raw.iter().map(|&b| b as f32 / 255.0).collect()),
        png::ColorType::Grayscale => (1, raw.iter().map(|&b| b as f32 / 255.0).collect()),
        png::ColorType::Rgba => (
            3,
            raw.chunks(4)
                .flat_map(|p| p[..3].iter().map(|&b| b as f32 / 255.0))
                .collect(),
        ),
        png::ColorType::GrayscaleAlpha => (1, raw.chunks(2).map(|p| p[0] as f32 / 255.0).collect()),
        other => return Err(Error::UnsupportedFormat(format!("PNG colour type {other:?}"))),
    };
    ImageTensor::new(h, w, channels, data)
}

/// Source taps `(lo, hi, frac)` for resizing an axis of `in_len` samples to
/// `out_len`, with pixel centres at half-integer positions.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize target must be at least 1x1".into()));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let ys = bilinear_taps(img.height, out_h);
    let xs = bilinear_taps(img.width, out_w);
    let c = img.channels;
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let top = img.get(y0, x0, ch) as f64 * (1.0 - fx) + img.get(y0, x1, ch) as f64 * fx;
                let bot = img.get(y1, x0, ch) as f64 * (1.0 - fx) + img.get(y1, x1, ch) as f64 * fx;
                data.push(((top * (1.0 - fy) + bot * fy) as f32).clamp(0.0, 1.0));
            }
        }
    }
    ImageTensor::new(out_h, out_w, c, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Stripes,
    Checker,
    Blobs,
    Noise,
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Stripes => "stripes",
            SynthKind::Checker => "checker",
            SynthKind::Blobs => "blobs",
            SynthKind::Noise => "noise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "stripes" => Some(SynthKind::Stripes),
            "checker" => Some(SynthKind::Checker),
            "blobs" => Some(SynthKind::Blobs),
            "noise" => Some(SynthKind::Noise),
            _ => None,
        }
    }
}

/// Recipe for a deterministic synthetic image set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub seed: u64,
    pub size: usize,
    pub count: usize,
    /// Band height for stripes and cell size for checkerboards.
    pub period: usize,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, seed: u64, size: usize, count: usize) -> Self {
        SynthSpec {
            kind,
            seed,
            size,
            count,
            period: 4,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("synthetic dataset count must be at least 1".into()));
        }
        if self.size < 8 {
            return Err(Error::InvalidArgument(format!("synthetic image size {} < 8", self.size)));
        }
        if self.period == 0 {
            return Err(Error::InvalidArgument("period must be positive".into()));
        }
        Ok(())
    }
}

const PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.12, 0.10],
    [0.10, 0.70, 0.20],
    [0.15, 0.25, 0.85],
    [0.95, 0.85, 0.10],
    [0.92, 0.50, 0.08],
    [0.55, 0.20, 0.70],
    [0.10, 0.80, 0.80],
    [0.08, 0.08, 0.10],
];

fn two_colors(rng: &mut ChaCha8Rng) -> ([f32; 3], [f32; 3]) {
    let a = rng.gen_range(0..PALETTE.len());
    let mut b = rng.gen_range(0..PALETTE.len() - 1);
    if b >= a {
        b += 1;
    }
    (PALETTE[a], PALETTE[b])
}

fn synth_one(kind: SynthKind, size: usize, period: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    let mut data = Vec::with_capacity(size * size * 3);
    match kind {
        SynthKind::Stripes => {
            let (a, b) = two_colors(rng);
            for r in 0..size {
                let c = if (r / period).is_multiple_of(2) { a } else { b };
                for _ in 0..size {
                    data.extend_from_slice(&c);
                }
            }
        }
        SynthKind::Checker => {
            let (a, b) = two_colors(rng);
            for r in 0..size {
                for col in 0..size {
                    let c = if (r / period + col / period).is_multiple_of(2) { a } else { b };
                    data.extend_from_slice(&c);
                }
            }
        }
        SynthKind::Blobs => {
            let bg = PALETTE[rng.gen_range(0..PALETTE.len())];
            let n = rng.gen_range(2..=3);
            let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..n)
                .map(|_| {
                    let s = size as f32;
                    (
                        rng.gen_range(0.15 * s..0.85 * s),
                        rng.gen_range(0.15 * s..0.85 * s),
                        rng.gen_range(s / 8.0..s / 4.0),
                        PALETTE[rng.gen_range(0..PALETTE.len())],
                    )
                })
                .collect();
            for r in 0..size {
                for col in 0..size {
                    let mut px = bg;
                    for &(cy, cx, rad, color) in &blobs {
                        let (dy, dx) = (r as f32 + 0.5 - cy, col as f32 + 0.5 - cx);
                        let w = (-(dy * dy + dx * dx) / (2.0 * rad * rad)).exp();
                        for ch in 0..3 {
                            px[ch] = px[ch] * (1.0 - w) + color[ch] * w;
                        }
                    }
                    data.extend(px.iter().map(|v| v.clamp(0.0, 1.0)));
                }
            }
        }
        SynthKind::Noise => {
            for _ in 0..size * size * 3 {
                data.push(rng.gen_range(0.0f32..=1.0));
            }
        }
    }
    ImageTensor::new(size, size, 3, data).expect("generator emits valid pixels")
}

/// The images described by `spec`, in index order.
pub fn synth_images(spec: &SynthSpec) -> Result<Vec<ImageTensor>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.count)
        .map(|_| synth_one(spec.kind, spec.size, spec.period, &mut rng))
        .collect())
}

/// Writes `<kind>_<seed>_<index>.ppm` files into `out_dir`.
pub fn synth_dataset(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let images = synth_images(spec)?;
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let path = dir.join(format!("{}_{}_{}.ppm", spec.kind.name(), spec.seed, i));
            save_image(img, &path, ImageFormat::Ppm)?;
            Ok(path)
        })
        .collect()
}

/// Loads every `.ppm`/`.png` file in `dir`, in [`list_images`] order.
pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<ImageTensor>> {
    list_images(dir)?.iter().map(load_image).collect()
}

/// The `.ppm`/`.png` files in `dir`, ordered by name with numeric runs
/// compared as numbers.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                Some(ref e) if e == "ppm" || e == "png"
            )
        })
        .collect();
    paths.sort_by_key(|p| natural_key(&p.file_name().unwrap_or_default().to_string_lossy()));
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!("no images in {}", dir.display())));
    }
    Ok(paths)
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
enum KeyPart {
    Text(String),
    Num(u128),
}

fn natural_key(name: &str) -> Vec<KeyPart> {
    let mut parts = Vec::new();
    let mut chars = name.chars().peekable();
    while let Some(&c) = chars.peek() {
        let digit = c.is_ascii_digit();
        let mut run = String::new();
        while let Some(&c) = chars.peek() {
            if c.is_ascii_digit() != digit {
                break;
            }
            run.push(c);
            chars.next();
        }
        parts.push(if digit {
            KeyPart::Num(run.parse().unwrap_or(u128::MAX))
        } else {
            KeyPart::Text(run)
        });
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ppm(w: usize, h: usize, payload: &[u8]) -> Vec<u8> {
        let mut v = format!("P6\n{w} {h}\n255\n").into_bytes();
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn ppm_all_255_decodes_to_ones() {
        let img = decode_ppm(&ppm(2, 2, &[255; 12])).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (2, 2, 3));
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ppm_zero_payload_decodes_to_zeros() {
        let img = decode_ppm(&ppm(2, 2, &[0; 12])).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ppm_byte_maps_to_v_over_255() {
        let payload: Vec<u8> = (0..12).map(|i| i * 20).collect();
        let img = decode_ppm(&ppm(2, 2, &payload)).unwrap();
        for (b, v) in payload.iter().zip(img.data()) {
            assert_eq!(*v, *b as f32 / 255.0);
        }
    }

    #[test]
    fn p5_is_unsupported() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_ppm(&bytes), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn truncated_and_deep_ppm_rejected() {
        assert!(matches!(decode_ppm(&ppm(2, 2, &[0; 11])), Err(Error::Malformed(_))));
        assert!(matches!(decode_ppm(b"P6\n2 2"), Err(Error::Malformed(_))));
        let mut deep = b"P6\n1 1\n65535\n".to_vec();
        deep.extend_from_slice(&[0; 6]);
        assert!(matches!(decode_ppm(&deep), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 51]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 0.2]);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_image("/nonexistent/x.ppm"), Err(Error::Io { .. })));
    }

    #[test]
    fn roundtrip_half_and_one() {
        let dir = tempfile::tempdir().unwrap();
        for fmt in [ImageFormat::Ppm, ImageFormat::Png] {
            let p = dir.path().join("x.img");
            let half = ImageTensor::filled(3, 4, 3, 0.5).unwrap();
            save_image(&half, &p, fmt).unwrap();
            let back = load_image(&p).unwrap();
            for &v in back.data() {
                assert!(v == 127.0 / 255.0 || v == 128.0 / 255.0);
            }
            let ones = ImageTensor::filled(3, 4, 3, 1.0).unwrap();
            save_image(&ones, &p, fmt).unwrap();
            assert!(load_image(&p).unwrap().data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn png_grey_roundtrip_keeps_one_channel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let img = ImageTensor::new(1, 3, 1, vec![0.0, 0.4, 1.0]).unwrap();
        save_image(&img, &p, ImageFormat::Png).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.channels(), 1);
        assert!(back.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() <= 1.0 / 255.0));
    }

    #[test]
    fn stripes_roundtrip_within_one_quantum() {
        let dir = tempfile::tempdir().unwrap();
        let img = &synth_images(&SynthSpec::new(SynthKind::Stripes, 3, 16, 1)).unwrap()[0];
        let p = dir.path().join("s.ppm");
        save_image(img, &p, ImageFormat::Ppm).unwrap();
        let back = load_image(&p).unwrap();
        let err = img
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err <= 1.0 / 255.0 + 1e-7, "max error {err}");
    }

    #[test]
    fn unwritable_path_errors() {
        let img = ImageTensor::filled(1, 1, 3, 0.0).unwrap();
        assert!(save_image(&img, "/nonexistent/dir/x.ppm", ImageFormat::Ppm).is_err());
    }

    #[test]
    fn resize_identity_center_and_constant() {
        let img = synth_images(&SynthSpec::new(SynthKind::Blobs, 1, 8, 1)).unwrap().remove(0);
        assert_eq!(resize_bilinear(&img, 8, 8).unwrap(), img);

        let ramp = ImageTensor::new(2, 2, 1, vec![0.0, 0.1, 0.2, 0.3]).unwrap();
        let one = resize_bilinear(&ramp, 1, 1).unwrap();
        assert!((one.data()[0] - 0.15).abs() < 1e-7);

        let c = ImageTensor::filled(5, 7, 3, 0.3).unwrap();
        for (h, w) in [(1, 1), (3, 11), (10, 2)] {
            let r = resize_bilinear(&c, h, w).unwrap();
            assert!(r.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        }
        assert!(resize_bilinear(&c, 0, 3).is_err());
    }

    #[test]
    fn bilinear_taps_two_to_one_is_center() {
        // [[0,1],[2,3]] at the single output centre: 1.5
        let t = bilinear_taps(2, 1);
        assert_eq!(t, vec![(0, 1, 0.5)]);
        let grid = [[0.0, 1.0], [2.0, 3.0]];
        let (lo, hi, f) = t[0];
        let top = grid[lo][lo] * (1.0 - f) + grid[lo][hi] * f;
        let bot = grid[hi][lo] * (1.0 - f) + grid[hi][hi] * f;
        assert_eq!(top * (1.0 - f) + bot * f, 1.5);
    }

    #[test]
    fn linear_ramp_upsampling_matches_analytic_interpolation() {
        // 4-pixel ramp sampled at x (centres 0.5..3.5), resized to 8 pixels;
        // interior output centres map to src = (o+0.5)/2 - 0.5.
        let vals: Vec<f32> = (0..4).map(|i| i as f32 * 0.2).collect();
        let img = ImageTensor::new(1, 4, 1, vals).unwrap();
        let r = resize_bilinear(&img, 1, 8).unwrap();
        for o in 1..7 {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 3.0);
            assert!((r.data()[o] as f64 - 0.2 * src).abs() < 1e-6);
        }
    }

    #[test]
    fn synth_is_deterministic_and_stripes_are_banded() {
        let spec = SynthSpec::new(SynthKind::Stripes, 42, 16, 3);
        assert_eq!(synth_images(&spec).unwrap(), synth_images(&spec).unwrap());
        for img in synth_images(&spec).unwrap() {
            for r in 0..16 {
                let band = r / 4;
                for col in 0..16 {
                    for ch in 0..3 {
                        assert_eq!(img.get(r, col, ch), img.get(band * 4, 0, ch));
                    }
                }
            }
            let px = |r: usize| (0..3).map(|c| img.get(r, 0, c)).collect::<Vec<_>>();
            assert_ne!(px(0), px(4));
        }
    }

    #[test]
    fn synth_rejects_bad_specs() {
        let mut spec = SynthSpec::new(SynthKind::Noise, 1, 16, 0);
        assert!(synth_images(&spec).is_err());
        spec.count = 1;
        spec.size = 4;
        assert!(synth_images(&spec).is_err());
    }

    #[test]
    fn synth_dataset_files_are_bit_identical() {
        let spec = SynthSpec::new(SynthKind::Checker, 5, 8, 2);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pa = synth_dataset(&spec, a.path()).unwrap();
        let pb = synth_dataset(&spec, b.path()).unwrap();
        assert_eq!(pa[1].file_name().unwrap(), "checker_5_1.ppm");
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        let loaded = load_dir(a.path()).unwrap();
        assert_eq!(loaded.len(), 2);
    }

    #[test]
    fn natural_order_sorts_numbers() {
        let mut names = vec!["a_1_10.ppm", "a_1_2.ppm", "a_1_1.ppm"];
        names.sort_by_key(|n| natural_key(n));
        assert_eq!(names, vec!["a_1_1.ppm", "a_1_2.ppm", "a_1_10.ppm"]);
    }
}
