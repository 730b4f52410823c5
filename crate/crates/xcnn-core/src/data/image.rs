//! Image decoding, encoding, and the geometric primitives the augmentation
//! pipeline is built from.
//!
//! Binary netpbm (P5 grayscale, P6 color) is parsed and written natively so
//! the on-disk format is bit-exact and dependency-free; PNG rides on the
//! `image` crate. In-memory, images are `Tensor<f32>` in CHW layout with
//! values in [0, 1].

use std::path::Path;

use crate::tensor::Tensor;

use super::DataError;

/// Interleaved 8-bit RGB, the exchange format between codecs and tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuf {
    pub width: usize,
    pub height: usize,
    /// row-major, 3 bytes per pixel
    pub pixels: Vec<u8>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, DataError> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(DataError::Format(format!(
                "buffer of {} bytes does not hold a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        Ok(ImageBuf {
            width,
            height,
            pixels,
        })
    }

    /// CHW unit-range tensor.
    pub fn to_unit_tensor(&self) -> Tensor<f32> {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let src = (y * w + x) * 3;
                for c in 0..3 {
                    data[c * h * w + y * w + x] = self.pixels[src + c] as f32 / 255.0;
                }
            }
        }
        Tensor::new(vec![3, h, w], data).expect("image shape")
    }

    /// Quantizes a [0,1] CHW tensor back to RGB8 (round-to-nearest).
    pub fn from_unit_tensor(image: &Tensor<f32>) -> Result<Self, DataError> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(DataError::Format(format!(
                "expected a 3xHxW tensor, got {shape:?}"
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        let data = image.data();
        let mut pixels = vec![0u8; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let dst = (y * w + x) * 3;
                for c in 0..3 {
                    let v = data[c * h * w + y * w + x].clamp(0.0, 1.0);
                    pixels[dst + c] = (v * 255.0 + 0.5) as u8;
                }
            }
        }
        ImageBuf::new(w, h, pixels)
    }
}

// ── netpbm ─────────────────────────────────────────────────────────────

struct PnmHeader {
    color: bool,
    width: usize,
    height: usize,
    maxval: u32,
    raster_at: usize,
}

/// Parses a P5/P6 header: magic, three decimal fields separated by
/// whitespace or `#` comments, then exactly one whitespace byte before the
/// raster.
fn parse_pnm_header(bytes: &[u8]) -> Result<PnmHeader, DataError> {
    let color = match bytes.get(..2) {
        Some(b"P5") => false,
        Some(b"P6") => true,
        _ => return Err(DataError::Format("not a binary P5/P6 netpbm file".into())),
    };
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while !matches!(bytes.get(pos), None | Some(b'\n')) {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(DataError::Format("truncated netpbm header".into())),
            }
        }
        let start = pos;
        while matches!(bytes.get(pos), Some(b) if b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err(DataError::Format("malformed netpbm header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| DataError::Format("netpbm header field overflows".into()))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(DataError::Format(
                "expected single whitespace before netpbm raster".into(),
            ))
        }
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(DataError::Format("netpbm image has a zero extent".into()));
    }
    if !(1..=255).contains(&maxval) {
        return Err(DataError::Format(format!(
            "unsupported netpbm maxval {maxval} (only single-byte samples)"
        )));
    }
    Ok(PnmHeader {
        color,
        width: width as usize,
        height: height as usize,
        maxval,
        raster_at: pos,
    })
}

/// Decodes binary PGM (P5) or PPM (P6); grayscale is replicated to RGB.
pub fn decode_netpbm(bytes: &[u8]) -> Result<ImageBuf, DataError> {
    let h = parse_pnm_header(bytes)?;
    let samples = h.width * h.height * if h.color { 3 } else { 1 };
    let raster = bytes
        .get(h.raster_at..h.raster_at + samples)
        .ok_or_else(|| DataError::Format("netpbm raster truncated".into()))?;
    let rescale = |v: u8| -> u8 {
        if h.maxval == 255 {
            v
        } else {
            ((v as u32 * 255 + h.maxval / 2) / h.maxval).min(255) as u8
        }
    };
    let mut pixels = Vec::with_capacity(h.width * h.height * 3);
    if h.color {
        pixels.extend(raster.iter().map(|&v| rescale(v)));
    } else {
        for &v in raster {
            let v = rescale(v);
            pixels.extend_from_slice(&[v, v, v]);
        }
    }
    ImageBuf::new(h.width, h.height, pixels)
}

/// Binary PPM with maxval 255. Decoding this output reproduces the buffer
/// bit-exactly.
pub fn encode_ppm(image: &ImageBuf) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

// ── File I/O ───────────────────────────────────────────────────────────

/// Loads any supported format (`.pgm`, `.ppm`, `.png`) as RGB8.
pub fn read_image(path: &Path) -> Result<ImageBuf, DataError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let decode_err = |reason: String| DataError::Decode {
        path: path.display().to_string(),
        reason,
    };
    match ext.as_str() {
        "pgm" | "ppm" => {
            let bytes = std::fs::read(path).map_err(|e| decode_err(e.to_string()))?;
            decode_netpbm(&bytes).map_err(|e| decode_err(e.to_string()))
        }
        "png" => {
            let img = image::open(path).map_err(|e| decode_err(e.to_string()))?;
            let rgb = img.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            ImageBuf::new(w, h, rgb.into_raw()).map_err(|e| decode_err(e.to_string()))
        }
        other => Err(decode_err(format!("unsupported image extension `{other}`"))),
    }
}

pub fn write_ppm(image: &ImageBuf, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, encode_ppm(image)).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn write_png(image: &ImageBuf, path: &Path) -> Result<(), DataError> {
    let buf = image::RgbImage::from_raw(
        image.width as u32,
        image.height as u32,
        image.pixels.clone(),
    )
    .expect("pixel count checked at construction");
    buf.save(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })
}

// ── Geometry ───────────────────────────────────────────────────────────

/// Bilinear sample with replicated (clamped) borders.
fn tap(plane: &[f32], h: usize, w: usize, sy: f64, sx: f64) -> f32 {
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let p = |y: usize, x: usize| plane[y * w + x] as f64;
    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
    let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
    (top * (1.0 - fy) + bot * fy) as f32
}

fn chw(image: &Tensor<f32>) -> (usize, usize, usize) {
    let s = image.shape();
    assert!(s.len() == 3, "expected a CxHxW image, got {s:?}");
    (s[0], s[1], s[2])
}

/// Bilinear resize with half-pixel-centered source coordinates:
/// src = (dst + 0.5) * (src_extent / dst_extent) - 0.5.
pub fn resize_bilinear(image: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let (c, h, w) = chw(image);
    assert!(oh > 0 && ow > 0);
    let (sy_scale, sx_scale) = (h as f64 / oh as f64, w as f64 / ow as f64);
    let mut out = vec![0.0f32; c * oh * ow];
    for ci in 0..c {
        let plane = &image.data()[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
        for oy in 0..oh {
            let sy = (oy as f64 + 0.5) * sy_scale - 0.5;
            for ox in 0..ow {
                let sx = (ox as f64 + 0.5) * sx_scale - 0.5;
                dst[oy * ow + ox] = tap(plane, h, w, sy, sx);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).expect("resize shape")
}

/// Rotation about the image center by `degrees` (counterclockwise),
/// bilinear resampling, replicated borders. Zero degrees is an exact copy.
pub fn rotate_about_center(image: &Tensor<f32>, degrees: f64) -> Tensor<f32> {
    let (c, h, w) = chw(image);
    let theta = degrees.to_radians();
    let (cos, sin) = (theta.cos(), theta.sin());
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let mut out = vec![0.0f32; c * h * w];
    for ci in 0..c {
        let plane = &image.data()[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            let dy = y as f64 + 0.5 - cy;
            for x in 0..w {
                let dx = x as f64 + 0.5 - cx;
                // inverse map: rotate destination offsets by -theta
                // (y grows downward, so the sin signs are mirrored)
                let sx = cos * dx - sin * dy + cx - 0.5;
                let sy = sin * dx + cos * dy + cy - 0.5;
                dst[y * w + x] = tap(plane, h, w, sy, sx);
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("rotate shape")
}

/// Center crop to `fraction` of each extent (at least 1 pixel), then resize
/// back to the original extents. Fraction 1.0 is an exact copy.
pub fn center_crop_resize(image: &Tensor<f32>, fraction: f64) -> Tensor<f32> {
    assert!(
        fraction > 0.0 && fraction <= 1.0,
        "crop fraction {fraction} outside (0, 1]"
    );
    if fraction == 1.0 {
        return image.clone();
    }
    let (c, h, w) = chw(image);
    let ch = ((h as f64 * fraction).round() as usize).clamp(1, h);
    let cw = ((w as f64 * fraction).round() as usize).clamp(1, w);
    let (oy, ox) = ((h - ch) / 2, (w - cw) / 2);
    let mut cropped = vec![0.0f32; c * ch * cw];
    for ci in 0..c {
        let plane = &image.data()[ci * h * w..(ci + 1) * h * w];
        let dst = &mut cropped[ci * ch * cw..(ci + 1) * ch * cw];
        for y in 0..ch {
            let src = (oy + y) * w + ox;
            dst[y * cw..(y + 1) * cw].copy_from_slice(&plane[src..src + cw]);
        }
    }
    let cropped = Tensor::new(vec![c, ch, cw], cropped).expect("crop shape");
    resize_bilinear(&cropped, h, w)
}

/// Mirror along the horizontal axis (left-right flip).
pub fn hflip(image: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = chw(image);
    let mut out = image.data().to_vec();
    for ci in 0..c {
        for y in 0..h {
            let row = &mut out[(ci * h + y) * w..(ci * h + y + 1) * w];
            row.reverse();
        }
    }
    Tensor::new(vec![c, h, w], out).expect("flip shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_image(h: usize, w: usize) -> Tensor<f32> {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push((c * h * w + y * w + x) as f32 / (3 * h * w) as f32);
                }
            }
        }
        Tensor::new(vec![3, h, w], data).unwrap()
    }

    #[test]
    fn ppm_roundtrip_is_bit_exact() {
        let img = ImageBuf::new(3, 2, (0..18).map(|v| (v * 13) as u8).collect()).unwrap();
        let bytes = encode_ppm(&img);
        assert_eq!(decode_netpbm(&bytes).unwrap(), img);
    }

    #[test]
    fn pgm_replicates_gray_to_rgb() {
        let bytes = b"P5\n2 1\n255\n\x10\x80";
        let img = decode_netpbm(bytes).unwrap();
        assert_eq!(img.pixels, vec![0x10, 0x10, 0x10, 0x80, 0x80, 0x80]);
    }

    #[test]
    fn header_comments_and_whitespace_are_tolerated() {
        let bytes = b"P6 # a comment\n# another\n 2\t1 #inline\n255\n\x01\x02\x03\x04\x05\x06";
        let img = decode_netpbm(bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.pixels[..3], [1, 2, 3]);
    }

    #[test]
    fn non_255_maxval_is_rescaled() {
        // maxval 3: sample 3 -> 255, 1 -> 85
        let bytes = b"P5\n1 2\n3\n\x03\x01";
        let img = decode_netpbm(bytes).unwrap();
        assert_eq!(img.pixels[0], 255);
        assert_eq!(img.pixels[3], 85);
    }

    #[test]
    fn truncated_raster_is_rejected() {
        let bytes = b"P6\n2 2\n255\n\x01\x02\x03";
        assert!(matches!(
            decode_netpbm(bytes),
            Err(DataError::Format(msg)) if msg.contains("truncated")
        ));
    }

    #[test]
    fn sixteen_bit_netpbm_is_rejected() {
        assert!(decode_netpbm(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }

    #[test]
    fn unit_tensor_roundtrip() {
        let img = ImageBuf::new(4, 3, (0..36).map(|v| (v * 7) as u8).collect()).unwrap();
        let back = ImageBuf::from_unit_tensor(&img.to_unit_tensor()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn resize_preserves_constants() {
        let img = Tensor::new(vec![3, 5, 7], vec![0.375f32; 105]).unwrap();
        let out = resize_bilinear(&img, 16, 16);
        assert_eq!(out.shape(), &[3, 16, 16]);
        for &v in out.data() {
            assert!((v - 0.375).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_to_same_extent_is_exact() {
        let img = ramp_image(6, 5);
        let out = resize_bilinear(&img, 6, 5);
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn downscale_by_two_averages_quads() {
        // With half-pixel centers, 4x4 -> 2x2 samples land exactly between
        // the four pixels of each quad.
        let data: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let img = Tensor::new(vec![1, 4, 4], data).unwrap();
        let out = resize_bilinear(&img, 2, 2);
        assert_eq!(out.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn rotation_by_zero_is_identity() {
        let img = ramp_image(8, 8);
        assert_eq!(rotate_about_center(&img, 0.0).data(), img.data());
    }

    #[test]
    fn quarter_turn_moves_a_corner_block() {
        // one bright pixel at the top-right corner of a 4x4 plane
        let mut data = vec![0.0f32; 16];
        data[3] = 1.0;
        let img = Tensor::new(vec![1, 4, 4], data).unwrap();
        let out = rotate_about_center(&img, 90.0);
        // counterclockwise: the top-right sample moves to the top-left
        assert!(out.data()[0] > 0.9, "{:?}", out.data());
        assert!(out.data()[3] < 0.1);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = ramp_image(5, 6);
        assert_eq!(hflip(&hflip(&img)).data(), img.data());
        assert_ne!(hflip(&img).data(), img.data());
    }

    #[test]
    fn crop_fraction_one_is_identity() {
        let img = ramp_image(6, 6);
        assert_eq!(center_crop_resize(&img, 1.0).data(), img.data());
    }

    #[test]
    fn crop_keeps_shape_and_recenters() {
        let img = ramp_image(8, 8);
        let out = center_crop_resize(&img, 0.5);
        assert_eq!(out.shape(), img.shape());
        // center pixel survives roughly in place
        let center = |t: &Tensor<f32>| t.data()[4 * 8 + 4];
        assert!((center(&out) - center(&img)).abs() < 0.1);
    }

    #[test]
    fn png_adapter_roundtrips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = ImageBuf::new(5, 4, (0..60).map(|v| (v * 3) as u8).collect()).unwrap();
        write_png(&img, &path).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
    }

    #[test]
    fn unknown_extension_is_a_decode_error() {
        let err = read_image(Path::new("/nonexistent/file.bmp")).unwrap_err();
        assert!(matches!(err, DataError::Decode { .. }));
    }
}
