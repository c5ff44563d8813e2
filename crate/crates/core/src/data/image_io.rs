//! 8-bit RGB PNG and binary PPM (P6) reading and writing.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Png,
    Ppm,
}

fn format_of(path: &Path) -> Result<Format> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => Ok(Format::Png),
        Some("ppm") => Ok(Format::Ppm),
        _ => Err(Error::Image {
            path: path.into(),
            msg: "unsupported extension, expected .png or .ppm".into(),
        }),
    }
}

fn image_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image {
        path: path.into(),
        msg: msg.into(),
    }
}

/// Reads an image as `[1, 3, H, W]` with values `byte / 255`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, rgb) = match format_of(path)? {
        Format::Png => decode_png(&bytes).map_err(|m| image_err(path, m))?,
        Format::Ppm => decode_ppm(&bytes).map_err(|m| image_err(path, m))?,
    };
    Ok(from_interleaved(w, h, &rgb))
}

/// Writes the first sample of an `[N, 3, H, W]` tensor, clamped to `[0, 1]`
/// and rounded to 8 bits. The format follows the file extension.
pub fn save_image<T: Float>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let format = format_of(path)?;
    let (w, h, rgb) = to_interleaved(t)?;
    let bytes = match format {
        Format::Png => encode_png(w, h, &rgb).map_err(|m| image_err(path, m))?,
        Format::Ppm => encode_ppm(w, h, &rgb),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn from_interleaved(w: usize, h: usize, rgb: &[u8]) -> Tensor<f32> {
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[1, 3, h, w], data).expect("sizes agree")
}

fn to_interleaved<T: Float>(t: &Tensor<T>) -> Result<(usize, usize, Vec<u8>)> {
    let (_, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::dim("save_image", format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let d = t.data();
    let mut rgb = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            let v = d[ch * plane + i].f64().clamp(0.0, 1.0);
            rgb.push((v * 255.0).round() as u8);
        }
    }
    Ok((w, h, rgb))
}

fn decode_png(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| "image too large".to_string())?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(format!(
            "expected 8-bit RGB, found {:?} at {:?}",
            info.color_type, info.bit_depth
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut rgb = Vec::with_capacity(w * h * 3);
    for row in buf.chunks(info.line_size).take(h) {
        rgb.extend_from_slice(&row[..w * 3]);
    }
    Ok((w, h, rgb))
}

fn encode_png(w: usize, h: usize, rgb: &[u8]) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| e.to_string())?;
        writer.write_image_data(rgb).map_err(|e| e.to_string())?;
        writer.finish().map_err(|e| e.to_string())?;
    }
    Ok(out)
}

/// Splits the header of a P6 file into its four fields, skipping `#`
/// comments, and returns them with the offset of the pixel data.
fn ppm_header(bytes: &[u8]) -> std::result::Result<([String; 4], usize), String> {
    let mut fields: Vec<String> = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        if i >= bytes.len() {
            return Err("truncated header".into());
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    if i >= bytes.len() {
        return Err("truncated header".into());
    }
    let f: [String; 4] = fields.try_into().expect("four fields");
    Ok((f, i + 1))
}

fn decode_ppm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let (f, offset) = ppm_header(bytes)?;
    if f[0] != "P6" {
        return Err(format!("unsupported magic {:?}, expected P6", f[0]));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} {s:?}"));
    let (w, h, max) = (num(&f[1], "width")?, num(&f[2], "height")?, num(&f[3], "maxval")?);
    if max != 255 {
        return Err(format!("maxval {max} unsupported, expected 255"));
    }
    let need = w
        .checked_mul(h)
        .and_then(|p| p.checked_mul(3))
        .ok_or_else(|| "image too large".to_string())?;
    let data = &bytes[offset..];
    if data.len() < need {
        return Err(format!("truncated raster: {} of {need} bytes", data.len()));
    }
    Ok((w, h, data[..need].to_vec()))
}

fn encode_ppm(w: usize, h: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}
