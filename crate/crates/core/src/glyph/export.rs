use crate::error::{Error, Result};
use crate::image::Image;
use std::path::Path;

/// 8-bit quantization with round-half-to-even.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

fn bytes(image: &Image) -> Vec<u8> {
    image.data().iter().map(|&v| quantize(v)).collect()
}

/// Binary PPM (P6).
pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(bytes(image));
    out
}

pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width() as u32, image.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(format!("png header: {e}")))?;
        writer
            .write_image_data(&bytes(image))
            .map_err(|e| Error::Format(format!("png data: {e}")))?;
    }
    Ok(out)
}

/// Writes PNG or PPM depending on the file extension.
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let payload = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => encode_png(image)?,
        Some("ppm") => encode_ppm(image),
        _ => {
            return Err(Error::config(
                "output",
                format!("{} must end in .png or .ppm", path.display()),
            ))
        }
    };
    std::fs::write(path, payload).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_even() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-3.0), 0);
        // 0.5 * 255 = 127.5 → 128 (even)
        assert_eq!(quantize(0.5), 128);
        // 2.5 / 255 → 2.5 → 2
        assert_eq!(quantize(2.5 / 255.0), 2);
    }

    #[test]
    fn ppm_header_and_size() {
        let img = Image::filled(3, 4, [1.0, 0.0, 0.5]);
        let ppm = encode_ppm(&img);
        assert!(ppm.starts_with(b"P6\n4 3\n255\n"));
        assert_eq!(ppm.len(), 11 + 3 * 4 * 3);
    }

    #[test]
    fn png_decodes_to_same_dims() {
        let img = Image::filled(5, 7, [0.2, 0.4, 0.6]);
        let data = encode_png(&img).unwrap();
        let decoder = png::Decoder::new(std::io::Cursor::new(data));
        let reader = decoder.read_info().unwrap();
        let info = reader.info();
        assert_eq!((info.width, info.height), (7, 5));
    }
}
