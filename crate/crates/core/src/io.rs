//! PNG image files.

use std::path::{Path, PathBuf};

use image::{ColorType, ImageFormat, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::scalar::Scalar;

/// Read an 8-bit RGB PNG, mapping byte `v` to `v / 255`.
pub fn load_image<T: Scalar>(path: &Path) -> Result<ImageTensor<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = ImageReader::with_format(std::io::BufReader::new(file), ImageFormat::Png);
    let img = reader
        .decode()
        .map_err(|e| Error::Image { path: path.to_path_buf(), msg: format!("PNG decode failed: {e}") })?;
    if img.color() != ColorType::Rgb8 {
        return Err(Error::Image {
            path: path.to_path_buf(),
            msg: format!("expected 8-bit RGB, found {:?}", img.color()),
        });
    }
    let rgb = img.into_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|b| T::of(b as f64 / 255.0)).collect();
    ImageTensor::new(h as usize, w as usize, data)
}

/// Byte value stored for channel value `x`: `round(clip(x, 0, 1) · 255)`, halves rounding up.
pub fn to_byte(x: f64) -> u8 {
    let v = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

/// Write an 8-bit RGB PNG. The parent directory must already exist.
pub fn save_image<T: Scalar>(img: &ImageTensor<T>, path: &Path) -> Result<()> {
    let bytes = img.data().iter().map(|v| to_byte(v.as_f64())).collect();
    let buf = RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes).expect("buffer matches dims");
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    buf.write_to(&mut writer, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image { path: path.to_path_buf(), msg: format!("PNG encode failed: {other}") },
    })
}

/// `.png` files directly inside `dir`, sorted by file name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Load every PNG of a directory; errors when there are none.
pub fn load_dir<T: Scalar>(dir: &Path) -> Result<Vec<(String, ImageTensor<T>)>> {
    let paths = list_pngs(dir)?;
    if paths.is_empty() {
        return Err(Error::Dataset(format!("no PNG files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let name = p.file_name().expect("listed files have names").to_string_lossy().into_owned();
            Ok((name, load_image(p)?))
        })
        .collect()
}
