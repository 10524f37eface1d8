use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// RGB image with channel values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Image {
            width,
            height,
            rgb: vec![value; width * height * 3],
        }
    }

    /// Copies a `w x h` RGB tile with its top-left corner at `(x, y)`.
    pub fn blit(&mut self, x: usize, y: usize, w: usize, h: usize, tile: &[f32]) {
        assert!(x + w <= self.width && y + h <= self.height && tile.len() == w * h * 3);
        for row in 0..h {
            let dst = ((y + row) * self.width + x) * 3;
            self.rgb[dst..dst + w * 3].copy_from_slice(&tile[row * w * 3..(row + 1) * w * 3]);
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.rgb
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, image.to_ppm())?;
    Ok(())
}

/// Reads a binary PPM with maxval 255 as written by [`write_ppm`].
pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("ppm", "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format("ppm", format!("bad header field `{s}`")))
    };
    if fields[0] != "P6" || num(&fields[3])? != 255 {
        return Err(Error::format("ppm", "expected P6 with maxval 255"));
    }
    let (width, height) = (num(&fields[1])?, num(&fields[2])?);
    let pixels = &bytes[pos + 1..];
    if pixels.len() != width * height * 3 {
        return Err(Error::format(
            "ppm",
            format!(
                "expected {} pixel bytes, got {}",
                width * height * 3,
                pixels.len()
            ),
        ));
    }
    Ok(Image {
        width,
        height,
        rgb: pixels.iter().map(|&b| b as f32 / 255.0).collect(),
    })
}
