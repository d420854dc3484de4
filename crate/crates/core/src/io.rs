//! Image files, plain-text grids and the compact `VTP1` binary grid format.
//!
//! `VTP1` layout: the magic bytes `VTP1`, little-endian `u32` width, `u32`
//! height, then one or more planes of `width * height` little-endian `f32`
//! values in row-major order. The plane count is implied by the file length.
//!
//! Grid CSV layout: a first line `width,height`, then one line of
//! comma-separated values per grid row. Multi-plane grids (gradient fields)
//! append the rows of each plane in turn.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};

use crate::error::{Error, Result};
use crate::raster::{DepthMap, GradientField, HeightMap, RasterImage, SegMask};

pub const VTP1_MAGIC: &[u8; 4] = b"VTP1";

pub fn load_image(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = ImageReader::open(path)?.with_guessed_format()?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        Some(other) => return Err(Error::UnsupportedFormat(format!("{other:?}"))),
        None => {
            return Err(Error::UnsupportedFormat(format!(
                "unrecognised content in {}",
                path.display()
            )))
        }
    }
    let img = reader.decode().map_err(|e| Error::CorruptData {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f64>) = if img.color().has_color() {
        (
            3,
            img.to_rgb8()
                .into_raw()
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect(),
        )
    } else {
        (
            1,
            img.to_luma8()
                .into_raw()
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect(),
        )
    };
    RasterImage::new(w, h, channels, data)
}

fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes PNG (`.png`) or binary PGM/PPM (`.pgm`, `.ppm`) chosen by extension.
pub fn save_image(img: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let bytes: Vec<u8> = img.data().iter().map(|&x| quantize(x)).collect();
    let (w, h) = (img.width() as u32, img.height() as u32);
    match ext.as_str() {
        "png" => {
            let dynimg = match img.channels() {
                1 => DynamicImage::ImageLuma8(
                    image::GrayImage::from_raw(w, h, bytes).expect("buffer length checked"),
                ),
                _ => DynamicImage::ImageRgb8(
                    image::RgbImage::from_raw(w, h, bytes).expect("buffer length checked"),
                ),
            };
            dynimg
                .save_with_format(path, ImageFormat::Png)
                .map_err(|e| match e {
                    image::ImageError::IoError(io) => Error::Io(io),
                    other => Error::CorruptData {
                        path: path.to_path_buf(),
                        reason: other.to_string(),
                    },
                })
        }
        "pgm" | "ppm" => {
            let magic = match (ext.as_str(), img.channels()) {
                ("pgm", 1) => "P5",
                ("ppm", 3) => "P6",
                _ => {
                    return Err(Error::UnsupportedFormat(format!(
                        "{}-channel image cannot be written as .{ext}",
                        img.channels()
                    )))
                }
            };
            let mut out = BufWriter::new(fs::File::create(path)?);
            write!(out, "{magic}\n{w} {h}\n255\n")?;
            out.write_all(&bytes)?;
            out.flush()?;
            Ok(())
        }
        other => Err(Error::UnsupportedFormat(format!("extension '.{other}'"))),
    }
}

pub fn write_vtp1(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    planes: &[&[f64]],
) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(VTP1_MAGIC)?;
    out.write_all(&(width as u32).to_le_bytes())?;
    out.write_all(&(height as u32).to_le_bytes())?;
    for plane in planes {
        debug_assert_eq!(plane.len(), width * height);
        for &x in plane.iter() {
            out.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Returns `(width, height, planes)`.
pub fn read_vtp1(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let corrupt = |reason: String| Error::CorruptData {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 12 || &bytes[..4] != VTP1_MAGIC {
        return Err(corrupt("missing VTP1 header".into()));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = &bytes[12..];
    let plane_bytes = width * height * 4;
    if plane_bytes == 0 || payload.is_empty() || payload.len() % plane_bytes != 0 {
        return Err(corrupt(format!(
            "payload of {} bytes does not hold whole {width}x{height} planes",
            payload.len()
        )));
    }
    let planes = payload
        .chunks_exact(plane_bytes)
        .map(|plane| {
            plane
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect()
        })
        .collect();
    Ok((width, height, planes))
}

pub fn write_grid_csv(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    planes: &[&[f64]],
) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{width},{height}")?;
    for plane in planes {
        for row in plane.chunks_exact(width) {
            let line: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_grid_csv(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        reason: "empty file".into(),
    })?;
    let header = header?;
    let dims: Vec<usize> = header
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            line: 1,
            reason: format!("bad header '{header}': {e}"),
        })?;
    let [width, height] = dims[..] else {
        return Err(Error::Parse {
            line: 1,
            reason: format!("header must be 'width,height', got '{header}'"),
        });
    };
    let mut values = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        for cell in line.split(',') {
            values.push(cell.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: i + 1,
                reason: format!("'{cell}': {e}"),
            })?);
        }
    }
    let n = width * height;
    if n == 0 || values.is_empty() || values.len() % n != 0 {
        return Err(Error::CorruptData {
            path: path.to_path_buf(),
            reason: format!(
                "{} values do not fill {width}x{height} planes",
                values.len()
            ),
        });
    }
    let planes = values.chunks_exact(n).map(<[f64]>::to_vec).collect();
    Ok((width, height, planes))
}

fn expect_planes(path: &Path, planes: &[Vec<f64>], n: usize) -> Result<()> {
    if planes.len() != n {
        return Err(Error::CorruptData {
            path: path.to_path_buf(),
            reason: format!("expected {n} plane(s), found {}", planes.len()),
        });
    }
    Ok(())
}

/// Grid file encoding, chosen by extension (`.csv` or anything else for `VTP1`).
fn is_csv(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()) == Some("csv")
}

fn write_grid(path: &Path, width: usize, height: usize, planes: &[&[f64]]) -> Result<()> {
    if is_csv(path) {
        write_grid_csv(path, width, height, planes)
    } else {
        write_vtp1(path, width, height, planes)
    }
}

fn read_grid(path: &Path) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    if is_csv(path) {
        read_grid_csv(path)
    } else {
        read_vtp1(path)
    }
}

pub fn save_depth_map(map: &DepthMap, path: impl AsRef<Path>) -> Result<()> {
    write_grid(path.as_ref(), map.width(), map.height(), &[map.values()])
}

pub fn load_depth_map(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let (w, h, mut planes) = read_grid(path)?;
    expect_planes(path, &planes, 1)?;
    DepthMap::new(w, h, planes.pop().unwrap())
}

pub fn save_mask(mask: &SegMask, path: impl AsRef<Path>) -> Result<()> {
    write_grid(
        path.as_ref(),
        mask.width(),
        mask.height(),
        &[&mask.to_values()],
    )
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<SegMask> {
    let path = path.as_ref();
    let (w, h, planes) = read_grid(path)?;
    expect_planes(path, &planes, 1)?;
    SegMask::from_values(w, h, &planes[0])
}

pub fn save_gradient_field(field: &GradientField, path: impl AsRef<Path>) -> Result<()> {
    write_grid(
        path.as_ref(),
        field.width(),
        field.height(),
        &[field.gu(), field.gv()],
    )
}

pub fn load_gradient_field(path: impl AsRef<Path>) -> Result<GradientField> {
    let path = path.as_ref();
    let (w, h, mut planes) = read_grid(path)?;
    expect_planes(path, &planes, 2)?;
    let gv = planes.pop().unwrap();
    let gu = planes.pop().unwrap();
    GradientField::new(w, h, gu, gv)
}

pub fn save_height_map(map: &HeightMap, path: impl AsRef<Path>) -> Result<()> {
    write_grid(path.as_ref(), map.width(), map.height(), &[map.z()])
}

/// The grid formats do not carry the pixel pitch, so the caller supplies it.
pub fn load_height_map(path: impl AsRef<Path>, pixel_pitch: f64) -> Result<HeightMap> {
    let path = path.as_ref();
    let (w, h, mut planes) = read_grid(path)?;
    expect_planes(path, &planes, 1)?;
    HeightMap::new(w, h, planes.pop().unwrap(), pixel_pitch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_pixels_scale_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tiny.pgm");
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 128, 64]);
        fs::write(&p, bytes).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.dims(), (2, 2, 1));
        assert_eq!(img.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn png_round_trip_is_pixel_exact() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..5 * 4 * 3)
            .map(|i| ((i * 37) % 256) as f64 / 255.0)
            .collect();
        let img = RasterImage::new(5, 4, 3, data).unwrap();
        for name in ["a.png", "b.ppm"] {
            let p = dir.path().join(name);
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            assert_eq!(back, img);
            save_image(&back, &p).unwrap();
            assert_eq!(load_image(&p).unwrap(), img);
        }
    }

    #[test]
    fn save_clamps_and_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.pgm");
        let img = RasterImage::new(3, 1, 1, vec![1.0, -0.1, 2.0]).unwrap();
        save_image(&img, &p).unwrap();
        let raw = fs::read(&p).unwrap();
        assert_eq!(&raw[raw.len() - 3..], &[255, 0, 255]);
    }

    #[test]
    fn load_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_image(dir.path().join("nope.png")),
            Err(Error::MissingFile(_))
        ));
        let txt = dir.path().join("x.txt");
        fs::write(&txt, b"hello world, not an image").unwrap();
        assert!(matches!(load_image(&txt), Err(Error::UnsupportedFormat(_))));
        let garbage_png = dir.path().join("x.png");
        fs::write(&garbage_png, b"hello world, not an image").unwrap();
        assert!(matches!(
            load_image(&garbage_png),
            Err(Error::CorruptData { .. })
        ));
        let bad = dir.path().join("bad.pgm");
        fs::write(&bad, b"P5\n4 4\n255\n\x01\x02").unwrap();
        assert!(matches!(load_image(&bad), Err(Error::CorruptData { .. })));
    }

    #[test]
    fn grid_formats_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = GradientField::from_fn(4, 3, |u, v| (u as f64 * 0.5, -(v as f64) * 0.25));
        for name in ["g.csv", "g.vtp"] {
            let p = dir.path().join(name);
            save_gradient_field(&g, &p).unwrap();
            assert_eq!(load_gradient_field(&p).unwrap(), g);
        }
        let raw = fs::read(dir.path().join("g.vtp")).unwrap();
        assert_eq!(&raw[..4], b"VTP1");
        assert_eq!(u32::from_le_bytes(raw[4..8].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(raw[8..12].try_into().unwrap()), 3);
        assert_eq!(raw.len(), 12 + 2 * 4 * 3 * 4);
        let csv = fs::read_to_string(dir.path().join("g.csv")).unwrap();
        assert!(csv.starts_with("4,3\n"));

        let mask = SegMask::from_fn(3, 2, |u, v| u == v);
        let p = dir.path().join("m.csv");
        save_mask(&mask, &p).unwrap();
        assert_eq!(load_mask(&p).unwrap(), mask);
    }

    #[test]
    fn grid_csv_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "2,2\n1,2\n3,x\n").unwrap();
        match read_grid_csv(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
