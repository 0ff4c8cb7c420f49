#![allow(dead_code)]

pub mod grad;

use std::path::{Path, PathBuf};

use flate2::write::GzEncoder;
use flate2::Compression;
use std::io::Write;

pub fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

/// Writes an IDX image file (magic 2051) holding `images` of `rows x cols`.
pub fn idx_images(images: &[Vec<u8>], rows: u32, cols: u32) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&2051u32.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&rows.to_be_bytes());
    out.extend_from_slice(&cols.to_be_bytes());
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

/// Writes an IDX label file (magic 2049).
pub fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&2049u32.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap()
}

/// Writes a solid-color RGB PNG.
pub fn write_png(path: &Path, width: u32, height: u32, rgb: [u8; 3]) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    let img = image::RgbImage::from_pixel(width, height, image::Rgb(rgb));
    img.save(path).unwrap();
}

/// Synthetic MVTec-style category: 3 good train images, 2 good and 2 defective
/// test images (`crack` and `scratch`, one each).
pub fn mvtec_fixture(root: &Path, category: &str, size: u32) {
    let c = root.join(category);
    for i in 0..3 {
        let v = 100 + 10 * i as u8;
        write_png(&c.join(format!("train/good/{i:03}.png")), size, size, [v, v, v]);
    }
    for i in 0..2 {
        let v = 105 + 10 * i as u8;
        write_png(&c.join(format!("test/good/{i:03}.png")), size, size, [v, v, v]);
    }
    write_png(&c.join("test/crack/000.png"), size, size, [250, 20, 20]);
    write_png(&c.join("test/scratch/000.png"), size, size, [20, 250, 20]);
}
