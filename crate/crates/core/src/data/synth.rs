//! Deterministic synthetic digit dataset in MNIST IDX format.
//!
//! Stand-in for environments where the real MNIST files are not available:
//! 28x28 grayscale glyphs (a 5x7 digit font upscaled 3x) with random
//! placement jitter, intensity jitter, and pixel noise. Ten balanced
//! classes, learnable to high accuracy by a small MLP, and written as
//! gzipped IDX files so the full loader path is exercised.

use std::io::Write;
use std::path::{Path, PathBuf};

use flate2::{Compression, GzBuilder};

use crate::error::{Error, Result};
use crate::rng;

/// 5x7 bitmap font, one row per digit, rows packed top to bottom.
const GLYPHS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110], // 0
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110], // 1
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111], // 2
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110], // 3
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010], // 4
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110], // 5
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110], // 6
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000], // 7
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110], // 8
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100], // 9
];

const SIDE: usize = 28;
const SCALE: usize = 3; // glyph cell -> 3x3 pixel block (15x21 glyph)

/// File locations of one generated train/test pair.
pub struct SynthPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

fn render_digit(digit: usize, rng: &mut rand_chacha::ChaCha8Rng, out: &mut [u8]) {
    debug_assert_eq!(out.len(), SIDE * SIDE);
    out.fill(0);
    let glyph_w = 5 * SCALE;
    let glyph_h = 7 * SCALE;
    // Placement jitter keeps the glyph fully inside the frame.
    let max_x = SIDE - glyph_w;
    let max_y = SIDE - glyph_h;
    let ox = rng::next_below(rng, max_x + 1);
    let oy = rng::next_below(rng, max_y + 1);
    let intensity = rng::next_uniform_f64(rng, 0.35, 1.0);
    for (row, bits) in GLYPHS[digit].iter().enumerate() {
        for col in 0..5 {
            if bits & (1 << (4 - col)) == 0 {
                continue;
            }
            // Per-cell stroke dropout and brightness jitter.
            if rng::next_unit_f64(rng) < 0.06 {
                continue;
            }
            let cell = intensity * rng::next_uniform_f64(rng, 0.6, 1.0);
            for dy in 0..SCALE {
                for dx in 0..SCALE {
                    let y = oy + row * SCALE + dy;
                    let x = ox + col * SCALE + dx;
                    out[y * SIDE + x] = (cell * 255.0) as u8;
                }
            }
        }
    }
    // Occasional bright occluder patch.
    if rng::next_unit_f64(rng) < 0.4 {
        let ph = 2 + rng::next_below(rng, 4);
        let pw = 2 + rng::next_below(rng, 4);
        let py = rng::next_below(rng, SIDE - ph);
        let px = rng::next_below(rng, SIDE - pw);
        let level = rng::next_uniform_f64(rng, 0.3, 0.9);
        for y in py..py + ph {
            for x in px..px + pw {
                out[y * SIDE + x] = (level * 255.0) as u8;
            }
        }
    }
    // Additive pixel noise.
    for px in out.iter_mut() {
        let noise = rng::next_uniform_f64(rng, 0.0, 0.35) * 255.0;
        *px = (f64::from(*px) + noise).min(255.0) as u8;
    }
}

fn write_gzip(path: &Path, payload: &[u8]) -> Result<()> {
    let file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut enc = GzBuilder::new()
        .mtime(0)
        .write(file, Compression::default());
    enc.write_all(payload)
        .and_then(|_| enc.finish().map(|_| ()))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn generate_set(dir: &Path, prefix: &str, n: usize, seed: u64) -> Result<(PathBuf, PathBuf)> {
    let mut rng = rng::rng_from_seed(seed);
    // Balanced labels (round-robin), order shuffled.
    let mut labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    rng::shuffle(&mut rng, &mut labels);

    let mut pixels = vec![0u8; n * SIDE * SIDE];
    let mut buf = [0u8; SIDE * SIDE];
    for (i, &label) in labels.iter().enumerate() {
        render_digit(label as usize, &mut rng, &mut buf);
        pixels[i * SIDE * SIDE..(i + 1) * SIDE * SIDE].copy_from_slice(&buf);
    }

    let mut image_bytes = Vec::with_capacity(16 + pixels.len());
    image_bytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    image_bytes.extend_from_slice(&(n as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(SIDE as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(SIDE as u32).to_be_bytes());
    image_bytes.extend_from_slice(&pixels);

    let mut label_bytes = Vec::with_capacity(8 + n);
    label_bytes.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    label_bytes.extend_from_slice(&(n as u32).to_be_bytes());
    label_bytes.extend_from_slice(&labels);

    let image_path = dir.join(format!("{prefix}-images-idx3-ubyte.gz"));
    let label_path = dir.join(format!("{prefix}-labels-idx1-ubyte.gz"));
    write_gzip(&image_path, &image_bytes)?;
    write_gzip(&label_path, &label_bytes)?;
    Ok((image_path, label_path))
}

/// Generate a train/test pair under `dir` using the standard MNIST file
/// names. Deterministic in `seed`.
pub fn generate_synthetic_mnist(
    dir: &Path,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<SynthPaths> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("synthetic set sizes must be positive".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let (train_images, train_labels) =
        generate_set(dir, "train", n_train, rng::derive_seed(seed, "synth-train"))?;
    let (test_images, test_labels) =
        generate_set(dir, "t10k", n_test, rng::derive_seed(seed, "synth-test"))?;
    Ok(SynthPaths {
        train_images,
        train_labels,
        test_images,
        test_labels,
    })
}
