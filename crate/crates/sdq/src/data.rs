//! Dataset plumbing: IDX image/label files, seeded synthetic generators for
//! network-free tests, and a rendered digit corpus used by the desk-scale
//! training tasks.
//!
//! The digit corpus draws fixed 5x7 glyph bitmaps onto a 28x28 canvas and
//! perturbs each sample with a seeded affine jitter (rotation, scale, shear,
//! shift) plus pixel noise, then round-trips through the same IDX files a
//! real MNIST download would use.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("idx format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

fn format_err<T>(offset: usize, msg: impl Into<String>) -> Result<T, DataError> {
    Err(DataError::Format { offset, msg: msg.into() })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u32_be(&mut self) -> Result<u32, DataError> {
        if self.pos + 4 > self.buf.len() {
            return format_err(self.buf.len(), "file truncated inside header");
        }
        let v = u32::from_be_bytes(self.buf[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.buf.len() {
            return format_err(
                self.buf.len(),
                format!("file truncated: expected {} data bytes", n),
            );
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Raw contents of an IDX image file.
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(buf: &[u8]) -> Result<IdxImages, DataError> {
    let mut c = Cursor { buf, pos: 0 };
    let magic = c.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return format_err(0, format!("bad magic {magic:#010x}, want {IDX_IMAGES_MAGIC:#010x}"));
    }
    let count = c.u32_be()? as usize;
    let rows = c.u32_be()? as usize;
    let cols = c.u32_be()? as usize;
    let pixels = c.bytes(count * rows * cols)?.to_vec();
    if c.pos != buf.len() {
        return format_err(c.pos, format!("{} trailing bytes", buf.len() - c.pos));
    }
    Ok(IdxImages { count, rows, cols, pixels })
}

pub fn parse_idx_labels(buf: &[u8]) -> Result<Vec<u8>, DataError> {
    let mut c = Cursor { buf, pos: 0 };
    let magic = c.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return format_err(0, format!("bad magic {magic:#010x}, want {IDX_LABELS_MAGIC:#010x}"));
    }
    let count = c.u32_be()? as usize;
    let labels = c.bytes(count)?.to_vec();
    if c.pos != buf.len() {
        return format_err(c.pos, format!("{} trailing bytes", buf.len() - c.pos));
    }
    Ok(labels)
}

pub fn write_idx_images(path: &Path, img: &IdxImages) -> io::Result<()> {
    assert_eq!(img.pixels.len(), img.count * img.rows * img.cols);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    f.write_all(&(img.count as u32).to_be_bytes())?;
    f.write_all(&(img.rows as u32).to_be_bytes())?;
    f.write_all(&(img.cols as u32).to_be_bytes())?;
    f.write_all(&img.pixels)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    f.write_all(labels)
}

/// An in-memory labeled dataset with a fixed per-sample shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Per-sample shape, e.g. `[1, 28, 28]` for images or `[2]` for points.
    pub sample_shape: Vec<usize>,
    /// `len * prod(sample_shape)` values.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_numel(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Stacks the given sample indices into a batch tensor plus labels.
    pub fn batch(&self, idxs: &[usize]) -> (Tensor, Vec<usize>) {
        let k = self.sample_numel();
        let mut data = Vec::with_capacity(idxs.len() * k);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            data.extend_from_slice(&self.features[i * k..(i + 1) * k]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![idxs.len()];
        shape.extend_from_slice(&self.sample_shape);
        (Tensor::new(&shape, data), labels)
    }

    pub fn subset(&self, idxs: &[usize]) -> Dataset {
        let k = self.sample_numel();
        let mut features = Vec::with_capacity(idxs.len() * k);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            features.extend_from_slice(&self.features[i * k..(i + 1) * k]);
            labels.push(self.labels[i]);
        }
        Dataset { sample_shape: self.sample_shape.clone(), features, labels, classes: self.classes }
    }

    /// Splits off the last `n_tail` samples (used to carve a validation set
    /// from the end of the training set, keeping index order stable).
    pub fn split_tail(&self, n_tail: usize) -> (Dataset, Dataset) {
        assert!(n_tail <= self.len());
        let head: Vec<usize> = (0..self.len() - n_tail).collect();
        let tail: Vec<usize> = (self.len() - n_tail..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }
}

/// Loads an images+labels IDX pair into a dataset, scaling pixels to [0, 1].
pub fn load_idx_pair(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let img = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    if labels.len() != img.count {
        return Err(DataError::Invalid(format!(
            "{} images but {} labels",
            img.count,
            labels.len()
        )));
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1).max(10);
    Ok(Dataset {
        sample_shape: vec![1, img.rows, img.cols],
        features: img.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        labels: labels.iter().map(|&l| l as usize).collect(),
        classes,
    })
}

/// Loads `train-images-idx3-ubyte` and friends from a directory.
pub fn load_idx_dir(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let train = load_idx_pair(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
    let test = load_idx_pair(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
    Ok((train, test))
}

/// Reorders samples with a seeded permutation. Generators emit one class at
/// a time, so without this any contiguous split (like the validation tail)
/// would be single-class.
fn shuffle_samples(ds: &mut Dataset, rng: &mut Rng) {
    let dim: usize = ds.sample_shape.iter().product();
    let mut order: Vec<usize> = (0..ds.labels.len()).collect();
    rng.shuffle(&mut order);
    let mut features = Vec::with_capacity(ds.features.len());
    let mut labels = Vec::with_capacity(ds.labels.len());
    for &i in &order {
        features.extend_from_slice(&ds.features[i * dim..(i + 1) * dim]);
        labels.push(ds.labels[i]);
    }
    ds.features = features;
    ds.labels = labels;
}

/// Interleaved two-arm spiral (generalized to `classes` arms) in 2-D.
pub fn spiral(per_class: usize, classes: usize, noise: f64, rng: &mut Rng) -> Dataset {
    let mut features = Vec::with_capacity(per_class * classes * 2);
    let mut labels = Vec::with_capacity(per_class * classes);
    for c in 0..classes {
        for i in 0..per_class {
            let t = i as f64 / per_class.max(1) as f64;
            let r = 0.1 + 0.9 * t;
            let theta = c as f64 * std::f64::consts::TAU / classes as f64
                + t * 1.75 * std::f64::consts::TAU / classes as f64 * 2.0
                + noise * rng.normal();
            features.push(r * theta.cos());
            features.push(r * theta.sin());
            labels.push(c);
        }
    }
    let mut ds = Dataset { sample_shape: vec![2], features, labels, classes };
    shuffle_samples(&mut ds, rng);
    ds
}

/// Isotropic Gaussian blobs on a circle in 2-D.
pub fn gaussian_mixture(per_class: usize, classes: usize, spread: f64, rng: &mut Rng) -> Dataset {
    let mut features = Vec::with_capacity(per_class * classes * 2);
    let mut labels = Vec::with_capacity(per_class * classes);
    for c in 0..classes {
        let theta = c as f64 * std::f64::consts::TAU / classes as f64;
        let (cx, cy) = (theta.cos(), theta.sin());
        for _ in 0..per_class {
            features.push(cx + spread * rng.normal());
            features.push(cy + spread * rng.normal());
            labels.push(c);
        }
    }
    let mut ds = Dataset { sample_shape: vec![2], features, labels, classes };
    shuffle_samples(&mut ds, rng);
    ds
}

/// 5x7 digit glyphs, row-major, '#' = ink.
const GLYPHS: [&str; 10] = [
    ".###.#...##...##...##...##...#.###.",
    "..#...##....#....#....#....#...###.",
    ".###.#...#....#...#...#...#...#####",
    ".###.#...#....#..##.....##...#.###.",
    "...#...##..#.#.#..#.#####...#....#.",
    "######....####.....#....##...#.###.",
    ".###.#....#....####.#...##...#.###.",
    "#####....#...#....#...#...#....#...",
    ".###.#...##...#.###.#...##...#.###.",
    ".###.#...##...#.####....#....#.###.",
];

const GLYPH_COLS: usize = 5;
const GLYPH_ROWS: usize = 7;
pub const DIGIT_SIDE: usize = 28;

/// Rasterizes one glyph onto a 28x28 base canvas (no jitter), ink = 1.0.
fn glyph_canvas(digit: usize) -> [f64; DIGIT_SIDE * DIGIT_SIDE] {
    let mut canvas = [0.0; DIGIT_SIDE * DIGIT_SIDE];
    let glyph = GLYPHS[digit].as_bytes();
    // 4x4 pixels per cell; glyph block is 20x28, centered horizontally.
    let cell = 4;
    let x0 = (DIGIT_SIDE - GLYPH_COLS * cell) / 2;
    for gr in 0..GLYPH_ROWS {
        for gc in 0..GLYPH_COLS {
            if glyph[gr * GLYPH_COLS + gc] == b'#' {
                for dy in 0..cell {
                    for dx in 0..cell {
                        canvas[(gr * cell + dy) * DIGIT_SIDE + x0 + gc * cell + dx] = 1.0;
                    }
                }
            }
        }
    }
    canvas
}

fn bilinear(canvas: &[f64], x: f64, y: f64) -> f64 {
    if x < 0.0 || y < 0.0 || x > (DIGIT_SIDE - 1) as f64 || y > (DIGIT_SIDE - 1) as f64 {
        return 0.0;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(DIGIT_SIDE - 1);
    let y1 = (y0 + 1).min(DIGIT_SIDE - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = canvas[y0 * DIGIT_SIDE + x0] * (1.0 - fx) + canvas[y0 * DIGIT_SIDE + x1] * fx;
    let bot = canvas[y1 * DIGIT_SIDE + x0] * (1.0 - fx) + canvas[y1 * DIGIT_SIDE + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Renders one jittered digit image as u8 pixels.
fn render_digit(digit: usize, rng: &mut Rng) -> Vec<u8> {
    let canvas = glyph_canvas(digit);
    let angle = rng.uniform(-0.4, 0.4);
    let scale = rng.uniform(0.56, 1.18);
    let shear = rng.uniform(-0.35, 0.35);
    let tx = rng.uniform(-4.0, 4.0);
    let ty = rng.uniform(-4.0, 4.0);
    let ink = rng.uniform(0.5, 1.0);
    let noise = 0.16;

    // Forward map: rotate, shear, scale about the center, then shift.
    // a/b/c/d is that composite; sample by the inverse map.
    let (sin, cos) = angle.sin_cos();
    let a = scale * cos;
    let b = scale * (shear * cos - sin);
    let c = scale * sin;
    let d = scale * (shear * sin + cos);
    let det = a * d - b * c;
    let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
    let mid = (DIGIT_SIDE - 1) as f64 / 2.0;

    let mut out = Vec::with_capacity(DIGIT_SIDE * DIGIT_SIDE);
    for y in 0..DIGIT_SIDE {
        for x in 0..DIGIT_SIDE {
            let ox = x as f64 - mid - tx;
            let oy = y as f64 - mid - ty;
            let sx = ia * ox + ib * oy + mid;
            let sy = ic * ox + id * oy + mid;
            let mut v = ink * bilinear(&canvas, sx, sy) + noise * rng.normal();
            v = v.clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

/// Renders `n` digit images with labels cycling through 0..=9 before being
/// shuffled, so classes stay balanced.
pub fn render_digit_corpus(n: usize, rng: &mut Rng) -> IdxDataset {
    let mut labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    rng.shuffle(&mut labels);
    let mut pixels = Vec::with_capacity(n * DIGIT_SIDE * DIGIT_SIDE);
    for &l in &labels {
        pixels.extend_from_slice(&render_digit(l as usize, rng));
    }
    IdxDataset { images: IdxImages { count: n, rows: DIGIT_SIDE, cols: DIGIT_SIDE, pixels }, labels }
}

pub struct IdxDataset {
    pub images: IdxImages,
    pub labels: Vec<u8>,
}

/// Writes a rendered train/test corpus into `dir` using the standard IDX
/// file names, so the directory can be loaded exactly like a real download.
pub fn write_digit_corpus(
    dir: &Path,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<PathBuf, DataError> {
    std::fs::create_dir_all(dir)?;
    let mut rng = Rng::new(seed).fork(0x6469_6769);
    let train = render_digit_corpus(n_train, &mut rng);
    let test = render_digit_corpus(n_test, &mut rng);
    write_idx_images(&dir.join(TRAIN_IMAGES), &train.images)?;
    write_idx_labels(&dir.join(TRAIN_LABELS), &train.labels)?;
    write_idx_images(&dir.join(TEST_IMAGES), &test.images)?;
    write_idx_labels(&dir.join(TEST_LABELS), &test.labels)?;
    Ok(dir.to_path_buf())
}

/// Shuffled minibatch index lists covering `0..n` once.
pub fn shuffled_batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    assert!(batch > 0);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyph_tables_are_well_formed() {
        for g in GLYPHS {
            assert_eq!(g.len(), GLYPH_COLS * GLYPH_ROWS);
            assert!(g.bytes().all(|b| b == b'#' || b == b'.'));
        }
    }

    #[test]
    fn idx_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = IdxImages { count: 3, rows: 2, cols: 2, pixels: vec![0, 255, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16] };
        let ip = dir.path().join("imgs");
        write_idx_images(&ip, &img).unwrap();
        let raw = std::fs::read(&ip).unwrap();
        assert_eq!(&raw[..4], &[0, 0, 8, 3]);
        let back = parse_idx_images(&raw).unwrap();
        assert_eq!(back.pixels, img.pixels);
        assert_eq!((back.count, back.rows, back.cols), (3, 2, 2));

        let lp = dir.path().join("labels");
        write_idx_labels(&lp, &[1, 2, 3]).unwrap();
        assert_eq!(parse_idx_labels(&std::fs::read(&lp).unwrap()).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn truncated_idx_reports_byte_offset() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        buf.extend_from_slice(&10000u32.to_be_bytes());
        buf.extend_from_slice(&28u32.to_be_bytes());
        buf.extend_from_slice(&28u32.to_be_bytes());
        buf.extend_from_slice(&[0u8; 100]); // far fewer than 10000*28*28
        match parse_idx_images(&buf) {
            Err(DataError::Format { offset, .. }) => assert_eq!(offset, buf.len()),
            other => panic!("expected format error, got {:?}", other.map(|i| i.count)),
        }
        // Header itself truncated: offset points at the end of the stub.
        match parse_idx_images(&buf[..6]) {
            Err(DataError::Format { offset, .. }) => assert_eq!(offset, 6),
            _ => panic!("expected format error"),
        }
    }

    #[test]
    fn wrong_magic_is_rejected_at_offset_zero() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        buf.extend_from_slice(&0u32.to_be_bytes());
        match parse_idx_images(&buf) {
            Err(DataError::Format { offset, .. }) => assert_eq!(offset, 0),
            _ => panic!("expected format error"),
        }
    }

    #[test]
    fn generators_are_seed_deterministic() {
        let a = spiral(50, 3, 0.05, &mut Rng::new(9));
        let b = spiral(50, 3, 0.05, &mut Rng::new(9));
        assert_eq!(a, b);
        let c = gaussian_mixture(40, 4, 0.2, &mut Rng::new(9));
        let d = gaussian_mixture(40, 4, 0.2, &mut Rng::new(9));
        assert_eq!(c, d);
        assert_eq!(c.len(), 160);
        assert_eq!(c.sample_shape, vec![2]);
    }

    #[test]
    fn generated_samples_are_shuffled_across_classes() {
        // Contiguous splits (like the validation tail) must not end up
        // single-class, so generation order is permuted.
        for ds in [
            spiral(50, 3, 0.05, &mut Rng::new(9)),
            gaussian_mixture(50, 3, 0.2, &mut Rng::new(9)),
        ] {
            let tail = &ds.labels[ds.len() - 15..];
            for c in 0..3 {
                assert!(tail.contains(&c), "class {c} missing from the tail: {tail:?}");
            }
            let mut counts = [0usize; 3];
            for &l in &ds.labels {
                counts[l] += 1;
            }
            assert_eq!(counts, [50, 50, 50]);
        }
    }

    #[test]
    fn digit_corpus_round_trips_through_idx_files() {
        let dir = tempfile::tempdir().unwrap();
        write_digit_corpus(dir.path(), 40, 20, 7).unwrap();
        let (train, test) = load_idx_dir(dir.path()).unwrap();
        assert_eq!(train.len(), 40);
        assert_eq!(test.len(), 20);
        assert_eq!(train.sample_shape, vec![1, 28, 28]);
        assert_eq!(train.classes, 10);
        // Balanced labels: 40 samples over 10 classes.
        let mut counts = [0usize; 10];
        for &l in &train.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 4), "{counts:?}");
        // Pixels normalized.
        assert!(train.features.iter().all(|&v| (0.0..=1.0).contains(&v)));

        // Same seed regenerates identical files.
        let dir2 = tempfile::tempdir().unwrap();
        write_digit_corpus(dir2.path(), 40, 20, 7).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join(TRAIN_IMAGES)).unwrap(),
            std::fs::read(dir2.path().join(TRAIN_IMAGES)).unwrap()
        );
    }

    #[test]
    fn batches_partition_all_indices() {
        let mut rng = Rng::new(3);
        let batches = shuffled_batches(10, 4, &mut rng);
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[2].len(), 2);
        let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batch_stacks_samples_in_order() {
        let ds = Dataset {
            sample_shape: vec![2],
            features: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            labels: vec![0, 1, 2],
            classes: 3,
        };
        let (x, y) = ds.batch(&[2, 0]);
        assert_eq!(x.shape(), &[2, 2]);
        assert_eq!(x.data(), &[5.0, 6.0, 1.0, 2.0]);
        assert_eq!(y, vec![2, 0]);
        let (head, tail) = ds.split_tail(1);
        assert_eq!(head.len(), 2);
        assert_eq!(tail.labels, vec![2]);
    }
}
