//! IDX ingestion and two-digit overlay construction.
//!
//! Samples are built by overlaying two 28×28 source images on a 36×36
//! canvas: the first at the origin, the second shifted (4,4), overlap merged
//! by elementwise max. Task 1's label is the first image's class, task 2's
//! the second. Train and test pairs are drawn from the respective source
//! splits only, so no source image leaks across the split. Pairs are drawn
//! uniformly with replacement, except the two images of one pair must be
//! distinct source entries.
//!
//! Pixels stay `u8` until batch assembly, where they are scaled by 1/255
//! (no mean/std standardization). Generation is a pure function of
//! (source bytes, sizes, seed).

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::{Element, Tensor};

/// IDX magic for unsigned-byte image archives (3 dims).
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// IDX magic for unsigned-byte label archives (1 dim).
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Source image side length.
pub const SOURCE_HW: usize = 28;
/// Overlay canvas side length.
pub const CANVAS_HW: usize = 36;
/// Default placement of the second image.
pub const DEFAULT_SHIFT: (usize, usize) = (4, 4);

const CANVAS_PIXELS: usize = CANVAS_HW * CANVAS_HW;
const SOURCE_PIXELS: usize = SOURCE_HW * SOURCE_HW;

/// A parsed IDX archive: header word, dimensions, raw payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArchive {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

/// Decode an IDX byte stream (big-endian header, u8 payload).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArchive> {
    let word = |at: usize| -> Result<u32> {
        let end = at + 4;
        if end > bytes.len() {
            return Err(Error::Length(format!(
                "idx: header needs {end} bytes, archive has {}",
                bytes.len()
            )));
        }
        Ok(u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]))
    };

    let magic = word(0)?;
    let ndims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => {
            return Err(Error::Format(format!(
                "idx: magic 0x{other:08x}; expected 0x{IDX_IMAGES_MAGIC:08x} (images) or 0x{IDX_LABELS_MAGIC:08x} (labels)"
            )))
        }
    };

    let mut dims = Vec::with_capacity(ndims);
    for i in 0..ndims {
        dims.push(word(4 + 4 * i)? as usize);
    }
    let header = 4 + 4 * ndims;
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(Error::Length(format!(
            "idx: dims {dims:?} imply {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    Ok(IdxArchive { magic, dims, payload: payload.to_vec() })
}

/// Read and decode one IDX file.
pub fn load_idx_file(path: &Path) -> Result<IdxArchive> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

/// A source split: n 28×28 images with their labels.
#[derive(Debug, Clone)]
pub struct SourcePool {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub n: usize,
}

impl SourcePool {
    pub fn new(images: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() * SOURCE_PIXELS {
            return Err(Error::Length(format!(
                "pool: {} image bytes vs {} labels (need {} bytes per label)",
                images.len(),
                labels.len(),
                SOURCE_PIXELS
            )));
        }
        let n = labels.len();
        Ok(SourcePool { images, labels, n })
    }

    pub fn from_idx(images: &IdxArchive, labels: &IdxArchive) -> Result<Self> {
        if images.magic != IDX_IMAGES_MAGIC {
            return Err(Error::Format(format!(
                "pool: image archive has magic 0x{:08x}",
                images.magic
            )));
        }
        if labels.magic != IDX_LABELS_MAGIC {
            return Err(Error::Format(format!(
                "pool: label archive has magic 0x{:08x}",
                labels.magic
            )));
        }
        if images.dims[1] != SOURCE_HW || images.dims[2] != SOURCE_HW {
            return Err(Error::Dimension(format!(
                "pool: source images are {}×{}, need {SOURCE_HW}×{SOURCE_HW}",
                images.dims[1], images.dims[2]
            )));
        }
        if images.dims[0] != labels.dims[0] {
            return Err(Error::Length(format!(
                "pool: {} images vs {} labels",
                images.dims[0], labels.dims[0]
            )));
        }
        SourcePool::new(images.payload.clone(), labels.payload.clone())
    }

    fn image(&self, i: usize) -> &[u8] {
        &self.images[i * SOURCE_PIXELS..(i + 1) * SOURCE_PIXELS]
    }
}

fn check_shift(shift: (usize, usize)) -> Result<()> {
    if shift.0 + SOURCE_HW > CANVAS_HW || shift.1 + SOURCE_HW > CANVAS_HW {
        return Err(Error::Index(format!(
            "shift ({}, {}) places a {SOURCE_HW}×{SOURCE_HW} image outside the {CANVAS_HW}×{CANVAS_HW} canvas",
            shift.0, shift.1
        )));
    }
    Ok(())
}

fn place_max<T: Copy + PartialOrd>(canvas: &mut [T], img: &[T], dy: usize, dx: usize) {
    for r in 0..SOURCE_HW {
        let src = &img[r * SOURCE_HW..(r + 1) * SOURCE_HW];
        let dst = &mut canvas[(dy + r) * CANVAS_HW + dx..(dy + r) * CANVAS_HW + dx + SOURCE_HW];
        for (d, &s) in dst.iter_mut().zip(src) {
            if s > *d {
                *d = s;
            }
        }
    }
}

/// Overlay two [0,1]-valued 28×28 images on a zeroed 36×36 canvas: `img_a`
/// at the origin, `img_b` at `shift`, overlap merged by max.
pub fn make_overlay<E: Element>(img_a: &[E], img_b: &[E], shift: (usize, usize)) -> Result<Vec<E>> {
    if img_a.len() != SOURCE_PIXELS || img_b.len() != SOURCE_PIXELS {
        return Err(Error::Length(format!(
            "overlay: sources have {} and {} pixels, need {SOURCE_PIXELS}",
            img_a.len(),
            img_b.len()
        )));
    }
    check_shift(shift)?;
    for &v in img_a.iter().chain(img_b) {
        let f = v.to_f64();
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Contract(format!("overlay: pixel {f} outside [0, 1]")));
        }
    }
    let mut canvas = vec![E::ZERO; CANVAS_PIXELS];
    place_max(&mut canvas, img_a, 0, 0);
    place_max(&mut canvas, img_b, shift.0, shift.1);
    Ok(canvas)
}

fn overlay_bytes(img_a: &[u8], img_b: &[u8], shift: (usize, usize)) -> Vec<u8> {
    let mut canvas = vec![0u8; CANVAS_PIXELS];
    place_max(&mut canvas, img_a, 0, 0);
    place_max(&mut canvas, img_b, shift.0, shift.1);
    canvas
}

/// One input with its K labels, ready for a model.
#[derive(Debug, Clone)]
pub struct MultiTaskSample<E: Element> {
    /// `[1, 1, 36, 36]`, values in [0,1].
    pub image: Tensor<E>,
    pub labels: Vec<usize>,
}

/// A generated overlay split: n canvases with K labels each, kept as bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub k: usize,
    n: usize,
    /// n · 1296 canvas bytes.
    images: Vec<u8>,
    /// n · k label bytes.
    labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * CANVAS_PIXELS..(i + 1) * CANVAS_PIXELS]
    }

    pub fn labels_of(&self, i: usize) -> &[u8] {
        &self.labels[i * self.k..(i + 1) * self.k]
    }

    pub fn sample<E: Element>(&self, i: usize) -> MultiTaskSample<E> {
        let data = self.image(i).iter().map(|&b| E::from_f64(b as f64 / 255.0)).collect();
        MultiTaskSample {
            image: Tensor::from_vec(&[1, 1, CANVAS_HW, CANVAS_HW], data).expect("canvas shape"),
            labels: self.labels_of(i).iter().map(|&l| l as usize).collect(),
        }
    }

    /// Assemble the rows `indices` into a `[N, 1, 36, 36]` batch in [0,1]
    /// plus one label vector per task.
    pub fn batch<E: Element>(&self, indices: &[usize]) -> Result<(Tensor<E>, Vec<Vec<usize>>)> {
        let n = indices.len();
        let mut data = Vec::with_capacity(n * CANVAS_PIXELS);
        let mut labels = vec![Vec::with_capacity(n); self.k];
        for &i in indices {
            if i >= self.n {
                return Err(Error::Index(format!("batch: row {i} out of range ({})", self.n)));
            }
            data.extend(self.image(i).iter().map(|&b| E::from_f64(b as f64 / 255.0)));
            for (t, lane) in labels.iter_mut().enumerate() {
                lane.push(self.labels_of(i)[t] as usize);
            }
        }
        let batch = Tensor::from_vec(&[n, 1, CANVAS_HW, CANVAS_HW], data)?;
        Ok((batch, labels))
    }

    // ---- binary cache ---------------------------------------------------

    const CACHE_MAGIC: &'static [u8; 4] = b"MTVB";
    const CACHE_VERSION: u16 = 1;

    /// Serialize to the on-disk cache format: a 16-byte header (magic
    /// `MTVB`, version u16, count u32, K u16, 4 reserved zero bytes, all
    /// big-endian) followed by `[K labels][1296 pixels]` per sample.
    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.n * (self.k + CANVAS_PIXELS));
        out.extend_from_slice(Self::CACHE_MAGIC);
        out.extend_from_slice(&Self::CACHE_VERSION.to_be_bytes());
        out.extend_from_slice(&(self.n as u32).to_be_bytes());
        out.extend_from_slice(&(self.k as u16).to_be_bytes());
        out.extend_from_slice(&[0u8; 4]);
        for i in 0..self.n {
            out.extend_from_slice(self.labels_of(i));
            out.extend_from_slice(self.image(i));
        }
        out
    }

    pub fn from_cache_bytes(bytes: &[u8]) -> Result<Dataset> {
        if bytes.len() < 16 {
            return Err(Error::Length(format!(
                "cache: header needs 16 bytes, file has {}",
                bytes.len()
            )));
        }
        if &bytes[0..4] != Self::CACHE_MAGIC {
            return Err(Error::Format(format!("cache: magic {:?}, expected \"MTVB\"", &bytes[0..4])));
        }
        let version = u16::from_be_bytes([bytes[4], bytes[5]]);
        if version != Self::CACHE_VERSION {
            return Err(Error::Format(format!(
                "cache: version {version}, this build reads {}",
                Self::CACHE_VERSION
            )));
        }
        let n = u32::from_be_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let k = u16::from_be_bytes([bytes[10], bytes[11]]) as usize;
        let body = &bytes[16..];
        let stride = k + CANVAS_PIXELS;
        if body.len() != n * stride {
            return Err(Error::Length(format!(
                "cache: {n} samples × {stride} bytes = {} expected, body has {}",
                n * stride,
                body.len()
            )));
        }
        let mut images = Vec::with_capacity(n * CANVAS_PIXELS);
        let mut labels = Vec::with_capacity(n * k);
        for s in body.chunks_exact(stride) {
            labels.extend_from_slice(&s[..k]);
            images.extend_from_slice(&s[k..]);
        }
        Ok(Dataset { k, n, images, labels })
    }

    /// A new dataset holding the named rows, in the given order. Rows may
    /// repeat; every index must be in range.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut images = Vec::with_capacity(indices.len() * CANVAS_PIXELS);
        let mut labels = Vec::with_capacity(indices.len() * self.k);
        for &i in indices {
            if i >= self.n {
                return Err(Error::Index(format!("subset: row {i} out of range ({})", self.n)));
            }
            images.extend_from_slice(self.image(i));
            labels.extend_from_slice(self.labels_of(i));
        }
        Ok(Dataset { k: self.k, n: indices.len(), images, labels })
    }

    pub fn write_cache(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_cache_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_cache(path: &Path) -> Result<Dataset> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_cache_bytes(&bytes)
    }
}

/// Draw `n` overlay pairs from one source pool (a ≠ b, replacement across
/// pairs). Task 1 labels come from the first image, task 2 from the second.
pub fn overlay_pairs(
    pool: &SourcePool,
    n: usize,
    rng: &mut ChaCha8Rng,
    shift: (usize, usize),
) -> Result<Dataset> {
    check_shift(shift)?;
    if pool.n < 2 && n > 0 {
        return Err(Error::Contract(format!(
            "pairing needs at least 2 source images, pool has {}",
            pool.n
        )));
    }
    let mut images = Vec::with_capacity(n * CANVAS_PIXELS);
    let mut labels = Vec::with_capacity(n * 2);
    for _ in 0..n {
        let a = rng.gen_range(0..pool.n);
        let b = loop {
            let b = rng.gen_range(0..pool.n);
            if b != a {
                break b;
            }
        };
        images.extend_from_slice(&overlay_bytes(pool.image(a), pool.image(b), shift));
        labels.push(pool.labels[a]);
        labels.push(pool.labels[b]);
    }
    Ok(Dataset { k: 2, n, images, labels })
}

/// Which source corpus a run draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Mnist,
    Fashion,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Mnist => "mnist",
            Source::Fashion => "fashion",
        }
    }
}

/// The four standard IDX file paths for a source under `data_dir`:
/// (train images, train labels, test images, test labels).
pub fn source_paths(data_dir: &Path, source: Source) -> [PathBuf; 4] {
    let dir = data_dir.join(source.as_str());
    [
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    ]
}

fn load_pool(images: &Path, labels: &Path) -> Result<SourcePool> {
    SourcePool::from_idx(&load_idx_file(images)?, &load_idx_file(labels)?)
}

/// Build (train, test) overlay sets from the IDX files under `data_dir`.
/// Train pairs are drawn from the train split only and test pairs from the
/// test split only; the whole construction is determined by
/// (file bytes, n_train, n_test, seed).
pub fn build_dataset(
    data_dir: &Path,
    source: Source,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let [ti, tl, vi, vl] = source_paths(data_dir, source);
    let train_pool = load_pool(&ti, &tl)?;
    let test_pool = load_pool(&vi, &vl)?;
    let mut r = rng::stream_rng(seed, streams::DATA);
    let train = overlay_pairs(&train_pool, n_train, &mut r, DEFAULT_SHIFT)?;
    let test = overlay_pairs(&test_pool, n_test, &mut r, DEFAULT_SHIFT)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut out = magic.to_be_bytes().to_vec();
        for &d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn parse_image_archive() {
        let bytes = idx_bytes(0x0000_0803, &[2, 28, 28], &vec![7u8; 1568]);
        let arc = parse_idx(&bytes).unwrap();
        assert_eq!(arc.magic, IDX_IMAGES_MAGIC);
        assert_eq!(arc.dims, vec![2, 28, 28]);
        assert_eq!(arc.payload.len(), 1568);
    }

    #[test]
    fn parse_label_archive() {
        let bytes = idx_bytes(0x0000_0801, &[10], &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let arc = parse_idx(&bytes).unwrap();
        assert_eq!(arc.dims, vec![10]);
        assert_eq!(arc.payload, vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
    }

    #[test]
    fn bad_magic_names_the_value() {
        let bytes = idx_bytes(0x0000_0802, &[10], &[0; 10]);
        let err = parse_idx(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("0x00000802"), "{err}");
    }

    #[test]
    fn truncated_payload_is_a_length_error() {
        let bytes = idx_bytes(0x0000_0803, &[2, 28, 28], &vec![0u8; 1000]);
        assert!(matches!(parse_idx(&bytes).unwrap_err(), Error::Length(_)));
    }

    #[test]
    fn overlay_zero_b_is_padded_a() {
        let img_a: Vec<f64> = (0..784).map(|i| (i % 256) as f64 / 255.0).collect();
        let img_b = vec![0.0; 784];
        let canvas = make_overlay(&img_a, &img_b, DEFAULT_SHIFT).unwrap();
        for r in 0..CANVAS_HW {
            for c in 0..CANVAS_HW {
                let want =
                    if r < 28 && c < 28 { img_a[r * 28 + c] } else { 0.0 };
                assert_eq!(canvas[r * CANVAS_HW + c], want);
            }
        }
    }

    #[test]
    fn overlay_max_merge() {
        let mut img_a = vec![0.0f64; 784];
        let mut img_b = vec![0.0f64; 784];
        // Same canvas pixel: a(4,4) vs b(0,0) under shift (4,4).
        img_a[4 * 28 + 4] = 0.3;
        img_b[0] = 0.8;
        let canvas = make_overlay(&img_a, &img_b, DEFAULT_SHIFT).unwrap();
        assert_eq!(canvas[4 * CANVAS_HW + 4], 0.8);
    }

    #[test]
    fn overlay_disjoint_supports_recoverable() {
        let mut img_a = vec![0.0f64; 784];
        let mut img_b = vec![0.0f64; 784];
        img_a[0] = 0.5; // canvas (0,0); b's region starts at (4,4)
        img_b[27 * 28 + 27] = 0.9; // canvas (31,31), outside a's region
        let canvas = make_overlay(&img_a, &img_b, DEFAULT_SHIFT).unwrap();
        assert_eq!(canvas[0], 0.5);
        assert_eq!(canvas[31 * CANVAS_HW + 31], 0.9);
    }

    #[test]
    fn overlay_shift_bounds() {
        let img = vec![0.0f64; 784];
        assert!(make_overlay(&img, &img, (8, 8)).is_ok());
        assert!(matches!(make_overlay(&img, &img, (9, 0)), Err(Error::Index(_))));
    }

    /// A pool whose every image is one constant byte — provenance marker.
    fn marked_pool(n: usize, value: u8) -> SourcePool {
        let images = vec![value; n * 784];
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        SourcePool::new(images, labels).unwrap()
    }

    #[test]
    fn split_hygiene_no_cross_pool_pixels() {
        let train_pool = marked_pool(40, 17);
        let test_pool = marked_pool(40, 203);
        let mut r = rng::stream_rng(9, streams::DATA);
        let train = overlay_pairs(&train_pool, 50, &mut r, DEFAULT_SHIFT).unwrap();
        let test = overlay_pairs(&test_pool, 20, &mut r, DEFAULT_SHIFT).unwrap();
        for i in 0..train.len() {
            assert!(train.image(i).iter().all(|&p| p == 0 || p == 17));
        }
        for i in 0..test.len() {
            assert!(test.image(i).iter().all(|&p| p == 0 || p == 203));
        }
    }

    #[test]
    fn pair_images_are_distinct_sources() {
        // With 2 source images the a≠b rule forces every pair to use both,
        // so both labels appear in every sample.
        let pool = SourcePool::new(vec![1u8; 2 * 784], vec![3, 4]).unwrap();
        let mut r = rng::stream_rng(1, streams::DATA);
        let ds = overlay_pairs(&pool, 25, &mut r, DEFAULT_SHIFT).unwrap();
        for i in 0..ds.len() {
            let l = ds.labels_of(i);
            assert_ne!(l[0], l[1]);
            assert_eq!(l[0].min(l[1]), 3);
            assert_eq!(l[0].max(l[1]), 4);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let pool = marked_pool(60, 9);
        let make = || {
            let mut r = rng::stream_rng(42, streams::DATA);
            overlay_pairs(&pool, 30, &mut r, DEFAULT_SHIFT).unwrap()
        };
        let (a, b) = (make(), make());
        assert_eq!(a, b);
        assert_eq!(a.to_cache_bytes(), b.to_cache_bytes());
    }

    #[test]
    fn label_histograms_near_uniform() {
        // 10k pairs from a label-balanced pool: per-task class counts within
        // ±20% of uniform.
        let n_src = 1000;
        let mut images = Vec::with_capacity(n_src * 784);
        let mut r = rng::stream_rng(7, 99);
        for _ in 0..n_src {
            images.extend(
                rng::standard_normal_vec(&mut r, 784).into_iter().map(|v| (v.abs() * 60.0) as u8),
            );
        }
        let labels = (0..n_src).map(|i| (i % 10) as u8).collect();
        let pool = SourcePool::new(images, labels).unwrap();
        let mut r = rng::stream_rng(3, streams::DATA);
        let ds = overlay_pairs(&pool, 10_000, &mut r, DEFAULT_SHIFT).unwrap();
        for task in 0..2 {
            let mut hist = [0usize; 10];
            for i in 0..ds.len() {
                hist[ds.labels_of(i)[task] as usize] += 1;
            }
            for (c, &count) in hist.iter().enumerate() {
                assert!(
                    (800..=1200).contains(&count),
                    "task {task} class {c}: {count} of 10000"
                );
            }
        }
    }

    #[test]
    fn cache_round_trip() {
        let pool = marked_pool(20, 100);
        let mut r = rng::stream_rng(5, streams::DATA);
        let ds = overlay_pairs(&pool, 12, &mut r, DEFAULT_SHIFT).unwrap();
        let bytes = ds.to_cache_bytes();
        assert_eq!(&bytes[0..4], b"MTVB");
        assert_eq!(bytes.len(), 16 + 12 * (2 + 1296));
        let back = Dataset::from_cache_bytes(&bytes).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn subset_keeps_rows_and_order() {
        let pool = marked_pool(20, 100);
        let mut r = rng::stream_rng(5, streams::DATA);
        let ds = overlay_pairs(&pool, 12, &mut r, DEFAULT_SHIFT).unwrap();

        let sub = ds.subset(&[7, 2, 7, 0]).unwrap();
        assert_eq!(sub.len(), 4);
        assert_eq!(sub.image(0), ds.image(7));
        assert_eq!(sub.image(2), ds.image(7));
        assert_eq!(sub.labels_of(1), ds.labels_of(2));
        assert_eq!(sub.labels_of(3), ds.labels_of(0));

        assert!(matches!(ds.subset(&[12]), Err(Error::Index(_))));
    }

    #[test]
    fn cache_rejects_corruption() {
        let pool = marked_pool(4, 1);
        let mut r = rng::stream_rng(5, streams::DATA);
        let ds = overlay_pairs(&pool, 3, &mut r, DEFAULT_SHIFT).unwrap();
        let good = ds.to_cache_bytes();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Dataset::from_cache_bytes(&bad_magic), Err(Error::Format(_))));

        let truncated = &good[..good.len() - 5];
        assert!(matches!(Dataset::from_cache_bytes(truncated), Err(Error::Length(_))));
    }

    #[test]
    fn batch_scales_to_unit_range() {
        let pool = marked_pool(10, 255);
        let mut r = rng::stream_rng(2, streams::DATA);
        let ds = overlay_pairs(&pool, 4, &mut r, DEFAULT_SHIFT).unwrap();
        let (batch, labels) = ds.batch::<f64>(&[0, 2]).unwrap();
        assert_eq!(batch.shape(), &[2, 1, 36, 36]);
        assert_eq!(labels.len(), 2);
        assert_eq!(labels[0].len(), 2);
        let mx = batch.data().iter().cloned().fold(0.0f64, f64::max);
        assert_eq!(mx, 1.0);
        assert!(batch.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn missing_files_name_the_path() {
        let err = build_dataset(Path::new("/nonexistent-dir"), Source::Mnist, 1, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("nonexistent-dir") && msg.contains("mnist"), "{msg}");
    }
}
