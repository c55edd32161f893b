//! Image corpora: a procedural two-domain shape dataset, IDX file I/O, and the
//! paired source/target mini-batch stream.

use std::f64::consts::PI;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::adversarial::domain_labels;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images (`count x height x width x channels`, values in `[0, 1]`) and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub domain: Domain,
    pub split: Split,
}

impl LabeledImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.images.len() != self.len() * self.image_len() {
            return Err(Error::Validation(format!(
                "{} pixel values do not fit {} images of {} values",
                self.images.len(),
                self.len(),
                self.image_len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index {
                what: "class label",
                index: bad,
                bound: classes,
            });
        }
        Ok(())
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &l in &self.labels {
            if l < classes {
                counts[l] += 1;
            }
        }
        counts
    }
}

/// Background texture family of a domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Texture {
    Flat,
    /// Sinusoidal stripes with the given period (pixels) at a random angle per image.
    Stripes { period: f64 },
    /// Checkerboard with the given cell size (pixels) at a random phase.
    Checker { cell: usize },
}

/// Nuisance parameters of one domain. The glyph geometry never depends on these.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainStyle {
    pub texture: Texture,
    /// Peak-to-peak amplitude of the background texture.
    pub texture_amplitude: f64,
    /// Mean background intensity.
    pub background: f64,
    /// Added to every pixel.
    pub intensity_offset: f64,
    /// Intensity added on glyph pixels.
    pub contrast: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
}

impl DomainStyle {
    pub fn clean() -> Self {
        DomainStyle {
            texture: Texture::Flat,
            texture_amplitude: 0.0,
            background: 0.1,
            intensity_offset: 0.0,
            contrast: 0.8,
            noise: 0.05,
        }
    }

    /// Default target domain: low-contrast glyphs over oriented stripes with
    /// extra noise. Strong enough that a source-only model loses well over ten
    /// points of accuracy, mild enough that it stays far above chance.
    pub fn cluttered() -> Self {
        DomainStyle {
            texture: Texture::Stripes { period: 6.0 },
            texture_amplitude: 0.35,
            background: 0.1,
            intensity_offset: 0.0,
            contrast: 0.6,
            noise: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub image_size: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
    pub source: DomainStyle,
    pub target: DomainStyle,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 4,
            image_size: 32,
            train_count: 2000,
            test_count: 500,
            seed: 7,
            source: DomainStyle::clean(),
            target: DomainStyle::cluttered(),
        }
    }
}

impl SynthConfig {
    /// Same configuration with the target rendered exactly like the source.
    pub fn null_shift(&self) -> Self {
        SynthConfig {
            target: self.source.clone(),
            ..self.clone()
        }
    }
}

/// Number of distinct glyph classes the generator can draw.
pub const GLYPH_COUNT: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct DomainPair {
    pub source_train: LabeledImageSet,
    pub source_test: LabeledImageSet,
    pub target_train: LabeledImageSet,
    pub target_test: LabeledImageSet,
}

fn glyph_mask(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut mask = vec![0.0; size * size];
    let extent = rng.gen_range(12..=18) as f64;
    let thick = rng.gen_range(2.0..3.5);
    let half = extent / 2.0;
    let margin = half + 1.0;
    let cx = rng.gen_range(margin..size as f64 - margin);
    let cy = rng.gen_range(margin..size as f64 - margin);
    let th = thick / 2.0;
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let inside = dx.abs() <= half && dy.abs() <= half;
            let hbar = dy.abs() <= th && dx.abs() <= half;
            let vbar = dx.abs() <= th && dy.abs() <= half;
            let diag = inside && (dx - dy).abs() <= th * std::f64::consts::SQRT_2;
            let anti = inside && (dx + dy).abs() <= th * std::f64::consts::SQRT_2;
            let r = (dx * dx + dy * dy).sqrt();
            let on = match class {
                0 => hbar,
                1 => vbar,
                2 => inside && (half - dx.abs() <= thick || half - dy.abs() <= thick),
                3 => diag,
                4 => hbar || vbar,
                5 => diag || anti,
                6 => r <= half,
                _ => (r - (half - th)).abs() <= th,
            };
            if on {
                mask[y * size + x] = 1.0;
            }
        }
    }
    mask
}

fn render(class: usize, size: usize, style: &DomainStyle, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let glyph = glyph_mask(class, size, rng);
    let angle = rng.gen_range(0.0..PI);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let shift = rng.gen_range(0..64usize);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let tex = match style.texture {
                Texture::Flat => 0.0,
                Texture::Stripes { period } => {
                    let u = x as f64 * ca + y as f64 * sa;
                    0.5 * (2.0 * PI * u / period + phase).sin()
                }
                Texture::Checker { cell } => {
                    let c = cell.max(1);
                    if ((x + shift) / c + (y + shift) / c) % 2 == 0 {
                        0.5
                    } else {
                        -0.5
                    }
                }
            };
            let z: f64 = rng.sample(StandardNormal);
            let v = style.background
                + style.intensity_offset
                + style.texture_amplitude * tex
                + style.contrast * glyph[y * size + x]
                + style.noise * z;
            // Quantized to 8 bits so the set survives an IDX round trip exactly.
            out.push((v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        }
    }
    out
}

fn render_set(
    cfg: &SynthConfig,
    style: &DomainStyle,
    count: usize,
    stream: u64,
    domain: Domain,
    split: Split,
) -> LabeledImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let mut images = Vec::with_capacity(count * cfg.image_size * cfg.image_size);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % cfg.classes;
        images.extend(render(class, cfg.image_size, style, &mut rng));
        labels.push(class);
    }
    LabeledImageSet {
        height: cfg.image_size,
        width: cfg.image_size,
        channels: 1,
        images,
        labels,
        domain,
        split,
    }
}

/// Source and target corpora, each with disjoint train and test splits.
pub fn synth_domain_pair(cfg: &SynthConfig) -> Result<DomainPair> {
    if cfg.classes < 2 || cfg.classes > GLYPH_COUNT {
        return Err(Error::Config(format!(
            "synthetic classes must be in 2..={GLYPH_COUNT}, got {}",
            cfg.classes
        )));
    }
    if cfg.image_size < 24 {
        return Err(Error::Config(format!(
            "synthetic image size must be at least 24, got {}",
            cfg.image_size
        )));
    }
    Ok(DomainPair {
        source_train: render_set(cfg, &cfg.source, cfg.train_count, 1, Domain::Source, Split::Train),
        source_test: render_set(cfg, &cfg.source, cfg.test_count, 2, Domain::Source, Split::Test),
        target_train: render_set(cfg, &cfg.target, cfg.train_count, 3, Domain::Target, Split::Train),
        target_test: render_set(cfg, &cfg.target, cfg.test_count, 4, Domain::Target, Split::Test),
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn idx_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "IDX",
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parses an IDX image file: returns `(count, rows, cols, pixels scaled to [0, 1])`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut cur = Cursor::new(bytes);
    let header = |cur: &mut Cursor<&[u8]>| cur.read_u32::<BigEndian>().map_err(|_| idx_error(path, "truncated header"));
    let magic = header(&mut cur)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_error(path, format!("expected image magic {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}")));
    }
    let count = header(&mut cur)? as usize;
    let rows = header(&mut cur)? as usize;
    let cols = header(&mut cur)? as usize;
    let need = count * rows * cols;
    let mut pixels = Vec::new();
    cur.read_to_end(&mut pixels).map_err(|e| Error::io(path, e))?;
    if pixels.len() != need {
        return Err(idx_error(path, format!("expected {need} pixel bytes, found {}", pixels.len())));
    }
    Ok((count, rows, cols, pixels.into_iter().map(|b| b as f64 / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.read_u32::<BigEndian>().map_err(|_| idx_error(path, "truncated header"))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(idx_error(path, format!("expected label magic {IDX_LABELS_MAGIC:#010x}, found {magic:#010x}")));
    }
    let count = cur.read_u32::<BigEndian>().map_err(|_| idx_error(path, "truncated header"))? as usize;
    let mut labels = Vec::new();
    cur.read_to_end(&mut labels).map_err(|e| Error::io(path, e))?;
    if labels.len() != count {
        return Err(idx_error(path, format!("expected {count} labels, found {}", labels.len())));
    }
    Ok(labels.into_iter().map(usize::from).collect())
}

/// Loads a single-channel image set from an IDX image file and label file.
pub fn load_idx(images: &Path, labels: &Path, domain: Domain, split: Split) -> Result<LabeledImageSet> {
    let (count, rows, cols, pixels) = parse_idx_images(&read_file(images)?, images)?;
    let labels_v = parse_idx_labels(&read_file(labels)?, labels)?;
    if labels_v.len() != count {
        return Err(Error::Validation(format!(
            "{} holds {count} images but {} holds {} labels",
            images.display(),
            labels.display(),
            labels_v.len()
        )));
    }
    Ok(LabeledImageSet {
        height: rows,
        width: cols,
        channels: 1,
        images: pixels,
        labels: labels_v,
        domain,
        split,
    })
}

pub fn encode_idx_images(set: &LabeledImageSet) -> Result<Vec<u8>> {
    if set.channels != 1 {
        return Err(Error::Validation("IDX export supports single-channel images only".into()));
    }
    let mut out = Vec::with_capacity(16 + set.images.len());
    out.write_u32::<BigEndian>(IDX_IMAGES_MAGIC).unwrap();
    for d in [set.len(), set.height, set.width] {
        out.write_u32::<BigEndian>(d as u32).unwrap();
    }
    out.extend(set.images.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn encode_idx_labels(set: &LabeledImageSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + set.len());
    out.write_u32::<BigEndian>(IDX_LABELS_MAGIC).unwrap();
    out.write_u32::<BigEndian>(set.len() as u32).unwrap();
    for &l in &set.labels {
        let byte = u8::try_from(l).map_err(|_| Error::Validation(format!("label {l} does not fit in a byte")))?;
        out.push(byte);
    }
    Ok(out)
}

pub fn write_idx(set: &LabeledImageSet, images: &Path, labels: &Path) -> Result<()> {
    std::fs::write(images, encode_idx_images(set)?).map_err(|e| Error::io(images, e))?;
    std::fs::write(labels, encode_idx_labels(set)?).map_err(|e| Error::io(labels, e))
}

/// One training step's worth of data. Target labels are never carried.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch {
    pub source_images: Vec<f64>,
    pub source_labels: Vec<usize>,
    pub target_images: Vec<f64>,
    pub n_target: usize,
}

impl DomainBatch {
    pub fn n_source(&self) -> usize {
        self.source_labels.len()
    }

    pub fn n(&self) -> usize {
        self.n_source() + self.n_target
    }

    /// Source then target images, as one contiguous batch.
    pub fn images(&self) -> Vec<f64> {
        let mut all = self.source_images.clone();
        all.extend_from_slice(&self.target_images);
        all
    }

    /// 1 for every source example followed by 0 for every target example.
    pub fn domain_labels(&self) -> Vec<f64> {
        domain_labels(self.n_source(), self.n_target)
    }
}

/// Endless reshuffling cursor over `len` indices.
#[derive(Clone, Debug)]
struct EpochCursor {
    len: usize,
    seed: u64,
    stream: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl EpochCursor {
    fn new(len: usize, seed: u64, stream: u64) -> Self {
        let mut c = EpochCursor {
            len,
            seed,
            stream,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(self.stream);
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    fn next(&mut self) -> usize {
        if self.pos == self.len {
            self.epoch += 1;
            self.reshuffle();
        }
        let i = self.order[self.pos];
        self.pos += 1;
        i
    }
}

/// Infinite stream of paired source/target batches, reshuffled every epoch.
/// The two sides keep independent epochs.
#[derive(Clone, Debug)]
pub struct PairedBatches<'a> {
    source: &'a LabeledImageSet,
    target: &'a LabeledImageSet,
    batch_source: usize,
    batch_target: usize,
    source_cursor: EpochCursor,
    target_cursor: EpochCursor,
}

pub fn paired_batches<'a>(
    source: &'a LabeledImageSet,
    target: &'a LabeledImageSet,
    batch_source: usize,
    batch_target: usize,
    seed: u64,
) -> Result<PairedBatches<'a>> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Validation("source and target sets must be non-empty".into()));
    }
    if batch_source == 0 || batch_target == 0 {
        return Err(Error::Config("batch sizes must be at least 1".into()));
    }
    if source.image_len() != target.image_len() {
        return Err(Error::shape("paired_batches", &[source.image_len()], &[target.image_len()]));
    }
    Ok(PairedBatches {
        source,
        target,
        batch_source,
        batch_target,
        source_cursor: EpochCursor::new(source.len(), seed, 11),
        target_cursor: EpochCursor::new(target.len(), seed, 12),
    })
}

impl Iterator for PairedBatches<'_> {
    type Item = DomainBatch;

    fn next(&mut self) -> Option<DomainBatch> {
        let mut source_images = Vec::with_capacity(self.batch_source * self.source.image_len());
        let mut source_labels = Vec::with_capacity(self.batch_source);
        for _ in 0..self.batch_source {
            let i = self.source_cursor.next();
            source_images.extend_from_slice(self.source.image(i));
            source_labels.push(self.source.labels[i]);
        }
        let mut target_images = Vec::with_capacity(self.batch_target * self.target.image_len());
        for _ in 0..self.batch_target {
            let i = self.target_cursor.next();
            target_images.extend_from_slice(self.target.image(i));
        }
        Some(DomainBatch {
            source_images,
            source_labels,
            target_images,
            n_target: self.batch_target,
        })
    }
}
