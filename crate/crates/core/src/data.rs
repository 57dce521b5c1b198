//! Gaze samples, manifest/blob/PNG ingestion and the synthetic eye renderer.
//!
//! Images are held as `[3,H,W]` values in `[0,1]`; [`normalize`] maps them
//! to `(v − 0.5) / 0.5` when batches are assembled.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use fgi_tensor::{Rng, Tensor};
use rand::{Rng as _, SeedableRng};

use crate::error::{usage_err, Error, Result};
use crate::gaze::{yawpitch_to_vec, Vec3};

pub const NORM_MEAN: f32 = 0.5;
pub const NORM_STD: f32 = 0.5;
pub const BLOB_MAGIC: &[u8; 7] = b"NCHWF32";
pub const MANIFEST_HEADER: [&str; 4] = ["path", "subject", "yaw_rad", "pitch_rad"];

pub fn normalize(v: f32) -> f32 {
    (v - NORM_MEAN) / NORM_STD
}

#[derive(Clone, Debug, PartialEq)]
pub struct GazeSample {
    /// `[3,H,W]`, values in `[0,1]`.
    pub image: Tensor<f32>,
    pub yaw: f64,
    pub pitch: f64,
    pub gaze: Vec3,
    pub subject: String,
}

impl GazeSample {
    pub fn new(image: Tensor<f32>, yaw: f64, pitch: f64, subject: impl Into<String>) -> Self {
        Self { image, yaw, pitch, gaze: yawpitch_to_vec(yaw, pitch), subject: subject.into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GazeDataset {
    pub samples: Vec<GazeSample>,
}

impl GazeDataset {
    pub fn new(samples: Vec<GazeSample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let shape = first.image.shape();
            if shape.len() != 3 || shape[0] != 3 {
                return Err(Error::Data(format!("images must be [3,H,W], got {shape:?}")));
            }
            if let Some((i, s)) = samples.iter().enumerate().find(|(_, s)| s.image.shape() != shape) {
                return Err(Error::Data(format!("sample {i} has shape {:?}, expected {shape:?}", s.image.shape())));
            }
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(H, W)` of the images.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.image.shape()[1], s.image.shape()[2]))
    }

    /// Distinct subject labels in first-seen order.
    pub fn subjects(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.samples {
            if !out.contains(&s.subject) {
                out.push(s.subject.clone());
            }
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> GazeDataset {
        GazeDataset { samples: indices.iter().map(|&i| self.samples[i].clone()).collect() }
    }

    /// Normalized images `[n,3,H,W]` and gaze vectors `[n,3]`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let Some(&first) = indices.first() else {
            return Err(usage_err("empty batch"));
        };
        let shape = self.samples[first].image.shape().to_vec();
        let per = shape.iter().product::<usize>();
        let mut images = Vec::with_capacity(indices.len() * per);
        let mut targets = Vec::with_capacity(indices.len() * 3);
        for &i in indices {
            let s = &self.samples[i];
            images.extend(s.image.data().iter().map(|&v| normalize(v)));
            targets.extend(s.gaze.iter().map(|&g| g as f32));
        }
        let n = indices.len();
        Ok((
            Tensor::from_vec(&[n, shape[0], shape[1], shape[2]], images)?,
            Tensor::from_vec(&[n, 3], targets)?,
        ))
    }
}

// ---------------------------------------------------------------- blobs

fn path_io(path: &Path, e: io::Error) -> Error {
    Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn write_blob(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut shape = t.shape().to_vec();
    if shape.len() == 3 {
        shape.insert(0, 1);
    }
    if shape.len() != 4 {
        return Err(usage_err(format!("blobs hold NCHW or CHW tensors, got {:?}", t.shape())));
    }
    let mut buf = Vec::with_capacity(7 + 16 + 4 * t.numel());
    buf.extend_from_slice(BLOB_MAGIC);
    for d in shape {
        buf.extend_from_slice(&u32::try_from(d).map_err(|_| usage_err("extent exceeds u32"))?.to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Reads an `NCHWF32` blob as `[N,C,H,W]`.
pub fn read_blob(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| path_io(path, e))?;
    let bad = |what: &str| Error::Data(format!("{}: {what}", path.display()));
    if bytes.len() < 7 + 16 || &bytes[..7] != BLOB_MAGIC {
        return Err(bad("not an NCHWF32 blob (bad magic)"));
    }
    let dims: Vec<usize> = bytes[7..23].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    let numel: usize = dims.iter().product();
    let body = &bytes[23..];
    if body.len() != numel * 4 {
        return Err(bad(&format!("extents {dims:?} need {} data bytes, found {}", numel * 4, body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::from_vec(&dims, data)?)
}

// ---------------------------------------------------------------- png

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn from_u8(b: u8) -> f32 {
    b as f32 / 255.0
}

pub fn write_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(usage_err(format!("PNG export needs [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let i = y as usize * w + x as usize;
        *px = image::Rgb([to_u8(d[i]), to_u8(d[h * w + i]), to_u8(d[2 * h * w + i])]);
    }
    buf.save(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => path_io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = from_u8(px[c]);
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data)?)
}

/// Reads an image file as `[3,H,W]` in `[0,1]`, by extension.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("nchw") => {
            let t = read_blob(path)?;
            let s = t.shape().to_vec();
            if s[0] != 1 || s[1] != 3 {
                return Err(Error::Data(format!("{}: blob must hold one 3-channel image, got {s:?}", path.display())));
            }
            Ok(t.reshaped(&s[1..])?)
        }
        _ => read_png(path),
    }
}

// ---------------------------------------------------------------- manifests

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Blob,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Blob => "nchw",
        }
    }
}

/// Writes every image plus `manifest.csv` into `dir`; returns the manifest
/// path.
pub fn write_dataset(ds: &GazeDataset, dir: &Path, format: ImageFormat) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(csv_err)?;
    w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for (i, s) in ds.samples.iter().enumerate() {
        let name = format!("img_{i:05}.{}", format.extension());
        match format {
            ImageFormat::Png => write_png(&dir.join(&name), &s.image)?,
            ImageFormat::Blob => write_blob(&dir.join(&name), &s.image)?,
        }
        w.write_record([name, s.subject.clone(), s.yaw.to_string(), s.pitch.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(manifest)
}

fn csv_err(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        }
    } else {
        Error::Data(e.to_string())
    }
}

/// Problem with one manifest row (1-based, header is row 1).
#[derive(Clone, Debug, PartialEq)]
pub struct RowError {
    pub row: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Skip bad rows and report them instead of failing.
    pub lenient: bool,
    /// Required `(H, W)` of every image.
    pub image_size: Option<(usize, usize)>,
}

fn load_row(record: &csv::StringRecord, root: &Path, opts: &LoadOptions) -> std::result::Result<GazeSample, String> {
    if record.len() != 4 {
        return Err(format!("expected 4 fields, found {}", record.len()));
    }
    let angle = |i: usize, name: &str| -> std::result::Result<f64, String> {
        let v: f64 = record[i].trim().parse().map_err(|_| format!("{name} {:?} is not a number", &record[i]))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("{name} must be finite"))
        }
    };
    let yaw = angle(2, "yaw_rad")?;
    let pitch = angle(3, "pitch_rad")?;
    let subject = record[1].trim();
    if subject.is_empty() {
        return Err("empty subject".into());
    }
    let path = root.join(record[0].trim());
    let image = read_image(&path).map_err(|e| e.to_string())?;
    if let Some((h, w)) = opts.image_size {
        if image.shape()[1..] != [h, w] {
            return Err(format!("{} is {:?}, expected 3x{h}x{w}", path.display(), image.shape()));
        }
    }
    Ok(GazeSample::new(image, yaw, pitch, subject))
}

/// Loads a `path,subject,yaw_rad,pitch_rad` manifest; image paths are
/// relative to the manifest's directory.
pub fn load_dataset(manifest: &Path, opts: &LoadOptions) -> Result<(GazeDataset, Vec<RowError>)> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    let file = fs::File::open(manifest).map_err(|e| path_io(manifest, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let headers = reader.headers().map_err(csv_err)?.clone();
    if headers.iter().map(str::trim).collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Data(format!("{}: header must be `{}`", manifest.display(), MANIFEST_HEADER.join(","))));
    }
    let mut samples = Vec::new();
    let mut errors = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let result = record.map_err(|e| e.to_string()).and_then(|r| load_row(&r, root, opts));
        match result {
            Ok(s) => samples.push(s),
            Err(message) if opts.lenient => errors.push(RowError { row, message }),
            Err(message) => return Err(Error::Data(format!("{} row {row}: {message}", manifest.display()))),
        }
    }
    Ok((GazeDataset::new(samples)?, errors))
}

// ---------------------------------------------------------------- synthetic

/// Angle range of the synthetic labels, in degrees.
pub const SYNTH_MAX_DEG: f64 = 20.0;
const BACKGROUND: f64 = 0.35;
const SCLERA: f64 = 0.9;
const PUPIL: f64 = 0.08;
/// Geometry as fractions of the image side.
pub const EYE_RADIUS: f64 = 0.38;
pub const PUPIL_RADIUS: f64 = 0.13;
/// Pupil displacement at ±`SYNTH_MAX_DEG`.
pub const PUPIL_TRAVEL: f64 = 0.15;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub n: usize,
    pub seed: u64,
    /// Image side in pixels.
    pub size: usize,
    pub subjects: usize,
    /// Half-width of the uniform background noise.
    pub noise: f64,
}

impl SynthOptions {
    pub fn new(n: usize, seed: u64) -> Self {
        Self { n, seed, size: 224, subjects: 4, noise: 0.05 }
    }

    pub fn size(mut self, size: usize) -> Self {
        self.size = size;
        self
    }

    pub fn subjects(mut self, subjects: usize) -> Self {
        self.subjects = subjects;
        self
    }

    pub fn noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }
}

/// Pupil centre in pixel coordinates for a gaze direction.
pub fn pupil_center(size: usize, yaw: f64, pitch: f64) -> (f64, f64) {
    let s = size as f64;
    let travel = PUPIL_TRAVEL * s / SYNTH_MAX_DEG.to_radians();
    (s / 2.0 - travel * yaw, s / 2.0 - travel * pitch)
}

/// Inverse of [`pupil_center`].
pub fn gaze_from_pupil(size: usize, cx: f64, cy: f64) -> (f64, f64) {
    let s = size as f64;
    let travel = PUPIL_TRAVEL * s / SYNTH_MAX_DEG.to_radians();
    ((s / 2.0 - cx) / travel, (s / 2.0 - cy) / travel)
}

/// Renders one eye; `noise` and `tint` only touch the background. Values
/// are quantized to 8-bit levels so PNG export is lossless.
pub fn render_eye(size: usize, yaw: f64, pitch: f64, tint: [f64; 3], noise: &[f64]) -> Tensor<f32> {
    let s = size as f64;
    let (c, r_eye, r_pupil) = (s / 2.0, EYE_RADIUS * s, PUPIL_RADIUS * s);
    let (px, py) = pupil_center(size, yaw, pitch);
    let sub = SUPERSAMPLE as f64;
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let (mut eye, mut pupil) = (0.0, 0.0);
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let fx = x as f64 + (sx as f64 + 0.5) / sub;
                    let fy = y as f64 + (sy as f64 + 0.5) / sub;
                    if (fx - c).hypot(fy - c) < r_eye {
                        if (fx - px).hypot(fy - py) < r_pupil {
                            pupil += 1.0;
                        } else {
                            eye += 1.0;
                        }
                    }
                }
            }
            let total = sub * sub;
            let outside = (total - eye - pupil) / total;
            let inner = (eye * SCLERA + pupil * PUPIL) / total;
            let i = y * size + x;
            for (ch, t) in tint.iter().enumerate() {
                let bg = (BACKGROUND + noise.get(i).copied().unwrap_or(0.0)) * t;
                let v = (inner + outside * bg).clamp(0.0, 1.0);
                data[ch * plane + i] = from_u8(to_u8(v as f32));
            }
        }
    }
    Tensor::from_vec(&[3, size, size], data).expect("render shape")
}

/// Recovers `(yaw, pitch)` from a rendered eye via the darkness centroid
/// inside the sclera.
pub fn decode_eye(image: &Tensor<f32>) -> (f64, f64) {
    let size = image.shape()[1];
    let s = size as f64;
    let (c, r) = (s / 2.0, EYE_RADIUS * s - 1.0);
    let (mut w, mut wx, mut wy) = (0.0, 0.0, 0.0);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            if (fx - c).hypot(fy - c) > r {
                continue;
            }
            let v = image.data()[y * size + x] as f64;
            let dark = (SCLERA - v).max(0.0);
            w += dark;
            wx += dark * fx;
            wy += dark * fy;
        }
    }
    gaze_from_pupil(size, wx / w, wy / w)
}

fn subject_tint(k: usize) -> [f64; 3] {
    let mut rng = Rng::seed_from_u64(0x7157 + k as u64);
    [0.0; 3].map(|_| rng.random_range(0.8..1.2))
}

/// Seeded synthetic gaze data: yaw and pitch uniform in ±20°.
pub fn synth_dataset(opts: &SynthOptions) -> Result<GazeDataset> {
    if opts.n == 0 || opts.subjects == 0 || opts.size < 8 {
        return Err(usage_err(format!("synthetic dataset needs n ≥ 1, subjects ≥ 1 and size ≥ 8: {opts:?}")));
    }
    let mut rng = Rng::seed_from_u64(opts.seed);
    let lim = SYNTH_MAX_DEG.to_radians();
    let plane = opts.size * opts.size;
    let samples = (0..opts.n)
        .map(|i| {
            let yaw = rng.random_range(-lim..=lim);
            let pitch = rng.random_range(-lim..=lim);
            let noise: Vec<f64> = (0..plane).map(|_| rng.random_range(-opts.noise..=opts.noise)).collect();
            let k = i % opts.subjects;
            let image = render_eye(opts.size, yaw, pitch, subject_tint(k), &noise);
            GazeSample::new(image, yaw, pitch, format!("s{k:02}"))
        })
        .collect();
    GazeDataset::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_gaze_centers_the_pupil() {
        assert_eq!(pupil_center(224, 0.0, 0.0), (112.0, 112.0));
        let img = render_eye(64, 0.0, 0.0, [1.0; 3], &[]);
        let (yaw, pitch) = decode_eye(&img);
        assert!(yaw.abs() < 1e-9 && pitch.abs() < 1e-9, "{yaw} {pitch}");
    }

    #[test]
    fn pupil_stays_inside_the_eye() {
        let lim = SYNTH_MAX_DEG.to_radians();
        let (px, py) = pupil_center(100, lim, lim);
        assert!((px - 50.0).hypot(py - 50.0) + PUPIL_RADIUS * 100.0 < EYE_RADIUS * 100.0);
    }

    #[test]
    fn synth_is_seeded() {
        let o = SynthOptions::new(3, 9).size(16);
        assert_eq!(synth_dataset(&o).unwrap(), synth_dataset(&o).unwrap());
        assert_ne!(synth_dataset(&o).unwrap(), synth_dataset(&SynthOptions::new(3, 10).size(16)).unwrap());
        assert!(synth_dataset(&SynthOptions::new(0, 1)).is_err());
    }

    #[test]
    fn batch_normalizes() {
        let ds = synth_dataset(&SynthOptions::new(2, 1).size(8)).unwrap();
        let (x, y) = ds.batch(&[1, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 3, 8, 8]);
        assert_eq!(x.data()[0], normalize(ds.samples[1].image.data()[0]));
        assert_eq!(y.shape(), &[2, 3]);
        assert!(ds.batch(&[]).is_err());
    }
}
