//! Depth map container, PGM codecs, dataset manifests and the synthetic
//! wrinkled-surface generator.
//!
//! Depth samples are millimetres, one raw 16-bit unit per millimetre. Larger
//! values are treated as raised surface (closer to the viewer); sensors that
//! report range can be flipped with [`DepthMap::inverted`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Smallest image side the pipeline accepts (room for one 5x5-control fit).
pub const MIN_SIDE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<T> {
    width: usize,
    height: usize,
    depth: Vec<T>,
    mask: Vec<bool>,
}

impl<T: Real> DepthMap<T> {
    pub fn new(width: usize, height: usize, depth: Vec<T>, mask: Vec<bool>) -> Result<Self> {
        let n = width * height;
        if depth.len() != n || mask.len() != n {
            return Err(Error::Consistency(format!(
                "{}x{} map needs {} samples, got {} depths and {} mask entries",
                width,
                height,
                n,
                depth.len(),
                mask.len()
            )));
        }
        if let Some(i) = (0..n).find(|&i| mask[i] && !depth[i].is_finite()) {
            return Err(Error::Consistency(format!(
                "masked pixel ({}, {}) holds a non-finite depth",
                i % width,
                i / width
            )));
        }
        Ok(Self {
            width,
            height,
            depth,
            mask,
        })
    }

    /// Fully masked map from a generator `f(x, y)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut depth = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                depth.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            depth,
            mask: vec![true; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, value: T) -> Self {
        Self::from_fn(width, height, |_, _| value)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.depth[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn depth(&self) -> &[T] {
        &self.depth
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Checks the minimum-size invariant required by the analysis stages.
    pub fn check_analysable(&self) -> Result<()> {
        if self.width < MIN_SIDE || self.height < MIN_SIDE {
            return Err(Error::Invalid(format!(
                "depth map {}x{} is below the {}x{} minimum",
                self.width, self.height, MIN_SIDE, MIN_SIDE
            )));
        }
        if self.valid_count() == 0 {
            return Err(Error::Invalid("depth map has an empty mask".into()));
        }
        Ok(())
    }

    /// Same map with every depth negated (range convention -> height convention).
    pub fn inverted(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            depth: self.depth.iter().map(|&d| -d).collect(),
            mask: self.mask.clone(),
        }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.mask.len() {
            return Err(Error::Consistency("mask size differs from depth size".into()));
        }
        self.mask = mask;
        Self::new(self.width, self.height, self.depth, self.mask)
    }

    pub fn map_depth(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            width: self.width,
            height: self.height,
            depth: self.depth.iter().map(|&d| f(d)).collect(),
            mask: self.mask.clone(),
        }
    }

    /// Copies a `w x h` window starting at `(x0, y0)`.
    pub fn window(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Domain(format!(
                "window {}x{}@({},{}) exceeds {}x{} map",
                w, h, x0, y0, self.width, self.height
            )));
        }
        let mut depth = Vec::with_capacity(w * h);
        let mut mask = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            let row = y * self.width;
            depth.extend_from_slice(&self.depth[row + x0..row + x0 + w]);
            mask.extend_from_slice(&self.mask[row + x0..row + x0 + w]);
        }
        Ok(Self {
            width: w,
            height: h,
            depth,
            mask,
        })
    }

    /// Population variance of the masked depths.
    pub fn masked_variance(&self) -> T {
        let vals: Vec<T> = self
            .depth
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&d, _)| d)
            .collect();
        if vals.is_empty() {
            return T::zero();
        }
        let n = T::of_usize(vals.len());
        let mean = vals.iter().copied().sum::<T>() / n;
        vals.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n
    }
}

// ---------------------------------------------------------------------------
// PGM

struct PgmHeader {
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

fn parse_pgm_header(bytes: &[u8]) -> Result<PgmHeader> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format("missing P5 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(Error::Format("truncated PGM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("expected a number in PGM header".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| Error::Format(format!("bad PGM header field {text:?}")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("PGM header not terminated by whitespace".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!(
            "invalid PGM geometry {width}x{height} maxval {maxval}"
        )));
    }
    Ok(PgmHeader {
        width: width as usize,
        height: height as usize,
        maxval,
        data_offset: pos,
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Decodes a binary PGM into raw sample values. 16-bit samples are big-endian.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, u32, Vec<u16>)> {
    let header = parse_pgm_header(bytes)?;
    let n = header.width * header.height;
    let wide = header.maxval > 255;
    let need = n * if wide { 2 } else { 1 };
    let data = &bytes[header.data_offset..];
    if data.len() < need {
        return Err(Error::Format(format!(
            "PGM payload has {} bytes, {} expected",
            data.len(),
            need
        )));
    }
    let samples = if wide {
        data[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        data[..need].iter().map(|&b| b as u16).collect()
    };
    Ok((header.width, header.height, header.maxval, samples))
}

pub fn encode_pgm16(width: usize, height: usize, samples: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.reserve(samples.len() * 2);
    for s in samples {
        out.extend_from_slice(&s.to_be_bytes());
    }
    out
}

pub fn encode_pgm8(width: usize, height: usize, samples: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_pgm8(path: &Path, width: usize, height: usize, samples: &[u8]) -> Result<()> {
    write_file(path, &encode_pgm8(width, height, samples))
}

/// Loads a 16-bit depth PGM, optionally paired with an 8-bit mask PGM.
pub fn load_depth<T: Real>(path: &Path, mask_path: Option<&Path>) -> Result<DepthMap<T>> {
    let (w, h, maxval, samples) = decode_pgm(&read_bytes(path)?)?;
    if maxval <= 255 {
        return Err(Error::Format(format!(
            "{}: depth files must be 16-bit (maxval {maxval})",
            path.display()
        )));
    }
    let mask = match mask_path {
        Some(mp) => {
            let (mw, mh, _, m) = decode_pgm(&read_bytes(mp)?)?;
            if (mw, mh) != (w, h) {
                return Err(Error::Consistency(format!(
                    "depth {}x{} and mask {}x{} differ ({} vs {})",
                    w,
                    h,
                    mw,
                    mh,
                    path.display(),
                    mp.display()
                )));
            }
            m.into_iter().map(|v| v != 0).collect()
        }
        None => vec![true; w * h],
    };
    let depth = samples.into_iter().map(|s| T::of(s as f64)).collect();
    DepthMap::new(w, h, depth, mask)
}

fn to_u16<T: Real>(v: T) -> u16 {
    let r = v.as_f64().round();
    if r.is_nan() {
        0
    } else {
        r.clamp(0.0, 65535.0) as u16
    }
}

/// Encodes depths as canonical 16-bit P5 (rounded and clamped to `0..=65535`).
pub fn encode_depth<T: Real>(dm: &DepthMap<T>) -> Vec<u8> {
    let samples: Vec<u16> = dm.depth().iter().map(|&d| to_u16(d)).collect();
    encode_pgm16(dm.width(), dm.height(), &samples)
}

pub fn save_depth<T: Real>(dm: &DepthMap<T>, path: &Path) -> Result<()> {
    write_file(path, &encode_depth(dm))
}

pub fn save_mask<T: Real>(dm: &DepthMap<T>, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = dm.mask().iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_pgm8(path, dm.width(), dm.height(), &bytes)
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub depth: PathBuf,
    pub mask: Option<PathBuf>,
    pub label: String,
    /// Index of `label` in [`DatasetManifest::categories`].
    pub class: usize,
    pub item: String,
}

impl ManifestEntry {
    pub fn load<T: Real>(&self) -> Result<DepthMap<T>> {
        load_depth(&self.depth, self.mask.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub categories: Vec<String>,
}

const MANIFEST_HEADER: [&str; 4] = ["depth", "mask", "label", "item"];
const CATEGORIES_DIRECTIVE: &str = "# categories:";

impl DatasetManifest {
    /// Parses manifest text. Relative paths resolve against `base`.
    ///
    /// A leading `# categories: a,b,c` line fixes the class order; labels
    /// outside it are rejected. Without it, classes follow the order in which
    /// labels first appear.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut declared: Option<Vec<String>> = None;
        for line in text.lines() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix(CATEGORIES_DIRECTIVE) {
                declared = Some(
                    rest.split(',')
                        .map(|s| s.trim().to_string())
                        .filter(|s| !s.is_empty())
                        .collect(),
                );
            } else if !line.starts_with('#') && !line.is_empty() {
                break;
            }
        }

        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| Error::Format(format!("manifest header: {e}")))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::Format(format!(
                "manifest header must be `depth,mask,label,item`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }

        let mut rows = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Format(format!("manifest row {}: {e}", line + 2)))?;
            if rec.len() != 4 {
                return Err(Error::Format(format!(
                    "manifest row {} has {} fields",
                    line + 2,
                    rec.len()
                )));
            }
            let resolve = |s: &str| {
                let p = PathBuf::from(s);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            let mask = if rec[1].is_empty() {
                None
            } else {
                Some(resolve(&rec[1]))
            };
            if rec[2].is_empty() || rec[3].is_empty() {
                return Err(Error::Format(format!(
                    "manifest row {} lacks a label or item id",
                    line + 2
                )));
            }
            rows.push((resolve(&rec[0]), mask, rec[2].to_string(), rec[3].to_string()));
        }

        let categories = match declared {
            Some(c) => c,
            None => first_appearance(rows.iter().map(|r| r.2.as_str())),
        };
        let mut entries = Vec::with_capacity(rows.len());
        for (depth, mask, label, item) in rows {
            let class = categories.iter().position(|c| *c == label).ok_or_else(|| {
                Error::Format(format!("label {label:?} is not in the category list"))
            })?;
            entries.push(ManifestEntry {
                depth,
                mask,
                label,
                class,
                item,
            });
        }
        Ok(Self {
            entries,
            categories,
        })
    }

    pub fn to_csv(&self, base: &Path) -> String {
        let rel = |p: &Path| {
            p.strip_prefix(base)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        let mut out = String::new();
        let implied = first_appearance(self.entries.iter().map(|e| e.label.as_str()));
        if !self.entries.is_empty() && implied != self.categories {
            out.push_str(&format!("{CATEGORIES_DIRECTIVE} {}\n", self.categories.join(",")));
        }
        out.push_str("depth,mask,label,item\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{}\n",
                rel(&e.depth),
                e.mask.as_deref().map(rel).unwrap_or_default(),
                e.label,
                e.item
            ));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Keeps only the entries at `indices`, preserving categories.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            entries: indices.iter().map(|&i| self.entries[i].clone()).collect(),
            categories: self.categories.clone(),
        }
    }
}

fn first_appearance<'a>(labels: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for l in labels {
        if !out.iter().any(|c| c == l) {
            out.push(l.to_string());
        }
    }
    out
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    DatasetManifest::parse(&text, base)
}

// ---------------------------------------------------------------------------
// Synthetic surfaces

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub class_id: usize,
    pub width: usize,
    pub height: usize,
    /// Inclusive `(min, max)` number of ridges.
    pub wrinkle_count: (usize, usize),
    /// Ridge cross-section standard deviation, pixels.
    pub ridge_width_sigma: f64,
    /// Ridge amplitude, mm.
    pub ridge_height: f64,
    pub base_depth: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            class_id: 0,
            width: 256,
            height: 256,
            wrinkle_count: (4, 8),
            ridge_width_sigma: 6.0,
            ridge_height: 20.0,
            base_depth: 800.0,
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge_width_sigma > 0.0) {
            return Err(Error::Config("ridge width sigma must be > 0".into()));
        }
        if !(self.ridge_height > 0.0) {
            return Err(Error::Config("ridge height must be > 0".into()));
        }
        if self.wrinkle_count.0 > self.wrinkle_count.1 {
            return Err(Error::Config("wrinkle count range has min > max".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.base_depth.is_finite() {
            return Err(Error::Config("noise sigma must be >= 0 and base depth finite".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("synthetic image must be non-empty".into()));
        }
        Ok(())
    }
}

/// Straight ridge spine from `a` to `b` (pixel coordinates).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RidgeSegment {
    pub a: (f64, f64),
    pub b: (f64, f64),
    pub sigma: f64,
    pub height: f64,
}

impl RidgeSegment {
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((x - self.a.0) * dx + (y - self.a.1) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (px, py) = (self.a.0 + t * dx, self.a.1 + t * dy);
        ((x - px).powi(2) + (y - py).powi(2)).sqrt()
    }

    pub fn profile(&self, x: f64, y: f64) -> f64 {
        let d = self.distance(x, y);
        self.height * (-d * d / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Renders `base + sum of ridge profiles` with no noise, full mask.
pub fn render_ridges<T: Real>(
    width: usize,
    height: usize,
    base: f64,
    ridges: &[RidgeSegment],
) -> DepthMap<T> {
    DepthMap::from_fn(width, height, |x, y| {
        let (fx, fy) = (x as f64, y as f64);
        T::of(base + ridges.iter().map(|r| r.profile(fx, fy)).sum::<f64>())
    })
}

/// Draws the ridge spines a [`SynthSpec`] describes.
pub fn synth_ridges(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<RidgeSegment> {
    let (lo, hi) = spec.wrinkle_count;
    let count = rng.random_range(lo..=hi);
    let (w, h) = (spec.width as f64, spec.height as f64);
    let side = w.min(h);
    (0..count)
        .map(|_| {
            let cx = rng.random_range(0.0..w);
            let cy = rng.random_range(0.0..h);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let half = 0.5 * side * rng.random_range(0.3..0.8);
            let (ux, uy) = (angle.cos() * half, angle.sin() * half);
            RidgeSegment {
                a: (cx - ux, cy - uy),
                b: (cx + ux, cy + uy),
                sigma: spec.ridge_width_sigma,
                height: spec.ridge_height,
            }
        })
        .collect()
}

/// Deterministic wrinkled surface: base plane, Gaussian ridges along random
/// straight spines, white noise. Bit-identical for identical specs.
pub fn synth_surface<T: Real>(spec: &SynthSpec) -> Result<DepthMap<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ridges = synth_ridges(spec, &mut rng);
    let clean = render_ridges::<f64>(spec.width, spec.height, spec.base_depth, &ridges);
    if spec.noise_sigma == 0.0 {
        return Ok(clean.map_depth_into());
    }
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
    let depth = clean
        .depth()
        .iter()
        .map(|&d| T::of(d + noise.sample(&mut rng)))
        .collect();
    DepthMap::new(spec.width, spec.height, depth, clean.mask().to_vec())
}

impl DepthMap<f64> {
    fn map_depth_into<T: Real>(&self) -> DepthMap<T> {
        DepthMap {
            width: self.width,
            height: self.height,
            depth: self.depth.iter().map(|&d| T::of(d)).collect(),
            mask: self.mask.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic datasets

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClass {
    pub name: String,
    pub wrinkle_count: (usize, usize),
    pub ridge_width_sigma: f64,
    pub ridge_height: f64,
}

/// Multi-class synthetic dataset description, read from a flat `key = value`
/// file:
///
/// ```text
/// width = 256
/// height = 256
/// seed = 7
/// samples_per_item = 5
/// class.0.name = narrow
/// class.0.ridge_width_sigma = 4
/// class.0.ridge_height = 16
/// class.0.wrinkles = 6..10
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDatasetSpec {
    pub width: usize,
    pub height: usize,
    pub base_depth: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub samples_per_item: usize,
    /// Relative per-item jitter applied to ridge width and height.
    pub item_jitter: f64,
    pub classes: Vec<SynthClass>,
}

impl Default for SynthDatasetSpec {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            base_depth: 800.0,
            noise_sigma: 0.5,
            seed: 0,
            samples_per_item: 5,
            item_jitter: 0.1,
            classes: vec![
                SynthClass {
                    name: "narrow".into(),
                    wrinkle_count: (6, 10),
                    ridge_width_sigma: 4.0,
                    ridge_height: 16.0,
                },
                SynthClass {
                    name: "medium".into(),
                    wrinkle_count: (4, 8),
                    ridge_width_sigma: 8.0,
                    ridge_height: 20.0,
                },
                SynthClass {
                    name: "wide".into(),
                    wrinkle_count: (3, 6),
                    ridge_width_sigma: 14.0,
                    ridge_height: 24.0,
                },
            ],
        }
    }
}

fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for `{key}`")))
}

/// Parses `key = value` lines (`#` comments, blank lines ignored).
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl SynthDatasetSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SynthDatasetSpec {
            classes: Vec::new(),
            ..Default::default()
        };
        let mut classes: std::collections::BTreeMap<usize, SynthClass> = Default::default();
        for (k, v) in parse_key_values(text)? {
            match k.as_str() {
                "width" => spec.width = parse_value(&k, &v)?,
                "height" => spec.height = parse_value(&k, &v)?,
                "base_depth" => spec.base_depth = parse_value(&k, &v)?,
                "noise_sigma" => spec.noise_sigma = parse_value(&k, &v)?,
                "seed" => spec.seed = parse_value(&k, &v)?,
                "samples_per_item" => spec.samples_per_item = parse_value(&k, &v)?,
                "item_jitter" => spec.item_jitter = parse_value(&k, &v)?,
                _ => {
                    let parts: Vec<&str> = k.splitn(3, '.').collect();
                    if parts.len() != 3 || parts[0] != "class" {
                        return Err(Error::Config(format!("unknown synth key `{k}`")));
                    }
                    let id: usize = parse_value(&k, parts[1])?;
                    let class = classes.entry(id).or_insert_with(|| SynthClass {
                        name: format!("class{id}"),
                        wrinkle_count: (4, 8),
                        ridge_width_sigma: 6.0,
                        ridge_height: 20.0,
                    });
                    match parts[2] {
                        "name" => class.name = v.clone(),
                        "ridge_width_sigma" => class.ridge_width_sigma = parse_value(&k, &v)?,
                        "ridge_height" => class.ridge_height = parse_value(&k, &v)?,
                        "wrinkles" => {
                            let (lo, hi) = v.split_once("..").ok_or_else(|| {
                                Error::Config(format!("`{k}` expects min..max"))
                            })?;
                            class.wrinkle_count =
                                (parse_value(&k, lo.trim())?, parse_value(&k, hi.trim())?);
                        }
                        _ => return Err(Error::Config(format!("unknown synth key `{k}`"))),
                    }
                }
            }
        }
        spec.classes = classes.into_values().collect();
        if spec.classes.is_empty() {
            spec.classes = SynthDatasetSpec::default().classes;
        }
        if spec.samples_per_item == 0 {
            return Err(Error::Config("samples_per_item must be >= 1".into()));
        }
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "width = {}\nheight = {}\nbase_depth = {}\nnoise_sigma = {}\nseed = {}\nsamples_per_item = {}\nitem_jitter = {}\n",
            self.width,
            self.height,
            self.base_depth,
            self.noise_sigma,
            self.seed,
            self.samples_per_item,
            self.item_jitter
        );
        for (i, c) in self.classes.iter().enumerate() {
            s.push_str(&format!(
                "class.{i}.name = {}\nclass.{i}.wrinkles = {}..{}\nclass.{i}.ridge_width_sigma = {}\nclass.{i}.ridge_height = {}\n",
                c.name, c.wrinkle_count.0, c.wrinkle_count.1, c.ridge_width_sigma, c.ridge_height
            ));
        }
        s
    }

    fn mix_seed(&self, parts: &[u64]) -> u64 {
        // splitmix64 over the parts
        let mut z = self.seed;
        for &p in parts {
            z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
        }
        z
    }

    /// Per-sample specs: `n_per_class` samples per class, grouped into items
    /// of `samples_per_item` samples that share jittered ridge statistics.
    /// Returns `(class, item-id, spec)` triples.
    pub fn sample_specs(&self, n_per_class: usize) -> Vec<(usize, String, SynthSpec)> {
        let mut out = Vec::new();
        for (ci, class) in self.classes.iter().enumerate() {
            for s in 0..n_per_class {
                let item = s / self.samples_per_item;
                let mut item_rng =
                    ChaCha8Rng::seed_from_u64(self.mix_seed(&[ci as u64, item as u64]));
                let jitter = |rng: &mut ChaCha8Rng| {
                    if self.item_jitter > 0.0 {
                        1.0 + rng.random_range(-self.item_jitter..=self.item_jitter)
                    } else {
                        1.0
                    }
                };
                let wj = jitter(&mut item_rng);
                let hj = jitter(&mut item_rng);
                let spec = SynthSpec {
                    class_id: ci,
                    width: self.width,
                    height: self.height,
                    wrinkle_count: class.wrinkle_count,
                    ridge_width_sigma: class.ridge_width_sigma * wj,
                    ridge_height: class.ridge_height * hj,
                    base_depth: self.base_depth,
                    noise_sigma: self.noise_sigma,
                    seed: self.mix_seed(&[ci as u64, item as u64, s as u64, 1]),
                };
                out.push((ci, format!("{}-{:03}", class.name, item), spec));
            }
        }
        out
    }
}

/// Writes depth/mask PGMs and `manifest.csv` into `out_dir`; returns the
/// manifest path.
pub fn write_synth_dataset(
    spec: &SynthDatasetSpec,
    out_dir: &Path,
    n_per_class: usize,
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let samples = spec.sample_specs(n_per_class);
    let rendered: Vec<Result<(usize, String, PathBuf, PathBuf)>> = {
        use rayon::prelude::*;
        samples
            .par_iter()
            .enumerate()
            .map(|(i, (ci, item, s))| {
                let dm = synth_surface::<f64>(s)?;
                let stem = format!("{}_{:05}", spec.classes[*ci].name, i % n_per_class);
                let dp = out_dir.join(format!("{stem}_depth.pgm"));
                let mp = out_dir.join(format!("{stem}_mask.pgm"));
                save_depth(&dm, &dp)?;
                save_mask(&dm, &mp)?;
                Ok((*ci, item.clone(), dp, mp))
            })
            .collect()
    };
    let mut manifest = DatasetManifest {
        entries: Vec::with_capacity(rendered.len()),
        categories: spec.classes.iter().map(|c| c.name.clone()).collect(),
    };
    for r in rendered {
        let (ci, item, dp, mp) = r?;
        manifest.entries.push(ManifestEntry {
            depth: dp,
            mask: Some(mp),
            label: spec.classes[ci].name.clone(),
            class: ci,
            item,
        });
    }
    let path = out_dir.join("manifest.csv");
    write_file(&path, manifest.to_csv(out_dir).as_bytes())?;
    Ok(path)
}
