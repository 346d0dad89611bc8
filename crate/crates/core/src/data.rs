//! Synthetic face-like datasets, splits, PPM ingestion and batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::maskgen::{contains, convex_hull, mask_from_landmarks, LandmarkSet, Point};
use crate::tensor::{bilinear_resize, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManipStyle {
    /// Texture perturbed over the whole face hull.
    FullFace,
    /// Texture perturbed over the lower third of the hull only.
    MouthOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_samples: usize,
    /// `[height, width]`.
    #[serde(default = "default_size")]
    pub image_size: [usize; 2],
    pub style: ManipStyle,
    /// Standard deviation of the forgery texture added inside the region.
    #[serde(default = "default_texture")]
    pub texture_amp: f64,
    /// Standard deviation of the sensor noise present in every image.
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    /// Upper bound of the label-independent background texture amplitude.
    #[serde(default = "default_clutter")]
    pub clutter_amp: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_size() -> [usize; 2] {
    [32, 32]
}

fn default_texture() -> f64 {
    0.08
}

fn default_noise() -> f64 {
    0.02
}

fn default_clutter() -> f64 {
    0.12
}

impl DatasetSpec {
    pub fn new(n_samples: usize, style: ManipStyle, seed: u64) -> Self {
        Self {
            n_samples,
            image_size: default_size(),
            style,
            texture_amp: default_texture(),
            noise_std: default_noise(),
            clutter_amp: default_clutter(),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return config_err(format!("a dataset needs at least 2 samples, got {}", self.n_samples));
        }
        let [h, w] = self.image_size;
        if h < 16 || w < 16 {
            return config_err(format!("image size {h}x{w} is too small for a face region (minimum 16x16)"));
        }
        if h > 256 || w > 256 {
            return config_err(format!("image size {h}x{w} exceeds 256x256"));
        }
        for (name, v) in [
            ("texture_amp", self.texture_amp),
            ("noise_std", self.noise_std),
            ("clutter_amp", self.clutter_amp),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return config_err(format!("{name} must be a finite value >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// `[3, h, w]` with values in `[0, 1]`.
    pub image: Tensor,
    /// 0 real, 1 fake.
    pub label: usize,
    pub landmarks: LandmarkSet,
    /// Perturbed polygon for generated fakes.
    pub manipulation_region: Option<Vec<Point>>,
}

struct Face {
    landmarks: Vec<Point>,
}

/// Paints the shared base image and returns its landmarks.
fn paint_base(spec: &DatasetSpec, rng: &mut ChaCha8Rng, img: &mut [f64]) -> Face {
    let [h, w] = spec.image_size;
    let (hf, wf) = (h as f64, w as f64);
    let plane = h * w;
    let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.85));
    let grad: [f64; 2] = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)];
    let cx = wf / 2.0 + rng.gen_range(-0.08..0.08) * wf;
    let cy = hf / 2.0 + rng.gen_range(-0.06..0.06) * hf;
    let rx = rng.gen_range(0.26..0.34) * wf;
    let ry = rng.gen_range(0.32..0.40) * hf;
    let skin: [f64; 3] = {
        let base = rng.gen_range(0.45..0.8);
        [base + 0.1, base, base - 0.12]
    };
    let shade: [f64; 2] = [rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)];
    let clutter = rng.gen_range(0.0..=1.0) * spec.clutter_amp;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / wf - 0.5, y as f64 / hf - 0.5);
            let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
            let r2 = dx * dx + dy * dy;
            for ch in 0..3 {
                let value = if r2 <= 1.0 {
                    skin[ch] + shade[0] * dx * 0.5 + shade[1] * dy * 0.5 - 0.1 * r2
                } else {
                    bg[ch] + grad[0] * u + grad[1] * v
                };
                img[ch * plane + y * w + x] = value;
            }
            // Label-independent high-frequency texture in the background.
            if r2 > 1.0 {
                let n = clutter * normal.sample(rng);
                for ch in 0..3 {
                    img[ch * plane + y * w + x] += n;
                }
            }
        }
    }
    // Eyes and mouth as darker spots.
    let features = [
        (cx - 0.38 * rx, cy - 0.22 * ry, 0.12 * rx),
        (cx + 0.38 * rx, cy - 0.22 * ry, 0.12 * rx),
        (cx, cy + 0.5 * ry, 0.16 * rx),
    ];
    for y in 0..h {
        for x in 0..w {
            for &(fx, fy, fr) in &features {
                let d = ((x as f64 - fx).powi(2) + (y as f64 - fy).powi(2)).sqrt();
                if d <= fr.max(1.0) {
                    for ch in 0..3 {
                        img[ch * plane + y * w + x] -= 0.25;
                    }
                }
            }
        }
    }
    if spec.noise_std > 0.0 {
        for v in img.iter_mut() {
            *v += spec.noise_std * normal.sample(rng);
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let mut landmarks: Vec<Point> = (0..16)
        .map(|k| {
            let t = std::f64::consts::TAU * k as f64 / 16.0 + rng.gen_range(-0.05..0.05);
            [cx + 0.97 * rx * t.cos(), cy + 0.97 * ry * t.sin()]
        })
        .collect();
    landmarks.extend([
        [cx - 0.38 * rx, cy - 0.22 * ry],
        [cx + 0.38 * rx, cy - 0.22 * ry],
        [cx, cy + 0.1 * ry],
        [cx - 0.3 * rx, cy + 0.5 * ry],
        [cx + 0.3 * rx, cy + 0.5 * ry],
    ]);
    let max = [wf - 1.0, hf - 1.0];
    for p in &mut landmarks {
        p[0] = p[0].clamp(0.0, max[0]);
        p[1] = p[1].clamp(0.0, max[1]);
    }
    Face { landmarks }
}

/// Region perturbed in a fake: the hull, or its lower third.
fn style_region(hull: &[Point], style: ManipStyle) -> Vec<Point> {
    match style {
        ManipStyle::FullFace => hull.to_vec(),
        ManipStyle::MouthOnly => {
            let ymin = hull.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
            let ymax = hull.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
            let cut = ymin + (ymax - ymin) * 2.0 / 3.0;
            clip_below(hull, cut)
        }
    }
}

/// Part of a convex polygon with `y >= cut` (image coordinates, y down).
fn clip_below(poly: &[Point], cut: f64) -> Vec<Point> {
    let n = poly.len();
    let mut out = Vec::new();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let (ina, inb) = (a[1] >= cut, b[1] >= cut);
        if ina {
            out.push(a);
        }
        if ina != inb {
            let t = (cut - a[1]) / (b[1] - a[1]);
            out.push([a[0] + t * (b[0] - a[0]), cut]);
        }
    }
    out
}

fn to_sample(spec: &DatasetSpec, img: Vec<f64>, label: usize, face: &Face, region: Option<Vec<Point>>) -> Sample {
    let [h, w] = spec.image_size;
    Sample {
        image: Tensor::from_f64(&[3, h, w], &img).expect("image shape"),
        label,
        landmarks: LandmarkSet {
            points: face.landmarks.clone(),
            image_size: spec.image_size,
        },
        manipulation_region: region,
    }
}

/// The real sample `index` and its forged counterpart, sharing one base image.
pub fn generate_pair(spec: &DatasetSpec, index: usize) -> Result<(Sample, Sample)> {
    spec.validate()?;
    let [h, w] = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let mut base = vec![0.0; 3 * h * w];
    let face = paint_base(spec, &mut rng, &mut base);
    let hull = convex_hull(&face.landmarks)?;
    let region = style_region(&hull, spec.style);
    let mut fake = base.clone();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let n = spec.texture_amp * normal.sample(&mut rng);
            if region.len() >= 3 && contains(&region, [x as f64, y as f64]) {
                for ch in 0..3 {
                    let i = ch * plane + y * w + x;
                    fake[i] = (fake[i] + n).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok((
        to_sample(spec, base, 0, &face, None),
        to_sample(spec, fake, 1, &face, Some(region)),
    ))
}

/// Deterministic dataset: even indices are real, odd indices fake.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..spec.n_samples)
        .map(|i| {
            let (real, fake) = generate_pair(spec, i)?;
            Ok(if i % 2 == 0 { real } else { fake })
        })
        .collect()
}

/// Label-stratified split into train/validation/test.
pub fn split(samples: &[Sample], fractions: [f64; 3], seed: u64) -> Result<[Vec<Sample>; 3]> {
    if fractions.iter().any(|&f| !(f > 0.0)) {
        return config_err(format!("split fractions must be positive, got {fractions:?}"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return config_err(format!("split fractions sum to {total}, not 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    let max_label = samples.iter().map(|s| s.label).max().unwrap_or(0);
    for label in 0..=max_label {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == label).collect();
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_train = (fractions[0] * n).round() as usize;
        let n_val = ((fractions[1] * n).round() as usize).min(idx.len() - n_train);
        parts[0].extend_from_slice(&idx[..n_train]);
        parts[1].extend_from_slice(&idx[n_train..n_train + n_val]);
        parts[2].extend_from_slice(&idx[n_train + n_val..]);
    }
    Ok(parts.map(|mut p| {
        p.sort_unstable();
        p.into_iter().map(|i| samples[i].clone()).collect()
    }))
}

/// A decoded binary PPM image with values scaled to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    /// `[3, h, w]` planes.
    pub data: Vec<f32>,
}

/// Parses a binary `P6` PPM (8- or 16-bit samples).
pub fn parse_ppm(bytes: &[u8], path: &Path) -> Result<PpmImage> {
    let fail = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(fail("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| fail("non-ASCII header"))?);
    }
    if fields[0] != "P6" {
        return Err(fail("not a binary PPM (expected P6 magic)"));
    }
    let parse = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| fail(&format!("invalid {what} {s:?}")))
    };
    let width = parse(fields[1], "width")?;
    let height = parse(fields[2], "height")?;
    let maxval = parse(fields[3], "maxval")?;
    if maxval > 65535 {
        return Err(fail("maxval above 65535"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fail("missing whitespace after header"));
    }
    pos += 1;
    let bps = if maxval < 256 { 1 } else { 2 };
    let n = width * height * 3;
    let body = &bytes[pos..];
    if body.len() < n * bps {
        return Err(fail(&format!("pixel data truncated: {} of {} bytes", body.len(), n * bps)));
    }
    let plane = width * height;
    let mut data = vec![0.0f32; n];
    for i in 0..n {
        let v = if bps == 1 {
            body[i] as usize
        } else {
            (body[2 * i] as usize) << 8 | body[2 * i + 1] as usize
        };
        if v > maxval {
            return Err(fail("sample exceeds maxval"));
        }
        let (pix, ch) = (i / 3, i % 3);
        data[ch * plane + pix] = v as f32 / maxval as f32;
    }
    Ok(PpmImage { width, height, data })
}

/// Writes `[3, h, w]` planes with values in `[0, 1]` as an 8-bit `P6` PPM.
pub fn write_ppm(path: &Path, planes: &[f32], height: usize, width: usize) -> Result<()> {
    if planes.len() != 3 * height * width {
        return Err(Error::Dimension(format!(
            "PPM payload of {} values for a {height}x{width} image",
            planes.len()
        )));
    }
    let mut buf = format!("P6\n{width} {height}\n255\n").into_bytes();
    let plane = height * width;
    for pix in 0..plane {
        for ch in 0..3 {
            buf.push((planes[ch * plane + pix].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

#[derive(Deserialize)]
struct Sidecar {
    points: Vec<Point>,
    label: usize,
}

/// Loads every `*.ppm` with a `.json` sidecar from `dir`, resized to `image_size`.
pub fn ingest(dir: &Path, image_size: [usize; 2]) -> Result<Vec<Sample>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")));
    paths.sort();
    let [oh, ow] = image_size;
    let mut out = Vec::new();
    for path in paths {
        let sidecar_path = path.with_extension("json");
        let Ok(sidecar) = fs::read_to_string(&sidecar_path) else {
            log::warn!("skipping {}: no landmark sidecar", path.display());
            continue;
        };
        let sidecar: Sidecar = serde_json::from_str(&sidecar).map_err(|e| Error::Format {
            path: sidecar_path.clone(),
            reason: e.to_string(),
        })?;
        if sidecar.label > 1 {
            return Err(Error::Format {
                path: sidecar_path,
                reason: format!("label {} is not 0 or 1", sidecar.label),
            });
        }
        let img = parse_ppm(&fs::read(&path)?, &path)?;
        let data = if (img.height, img.width) == (oh, ow) {
            img.data
        } else {
            bilinear_resize(&img.data, 3, img.height, img.width, oh, ow)
        };
        let scale = |v: f64, from: usize, to: usize| if from > 1 { v * (to - 1) as f64 / (from - 1) as f64 } else { v };
        let points = sidecar
            .points
            .iter()
            .map(|p| [scale(p[0], img.width, ow), scale(p[1], img.height, oh)])
            .collect();
        out.push(Sample {
            image: Tensor::new(&[3, oh, ow], data)?,
            label: sidecar.label,
            landmarks: LandmarkSet {
                points,
                image_size,
            },
            manipulation_region: None,
        });
    }
    Ok(out)
}

/// Samples with precomputed ground-truth masks.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    masks: Vec<Tensor>,
}

/// A stacked minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[N, 3, h, w]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// `[N, 1, h, w]`.
    pub masks: Tensor,
}

impl Dataset {
    /// Computes masks, skipping (with a warning) samples whose landmarks are degenerate.
    pub fn new(samples: Vec<Sample>) -> Self {
        let mut kept = Vec::with_capacity(samples.len());
        let mut masks = Vec::with_capacity(samples.len());
        for (i, s) in samples.into_iter().enumerate() {
            match mask_from_landmarks(&s.landmarks) {
                Ok(m) => {
                    kept.push(s);
                    masks.push(m);
                }
                Err(e) => log::warn!("skipping sample {i}: {e}"),
            }
        }
        Self { samples: kept, masks }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mask(&self, i: usize) -> &Tensor {
        &self.masks[i]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let Some(&first) = indices.first() else {
            return Err(Error::Usage("empty batch".into()));
        };
        let s = self.samples[first].image.shape().to_vec();
        let (h, w) = (s[1], s[2]);
        let mut images = Vec::with_capacity(indices.len() * 3 * h * w);
        let mut masks = Vec::with_capacity(indices.len() * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let sample = &self.samples[i];
            if sample.image.shape() != s.as_slice() {
                return Err(Error::Dimension(format!(
                    "sample {i} has shape {:?}, batch expects {s:?}",
                    sample.image.shape()
                )));
            }
            images.extend_from_slice(sample.image.data());
            masks.extend_from_slice(self.masks[i].data());
            labels.push(sample.label);
        }
        let n = indices.len();
        Ok(Batch {
            images: Tensor::new(&[n, 3, h, w], images)?,
            labels,
            masks: Tensor::new(&[n, 1, h, w], masks)?,
        })
    }

    /// Index batches covering the set once, in an order drawn from `rng`.
    pub fn epoch_batches(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}
