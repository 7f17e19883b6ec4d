//! Datasets (MVTec directory layout and a procedural stand-in), PNG codecs
//! and heatmap rendering.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::bilinear_resize;
use crate::tensor::init::derive_seed;
use crate::tensor::{no_grad, Element, Tensor};

#[derive(Clone, Debug)]
pub struct Sample<T: Element> {
    /// `3×S×S`, values in [0, 1].
    pub image: Tensor<T>,
    pub anomalous: bool,
    /// `S×S` binary ground truth; present for every test sample.
    pub mask: Option<Tensor<T>>,
    /// File path, or a generator tag for synthetic samples.
    pub source: String,
    /// File size in bytes, or pixel count for synthetic samples.
    pub bytes: u64,
    /// Defect type directory (`good` for normal samples).
    pub group: String,
}

#[derive(Clone, Debug)]
pub struct Dataset<T: Element> {
    pub train: Vec<Sample<T>>,
    pub test: Vec<Sample<T>>,
}

fn image_err(path: &Path, detail: impl ToString) -> Error {
    Error::Image { path: path.to_path_buf(), detail: detail.to_string() }
}

/// Decodes any PNG into 8-bit samples; returns `(width, height, channels, bytes)`.
fn decode_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    Ok((info.width as usize, info.height as usize, channels, buf))
}

/// Reads a PNG as `3×size×size` RGB in [0, 1] (bilinear resize).
pub fn load_image<T: Element>(path: &Path, size: usize) -> Result<Tensor<T>> {
    let (w, h, ch, buf) = decode_png(path)?;
    let plane = w * h;
    let mut px = vec![T::zero(); 3 * plane];
    for p in 0..plane {
        let s = &buf[p * ch..][..ch];
        let rgb = if ch >= 3 { [s[0], s[1], s[2]] } else { [s[0]; 3] };
        for c in 0..3 {
            px[c * plane + p] = T::of(rgb[c] as f64 / 255.0);
        }
    }
    let t = Tensor::new(px, &[1, 3, h, w])?;
    let t = no_grad(|| bilinear_resize(&t, size, size))?;
    let clamped = t.data().iter().map(|v| T::of(v.as_f64().clamp(0.0, 1.0))).collect();
    Tensor::new(clamped, &[3, size, size])
}

/// Reads a mask PNG (first channel), nearest-resized and thresholded at 0.5.
pub fn load_mask<T: Element>(path: &Path, size: usize) -> Result<Tensor<T>> {
    let (w, h, ch, buf) = decode_png(path)?;
    let values: Vec<f64> = (0..w * h).map(|p| buf[p * ch] as f64 / 255.0).collect();
    let m = crate::eval::resize_mask_nearest(&values, h, w, size, size);
    Tensor::new(m.into_iter().map(|b| if b { T::one() } else { T::zero() }).collect(), &[size, size])
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn file_sample<T: Element>(path: &Path, size: usize, anomalous: bool, mask: Option<Tensor<T>>, group: &str) -> Result<Sample<T>> {
    let bytes = std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
    Ok(Sample { image: load_image(path, size)?, anomalous, mask, source: path.display().to_string(), bytes, group: group.into() })
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads `<root>/<category>/{train/good, test/<type>, ground_truth/<type>}`.
/// Masks are matched to test images by stem (`000.png` ↔ `000_mask.png` or `000.png`).
pub fn load_mvtec_category<T: Element>(root: &Path, category: &str, size: usize) -> Result<Dataset<T>> {
    let base = root.join(category);
    let train_dir = base.join("train").join("good");
    let test_dir = base.join("test");
    for d in [&train_dir, &test_dir] {
        if !d.is_dir() {
            return Err(Error::Dataset(format!("missing directory {}", d.display())));
        }
    }
    let train = sorted_pngs(&train_dir)?.iter().map(|p| file_sample(p, size, false, None, "good")).collect::<Result<Vec<_>>>()?;
    let mut test = Vec::new();
    for dir in sorted_dirs(&test_dir)? {
        let group = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let images = sorted_pngs(&dir)?;
        let stems: Vec<String> = images.iter().map(|p| stem(p)).collect();
        let gt_dir = base.join("ground_truth").join(&group);
        let mut masks = std::collections::BTreeMap::new();
        if group != "good" {
            if !gt_dir.is_dir() {
                return Err(Error::Dataset(format!("missing ground truth directory {}", gt_dir.display())));
            }
            for m in sorted_pngs(&gt_dir)? {
                let s = stem(&m);
                let key = s.strip_suffix("_mask").unwrap_or(&s).to_string();
                if !stems.contains(&key) {
                    return Err(Error::Dataset(format!("mask {} has no matching test image", m.display())));
                }
                masks.insert(key, m);
            }
        }
        for (p, s) in images.iter().zip(&stems) {
            let anomalous = group != "good";
            let mask = match masks.get(s) {
                Some(m) => load_mask(m, size)?,
                None if anomalous => return Err(Error::Dataset(format!("no ground truth mask for {}", p.display()))),
                None => Tensor::zeros(&[size, size])?,
            };
            test.push(file_sample(p, size, anomalous, Some(mask), &group)?);
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Dataset(format!("{} has an empty train or test split", base.display())));
    }
    Ok(Dataset { train, test })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    Stripes,
    Checker,
    Blobs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectKind {
    ColorPatch,
    Occlusion,
    Scratch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    pub size: usize,
    /// Fixed texture family; chosen from the seed when absent.
    pub texture: Option<Texture>,
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { seed: 0, n_train: 50, n_test_normal: 20, n_test_anomalous: 20, size: 64, texture: None, noise: 0.02 }
    }
}

/// Dataset-wide appearance shared by every render.
#[derive(Clone, Debug)]
struct Style {
    texture: Texture,
    colors: [[f64; 3]; 2],
    period: f64,
    angle: f64,
}

impl Style {
    fn for_spec(spec: &SyntheticSpec) -> Style {
        let s = spec.size as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "style"));
        let texture = spec.texture.unwrap_or(match rng.random_range(0..3) {
            0 => Texture::Stripes,
            1 => Texture::Checker,
            _ => Texture::Blobs,
        });
        let mut color = || [rng.random_range(0.15..0.85), rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)];
        let colors = [color(), color()];
        Style { texture, colors, period: rng.random_range(s / 8.0..s / 4.0), angle: rng.random_range(0.0..std::f64::consts::PI) }
    }
}

fn render(style: &Style, size: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let plane = size * size;
    let tau = std::f64::consts::TAU;
    let (sin, cos) = style.angle.sin_cos();
    let (px, py) = (rng.random_range(0.0..tau), rng.random_range(0.0..tau));
    let blobs: Vec<(f64, f64)> = (0..8).map(|_| (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64))).collect();
    let mut out = vec![0.0; 3 * plane];
    let gauss = Normal::new(0.0, noise.max(1e-12)).expect("positive sigma");
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let (u, v) = (fx * cos + fy * sin, -fx * sin + fy * cos);
            let t = match style.texture {
                Texture::Stripes => 0.5 + 0.5 * (tau * u / style.period + px).sin(),
                Texture::Checker => 0.5 + 0.5 * (3.0 * (tau * u / style.period + px).sin() * (tau * v / style.period + py).sin()).tanh(),
                Texture::Blobs => {
                    let r2 = (style.period / 2.0).powi(2);
                    blobs.iter().map(|&(bx, by)| (-((fx - bx).powi(2) + (fy - by).powi(2)) / (2.0 * r2)).exp()).sum::<f64>().min(1.0)
                }
            };
            for c in 0..3 {
                let base = style.colors[0][c] * (1.0 - t) + style.colors[1][c] * t;
                let n = if noise > 0.0 { gauss.sample(rng) } else { 0.0 };
                out[c * plane + y * size + x] = (base + n).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Paints one defect into `px`, returning its exact mask.
fn inject_defect(px: &mut [f64], size: usize, kind: DefectKind, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let plane = size * size;
    let lo = 16.min(size / 2).max(1);
    let hi = (size / 3).max(lo);
    let mut mask = vec![false; plane];
    match kind {
        DefectKind::ColorPatch | DefectKind::Occlusion => {
            let (h, w) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
            let (y0, x0) = (rng.random_range(0..=size - h), rng.random_range(0..=size - w));
            let color = match kind {
                DefectKind::ColorPatch => [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
                _ => [rng.random_range(0.02..0.12); 3],
            };
            let elliptic = kind == DefectKind::ColorPatch;
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    if elliptic {
                        let dy = (y as f64 + 0.5 - y0 as f64 - h as f64 / 2.0) / (h as f64 / 2.0);
                        let dx = (x as f64 + 0.5 - x0 as f64 - w as f64 / 2.0) / (w as f64 / 2.0);
                        if dx * dx + dy * dy > 1.0 {
                            continue;
                        }
                    }
                    mask[y * size + x] = true;
                    for c in 0..3 {
                        px[c * plane + y * size + x] = color[c];
                    }
                }
            }
        }
        DefectKind::Scratch => {
            let len = rng.random_range(lo as f64..=(size as f64 / 2.0).max(lo as f64));
            let half_thick = (size as f64 / 64.0).max(1.5);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let (dx, dy) = (angle.cos() * len / 2.0, angle.sin() * len / 2.0);
            let margin = half_thick.ceil();
            let cx = rng.random_range(dx.abs() + margin..=size as f64 - dx.abs() - margin);
            let cy = rng.random_range(dy.abs() + margin..=size as f64 - dy.abs() - margin);
            let bright = rng.random_bool(0.5);
            for y in 0..size {
                for x in 0..size {
                    // Distance from the pixel center to the segment.
                    let (qx, qy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let t = ((qx * dx + qy * dy) / (dx * dx + dy * dy)).clamp(-1.0, 1.0);
                    let d = ((qx - t * dx).powi(2) + (qy - t * dy).powi(2)).sqrt();
                    if d <= half_thick {
                        mask[y * size + x] = true;
                        for c in 0..3 {
                            px[c * plane + y * size + x] = if bright { 0.97 } else { 0.03 };
                        }
                    }
                }
            }
        }
    }
    mask
}

/// Procedural texture dataset with exact defect masks, fully determined by the spec.
pub fn generate_synthetic_dataset<T: Element>(spec: &SyntheticSpec) -> Result<Dataset<T>> {
    let s = spec.size;
    if spec.n_train == 0 || spec.n_test_normal == 0 || spec.n_test_anomalous == 0 {
        return Err(Error::Dataset("synthetic dataset needs at least one sample per split".into()));
    }
    if s < 16 || !s.is_multiple_of(4) {
        return Err(Error::Dataset(format!("synthetic image size {s} must be a multiple of 4 and at least 16")));
    }
    let style = Style::for_spec(spec);
    let to_tensor = |px: Vec<f64>, shape: &[usize]| Tensor::new(px.into_iter().map(T::of).collect(), shape);
    let make = |split: &str, i: usize, kind: Option<DefectKind>| -> Result<Sample<T>> {
        let tag = format!("synthetic/{split}/{i:04}");
        let mut r = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &tag));
        let mut px = render(&style, s, spec.noise, &mut r);
        let mask = kind.map(|k| inject_defect(&mut px, s, k, &mut r));
        let mask = match (split, mask) {
            ("train", _) => None,
            (_, Some(m)) => Some(to_tensor(m.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect(), &[s, s])?),
            (_, None) => Some(Tensor::zeros(&[s, s])?),
        };
        let group = match kind {
            None => "good",
            Some(DefectKind::ColorPatch) => "color",
            Some(DefectKind::Occlusion) => "occlusion",
            Some(DefectKind::Scratch) => "scratch",
        };
        Ok(Sample { image: to_tensor(px, &[3, s, s])?, anomalous: kind.is_some(), mask, source: tag, bytes: (3 * s * s) as u64, group: group.into() })
    };
    let kinds = [DefectKind::ColorPatch, DefectKind::Occlusion, DefectKind::Scratch];
    let train = (0..spec.n_train).map(|i| make("train", i, None)).collect::<Result<Vec<_>>>()?;
    let mut test = (0..spec.n_test_normal).map(|i| make("test-good", i, None)).collect::<Result<Vec<_>>>()?;
    for i in 0..spec.n_test_anomalous {
        test.push(make("test-defect", i, Some(kinds[i % 3]))?);
    }
    Ok(Dataset { train, test })
}

/// Renders the clean texture behind synthetic test sample `tag`, for checks.
pub fn synthetic_clean_render(spec: &SyntheticSpec, tag: &str) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, tag));
    render(&Style::for_spec(spec), spec.size, spec.noise, &mut r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: String,
    pub path: String,
    pub anomalous: bool,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// SHA-256 over (split, path, label, size) lines, hex encoded.
    pub hash: String,
}

pub fn dataset_manifest<T: Element>(ds: &Dataset<T>) -> Manifest {
    let entries: Vec<ManifestEntry> = [("train", &ds.train), ("test", &ds.test)]
        .into_iter()
        .flat_map(|(split, samples)| {
            samples.iter().map(move |s| ManifestEntry { split: split.into(), path: s.source.clone(), anomalous: s.anomalous, bytes: s.bytes })
        })
        .collect();
    let mut h = Sha256::new();
    for e in &entries {
        h.update(format!("{}\t{}\t{}\t{}\n", e.split, e.path, e.anomalous as u8, e.bytes));
    }
    let hash = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Manifest { entries, hash }
}

const VIRIDIS: [[f64; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 44.0, 122.0],
    [59.0, 81.0, 139.0],
    [44.0, 113.0, 142.0],
    [33.0, 144.0, 141.0],
    [39.0, 173.0, 129.0],
    [92.0, 200.0, 99.0],
    [170.0, 220.0, 50.0],
    [253.0, 231.0, 37.0],
];

/// Viridis color for `t ∈ [0, 1]`, channels in [0, 1].
pub fn viridis(t: f64) -> [f64; 3] {
    let x = t.clamp(0.0, 1.0) * 8.0;
    let i = (x.floor() as usize).min(7);
    let f = x - i as f64;
    std::array::from_fn(|c| (VIRIDIS[i][c] * (1.0 - f) + VIRIDIS[i + 1][c] * f) / 255.0)
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(data).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

/// Saves a `3×H×W` [0, 1] image as 8-bit RGB.
pub fn save_image_png<T: Element>(im: &Tensor<T>, path: &Path) -> Result<()> {
    let [3, h, w] = *im.shape() else {
        return Err(Error::shape("save_image_png", format!("expected 3×H×W, got {:?}", im.shape())));
    };
    let plane = h * w;
    let d = im.data();
    let bytes: Vec<u8> = (0..plane).flat_map(|p| (0..3).map(move |c| (d[c * plane + p].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)).collect();
    write_png(path, w, h, png::ColorType::Rgb, png::BitDepth::Eight, &bytes)
}

fn min_max(map: &[f64]) -> (f64, f64) {
    map.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Input | min-max normalized viridis map | 50% overlay, side by side (`H×3W` RGB).
pub fn save_heatmap_png<T: Element>(map: &[f64], image: &Tensor<T>, path: &Path) -> Result<()> {
    let [3, h, w] = *image.shape() else {
        return Err(Error::shape("save_heatmap_png", format!("expected a 3×H×W image, got {:?}", image.shape())));
    };
    if map.len() != h * w {
        return Err(Error::shape("save_heatmap_png", format!("map has {} pixels, image {h}×{w}", map.len())));
    }
    let (lo, hi) = min_max(map);
    let span = hi - lo;
    let plane = h * w;
    let d = image.data();
    let to8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut bytes = Vec::with_capacity(9 * plane);
    for y in 0..h {
        let row: Vec<([f64; 3], [f64; 3])> = (0..w)
            .map(|x| {
                let p = y * w + x;
                let rgb = std::array::from_fn(|c| d[c * plane + p].as_f64());
                let t = if span > 0.0 { (map[p] - lo) / span } else { 0.0 };
                (rgb, viridis(t))
            })
            .collect();
        for (rgb, _) in &row {
            bytes.extend(rgb.iter().map(|&v| to8(v)));
        }
        for (_, col) in &row {
            bytes.extend(col.iter().map(|&v| to8(v)));
        }
        for (rgb, col) in &row {
            bytes.extend((0..3).map(|c| to8(0.5 * rgb[c] + 0.5 * col[c])));
        }
    }
    write_png(path, 3 * w, h, png::ColorType::Rgb, png::BitDepth::Eight, &bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub image_score: f64,
    pub min: f64,
    pub max: f64,
}

/// 16-bit grayscale PNG of the min-max scaled map plus a `.json` sidecar
/// holding the score and the scaling range.
pub fn save_map_png16(map: &[f64], h: usize, w: usize, image_score: f64, path: &Path) -> Result<PathBuf> {
    if map.len() != h * w {
        return Err(Error::shape("save_map_png16", format!("map has {} pixels, expected {h}×{w}", map.len())));
    }
    let (lo, hi) = min_max(map);
    let span = hi - lo;
    let bytes: Vec<u8> = map
        .iter()
        .flat_map(|&v| {
            let q = if span > 0.0 { ((v - lo) / span * 65535.0).round() as u16 } else { 0 };
            q.to_be_bytes()
        })
        .collect();
    write_png(path, w, h, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)?;
    let sidecar = path.with_extension("json");
    let json = serde_json::to_string_pretty(&MapSidecar { image_score, min: lo, max: hi })?;
    std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
    Ok(sidecar)
}

/// Decodes a 16-bit map PNG back to `[0, 65535]` integers.
pub fn read_map_png16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(|e| image_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| image_err(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    if info.bit_depth != png::BitDepth::Sixteen || info.color_type != png::ColorType::Grayscale {
        return Err(image_err(path, "not a 16-bit grayscale map"));
    }
    let vals = buf[..info.buffer_size()].chunks(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
    Ok((info.width as usize, info.height as usize, vals))
}

/// Decodes an 8-bit RGB PNG into `(width, height, interleaved bytes)`.
pub fn read_rgb_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, ch, buf) = decode_png(path)?;
    if ch != 3 {
        return Err(image_err(path, format!("expected RGB, got {ch} channels")));
    }
    Ok((w, h, buf))
}
