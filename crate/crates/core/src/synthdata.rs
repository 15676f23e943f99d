//! Deterministic generator for the oriented-glyph detection task.
//!
//! Scenes contain "T-with-thumb" glyphs, an asymmetric polygon whose upright
//! form defines the canonical pose, drawn at a known in-plane angle, plus
//! rotationally symmetric distractors (disks and rings at glyph-like
//! intensity) over a noisy background. A glyph rendered at angle `a` is
//! constructed so that derotating its patch by `a` recovers the upright
//! template: pixel q (center-relative) is filled iff the canonical polygon
//! contains R_a * q.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Planar (channel-major) float image with values in [0, 1].
#[derive(Debug, Clone)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Snap every value to the 8-bit grid used by the PGM/PPM writers, so
    /// in-memory pixels match what a reader gets back from disk.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    /// 8-bit binary PGM (1 channel) or PPM (3 channels).
    pub fn write_pnm(&self, path: &Path) -> Result<()> {
        let ctx = || format!("writing {}", path.display());
        let file = fs::File::create(path).map_err(|e| CoreError::io(ctx(), e))?;
        let mut w = BufWriter::new(file);
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            n => {
                return Err(CoreError::invalid(
                    "write_pnm",
                    format!("unsupported channel count {n}"),
                ))
            }
        };
        write!(w, "{}\n{} {}\n255\n", magic, self.width, self.height)
            .map_err(|e| CoreError::io(ctx(), e))?;
        let mut bytes = Vec::with_capacity(self.width * self.height * self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    bytes.push((self.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        w.write_all(&bytes).map_err(|e| CoreError::io(ctx(), e))?;
        Ok(())
    }

    pub fn read_pnm(path: &Path) -> Result<Image> {
        let ctx = || format!("reading {}", path.display());
        let mut raw = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut raw))
            .map_err(|e| CoreError::io(ctx(), e))?;
        let bad = |m: &str| CoreError::invalid("read_pnm", format!("{}: {m}", path.display()));

        let mut pos = 0;
        let mut token = || -> Result<String> {
            while pos < raw.len() && (raw[pos] as char).is_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < raw.len() && !(raw[pos] as char).is_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(CoreError::invalid("read_pnm", "truncated header"));
            }
            Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
        };
        let magic = token()?;
        let channels = match magic.as_str() {
            "P5" => 1,
            "P6" => 3,
            _ => return Err(bad("unsupported magic")),
        };
        let width: usize = token()?.parse().map_err(|_| bad("bad width"))?;
        let height: usize = token()?.parse().map_err(|_| bad("bad height"))?;
        let maxval: usize = token()?.parse().map_err(|_| bad("bad maxval"))?;
        if maxval != 255 {
            return Err(bad("only maxval 255 supported"));
        }
        pos += 1; // single whitespace after maxval
        let need = width * height * channels;
        if raw.len() < pos + need {
            return Err(bad("truncated payload"));
        }
        let mut img = Image::new(width, height, channels);
        let mut i = pos;
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.set(c, y, x, raw[i] as f64 / 255.0);
                    i += 1;
                }
            }
        }
        Ok(img)
    }

    /// Crop `bbox` and resample to size x size with the same 4-nearest-
    /// neighbor averaging and zero padding the derotation layer uses.
    /// Returns a planar (channels, size, size) tensor.
    pub fn crop_resize(&self, bbox: &BBox, size: usize) -> Tensor {
        let mut out = Tensor::zeros(&[self.channels, size, size]);
        let sx = bbox.w / size as f64;
        let sy = bbox.h / size as f64;
        for oy in 0..size {
            let src_y = bbox.y + (oy as f64 + 0.5) * sy - 0.5;
            for ox in 0..size {
                let src_x = bbox.x + (ox as f64 + 0.5) * sx - 0.5;
                let x0 = src_x.floor() as i64;
                let y0 = src_y.floor() as i64;
                for c in 0..self.channels {
                    let mut acc = 0.0;
                    for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        let (x, y) = (x0 + dx, y0 + dy);
                        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
                        {
                            acc += self.at(c, y as usize, x as usize);
                        }
                    }
                    let i = (c * size + oy) * size + ox;
                    out.values_mut()[i] = acc * 0.25;
                }
            }
        }
        out
    }

    /// Like `crop_resize`, but expands the box to a centered square first.
    /// Anisotropic resampling changes the apparent orientation of whatever
    /// is inside the box, so every patch fed to the network goes through
    /// this variant.
    pub fn crop_resize_square(&self, bbox: &BBox, size: usize) -> Tensor {
        let side = bbox.w.max(bbox.h);
        let square = BBox::new(
            bbox.x + (bbox.w - side) * 0.5,
            bbox.y + (bbox.h - side) * 0.5,
            side,
            side,
        );
        self.crop_resize(&square, size)
    }
}

/// Canonical upright glyph: a T with a thumb protrusion on the right side of
/// the stem. Breaks every rotational and mirror symmetry.
pub const GLYPH_TEMPLATE: [(f64, f64); 12] = [
    (-0.50, -0.50),
    (0.50, -0.50),
    (0.50, -0.28),
    (0.13, -0.28),
    (0.13, 0.08),
    (0.38, 0.18),
    (0.30, 0.36),
    (0.13, 0.28),
    (0.13, 0.50),
    (-0.13, 0.50),
    (-0.13, -0.28),
    (-0.50, -0.28),
];

fn jittered_template(rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    GLYPH_TEMPLATE
        .iter()
        .map(|&(x, y)| {
            (
                x + rng.gen_range(-0.02..0.02),
                y + rng.gen_range(-0.02..0.02),
            )
        })
        .collect()
}

/// Even-odd ray casting.
fn polygon_contains(poly: &[(f64, f64)], px: f64, py: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub angle_deg: f64,
}

impl SceneAnnotation {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x, self.y, self.w, self.h)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub glyph_count: (usize, usize),
    pub glyph_size: (f64, f64),
    pub distractor_count: (usize, usize),
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 96,
            height: 96,
            channels: 1,
            glyph_count: (1, 2),
            glyph_size: (26.0, 44.0),
            distractor_count: (2, 5),
            noise_amplitude: 0.06,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.glyph_count.0 <= self.glyph_count.1
            && self.glyph_size.0 <= self.glyph_size.1
            && self.glyph_size.0 > 4.0
            && self.distractor_count.0 <= self.distractor_count.1
            && (self.channels == 1 || self.channels == 3)
            && self.width >= 16
            && self.height >= 16;
        if !ok {
            return Err(CoreError::invalid(
                "SceneConfig",
                "empty range, bad channel count, or degenerate extents",
            ));
        }
        Ok(())
    }
}

struct GlyphSpec {
    poly: Vec<(f64, f64)>,
    intensity: f64,
}

fn sample_glyph_spec(rng: &mut ChaCha8Rng) -> GlyphSpec {
    GlyphSpec {
        poly: jittered_template(rng),
        intensity: rng.gen_range(0.75..0.95),
    }
}

/// Bounds of the drawn pixel set: the canonical polygon mapped through
/// R_a^T, scaled and translated to `center`.
fn glyph_bounds(spec: &GlyphSpec, center: (f64, f64), size: f64, angle_deg: f64) -> BBox {
    let a = angle_deg.to_radians();
    let (ca, sa) = (a.cos(), a.sin());
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(vx, vy) in &spec.poly {
        let (x, y) = (vx * size, vy * size);
        let rx = ca * x + sa * y + center.0;
        let ry = -sa * x + ca * y + center.1;
        min_x = min_x.min(rx);
        min_y = min_y.min(ry);
        max_x = max_x.max(rx);
        max_y = max_y.max(ry);
    }
    BBox::new(min_x, min_y, max_x - min_x, max_y - min_y)
}

fn fits_canvas(bb: &BBox, width: usize, height: usize) -> bool {
    bb.x >= 1.0 && bb.y >= 1.0 && bb.x + bb.w <= width as f64 - 2.0 && bb.y + bb.h <= height as f64 - 2.0
}

fn draw_glyph(canvas: &mut Image, spec: &GlyphSpec, center: (f64, f64), size: f64, angle_deg: f64, bb: &BBox) {
    let a = angle_deg.to_radians();
    let (ca, sa) = (a.cos(), a.sin());
    for y in bb.y.floor() as usize..=(bb.y + bb.h).ceil() as usize {
        for x in bb.x.floor() as usize..=(bb.x + bb.w).ceil() as usize {
            let qx = x as f64 - center.0;
            let qy = y as f64 - center.1;
            // canonical-frame coordinates: R_a * q
            let cx = (ca * qx - sa * qy) / size;
            let cy = (sa * qx + ca * qy) / size;
            if polygon_contains(&spec.poly, cx, cy) {
                for c in 0..canvas.channels {
                    canvas.set(c, y, x, spec.intensity);
                }
            }
        }
    }
}

/// Draw one glyph rotated by `angle_deg` about `center`. Returns None when
/// the rotated bounds leave the canvas (rejection signal to the caller).
pub fn render_glyph(
    canvas: &mut Image,
    center: (f64, f64),
    size: f64,
    angle_deg: f64,
    rng: &mut ChaCha8Rng,
) -> Option<SceneAnnotation> {
    let spec = sample_glyph_spec(rng);
    let bb = glyph_bounds(&spec, center, size, angle_deg);
    if !fits_canvas(&bb, canvas.width, canvas.height) {
        return None;
    }
    draw_glyph(canvas, &spec, center, size, angle_deg, &bb);
    Some(SceneAnnotation {
        x: bb.x,
        y: bb.y,
        w: bb.w,
        h: bb.h,
        angle_deg,
    })
}

fn render_distractor(canvas: &mut Image, rng: &mut ChaCha8Rng, glyph_boxes: &[BBox]) {
    for _ in 0..50 {
        let radius = rng.gen_range(5.0..16.0);
        let cx = rng.gen_range(radius + 1.0..canvas.width as f64 - radius - 1.0);
        let cy = rng.gen_range(radius + 1.0..canvas.height as f64 - radius - 1.0);
        let bb = BBox::new(cx - radius, cy - radius, 2.0 * radius, 2.0 * radius);
        if glyph_boxes.iter().any(|g| crate::eval::iou(&bb, g) > 0.1) {
            continue;
        }
        let intensity = rng.gen_range(0.7..0.95);
        let ring = rng.gen_bool(0.5);
        let inner = radius * rng.gen_range(0.4..0.7);
        for y in (cy - radius).floor() as usize..=(cy + radius).ceil() as usize {
            for x in (cx - radius).floor() as usize..=(cx + radius).ceil() as usize {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let hit = if ring { d <= radius && d >= inner } else { d <= radius };
                if hit {
                    for c in 0..canvas.channels {
                        canvas.set(c, y, x, intensity);
                    }
                }
            }
        }
        return;
    }
}

/// Render one scene. Glyph boxes are rejection-sampled so no pair exceeds
/// IOU 0.3; 1000 failed placements is an error.
pub fn generate_scene(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<(Image, Vec<SceneAnnotation>)> {
    config.validate()?;
    let mut img = Image::new(config.width, config.height, config.channels);
    // background: dim base plus uniform noise
    for c in 0..config.channels {
        for y in 0..config.height {
            for x in 0..config.width {
                let v = 0.12 + config.noise_amplitude * rng.gen_range(0.0..1.0);
                img.set(c, y, x, v);
            }
        }
    }

    let n_glyphs = rng.gen_range(config.glyph_count.0..=config.glyph_count.1);
    let mut annotations: Vec<SceneAnnotation> = Vec::new();
    let mut rejections = 0;
    while annotations.len() < n_glyphs {
        if rejections >= 1000 {
            return Err(CoreError::invalid(
                "generate_scene",
                "non-overlap constraint unsatisfiable after 1000 rejections",
            ));
        }
        let size = rng.gen_range(config.glyph_size.0..=config.glyph_size.1);
        let margin = size * 0.8 + 2.0;
        if 2.0 * margin >= config.width as f64 || 2.0 * margin >= config.height as f64 {
            rejections += 1;
            continue;
        }
        let cx = rng.gen_range(margin..config.width as f64 - margin).round();
        let cy = rng.gen_range(margin..config.height as f64 - margin).round();
        let angle = rng.gen_range(-180.0..180.0);
        let spec = sample_glyph_spec(rng);
        let bb = glyph_bounds(&spec, (cx, cy), size, angle);
        let placeable = fits_canvas(&bb, config.width, config.height)
            && annotations
                .iter()
                .all(|a| crate::eval::iou(&bb, &a.bbox()) <= 0.3);
        if placeable {
            draw_glyph(&mut img, &spec, (cx, cy), size, angle, &bb);
            annotations.push(SceneAnnotation {
                x: bb.x,
                y: bb.y,
                w: bb.w,
                h: bb.h,
                angle_deg: angle,
            });
        } else {
            rejections += 1;
        }
    }

    let glyph_boxes: Vec<BBox> = annotations.iter().map(|a| a.bbox()).collect();
    let n_distractors = rng.gen_range(config.distractor_count.0..=config.distractor_count.1);
    for _ in 0..n_distractors {
        render_distractor(&mut img, rng, &glyph_boxes);
    }

    img.quantize();
    Ok((img, annotations))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub path: String,
    pub annotations: Vec<SceneAnnotation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub entries: Vec<ManifestEntry>,
    pub splits: Splits,
    pub root: PathBuf,
}

impl Dataset {
    pub fn entry(&self, image_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    pub fn load_image(&self, entry: &ManifestEntry) -> Result<Image> {
        Image::read_pnm(&self.root.join(&entry.path))
    }

    pub fn ground_truths(&self, ids: &[String]) -> Vec<crate::boxes::GroundTruth> {
        self.entries
            .iter()
            .filter(|e| ids.contains(&e.image_id))
            .flat_map(|e| {
                e.annotations.iter().map(|a| crate::boxes::GroundTruth {
                    image_id: e.image_id.clone(),
                    bbox: a.bbox(),
                    angle_deg: a.angle_deg,
                })
            })
            .collect()
    }
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    // per-image stream so parallel generation stays deterministic
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e3779b97f4a7c15))
}

/// Generate `n_images` scenes under `config` into `out_dir`: PGM/PPM files,
/// a line-delimited JSON manifest and a 60/20/20 split stratified by glyph
/// count. Byte-identical across runs for a fixed config.
pub fn generate_dataset(config: &SceneConfig, n_images: usize, out_dir: &Path) -> Result<Dataset> {
    config.validate()?;
    fs::create_dir_all(out_dir.join("images"))
        .map_err(|e| CoreError::io(format!("creating {}", out_dir.display()), e))?;

    let mut entries = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let mut rng = image_rng(config.seed, i);
        let (img, annotations) = generate_scene(config, &mut rng)?;
        let image_id = format!("img_{i:05}");
        let ext = if config.channels == 1 { "pgm" } else { "ppm" };
        let rel = format!("images/{image_id}.{ext}");
        img.write_pnm(&out_dir.join(&rel))?;
        entries.push(ManifestEntry {
            image_id,
            path: rel,
            annotations,
        });
    }

    // stratify by glyph count, then deal each stratum 3:1:1
    let mut splits = Splits {
        train: vec![],
        val: vec![],
        test: vec![],
    };
    let mut by_count: std::collections::BTreeMap<usize, Vec<&ManifestEntry>> = Default::default();
    for e in &entries {
        by_count.entry(e.annotations.len()).or_default().push(e);
    }
    for group in by_count.values() {
        for (i, e) in group.iter().enumerate() {
            match i % 5 {
                0 | 1 | 2 => splits.train.push(e.image_id.clone()),
                3 => splits.val.push(e.image_id.clone()),
                _ => splits.test.push(e.image_id.clone()),
            }
        }
    }

    write_manifest(out_dir, &entries, &splits)?;
    Ok(Dataset {
        entries,
        splits,
        root: out_dir.to_path_buf(),
    })
}

fn write_manifest(out_dir: &Path, entries: &[ManifestEntry], splits: &Splits) -> Result<()> {
    let ctx = |p: &Path| format!("writing {}", p.display());
    let manifest_path = out_dir.join("manifest.jsonl");
    let mut w = BufWriter::new(
        fs::File::create(&manifest_path).map_err(|e| CoreError::io(ctx(&manifest_path), e))?,
    );
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")
            .map_err(|e2| CoreError::io(ctx(&manifest_path), e2))?;
    }
    w.flush().map_err(|e| CoreError::io(ctx(&manifest_path), e))?;
    let splits_path = out_dir.join("splits.json");
    fs::write(&splits_path, serde_json::to_string_pretty(splits)?)
        .map_err(|e| CoreError::io(ctx(&splits_path), e))?;
    Ok(())
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join("manifest.jsonl");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| CoreError::io(format!("reading {}", manifest_path.display()), e))?;
    let mut entries = Vec::new();
    for line in text.lines() {
        if !line.trim().is_empty() {
            entries.push(serde_json::from_str(line)?);
        }
    }
    let splits_path = root.join("splits.json");
    let splits = serde_json::from_str(
        &fs::read_to_string(&splits_path)
            .map_err(|e| CoreError::io(format!("reading {}", splits_path.display()), e))?,
    )?;
    Ok(Dataset {
        entries,
        splits,
        root: root.to_path_buf(),
    })
}
