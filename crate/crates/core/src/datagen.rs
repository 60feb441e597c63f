//! Synthetic paired try-on data.
//!
//! Each sample is a person image wearing a garment, the same garment laid
//! flat on a product background, and the exact pixel masks of both garment
//! regions. The worn garment is a nearest-neighbor affine warp of the flat
//! one, and the warp parameters are recorded with the sample, so the
//! person-side mask is reproducible from the flat mask bit-for-bit.
//!
//! Everything is derived from an explicit seed; regenerating a dataset
//! produces byte-identical files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::rng;

pub const DEFAULT_H: usize = 64;
pub const DEFAULT_W: usize = 48;

/// Background behind people, in `[-1, 1]` RGB.
pub const PERSON_BG: [f32; 3] = [0.55, 0.60, 0.70];
/// Background behind flat garments.
pub const FLAT_BG: [f32; 3] = [0.72, 0.70, 0.62];
/// Body silhouette color.
pub const SKIN: [f32; 3] = [0.45, 0.10, -0.15];

pub const MIN_MASK_AREA: f64 = 0.05;
pub const MAX_MASK_AREA: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Upper,
    Lower,
    Dress,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Upper, Category::Lower, Category::Dress];

    pub fn index(self) -> usize {
        match self {
            Category::Upper => 0,
            Category::Lower => 1,
            Category::Dress => 2,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Upper => "upper",
            Category::Lower => "lower",
            Category::Dress => "dress",
        };
        f.write_str(s)
    }
}

impl FromStr for Category {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "upper" => Ok(Category::Upper),
            "lower" => Ok(Category::Lower),
            "dress" => Ok(Category::Dress),
            other => Err(Error::Invalid(format!("unknown category {other:?}"))),
        }
    }
}

/// The affine flat-to-worn warp: anisotropic scale plus a vertical shear,
/// mapping the flat garment center onto a category-dependent body anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarpParams {
    pub sx: f32,
    pub sy: f32,
    pub shear: f32,
    pub src_cx: f32,
    pub src_cy: f32,
    pub dst_cx: f32,
    pub dst_cy: f32,
}

impl WarpParams {
    /// Inverse map: the flat-canvas source point for a person-canvas pixel.
    pub fn source_of(&self, x: f32, y: f32) -> (f32, f32) {
        let u = self.src_cx + (x - self.dst_cx) / self.sx;
        let v = self.src_cy + (y - self.dst_cy - self.shear * (u - self.src_cx)) / self.sy;
        (u, v)
    }
}

pub struct SampleTriple {
    /// Person wearing the garment, `[3, H, W]` in `[-1, 1]`.
    pub person: Tensor,
    /// The same garment flat, `[3, H, W]`.
    pub garment: Tensor,
    /// Worn-garment support, `[1, H, W]` in `{0, 1}`.
    pub person_mask: Tensor,
    /// Flat-garment support, `[1, H, W]`.
    pub flat_mask: Tensor,
    pub category: Category,
    pub seed: u64,
    pub warp: WarpParams,
}

fn fill_rect(canvas: &mut [f32], h: usize, w: usize, fx: [f32; 2], fy: [f32; 2], color: [f32; 3]) {
    let x0 = (fx[0] * w as f32) as usize;
    let x1 = ((fx[1] * w as f32) as usize).min(w);
    let y0 = (fy[0] * h as f32) as usize;
    let y1 = ((fy[1] * h as f32) as usize).min(h);
    for y in y0..y1 {
        for x in x0..x1 {
            for ch in 0..3 {
                canvas[ch * h * w + y * w + x] = color[ch];
            }
        }
    }
}

fn fill_circle(canvas: &mut [f32], h: usize, w: usize, cx: f32, cy: f32, r: f32, color: [f32; 3]) {
    for y in 0..h {
        for x in 0..w {
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            if dx * dx + dy * dy <= r * r {
                for ch in 0..3 {
                    canvas[ch * h * w + y * w + x] = color[ch];
                }
            }
        }
    }
}

fn draw_body(canvas: &mut [f32], h: usize, w: usize) {
    // arms, legs, neck, torso, head
    fill_rect(canvas, h, w, [0.19, 0.31], [0.26, 0.52], SKIN);
    fill_rect(canvas, h, w, [0.69, 0.81], [0.26, 0.52], SKIN);
    fill_rect(canvas, h, w, [0.34, 0.48], [0.58, 0.96], SKIN);
    fill_rect(canvas, h, w, [0.52, 0.66], [0.58, 0.96], SKIN);
    fill_rect(canvas, h, w, [0.46, 0.54], [0.20, 0.25], SKIN);
    fill_rect(canvas, h, w, [0.30, 0.70], [0.24, 0.58], SKIN);
    fill_circle(
        canvas,
        h,
        w,
        0.5 * w as f32,
        0.14 * h as f32,
        0.08 * h as f32,
        SKIN,
    );
}

#[derive(Clone, Copy)]
enum Pattern {
    Solid,
    Stripes { period: usize },
    Checker { cell: usize },
}

struct Texture {
    base: [f32; 3],
    accent: [f32; 3],
    pattern: Pattern,
}

impl Texture {
    fn color_at(&self, x: usize, y: usize) -> [f32; 3] {
        match self.pattern {
            Pattern::Solid => self.base,
            Pattern::Stripes { period } => {
                if (y / period) % 2 == 0 {
                    self.base
                } else {
                    self.accent
                }
            }
            Pattern::Checker { cell } => {
                if (x / cell + y / cell) % 2 == 0 {
                    self.base
                } else {
                    self.accent
                }
            }
        }
    }
}

/// Flat-garment silhouette: a vertical trapezoid around the canvas center.
struct Trapezoid {
    cx: f32,
    top_y: f32,
    height: f32,
    top_half_w: f32,
    bot_half_w: f32,
}

impl Trapezoid {
    fn contains(&self, x: f32, y: f32) -> bool {
        let dy = y - self.top_y;
        if dy < 0.0 || dy > self.height {
            return false;
        }
        let frac = dy / self.height;
        let half = self.top_half_w + (self.bot_half_w - self.top_half_w) * frac;
        (x - self.cx).abs() <= half
    }
}

fn draw_geometry(r: &mut ChaCha8Rng, category: Category, h: usize, w: usize) -> Trapezoid {
    let (tw_lo, tw_hi, k_lo, k_hi, gh_lo, gh_hi) = match category {
        Category::Upper => (0.52, 0.72, 0.85, 1.10, 0.34, 0.46),
        Category::Lower => (0.40, 0.55, 0.90, 1.25, 0.40, 0.52),
        Category::Dress => (0.45, 0.60, 1.10, 1.50, 0.55, 0.68),
    };
    let top_w = r.gen_range(tw_lo..tw_hi) as f32 * w as f32;
    let k = r.gen_range(k_lo..k_hi) as f32;
    let gh = r.gen_range(gh_lo..gh_hi) as f32 * h as f32;
    Trapezoid {
        cx: 0.5 * w as f32,
        top_y: 0.5 * h as f32 - gh / 2.0,
        height: gh,
        top_half_w: top_w / 2.0,
        bot_half_w: top_w * k / 2.0,
    }
}

fn draw_color(r: &mut ChaCha8Rng) -> [f32; 3] {
    [
        r.gen_range(-0.8..0.8) as f32,
        r.gen_range(-0.8..0.8) as f32,
        r.gen_range(-0.8..0.8) as f32,
    ]
}

fn draw_texture(r: &mut ChaCha8Rng) -> Texture {
    let base = draw_color(r);
    let accent = draw_color(r);
    let sizes = [3usize, 4, 6];
    let pattern = match r.gen_range(0..3u32) {
        0 => Pattern::Solid,
        1 => Pattern::Stripes {
            period: sizes[r.gen_range(0..3usize)],
        },
        _ => Pattern::Checker {
            cell: sizes[r.gen_range(0..3usize)],
        },
    };
    Texture {
        base,
        accent,
        pattern,
    }
}

fn draw_warp(r: &mut ChaCha8Rng, category: Category, h: usize, w: usize) -> WarpParams {
    let anchor_y = match category {
        Category::Upper => 0.40,
        Category::Lower => 0.74,
        Category::Dress => 0.55,
    };
    let sx = r.gen_range(0.85..1.0) as f32;
    let sy = r.gen_range(0.85..1.0) as f32;
    let shear = r.gen_range(-0.12..0.12) as f32;
    let jx = r.gen_range(-0.02..0.02) as f32;
    let jy = r.gen_range(-0.02..0.02) as f32;
    WarpParams {
        sx,
        sy,
        shear,
        src_cx: 0.5 * w as f32,
        src_cy: 0.5 * h as f32,
        dst_cx: (0.5 + jx) * w as f32,
        dst_cy: (anchor_y + jy) * h as f32,
    }
}

fn validate_dims(h: usize, w: usize) -> Result<()> {
    if h < 32 || w < 32 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Config(format!(
            "sample dims must be at least 32 and divisible by 16, got {h}x{w}"
        )));
    }
    Ok(())
}

pub fn generate_sample(
    seed: u64,
    category: Category,
    h: usize,
    w: usize,
    device: &Device,
) -> Result<SampleTriple> {
    validate_dims(h, w)?;
    let mut r = rng::rng_for(seed, &[category.index() as u64, h as u64, w as u64]);
    let shape = draw_geometry(&mut r, category, h, w);
    let tex = draw_texture(&mut r);
    let warp = draw_warp(&mut r, category, h, w);

    let mut garment: Vec<f32> = Vec::with_capacity(3 * h * w);
    for ch in 0..3 {
        garment.extend(std::iter::repeat(FLAT_BG[ch]).take(h * w));
    }
    let mut flat_mask = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            if shape.contains(x as f32, y as f32) {
                flat_mask[y * w + x] = 1.0;
                let c = tex.color_at(x, y);
                for ch in 0..3 {
                    garment[ch * h * w + y * w + x] = c[ch];
                }
            }
        }
    }

    let mut person: Vec<f32> = Vec::with_capacity(3 * h * w);
    for ch in 0..3 {
        person.extend(std::iter::repeat(PERSON_BG[ch]).take(h * w));
    }
    draw_body(&mut person, h, w);
    let mut person_mask = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = warp.source_of(x as f32, y as f32);
            let ui = u.round() as i64;
            let vi = v.round() as i64;
            if ui >= 0 && (ui as usize) < w && vi >= 0 && (vi as usize) < h {
                let src = vi as usize * w + ui as usize;
                if flat_mask[src] == 1.0 {
                    person_mask[y * w + x] = 1.0;
                    for ch in 0..3 {
                        person[ch * h * w + y * w + x] = garment[ch * h * w + src];
                    }
                }
            }
        }
    }

    for (name, mask) in [("flat", &flat_mask), ("worn", &person_mask)] {
        let area = mask.iter().map(|v| *v as f64).sum::<f64>() / (h * w) as f64;
        if !(MIN_MASK_AREA..=MAX_MASK_AREA).contains(&area) {
            return Err(Error::Invalid(format!(
                "seed {seed} {category} produced {name} mask area {area:.3} outside [{MIN_MASK_AREA}, {MAX_MASK_AREA}]"
            )));
        }
    }

    Ok(SampleTriple {
        person: Tensor::from_vec(person, (3, h, w), device)?,
        garment: Tensor::from_vec(garment, (3, h, w), device)?,
        person_mask: Tensor::from_vec(person_mask, (1, h, w), device)?,
        flat_mask: Tensor::from_vec(flat_mask, (1, h, w), device)?,
        category,
        seed,
        warp,
    })
}

/// Warps a `{0, 1}` mask from the flat canvas onto the person canvas with
/// the recorded warp, using the exact arithmetic of the generator. Applied
/// to a sample's flat mask this reproduces its person mask bit-for-bit.
pub fn apply_warp_mask(mask: &Tensor, warp: &WarpParams) -> Result<Tensor> {
    let (c, h, w) = mask.dims3()?;
    if c != 1 {
        return Err(Error::shape("apply_warp_mask", "1 channel", format!("{c}")));
    }
    let src = mask.flatten_all()?.to_vec1::<f32>()?;
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = warp.source_of(x as f32, y as f32);
            let ui = u.round() as i64;
            let vi = v.round() as i64;
            if ui >= 0 && (ui as usize) < w && vi >= 0 && (vi as usize) < h {
                if src[vi as usize * w + ui as usize] == 1.0 {
                    out[y * w + x] = 1.0;
                }
            }
        }
    }
    Ok(Tensor::from_vec(out, (1, h, w), mask.device())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub split: Split,
    pub category: Category,
    pub seed: u64,
    pub person: String,
    pub garment: String,
    pub person_mask: String,
    pub flat_mask: String,
    pub warp: WarpParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    pub base_seed: u64,
    pub count: usize,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

fn split_of(index: usize, n: usize) -> Split {
    if index % 5 == 4 || (n < 5 && index == n - 1) {
        Split::Test
    } else {
        Split::Train
    }
}

/// Generates `n` samples under `root` using the directory layout
/// `<split>/<plane>/<index>.png`, with an accompanying manifest. Roughly a
/// fifth of the samples land in the test split (always at least one).
pub fn generate_dataset(n: usize, seed: u64, h: usize, w: usize, root: &Path) -> Result<Manifest> {
    if n < 2 {
        return Err(Error::Config(format!(
            "dataset needs at least 2 samples, got {n}"
        )));
    }
    validate_dims(h, w)?;
    let device = Device::Cpu;
    for split in ["train", "test"] {
        for plane in ["person", "garment", "person_mask", "flat_mask"] {
            std::fs::create_dir_all(root.join(split).join(plane))
                .map_err(|e| Error::io(root.join(split).join(plane), e))?;
        }
    }
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let split = split_of(i, n);
        let category = Category::ALL[i % 3];
        let sample_seed = rng::mix(seed, &[i as u64]);
        let sample = generate_sample(sample_seed, category, h, w, &device)?;
        let name = format!("{i:05}.png");
        let rel = |plane: &str| format!("{}/{plane}/{name}", split.as_str());
        imageio::save_rgb(&sample.person, &root.join(rel("person")))?;
        imageio::save_rgb(&sample.garment, &root.join(rel("garment")))?;
        imageio::save_mask(&sample.person_mask, &root.join(rel("person_mask")))?;
        imageio::save_mask(&sample.flat_mask, &root.join(rel("flat_mask")))?;
        entries.push(ManifestEntry {
            index: i,
            split,
            category,
            seed: sample_seed,
            person: rel("person"),
            garment: rel("garment"),
            person_mask: rel("person_mask"),
            flat_mask: rel("flat_mask"),
            warp: sample.warp,
        });
    }
    let manifest = Manifest {
        format_version: 1,
        height: h,
        width: w,
        base_seed: seed,
        count: n,
        entries,
    };
    let path = root.join(MANIFEST_NAME);
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, json).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub struct LoadedSample {
    pub person: Tensor,
    pub garment: Tensor,
    pub person_mask: Tensor,
    pub flat_mask: Tensor,
    pub category: Category,
    pub warp: WarpParams,
    pub index: usize,
}

pub fn load_split(root: &Path, split: Split, device: &Device) -> Result<Vec<LoadedSample>> {
    let manifest = load_manifest(root)?;
    let mut out = Vec::new();
    for e in manifest.entries.iter().filter(|e| e.split == split) {
        out.push(LoadedSample {
            person: imageio::load_rgb(&root.join(&e.person), device)?,
            garment: imageio::load_rgb(&root.join(&e.garment), device)?,
            person_mask: imageio::load_mask(&root.join(&e.person_mask), device)?,
            flat_mask: imageio::load_mask(&root.join(&e.flat_mask), device)?,
            category: e.category,
            warp: e.warp,
            index: e.index,
        });
    }
    if out.is_empty() {
        return Err(Error::Invalid(format!(
            "dataset at {} has no {} samples",
            root.display(),
            split.as_str()
        )));
    }
    Ok(out)
}
