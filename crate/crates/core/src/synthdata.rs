//! Procedural multi-domain pseudo-face images.
//!
//! A real image is an identity-specific composition (background gradient,
//! shaded face oval, two eyes, a mouth bar) rendered and then styled by its
//! domain in the order color shift, contrast, blur, noise. A fake pastes the
//! central face region of another identity from the same domain into a real
//! image with a feathered boundary.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CdnError, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;
pub const CHANNELS: usize = 3;

/// Style of one data domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: u32,
    /// Additive RGB offset, each in `[-0.3, 0.3]`.
    pub color_shift: [f64; 3],
    /// Contrast around mid-gray, in `[0.5, 1.5]`.
    pub contrast: f64,
    pub blur_sigma: f64,
    pub noise_std: f64,
}

impl DomainSpec {
    pub fn neutral(domain_id: u32) -> Self {
        DomainSpec { domain_id, color_shift: [0.0; 3], contrast: 1.0, blur_sigma: 0.0, noise_std: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.color_shift.iter().any(|c| !(-0.3..=0.3).contains(c)) {
            return Err(CdnError::InvalidConfig(format!("color shift {:?} outside [-0.3, 0.3]", self.color_shift)));
        }
        if !(0.5..=1.5).contains(&self.contrast) {
            return Err(CdnError::InvalidConfig(format!("contrast {} outside [0.5, 1.5]", self.contrast)));
        }
        if !(self.blur_sigma >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(CdnError::InvalidConfig("blur and noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// The three reference domains: a warm low-contrast one, a cool
/// high-contrast one, and a green-tinted noisy one.
pub fn standard_domains() -> Vec<DomainSpec> {
    vec![
        DomainSpec { domain_id: 0, color_shift: [0.12, 0.02, -0.10], contrast: 0.8, blur_sigma: 0.0, noise_std: 0.01 },
        DomainSpec { domain_id: 1, color_shift: [-0.10, 0.0, 0.12], contrast: 1.2, blur_sigma: 0.5, noise_std: 0.02 },
        DomainSpec { domain_id: 2, color_shift: [-0.05, 0.15, -0.15], contrast: 1.4, blur_sigma: 0.8, noise_std: 0.04 },
    ]
}

/// `n` domains: the standard three followed by seeded random styles.
pub fn domains(n: usize, seed: u64) -> Vec<DomainSpec> {
    let mut out: Vec<DomainSpec> = standard_domains().into_iter().take(n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd0_4a1e);
    while out.len() < n {
        out.push(DomainSpec {
            domain_id: out.len() as u32,
            color_shift: [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)],
            contrast: rng.random_range(0.6..1.4),
            blur_sigma: rng.random_range(0.0..1.0),
            noise_std: rng.random_range(0.0..0.04),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `(3, H, W)` in `[0, 1]`.
    pub pixels: Tensor,
    /// 0 real, 1 fake.
    pub label: u8,
    pub domain_id: u32,
    pub identity_id: u32,
}

/// Identity-specific face layout, independent of the domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceGeometry {
    pub cx: f64,
    pub cy: f64,
    pub ax: f64,
    pub ay: f64,
    pub eye_dx: f64,
    pub eye_y: f64,
    pub eye_r: f64,
    pub mouth_y: f64,
    pub mouth_hw: f64,
    pub mouth_hh: f64,
    skin: [f64; 3],
    shade: (f64, f64),
    bg_top: [f64; 3],
    bg_bottom: [f64; 3],
    eye_color: [f64; 3],
    mouth_color: [f64; 3],
}

fn identity_rng(identity_id: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5eed_f00d ^ (identity_id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

impl FaceGeometry {
    pub fn of(identity_id: u32) -> Self {
        let mut r = identity_rng(identity_id);
        let cx = 32.0 + r.random_range(-3.0..3.0);
        let cy = 33.0 + r.random_range(-3.0..3.0);
        let ax = r.random_range(16.0..21.0);
        let ay = r.random_range(20.0..25.0);
        let skin_base = r.random_range(0.45..0.75);
        let skin = [skin_base + 0.08, skin_base - 0.05 + r.random_range(-0.05..0.05), skin_base - 0.15 + r.random_range(-0.05..0.05)];
        let angle = r.random_range(0.0..std::f64::consts::TAU);
        let strength = r.random_range(0.05..0.15);
        let bg = r.random_range(0.78..0.9);
        FaceGeometry {
            cx,
            cy,
            ax,
            ay,
            eye_dx: r.random_range(6.0..9.0),
            eye_y: cy - ay * r.random_range(0.25..0.35),
            eye_r: r.random_range(2.5..4.0),
            mouth_y: cy + ay * r.random_range(0.4..0.5),
            mouth_hw: r.random_range(5.0..9.0),
            mouth_hh: r.random_range(1.0..2.0),
            skin,
            shade: (strength * angle.cos(), strength * angle.sin()),
            bg_top: [bg, bg + 0.02, bg + 0.05],
            bg_bottom: [bg - 0.06, bg - 0.04, bg],
            eye_color: [0.08, 0.07, r.random_range(0.05..0.2)],
            mouth_color: [r.random_range(0.55..0.7), 0.15, 0.18],
        }
    }

    /// Signed ellipse distance in pixels (negative inside).
    fn oval_distance(&self, x: f64, y: f64) -> f64 {
        let rho = (((x - self.cx) / self.ax).powi(2) + ((y - self.cy) / self.ay).powi(2)).sqrt();
        (rho - 1.0) * self.ax.min(self.ay)
    }

    /// Pixels covered by the face oval.
    pub fn face_mask(&self, size: usize) -> Vec<bool> {
        let mut m = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                m.push(self.oval_distance(x as f64 + 0.5, y as f64 + 0.5) < 0.0);
            }
        }
        m
    }
}

/// Coverage of a shape edge at signed distance `d`, antialiased over one pixel.
fn coverage(d: f64) -> f64 {
    (0.5 - d).clamp(0.0, 1.0)
}

/// Unstyled rendering of an identity.
pub fn base_image(identity_id: u32) -> Tensor {
    let g = FaceGeometry::of(identity_id);
    let s = IMAGE_SIZE;
    let mut t = Tensor::zeros(&[CHANNELS, s, s]);
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let fy = py / s as f64;
            let mut col = [0.0; 3];
            for c in 0..3 {
                col[c] = g.bg_top[c] * (1.0 - fy) + g.bg_bottom[c] * fy;
            }
            let face = coverage(g.oval_distance(px, py));
            let shade = 1.0 + g.shade.0 * (px - g.cx) / g.ax + g.shade.1 * (py - g.cy) / g.ay;
            for c in 0..3 {
                col[c] = col[c] * (1.0 - face) + (g.skin[c] * shade) * face;
            }
            for side in [-1.0, 1.0] {
                let ex = g.cx + side * g.eye_dx;
                let d = ((px - ex).powi(2) + (py - g.eye_y).powi(2)).sqrt() - g.eye_r;
                let e = coverage(d);
                for c in 0..3 {
                    col[c] = col[c] * (1.0 - e) + g.eye_color[c] * e;
                }
            }
            let mdx = (px - g.cx).abs() - g.mouth_hw;
            let mdy = (py - g.mouth_y).abs() - g.mouth_hh;
            let m = coverage(mdx.max(mdy));
            for c in 0..3 {
                col[c] = col[c] * (1.0 - m) + g.mouth_color[c] * m;
                t.data_mut()[(c * s + y) * s + x] = col[c].clamp(0.0, 1.0);
            }
        }
    }
    t
}

fn gaussian_blur(t: &mut Tensor, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let shape = t.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for ch in 0..c {
        let plane = &mut t.data_mut()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * plane[y * w + clamp(x as isize + k as isize - radius, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[clamp(y as isize + k as isize - radius, h) * w + x])
                    .sum();
            }
        }
    }
}

/// Applies a domain style to a `(3, H, W)` image in place.
pub fn apply_style(t: &mut Tensor, spec: &DomainSpec, rng: &mut ChaCha8Rng) {
    let plane = t.len() / CHANNELS;
    for (c, chunk) in t.data_mut().chunks_exact_mut(plane).enumerate() {
        for v in chunk.iter_mut() {
            *v += spec.color_shift[c];
            if spec.contrast != 1.0 {
                *v = (*v - 0.5) * spec.contrast + 0.5;
            }
        }
    }
    gaussian_blur(t, spec.blur_sigma);
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).expect("non-negative std");
        t.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

fn image_rng(seed: u64, identity_id: u32, domain_id: u32, salt: u64) -> ChaCha8Rng {
    let mut h = seed ^ 0x243f_6a88_85a3_08d3;
    for v in [identity_id as u64, domain_id as u64, salt] {
        h = (h ^ v).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(29);
    }
    ChaCha8Rng::seed_from_u64(h)
}

pub fn make_real(identity_id: u32, spec: &DomainSpec, seed: u64) -> Result<LabeledImage> {
    spec.validate()?;
    let mut pixels = base_image(identity_id);
    let mut rng = image_rng(seed, identity_id, spec.domain_id, 0);
    apply_style(&mut pixels, spec, &mut rng);
    Ok(LabeledImage { pixels, label: 0, domain_id: spec.domain_id, identity_id })
}

/// Blend weight of the donor at a pixel: 1 inside the inner region, falling
/// linearly to 0 across `blend_width` pixels.
fn blend_alpha(d: f64, blend_width: f64) -> f64 {
    if blend_width <= 0.0 {
        if d < 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (0.5 - d / blend_width).clamp(0.0, 1.0)
    }
}

/// Box-downsamples each plane by 2 and upsamples it back bilinearly, the
/// resampling a warped donor face goes through before it is pasted.
pub fn resample_half(t: &Tensor) -> Tensor {
    let (c, s) = (t.shape()[0], t.shape()[1]);
    let h = s / 2;
    let mut out = t.clone();
    for ch in 0..c {
        let plane = &t.data()[ch * s * s..(ch + 1) * s * s];
        let small: Vec<f64> = (0..h * h)
            .map(|k| {
                let (y, x) = (2 * (k / h), 2 * (k % h));
                (plane[y * s + x] + plane[y * s + x + 1] + plane[(y + 1) * s + x] + plane[(y + 1) * s + x + 1]) / 4.0
            })
            .collect();
        let coord = |p: usize| ((p as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (h - 1) as f64);
        for y in 0..s {
            let fy = coord(y);
            let (y0, wy) = (fy.floor() as usize, fy - fy.floor());
            let y1 = (y0 + 1).min(h - 1);
            for x in 0..s {
                let fx = coord(x);
                let (x0, wx) = (fx.floor() as usize, fx - fx.floor());
                let x1 = (x0 + 1).min(h - 1);
                let top = small[y0 * h + x0] * (1.0 - wx) + small[y0 * h + x1] * wx;
                let bot = small[y1 * h + x0] * (1.0 - wx) + small[y1 * h + x1] * wx;
                out.data_mut()[(ch * s + y) * s + x] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Elliptic region swapped in a fake, centred on the target's face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendRegion {
    pub cx: f64,
    pub cy: f64,
    pub ax: f64,
    pub ay: f64,
}

impl BlendRegion {
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        let rho = (((x - self.cx) / self.ax).powi(2) + ((y - self.cy) / self.ay).powi(2)).sqrt();
        (rho - 1.0) * self.ax.min(self.ay)
    }

    fn sample(target: &FaceGeometry, rng: &mut ChaCha8Rng) -> Self {
        BlendRegion {
            cx: target.cx + rng.random_range(-1.0..1.0),
            cy: target.cy + rng.random_range(-1.0..1.0),
            ax: target.ax * rng.random_range(0.6..0.75),
            ay: target.ay * rng.random_range(0.6..0.75),
        }
    }
}

/// Region a fake of `target` uses for a given seed.
pub fn blend_region(target_identity: u32, donor_identity: u32, seed: u64) -> BlendRegion {
    let mut rng = image_rng(seed, target_identity, donor_identity, 1);
    BlendRegion::sample(&FaceGeometry::of(target_identity), &mut rng)
}

/// Pastes the resampled central face of `donor` into `target` with a
/// feathered seam `blend_width` pixels wide.
pub fn make_fake(target: &LabeledImage, donor: &LabeledImage, blend_width: f64, seed: u64) -> Result<LabeledImage> {
    if target.identity_id == donor.identity_id {
        return Err(CdnError::invalid("fake needs a donor with a different identity"));
    }
    if !(blend_width >= 0.0) {
        return Err(CdnError::invalid("blend width must be non-negative"));
    }
    target.pixels.expect_shape(donor.pixels.shape())?;
    let region = blend_region(target.identity_id, donor.identity_id, seed);
    let source = resample_half(&donor.pixels);
    let s = target.pixels.shape()[1];
    let mut out = target.pixels.clone();
    for y in 0..s {
        for x in 0..s {
            let a = blend_alpha(region.distance(x as f64 + 0.5, y as f64 + 0.5), blend_width);
            if a == 0.0 {
                continue;
            }
            for c in 0..CHANNELS {
                let k = (c * s + y) * s + x;
                out.data_mut()[k] = a * source.data()[k] + (1.0 - a) * target.pixels.data()[k];
            }
        }
    }
    Ok(LabeledImage { pixels: out, label: 1, domain_id: target.domain_id, identity_id: target.identity_id })
}

pub const SPLIT_TRAIN: &str = "train";
pub const SPLIT_TEST_INTRA: &str = "test_intra";
pub const SPLIT_TEST_CROSS: &str = "test_cross";

/// Which domains train, which are held out, and how many identities of the
/// training domains are held out for within-domain testing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_domains: Vec<u32>,
    pub test_domains: Vec<u32>,
    pub intra_test_fraction: f64,
}

impl SplitPlan {
    pub fn cross_domain(n_domains: u32) -> Self {
        SplitPlan {
            train_domains: (0..n_domains - 1).collect(),
            test_domains: vec![n_domains - 1],
            intra_test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: u8,
    pub domain_id: u32,
    pub identity_id: u32,
    pub split: String,
}

/// Image list with paths relative to `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == name).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.path) {
                return Err(CdnError::invalid(format!("duplicate manifest path {}", e.path)));
            }
            if e.label > 1 {
                return Err(CdnError::invalid(format!("label {} of {} is not binary", e.label, e.path)));
            }
        }
        Ok(())
    }

    pub fn write(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        let mut w = csv::Writer::from_path(&path)?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| CdnError::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let entries = r.deserialize().collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = DatasetManifest { root, entries };
        m.validate()?;
        Ok(m)
    }

    pub fn image_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.path)
    }
}

pub fn save_png(pixels: &Tensor, path: &Path) -> Result<()> {
    let shape = pixels.shape();
    let (h, w) = (shape[1], shape[2]);
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push((pixels.data()[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let file = File::create(path).map_err(|e| CdnError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let img_err = |e: png::EncodingError| CdnError::Image { path: path.to_path_buf(), detail: e.to_string() };
    let mut writer = enc.write_header().map_err(img_err)?;
    writer.write_image_data(&buf).map_err(img_err)?;
    writer.finish().map_err(img_err)
}

/// Reads an 8-bit RGB PNG into a `(3, H, W)` tensor in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img_err = |detail: String| CdnError::Image { path: path.to_path_buf(), detail };
    let file = File::open(path).map_err(|e| CdnError::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| img_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| img_err("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(img_err(format!("expected 8-bit RGB, got {:?} {:?}", info.color_type, info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                t.data_mut()[(c * h + y) * w + x] = buf[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Ok(t)
}

/// Parameters of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_identities: u32,
    pub domains: Vec<DomainSpec>,
    pub fakes_per_real: u32,
    pub blend_width: f64,
    pub split: SplitPlan,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn standard(n_identities: u32, n_domains: usize, seed: u64) -> Self {
        DatasetConfig {
            n_identities,
            domains: domains(n_domains, seed),
            fakes_per_real: 1,
            blend_width: 2.0,
            split: SplitPlan::cross_domain(n_domains as u32),
            seed,
        }
    }
}

/// Renders every image, writes PNGs under `out_dir/d<domain>/`, and writes
/// `out_dir/manifest.csv`.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if cfg.n_identities < 2 {
        return Err(CdnError::InvalidConfig("need at least two identities to make fakes".into()));
    }
    let mut ids = HashSet::new();
    for d in &cfg.domains {
        d.validate()?;
        if !ids.insert(d.domain_id) {
            return Err(CdnError::InvalidConfig(format!("duplicate domain id {}", d.domain_id)));
        }
    }
    let plan = &cfg.split;
    for d in plan.train_domains.iter().chain(&plan.test_domains) {
        if !ids.contains(d) {
            return Err(CdnError::InvalidConfig(format!("split plan names unknown domain {d}")));
        }
    }
    if plan.train_domains.iter().any(|d| plan.test_domains.contains(d)) {
        return Err(CdnError::InvalidConfig("a domain cannot be both train and test".into()));
    }
    if plan.train_domains.is_empty() || !(0.0..1.0).contains(&plan.intra_test_fraction) {
        return Err(CdnError::InvalidConfig("split plan needs train domains and a fraction in [0, 1)".into()));
    }

    let mut order: Vec<u32> = (0..cfg.n_identities).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1d5));
    let n_held = ((plan.intra_test_fraction * cfg.n_identities as f64).ceil() as usize).max(if plan.intra_test_fraction > 0.0 { 2 } else { 0 });
    let held: HashSet<u32> = order[..n_held.min(order.len())].iter().copied().collect();
    if n_held > 0 && held.len() + 2 > cfg.n_identities as usize {
        return Err(CdnError::InvalidConfig("too few identities for the intra-domain hold-out".into()));
    }

    fs::create_dir_all(out_dir).map_err(|e| CdnError::io(out_dir, e))?;
    let mut entries = Vec::new();
    for spec in &cfg.domains {
        let train_domain = plan.train_domains.contains(&spec.domain_id);
        if !train_domain && !plan.test_domains.contains(&spec.domain_id) {
            continue;
        }
        let dir = format!("d{}", spec.domain_id);
        fs::create_dir_all(out_dir.join(&dir)).map_err(|e| CdnError::io(out_dir.join(&dir), e))?;
        let split_of = |id: u32| -> &'static str {
            if !train_domain {
                SPLIT_TEST_CROSS
            } else if held.contains(&id) {
                SPLIT_TEST_INTRA
            } else {
                SPLIT_TRAIN
            }
        };
        let reals: Vec<LabeledImage> =
            (0..cfg.n_identities).map(|id| make_real(id, spec, cfg.seed)).collect::<Result<_>>()?;
        for real in &reals {
            let id = real.identity_id;
            let split = split_of(id);
            let rel = format!("{dir}/real_{id:05}.png");
            save_png(&real.pixels, &out_dir.join(&rel))?;
            entries.push(ManifestEntry { path: rel, label: 0, domain_id: spec.domain_id, identity_id: id, split: split.into() });

            // Donors come from the same split group so held-out identities stay held out.
            let pool: Vec<u32> = (0..cfg.n_identities).filter(|&o| o != id && split_of(o) == split).collect();
            let mut rng = image_rng(cfg.seed, id, spec.domain_id, 2);
            for k in 0..cfg.fakes_per_real {
                let donor = pool[rng.random_range(0..pool.len())];
                let fake_seed = cfg.seed.wrapping_add(((id as u64) << 20) ^ ((k as u64) << 8) ^ spec.domain_id as u64);
                let fake = make_fake(real, &reals[donor as usize], cfg.blend_width, fake_seed)?;
                let rel = format!("{dir}/fake_{id:05}_{k}.png");
                save_png(&fake.pixels, &out_dir.join(&rel))?;
                entries.push(ManifestEntry { path: rel, label: 1, domain_id: spec.domain_id, identity_id: id, split: split.into() });
            }
        }
    }
    let manifest = DatasetManifest { root: out_dir.to_path_buf(), entries };
    manifest.validate()?;
    for name in [SPLIT_TRAIN, SPLIT_TEST_INTRA, SPLIT_TEST_CROSS] {
        let expected = match name {
            SPLIT_TEST_CROSS => !plan.test_domains.is_empty(),
            SPLIT_TEST_INTRA => n_held > 0,
            _ => true,
        };
        if expected && manifest.split(name).is_empty() {
            return Err(CdnError::MissingSplit(name.into()));
        }
    }
    manifest.write()?;
    Ok(manifest)
}

/// Images of one split stacked into `(N, 3, H, W)` with labels and domains.
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub domains: Vec<u32>,
    pub paths: Vec<String>,
}

pub fn load_split(manifest: &DatasetManifest, split: &str) -> Result<LoadedSplit> {
    let entries = manifest.split(split);
    if entries.is_empty() {
        return Err(CdnError::MissingSplit(split.into()));
    }
    let imgs = entries.iter().map(|e| load_png(&manifest.image_path(e))).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = imgs.iter().collect();
    Ok(LoadedSplit {
        images: Tensor::stack(&refs)?,
        labels: entries.iter().map(|e| e.label).collect(),
        domains: entries.iter().map(|e| e.domain_id).collect(),
        paths: entries.iter().map(|e| e.path.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neutral_style_is_the_base_image() {
        let img = make_real(7, &DomainSpec::neutral(0), 3).unwrap();
        assert_eq!(img.pixels, base_image(7));
        assert_eq!(img.label, 0);
    }

    #[test]
    fn real_images_are_deterministic_and_bounded() {
        let spec = &standard_domains()[2];
        let a = make_real(4, spec, 11).unwrap();
        let b = make_real(4, spec, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(make_real(4, spec, 12).unwrap(), a);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = DomainSpec::neutral(0);
        s.contrast = 2.0;
        assert!(make_real(0, &s, 0).is_err());
        let mut s = DomainSpec::neutral(0);
        s.color_shift[1] = -0.5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn fake_requires_distinct_identities_and_stays_bounded() {
        let spec = &standard_domains()[0];
        let t = make_real(1, spec, 0).unwrap();
        let d = make_real(2, spec, 0).unwrap();
        assert!(make_fake(&t, &t, 2.0, 0).is_err());
        let f = make_fake(&t, &d, 2.0, 5).unwrap();
        assert_eq!(f.label, 1);
        assert_eq!(f.domain_id, t.domain_id);
        assert!(f.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn png_round_trip_quantizes_to_eight_bits() {
        let dir = tempfile::tempdir().unwrap();
        let img = make_real(3, &standard_domains()[1], 0).unwrap();
        let p = dir.path().join("x.png");
        save_png(&img.pixels, &p).unwrap();
        let back = load_png(&p).unwrap();
        assert!(back.max_abs_diff(&img.pixels) <= 0.5 / 255.0 + 1e-12);
    }

    /// Foreground by Otsu's threshold on the distance from the mean border
    /// colour.
    fn otsu_mask(t: &Tensor) -> Vec<bool> {
        let s = IMAGE_SIZE;
        let px = |c: usize, y: usize, x: usize| t.data()[(c * s + y) * s + x];
        let border: Vec<(usize, usize)> = (0..s).flat_map(|k| [(0, k), (s - 1, k), (k, 0), (k, s - 1)]).collect();
        let bg: Vec<f64> = (0..3).map(|c| border.iter().map(|&(y, x)| px(c, y, x)).sum::<f64>() / border.len() as f64).collect();
        let dist: Vec<f64> = (0..s * s).map(|k| (0..3).map(|c| (px(c, k / s, k % s) - bg[c]).powi(2)).sum::<f64>().sqrt()).collect();
        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut sorted = dist.clone();
        sorted.sort_by(f64::total_cmp);
        for q in 1..100 {
            let th = sorted[q * sorted.len() / 100];
            let (lo, hi): (Vec<f64>, Vec<f64>) = dist.iter().partition(|&&d| d < th);
            if lo.is_empty() || hi.is_empty() {
                continue;
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let between = lo.len() as f64 * hi.len() as f64 * (mean(&lo) - mean(&hi)).powi(2);
            if between > best.0 {
                best = (between, th);
            }
        }
        dist.iter().map(|&d| d >= best.1).collect()
    }

    fn channel_means(t: &Tensor) -> [f64; 3] {
        let plane = t.len() / 3;
        let mut m = [0.0; 3];
        for (c, chunk) in t.data().chunks_exact(plane).enumerate() {
            m[c] = chunk.iter().sum::<f64>() / plane as f64;
        }
        m
    }

    #[test]
    fn domains_share_geometry_but_not_colour() {
        let d = standard_domains();
        for id in [0, 5, 17] {
            let a = make_real(id, &d[0], 1).unwrap();
            let b = make_real(id, &d[2], 1).unwrap();
            let (ma, mb) = (otsu_mask(&a.pixels), otsu_mask(&b.pixels));
            let inter = ma.iter().zip(&mb).filter(|(x, y)| **x && **y).count() as f64;
            let union = ma.iter().zip(&mb).filter(|(x, y)| **x || **y).count() as f64;
            assert!(inter / union > 0.95, "identity {id}: IoU {}", inter / union);
            let (ca, cb) = (channel_means(&a.pixels), channel_means(&b.pixels));
            assert!(ca.iter().zip(&cb).any(|(x, y)| (x - y).abs() > 0.05), "{ca:?} vs {cb:?}");
        }
    }

    fn grad_mag(t: &Tensor, y: usize, x: usize) -> f64 {
        let s = IMAGE_SIZE;
        (0..3)
            .map(|c| {
                let v = |yy: usize, xx: usize| t.data()[(c * s + yy) * s + xx];
                (v(y, x + 1) - v(y, x)).powi(2) + (v(y + 1, x) - v(y, x)).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn hard_seams_have_strong_gradients() {
        let spec = DomainSpec::neutral(0);
        let (mut seam_fake, mut seam_real) = (Vec::new(), Vec::new());
        for (t, d) in [(1, 2), (3, 9), (10, 4), (6, 7)] {
            let target = make_real(t, &spec, 0).unwrap();
            let donor = make_real(d, &spec, 0).unwrap();
            let fake = make_fake(&target, &donor, 0.0, 5).unwrap();
            let region = blend_region(t, d, 5);
            for y in 1..IMAGE_SIZE - 1 {
                for x in 1..IMAGE_SIZE - 1 {
                    let inside = |yy: usize, xx: usize| region.distance(xx as f64 + 0.5, yy as f64 + 0.5) < 0.0;
                    if inside(y, x) != inside(y, x + 1) || inside(y, x) != inside(y + 1, x) {
                        seam_fake.push(grad_mag(&fake.pixels, y, x));
                        seam_real.push(grad_mag(&target.pixels, y, x));
                    }
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let sd = |v: &[f64]| (v.iter().map(|x| (x - mean(v)).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        assert!(!seam_fake.is_empty());
        assert!(mean(&seam_fake) > mean(&seam_real) + sd(&seam_real), "fake {} real {} sd {}", mean(&seam_fake), mean(&seam_real), sd(&seam_real));
    }

    #[test]
    fn fakes_differ_inside_the_blended_region() {
        let spec = &standard_domains()[1];
        for (t, d) in [(0, 1), (2, 8), (13, 5)] {
            let target = make_real(t, spec, 3).unwrap();
            let fake = make_fake(&target, &make_real(d, spec, 3).unwrap(), 2.0, 8).unwrap();
            let region = blend_region(t, d, 8);
            let (mut sum, mut n) = (0.0, 0);
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    if region.distance(x as f64 + 0.5, y as f64 + 0.5) < 0.0 {
                        for c in 0..3 {
                            let k = (c * IMAGE_SIZE + y) * IMAGE_SIZE + x;
                            sum += (fake.pixels.data()[k] - target.pixels.data()[k]).abs();
                            n += 1;
                        }
                    }
                }
            }
            assert!(sum / n as f64 > 0.02, "pair ({t}, {d}): {}", sum / n as f64);
        }
    }

    #[test]
    fn domains_are_separable_by_channel_means() {
        let d = standard_domains();
        let feats = |spec: &DomainSpec, ids: std::ops::Range<u32>| ids.map(|id| channel_means(&make_real(id, spec, 2).unwrap().pixels)).collect::<Vec<_>>();
        let centroid = |v: &[[f64; 3]]| -> [f64; 3] { std::array::from_fn(|c| v.iter().map(|f| f[c]).sum::<f64>() / v.len() as f64) };
        let (c0, c2) = (centroid(&feats(&d[0], 0..20)), centroid(&feats(&d[2], 0..20)));
        let dist = |a: &[f64; 3], b: &[f64; 3]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let (t0, t2) = (feats(&d[0], 20..60), feats(&d[2], 20..60));
        let correct = t0.iter().filter(|f| dist(f, &c0) < dist(f, &c2)).count() + t2.iter().filter(|f| dist(f, &c2) < dist(f, &c0)).count();
        assert!(correct as f64 / 80.0 > 0.9, "accuracy {}", correct as f64 / 80.0);
    }

    #[test]
    fn dataset_counts_splits_and_determinism() {
        let cfg = DatasetConfig { fakes_per_real: 2, ..DatasetConfig::standard(10, 3, 4) };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m = build_dataset(&cfg, a.path()).unwrap();
        assert_eq!(m.entries.len(), 10 * 3 * 3);
        for split in [SPLIT_TRAIN, SPLIT_TEST_INTRA, SPLIT_TEST_CROSS] {
            let e = m.split(split);
            let reals = e.iter().filter(|e| e.label == 0).count();
            assert!(reals > 0, "{split}");
            assert_eq!(e.len() - reals, 2 * reals, "{split}");
        }
        assert!(m.split(SPLIT_TRAIN).iter().all(|e| cfg.split.train_domains.contains(&e.domain_id)));
        assert!(m.split(SPLIT_TEST_CROSS).iter().all(|e| e.domain_id == 2));
        let train_ids: HashSet<u32> = m.split(SPLIT_TRAIN).iter().map(|e| e.identity_id).collect();
        assert!(m.split(SPLIT_TEST_INTRA).iter().all(|e| !train_ids.contains(&e.identity_id)));

        build_dataset(&cfg, b.path()).unwrap();
        let read = |d: &Path| fs::read(d.join(MANIFEST_FILE)).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
        let e = &m.entries[7];
        assert_eq!(fs::read(a.path().join(&e.path)).unwrap(), fs::read(b.path().join(&e.path)).unwrap());
        assert_eq!(DatasetManifest::load(&a.path().join(MANIFEST_FILE)).unwrap().entries, m.entries);
    }
}
