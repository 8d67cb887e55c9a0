//! Image pipeline: aspect-ratio-preserving resize, training augmentations,
//! square-crop baselines, and patch extraction.
//!
//! Images are height x width x 3 interleaved f64 subpixels in [0, 1].
//! Every augmentation is a pure function of (input, rng state), so a given
//! seed reproduces the exact pixel stream.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::input(format!("image dims {height}x{width} must be at least 1x1")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::input(format!(
                "image {height}x{width} needs {} subpixels, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if !data.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::input("image subpixels must lie in [0, 1]"));
        }
        Ok(Image { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub(crate) fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PipelineConfig {
    pub pixel_budget: usize,
    pub patch_size: usize,
}

impl PipelineConfig {
    pub fn new(pixel_budget: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || pixel_budget < patch_size * patch_size {
            return Err(Error::contract(format!(
                "pixel budget {pixel_budget} must cover at least one {patch_size}x{patch_size} patch"
            )));
        }
        Ok(PipelineConfig { pixel_budget, patch_size })
    }

    pub fn max_tokens(&self) -> usize {
        self.pixel_budget / (self.patch_size * self.patch_size)
    }

    /// Side of the square the fixed-resolution baseline resizes to.
    pub fn square_side(&self) -> usize {
        (self.pixel_budget as f64).sqrt().floor() as usize
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            pixel_budget: 224 * 224,
            patch_size: 14,
        }
    }
}

/// Pure arithmetic of the aspect-preserving resize, separated from pixel
/// work so the geometry can be checked in bulk.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResizePlan {
    pub scale: f64,
    /// Dims after bilinear resampling, before any cropping.
    pub resample_h: usize,
    pub resample_w: usize,
    /// Patch grid after alignment and token-budget cropping.
    pub grid_h: usize,
    pub grid_w: usize,
    /// True when the patch-size clamp (not the pixel budget) set the scale.
    pub clamped: bool,
}

impl ResizePlan {
    pub fn out_h(&self, cfg: &PipelineConfig) -> usize {
        self.grid_h * cfg.patch_size
    }

    pub fn out_w(&self, cfg: &PipelineConfig) -> usize {
        self.grid_w * cfg.patch_size
    }

    pub fn patch_count(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Scale to roughly the pixel budget while keeping aspect ratio, never
/// letting the short side drop below one patch; align down to patch
/// multiples; shed far-edge patch rows/cols if the clamp overshot the
/// token budget.
pub fn resize_plan(height: usize, width: usize, cfg: &PipelineConfig) -> ResizePlan {
    let p = cfg.patch_size as f64;
    let (hf, wf) = (height as f64, width as f64);
    let budget_scale = (cfg.pixel_budget as f64 / (hf * wf)).sqrt();
    let clamp_scale = p / height.min(width) as f64;
    let clamped = clamp_scale > budget_scale;
    let scale = budget_scale.max(clamp_scale);
    let resample_h = (hf * scale).floor() as usize;
    let resample_w = (wf * scale).floor() as usize;
    let mut grid_h = resample_h / cfg.patch_size;
    let mut grid_w = resample_w / cfg.patch_size;
    let max_tokens = cfg.max_tokens();
    if grid_h * grid_w > max_tokens {
        if grid_w >= grid_h {
            grid_w = max_tokens / grid_h;
        } else {
            grid_h = max_tokens / grid_w;
        }
    }
    ResizePlan {
        scale,
        resample_h,
        resample_w,
        grid_h,
        grid_w,
        clamped,
    }
}

/// Bilinear resampling with half-pixel-center alignment. Resampling to the
/// input dims is the identity.
pub fn bilinear_resize(img: &Image, out_h: usize, out_w: usize) -> Image {
    let sy = img.height as f64 / out_h as f64;
    let sx = img.width as f64 / out_w as f64;
    let mut out = Image::zeros(out_h, out_w);
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = fx - x0 as f64;
            for c in 0..3 {
                let top = (1.0 - wx) * img.get(y0, x0, c) + wx * img.get(y0, x1, c);
                let bottom = (1.0 - wx) * img.get(y1, x0, c) + wx * img.get(y1, x1, c);
                let v = (1.0 - wy) * top + wy * bottom;
                out.set(oy, ox, c, v.clamp(0.0, 1.0));
            }
        }
    }
    out
}

pub fn crop(img: &Image, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
    if top + height > img.height || left + width > img.width || height == 0 || width == 0 {
        return Err(Error::contract(format!(
            "crop [{top}+{height}, {left}+{width}] exceeds image {}x{}",
            img.height, img.width
        )));
    }
    let mut data = Vec::with_capacity(height * width * 3);
    for y in top..top + height {
        let row = (y * img.width + left) * 3;
        data.extend_from_slice(&img.data[row..row + width * 3]);
    }
    Ok(Image {
        height,
        width,
        data,
    })
}

/// Resize toward the pixel budget preserving aspect ratio, then crop from
/// the top-left to patch multiples (and to the token budget if the
/// patch-size clamp overshot it).
pub fn native_aspect_ratio_resize(img: &Image, cfg: &PipelineConfig) -> Result<Image> {
    let plan = resize_plan(img.height, img.width, cfg);
    let resized = bilinear_resize(img, plan.resample_h, plan.resample_w);
    crop(&resized, 0, 0, plan.out_h(cfg), plan.out_w(cfg))
}

/// Random-resized-crop to a fixed square: the training-time resize of the
/// fixed-resolution baseline. Samples an area fraction in [0.08, 1] and an
/// aspect ratio log-uniform in [3/4, 4/3]; after ten infeasible draws falls
/// back to a centered square crop.
pub fn aim_train_resize(img: &Image, cfg: &PipelineConfig, rng: &mut Rng) -> Image {
    let side = cfg.square_side();
    let area = (img.height * img.width) as f64;
    for _ in 0..10 {
        let target_area = area * rng.uniform_range(0.08, 1.0);
        let ratio = rng.uniform_range((3f64 / 4.0).ln(), (4f64 / 3.0).ln()).exp();
        let w = (target_area * ratio).sqrt().round() as usize;
        let h = (target_area / ratio).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= img.width && h <= img.height {
            let top = rng.below(img.height - h + 1);
            let left = rng.below(img.width - w + 1);
            let cropped = crop(img, top, left, h, w).unwrap();
            return bilinear_resize(&cropped, side, side);
        }
    }
    let short = img.height.min(img.width);
    let top = (img.height - short) / 2;
    let left = (img.width - short) / 2;
    let cropped = crop(img, top, left, short, short).unwrap();
    bilinear_resize(&cropped, side, side)
}

/// Deterministic eval-time resize of the fixed-resolution baseline: short
/// side to 8/7 of the square side, then a centered square crop.
pub fn aim_eval_resize(img: &Image, cfg: &PipelineConfig) -> Image {
    let side = cfg.square_side();
    let min_target = (side as f64 * 8.0 / 7.0).floor() as usize;
    let (out_h, out_w) = if img.height <= img.width {
        let w = (img.width as f64 * min_target as f64 / img.height as f64).round() as usize;
        (min_target, w)
    } else {
        let h = (img.height as f64 * min_target as f64 / img.width as f64).round() as usize;
        (h, min_target)
    };
    let resized = if (out_h, out_w) == (img.height, img.width) {
        img.clone()
    } else {
        bilinear_resize(img, out_h, out_w)
    };
    let top = (out_h - side) / 2;
    let left = (out_w - side) / 2;
    crop(&resized, top, left, side, side).unwrap()
}

/// Random crop sharing the input's aspect ratio, scaled so the crop still
/// holds at least the pixel budget. Images already under the budget pass
/// through unchanged.
pub fn random_native_crop(img: &Image, cfg: &PipelineConfig, rng: &mut Rng) -> Image {
    let area = (img.height * img.width) as f64;
    if img.height * img.width < cfg.pixel_budget {
        return img.clone();
    }
    let k_min = (cfg.pixel_budget as f64 / area).sqrt();
    let k = rng.uniform_range(k_min, 1.0);
    let ch = ((img.height as f64 * k).ceil() as usize).min(img.height);
    let cw = ((img.width as f64 * k).ceil() as usize).min(img.width);
    let top = rng.below(img.height - ch + 1);
    let left = rng.below(img.width - cw + 1);
    crop(img, top, left, ch, cw).unwrap()
}

pub fn flip_columns(img: &Image) -> Image {
    let mut out = Image::zeros(img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                out.set(y, x, c, img.get(y, img.width - 1 - x, c));
            }
        }
    }
    out
}

pub fn horizontal_flip(img: &Image, rng: &mut Rng, p: f64) -> Image {
    if rng.bernoulli(p) {
        flip_columns(img)
    } else {
        img.clone()
    }
}

/// Patches of a patch-aligned image in raster (row-major) order; each
/// patch is its P x P x 3 block flattened row-major, channel-interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patches: Vec<Vec<f64>>,
}

pub fn patchify(img: &Image, cfg: &PipelineConfig) -> Result<PatchGrid> {
    let p = cfg.patch_size;
    if img.height % p != 0 || img.width % p != 0 {
        return Err(Error::contract(format!(
            "image {}x{} is not a multiple of the patch size {p}; resize first",
            img.height, img.width
        )));
    }
    let grid_h = img.height / p;
    let grid_w = img.width / p;
    if grid_h * grid_w > cfg.max_tokens() {
        return Err(Error::contract(format!(
            "patch grid {grid_h}x{grid_w} exceeds the {} token budget",
            cfg.max_tokens()
        )));
    }
    let mut patches = Vec::with_capacity(grid_h * grid_w);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let mut patch = Vec::with_capacity(p * p * 3);
            for py in 0..p {
                let row = ((gy * p + py) * img.width + gx * p) * 3;
                patch.extend_from_slice(&img.data[row..row + p * 3]);
            }
            patches.push(patch);
        }
    }
    Ok(PatchGrid {
        grid_h,
        grid_w,
        patches,
    })
}

pub fn reconstruct(grid: &PatchGrid, cfg: &PipelineConfig) -> Result<Image> {
    let p = cfg.patch_size;
    if grid.patches.len() != grid.grid_h * grid.grid_w {
        return Err(Error::contract(format!(
            "grid {}x{} holds {} patches",
            grid.grid_h,
            grid.grid_w,
            grid.patches.len()
        )));
    }
    let mut out = Image::zeros(grid.grid_h * p, grid.grid_w * p);
    for (k, patch) in grid.patches.iter().enumerate() {
        if patch.len() != p * p * 3 {
            return Err(Error::contract(format!(
                "patch {k} has {} values, expected {}",
                patch.len(),
                p * p * 3
            )));
        }
        let gy = k / grid.grid_w;
        let gx = k % grid.grid_w;
        for py in 0..p {
            let dst = ((gy * p + py) * out.width + gx * p) * 3;
            let src = py * p * 3;
            out.data[dst..dst + p * 3].copy_from_slice(&patch[src..src + p * 3]);
        }
    }
    Ok(out)
}

/// Where a token's patch sits in its image grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenCoord {
    pub row: usize,
    pub col: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// A patch grid padded out to the fixed token count. Real tokens form a
/// prefix; padding is zero vectors flagged false in the mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<Vec<f64>>,
    pub pad_mask: Vec<bool>,
    pub coords: Vec<TokenCoord>,
}

impl TokenSequence {
    pub fn real_count(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn pad_to_sequence(grid: &PatchGrid, cfg: &PipelineConfig) -> Result<TokenSequence> {
    let n_max = cfg.max_tokens();
    let real = grid.grid_h * grid.grid_w;
    if real > n_max {
        return Err(Error::contract(format!(
            "patch grid {}x{} exceeds the {n_max} token budget",
            grid.grid_h, grid.grid_w
        )));
    }
    let dim = cfg.patch_size * cfg.patch_size * 3;
    let mut tokens = grid.patches.clone();
    tokens.resize_with(n_max, || vec![0.0; dim]);
    let mut pad_mask = vec![true; real];
    pad_mask.resize(n_max, false);
    let mut coords = Vec::with_capacity(n_max);
    for k in 0..n_max {
        let (row, col) = if k < real {
            (k / grid.grid_w, k % grid.grid_w)
        } else {
            (0, 0)
        };
        coords.push(TokenCoord {
            row,
            col,
            grid_h: grid.grid_h,
            grid_w: grid.grid_w,
        });
    }
    Ok(TokenSequence {
        tokens,
        pad_mask,
        coords,
    })
}

/// How raw images are brought to patch-aligned model inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizePolicy {
    /// Aspect-preserving resize to the pixel budget (variable grid shape).
    Native,
    /// Fixed square resize (random-resized-crop in training, short-side
    /// scale plus center crop in eval).
    Square,
}

/// Augment (optionally) and resize an image to patch-aligned dims under
/// the chosen policy. Training augmentation is a coin-flip horizontal flip
/// followed by the policy's random crop; eval is deterministic.
pub fn prepare_image(
    img: &Image,
    cfg: &PipelineConfig,
    policy: ResizePolicy,
    augment: bool,
    rng: &mut Rng,
) -> Result<Image> {
    match (policy, augment) {
        (ResizePolicy::Native, true) => {
            let flipped = horizontal_flip(img, rng, 0.5);
            let cropped = random_native_crop(&flipped, cfg, rng);
            native_aspect_ratio_resize(&cropped, cfg)
        }
        (ResizePolicy::Native, false) => native_aspect_ratio_resize(img, cfg),
        (ResizePolicy::Square, true) => {
            let flipped = horizontal_flip(img, rng, 0.5);
            Ok(aim_train_resize(&flipped, cfg, rng))
        }
        (ResizePolicy::Square, false) => Ok(aim_eval_resize(img, cfg)),
    }
}

/// Standardize a patch vector: (x - mean) / sqrt(var + eps), population
/// variance. Constant patches map to zero.
pub fn patch_normalize_target(patch: &[f64], eps: f64) -> Vec<f64> {
    let n = patch.len() as f64;
    let mean = patch.iter().sum::<f64>() / n;
    let var = patch.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    patch.iter().map(|&x| (x - mean) / denom).collect()
}

pub const TARGET_NORM_EPS: f64 = 1e-6;
