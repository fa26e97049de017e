//! Multi-crop view construction: random resized crops, photometric
//! augmentation, block masks and corruption of the student's global views.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::TokenPartition;
use crate::error::{Error, Result};
use crate::masking::{corrupt, sample_block_mask, BlockMask, CorruptionPolicy};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub global_size: usize,
    pub local_size: usize,
    /// Number of local crops `M`.
    pub locals: usize,
    /// Area fraction range of global crops.
    pub global_scale: (f64, f64),
    /// Area fraction range of local crops.
    pub local_scale: (f64, f64),
    pub flip_prob: f64,
    pub jitter_prob: f64,
    /// Brightness, contrast and saturation factors are drawn from
    /// `[1 − s, 1 + s]`.
    pub jitter_strength: f64,
    /// Hue rotation drawn from `[−h, h]` turns of the colour wheel.
    pub hue_strength: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    /// Gaussian blur sigma range, in pixels.
    pub blur_sigma: (f64, f64),
    pub mask_ratio: f64,
    pub corruption: CorruptionPolicy,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            global_size: 32,
            local_size: 16,
            locals: 2,
            global_scale: (0.4, 1.0),
            local_scale: (0.1, 0.4),
            flip_prob: 0.5,
            jitter_prob: 0.8,
            jitter_strength: 0.4,
            hue_strength: 0.1,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: (0.1, 1.0),
            mask_ratio: 0.5,
            corruption: CorruptionPolicy::default(),
        }
    }
}

impl AugConfig {
    pub fn validate(&self, patch: usize) -> Result<()> {
        for (name, side) in [("global", self.global_size), ("local", self.local_size)] {
            if side == 0 || side % patch != 0 {
                return Err(Error::Config(format!(
                    "{name} crop size {side} is not a positive multiple of patch size {patch}"
                )));
            }
        }
        for (name, (lo, hi)) in [("global_scale", self.global_scale), ("local_scale", self.local_scale)] {
            if !(0.0 < lo && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!("{name} must satisfy 0 < lo <= hi <= 1")));
            }
        }
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue_strength) {
            return Err(Error::Config("hue_strength must be in [0, 0.5]".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config("mask_ratio must be in [0, 1)".into()));
        }
        if !(0.0 < self.blur_sigma.0 && self.blur_sigma.0 <= self.blur_sigma.1) {
            return Err(Error::Config("blur_sigma must satisfy 0 < lo <= hi".into()));
        }
        self.corruption
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }
}

/// All views of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    /// Teacher inputs `[C, G, G]`.
    pub global_clean: [Tensor; 2],
    /// Student inputs, equal to the clean views outside the masks.
    pub global_corrupted: [Tensor; 2],
    pub masks: [BlockMask; 2],
    /// Unmasked student crops `[C, L, L]`.
    pub locals: Vec<Tensor>,
}

/// Bilinear sample of `image: [C, H, W]` over the source rectangle
/// `(top, left, height, width)` onto an `out × out` grid.
fn resample(image: &Tensor, rect: (f64, f64, f64, f64), out: usize) -> Tensor {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (top, left, rh, rw) = rect;
    let src = image.data();
    Tensor::from_fn(&[c, out, out], |i| {
        let (ch, y, x) = (i / (out * out), (i / out) % out, i % out);
        let sy = (top + (y as f64 + 0.5) * rh / out as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let sx = (left + (x as f64 + 0.5) * rw / out as f64 - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let at = |yy: usize, xx: usize| src[(ch * h + yy) * w + xx];
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
    })
}

/// Random crop covering `scale` of the image area with aspect ratio
/// log-uniform in `[3/4, 4/3]`, resized to `out × out`.
pub fn random_resized_crop<R: Rng + ?Sized>(image: &Tensor, scale: (f64, f64), out: usize, rng: &mut R) -> Tensor {
    let (h, w) = (image.shape()[1] as f64, image.shape()[2] as f64);
    let area = h * w * rng.gen_range(scale.0..=scale.1);
    let aspect = rng.gen_range((0.75f64).ln()..=(4.0f64 / 3.0).ln()).exp();
    let rh = (area * aspect).sqrt().min(h).max(1.0);
    let rw = (area / aspect).sqrt().min(w).max(1.0);
    let top = rng.gen_range(0.0..=h - rh);
    let left = rng.gen_range(0.0..=w - rw);
    resample(image, (top, left, rh, rw), out)
}

fn flip_horizontal(image: &mut Tensor) {
    let w = image.shape()[2];
    for row in image.data_mut().chunks_mut(w) {
        row.reverse();
    }
}

/// Brightness, contrast, saturation and hue jitter in random order, clamped to
/// `[0, 1]`.
fn color_jitter<R: Rng + ?Sized>(image: &mut Tensor, strength: f64, hue: f64, rng: &mut R) {
    let (c, hw) = (image.shape()[0], image.shape()[1] * image.shape()[2]);
    let mut order = [0, 1, 2, 3];
    for i in (1..4).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    for op in order {
        let f = rng.gen_range(1.0 - strength..=1.0 + strength);
        let data = image.data_mut();
        match op {
            3 if c == 3 => {
                let turn = rng.gen_range(-hue..=hue);
                rotate_hue(data, hw, turn * std::f64::consts::TAU);
            }
            3 => {}
            0 => data.iter_mut().for_each(|v| *v *= f),
            1 => {
                let mean = data.iter().sum::<f64>() / data.len() as f64;
                data.iter_mut().for_each(|v| *v = mean + f * (*v - mean));
            }
            _ if c == 3 => {
                for p in 0..hw {
                    let gray = 0.299 * data[p] + 0.587 * data[hw + p] + 0.114 * data[2 * hw + p];
                    for ch in 0..3 {
                        let v = &mut data[ch * hw + p];
                        *v = gray + f * (*v - gray);
                    }
                }
            }
            _ => {}
        }
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
}

/// Rotates every RGB pixel by `angle` radians about the grey axis.
fn rotate_hue(data: &mut [f64], hw: usize, angle: f64) {
    let (cos, sin) = (angle.cos(), angle.sin());
    let a = cos + (1.0 - cos) / 3.0;
    let b = (1.0 - cos) / 3.0 - sin / 3f64.sqrt();
    let d = (1.0 - cos) / 3.0 + sin / 3f64.sqrt();
    let m = [[a, b, d], [d, a, b], [b, d, a]];
    for p in 0..hw {
        let rgb = [data[p], data[hw + p], data[2 * hw + p]];
        for (ch, row) in m.iter().enumerate() {
            data[ch * hw + p] = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
        }
    }
}

fn grayscale(image: &mut Tensor) {
    if image.shape()[0] != 3 {
        return;
    }
    let hw = image.shape()[1] * image.shape()[2];
    let data = image.data_mut();
    for p in 0..hw {
        let g = 0.299 * data[p] + 0.587 * data[hw + p] + 0.114 * data[2 * hw + p];
        for ch in 0..3 {
            data[ch * hw + p] = g;
        }
    }
}

/// Separable Gaussian blur with clamped borders.
fn gaussian_blur(image: &mut Tensor, sigma: f64) {
    let radius = (2.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / z).collect();
    let s = image.shape().to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (ki, k) in kernel.iter().enumerate() {
                        let o = ki as isize - radius;
                        let (yy, xx) = if horizontal {
                            (y, (x as isize + o).clamp(0, w as isize - 1) as usize)
                        } else {
                            ((y as isize + o).clamp(0, h as isize - 1) as usize, x)
                        };
                        acc += k * src[(ch * h + yy) * w + xx];
                    }
                    out[(ch * h + y) * w + x] = acc;
                }
            }
        }
        out
    };
    let tmp = pass(image.data(), true);
    let out = pass(&tmp, false);
    image.data_mut().copy_from_slice(&out);
}

fn augmented_crop<R: Rng + ?Sized>(image: &Tensor, scale: (f64, f64), out: usize, cfg: &AugConfig, rng: &mut R) -> Tensor {
    let mut v = random_resized_crop(image, scale, out, rng);
    if rng.gen_bool(cfg.flip_prob) {
        flip_horizontal(&mut v);
    }
    if rng.gen_bool(cfg.jitter_prob) {
        color_jitter(&mut v, cfg.jitter_strength, cfg.hue_strength, rng);
    }
    if rng.gen_bool(cfg.grayscale_prob) {
        grayscale(&mut v);
    }
    if rng.gen_bool(cfg.blur_prob) {
        let sigma = rng.gen_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        gaussian_blur(&mut v, sigma);
    }
    v
}

/// Builds the two global views (clean and corrupted, masks sampled
/// independently per view) and `M` local views of `image: [C, H, W]`.
/// Alien fill comes from `alien`, resized to the global size; without one
/// the alien weight is spread over the other fill modes.
pub fn build_views<R: Rng + ?Sized>(
    image: &Tensor,
    alien: Option<&Tensor>,
    cfg: &AugConfig,
    patch: usize,
    rng: &mut R,
) -> Result<ViewBatch> {
    let s = image.shape();
    if s.len() != 3 || s[0] == 0 || s[1] < 2 || s[2] < 2 {
        return Err(Error::Ingestion(format!("degenerate image shape {s:?}")));
    }
    cfg.validate(patch)?;
    let g = cfg.global_size;
    let grid = g / patch;
    let clean = [
        augmented_crop(image, cfg.global_scale, g, cfg, rng),
        augmented_crop(image, cfg.global_scale, g, cfg, rng),
    ];
    let masks = [
        sample_block_mask(grid, grid, cfg.mask_ratio, rng)?,
        sample_block_mask(grid, grid, cfg.mask_ratio, rng)?,
    ];
    let alien_view = alien.map(|a| resample(a, (0.0, 0.0, a.shape()[1] as f64, a.shape()[2] as f64), g));
    let policy = match alien_view {
        Some(_) => cfg.corruption.clone(),
        None => without_alien(&cfg.corruption),
    };
    let corrupted = [
        corrupt(&clean[0], &masks[0], patch, &policy, alien_view.as_ref(), rng)?,
        corrupt(&clean[1], &masks[1], patch, &policy, alien_view.as_ref(), rng)?,
    ];
    let locals = (0..cfg.locals)
        .map(|_| augmented_crop(image, cfg.local_scale, cfg.local_size, cfg, rng))
        .collect();
    Ok(ViewBatch {
        global_clean: clean,
        global_corrupted: corrupted,
        masks,
        locals,
    })
}

fn without_alien(p: &CorruptionPolicy) -> CorruptionPolicy {
    let rest = p.noise + p.zeros;
    if rest <= 0.0 {
        return CorruptionPolicy {
            noise: 1.0,
            zeros: 0.0,
            alien: 0.0,
            noise_range: p.noise_range,
        };
    }
    CorruptionPolicy {
        noise: p.noise / rest,
        zeros: p.zeros / rest,
        alien: 0.0,
        noise_range: p.noise_range,
    }
}

/// Views of a whole batch stacked per view.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    /// `[2B, C, G, G]`: view g1 of every image, then view g2.
    pub global_clean: Tensor,
    pub global_corrupted: Tensor,
    /// `[2B, G, G]` pixel masks in the same order.
    pub pixel_masks: Vec<bool>,
    /// One partition over `N+1` tokens per global student sequence.
    pub partitions: Vec<TokenPartition>,
    /// `[M·B, C, L, L]`: local crop 1 of every image, then crop 2, ...
    pub locals: Option<Tensor>,
    pub batch: usize,
    pub locals_per_image: usize,
}

fn stack(views: &[&Tensor]) -> Tensor {
    let mut shape = vec![views.len()];
    shape.extend_from_slice(views[0].shape());
    let data = views.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data).expect("views share one shape")
}

/// Builds views for every image; image `i` takes alien content from image
/// `i + 1` (cyclically) when the batch has more than one image.
pub fn build_batch<R: Rng + ?Sized>(images: &[&Tensor], cfg: &AugConfig, patch: usize, rng: &mut R) -> Result<TrainBatch> {
    if images.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let b = images.len();
    let views: Vec<ViewBatch> = (0..b)
        .map(|i| {
            let alien = (b > 1).then(|| images[(i + 1) % b]);
            build_views(images[i], alien, cfg, patch, rng)
        })
        .collect::<Result<_>>()?;
    let order = |v: usize| views.iter().map(move |vb| (vb, v));
    let global_clean = stack(&order(0).chain(order(1)).map(|(vb, v)| &vb.global_clean[v]).collect::<Vec<_>>());
    let global_corrupted = stack(&order(0).chain(order(1)).map(|(vb, v)| &vb.global_corrupted[v]).collect::<Vec<_>>());
    let mut pixel_masks = Vec::new();
    let mut partitions = Vec::new();
    for (vb, v) in order(0).chain(order(1)) {
        pixel_masks.extend(vb.masks[v].pixel_mask(patch));
        partitions.push(TokenPartition::from_mask(&vb.masks[v].token_mask_with_cls())?);
    }
    let locals = (cfg.locals > 0).then(|| {
        let refs: Vec<&Tensor> = (0..cfg.locals).flat_map(|m| views.iter().map(move |vb| &vb.locals[m])).collect();
        stack(&refs)
    });
    Ok(TrainBatch {
        global_clean,
        global_corrupted,
        pixel_masks,
        partitions,
        locals,
        batch: b,
        locals_per_image: cfg.locals,
    })
}
