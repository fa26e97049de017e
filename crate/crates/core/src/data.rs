//! Image datasets: procedural shapes and `root/<label>/<image>` folders of
//! PNG files.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Light shapes on a dark ground.
pub const SYNTHETIC_SHAPES: &str = "synthetic:shapes";
/// Shapes with uniformly random foreground and background colours.
pub const SYNTHETIC_SHAPES_COLOUR: &str = "synthetic:shapes-colour";

pub const SHAPE_CLASSES: [&str; 10] = [
    "circle", "square", "triangle", "plus", "ring", "hstripes", "vstripes", "diamond", "cross", "halfdisc",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// A directory path, `synthetic:shapes` or `synthetic:shapes-colour`.
    pub source: String,
    /// Side every image is resized to.
    pub image_size: usize,
    /// Number of generated images for synthetic sources.
    pub count: usize,
    /// Seed for generation and iteration order.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: SYNTHETIC_SHAPES.into(),
            image_size: 32,
            count: 1000,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 2 {
            return Err(Error::Config("data.image_size must be at least 2".into()));
        }
        if self.source.starts_with("synthetic:") {
            palette_for(&self.source)?;
        }
        Ok(())
    }
}

/// Images `[3, S, S]` in `[0, 1]` with labels `0..classes.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: Vec<String>,
    /// Files that could not be decoded.
    pub skipped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The first `n` items and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let part = |r: std::ops::Range<usize>| Dataset {
            images: self.images[r.clone()].to_vec(),
            labels: self.labels[r].to_vec(),
            classes: self.classes.clone(),
            skipped: 0,
        };
        (part(0..n), part(n..self.len()))
    }
}

pub fn load_dataset(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    if cfg.source.starts_with("synthetic:") {
        synthetic(&cfg.source, cfg.count, cfg.image_size, cfg.seed)
    } else {
        load_image_folder(Path::new(&cfg.source), cfg.image_size, cfg.seed)
    }
}

fn in_shape(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let d = (dx * dx + dy * dy).sqrt();
    let bar = 0.3 * r;
    match class {
        0 => d <= r,
        1 => ax <= 0.85 * r && ay <= 0.85 * r,
        2 => dy <= 0.8 * r && dy >= -r + 2.0 * ax * 0.9,
        3 => (ax <= bar && ay <= r) || (ay <= bar && ax <= r),
        4 => d <= r && d >= 0.55 * r,
        5 => ax <= r && ay <= r && ((dy + r) / (0.5 * r)).floor() as i64 % 2 == 0,
        6 => ax <= r && ay <= r && ((dx + r) / (0.5 * r)).floor() as i64 % 2 == 0,
        7 => ax + ay <= r,
        8 => d <= r && ((dx - dy).abs() <= bar * 1.2 || (dx + dy).abs() <= bar * 1.2),
        _ => d <= r && dy <= 0.0,
    }
}

fn luminance(c: &[f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Palette {
    /// Foreground 0.9 and background 0.1 in every channel.
    TwoTone,
    /// Independent uniform RGB colours with luminance contrast at least 0.3.
    Random,
}

fn palette_for(source: &str) -> Result<Palette> {
    match source {
        SYNTHETIC_SHAPES => Ok(Palette::TwoTone),
        SYNTHETIC_SHAPES_COLOUR => Ok(Palette::Random),
        _ => Err(Error::Config(format!("unknown synthetic dataset `{source}`"))),
    }
}

/// One `[3, size, size]` image of shape `class` at a random position and
/// size, coloured from `palette`.
pub fn render_shape<R: Rng + ?Sized>(class: usize, size: usize, palette: Palette, rng: &mut R) -> Tensor {
    let s = size as f64;
    let (fg, bg) = match palette {
        Palette::TwoTone => ([0.9; 3], [0.1; 3]),
        Palette::Random => loop {
            let fg = [rng.gen::<f64>(), rng.gen(), rng.gen()];
            let bg = [rng.gen::<f64>(), rng.gen(), rng.gen()];
            if (luminance(&fg) - luminance(&bg)).abs() >= 0.3 {
                break (fg, bg);
            }
        },
    };
    let r = s * rng.gen_range(0.25..0.4);
    let cx = s / 2.0 + rng.gen_range(-0.12..0.12) * s;
    let cy = s / 2.0 + rng.gen_range(-0.12..0.12) * s;
    let mut img = Tensor::zeros(&[3, size, size]);
    let hw = size * size;
    let data = img.data_mut();
    for y in 0..size {
        for x in 0..size {
            let inside = in_shape(class, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r);
            let col = if inside { &fg } else { &bg };
            for ch in 0..3 {
                let noise = rng.gen_range(-0.03..0.03);
                data[ch * hw + y * size + x] = (col[ch] + noise).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// `count` two-tone images cycling through the ten shape classes, in
/// shuffled order.
pub fn synthetic_shapes(count: usize, size: usize, seed: u64) -> Dataset {
    shapes_with(Palette::TwoTone, count, size, seed)
}

/// The synthetic dataset named by `source` (see [`SYNTHETIC_SHAPES`] and
/// [`SYNTHETIC_SHAPES_COLOUR`]).
pub fn synthetic(source: &str, count: usize, size: usize, seed: u64) -> Result<Dataset> {
    Ok(shapes_with(palette_for(source)?, count, size, seed))
}

fn shapes_with(palette: Palette, count: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..count).map(|i| i % SHAPE_CLASSES.len()).collect();
    labels.shuffle(&mut rng);
    let images = labels.iter().map(|&c| render_shape(c, size, palette, &mut rng)).collect();
    Dataset {
        images,
        labels,
        classes: SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
        skipped: 0,
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `root/<class>/<index>.png`.
pub fn write_image_folder(ds: &Dataset, root: &Path) -> Result<()> {
    for class in &ds.classes {
        let dir = root.join(class);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (i, (img, &label)) in ds.images.iter().zip(&ds.labels).enumerate() {
        let (h, w) = (img.shape()[1], img.shape()[2]);
        let hw = h * w;
        let d = img.data();
        let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = y as usize * w + x as usize;
            image::Rgb([to_u8(d[p]), to_u8(d[hw + p]), to_u8(d[2 * hw + p])])
        });
        let path = root.join(&ds.classes[label]).join(format!("{i:06}.png"));
        buf.save(&path)
            .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn decode(path: &Path, size: usize) -> Option<Tensor> {
    let img = image::open(path).ok()?.to_rgb8();
    let img = if img.width() as usize != size || img.height() as usize != size {
        image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle)
    } else {
        img
    };
    let hw = size * size;
    let mut t = Tensor::zeros(&[3, size, size]);
    let data = t.data_mut();
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * size + x as usize;
        for ch in 0..3 {
            data[ch * hw + i] = p[ch] as f64 / 255.0;
        }
    }
    Some(t)
}

/// Reads `root/<label>/<image>`; labels follow the sorted folder names and
/// the item order is a seeded shuffle. Undecodable files are skipped and
/// counted.
pub fn load_image_folder(root: &Path, size: usize, seed: u64) -> Result<Dataset> {
    let read_dir = |p: &Path| -> Result<Vec<std::path::PathBuf>> {
        let mut v: Vec<_> = fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        v.sort();
        Ok(v)
    };
    let class_dirs: Vec<_> = read_dir(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Ingestion(format!("no class folders under {}", root.display())));
    }
    let mut items = Vec::new();
    let mut classes = Vec::new();
    let mut skipped = 0;
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let files: Vec<_> = read_dir(dir)?.into_iter().filter(|p| p.is_file()).collect();
        let before = items.len();
        for f in files {
            match decode(&f, size) {
                Some(t) => items.push((t, label)),
                None => {
                    log::warn!("skipping undecodable {}", f.display());
                    skipped += 1;
                }
            }
        }
        if items.len() == before {
            return Err(Error::Ingestion(format!("class folder `{name}` has no readable images")));
        }
        classes.push(name);
    }
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (images, labels) = items.into_iter().unzip();
    Ok(Dataset {
        images,
        labels,
        classes,
        skipped,
    })
}
