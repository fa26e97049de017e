//! Blockwise mask sampling on the patch grid and pixel-space corruption.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest and largest aspect ratio (height / width) of a sampled block.
pub const MIN_ASPECT: f64 = 0.3;
pub const MAX_ASPECT: f64 = 1.0 / 0.3;
/// Upper bound on one block's area as a fraction of the grid.
pub const MAX_BLOCK_FRACTION: f64 = 0.3;

/// Rectangle of grid cells: `[top, top+height) × [left, left+width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockMask {
    rows: usize,
    cols: usize,
    grid: Vec<bool>,
    ratio_requested: f64,
    blocks: Vec<Block>,
}

impl BlockMask {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            grid: vec![false; rows * cols],
            ratio_requested: 0.0,
            blocks: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major cells, `true` = masked.
    pub fn grid(&self) -> &[bool] {
        &self.grid
    }

    pub fn is_masked(&self, r: usize, c: usize) -> bool {
        self.grid[r * self.cols + c]
    }

    pub fn ratio_requested(&self) -> f64 {
        self.ratio_requested
    }

    /// Sampled rectangles in sampling order; their union is the mask.
    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn masked_count(&self) -> usize {
        self.grid.iter().filter(|&&m| m).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        if self.grid.is_empty() {
            return 0.0;
        }
        self.masked_count() as f64 / self.grid.len() as f64
    }

    /// Pixel-level mask: every grid cell expanded to a `patch × patch` block.
    pub fn pixel_mask(&self, patch: usize) -> Vec<bool> {
        let w = self.cols * patch;
        let mut out = vec![false; self.rows * patch * w];
        for y in 0..self.rows * patch {
            for x in 0..w {
                out[y * w + x] = self.grid[(y / patch) * self.cols + x / patch];
            }
        }
        out
    }

    /// Token-level mask including a leading unmasked [CLS] slot.
    pub fn token_mask_with_cls(&self) -> Vec<bool> {
        std::iter::once(false).chain(self.grid.iter().copied()).collect()
    }

    /// Plain-text portable bitmap (`P1`), `1` = masked.
    pub fn to_pbm(&self) -> String {
        let mut s = format!("P1\n{} {}\n", self.cols, self.rows);
        for r in 0..self.rows {
            let row: Vec<&str> = (0..self.cols)
                .map(|c| if self.is_masked(r, c) { "1" } else { "0" })
                .collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    /// Parses [`BlockMask::to_pbm`] output. Block history is not stored in
    /// the bitmap, so each masked cell becomes a 1×1 block.
    pub fn from_pbm(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        if tokens.next() != Some("P1") {
            return Err(Error::Ingestion("mask bitmap must start with P1".into()));
        }
        let mut dim = || -> Result<usize> {
            tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Ingestion("bad bitmap dimensions".into()))
        };
        let (cols, rows) = (dim()?, dim()?);
        let grid: Vec<bool> = tokens
            .flat_map(|t| t.chars())
            .map(|ch| match ch {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Ingestion(format!("bad bitmap cell {other:?}"))),
            })
            .collect::<Result<_>>()?;
        if grid.len() != rows * cols {
            return Err(Error::Ingestion(format!(
                "bitmap has {} cells, header says {rows}x{cols}",
                grid.len()
            )));
        }
        let blocks = (0..rows * cols)
            .filter(|&i| grid[i])
            .map(|i| Block {
                top: i / cols,
                left: i % cols,
                height: 1,
                width: 1,
            })
            .collect();
        let ratio = grid.iter().filter(|&&m| m).count() as f64 / grid.len().max(1) as f64;
        Ok(Self {
            rows,
            cols,
            grid,
            ratio_requested: ratio,
            blocks,
        })
    }
}

/// Samples rectangular blocks until at least `ratio` of the `rows × cols`
/// grid is masked.
///
/// Each block's area is drawn uniformly from the cells still needed (capped
/// at [`MAX_BLOCK_FRACTION`] of the grid) and its aspect ratio log-uniformly
/// from `[0.3, 1/0.3]`. Rounding the block sides can overshoot the target by
/// at most part of one block; the result never undershoots.
pub fn sample_block_mask<R: Rng + ?Sized>(rows: usize, cols: usize, ratio: f64, rng: &mut R) -> Result<BlockMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Parameter(format!(
            "mask ratio must be in [0, 1), got {ratio}"
        )));
    }
    let cells = rows * cols;
    let mut mask = BlockMask::empty(rows, cols);
    mask.ratio_requested = ratio;
    let target = ((ratio * cells as f64) - 1e-9).ceil().max(0.0) as usize;
    let cap = ((MAX_BLOCK_FRACTION * cells as f64).ceil() as usize).max(1);
    let mut masked = 0;
    let mut misses = 0;
    while masked < target {
        let remaining = target - masked;
        let area = rng.gen_range(1..=remaining.min(cap)) as f64;
        let aspect = rng.gen_range(MIN_ASPECT.ln()..MAX_ASPECT.ln()).exp();
        let height = ((area * aspect).sqrt().round() as usize).clamp(1, rows);
        let width = ((area / aspect).sqrt().round() as usize).clamp(1, cols);
        let block = Block {
            top: rng.gen_range(0..=rows - height),
            left: rng.gen_range(0..=cols - width),
            height,
            width,
        };
        let added = mark(&mut mask, block);
        if added == 0 {
            misses += 1;
            if misses < 64 {
                continue;
            }
            // fully overlapped too often: take one free cell directly
            let free: Vec<usize> = (0..cells).filter(|&i| !mask.grid[i]).collect();
            let i = free[rng.gen_range(0..free.len())];
            masked += mark(
                &mut mask,
                Block {
                    top: i / cols,
                    left: i % cols,
                    height: 1,
                    width: 1,
                },
            );
        } else {
            masked += added;
        }
        misses = 0;
    }
    Ok(mask)
}

fn mark(mask: &mut BlockMask, b: Block) -> usize {
    let mut added = 0;
    for r in b.top..b.top + b.height {
        for c in b.left..b.left + b.width {
            let cell = &mut mask.grid[r * mask.cols + c];
            if !*cell {
                *cell = true;
                added += 1;
            }
        }
    }
    if added > 0 {
        mask.blocks.push(b);
    }
    added
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorruptionMode {
    Noise,
    Zeros,
    Alien,
}

/// Mix of fill modes for masked blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionPolicy {
    pub noise: f64,
    pub zeros: f64,
    pub alien: f64,
    /// Interval sampled uniformly for noise pixels.
    pub noise_range: (f64, f64),
}

impl Default for CorruptionPolicy {
    fn default() -> Self {
        Self {
            noise: 1.0 / 3.0,
            zeros: 1.0 / 3.0,
            alien: 1.0 / 3.0,
            noise_range: (0.0, 1.0),
        }
    }
}

impl CorruptionPolicy {
    pub fn only(mode: CorruptionMode) -> Self {
        let mut p = Self {
            noise: 0.0,
            zeros: 0.0,
            alien: 0.0,
            ..Self::default()
        };
        match mode {
            CorruptionMode::Noise => p.noise = 1.0,
            CorruptionMode::Zeros => p.zeros = 1.0,
            CorruptionMode::Alien => p.alien = 1.0,
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.noise, self.zeros, self.alien];
        if w.iter().any(|&x| !(x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!(
                "corruption weights must be nonnegative and sum to 1, got {w:?}"
            )));
        }
        if !(self.noise_range.0 <= self.noise_range.1) {
            return Err(Error::Parameter(format!(
                "empty noise range {:?}",
                self.noise_range
            )));
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> CorruptionMode {
        let u = rng.gen::<f64>() * (self.noise + self.zeros + self.alien);
        if u < self.noise {
            CorruptionMode::Noise
        } else if u < self.noise + self.zeros {
            CorruptionMode::Zeros
        } else if self.alien > 0.0 {
            CorruptionMode::Alien
        } else if self.zeros > 0.0 {
            CorruptionMode::Zeros
        } else {
            CorruptionMode::Noise
        }
    }
}

/// Corrupts the masked blocks of `image: [C, H, W]`. Each sampled block is
/// filled by one mode drawn from `policy`; unmasked pixels are copied
/// unchanged.
pub fn corrupt<R: Rng + ?Sized>(
    image: &Tensor,
    mask: &BlockMask,
    patch: usize,
    policy: &CorruptionPolicy,
    alien_source: Option<&Tensor>,
    rng: &mut R,
) -> Result<Tensor> {
    policy.validate()?;
    let s = image.shape();
    if s.len() != 3 || s[1] != mask.rows * patch || s[2] != mask.cols * patch {
        return Err(Error::Dimension {
            op: "corrupt",
            lhs: s.to_vec(),
            rhs: vec![mask.rows * patch, mask.cols * patch],
        });
    }
    if policy.alien > 0.0 && !mask.blocks.is_empty() {
        match alien_source {
            None => {
                return Err(Error::Config(
                    "alien corruption requested without an alien source image".into(),
                ))
            }
            Some(a) if a.shape() != s => {
                return Err(Error::Dimension {
                    op: "corrupt alien source",
                    lhs: s.to_vec(),
                    rhs: a.shape().to_vec(),
                })
            }
            Some(_) => {}
        }
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = image.clone();
    let data = out.data_mut();
    let (lo, hi) = policy.noise_range;
    for b in &mask.blocks {
        let mode = policy.draw(rng);
        for ch in 0..c {
            for y in b.top * patch..(b.top + b.height) * patch {
                for x in b.left * patch..(b.left + b.width) * patch {
                    let i = (ch * h + y) * w + x;
                    data[i] = match mode {
                        CorruptionMode::Zeros => 0.0,
                        CorruptionMode::Noise => {
                            if hi > lo {
                                rng.gen_range(lo..hi)
                            } else {
                                lo
                            }
                        }
                        CorruptionMode::Alien => alien_source.map_or(0.0, |a| a.data()[i]),
                    };
                }
            }
        }
    }
    Ok(out)
}
