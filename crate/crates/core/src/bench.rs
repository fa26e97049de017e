//! Attention throughput at several masking ratios.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_forward, score_entry_count, TokenPartition};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};
use crate::vit::{encode, EncoderConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    /// Sequence length including [CLS].
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub batch: usize,
    pub ratios: Vec<f64>,
    pub repeats: usize,
    pub warmup: usize,
    /// Transformer blocks in the encoder measurement; 0 skips it.
    pub encoder_depth: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            tokens: 197,
            dim: 384,
            heads: 6,
            batch: 8,
            ratios: vec![0.0, 0.25, 0.5, 0.75],
            repeats: 5,
            warmup: 1,
            encoder_depth: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub ratio: f64,
    /// Masked patch tokens per image.
    pub masked: usize,
    /// Median over repeats, split attention kernel alone.
    pub images_per_second: f64,
    /// `n·(n − m)` for one head of one image.
    pub score_entries_per_image: u64,
    /// Score entries the kernel reported, per image and head.
    pub measured_entries_per_image: u64,
    pub speedup_vs_ratio0: f64,
    /// Median encoder throughput when measured.
    pub encoder_images_per_second: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Masked patch count for `ratio` of the `n − 1` patch tokens.
pub fn masked_count(tokens: usize, ratio: f64) -> usize {
    (ratio * (tokens - 1) as f64).round() as usize
}

/// Random partition with exactly `m` masked patch tokens.
pub fn random_partition<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<TokenPartition> {
    let picked = rand::seq::index::sample(rng, n - 1, m);
    let mut mask = vec![false; n];
    for i in picked.iter() {
        mask[i + 1] = true;
    }
    TokenPartition::from_mask(&mask)
}

fn time<F: FnMut() -> Result<()>>(warmup: usize, repeats: usize, images: usize, mut f: F) -> Result<f64> {
    for _ in 0..warmup {
        f()?;
    }
    let mut rates = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        f()?;
        rates.push(images as f64 / t0.elapsed().as_secs_f64().max(1e-12));
    }
    Ok(median(rates))
}

/// Times the split attention kernel (f32) at every ratio, optionally with a
/// short encoder stack on top. Ratio 0 runs the split kernel with no masked
/// tokens, which is dense attention.
pub fn bench_attention(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.tokens < 2 || cfg.heads == 0 || cfg.dim % cfg.heads != 0 || cfg.batch == 0 {
        return Err(Error::Parameter(format!("invalid benchmark shape {cfg:?}")));
    }
    if !cfg.ratios.contains(&0.0) {
        return Err(Error::Parameter("ratios must include 0 as the baseline".into()));
    }
    let (n, h, b) = (cfg.tokens, cfg.heads, cfg.batch);
    let dh = cfg.dim / h;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let len = b * h * n * dh;
    let mut buf = || -> Vec<f32> { (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect() };
    let (q, k, v) = (buf(), buf(), buf());

    let encoder = (cfg.encoder_depth > 0)
        .then(|| -> Result<_> {
            let side = ((n - 1) as f64).sqrt().round() as usize;
            if side * side != n - 1 {
                return Err(Error::Parameter(format!("{} patch tokens do not form a square grid", n - 1)));
            }
            let ecfg = EncoderConfig {
                patch_size: 1,
                embed_dim: cfg.dim,
                depth: cfg.encoder_depth,
                heads: h,
                mlp_ratio: 4,
                channels: 1,
                image_size: side,
                interpolate_pos: false,
            };
            let mut store = ParamStore::new();
            ecfg.init_params(&mut store, &mut rng)?;
            let tokens = Tensor::from_fn(&[b, n, cfg.dim], |_| rng.gen_range(-1.0..1.0));
            Ok((ecfg, store, tokens))
        })
        .transpose()?;

    let mut rows: Vec<BenchRow> = Vec::new();
    for &ratio in &cfg.ratios {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Parameter(format!("ratio {ratio} outside [0, 1)")));
        }
        let m = masked_count(n, ratio);
        let parts: Vec<TokenPartition> = (0..b).map(|_| random_partition(n, m, &mut rng)).collect::<Result<_>>()?;
        let (expected, _) = score_entry_count(n, m)?;
        let mut measured = 0;
        let ips = time(cfg.warmup, cfg.repeats, b, || {
            let (out, entries) = attention_forward(&q, &k, &v, [b, h, n, dh], Some(&parts))?;
            std::hint::black_box(out);
            measured = entries / (b * h) as u64;
            Ok(())
        })?;
        let encoder_ips = match &encoder {
            Some((ecfg, store, tokens)) => Some(time(cfg.warmup, cfg.repeats.min(3), b, || {
                let mut tape = Tape::new();
                let p = store.bind(&mut tape, false);
                let x = tape.constant(tokens.clone());
                let (layers, _) = encode(&mut tape, &p, ecfg, x, Some(&parts))?;
                std::hint::black_box(tape.value(layers.last()));
                Ok(())
            })?),
            None => None,
        };
        rows.push(BenchRow {
            ratio,
            masked: m,
            images_per_second: ips,
            score_entries_per_image: expected,
            measured_entries_per_image: measured,
            speedup_vs_ratio0: 0.0,
            encoder_images_per_second: encoder_ips,
        });
    }
    let base = rows
        .iter()
        .find(|r| r.ratio == 0.0)
        .map(|r| r.images_per_second)
        .expect("baseline ratio present");
    for r in &mut rows {
        r.speedup_vs_ratio0 = r.images_per_second / base;
    }
    Ok(BenchReport {
        config: cfg.clone(),
        rows,
    })
}

impl BenchReport {
    pub const CSV_HEADER: &'static str =
        "masking_ratio,masked_tokens,images_per_second,score_entries_per_image,speedup_vs_ratio0,encoder_images_per_second";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.3},{},{:.4},{}\n",
                r.ratio,
                r.masked,
                r.images_per_second,
                r.score_entries_per_image,
                r.speedup_vs_ratio0,
                r.encoder_images_per_second.map_or(String::new(), |v| format!("{v:.3}"))
            ));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let c = &self.config;
        let mut s = format!(
            "attention kernel: n={} d={} heads={} batch={} repeats={}\n{:>6} {:>7} {:>12} {:>14} {:>8} {:>14}\n",
            c.tokens, c.dim, c.heads, c.batch, c.repeats, "ratio", "masked", "img/s", "scores/img", "speedup", "encoder img/s"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:>6.2} {:>7} {:>12.2} {:>14} {:>7.2}x {:>14}\n",
                r.ratio,
                r.masked,
                r.images_per_second,
                r.score_entries_per_image,
                r.speedup_vs_ratio0,
                r.encoder_images_per_second.map_or("-".to_string(), |v| format!("{v:.2}"))
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchConfig {
        BenchConfig {
            tokens: 17,
            dim: 16,
            heads: 2,
            batch: 2,
            ratios: vec![0.0, 0.5],
            repeats: 2,
            warmup: 0,
            encoder_depth: 1,
            seed: 0,
        }
    }

    #[test]
    fn entries_follow_the_formula() {
        let r = bench_attention(&small()).unwrap();
        for row in &r.rows {
            assert_eq!(row.score_entries_per_image, (17 * (17 - row.masked)) as u64);
            assert_eq!(row.measured_entries_per_image, row.score_entries_per_image);
            assert!(row.encoder_images_per_second.unwrap() > 0.0);
        }
        assert_eq!(r.rows[0].speedup_vs_ratio0, 1.0);
        assert_eq!(r.rows[1].masked, 8);
    }

    #[test]
    fn baseline_only() {
        let cfg = BenchConfig { ratios: vec![0.0], encoder_depth: 0, ..small() };
        let r = bench_attention(&cfg).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.rows[0].speedup_vs_ratio0, 1.0);
        assert_eq!(r.to_csv().lines().count(), 2);
    }

    #[test]
    fn vit_small_token_counts() {
        assert_eq!(masked_count(197, 0.75), 147);
        assert_eq!(masked_count(197, 0.5), 98);
        assert_eq!(score_entry_count(197, 147).unwrap().0, 9850);
    }

    #[test]
    fn missing_baseline_is_rejected() {
        let cfg = BenchConfig { ratios: vec![0.5], ..small() };
        assert!(matches!(bench_attention(&cfg), Err(Error::Parameter(_))));
    }
}
