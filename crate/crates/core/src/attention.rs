//! Split self/cross attention for partially masked token sequences.
//!
//! Unmasked tokens attend among themselves; masked tokens act only as
//! queries against the unmasked keys and values. The two result blocks are
//! concatenated (`[self; cross]`) and scattered back to the original token
//! order so residual connections stay aligned. Only `n·(n−m)` score entries
//! are materialised per head instead of `n²`.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::parallel::map_indices;
use crate::tensor::{BackwardRule, Tape, Tensor, Var};

/// Split of `0..n_total` into unmasked and masked token positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenPartition {
    n_total: usize,
    unmasked: Vec<usize>,
    masked: Vec<usize>,
}

impl TokenPartition {
    /// Validates and builds a partition from explicit index lists.
    pub fn new(n_total: usize, unmasked: Vec<usize>, masked: Vec<usize>) -> Result<Self> {
        if unmasked.first() != Some(&0) {
            return Err(Error::Contract(
                "token 0 ([CLS]) must be the first unmasked index".into(),
            ));
        }
        for list in [&unmasked, &masked] {
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Contract(
                    "partition index lists must be strictly increasing".into(),
                ));
            }
        }
        let mut seen = vec![false; n_total];
        for &i in unmasked.iter().chain(&masked) {
            if i >= n_total {
                return Err(Error::Index {
                    op: "TokenPartition",
                    index: i,
                    extent: n_total,
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!(
                    "token {i} is both masked and unmasked"
                )));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Contract(
                "partition does not cover every token".into(),
            ));
        }
        Ok(Self {
            n_total,
            unmasked,
            masked,
        })
    }

    /// `mask[i] == true` marks token `i` as masked.
    pub fn from_mask(mask: &[bool]) -> Result<Self> {
        let (masked, unmasked): (Vec<usize>, Vec<usize>) = (0..mask.len()).partition(|&i| mask[i]);
        Self::new(mask.len(), unmasked, masked)
    }

    /// No masked tokens.
    pub fn unmasked_only(n_total: usize) -> Self {
        Self {
            n_total,
            unmasked: (0..n_total).collect(),
            masked: Vec::new(),
        }
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn unmasked(&self) -> &[usize] {
        &self.unmasked
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn masked_count(&self) -> usize {
        self.masked.len()
    }

    /// Original token index of each row of the concatenated `[self; cross]`
    /// block.
    pub fn concat_order(&self) -> Vec<usize> {
        self.unmasked.iter().chain(&self.masked).copied().collect()
    }
}

/// Score entries for one head: `(n·(n−m), n²)`.
pub fn score_entry_count(n: usize, m: usize) -> Result<(u64, u64)> {
    if m >= n {
        return Err(Error::Parameter(format!(
            "masked count {m} must be below token count {n}"
        )));
    }
    let (n, m) = (n as u64, m as u64);
    Ok((n * (n - m), n * n))
}

/// Work recorded by attention calls.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionStats {
    /// Sequences (one per sample per call) processed with the split kernel.
    pub efficient_sequences: u64,
    /// Sequences processed with dense attention.
    pub standard_sequences: u64,
    /// Score entries actually materialised, summed over samples and heads.
    pub score_entries: u64,
}

impl std::ops::AddAssign for AttentionStats {
    fn add_assign(&mut self, o: Self) {
        self.efficient_sequences += o.efficient_sequences;
        self.standard_sequences += o.standard_sequences;
        self.score_entries += o.score_entries;
    }
}

/// Dense attention of `rows` queries against `keys` keys, all contiguous
/// `[.., dh]`. Writes outputs and (optionally) the probability matrix.
fn dense_block<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    dh: usize,
    scale: T,
    out: &mut [T],
    mut probs: Option<&mut [T]>,
) {
    let keys = k.len() / dh.max(1);
    let mut row = vec![T::zero(); keys];
    for (r, (qr, orow)) in q.chunks(dh).zip(out.chunks_mut(dh)).enumerate() {
        let mut max = T::neg_infinity();
        for (j, kr) in k.chunks(dh).enumerate() {
            let s = qr.iter().zip(kr).fold(T::zero(), |a, (&x, &y)| a + x * y) * scale;
            row[j] = s;
            if s > max {
                max = s;
            }
        }
        let mut z = T::zero();
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            z = z + *s;
        }
        orow.iter_mut().for_each(|o| *o = T::zero());
        for (j, vr) in v.chunks(dh).enumerate() {
            let p = row[j] / z;
            row[j] = p;
            for (o, &x) in orow.iter_mut().zip(vr) {
                *o = *o + p * x;
            }
        }
        if let Some(pb) = probs.as_deref_mut() {
            pb[r * keys..(r + 1) * keys].copy_from_slice(&row);
        }
    }
}

fn gather<T: Copy>(src: &[T], idx: &[usize], dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(idx.len() * dh);
    for &i in idx {
        out.extend_from_slice(&src[i * dh..(i + 1) * dh]);
    }
    out
}

/// Result of attending one `(sample, head)` sequence.
struct HeadResult<T> {
    out: Vec<T>,
    /// Row-major `[rows in concat order, keys]`.
    probs: Vec<T>,
    entries: u64,
}

/// One sequence `[n, dh]`. With a partition, runs the self block (unmasked
/// queries) and cross block (masked queries) against the unmasked keys,
/// concatenates them and scatters rows back to token order.
fn attend_sequence<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    dh: usize,
    partition: Option<&TokenPartition>,
    keep_probs: bool,
) -> HeadResult<T> {
    let n = q.len() / dh;
    let scale = T::from(1.0 / (dh as f64).sqrt()).unwrap_or_else(T::one);
    let Some(part) = partition else {
        let mut out = vec![T::zero(); n * dh];
        let mut probs = if keep_probs { vec![T::zero(); n * n] } else { Vec::new() };
        dense_block(q, k, v, dh, scale, &mut out, keep_probs.then_some(&mut probs[..]));
        return HeadResult {
            out,
            probs,
            entries: (n * n) as u64,
        };
    };
    let (un, ma) = (part.unmasked(), part.masked());
    let u = un.len();
    let k_un = gather(k, un, dh);
    let v_un = gather(v, un, dh);
    let q_un = gather(q, un, dh);
    let q_ma = gather(q, ma, dh);

    let mut concat = vec![T::zero(); n * dh];
    let mut probs = if keep_probs { vec![T::zero(); n * u] } else { Vec::new() };
    {
        let (self_out, cross_out) = concat.split_at_mut(u * dh);
        let (self_p, cross_p) = if keep_probs {
            let (a, b) = probs.split_at_mut(u * u);
            (Some(a), Some(b))
        } else {
            (None, None)
        };
        dense_block(&q_un, &k_un, &v_un, dh, scale, self_out, self_p);
        dense_block(&q_ma, &k_un, &v_un, dh, scale, cross_out, cross_p);
    }
    let mut out = vec![T::zero(); n * dh];
    for (r, &tok) in part.concat_order().iter().enumerate() {
        out[tok * dh..(tok + 1) * dh].copy_from_slice(&concat[r * dh..(r + 1) * dh]);
    }
    HeadResult {
        out,
        probs,
        entries: (u * u + ma.len() * u) as u64,
    }
}

fn check_partitions(partitions: Option<&[TokenPartition]>, batch: usize, n: usize) -> Result<()> {
    if let Some(parts) = partitions {
        if parts.len() != batch {
            return Err(Error::Contract(format!(
                "{} partitions for a batch of {batch}",
                parts.len()
            )));
        }
        if let Some(p) = parts.iter().find(|p| p.n_total() != n) {
            return Err(Error::Contract(format!(
                "partition covers {} tokens but the sequence has {n}",
                p.n_total()
            )));
        }
    }
    Ok(())
}

/// Forward-only attention over `[batch, heads, n, dh]` buffers in any float
/// precision. Returns the output and the number of score entries computed.
pub fn attention_forward<T: Float + Send + Sync>(
    q: &[T],
    k: &[T],
    v: &[T],
    shape: [usize; 4],
    partitions: Option<&[TokenPartition]>,
) -> Result<(Vec<T>, u64)> {
    let [b, h, n, dh] = shape;
    if q.len() != b * h * n * dh || k.len() != q.len() || v.len() != q.len() {
        return Err(Error::Dimension {
            op: "attention_forward",
            lhs: shape.to_vec(),
            rhs: vec![q.len(), k.len(), v.len()],
        });
    }
    check_partitions(partitions, b, n)?;
    let block = n * dh;
    let heads: Vec<HeadResult<T>> = map_indices(b * h, b * h * n * n * dh, |pair| {
        let r = pair * block..(pair + 1) * block;
        attend_sequence(
            &q[r.clone()],
            &k[r.clone()],
            &v[r],
            dh,
            partitions.map(|p| &p[pair / h]),
            false,
        )
    });
    let entries = heads.iter().map(|r| r.entries).sum();
    let mut out = Vec::with_capacity(q.len());
    for r in heads {
        out.extend(r.out);
    }
    Ok((out, entries))
}

struct AttentionBackward {
    heads: usize,
    partitions: Option<Vec<TokenPartition>>,
    probs: Vec<Vec<f64>>,
}

impl BackwardRule for AttentionBackward {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let shape = inputs[0].shape();
        let (b, n, dh) = (shape[0], shape[2], shape[3]);
        let h = self.heads;
        let block = n * dh;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qa, ka, va, ga) = (inputs[0].data(), inputs[1].data(), inputs[2].data(), grad.data());
        let blocks = map_indices(b * h, b * h * n * n * dh, |pair| {
            let r = pair * block..(pair + 1) * block;
            let (q, k, v, g) = (&qa[r.clone()], &ka[r.clone()], &va[r.clone()], &ga[r]);
            let (order, keys): (Vec<usize>, Vec<usize>) = match &self.partitions {
                Some(p) => {
                    let p = &p[pair / h];
                    (p.concat_order(), p.unmasked().to_vec())
                }
                None => ((0..n).collect(), (0..n).collect()),
            };
            let probs = &self.probs[pair];
            let u = keys.len();
            let mut dq = vec![0.0; block];
            let mut dk = vec![0.0; block];
            let mut dv = vec![0.0; block];
            let mut dp = vec![0.0; u];
            for (r, &tok) in order.iter().enumerate() {
                let pr = &probs[r * u..(r + 1) * u];
                let go = &g[tok * dh..(tok + 1) * dh];
                for (j, &key) in keys.iter().enumerate() {
                    dp[j] = crate::tensor::kernels::dot(go, &v[key * dh..(key + 1) * dh]);
                }
                let mean: f64 = pr.iter().zip(&dp).map(|(p, d)| p * d).sum();
                let qrow = &q[tok * dh..(tok + 1) * dh];
                for (j, &key) in keys.iter().enumerate() {
                    let ds = pr[j] * (dp[j] - mean) * scale;
                    let krow = &k[key * dh..(key + 1) * dh];
                    for c in 0..dh {
                        dq[tok * dh + c] += ds * krow[c];
                        dk[key * dh + c] += ds * qrow[c];
                        dv[key * dh + c] += pr[j] * go[c];
                    }
                }
            }
            (dq, dk, dv)
        });
        let mut dq = Vec::with_capacity(b * h * block);
        let mut dk = Vec::with_capacity(b * h * block);
        let mut dv = Vec::with_capacity(b * h * block);
        for (a, c, e) in blocks {
            dq.extend(a);
            dk.extend(c);
            dv.extend(e);
        }
        let s = shape.to_vec();
        Ok(vec![
            Some(Tensor::from_parts(s.clone(), dq)),
            Some(Tensor::from_parts(s.clone(), dk)),
            Some(Tensor::from_parts(s, dv)),
        ])
    }
}

/// Multi-head attention on pre-projected `q, k, v: [B, heads, n, dh]`.
///
/// With `partitions` (one per sample) the split self/cross kernel runs;
/// without, dense attention. Scores are scaled by `1/√dh`.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    partitions: Option<&[TokenPartition]>,
) -> Result<(Var, AttentionStats)> {
    let shape = tape.shape(q).to_vec();
    if shape.len() != 4 || tape.shape(k) != shape.as_slice() || tape.shape(v) != shape.as_slice() {
        return Err(Error::Dimension {
            op: "multi_head_attention",
            lhs: shape,
            rhs: tape.shape(k).to_vec(),
        });
    }
    let (b, h, n, dh) = (shape[0], shape[1], shape[2], shape[3]);
    check_partitions(partitions, b, n)?;
    let block = n * dh;
    let (qa, ka, va) = (tape.value(q).data(), tape.value(k).data(), tape.value(v).data());
    let heads: Vec<HeadResult<f64>> = map_indices(b * h, b * h * n * n * dh, |pair| {
        let r = pair * block..(pair + 1) * block;
        attend_sequence(
            &qa[r.clone()],
            &ka[r.clone()],
            &va[r],
            dh,
            partitions.map(|p| &p[pair / h]),
            true,
        )
    });
    let mut stats = AttentionStats::default();
    if partitions.is_some() {
        stats.efficient_sequences = b as u64;
    } else {
        stats.standard_sequences = b as u64;
    }
    let mut out = Vec::with_capacity(b * h * block);
    let mut probs = Vec::with_capacity(b * h);
    for r in heads {
        stats.score_entries += r.entries;
        out.extend(r.out);
        probs.push(r.probs);
    }
    let rule = AttentionBackward {
        heads: h,
        partitions: partitions.map(<[TokenPartition]>::to_vec),
        probs,
    };
    let value = Tensor::from_parts(shape, out);
    Ok((tape.custom(&[q, k, v], value, Box::new(rule)), stats))
}

/// Projection weights of one attention layer (`[d, d]` matrices, `[d]`
/// biases).
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
    pub q_bias: Option<Var>,
    pub k_bias: Option<Var>,
    pub v_bias: Option<Var>,
    pub o_bias: Option<Var>,
}

impl AttentionWeights {
    pub fn unbiased(q: Var, k: Var, v: Var, o: Var) -> Self {
        Self {
            q,
            k,
            v,
            o,
            q_bias: None,
            k_bias: None,
            v_bias: None,
            o_bias: None,
        }
    }
}

pub struct AttentionOutput {
    pub output: Var,
    /// Concatenated head outputs before the output projection, `[B, n, d]`.
    pub pre_projection: Var,
    pub stats: AttentionStats,
}

fn project(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Full attention layer on `x: [B, n, d]`: projections, per-head attention
/// (split kernel when `partitions` is given), head merge, output projection.
/// The head split happens before partitioning; partitions are shared by all
/// heads of a sample.
pub fn attention_layer(
    tape: &mut Tape,
    x: Var,
    w: &AttentionWeights,
    heads: usize,
    partitions: Option<&[TokenPartition]>,
) -> Result<AttentionOutput> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::Dimension {
            op: "attention_layer",
            lhs: s,
            rhs: vec![],
        });
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "embedding width {d} is not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let split = |tape: &mut Tape, wt: Var, bias: Option<Var>| -> Result<Var> {
        let y = project(tape, x, wt, bias)?;
        let y = tape.reshape(y, &[b, n, heads, dh])?;
        tape.permute(y, &[0, 2, 1, 3])
    };
    let q = split(tape, w.q, w.q_bias)?;
    let k = split(tape, w.k, w.k_bias)?;
    let v = split(tape, w.v, w.v_bias)?;
    let (att, stats) = multi_head_attention(tape, q, k, v, partitions)?;
    let merged = tape.permute(att, &[0, 2, 1, 3])?;
    let merged = tape.reshape(merged, &[b, n, d])?;
    let output = project(tape, merged, w.o, w.o_bias)?;
    Ok(AttentionOutput {
        output,
        pre_projection: merged,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn score_counts_match_formula() {
        assert_eq!(score_entry_count(197, 98).unwrap(), (19503, 38809));
        assert_eq!(score_entry_count(10, 0).unwrap(), (100, 100));
        let (eff, std) = score_entry_count(197, 147).unwrap();
        assert_eq!((eff, std), (9850, 38809));
        assert!(((eff as f64 / std as f64) - 0.254).abs() < 1e-3);
        assert!(score_entry_count(5, 5).is_err());
    }

    #[test]
    fn partition_rejects_masked_cls_and_bad_cover() {
        assert!(TokenPartition::from_mask(&[true, false]).is_err());
        assert!(TokenPartition::new(3, vec![0, 1], vec![]).is_err());
        assert!(TokenPartition::new(3, vec![0, 2, 1], vec![]).is_err());
        assert!(TokenPartition::new(3, vec![0, 1], vec![1, 2]).is_err());
        let p = TokenPartition::from_mask(&[false, true, false, true]).unwrap();
        assert_eq!(p.unmasked(), &[0, 2]);
        assert_eq!(p.masked(), &[1, 3]);
        assert_eq!(p.concat_order(), vec![0, 2, 1, 3]);
    }

    #[test]
    fn universe_mismatch_is_a_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let q = tape.constant(rand_tensor(&mut rng, &[1, 1, 4, 2]));
        let parts = vec![TokenPartition::unmasked_only(5)];
        let err = multi_head_attention(&mut tape, q, q, q, Some(&parts)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn single_unmasked_key_copies_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 6;
        let mut tape = Tape::new();
        let q = tape.constant(rand_tensor(&mut rng, &[1, 2, n, 3]));
        let k = tape.constant(rand_tensor(&mut rng, &[1, 2, n, 3]));
        let v = tape.constant(rand_tensor(&mut rng, &[1, 2, n, 3]));
        let mask: Vec<bool> = (0..n).map(|i| i != 0).collect();
        let parts = vec![TokenPartition::from_mask(&mask).unwrap()];
        let (out, stats) = multi_head_attention(&mut tape, q, k, v, Some(&parts)).unwrap();
        let (o, vv) = (tape.value(out).data(), tape.value(v).data());
        for h in 0..2 {
            for i in 0..n {
                for c in 0..3 {
                    let got = o[(h * n + i) * 3 + c];
                    let want = vv[(h * n) * 3 + c];
                    assert!((got - want).abs() < 1e-15);
                }
            }
        }
        assert_eq!(stats.score_entries, 2 * n as u64);
    }

    #[test]
    fn counter_matches_formula_per_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(2..20);
            let b = rng.gen_range(1..4);
            let h = rng.gen_range(1..4);
            let parts: Vec<TokenPartition> = (0..b)
                .map(|_| {
                    let mask: Vec<bool> = (0..n).map(|i| i > 0 && rng.gen_bool(0.6)).collect();
                    TokenPartition::from_mask(&mask).unwrap()
                })
                .collect();
            let data = rand_tensor(&mut rng, &[b, h, n, 2]);
            let (_, entries) = attention_forward(data.data(), data.data(), data.data(), [b, h, n, 2], Some(&parts)).unwrap();
            let want: u64 = parts
                .iter()
                .map(|p| h as u64 * score_entry_count(n, p.masked_count()).unwrap().0)
                .sum();
            assert_eq!(entries, want);
        }
    }

    #[test]
    fn f32_forward_tracks_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = [2, 2, 9, 4];
        let t = rand_tensor(&mut rng, &shape);
        let mask: Vec<bool> = (0..9).map(|i| i % 3 == 1).collect();
        let parts = vec![TokenPartition::from_mask(&mask).unwrap(); 2];
        let (a, _) = attention_forward(t.data(), t.data(), t.data(), shape, Some(&parts)).unwrap();
        let t32: Vec<f32> = t.data().iter().map(|&x| x as f32).collect();
        let (b, _) = attention_forward(&t32, &t32, &t32, shape, Some(&parts)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - *y as f64).abs() < 1e-5);
        }
    }
}
