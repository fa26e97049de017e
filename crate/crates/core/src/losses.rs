//! Masked reconstruction, clustering and ME-MAX losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Normalisation of the masked L1 loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskLossMode {
    /// Sum over crops, images and masked pixels, divided by the number of
    /// masked elements (0 when nothing is masked).
    #[default]
    Mean,
    /// Plain sum over crops, images and masked pixels.
    Sum,
}

/// One global crop's reconstruction target.
pub struct ReconTarget<'a> {
    /// Clean crop `[B, C, H, W]`.
    pub clean: &'a Tensor,
    /// Head output, same shape as `clean`.
    pub recon: Var,
    /// Pixel mask `[B, H, W]`, true where masked.
    pub mask: &'a [bool],
}

/// Masked L1 loss `Σ_g Σ_i Σ_{j,k} M_i(j,k)·|x − x̂|`, summed over channels.
pub fn l_mask(tape: &mut Tape, targets: &[ReconTarget<'_>], mode: MaskLossMode) -> Result<Var> {
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for t in targets {
        let s = t.clean.shape();
        if s.len() != 4 || tape.shape(t.recon) != s || t.mask.len() != s[0] * s[2] * s[3] {
            return Err(Error::Dimension {
                op: "l_mask",
                lhs: s.to_vec(),
                rhs: tape.shape(t.recon).to_vec(),
            });
        }
        let (c, hw) = (s[1], s[2] * s[3]);
        let weights = Tensor::from_fn(s, |i| {
            let (b, px) = (i / (c * hw), i % hw);
            if t.mask[b * hw + px] {
                1.0
            } else {
                0.0
            }
        });
        count += t.mask.iter().filter(|&&m| m).count() * c;
        let clean = tape.constant(t.clean.clone());
        let diff = tape.sub(t.recon, clean)?;
        let diff = tape.abs(diff);
        let w = tape.constant(weights);
        let masked = tape.mul(diff, w)?;
        let s = tape.sum(masked);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let total = match total {
        Some(t) => t,
        None => return Ok(tape.constant(Tensor::scalar(0.0))),
    };
    Ok(match mode {
        MaskLossMode::Sum => total,
        MaskLossMode::Mean if count == 0 => tape.scale(total, 0.0),
        MaskLossMode::Mean => tape.scale(total, 1.0 / count as f64),
    })
}

/// `Σ_rows H(t, s) = −Σ_rows Σ_k t_k ln s_k`, with `teacher` treated as a
/// constant. Shapes must match; the last axis is the distribution.
pub fn cross_entropy_sum(tape: &mut Tape, teacher: &Tensor, student: Var) -> Result<Var> {
    if tape.shape(student) != teacher.shape() {
        return Err(Error::Dimension {
            op: "cross_entropy",
            lhs: teacher.shape().to_vec(),
            rhs: tape.shape(student).to_vec(),
        });
    }
    let t = tape.constant(teacher.clone());
    let log_s = tape.log(student);
    let prod = tape.mul(log_s, t)?;
    let s = tape.sum(prod);
    Ok(tape.neg(s))
}

fn rows_of(shape: &[usize]) -> usize {
    shape[..shape.len().saturating_sub(1)].iter().product()
}

/// Class clustering loss: cross pairs between the two global views plus
/// both teacher views against every local crop, over `(M+2)·B`.
pub fn l_clust_class(
    tape: &mut Tape,
    teacher: [&Tensor; 2],
    student: [Var; 2],
    locals: &[Var],
) -> Result<Var> {
    let b = rows_of(teacher[0].shape());
    let mut terms = vec![
        cross_entropy_sum(tape, teacher[0], student[1])?,
        cross_entropy_sum(tape, teacher[1], student[0])?,
    ];
    for &t in &teacher {
        for &loc in locals {
            terms.push(cross_entropy_sum(tape, t, loc)?);
        }
    }
    let total = sum_vars(tape, &terms)?;
    Ok(tape.scale(total, 1.0 / ((locals.len() + 2) * b) as f64))
}

/// Patch clustering loss: same-view per-patch cross entropy over `2·N·B`.
/// Distributions are `[B, N, K]`.
pub fn l_clust_patch(tape: &mut Tape, teacher: [&Tensor; 2], student: [Var; 2]) -> Result<Var> {
    let rows = rows_of(teacher[0].shape());
    let a = cross_entropy_sum(tape, teacher[0], student[0])?;
    let b = cross_entropy_sum(tape, teacher[1], student[1])?;
    let total = tape.add(a, b)?;
    Ok(tape.scale(total, 1.0 / (2 * rows) as f64))
}

/// Entropy of the mean of all rows of `dists` (each `[.., K]`).
pub fn mean_entropy(tape: &mut Tape, dists: &[Var]) -> Result<Var> {
    let k = *tape.shape(dists[0]).last().ok_or(Error::Dimension {
        op: "mean_entropy",
        lhs: vec![],
        rhs: vec![],
    })?;
    let flat: Vec<Var> = dists
        .iter()
        .map(|&d| {
            let rows = rows_of(tape.shape(d));
            tape.reshape(d, &[rows, k])
        })
        .collect::<Result<_>>()?;
    let all = if flat.len() == 1 { flat[0] } else { tape.concat(&flat, 0)? };
    let p_bar = tape.mean_axis(all, 0)?;
    let log_p = tape.log(p_bar);
    let plogp = tape.mul(p_bar, log_p)?;
    let s = tape.sum(plogp);
    Ok(tape.neg(s))
}

/// `−(α₁·H(p̄) + α₂·H(p̄_patch))`, with `p̄` the mean of every student class
/// distribution (both globals and all locals) and `p̄_patch` the mean of
/// every student patch distribution.
pub fn memax(tape: &mut Tape, class: &[Var], patch: &[Var], alpha1: f64, alpha2: f64) -> Result<Var> {
    memax_with_entropy(tape, class, patch, alpha1, alpha2).map(|(loss, _)| loss)
}

/// [`memax`] together with `H(p̄)` of the class distributions.
pub fn memax_with_entropy(
    tape: &mut Tape,
    class: &[Var],
    patch: &[Var],
    alpha1: f64,
    alpha2: f64,
) -> Result<(Var, Var)> {
    let hc = mean_entropy(tape, class)?;
    let hp = mean_entropy(tape, patch)?;
    let a = tape.scale(hc, -alpha1);
    let b = tape.scale(hp, -alpha2);
    Ok((tape.add(a, b)?, hc))
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// The four training loss components on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l_mask: Var,
    pub l_clust_class: Var,
    pub l_clust_patch: Var,
    pub l_memax: Var,
}

/// Scalar values of the loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub l_mask: f64,
    pub l_clust_class: f64,
    pub l_clust_patch: f64,
    pub l_memax: f64,
}

impl LossValues {
    pub fn total(&self) -> f64 {
        self.l_mask + self.l_clust_class + self.l_clust_patch + self.l_memax
    }

    pub fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("l_mask", self.l_mask),
            ("l_clust_class", self.l_clust_class),
            ("l_clust_patch", self.l_clust_patch),
            ("l_memax", self.l_memax),
        ]
    }

    /// First non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.named().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> Result<LossValues> {
        Ok(LossValues {
            l_mask: tape.value(self.l_mask).item()?,
            l_clust_class: tape.value(self.l_clust_class).item()?,
            l_clust_patch: tape.value(self.l_clust_patch).item()?,
            l_memax: tape.value(self.l_memax).item()?,
        })
    }
}

/// `L_Mask + L_clust_class + L_clust_patch + L_memax`. A non-finite
/// component is reported as a training fault at `step`.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, step: u64) -> Result<(Var, LossValues)> {
    let values = terms.values(tape)?;
    if let Some(component) = values.non_finite() {
        return Err(Error::TrainingFault {
            step,
            component,
            last_checkpoint: None,
        });
    }
    let total = sum_vars(
        tape,
        &[terms.l_mask, terms.l_clust_class, terms.l_clust_patch, terms.l_memax],
    )?;
    Ok((total, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let k = *shape.last().unwrap();
        let mut t = Tensor::from_fn(shape, |_| rng.gen_range(0.01..1.0));
        for row in t.data_mut().chunks_mut(k) {
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
        }
        t
    }

    fn h(t: &[f64], s: &[f64]) -> f64 {
        -t.iter().zip(s).map(|(a, b)| a * b.max(1e-12).ln()).sum::<f64>()
    }

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    #[test]
    fn l_mask_examples() {
        let clean = Tensor::zeros(&[1, 1, 2, 2]);
        let mut tape = Tape::new();
        let recon = tape.constant(Tensor::from_vec(vec![0.5, 1.0, -2.0, 3.0]).reshaped(&[1, 1, 2, 2]).unwrap());
        let none = [false; 4];
        let t = [ReconTarget { clean: &clean, recon, mask: &none }];
        let v = l_mask(&mut tape, &t, MaskLossMode::Sum).unwrap();
        assert_eq!(scalar(&tape, v), 0.0);
        let v = l_mask(&mut tape, &t, MaskLossMode::Mean).unwrap();
        assert_eq!(scalar(&tape, v), 0.0);

        let one = [true, false, false, false];
        let t = [ReconTarget { clean: &clean, recon, mask: &one }];
        let v = l_mask(&mut tape, &t, MaskLossMode::Sum).unwrap();
        assert_eq!(scalar(&tape, v), 0.5);

        let perfect = tape.constant(clean.clone());
        let all = [true; 4];
        let t = [ReconTarget { clean: &clean, recon: perfect, mask: &all }];
        let v = l_mask(&mut tape, &t, MaskLossMode::Sum).unwrap();
        assert_eq!(scalar(&tape, v), 0.0);
    }

    #[test]
    fn l_mask_matches_loop_and_ignores_unmasked_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (b, c, hh, ww) = (2, 3, 4, 4);
        let cleans: Vec<Tensor> = (0..2).map(|_| Tensor::from_fn(&[b, c, hh, ww], |_| rng.gen())).collect();
        let recons: Vec<Tensor> = (0..2).map(|_| Tensor::from_fn(&[b, c, hh, ww], |_| rng.gen())).collect();
        let masks: Vec<Vec<bool>> = (0..2).map(|_| (0..b * hh * ww).map(|_| rng.gen_bool(0.4)).collect()).collect();
        let mut want = 0.0;
        let mut count = 0;
        for g in 0..2 {
            for i in 0..b {
                for ch in 0..c {
                    for px in 0..hh * ww {
                        if masks[g][i * hh * ww + px] {
                            let idx = (i * c + ch) * hh * ww + px;
                            want += (cleans[g].data()[idx] - recons[g].data()[idx]).abs();
                            count += 1;
                        }
                    }
                }
            }
        }
        let mut tape = Tape::new();
        let rv: Vec<Var> = recons.iter().map(|r| tape.leaf(r.clone(), true)).collect();
        let targets: Vec<ReconTarget> = (0..2)
            .map(|g| ReconTarget { clean: &cleans[g], recon: rv[g], mask: &masks[g] })
            .collect();
        let sum = l_mask(&mut tape, &targets, MaskLossMode::Sum).unwrap();
        assert!((scalar(&tape, sum) - want).abs() < 1e-10);
        let mean = l_mask(&mut tape, &targets, MaskLossMode::Mean).unwrap();
        assert!((scalar(&tape, mean) - want / count as f64).abs() < 1e-12);
        tape.backward(sum).unwrap();
        for g in 0..2 {
            let grad = tape.grad(rv[g]).unwrap();
            for (idx, &gv) in grad.data().iter().enumerate() {
                let (i, px) = (idx / (c * hh * ww), idx % (hh * ww));
                if !masks[g][i * hh * ww + px] {
                    assert_eq!(gv, 0.0);
                } else {
                    assert_eq!(gv.abs(), 1.0);
                }
            }
        }
    }

    #[test]
    fn cross_entropy_of_a_distribution_with_itself_is_its_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let p = dist(&mut rng, &[1, 7]);
            let mut tape = Tape::new();
            let s = tape.constant(p.clone());
            let ce = cross_entropy_sum(&mut tape, &p, s).unwrap();
            let ent = mean_entropy(&mut tape, &[s]).unwrap();
            assert!((scalar(&tape, ce) - scalar(&tape, ent)).abs() <= 1e-9);
        }
    }

    #[test]
    fn class_loss_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (b, k, m) = (3, 5, 2);
        let p = dist(&mut rng, &[1, k]);
        let row = p.data().to_vec();
        let hp = h(&row, &row);
        let all = Tensor::from_fn(&[b, k], |i| row[i % k]);
        let mut tape = Tape::new();
        let s = tape.constant(all.clone());
        let locals = vec![s; m];
        let v = l_clust_class(&mut tape, [&all, &all], [s, s], &locals).unwrap();
        // 2 + 2M cross-entropy terms per image, each equal to H(p)
        let want = (2 + 2 * m) as f64 * hp / (m + 2) as f64;
        assert!((scalar(&tape, v) - want).abs() < 1e-12);

        let one_hot = Tensor::from_fn(&[b, k], |i| if i % k == 1 { 1.0 } else { 0.0 });
        let s = tape.constant(one_hot.clone());
        let v = l_clust_class(&mut tape, [&one_hot, &one_hot], [s, s], &[s]).unwrap();
        assert_eq!(scalar(&tape, v), 0.0);
    }

    #[test]
    fn class_loss_matches_term_by_term_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, k, m) = (2, 6, 2);
        let t1 = dist(&mut rng, &[b, k]);
        let t2 = dist(&mut rng, &[b, k]);
        let s1 = dist(&mut rng, &[b, k]);
        let s2 = dist(&mut rng, &[b, k]);
        let locs: Vec<Tensor> = (0..m).map(|_| dist(&mut rng, &[b, k])).collect();
        let mut want = 0.0;
        for i in 0..b {
            let r = |t: &Tensor| t.data()[i * k..(i + 1) * k].to_vec();
            want += h(&r(&t1), &r(&s2)) + h(&r(&t2), &r(&s1));
            for l in &locs {
                want += h(&r(&t1), &r(l));
            }
            for l in &locs {
                want += h(&r(&t2), &r(l));
            }
        }
        want /= ((m + 2) * b) as f64;
        let mut tape = Tape::new();
        let sv = [tape.constant(s1), tape.constant(s2)];
        let lv: Vec<Var> = locs.into_iter().map(|l| tape.constant(l)).collect();
        let v = l_clust_class(&mut tape, [&t1, &t2], sv, &lv).unwrap();
        assert!((scalar(&tape, v) - want).abs() <= 1e-10);
    }

    #[test]
    fn teacher_side_receives_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_fn(&[2, 4], |_| rng.gen()), true);
        let teacher = tape.softmax(logits, 1, 0.04).unwrap();
        let t = tape.value(teacher).clone();
        let s = tape.leaf(dist(&mut rng, &[2, 4]), true);
        let v = l_clust_class(&mut tape, [&t, &t], [s, s], &[]).unwrap();
        tape.backward(v).unwrap();
        assert!(tape.grad(logits).is_none());
        assert!(tape.grad(s).is_some());
    }

    #[test]
    fn patch_loss_cases() {
        let mut tape = Tape::new();
        let u = Tensor::full(&[2, 3, 4], 0.25);
        let uv = tape.constant(u.clone());
        let v = l_clust_patch(&mut tape, [&u, &u], [uv, uv]).unwrap();
        assert!((scalar(&tape, v) - 4f64.ln()).abs() < 1e-12);
        assert!((scalar(&tape, v) - 1.3863).abs() < 1e-4);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, n, k) = (2, 3, 5);
        let t = [dist(&mut rng, &[b, n, k]), dist(&mut rng, &[b, n, k])];
        let s = [dist(&mut rng, &[b, n, k]), dist(&mut rng, &[b, n, k])];
        let mut want = 0.0;
        let mut same = 0.0;
        for g in 0..2 {
            for i in 0..b {
                for p in 0..n {
                    let r = |x: &Tensor| x.data()[(i * n + p) * k..(i * n + p + 1) * k].to_vec();
                    want += h(&r(&t[g]), &r(&s[g]));
                    same += h(&r(&s[g]), &r(&s[g]));
                }
            }
        }
        let sv = [tape.constant(s[0].clone()), tape.constant(s[1].clone())];
        let v = l_clust_patch(&mut tape, [&t[0], &t[1]], sv).unwrap();
        assert!((scalar(&tape, v) - want / (2 * n * b) as f64).abs() <= 1e-10);
        let v = l_clust_patch(&mut tape, [&s[0], &s[1]], sv).unwrap();
        assert!((scalar(&tape, v) - same / (2 * n * b) as f64).abs() <= 1e-10);
    }

    #[test]
    fn memax_cases() {
        let mut tape = Tape::new();
        let k = 8;
        let u = tape.constant(Tensor::full(&[3, k], 1.0 / k as f64));
        let up = tape.constant(Tensor::full(&[3, 2, k], 1.0 / k as f64));
        let v = memax(&mut tape, &[u, u, u], &[up, up], 1.0, 0.1).unwrap();
        assert!((scalar(&tape, v) + 1.1 * (k as f64).ln()).abs() < 1e-12);

        let oh = tape.constant(Tensor::from_fn(&[3, k], |i| if i % k == 2 { 1.0 } else { 0.0 }));
        let ohp = tape.constant(Tensor::from_fn(&[3, 2, k], |i| if i % k == 2 { 1.0 } else { 0.0 }));
        let v = memax(&mut tape, &[oh, oh], &[ohp, ohp], 1.0, 0.1).unwrap();
        assert_eq!(scalar(&tape, v), 0.0);
    }

    #[test]
    fn memax_matches_mean_distribution_oracle_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (b, k, n) = (2, 5, 3);
        let class: Vec<Tensor> = (0..4).map(|_| dist(&mut rng, &[b, k])).collect();
        let patch: Vec<Tensor> = (0..2).map(|_| dist(&mut rng, &[b, n, k])).collect();
        let mean = |ts: &[Tensor]| {
            let rows: usize = ts.iter().map(|t| t.numel() / k).sum();
            let mut m = vec![0.0; k];
            for t in ts {
                for (j, v) in t.data().iter().enumerate() {
                    m[j % k] += v / rows as f64;
                }
            }
            m
        };
        let (pc, pp) = (mean(&class), mean(&patch));
        let want = -(1.0 * h(&pc, &pc) + 0.1 * h(&pp, &pp));
        let mut tape = Tape::new();
        let cv: Vec<Var> = class.into_iter().map(|t| tape.constant(t)).collect();
        let pv: Vec<Var> = patch.into_iter().map(|t| tape.constant(t)).collect();
        let v = memax(&mut tape, &cv, &pv, 1.0, 0.1).unwrap();
        let v = scalar(&tape, v);
        assert!((v - want).abs() <= 1e-10);
        assert!(v <= 0.0 && v >= -1.1 * (k as f64).ln());
    }

    #[test]
    fn total_is_the_plain_sum_and_rejects_non_finite() {
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape, v: f64| tape.constant(Tensor::scalar(v));
        let terms = LossTerms {
            l_mask: mk(&mut tape, 1.0),
            l_clust_class: mk(&mut tape, 2.0),
            l_clust_patch: mk(&mut tape, 3.0),
            l_memax: mk(&mut tape, -0.5),
        };
        let (t, values) = total_loss(&mut tape, &terms, 0).unwrap();
        assert_eq!(scalar(&tape, t), 5.5);
        assert_eq!(values.total(), 5.5);

        let z = mk(&mut tape, 0.0);
        let zeros = LossTerms { l_mask: z, l_clust_class: z, l_clust_patch: z, l_memax: z };
        let (t, _) = total_loss(&mut tape, &zeros, 0).unwrap();
        assert_eq!(scalar(&tape, t), 0.0);

        let bad = LossTerms { l_clust_patch: mk(&mut tape, f64::NAN), ..terms };
        match total_loss(&mut tape, &bad, 17) {
            Err(Error::TrainingFault { step: 17, component: "l_clust_patch", .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
