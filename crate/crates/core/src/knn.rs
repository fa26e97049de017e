//! k-nearest-neighbour probe on frozen, L2-normalised embeddings.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{embed, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const EMBED_CHUNK: usize = 64;

/// Labels predicted for every row of `test: [Nt, d]` by cosine similarity
/// to `train: [Nr, d]` (rows assumed unit norm). Neighbours with equal
/// similarity are taken in training order; vote ties go to the lowest
/// label.
pub fn knn_predict(train: &Tensor, train_labels: &[usize], test: &Tensor, k: usize) -> Result<Vec<usize>> {
    let bad = train.shape().len() != 2 || test.shape().len() != 2;
    if bad || test.shape()[1] != train.shape()[1] || train_labels.len() != train.shape()[0] {
        return Err(Error::Dimension {
            op: "knn_predict",
            lhs: train.shape().to_vec(),
            rhs: test.shape().to_vec(),
        });
    }
    let (nr, d) = (train.shape()[0], train.shape()[1]);
    if k == 0 || k > nr {
        return Err(Error::Parameter(format!("k = {k} must be in 1..={nr}")));
    }
    let classes = train_labels.iter().max().map_or(0, |m| m + 1);
    let preds = test
        .data()
        .chunks(d)
        .map(|q| {
            let mut sims: Vec<(f64, usize)> = train
                .data()
                .chunks(d)
                .enumerate()
                .map(|(i, r)| (r.iter().zip(q).map(|(a, b)| a * b).sum::<f64>(), i))
                .collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![0usize; classes];
            for &(_, i) in &sims[..k] {
                votes[train_labels[i]] += 1;
            }
            let best = *votes.iter().max().expect("at least one class");
            votes.iter().position(|&v| v == best).expect("max exists")
        })
        .collect();
    Ok(preds)
}

pub fn knn_accuracy(train: &Tensor, train_labels: &[usize], test: &Tensor, test_labels: &[usize], k: usize) -> Result<f64> {
    let preds = knn_predict(train, train_labels, test, k)?;
    if preds.len() != test_labels.len() {
        return Err(Error::Dimension {
            op: "knn_accuracy",
            lhs: vec![preds.len()],
            rhs: vec![test_labels.len()],
        });
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds.iter().zip(test_labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Embeddings `[N, d]` of `images` under `params`, in chunks.
pub fn embed_all(params: &ParamStore, cfg: &ModelConfig, images: &[Tensor]) -> Result<Tensor> {
    let d = cfg.encoder.embed_dim;
    let mut data = Vec::with_capacity(images.len() * d);
    for chunk in images.chunks(EMBED_CHUNK) {
        let shape = chunk[0].shape().to_vec();
        let mut flat = Vec::with_capacity(chunk.len() * chunk[0].numel());
        for img in chunk {
            if img.shape() != shape.as_slice() {
                return Err(Error::Dimension {
                    op: "embed_all",
                    lhs: shape,
                    rhs: img.shape().to_vec(),
                });
            }
            flat.extend_from_slice(img.data());
        }
        let batch = Tensor::new([vec![chunk.len()], shape].concat(), flat)?;
        data.extend_from_slice(embed(params, cfg, &batch)?.data());
    }
    Tensor::new(vec![images.len(), d], data)
}

/// Accuracy of a `k`-NN classifier whose reference set is the first
/// `train_count` items of `ds` and whose queries are the rest.
pub fn probe(params: &ParamStore, cfg: &ModelConfig, ds: &Dataset, train_count: usize, k: usize) -> Result<f64> {
    if train_count == 0 || train_count >= ds.len() {
        return Err(Error::Parameter(format!(
            "train split {train_count} must leave both parts of {} items non-empty",
            ds.len()
        )));
    }
    let (train, test) = ds.split_at(train_count);
    let tr = embed_all(params, cfg, &train.images)?;
    let te = embed_all(params, cfg, &test.images)?;
    knn_accuracy(&tr, &train.labels, &te, &test.labels, k)
}
