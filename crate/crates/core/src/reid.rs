//! Re-identification branch: identity classifier and metric losses over the
//! joint representation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which features feed the classifier and the retrieval embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// `v = [f, g]`
    #[default]
    Joint,
    /// resolution-invariant features only
    FOnly,
    /// recovered-HR features only
    GOnly,
}

impl FeatureMode {
    pub fn width(self, d: usize) -> usize {
        match self {
            FeatureMode::Joint => 2 * d,
            FeatureMode::FOnly | FeatureMode::GOnly => d,
        }
    }
}

/// Lower clamp on the true-class probability.
pub const PROB_EPS: f32 = 1e-7;

/// Softmax cross entropy from probabilities `[n, classes]`: mean of
/// `-log p[label]`.
pub fn identity_loss(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let [rows, classes] = probs.shape()[..] else {
        return Err(Error::invalid("loss_id", format!("expected [n, classes], got {:?}", probs.shape())));
    };
    if rows != labels.len() {
        return Err(Error::invalid("loss_id", format!("{rows} predictions but {} labels", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid("loss_id", format!("label {bad} out of range for {classes} classes")));
    }
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * classes + l).collect();
    Ok(probs.gather(&idx)?.clamp(PROB_EPS, 1.0).log().mean().neg())
}

/// Index of the hardest positive and hardest negative for each anchor.
/// Ties resolve to the lowest index.
pub fn mine_batch_hard(dist: &[f32], labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    let n = labels.len();
    debug_assert_eq!(dist.len(), n * n);
    (0..n)
        .map(|i| {
            let row = &dist[i * n..(i + 1) * n];
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..n {
                if j == i {
                    continue;
                }
                if labels[j] == labels[i] {
                    if pos.is_none_or(|p| row[j] > row[p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|q| row[j] < row[q]) {
                    neg = Some(j);
                }
            }
            match (pos, neg) {
                (Some(p), Some(q)) => Ok((p, q)),
                (None, _) => Err(Error::invalid("loss_triplet", format!("anchor {i} has no positive in the batch"))),
                (_, None) => Err(Error::invalid("loss_triplet", format!("anchor {i} has no negative in the batch"))),
            }
        })
        .collect()
}

/// Batch-hard triplet loss on one stream of embeddings `[n, dim]`:
/// mean over anchors of `max(0, margin + d_pos - d_neg)` with Euclidean
/// distances.
pub fn batch_hard_triplet(embeddings: &Tensor, labels: &[usize], margin: f32) -> Result<Tensor> {
    if !(margin > 0.0) {
        return Err(Error::invalid("loss_triplet", format!("margin {margin} must be positive")));
    }
    let n = labels.len();
    if embeddings.shape().first() != Some(&n) {
        return Err(Error::invalid(
            "loss_triplet",
            format!("{n} labels for embeddings of shape {:?}", embeddings.shape()),
        ));
    }
    let dist = embeddings.pairwise_distances()?;
    let pairs = mine_batch_hard(&dist.data(), labels)?;
    let pos: Vec<usize> = pairs.iter().enumerate().map(|(i, &(p, _))| i * n + p).collect();
    let neg: Vec<usize> = pairs.iter().enumerate().map(|(i, &(_, q))| i * n + q).collect();
    let d_pos = dist.gather(&pos)?;
    let d_neg = dist.gather(&neg)?;
    Ok(d_pos.sub(&d_neg)?.add_scalar(margin).max_with_scalar(0.0).mean())
}

/// Triplet loss mined separately within the HR and the LR stream, summed.
pub fn triplet_loss(
    hr: &Tensor,
    hr_labels: &[usize],
    lr: &Tensor,
    lr_labels: &[usize],
    margin: f32,
) -> Result<Tensor> {
    batch_hard_triplet(hr, hr_labels, margin)?.add(&batch_hard_triplet(lr, lr_labels, margin)?)
}

/// `L_cls = L_id + L_tri`.
pub fn classification_loss(id: &Tensor, triplet: &Tensor) -> Result<Tensor> {
    id.add(triplet)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_loss_anchors() {
        let uniform = Tensor::full(&[3, 10], 0.1);
        let l = identity_loss(&uniform, &[0, 4, 9]).unwrap().item();
        assert!((l - 10f32.ln()).abs() < 1e-5);

        let mut onehot = vec![0.0; 4];
        onehot[2] = 1.0;
        let l = identity_loss(&Tensor::from_vec(onehot, &[1, 4]).unwrap(), &[2]).unwrap().item();
        assert!(l.abs() < 1e-6);

        let half = Tensor::from_vec(vec![0.5, 0.25, 0.25], &[1, 3]).unwrap();
        let l = identity_loss(&half, &[0]).unwrap().item();
        assert!((l - std::f32::consts::LN_2).abs() < 1e-6);

        assert!(identity_loss(&half, &[3]).is_err());
    }

    #[test]
    fn triplet_inactive_hinge() {
        // two identities, far apart, tight clusters
        let emb = Tensor::from_vec(vec![0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 5.0, 0.0], &[4, 2]).unwrap();
        let l = batch_hard_triplet(&emb, &[0, 0, 1, 1], 2.0).unwrap().item();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn triplet_margin_example() {
        // d_pos = 1 and d_neg = 2 for every anchor
        let emb = Tensor::from_vec(vec![0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 1.0, 2.0], &[4, 2]).unwrap();
        let l = batch_hard_triplet(&emb, &[0, 0, 1, 1], 2.0).unwrap().item();
        assert_eq!(l, 1.0);
    }

    #[test]
    fn triplet_requires_positive_and_negative() {
        let emb = Tensor::from_vec(vec![0.0, 1.0, 2.0], &[3, 1]).unwrap();
        let err = batch_hard_triplet(&emb, &[0, 0, 1], 2.0).unwrap_err();
        assert!(err.to_string().contains("no positive"));
        let err = batch_hard_triplet(&emb, &[0, 0, 0], 2.0).unwrap_err();
        assert!(err.to_string().contains("no negative"));
        assert!(batch_hard_triplet(&emb, &[0, 0, 1], 0.0).is_err());
    }

    #[test]
    fn classification_is_a_sum() {
        let l = classification_loss(&Tensor::scalar(2.0), &Tensor::scalar(0.5)).unwrap();
        assert_eq!(l.item(), 2.5);
    }
}
