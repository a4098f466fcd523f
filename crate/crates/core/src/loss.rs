//! Cross-entropy, batch triplet loss and their unweighted sum.

use serde::{Deserialize, Serialize};

use crate::autograd::{check_rank, Backward, Ctx, Tape, Var};
use crate::error::{ensure, Result};
use crate::tensor::{Float, Tensor};

/// How triplets are drawn from a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    /// Every ordered `(anchor, positive, negative)` with distinct anchor and
    /// positive of one class and a negative of another class.
    BatchAll,
    /// Per anchor, the farthest positive and the closest negative.
    BatchHard,
}

/// Denominator of the batch-all average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletAverage {
    /// All valid triplets, including those already satisfying the margin.
    AllValid,
    /// Only triplets with a strictly positive hinge.
    PositiveOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TripletConfig {
    pub margin: f64,
    pub mining: Mining,
    pub average: TripletAverage,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            margin: 0.0,
            mining: Mining::BatchAll,
            average: TripletAverage::AllValid,
        }
    }
}

/// Components of the joint objective for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub ce: f64,
    pub triplet: f64,
    pub valid_triplet_count: usize,
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    ensure!(
        labels.len() == batch,
        Shape,
        "{} labels for a batch of {batch}",
        labels.len()
    );
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(crate::Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

struct CrossEntropy<T> {
    probs: Vec<T>,
    labels: Vec<usize>,
}

impl<T: Float> Backward<T> for CrossEntropy<T> {
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let shape = ctx.input(0).shape().to_vec();
        let (b, c) = (shape[0], shape[1]);
        let scale = g.data()[0] / T::from_f64(b as f64);
        let mut d = Tensor::from_fn(shape, |i| self.probs[i] * scale);
        for (i, &y) in self.labels.iter().enumerate() {
            d.data_mut()[i * c + y] -= scale;
        }
        vec![Some(d)]
    }
}

/// Pairwise weights `W[i][j]` such that the loss equals
/// `sum_ij W[i][j] * ||e_i - e_j||^2` locally.
struct SquaredDistanceForm<T> {
    weights: Vec<T>,
}

impl<T: Float> Backward<T> for SquaredDistanceForm<T> {
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let e = ctx.input(0);
        let (b, d) = (e.shape()[0], e.shape()[1]);
        let up = g.data()[0];
        let mut de = Tensor::zeros(e.shape().to_vec());
        let two = T::from_f64(2.0);
        for i in 0..b {
            for j in 0..b {
                let w = self.weights[i * b + j];
                if w == T::zero() {
                    continue;
                }
                let coef = two * w * up;
                for k in 0..d {
                    let diff = e.data()[i * d + k] - e.data()[j * d + k];
                    de.data_mut()[i * d + k] += coef * diff;
                    de.data_mut()[j * d + k] -= coef * diff;
                }
            }
        }
        vec![Some(de)]
    }
}

fn pairwise_sq_dist<T: Float>(e: &Tensor<T>) -> Vec<T> {
    let (b, d) = (e.shape()[0], e.shape()[1]);
    let mut out = vec![T::zero(); b * b];
    for i in 0..b {
        for j in i + 1..b {
            let mut acc = T::zero();
            for k in 0..d {
                let diff = e.data()[i * d + k] - e.data()[j * d + k];
                acc += diff * diff;
            }
            out[i * b + j] = acc;
            out[j * b + i] = acc;
        }
    }
    out
}

impl<T: Float> Tape<T> {
    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        check_rank(lv, 2, "cross_entropy logits")?;
        let (b, c) = (lv.shape()[0], lv.shape()[1]);
        ensure!(b > 0, Shape, "cross_entropy on an empty batch");
        check_labels(labels, b, c)?;
        let mut probs = vec![T::zero(); b * c];
        let mut total = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv.data()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= z;
            }
            // -log softmax = log z - (x_y - max)
            total += (z.ln() - (row[y] - max)).as_f64();
        }
        let loss = Tensor::scalar(T::from_f64(total / b as f64));
        Ok(self.push(
            loss,
            vec![logits],
            CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Triplet loss on squared Euclidean distances between embedding rows.
    /// Returns the loss node and the number of valid triplets; a batch without
    /// any valid triplet yields a zero loss.
    pub fn triplet_loss(&mut self, embeddings: Var, labels: &[usize], cfg: &TripletConfig) -> Result<(Var, usize)> {
        let ev = self.value(embeddings);
        check_rank(ev, 2, "triplet_loss embeddings")?;
        let b = ev.shape()[0];
        check_labels(labels, b, usize::MAX)?;
        let dist = pairwise_sq_dist(ev);
        let margin = T::from_f64(cfg.margin);
        let mut weights = vec![T::zero(); b * b];
        let mut valid = 0usize;
        let mut active = 0usize;
        let mut total = 0.0f64;
        match cfg.mining {
            Mining::BatchAll => {
                for a in 0..b {
                    for p in 0..b {
                        if p == a || labels[p] != labels[a] {
                            continue;
                        }
                        for n in 0..b {
                            if labels[n] == labels[a] {
                                continue;
                            }
                            valid += 1;
                            let h = dist[a * b + p] - dist[a * b + n] + margin;
                            if h > T::zero() {
                                active += 1;
                                total += h.as_f64();
                                weights[a * b + p] += T::one();
                                weights[a * b + n] -= T::one();
                            }
                        }
                    }
                }
            }
            Mining::BatchHard => {
                for a in 0..b {
                    let hardest = |same: bool| {
                        (0..b).filter(|&j| j != a && (labels[j] == labels[a]) == same).fold(
                            None,
                            |best: Option<usize>, j| match best {
                                None => Some(j),
                                Some(k) => {
                                    let (dj, dk) = (dist[a * b + j], dist[a * b + k]);
                                    let better = if same { dj > dk } else { dj < dk };
                                    Some(if better { j } else { k })
                                }
                            },
                        )
                    };
                    let (Some(p), Some(n)) = (hardest(true), hardest(false)) else {
                        continue;
                    };
                    valid += 1;
                    let h = dist[a * b + p] - dist[a * b + n] + margin;
                    if h > T::zero() {
                        active += 1;
                        total += h.as_f64();
                        weights[a * b + p] += T::one();
                        weights[a * b + n] -= T::one();
                    }
                }
            }
        }
        let denom = match cfg.average {
            TripletAverage::AllValid => valid,
            TripletAverage::PositiveOnly => active,
        };
        let (value, scale) = if denom == 0 {
            (0.0, T::zero())
        } else {
            (total / denom as f64, T::from_f64(1.0 / denom as f64))
        };
        weights.iter_mut().for_each(|w| *w *= scale);
        let out = self.push(
            Tensor::scalar(T::from_f64(value)),
            vec![embeddings],
            SquaredDistanceForm { weights },
        );
        Ok((out, valid))
    }

    /// `ce + triplet`, or `ce` alone when `triplet` is `None`.
    pub fn joint_loss(
        &mut self,
        logits: Var,
        embeddings: Var,
        labels: &[usize],
        triplet: Option<&TripletConfig>,
    ) -> Result<(Var, LossValue)> {
        ensure!(
            self.value(logits).shape().first() == self.value(embeddings).shape().first(),
            Shape,
            "logits {:?} and embeddings {:?} disagree on batch size",
            self.value(logits).shape(),
            self.value(embeddings).shape()
        );
        let ce = self.cross_entropy(logits, labels)?;
        let ce_v = self.value(ce).data()[0];
        let Some(cfg) = triplet else {
            let v = ce_v.as_f64();
            return Ok((
                ce,
                LossValue {
                    total: v,
                    ce: v,
                    triplet: 0.0,
                    valid_triplet_count: 0,
                },
            ));
        };
        let (tl, valid) = self.triplet_loss(embeddings, labels, cfg)?;
        let tl_v = self.value(tl).data()[0];
        let total = self.add(ce, tl)?;
        Ok((
            total,
            LossValue {
                total: ce_v.as_f64() + tl_v.as_f64(),
                ce: ce_v.as_f64(),
                triplet: tl_v.as_f64(),
                valid_triplet_count: valid,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(rows: &[&[f64]]) -> Tensor<f64> {
        let d = rows[0].len();
        Tensor::new(vec![rows.len(), d], rows.concat()).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let mut tape = Tape::<f64>::new();
        let l = tape.input(Tensor::full(vec![3, 6], 0.7));
        let ce = tape.cross_entropy(l, &[0, 3, 5]).unwrap();
        assert!((tape.value(ce).data()[0] - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_class() {
        let mut tape = Tape::<f32>::new();
        let mut v = vec![0.0f32; 6];
        v[2] = 1000.0;
        let l = tape.input(Tensor::new(vec![1, 6], v).unwrap());
        let ce = tape.cross_entropy(l, &[2]).unwrap();
        assert!(tape.value(ce).data()[0].abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range() {
        let mut tape = Tape::<f32>::new();
        let l = tape.input(Tensor::zeros(vec![1, 6]));
        assert!(tape.cross_entropy(l, &[6]).is_err());
    }

    #[test]
    fn identical_embeddings_zero_margin() {
        let mut tape = Tape::<f64>::new();
        let e = tape.input(Tensor::full(vec![4, 3], 1.5));
        let (t, valid) = tape.triplet_loss(e, &[0, 0, 1, 1], &TripletConfig::default()).unwrap();
        assert_eq!(tape.value(t).data()[0], 0.0);
        assert_eq!(valid, 8);
    }

    #[test]
    fn separated_classes_have_zero_loss() {
        let mut tape = Tape::<f64>::new();
        let e = tape.input(emb(&[&[0.0, 0.0], &[0.0, 0.0], &[3.0, 4.0], &[3.0, 4.0]]));
        let (t, valid) = tape.triplet_loss(e, &[0, 0, 1, 1], &TripletConfig::default()).unwrap();
        assert_eq!(tape.value(t).data()[0], 0.0);
        assert_eq!(valid, 8);
    }

    #[test]
    fn single_class_batch_has_no_triplets() {
        let mut tape = Tape::<f64>::new();
        let l = tape.input(Tensor::from_fn(vec![3, 6], |i| i as f64 * 0.1));
        let e = tape.leaf(Tensor::from_fn(vec![3, 2], |i| i as f64), true);
        let (total, v) = tape
            .joint_loss(l, e, &[1, 1, 1], Some(&TripletConfig::default()))
            .unwrap();
        assert_eq!(v.valid_triplet_count, 0);
        assert_eq!(v.triplet, 0.0);
        assert_eq!(v.total, v.ce);
        assert_eq!(tape.value(total).data()[0], v.total);
    }

    #[test]
    fn hand_triplet_value() {
        // anchor 0 at origin, positive 1 at distance^2 4, negative 2 at distance^2 1
        let mut tape = Tape::<f64>::new();
        let e = tape.input(emb(&[&[0.0], &[2.0], &[1.0]]));
        let (t, valid) = tape.triplet_loss(e, &[0, 0, 1], &TripletConfig::default()).unwrap();
        // (a=0,p=1,n=2): 4 - 1 = 3 ; (a=1,p=0,n=2): 4 - 1 = 3
        assert_eq!(valid, 2);
        assert_eq!(tape.value(t).data()[0], 3.0);
    }

    #[test]
    fn positive_only_average() {
        let mut tape = Tape::<f64>::new();
        let e = tape.input(emb(&[&[0.0], &[2.0], &[1.0], &[10.0]]));
        let cfg = TripletConfig {
            average: TripletAverage::PositiveOnly,
            ..TripletConfig::default()
        };
        let (all, _) = tape.triplet_loss(e, &[0, 0, 1, 1], &TripletConfig::default()).unwrap();
        let (pos, _) = tape.triplet_loss(e, &[0, 0, 1, 1], &cfg).unwrap();
        assert!(tape.value(pos).data()[0] > tape.value(all).data()[0]);
    }
}
