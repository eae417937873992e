//! Head training on precomputed encoder features, and batched inference.

use crate::bbox::BBox;
use crate::data::{SequenceRecord, ToyEncoder};
use crate::error::{check_dim, Error, Result};
use crate::head::{decode_box, Head};
use crate::loss::{head_loss, LossBreakdown, LossWeights};
use crate::optim::{AdamWConfig, OptimState};
use crate::parallel::map_indexed;
use crate::param::HasParams;
use crate::tensor::Tensor4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Frames encoded once up front, with their normalized ground truth.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub features: Tensor4,
    pub boxes: Vec<BBox>,
    /// Frame count of each source sequence, in order.
    pub sequence_lengths: Vec<usize>,
    pub sequence_names: Vec<String>,
}

impl FeatureSet {
    pub fn encode(sequences: &[SequenceRecord], encoder: &ToyEncoder) -> Result<Self> {
        let encoded: Vec<Result<Tensor4>> =
            map_indexed(sequences.len(), |i| encoder.encode(&sequences[i].frames));
        let parts = encoded.into_iter().collect::<Result<Vec<_>>>()?;
        if parts.is_empty() {
            return Err(Error::contract("no sequences to encode"));
        }
        let refs: Vec<&Tensor4> = parts.iter().collect();
        Ok(Self {
            features: Tensor4::stack_batch(&refs)?,
            boxes: sequences.iter().flat_map(|s| s.boxes.iter().copied()).collect(),
            sequence_lengths: sequences.iter().map(|s| s.len()).collect(),
            sequence_names: sequences.iter().map(|s| s.name.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Splits per-frame values back into per-sequence lists.
    pub fn regroup<T: Clone>(&self, flat: &[T]) -> Vec<Vec<T>> {
        let mut out = Vec::with_capacity(self.sequence_lengths.len());
        let mut start = 0;
        for &n in &self.sequence_lengths {
            out.push(flat[start..start + n].to_vec());
            start += n;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub weights: LossWeights,
    /// Seeds the batch sampler.
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            optim: AdamWConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: LossBreakdown,
}

pub fn loss_trace_csv(trace: &[LossRecord]) -> String {
    let mut out = String::from("step,total,cls,l1,giou\n");
    for r in trace {
        let l = r.loss;
        let _ = writeln!(out, "{},{},{},{},{}", r.step, l.total, l.cls, l.l1, l.giou);
    }
    out
}

/// Mean total loss over the records with `step` in `range`.
pub fn windowed_mean(trace: &[LossRecord], range: std::ops::Range<usize>) -> f64 {
    let sel: Vec<f64> = trace
        .iter()
        .filter(|r| range.contains(&r.step))
        .map(|r| r.loss.total)
        .collect();
    sel.iter().sum::<f64>() / sel.len().max(1) as f64
}

/// Endless stream of shuffled epochs over `0..n`.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Trains `head` in place and returns the per-step loss trace.
///
/// Aborts with a numeric error naming the step on a non-finite loss.
pub fn train_head(set: &FeatureSet, head: &mut Head, hyper: &TrainHyper) -> Result<Vec<LossRecord>> {
    if set.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    check_dim("features", set.len(), set.features.batch())?;
    if hyper.batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    hyper.weights.validate()?;
    let mut sampler = Sampler::new(set.len(), hyper.seed);
    let mut optim = OptimState::new(hyper.optim);
    let mut trace = Vec::with_capacity(hyper.steps);
    head.set_training(true);
    for step in 0..hyper.steps {
        let idx = sampler.next_batch(hyper.batch_size);
        let x = set.features.select_batch(&idx)?;
        let gts: Vec<BBox> = idx.iter().map(|&i| set.boxes[i]).collect();
        head.zero_grad();
        let maps = head.forward(&x)?;
        let (loss, grads) = head_loss(&maps, &gts, &hyper.weights)?;
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {} at step {step}",
                loss.total
            )));
        }
        head.backward(&grads)?;
        optim.step(head)?;
        trace.push(LossRecord { step, loss });
    }
    head.set_training(false);
    Ok(trace)
}

/// Decoded boxes for every feature map, in eval mode.
pub fn predict(head: &mut Head, features: &Tensor4, chunk: usize) -> Result<Vec<BBox>> {
    head.set_training(false);
    let n = features.batch();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + chunk.max(1)).min(n)).collect();
        let maps = head.forward(&features.select_batch(&idx)?)?;
        for b in 0..idx.len() {
            out.push(decode_box(&maps, b));
        }
        start += idx.len();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{HeadConfig, HeadVariant};
    use crate::tensor::Shape4;

    fn toy_set(n: usize, seed: u64) -> FeatureSet {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let features = Tensor4::random_uniform(Shape4::new(n, 8, 6, 6), 0.0, 1.0, &mut r);
        let boxes = (0..n)
            .map(|i| BBox::new(0.2 + 0.1 * (i % 5) as f64, 0.5, 0.3, 0.4).unwrap())
            .collect();
        FeatureSet {
            features,
            boxes,
            sequence_lengths: vec![n],
            sequence_names: vec!["seq_0000".into()],
        }
    }

    fn head(variant: HeadVariant) -> Head {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        Head::new(HeadConfig::new(variant, 8, 6, 6), &mut r).unwrap()
    }

    fn trainable(h: &Head) -> Vec<(String, Vec<f64>)> {
        let mut v = Vec::new();
        h.visit_params("", &mut |n, p| {
            if p.trainable {
                v.push((n.to_string(), p.value.clone()))
            }
        });
        v
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let set = toy_set(6, 1);
        let mut h = head(HeadVariant::Inception);
        let before = trainable(&h);
        let hyper = TrainHyper {
            steps: 5,
            batch_size: 4,
            optim: AdamWConfig {
                lr: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        train_head(&set, &mut h, &hyper).unwrap();
        assert_eq!(trainable(&h), before);
    }

    #[test]
    fn same_seed_bit_identical_trace() {
        let set = toy_set(6, 2);
        let hyper = TrainHyper {
            steps: 6,
            batch_size: 3,
            ..Default::default()
        };
        let (mut a, mut b) = (head(HeadVariant::DeformInception), head(HeadVariant::DeformInception));
        let ta = train_head(&set, &mut a, &hyper).unwrap();
        let tb = train_head(&set, &mut b, &hyper).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(trainable(&a), trainable(&b));
    }

    #[test]
    fn loss_decreases_on_small_problem() {
        let set = toy_set(8, 3);
        let mut h = head(HeadVariant::Plain);
        let hyper = TrainHyper {
            steps: 150,
            batch_size: 4,
            optim: AdamWConfig {
                lr: 3e-3,
                ..Default::default()
            },
            ..Default::default()
        };
        let trace = train_head(&set, &mut h, &hyper).unwrap();
        assert!(windowed_mean(&trace, 130..150) < windowed_mean(&trace, 0..20));
    }

    #[test]
    fn nan_features_abort_naming_step() {
        let mut set = toy_set(4, 4);
        set.features.data_mut()[0] = f64::NAN;
        let mut h = head(HeadVariant::Plain);
        let hyper = TrainHyper {
            steps: 3,
            batch_size: 4,
            ..Default::default()
        };
        let err = train_head(&set, &mut h, &hyper).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(err.to_string().contains("step 0"), "{err}");
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = Sampler::new(5, 0);
        let mut first: Vec<usize> = s.next_batch(5);
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert_eq!(Sampler::new(1, 0).next_batch(8), vec![0; 8]);
    }

    #[test]
    fn csv_header_and_rows() {
        let rec = LossRecord {
            step: 0,
            loss: LossBreakdown { total: 1.0, cls: 0.5, l1: 0.1, giou: 0.0 },
        };
        assert_eq!(loss_trace_csv(&[rec]), "step,total,cls,l1,giou\n0,1,0.5,0.1,0\n");
    }
}
