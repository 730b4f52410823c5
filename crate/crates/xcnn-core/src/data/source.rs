//! Bridges datasets and split assignments to the training loop's batch
//! interface.
//!
//! Image batches are re-augmented every epoch with per-sample seeds derived
//! from (source seed, epoch, dataset index), then normalized and stacked;
//! validation batches skip augmentation entirely. Feature datasets go
//! through a plain in-memory source.

use std::marker::PhantomData;

use crate::rng::{self, stream};
use crate::tensor::{Element, Tensor};
use crate::train::{Batch, BatchSource, MemorySource, TrainError};

use super::{
    augment, stack_features, stack_normalized, AugmentationPolicy, DataError, FeatureDataset,
    LabeledDataset, Split, SplitAssignment,
};

/// Train/val batch source over a labeled image dataset.
pub struct ImageSource<'a, E: Element> {
    dataset: &'a LabeledDataset,
    train: Vec<usize>,
    val: Vec<usize>,
    policy: AugmentationPolicy,
    seed: u64,
    _precision: PhantomData<E>,
}

impl<'a, E: Element> ImageSource<'a, E> {
    pub fn new(
        dataset: &'a LabeledDataset,
        split: &SplitAssignment,
        policy: AugmentationPolicy,
        seed: u64,
    ) -> Result<Self, DataError> {
        if split.len() != dataset.len() {
            return Err(DataError::Shape(format!(
                "split covers {} samples, dataset has {}",
                split.len(),
                dataset.len()
            )));
        }
        policy.validate().map_err(DataError::Format)?;
        Ok(ImageSource {
            dataset,
            train: split.indices(Split::Train),
            val: split.indices(Split::Val),
            policy,
            seed,
            _precision: PhantomData,
        })
    }

    fn assemble(&self, indices: &[usize], epoch: Option<usize>) -> Result<Batch<E>, TrainError> {
        let mut images: Vec<Tensor<f32>> = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &idx in indices {
            let sample = &self.dataset.samples[idx];
            images.push(match epoch {
                Some(epoch) => {
                    let seed =
                        rng::derive(self.seed, &[stream::AUGMENT, epoch as u64, idx as u64]);
                    augment(&sample.image, &self.policy, seed)
                }
                None => sample.image.clone(),
            });
            labels.push(sample.label);
        }
        let refs: Vec<&Tensor<f32>> = images.iter().collect();
        let input =
            stack_normalized::<E>(&refs).map_err(|e| TrainError::Source(e.to_string()))?;
        Ok(Batch { input, labels })
    }
}

impl<E: Element> BatchSource<E> for ImageSource<'_, E> {
    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn val_len(&self) -> usize {
        self.val.len()
    }

    fn train_batch(&self, epoch: usize, positions: &[usize]) -> Result<Batch<E>, TrainError> {
        let indices: Vec<usize> = positions.iter().map(|&p| self.train[p]).collect();
        self.assemble(&indices, Some(epoch))
    }

    fn val_batch(&self, positions: &[usize]) -> Result<Batch<E>, TrainError> {
        let indices: Vec<usize> = positions.iter().map(|&p| self.val[p]).collect();
        self.assemble(&indices, None)
    }
}

/// Normalized input tensor plus labels for one split of an image dataset
/// (how the test split reaches evaluation).
pub fn stacked_image_split<E: Element>(
    dataset: &LabeledDataset,
    indices: &[usize],
) -> Result<(Tensor<E>, Vec<usize>), DataError> {
    let refs: Vec<&Tensor<f32>> = indices
        .iter()
        .map(|&i| &dataset.samples[i].image)
        .collect();
    let input = stack_normalized::<E>(&refs)?;
    let labels = indices.iter().map(|&i| dataset.samples[i].label).collect();
    Ok((input, labels))
}

/// Batch source over precomputed feature vectors.
pub fn feature_source<E: Element>(
    features: &FeatureDataset,
    split: &SplitAssignment,
) -> Result<MemorySource<E>, TrainError> {
    if split.len() != features.len() {
        return Err(TrainError::Source(format!(
            "split covers {} samples, feature set has {}",
            split.len(),
            features.len()
        )));
    }
    let inputs: Vec<Tensor<E>> = features
        .features
        .iter()
        .map(|row| {
            Tensor::new(vec![row.len()], row.iter().map(|&v| E::from_f32(v)).collect())
                .map_err(|e| TrainError::Source(e.to_string()))
        })
        .collect::<Result<_, _>>()?;
    MemorySource::new(
        inputs,
        features.labels.clone(),
        split.indices(Split::Train),
        split.indices(Split::Val),
    )
}

/// Feature tensor plus labels for one split of a feature dataset.
pub fn stacked_feature_split<E: Element>(
    features: &FeatureDataset,
    indices: &[usize],
) -> Result<(Tensor<E>, Vec<usize>), DataError> {
    let rows: Vec<&[f32]> = indices
        .iter()
        .map(|&i| features.features[i].as_slice())
        .collect();
    let input = stack_features::<E>(&rows, features.dim)?;
    let labels = indices.iter().map(|&i| features.labels[i]).collect();
    Ok((input, labels))
}
