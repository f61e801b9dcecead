//! Datasets, run configuration and report files.

pub mod config;
pub mod idx;
pub mod report;
mod synth;

pub use config::{parse_config, DataConfig, DataSource, OutputConfig, ReportFormat, RunConfig};
pub use idx::load_idx;
pub use report::{read_report, write_report, Cell, Report};
pub use synth::{synth_dataset, synth_dataset_with, synth_patterns, SynthTask};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixel normalization applied by [`Dataset::normalized`]: `[0, 1]` maps to
/// `[-1, 1]`.
pub const PIXEL_CENTER: f64 = 0.5;
pub const PIXEL_GAIN: f64 = 2.0;

/// Labeled images, `[N, C_in, H, W]`. Loaders produce pixel values in
/// `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::contract(format!(
                "dataset images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Consistency(format!("label {bad} outside {classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `[C_in, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gathers the listed samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.image_shape();
        let per = c * h * w;
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_parts(vec![indices.len(), c, h, w], data), labels)
    }

    /// Samples `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let end = end.min(self.len());
        let start = start.min(end);
        let idx: Vec<usize> = (start..end).collect();
        let (images, labels) = self.batch(&idx);
        Dataset {
            images,
            labels,
            classes: self.classes,
        }
    }

    /// Copy with every pixel mapped through `(x - PIXEL_CENTER) * PIXEL_GAIN`.
    /// Zero-centered inputs keep the ReLU and BatchNorm statistics of the
    /// ConvMixer well conditioned.
    pub fn normalized(&self) -> Dataset {
        Dataset {
            images: self.images.map(|v| (v - PIXEL_CENTER) * PIXEL_GAIN),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }

    /// Contiguous batches of at most `size` samples, in order.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = (Tensor, Vec<usize>)> + '_ {
        let size = size.max(1);
        (0..self.len().div_ceil(size)).map(move |b| {
            let idx: Vec<usize> = (b * size..((b + 1) * size).min(self.len())).collect();
            self.batch(&idx)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_maps_unit_interval() {
        let imgs = Tensor::new(vec![1, 1, 1, 3], vec![0.0, 0.5, 1.0]).unwrap();
        let d = Dataset::new(imgs, vec![0], 1).unwrap().normalized();
        assert_eq!(d.images().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn construction_checks() {
        let imgs = Tensor::zeros(&[2, 1, 2, 2]);
        assert!(Dataset::new(imgs.clone(), vec![0, 1], 2).is_ok());
        assert!(matches!(Dataset::new(imgs.clone(), vec![0], 2), Err(Error::Consistency(_))));
        assert!(matches!(Dataset::new(imgs, vec![0, 2], 2), Err(Error::Consistency(_))));
    }

    #[test]
    fn batches_cover_everything_in_order() {
        let imgs = Tensor::new(vec![5, 1, 1, 1], (0..5).map(f64::from).collect()).unwrap();
        let ds = Dataset::new(imgs, vec![0, 1, 0, 1, 0], 2).unwrap();
        let got: Vec<Vec<f64>> = ds.batches(2).map(|(x, _)| x.data().to_vec()).collect();
        assert_eq!(got, vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0]]);
        assert_eq!(ds.slice(1, 3).labels(), &[1, 0]);
    }
}
