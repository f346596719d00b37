use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Images stored channel-major (`C × H × W`) with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    images: Vec<f32>,
    labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        images: Vec<f32>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} pixel values for {} labels of {channels}x{height}x{width}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Data(format!(
                "label {bad} outside class table of {}",
                class_names.len()
            )));
        }
        Ok(LabeledDataset {
            channels,
            height,
            width,
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Indices of every sample with label `class`, in dataset order.
    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Stacks the given samples into a `[B, C, H, W]` tensor.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("sample {i} out of {}", self.len())));
            }
            data.extend(self.image(i).iter().map(|&v| T::lit(f64::from(v))));
        }
        Tensor::new(&[indices.len(), self.channels, self.height, self.width], data)
    }
}
