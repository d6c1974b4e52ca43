use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-pixel class ids, row-major `[H, W]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape("mask", format!("{} labels for {height}x{width}", labels.len())));
        }
        Ok(Mask { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Mask { height, width, labels: vec![label; height * width] }
    }

    /// Per-pixel argmax of `probs [K, H, W]`; ties go to the lower class.
    pub fn from_probs<T: Scalar>(probs: &Tensor<T>) -> Result<Self> {
        let (k, h, w) = probs.dims3("mask")?;
        if k > 256 {
            return Err(Error::Config(format!("{k} classes do not fit 8-bit labels")));
        }
        let n = h * w;
        let d = probs.data();
        let labels = (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..k {
                    if d[c * n + i] > d[best * n + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        Ok(Mask { height: h, width: w, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.labels.iter().position(|&l| l as usize >= classes) {
            Some(i) => Err(Error::Contract(format!(
                "label {} at pixel {i} exceeds {classes} classes",
                self.labels[i]
            ))),
            None => Ok(()),
        }
    }

    /// `[K, H, W]` indicator tensor.
    pub fn one_hot<T: Scalar>(&self, classes: usize) -> Result<Tensor<T>> {
        self.check_classes(classes)?;
        let n = self.labels.len();
        let mut data = vec![T::zero(); classes * n];
        for (i, &l) in self.labels.iter().enumerate() {
            data[l as usize * n + i] = T::one();
        }
        Tensor::new(&[classes, self.height, self.width], data)
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}
