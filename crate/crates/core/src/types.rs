//! Tensor and dataset vocabulary shared by every other module.

use std::collections::HashSet;

use crate::{Error, Result};

/// Smallest spatial size accepted for input images.
pub const MIN_SIDE: usize = 16;

fn check_len(what: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::ShapeMismatch {
            expected: format!("{what} with {expected} elements"),
            found: format!("{found} elements"),
        });
    }
    Ok(())
}

fn check_unit_range(data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(index) => Err(Error::OutOfRangePixel {
            index,
            value: data[index],
        }),
        None => Ok(()),
    }
}

/// RGB image, channel-major `3 x H x W`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_len("3xHxW image", 3 * height * width, data.len())?;
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(Error::ImageTooSmall {
                height: self.height,
                width: self.width,
            });
        }
        check_unit_range(&self.data)
    }
}

/// Binary ground-truth mask, `1 x H x W`, values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl MaskTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_len("1xHxW mask", height * width, data.len())?;
        Ok(Self { height, width, data })
    }

    pub fn from_bits(height: usize, width: usize, bits: &[bool]) -> Result<Self> {
        Self::new(height, width, bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_set(&self, i: usize) -> bool {
        self.data[i] != 0.0
    }

    pub fn positives(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn validate(&self) -> Result<()> {
        match self.data.iter().position(|&v| v != 0.0 && v != 1.0) {
            Some(index) => Err(Error::NonBinaryMask {
                index,
                value: self.data[index],
            }),
            None => Ok(()),
        }
    }

    pub fn to_prob_map(&self) -> ProbMap {
        ProbMap {
            height: self.height,
            width: self.width,
            data: self.data.clone(),
        }
    }
}

/// Per-pixel foreground probability, `1 x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_len("1xHxW probability map", height * width, data.len())?;
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        check_unit_range(&self.data)
    }
}

pub(crate) fn same_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", a.0, a.1),
            found: format!("{}x{}", b.0, b.1),
        });
    }
    Ok(())
}

/// Thresholds a probability map: a pixel is foreground iff `p >= t`.
pub fn binarize(p: &ProbMap, t: f64) -> Result<MaskTensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidThreshold(t));
    }
    let data = p.data.iter().map(|&v| if f64::from(v) >= t { 1.0 } else { 0.0 }).collect();
    MaskTensor::new(p.height, p.width, data)
}

/// One `(image, ground truth)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageTensor,
    pub mask: MaskTensor,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: ImageTensor, mask: MaskTensor) -> Self {
        Self {
            id: id.into(),
            image,
            mask,
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.image.height, self.image.width)
    }
}

/// Checks shape agreement, pixel range and mask binarity of a sample.
pub fn validate_pair(s: &Sample) -> Result<()> {
    same_shape(
        (s.image.height, s.image.width),
        (s.mask.height, s.mask.width),
    )?;
    s.image.validate()?;
    s.mask.validate()
}

/// Ordered collection of samples with unique ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate sample id {:?}", s.id)));
            }
        }
        Ok(Self {
            name: name.into(),
            samples,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    /// New dataset holding the samples at `indices`, in that order.
    pub fn select(&self, name: impl Into<String>, indices: &[usize]) -> Self {
        Self {
            name: name.into(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}
