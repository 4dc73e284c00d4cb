use crate::error::{Error, Result};

/// A single `(channels, height, width)` feature map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Panics if `data.len()` does not match the shape.
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor data length mismatch");
        Tensor {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, h: usize, w: usize) -> f32 {
        self.data[(c * self.height + h) * self.width + w]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, h: usize, w: usize) -> &mut f32 {
        &mut self.data[(c * self.height + h) * self.width + w]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Columns `start..end` of every row.
    pub fn crop_cols(&self, start: usize, end: usize) -> Tensor {
        assert!(start <= end && end <= self.width);
        let w = end - start;
        let mut data = Vec::with_capacity(self.channels * self.height * w);
        for row in self.data.chunks_exact(self.width) {
            data.extend_from_slice(&row[start..end]);
        }
        Tensor::from_vec(self.channels, self.height, w, data)
    }

    /// Joins tensors side by side; all must share channels and height.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("nothing to concatenate".into()))?;
        let (c, h) = (first.channels, first.height);
        if parts.iter().any(|p| p.channels != c || p.height != h) {
            return Err(Error::Input("column concat needs equal channels and height".into()));
        }
        let w: usize = parts.iter().map(|p| p.width).sum();
        let mut data = Vec::with_capacity(c * h * w);
        for row in 0..c * h {
            for p in parts {
                data.extend_from_slice(&p.data[row * p.width..(row + 1) * p.width]);
            }
        }
        Ok(Tensor::from_vec(c, h, w, data))
    }

    /// Stacks tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("nothing to concatenate".into()))?;
        let (h, w) = (first.height, first.width);
        if parts.iter().any(|p| p.height != h || p.width != w) {
            return Err(Error::Input("channel concat needs equal spatial size".into()));
        }
        let c = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(c * h * w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::from_vec(c, h, w, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_then_concat_restores_columns() {
        let t = Tensor::from_vec(2, 2, 5, (0..20).map(|v| v as f32).collect());
        let joined = Tensor::concat_cols(&[t.crop_cols(0, 2), t.crop_cols(2, 5)]).unwrap();
        assert_eq!(joined, t);
        assert_eq!(t.crop_cols(1, 3).plane(1), &[11.0, 12.0, 16.0, 17.0]);
    }

    #[test]
    fn channel_concat_stacks_planes() {
        let a = Tensor::from_vec(1, 1, 2, vec![1.0, 2.0]);
        let b = Tensor::from_vec(2, 1, 2, vec![3.0, 4.0, 5.0, 6.0]);
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), (3, 1, 2));
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(Tensor::concat_channels(&[&a, &Tensor::zeros(1, 2, 2)]).is_err());
    }
}
