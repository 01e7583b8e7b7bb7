use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// Row-major H×W×3 float image with values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

pub type Rgb = [f64; 3];

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * CHANNELS {
            return Err(Error::Shape(format!(
                "{height}×{width}×3 image cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, color: Rgb) -> Self {
        let data = (0..height * width).flat_map(|_| color).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> Rgb {
        let i = (row * self.width + col) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: Rgb) {
        let i = (row * self.width + col) * CHANNELS;
        self.data[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamp_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, CHANNELS], self.data.clone()).expect("image shape")
    }

    pub fn from_tensor(tensor: &Tensor) -> Result<Self> {
        match tensor.shape() {
            &[h, w, CHANNELS] => Self::new(h, w, tensor.data().to_vec()),
            other => Err(Error::Shape(format!("expected H×W×3 tensor, got {other:?}"))),
        }
    }

    /// Overwrites the window at `origin` with `block`.
    pub fn paste(&mut self, block: &Image, origin: (usize, usize)) -> Result<()> {
        if origin.0 + block.height > self.height || origin.1 + block.width > self.width {
            return Err(Error::config(
                "prompt_size",
                format!(
                    "{}×{} block at {origin:?} does not fit a {}×{} image",
                    block.height, block.width, self.height, self.width
                ),
            ));
        }
        let row_len = block.width * CHANNELS;
        for r in 0..block.height {
            let dst = ((origin.0 + r) * self.width + origin.1) * CHANNELS;
            self.data[dst..dst + row_len].copy_from_slice(&block.data[r * row_len..(r + 1) * row_len]);
        }
        Ok(())
    }
}
