//! Batched learned representations tagged with their layout.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLayout {
    /// (batch, channels, frames)
    Time,
    /// (batch, channels, freq, frames)
    Tf,
}

impl FeatureLayout {
    pub fn name(self) -> &'static str {
        match self {
            FeatureLayout::Time => "time (B, N, L)",
            FeatureLayout::Tf => "tf (B, C, F, L)",
        }
    }

    fn rank(self) -> usize {
        match self {
            FeatureLayout::Time => 3,
            FeatureLayout::Tf => 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureMap {
    data: Tensor,
    layout: FeatureLayout,
    frame_rate: f64,
}

impl FeatureMap {
    /// Wraps a tensor after checking its rank and that every entry is finite.
    pub fn new(data: Tensor, layout: FeatureLayout, frame_rate: f64) -> Result<Self> {
        let fm = Self::from_parts(data, layout, frame_rate)?;
        let bad = fm
            .data
            .flatten_all()?
            .to_dtype(candle_core::DType::F64)?
            .to_vec1::<f64>()?
            .iter()
            .any(|v| !v.is_finite());
        if bad {
            return Err(Error::NonFinite("feature map"));
        }
        Ok(fm)
    }

    /// Rank-checked construction without scanning the data.
    pub(crate) fn from_parts(data: Tensor, layout: FeatureLayout, frame_rate: f64) -> Result<Self> {
        if data.rank() != layout.rank() {
            return Err(Error::shape(format!(
                "{} layout needs rank {}, got shape {:?}",
                layout.name(),
                layout.rank(),
                data.dims()
            )));
        }
        Ok(Self {
            data,
            layout,
            frame_rate,
        })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn layout(&self) -> FeatureLayout {
        self.layout
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn dims(&self) -> &[usize] {
        self.data.dims()
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn frames(&self) -> usize {
        *self.data.dims().last().expect("rank >= 3")
    }

    pub fn expect_layout(&self, layout: FeatureLayout) -> Result<()> {
        if self.layout != layout {
            return Err(Error::Layout {
                expected: layout.name(),
                got: self.layout.name(),
            });
        }
        Ok(())
    }

    /// Same layout and frame rate, new data.
    pub(crate) fn with_data(&self, data: Tensor) -> Result<Self> {
        Self::from_parts(data, self.layout, self.frame_rate)
    }

    pub(crate) fn same_layout(&self, other: &FeatureMap) -> Result<()> {
        other.expect_layout(self.layout)
    }
}
