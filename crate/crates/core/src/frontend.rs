//! Strided convolutional feature extractor and the stride-4 downsampler.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{invalid, Result};
use crate::layers::{Ctx, LayerNorm, Linear};
use crate::substrate::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    /// Output channels of each convolution but the last, which emits `d_model`.
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 32],
            strides: vec![5, 4, 4, 4],
        }
    }
}

impl FrontendConfig {
    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }
}

/// Frame features and the mask of real frames.
#[derive(Clone, Debug)]
pub struct FrameFeatures {
    pub values: Var,
    pub mask: Vec<bool>,
}

/// 1-D convolution over `[T, C]` rows, as unfold plus matmul.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub lin: Linear,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            lin: Linear::new(store, name, kernel * c_in, c_out, rng)?,
            kernel,
            stride,
            pad,
        })
    }

    pub fn out_len(&self, len: usize) -> Option<usize> {
        Graph::conv_out_len(len, self.kernel, self.stride, self.pad).filter(|n| *n > 0)
    }

    pub fn forward(&self, g: &mut Graph, ctx: &Ctx, x: Var) -> Result<Var> {
        let cols = g.im2col(x, self.kernel, self.stride, self.pad)?;
        self.lin.forward(g, ctx, cols)
    }
}

#[derive(Clone, Debug)]
pub struct Frontend {
    pub convs: Vec<Conv1d>,
    pub norm: LayerNorm,
    pub down: [Conv1d; 2],
}

impl Frontend {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &FrontendConfig,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.strides.is_empty() || cfg.channels.len() + 1 != cfg.strides.len() {
            return invalid("frontend needs one more stride than intermediate channel counts");
        }
        if cfg.strides.contains(&0) {
            return invalid("frontend strides must be positive");
        }
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &s) in cfg.strides.iter().enumerate() {
            let c_out = cfg.channels.get(i).copied().unwrap_or(d_model);
            convs.push(Conv1d::new(
                store,
                &format!("frontend.conv{i}"),
                c_in,
                c_out,
                2 * s,
                s,
                s.div_ceil(2),
                rng,
            )?);
            c_in = c_out;
        }
        let norm = LayerNorm::new(store, "frontend.norm", d_model)?;
        let down = [
            Conv1d::new(store, "downsample.conv0", d_model, d_model, 3, 2, 1, rng)?,
            Conv1d::new(store, "downsample.conv1", d_model, d_model, 3, 2, 1, rng)?,
        ];
        Ok(Self { convs, norm, down })
    }

    /// Frame count produced for `samples` input samples, if long enough.
    pub fn feature_len(&self, samples: usize) -> Option<usize> {
        self.convs.iter().try_fold(samples, |n, c| c.out_len(n))
    }

    /// Raw waveform to `[T0, d_model]` features.
    pub fn extract_features(&self, g: &mut Graph, ctx: &Ctx, w: &Waveform) -> Result<Var> {
        if self.feature_len(w.len()).is_none() {
            return invalid(format!("waveform of {} samples is too short", w.len()));
        }
        let mut x = g.constant(Tensor::new(vec![w.len(), 1], w.samples.clone())?);
        for conv in &self.convs {
            let y = conv.forward(g, ctx, x)?;
            x = g.gelu(y)?;
        }
        self.norm.forward(g, ctx, x)
    }

    /// Two stride-2 convolutions: `[T0, d]` to `[ceil(T0/4), d]`.
    pub fn downsample(&self, g: &mut Graph, ctx: &Ctx, x: Var, mask: &[bool]) -> Result<FrameFeatures> {
        let t0 = g.shape(x)[0];
        if t0 < 4 {
            return invalid(format!("downsampling needs at least 4 frames, got {t0}"));
        }
        if mask.len() != t0 {
            return invalid(format!("mask of {} for {t0} frames", mask.len()));
        }
        let mut v = x;
        let mut m = mask.to_vec();
        for conv in &self.down {
            let y = conv.forward(g, ctx, v)?;
            v = g.gelu(y)?;
            m = downsample_mask(&m);
        }
        Ok(FrameFeatures { values: v, mask: m })
    }

    pub fn downsampled_len(t0: usize) -> usize {
        t0.div_ceil(2).div_ceil(2)
    }
}

/// Output frame `o` of a kernel-3, stride-2, pad-1 convolution is centred on
/// input frame `2o` and inherits its mask bit.
pub fn downsample_mask(mask: &[bool]) -> Vec<bool> {
    (0..mask.len().div_ceil(2)).map(|o| mask[2 * o]).collect()
}
