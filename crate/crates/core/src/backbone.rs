//! Edge feature extractor: depthwise-separable convolutions, a stack of
//! dilated convolutions, and a final separable transition to `[ℓ, d]`.
//!
//! Tensors are `[batch, time, channels]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv1dSpec, Var};
use crate::error::{Error, Result};
use crate::nn::{init_batch_norm, init_conv, init_linear, Forward};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub out: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub dsc: Vec<ConvSpec>,
    pub ac_kernel: usize,
    pub ac_channels: usize,
    pub ac_layers: usize,
    /// Final transition; its `out` is the token width `d`.
    pub transition: ConvSpec,
}

impl BackboneConfig {
    /// Three stride-2 separable layers (32, 48, 64 channels), three dilated
    /// layers, and a stride-2 transition to `d`.
    pub fn standard(in_channels: usize, ac_channels: usize, d: usize) -> Self {
        BackboneConfig {
            in_channels,
            dsc: vec![
                ConvSpec {
                    kernel: 5,
                    stride: 2,
                    out: 32,
                },
                ConvSpec {
                    kernel: 5,
                    stride: 2,
                    out: 48,
                },
                ConvSpec {
                    kernel: 5,
                    stride: 2,
                    out: 64,
                },
            ],
            ac_kernel: 3,
            ac_channels,
            ac_layers: 3,
            transition: ConvSpec {
                kernel: 5,
                stride: 2,
                out: d,
            },
        }
    }

    pub fn d(&self) -> usize {
        self.transition.out
    }

    /// Dilation of every atrous layer: `1, 2, 4, ...`.
    pub fn dilations(&self) -> Vec<usize> {
        (0..self.ac_layers).map(|i| 1 << i).collect()
    }

    /// Token count `ℓ` for input length `t` (ceil division per strided layer).
    pub fn output_len(&self, t: usize) -> usize {
        self.dsc
            .iter()
            .chain([&self.transition])
            .fold(t, |t, s| t.div_ceil(s.stride))
    }

    pub fn validate(&self) -> Result<()> {
        let specs = self.dsc.iter().chain([&self.transition]);
        for s in specs {
            if s.kernel == 0 || s.stride == 0 || s.out == 0 {
                return Err(Error::Config(format!(
                    "backbone layer {s:?} has a zero extent"
                )));
            }
        }
        if self.in_channels == 0 || self.ac_kernel == 0 || self.ac_channels == 0 {
            return Err(Error::Config(
                "backbone channels and kernels must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Exact trainable scalar count, batch-norm affine terms included.
    pub fn param_count(&self) -> usize {
        let mut c = self.in_channels;
        let mut total = 0;
        for s in &self.dsc {
            total += dsc_param_count(s.kernel, c, s.out) + 2 * s.out;
            c = s.out;
        }
        for _ in 0..self.ac_layers {
            total += self.ac_kernel * c * self.ac_channels + 2 * self.ac_channels;
            c = self.ac_channels;
        }
        total
            + dsc_param_count(self.transition.kernel, c, self.transition.out)
            + 2 * self.transition.out
    }
}

/// Depthwise `k * c_in` plus pointwise `c_in * c_out`.
pub fn dsc_param_count(k: usize, c_in: usize, c_out: usize) -> usize {
    k * c_in + c_in * c_out
}

/// Receptive field of stride-1 convolutions stacked with the given dilations.
pub fn receptive_field(kernel: usize, dilations: &[usize]) -> usize {
    1 + dilations.iter().map(|d| (kernel - 1) * d).sum::<usize>()
}

/// Zero padding that makes a strided convolution produce `ceil(t / stride)`
/// outputs, split as evenly as possible (extra on the right).
pub fn ceil_mode_padding(
    t: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
) -> (usize, usize) {
    let out = t.div_ceil(stride);
    let span = dilation * (kernel - 1) + 1;
    let total = ((out - 1) * stride + span).saturating_sub(t);
    (total / 2, total - total / 2)
}

/// Depthwise then pointwise convolution, before normalization.
/// Reads `{prefix}.depthwise` `[c_in, 1, k]` and `{prefix}.pointwise.weight` `[c_in, m]`.
pub fn dsc_linear<S: Scalar>(
    fw: &mut Forward<S>,
    x: Var,
    prefix: &str,
    spec: ConvSpec,
) -> Result<Var> {
    let [_, t, c_in] = shape3(fw, x, "dsc")?;
    let (pad_left, pad_right) = ceil_mode_padding(t, spec.kernel, spec.stride, 1);
    if spec.kernel > t + pad_left + pad_right {
        return Err(Error::shape(
            "dsc",
            format!(
                "kernel {} exceeds padded input {}",
                spec.kernel,
                t + pad_left + pad_right
            ),
        ));
    }
    let w = fw.p(&format!("{prefix}.depthwise"))?;
    let conv = Conv1dSpec {
        stride: spec.stride,
        dilation: 1,
        pad_left,
        pad_right,
        groups: c_in,
    };
    let h = fw.graph.conv1d(x, w, conv)?;
    fw.linear(h, &format!("{prefix}.pointwise"))
}

pub fn dsc_forward<S: Scalar>(
    fw: &mut Forward<S>,
    x: Var,
    prefix: &str,
    spec: ConvSpec,
) -> Result<Var> {
    let h = dsc_linear(fw, x, prefix, spec)?;
    let h = fw.batch_norm(h, &format!("{prefix}.bn"))?;
    Ok(fw.graph.relu(h))
}

/// Full dilated convolution with same-length padding, before normalization.
/// Reads `{prefix}.conv` `[m, c_in, k]`.
pub fn ac_linear<S: Scalar>(
    fw: &mut Forward<S>,
    x: Var,
    prefix: &str,
    dilation: usize,
) -> Result<Var> {
    if dilation < 1 {
        return Err(Error::Config(format!(
            "dilation must be >= 1, got {dilation}"
        )));
    }
    let w = fw.p(&format!("{prefix}.conv"))?;
    let k = fw.graph.shape(w)[2];
    let total = dilation * (k - 1);
    let conv = Conv1dSpec {
        stride: 1,
        dilation,
        pad_left: total / 2,
        pad_right: total - total / 2,
        groups: 1,
    };
    fw.graph.conv1d(x, w, conv)
}

pub fn ac_forward<S: Scalar>(
    fw: &mut Forward<S>,
    x: Var,
    prefix: &str,
    dilation: usize,
) -> Result<Var> {
    let h = ac_linear(fw, x, prefix, dilation)?;
    let h = fw.batch_norm(h, &format!("{prefix}.bn"))?;
    Ok(fw.graph.relu(h))
}

fn shape3<S: Scalar>(fw: &Forward<S>, x: Var, op: &'static str) -> Result<[usize; 3]> {
    let s = fw.graph.shape(x);
    match s {
        [b, t, c] => Ok([*b, *t, *c]),
        _ => Err(Error::shape(
            op,
            format!("expected [batch, time, channels], got {s:?}"),
        )),
    }
}

/// Registers every backbone tensor under `{prefix}.`.
pub fn init_backbone<S: Scalar, R: Rng>(
    cfg: &BackboneConfig,
    store: &mut ParamStore<S>,
    prefix: &str,
    rng: &mut R,
) {
    let mut c = cfg.in_channels;
    let dsc = |store: &mut ParamStore<S>, name: String, c_in: usize, s: &ConvSpec, rng: &mut R| {
        init_conv(store, &format!("{name}.depthwise"), c_in, 1, s.kernel, rng);
        init_linear(store, &format!("{name}.pointwise"), c_in, s.out, false, rng);
        init_batch_norm(store, &format!("{name}.bn"), s.out);
    };
    for (i, s) in cfg.dsc.iter().enumerate() {
        dsc(store, format!("{prefix}.dsc{i}"), c, s, rng);
        c = s.out;
    }
    for i in 0..cfg.ac_layers {
        init_conv(
            store,
            &format!("{prefix}.ac{i}.conv"),
            cfg.ac_channels,
            c,
            cfg.ac_kernel,
            rng,
        );
        init_batch_norm(store, &format!("{prefix}.ac{i}.bn"), cfg.ac_channels);
        c = cfg.ac_channels;
    }
    dsc(
        store,
        format!("{prefix}.transition"),
        c,
        &cfg.transition,
        rng,
    );
}

/// `X: [batch, T, C] -> Z: [batch, ℓ, d]`.
pub fn backbone_forward<S: Scalar>(
    fw: &mut Forward<S>,
    cfg: &BackboneConfig,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let [_, t, c] = shape3(fw, x, "backbone")?;
    if c != cfg.in_channels {
        return Err(Error::shape(
            "backbone",
            format!("expected {} channels, got {c}", cfg.in_channels),
        ));
    }
    if !fw.graph.value(x).is_finite() {
        return Err(Error::Numeric(
            "backbone input contains non-finite values".into(),
        ));
    }
    let mut h = x;
    for (i, s) in cfg.dsc.iter().enumerate() {
        h = dsc_forward(fw, h, &format!("{prefix}.dsc{i}"), *s)?;
    }
    for (i, d) in cfg.dilations().into_iter().enumerate() {
        h = ac_forward(fw, h, &format!("{prefix}.ac{i}"), d)?;
    }
    h = dsc_forward(fw, h, &format!("{prefix}.transition"), cfg.transition)?;
    debug_assert_eq!(fw.graph.shape(h)[1], cfg.output_len(t));
    Ok(h)
}
