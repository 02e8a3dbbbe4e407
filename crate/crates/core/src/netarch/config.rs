use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::conv_output_dim;
use crate::tensor::LrnParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
}

/// One convolutional stage: conv, ReLU, optional LRN, optional max-pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub kernel: usize,
    /// Unscaled width; divided by `scale_factor`.
    pub out_channels: usize,
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default)]
    pub pool: Option<PoolSpec>,
    #[serde(default)]
    pub lrn: bool,
}

impl ConvSpec {
    const fn new(kernel: usize, out_channels: usize, stride: usize, padding: usize, pool: bool, lrn: bool) -> Self {
        ConvSpec {
            kernel,
            out_channels,
            stride,
            padding,
            pool: if pool { Some(PoolSpec { window: 3, stride: 2 }) } else { None },
            lrn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub conv_specs: Vec<ConvSpec>,
    pub fc6_units: usize,
    pub fc7_units: usize,
    pub fc8_units: usize,
    pub classifier_units: usize,
    pub gru_hidden: usize,
    pub dropout_p: f64,
    pub lrn: LrnParams,
    pub scale_factor: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_height: 240,
            input_width: 320,
            conv_specs: vec![
                ConvSpec::new(11, 96, 4, 0, true, true),
                ConvSpec::new(5, 256, 1, 2, true, true),
                ConvSpec::new(3, 384, 1, 1, false, false),
                ConvSpec::new(3, 384, 1, 1, false, false),
                ConvSpec::new(3, 256, 1, 1, true, false),
            ],
            fc6_units: 4096,
            fc7_units: 4096,
            fc8_units: 1024,
            classifier_units: 512,
            gru_hidden: 256,
            dropout_p: 0.5,
            lrn: LrnParams::default(),
            scale_factor: 1,
        }
    }
}

impl ArchConfig {
    /// AlexNet widths divided by 16 with a conv stack small enough for
    /// frames of a few dozen pixels: 5×5/2 first stage, 3×3 afterwards,
    /// pooling after Conv1 and Conv2 only.
    pub fn desk(input_height: usize, input_width: usize) -> Self {
        ArchConfig {
            input_height,
            input_width,
            conv_specs: vec![
                ConvSpec::new(5, 96, 2, 2, true, true),
                ConvSpec::new(3, 256, 1, 1, true, true),
                ConvSpec::new(3, 384, 1, 1, false, false),
                ConvSpec::new(3, 384, 1, 1, false, false),
                ConvSpec::new(3, 256, 1, 1, false, false),
            ],
            scale_factor: 16,
            ..ArchConfig::default()
        }
    }

    fn scaled(&self, what: &str, width: usize) -> Result<usize> {
        let w = width / self.scale_factor;
        if w == 0 {
            return Err(Error::config(format!("{what} width {width} vanishes at scale {}", self.scale_factor)));
        }
        Ok(w)
    }

    /// Validates the config and computes every layer's shape.
    pub fn resolve(&self) -> Result<ResolvedArch> {
        if self.scale_factor == 0 {
            return Err(Error::config("scale_factor must be ≥ 1"));
        }
        if self.fc6_units % self.scale_factor != 0 {
            return Err(Error::config(format!(
                "fc6_units {} not divisible by scale_factor {}",
                self.fc6_units, self.scale_factor
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        if self.lrn.n == 0 {
            return Err(Error::config("LRN window n must be ≥ 1"));
        }
        if self.input_height == 0 || self.input_width == 0 {
            return Err(Error::config("input size must be positive"));
        }
        let (mut c, mut h, mut w) = (3usize, self.input_height, self.input_width);
        let mut conv = Vec::with_capacity(self.conv_specs.len());
        for (i, s) in self.conv_specs.iter().enumerate() {
            let name = format!("conv{}", i + 1);
            if s.kernel == 0 || s.stride == 0 {
                return Err(Error::config(format!("{name}: kernel and stride must be ≥ 1")));
            }
            let out_channels = self.scaled(&name, s.out_channels)?;
            let (oh, ow) = match (
                conv_output_dim(h, s.kernel, s.stride, s.padding),
                conv_output_dim(w, s.kernel, s.stride, s.padding),
            ) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::config(format!(
                        "{name}: kernel {} does not fit {h}×{w} input with padding {}",
                        s.kernel, s.padding
                    )))
                }
            };
            let (mut ph, mut pw) = (oh, ow);
            if let Some(p) = s.pool {
                if p.window == 0 || p.stride == 0 || p.window > oh || p.window > ow {
                    return Err(Error::config(format!("{name}: pool window {} does not fit {oh}×{ow}", p.window)));
                }
                ph = (oh - p.window) / p.stride + 1;
                pw = (ow - p.window) / p.stride + 1;
            }
            conv.push(ResolvedConv {
                in_channels: c,
                out_channels,
                kernel: s.kernel,
                stride: s.stride,
                padding: s.padding,
                lrn: s.lrn,
                pool: s.pool,
                conv_height: oh,
                conv_width: ow,
                out_height: ph,
                out_width: pw,
            });
            c = out_channels;
            h = ph;
            w = pw;
        }
        Ok(ResolvedArch {
            in_channels: 3,
            input_height: self.input_height,
            input_width: self.input_width,
            conv,
            fc6_inputs: c * h * w,
            fc6_units: self.fc6_units / self.scale_factor,
            fc7_units: self.scaled("fc7", self.fc7_units)?,
            fc8_units: self.scaled("fc8", self.fc8_units)?,
            classifier_units: self.scaled("classifier", self.classifier_units)?,
            gru_hidden: self.scaled("gru", self.gru_hidden)?,
        })
    }

    /// First Conv1..FC6 layer at which two configs produce different
    /// parameter shapes or activations, if any.
    pub fn first_trunk_mismatch(&self, other: &ArchConfig) -> Option<String> {
        let (a, b) = match (self.resolve(), other.resolve()) {
            (Ok(a), Ok(b)) => (a, b),
            _ => return Some("config".into()),
        };
        if (a.input_height, a.input_width) != (b.input_height, b.input_width) {
            return Some("input".into());
        }
        for i in 0..a.conv.len().max(b.conv.len()) {
            let same = match (a.conv.get(i), b.conv.get(i)) {
                (Some(x), Some(y)) => x == y && (!x.lrn || self.lrn == other.lrn),
                _ => false,
            };
            if !same {
                return Some(format!("conv{}", i + 1));
            }
        }
        if (a.fc6_inputs, a.fc6_units) != (b.fc6_inputs, b.fc6_units) {
            return Some("fc6".into());
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedConv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub lrn: bool,
    pub pool: Option<PoolSpec>,
    pub conv_height: usize,
    pub conv_width: usize,
    /// Spatial size after the optional pool.
    pub out_height: usize,
    pub out_width: usize,
}

/// Scaled widths and spatial sizes of every layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedArch {
    pub in_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub conv: Vec<ResolvedConv>,
    pub fc6_inputs: usize,
    pub fc6_units: usize,
    pub fc7_units: usize,
    pub fc8_units: usize,
    pub classifier_units: usize,
    pub gru_hidden: usize,
}
