use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel size and output channels of one layer of the convolutional head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLayer {
    pub kernel: usize,
    pub channels: usize,
}

/// Conv count and channel width of one feature block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub convs: usize,
    pub channels: usize,
}

/// Architecture of a VGG-style fully-convolutional classifier.
///
/// Each block is `[conv3×3 → ReLU] × convs → dropout → maxpool 2×2`.
/// The head replaces the dense classifier with convolutions: every head
/// layer except the last is followed by ReLU and dropout, the last emits
/// one channel per class, and global average pooling turns its spatial
/// map into logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant_name: String,
    pub blocks: Vec<Block>,
    pub head: Vec<HeadLayer>,
    pub dropout_rate: f64,
    pub num_classes: usize,
    pub input_size: usize,
    pub input_channels: usize,
}

/// Shape of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

pub const CLASS_NAMES: [&str; 2] = ["normal", "glaucoma"];

impl ModelConfig {
    /// VGG16 feature blocks with the dense layers converted to convolutions
    /// (7×7×4096, 1×1×4096) and a 2-channel output layer.
    pub fn vgg16_fcn() -> Self {
        let blocks = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)]
            .map(|(convs, channels)| Block { convs, channels })
            .to_vec();
        Self {
            variant_name: "vgg16-fcn".into(),
            blocks,
            head: vec![
                HeadLayer { kernel: 7, channels: 4096 },
                HeadLayer { kernel: 1, channels: 4096 },
                HeadLayer { kernel: 1, channels: 2 },
            ],
            dropout_rate: 0.5,
            num_classes: 2,
            input_size: 224,
            input_channels: 3,
        }
    }

    /// Three single-conv blocks (8, 16, 32 channels) at 32×32 input.
    pub fn tiny() -> Self {
        Self::tiny_at(32)
    }

    /// The tiny variant at a given input size (multiple of 8). The first
    /// head layer covers the whole final feature map, so the head output is
    /// 1×1 like the full-scale model.
    pub fn tiny_at(input_size: usize) -> Self {
        let blocks = [(1, 8), (1, 16), (1, 32)]
            .map(|(convs, channels)| Block { convs, channels })
            .to_vec();
        Self {
            variant_name: format!("tiny-{input_size}"),
            blocks,
            head: vec![
                HeadLayer { kernel: (input_size / 8).max(1), channels: 64 },
                HeadLayer { kernel: 1, channels: 2 },
            ],
            dropout_rate: 0.5,
            num_classes: 2,
            input_size,
            input_channels: 3,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "vgg16" | "vgg16-fcn" => Some(Self::vgg16_fcn()),
            "tiny" | "tiny-32" => Some(Self::tiny()),
            "tiny64" | "tiny-64" => Some(Self::tiny_at(64)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.blocks.is_empty() {
            return bad("at least one feature block is required".into());
        }
        if self.blocks.iter().any(|b| b.convs == 0 || b.channels == 0) {
            return bad("every block needs at least one conv and one channel".into());
        }
        if self.head.is_empty() || self.head.iter().any(|h| h.kernel == 0 || h.channels == 0) {
            return bad("head layers need positive kernel and channel counts".into());
        }
        if self.num_classes == 0 || self.input_size == 0 || self.input_channels == 0 {
            return bad("num_classes, input_size and input_channels must be positive".into());
        }
        let div = 1usize << self.blocks.len();
        if !self.input_size.is_multiple_of(div) {
            return bad(format!(
                "input_size {} not divisible by 2^{} = {div}",
                self.input_size,
                self.blocks.len()
            ));
        }
        let last = self.head.last().map(|h| h.channels).unwrap_or_default();
        if last != self.num_classes {
            return bad(format!(
                "final head layer has {last} channels but num_classes is {}",
                self.num_classes
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        let mut spatial = self.feature_map_size();
        for (i, h) in self.head.iter().enumerate() {
            if h.kernel > spatial {
                return bad(format!(
                    "head layer {} kernel {} exceeds its {spatial}×{spatial} input",
                    i + 1,
                    h.kernel
                ));
            }
            spatial = spatial - h.kernel + 1;
        }
        Ok(())
    }

    /// Spatial extent after the last pooling layer.
    pub fn feature_map_size(&self) -> usize {
        self.input_size >> self.blocks.len()
    }

    /// Spatial extent entering block `b` (0-based).
    pub fn block_input_size(&self, b: usize) -> usize {
        self.input_size >> b
    }

    /// Name of the activation Grad-CAM uses by default: the output of the
    /// last convolution (after ReLU) in the final feature block.
    pub fn gradcam_layer(&self) -> String {
        let b = self.blocks.len();
        format!("block{b}_conv{}", self.blocks[b - 1].convs)
    }

    /// Every parameter in forward order, named `blockB_convI.weight|bias`
    /// and `head_H.weight|bias` (1-based).
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut c_in = self.input_channels;
        for (b, block) in self.blocks.iter().enumerate() {
            for i in 0..block.convs {
                let stem = format!("block{}_conv{}", b + 1, i + 1);
                specs.push(ParamSpec {
                    name: format!("{stem}.weight"),
                    shape: vec![block.channels, c_in, 3, 3],
                });
                specs.push(ParamSpec { name: format!("{stem}.bias"), shape: vec![block.channels] });
                c_in = block.channels;
            }
        }
        for (h, layer) in self.head.iter().enumerate() {
            let stem = format!("head_{}", h + 1);
            specs.push(ParamSpec {
                name: format!("{stem}.weight"),
                shape: vec![layer.channels, c_in, layer.kernel, layer.kernel],
            });
            specs.push(ParamSpec { name: format!("{stem}.bias"), shape: vec![layer.channels] });
            c_in = layer.channels;
        }
        specs
    }

    pub fn parameter_count(&self) -> usize {
        self.param_specs().iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }
}
