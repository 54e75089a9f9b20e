//! Architectures used by the experiments and tests.

use super::spec::LayerSpec;

/// Per-example input of the VGG variant: 3x32x32 RGB images.
pub const VGG_INPUT: [usize; 3] = [3, 32, 32];

fn conv(cin: usize, cout: usize) -> LayerSpec {
    LayerSpec::Conv {
        in_channels: cin,
        out_channels: cout,
        kernel: 3,
        stride: 1,
        pad: 1,
    }
}

fn pool() -> LayerSpec {
    LayerSpec::Pooling { window: 2, stride: 2 }
}

/// The 11-layer VGG variant for 3x32x32 inputs: seven 3x3 convolutions
/// (64, 64, 128, 128, 256, 256, 256 channels) and three fully connected
/// layers 4096-1024-1024-10. Three 2x2 poolings bring 32x32 down to 4x4, so
/// the flattened conv output is 256*4*4 = 4096 features.
pub fn vgg_variant_spec() -> LayerSpec {
    vgg_variant_spec_for_input(32, 32)
}

/// Same layer sequence for an `h x w` input (both divisible by 8). Only the
/// input width of the first FC layer changes: 256 * (h/8) * (w/8).
pub fn vgg_variant_spec_for_input(h: usize, w: usize) -> LayerSpec {
    let flat = 256 * (h / 8) * (w / 8);
    LayerSpec::Seq(vec![
        conv(3, 64),
        LayerSpec::Relu,
        conv(64, 64),
        LayerSpec::Relu,
        pool(),
        conv(64, 128),
        LayerSpec::Relu,
        conv(128, 128),
        LayerSpec::Relu,
        pool(),
        conv(128, 256),
        LayerSpec::Relu,
        conv(256, 256),
        LayerSpec::Relu,
        pool(),
        conv(256, 256),
        LayerSpec::Relu,
        LayerSpec::Reshape { shape: vec![flat] },
        LayerSpec::Linear { in_dim: flat, out_dim: 1024 },
        LayerSpec::Relu,
        LayerSpec::Dropout { keep_prob: 0.5 },
        LayerSpec::Linear { in_dim: 1024, out_dim: 1024 },
        LayerSpec::Relu,
        LayerSpec::Dropout { keep_prob: 0.5 },
        LayerSpec::Linear { in_dim: 1024, out_dim: 10 },
        LayerSpec::LogSoftmax,
    ])
}

/// Small 2-conv + 2-FC network for 3x8x8 inputs (about 52k parameters).
/// `classes` should be divisible by every MP group size it is run with.
pub fn toy_cnn_spec(classes: usize) -> LayerSpec {
    LayerSpec::Seq(vec![
        LayerSpec::Conv {
            in_channels: 3,
            out_channels: 8,
            kernel: 3,
            stride: 1,
            pad: 1,
        },
        LayerSpec::Relu,
        LayerSpec::Conv {
            in_channels: 8,
            out_channels: 16,
            kernel: 3,
            stride: 1,
            pad: 1,
        },
        LayerSpec::Relu,
        LayerSpec::Pooling { window: 2, stride: 2 },
        LayerSpec::Reshape { shape: vec![256] },
        LayerSpec::Linear { in_dim: 256, out_dim: 192 },
        LayerSpec::Relu,
        LayerSpec::Linear {
            in_dim: 192,
            out_dim: classes,
        },
        LayerSpec::LogSoftmax,
    ])
}
