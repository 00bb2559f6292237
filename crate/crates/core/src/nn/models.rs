use rand::Rng;

use super::{AdaptiveAvgPool2d, BasicBlock, BatchNorm2d, Conv2d, Flatten, Layer, Linear, MaxPool2d, Relu, Sequential};

pub const RESNET18_FEATURES: usize = 512;
pub const TINY_CNN_FEATURES: usize = 256;

/// ResNet-18 feature extractor (no classifier), parameter names matching
/// torchvision so its published weights load directly.
pub fn resnet18(rng: &mut impl Rng) -> Sequential {
    fn stage(in_c: usize, out_c: usize, stride: usize, rng: &mut impl Rng) -> Sequential {
        Sequential::indexed(vec![
            Box::new(BasicBlock::new(in_c, out_c, stride, rng)) as Box<dyn Layer>,
            Box::new(BasicBlock::new(out_c, out_c, 1, rng)),
        ])
    }
    let conv1 = Conv2d::new(3, 64, 7, 2, 3, false, rng);
    let layer1 = stage(64, 64, 1, rng);
    let layer2 = stage(64, 128, 2, rng);
    let layer3 = stage(128, 256, 2, rng);
    let layer4 = stage(256, 512, 2, rng);
    Sequential::new()
        .push("conv1", conv1)
        .push("bn1", BatchNorm2d::new(64))
        .push("relu", Relu::new())
        .push("maxpool", MaxPool2d::new(3, 2, 1))
        .push("layer1", layer1)
        .push("layer2", layer2)
        .push("layer3", layer3)
        .push("layer4", layer4)
        .push("avgpool", AdaptiveAvgPool2d::new(1, 1))
        .push("flatten", Flatten::new())
}

/// Three conv/ReLU stages pooled to a 4x4x16 grid.
pub fn tiny_cnn(rng: &mut impl Rng) -> Sequential {
    Sequential::new()
        .push("conv1", Conv2d::new(3, 8, 3, 1, 1, true, rng))
        .push("relu1", Relu::new())
        .push("pool1", MaxPool2d::new(2, 2, 0))
        .push("conv2", Conv2d::new(8, 16, 3, 1, 1, true, rng))
        .push("relu2", Relu::new())
        .push("pool2", MaxPool2d::new(2, 2, 0))
        .push("conv3", Conv2d::new(16, 16, 3, 1, 1, true, rng))
        .push("relu3", Relu::new())
        .push("pool3", AdaptiveAvgPool2d::new(4, 4))
        .push("flatten", Flatten::new())
}

/// Fully connected stack `widths[0] -> ... -> widths[n-1]` with ReLU after
/// every layer but the last.
pub fn mlp(widths: &[usize], rng: &mut impl Rng) -> Sequential {
    let mut layers: Vec<Box<dyn Layer>> = Vec::new();
    for (i, pair) in widths.windows(2).enumerate() {
        layers.push(Box::new(Linear::new(pair[0], pair[1], rng)));
        if i + 2 < widths.len() {
            layers.push(Box::new(Relu::new()));
        }
    }
    Sequential::indexed(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{parameter_count, state_dict, Tensor};
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn resnet18_shapes_and_names() {
        let net = resnet18(&mut ChaCha8Rng::seed_from_u64(0));
        // torchvision resnet18 minus the 512x1000 classifier
        assert_eq!(parameter_count(&net), 11_689_512 - 513_000);
        let names: Vec<String> = state_dict(&net).into_iter().map(|(n, _)| n).collect();
        for key in [
            "conv1.weight",
            "bn1.running_var",
            "layer2.0.downsample.0.weight",
            "layer4.1.bn2.bias",
        ] {
            assert!(names.iter().any(|n| n == key), "{key}");
        }
        let y = net.forward(&Tensor::zeros(IxDyn(&[1, 3, 64, 64])));
        assert_eq!(y.shape(), &[1, RESNET18_FEATURES]);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tiny_cnn_feature_width() {
        let net = tiny_cnn(&mut ChaCha8Rng::seed_from_u64(0));
        let y = net.forward(&Tensor::zeros(IxDyn(&[2, 3, 90, 90])));
        assert_eq!(y.shape(), &[2, TINY_CNN_FEATURES]);
    }

    #[test]
    fn mlp_layout() {
        let net = mlp(&[4, 3, 1], &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(net.len(), 3);
        assert_eq!(parameter_count(&net), 4 * 3 + 3 + 3 + 1);
    }
}
