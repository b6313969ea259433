//! Residual convolutional encoder: turns a low-resolution image into the
//! latent feature map the sampler queries.
//!
//! Structure: head conv C->D, a chain of residual blocks
//! (conv3x3 / relu / conv3x3 / scaled skip-add, no normalization), a tail
//! conv D->D, and a global skip from the head output. Spatial dimensions
//! are preserved end to end; there is no upsampling tail because the
//! sampler queries the map at LR resolution.

use crate::error::{Error, Result};
use crate::imageio::ImageBuffer;
use crate::numerics::{Graph, Scalar, Tensor, Value};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CONV_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub num_blocks: usize,
    pub width: usize,
    pub in_channels: usize,
    pub residual_scale: f64,
    pub global_skip: bool,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks < 1 {
            return Err(Error::config("num_blocks", "must be >= 1"));
        }
        if self.width < 1 {
            return Err(Error::config("width", "must be >= 1"));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::config("in_channels", "must be 1 or 3"));
        }
        if !(self.residual_scale > 0.0 && self.residual_scale <= 1.0) {
            return Err(Error::config("residual_scale", "must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Latent grid produced by the backbone, shape [P, Q, D].
#[derive(Debug, Clone)]
pub struct FeatureMap<S: Scalar> {
    pub values: Tensor<S>,
}

impl<S: Scalar> FeatureMap<S> {
    pub fn rows(&self) -> usize {
        self.values.shape[0]
    }
    pub fn cols(&self) -> usize {
        self.values.shape[1]
    }
    pub fn depth(&self) -> usize {
        self.values.shape[2]
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer<S: Scalar> {
    /// [k, k, cin, cout]
    pub weight: Tensor<S>,
    /// [cout]
    pub bias: Tensor<S>,
}

impl<S: Scalar> ConvLayer<S> {
    fn init(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Result<Self> {
        let bound = S::from_f64(1.0 / ((CONV_KERNEL * CONV_KERNEL * cin) as f64).sqrt());
        Ok(ConvLayer {
            weight: Tensor::uniform_from(&[CONV_KERNEL, CONV_KERNEL, cin, cout], rng, -bound, bound)?
                .with_grad(),
            bias: Tensor::uniform_from(&[cout], rng, -bound, bound)?.with_grad(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ResidualBlock<S: Scalar> {
    pub conv1: ConvLayer<S>,
    pub conv2: ConvLayer<S>,
}

#[derive(Debug, Clone)]
pub struct Backbone<S: Scalar> {
    pub cfg: BackboneConfig,
    pub head: ConvLayer<S>,
    pub blocks: Vec<ResidualBlock<S>>,
    pub tail: ConvLayer<S>,
}

/// Tape handles for one forward pass of the backbone parameters.
pub struct BoundBackbone {
    cfg: BackboneConfig,
    head: (Value, Value),
    blocks: Vec<[(Value, Value); 2]>,
    tail: (Value, Value),
}

impl<S: Scalar> Backbone<S> {
    /// Deterministic init from a seed; uniform +-1/sqrt(fan_in) throughout.
    pub fn init(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.width;
        let head = ConvLayer::init(&mut rng, cfg.in_channels, d)?;
        let blocks = (0..cfg.num_blocks)
            .map(|_| {
                Ok(ResidualBlock {
                    conv1: ConvLayer::init(&mut rng, d, d)?,
                    conv2: ConvLayer::init(&mut rng, d, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let tail = ConvLayer::init(&mut rng, d, d)?;
        Ok(Backbone {
            cfg: cfg.clone(),
            head,
            blocks,
            tail,
        })
    }

    /// Parameters in checkpoint order with their key paths.
    pub fn params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = Vec::new();
        out.push(("backbone.head.weight".into(), &self.head.weight));
        out.push(("backbone.head.bias".into(), &self.head.bias));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("backbone.block{i}.conv1.weight"), &b.conv1.weight));
            out.push((format!("backbone.block{i}.conv1.bias"), &b.conv1.bias));
            out.push((format!("backbone.block{i}.conv2.weight"), &b.conv2.weight));
            out.push((format!("backbone.block{i}.conv2.bias"), &b.conv2.bias));
        }
        out.push(("backbone.tail.weight".into(), &self.tail.weight));
        out.push(("backbone.tail.bias".into(), &self.tail.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = Vec::new();
        out.push(("backbone.head.weight".into(), &mut self.head.weight));
        out.push(("backbone.head.bias".into(), &mut self.head.bias));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("backbone.block{i}.conv1.weight"), &mut b.conv1.weight));
            out.push((format!("backbone.block{i}.conv1.bias"), &mut b.conv1.bias));
            out.push((format!("backbone.block{i}.conv2.weight"), &mut b.conv2.weight));
            out.push((format!("backbone.block{i}.conv2.bias"), &mut b.conv2.bias));
        }
        out.push(("backbone.tail.weight".into(), &mut self.tail.weight));
        out.push(("backbone.tail.bias".into(), &mut self.tail.bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every parameter as a graph leaf, in checkpoint order.
    pub fn bind(&self, g: &mut Graph<S>, leaves: &mut Vec<Value>) -> Result<BoundBackbone> {
        let mut leaf_pair = |g: &mut Graph<S>, layer: &ConvLayer<S>| -> Result<(Value, Value)> {
            let w = g.leaf(&layer.weight)?;
            let b = g.leaf(&layer.bias)?;
            leaves.push(w);
            leaves.push(b);
            Ok((w, b))
        };
        let head = leaf_pair(g, &self.head)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let c1 = leaf_pair(g, &block.conv1)?;
            let c2 = leaf_pair(g, &block.conv2)?;
            blocks.push([c1, c2]);
        }
        let tail = leaf_pair(g, &self.tail)?;
        Ok(BoundBackbone {
            cfg: self.cfg.clone(),
            head,
            blocks,
            tail,
        })
    }

    /// Inference-path feature extraction: one throwaway graph, no gradients.
    pub fn extract_features(&self, img: &ImageBuffer) -> Result<FeatureMap<S>> {
        let mut g = Graph::new();
        let input = g.leaf(&img.to_tensor::<S>())?;
        let mut leaves = Vec::new();
        let bound = self.bind(&mut g, &mut leaves)?;
        let psi = bound.forward(&mut g, input)?;
        Ok(FeatureMap {
            values: g.detach(psi),
        })
    }
}

impl BoundBackbone {
    fn conv<S: Scalar>(g: &mut Graph<S>, layer: (Value, Value), x: Value) -> Result<Value> {
        let y = g.conv2d(x, layer.0)?;
        g.bias_add(y, layer.1)
    }

    /// Forward pass over an `[H, W, C]` input value; output is `[H, W, D]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, input: Value) -> Result<Value> {
        let shape = g.shape(input).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.in_channels {
            return Err(Error::shape(
                "backbone input",
                &[0, 0, self.cfg.in_channels],
                &shape,
            ));
        }
        let scale = S::from_f64(self.cfg.residual_scale);
        let head_out = Self::conv(g, self.head, input)?;
        let mut body = head_out;
        for [c1, c2] in &self.blocks {
            let t = Self::conv(g, *c1, body)?;
            let t = g.relu(t)?;
            let t = Self::conv(g, *c2, t)?;
            let t = g.scale(t, scale)?;
            body = g.add(body, t)?;
        }
        body = Self::conv(g, self.tail, body)?;
        if self.cfg.global_skip {
            g.add(head_out, body)
        } else {
            Ok(body)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(b: usize, d: usize, c: usize) -> BackboneConfig {
        BackboneConfig {
            num_blocks: b,
            width: d,
            in_channels: c,
            residual_scale: 1.0,
            global_skip: true,
        }
    }

    fn rand_image(seed: u64, h: usize, w: usize, c: usize) -> ImageBuffer {
        let t = Tensor::<f32>::uniform(&[h, w, c], seed, 0.0, 1.0).unwrap();
        ImageBuffer::new(h, w, c, t.data).unwrap()
    }

    /// Closed-form conv parameter count: head + B blocks + tail, each conv
    /// carrying k*k*cin*cout weights and cout biases.
    fn expected_params(b: usize, d: usize, c: usize) -> usize {
        let conv = |cin: usize, cout: usize| 9 * cin * cout + cout;
        conv(c, d) + b * 2 * conv(d, d) + conv(d, d)
    }

    #[test]
    fn param_count_matches_hand_formula() {
        let net = Backbone::<f32>::init(&cfg(16, 64, 3), 0).unwrap();
        assert_eq!(net.param_count(), expected_params(16, 64, 3));
        assert_eq!(net.param_count(), 1_220_416);

        let net = Backbone::<f32>::init(&cfg(4, 16, 1), 0).unwrap();
        assert_eq!(net.param_count(), expected_params(4, 16, 1));
    }

    #[test]
    fn same_seed_same_weights() {
        let collect = |net: &Backbone<f32>| -> Vec<(String, Vec<f32>)> {
            net.params()
                .into_iter()
                .map(|(path, t)| (path, t.data.clone()))
                .collect()
        };
        let a = Backbone::<f32>::init(&cfg(2, 8, 1), 42).unwrap();
        let b = Backbone::<f32>::init(&cfg(2, 8, 1), 42).unwrap();
        assert_eq!(collect(&a), collect(&b));
    }

    #[test]
    fn smallest_legal_net_constructs() {
        let net = Backbone::<f32>::init(&cfg(1, 2, 1), 0).unwrap();
        let img = rand_image(1, 4, 4, 1);
        let psi = net.extract_features(&img).unwrap();
        assert_eq!(psi.values.shape, vec![4, 4, 2]);
    }

    #[test]
    fn spatial_dims_preserved_at_paper_config() {
        let net = Backbone::<f32>::init(&cfg(16, 64, 3), 7).unwrap();
        let img = rand_image(2, 48, 48, 3);
        let psi = net.extract_features(&img).unwrap();
        assert_eq!(psi.values.shape, vec![48, 48, 64]);
    }

    #[test]
    fn shape_rule_small() {
        let net = Backbone::<f32>::init(&cfg(2, 16, 1), 7).unwrap();
        let psi = net.extract_features(&rand_image(3, 16, 16, 1)).unwrap();
        assert_eq!(psi.values.shape, vec![16, 16, 16]);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let net = Backbone::<f32>::init(&cfg(1, 4, 3), 0).unwrap();
        assert!(net.extract_features(&rand_image(4, 6, 6, 1)).is_err());
    }

    #[test]
    fn zero_weights_give_zero_map() {
        let mut net = Backbone::<f32>::init(&cfg(2, 4, 1), 0).unwrap();
        for (_, t) in net.params_mut() {
            for v in &mut t.data {
                *v = 0.0;
            }
        }
        let psi = net.extract_features(&rand_image(5, 6, 6, 1)).unwrap();
        assert!(psi.values.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn translation_covariance_on_interior() {
        let net = Backbone::<f32>::init(&cfg(1, 3, 1), 11).unwrap();
        let (h, w) = (12, 12);
        // constant field with a random interior patch, so a 1-pixel shift
        // with constant fill is an exact translation
        let mut base = vec![0.5f32; h * w];
        let noise = Tensor::<f32>::uniform(&[3, 3], 5, 0.0, 1.0).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                base[(r + 5) * w + (c + 5)] = noise.data[r * 3 + c];
            }
        }
        let img1 = ImageBuffer::new(h, w, 1, base.clone()).unwrap();
        let mut shifted = vec![0.5f32; h * w];
        shifted[w..].copy_from_slice(&base[..w * (h - 1)]);
        let img2 = ImageBuffer::new(h, w, 1, shifted).unwrap();

        let f1 = net.extract_features(&img1).unwrap();
        let f2 = net.extract_features(&img2).unwrap();
        let d = f1.depth();
        // receptive border: (k-1)/2 per conv, 4 convs deep
        for r in 4..h - 5 {
            for c in 4..w - 4 {
                for ch in 0..d {
                    let a = f1.values.data[(r * w + c) * d + ch];
                    let b = f2.values.data[((r + 1) * w + c) * d + ch];
                    assert!((a - b).abs() < 1e-5, "({r},{c},{ch}): {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn every_param_gets_gradient_and_matches_f64_fd() {
        // f32 model; oracle is central finite differences on an f64 twin.
        let config = cfg(1, 2, 1);
        let net32 = Backbone::<f32>::init(&config, 13).unwrap();
        let img = rand_image(17, 6, 6, 1);

        // analytic f32 gradients of loss = sum(psi)
        let mut g = Graph::<f32>::new();
        let input = g.leaf(&img.to_tensor()).unwrap();
        let mut leaves = Vec::new();
        let bound = net32.bind(&mut g, &mut leaves).unwrap();
        let psi = bound.forward(&mut g, input).unwrap();
        let loss = g.sum(psi).unwrap();
        g.backward(loss).unwrap();
        let grads: Vec<Vec<f32>> = leaves.iter().map(|v| g.grad(*v).unwrap().to_vec()).collect();
        assert!(grads
            .iter()
            .all(|gr| gr.iter().all(|v| v.is_finite()) && gr.iter().any(|&v| v != 0.0)));

        // f64 twin with identical parameter values
        let mut net64 = Backbone::<f64>::init(&config, 13).unwrap();
        let promoted: Vec<Vec<f64>> = net32
            .params()
            .iter()
            .map(|(_, t)| t.data.iter().map(|&v| v as f64).collect())
            .collect();
        for ((_, t), src) in net64.params_mut().into_iter().zip(&promoted) {
            t.data = src.clone();
        }

        let eval = |net: &Backbone<f64>| -> f64 {
            let psi = net.extract_features(&img).unwrap();
            psi.values.data.iter().sum()
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        // spot-check the first few entries of every parameter tensor
        for (param_idx, grad) in grads.iter().enumerate() {
            for j in 0..grad.len().min(4) {
                let mut plus = net64.clone();
                plus.params_mut()[param_idx].1.data[j] += h;
                let mut minus = net64.clone();
                minus.params_mut()[param_idx].1.data[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = grad[j] as f64;
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-4, "worst rel err {worst}");
    }
}
