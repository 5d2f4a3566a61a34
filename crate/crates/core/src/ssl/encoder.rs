//! Small convolutional encoder with hand-written backward passes.
//!
//! Three 3x3 stride-2 convolutions with ReLU halve the resolution three
//! times (64x64 in, 8x8 out), followed by a linear 1x1 projector to the
//! embedding dimension. No ReLU after the projector.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io::checkpoint::NamedTensor;
use crate::io::Raster;
use crate::Scalar;

use super::{Result, SslError};

/// Dense CHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub ch: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(ch: usize, h: usize, w: usize) -> Self {
        Self { ch, h, w, data: vec![S::zero(); ch * h * w] }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> S {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: S) {
        self.data[(c * self.h + y) * self.w + x] = value;
    }

    #[inline]
    pub fn add(&mut self, c: usize, y: usize, x: usize, value: S) {
        self.data[(c * self.h + y) * self.w + x] += value;
    }
}

/// RGB raster to a [0, 1]-normalized 3-channel tensor.
pub fn image_to_tensor<S: Scalar>(rgb: &Raster<[u8; 3]>) -> Tensor<S> {
    let (h, w) = (rgb.height(), rgb.width());
    let mut t = Tensor::zeros(3, h, w);
    let scale = S::from_f64(1.0 / 255.0).unwrap();
    for y in 0..h {
        for x in 0..w {
            let px = rgb.get(y, x);
            for c in 0..3 {
                t.set(c, y, x, S::from_u8(px[c]).unwrap() * scale);
            }
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<S> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    /// [out_ch, in_ch, ksize, ksize], row-major.
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> ConvLayer<S> {
    /// He-uniform initialization.
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_ch * ksize * ksize) as f64;
        let bound = S::from_f64((6.0 / fan_in).sqrt()).unwrap();
        let weight = (0..out_ch * in_ch * ksize * ksize)
            .map(|_| S::from_f64(rng.gen_range(-1.0..1.0)).unwrap() * bound)
            .collect();
        Self { in_ch, out_ch, ksize, stride, pad, weight, bias: vec![S::zero(); out_ch] }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.ksize) / self.stride + 1,
            (w + 2 * self.pad - self.ksize) / self.stride + 1,
        )
    }

    #[inline]
    fn w_at(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> S {
        self.weight[((oc * self.in_ch + ic) * self.ksize + ky) * self.ksize + kx]
    }

    pub fn forward(&self, input: &Tensor<S>) -> Tensor<S> {
        let (oh, ow) = self.out_size(input.h, input.w);
        let mut out = Tensor::zeros(self.out_ch, oh, ow);
        for oc in 0..self.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = self.bias[oc];
                    for ic in 0..self.in_ch {
                        for ky in 0..self.ksize {
                            let iy = (oy * self.stride + ky) as i64 - self.pad as i64;
                            if iy < 0 || iy >= input.h as i64 {
                                continue;
                            }
                            for kx in 0..self.ksize {
                                let ix = (ox * self.stride + kx) as i64 - self.pad as i64;
                                if ix < 0 || ix >= input.w as i64 {
                                    continue;
                                }
                                acc += self.w_at(oc, ic, ky, kx)
                                    * input.get(ic, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(oc, oy, ox, acc);
                }
            }
        }
        out
    }

    /// Gradients of the loss with respect to input, weights and biases,
    /// given dL/d(output).
    pub fn backward(
        &self,
        input: &Tensor<S>,
        grad_out: &Tensor<S>,
    ) -> (Tensor<S>, Vec<S>, Vec<S>) {
        let mut grad_in = Tensor::zeros(input.ch, input.h, input.w);
        let mut grad_w = vec![S::zero(); self.weight.len()];
        let mut grad_b = vec![S::zero(); self.bias.len()];
        for oc in 0..self.out_ch {
            for oy in 0..grad_out.h {
                for ox in 0..grad_out.w {
                    let go = grad_out.get(oc, oy, ox);
                    if go == S::zero() {
                        continue;
                    }
                    grad_b[oc] += go;
                    for ic in 0..self.in_ch {
                        for ky in 0..self.ksize {
                            let iy = (oy * self.stride + ky) as i64 - self.pad as i64;
                            if iy < 0 || iy >= input.h as i64 {
                                continue;
                            }
                            for kx in 0..self.ksize {
                                let ix = (ox * self.stride + kx) as i64 - self.pad as i64;
                                if ix < 0 || ix >= input.w as i64 {
                                    continue;
                                }
                                let widx =
                                    ((oc * self.in_ch + ic) * self.ksize + ky) * self.ksize + kx;
                                grad_w[widx] += go * input.get(ic, iy as usize, ix as usize);
                                grad_in.add(
                                    ic,
                                    iy as usize,
                                    ix as usize,
                                    go * self.weight[widx],
                                );
                            }
                        }
                    }
                }
            }
        }
        (grad_in, grad_w, grad_b)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { channels: vec![16, 24, 32], embed_dim: 32 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<S> {
    pub convs: Vec<ConvLayer<S>>,
    pub projector: ConvLayer<S>,
}

/// Forward activations needed by the backward pass.
pub struct EncoderCache<S> {
    /// Input to each conv layer (post-ReLU of the previous one).
    inputs: Vec<Tensor<S>>,
    /// Pre-ReLU conv outputs.
    preacts: Vec<Tensor<S>>,
    /// Input to the projector.
    proj_in: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct EncoderGrads<S> {
    pub convs: Vec<(Vec<S>, Vec<S>)>,
    pub projector: (Vec<S>, Vec<S>),
}

impl<S: Scalar> EncoderGrads<S> {
    pub fn zeros_like(encoder: &Encoder<S>) -> Self {
        Self {
            convs: encoder
                .convs
                .iter()
                .map(|c| (vec![S::zero(); c.weight.len()], vec![S::zero(); c.bias.len()]))
                .collect(),
            projector: (
                vec![S::zero(); encoder.projector.weight.len()],
                vec![S::zero(); encoder.projector.bias.len()],
            ),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            for (x, y) in a.0.iter_mut().zip(&b.0) {
                *x += *y;
            }
            for (x, y) in a.1.iter_mut().zip(&b.1) {
                *x += *y;
            }
        }
        for (x, y) in self.projector.0.iter_mut().zip(&other.projector.0) {
            *x += *y;
        }
        for (x, y) in self.projector.1.iter_mut().zip(&other.projector.1) {
            *x += *y;
        }
    }

    fn for_each(&self, mut f: impl FnMut(S)) {
        for (w, b) in &self.convs {
            w.iter().chain(b.iter()).for_each(|&v| f(v));
        }
        self.projector.0.iter().chain(self.projector.1.iter()).for_each(|&v| f(v));
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut S)) {
        for (w, b) in &mut self.convs {
            w.iter_mut().chain(b.iter_mut()).for_each(&mut f);
        }
        self.projector.0.iter_mut().chain(self.projector.1.iter_mut()).for_each(&mut f);
    }

    pub fn norm(&self) -> S {
        let mut sq = S::zero();
        self.for_each(|v| sq += v * v);
        sq.sqrt()
    }

    pub fn scale(&mut self, factor: S) {
        self.for_each_mut(|v| *v *= factor);
    }
}

impl<S: Scalar> Encoder<S> {
    pub fn init(config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for &out_ch in &config.channels {
            convs.push(ConvLayer::init(in_ch, out_ch, 3, 2, 1, rng));
            in_ch = out_ch;
        }
        let projector = ConvLayer::init(in_ch, config.embed_dim, 1, 1, 0, rng);
        Self { convs, projector }
    }

    pub fn embed_dim(&self) -> usize {
        self.projector.out_ch
    }

    /// Spatial downscale factor between image and feature map.
    pub fn downscale(&self) -> usize {
        1 << self.convs.len()
    }

    pub fn forward(&self, input: &Tensor<S>) -> Tensor<S> {
        self.forward_train(input).0
    }

    pub fn forward_train(&self, input: &Tensor<S>) -> (Tensor<S>, EncoderCache<S>) {
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut preacts = Vec::with_capacity(self.convs.len());
        let mut x = input.clone();
        for conv in &self.convs {
            let pre = conv.forward(&x);
            inputs.push(x);
            let mut act = pre.clone();
            for v in &mut act.data {
                if *v < S::zero() {
                    *v = S::zero();
                }
            }
            preacts.push(pre);
            x = act;
        }
        let embed = self.projector.forward(&x);
        (embed, EncoderCache { inputs, preacts, proj_in: x })
    }

    /// Parameter gradients given dL/d(embedding map).
    pub fn backward(&self, cache: &EncoderCache<S>, grad_embed: &Tensor<S>) -> EncoderGrads<S> {
        let (mut grad, proj_gw, proj_gb) = self.projector.backward(&cache.proj_in, grad_embed);
        let mut conv_grads = vec![(Vec::new(), Vec::new()); self.convs.len()];
        for i in (0..self.convs.len()).rev() {
            // ReLU mask from the cached pre-activation.
            for (g, &pre) in grad.data.iter_mut().zip(&cache.preacts[i].data) {
                if pre <= S::zero() {
                    *g = S::zero();
                }
            }
            let (gin, gw, gb) = self.convs[i].backward(&cache.inputs[i], &grad);
            conv_grads[i] = (gw, gb);
            grad = gin;
        }
        EncoderGrads { convs: conv_grads, projector: (proj_gw, proj_gb) }
    }

    pub fn sgd_step(&mut self, grads: &EncoderGrads<S>, lr: S) {
        for (conv, (gw, gb)) in self.convs.iter_mut().zip(&grads.convs) {
            for (w, g) in conv.weight.iter_mut().zip(gw) {
                *w -= lr * *g;
            }
            for (b, g) in conv.bias.iter_mut().zip(gb) {
                *b -= lr * *g;
            }
        }
        for (w, g) in self.projector.weight.iter_mut().zip(&grads.projector.0) {
            *w -= lr * *g;
        }
        for (b, g) in self.projector.bias.iter_mut().zip(&grads.projector.1) {
            *b -= lr * *g;
        }
    }

    pub fn params_finite(&self) -> bool {
        self.convs
            .iter()
            .chain(std::iter::once(&self.projector))
            .all(|c| c.weight.iter().chain(c.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        let layer_tensors = |name: &str, conv: &ConvLayer<S>, out: &mut Vec<NamedTensor>| {
            out.push(NamedTensor {
                name: format!("{name}.weight"),
                shape: vec![conv.out_ch, conv.in_ch, conv.ksize, conv.ksize],
                data: conv.weight.iter().map(|v| v.to_f32().unwrap()).collect(),
            });
            out.push(NamedTensor {
                name: format!("{name}.bias"),
                shape: vec![conv.out_ch],
                data: conv.bias.iter().map(|v| v.to_f32().unwrap()).collect(),
            });
        };
        for (i, conv) in self.convs.iter().enumerate() {
            layer_tensors(&format!("conv{i}"), conv, &mut out);
        }
        layer_tensors("projector", &self.projector, &mut out);
        out
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let find = |name: &str| -> Result<&NamedTensor> {
            tensors.iter().find(|t| t.name == name).ok_or_else(|| SslError::Tensor {
                name: name.to_string(),
                detail: "missing".to_string(),
            })
        };
        let load_layer = |name: &str, stride: usize, pad: usize| -> Result<ConvLayer<S>> {
            let w = find(&format!("{name}.weight"))?;
            let b = find(&format!("{name}.bias"))?;
            if w.shape.len() != 4 {
                return Err(SslError::Tensor {
                    name: w.name.clone(),
                    detail: format!("expected 4 dims, got {}", w.shape.len()),
                });
            }
            Ok(ConvLayer {
                out_ch: w.shape[0] as usize,
                in_ch: w.shape[1] as usize,
                ksize: w.shape[2] as usize,
                stride,
                pad,
                weight: w.data.iter().map(|&v| S::from_f32(v).unwrap()).collect(),
                bias: b.data.iter().map(|&v| S::from_f32(v).unwrap()).collect(),
            })
        };
        let n_convs = tensors
            .iter()
            .filter(|t| t.name.starts_with("conv") && t.name.ends_with(".weight"))
            .count();
        if n_convs == 0 {
            return Err(SslError::Tensor {
                name: "conv0.weight".to_string(),
                detail: "missing".to_string(),
            });
        }
        let mut convs = Vec::with_capacity(n_convs);
        for i in 0..n_convs {
            convs.push(load_layer(&format!("conv{i}"), 2, 1)?);
        }
        let projector = load_layer("projector", 1, 0)?;
        Ok(Self { convs, projector })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(ch: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let mut t = Tensor::zeros(ch, h, w);
        for v in &mut t.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn output_resolution_is_downscaled_by_eight() {
        let enc = Encoder::<f64>::init(&EncoderConfig::default(), &mut rng(0));
        let input = random_tensor(3, 64, 64, &mut rng(1));
        let out = enc.forward(&input);
        assert_eq!((out.ch, out.h, out.w), (32, 8, 8));
        assert_eq!(enc.downscale(), 8);
    }

    #[test]
    fn conv_layer_gradients_match_finite_differences() {
        let mut r = rng(3);
        let layer = ConvLayer::<f64>::init(2, 3, 3, 2, 1, &mut r);
        let input = random_tensor(2, 6, 6, &mut r);
        // Loss: sum of squared outputs.
        let out = layer.forward(&input);
        let mut grad_out = out.clone();
        for v in &mut grad_out.data {
            *v *= 2.0;
        }
        let (grad_in, grad_w, grad_b) = layer.backward(&input, &grad_out);
        let loss = |layer: &ConvLayer<f64>, input: &Tensor<f64>| -> f64 {
            layer.forward(input).data.iter().map(|v| v * v).sum()
        };
        let eps = 1e-6;
        for idx in 0..layer.weight.len() {
            let mut lp = layer.clone();
            let mut lm = layer.clone();
            lp.weight[idx] += eps;
            lm.weight[idx] -= eps;
            let fd = (loss(&lp, &input) - loss(&lm, &input)) / (2.0 * eps);
            assert!((fd - grad_w[idx]).abs() < 1e-5, "weight {idx}: {fd} vs {}", grad_w[idx]);
        }
        for idx in 0..layer.bias.len() {
            let mut lp = layer.clone();
            let mut lm = layer.clone();
            lp.bias[idx] += eps;
            lm.bias[idx] -= eps;
            let fd = (loss(&lp, &input) - loss(&lm, &input)) / (2.0 * eps);
            assert!((fd - grad_b[idx]).abs() < 1e-5);
        }
        for idx in 0..input.data.len() {
            let mut ip = input.clone();
            let mut im = input.clone();
            ip.data[idx] += eps;
            im.data[idx] -= eps;
            let fd = (loss(&layer, &ip) - loss(&layer, &im)) / (2.0 * eps);
            assert!((fd - grad_in.data[idx]).abs() < 1e-5);
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let config = EncoderConfig { channels: vec![4, 6, 8], embed_dim: 4 };
        let enc = Encoder::<f64>::init(&config, &mut rng(5));
        let input = random_tensor(3, 8, 8, &mut rng(6));
        let loss_of = |enc: &Encoder<f64>| -> f64 {
            enc.forward(&input).data.iter().map(|v| v * v).sum()
        };
        let (embed, cache) = enc.forward_train(&input);
        let mut grad_embed = embed.clone();
        for v in &mut grad_embed.data {
            *v *= 2.0;
        }
        let grads = enc.backward(&cache, &grad_embed);
        let eps = 1e-6;
        // Sampled parameter coordinates across all layers.
        let mut r = rng(7);
        for layer_idx in 0..enc.convs.len() + 1 {
            for _ in 0..12 {
                let mut ep = enc.clone();
                let mut em = enc.clone();
                let (len, analytic) = if layer_idx < enc.convs.len() {
                    (enc.convs[layer_idx].weight.len(), &grads.convs[layer_idx].0)
                } else {
                    (enc.projector.weight.len(), &grads.projector.0)
                };
                let idx = r.gen_range(0..len);
                if layer_idx < enc.convs.len() {
                    ep.convs[layer_idx].weight[idx] += eps;
                    em.convs[layer_idx].weight[idx] -= eps;
                } else {
                    ep.projector.weight[idx] += eps;
                    em.projector.weight[idx] -= eps;
                }
                let fd = (loss_of(&ep) - loss_of(&em)) / (2.0 * eps);
                assert!(
                    (fd - analytic[idx]).abs() < 1e-4 * (1.0 + fd.abs()),
                    "layer {layer_idx} idx {idx}: {fd} vs {}",
                    analytic[idx]
                );
            }
        }
    }

    #[test]
    fn init_is_deterministic() {
        let config = EncoderConfig::default();
        let a = Encoder::<f32>::init(&config, &mut rng(11));
        let b = Encoder::<f32>::init(&config, &mut rng(11));
        assert_eq!(a, b);
    }

    #[test]
    fn tensor_round_trip_is_bit_identical() {
        let enc = Encoder::<f32>::init(&EncoderConfig::default(), &mut rng(13));
        let back = Encoder::<f32>::from_tensors(&enc.to_tensors()).unwrap();
        assert_eq!(enc, back);
    }

    #[test]
    fn missing_tensor_is_an_error() {
        let enc = Encoder::<f32>::init(&EncoderConfig::default(), &mut rng(13));
        let mut tensors = enc.to_tensors();
        tensors.retain(|t| t.name != "projector.bias");
        let err = Encoder::<f32>::from_tensors(&tensors).unwrap_err();
        assert!(err.to_string().contains("projector.bias"));
    }

    #[test]
    fn image_tensor_is_normalized() {
        let img = Raster::new(4, 4, [255u8, 0, 128]);
        let t: Tensor<f64> = image_to_tensor(&img);
        assert_eq!(t.get(0, 0, 0), 1.0);
        assert_eq!(t.get(1, 0, 0), 0.0);
        assert!((t.get(2, 0, 0) - 128.0 / 255.0).abs() < 1e-12);
    }
}
