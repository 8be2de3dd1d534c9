//! The small CNN used for the greyscale data sets and a residual network for
//! colour images.

use crate::rng::{derive_seed, Gaussian};
use crate::tensor::{conv_output_len, Scalar, Tensor};
use crate::{Error, Result};

use super::{ConvSpec, Layer, Mode, Model, ParamStore, PnilInit, ResidualSpec};

/// conv -> relu -> [pool] -> conv -> relu -> [pool] -> flatten -> dense.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallCnnConfig {
    pub channels: (usize, usize),
    pub kernel: usize,
    /// 2x2 max-pool after each convolution.
    pub pool: bool,
    /// Prepend a noise-injection layer.
    pub pnil: Option<PnilInit>,
}

impl Default for SmallCnnConfig {
    fn default() -> Self {
        Self {
            channels: (16, 32),
            kernel: 3,
            pool: true,
            pnil: None,
        }
    }
}

/// Stem conv, five two-conv residual blocks, global average pool, dense head.
#[derive(Debug, Clone, PartialEq)]
pub struct ResNetConfig {
    pub stem: usize,
    /// Output channels of the five blocks; a block that changes the channel
    /// count downsamples with stride 2 and uses a 1x1 projection shortcut.
    pub widths: [usize; 5],
    pub pnil: Option<PnilInit>,
}

impl Default for ResNetConfig {
    fn default() -> Self {
        Self {
            stem: 16,
            widths: [16, 16, 32, 32, 64],
            pnil: None,
        }
    }
}

struct Builder<T> {
    params: ParamStore<T>,
    layers: Vec<Layer>,
    seed: u64,
}

impl<T: Scalar> Builder<T> {
    fn new(seed: u64) -> Self {
        Self {
            params: ParamStore::default(),
            layers: Vec::new(),
            seed,
        }
    }

    /// He-normal weights (std = sqrt(2 / fan_in)).
    fn he(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> usize {
        let idx = self.params.len() as u64;
        let mut g = Gaussian::new(derive_seed(self.seed, "init", idx));
        let std = (2.0 / fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::from_f64(g.next() * std));
        self.params.insert(name, t)
    }

    fn constant(&mut self, name: &str, shape: Vec<usize>, v: f64) -> usize {
        self.params.insert(name, Tensor::full(shape, T::from_f64(v)))
    }

    fn pnil(&mut self, init: &PnilInit, sample: &[usize]) {
        let weight = self.constant("pnil.weight", sample.to_vec(), init.weight);
        let bias = self.constant("pnil.bias", sample.to_vec(), init.bias);
        self.layers.push(Layer::Pnil {
            weight,
            bias,
            max_half_log_var: init.max_half_log_var,
        });
    }

    fn conv_spec(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> ConvSpec {
        let weight = self.he(&format!("{name}.weight"), vec![cout, cin, k, k], cin * k * k);
        let bias = self.constant(&format!("{name}.bias"), vec![cout], 0.0);
        ConvSpec {
            weight,
            bias,
            stride,
            pad,
        }
    }

    fn dense(&mut self, name: &str, fan_in: usize, out: usize) {
        let weight = self.he(&format!("{name}.weight"), vec![fan_in, out], fan_in);
        let bias = self.constant(&format!("{name}.bias"), vec![out], 0.0);
        self.layers.push(Layer::Dense { weight, bias });
    }

    fn finish(self, arch: &str, input_shape: [usize; 3], num_classes: usize) -> Model<T> {
        Model {
            arch: arch.to_string(),
            layers: self.layers,
            params: self.params,
            input_shape: input_shape.to_vec(),
            num_classes,
            mode: Mode::Train,
            seed: self.seed,
        }
    }
}

fn check_classes(num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
    }
    Ok(())
}

pub fn build_small_cnn<T: Scalar>(
    in_shape: [usize; 3],
    num_classes: usize,
    cfg: &SmallCnnConfig,
    seed: u64,
) -> Result<Model<T>> {
    check_classes(num_classes)?;
    let [c, mut h, mut w] = in_shape;
    let k = cfg.kernel;
    let pad = k / 2;
    let mut b = Builder::new(seed);
    if let Some(init) = &cfg.pnil {
        b.pnil(init, &in_shape);
    }
    let mut cin = c;
    for (i, cout) in [cfg.channels.0, cfg.channels.1].into_iter().enumerate() {
        let spec = b.conv_spec(&format!("conv{}", i + 1), cin, cout, k, 1, pad);
        b.layers.push(Layer::Conv(spec));
        b.layers.push(Layer::Relu);
        h = conv_output_len(h, k, 1, pad).ok_or_else(|| Error::Config("input too small".into()))?;
        w = conv_output_len(w, k, 1, pad).ok_or_else(|| Error::Config("input too small".into()))?;
        if cfg.pool {
            if h < 2 || w < 2 {
                return Err(Error::Config("input too small to pool".into()));
            }
            b.layers.push(Layer::MaxPool(2));
            h /= 2;
            w /= 2;
        }
        cin = cout;
    }
    b.layers.push(Layer::Flatten);
    b.dense("fc", cin * h * w, num_classes);
    Ok(b.finish("small-cnn", in_shape, num_classes))
}

pub fn build_resnet11<T: Scalar>(
    in_shape: [usize; 3],
    num_classes: usize,
    cfg: &ResNetConfig,
    seed: u64,
) -> Result<Model<T>> {
    check_classes(num_classes)?;
    let mut b = Builder::new(seed);
    if let Some(init) = &cfg.pnil {
        b.pnil(init, &in_shape);
    }
    let stem = b.conv_spec("stem", in_shape[0], cfg.stem, 3, 1, 1);
    b.layers.push(Layer::Conv(stem));
    b.layers.push(Layer::Relu);
    let mut cin = cfg.stem;
    for (i, &cout) in cfg.widths.iter().enumerate() {
        let stride = if cout != cin { 2 } else { 1 };
        let name = format!("block{}", i + 1);
        let conv1 = b.conv_spec(&format!("{name}.conv1"), cin, cout, 3, stride, 1);
        let conv2 = b.conv_spec(&format!("{name}.conv2"), cout, cout, 3, 1, 1);
        let projection = (cout != cin).then(|| b.conv_spec(&format!("{name}.proj"), cin, cout, 1, stride, 0));
        b.layers.push(Layer::Residual(ResidualSpec {
            conv1,
            conv2,
            projection,
        }));
        cin = cout;
    }
    b.layers.push(Layer::GlobalAvgPool);
    b.dense("fc", cin, num_classes);
    Ok(b.finish("resnet11", in_shape, num_classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Noise;

    #[test]
    fn small_cnn_parameter_count() {
        // conv1 1*16*9+16, conv2 16*32*9+32, fc 32*7*7*10+10
        let m = build_small_cnn::<f32>([1, 28, 28], 10, &SmallCnnConfig::default(), 0).unwrap();
        assert_eq!(m.param_count(), 160 + 4640 + 15690);
        let with = SmallCnnConfig {
            pnil: Some(PnilInit::default()),
            ..SmallCnnConfig::default()
        };
        let m = build_small_cnn::<f32>([1, 28, 28], 10, &with, 0).unwrap();
        assert_eq!(m.param_count(), 20490 + 2 * 784);
        assert_eq!(m.params.get("pnil.weight").unwrap().shape(), &[1, 28, 28]);
        assert_eq!(m.params.get("pnil.bias").unwrap().shape(), &[1, 28, 28]);
    }

    #[test]
    fn small_cnn_logits_shape() {
        let m = build_small_cnn::<f32>([1, 28, 28], 10, &SmallCnnConfig::default(), 1).unwrap();
        let x = Tensor::full([3, 1, 28, 28], 0.5f32);
        let ids = [0, 1, 2];
        let z = m.logits(&x, Noise::PerSample { seed: 0, ids: &ids }).unwrap();
        assert_eq!(z.shape(), &[3, 10]);
    }

    #[test]
    fn resnet_shapes() {
        let m = build_resnet11::<f32>([3, 32, 32], 10, &ResNetConfig::default(), 2).unwrap();
        let convs = 1 + m.layers.iter().filter(|l| matches!(l, Layer::Residual(_))).count() * 2;
        assert_eq!(convs, 11);
        let x = Tensor::full([2, 3, 32, 32], 0.1f32);
        let ids = [0, 1];
        let z = m.logits(&x, Noise::PerSample { seed: 0, ids: &ids }).unwrap();
        assert_eq!(z.shape(), &[2, 10]);
    }

    #[test]
    fn rejects_single_class() {
        assert!(build_small_cnn::<f32>([1, 28, 28], 1, &SmallCnnConfig::default(), 0).is_err());
    }
}
