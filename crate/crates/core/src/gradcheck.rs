//! Gradient checks of whole models against central differences in f64.

use crate::models::{ConvSpec, Layer, Mode, Model, Noise, ParamStore};
use crate::rng::{derive_seed, stream, Gaussian};
use crate::tensor::{finite_diff_grad, one_hot, GradCheckReport, Reduction, Tape, Tensor};
use crate::Result;

use rand::Rng;

pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-6;

/// A model, inputs and frozen noise for one check.
pub struct CheckCase {
    pub name: String,
    pub model: Model<f64>,
    pub x: Tensor<f64>,
    pub labels: Vec<usize>,
    pub noise: Tensor<f64>,
}

fn loss_of(model: &Model<f64>, x: &Tensor<f64>, y: &Tensor<f64>, noise: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let p = model.bind(&mut tape, false);
    let xv = tape.leaf(x.clone(), false);
    let z = model.forward(&mut tape, &p, xv, Noise::Fixed(noise))?;
    let l = tape.softmax_cross_entropy(z, y, Reduction::Mean)?;
    Ok(tape.value(l).item())
}

/// Analytic gradients of the mean cross-entropy for every parameter
/// (in registration order) followed by the input.
pub fn analytic_gradients(case: &CheckCase) -> Result<Vec<Tensor<f64>>> {
    let y = one_hot(&case.labels, case.model.num_classes);
    let mut tape = Tape::new();
    let p = case.model.bind(&mut tape, true);
    let xv = tape.leaf(case.x.clone(), true);
    let z = case.model.forward(&mut tape, &p, xv, Noise::Fixed(&case.noise))?;
    let l = tape.softmax_cross_entropy(z, &y, Reduction::Mean)?;
    let mut g = tape.backward(l)?;
    let mut out: Vec<Tensor<f64>> = p
        .vars()
        .iter()
        .zip(case.model.params.iter())
        .map(|(&v, (_, t))| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    out.push(g.take(xv).unwrap_or_else(|| Tensor::zeros(case.x.shape())));
    Ok(out)
}

/// Central-difference gradients in the same order as [`analytic_gradients`].
pub fn numeric_gradients(case: &CheckCase, h: f64) -> Result<Vec<Tensor<f64>>> {
    let y = one_hot(&case.labels, case.model.num_classes);
    let mut out = Vec::new();
    for i in 0..case.model.params.len() {
        let mut m = case.model.clone();
        let t = case.model.params.tensor(i).clone();
        out.push(finite_diff_grad(
            |v: &Tensor<f64>| {
                *m.params.tensor_mut(i) = v.clone();
                loss_of(&m, &case.x, &y, &case.noise)
            },
            &t,
            h,
        )?);
    }
    out.push(finite_diff_grad(|v: &Tensor<f64>| loss_of(&case.model, v, &y, &case.noise), &case.x, h)?);
    Ok(out)
}

/// Compares `analytic` (possibly altered by the caller) with central
/// differences.
pub fn compare_case(case: &CheckCase, analytic: &[Tensor<f64>], tol: f64) -> Result<GradCheckReport> {
    let numeric = numeric_gradients(case, GRADCHECK_STEP)?;
    let mut report = GradCheckReport::default();
    for (a, n) in analytic.iter().zip(&numeric) {
        report.merge(GradCheckReport::compare(a, n, tol));
    }
    Ok(report)
}

pub fn check_case(case: &CheckCase) -> Result<GradCheckReport> {
    compare_case(case, &analytic_gradients(case)?, GRADCHECK_TOL)
}

struct Build {
    params: ParamStore<f64>,
    layers: Vec<Layer>,
    g: Gaussian,
}

impl Build {
    fn random(&mut self, name: &str, shape: Vec<usize>, scale: f64) -> usize {
        let g = &mut self.g;
        let t = Tensor::from_fn(shape, |_| g.next() * scale);
        self.params.insert(name, t)
    }

    fn dense(&mut self, name: &str, fan_in: usize, out: usize) {
        let weight = self.random(&format!("{name}.weight"), vec![fan_in, out], (1.0 / fan_in as f64).sqrt());
        let bias = self.random(&format!("{name}.bias"), vec![out], 0.1);
        self.layers.push(Layer::Dense { weight, bias });
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, pad: usize) {
        let weight = self.random(&format!("{name}.weight"), vec![cout, cin, k, k], (1.0 / (cin * k * k) as f64).sqrt());
        let bias = self.random(&format!("{name}.bias"), vec![cout], 0.1);
        self.layers.push(Layer::Conv(ConvSpec {
            weight,
            bias,
            stride: 1,
            pad,
        }));
    }
}

/// A random network of at most three weighted layers and 500 parameters.
/// `variant % 5` selects the layout; odd seeds in `with_pnil` add a noise
/// layer with frozen draws.
pub fn random_case(seed: u64, variant: usize, with_pnil: bool) -> CheckCase {
    let mut rng = stream(derive_seed(seed, "gradcheck-shape", variant as u64));
    let c = rng.random_range(1..=2usize);
    let hw = rng.random_range(3..=5usize);
    let k = rng.random_range(2..=4usize);
    let batch = 2;
    let in_shape = [c, hw, hw];
    let d = c * hw * hw;
    let mut b = Build {
        params: ParamStore::default(),
        layers: Vec::new(),
        g: Gaussian::new(derive_seed(seed, "gradcheck-init", variant as u64)),
    };
    if with_pnil {
        let w = b.random("pnil.weight", in_shape.to_vec(), 0.5);
        let bias = b.random("pnil.bias", in_shape.to_vec(), 0.5);
        *b.params.tensor_mut(bias) = b.params.tensor(bias).map(|v| v - 2.0);
        b.layers.push(Layer::Pnil {
            weight: w,
            bias,
            max_half_log_var: 10.0,
        });
    }
    let name = match variant % 5 {
        0 => {
            b.layers.push(Layer::Flatten);
            b.dense("fc", d, k);
            "dense"
        }
        1 => {
            b.layers.push(Layer::Flatten);
            b.dense("fc1", d, 6);
            b.layers.push(Layer::Relu);
            b.dense("fc2", 6, k);
            "dense-relu-dense"
        }
        2 => {
            b.conv("conv", c, 2, 3, 1);
            b.layers.push(Layer::Relu);
            b.layers.push(Layer::Flatten);
            b.dense("fc", 2 * hw * hw, k);
            "conv-relu-dense"
        }
        3 => {
            b.conv("conv", c, 2, 3, 1);
            b.layers.push(Layer::Relu);
            b.layers.push(Layer::MaxPool(2));
            b.layers.push(Layer::Flatten);
            let p = hw / 2;
            b.dense("fc", 2 * p * p, k);
            "conv-relu-pool-dense"
        }
        _ => {
            b.conv("conv1", c, 2, 2, 0);
            b.layers.push(Layer::Relu);
            b.conv("conv2", 2, 2, 2, 0);
            b.layers.push(Layer::Relu);
            b.layers.push(Layer::GlobalAvgPool);
            b.dense("fc", 2, k);
            "conv-conv-gap-dense"
        }
    };
    let mut g = Gaussian::new(derive_seed(seed, "gradcheck-data", variant as u64));
    let x = Tensor::from_fn([batch, c, hw, hw], |_| 0.5 + 0.3 * g.next());
    let noise = Tensor::from_fn([batch, c, hw, hw], |_| g.next());
    let labels = (0..batch).map(|_| rng.random_range(0..k)).collect();
    CheckCase {
        name: format!("{name}{}", if with_pnil { "+pnil" } else { "" }),
        model: Model {
            arch: name.into(),
            layers: b.layers,
            params: b.params,
            input_shape: in_shape.to_vec(),
            num_classes: k,
            mode: Mode::Train,
            seed,
        },
        x,
        labels,
        noise,
    }
}

/// `count` random networks; every fourth carries a noise layer.
pub fn random_suite(count: usize, seed: u64) -> Vec<CheckCase> {
    (0..count).map(|i| random_case(derive_seed(seed, "case", i as u64), i, i % 4 == 3)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cases_are_small() {
        for case in random_suite(20, 1) {
            assert!(case.model.param_count() <= 500, "{} has {}", case.name, case.model.param_count());
        }
    }

    #[test]
    fn single_case_passes() {
        let case = random_case(3, 2, true);
        let r = check_case(&case).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
