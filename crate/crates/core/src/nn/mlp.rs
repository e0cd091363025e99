use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::rng_from_seed;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub output_dim: usize,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    /// Time-conditioned velocity net on R^d: input `(x, t)`, output in R^d.
    pub fn velocity(dim: usize, hidden_layers: usize, hidden_width: usize) -> Self {
        Self {
            input_dim: dim + 1,
            hidden_layers,
            hidden_width,
            output_dim: dim,
            output_activation: OutputActivation::Identity,
        }
    }

    /// Position-only time predictor with output in (0, 1).
    pub fn time_predictor(dim: usize, hidden_layers: usize, hidden_width: usize) -> Self {
        Self {
            input_dim: dim,
            hidden_layers,
            hidden_width,
            output_dim: 1,
            output_activation: OutputActivation::Sigmoid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::invalid("network input and output dims must be >= 1"));
        }
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return Err(Error::invalid("hidden width must be >= 1"));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Affine map `x W + b` with `W` stored as `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl MlpParams {
    /// Uniform `+-sqrt(6 / (fan_in + fan_out))` weights, zero biases.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_from_seed(seed);
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights =
                    Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..limit));
                Layer { weights, bias: Array1::zeros(fan_out) }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Layer { weights: Array2::zeros((i, o)), bias: Array1::zeros(o) })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn from_layers(spec: MlpSpec, layers: Vec<Layer>) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        if dims.len() != layers.len() {
            return Err(Error::invalid(format!(
                "spec implies {} layers, got {}",
                dims.len(),
                layers.len()
            )));
        }
        for (k, ((i, o), layer)) in dims.iter().zip(&layers).enumerate() {
            if layer.weights.dim() != (*i, *o) || layer.bias.len() != *o {
                return Err(Error::invalid(format!(
                    "layer {k}: expected {i}x{o} weights and {o} biases, got {:?} and {}",
                    layer.weights.dim(),
                    layer.bias.len()
                )));
            }
        }
        let params = Self { spec, layers };
        if !params.is_finite() {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(params)
    }

    pub fn zeros_like(&self) -> Vec<Layer> {
        self.layers
            .iter()
            .map(|l| Layer { weights: Array2::zeros(l.weights.raw_dim()), bias: Array1::zeros(l.bias.len()) })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|x| x.is_finite()))
    }

    /// All parameters, layer by layer, weights (row-major) before biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::LengthMismatch { expected: self.num_params(), got: flat.len() });
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            for (p, v) in l.weights.iter_mut().chain(l.bias.iter_mut()).zip(&mut it) {
                *p = *v;
            }
        }
        Ok(())
    }

    fn check_input(&self, inputs: ArrayView2<'_, f64>) -> Result<()> {
        if inputs.ncols() != self.spec.input_dim {
            return Err(Error::DimensionMismatch { expected: self.spec.input_dim, got: inputs.ncols() });
        }
        Ok(())
    }

    /// Batched forward pass, one input per row.
    pub fn forward(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(inputs)?;
        Ok(self.activations(inputs).pop().expect("at least one layer"))
    }

    /// Forward pass on `(x, t)` rows with a shared time `t`.
    pub fn forward_at_time(&self, x: ArrayView2<'_, f64>, t: f64) -> Result<Array2<f64>> {
        let time = Array2::from_elem((x.nrows(), 1), t);
        let inputs = concatenate(Axis(1), &[x, time.view()]).map_err(|e| Error::invalid(e.to_string()))?;
        self.forward(inputs.view())
    }

    /// Single point `(x, t)`.
    pub fn forward_point(&self, x: &[f64], t: f64) -> Result<Array1<f64>> {
        let row = Array2::from_shape_vec((1, x.len()), x.to_vec()).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(self.forward_at_time(row.view(), t)?.row(0).to_owned())
    }

    /// Post-activation values of every layer, input included.
    fn activations(&self, inputs: ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(inputs.to_owned());
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = acts[k].dot(&layer.weights);
            z += &layer.bias;
            if k < last {
                z.mapv_inplace(f64::tanh);
            } else if self.spec.output_activation == OutputActivation::Sigmoid {
                z.mapv_inplace(sigmoid);
            }
            acts.push(z);
        }
        acts
    }

    /// Mean over rows of the squared L2 error, and its gradient.
    pub fn loss_grad(
        &self,
        inputs: ArrayView2<'_, f64>,
        targets: ArrayView2<'_, f64>,
    ) -> Result<(f64, Vec<Layer>)> {
        self.check_input(inputs)?;
        let batch = inputs.nrows();
        if batch == 0 {
            return Err(Error::invalid("empty minibatch"));
        }
        if targets.dim() != (batch, self.spec.output_dim) {
            return Err(Error::invalid(format!(
                "targets must be {}x{}, got {:?}",
                batch,
                self.spec.output_dim,
                targets.dim()
            )));
        }
        let acts = self.activations(inputs);
        let output = acts.last().expect("output layer");
        let residual = output - &targets;
        let loss = residual.iter().map(|r| r * r).sum::<f64>() / batch as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss ({loss})")));
        }

        let mut delta = residual * (2.0 / batch as f64);
        if self.spec.output_activation == OutputActivation::Sigmoid {
            delta.zip_mut_with(output, |d, &s| *d *= s * (1.0 - s));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        for k in (0..self.layers.len()).rev() {
            let input = &acts[k];
            let weights_grad = input.t().dot(&delta);
            let bias_grad = delta.sum_axis(Axis(0));
            if k > 0 {
                let mut back = delta.dot(&self.layers[k].weights.t());
                back.zip_mut_with(input, |b, &a| *b *= 1.0 - a * a);
                delta = back;
            }
            grads.push(Layer { weights: weights_grad, bias: bias_grad });
        }
        grads.reverse();
        Ok((loss, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn spec(input: usize, hidden: usize, width: usize, out: usize, act: OutputActivation) -> MlpSpec {
        MlpSpec {
            input_dim: input,
            hidden_layers: hidden,
            hidden_width: width,
            output_dim: out,
            output_activation: act,
        }
    }

    #[test]
    fn zero_network_outputs() {
        let p = MlpParams::zeros(MlpSpec::velocity(2, 3, 8)).unwrap();
        let y = p.forward_point(&[1.0, -3.0], 0.4).unwrap();
        assert_eq!(y, array![0.0, 0.0]);
        let tp = MlpParams::zeros(MlpSpec::time_predictor(2, 2, 4)).unwrap();
        let y = tp.forward(array![[5.0, 1.0]].view()).unwrap();
        assert_eq!(y, array![[0.5]]);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let s = MlpSpec::velocity(2, 3, 16);
        let a = MlpParams::init(s, 42).unwrap();
        assert_eq!(a, MlpParams::init(s, 42).unwrap());
        assert_ne!(a, MlpParams::init(s, 43).unwrap());
        let limit = (6.0f64 / (3 + 16) as f64).sqrt();
        assert!(a.layers[0].weights.iter().all(|w| w.abs() <= limit));
        let x = [0.3, -0.7];
        assert_eq!(a.forward_point(&x, 0.2).unwrap(), a.forward_point(&x, 0.2).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = MlpParams::zeros(MlpSpec::velocity(2, 1, 4)).unwrap();
        assert!(p.forward(array![[1.0, 2.0]].view()).is_err());
        assert!(p.loss_grad(array![[1.0, 2.0, 3.0]].view(), array![[1.0]].view()).is_err());
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_gradient() {
        let p = MlpParams::init(MlpSpec::velocity(2, 2, 5), 1).unwrap();
        let inputs = array![[0.1, 0.2, 0.3], [-1.0, 0.5, 0.9]];
        let targets = p.forward(inputs.view()).unwrap();
        let (loss, grads) = p.loss_grad(inputs.view(), targets.view()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| g.weights.iter().chain(g.bias.iter()).all(|&x| x == 0.0)));
    }

    #[test]
    fn single_linear_layer_gradient() {
        let mut p = MlpParams::zeros(spec(1, 0, 0, 1, OutputActivation::Identity)).unwrap();
        p.layers[0].weights[[0, 0]] = 1.5;
        p.layers[0].bias[0] = -0.5;
        let (x, y) = (2.0, 1.0);
        let (loss, grads) = p.loss_grad(array![[x]].view(), array![[y]].view()).unwrap();
        let r: f64 = 1.5 * x - 0.5 - y;
        assert!((loss - r * r).abs() < 1e-15);
        assert!((grads[0].weights[[0, 0]] - 2.0 * r * x).abs() < 1e-15);
        assert!((grads[0].bias[0] - 2.0 * r).abs() < 1e-15);
    }

    #[test]
    fn from_layers_checks_shapes() {
        let p = MlpParams::init(MlpSpec::velocity(2, 1, 3), 0).unwrap();
        assert!(MlpParams::from_layers(p.spec, p.layers.clone()).is_ok());
        let mut bad = p.layers.clone();
        bad[0].bias = Array1::zeros(2);
        assert!(MlpParams::from_layers(p.spec, bad).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let p = MlpParams::init(MlpSpec::velocity(3, 2, 4), 8).unwrap();
        let mut q = MlpParams::zeros(p.spec).unwrap();
        q.set_flat(&p.to_flat()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.3) + sigmoid(-0.3) - 1.0).abs() < 1e-15);
    }
}
