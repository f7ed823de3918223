use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{sigmoid, softmax_in_place, Activation, AdamHyper, AdamState, NetworkSpec, OutputActivation};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

/// One affine layer: `z = a · w + b`, `w` is (fan_in x fan_out).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense { w: Array2::zeros((fan_in, fan_out)), b: Array1::zeros(fan_out) }
    }

    fn is_finite(&self) -> bool {
        self.w.iter().chain(self.b.iter()).all(|x| x.is_finite())
    }

    fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Parameter gradients, shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net.layers.iter().map(|l| Dense::zeros(l.w.nrows(), l.w.ncols())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w += &b.w;
            a.b += &b.b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.w *= k;
            l.b *= k;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|g| g == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, g| m.max(g.abs()))
    }

    /// Flattened view in parameter order (per layer: w row-major, then b).
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()).copied())
    }
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each affine layer; `inputs[0]` is the network input.
    pub inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pub pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.output.nrows()
    }

    /// Output of the last hidden layer (the network input when there is none).
    pub fn last_hidden(&self) -> &Array2<f64> {
        self.inputs.last().expect("at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Dense>,
    opt: AdamState,
}

impl Network {
    /// Glorot-uniform weights, zero biases.
    pub fn new(spec: NetworkSpec, seed_value: u64) -> Result<Self> {
        Self::with_rng(spec, &mut seed::rng(seed_value))
    }

    pub fn with_rng(spec: NetworkSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..=bound));
                Dense { w, b: Array1::zeros(fan_out) }
            })
            .collect();
        Ok(Self::from_layers(spec, layers)?)
    }

    pub fn from_layers(spec: NetworkSpec, layers: Vec<Dense>) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        if dims.len() != layers.len() {
            return Err(Error::shape(format!("{} layers", dims.len()), layers.len()));
        }
        for (&(fi, fo), l) in dims.iter().zip(&layers) {
            if l.w.dim() != (fi, fo) || l.b.len() != fo {
                return Err(Error::shape(
                    format!("{fi}x{fo} weights"),
                    format!("{:?} weights, {} biases", l.w.dim(), l.b.len()),
                ));
            }
        }
        let opt = AdamState::new(&layers);
        Ok(Network { spec, layers, opt })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.opt
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output.width
    }

    /// Width of the last hidden layer (input width if there is none).
    pub fn last_hidden_dim(&self) -> usize {
        self.spec.hidden.last().map_or(self.spec.input_dim, |h| h.width)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::len).sum()
    }

    /// Zero the final affine layer, making the output activation see zero logits.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("at least one layer");
        last.w.fill(0.0);
        last.b.fill(0.0);
    }

    fn hidden_activation(&self, layer: usize) -> Option<Activation> {
        self.spec.hidden.get(layer).map(|h| h.activation)
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if x.ncols() != self.spec.input_dim {
            return Err(Error::shape(format!("input width {}", self.spec.input_dim), x.ncols()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite network input".into()));
        }
        let depth = self.layers.len();
        let mut inputs = Vec::with_capacity(depth);
        let mut pre = Vec::with_capacity(depth);
        let mut a = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.w) + &layer.b;
            let out = match self.hidden_activation(i) {
                Some(act) => z.mapv(|v| act.apply(v)),
                None => self.output_activation(&z),
            };
            inputs.push(a);
            pre.push(z);
            a = out;
        }
        let cache = ForwardCache { inputs, pre, output: a.clone() };
        Ok((a, cache))
    }

    fn output_activation(&self, z: &Array2<f64>) -> Array2<f64> {
        match self.spec.output.activation {
            OutputActivation::Identity => z.clone(),
            OutputActivation::Sigmoid => z.mapv(sigmoid),
            OutputActivation::Softmax => {
                let mut y = z.clone();
                for mut row in y.rows_mut() {
                    softmax_in_place(row.as_slice_mut().expect("standard layout"));
                }
                y
            }
        }
    }

    /// Backpropagate `dy` (gradient w.r.t. the network output).
    ///
    /// Returns parameter gradients and the gradient w.r.t. the input.
    pub fn backward(&self, cache: &ForwardCache, dy: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        self.backward_with_hidden(cache, dy, None)
    }

    /// Like [`backward`](Self::backward), with an extra upstream gradient
    /// arriving at the last hidden activation.
    pub fn backward_with_hidden(
        &self,
        cache: &ForwardCache,
        dy: ArrayView2<f64>,
        d_last_hidden: Option<ArrayView2<f64>>,
    ) -> Result<(Gradients, Array2<f64>)> {
        let depth = self.layers.len();
        if cache.pre.len() != depth {
            return Err(Error::shape(format!("cache for {depth} layers"), cache.pre.len()));
        }
        if dy.dim() != cache.output.dim() {
            return Err(Error::shape(format!("{:?} upstream gradient", cache.output.dim()), format!("{:?}", dy.dim())));
        }
        if let Some(h) = &d_last_hidden {
            if h.dim() != cache.last_hidden().dim() {
                return Err(Error::shape(
                    format!("{:?} hidden gradient", cache.last_hidden().dim()),
                    format!("{:?}", h.dim()),
                ));
            }
        }

        let y = &cache.output;
        let mut dz: Array2<f64> = match self.spec.output.activation {
            OutputActivation::Identity => dy.to_owned(),
            OutputActivation::Sigmoid => {
                let mut d = dy.to_owned();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (1.0 - y));
                d
            }
            OutputActivation::Softmax => {
                let dot = (&dy * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                y * &(&dy - &dot)
            }
        };

        let mut grads = Vec::with_capacity(depth);
        let mut dx = Array2::zeros((0, 0));
        for i in (0..depth).rev() {
            let layer = &self.layers[i];
            let a = &cache.inputs[i];
            let dw = a.t().dot(&dz);
            let db = dz.sum_axis(Axis(0));
            let mut da = dz.dot(&layer.w.t());
            grads.push(Dense { w: dw, b: db });
            if i == depth - 1 {
                if let Some(h) = &d_last_hidden {
                    da += h;
                }
            }
            if i == 0 {
                dx = da;
            } else {
                let act = self.hidden_activation(i - 1).expect("hidden layer");
                let z = &cache.pre[i - 1];
                Zip::from(&mut da).and(z).for_each(|d, &z| *d *= act.derivative(z));
                dz = da;
            }
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, dx))
    }

    /// One adaptive-moment update. Non-finite gradients are rejected and the
    /// network is left untouched.
    pub fn optimizer_step(&mut self, grads: &Gradients, hyper: &AdamHyper) -> Result<()> {
        if grads.layers.len() != self.layers.len()
            || grads.layers.iter().zip(&self.layers).any(|(g, l)| g.w.dim() != l.w.dim() || g.b.len() != l.b.len())
        {
            return Err(Error::shape("gradients shaped like parameters", "mismatched gradients"));
        }
        if !grads.is_finite() {
            let bad = grads.iter().filter(|g| !g.is_finite()).count();
            return Err(Error::Training(format!(
                "rejected update: {bad} non-finite gradient entries (max finite |g| = {:.3e})",
                grads.iter().filter(|g| g.is_finite()).fold(0.0, |m: f64, g| m.max(g.abs()))
            )));
        }
        let mut next = self.layers.clone();
        let mut opt = self.opt.clone();
        opt.step(&mut next, &grads.layers, hyper);
        if !next.iter().all(Dense::is_finite) {
            return Err(Error::Training("update produced non-finite parameters".into()));
        }
        self.layers = next;
        self.opt = opt;
        Ok(())
    }

    /// Parameter `i` in flattened order (per layer: w row-major, then b).
    pub fn param(&self, i: usize) -> f64 {
        *self.locate(i)
    }

    pub fn set_param(&mut self, i: usize, value: f64) {
        *self.locate_mut(i) = value;
    }

    fn locate(&self, mut i: usize) -> &f64 {
        for l in &self.layers {
            if i < l.w.len() {
                return l.w.as_slice().expect("standard layout").get(i).unwrap();
            }
            i -= l.w.len();
            if i < l.b.len() {
                return &l.b[i];
            }
            i -= l.b.len();
        }
        panic!("parameter index out of range")
    }

    fn locate_mut(&mut self, mut i: usize) -> &mut f64 {
        for l in &mut self.layers {
            if i < l.w.len() {
                return l.w.as_slice_mut().expect("standard layout").get_mut(i).unwrap();
            }
            i -= l.w.len();
            if i < l.b.len() {
                return &mut l.b[i];
            }
            i -= l.b.len();
        }
        panic!("parameter index out of range")
    }

    /// Pattern of relu activity (`z > 0`) over the batch, for kink detection.
    pub(crate) fn relu_pattern(&self, cache: &ForwardCache) -> Vec<bool> {
        let mut out = Vec::new();
        for (i, z) in cache.pre.iter().enumerate() {
            if self.hidden_activation(i) == Some(Activation::Relu) {
                out.extend(z.iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Smallest nonzero |z| over relu pre-activations in the batch. Exact
    /// zeros (dead inputs, zero bias) only move when the probe itself moves
    /// them, which the activity pattern catches.
    pub(crate) fn min_relu_margin(&self, cache: &ForwardCache) -> f64 {
        let mut m = f64::INFINITY;
        for (i, z) in cache.pre.iter().enumerate() {
            if self.hidden_activation(i) == Some(Activation::Relu) {
                m = z.iter().filter(|v| **v != 0.0).fold(m, |m, v| m.min(v.abs()));
            }
        }
        m
    }
}
