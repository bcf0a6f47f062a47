//! Parameterized layers built from tape primitives.

use super::{Array, DiffError, ParamId, ParameterStore, RngStream, Tape, Var};

/// He-normal initialization for a weight with `fan_in` inputs.
fn he_normal(rng: &mut RngStream, shape: &[usize], fan_in: usize) -> Array {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut a = rng.normal_array(shape);
    a.data_mut().iter_mut().for_each(|x| *x *= std);
    a
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, used for dense weights and biases.
fn fan_in_uniform(rng: &mut RngStream, shape: &[usize], fan_in: usize) -> Array {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
    Array::new(shape.to_vec(), data).expect("shape matches data")
}

/// Register a parameter, or reuse an existing one of the same name and shape.
fn param(
    store: &mut ParameterStore,
    name: &str,
    init: impl FnOnce() -> Array,
) -> Result<ParamId, DiffError> {
    match store.id(name) {
        Some(_) => {
            let value = init();
            store.expect(name, value.shape())
        }
        None => store.add(name, init()),
    }
}

/// Fully connected layer `x W + b` on `[n, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut RngStream,
    ) -> Result<Self, DiffError> {
        let weight = param(store, &format!("{name}.w"), || {
            fan_in_uniform(rng, &[in_dim, out_dim], in_dim)
        })?;
        let bias = param(store, &format!("{name}.b"), || fan_in_uniform(rng, &[out_dim], in_dim))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var, DiffError> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// Stack of [`Linear`] layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists the layer widths including input and output.
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        dims: &[usize],
        rng: &mut RngStream,
    ) -> Result<Self, DiffError> {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect::<Result<_, _>>()?;
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var, DiffError> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }
}

/// Unpadded strided convolution with bias over NHWC input.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        size: usize,
        stride: usize,
        rng: &mut RngStream,
    ) -> Result<Self, DiffError> {
        let fan_in = size * size * in_c;
        let kernel = param(store, &format!("{name}.k"), || {
            he_normal(rng, &[size, size, in_c, out_c], fan_in)
        })?;
        let bias = param(store, &format!("{name}.b"), || Array::zeros(&[out_c]))?;
        Ok(Self {
            kernel,
            bias,
            stride,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var, DiffError> {
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        let y = tape.conv2d(x, k, self.stride)?;
        tape.add_bias(y, b)
    }
}

/// Transposed convolution with bias over NHWC input.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        size: usize,
        stride: usize,
        padding: usize,
        rng: &mut RngStream,
    ) -> Result<Self, DiffError> {
        // Each output pixel sees roughly (size/stride)^2 * in_c inputs.
        let fan_in = ((size * size) / (stride * stride)).max(1) * in_c;
        let kernel = param(store, &format!("{name}.k"), || {
            he_normal(rng, &[in_c, size, size, out_c], fan_in)
        })?;
        let bias = param(store, &format!("{name}.b"), || Array::zeros(&[out_c]))?;
        Ok(Self {
            kernel,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var, DiffError> {
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        let y = tape.conv_transpose2d(x, k, self.stride, self.padding)?;
        tape.add_bias(y, b)
    }
}
