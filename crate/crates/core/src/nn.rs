//! Parameterized building blocks shared by the backbone, transformer and head.

use rand_chacha::ChaCha8Rng;

use crate::numerics::{Array, ConvGeom, Graph, InitSpec, ParamId, ParamStore, Var};

/// Affine map `x · W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: InitSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), &[in_dim, out_dim], init, rng);
        let bias = store.add(format!("{name}.bias"), &[out_dim], InitSpec::Zeros, rng);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Fan-in scaled weights, zero bias.
    pub fn fan_in(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::new(
            store,
            name,
            in_dim,
            out_dim,
            InitSpec::FanIn { fan_in: in_dim },
            rng,
        )
    }

    pub fn zeroed(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::new(store, name, in_dim, out_dim, InitSpec::Zeros, rng)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, b)
    }

    /// Sets weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        store
            .set_value(self.weight, Array::zeros(&[self.in_dim, self.out_dim]))
            .expect("same shape");
        store
            .set_value(self.bias, Array::zeros(&[self.out_dim]))
            .expect("same shape");
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), &[dim], InitSpec::Constant(1.0), rng),
            bias: store.add(format!("{name}.bias"), &[dim], InitSpec::Zeros, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Stack of linear layers with ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`; the last layer is zero-initialized when `zero_last`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        zero_last: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let lname = format!("{name}.{i}");
                if zero_last && i == n - 1 {
                    Linear::zeroed(store, &lname, dims[i], dims[i + 1], rng)
                } else {
                    Linear::fan_in(store, &lname, dims[i], dims[i + 1], rng)
                }
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Var {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x);
            if i + 1 < n {
                x = g.relu(x);
            }
        }
        x
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty mlp")
    }
}

/// Convolution followed by channel layer norm and optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: LayerNorm,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub activate: bool,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        activate: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        Self {
            weight: store.add(
                format!("{name}.weight"),
                &[fan_in, out_channels],
                InitSpec::FanIn { fan_in },
                rng,
            ),
            bias: store.add(
                format!("{name}.bias"),
                &[out_channels],
                InitSpec::Zeros,
                rng,
            ),
            norm: LayerNorm::new(store, &format!("{name}.norm"), out_channels, rng),
            kernel,
            stride,
            pad,
            in_channels,
            out_channels,
            activate,
        }
    }

    /// Applies the block to an HWC map; returns the output map and its extents.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        height: usize,
        width: usize,
    ) -> (Var, usize, usize) {
        let geom = ConvGeom {
            height,
            width,
            in_channels: self.in_channels,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        };
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.conv2d(x, w, b, geom);
        let y = self.norm.forward(g, y);
        let y = if self.activate { g.relu(y) } else { y };
        (y, geom.out_height(), geom.out_width())
    }
}
