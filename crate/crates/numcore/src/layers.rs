use rand::Rng;

use crate::error::{NumError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &Graph<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// Fully connected layer `x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(in)` initialization for weights and biases.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut sample = |n: usize| -> Vec<T> {
            (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
        };
        let w = Tensor::new(vec![in_dim, out_dim], sample(in_dim * out_dim)).expect("sized");
        let b = Tensor::new(vec![1, out_dim], sample(out_dim)).expect("sized");
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            in_dim,
            out_dim,
        }
    }

    /// Identity weight and zero bias; needs `in_dim == out_dim`.
    pub fn identity<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::identity(dim)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, dim])),
            in_dim: dim,
            out_dim: dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (_, cols) = g.shape(x);
        if cols != self.in_dim {
            return Err(NumError::shape(
                "linear",
                format!("input width {cols}, layer expects {}", self.in_dim),
            ));
        }
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        g.add_row(g.matmul(x, w)?, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Multilayer perceptron with a shared hidden activation and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        assert!(widths.iter().all(|&w| w > 0), "layer widths must be positive");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self {
            widths: widths.to_vec(),
            activation,
            layers,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().expect("non-empty")
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i < last {
                h = self.activation.apply(g, h)?;
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }

    /// Parameter count as a function of the widths alone.
    pub fn num_params(&self) -> usize {
        Self::count_for(&self.widths)
    }

    pub fn count_for(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Non-overlapping patch convolution: each `patch x patch` tile of a
/// channels-first image is mapped by one shared linear layer, followed by a
/// ReLU. Output is `[batch, patches * out_channels]`.
#[derive(Clone, Debug)]
pub struct PatchConv {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub kernel: Linear,
    per_sample: Vec<usize>,
}

impl PatchConv {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        (channels, height, width): (usize, usize, usize),
        patch: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        assert!(height % patch == 0 && width % patch == 0, "patch must tile the frame");
        let kernel = Linear::new(store, name, channels * patch * patch, out_channels, rng);
        let (ph, pw) = (height / patch, width / patch);
        let mut per_sample = Vec::with_capacity(channels * height * width);
        for py in 0..ph {
            for px in 0..pw {
                for c in 0..channels {
                    for y in 0..patch {
                        for x in 0..patch {
                            let row = py * patch + y;
                            let col = px * patch + x;
                            per_sample.push(c * height * width + row * width + col);
                        }
                    }
                }
            }
        }
        Self {
            channels,
            height,
            width,
            patch,
            kernel,
            per_sample,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn out_dim(&self) -> usize {
        self.num_patches() * self.kernel.out_dim
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (batch, cols) = g.shape(x);
        if cols != self.in_dim() {
            return Err(NumError::shape(
                "patch_conv",
                format!("input width {cols}, expected {}", self.in_dim()),
            ));
        }
        let n = self.in_dim();
        let perm: Vec<usize> = (0..batch)
            .flat_map(|b| self.per_sample.iter().map(move |&i| b * n + i))
            .collect();
        let patches = g.permute(x, &perm, batch * self.num_patches(), self.kernel.in_dim)?;
        let h = g.relu(self.kernel.forward(g, store, patches)?)?;
        g.reshape(h, batch, self.out_dim())
    }
}
