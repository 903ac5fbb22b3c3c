use rand::Rng;

use crate::autodiff::{Binder, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Bounds applied to every predicted log-variance.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Callback that produces one parameter slot given its full name and shape.
///
/// The same `build` functions serve initialization (the callback inserts a
/// fresh tensor into a store) and binding (the callback looks the tensor up
/// and records it on a tape), so names and shapes live in one place.
pub type Build<'a, T> = dyn FnMut(&str, &[usize]) -> Result<T> + 'a;

/// Inserts freshly initialized tensors into `store`.
///
/// Matrices are drawn from `N(0, 1/fan_in)`; `1 × n` bias rows start at zero.
pub fn initializer<'a, R: Rng + ?Sized>(
    store: &'a mut ParamStore,
    rng: &'a mut R,
) -> impl FnMut(&str, &[usize]) -> Result<()> + 'a {
    move |name, shape| {
        let t = if name.ends_with(".b") || name.contains(".b_") {
            Tensor::zeros(shape.to_vec())
        } else {
            let fan_in = shape[0].max(1) as f64;
            Tensor::randn(shape.to_vec(), 1.0 / fan_in.sqrt(), rng)
        };
        store.insert(name, t)
    }
}

/// Records parameters on a tape as they are requested.
pub fn binding<'a, 'p>(
    tape: &'a mut Tape,
    binder: &'a mut Binder<'p>,
) -> impl FnMut(&str, &[usize]) -> Result<Var> + use<'a, 'p> {
    move |name, shape| binder.bind_shaped(tape, name, shape)
}

/// Affine map `x·W + b` with `W: [in × out]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: Option<T>,
}

impl<T> Linear<T> {
    pub fn build(prefix: &str, d_in: usize, d_out: usize, bias: bool, b: &mut Build<T>) -> Result<Self> {
        Ok(Linear {
            weight: b(&format!("{prefix}.w"), &[d_in, d_out])?,
            bias: if bias {
                Some(b(&format!("{prefix}.b"), &[1, d_out])?)
            } else {
                None
            },
        })
    }
}

impl Linear<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        add_bias(tape, y, self.bias)
    }
}

pub(crate) fn add_bias(tape: &mut Tape, y: Var, bias: Option<Var>) -> Result<Var> {
    match bias {
        None => Ok(y),
        Some(b) => {
            let rows = tape.shape(y)[0];
            let b = tape.broadcast_rows(b, rows)?;
            tape.add(y, b)
        }
    }
}

/// Feed-forward network with tanh hidden layers and a linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

impl<T> Mlp<T> {
    /// `depth` hidden layers of width `d_hidden`, then an output layer.
    pub fn build(
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        depth: usize,
        bias: bool,
        b: &mut Build<T>,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut width = d_in;
        for i in 0..depth {
            layers.push(Linear::build(&format!("{prefix}.l{i}"), width, d_hidden, bias, b)?);
            width = d_hidden;
        }
        layers.push(Linear::build(&format!("{prefix}.out"), width, d_out, bias, b)?);
        Ok(Mlp { layers })
    }
}

impl Mlp<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    /// Splits the output into `(μ, clamped logvar)` halves.
    pub fn gaussian(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let out = self.forward(tape, x)?;
        let width = tape.shape(out)[1];
        let d = width / 2;
        let mu = tape.slice_cols(out, 0, d)?;
        let raw = tape.slice_cols(out, d, width)?;
        Ok((mu, tape.clamp(raw, LOGVAR_MIN, LOGVAR_MAX)))
    }
}

/// Maps the hidden-state increment `h_t − h_{t−1}` to `(μ_t, logvar_t)`.
#[derive(Clone, Debug)]
pub struct VariationHead<T>(pub Mlp<T>);

impl<T> VariationHead<T> {
    pub fn build(prefix: &str, d_h: usize, depth: usize, bias: bool, b: &mut Build<T>) -> Result<Self> {
        Ok(VariationHead(Mlp::build(prefix, d_h, d_h, 2 * d_h, depth, bias, b)?))
    }
}

impl VariationHead<Var> {
    pub fn forward(&self, tape: &mut Tape, increment: Var) -> Result<(Var, Var)> {
        self.0.gaussian(tape, increment)
    }
}

/// Diagonal Gaussian `p(x_t)` over a cell input.
#[derive(Clone, Debug)]
pub struct InputDistHead<T>(pub Mlp<T>);

impl<T> InputDistHead<T> {
    pub fn build(prefix: &str, d_x: usize, d_h: usize, depth: usize, bias: bool, b: &mut Build<T>) -> Result<Self> {
        Ok(InputDistHead(Mlp::build(prefix, d_x, d_h, 2 * d_h, depth, bias, b)?))
    }
}

impl InputDistHead<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        self.0.gaussian(tape, x)
    }
}

/// Decodes a summarizing variable back into hidden-state space.
#[derive(Clone, Debug)]
pub struct ReconstructionHead<T>(pub Mlp<T>);

impl<T> ReconstructionHead<T> {
    pub fn build(prefix: &str, d_h: usize, depth: usize, bias: bool, b: &mut Build<T>) -> Result<Self> {
        Ok(ReconstructionHead(Mlp::build(prefix, d_h, d_h, d_h, depth, bias, b)?))
    }
}

impl ReconstructionHead<Var> {
    pub fn forward(&self, tape: &mut Tape, v: Var) -> Result<Var> {
        self.0.forward(tape, v)
    }
}
