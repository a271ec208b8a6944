//! Convolution parameters and the plumbing that places them on a tape.
//!
//! Parameter structs own plain tensors. Before a forward pass they are
//! bound onto a [`Tape`] through a [`Binder`], which also keeps a named
//! registry of the tracked leaves so the optimizer and checkpointing can
//! find values and gradients by name.

use tensor_core::{Result, Tape, Tensor, Var};

use crate::rng::Rng;

/// A 2-D convolution's owned parameters and fixed geometry.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Conv {
    /// He-style initialization: weights scaled by sqrt(2 / fan_in).
    pub fn init(
        rng: &mut Rng,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self::init_dilated(rng, in_c, out_c, k, stride, 1, padding)
    }

    pub fn init_dilated(
        rng: &mut Rng,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = Tensor::new(
            vec![out_c, in_c, k, k],
            (0..out_c * in_c * k * k)
                .map(|_| rng.normal_scaled(std))
                .collect(),
        )
        .expect("shape matches data");
        Conv {
            weight,
            bias: Tensor::zeros(vec![out_c]),
            stride,
            dilation,
            padding,
        }
    }

    pub fn zeroed(in_c: usize, out_c: usize, k: usize, stride: usize, padding: usize) -> Self {
        Conv {
            weight: Tensor::zeros(vec![out_c, in_c, k, k]),
            bias: Tensor::zeros(vec![out_c]),
            stride,
            dilation: 1,
            padding,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn bind(&self, binder: &mut Binder, name: &str) -> BoundConv {
        BoundConv {
            w: binder.leaf(&format!("{name}.weight"), &self.weight),
            b: binder.leaf(&format!("{name}.bias"), &self.bias),
            stride: self.stride,
            dilation: self.dilation,
            padding: self.padding,
        }
    }

    pub fn visit<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{name}.weight"), &self.weight));
        out.push((format!("{name}.bias"), &self.bias));
    }

    pub fn visit_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{name}.weight"), &mut self.weight));
        out.push((format!("{name}.bias"), &mut self.bias));
    }
}

/// Tape-bound convolution.
#[derive(Clone)]
pub struct BoundConv {
    pub w: Var,
    pub b: Var,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl BoundConv {
    pub fn apply(&self, x: &Var) -> Result<Var> {
        x.conv2d(&self.w, &self.b, self.stride, self.dilation, self.padding)
    }
}

/// Binds parameter tensors to a tape, optionally tracking gradients, and
/// remembers every leaf by name.
pub struct Binder {
    tape: Tape,
    track: bool,
    slots: Vec<(String, Var)>,
}

impl Binder {
    pub fn new(tape: &Tape, track: bool) -> Self {
        Binder {
            tape: tape.clone(),
            track,
            slots: Vec::new(),
        }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn leaf(&mut self, name: &str, tensor: &Tensor) -> Var {
        let t = if self.track {
            tensor.clone().with_grad()
        } else {
            tensor.clone()
        };
        let var = self.tape.leaf(t);
        self.slots.push((name.to_string(), var.clone()));
        var
    }

    /// Named leaves in binding order.
    pub fn slots(&self) -> &[(String, Var)] {
        &self.slots
    }

    /// Gradients by name after a backward pass. Leaves with no gradient
    /// contribution report zeros.
    pub fn gradients(&self) -> Vec<(String, Tensor)> {
        self.slots
            .iter()
            .map(|(name, var)| {
                let g = var
                    .grad()
                    .unwrap_or_else(|| Tensor::zeros(var.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}
