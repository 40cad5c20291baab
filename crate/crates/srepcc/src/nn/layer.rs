//! Layer and model descriptions.
//!
//! A model is a sequence of items: plain convolutions and inception-residual
//! blocks. IRBs expand to a fixed six-convolution wiring, so everything that
//! needs flat layers (parameter storage, serialization, counting) works off
//! [`expand_model`].

use super::kernel::ConvKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kernel: u32,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kind: ConvKind,
    pub bias: bool,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn param_count(&self) -> u64 {
        let k = self.kernel as u64;
        k * k * k * self.in_ch as u64 * self.out_ch as u64 + if self.bias { self.out_ch as u64 } else { 0 }
    }

    pub fn weight_len(&self) -> usize {
        (self.kernel as usize).pow(3) * self.in_ch * self.out_ch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelItem {
    Conv(LayerSpec),
    /// Inception-residual block at the given width (must be even).
    Irb(usize),
}

pub type ModelSpec = Vec<ModelItem>;

/// The six convolutions of an IRB in storage order. Branch A sees a 3x3x3
/// receptive field, branch B stays pointwise; each narrows to half width and
/// the halves are concatenated onto the residual path.
pub fn irb_layers(n: usize) -> [LayerSpec; 6] {
    assert!(n >= 2 && n % 2 == 0, "IRB width {n} must be even");
    let h = n / 2;
    let conv = |kernel, in_ch, out_ch, bias, activation| LayerSpec {
        kernel,
        in_ch,
        out_ch,
        kind: ConvKind::Stride1,
        bias,
        activation,
    };
    [
        conv(3, n, n, true, Activation::Relu),
        conv(3, n, h, true, Activation::Relu),
        conv(1, h, h, false, Activation::None),
        conv(1, n, n, true, Activation::Relu),
        conv(1, n, h, false, Activation::Relu),
        conv(1, h, h, false, Activation::None),
    ]
}

/// Closed-form IRB size; kept in integer arithmetic (n is even).
pub fn irb_param_count(n: u64) -> u64 {
    (85 * n * n + 5 * n) / 2
}

/// Flatten a model into its constituent convolutions, IRBs expanded in order.
pub fn expand_model(spec: &ModelSpec) -> Vec<LayerSpec> {
    let mut out = Vec::new();
    for item in spec {
        match *item {
            ModelItem::Conv(l) => out.push(l),
            ModelItem::Irb(n) => out.extend(irb_layers(n)),
        }
    }
    out
}

/// Total learnable parameters. Additive over items, so order never matters.
pub fn count_parameters(spec: &ModelSpec) -> u64 {
    spec.iter()
        .map(|item| match *item {
            ModelItem::Conv(l) => l.param_count(),
            ModelItem::Irb(n) => irb_param_count(n as u64),
        })
        .sum()
}
