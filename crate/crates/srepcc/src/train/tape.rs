//! Reverse-mode differentiation over feature matrices.
//!
//! The tape records operations on dense per-point feature matrices; sparse
//! structure (coordinates, kernel maps) is frozen at forward time, so the
//! graph itself is purely about features. Values are stored in the working
//! scalar type, gradients always in f64. Parameters live outside the tape in
//! the model's stores; the tape accumulates their gradients per registered
//! network, mirroring the store layout.

use crate::math;
use crate::nn::ops::{apply_activation, conv_backward_input, conv_backward_params, conv_linear};
use crate::nn::{expand_model, Activation, FeatMat, KernelMap, LayerSpec, ModelSpec, ParameterStore};
use crate::scalar::Scalar;

use super::loss::{focal_term, gauss_bits, max_focal_term, TRAIN_SIGMA_FLOOR};

pub type NodeId = usize;

/// Kernel map reference: an arena entry, or the implicit identity map of a
/// pointwise stride-1 convolution (row i feeds row i, coordinates unchanged).
#[derive(Debug, Clone, Copy)]
pub enum MapRef {
    Arena(usize),
    Identity,
}

enum Op {
    Leaf,
    Conv { x: NodeId, map: MapRef, net: usize, layer: usize },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Add { a: NodeId, b: NodeId },
    ConcatCols { a: NodeId, b: NodeId },
    SelectRows { x: NodeId, idx: Vec<u32> },
    AddConst { x: NodeId },
    /// Sum of Gaussian code lengths over all elements: the latent rate.
    /// t = y/qs + noise - mu, scale = exp(raw) per element.
    GaussRate { y: NodeId, mu: NodeId, scale_raw: NodeId, noise: FeatMat<f64>, qs: f64 },
    /// Same, against the tape-owned per-channel prior scales (hyper rate).
    GaussRateStatic { z: NodeId, noise: FeatMat<f64> },
    Focal { probs: NodeId, labels: Vec<u8>, missed: usize, alpha: f64, gamma: f64 },
    LinComb { terms: Vec<(f64, NodeId)> },
    WeightedSum { x: NodeId, w: FeatMat<f64> },
}

struct Node<T: Scalar> {
    value: FeatMat<T>,
    grad: Option<FeatMat<f64>>,
    op: Op,
}

/// Per-layer parameter gradients, mirroring [`crate::nn::LayerParams`].
pub struct LayerGrad {
    pub w: Vec<f64>,
    pub b: Option<Vec<f64>>,
}

/// Gradients for one registered network.
pub struct NetGrads {
    pub layers: Vec<LayerGrad>,
}

pub struct Tape<'m, T: Scalar> {
    nets: Vec<&'m ParameterStore<T>>,
    net_layers: Vec<Vec<LayerSpec>>,
    pub grads: Vec<NetGrads>,
    pub maps: Vec<KernelMap>,
    /// Trainable log-scales of the static hyper prior (one per channel).
    pub hyper_sigma_raw: Vec<f64>,
    pub hyper_sigma_grad: Vec<f64>,
    nodes: Vec<Node<T>>,
}

impl<'m, T: Scalar> Tape<'m, T> {
    pub fn new() -> Self {
        Tape {
            nets: Vec::new(),
            net_layers: Vec::new(),
            grads: Vec::new(),
            maps: Vec::new(),
            hyper_sigma_raw: Vec::new(),
            hyper_sigma_grad: Vec::new(),
            nodes: Vec::new(),
        }
    }

    /// Register a network's parameters; returns the net id used by `conv`.
    pub fn register_net(&mut self, store: &'m ParameterStore<T>, spec: &ModelSpec) -> usize {
        let layers = expand_model(spec);
        assert_eq!(layers.len(), store.layers.len(), "spec and store disagree");
        self.grads.push(NetGrads {
            layers: layers
                .iter()
                .map(|l| LayerGrad { w: vec![0.0; l.weight_len()], b: l.bias.then(|| vec![0.0; l.out_ch]) })
                .collect(),
        });
        self.nets.push(store);
        self.net_layers.push(layers);
        self.nets.len() - 1
    }

    /// Install trainable prior scales (as log-scales).
    pub fn set_hyper_sigma_raw(&mut self, raw: Vec<f64>) {
        self.hyper_sigma_grad = vec![0.0; raw.len()];
        self.hyper_sigma_raw = raw;
    }

    pub fn add_map(&mut self, map: KernelMap) -> MapRef {
        self.maps.push(map);
        MapRef::Arena(self.maps.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &FeatMat<T> {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.rows() * self.nodes[id].value.cols(), 1);
        self.nodes[id].value.get(0, 0).dbl()
    }

    fn push(&mut self, value: FeatMat<T>, op: Op) -> NodeId {
        self.nodes.push(Node { value, grad: None, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: FeatMat<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Convolution with the layer's configured activation fused in; the
    /// activation runs on the f64 accumulator before narrowing to T, exactly
    /// like the eval-mode forward, so both paths agree bitwise. Layer indices
    /// follow the expanded spec order, like the parameter store.
    pub fn conv(&mut self, x: NodeId, map: MapRef, net: usize, layer: usize) -> NodeId {
        let spec = self.net_layers[net][layer];
        let params = &self.nets[net].layers[layer];
        let xv = &self.nodes[x].value;
        let lin = match map {
            MapRef::Arena(mi) => conv_linear(xv, &self.maps[mi], &params.w, params.b.as_deref(), spec.in_ch, spec.out_ch),
            MapRef::Identity => pointwise_linear(xv, &params.w, params.b.as_deref(), spec.in_ch, spec.out_ch),
        };
        let out = apply_activation(lin, spec.activation);
        self.push(FeatMat::from_f64_mat(&out), Op::Conv { x, map, net, layer })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(v, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let mut v = FeatMat::<T>::zeros(xv.rows(), xv.cols());
        for i in 0..xv.rows() {
            for j in 0..xv.cols() {
                v.set(i, j, T::from_dbl(math::sigmoid(xv.get(i, j).dbl())));
            }
        }
        self.push(v, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!((av.rows(), av.cols()), (bv.rows(), bv.cols()));
        let mut v = FeatMat::<T>::zeros(av.rows(), av.cols());
        for i in 0..av.rows() {
            for j in 0..av.cols() {
                v.set(i, j, T::from_dbl(av.get(i, j).dbl() + bv.get(i, j).dbl()));
            }
        }
        self.push(v, Op::Add { a, b })
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(av.rows(), bv.rows());
        let mut v = FeatMat::<T>::zeros(av.rows(), av.cols() + bv.cols());
        for i in 0..av.rows() {
            for j in 0..av.cols() {
                v.set(i, j, av.get(i, j));
            }
            for j in 0..bv.cols() {
                v.set(i, av.cols() + j, bv.get(i, j));
            }
        }
        self.push(v, Op::ConcatCols { a, b })
    }

    pub fn select_rows(&mut self, x: NodeId, idx: Vec<u32>) -> NodeId {
        let v = self.nodes[x].value.select_rows(&idx);
        self.push(v, Op::SelectRows { x, idx })
    }

    pub fn add_const(&mut self, x: NodeId, c: FeatMat<f64>) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!((xv.rows(), xv.cols()), (c.rows(), c.cols()));
        let mut v = FeatMat::<T>::zeros(xv.rows(), xv.cols());
        for i in 0..xv.rows() {
            for j in 0..xv.cols() {
                v.set(i, j, T::from_dbl(xv.get(i, j).dbl() + c.get(i, j)));
            }
        }
        self.push(v, Op::AddConst { x })
    }

    /// Latent rate in bits: sum over elements of the code length of
    /// t = y/qs + noise - mu under a zero-mean Gaussian with scale
    /// exp(scale_raw), floored at [`TRAIN_SIGMA_FLOOR`].
    pub fn gauss_rate(&mut self, y: NodeId, mu: NodeId, scale_raw: NodeId, noise: FeatMat<f64>, qs: f64) -> NodeId {
        let (yv, mv, sv) = (&self.nodes[y].value, &self.nodes[mu].value, &self.nodes[scale_raw].value);
        assert_eq!((yv.rows(), yv.cols()), (mv.rows(), mv.cols()));
        assert_eq!((yv.rows(), yv.cols()), (sv.rows(), sv.cols()));
        assert_eq!((yv.rows(), yv.cols()), (noise.rows(), noise.cols()));
        let mut bits = 0.0;
        for i in 0..yv.rows() {
            for j in 0..yv.cols() {
                let t = yv.get(i, j).dbl() / qs + noise.get(i, j) - mv.get(i, j).dbl();
                let sigma = math::exp(sv.get(i, j).dbl()).max(TRAIN_SIGMA_FLOOR);
                bits += gauss_bits(t, sigma).0;
            }
        }
        self.push(FeatMat::from_vec(1, 1, vec![T::from_dbl(bits)]), Op::GaussRate { y, mu, scale_raw, noise, qs })
    }

    /// Hyper rate in bits against the tape's per-channel prior scales.
    pub fn gauss_rate_static(&mut self, z: NodeId, noise: FeatMat<f64>) -> NodeId {
        let zv = &self.nodes[z].value;
        assert_eq!(zv.cols(), self.hyper_sigma_raw.len());
        assert_eq!((zv.rows(), zv.cols()), (noise.rows(), noise.cols()));
        let mut bits = 0.0;
        for i in 0..zv.rows() {
            for j in 0..zv.cols() {
                let t = zv.get(i, j).dbl() + noise.get(i, j);
                let sigma = math::exp(self.hyper_sigma_raw[j]).max(TRAIN_SIGMA_FLOOR);
                bits += gauss_bits(t, sigma).0;
            }
        }
        self.push(FeatMat::from_vec(1, 1, vec![T::from_dbl(bits)]), Op::GaussRateStatic { z, noise })
    }

    /// Mean focal loss over candidates plus `missed` unreachable ground-truth
    /// points, each charged the maximal per-voxel penalty.
    pub fn focal(&mut self, probs: NodeId, labels: Vec<u8>, missed: usize, alpha: f64, gamma: f64) -> NodeId {
        let pv = &self.nodes[probs].value;
        assert_eq!(pv.cols(), 1);
        assert_eq!(pv.rows(), labels.len());
        let mut sum = missed as f64 * max_focal_term(alpha, gamma);
        for (i, &l) in labels.iter().enumerate() {
            sum += focal_term(pv.get(i, 0).dbl(), l != 0, alpha, gamma).0;
        }
        let denom = (labels.len() + missed).max(1) as f64;
        self.push(
            FeatMat::from_vec(1, 1, vec![T::from_dbl(sum / denom)]),
            Op::Focal { probs, labels, missed, alpha, gamma },
        )
    }

    /// Scalar reduction sum_ij w_ij x_ij.
    pub fn weighted_sum(&mut self, x: NodeId, w: FeatMat<f64>) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!((xv.rows(), xv.cols()), (w.rows(), w.cols()));
        let mut s = 0.0;
        for (a, b) in xv.as_slice().iter().zip(w.as_slice()) {
            s += a.dbl() * b;
        }
        self.push(FeatMat::from_vec(1, 1, vec![T::from_dbl(s)]), Op::WeightedSum { x, w })
    }

    /// Weighted sum of scalar nodes.
    pub fn lin_comb(&mut self, terms: Vec<(f64, NodeId)>) -> NodeId {
        let mut v = 0.0;
        for &(c, id) in &terms {
            v += c * self.scalar_value(id);
        }
        self.push(FeatMat::from_vec(1, 1, vec![T::from_dbl(v)]), Op::LinComb { terms })
    }

    /// Run reverse-mode accumulation from a scalar root. Parameter gradients
    /// land in `grads` (and `hyper_sigma_grad`); may be called once per tape.
    pub fn backward(&mut self, root: NodeId) {
        debug_assert_eq!(self.nodes[root].value.rows() * self.nodes[root].value.cols(), 1);
        self.nodes[root].grad = Some(FeatMat::from_vec(1, 1, vec![1.0]));
        for i in (0..self.nodes.len()).rev() {
            let g = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            match op {
                // leaves keep their gradient so callers can read it back
                Op::Leaf => self.nodes[i].grad = Some(g),
                Op::Conv { x, map, net, layer } => {
                    let spec = self.net_layers[net][layer];
                    // the fused activation's derivative comes from the stored output
                    let g = match spec.activation {
                        Activation::None => g,
                        Activation::Relu => {
                            let out = &self.nodes[i].value;
                            let mut gg = g;
                            for r in 0..gg.rows() {
                                for c in 0..gg.cols() {
                                    if out.get(r, c) <= T::zero() {
                                        gg.set(r, c, 0.0);
                                    }
                                }
                            }
                            gg
                        }
                        Activation::Sigmoid => {
                            let out = &self.nodes[i].value;
                            let mut gg = g;
                            for r in 0..gg.rows() {
                                for c in 0..gg.cols() {
                                    let s = out.get(r, c).dbl();
                                    gg.set(r, c, gg.get(r, c) * s * (1.0 - s));
                                }
                            }
                            gg
                        }
                    };
                    let params = &self.nets[net].layers[layer];
                    let (gx, gw, gb) = match map {
                        MapRef::Arena(mi) => {
                            let m = &self.maps[mi];
                            let gx = conv_backward_input(&g, m, &params.w, spec.in_ch, spec.out_ch);
                            let (gw, gb) =
                                conv_backward_params(&self.nodes[x].value, &g, m, spec.in_ch, spec.out_ch, spec.bias);
                            (gx, gw, gb)
                        }
                        MapRef::Identity => pointwise_backward(&self.nodes[x].value, &g, &params.w, spec, spec.bias),
                    };
                    let lg = &mut self.grads[net].layers[layer];
                    for (a, d) in lg.w.iter_mut().zip(&gw) {
                        *a += d;
                    }
                    if let (Some(ab), Some(db)) = (lg.b.as_mut(), gb.as_ref()) {
                        for (a, d) in ab.iter_mut().zip(db) {
                            *a += d;
                        }
                    }
                    self.accumulate(x, gx);
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[x].value;
                    let mut gx = g;
                    for i in 0..gx.rows() {
                        for j in 0..gx.cols() {
                            if xv.get(i, j) <= T::zero() {
                                gx.set(i, j, 0.0);
                            }
                        }
                    }
                    self.accumulate(x, gx);
                }
                Op::Sigmoid { x } => {
                    let sv = &self.nodes[i].value;
                    let mut gx = g;
                    for r in 0..gx.rows() {
                        for c in 0..gx.cols() {
                            let s = sv.get(r, c).dbl();
                            gx.set(r, c, gx.get(r, c) * s * (1.0 - s));
                        }
                    }
                    self.accumulate(x, gx);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g);
                }
                Op::ConcatCols { a, b } => {
                    let ac = self.nodes[a].value.cols();
                    let bc = self.nodes[b].value.cols();
                    let mut ga = FeatMat::<f64>::zeros(g.rows(), ac);
                    let mut gb = FeatMat::<f64>::zeros(g.rows(), bc);
                    for r in 0..g.rows() {
                        for c in 0..ac {
                            ga.set(r, c, g.get(r, c));
                        }
                        for c in 0..bc {
                            gb.set(r, c, g.get(r, ac + c));
                        }
                    }
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::SelectRows { x, idx } => {
                    let xv = &self.nodes[x].value;
                    let mut gx = FeatMat::<f64>::zeros(xv.rows(), xv.cols());
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..g.cols() {
                            let cur = gx.get(src as usize, c);
                            gx.set(src as usize, c, cur + g.get(r, c));
                        }
                    }
                    self.accumulate(x, gx);
                }
                Op::AddConst { x } => {
                    self.accumulate(x, g);
                }
                Op::GaussRate { y, mu, scale_raw, noise, qs } => {
                    let up = g.get(0, 0);
                    let (yv, mv, sv) = (&self.nodes[y].value, &self.nodes[mu].value, &self.nodes[scale_raw].value);
                    let (rows, cols) = (yv.rows(), yv.cols());
                    let mut gy = FeatMat::<f64>::zeros(rows, cols);
                    let mut gm = FeatMat::<f64>::zeros(rows, cols);
                    let mut gs = FeatMat::<f64>::zeros(rows, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            let t = yv.get(i, j).dbl() / qs + noise.get(i, j) - mv.get(i, j).dbl();
                            let sigma = math::exp(sv.get(i, j).dbl()).max(TRAIN_SIGMA_FLOOR);
                            let (_, dt, dsigma) = gauss_bits(t, sigma);
                            gy.set(i, j, up * dt / qs);
                            gm.set(i, j, -up * dt);
                            // d sigma / d raw = sigma (zero once floored)
                            let draw = if sigma > TRAIN_SIGMA_FLOOR { dsigma * sigma } else { 0.0 };
                            gs.set(i, j, up * draw);
                        }
                    }
                    self.accumulate(y, gy);
                    self.accumulate(mu, gm);
                    self.accumulate(scale_raw, gs);
                }
                Op::GaussRateStatic { z, noise } => {
                    let up = g.get(0, 0);
                    let zv = &self.nodes[z].value;
                    let mut gz = FeatMat::<f64>::zeros(zv.rows(), zv.cols());
                    let mut graw = vec![0.0; self.hyper_sigma_raw.len()];
                    for i in 0..zv.rows() {
                        for j in 0..zv.cols() {
                            let t = zv.get(i, j).dbl() + noise.get(i, j);
                            let sigma = math::exp(self.hyper_sigma_raw[j]).max(TRAIN_SIGMA_FLOOR);
                            let (_, dt, dsigma) = gauss_bits(t, sigma);
                            gz.set(i, j, up * dt);
                            if sigma > TRAIN_SIGMA_FLOOR {
                                graw[j] += up * dsigma * sigma;
                            }
                        }
                    }
                    for (a, d) in self.hyper_sigma_grad.iter_mut().zip(&graw) {
                        *a += d;
                    }
                    self.accumulate(z, gz);
                }
                Op::Focal { probs, labels, missed, alpha, gamma } => {
                    let up = g.get(0, 0);
                    let pv = &self.nodes[probs].value;
                    let denom = (labels.len() + missed).max(1) as f64;
                    let mut gp = FeatMat::<f64>::zeros(pv.rows(), 1);
                    for (r, &l) in labels.iter().enumerate() {
                        let (_, d) = focal_term(pv.get(r, 0).dbl(), l != 0, alpha, gamma);
                        gp.set(r, 0, up * d / denom);
                    }
                    self.accumulate(probs, gp);
                }
                Op::LinComb { terms } => {
                    let up = g.get(0, 0);
                    for (c, id) in terms {
                        self.accumulate(id, FeatMat::from_vec(1, 1, vec![up * c]));
                    }
                }
                Op::WeightedSum { x, w } => {
                    let up = g.get(0, 0);
                    let mut gx = w;
                    for v in gx.as_mut_slice() {
                        *v *= up;
                    }
                    self.accumulate(x, gx);
                }
            }
        }
    }

    fn accumulate(&mut self, id: NodeId, g: FeatMat<f64>) {
        match &mut self.nodes[id].grad {
            Some(acc) => {
                debug_assert_eq!((acc.rows(), acc.cols()), (g.rows(), g.cols()));
                for (a, d) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *a += d;
                }
            }
            None => self.nodes[id].grad = Some(g),
        }
    }

    /// Gradient of a leaf (or any node), if it received one.
    pub fn grad(&self, id: NodeId) -> Option<&FeatMat<f64>> {
        self.nodes[id].grad.as_ref()
    }
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// k=1 stride-1 convolution without a map: row i feeds row i.
fn pointwise_linear<T: Scalar>(x: &FeatMat<T>, w: &[T], b: Option<&[T]>, in_ch: usize, out_ch: usize) -> FeatMat<f64> {
    debug_assert_eq!(x.cols(), in_ch);
    debug_assert_eq!(w.len(), in_ch * out_ch);
    let mut acc = vec![0.0f64; x.rows() * out_ch];
    let wd: Vec<f64> = w.iter().map(|v| v.dbl()).collect();
    let bd: Option<Vec<f64>> = b.map(|bias| bias.iter().map(|v| v.dbl()).collect());
    for r in 0..x.rows() {
        let row = &mut acc[r * out_ch..(r + 1) * out_ch];
        if let Some(bias) = &bd {
            row.copy_from_slice(bias);
        }
        for (ic, xv) in x.row(r).iter().enumerate() {
            let v = xv.dbl();
            if v == 0.0 {
                continue;
            }
            let wrow = &wd[ic * out_ch..(ic + 1) * out_ch];
            for (oc, wv) in wrow.iter().enumerate() {
                row[oc] += v * wv;
            }
        }
    }
    FeatMat::from_vec(x.rows(), out_ch, acc)
}

fn pointwise_backward<T: Scalar>(
    x: &FeatMat<T>,
    g: &FeatMat<f64>,
    w: &[T],
    spec: LayerSpec,
    want_bias: bool,
) -> (FeatMat<f64>, Vec<f64>, Option<Vec<f64>>) {
    let (in_ch, out_ch) = (spec.in_ch, spec.out_ch);
    let mut gx = vec![0.0f64; x.rows() * in_ch];
    let mut gw = vec![0.0f64; in_ch * out_ch];
    let wd: Vec<f64> = w.iter().map(|v| v.dbl()).collect();
    for r in 0..x.rows() {
        let grow = g.row(r);
        let xrow = x.row(r);
        let gxrow = &mut gx[r * in_ch..(r + 1) * in_ch];
        for ic in 0..in_ch {
            let wrow = &wd[ic * out_ch..(ic + 1) * out_ch];
            let gwrow = &mut gw[ic * out_ch..(ic + 1) * out_ch];
            let xv = xrow[ic].dbl();
            let mut s = 0.0;
            for oc in 0..out_ch {
                s += grow[oc] * wrow[oc];
                gwrow[oc] += xv * grow[oc];
            }
            gxrow[ic] = s;
        }
    }
    let gb = want_bias.then(|| {
        let mut b = vec![0.0f64; out_ch];
        for r in 0..g.rows() {
            for (oc, v) in g.row(r).iter().enumerate() {
                b[oc] += v;
            }
        }
        b
    });
    (FeatMat::from_vec(x.rows(), in_ch, gx), gw, gb)
}
