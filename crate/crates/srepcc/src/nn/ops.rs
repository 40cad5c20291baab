//! Forward and backward computation kernels.
//!
//! All accumulation runs in f64 no matter the storage scalar, in the fixed
//! order given by the kernel map (offsets outer, pairs inner). Exact zeros
//! contribute nothing and are skipped.

use crate::math;
use crate::scalar::Scalar;

use super::kernel::{build_kernel_map, ConvKind, KernelMap};
use super::layer::{irb_layers, Activation, LayerSpec, ModelItem, ModelSpec};
use super::params::{LayerParams, ParameterStore};
use super::tensor::{FeatMat, SparseTensor};

/// Linear part of a sparse convolution: gather/scatter over the kernel map.
/// Weights are laid out [offset][in_ch][out_ch]; bias per output channel.
pub fn conv_linear<T: Scalar>(
    x: &FeatMat<T>,
    map: &KernelMap,
    w: &[T],
    b: Option<&[T]>,
    in_ch: usize,
    out_ch: usize,
) -> FeatMat<f64> {
    debug_assert_eq!(x.cols(), in_ch);
    debug_assert_eq!(w.len(), map.offsets.len() * in_ch * out_ch);
    let n_out = map.n_out();
    let mut acc = vec![0.0f64; n_out * out_ch];
    if let Some(bias) = b {
        debug_assert_eq!(bias.len(), out_ch);
        for o in 0..n_out {
            let row = &mut acc[o * out_ch..(o + 1) * out_ch];
            for (c, v) in bias.iter().enumerate() {
                row[c] = v.dbl();
            }
        }
    }
    let mut wd = vec![0.0f64; in_ch * out_ch];
    for (oi, pairs) in map.pairs.iter().enumerate() {
        // one weight-block conversion per offset keeps the pair loop in f64
        let wblock = &w[oi * in_ch * out_ch..(oi + 1) * in_ch * out_ch];
        for (d, s) in wd.iter_mut().zip(wblock) {
            *d = s.dbl();
        }
        for &(i, o) in pairs {
            let xrow = x.row(i as usize);
            let arow = &mut acc[o as usize * out_ch..(o as usize + 1) * out_ch];
            for (ic, xv) in xrow.iter().enumerate() {
                let v = xv.dbl();
                if v == 0.0 {
                    continue;
                }
                let wrow = &wd[ic * out_ch..(ic + 1) * out_ch];
                for (oc, wv) in wrow.iter().enumerate() {
                    arow[oc] += v * wv;
                }
            }
        }
    }
    FeatMat::from_vec(n_out, out_ch, acc)
}

/// Gradient w.r.t. the input features.
pub fn conv_backward_input<T: Scalar>(
    grad_out: &FeatMat<f64>,
    map: &KernelMap,
    w: &[T],
    in_ch: usize,
    out_ch: usize,
) -> FeatMat<f64> {
    let mut gx = vec![0.0f64; map.n_in * in_ch];
    let mut wd = vec![0.0f64; in_ch * out_ch];
    for (oi, pairs) in map.pairs.iter().enumerate() {
        let wblock = &w[oi * in_ch * out_ch..(oi + 1) * in_ch * out_ch];
        for (d, s) in wd.iter_mut().zip(wblock) {
            *d = s.dbl();
        }
        for &(i, o) in pairs {
            let grow = grad_out.row(o as usize);
            let xrow = &mut gx[i as usize * in_ch..(i as usize + 1) * in_ch];
            for ic in 0..in_ch {
                let wrow = &wd[ic * out_ch..(ic + 1) * out_ch];
                let mut s = 0.0;
                for (oc, wv) in wrow.iter().enumerate() {
                    s += grow[oc] * wv;
                }
                xrow[ic] += s;
            }
        }
    }
    FeatMat::from_vec(map.n_in, in_ch, gx)
}

/// Gradients w.r.t. weights and (optionally) bias.
pub fn conv_backward_params<T: Scalar>(
    x: &FeatMat<T>,
    grad_out: &FeatMat<f64>,
    map: &KernelMap,
    in_ch: usize,
    out_ch: usize,
    want_bias: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let mut gw = vec![0.0f64; map.offsets.len() * in_ch * out_ch];
    for (oi, pairs) in map.pairs.iter().enumerate() {
        let wblock = &mut gw[oi * in_ch * out_ch..(oi + 1) * in_ch * out_ch];
        for &(i, o) in pairs {
            let xrow = x.row(i as usize);
            let grow = grad_out.row(o as usize);
            for (ic, xv) in xrow.iter().enumerate() {
                let v = xv.dbl();
                if v == 0.0 {
                    continue;
                }
                let wrow = &mut wblock[ic * out_ch..(ic + 1) * out_ch];
                for (oc, g) in grow.iter().enumerate() {
                    wrow[oc] += v * g;
                }
            }
        }
    }
    let gb = want_bias.then(|| {
        let mut b = vec![0.0f64; out_ch];
        for o in 0..grad_out.rows() {
            for (oc, g) in grad_out.row(o).iter().enumerate() {
                b[oc] += g;
            }
        }
        b
    });
    (gw, gb)
}

pub fn apply_activation(m: FeatMat<f64>, act: Activation) -> FeatMat<f64> {
    match act {
        Activation::None => m,
        Activation::Relu => m.map(|v| if v > 0.0 { v } else { 0.0 }),
        Activation::Sigmoid => m.map(math::sigmoid),
    }
}

fn store_from_f64<T: Scalar>(m: FeatMat<f64>) -> FeatMat<T> {
    FeatMat::from_f64_mat(&m)
}

/// Full sparse convolution: kernel map construction, linear pass, bias,
/// activation, cast back to the storage scalar.
pub fn sparse_conv<T: Scalar>(x: &SparseTensor<T>, spec: &LayerSpec, p: &LayerParams<T>) -> SparseTensor<T> {
    let map = build_kernel_map(&x.coords, x.stride, spec.kernel, spec.kind);
    sparse_conv_with_map(x, spec, p, &map)
}

pub fn sparse_conv_with_map<T: Scalar>(
    x: &SparseTensor<T>,
    spec: &LayerSpec,
    p: &LayerParams<T>,
    map: &KernelMap,
) -> SparseTensor<T> {
    let lin = conv_linear(&x.feats, map, &p.w, p.b.as_deref(), spec.in_ch, spec.out_ch);
    let act = apply_activation(lin, spec.activation);
    SparseTensor { coords: map.out_coords.clone(), feats: store_from_f64(act), stride: map.out_stride }
}

/// Inception-residual block forward. Residual add keeps the coordinate set,
/// so all-zero branch weights make this the identity.
pub fn irb_forward<T: Scalar>(x: &SparseTensor<T>, n: usize, params: &[LayerParams<T>]) -> SparseTensor<T> {
    assert_eq!(params.len(), 6);
    let layers = irb_layers(n);
    let k3 = build_kernel_map(&x.coords, x.stride, 3, ConvKind::Stride1);
    let a1 = sparse_conv_with_map(x, &layers[0], &params[0], &k3);
    let a2 = sparse_conv_with_map(&a1, &layers[1], &params[1], &k3);
    let a3 = pointwise(&a2, &layers[2], &params[2]);
    let b1 = pointwise(x, &layers[3], &params[3]);
    let b2 = pointwise(&b1, &layers[4], &params[4]);
    let b3 = pointwise(&b2, &layers[5], &params[5]);
    let h = n / 2;
    let mut out = FeatMat::zeros(x.len(), n);
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let xr = x.feats.row(r);
        for c in 0..h {
            row[c] = T::from_dbl(xr[c].dbl() + a3.feats.get(r, c).dbl());
            row[h + c] = T::from_dbl(xr[h + c].dbl() + b3.feats.get(r, c).dbl());
        }
    }
    SparseTensor { coords: x.coords.clone(), feats: out, stride: x.stride }
}

/// 1x1x1 stride-1 convolution without a kernel map: plain row-wise matmul.
fn pointwise<T: Scalar>(x: &SparseTensor<T>, spec: &LayerSpec, p: &LayerParams<T>) -> SparseTensor<T> {
    debug_assert_eq!(spec.kernel, 1);
    let out_ch = spec.out_ch;
    debug_assert_eq!(x.channels(), spec.in_ch);
    let n = x.len();
    let mut acc = vec![0.0f64; n * out_ch];
    let wd: Vec<f64> = p.w.iter().map(|v| v.dbl()).collect();
    let bd: Option<Vec<f64>> = p.b.as_ref().map(|b| b.iter().map(|v| v.dbl()).collect());
    for r in 0..n {
        let xrow = x.feats.row(r);
        let arow = &mut acc[r * out_ch..(r + 1) * out_ch];
        if let Some(b) = &bd {
            arow.copy_from_slice(b);
        }
        for (ic, xv) in xrow.iter().enumerate() {
            let v = xv.dbl();
            if v == 0.0 {
                continue;
            }
            let wrow = &wd[ic * out_ch..(ic + 1) * out_ch];
            for (oc, wv) in wrow.iter().enumerate() {
                arow[oc] += v * wv;
            }
        }
    }
    let act = apply_activation(FeatMat::from_vec(n, out_ch, acc), spec.activation);
    SparseTensor { coords: x.coords.clone(), feats: store_from_f64(act), stride: x.stride }
}

/// Run a model, returning the final tensor. `params` must have been created
/// for this spec (one entry per expanded convolution).
pub fn run_model<T: Scalar>(spec: &ModelSpec, store: &ParameterStore<T>, x: &SparseTensor<T>) -> SparseTensor<T> {
    run_model_with_tap(spec, store, x, None).0
}

/// Same, additionally returning the tensor after item `tap` (0-based index
/// into the model items) when requested.
pub fn run_model_with_tap<T: Scalar>(
    spec: &ModelSpec,
    store: &ParameterStore<T>,
    x: &SparseTensor<T>,
    tap: Option<usize>,
) -> (SparseTensor<T>, Option<SparseTensor<T>>) {
    let mut cur = x.clone();
    let mut tapped = None;
    let mut pi = 0usize;
    for (item_idx, item) in spec.iter().enumerate() {
        cur = match *item {
            ModelItem::Conv(l) => {
                let out = if l.kernel == 1 && l.kind == ConvKind::Stride1 {
                    pointwise(&cur, &l, &store.layers[pi])
                } else {
                    sparse_conv(&cur, &l, &store.layers[pi])
                };
                pi += 1;
                out
            }
            ModelItem::Irb(n) => {
                let out = irb_forward(&cur, n, &store.layers[pi..pi + 6]);
                pi += 6;
                out
            }
        };
        if tap == Some(item_idx) {
            tapped = Some(cur.clone());
        }
    }
    debug_assert_eq!(pi, store.layers.len());
    (cur, tapped)
}

/// Indices (ascending) of the k rows with the highest probability. Rows are
/// in canonical coordinate order, so ties on probability resolve to the
/// lower Morton key. k is clamped to the row count.
pub fn top_k_indices<T: Scalar>(probs: &[T], k: usize) -> Vec<u32> {
    let k = k.min(probs.len());
    let mut idx: Vec<u32> = (0..probs.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        let pa = probs[a as usize].dbl();
        let pb = probs[b as usize].dbl();
        pb.partial_cmp(&pa).unwrap().then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Keep the k most probable rows of a tensor (`probs` aligned row-for-row
/// with `x`).
pub fn prune_top_k<T: Scalar>(x: &SparseTensor<T>, probs: &[T], k: usize) -> SparseTensor<T> {
    let idx = top_k_indices(probs, k);
    x.select(&idx)
}
