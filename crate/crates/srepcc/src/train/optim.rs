//! Adam over a flat f64 master vector, plus the packing that binds parameter
//! stores (and the hyper log-scales) to that vector.
//!
//! The master copy stays f64 across the whole run; after every step the
//! stores receive T-narrowed values, so the forward pass always runs at
//! deployment precision while the optimizer state never loses bits.

use crate::nn::ParameterStore;
use crate::scalar::Scalar;

use super::tape::NetGrads;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub struct Adam {
    pub lr: f64,
    t: u64,
    master: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(master: Vec<f64>, lr: f64) -> Self {
        let n = master.len();
        Adam { lr, t: 0, master, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn master(&self) -> &[f64] {
        &self.master
    }

    pub fn halve_lr(&mut self) {
        self.lr *= 0.5;
    }

    pub fn step(&mut self, grads: &[f64]) {
        assert_eq!(grads.len(), self.master.len());
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..self.master.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            self.master[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
}

/// Flatten stores in order; within a layer, weights then bias.
pub fn pack_stores<T: Scalar>(stores: &[&ParameterStore<T>]) -> Vec<f64> {
    let mut out = Vec::new();
    for st in stores {
        for l in &st.layers {
            out.extend(l.w.iter().map(|v| v.dbl()));
            if let Some(b) = &l.b {
                out.extend(b.iter().map(|v| v.dbl()));
            }
        }
    }
    out
}

/// Flatten tape gradients with the same layout as [`pack_stores`].
pub fn pack_grads(grads: &[NetGrads]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        for l in &g.layers {
            out.extend_from_slice(&l.w);
            if let Some(b) = &l.b {
                out.extend_from_slice(b);
            }
        }
    }
    out
}

/// Write a flat master vector back into the stores, narrowing to T. Returns
/// how many elements were consumed (the caller may keep a tail for values
/// that live outside any store).
pub fn write_back<T: Scalar>(flat: &[f64], stores: &mut [&mut ParameterStore<T>]) -> usize {
    let mut k = 0;
    for st in stores.iter_mut() {
        for l in st.layers.iter_mut() {
            for w in l.w.iter_mut() {
                *w = T::from_dbl(flat[k]);
                k += 1;
            }
            if let Some(b) = l.b.as_mut() {
                for v in b.iter_mut() {
                    *v = T::from_dbl(flat[k]);
                    k += 1;
                }
            }
        }
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_store, ConvKind, LayerSpec, ModelItem};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_size_is_the_learning_rate() {
        // bias correction makes the first update lr-sized for any grad scale
        for &g in &[1e-4, 1.0, 1e4] {
            let mut opt = Adam::new(vec![0.0], 1e-3);
            opt.step(&[g]);
            assert!((opt.master()[0].abs() - 1e-3).abs() < 1e-6, "g={g}");
        }
    }

    #[test]
    fn converges_on_anisotropic_quadratic() {
        let a = [1.0, 10.0, 100.0, 0.3];
        let b = [3.0, -2.0, 0.5, 7.0];
        let mut opt = Adam::new(vec![0.0; 4], 0.05);
        for _ in 0..3000 {
            let g: Vec<f64> = (0..4).map(|i| 2.0 * a[i] * (opt.master()[i] - b[i])).collect();
            opt.step(&g);
        }
        for i in 0..4 {
            assert!((opt.master()[i] - b[i]).abs() < 1e-3, "dim {i}: {}", opt.master()[i]);
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut opt = Adam::new(vec![0.5, -0.25], 1e-2);
            for s in 0..50 {
                opt.step(&[(s as f64 * 0.1).sin(), (s as f64 * 0.2).cos()]);
            }
            (opt.master()[0].to_bits(), opt.master()[1].to_bits())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn halve_lr_halves() {
        let mut opt = Adam::new(vec![0.0], 8e-3);
        opt.halve_lr();
        assert_eq!(opt.lr, 4e-3);
    }

    #[test]
    fn pack_write_back_roundtrip() {
        let spec = vec![
            ModelItem::Conv(LayerSpec {
                kernel: 3,
                in_ch: 2,
                out_ch: 3,
                kind: ConvKind::Stride1,
                bias: true,
                activation: crate::nn::Activation::Relu,
            }),
            ModelItem::Irb(4),
            ModelItem::Conv(LayerSpec {
                kernel: 1,
                in_ch: 4,
                out_ch: 1,
                kind: ConvKind::Stride1,
                bias: false,
                activation: crate::nn::Activation::Sigmoid,
            }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(300);
        let a = init_store::<f32>(&spec, &mut rng);
        let b = init_store::<f32>(&spec, &mut rng);
        let mut flat = pack_stores(&[&a, &b]);
        flat.push(0.625); // caller-owned tail survives untouched
        let mut a2 = a.clone();
        let mut b2 = b.clone();
        for l in a2.layers.iter_mut().chain(b2.layers.iter_mut()) {
            for w in l.w.iter_mut() {
                *w = 0.0;
            }
        }
        let used = write_back(&flat, &mut [&mut a2, &mut b2]);
        assert_eq!(used, flat.len() - 1);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn grad_packing_matches_store_layout() {
        let spec = vec![ModelItem::Irb(4)];
        let mut rng = ChaCha8Rng::seed_from_u64(301);
        let store = init_store::<f64>(&spec, &mut rng);
        let mut tape = crate::train::tape::Tape::<f64>::new();
        tape.register_net(&store, &spec);
        let flat_p = pack_stores(&[&store]);
        let flat_g = pack_grads(&tape.grads);
        assert_eq!(flat_p.len(), flat_g.len());
    }
}
