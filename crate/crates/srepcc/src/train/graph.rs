//! Whole networks on the tape, and the training objectives built from them.
//!
//! A [`TapedTensor`] pairs a tape node (the features) with the coordinates
//! and stride that eval-mode code keeps in a `SparseTensor`; the sparse
//! structure is fixed at forward time and only features receive gradients.

use rand::Rng;

use crate::codec::CodecModel;
use crate::nn::{build_kernel_map, ConvKind, CoordMap, FeatMat, ModelItem, ModelSpec, SparseTensor};
use crate::scalar::Scalar;

use super::loss::{FOCAL_ALPHA, FOCAL_GAMMA};
use super::tape::{MapRef, NodeId, Tape};

pub struct TapedTensor {
    pub node: NodeId,
    pub coords: Vec<[i64; 3]>,
    pub stride: i64,
}

pub fn tape_input<T: Scalar>(tape: &mut Tape<'_, T>, x: &SparseTensor<T>) -> TapedTensor {
    TapedTensor { node: tape.leaf(x.feats.clone()), coords: x.coords.clone(), stride: x.stride }
}

/// Run a model on the tape; mirrors the eval-mode forward exactly, item by
/// item, so both paths produce identical features for identical parameters.
pub fn tape_model<T: Scalar>(
    tape: &mut Tape<'_, T>,
    net: usize,
    spec: &ModelSpec,
    x: &TapedTensor,
    tap: Option<usize>,
) -> (TapedTensor, Option<TapedTensor>) {
    let mut cur = TapedTensor { node: x.node, coords: x.coords.clone(), stride: x.stride };
    let mut tapped = None;
    let mut pi = 0usize;
    for (item_idx, item) in spec.iter().enumerate() {
        cur = match *item {
            ModelItem::Conv(l) => {
                let out = if l.kernel == 1 && l.kind == ConvKind::Stride1 {
                    TapedTensor {
                        node: tape.conv(cur.node, MapRef::Identity, net, pi),
                        coords: cur.coords,
                        stride: cur.stride,
                    }
                } else {
                    let map = build_kernel_map(&cur.coords, cur.stride, l.kernel, l.kind);
                    let coords = map.out_coords.clone();
                    let stride = map.out_stride;
                    let m = tape.add_map(map);
                    TapedTensor { node: tape.conv(cur.node, m, net, pi), coords, stride }
                };
                pi += 1;
                out
            }
            ModelItem::Irb(_) => {
                let m = tape.add_map(build_kernel_map(&cur.coords, cur.stride, 3, ConvKind::Stride1));
                let a1 = tape.conv(cur.node, m, net, pi);
                let a2 = tape.conv(a1, m, net, pi + 1);
                let a3 = tape.conv(a2, MapRef::Identity, net, pi + 2);
                let b1 = tape.conv(cur.node, MapRef::Identity, net, pi + 3);
                let b2 = tape.conv(b1, MapRef::Identity, net, pi + 4);
                let b3 = tape.conv(b2, MapRef::Identity, net, pi + 5);
                let cat = tape.concat_cols(a3, b3);
                let out = TapedTensor { node: tape.add(cur.node, cat), coords: cur.coords, stride: cur.stride };
                pi += 6;
                out
            }
        };
        if tap == Some(item_idx) {
            tapped = Some(TapedTensor { node: cur.node, coords: cur.coords.clone(), stride: cur.stride });
        }
    }
    (cur, tapped)
}

fn uniform_noise(rng: &mut impl Rng, rows: usize, cols: usize) -> FeatMat<f64> {
    FeatMat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-0.5..0.5)).collect())
}

pub struct Stage1Graph {
    /// Scalar rate-distortion loss.
    pub root: NodeId,
    pub distortion: NodeId,
    /// Latent payload bits (sum over elements).
    pub latent_rate: NodeId,
    /// Hyper payload bits.
    pub hyper_rate: NodeId,
    pub n_points: usize,
    pub n_candidates: usize,
    pub n_missed: usize,
}

/// First-stage objective: occupancy in, focal distortion over the synthesis
/// candidates plus lambda-weighted noisy-quantization rates for the latent
/// and hyper payloads. Noise is drawn from `rng` in a fixed order (hyper
/// first, then latent, both row-major), so a seeded rng makes the graph
/// deterministic.
pub fn stage1_loss<'m, T: Scalar>(
    tape: &mut Tape<'m, T>,
    model: &'m CodecModel<T>,
    hyper_raw: &[f64],
    occ: &SparseTensor<T>,
    lambda: f64,
    rng: &mut impl Rng,
) -> Stage1Graph {
    let a = tape.register_net(&model.analysis, &model.specs.analysis);
    let s = tape.register_net(&model.synthesis, &model.specs.synthesis);
    let ha = tape.register_net(&model.hyper_analysis, &model.specs.hyper_analysis);
    let hm = tape.register_net(&model.hyper_mean, &model.specs.hyper_mean);
    let hs = tape.register_net(&model.hyper_scale, &model.specs.hyper_scale);
    tape.set_hyper_sigma_raw(hyper_raw.to_vec());

    let x = tape_input(tape, occ);
    let (y, _) = tape_model(tape, a, &model.specs.analysis, &x, None);
    let (z, _) = tape_model(tape, ha, &model.specs.hyper_analysis, &y, None);

    let (zr, zc) = {
        let v = tape.value(z.node);
        (v.rows(), v.cols())
    };
    let noise_z = uniform_noise(rng, zr, zc);
    let hyper_rate = tape.gauss_rate_static(z.node, noise_z.clone());
    let z_noisy = tape.add_const(z.node, noise_z);
    let zt = TapedTensor { node: z_noisy, coords: z.coords.clone(), stride: z.stride };

    let (mu, _) = tape_model(tape, hm, &model.specs.hyper_mean, &zt, None);
    let (scale, _) = tape_model(tape, hs, &model.specs.hyper_scale, &zt, None);
    debug_assert_eq!(mu.coords, scale.coords);

    // the hyper synthesis support is a superset of the latent coordinates;
    // gather its rows down to them
    let lookup = CoordMap::build(&mu.coords);
    let idx: Vec<u32> = y
        .coords
        .iter()
        .map(|&c| lookup.get(c).expect("latent coordinate outside hyper synthesis support"))
        .collect();
    let mu_sel = tape.select_rows(mu.node, idx.clone());
    let scale_sel = tape.select_rows(scale.node, idx);

    let (yr, yc) = {
        let v = tape.value(y.node);
        (v.rows(), v.cols())
    };
    let noise_y = uniform_noise(rng, yr, yc);
    let latent_rate = tape.gauss_rate(y.node, mu_sel, scale_sel, noise_y.clone(), model.qs as f64);

    let y_noisy = tape.add_const(y.node, noise_y);
    let yt = TapedTensor { node: y_noisy, coords: y.coords.clone(), stride: y.stride };
    let (probs, _) = tape_model(tape, s, &model.specs.synthesis, &yt, None);

    let gt = CoordMap::build(&occ.coords);
    let labels: Vec<u8> = probs.coords.iter().map(|&c| gt.get(c).is_some() as u8).collect();
    let found: usize = labels.iter().map(|&l| l as usize).sum();
    let n_missed = occ.coords.len() - found;
    let n_candidates = labels.len();
    let distortion = tape.focal(probs.node, labels, n_missed, FOCAL_ALPHA, FOCAL_GAMMA);

    let n_points = occ.coords.len();
    let w = lambda / n_points as f64;
    let root = tape.lin_comb(vec![(1.0, distortion), (w, latent_rate), (w, hyper_rate)]);

    Stage1Graph { root, distortion, latent_rate, hyper_rate, n_points, n_candidates, n_missed }
}

pub struct SrGraph {
    /// Mean focal loss over in-block candidates and missed points.
    pub root: NodeId,
    pub n_candidates: usize,
    pub n_missed: usize,
}

fn in_block(c: [i64; 3], origin: [i64; 3], block_size: i64) -> bool {
    (0..3).all(|i| c[i] >= origin[i] && c[i] < origin[i] + block_size)
}

/// Super-resolution objective: the pruned synthesis features of the coarse
/// pass (computed outside the tape, coding model frozen) go through the SR
/// branch; candidates landing outside the block are dropped, ground-truth
/// points with no surviving candidate count as missed.
pub fn sr_loss<'m, T: Scalar>(
    tape: &mut Tape<'m, T>,
    sr_store: &'m crate::nn::ParameterStore<T>,
    sr_spec: &ModelSpec,
    tap: &SparseTensor<T>,
    gt_coords: &[[i64; 3]],
    origin: [i64; 3],
    block_size: i64,
) -> SrGraph {
    let net = tape.register_net(sr_store, sr_spec);
    let x = tape_input(tape, tap);
    let (out, _) = tape_model(tape, net, sr_spec, &x, None);

    let keep: Vec<u32> = (0..out.coords.len() as u32)
        .filter(|&i| in_block(out.coords[i as usize], origin, block_size))
        .collect();
    let kept_coords: Vec<[i64; 3]> = keep.iter().map(|&i| out.coords[i as usize]).collect();
    let probs = tape.select_rows(out.node, keep);

    let gt = CoordMap::build(gt_coords);
    let labels: Vec<u8> = kept_coords.iter().map(|&c| gt.get(c).is_some() as u8).collect();
    let found: usize = labels.iter().map(|&l| l as usize).sum();
    let n_missed = gt_coords.len() - found;
    let n_candidates = labels.len();
    let root = tape.focal(probs, labels, n_missed, FOCAL_ALPHA, FOCAL_GAMMA);
    SrGraph { root, n_candidates, n_missed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::ModelConfig;
    use crate::nn::{init_store, run_model_with_tap, ParameterStore};
    use crate::train::tape::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn random_occupancy(rng: &mut ChaCha8Rng, n: usize, extent: i64) -> SparseTensor<f64> {
        let mut set = BTreeSet::new();
        while set.len() < n {
            let c = [rng.gen_range(0..extent), rng.gen_range(0..extent), rng.gen_range(0..extent)];
            set.insert(crate::morton::key(c));
        }
        let coords: Vec<[i64; 3]> = set.into_iter().map(crate::morton::unkey).collect();
        SparseTensor::occupancy(coords, 1).unwrap()
    }

    #[test]
    fn tape_model_matches_eval_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        let cfg = ModelConfig::tiny();
        let model = CodecModel::<f32>::init(cfg, 7);
        for round in 0..5 {
            let occ32 = {
                let t = random_occupancy(&mut rng, 30 + round * 10, 16);
                SparseTensor::new(t.coords.clone(), FeatMat::from_f64_mat(&t.feats.to_f64()), 1).unwrap()
            };
            let (eval_out, eval_tap) = run_model_with_tap(&model.specs.analysis, &model.analysis, &occ32, Some(1));
            let mut tape = Tape::<f32>::new();
            let net = tape.register_net(&model.analysis, &model.specs.analysis);
            let x = tape_input(&mut tape, &occ32);
            let (out, tap) = tape_model(&mut tape, net, &model.specs.analysis, &x, Some(1));
            assert_eq!(out.coords, eval_out.coords);
            assert_eq!(out.stride, eval_out.stride);
            assert_eq!(tape.value(out.node), &eval_out.feats, "feature mismatch");
            let tap = tap.unwrap();
            let eval_tap = eval_tap.unwrap();
            assert_eq!(tap.coords, eval_tap.coords);
            assert_eq!(tape.value(tap.node), &eval_tap.feats);
        }
    }

    #[test]
    fn synthesis_on_tape_matches_eval_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(210);
        let cfg = ModelConfig::tiny();
        let model = CodecModel::<f32>::init(cfg, 8);
        let occ = random_occupancy(&mut rng, 50, 16);
        let occ32 = SparseTensor::new(occ.coords.clone(), FeatMat::from_f64_mat(&occ.feats.to_f64()), 1).unwrap();
        let y = crate::nn::run_model(&model.specs.analysis, &model.analysis, &occ32);
        let (eval_out, eval_tap) =
            run_model_with_tap(&model.specs.synthesis, &model.synthesis, &y, Some(crate::codec::model::SYNTHESIS_TAP));
        let mut tape = Tape::<f32>::new();
        let net = tape.register_net(&model.synthesis, &model.specs.synthesis);
        let x = tape_input(&mut tape, &y);
        let (out, tap) = tape_model(&mut tape, net, &model.specs.synthesis, &x, Some(crate::codec::model::SYNTHESIS_TAP));
        assert_eq!(out.coords, eval_out.coords);
        assert_eq!(tape.value(out.node), &eval_out.feats);
        assert_eq!(tap.unwrap().coords, eval_tap.unwrap().coords);
    }

    #[test]
    fn hyper_synthesis_covers_latents() {
        let mut rng = ChaCha8Rng::seed_from_u64(220);
        let cfg = ModelConfig::tiny();
        let model = CodecModel::<f32>::init(cfg, 9);
        for round in 0..10 {
            let occ = random_occupancy(&mut rng, 20 + round * 15, 32);
            let occ32 = SparseTensor::new(occ.coords.clone(), FeatMat::from_f64_mat(&occ.feats.to_f64()), 1).unwrap();
            let y = crate::nn::run_model(&model.specs.analysis, &model.analysis, &occ32);
            let z = crate::nn::run_model(&model.specs.hyper_analysis, &model.hyper_analysis, &y);
            let mu = crate::nn::run_model(&model.specs.hyper_mean, &model.hyper_mean, &z);
            let lookup = CoordMap::build(&mu.coords);
            for &c in &y.coords {
                assert!(lookup.get(c).is_some(), "latent {c:?} missing from hyper synthesis support");
            }
        }
    }

    #[test]
    fn stage1_candidates_cover_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(230);
        let cfg = ModelConfig::tiny();
        let model = CodecModel::<f64>::init(cfg, 10);
        let raw = vec![0.0; cfg.hyper_channels];
        for round in 0..5 {
            let occ = random_occupancy(&mut rng, 30 + round * 20, 16);
            let mut tape = Tape::<f64>::new();
            let mut noise_rng = ChaCha8Rng::seed_from_u64(round as u64);
            let g = stage1_loss(&mut tape, &model, &raw, &occ, 0.01, &mut noise_rng);
            assert_eq!(g.n_missed, 0, "synthesis support must span every input cell");
            assert!(g.n_candidates >= g.n_points);
            assert!(tape.scalar_value(g.root).is_finite());
        }
    }

    #[test]
    fn stage1_same_seed_same_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(240);
        let cfg = ModelConfig::tiny();
        let model = CodecModel::<f64>::init(cfg, 11);
        let raw = vec![0.1; cfg.hyper_channels];
        let occ = random_occupancy(&mut rng, 60, 16);
        let run = |seed: u64| {
            let mut tape = Tape::<f64>::new();
            let mut nr = ChaCha8Rng::seed_from_u64(seed);
            let g = stage1_loss(&mut tape, &model, &raw, &occ, 0.005, &mut nr);
            tape.scalar_value(g.root)
        };
        assert_eq!(run(5).to_bits(), run(5).to_bits());
        assert_ne!(run(5).to_bits(), run(6).to_bits(), "different noise should move the loss");
    }

    /// Finite differences through the full first-stage objective.
    #[test]
    fn stage1_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(250);
        let cfg = ModelConfig { widths: [4, 4, 4], latent_channels: 2, hyper_channels: 2, sr_width: 4, lambda_id: 2 };
        let model = CodecModel::<f64>::init(cfg, 12);
        let raw = vec![0.2, -0.1];
        let occ = random_occupancy(&mut rng, 12, 8);
        let lambda = 0.01;

        let eval = |m: &CodecModel<f64>, raw: &[f64]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let mut nr = ChaCha8Rng::seed_from_u64(99);
            let g = stage1_loss(&mut tape, m, raw, &occ, lambda, &mut nr);
            tape.scalar_value(g.root)
        };

        let mut tape = Tape::<f64>::new();
        let mut nr = ChaCha8Rng::seed_from_u64(99);
        let g = stage1_loss(&mut tape, &model, &raw, &occ, lambda, &mut nr);
        tape.backward(g.root);
        let grads = std::mem::take(&mut tape.grads);
        let raw_grads = tape.hyper_sigma_grad.clone();
        drop(tape);

        fn store_mut(m: &mut CodecModel<f64>, i: usize) -> &mut ParameterStore<f64> {
            match i {
                0 => &mut m.analysis,
                1 => &mut m.synthesis,
                2 => &mut m.hyper_analysis,
                3 => &mut m.hyper_mean,
                4 => &mut m.hyper_scale,
                _ => unreachable!(),
            }
        }
        fn store_ref(m: &CodecModel<f64>, i: usize) -> &ParameterStore<f64> {
            match i {
                0 => &m.analysis,
                1 => &m.synthesis,
                2 => &m.hyper_analysis,
                3 => &m.hyper_mean,
                4 => &m.hyper_scale,
                _ => unreachable!(),
            }
        }

        let h = 1e-5;
        let mut informative = 0;
        let mut probe_rng = ChaCha8Rng::seed_from_u64(251);
        for probe in 0..40 {
            let (an, fd) = if probe < 4 {
                let j = probe % raw.len();
                let mut rp = raw.clone();
                rp[j] += h;
                let mut rm = raw.clone();
                rm[j] -= h;
                (raw_grads[j], (eval(&model, &rp) - eval(&model, &rm)) / (2.0 * h))
            } else {
                let ni = probe_rng.gen_range(0..5usize);
                let li = probe_rng.gen_range(0..store_ref(&model, ni).layers.len());
                let lp = &store_ref(&model, ni).layers[li];
                let use_bias = lp.b.is_some() && probe_rng.gen_bool(0.25);
                let ki = if use_bias {
                    probe_rng.gen_range(0..lp.b.as_ref().unwrap().len())
                } else {
                    probe_rng.gen_range(0..lp.w.len())
                };
                let an = if use_bias {
                    grads[ni].layers[li].b.as_ref().unwrap()[ki]
                } else {
                    grads[ni].layers[li].w[ki]
                };
                let mut mp = model.clone();
                let mut mm = model.clone();
                if use_bias {
                    store_mut(&mut mp, ni).layers[li].b.as_mut().unwrap()[ki] += h;
                    store_mut(&mut mm, ni).layers[li].b.as_mut().unwrap()[ki] -= h;
                } else {
                    store_mut(&mut mp, ni).layers[li].w[ki] += h;
                    store_mut(&mut mm, ni).layers[li].w[ki] -= h;
                }
                (an, (eval(&mp, &raw) - eval(&mm, &raw)) / (2.0 * h))
            };
            assert!((an - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "probe {probe}: analytic {an} vs fd {fd}");
            if fd.abs() > 1e-7 {
                informative += 1;
            }
        }
        assert!(informative >= 20, "only {informative} informative probes");
    }

    #[test]
    fn sr_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(260);
        let cfg = ModelConfig { widths: [4, 4, 4], latent_channels: 2, hyper_channels: 2, sr_width: 4, lambda_id: 0 };
        let specs = crate::codec::CodecSpecs::build(&cfg);
        let store = init_store::<f64>(&specs.sr2, &mut ChaCha8Rng::seed_from_u64(261));

        // synthesis features of the coarse pass: stride-2 coords, widths[0] channels
        let mut set = BTreeSet::new();
        while set.len() < 10 {
            let c = [rng.gen_range(0..8i64) * 2, rng.gen_range(0..8i64) * 2, rng.gen_range(0..8i64) * 2];
            set.insert(crate::morton::key(c));
        }
        let coords: Vec<[i64; 3]> = set.into_iter().map(crate::morton::unkey).collect();
        let n = coords.len();
        let feats = FeatMat::from_vec(n, 4, (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let tap = SparseTensor::new(coords, feats, 2).unwrap();
        let gt = random_occupancy(&mut rng, 40, 16);

        let eval = |st: &ParameterStore<f64>| -> f64 {
            let mut tape = Tape::<f64>::new();
            let g = sr_loss(&mut tape, st, &specs.sr2, &tap, &gt.coords, [0, 0, 0], 16);
            tape.scalar_value(g.root)
        };

        let mut tape = Tape::<f64>::new();
        let g = sr_loss(&mut tape, &store, &specs.sr2, &tap, &gt.coords, [0, 0, 0], 16);
        assert!(g.n_candidates > 0);
        tape.backward(g.root);
        let grads = std::mem::take(&mut tape.grads);
        drop(tape);

        let h = 1e-5;
        let mut informative = 0;
        let mut probe_rng = ChaCha8Rng::seed_from_u64(262);
        for probe in 0..30 {
            let li = probe_rng.gen_range(0..store.layers.len());
            let ki = probe_rng.gen_range(0..store.layers[li].w.len());
            let an = grads[0].layers[li].w[ki];
            let mut sp = store.clone();
            sp.layers[li].w[ki] += h;
            let mut sm = store.clone();
            sm.layers[li].w[ki] -= h;
            let fd = (eval(&sp) - eval(&sm)) / (2.0 * h);
            assert!((an - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "probe {probe}: analytic {an} vs fd {fd}");
            if fd.abs() > 1e-7 {
                informative += 1;
            }
        }
        assert!(informative >= 20, "only {informative} informative probes");
    }
}
