//! The staged schedule: stage 1 fits the coding model to the rate-distortion
//! objective, stages 2 and 3 each fit one SR branch against a frozen coding
//! model. Single-threaded and deterministic in the seed.

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::codec::model::SYNTHESIS_TAP;
use crate::codec::{CodecModel, ModelConfig, LAMBDAS};
use crate::entropy::quantize_value;
use crate::morton;
use crate::nn::{prune_top_k, run_model, run_model_with_tap, CoordMap, SparseTensor};
use crate::scalar::Scalar;
use crate::{Error, Result};

use super::graph::{sr_loss, stage1_loss};
use super::loss::{gauss_bits, TRAIN_SIGMA_FLOOR};
use super::optim::{pack_grads, pack_stores, write_back, Adam};
use super::tape::Tape;

/// One training stage. Freezing is structural: each stage packs only the
/// parameters it trains into the optimizer, so everything else cannot move.
/// Stage 1 covers the five coding nets plus the hyper prior scales, stage 2
/// the SF=2 branch, stage 3 the SF=4 branch.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub stage: u8,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Epochs without loss improvement before the learning rate is halved.
    pub plateau_patience: usize,
    /// Edge length of the training blocks; SR candidates that land outside
    /// are dropped rather than labeled.
    pub block_size: i64,
}

impl TrainRun {
    pub fn new(stage: u8) -> Self {
        TrainRun {
            stage,
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 7,
            plateau_patience: 5,
            block_size: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTraceRow {
    pub epoch: usize,
    pub distortion: f64,
    pub rate_bits_per_point: f64,
    pub loss: f64,
}

pub fn trace_csv(rows: &[LossTraceRow]) -> String {
    let mut s = String::from("epoch,D,R_bits_per_point,loss\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.distortion, r.rate_bits_per_point, r.loss));
    }
    s
}

/// Train one stage in place, returning the per-epoch loss trace.
pub fn train_stage<T: Scalar>(
    model: &mut CodecModel<T>,
    run: &TrainRun,
    dataset: &[SparseTensor<T>],
) -> Result<Vec<LossTraceRow>> {
    if dataset.is_empty() {
        return Err(Error::Parse("training dataset is empty".into()));
    }
    if run.epochs == 0 || run.batch_size == 0 {
        return Err(Error::Parse("epochs and batch_size must be at least 1".into()));
    }
    match run.stage {
        1 => Ok(train_stage1(model, run, dataset)),
        2 => Ok(train_sr(model, 2, run, dataset)),
        3 => Ok(train_sr(model, 4, run, dataset)),
        s => Err(Error::Parse(format!("unknown training stage {s}"))),
    }
}

/// Train all five lambda points on one dataset, lowest lambda (highest rate)
/// first, each subsequent model warm-started from the previous one. Returns
/// the trained models indexed by lambda id.
pub fn train_lambda_chain<T: Scalar>(
    base: ModelConfig,
    run: &TrainRun,
    dataset: &[SparseTensor<T>],
    init_seed: u64,
) -> Result<Vec<(CodecModel<T>, Vec<LossTraceRow>)>> {
    if run.stage != 1 {
        return Err(Error::Parse("the lambda chain is a stage-1 schedule".into()));
    }
    let mut out: Vec<Option<(CodecModel<T>, Vec<LossTraceRow>)>> = (0..LAMBDAS.len()).map(|_| None).collect();
    let mut prev: Option<CodecModel<T>> = None;
    for id in (0..LAMBDAS.len() as u8).rev() {
        let mut model = match prev.take() {
            Some(mut p) => {
                p.config.lambda_id = id;
                p
            }
            None => CodecModel::init(base.with_lambda(id), init_seed),
        };
        let link = TrainRun { seed: run.seed.wrapping_add(id as u64), ..run.clone() };
        let trace = train_stage(&mut model, &link, dataset)?;
        prev = Some(model.clone());
        out[id as usize] = Some((model, trace));
    }
    Ok(out.into_iter().map(Option::unwrap).collect())
}

fn train_stage1<T: Scalar>(
    model: &mut CodecModel<T>,
    run: &TrainRun,
    dataset: &[SparseTensor<T>],
) -> Vec<LossTraceRow> {
    let lambda = model.config.lambda();
    let mut raw: Vec<f64> = model.hyper_sigma.iter().map(|&s| (s as f64).ln()).collect();
    let mut master = pack_stores(&[
        &model.analysis,
        &model.synthesis,
        &model.hyper_analysis,
        &model.hyper_mean,
        &model.hyper_scale,
    ]);
    let n_store = master.len();
    master.extend_from_slice(&raw);
    let mut adam = Adam::new(master, run.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);

    let n_blocks = dataset.len() as f64;
    let mut trace = Vec::with_capacity(run.epochs);
    let (mut best, mut stall) = (f64::INFINITY, 0usize);
    for epoch in 0..run.epochs {
        let (mut d_sum, mut r_sum, mut l_sum) = (0.0, 0.0, 0.0);
        for batch in dataset.chunks(run.batch_size) {
            let mut g_sum = vec![0.0; n_store + raw.len()];
            for block in batch.iter() {
                let mut tape = Tape::new();
                let g = stage1_loss(&mut tape, model, &raw, block, lambda, &mut rng);
                d_sum += tape.scalar_value(g.distortion);
                let bits = tape.scalar_value(g.latent_rate) + tape.scalar_value(g.hyper_rate);
                r_sum += bits / g.n_points as f64;
                l_sum += tape.scalar_value(g.root);
                tape.backward(g.root);
                let mut flat = pack_grads(&tape.grads);
                flat.extend_from_slice(&tape.hyper_sigma_grad);
                for (a, b) in g_sum.iter_mut().zip(&flat) {
                    *a += b;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for v in g_sum.iter_mut() {
                *v *= inv;
            }
            adam.step(&g_sum);
            let consumed = write_back(
                adam.master(),
                &mut [
                    &mut model.analysis,
                    &mut model.synthesis,
                    &mut model.hyper_analysis,
                    &mut model.hyper_mean,
                    &mut model.hyper_scale,
                ],
            );
            debug_assert_eq!(consumed, n_store);
            raw.copy_from_slice(&adam.master()[consumed..]);
        }
        let epoch_loss = l_sum / n_blocks;
        trace.push(LossTraceRow {
            epoch,
            distortion: d_sum / n_blocks,
            rate_bits_per_point: r_sum / n_blocks,
            loss: epoch_loss,
        });
        if epoch_loss < best - 1e-9 * best.abs().min(1.0) {
            best = epoch_loss;
            stall = 0;
        } else {
            stall += 1;
            if stall >= run.plateau_patience {
                adam.halve_lr();
                stall = 0;
            }
        }
    }
    model.hyper_sigma = raw.iter().map(|&r| r.exp() as f32).collect();
    trace
}

/// Floor coordinates to multiples of `sf` and deduplicate; the result is the
/// downsampled cloud embedded at stride `sf` in the original coordinates.
fn downsample_occupancy<T: Scalar>(block: &SparseTensor<T>, sf: i64) -> SparseTensor<T> {
    let mut set = BTreeSet::new();
    for c in &block.coords {
        set.insert(morton::key([
            c[0].div_euclid(sf) * sf,
            c[1].div_euclid(sf) * sf,
            c[2].div_euclid(sf) * sf,
        ]));
    }
    let coords: Vec<[i64; 3]> = set.into_iter().map(morton::unkey).collect();
    SparseTensor::occupancy(coords, sf).expect("downsampled coords are canonical")
}

struct FrozenSrInput<T: Scalar> {
    /// Synthesis features after Top-k pruning, at stride `sf`.
    tap: SparseTensor<T>,
    /// Evaluation-mode rate proxy of the frozen coding pass, in bits.
    rate_bits: f64,
}

/// Run the frozen coding model the way the deployed decoder will see it:
/// hyper latents hard-rounded, latents quantized against the conditional
/// mean, candidates pruned to the known downsampled point count.
fn frozen_sr_input<T: Scalar>(
    model: &CodecModel<T>,
    sf: i64,
    block_size: i64,
    block: &SparseTensor<T>,
) -> FrozenSrInput<T> {
    let down = downsample_occupancy(block, sf);
    let y = run_model(&model.specs.analysis, &model.analysis, &down);
    let z = run_model(&model.specs.hyper_analysis, &model.hyper_analysis, &y);

    let mut rate_bits = 0.0;
    let mut zhat = z.clone();
    for i in 0..z.feats.rows() {
        for c in 0..z.feats.cols() {
            let r = z.feats.get(i, c).dbl().round();
            zhat.feats.set(i, c, T::from_dbl(r));
            rate_bits += gauss_bits(r, model.hyper_sigma[c] as f64).0;
        }
    }

    let mu_t = run_model(&model.specs.hyper_mean, &model.hyper_mean, &zhat);
    let sc_t = run_model(&model.specs.hyper_scale, &model.hyper_scale, &zhat);
    let lookup = CoordMap::build(&mu_t.coords);
    let q = model.qs as f64;
    let mut yhat = y.clone();
    for (row, yc) in y.coords.iter().enumerate() {
        let mi = lookup.get(*yc).expect("latent coordinate outside hyper synthesis support") as usize;
        for ch in 0..y.feats.cols() {
            let mu = mu_t.feats.get(mi, ch).dbl();
            let sigma = sc_t.feats.get(mi, ch).dbl().exp().max(TRAIN_SIGMA_FLOOR);
            let (r, hat) = quantize_value(y.feats.get(row, ch).dbl(), mu, q);
            yhat.feats.set(row, ch, T::from_dbl(hat));
            rate_bits += gauss_bits(r as f64, sigma).0;
        }
    }

    let (probs, tap) =
        run_model_with_tap(&model.specs.synthesis, &model.synthesis, &yhat, Some(SYNTHESIS_TAP));
    let tap = tap.expect("synthesis tap index is in range");
    // deployment drops out-of-block candidates before any top-k; mirror it
    let keep = crate::codec::pipeline::in_block_rows(&probs.coords, block_size as u32);
    let probs = probs.select(&keep);
    let tap = tap.select(&keep);
    let pruned = prune_top_k(&tap, probs.feats.as_slice(), down.len());
    FrozenSrInput { tap: pruned, rate_bits }
}

fn train_sr<T: Scalar>(
    model: &mut CodecModel<T>,
    sf: i64,
    run: &TrainRun,
    dataset: &[SparseTensor<T>],
) -> Vec<LossTraceRow> {
    // the coding model is frozen, so its pass over each block never changes;
    // run it once up front
    let inputs: Vec<FrozenSrInput<T>> =
        dataset.iter().map(|b| frozen_sr_input(model, sf, run.block_size, b)).collect();
    let spec = if sf == 2 { model.specs.sr2.clone() } else { model.specs.sr4.clone() };

    let master = pack_stores(&[if sf == 2 { &model.sr2 } else { &model.sr4 }]);
    let mut adam = Adam::new(master, run.learning_rate);

    let n_blocks = dataset.len() as f64;
    let mut trace = Vec::with_capacity(run.epochs);
    let (mut best, mut stall) = (f64::INFINITY, 0usize);
    for epoch in 0..run.epochs {
        let (mut d_sum, mut r_sum) = (0.0, 0.0);
        let idx: Vec<usize> = (0..dataset.len()).collect();
        for batch in idx.chunks(run.batch_size) {
            let mut g_sum: Option<Vec<f64>> = None;
            for &i in batch {
                let mut tape = Tape::new();
                let store = if sf == 2 { &model.sr2 } else { &model.sr4 };
                let g = sr_loss(
                    &mut tape,
                    store,
                    &spec,
                    &inputs[i].tap,
                    &dataset[i].coords,
                    [0, 0, 0],
                    run.block_size,
                );
                d_sum += tape.scalar_value(g.root);
                r_sum += inputs[i].rate_bits / dataset[i].len() as f64;
                tape.backward(g.root);
                let flat = pack_grads(&tape.grads);
                match &mut g_sum {
                    None => g_sum = Some(flat),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&flat) {
                            *a += b;
                        }
                    }
                }
            }
            let mut g_sum = g_sum.expect("batches are non-empty");
            let inv = 1.0 / batch.len() as f64;
            for v in g_sum.iter_mut() {
                *v *= inv;
            }
            adam.step(&g_sum);
            write_back(adam.master(), &mut [if sf == 2 { &mut model.sr2 } else { &mut model.sr4 }]);
        }
        let epoch_loss = d_sum / n_blocks;
        trace.push(LossTraceRow {
            epoch,
            distortion: epoch_loss,
            rate_bits_per_point: r_sum / n_blocks,
            loss: epoch_loss,
        });
        if epoch_loss < best - 1e-9 * best.abs().min(1.0) {
            best = epoch_loss;
            stall = 0;
        } else {
            stall += 1;
            if stall >= run.plateau_patience {
                adam.halve_lr();
                stall = 0;
            }
        }
    }
    trace
}
