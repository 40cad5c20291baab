//! Latent channel relevance: code blocks normally, zero all but the N
//! highest-variance latent channels right before synthesis, and watch the
//! reconstruction quality. Channels carrying no energy can be zeroed without
//! hurting the reconstruction, which is the empirical case for shrinking the
//! latent width.

use crate::codec::pipeline::{decoded_latents, encode_block, reconstruct_given};
use crate::codec::CodecModel;
use crate::entropy::TableCache;
use crate::metrics::{psnr_d1_points, psnr_d2_points};
use crate::nn::SparseTensor;
use crate::pc::{Block, SamplingFactor};
use crate::scalar::Scalar;
use crate::{Error, Result};

/// Mean reconstruction quality over the dataset with only `n` latent
/// channels kept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelCurvePoint {
    pub n: usize,
    pub d1: f64,
    pub d2: f64,
}

/// Channel indices ordered by decreasing variance over all occupied latent
/// positions, pooled across the dataset. Ties keep the lower channel first.
pub fn latent_channel_order<T: Scalar>(latents: &[SparseTensor<T>]) -> Vec<u32> {
    let cols = latents.first().map_or(0, |t| t.feats.cols());
    let mut sum = vec![0.0f64; cols];
    let mut sumsq = vec![0.0f64; cols];
    let mut count = 0usize;
    for t in latents {
        assert_eq!(t.feats.cols(), cols, "latent tensors must share the channel count");
        for i in 0..t.feats.rows() {
            for ch in 0..cols {
                let v = t.feats.get(i, ch).dbl();
                sum[ch] += v;
                sumsq[ch] += v * v;
            }
        }
        count += t.feats.rows();
    }
    let var: Vec<f64> = (0..cols)
        .map(|ch| {
            if count == 0 {
                0.0
            } else {
                let mean = sum[ch] / count as f64;
                (sumsq[ch] / count as f64 - mean * mean).max(0.0)
            }
        })
        .collect();
    let mut order: Vec<u32> = (0..cols as u32).collect();
    order.sort_by(|&a, &b| var[b as usize].total_cmp(&var[a as usize]).then(a.cmp(&b)));
    order
}

fn keep_mask(order: &[u32], n: usize) -> Vec<bool> {
    let mut mask = vec![false; order.len()];
    for &ch in &order[..n.min(order.len())] {
        mask[ch as usize] = true;
    }
    mask
}

/// Zero the channels `mask` excludes. A full mask copies the tensor
/// untouched, so the n = all-channels point is bitwise the plain decode.
fn masked<T: Scalar>(yhat: &SparseTensor<T>, mask: &[bool]) -> SparseTensor<T> {
    let mut out = yhat.clone();
    for i in 0..out.feats.rows() {
        for (ch, &keep) in mask.iter().enumerate() {
            if !keep {
                out.feats.set(i, ch, T::zero());
            }
        }
    }
    out
}

/// Quality curve over latent channel budgets. Every block is encoded once
/// (no SR; the occupancy counts come from that clean encode), then decoded
/// repeatedly with all but the top-n variance channels zeroed before
/// synthesis. n values above the channel count are clamped. Blocks need at
/// least 12 points each for the point-to-plane direction.
pub fn channel_variance_analysis<T: Scalar>(
    model: &CodecModel<T>,
    blocks: &[Block],
    sf: SamplingFactor,
    ns: &[usize],
) -> Result<Vec<ChannelCurvePoint>> {
    let occupied: Vec<&Block> = blocks.iter().filter(|b| !b.is_empty()).collect();
    if occupied.is_empty() {
        return Err(Error::Parse("channel analysis needs at least one occupied block".into()));
    }
    let mut cache = TableCache::new();
    let mut per_block = Vec::with_capacity(occupied.len());
    for b in &occupied {
        let enc = encode_block(b, model, sf, false, model.qs, &mut cache)?;
        let yhat = decoded_latents(&enc.record, model, b.block_size, model.qs, &model.hyper_sigma, &mut cache)?;
        per_block.push((enc.record.header, yhat));
    }
    let order = latent_channel_order(&per_block.iter().map(|(_, y)| y.clone()).collect::<Vec<_>>());

    let mut curve = Vec::with_capacity(ns.len());
    for &n in ns {
        let n = n.min(order.len());
        let mask = keep_mask(&order, n);
        let (mut d1_sum, mut d2_sum) = (0.0, 0.0);
        for (b, (header, yhat)) in occupied.iter().zip(&per_block) {
            let points = reconstruct_given(
                model,
                &masked(yhat, &mask),
                sf,
                false,
                b.block_size,
                header.k_c,
                header.k_s,
            )?;
            let depth = b.block_size.trailing_zeros() as u8;
            d1_sum += psnr_d1_points(b.points(), &points, depth)?;
            d2_sum += psnr_d2_points(b.points(), &points, depth)?;
        }
        curve.push(ChannelCurvePoint {
            n,
            d1: d1_sum / occupied.len() as f64,
            d2: d2_sum / occupied.len() as f64,
        });
    }
    Ok(curve)
}
