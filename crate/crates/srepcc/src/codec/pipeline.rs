//! End-to-end coding: block in, record out, and back. The encoder and decoder
//! share one reconstruction routine so the encoder's reported reconstruction
//! is bitwise what the decoder will produce from the record.

use crate::codec::bitstream::{sf_code, Bitstream, BlockHeader, BlockRecord, FileHeader};
use crate::codec::model::{CodecModel, SYNTHESIS_TAP};
use crate::entropy::{
    decode_hyper, decode_latents, encode_hyper, encode_latents, hyper_coded_bits_estimate,
    latent_coded_bits_estimate, octree, TableCache,
};
use crate::metrics::{psnr_d1, psnr_from_mse, KdTree};
use crate::morton;
use crate::nn::{prune_top_k, run_model, run_model_with_tap, CoordMap, FeatMat, SparseTensor};
use crate::pc::{merge_blocks, partition_blocks, Block, PointCloud, SamplingFactor};
use crate::scalar::Scalar;
use crate::{Error, Result};

/// Per-block size accounting. `payload_bits` is the real coded size of the
/// three payloads; `rate_proxy_bits` is the table-based estimate of the two
/// entropy-coded payloads, usable as a differentiable-model-side rate figure.
#[derive(Debug, Clone, Default)]
pub struct BlockStats {
    pub n_points: usize,
    pub n_down_points: usize,
    pub n_latent_points: usize,
    pub octree_bits: f64,
    pub hyper_bits: f64,
    pub latent_bits: f64,
    pub proxy_hyper_bits: f64,
    pub proxy_latent_bits: f64,
}

impl BlockStats {
    pub fn payload_bits(&self) -> f64 {
        self.octree_bits + self.hyper_bits + self.latent_bits
    }

    /// Estimated latent+hyper bits; the octree is exact on both sides and is
    /// deliberately not part of the proxy.
    pub fn rate_proxy_bits(&self) -> f64 {
        self.proxy_hyper_bits + self.proxy_latent_bits
    }
}

#[derive(Debug, Clone)]
pub struct BlockEncoding {
    pub record: BlockRecord,
    pub recon: Block,
    pub stats: BlockStats,
}

/// Row indices of coordinates inside the half-open block cube, ascending.
pub(crate) fn in_block_rows(coords: &[[i64; 3]], block_size: u32) -> Vec<u32> {
    let b = block_size as i64;
    coords
        .iter()
        .enumerate()
        .filter(|(_, c)| c.iter().all(|&v| v >= 0 && v < b))
        .map(|(i, _)| i as u32)
        .collect()
}

/// Candidate row indices ordered most probable first, ties broken by row.
/// This is the one ranking every top-k consumer shares.
fn rank_by_prob_desc<T: Scalar>(probs: &[T]) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..probs.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        let pa = probs[a as usize].dbl();
        let pb = probs[b as usize].dbl();
        pb.partial_cmp(&pa).unwrap().then(a.cmp(&b))
    });
    idx
}

/// Floor coordinates to multiples of `to_stride`, dedup, Morton order.
fn downsample_coords(coords: &[[i64; 3]], to_stride: i64) -> Vec<[i64; 3]> {
    let mut keys: Vec<u64> = coords
        .iter()
        .map(|c| morton::key([0, 1, 2].map(|a| c[a].div_euclid(to_stride) * to_stride)))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.into_iter().map(morton::unkey).collect()
}

/// The k values tried by the rate-distortion top-k search: round(p * n_ref)
/// for p from 0.50 to 1.50 in steps of 0.05, clamped to the candidate count.
fn k_grid(n_ref: usize, n_cand: usize) -> Vec<usize> {
    let mut ks = Vec::new();
    for pct in (50..=150usize).step_by(5) {
        let k = ((pct * n_ref + 50) / 100).clamp(1, n_cand);
        if ks.last() != Some(&k) {
            ks.push(k);
        }
    }
    ks
}

fn to_f64(p: [u32; 3]) -> [f64; 3] {
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

/// Pick the k maximizing block-level point-to-point PSNR against `reference`,
/// among the ranked candidates. Equal PSNR keeps the smaller k.
fn optimize_top_k_ranked(ranked: &[u32], cand: &[[u32; 3]], reference: &[[u32; 3]], bit_depth: u8) -> u32 {
    let ref_f: Vec<[f64; 3]> = reference.iter().map(|p| to_f64(*p)).collect();
    let ref_tree = KdTree::build(&ref_f);
    // candidate-to-reference distances accumulate over the ranking prefix
    let mut prefix = Vec::with_capacity(ranked.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for &ri in ranked {
        acc += ref_tree.nearest(to_f64(cand[ri as usize])).0;
        prefix.push(acc);
    }
    let mut best = (f64::NEG_INFINITY, 0usize);
    for k in k_grid(reference.len(), cand.len()) {
        let sel: Vec<[f64; 3]> = ranked[..k].iter().map(|&ri| to_f64(cand[ri as usize])).collect();
        let sel_tree = KdTree::build(&sel);
        let back: f64 = ref_f.iter().map(|r| sel_tree.nearest(*r).0).sum();
        let mse = (prefix[k] / k as f64).max(back / ref_f.len() as f64);
        let psnr = psnr_from_mse(mse, bit_depth);
        if psnr > best.0 {
            best = (psnr, k);
        }
    }
    best.1 as u32
}

/// Rate-distortion search over occupancy thresholds: among the `k` most
/// probable candidates for each k on the search grid, keep the count that
/// maximizes point-to-point PSNR against the reference. `bit_depth` is the
/// log2 extent of the grid both point sets live on.
pub fn optimize_top_k<T: Scalar>(probs: &[T], cand: &[[u32; 3]], reference: &[[u32; 3]], bit_depth: u8) -> u32 {
    assert_eq!(probs.len(), cand.len(), "one probability per candidate");
    assert!(!cand.is_empty() && !reference.is_empty());
    optimize_top_k_ranked(&rank_by_prob_desc(probs), cand, reference, bit_depth)
}

enum TopKSel<'a> {
    /// Encoder side: search both counts against references.
    Optimize { down_ref: &'a [[u32; 3]], full_ref: &'a [[u32; 3]] },
    /// Decoder side: counts come from the block header.
    Given { k_c: u32, k_s: u32 },
}

/// Gather per-latent entropy parameters from the hyper synthesis nets. Both
/// nets run on the same coordinates; the scale net output is log sigma.
fn hyper_moments<T: Scalar>(
    model: &CodecModel<T>,
    zhat: &SparseTensor<T>,
    latent_coords: &[[i64; 3]],
) -> Result<(FeatMat<T>, FeatMat<T>)> {
    let mean_t = run_model(&model.specs.hyper_mean, &model.hyper_mean, zhat);
    let scale_t = run_model(&model.specs.hyper_scale, &model.hyper_scale, zhat);
    debug_assert_eq!(mean_t.coords, scale_t.coords);
    let map = CoordMap::build(&mean_t.coords);
    let c = mean_t.feats.cols();
    let mut mu = FeatMat::zeros(latent_coords.len(), c);
    let mut sigma = FeatMat::zeros(latent_coords.len(), c);
    for (i, lc) in latent_coords.iter().enumerate() {
        let row = map
            .get(*lc)
            .ok_or_else(|| Error::Format("latent coordinate outside hyper synthesis support".into()))?
            as usize;
        for ch in 0..c {
            mu.set(i, ch, mean_t.feats.get(row, ch));
            sigma.set(i, ch, scale_t.feats.get(row, ch).exp());
        }
    }
    Ok((mu, sigma))
}

/// Run synthesis (and optionally the SR branch) on decoded latents and apply
/// the top-k occupancy decisions. Returns block-local points plus the counts
/// actually used. Candidates falling outside the block are dropped before any
/// top-k, on both coder sides alike.
fn reconstruct_from_latents<T: Scalar>(
    model: &CodecModel<T>,
    yhat: &SparseTensor<T>,
    sf: SamplingFactor,
    use_sr: bool,
    block_size: u32,
    sel: TopKSel,
) -> Result<(Vec<[u32; 3]>, u32, u32)> {
    let s = sf.value();
    let (probs_t, tap_t) =
        run_model_with_tap(&model.specs.synthesis, &model.synthesis, yhat, Some(SYNTHESIS_TAP));
    let keep = in_block_rows(&probs_t.coords, block_size);
    if keep.is_empty() {
        return Err(Error::Format("no occupancy candidates inside the block".into()));
    }
    let probs_f = probs_t.select(&keep);
    let cand: Vec<[u32; 3]> = probs_f.coords.iter().map(|c| [0, 1, 2].map(|a| c[a] as u32)).collect();
    let ranked = rank_by_prob_desc(probs_f.feats.as_slice());
    let k_c = match sel {
        TopKSel::Optimize { down_ref, .. } => {
            // the coarse stage is judged on the downsampled grid
            let cand_down: Vec<[u32; 3]> = cand.iter().map(|p| [p[0] / s, p[1] / s, p[2] / s]).collect();
            optimize_top_k_ranked(&ranked, &cand_down, down_ref, (block_size / s).trailing_zeros() as u8)
        }
        TopKSel::Given { k_c, .. } => {
            if k_c == 0 || k_c as usize > cand.len() {
                return Err(Error::Format(format!("k_C {k_c} out of range 1..={}", cand.len())));
            }
            k_c
        }
    };

    if !use_sr {
        let mut sel_idx = ranked[..k_c as usize].to_vec();
        sel_idx.sort_unstable();
        let points = sel_idx.iter().map(|&i| cand[i as usize]).collect();
        return Ok((points, k_c, 0));
    }

    let tap_t = tap_t.expect("synthesis tap requested");
    debug_assert_eq!(tap_t.coords, probs_t.coords);
    let tap_f = tap_t.select(&keep);
    let sr_in = prune_top_k(&tap_f, probs_f.feats.as_slice(), k_c as usize);
    let (spec, store) = match sf {
        SamplingFactor::S2 => (&model.specs.sr2, &model.sr2),
        SamplingFactor::S4 => (&model.specs.sr4, &model.sr4),
        SamplingFactor::S1 => return Err(Error::Invariant("SR reconstruction at unit sampling".into())),
    };
    let sr_t = run_model(spec, store, &sr_in);
    let keep2 = in_block_rows(&sr_t.coords, block_size);
    if keep2.is_empty() {
        return Err(Error::Format("no SR candidates inside the block".into()));
    }
    let sr_f = sr_t.select(&keep2);
    let cand2: Vec<[u32; 3]> = sr_f.coords.iter().map(|c| [0, 1, 2].map(|a| c[a] as u32)).collect();
    let ranked2 = rank_by_prob_desc(sr_f.feats.as_slice());
    let k_s = match sel {
        TopKSel::Optimize { full_ref, .. } => {
            optimize_top_k_ranked(&ranked2, &cand2, full_ref, block_size.trailing_zeros() as u8)
        }
        TopKSel::Given { k_s, .. } => {
            if k_s == 0 || k_s as usize > cand2.len() {
                return Err(Error::Format(format!("k_S {k_s} out of range 1..={}", cand2.len())));
            }
            k_s
        }
    };
    let mut sel_idx = ranked2[..k_s as usize].to_vec();
    sel_idx.sort_unstable();
    let points = sel_idx.iter().map(|&i| cand2[i as usize]).collect();
    Ok((points, k_c, k_s))
}

fn origin_u16(origin: [u32; 3]) -> Result<[u16; 3]> {
    let mut out = [0u16; 3];
    for a in 0..3 {
        out[a] = u16::try_from(origin[a])
            .map_err(|_| Error::Format(format!("block origin component {} exceeds 16 bits", origin[a])))?;
    }
    Ok(out)
}

pub fn encode_block<T: Scalar>(
    block: &Block,
    model: &CodecModel<T>,
    sf: SamplingFactor,
    use_sr: bool,
    qs: f32,
    cache: &mut TableCache,
) -> Result<BlockEncoding> {
    if use_sr && sf == SamplingFactor::S1 {
        return Err(Error::Parse("SR requires a sampling factor of 2 or 4".into()));
    }
    let s = sf.value();
    let lat_stride = 8 * s;
    if block.block_size < lat_stride {
        return Err(Error::Parse(format!(
            "block size {} too small for sampling factor {s} (needs at least {lat_stride})",
            block.block_size
        )));
    }
    let origin = origin_u16(block.origin)?;
    if block.is_empty() {
        let header = BlockHeader {
            origin,
            sf_code: sf_code(sf),
            sr_flag: 0,
            k_c: 0,
            k_s: 0,
            n_latent_points: 0,
            payload_len: [0, 0, 0],
        };
        return Ok(BlockEncoding {
            record: BlockRecord { header, octree: Vec::new(), hyper: Vec::new(), latent: Vec::new() },
            recon: Block::new(block.origin, block.block_size, Vec::new())?,
            stats: BlockStats { n_points: 0, ..BlockStats::default() },
        });
    }

    let down = block.downsample(sf);
    let coarse = down.upsample(sf);
    let coords: Vec<[i64; 3]> = coarse.points().iter().map(|p| [0, 1, 2].map(|a| p[a] as i64)).collect();
    let x = SparseTensor::<T>::occupancy(coords, s as i64)?;
    let y_t = run_model(&model.specs.analysis, &model.analysis, &x);
    debug_assert_eq!(y_t.stride, lat_stride as i64);

    let extent = block.block_size / lat_stride;
    let cells: Vec<[u32; 3]> =
        y_t.coords.iter().map(|c| [0, 1, 2].map(|a| (c[a] / lat_stride as i64) as u32)).collect();
    let octree_payload = octree::encode(&cells, extent);

    let z_t = run_model(&model.specs.hyper_analysis, &model.hyper_analysis, &y_t);
    debug_assert_eq!(z_t.coords, downsample_coords(&y_t.coords, 32 * s as i64));
    let proxy_hyper = hyper_coded_bits_estimate(&z_t.feats, &model.hyper_sigma, cache);
    let (hyper_payload, zhat_feats) = encode_hyper(&z_t.feats, &model.hyper_sigma, cache);
    let zhat_t = SparseTensor { coords: z_t.coords.clone(), feats: zhat_feats, stride: z_t.stride };

    let (mu, sigma) = hyper_moments(model, &zhat_t, &y_t.coords)?;
    let proxy_latent = latent_coded_bits_estimate(&y_t.feats, &mu, &sigma, qs, cache);
    let (latent_payload, yhat_feats) = encode_latents(&y_t.feats, &mu, &sigma, qs, cache);
    let yhat_t = SparseTensor { coords: y_t.coords.clone(), feats: yhat_feats, stride: y_t.stride };

    let (points, k_c, k_s) = reconstruct_from_latents(
        model,
        &yhat_t,
        sf,
        use_sr,
        block.block_size,
        TopKSel::Optimize { down_ref: down.points(), full_ref: block.points() },
    )?;

    let stats = BlockStats {
        n_points: block.len(),
        n_down_points: down.len(),
        n_latent_points: y_t.len(),
        octree_bits: octree_payload.len() as f64 * 8.0,
        hyper_bits: hyper_payload.len() as f64 * 8.0,
        latent_bits: latent_payload.len() as f64 * 8.0,
        proxy_hyper_bits: proxy_hyper,
        proxy_latent_bits: proxy_latent,
    };
    let header = BlockHeader {
        origin,
        sf_code: sf_code(sf),
        sr_flag: use_sr as u8,
        k_c,
        k_s,
        n_latent_points: y_t.len() as u32,
        payload_len: [octree_payload.len() as u32, hyper_payload.len() as u32, latent_payload.len() as u32],
    };
    Ok(BlockEncoding {
        record: BlockRecord { header, octree: octree_payload, hyper: hyper_payload, latent: latent_payload },
        recon: Block::new(block.origin, block.block_size, points)?,
        stats,
    })
}

/// Decode a non-empty record up to the dequantized latent tensor. The channel
/// relevance analysis hooks in here, between entropy decoding and synthesis.
pub(crate) fn decoded_latents<T: Scalar>(
    rec: &BlockRecord,
    model: &CodecModel<T>,
    block_size: u32,
    qs: f32,
    sigma_ch: &[f32],
    cache: &mut TableCache,
) -> Result<SparseTensor<T>> {
    let hd = &rec.header;
    let s = hd.sf()?.value();
    let lat_stride = 8 * s;
    if block_size < lat_stride {
        return Err(Error::Format(format!("block size {block_size} too small for sampling factor {s}")));
    }
    let cells = octree::decode(&rec.octree, block_size / lat_stride, hd.n_latent_points as usize)?;
    let lat_coords: Vec<[i64; 3]> = cells.iter().map(|c| [0, 1, 2].map(|a| c[a] as i64 * lat_stride as i64)).collect();
    let hyper_coords = downsample_coords(&lat_coords, 32 * s as i64);
    let zhat = decode_hyper(&rec.hyper, hyper_coords.len(), sigma_ch, cache)?;
    let zhat_t = SparseTensor { coords: hyper_coords, feats: zhat, stride: 32 * s as i64 };
    let (mu, sigma) = hyper_moments(model, &zhat_t, &lat_coords)?;
    let yhat = decode_latents(&rec.latent, &mu, &sigma, qs, cache)?;
    Ok(SparseTensor { coords: lat_coords, feats: yhat, stride: lat_stride as i64 })
}

/// Reconstruction under header-given counts.
pub(crate) fn reconstruct_given<T: Scalar>(
    model: &CodecModel<T>,
    yhat: &SparseTensor<T>,
    sf: SamplingFactor,
    use_sr: bool,
    block_size: u32,
    k_c: u32,
    k_s: u32,
) -> Result<Vec<[u32; 3]>> {
    reconstruct_from_latents(model, yhat, sf, use_sr, block_size, TopKSel::Given { k_c, k_s })
        .map(|(points, _, _)| points)
}

pub fn decode_block<T: Scalar>(
    rec: &BlockRecord,
    model: &CodecModel<T>,
    block_size: u32,
    qs: f32,
    sigma_ch: &[f32],
    cache: &mut TableCache,
) -> Result<Block> {
    let hd = &rec.header;
    let sf = hd.sf()?;
    let origin = [0, 1, 2].map(|a| hd.origin[a] as u32);
    if hd.n_latent_points == 0 {
        return Block::new(origin, block_size, Vec::new());
    }
    let yhat_t = decoded_latents(rec, model, block_size, qs, sigma_ch, cache)?;
    let points = reconstruct_given(model, &yhat_t, sf, hd.sr_flag == 1, block_size, hd.k_c, hd.k_s)?;
    Block::new(origin, block_size, points)
}

/// Split work into contiguous chunks and run `f` per chunk, joining in spawn
/// order, so the output is identical for every thread count.
fn run_chunked<I: Sync, O: Send>(
    items: &[I],
    threads: usize,
    f: impl Fn(&I, &mut TableCache) -> Result<O> + Sync,
) -> Result<Vec<O>> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads <= 1 {
        let mut cache = TableCache::new();
        return items.iter().map(|it| f(it, &mut cache)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let mut results: Vec<Result<Vec<O>>> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|ch| {
                scope.spawn(|| {
                    let mut cache = TableCache::new();
                    ch.iter().map(|it| f(it, &mut cache)).collect::<Result<Vec<O>>>()
                })
            })
            .collect();
        results = handles.into_iter().map(|h| h.join().expect("coding worker panicked")).collect();
    });
    let mut out = Vec::with_capacity(items.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Encode a whole cloud under one coding configuration. Returns the stream
/// plus the per-block encodings (reconstruction and size accounting), in
/// block partition order regardless of `threads`.
pub fn encode_cloud<T: Scalar>(
    pc: &PointCloud,
    block_size: u32,
    model: &CodecModel<T>,
    model_id: u8,
    sf: SamplingFactor,
    use_sr: bool,
    qs: f32,
    threads: usize,
) -> Result<(Bitstream, Vec<BlockEncoding>)> {
    let blocks = partition_blocks(pc, block_size)?;
    let encodings = run_chunked(&blocks, threads, |b, cache| encode_block(b, model, sf, use_sr, qs, cache))?;
    let header = FileHeader {
        bit_depth: pc.bit_depth(),
        block_size_log2: block_size.trailing_zeros() as u8,
        model_id,
        qs,
        hyper_sigma: model.hyper_sigma.clone(),
    };
    let records = encodings.iter().map(|e| e.record.clone()).collect();
    Ok((Bitstream { header, blocks: records }, encodings))
}

pub fn decode_cloud<T: Scalar>(bs: &Bitstream, model: &CodecModel<T>, threads: usize) -> Result<PointCloud> {
    if bs.header.hyper_sigma.len() != model.hyper_sigma.len() {
        return Err(Error::Format(format!(
            "stream carries {} hyper channels but the model has {}",
            bs.header.hyper_sigma.len(),
            model.hyper_sigma.len()
        )));
    }
    let block_size = bs.block_size();
    // the header scales are authoritative; a retrained model decodes older
    // streams as long as the channel count matches
    let sigma_ch = &bs.header.hyper_sigma;
    let blocks = run_chunked(&bs.blocks, threads, |rec, cache| {
        decode_block(rec, model, block_size, bs.header.qs, sigma_ch, cache)
    })?;
    merge_blocks(&blocks, bs.header.bit_depth)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodingChoice {
    pub model_id: usize,
    pub sf: SamplingFactor,
    pub use_sr: bool,
}

/// Pick the model / sampling factor / SR combination minimizing
/// 1/PSNR + lambda_op * bpp over trial encodings of the whole cloud.
/// Combinations the block size cannot support are skipped; ties keep the
/// earliest candidate (models in order, then sampling factors, SR off first).
pub fn select_coding_config<T: Scalar>(
    pc: &PointCloud,
    block_size: u32,
    models: &[&CodecModel<T>],
    lambda_op: f64,
    sf_options: &[SamplingFactor],
    allow_sr: bool,
    qs_override: Option<f32>,
) -> Result<CodingChoice> {
    if models.is_empty() || sf_options.is_empty() {
        return Err(Error::Parse("need at least one model and one sampling factor".into()));
    }
    if pc.is_empty() {
        return Ok(CodingChoice { model_id: 0, sf: sf_options[0], use_sr: false });
    }
    let mut best: Option<(f64, CodingChoice)> = None;
    for (mi, model) in models.iter().enumerate() {
        let qs = qs_override.unwrap_or(model.qs);
        for &sf in sf_options {
            if block_size < 8 * sf.value() {
                continue;
            }
            let sr_options: &[bool] =
                if allow_sr && sf != SamplingFactor::S1 { &[false, true] } else { &[false] };
            for &use_sr in sr_options {
                let (bs, encodings) = encode_cloud(pc, block_size, model, mi as u8, sf, use_sr, qs, 1)?;
                let bits = crate::codec::bitstream::serialize(&bs).len() as f64 * 8.0;
                let bpp = bits / pc.len() as f64;
                let recons: Vec<Block> = encodings.into_iter().map(|e| e.recon).collect();
                let recon = merge_blocks(&recons, pc.bit_depth())?;
                let psnr = psnr_d1(pc, &recon)?;
                let objective = 1.0 / psnr.max(1e-3) + lambda_op * bpp;
                if best.as_ref().is_none_or(|(b, _)| objective < *b) {
                    best = Some((objective, CodingChoice { model_id: mi, sf, use_sr }));
                }
            }
        }
    }
    best.map(|(_, c)| c).ok_or_else(|| {
        Error::Parse(format!("block size {block_size} too small for every offered sampling factor"))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::bitstream::{parse, serialize};
    use crate::codec::model::ModelConfig;
    use crate::metrics::psnr_d1_points;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> CodecModel<f32> {
        CodecModel::init(ModelConfig::tiny(), seed)
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, extent: u32) -> Vec<[u32; 3]> {
        let mut pts: Vec<[u32; 3]> =
            (0..n).map(|_| [0; 3].map(|_| rng.gen_range(0..extent))).collect();
        pts.sort_unstable();
        pts.dedup();
        pts
    }

    fn random_block(rng: &mut ChaCha8Rng, origin: [u32; 3], block_size: u32, n: usize) -> Block {
        Block::new(origin, block_size, random_points(rng, n, block_size)).unwrap()
    }

    #[test]
    fn empty_block_round_trips_as_header_only() {
        let model = tiny_model(1);
        let mut cache = TableCache::new();
        let block = Block::new([16, 0, 0], 16, Vec::new()).unwrap();
        let enc = encode_block(&block, &model, SamplingFactor::S2, true, model.qs, &mut cache).unwrap();
        assert_eq!(enc.record.header.n_latent_points, 0);
        assert_eq!(enc.record.header.sr_flag, 0);
        assert_eq!(enc.record.header.payload_len, [0, 0, 0]);
        assert!(enc.recon.is_empty());
        let dec = decode_block(&enc.record, &model, 16, model.qs, &model.hyper_sigma, &mut cache).unwrap();
        assert!(dec.is_empty());
        assert_eq!(dec.origin, [16, 0, 0]);
    }

    #[test]
    fn unit_sampling_reconstruction_has_exactly_k_c_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = tiny_model(2);
        let mut cache = TableCache::new();
        let block = random_block(&mut rng, [0, 0, 0], 16, 150);
        let enc = encode_block(&block, &model, SamplingFactor::S1, false, model.qs, &mut cache).unwrap();
        assert_eq!(enc.recon.len(), enc.record.header.k_c as usize);
        assert_eq!(enc.record.header.k_s, 0);
    }

    #[test]
    fn decoder_matches_encoder_reconstruction_across_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = tiny_model(3);
        let mut cache = TableCache::new();
        let cases: &[(u32, SamplingFactor, bool, usize)] = &[
            (16, SamplingFactor::S1, false, 150),
            (16, SamplingFactor::S2, false, 150),
            (16, SamplingFactor::S2, true, 150),
            (32, SamplingFactor::S4, false, 500),
            (32, SamplingFactor::S4, true, 500),
        ];
        for &(bsz, sf, sr, n) in cases {
            let block = random_block(&mut rng, [0, 0, 0], bsz, n);
            let enc = encode_block(&block, &model, sf, sr, model.qs, &mut cache).unwrap();
            let dec = decode_block(&enc.record, &model, bsz, model.qs, &model.hyper_sigma, &mut cache).unwrap();
            assert_eq!(dec.points(), enc.recon.points(), "sf {sf:?} sr {sr}");
            assert!(!dec.is_empty());
        }
    }

    #[test]
    fn coarse_reconstruction_lives_on_the_downsampled_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = tiny_model(4);
        let mut cache = TableCache::new();
        let block = random_block(&mut rng, [0, 0, 0], 16, 200);
        let enc = encode_block(&block, &model, SamplingFactor::S2, false, model.qs, &mut cache).unwrap();
        for p in enc.recon.points() {
            assert!(p.iter().all(|v| v % 2 == 0), "coarse point {p:?} off the stride-2 grid");
        }
    }

    #[test]
    fn super_resolution_requires_downsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = tiny_model(5);
        let mut cache = TableCache::new();
        let block = random_block(&mut rng, [0, 0, 0], 16, 50);
        let err = encode_block(&block, &model, SamplingFactor::S1, true, model.qs, &mut cache).unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
    }

    #[test]
    fn block_too_small_for_sampling_factor_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = tiny_model(6);
        let mut cache = TableCache::new();
        let block = random_block(&mut rng, [0, 0, 0], 16, 50);
        let err = encode_block(&block, &model, SamplingFactor::S4, false, model.qs, &mut cache).unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
    }

    #[test]
    fn tampered_counts_yield_typed_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = tiny_model(7);
        let mut cache = TableCache::new();
        let block = random_block(&mut rng, [0, 0, 0], 16, 150);
        let enc = encode_block(&block, &model, SamplingFactor::S1, false, model.qs, &mut cache).unwrap();

        let mut bad = enc.record.clone();
        bad.header.k_c += 100_000;
        assert!(matches!(
            decode_block(&bad, &model, 16, model.qs, &model.hyper_sigma, &mut cache),
            Err(Error::Format(_))
        ));

        let mut bad = enc.record.clone();
        bad.header.k_c = 0;
        assert!(matches!(
            decode_block(&bad, &model, 16, model.qs, &model.hyper_sigma, &mut cache),
            Err(Error::Format(_))
        ));

        let mut bad = enc.record;
        bad.header.n_latent_points += 1;
        assert!(decode_block(&bad, &model, 16, model.qs, &model.hyper_sigma, &mut cache).is_err());
    }

    #[test]
    fn hyper_coordinates_derive_from_latents_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = tiny_model(8);
        for (bsz, sf) in [(16, SamplingFactor::S1), (32, SamplingFactor::S2)] {
            let block = random_block(&mut rng, [0, 0, 0], bsz, 120);
            let s = sf.value();
            let coarse = block.downsample(sf).upsample(sf);
            let coords: Vec<[i64; 3]> =
                coarse.points().iter().map(|p| [0, 1, 2].map(|a| p[a] as i64)).collect();
            let x = SparseTensor::<f32>::occupancy(coords, s as i64).unwrap();
            let y_t = run_model(&model.specs.analysis, &model.analysis, &x);
            let z_t = run_model(&model.specs.hyper_analysis, &model.hyper_analysis, &y_t);
            assert_eq!(z_t.coords, downsample_coords(&y_t.coords, 32 * s as i64));
            assert_eq!(z_t.stride, 32 * s as i64);
        }
    }

    #[test]
    fn perfect_probabilities_select_exactly_the_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let reference = random_points(&mut rng, 40, 12);
        let mut cand = reference.clone();
        // junk candidates far from the reference, below it in probability
        for _ in 0..30 {
            cand.push([0; 3].map(|_| 40 + rng.gen_range(0..8)));
        }
        cand.dedup();
        let mut probs = vec![1.0f32; reference.len()];
        probs.extend(std::iter::repeat(0.3).take(cand.len() - reference.len()));
        let k = optimize_top_k(&probs, &cand, &reference, 6);
        assert_eq!(k as usize, reference.len());
    }

    #[test]
    fn equal_quality_counts_keep_the_smaller_k() {
        // two candidates, both one unit from the lone reference point, equal
        // probability: every k on the grid scores the same, so k stays 1
        let reference = [[0u32, 0, 0]];
        let cand = [[1u32, 0, 0], [0, 1, 0]];
        let k = optimize_top_k(&[0.5f32, 0.5], &cand, &reference, 4);
        assert_eq!(k, 1);
    }

    #[test]
    fn top_k_search_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..30 {
            let n_ref = rng.gen_range(3..40);
            let n_cand = rng.gen_range(5..60);
            let reference = random_points(&mut rng, n_ref, 16);
            let cand = random_points(&mut rng, n_cand, 16);
            let probs: Vec<f32> = (0..cand.len()).map(|_| rng.gen_range(0.0..1.0)).collect();

            let got = optimize_top_k(&probs, &cand, &reference, 4);

            // independent reimplementation on the public metric
            let mut order: Vec<usize> = (0..cand.len()).collect();
            order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
            let mut best: Option<(f64, usize)> = None;
            for pct in (50..=150usize).step_by(5) {
                let k = (((pct as f64) / 100.0 * reference.len() as f64).round() as usize)
                    .clamp(1, cand.len());
                let sel: Vec<[u32; 3]> = order[..k].iter().map(|&i| cand[i]).collect();
                let psnr = psnr_d1_points(&reference, &sel, 4).unwrap();
                if best.is_none_or(|(b, _)| psnr > b) {
                    best = Some((psnr, k));
                }
            }
            assert_eq!(got as usize, best.unwrap().1);
        }
    }

    #[test]
    fn cloud_round_trips_through_the_serialized_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = tiny_model(11);
        let pts = random_points(&mut rng, 600, 48);
        let pc = PointCloud::new(pts, 6).unwrap();
        let (bs, encodings) =
            encode_cloud(&pc, 16, &model, 0, SamplingFactor::S2, true, model.qs, 1).unwrap();
        assert!(bs.blocks.len() > 1);

        let buf = serialize(&bs);
        let parsed = parse(&buf).unwrap();
        assert_eq!(parsed, bs);

        let decoded = decode_cloud(&parsed, &model, 1).unwrap();
        let recons: Vec<Block> = encodings.into_iter().map(|e| e.recon).collect();
        let merged = merge_blocks(&recons, pc.bit_depth()).unwrap();
        assert_eq!(decoded.points(), merged.points());
        assert_eq!(decoded.bit_depth(), 6);
    }

    #[test]
    fn thread_count_never_changes_the_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = tiny_model(12);
        let pts = random_points(&mut rng, 800, 64);
        let pc = PointCloud::new(pts, 6).unwrap();
        let (bs1, _) = encode_cloud(&pc, 16, &model, 0, SamplingFactor::S1, false, model.qs, 1).unwrap();
        let (bs3, _) = encode_cloud(&pc, 16, &model, 0, SamplingFactor::S1, false, model.qs, 3).unwrap();
        let (bs16, _) = encode_cloud(&pc, 16, &model, 0, SamplingFactor::S1, false, model.qs, 16).unwrap();
        assert_eq!(serialize(&bs1), serialize(&bs3));
        assert_eq!(serialize(&bs1), serialize(&bs16));
        let d1 = decode_cloud(&bs1, &model, 1).unwrap();
        let d4 = decode_cloud(&bs1, &model, 4).unwrap();
        assert_eq!(d1.points(), d4.points());
    }

    #[test]
    fn degenerate_selection_grid_returns_the_only_option() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = tiny_model(13);
        let pts = random_points(&mut rng, 200, 16);
        let pc = PointCloud::new(pts, 4).unwrap();
        let choice =
            select_coding_config(&pc, 16, &[&model], 0.01, &[SamplingFactor::S1], true, None).unwrap();
        assert_eq!(choice, CodingChoice { model_id: 0, sf: SamplingFactor::S1, use_sr: false });
    }

    #[test]
    fn infeasible_sampling_factors_are_skipped_or_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let model = tiny_model(14);
        let pts = random_points(&mut rng, 200, 16);
        let pc = PointCloud::new(pts, 4).unwrap();
        // 16-cube cannot host sampling factor 4 (latent stride 32)
        let err =
            select_coding_config(&pc, 16, &[&model], 0.01, &[SamplingFactor::S4], false, None).unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
        let choice = select_coding_config(
            &pc,
            16,
            &[&model],
            0.01,
            &[SamplingFactor::S4, SamplingFactor::S1],
            false,
            None,
        )
        .unwrap();
        assert_eq!(choice.sf, SamplingFactor::S1);
    }

    #[test]
    fn selection_matches_exhaustive_objective_recompute() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let models = [tiny_model(15), tiny_model(16)];
        let model_refs: Vec<&CodecModel<f32>> = models.iter().collect();
        let pts = random_points(&mut rng, 250, 16);
        let pc = PointCloud::new(pts, 4).unwrap();
        let sfs = [SamplingFactor::S1, SamplingFactor::S2];

        for lambda_op in [0.0, 0.002] {
            let got = select_coding_config(&pc, 16, &model_refs, lambda_op, &sfs, true, None).unwrap();

            let mut best: Option<(f64, CodingChoice)> = None;
            for (mi, model) in model_refs.iter().enumerate() {
                for sf in sfs {
                    let srs: &[bool] = if sf == SamplingFactor::S1 { &[false] } else { &[false, true] };
                    for &use_sr in srs {
                        let (bs, encs) =
                            encode_cloud(&pc, 16, model, mi as u8, sf, use_sr, model.qs, 1).unwrap();
                        let bpp = serialize(&bs).len() as f64 * 8.0 / pc.len() as f64;
                        let recons: Vec<Block> = encs.into_iter().map(|e| e.recon).collect();
                        let recon = merge_blocks(&recons, 4).unwrap();
                        let obj = 1.0 / psnr_d1(&pc, &recon).unwrap().max(1e-3) + lambda_op * bpp;
                        if best.is_none_or(|(b, _)| obj < b) {
                            best = Some((obj, CodingChoice { model_id: mi, sf, use_sr }));
                        }
                    }
                }
            }
            assert_eq!(got, best.unwrap().1, "lambda_op {lambda_op}");
        }
    }
}
