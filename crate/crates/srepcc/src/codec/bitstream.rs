//! The serialized interchange container: one file header, then per-block
//! records. Everything is little-endian and byte-aligned; the exact layout is
//! documented in BITSTREAM.md. The parser is total: any malformed input comes
//! back as a typed error, never a panic.

use crate::pc::SamplingFactor;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SREP";
pub const VERSION: u8 = 1;

/// File-level parameters. The on-wire block count is implied by
/// `Bitstream::blocks.len()`; the hyper scales are the coding-model scales
/// the decoder must use, carried so the stream pins them.
#[derive(Debug, Clone, PartialEq)]
pub struct FileHeader {
    pub bit_depth: u8,
    pub block_size_log2: u8,
    pub model_id: u8,
    pub qs: f32,
    pub hyper_sigma: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockHeader {
    pub origin: [u16; 3],
    pub sf_code: u8,
    pub sr_flag: u8,
    pub k_c: u32,
    pub k_s: u32,
    pub n_latent_points: u32,
    /// octree, hyper, latent payload byte lengths
    pub payload_len: [u32; 3],
}

impl BlockHeader {
    pub fn sf(&self) -> Result<SamplingFactor> {
        match self.sf_code {
            0 => Ok(SamplingFactor::S1),
            1 => Ok(SamplingFactor::S2),
            2 => Ok(SamplingFactor::S4),
            c => Err(Error::Format(format!("sampling factor code {c} out of range"))),
        }
    }
}

pub fn sf_code(sf: SamplingFactor) -> u8 {
    match sf {
        SamplingFactor::S1 => 0,
        SamplingFactor::S2 => 1,
        SamplingFactor::S4 => 2,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockRecord {
    pub header: BlockHeader,
    pub octree: Vec<u8>,
    pub hyper: Vec<u8>,
    pub latent: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bitstream {
    pub header: FileHeader,
    pub blocks: Vec<BlockRecord>,
}

impl Bitstream {
    pub fn block_size(&self) -> u32 {
        1u32 << self.header.block_size_log2
    }
}

pub fn serialize(bs: &Bitstream) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(bs.header.bit_depth);
    out.push(bs.header.block_size_log2);
    out.push(bs.header.model_id);
    out.extend_from_slice(&bs.header.qs.to_le_bytes());
    let h = u16::try_from(bs.header.hyper_sigma.len()).expect("hyper channel count fits u16");
    out.extend_from_slice(&h.to_le_bytes());
    for s in &bs.header.hyper_sigma {
        out.extend_from_slice(&s.to_le_bytes());
    }
    let n = u32::try_from(bs.blocks.len()).expect("block count fits u32");
    out.extend_from_slice(&n.to_le_bytes());
    for b in &bs.blocks {
        let hd = &b.header;
        assert_eq!(
            [b.octree.len(), b.hyper.len(), b.latent.len()],
            [hd.payload_len[0] as usize, hd.payload_len[1] as usize, hd.payload_len[2] as usize],
            "header payload lengths disagree with the payloads"
        );
        for o in hd.origin {
            out.extend_from_slice(&o.to_le_bytes());
        }
        out.push(hd.sf_code);
        out.push(hd.sr_flag);
        for v in [hd.k_c, hd.k_s, hd.n_latent_points, hd.payload_len[0], hd.payload_len[1], hd.payload_len[2]] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&b.octree);
        out.extend_from_slice(&b.hyper);
        out.extend_from_slice(&b.latent);
    }
    out
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| Error::Format("length overflow".into()))?;
        if end > self.buf.len() {
            return Err(Error::Format(format!("truncated stream while reading {what}")));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn parse(buf: &[u8]) -> Result<Bitstream> {
    let mut r = Reader::new(buf);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a coded point cloud stream (bad magic)".into()));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported stream version {version}")));
    }
    let bit_depth = r.u8("bit depth")?;
    if !(1..=16).contains(&bit_depth) {
        return Err(Error::Format(format!("bit depth {bit_depth} out of range 1..=16")));
    }
    let block_size_log2 = r.u8("block size")?;
    if block_size_log2 > bit_depth {
        return Err(Error::Format(format!(
            "block size 2^{block_size_log2} exceeds the 2^{bit_depth} grid"
        )));
    }
    let model_id = r.u8("model id")?;
    let qs = r.f32("quantization step")?;
    if !(qs.is_finite() && qs > 0.0) {
        return Err(Error::Format(format!("quantization step {qs} must be finite and positive")));
    }
    let h = r.u16("hyper channel count")?;
    let mut hyper_sigma = Vec::with_capacity(h as usize);
    for _ in 0..h {
        hyper_sigma.push(r.f32("hyper scale")?);
    }
    let n_blocks = r.u32("block count")?;
    let mut blocks = Vec::new();
    for _ in 0..n_blocks {
        let origin = [r.u16("origin")?, r.u16("origin")?, r.u16("origin")?];
        let sf_code = r.u8("sampling factor")?;
        if sf_code > 2 {
            return Err(Error::Format(format!("sampling factor code {sf_code} out of range")));
        }
        let sr_flag = r.u8("SR flag")?;
        if sr_flag > 1 {
            return Err(Error::Format(format!("SR flag {sr_flag} out of range")));
        }
        if sr_flag == 1 && sf_code == 0 {
            return Err(Error::Format("SR flagged without down-sampling".into()));
        }
        let k_c = r.u32("k_C")?;
        let k_s = r.u32("k_S")?;
        if sr_flag == 0 && k_s != 0 {
            return Err(Error::Format(format!("k_S {k_s} set while SR is off")));
        }
        let n_latent_points = r.u32("latent point count")?;
        let payload_len = [r.u32("octree length")?, r.u32("hyper length")?, r.u32("latent length")?];
        let octree = r.take(payload_len[0] as usize, "octree payload")?.to_vec();
        let hyper = r.take(payload_len[1] as usize, "hyper payload")?.to_vec();
        let latent = r.take(payload_len[2] as usize, "latent payload")?.to_vec();
        blocks.push(BlockRecord {
            header: BlockHeader { origin, sf_code, sr_flag, k_c, k_s, n_latent_points, payload_len },
            octree,
            hyper,
            latent,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last block", buf.len() - r.pos)));
    }
    Ok(Bitstream { header: FileHeader { bit_depth, block_size_log2, model_id, qs, hyper_sigma }, blocks })
}
