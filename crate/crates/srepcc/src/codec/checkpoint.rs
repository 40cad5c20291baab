//! Model checkpoints. Parameters are stored as f32 on disk whatever the
//! in-memory scalar is, so a deployment (f32) model round-trips bitwise;
//! loading into a wider scalar widens the stored values. The layout is
//! documented in BITSTREAM.md. Loading rebuilds the architecture from the
//! stored configuration and refuses any checkpoint whose tensor shapes
//! disagree with it.

use std::path::Path;

use crate::codec::bitstream::Reader;
use crate::codec::model::{CodecModel, ModelConfig};
use crate::nn::ParameterStore;
use crate::scalar::Scalar;
use crate::{Error, Result};

pub const MODEL_MAGIC: [u8; 4] = *b"SRPM";
pub const MODEL_VERSION: u8 = 1;

/// The seven parameter stores in checkpoint order.
fn stores<T: Scalar>(m: &CodecModel<T>) -> [&ParameterStore<T>; 7] {
    [&m.analysis, &m.synthesis, &m.hyper_analysis, &m.hyper_mean, &m.hyper_scale, &m.sr2, &m.sr4]
}

fn stores_mut<T: Scalar>(m: &mut CodecModel<T>) -> [&mut ParameterStore<T>; 7] {
    [
        &mut m.analysis,
        &mut m.synthesis,
        &mut m.hyper_analysis,
        &mut m.hyper_mean,
        &mut m.hyper_scale,
        &mut m.sr2,
        &mut m.sr4,
    ]
}

pub fn to_bytes<T: Scalar>(model: &CodecModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.push(MODEL_VERSION);
    let cfg = &model.config;
    for w in cfg.widths {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    for v in [cfg.latent_channels, cfg.hyper_channels, cfg.sr_width] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(cfg.lambda_id);
    out.extend_from_slice(&model.qs.to_le_bytes());
    let h = u16::try_from(model.hyper_sigma.len()).expect("hyper channel count fits u16");
    out.extend_from_slice(&h.to_le_bytes());
    for s in &model.hyper_sigma {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for store in stores(model) {
        out.extend_from_slice(&(store.layers.len() as u32).to_le_bytes());
        for layer in &store.layers {
            let b_len = layer.b.as_ref().map_or(0, |b| b.len());
            out.extend_from_slice(&(layer.w.len() as u32).to_le_bytes());
            out.extend_from_slice(&(b_len as u32).to_le_bytes());
            for &v in &layer.w {
                out.extend_from_slice(&(v.dbl() as f32).to_le_bytes());
            }
            if let Some(b) = &layer.b {
                for &v in b {
                    out.extend_from_slice(&(v.dbl() as f32).to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn from_bytes<T: Scalar>(buf: &[u8]) -> Result<CodecModel<T>> {
    let mut r = Reader::new(buf);
    if r.take(4, "model magic")? != MODEL_MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = r.u8("model version")?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let widths = [
        r.u32("width")? as usize,
        r.u32("width")? as usize,
        r.u32("width")? as usize,
    ];
    let latent_channels = r.u32("latent channels")? as usize;
    let hyper_channels = r.u32("hyper channels")? as usize;
    let sr_width = r.u32("SR width")? as usize;
    let lambda_id = r.u8("lambda id")?;
    let config = ModelConfig { widths, latent_channels, hyper_channels, sr_width, lambda_id };
    for (v, what) in [
        (widths[0], "width"),
        (widths[1], "width"),
        (widths[2], "width"),
        (latent_channels, "latent channels"),
        (hyper_channels, "hyper channels"),
        (sr_width, "SR width"),
    ] {
        if v == 0 || v > 1 << 12 {
            return Err(Error::Format(format!("{what} {v} out of range")));
        }
    }
    // widths host inception-residual blocks, which split in half
    for v in [widths[0], widths[1], widths[2], sr_width] {
        if v % 2 != 0 {
            return Err(Error::Format(format!("width {v} must be even")));
        }
    }
    if lambda_id as usize >= crate::codec::model::LAMBDAS.len() {
        return Err(Error::Format(format!("lambda id {lambda_id} out of range")));
    }
    let qs = r.f32("quantization step")?;
    if !(qs.is_finite() && qs > 0.0) {
        return Err(Error::Format(format!("quantization step {qs} must be finite and positive")));
    }
    let h = r.u16("hyper scale count")? as usize;
    if h != hyper_channels {
        return Err(Error::Format(format!("{h} hyper scales for {hyper_channels} hyper channels")));
    }
    let mut hyper_sigma = Vec::with_capacity(h);
    for _ in 0..h {
        let s = r.f32("hyper scale")?;
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Format(format!("hyper scale {s} must be finite and positive")));
        }
        hyper_sigma.push(s);
    }

    // shapes come from the architecture, never from the file
    let mut model = CodecModel::<T>::init(config, 0);
    model.qs = qs;
    model.hyper_sigma = hyper_sigma;
    for store in stores_mut(&mut model) {
        let n_layers = r.u32("layer count")? as usize;
        if n_layers != store.layers.len() {
            return Err(Error::Format(format!(
                "checkpoint has {n_layers} layers where the architecture has {}",
                store.layers.len()
            )));
        }
        for layer in &mut store.layers {
            let w_len = r.u32("weight count")? as usize;
            let b_len = r.u32("bias count")? as usize;
            let want_b = layer.b.as_ref().map_or(0, |b| b.len());
            if w_len != layer.w.len() || b_len != want_b {
                return Err(Error::Format(format!(
                    "checkpoint tensor {w_len}+{b_len} where the architecture has {}+{want_b}",
                    layer.w.len()
                )));
            }
            for v in layer.w.iter_mut() {
                *v = T::from_dbl(r.f32("weight")? as f64);
            }
            if let Some(b) = &mut layer.b {
                for v in b.iter_mut() {
                    *v = T::from_dbl(r.f32("bias")? as f64);
                }
            }
        }
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes after the checkpoint", r.remaining())));
    }
    Ok(model)
}

pub fn save<T: Scalar>(model: &CodecModel<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<CodecModel<T>> {
    from_bytes(&std::fs::read(path)?)
}
