//! Architecture builders for the coding model family and the parameter ledger.
//!
//! One configuration nails down all seven sub-networks: analysis, synthesis,
//! hyper analysis, hyper mean/scale synthesis, and the two super-resolution
//! branches. The width knobs cover the full-size model, the reduced-channel
//! variants, and a miniature build for fast tests. Bias placement is uniform:
//! every convolution carries one except final projection/classifier layers
//! and the IRB layers that never have one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{count_parameters, init_store, Activation, ConvKind, LayerSpec, ModelItem, ModelSpec, ParameterStore};
use crate::scalar::Scalar;

/// Rate-distortion trade-off schedule, indexed by `lambda_id`. Training runs
/// low to high rate, so id 4 trains first; see the training stages.
pub const LAMBDAS: [f64; 5] = [0.05, 0.025, 0.01, 0.005, 0.0025];

/// Five full-width coding models plus the spatial-domain SR stack they are
/// normally paired with; the reference point for the reduction figure.
pub const REFERENCE_FULL_PIPELINE_TOTAL: u64 = 39_899_282;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Trunk widths of the three down/up stages (analysis order).
    pub widths: [usize; 3],
    /// Channels of the coded latent (the analysis output).
    pub latent_channels: usize,
    /// Channels of the hyper latent and of the hyper nets' hidden layers.
    pub hyper_channels: usize,
    /// Working width of the SR branches.
    pub sr_width: usize,
    /// Index into [`LAMBDAS`].
    pub lambda_id: u8,
}

impl ModelConfig {
    /// Full-width model: every channel count at 128.
    pub fn original() -> Self {
        ModelConfig { widths: [32, 64, 128], latent_channels: 128, hyper_channels: 128, sr_width: 32, lambda_id: 0 }
    }

    /// Reduce only the coded latent to `n` channels.
    pub fn latent_only(n: usize) -> Self {
        ModelConfig { latent_channels: n, ..Self::original() }
    }

    /// Reduce the coded latent and the whole hyper path to `n` channels.
    pub fn latent_and_hyper(n: usize) -> Self {
        ModelConfig { latent_channels: n, hyper_channels: n, ..Self::original() }
    }

    /// Reduce every layer of every sub-network to `n` channels.
    pub fn all_channels(n: usize) -> Self {
        ModelConfig { widths: [n, n, n], latent_channels: n, hyper_channels: n, sr_width: n, lambda_id: 0 }
    }

    /// The shipped lightweight model: latent and hyper channels at 16.
    pub fn simplified() -> Self {
        Self::latent_and_hyper(16)
    }

    /// Quarter-width build for tests and smoke runs.
    pub fn tiny() -> Self {
        ModelConfig { widths: [8, 16, 32], latent_channels: 4, hyper_channels: 4, sr_width: 8, lambda_id: 0 }
    }

    pub fn with_lambda(mut self, lambda_id: u8) -> Self {
        assert!((lambda_id as usize) < LAMBDAS.len());
        self.lambda_id = lambda_id;
        self
    }

    pub fn lambda(&self) -> f64 {
        LAMBDAS[self.lambda_id as usize]
    }
}

fn conv(kernel: u32, in_ch: usize, out_ch: usize, kind: ConvKind, bias: bool, activation: Activation) -> ModelItem {
    ModelItem::Conv(LayerSpec { kernel, in_ch, out_ch, kind, bias, activation })
}

/// Occupancy in, latent out; three stride-2 stages, so the latent grid is 8x
/// coarser than the input.
pub fn analysis_spec(cfg: &ModelConfig) -> ModelSpec {
    let [w1, w2, w3] = cfg.widths;
    vec![
        conv(3, 1, w1, ConvKind::Down(2), true, Activation::Relu),
        ModelItem::Irb(w1),
        conv(3, w1, w2, ConvKind::Down(2), true, Activation::Relu),
        ModelItem::Irb(w2),
        conv(3, w2, w3, ConvKind::Down(2), true, Activation::Relu),
        ModelItem::Irb(w3),
        conv(1, w3, cfg.latent_channels, ConvKind::Stride1, false, Activation::None),
    ]
}

/// Latent in, occupancy probability out. The features feeding the final
/// classifier (index [`SYNTHESIS_TAP`]) are what the SR branches consume.
pub fn synthesis_spec(cfg: &ModelConfig) -> ModelSpec {
    let [w1, w2, w3] = cfg.widths;
    vec![
        conv(2, cfg.latent_channels, w3, ConvKind::Up(2), true, Activation::Relu),
        ModelItem::Irb(w3),
        conv(2, w3, w2, ConvKind::Up(2), true, Activation::Relu),
        ModelItem::Irb(w2),
        conv(2, w2, w1, ConvKind::Up(2), true, Activation::Relu),
        ModelItem::Irb(w1),
        conv(1, w1, 1, ConvKind::Stride1, false, Activation::Sigmoid),
    ]
}

/// Item index of the last feature layer of the synthesis, before the
/// classifier; the SR branches tap here.
pub const SYNTHESIS_TAP: usize = 5;

/// Latent in, hyper latent out; two stride-2 stages on top of the latent
/// grid, so hyper coordinates are 4x coarser than latent ones.
pub fn hyper_analysis_spec(cfg: &ModelConfig) -> ModelSpec {
    let h = cfg.hyper_channels;
    vec![
        conv(3, cfg.latent_channels, h, ConvKind::Stride1, true, Activation::Relu),
        conv(3, h, h, ConvKind::Down(2), true, Activation::Relu),
        conv(3, h, h, ConvKind::Down(2), false, Activation::None),
    ]
}

/// Hyper latent in, per-latent-element mean (or log scale) out. Unlike the
/// other final layers this one keeps its bias: the output must be able to
/// sit away from zero.
pub fn hyper_synthesis_spec(cfg: &ModelConfig) -> ModelSpec {
    let h = cfg.hyper_channels;
    vec![
        conv(2, h, h, ConvKind::Up(2), true, Activation::Relu),
        conv(2, h, h, ConvKind::Up(2), true, Activation::Relu),
        conv(3, h, cfg.latent_channels, ConvKind::Stride1, true, Activation::None),
    ]
}

/// SR branch: prune, one generative up-sampling step to full resolution,
/// feature extraction, classification. SF=2 uses a 3-wide kernel, SF=4 a
/// 5-wide one; that kernel and the stride are the only differences.
pub fn sr_spec(cfg: &ModelConfig, sf: u32) -> ModelSpec {
    let (kernel, up) = match sf {
        2 => (3, 2),
        4 => (5, 4),
        _ => panic!("SR branch only exists for SF 2 and 4"),
    };
    let w = cfg.sr_width;
    vec![
        conv(kernel, cfg.widths[0], w, ConvKind::Up(up), true, Activation::Relu),
        ModelItem::Irb(w),
        conv(1, w, 1, ConvKind::Stride1, false, Activation::Sigmoid),
    ]
}

/// The seven sub-network specs of one coding model.
#[derive(Debug, Clone)]
pub struct CodecSpecs {
    pub analysis: ModelSpec,
    pub synthesis: ModelSpec,
    pub hyper_analysis: ModelSpec,
    pub hyper_mean: ModelSpec,
    pub hyper_scale: ModelSpec,
    pub sr2: ModelSpec,
    pub sr4: ModelSpec,
}

impl CodecSpecs {
    pub fn build(cfg: &ModelConfig) -> Self {
        CodecSpecs {
            analysis: analysis_spec(cfg),
            synthesis: synthesis_spec(cfg),
            hyper_analysis: hyper_analysis_spec(cfg),
            hyper_mean: hyper_synthesis_spec(cfg),
            hyper_scale: hyper_synthesis_spec(cfg),
            sr2: sr_spec(cfg, 2),
            sr4: sr_spec(cfg, 4),
        }
    }

    /// Parameters of the coding path (everything except the SR branches).
    pub fn coding_total(&self) -> u64 {
        count_parameters(&self.analysis)
            + count_parameters(&self.synthesis)
            + count_parameters(&self.hyper_analysis)
            + count_parameters(&self.hyper_mean)
            + count_parameters(&self.hyper_scale)
    }

    /// (name, parameter count) rows for reporting, in canonical order.
    pub fn report_rows(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("analysis", count_parameters(&self.analysis)),
            ("synthesis", count_parameters(&self.synthesis)),
            ("hyper_analysis", count_parameters(&self.hyper_analysis)),
            ("hyper_mean", count_parameters(&self.hyper_mean)),
            ("hyper_scale", count_parameters(&self.hyper_scale)),
            ("sr_sf2", count_parameters(&self.sr2)),
            ("sr_sf4", count_parameters(&self.sr4)),
        ]
    }
}

/// Parameters for one coding model plus its SR branches, keyed like the specs.
#[derive(Debug, Clone)]
pub struct CodecModel<T: Scalar> {
    pub config: ModelConfig,
    pub specs: CodecSpecs,
    pub analysis: ParameterStore<T>,
    pub synthesis: ParameterStore<T>,
    pub hyper_analysis: ParameterStore<T>,
    pub hyper_mean: ParameterStore<T>,
    pub hyper_scale: ParameterStore<T>,
    pub sr2: ParameterStore<T>,
    pub sr4: ParameterStore<T>,
    /// Static per-channel scales of the hyper prior; trained, then carried
    /// in the stream header as f32 so both ends build identical tables.
    pub hyper_sigma: Vec<f32>,
    /// Latent quantization step.
    pub qs: f32,
}

impl<T: Scalar> CodecModel<T> {
    /// Fresh randomly initialized model, deterministic in the seed.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let specs = CodecSpecs::build(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CodecModel {
            analysis: init_store(&specs.analysis, &mut rng),
            synthesis: init_store(&specs.synthesis, &mut rng),
            hyper_analysis: init_store(&specs.hyper_analysis, &mut rng),
            hyper_mean: init_store(&specs.hyper_mean, &mut rng),
            hyper_scale: init_store(&specs.hyper_scale, &mut rng),
            sr2: init_store(&specs.sr2, &mut rng),
            sr4: init_store(&specs.sr4, &mut rng),
            hyper_sigma: vec![1.0; config.hyper_channels],
            qs: 1.0,
            config,
            specs,
        }
    }

    /// Total learnable parameters including both SR branches.
    pub fn total_parameters(&self) -> u64 {
        self.specs.coding_total() + count_parameters(&self.specs.sr2) + count_parameters(&self.specs.sr4)
    }
}
