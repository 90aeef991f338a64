use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::SegMask;
use crate::params::{ParamFilter, ParamStore};
use crate::pyramid::{Backbone, PyramidConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{Classifier, Decoder, DecoderOutput, Discriminator, DiscriminatorMode, Generator, GeneratorOutput, PatchReduce};

pub const DISC_PREFIX: &str = "disc.";
pub const GEN_PREFIXES: [&str; 2] = ["backbone.", "gen."];
pub const TASK_PREFIXES: [&str; 3] = ["backbone.", "gen.", "cls."];
const DEC_PREFIX: &str = "dec.";

/// Number of segmentation classes (background, road).
pub const CLASSES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOptions {
    pub discriminator: DiscriminatorMode,
    pub patch_reduce: PatchReduce,
    /// Widths of the three affine discriminator layers.
    pub disc_widths: [usize; 3],
    /// When set the discriminator sees decoded images instead of features.
    pub use_decoder: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions::desk()
    }
}

impl ModelOptions {
    pub fn desk() -> Self {
        ModelOptions {
            discriminator: DiscriminatorMode::Fc,
            patch_reduce: PatchReduce::Mean,
            disc_widths: [256, 256, 64],
            use_decoder: false,
        }
    }

    pub fn full() -> Self {
        ModelOptions {
            disc_widths: [4096, 4096, 1024],
            ..ModelOptions::desk()
        }
    }
}

/// Backbone, generator, pixel classifier, discriminator and optional decoder.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: PyramidConfig,
    pub options: ModelOptions,
    pub backbone: Backbone,
    pub generator: Generator,
    pub classifier: Classifier,
    pub discriminator: Discriminator,
    pub decoder: Option<Decoder>,
}

impl Model {
    pub fn new(config: &PyramidConfig, options: &ModelOptions) -> Result<Self> {
        config.validate()?;
        let c4 = config.backbone_channels[3];
        let s4 = config.conv4_size();
        let head_widths = [(c4 / 2).max(8), (c4 / 4).max(8), (c4 / 8).max(8)];
        let decoder = if options.use_decoder {
            Some(Decoder::new("dec", c4, &head_widths, 3, DecoderOutput::Sigmoid)?)
        } else {
            None
        };
        let disc_input = if options.use_decoder {
            [3, config.input_size, config.input_size]
        } else {
            [c4, s4, s4]
        };
        Ok(Model {
            config: config.clone(),
            options: options.clone(),
            backbone: Backbone::new(config),
            generator: Generator::new(config, "gen")?,
            classifier: Classifier::new("cls", c4, &head_widths, CLASSES)?,
            discriminator: Discriminator::new("disc", options.discriminator, disc_input, options.disc_widths)?
                .with_reduce(options.patch_reduce),
            decoder,
        })
    }

    pub fn init<E: Scalar>(&self, seed: u64) -> Result<ParamStore<E>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.backbone.init(&mut store, &mut rng)?;
        self.generator.init(&mut store, &mut rng)?;
        self.classifier.init(&mut store, &mut rng)?;
        self.discriminator.init(&mut store, &mut rng)?;
        if let Some(d) = &self.decoder {
            d.init(&mut store, &mut rng)?;
        }
        Ok(store)
    }

    pub fn disc_group(&self) -> ParamFilter {
        ParamFilter::prefixes(&[DISC_PREFIX])
    }

    /// Generator parameters, plus the decoder when it is enabled.
    pub fn gen_group(&self) -> ParamFilter {
        let mut p: Vec<&str> = GEN_PREFIXES.to_vec();
        if self.decoder.is_some() {
            p.push(DEC_PREFIX);
        }
        ParamFilter::prefixes(&p)
    }

    pub fn task_group(&self) -> ParamFilter {
        ParamFilter::prefixes(&TASK_PREFIXES)
    }

    pub fn input_size(&self) -> usize {
        self.config.input_size
    }

    pub fn features<E: Scalar>(&self, tape: &mut Tape<'_, E>, images: Var) -> Result<[Var; 4]> {
        self.backbone.forward(tape, images)
    }

    pub fn generate<E: Scalar>(&self, tape: &mut Tape<'_, E>, features: [Var; 4], noise: Var) -> Result<GeneratorOutput> {
        self.generator.forward(tape, features, noise)
    }

    /// What the discriminator sees for a conv4-shaped feature batch.
    pub fn disc_view<E: Scalar>(&self, tape: &mut Tape<'_, E>, features: Var) -> Result<Var> {
        match &self.decoder {
            Some(d) => d.forward(tape, features),
            None => Ok(features),
        }
    }

    pub fn classify<E: Scalar>(&self, tape: &mut Tape<'_, E>, features: Var) -> Result<Var> {
        self.classifier.forward(tape, features)
    }

    /// Per-pixel class logits through backbone and classifier only.
    pub fn logits<E: Scalar>(&self, store: &ParamStore<E>, images: &Tensor<E>) -> Result<Tensor<E>> {
        let mut tape = Tape::with_params(store, ParamFilter::Nothing);
        tape.set_training(false);
        let x = tape.constant(images.clone());
        let f = self.features(&mut tape, x)?;
        let logits = self.classify(&mut tape, f[3])?;
        Ok(tape.value(logits).clone())
    }

    /// Argmax segmentation of `[N, 3, S, S]` images; the generator and the
    /// discriminator are not evaluated.
    pub fn predict<E: Scalar>(&self, store: &ParamStore<E>, images: &Tensor<E>) -> Result<Vec<SegMask>> {
        let s = self.input_size();
        match *images.shape() {
            [_, 3, h, w] if h == s && w == s => {}
            ref sh => {
                return Err(Error::shape("predict", format!("expected [N, 3, {s}, {s}], got {sh:?}")));
            }
        }
        argmax_masks(&self.logits(store, images)?)
    }
}

/// Per-pixel argmax over the class axis of `[N, K, H, W]` logits. Ties go
/// to the lowest class id.
pub fn argmax_masks<E: Scalar>(logits: &Tensor<E>) -> Result<Vec<SegMask>> {
    let (n, k, h, w) = logits.dims4()?;
    let plane = h * w;
    let data = logits.data();
    (0..n)
        .map(|i| {
            let labels = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if data[(i * k + c) * plane + p] > data[(i * k + best) * plane + p] {
                            best = c;
                        }
                    }
                    best as u32
                })
                .collect();
            SegMask::new(w, h, labels)
        })
        .collect()
}
