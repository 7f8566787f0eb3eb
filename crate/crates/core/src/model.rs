//! Encoder plus decoder over a single parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segkit_tensor::{Element, Tape, Tensor, Var};
use serde::Serialize;

use crate::backbone::{Backbone, BackboneConfig};
use crate::decoder::{Decoder, DecoderConfig};
use crate::error::{Result, SegError};
use crate::params::{Bound, ParamStore};

pub const BACKBONE_PREFIX: &str = "backbone";
pub const DECODER_PREFIX: &str = "decoder";

/// Anything that maps a `[3, H, W]` image to `[n_cls, H, W]` logits.
pub trait Segmenter<T: Element> {
    fn n_classes(&self) -> usize;
    /// `image` sides are multiples of 32.
    fn logits(&self, image: &Tensor<T>) -> Result<Tensor<T>>;
}

#[derive(Clone, Debug)]
pub struct SegModel<T> {
    pub backbone: Backbone,
    pub decoder: Decoder,
    pub params: ParamStore<T>,
}

/// Parameter counts per component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub backbone: usize,
    pub decoder: usize,
    pub total: usize,
}

impl<T: Element> SegModel<T> {
    /// Initializes all parameters from `seed`.
    pub fn new(backbone: BackboneConfig, decoder: DecoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(backbone, &mut params, &mut rng, BACKBONE_PREFIX)?;
        let channels = backbone.config().stage_channels;
        let decoder = Decoder::new(decoder, &channels, &mut params, &mut rng, DECODER_PREFIX)?;
        Ok(Self {
            backbone,
            decoder,
            params,
        })
    }

    pub fn backbone_config(&self) -> &BackboneConfig {
        self.backbone.config()
    }

    pub fn decoder_config(&self) -> &DecoderConfig {
        self.decoder.config()
    }

    /// Logits `[n_cls, H, W]` for a `[3, H, W]` image variable.
    pub fn forward(&self, tape: &Tape<T>, p: &Bound, image: Var) -> Result<Var> {
        let s = tape.shape(image);
        if s.len() != 3 {
            return Err(SegError::Config(format!("expected a [3, H, W] image, got {s:?}")));
        }
        let features = self.backbone.forward(tape, p, image)?;
        self.decoder.forward(tape, p, &features, s[1], s[2])
    }

    pub fn breakdown(&self) -> ParamBreakdown {
        let backbone = self.params.numel_with_prefix(&format!("{BACKBONE_PREFIX}."));
        let decoder = self.params.numel_with_prefix(&format!("{DECODER_PREFIX}."));
        ParamBreakdown {
            backbone,
            decoder,
            total: self.params.numel(),
        }
    }
}

impl<T: Element> Segmenter<T> for SegModel<T> {
    fn n_classes(&self) -> usize {
        self.decoder.config().n_cls
    }

    fn logits(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let img = tape.constant(image.clone());
        let out = self.forward(&tape, &p, img)?;
        Ok(tape.value(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::count_params;

    #[test]
    fn end_to_end_shape_and_counts() {
        let model = SegModel::<f32>::new(BackboneConfig::micro(), DecoderConfig::default(), 0).unwrap();
        let img = Tensor::from_fn(&[3, 64, 64], |i| (i % 7) as f32 / 7.0);
        let out = model.logits(&img).unwrap();
        assert_eq!(out.shape(), &[5, 64, 64]);
        let b = model.breakdown();
        assert_eq!(b.backbone, BackboneConfig::micro().param_count());
        assert_eq!(
            b.decoder,
            count_params(&DecoderConfig::default(), &BackboneConfig::micro().stage_channels)
        );
        assert_eq!(b.total, b.backbone + b.decoder);
    }
}
