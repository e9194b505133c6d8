//! The channel-aware encoder and its heads.

pub mod config;
pub mod encoder;
pub mod heads;
pub mod layout;
pub mod revin;

pub use config::ModelConfig;
pub use encoder::{
    cba_layer, encode_tape, layout_mask, patch_matrix, tokenize, Bind, EncodeOptions,
    EncoderParams, LayerParams, TapeEncoding,
};
pub use heads::{classify, denormalize_tape, reconstruct, ForecastHead, Linear};
pub use layout::{build_attention_mask, draw_patch_mask, masked_count, TokenLayout, TokenRole};
pub use revin::{revin_denormalize, revin_normalize, RevinState, REVIN_EPS};

use crate::align::{CrossFuse, TextStub};
use crate::autodiff::Tape;
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

/// Encoder outputs as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `L×d` final hidden states.
    pub hidden: Tensor,
    pub h_cls: Vec<f64>,
    /// `C` rows of width `d`.
    pub h_cit: Vec<Vec<f64>>,
}

impl EncoderOutput {
    pub fn from_hidden(hidden: Tensor, layout: &TokenLayout) -> Self {
        let h_cls = hidden.row(layout.cls_pos()).to_vec();
        let h_cit = (0..layout.channels)
            .map(|c| hidden.row(layout.cit_pos(c)).to_vec())
            .collect();
        Self {
            hidden,
            h_cls,
            h_cit,
        }
    }
}

/// Every trainable tensor of the retriever lives in one store: the encoder,
/// its reconstruction and classification heads, the text projection and the
/// cross-modal fusion used during alignment.
#[derive(Debug, Clone)]
pub struct TraceModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub recon: Linear,
    pub classifier: Linear,
    /// Learnable `text_width → d` projection of the frozen text features.
    pub text_proj: Linear,
    pub fuse: CrossFuse,
    pub text_stub: TextStub,
}

impl TraceModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::substream(seed, "init");
        let mut store = ParamStore::new();
        let d = config.d_model;
        let encoder = EncoderParams::init(&mut store, &config, &mut r);
        let recon = Linear::init(&mut store, "head.recon", d, config.patch_len, 0.02, &mut r);
        let classifier = Linear::init(&mut store, "head.class", d, config.classes, 0.02, &mut r);
        let text_proj = Linear::init(
            &mut store,
            "text.proj",
            config.text_width,
            d,
            1.0 / (config.text_width as f64).sqrt(),
            &mut r,
        );
        let fuse = CrossFuse::init(&mut store, d, &mut r);
        store.quantize_f32();
        let text_stub = TextStub::new(config.text_buckets, config.text_width, config.text_seed);
        Ok(Self {
            config,
            store,
            encoder,
            recon,
            classifier,
            text_proj,
            fuse,
            text_stub,
        })
    }

    /// Rebuilds a model from stored tensors (matched by name).
    pub fn from_store(config: ModelConfig, store: &ParamStore) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.store.load_from(store)?;
        Ok(m)
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        self.encoder.ids()
    }

    /// Eval-mode encoding of a raw `C×T` window.
    pub fn encode(&self, x: &[Vec<f64>]) -> Result<EncoderOutput> {
        let (xn, _) = revin_normalize(x);
        self.encode_normalized(&xn)
    }

    pub fn encode_normalized(&self, xn: &[Vec<f64>]) -> Result<EncoderOutput> {
        let mut tape = Tape::new();
        let enc = encode_tape(
            &mut tape,
            Bind::frozen(&self.store),
            &self.encoder,
            &self.config,
            xn,
            &EncodeOptions::default(),
            None,
        )?;
        let hidden = tape.value(enc.hidden).clone();
        Ok(EncoderOutput::from_hidden(hidden, &enc.layout))
    }

    /// Projected text embedding (unnormalized) from precomputed frozen features.
    pub fn project_features(&self, features: &[f64]) -> Vec<f64> {
        let w = self.store.value(self.text_proj.w);
        let b = self.store.value(self.text_proj.b);
        let d = w.cols();
        let mut out = b.data().to_vec();
        for (i, &f) in features.iter().enumerate() {
            let row = &w.data()[i * d..(i + 1) * d];
            out.iter_mut().zip(row).for_each(|(o, r)| *o += f * r);
        }
        out
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        self.project_features(&self.text_stub.features(text))
    }

    /// Class logits of a raw window.
    pub fn classify(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        let (xn, _) = revin_normalize(x);
        let mut tape = Tape::new();
        let bind = Bind::frozen(&self.store);
        let enc = encode_tape(
            &mut tape,
            bind,
            &self.encoder,
            &self.config,
            &xn,
            &EncodeOptions::default(),
            None,
        )?;
        let logits = classify(&mut tape, bind, &self.classifier, &enc)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Reconstruction `(C·T̂)×P` of a normalized window.
    pub fn reconstruct(&self, xn: &[Vec<f64>], mask: Option<&[bool]>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = Bind::frozen(&self.store);
        let opts = EncodeOptions {
            mask,
            ..Default::default()
        };
        let enc = encode_tape(&mut tape, bind, &self.encoder, &self.config, xn, &opts, None)?;
        let y = reconstruct(&mut tape, bind, &self.recon, &enc)?;
        Ok(tape.value(y).clone())
    }
}
