//! Sequence classification: aligned per-frame encoder, temporal mixing,
//! global max pooling and an MLP head.

use rand::Rng;

use super::encoder::{validate_stages, Encoder, EncoderGeometry, EncoderStage};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::point_ops::PointCloudSequence;
use crate::stsa::{patch_division, stsa_forward, AttentionTrace, StsaConfig, StsaParams};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

/// How per-frame seed features are combined over time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Temporal {
    /// Spatio-temporal attention over all (window, seed) tokens.
    Stsa { window: usize, stride: usize },
    /// Average of each seed's features over frames.
    MeanPool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClsNetConfig {
    pub stages: Vec<EncoderStage>,
    pub temporal: Temporal,
    /// Hidden widths of the head; the output layer is appended.
    pub head_hidden: Vec<usize>,
    pub num_classes: usize,
}

impl ClsNetConfig {
    pub fn validate(&self) -> Result<()> {
        validate_stages(&self.stages)?;
        if self.num_classes == 0 || self.head_hidden.contains(&0) {
            return Err(Error::Config("classifier widths must be positive".into()));
        }
        if let Temporal::Stsa { window, stride } = self.temporal {
            if window == 0 || stride == 0 {
                return Err(Error::Config("window and stride must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ClsOutput {
    /// `[1, C]`.
    pub logits: Var,
    pub attention: Option<AttentionTrace>,
}

#[derive(Clone, Debug)]
pub struct ClsNet {
    pub cfg: ClsNetConfig,
    encoder: Encoder,
    stsa: Option<StsaParams>,
    head: Mlp,
}

impl ClsNet {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        cfg: &ClsNetConfig,
        feat_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(store, "cls.enc", feat_width, &cfg.stages, rng)?;
        let d = encoder.out_dim();
        // Tokens keep the encoder width so both temporal variants feed the
        // same head.
        let stsa = match cfg.temporal {
            Temporal::Stsa { window, stride } => {
                Some(StsaParams::new(store, "cls.stsa", StsaConfig::new(d, d, window, stride), rng)?)
            }
            Temporal::MeanPool => None,
        };
        let mut widths = cfg.head_hidden.clone();
        widths.push(cfg.num_classes);
        let head = Mlp::new(store, "cls.head", d, &widths, Activation::Identity, rng)?;
        Ok(Self { cfg: cfg.clone(), encoder, stsa, head })
    }

    pub fn prepare(&self, seq: &PointCloudSequence) -> Result<EncoderGeometry> {
        if let Some(s) = &self.stsa {
            if seq.len() < s.cfg.window {
                return Err(Error::Config(format!(
                    "window {} is longer than the {}-frame sequence",
                    s.cfg.window,
                    seq.len()
                )));
            }
        }
        self.encoder.geometry(seq)
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, seq: &PointCloudSequence, geom: &EncoderGeometry) -> Result<ClsOutput> {
        let enc = self.encoder.forward(g, seq, geom)?;
        let top: Vec<Var> = enc.iter().map(|maps| maps[maps.len() - 1].feats).collect();
        let (tokens, attention) = match &self.stsa {
            Some(p) => {
                let patches = patch_division(g, &top, p)?;
                let (out, trace) = stsa_forward(g, &patches, p)?;
                (out, Some(trace))
            }
            None => {
                let (m, d) = (g.shape(top[0])[0], g.shape(top[0])[1]);
                let stacked = if top.len() == 1 { top[0] } else { g.concat(&top, 0)? };
                let stacked = g.reshape(stacked, &[top.len(), m, d])?;
                (g.mean_over_axis(stacked, 0)?, None)
            }
        };
        let pooled = g.max_over_axis(tokens, 0)?;
        let d = g.shape(pooled)[0];
        let pooled = g.reshape(pooled, &[1, d])?;
        let logits = self.head.forward(g, pooled)?;
        Ok(ClsOutput { logits, attention })
    }

    /// Class logits without gradients.
    pub fn predict<F: Real>(&self, store: &ParamStore<F>, seq: &PointCloudSequence, geom: &EncoderGeometry) -> Result<Tensor<F>> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, seq, geom)?;
        Ok(g.value(out.logits).reshape([self.cfg.num_classes])?)
    }
}
