//! Image-level detector: conv feature extractor, transformer encoder with
//! the aggregation module as one of its layers, and a decoder with learned
//! object queries that predicts boxes and task-encoding logits.

mod infer;
mod train;

pub use infer::{detect, detect_recompute, precompute_prototypes, predict_chunk, PrototypeCache, DEFAULT_THRESHOLD};
pub use train::{episode_gradients, episode_loss, lr_at, OptimConfig, StepReport, Trainer};

use corrdet_tensor::{ParamStore, Session, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cam::{self, Aggregation, CamFlags};
use crate::error::{Error, Result};
use crate::losses::LayerOutput;
use crate::nn::{self, Init};
use crate::types::{Image, SupportExample};

/// Focal prior probability used to initialize the class bias.
const PRIOR_PROB: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channels of the first three stride-2 convolutions; the fourth emits `d`.
    pub backbone_channels: [usize; 3],
    pub d: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub num_queries: usize,
    pub ffn_mult: usize,
    /// Width of the class head; episodes may use any `C` up to this.
    pub max_classes: usize,
    /// 1-based encoder layer that hosts the aggregation module.
    pub cam_placement: usize,
    pub cam: CamFlags,
    pub aggregation: Aggregation,
    pub roi_grid: usize,
    pub roi_samples: usize,
    pub min_image: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_channels: [16, 32, 64],
            d: 128,
            heads: 8,
            enc_layers: 3,
            dec_layers: 3,
            num_queries: 20,
            ffn_mult: 4,
            max_classes: 8,
            cam_placement: 1,
            cam: CamFlags::default(),
            aggregation: Aggregation::Cam,
            roi_grid: 7,
            roi_samples: 2,
            min_image: 64,
        }
    }
}

pub const STRIDE: usize = 16;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d == 0 || self.d % 4 != 0 {
            return bad("d must be a positive multiple of 4");
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad("d must be divisible by heads");
        }
        if self.enc_layers == 0 || self.dec_layers == 0 || self.num_queries == 0 {
            return bad("enc_layers, dec_layers and num_queries must be positive");
        }
        if !(1..=self.enc_layers).contains(&self.cam_placement) {
            return bad("cam_placement must lie in 1..=enc_layers");
        }
        if self.max_classes == 0 {
            return bad("max_classes must be positive");
        }
        Ok(())
    }

    /// Largest `C` one forward pass can handle.
    pub fn chunk_classes(&self, episode_classes: usize) -> usize {
        match self.aggregation {
            Aggregation::Cam => episode_classes.clamp(1, self.max_classes),
            Aggregation::Reweight => 1,
        }
    }
}

/// Parameters plus the configuration that names them.
#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Size of the global label space (rows of the class embedding table).
    pub num_dataset_classes: usize,
}

/// Per-layer predictions as plain tensors.
#[derive(Clone, Debug)]
pub struct PredictionSet {
    /// `(logits [N, C], boxes [N, 4])` per decoder layer.
    pub layers: Vec<(Tensor, Tensor)>,
}

impl PredictionSet {
    pub fn from_vars(layers: &[LayerOutput<'_>]) -> Self {
        Self {
            layers: layers
                .iter()
                .map(|l| ((*l.logits.value()).clone(), (*l.boxes.value()).clone()))
                .collect(),
        }
    }

    pub fn last(&self) -> &(Tensor, Tensor) {
        self.layers.last().expect("at least one decoder layer")
    }

    pub fn bitwise_eq(&self, other: &PredictionSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.0.bitwise_eq(&b.0) && a.1.bitwise_eq(&b.1))
    }
}

/// Backbone output: `[HW, d]` tokens on an `h x w` grid.
#[derive(Clone, Copy)]
pub struct FeatureMap<'g> {
    pub tokens: Var<'g>,
    pub h: usize,
    pub w: usize,
}

impl Detector {
    pub fn new(config: ModelConfig, num_dataset_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = &config;
        let d = c.d;
        let hidden = c.ffn_mult * d;
        {
            let mut init = Init {
                store: &mut params,
                rng: &mut rng,
            };
            let chans = [
                3,
                c.backbone_channels[0],
                c.backbone_channels[1],
                c.backbone_channels[2],
                d,
            ];
            for i in 0..4 {
                init.conv(&format!("backbone.conv{i}"), chans[i], chans[i + 1], 3);
            }
            init.layer_norm("backbone.ln", d);
            match c.aggregation {
                Aggregation::Cam => cam::init_cam(&mut init, d, hidden),
                Aggregation::Reweight => cam::init_reweight(&mut init, d, hidden),
            }
            for l in 1..=c.enc_layers {
                if l != c.cam_placement {
                    nn::init_self_attention_block(&mut init, &format!("enc{l}.sa"), d);
                    nn::init_ffn_block(&mut init, &format!("enc{l}.ff"), d, hidden);
                }
            }
            init.normal("dec.query_pos", &[c.num_queries, d], 1.0);
            for l in 0..c.dec_layers {
                nn::init_self_attention_block(&mut init, &format!("dec{l}.sa"), d);
                init.layer_norm(&format!("dec{l}.ca.ln"), d);
                init.mha(&format!("dec{l}.ca.attn"), d);
                nn::init_ffn_block(&mut init, &format!("dec{l}.ff"), d, hidden);
            }
            init.layer_norm("dec.norm", d);
            init.linear("head.cls", d, c.max_classes);
            let prior = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
            init.tensor("head.cls.bias", Tensor::full(&[c.max_classes], prior));
            init.linear("head.box0", d, d);
            init.linear("head.box1", d, d);
            init.linear("head.box2", d, 4);
            init.normal("proto.embed", &[num_dataset_classes, d], 1.0);
        }
        Ok(Self {
            config,
            params,
            num_dataset_classes,
        })
    }

    /// Conv stack (four stride-2 3x3 convolutions) followed by a token
    /// LayerNorm.
    pub fn features<'g>(&self, s: &Session<'g>, image: &Image) -> Result<FeatureMap<'g>> {
        let (h, w) = (image.height(), image.width());
        let min = self.config.min_image;
        if h < min || w < min || h % STRIDE != 0 || w % STRIDE != 0 {
            return Err(Error::ImageTooSmall {
                height: h,
                width: w,
                min: min.max(STRIDE),
            });
        }
        let mut x = s.constant(image.to_chw());
        for i in 0..4 {
            x = nn::conv(s, &format!("backbone.conv{i}"), x, 3, 2, 1);
            if i < 3 {
                x = x.gelu();
            }
        }
        let shape = x.shape();
        let (fh, fw) = (shape[1], shape[2]);
        let tokens = x.reshape(&[self.config.d, fh * fw]).transpose();
        Ok(FeatureMap {
            tokens: nn::layer_norm(s, "backbone.ln", tokens),
            h: fh,
            w: fw,
        })
    }

    pub fn position<'g>(&self, s: &Session<'g>, h: usize, w: usize) -> Var<'g> {
        s.constant(nn::position_encoding_2d(h, w, self.config.d))
    }

    /// Prototype `[1, d]` of one class from its support examples.
    pub fn class_prototype<'g>(&self, s: &Session<'g>, shots: &[SupportExample]) -> Result<Var<'g>> {
        let mut encoded = Vec::with_capacity(shots.len());
        let mut weights = Vec::with_capacity(shots.len());
        for ex in shots {
            let f = self.features(s, &ex.image.image)?;
            let pos = self.position(s, f.h, f.w);
            encoded.push(cam::encode(s, self.config.heads, f.tokens, Some(pos)));
            weights.push(cam::support_pool_weights(
                &ex.instance_box,
                f.h,
                f.w,
                self.config.roi_grid,
                self.config.roi_samples,
            ));
        }
        Ok(cam::class_prototype(s, &encoded, &weights))
    }

    /// Stacked `[C, d]` prototypes, one row per support set.
    pub fn prototypes<'g>(&self, s: &Session<'g>, sets: &[Vec<SupportExample>]) -> Result<Var<'g>> {
        let rows = sets
            .iter()
            .map(|set| self.class_prototype(s, set))
            .collect::<Result<Vec<_>>>()?;
        Ok(Var::concat_rows(&rows))
    }

    /// Encoding rows aligned with `S̃` for `C` classes whose encoding
    /// positions are given in prototype-row order.
    pub fn encodings_for(&self, positions: &[usize]) -> Result<Tensor> {
        cam::task_encodings_for(positions, self.config.d, self.config.cam.model_background)
    }

    /// Full forward pass on a query image. `protos` holds one row per
    /// support class; `encodings` pairs with `S̃` row for row.
    pub fn forward<'g>(
        &self,
        s: &Session<'g>,
        image: &Image,
        protos: Var<'g>,
        encodings: &Tensor,
    ) -> Result<Vec<LayerOutput<'g>>> {
        let f = self.features(s, image)?;
        self.forward_features(s, f, protos, encodings)
    }

    pub fn forward_features<'g>(
        &self,
        s: &Session<'g>,
        f: FeatureMap<'g>,
        protos: Var<'g>,
        encodings: &Tensor,
    ) -> Result<Vec<LayerOutput<'g>>> {
        let c = &self.config;
        let classes = protos.shape()[0];
        if classes > c.max_classes {
            return Err(Error::Config(format!(
                "{classes} support classes exceed the class head width {}",
                c.max_classes
            )));
        }
        let pos = self.position(s, f.h, f.w);
        let mut x = f.tokens;
        for l in 1..=c.enc_layers {
            if l == c.cam_placement {
                let q = cam::encode(s, c.heads, x, Some(pos));
                x = match c.aggregation {
                    Aggregation::Cam => cam::aggregate(s, q, Some(protos), encodings, &c.cam)?.out,
                    Aggregation::Reweight => cam::reweight(s, q, protos)?,
                };
            } else {
                x = nn::self_attention_block(s, &format!("enc{l}.sa"), c.heads, x, Some(pos));
                x = nn::ffn_block(s, &format!("enc{l}.ff"), x);
            }
        }
        let memory = x;
        let mem_k = memory.add(pos);
        let qpos = s.param("dec.query_pos");
        let mut t = s.constant(Tensor::zeros(&[c.num_queries, c.d]));
        let mut outputs = Vec::with_capacity(c.dec_layers);
        for l in 0..c.dec_layers {
            t = nn::self_attention_block(s, &format!("dec{l}.sa"), c.heads, t, Some(qpos));
            let h = nn::layer_norm(s, &format!("dec{l}.ca.ln"), t);
            t = t.add(nn::mha(
                s,
                &format!("dec{l}.ca.attn"),
                c.heads,
                h.add(qpos),
                mem_k,
                memory,
            ));
            t = nn::ffn_block(s, &format!("dec{l}.ff"), t);
            outputs.push(self.heads(s, t, classes));
        }
        Ok(outputs)
    }

    fn heads<'g>(&self, s: &Session<'g>, t: Var<'g>, classes: usize) -> LayerOutput<'g> {
        let h = nn::layer_norm(s, "dec.norm", t);
        let logits = nn::linear(s, "head.cls", h).slice_cols(0, classes);
        let b = nn::linear(s, "head.box0", h).gelu();
        let b = nn::linear(s, "head.box1", b).gelu();
        let boxes = nn::linear(s, "head.box2", b).sigmoid();
        LayerOutput { logits, boxes }
    }
}
