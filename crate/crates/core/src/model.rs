//! Assembled recommenders: the intent-guided model, its ablations, the
//! self-attentive baseline and the intent encoder being pretrained.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::config::ModelConfig;
use crate::data::Sequences;
use crate::error::{Error, Result};
use crate::idr::{Idr, Projection, ReasonerConfig};
use crate::lid::{Lid, BACKBONE_PREFIX};
use crate::params::{ParamStore, Session};
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Self-attentive encoder at the intent width, trained on every position;
    /// becomes the frozen intent encoder.
    Encoder,
    /// Self-attentive recommender at the baseline width.
    Baseline,
    /// Intent distillation, projection, deliberation and consistency loss.
    Full,
    /// No intents; the reasoner skips deliberation.
    NoLid,
    /// Intents prepended as pseudo-tokens instead of cross-attention.
    ConcatFusion,
    /// Full architecture trained without the consistency loss.
    NoIcr,
}

impl Variant {
    pub const ABLATIONS: [Variant; 3] = [Variant::NoLid, Variant::ConcatFusion, Variant::NoIcr];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Encoder => "encoder",
            Variant::Baseline => "baseline",
            Variant::Full => "full",
            Variant::NoLid => "no_lid",
            Variant::ConcatFusion => "concat_fusion",
            Variant::NoIcr => "no_icr",
        }
    }

    /// Whether the variant distills intents through a frozen encoder.
    pub fn uses_intents(self) -> bool {
        matches!(self, Variant::Full | Variant::ConcatFusion | Variant::NoIcr)
    }

    /// Whether training adds the consistency loss.
    pub fn uses_icr(self) -> bool {
        matches!(self, Variant::Full | Variant::ConcatFusion)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Variant::Encoder,
            Variant::Baseline,
            Variant::Full,
            Variant::NoLid,
            Variant::ConcatFusion,
            Variant::NoIcr,
        ]
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub enum Architecture {
    SelfAttentive(Backbone),
    IntentGuided {
        lid: Option<Lid>,
        projection: Option<Projection>,
        idr: Idr,
    },
}

#[derive(Debug, Clone)]
pub struct Model {
    pub variant: Variant,
    pub config: ModelConfig,
    /// Vocabulary size without the padding id.
    pub items: usize,
    pub store: ParamStore,
    pub arch: Architecture,
}

/// Output of one prediction pass.
#[derive(Debug, Clone, Copy)]
pub struct Representations {
    /// `rows × d` user representations.
    pub users: Var,
    /// Projected intents `(rows·m) × d` and `m`, when the variant has them.
    pub intents: Option<(Var, usize)>,
}

fn encoder_config(items: usize, cfg: &ModelConfig) -> BackboneConfig {
    BackboneConfig {
        items,
        width: cfg.intent_dim,
        layers: cfg.backbone_layers,
        heads: cfg.heads,
        max_len: cfg.max_len,
        dropout: cfg.dropout,
    }
}

impl Model {
    /// Builds a freshly initialized model. Intent variants copy the frozen
    /// encoder from `encoder` (an [`Variant::Encoder`] model); without one they
    /// get a randomly initialized encoder, which checkpoint loading then
    /// overwrites.
    pub fn new(variant: Variant, items: usize, config: &ModelConfig, encoder: Option<&Model>, seed: u64) -> Result<Self> {
        config.validate()?;
        if items == 0 {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, arch) = match variant {
            Variant::Encoder => {
                let mut store = ParamStore::new();
                let bb = Backbone::new(&mut store, "lid.backbone", encoder_config(items, config), &mut rng);
                (store, Architecture::SelfAttentive(bb))
            }
            Variant::Baseline => {
                let mut store = ParamStore::new();
                let cfg = BackboneConfig {
                    items,
                    width: config.baseline_dim,
                    layers: config.layers,
                    heads: config.heads,
                    max_len: config.max_len,
                    dropout: config.dropout,
                };
                let bb = Backbone::new(&mut store, "baseline", cfg, &mut rng);
                (store, Architecture::SelfAttentive(bb))
            }
            Variant::NoLid | Variant::Full | Variant::ConcatFusion | Variant::NoIcr => {
                let (mut store, lid) = if variant.uses_intents() {
                    let (mut store, backbone) = match encoder {
                        Some(enc) => enc.encoder_parts(items, config)?,
                        None => {
                            let mut store = ParamStore::new();
                            let bb = Backbone::new(&mut store, "lid.backbone", encoder_config(items, config), &mut rng);
                            (store, bb)
                        }
                    };
                    let lid = Lid::new(&mut store, backbone, config.prefix_tokens, config.intent_tokens, &mut rng);
                    (store, Some(lid))
                } else {
                    (ParamStore::new(), None)
                };
                let projection = lid
                    .as_ref()
                    .map(|_| Projection::new(&mut store, config.intent_dim, config.hidden_dim, &mut rng));
                let idr = Idr::new(
                    &mut store,
                    ReasonerConfig {
                        items,
                        width: config.hidden_dim,
                        layers: config.layers,
                        heads: config.heads,
                        max_len: config.max_len,
                        dropout: config.dropout,
                        cross_attention: matches!(variant, Variant::Full | Variant::NoIcr),
                    },
                    &mut rng,
                );
                (store, Architecture::IntentGuided { lid, projection, idr })
            }
        };
        Ok(Self {
            variant,
            config: config.clone(),
            items,
            store,
            arch,
        })
    }

    /// A copy of this encoder's store and backbone, checked against the
    /// requested vocabulary and widths.
    fn encoder_parts(&self, items: usize, config: &ModelConfig) -> Result<(ParamStore, Backbone)> {
        let Architecture::SelfAttentive(bb) = &self.arch else {
            return Err(Error::Config("intent encoder must be a self-attentive model".into()));
        };
        if self.variant != Variant::Encoder {
            return Err(Error::Config(format!("a {} model cannot serve as the intent encoder", self.variant)));
        }
        let want = encoder_config(items, config);
        let have = bb.config;
        if (have.items, have.width, have.layers, have.heads, have.max_len)
            != (want.items, want.width, want.layers, want.heads, want.max_len)
        {
            return Err(Error::Config(format!(
                "pretrained encoder {have:?} does not match the model configuration {want:?}"
            )));
        }
        Ok((self.store.clone(), bb.clone()))
    }

    /// SHA-256 of the frozen encoder tensors; `None` without an encoder.
    pub fn backbone_fingerprint(&self) -> Option<String> {
        match (&self.arch, self.variant) {
            (Architecture::IntentGuided { lid: Some(_), .. }, _) | (_, Variant::Encoder) => {
                Some(self.store.checksum(BACKBONE_PREFIX))
            }
            _ => None,
        }
    }

    pub fn lid(&self) -> Option<&Lid> {
        match &self.arch {
            Architecture::IntentGuided { lid, .. } => lid.as_ref(),
            Architecture::SelfAttentive(_) => None,
        }
    }

    /// Projected intents `T_D` for every row.
    pub fn intents(&self, s: &mut Session<'_>, seqs: &Sequences) -> Result<Option<(Var, usize)>> {
        match &self.arch {
            Architecture::IntentGuided {
                lid: Some(lid),
                projection: Some(proj),
                ..
            } => {
                let raw = lid.distill(s, seqs)?;
                let projected = proj.forward(s, raw)?;
                Ok(Some((projected, lid.intent_tokens)))
            }
            _ => Ok(None),
        }
    }

    /// User representations given (possibly masked) intents.
    pub fn represent_with(&self, s: &mut Session<'_>, seqs: &Sequences, intents: Option<(Var, usize)>) -> Result<Var> {
        match &self.arch {
            Architecture::SelfAttentive(bb) => bb.user_representations(s, seqs),
            Architecture::IntentGuided { idr, .. } => match (self.variant, intents) {
                (Variant::ConcatFusion, Some((t, m))) => idr.concat_forward(s, seqs, t, m),
                (Variant::ConcatFusion, None) => Err(Error::Input("concatenation fusion needs intents".into())),
                _ => idr.forward(s, seqs, intents),
            },
        }
    }

    /// Prediction pass with unmasked intents.
    pub fn forward(&self, s: &mut Session<'_>, seqs: &Sequences) -> Result<Representations> {
        let intents = self.intents(s, seqs)?;
        let users = self.represent_with(s, seqs, intents)?;
        Ok(Representations { users, intents })
    }

    /// Two reasoner passes over the intent views `(view1, view2)`, each with
    /// `m` rows per user. Ordinary dropout is off during both so the views are
    /// the only difference.
    pub fn view_representations(
        &self,
        s: &mut Session<'_>,
        seqs: &Sequences,
        views: (Var, Var),
        m: usize,
    ) -> Result<(Var, Var)> {
        let was = s.set_dropout(false);
        let result = (|| {
            let h1 = self.represent_with(s, seqs, Some((views.0, m)))?;
            let h2 = self.represent_with(s, seqs, Some((views.1, m)))?;
            Ok((h1, h2))
        })();
        s.set_dropout(was);
        result
    }

    /// The item table that scores user representations.
    pub fn item_table(&self) -> crate::params::ParamId {
        match &self.arch {
            Architecture::SelfAttentive(bb) => bb.item_embeddings,
            Architecture::IntentGuided { idr, .. } => idr.item_embeddings,
        }
    }

    /// `rows × (items + 1)` logits; column 0 is padding.
    pub fn logits(&self, s: &mut Session<'_>, users: Var) -> Result<Var> {
        let table = s.param(self.item_table());
        s.graph.matmul_t(users, table)
    }

    /// Evaluation-mode scores for every row and item.
    pub fn score(&self, seqs: &Sequences) -> Result<Tensor> {
        let mut s = Session::eval(&self.store);
        let reps = self.forward(&mut s, seqs)?;
        let logits = self.logits(&mut s, reps.users)?;
        let out = s.graph.value(logits).clone();
        if !out.all_finite() {
            return Err(Error::Numeric("non-finite scores".into()));
        }
        Ok(out)
    }

    /// Longest input the model accepts.
    pub fn max_len(&self) -> usize {
        self.config.max_len
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            prefix_tokens: 2,
            intent_tokens: 2,
            intent_dim: 8,
            hidden_dim: 8,
            layers: 1,
            backbone_layers: 1,
            heads: 2,
            dropout: 0.1,
            max_len: 6,
            baseline_dim: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [Variant::Baseline, Variant::Full, Variant::NoLid, Variant::ConcatFusion, Variant::NoIcr] {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("sasrec".parse::<Variant>().is_err());
    }

    #[test]
    fn encoder_is_copied_and_frozen() {
        let enc = Model::new(Variant::Encoder, 9, &cfg(), None, 1).unwrap();
        let full = Model::new(Variant::Full, 9, &cfg(), Some(&enc), 2).unwrap();
        assert_eq!(full.backbone_fingerprint(), enc.backbone_fingerprint());
        assert!(full
            .store
            .iter()
            .filter(|(_, p)| p.name.starts_with(BACKBONE_PREFIX))
            .all(|(_, p)| !p.trainable()));
    }

    #[test]
    fn ablation_parameter_census() {
        let enc = Model::new(Variant::Encoder, 9, &cfg(), None, 1).unwrap();
        let count = |v| Model::new(v, 9, &cfg(), Some(&enc), 2).unwrap().store.trainable_names().len();
        let full = count(Variant::Full);
        assert_eq!(count(Variant::NoIcr), full);
        assert!(count(Variant::ConcatFusion) < full);
        let no_lid = Model::new(Variant::NoLid, 9, &cfg(), None, 2).unwrap();
        let names = no_lid.store.trainable_names();
        assert!(names.len() < full);
        assert!(names.iter().all(|n| !n.starts_with("lid.") && !n.starts_with("proj.")));
    }

    #[test]
    fn mismatched_encoder_is_rejected() {
        let enc = Model::new(Variant::Encoder, 9, &cfg(), None, 1).unwrap();
        assert!(Model::new(Variant::Full, 10, &cfg(), Some(&enc), 2).is_err());
    }

    #[test]
    fn unmasked_views_without_dropout_are_identical() {
        let enc = Model::new(Variant::Encoder, 9, &cfg(), None, 1).unwrap();
        let full = Model::new(Variant::Full, 9, &cfg(), Some(&enc), 2).unwrap();
        let seqs = Sequences::from_histories(&[&[1, 2, 3], &[4, 5]]).unwrap();
        let mut s = Session::train(&full.store, 3);
        let reps = full.forward(&mut s, &seqs).unwrap();
        let (t, m) = reps.intents.unwrap();
        let views = crate::icr::sample_views(&mut s.graph, t, 0.0, 4).unwrap();
        let (h1, h2) = full.view_representations(&mut s, &seqs, views, m).unwrap();
        assert!(s.graph.value(h1).bit_eq(s.graph.value(h2)));
        assert!(s.dropout_enabled());
    }

    #[test]
    fn scores_cover_the_vocabulary() {
        let model = Model::new(Variant::Baseline, 9, &cfg(), None, 1).unwrap();
        let seqs = Sequences::from_histories(&[&[1, 2, 3]]).unwrap();
        assert_eq!(model.score(&seqs).unwrap().shape(), &[1, 10]);
    }
}
