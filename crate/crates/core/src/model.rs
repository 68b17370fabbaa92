//! The full detector: backbone, voting and proposal heads.

use std::path::Path;

use rand::Rng;

use crate::backbone::{Backbone, BackboneConfig, SeedSet};
use crate::config::{KeyValues, KvWriter};
use crate::error::{Error, Result};
use crate::geometry::{Detection, LabeledBox};
use crate::graph::{Graph, Var};
use crate::head::{
    decode_proposals, detection_loss, mean_size_anchors, nms_3d, register_anchors, ClusterModule, HeadConfig,
    LossComponents, Proposal, ProposalModule, ProposalOutput, VoteModule, VoteSet,
};
use crate::params::{ParamId, ParamStore};
use crate::point_ops::PointSet;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const CONFIG_FILE: &str = "config.txt";
pub const PARAMS_FILE: &str = "params.patd";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub class_names: Vec<String>,
    /// Seed of the parameter initialization.
    pub seed: u64,
}

impl ModelConfig {
    pub fn standard(class_names: Vec<String>) -> Self {
        let head = HeadConfig { num_classes: class_names.len(), ..HeadConfig::standard() };
        ModelConfig { backbone: BackboneConfig::standard(), head, class_names, seed: 0 }
    }

    pub fn toy(class_names: Vec<String>) -> Self {
        let head = HeadConfig { num_classes: class_names.len(), ..HeadConfig::toy() };
        ModelConfig { backbone: BackboneConfig::toy(), head, class_names, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()?;
        if self.class_names.len() != self.head.num_classes {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.head.num_classes
            )));
        }
        if self.head.proposals > self.backbone.seed_count() {
            return Err(Error::Config(format!(
                "{} proposals exceed {} seeds",
                self.head.proposals,
                self.backbone.seed_count()
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut w = KvWriter::default();
        w.comment("detector configuration").put("seed", self.seed).put_list("classes", &self.class_names);
        self.backbone.write_kv(&mut w);
        self.head.write_kv(&mut w);
        w.finish()
    }

    /// Parses a config file. Missing head keys use the standard head, or the
    /// toy head when `profile = toy`; a missing backbone uses the same profile.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let toy = match kv.get::<String>("profile")?.as_deref() {
            None | Some("standard") => false,
            Some("toy") => true,
            Some(p) => return Err(Error::Config(format!("unknown profile `{p}` (expected standard or toy)"))),
        };
        let class_names: Vec<String> = kv.list("classes")?.ok_or_else(|| Error::Config("missing `classes`".into()))?;
        let backbone = if kv.contains("sa1.points") {
            BackboneConfig::read_kv(kv)?
        } else {
            let base = if toy { BackboneConfig::toy() } else { BackboneConfig::standard() };
            BackboneConfig {
                attention: kv.get_or("attention", base.attention)?,
                reduction: kv.get_or("reduction", base.reduction)?,
                neighbors: kv.get_or("neighbors", base.neighbors)?,
                height_feature: kv.get_or("height_feature", base.height_feature)?,
                ..base
            }
        };
        let base = HeadConfig { num_classes: class_names.len(), ..if toy { HeadConfig::toy() } else { HeadConfig::standard() } };
        let head = HeadConfig::read_kv(kv, base)?;
        let cfg = ModelConfig { backbone, head, class_names, seed: kv.get_or("seed", 0)? };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything a forward pass produces.
#[derive(Clone, Debug)]
pub struct DetectorOutput<T: Real = f32> {
    pub seeds: SeedSet<T>,
    pub votes: VoteSet<T>,
    pub proposals: ProposalOutput<T>,
}

#[derive(Clone, Debug)]
pub struct Detector {
    config: ModelConfig,
    pub backbone: Backbone,
    pub vote: VoteModule,
    pub cluster: ClusterModule,
    pub proposal: ProposalModule,
    pub anchors: ParamId,
}

impl Detector {
    pub fn new<T: Real, R: Rng>(config: ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(config.backbone.clone(), store, "backbone", rng)?;
        let c = config.backbone.seed_channels();
        let vote = VoteModule::new(c, store, "vote", rng)?;
        let cluster = ClusterModule::new(&config.head, c, store, "cluster", rng)?;
        let proposal = ProposalModule::new(&config.head, cluster.mlp.out_channels(), store, "proposal", rng)?;
        let anchors = register_anchors(store, "anchors", config.head.num_classes)?;
        Ok(Detector { config, backbone, vote, cluster, proposal, anchors })
    }

    /// Builds the detector with parameters drawn from `config.seed`.
    pub fn init<T: Real>(config: ModelConfig) -> Result<(Self, ParamStore<T>)> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let det = Self::new(config, &mut store, &mut rng)?;
        Ok((det, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set_anchors<T: Real>(&self, store: &mut ParamStore<T>, sizes: &[[f64; 3]]) -> Result<()> {
        let k = self.config.head.num_classes;
        if sizes.len() != k || sizes.iter().flatten().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Invalid(format!("need {k} positive anchor sizes, got {sizes:?}")));
        }
        let flat = sizes.iter().flatten().map(|&v| T::lit(v)).collect();
        store.set_value(self.anchors, Tensor::from_vec(&[k, 3], flat)?)
    }

    /// Anchors from the mean box size per class of a training set.
    pub fn fit_anchors<T: Real>(&self, store: &mut ParamStore<T>, boxes: &[LabeledBox]) -> Result<()> {
        self.set_anchors(store, &mean_size_anchors(boxes, self.config.head.num_classes))
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, points: &PointSet<T>) -> Result<DetectorOutput<T>> {
        Ok(self.forward_batch(g, &[points])?.remove(0))
    }

    /// Forward over a mini-batch of scenes. In train mode batch-norm
    /// statistics are pooled over every scene of the batch.
    pub fn forward_batch<T: Real>(&self, g: &Graph<'_, T>, scenes: &[&PointSet<T>]) -> Result<Vec<DetectorOutput<T>>> {
        let seeds = self.backbone.forward_batch(g, scenes)?;
        let votes = self.vote.forward_batch(g, &seeds.iter().collect::<Vec<_>>())?;
        let clusters = self.cluster.forward_batch(g, &votes.iter().collect::<Vec<_>>())?;
        let proposals = self.proposal.forward_batch(g, &clusters.iter().collect::<Vec<_>>())?;
        Ok(seeds
            .into_iter()
            .zip(votes)
            .zip(proposals)
            .map(|((seeds, votes), proposals)| DetectorOutput { seeds, votes, proposals })
            .collect())
    }

    pub fn loss<T: Real>(
        &self,
        g: &Graph<'_, T>,
        out: &DetectorOutput<T>,
        gt: &[LabeledBox],
    ) -> Result<(Var<T>, LossComponents)> {
        let anchors = g.store().value(self.anchors);
        detection_loss(g, &out.seeds.coords, &out.votes, &out.proposals, gt, anchors, &self.config.head)
    }

    /// All decoded proposals, before suppression.
    pub fn proposals<T: Real>(&self, store: &ParamStore<T>, out: &DetectorOutput<T>) -> Vec<Proposal> {
        decode_proposals(&out.proposals, store.value(self.anchors))
    }

    /// Eval-mode detections after NMS.
    pub fn detect<T: Real>(&self, store: &ParamStore<T>, points: &PointSet<T>) -> Result<Vec<Detection>> {
        let g = Graph::inference(store);
        let out = self.forward(&g, points)?;
        let dets: Vec<Detection> = self.proposals(store, &out).into_iter().map(|p| p.detection).collect();
        Ok(nms_3d(&dets, self.config.head.nms_iou))
    }

    /// Writes `config.txt` and `params.patd` into `dir`.
    pub fn save<T: Real>(&self, store: &ParamStore<T>, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), self.config.to_kv())?;
        store.save(&dir.join(PARAMS_FILE))
    }

    pub fn load<T: Real>(dir: &Path) -> Result<(Self, ParamStore<T>)> {
        let cfg = ModelConfig::from_kv(&KeyValues::read(&dir.join(CONFIG_FILE))?)?;
        let (det, mut store) = Self::init(cfg)?;
        store.load_values_from(&dir.join(PARAMS_FILE))?;
        Ok((det, store))
    }
}
