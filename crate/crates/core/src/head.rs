//! Hough voting head: votes, vote clustering, box proposals, NMS and the
//! training loss.

use rand::Rng;

use crate::backbone::SeedSet;
use crate::config::{KeyValues, KvWriter};
use crate::error::{Error, Result};
use crate::geometry::{iou_aabb3d, Box3D, Detection, LabeledBox};
use crate::graph::{Graph, Var};
use crate::nn::{SharedMlp, SharedMlpSpec};
use crate::ops::{softmax_tensor, PoolKind};
use crate::params::{ParamId, ParamStore};
use crate::point_ops::{ball_query, farthest_point_sample, group_features};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Objectness, center offset and log-size channels ahead of the class logits.
const BOX_CHANNELS: usize = 2 + 3 + 3;
/// Log-size outputs are clamped to this magnitude when decoding boxes.
const MAX_LOG_SIZE: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub vote: f64,
    pub objectness: f64,
    pub bbox: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { vote: 1.0, objectness: 0.5, bbox: 1.0, class: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub num_classes: usize,
    pub proposals: usize,
    pub cluster_radius: f64,
    pub cluster_neighbors: usize,
    pub cluster_mlp: Vec<usize>,
    /// Hidden widths of the proposal MLP.
    pub proposal_mlp: Vec<usize>,
    pub nms_iou: f64,
    /// Cluster centers nearer than this to a GT centroid are positives.
    pub positive_distance: f64,
    /// Cluster centers farther than this from every GT centroid are negatives.
    pub negative_distance: f64,
    pub weights: LossWeights,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl HeadConfig {
    pub fn standard() -> Self {
        HeadConfig {
            num_classes: 10,
            proposals: 256,
            cluster_radius: 0.3,
            cluster_neighbors: 16,
            cluster_mlp: vec![128, 128, 128],
            proposal_mlp: vec![128, 128],
            nms_iou: 0.25,
            positive_distance: 0.3,
            negative_distance: 0.6,
            weights: LossWeights::default(),
        }
    }

    /// Pairs with the toy backbone: one proposal per seed, and a class term
    /// weighted like the box terms so a few hundred steps suffice.
    pub fn toy() -> Self {
        let base = Self::standard();
        HeadConfig {
            proposals: 128,
            cluster_mlp: vec![32, 32],
            proposal_mlp: vec![32, 32],
            weights: LossWeights { class: 1.0, ..base.weights },
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.proposals == 0 || self.cluster_neighbors == 0 {
            return Err(Error::Config("head needs classes, proposals and cluster neighbors >= 1".into()));
        }
        if !(self.cluster_radius > 0.0) || !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::Config("head needs cluster radius > 0 and NMS IoU in (0, 1)".into()));
        }
        if !(self.positive_distance > 0.0 && self.positive_distance <= self.negative_distance) {
            return Err(Error::Config("need 0 < positive distance <= negative distance".into()));
        }
        if self.cluster_mlp.is_empty() || self.cluster_mlp.contains(&0) || self.proposal_mlp.contains(&0) {
            return Err(Error::Config("head MLP widths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.put("head.classes", self.num_classes)
            .put("head.proposals", self.proposals)
            .put("head.cluster_radius", self.cluster_radius)
            .put("head.cluster_neighbors", self.cluster_neighbors)
            .put_list("head.cluster_mlp", &self.cluster_mlp)
            .put_list("head.proposal_mlp", &self.proposal_mlp)
            .put("head.nms_iou", self.nms_iou)
            .put("head.positive_distance", self.positive_distance)
            .put("head.negative_distance", self.negative_distance)
            .put("loss.vote", self.weights.vote)
            .put("loss.objectness", self.weights.objectness)
            .put("loss.box", self.weights.bbox)
            .put("loss.class", self.weights.class);
    }

    /// Missing keys keep the values of `base`.
    pub fn read_kv(kv: &KeyValues, base: HeadConfig) -> Result<Self> {
        let w = base.weights;
        let cfg = HeadConfig {
            num_classes: kv.get_or("head.classes", base.num_classes)?,
            proposals: kv.get_or("head.proposals", base.proposals)?,
            cluster_radius: kv.get_or("head.cluster_radius", base.cluster_radius)?,
            cluster_neighbors: kv.get_or("head.cluster_neighbors", base.cluster_neighbors)?,
            cluster_mlp: kv.list("head.cluster_mlp")?.unwrap_or(base.cluster_mlp),
            proposal_mlp: kv.list("head.proposal_mlp")?.unwrap_or(base.proposal_mlp),
            nms_iou: kv.get_or("head.nms_iou", base.nms_iou)?,
            positive_distance: kv.get_or("head.positive_distance", base.positive_distance)?,
            negative_distance: kv.get_or("head.negative_distance", base.negative_distance)?,
            weights: LossWeights {
                vote: kv.get_or("loss.vote", w.vote)?,
                objectness: kv.get_or("loss.objectness", w.objectness)?,
                bbox: kv.get_or("loss.box", w.bbox)?,
                class: kv.get_or("loss.class", w.class)?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Votes cast by the seeds: displaced coordinates and updated features.
#[derive(Clone, Debug)]
pub struct VoteSet<T: Real = f32> {
    pub coords: Var<T>,
    pub features: Var<T>,
}

impl<T: Real> VoteSet<T> {
    pub fn len(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shared MLP predicting a coordinate and a feature offset per seed.
#[derive(Clone, Debug)]
pub struct VoteModule {
    pub channels: usize,
    pub mlp: SharedMlp,
}

impl VoteModule {
    pub fn new<T: Real, R: Rng>(channels: usize, store: &mut ParamStore<T>, name: &str, rng: &mut R) -> Result<Self> {
        let spec = SharedMlpSpec::new(channels, &[channels, channels, 3 + channels]).linear_last();
        Ok(VoteModule { channels, mlp: SharedMlp::new(store, name, spec, rng)? })
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, seeds: &SeedSet<T>) -> Result<VoteSet<T>> {
        Ok(self.forward_batch(g, &[seeds])?.remove(0))
    }

    pub fn forward_batch<T: Real>(&self, g: &Graph<'_, T>, seeds: &[&SeedSet<T>]) -> Result<Vec<VoteSet<T>>> {
        let c = self.channels;
        let feats: Vec<Var<T>> = seeds.iter().map(|s| s.features.clone()).collect();
        let outs = self.mlp.forward_batch(g, &feats)?;
        seeds
            .iter()
            .zip(outs)
            .map(|(s, out)| {
                let coords = g.add(&g.constant(s.coords.clone()), &g.slice(&out, 1, 0, 3)?)?;
                let features = g.add(&s.features, &g.slice(&out, 1, 3, c)?)?;
                Ok(VoteSet { coords, features })
            })
            .collect()
    }
}

/// Pooled features of the vote clusters around FPS-selected vote centers.
#[derive(Clone, Debug)]
pub struct Clusters<T: Real = f32> {
    pub centers: Var<T>,
    pub features: Var<T>,
    /// Vote index of each cluster center.
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ClusterModule {
    pub proposals: usize,
    pub radius: f64,
    pub neighbors: usize,
    pub mlp: SharedMlp,
}

impl ClusterModule {
    pub fn new<T: Real, R: Rng>(
        cfg: &HeadConfig,
        channels: usize,
        store: &mut ParamStore<T>,
        name: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let mlp = SharedMlp::new(store, name, SharedMlpSpec::new(3 + channels, &cfg.cluster_mlp), rng)?;
        Ok(ClusterModule { proposals: cfg.proposals, radius: cfg.cluster_radius, neighbors: cfg.cluster_neighbors, mlp })
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, votes: &VoteSet<T>) -> Result<Clusters<T>> {
        Ok(self.forward_batch(g, &[votes])?.remove(0))
    }

    pub fn forward_batch<T: Real>(&self, g: &Graph<'_, T>, votes: &[&VoteSet<T>]) -> Result<Vec<Clusters<T>>> {
        let (p, k) = (self.proposals, self.neighbors);
        let radius = T::lit(self.radius);
        let mut picked = Vec::with_capacity(votes.len());
        let mut grouped = Vec::with_capacity(votes.len());
        for v in votes {
            let m = v.len();
            if p > m {
                return Err(Error::Invalid(format!("{p} proposals requested from {m} votes")));
            }
            let xyz = v.coords.value();
            let indices = farthest_point_sample(xyz, p)?;
            let centers = g.gather_rows(&v.coords, &indices)?;
            let nb = ball_query(centers.value(), xyz, radius, k)?;
            grouped.push(group_features(g, &nb, Some(&v.features), &v.coords, &centers, T::one() / radius)?);
            picked.push((centers, indices));
        }
        let c = self.mlp.out_channels();
        self.mlp
            .forward_batch(g, &grouped)?
            .iter()
            .zip(picked)
            .map(|(h, (centers, indices))| {
                let features = g.reshape(&g.pool(&g.reshape(h, &[p, k, c])?, 1, PoolKind::Max)?, &[p, c])?;
                Ok(Clusters { centers, features, indices })
            })
            .collect()
    }
}

/// Raw per-proposal regression outputs.
#[derive(Clone, Debug)]
pub struct ProposalOutput<T: Real = f32> {
    /// Cluster centers the boxes are regressed from.
    pub anchors_xyz: Var<T>,
    pub objectness: Var<T>,
    pub center: Var<T>,
    pub log_size: Var<T>,
    pub class_logits: Var<T>,
}

impl<T: Real> ProposalOutput<T> {
    pub fn len(&self) -> usize {
        self.center.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct ProposalModule {
    pub num_classes: usize,
    pub mlp: SharedMlp,
}

impl ProposalModule {
    pub fn new<T: Real, R: Rng>(
        cfg: &HeadConfig,
        channels: usize,
        store: &mut ParamStore<T>,
        name: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let mut widths = cfg.proposal_mlp.clone();
        widths.push(BOX_CHANNELS + cfg.num_classes);
        let mlp = SharedMlp::new(store, name, SharedMlpSpec::new(channels, &widths).linear_last(), rng)?;
        Ok(ProposalModule { num_classes: cfg.num_classes, mlp })
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, clusters: &Clusters<T>) -> Result<ProposalOutput<T>> {
        Ok(self.forward_batch(g, &[clusters])?.remove(0))
    }

    pub fn forward_batch<T: Real>(&self, g: &Graph<'_, T>, clusters: &[&Clusters<T>]) -> Result<Vec<ProposalOutput<T>>> {
        let feats: Vec<Var<T>> = clusters.iter().map(|c| c.features.clone()).collect();
        let outs = self.mlp.forward_batch(g, &feats)?;
        clusters
            .iter()
            .zip(outs)
            .map(|(cl, out)| {
                Ok(ProposalOutput {
                    anchors_xyz: cl.centers.clone(),
                    objectness: g.slice(&out, 1, 0, 2)?,
                    center: g.add(&cl.centers, &g.slice(&out, 1, 2, 3)?)?,
                    log_size: g.slice(&out, 1, 5, 3)?,
                    class_logits: g.slice(&out, 1, BOX_CHANNELS, self.num_classes)?,
                })
            })
            .collect()
    }
}

/// A decoded proposal together with its logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub detection: Detection,
    pub objectness_logits: [f64; 2],
    pub class_logits: Vec<f64>,
}

/// Decodes boxes: score = P(object), class = argmax, size = class anchor
/// scaled by `exp(log_size)`. Non-finite proposals are dropped.
pub fn decode_proposals<T: Real>(out: &ProposalOutput<T>, anchors: &Tensor<T>) -> Vec<Proposal> {
    let obj = softmax_tensor(out.objectness.value(), 1);
    let (center, log_size, logits) = (out.center.value(), out.log_size.value(), out.class_logits.value());
    let mut props = Vec::with_capacity(out.len());
    for p in 0..out.len() {
        let class_logits: Vec<f64> = logits.row(p).iter().map(|v| v.to_f64().unwrap()).collect();
        let class = argmax(&class_logits);
        let c: [f64; 3] = std::array::from_fn(|d| center.at(p, d).to_f64().unwrap());
        let size: [f64; 3] = std::array::from_fn(|d| {
            let ls = log_size.at(p, d).to_f64().unwrap().clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE);
            anchors.at(class, d).to_f64().unwrap() * ls.exp()
        });
        let Ok(bbox) = Box3D::new(c, size) else { continue };
        let score = obj.at(p, 1).to_f64().unwrap();
        if !score.is_finite() {
            continue;
        }
        let raw = out.objectness.value().row(p);
        props.push(Proposal {
            detection: Detection { bbox, class, score },
            objectness_logits: [raw[0].to_f64().unwrap(), raw[1].to_f64().unwrap()],
            class_logits,
        });
    }
    props
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy same-class suppression in order of descending score (ties by
/// input order). Returns the kept detections, highest score first.
pub fn nms_3d(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        if kept.iter().all(|k| k.class != d.class || iou_aabb3d(&k.bbox, &d.bbox) < iou_threshold) {
            kept.push(*d);
        }
    }
    kept
}

/// Scalar loss terms of one scene or the mean over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub total: f64,
    pub vote: f64,
    pub objectness: f64,
    pub center: f64,
    pub size: f64,
    pub class: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl LossComponents {
    pub fn mean(parts: &[LossComponents]) -> LossComponents {
        let n = parts.len().max(1) as f64;
        let sum = |f: fn(&LossComponents) -> f64| parts.iter().map(f).sum::<f64>() / n;
        LossComponents {
            total: sum(|c| c.total),
            vote: sum(|c| c.vote),
            objectness: sum(|c| c.objectness),
            center: sum(|c| c.center),
            size: sum(|c| c.size),
            class: sum(|c| c.class),
            positives: parts.iter().map(|c| c.positives).sum(),
            negatives: parts.iter().map(|c| c.negatives).sum(),
        }
    }
}

/// Transition point of the smooth-L1 box terms, in meters (or log units).
const SMOOTH_L1_BETA: f64 = 0.1;

/// Weighted detection loss. Assignments (seed-in-box, positive/negative
/// clusters) are computed from values and carry no gradient.
pub fn detection_loss<T: Real>(
    g: &Graph<'_, T>,
    seeds: &Tensor<T>,
    votes: &VoteSet<T>,
    out: &ProposalOutput<T>,
    gt: &[LabeledBox],
    anchors: &Tensor<T>,
    cfg: &HeadConfig,
) -> Result<(Var<T>, LossComponents)> {
    let lit = |v: f64| T::lit(v);
    let zero = || g.constant(Tensor::scalar(T::zero()));
    let k = cfg.num_classes;
    if let Some(b) = gt.iter().find(|b| b.class >= k) {
        return Err(Error::Invalid(format!("ground-truth class {} outside {k} classes", b.class)));
    }

    // votes of seeds inside a box regress to that box's centroid
    let mut inside = Vec::new();
    let mut vote_target = Vec::new();
    for s in 0..seeds.rows() {
        let p: [f64; 3] = std::array::from_fn(|d| seeds.at(s, d).to_f64().unwrap());
        if let Some(b) = gt.iter().find(|b| b.bbox.contains(p)) {
            inside.push(s);
            vote_target.extend(b.bbox.center.iter().map(|&v| lit(v)));
        }
    }
    let vote = if inside.is_empty() {
        zero()
    } else {
        let n = inside.len();
        let diff = g.sub(&g.gather_rows(&votes.coords, &inside)?, &g.constant(Tensor::from_vec(&[n, 3], vote_target)?))?;
        g.scale(&g.sum_all(&g.abs(&diff)), lit(1.0 / n as f64))
    };

    // objectness labels from cluster-center distance to the nearest centroid
    let p = out.len();
    let centers = out.anchors_xyz.value();
    let mut positive = Vec::new();
    let mut labels = vec![None; p];
    for (q, label) in labels.iter_mut().enumerate() {
        let c: [f64; 3] = std::array::from_fn(|d| centers.at(q, d).to_f64().unwrap());
        let nearest = gt
            .iter()
            .enumerate()
            .map(|(i, b)| ((0..3).map(|d| (c[d] - b.bbox.center[d]).powi(2)).sum::<f64>().sqrt(), i))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        match nearest {
            Some((d, i)) if d < cfg.positive_distance => {
                *label = Some(1);
                positive.push((q, i));
            }
            Some((d, _)) if d <= cfg.negative_distance => {}
            _ => *label = Some(0),
        }
    }
    let assigned = labels.iter().flatten().count();
    let negatives = assigned - positive.len();
    let objectness = if assigned == 0 {
        zero()
    } else {
        let mut w = Tensor::zeros(&[p, 2]);
        for (q, l) in labels.iter().enumerate() {
            if let Some(l) = l {
                w.data_mut()[q * 2 + l] = lit(-1.0 / assigned as f64);
            }
        }
        g.sum_all(&g.mul(&g.log_softmax(&out.objectness, 1)?, &g.constant(w))?)
    };

    let (center, size, class) = if positive.is_empty() {
        (zero(), zero(), zero())
    } else {
        let n = positive.len();
        let idx: Vec<usize> = positive.iter().map(|&(q, _)| q).collect();
        let mut ct = Vec::with_capacity(n * 3);
        let mut st = Vec::with_capacity(n * 3);
        let mut cw = Tensor::zeros(&[p, k]);
        for &(q, i) in &positive {
            let b = &gt[i];
            ct.extend(b.bbox.center.iter().map(|&v| lit(v)));
            for d in 0..3 {
                st.push(lit((b.bbox.size[d] / anchors.at(b.class, d).to_f64().unwrap()).ln()));
            }
            cw.data_mut()[q * k + b.class] = lit(-1.0 / n as f64);
        }
        let beta = lit(SMOOTH_L1_BETA);
        let inv = lit(1.0 / n as f64);
        let dc = g.sub(&g.gather_rows(&out.center, &idx)?, &g.constant(Tensor::from_vec(&[n, 3], ct)?))?;
        let ds = g.sub(&g.gather_rows(&out.log_size, &idx)?, &g.constant(Tensor::from_vec(&[n, 3], st)?))?;
        (
            g.scale(&g.sum_all(&g.smooth_l1(&dc, beta)), inv),
            g.scale(&g.sum_all(&g.smooth_l1(&ds, beta)), inv),
            g.sum_all(&g.mul(&g.log_softmax(&out.class_logits, 1)?, &g.constant(cw))?),
        )
    };

    let w = &cfg.weights;
    let total = g.add(
        &g.add(&g.scale(&vote, lit(w.vote)), &g.scale(&objectness, lit(w.objectness)))?,
        &g.add(&g.scale(&g.add(&center, &size)?, lit(w.bbox)), &g.scale(&class, lit(w.class)))?,
    )?;
    let f = |v: &Var<T>| v.value().item().to_f64().unwrap();
    let comps = LossComponents {
        total: f(&total),
        vote: f(&vote),
        objectness: f(&objectness),
        center: f(&center),
        size: f(&size),
        class: f(&class),
        positives: positive.len(),
        negatives,
    };
    Ok((total, comps))
}

/// Per-class mean box size over `boxes`; classes without boxes get the
/// mean over all boxes (or unit size when there are none).
pub fn mean_size_anchors(boxes: &[LabeledBox], num_classes: usize) -> Vec<[f64; 3]> {
    let mean = |it: &mut dyn Iterator<Item = &LabeledBox>| {
        let (mut s, mut n) = ([0.0; 3], 0usize);
        for b in it {
            for d in 0..3 {
                s[d] += b.bbox.size[d];
            }
            n += 1;
        }
        (n > 0).then(|| s.map(|v| v / n as f64))
    };
    let overall = mean(&mut boxes.iter()).unwrap_or([1.0; 3]);
    (0..num_classes).map(|c| mean(&mut boxes.iter().filter(|b| b.class == c)).unwrap_or(overall)).collect()
}

/// Registers the `[K, 3]` anchor table as a non-trainable parameter.
pub(crate) fn register_anchors<T: Real>(store: &mut ParamStore<T>, name: &str, k: usize) -> Result<ParamId> {
    store.register(name, Tensor::ones(&[k, 3]), false)
}
