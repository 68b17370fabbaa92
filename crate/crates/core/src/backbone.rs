//! PointNet++-style encoder/decoder with an attention block after every
//! set-abstraction (SA) and feature-propagation (FP) stage.

use std::cmp::Ordering;

use rand::Rng;

use crate::attention::{Attention, AttentionConfig, AttentionKind, DEFAULT_PT_NEIGHBORS, DEFAULT_REDUCTION};
use crate::config::{KeyValues, KvWriter};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{SharedMlp, SharedMlpSpec};
use crate::ops::PoolKind;
use crate::params::ParamStore;
use crate::point_ops::{ball_query, farthest_point_sample, group_features, three_nn_weights, PointSet};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SaConfig {
    pub points: usize,
    pub radius: f64,
    pub neighbors: usize,
    pub mlp: Vec<usize>,
}

impl SaConfig {
    pub fn new(points: usize, radius: f64, neighbors: usize, mlp: &[usize]) -> Self {
        SaConfig { points, radius, neighbors, mlp: mlp.to_vec() }
    }

    pub fn out_channels(&self) -> usize {
        *self.mlp.last().unwrap_or(&0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpConfig {
    pub mlp: Vec<usize>,
}

impl FpConfig {
    pub fn out_channels(&self) -> usize {
        *self.mlp.last().unwrap_or(&0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub sa: Vec<SaConfig>,
    pub fp: Vec<FpConfig>,
    pub attention: AttentionKind,
    pub reduction: usize,
    /// Neighborhood size of the point transformer.
    pub neighbors: usize,
    /// Feed each point's height above the lowest point as an input channel.
    pub height_feature: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl BackboneConfig {
    /// 2048/1024/512/256 centers, widths up to 256, 1024 seeds.
    pub fn standard() -> Self {
        BackboneConfig {
            sa: vec![
                SaConfig::new(2048, 0.2, 64, &[64, 64, 128]),
                SaConfig::new(1024, 0.4, 32, &[128, 128, 256]),
                SaConfig::new(512, 0.8, 16, &[128, 128, 256]),
                SaConfig::new(256, 1.2, 16, &[128, 128, 256]),
            ],
            fp: vec![FpConfig { mlp: vec![256, 256] }, FpConfig { mlp: vec![256, 256] }],
            attention: AttentionKind::None,
            reduction: DEFAULT_REDUCTION,
            neighbors: DEFAULT_PT_NEIGHBORS,
            height_feature: true,
        }
    }

    /// Small profile for tests and desk-scale training: 256/128/64/32
    /// centers, widths at most 32, 128 seeds.
    pub fn toy() -> Self {
        BackboneConfig {
            sa: vec![
                SaConfig::new(256, 0.3, 32, &[16, 16, 32]),
                SaConfig::new(128, 0.6, 16, &[32, 32, 32]),
                SaConfig::new(64, 1.2, 16, &[32, 32, 32]),
                SaConfig::new(32, 2.4, 8, &[32, 32, 32]),
            ],
            fp: vec![FpConfig { mlp: vec![32, 32] }, FpConfig { mlp: vec![32, 32] }],
            attention: AttentionKind::None,
            reduction: DEFAULT_REDUCTION,
            neighbors: DEFAULT_PT_NEIGHBORS,
            height_feature: true,
        }
    }

    pub fn with_attention(mut self, kind: AttentionKind) -> Self {
        self.attention = kind;
        self
    }

    /// Index of the SA level whose centers become the seeds.
    fn seed_level(&self) -> usize {
        self.sa.len() - 1 - self.fp.len()
    }

    pub fn seed_count(&self) -> usize {
        self.sa[self.seed_level()].points
    }

    pub fn seed_channels(&self) -> usize {
        match self.fp.last() {
            Some(f) => f.out_channels(),
            None => self.sa[self.sa.len() - 1].out_channels(),
        }
    }

    /// Per-point feature channels entering the first SA layer.
    pub fn input_channels(&self) -> usize {
        usize::from(self.height_feature)
    }

    /// Fewest input points a forward pass accepts.
    pub fn min_points(&self) -> usize {
        self.sa[0].points
    }

    /// `(points, channels)` at every attention insertion, SA stages first.
    pub fn stage_shapes(&self) -> Vec<(usize, usize)> {
        let s = self.sa.len();
        let mut out: Vec<_> = self.sa.iter().map(|c| (c.points, c.out_channels())).collect();
        for (j, f) in self.fp.iter().enumerate() {
            out.push((self.sa[s - 2 - j].points, f.out_channels()));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.sa.is_empty() {
            return Err(Error::Config("backbone needs at least one SA layer".into()));
        }
        if self.fp.len() >= self.sa.len() {
            return Err(Error::Config(format!("{} FP layers need at least {} SA layers", self.fp.len(), self.fp.len() + 1)));
        }
        for (i, c) in self.sa.iter().enumerate() {
            if c.points == 0 || c.neighbors == 0 || !(c.radius > 0.0) || !c.radius.is_finite() {
                return Err(Error::Config(format!("sa{}: points, neighbors and radius must be positive", i + 1)));
            }
            if c.mlp.is_empty() || c.mlp.contains(&0) {
                return Err(Error::Config(format!("sa{}: MLP widths must be non-empty and >= 1", i + 1)));
            }
            if i > 0 && c.points >= self.sa[i - 1].points {
                return Err(Error::Config(format!(
                    "SA point counts must strictly decrease (sa{} = {}, sa{} = {})",
                    i,
                    self.sa[i - 1].points,
                    i + 1,
                    c.points
                )));
            }
        }
        for (j, f) in self.fp.iter().enumerate() {
            if f.mlp.is_empty() || f.mlp.contains(&0) {
                return Err(Error::Config(format!("fp{}: MLP widths must be non-empty and >= 1", j + 1)));
            }
        }
        if self.attention != AttentionKind::None {
            for (n, c) in self.stage_shapes() {
                self.attention_config(c).validate()?;
                if self.attention == AttentionKind::PointTransformer && self.neighbors > n {
                    return Err(Error::Config(format!(
                        "point transformer neighbors = {} exceeds a stage with {n} points",
                        self.neighbors
                    )));
                }
            }
        }
        Ok(())
    }

    fn attention_config(&self, channels: usize) -> AttentionConfig {
        AttentionConfig::new(channels).with_reduction(self.reduction).with_neighbors(self.neighbors)
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.put("attention", self.attention)
            .put("reduction", self.reduction)
            .put("neighbors", self.neighbors)
            .put("height_feature", self.height_feature);
        for (i, c) in self.sa.iter().enumerate() {
            let p = format!("sa{}", i + 1);
            w.put(&format!("{p}.points"), c.points)
                .put(&format!("{p}.radius"), c.radius)
                .put(&format!("{p}.neighbors"), c.neighbors)
                .put_list(&format!("{p}.mlp"), &c.mlp);
        }
        for (j, f) in self.fp.iter().enumerate() {
            w.put_list(&format!("fp{}.mlp", j + 1), &f.mlp);
        }
    }

    /// Reads the keys written by [`write_kv`](Self::write_kv). Missing
    /// scalar keys fall back to the defaults; stages are read until the first
    /// absent `saN.points` / `fpN.mlp`.
    pub fn read_kv(kv: &KeyValues) -> Result<Self> {
        let mut sa = Vec::new();
        for i in 1.. {
            let p = format!("sa{i}");
            let Some(points) = kv.get(&format!("{p}.points"))? else { break };
            let need = |what: &str| Error::Config(format!("missing `{p}.{what}`"));
            sa.push(SaConfig {
                points,
                radius: kv.get(&format!("{p}.radius"))?.ok_or_else(|| need("radius"))?,
                neighbors: kv.get(&format!("{p}.neighbors"))?.ok_or_else(|| need("neighbors"))?,
                mlp: kv.list(&format!("{p}.mlp"))?.ok_or_else(|| need("mlp"))?,
            });
        }
        let mut fp = Vec::new();
        for j in 1.. {
            let Some(mlp) = kv.list(&format!("fp{j}.mlp"))? else { break };
            fp.push(FpConfig { mlp });
        }
        let cfg = BackboneConfig {
            sa,
            fp,
            attention: kv.get_or("attention", AttentionKind::None)?,
            reduction: kv.get_or("reduction", DEFAULT_REDUCTION)?,
            neighbors: kv.get_or("neighbors", DEFAULT_PT_NEIGHBORS)?,
            height_feature: kv.get_or("height_feature", true)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Coordinates paired with optional per-point features.
#[derive(Clone, Debug)]
pub struct FeatureMap<T: Real = f32> {
    pub coords: Tensor<T>,
    pub features: Option<Var<T>>,
}

impl<T: Real> FeatureMap<T> {
    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.features.as_ref().map_or(0, |f| f.shape()[1])
    }
}

/// Backbone output: seed coordinates, features and the input index of each seed.
#[derive(Clone, Debug)]
pub struct SeedSet<T: Real = f32> {
    pub coords: Tensor<T>,
    pub features: Var<T>,
    pub indices: Vec<usize>,
}

impl<T: Real> SeedSet<T> {
    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct SaLayer {
    pub cfg: SaConfig,
    pub in_channels: usize,
    pub mlp: SharedMlp,
    pub attention: Option<Attention>,
}

impl SaLayer {
    pub fn new<T: Real, R: Rng>(
        cfg: SaConfig,
        in_channels: usize,
        attention: (AttentionKind, AttentionConfig),
        store: &mut ParamStore<T>,
        name: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let mlp = SharedMlp::new(store, &format!("{name}.mlp"), SharedMlpSpec::new(3 + in_channels, &cfg.mlp), rng)?;
        let attention = Attention::build(attention.0, attention.1, store, &format!("{name}.attn"), rng)?;
        Ok(SaLayer { cfg, in_channels, mlp, attention })
    }

    /// Returns the abstracted map and the input indices of its centers.
    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, input: &FeatureMap<T>) -> Result<(FeatureMap<T>, Vec<usize>)> {
        Ok(self.forward_batch(g, &[input])?.remove(0))
    }

    /// Abstracts several point sets; the MLP's batch-norm spans all of them.
    pub fn forward_batch<T: Real>(
        &self,
        g: &Graph<'_, T>,
        inputs: &[&FeatureMap<T>],
    ) -> Result<Vec<(FeatureMap<T>, Vec<usize>)>> {
        let (m, k) = (self.cfg.points, self.cfg.neighbors);
        let radius = T::lit(self.cfg.radius);
        let mut centers = Vec::with_capacity(inputs.len());
        let mut grouped = Vec::with_capacity(inputs.len());
        for input in inputs {
            let n = input.len();
            if n < m {
                return Err(Error::Invalid(format!("set abstraction needs at least {m} points, got {n}")));
            }
            if input.channels() != self.in_channels {
                return Err(Error::Shape {
                    op: "sa_layer",
                    detail: format!("expected {} feature channels, got {}", self.in_channels, input.channels()),
                });
            }
            let idx = farthest_point_sample(&input.coords, m)?;
            let c = gather(&input.coords, &idx);
            let nb = ball_query(&c, &input.coords, radius, k)?;
            grouped.push(group_features(
                g,
                &nb,
                input.features.as_ref(),
                &g.constant(input.coords.clone()),
                &g.constant(c.clone()),
                T::one() / radius,
            )?);
            centers.push((c, idx));
        }
        let c = self.mlp.out_channels();
        let pooled = self
            .mlp
            .forward_batch(g, &grouped)?
            .iter()
            .map(|h| g.reshape(&g.pool(&g.reshape(h, &[m, k, c])?, 1, PoolKind::Max)?, &[m, c]))
            .collect::<Result<Vec<_>>>()?;
        let features = match &self.attention {
            Some(a) => a.forward_batch(g, &pooled, &centers.iter().map(|(c, _)| c).collect::<Vec<_>>())?,
            None => pooled,
        };
        Ok(centers
            .into_iter()
            .zip(features)
            .map(|((coords, idx), f)| (FeatureMap { coords, features: Some(f) }, idx))
            .collect())
    }
}

#[derive(Clone, Debug)]
pub struct FpLayer {
    pub cfg: FpConfig,
    pub coarse_channels: usize,
    pub skip_channels: usize,
    pub mlp: SharedMlp,
    pub attention: Option<Attention>,
}

impl FpLayer {
    pub fn new<T: Real, R: Rng>(
        cfg: FpConfig,
        coarse_channels: usize,
        skip_channels: usize,
        attention: (AttentionKind, AttentionConfig),
        store: &mut ParamStore<T>,
        name: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = SharedMlpSpec::new(coarse_channels + skip_channels, &cfg.mlp);
        let mlp = SharedMlp::new(store, &format!("{name}.mlp"), spec, rng)?;
        let attention = Attention::build(attention.0, attention.1, store, &format!("{name}.attn"), rng)?;
        Ok(FpLayer { cfg, coarse_channels, skip_channels, mlp, attention })
    }

    /// Interpolates `coarse` features onto `fine` and fuses its features.
    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, coarse: &FeatureMap<T>, fine: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        Ok(self.forward_batch(g, &[(coarse, fine)])?.remove(0))
    }

    pub fn forward_batch<T: Real>(
        &self,
        g: &Graph<'_, T>,
        pairs: &[(&FeatureMap<T>, &FeatureMap<T>)],
    ) -> Result<Vec<FeatureMap<T>>> {
        let mut fused = Vec::with_capacity(pairs.len());
        for (coarse, fine) in pairs {
            let Some(cf) = &coarse.features else {
                return Err(Error::Shape { op: "fp_layer", detail: "coarse map has no features".into() });
            };
            if coarse.channels() != self.coarse_channels || fine.channels() != self.skip_channels {
                return Err(Error::Shape {
                    op: "fp_layer",
                    detail: format!(
                        "expected {}+{} channels, got {}+{}",
                        self.coarse_channels,
                        self.skip_channels,
                        coarse.channels(),
                        fine.channels()
                    ),
                });
            }
            let interp = three_nn_weights(&fine.coords, &coarse.coords)?;
            let up = g.combine_rows(cf, &interp.indices, &interp.weights, interp.k)?;
            fused.push(match &fine.features {
                Some(skip) => g.concat(&[&up, skip], 1)?,
                None => up,
            });
        }
        let h = self.mlp.forward_batch(g, &fused)?;
        let coords: Vec<&Tensor<T>> = pairs.iter().map(|(_, f)| &f.coords).collect();
        let features = match &self.attention {
            Some(a) => a.forward_batch(g, &h, &coords)?,
            None => h,
        };
        Ok(coords.into_iter().zip(features).map(|(c, f)| FeatureMap { coords: c.clone(), features: Some(f) }).collect())
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    pub sa: Vec<SaLayer>,
    pub fp: Vec<FpLayer>,
}

impl Backbone {
    /// Registers parameters under `name.saN` / `name.fpN`.
    pub fn new<T: Real, R: Rng>(config: BackboneConfig, store: &mut ParamStore<T>, name: &str, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let kind = config.attention;
        let mut sa = Vec::with_capacity(config.sa.len());
        let mut in_c = config.input_channels();
        for (i, c) in config.sa.iter().enumerate() {
            let att = (kind, config.attention_config(c.out_channels()));
            sa.push(SaLayer::new(c.clone(), in_c, att, store, &format!("{name}.sa{}", i + 1), rng)?);
            in_c = c.out_channels();
        }
        let s = config.sa.len();
        let mut fp = Vec::with_capacity(config.fp.len());
        for (j, f) in config.fp.iter().enumerate() {
            let skip = config.sa[s - 2 - j].out_channels();
            let att = (kind, config.attention_config(f.out_channels()));
            fp.push(FpLayer::new(f.clone(), in_c, skip, att, store, &format!("{name}.fp{}", j + 1), rng)?);
            in_c = f.out_channels();
        }
        Ok(Backbone { config, sa, fp })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Points are first put in lexicographic coordinate order, so the seeds
    /// do not depend on the input order.
    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, points: &PointSet<T>) -> Result<SeedSet<T>> {
        Ok(self.forward_batch(g, &[points])?.remove(0))
    }

    /// Seeds for several scenes; batch-norm statistics span the whole batch.
    pub fn forward_batch<T: Real>(&self, g: &Graph<'_, T>, scenes: &[&PointSet<T>]) -> Result<Vec<SeedSet<T>>> {
        // levels[b][0] is the raw input of scene b; SA level i lives at levels[b][i + 1]
        let mut levels = Vec::with_capacity(scenes.len());
        for points in scenes {
            let n = points.len();
            if n < self.config.min_points() {
                return Err(Error::Invalid(format!("backbone needs at least {} points, got {n}", self.config.min_points())));
            }
            let order = canonical_order(points.tensor());
            let coords = gather(points.tensor(), &order);
            let features = self.config.height_feature.then(|| {
                let floor = (0..n).map(|i| coords.row(i)[2]).fold(T::infinity(), T::min);
                g.constant(Tensor::from_fn(&[n, 1], |i| coords.row(i)[2] - floor))
            });
            levels.push(vec![(FeatureMap { coords, features }, order)]);
        }
        for layer in &self.sa {
            let inputs: Vec<&FeatureMap<T>> = levels.iter().map(|l| &l.last().unwrap().0).collect();
            let outs = layer.forward_batch(g, &inputs)?;
            for (l, (map, idx)) in levels.iter_mut().zip(outs) {
                let origin = idx.iter().map(|&i| l.last().unwrap().1[i]).collect();
                l.push((map, origin));
            }
        }
        let s = self.sa.len();
        let mut current: Vec<FeatureMap<T>> = levels.iter().map(|l| l[s].0.clone()).collect();
        for (j, layer) in self.fp.iter().enumerate() {
            let pairs: Vec<_> = current.iter().zip(&levels).map(|(c, l)| (c, &l[s - 1 - j].0)).collect();
            current = layer.forward_batch(g, &pairs)?;
        }
        let seed_level = s - self.fp.len();
        Ok(current
            .into_iter()
            .zip(levels)
            .map(|(map, l)| SeedSet {
                coords: map.coords,
                features: map.features.expect("SA output carries features"),
                indices: l[seed_level].1.clone(),
            })
            .collect())
    }
}

fn gather<T: Real>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let c = t.cols();
    let mut out = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        out.extend_from_slice(t.row(i));
    }
    Tensor::from_vec(&[idx.len(), c], out).expect("gathered rows")
}

/// Indices sorting the rows lexicographically; equal rows keep input order.
pub fn canonical_order<T: Real>(coords: &Tensor<T>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..coords.rows()).collect();
    idx.sort_by(|&a, &b| {
        let (ra, rb) = (coords.row(a), coords.row(b));
        ra.iter().zip(rb).map(|(x, y)| x.partial_cmp(y).unwrap_or(Ordering::Equal)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
    });
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::oracle::{self, Dense};
    use crate::gradcheck::{check_params, sample_coords};
    use crate::graph::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 3], |_| rng.random_range(0.0..2.0))
    }

    /// 64 points in, 8 seeds out, widths 8.
    fn micro(kind: AttentionKind) -> BackboneConfig {
        BackboneConfig {
            sa: vec![
                SaConfig::new(32, 0.6, 8, &[8, 8]),
                SaConfig::new(16, 1.0, 8, &[8, 8]),
                SaConfig::new(8, 1.5, 4, &[8]),
                SaConfig::new(4, 3.0, 4, &[8]),
            ],
            fp: vec![FpConfig { mlp: vec![8] }, FpConfig { mlp: vec![8] }],
            attention: kind,
            reduction: 2,
            neighbors: 3,
            height_feature: true,
        }
    }

    #[test]
    fn defaults_and_validation() {
        let c = BackboneConfig::standard();
        c.validate().unwrap();
        assert_eq!((c.seed_count(), c.seed_channels()), (1024, 256));
        assert_eq!(BackboneConfig::toy().seed_count(), 128);
        let mut bad = BackboneConfig::toy();
        bad.sa[2].points = 128;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = BackboneConfig::toy().with_attention(AttentionKind::Se);
        bad.reduction = 5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_key_values() {
        let mut c = BackboneConfig::toy().with_attention(AttentionKind::PointTransformer);
        c.neighbors = 8;
        let mut w = KvWriter::default();
        c.write_kv(&mut w);
        let kv = KeyValues::parse(&w.finish(), "bb.txt").unwrap();
        assert_eq!(BackboneConfig::read_kv(&kv).unwrap(), c);
        kv.finish().unwrap();
    }

    #[test]
    fn single_point_abstraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let layer = SaLayer::new(
            SaConfig::new(1, 0.5, 4, &[6]),
            0,
            (AttentionKind::None, AttentionConfig::new(6)),
            &mut store,
            "sa",
            &mut rng,
        )
        .unwrap();
        store.randomize(&mut rng, 0.5);
        let g = Graph::inference(&store);
        let p = Tensor::from_rows(&[[0.3, -0.2, 1.0]]);
        let (out, idx) = layer.forward(&g, &FeatureMap { coords: p.clone(), features: None }).unwrap();
        assert_eq!(idx, vec![0]);
        assert_eq!(out.coords, p);
        let expected = oracle::mlp(&store, &layer.mlp, &Dense(vec![vec![0.0; 3]]));
        assert!(expected.max_diff(out.features.unwrap().value()) < 1e-12);
    }

    #[test]
    fn full_ball_abstraction_ignores_input_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let cfg = SaConfig::new(12, 100.0, 12, &[5, 7]);
        let layer = SaLayer::new(cfg, 2, (AttentionKind::None, AttentionConfig::new(7)), &mut store, "sa", &mut rng).unwrap();
        store.randomize(&mut rng, 0.5);
        let coords = cloud(12, 3);
        let feats = Tensor::from_fn(&[12, 2], |_| rng.random_range(-1.0..1.0));
        let g = Graph::inference(&store);
        let run = |perm: &[usize]| {
            let map = FeatureMap { coords: gather(&coords, perm), features: Some(g.constant(gather(&feats, perm))) };
            let (out, _) = layer.forward(&g, &map).unwrap();
            rows_sorted(&out.coords, out.features.unwrap().value())
        };
        let ident: Vec<usize> = (0..12).collect();
        let rev: Vec<usize> = (0..12).rev().collect();
        let (a, b) = (run(&ident), run(&rev));
        for (x, y) in a.iter().zip(&b) {
            assert!(x.iter().zip(y).all(|(u, v)| (u - v).abs() < 1e-12));
        }
    }

    fn rows_sorted(coords: &Tensor<f64>, feats: &Tensor<f64>) -> Vec<Vec<f64>> {
        let mut rows: Vec<Vec<f64>> =
            (0..coords.rows()).map(|i| coords.row(i).iter().chain(feats.row(i)).copied().collect()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows
    }

    #[test]
    fn abstraction_matches_composed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let (m, k, r) = (8, 5, 0.7);
        let layer = SaLayer::new(
            SaConfig::new(m, r, k, &[6, 4]),
            2,
            (AttentionKind::None, AttentionConfig::new(4)),
            &mut store,
            "sa",
            &mut rng,
        )
        .unwrap();
        store.randomize(&mut rng, 0.5);
        let coords = cloud(32, 5);
        let feats = Tensor::from_fn(&[32, 2], |_| rng.random_range(-1.0..1.0));
        let g = Graph::inference(&store);
        let (out, idx) =
            layer.forward(&g, &FeatureMap { coords: coords.clone(), features: Some(g.constant(feats.clone())) }).unwrap();

        // brute-force farthest point sampling
        let d2 = |a: usize, b: usize| (0..3).map(|d| (coords.at(a, d) - coords.at(b, d)).powi(2)).sum::<f64>();
        let mut chosen = vec![0usize];
        while chosen.len() < m {
            let best = (0..32)
                .map(|i| (chosen.iter().map(|&c| d2(i, c)).fold(f64::INFINITY, f64::min), i))
                .fold((-1.0, 0), |acc, x| if x.0 > acc.0 { x } else { acc });
            chosen.push(best.1);
        }
        assert_eq!(idx, chosen);
        let feat = out.features.unwrap();
        for (q, &c) in chosen.iter().enumerate() {
            let mut ball: Vec<usize> = (0..32).filter(|&i| d2(i, c) < r * r).take(k).collect();
            if ball.is_empty() {
                ball.push(c);
            }
            let rows: Vec<Vec<f64>> = ball
                .iter()
                .map(|&i| {
                    let mut row: Vec<f64> = (0..3).map(|d| (coords.at(i, d) - coords.at(c, d)) / r).collect();
                    row.extend_from_slice(feats.row(i));
                    row
                })
                .collect();
            let h = oracle::mlp(&store, &layer.mlp, &Dense(rows));
            for ch in 0..4 {
                let mx = h.0.iter().map(|row| row[ch]).fold(f64::MIN, f64::max);
                assert!((feat.value().at(q, ch) - mx).abs() < 1e-12);
            }
        }
    }

    fn fp_layer(store: &mut ParamStore<f64>, skip: usize) -> FpLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layer =
            FpLayer::new(FpConfig { mlp: vec![5] }, 3, skip, (AttentionKind::None, AttentionConfig::new(5)), store, "fp", &mut rng)
                .unwrap();
        store.randomize(&mut rng, 0.5);
        layer
    }

    #[test]
    fn propagation_onto_same_points_copies_features() {
        let mut store = ParamStore::<f64>::new();
        let layer = fp_layer(&mut store, 0);
        let coords = cloud(6, 7);
        let feats = Tensor::from_fn(&[6, 3], |i| i as f64 * 0.1 - 0.5);
        let g = Graph::inference(&store);
        let coarse = FeatureMap { coords: coords.clone(), features: Some(g.constant(feats.clone())) };
        let out = layer.forward(&g, &coarse, &FeatureMap { coords, features: None }).unwrap();
        let expected = oracle::mlp(&store, &layer.mlp, &Dense::from_tensor(&feats));
        assert!(expected.max_diff(out.features.unwrap().value()) < 1e-7);
    }

    #[test]
    fn propagation_matches_composed_oracle() {
        let mut store = ParamStore::<f64>::new();
        let layer = fp_layer(&mut store, 2);
        let (coarse_xyz, fine_xyz) = (cloud(5, 8), cloud(9, 9));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cf = Tensor::from_fn(&[5, 3], |_| rng.random_range(-1.0..1.0));
        let skip = Tensor::from_fn(&[9, 2], |_| rng.random_range(-1.0..1.0));
        let g = Graph::inference(&store);
        let coarse = FeatureMap { coords: coarse_xyz.clone(), features: Some(g.constant(cf.clone())) };
        let fine = FeatureMap { coords: fine_xyz.clone(), features: Some(g.constant(skip.clone())) };
        let out = layer.forward(&g, &coarse, &fine).unwrap();

        let mut rows = Vec::new();
        for t in 0..9 {
            let mut d: Vec<(f64, usize)> = (0..5)
                .map(|s| ((0..3).map(|k| (fine_xyz.at(t, k) - coarse_xyz.at(s, k)).powi(2)).sum::<f64>().sqrt(), s))
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let w: Vec<f64> = d[..3].iter().map(|x| 1.0 / (x.0 + 1e-8)).collect();
            let total: f64 = w.iter().sum();
            let mut row: Vec<f64> = (0..3).map(|c| (0..3).map(|j| w[j] / total * cf.at(d[j].1, c)).sum()).collect();
            row.extend_from_slice(skip.row(t));
            rows.push(row);
        }
        let expected = oracle::mlp(&store, &layer.mlp, &Dense(rows));
        assert!(expected.max_diff(out.features.unwrap().value()) < 1e-12);

        // zero skip features: only the interpolated branch matters
        let zero = FeatureMap { coords: fine_xyz.clone(), features: Some(g.constant(Tensor::zeros(&[9, 2]))) };
        let a = layer.forward(&g, &coarse, &zero).unwrap();
        let other = FeatureMap { coords: coarse_xyz, features: Some(g.constant(cf.map(|v| v * 2.0))) };
        let b = layer.forward(&g, &other, &zero).unwrap();
        assert!(a.features.unwrap().value() != b.features.unwrap().value());
    }

    #[test]
    fn se_insertions_add_closed_form_parameter_count() {
        let count = |kind| {
            let mut store = ParamStore::<f32>::new();
            Backbone::new(BackboneConfig::standard().with_attention(kind), &mut store, "bb", &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
            store.num_trainable()
        };
        let r = 8;
        let expected: usize = BackboneConfig::standard()
            .stage_shapes()
            .iter()
            .map(|&(_, c)| 2 * c * c / r + c / r + c)
            .sum();
        assert_eq!(count(AttentionKind::Se) - count(AttentionKind::None), expected);
    }

    #[test]
    fn no_attention_registers_no_attention_parameters() {
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(BackboneConfig::toy(), &mut store, "bb", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(store.iter().all(|(_, p)| !p.name().contains("attn")));
        assert!(bb.sa.iter().all(|l| l.attention.is_none()) && bb.fp.iter().all(|l| l.attention.is_none()));
    }

    #[test]
    fn seeds_ignore_input_order_and_count_is_fixed() {
        for kind in [AttentionKind::None, AttentionKind::PointTransformer] {
            let mut store = ParamStore::<f64>::new();
            let bb = Backbone::new(micro(kind), &mut store, "bb", &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
            let pts = cloud(64, 12);
            let mut perm: Vec<usize> = (0..64).collect();
            perm.reverse();
            perm.swap(3, 40);
            let g = Graph::inference(&store);
            let a = bb.forward(&g, &PointSet::new(pts.clone()).unwrap()).unwrap();
            let b = bb.forward(&g, &PointSet::new(gather(&pts, &perm)).unwrap()).unwrap();
            assert_eq!(a.len(), 16);
            assert_eq!(rows_sorted(&a.coords, a.features.value()), rows_sorted(&b.coords, b.features.value()));
            for (s, &i) in a.indices.iter().enumerate() {
                assert_eq!(a.coords.row(s), pts.row(i));
            }
            assert!(bb.forward(&g, &PointSet::new(cloud(31, 1)).unwrap()).is_err());
        }
    }

    #[test]
    fn first_layer_gradient_matches_finite_differences() {
        for kind in [AttentionKind::None, AttentionKind::Se] {
            let mut store = ParamStore::<f64>::new();
            let bb = Backbone::new(micro(kind), &mut store, "bb", &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
            let pts = PointSet::new(cloud(64, 14)).unwrap();
            let w = Tensor::from_fn(&[16, 8], |i| ((i * 7) % 11) as f64 / 11.0 - 0.5);
            let first = store.id("bb.sa1.mlp.0.weight").unwrap();
            let coords: Vec<_> = (0..store.value(first).len()).map(|i| (first, i)).collect();
            let mut more = sample_coords(&store, 0.05, &mut ChaCha8Rng::seed_from_u64(15));
            more.extend(coords);
            let err = check_params(&store, Mode::Train, &more, 1e-5, |g| {
                let s = bb.forward(g, &pts)?;
                Ok(g.sum_all(&g.mul(&s.features, &g.constant(w.clone()))?))
            });
            assert!(err < 1e-4, "{kind}: relative error {err}");
        }
    }
}
