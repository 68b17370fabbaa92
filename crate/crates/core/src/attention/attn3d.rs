//! Point-native attention blocks.

use rand::Rng;

use super::{check_input, gate_by, projection, scalar_gate, AttentionConfig, MapSink};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Linear, SharedMlp, SharedMlpSpec};
use crate::ops::PoolKind;
use crate::params::{ParamId, ParamStore};
use crate::point_ops::knn;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Shape-context attention: `y = softmax(QKᵀ)·V + V` with a full-width value.
#[derive(Clone, Debug)]
pub struct Ascn {
    pub cfg: AttentionConfig,
    pub query: SharedMlp,
    pub key: SharedMlp,
    pub value: SharedMlp,
}

impl Ascn {
    pub fn new<T: Real, R: Rng>(cfg: AttentionConfig, store: &mut ParamStore<T>, name: &str, rng: &mut R) -> Result<Self> {
        let (c, d) = (cfg.channels, cfg.reduced());
        Ok(Ascn {
            cfg,
            query: projection(store, &format!("{name}.query"), c, d, rng)?,
            key: projection(store, &format!("{name}.key"), c, d, rng)?,
            value: projection(store, &format!("{name}.value"), c, c, rng)?,
        })
    }

    pub(crate) fn run<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>, mut maps: MapSink<'_, T>) -> Result<Var<T>> {
        check_input("ascn", x, self.cfg.channels)?;
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let a = g.softmax(&g.matmul_nt(&q, &k)?, 1)?;
        maps.push("point", &a);
        g.add(&g.matmul(&a, &v)?, &v)
    }
}

/// Global scaled dot-product self-attention with an input skip:
/// `y = x + softmax(QKᵀ/√d)·V`.
#[derive(Clone, Debug)]
pub struct PointAttention {
    pub cfg: AttentionConfig,
    pub query: SharedMlp,
    pub key: SharedMlp,
    pub value: SharedMlp,
}

impl PointAttention {
    pub fn new<T: Real, R: Rng>(cfg: AttentionConfig, store: &mut ParamStore<T>, name: &str, rng: &mut R) -> Result<Self> {
        let (c, d) = (cfg.channels, cfg.reduced());
        Ok(PointAttention {
            cfg,
            query: projection(store, &format!("{name}.query"), c, d, rng)?,
            key: projection(store, &format!("{name}.key"), c, d, rng)?,
            value: projection(store, &format!("{name}.value"), c, c, rng)?,
        })
    }

    pub(crate) fn run<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>, mut maps: MapSink<'_, T>) -> Result<Var<T>> {
        check_input("point_attn", x, self.cfg.channels)?;
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let scale = T::one() / T::lit(self.cfg.reduced() as f64).sqrt();
        let a = g.softmax(&g.scale(&g.matmul_nt(&q, &k)?, scale), 1)?;
        maps.push("point", &a);
        g.add(x, &g.matmul(&a, &v)?)
    }
}

/// Channel affinity attention. A channel similarity `S = φ(x)ᵀψ(x)/N` is
/// turned into an affinity `R = softmax(rowmax(S) − S)` that favors
/// dissimilar channels; `y = x + γ·x·Rᵀ` with `γ` starting at zero.
#[derive(Clone, Debug)]
pub struct ChannelAffinity {
    pub cfg: AttentionConfig,
    pub query: SharedMlp,
    pub key: SharedMlp,
    pub gamma: ParamId,
}

impl ChannelAffinity {
    pub fn new<T: Real, R: Rng>(cfg: AttentionConfig, store: &mut ParamStore<T>, name: &str, rng: &mut R) -> Result<Self> {
        let c = cfg.channels;
        Ok(ChannelAffinity {
            cfg,
            query: projection(store, &format!("{name}.query"), c, c, rng)?,
            key: projection(store, &format!("{name}.key"), c, c, rng)?,
            gamma: scalar_gate(store, &format!("{name}.gamma"))?,
        })
    }

    pub(crate) fn run<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>, mut maps: MapSink<'_, T>) -> Result<Var<T>> {
        let n = check_input("caa", x, self.cfg.channels)?;
        let c = self.cfg.channels;
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let sim = g.scale(&g.matmul_tn(&q, &k)?, T::one() / T::lit(n as f64));
        maps.push("similarity", &sim);
        let row_max = g.expand(&g.pool(&sim, 1, PoolKind::Max)?, 1, c)?;
        let affinity = g.softmax(&g.sub(&row_max, &sim)?, 1)?;
        maps.push("affinity", &affinity);
        let out = g.matmul_nt(x, &affinity)?;
        g.add(x, &gate_by(g, &out, &g.param(self.gamma))?)
    }
}

/// Offset attention: `F = M·V` where `M` is the attention map after softmax
/// over keys and L1 normalization over queries, then
/// `y = x + LBR(x − F)` with LBR = linear, batch-norm, ReLU.
#[derive(Clone, Debug)]
pub struct OffsetAttention {
    pub cfg: AttentionConfig,
    pub query: SharedMlp,
    pub key: SharedMlp,
    pub value: SharedMlp,
    pub offset: SharedMlp,
}

impl OffsetAttention {
    pub fn new<T: Real, R: Rng>(cfg: AttentionConfig, store: &mut ParamStore<T>, name: &str, rng: &mut R) -> Result<Self> {
        let (c, d) = (cfg.channels, cfg.reduced());
        Ok(OffsetAttention {
            cfg,
            query: projection(store, &format!("{name}.query"), c, d, rng)?,
            key: projection(store, &format!("{name}.key"), c, d, rng)?,
            value: projection(store, &format!("{name}.value"), c, c, rng)?,
            offset: SharedMlp::new(store, &format!("{name}.offset"), SharedMlpSpec::new(c, &[c]), rng)?,
        })
    }

    pub(crate) fn run<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>, maps: MapSink<'_, T>) -> Result<Var<T>> {
        let f = self.aggregate(g, x, maps)?;
        let off = self.offset.forward(g, &g.sub(x, &f)?)?;
        g.add(x, &off)
    }

    /// Several sets at once; the offset MLP normalizes over all of them.
    pub(crate) fn run_batch<T: Real>(&self, g: &Graph<'_, T>, xs: &[Var<T>]) -> Result<Vec<Var<T>>> {
        let diffs = xs
            .iter()
            .map(|x| g.sub(x, &self.aggregate(g, x, MapSink(None))?))
            .collect::<Result<Vec<_>>>()?;
        let offs = self.offset.forward_batch(g, &diffs)?;
        xs.iter().zip(&offs).map(|(x, o)| g.add(x, o)).collect()
    }

    fn aggregate<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>, mut maps: MapSink<'_, T>) -> Result<Var<T>> {
        let n = check_input("offset_attn", x, self.cfg.channels)?;
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        // rows: queries, columns: keys
        let a = g.softmax(&g.matmul_nt(&q, &k)?, 1)?;
        let f = if self.cfg.offset_dual_norm {
            let col = g.add_scalar(&g.sum_axis(&a, 0)?, T::lit(1e-9));
            let a = g.div(&a, &g.expand(&col, 0, n)?)?;
            if maps.wants() {
                maps.push("point", &g.transpose(&a)?);
            }
            g.matmul_tn(&a, &v)?
        } else {
            maps.push("point", &a);
            g.matmul(&a, &v)?
        };
        Ok(f)
    }
}

/// Vector self-attention over `k` nearest neighbors with a relative-position
/// encoding `δ = MLP(pᵢ − pⱼ)`:
/// `yᵢ = xᵢ + Σⱼ softmaxⱼ(γ(φ(xᵢ) − ψ(xⱼ) + δ)) ⊙ (α(xⱼ) + δ)`.
#[derive(Clone, Debug)]
pub struct PointTransformer {
    pub cfg: AttentionConfig,
    pub phi: Linear,
    pub psi: Linear,
    pub alpha: Linear,
    pub position: SharedMlp,
    pub weight: SharedMlp,
}

impl PointTransformer {
    pub fn new<T: Real, R: Rng>(cfg: AttentionConfig, store: &mut ParamStore<T>, name: &str, rng: &mut R) -> Result<Self> {
        let (c, d) = (cfg.channels, cfg.reduced());
        Ok(PointTransformer {
            cfg,
            phi: Linear::new(store, &format!("{name}.phi"), c, c, rng)?,
            psi: Linear::new(store, &format!("{name}.psi"), c, c, rng)?,
            alpha: Linear::new(store, &format!("{name}.alpha"), c, c, rng)?,
            position: SharedMlp::new(store, &format!("{name}.pos"), SharedMlpSpec::plain(3, &[c, c]), rng)?,
            weight: SharedMlp::new(store, &format!("{name}.gamma"), SharedMlpSpec::plain(c, &[d, c]), rng)?,
        })
    }

    pub(crate) fn run<T: Real>(
        &self,
        g: &Graph<'_, T>,
        x: &Var<T>,
        coords: &Tensor<T>,
        mut maps: MapSink<'_, T>,
    ) -> Result<Var<T>> {
        let n = check_input("point_transformer", x, self.cfg.channels)?;
        let (c, k) = (self.cfg.channels, self.cfg.neighbors);
        if coords.shape() != [n, 3] {
            return Err(Error::Shape {
                op: "point_transformer",
                detail: format!("{n} points but coordinates {:?}", coords.shape()),
            });
        }
        if k > n {
            return Err(Error::Invalid(format!("point transformer needs k <= N (k = {k}, N = {n})")));
        }
        let nb = knn(coords, coords, k)?;
        let centers: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let mut rel = Vec::with_capacity(n * k * 3);
        for (&i, &j) in centers.iter().zip(nb.flat()) {
            let (pi, pj) = (coords.row(i), coords.row(j));
            rel.extend((0..3).map(|d| pi[d] - pj[d]));
        }
        let delta = self.position.forward(g, &g.constant(Tensor::from_vec(&[n * k, 3], rel)?))?;

        let phi_i = g.gather_rows(&self.phi.forward(g, x)?, &centers)?;
        let psi_j = g.gather_rows(&self.psi.forward(g, x)?, nb.flat())?;
        let alpha_j = g.gather_rows(&self.alpha.forward(g, x)?, nb.flat())?;

        let rel_feat = g.add(&g.sub(&phi_i, &psi_j)?, &delta)?;
        let logits = g.reshape(&self.weight.forward(g, &rel_feat)?, &[n, k, c])?;
        let w = g.softmax(&logits, 1)?;
        maps.push("neighbor_weights", &w);
        let vals = g.reshape(&g.add(&alpha_j, &delta)?, &[n, k, c])?;
        let agg = g.reshape(&g.sum_axis(&g.mul(&w, &vals)?, 1)?, &[n, c])?;
        g.add(x, &agg)
    }
}

#[cfg(test)]
mod tests {
    use super::super::oracle::{self, Dense};
    use super::super::{Attention, AttentionKind};
    use super::*;
    use crate::gradcheck::{all_coords, check_params};
    use crate::graph::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(kind: AttentionKind, cfg: AttentionConfig, seed: u64) -> (ParamStore<f64>, Attention) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let m = Attention::build(kind, cfg, &mut store, "attn", &mut rng).unwrap().unwrap();
        store.randomize(&mut ChaCha8Rng::seed_from_u64(seed + 100), 0.5);
        (store, m)
    }

    fn input(n: usize, c: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, c], |_| rng.random_range(-1.0..1.0))
    }

    fn run(store: &ParamStore<f64>, m: &Attention, x: &Tensor<f64>, coords: &Tensor<f64>) -> (Tensor<f64>, super::super::AttentionMaps<f64>) {
        let g = Graph::inference(store);
        let (y, maps) = m.forward_with_maps(&g, &g.constant(x.clone()), coords).unwrap();
        (y.value().clone(), maps)
    }

    fn dense_linear(store: &ParamStore<f64>, l: &Linear, x: &Dense) -> Dense {
        let b = store.value(l.bias).data().to_vec();
        let mut h = x.matmul(&Dense::from_tensor(store.value(l.weight)));
        for r in &mut h.0 {
            for (v, bb) in r.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        h
    }

    #[test]
    fn ascn_matches_dense_oracle() {
        let (store, m) = setup(AttentionKind::Ascn, AttentionConfig::new(8).with_reduction(2), 1);
        let x = input(5, 8, 2);
        let (y, maps) = run(&store, &m, &x, &Tensor::zeros(&[5, 3]));
        let Attention::Ascn(a) = &m else { unreachable!() };
        let xd = Dense::from_tensor(&x);
        let att = oracle::softmax_rows(&oracle::linear(&store, &a.query, &xd).matmul(&oracle::linear(&store, &a.key, &xd).t()));
        let v = oracle::linear(&store, &a.value, &xd);
        assert!(att.max_diff(maps.get("point").unwrap()) < 1e-12);
        assert!(att.matmul(&v).add(&v).max_diff(&y) < 1e-12);
    }

    #[test]
    fn point_attention_oracle_and_identity() {
        let (mut store, m) = setup(AttentionKind::PointAttn, AttentionConfig::new(8).with_reduction(2), 3);
        let x = input(6, 8, 4);
        let coords = Tensor::zeros(&[6, 3]);
        let Attention::PointAttn(p) = &m else { unreachable!() };
        let xd = Dense::from_tensor(&x);
        let logits = oracle::linear(&store, &p.query, &xd).matmul(&oracle::linear(&store, &p.key, &xd).t());
        let att = oracle::softmax_rows(&logits.scale(1.0 / 4f64.sqrt()));
        let expected = xd.add(&att.matmul(&oracle::linear(&store, &p.value, &xd)));
        let (y, maps) = run(&store, &m, &x, &coords);
        assert!(expected.max_diff(&y) < 1e-12);
        for r in 0..6 {
            assert!((maps.get("point").unwrap().row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        store.fill_prefix("attn.value.", 0.0);
        assert_eq!(run(&store, &m, &x, &coords).0, x);
    }

    #[test]
    fn caa_starts_as_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let m = Attention::build(AttentionKind::Caa, AttentionConfig::new(8), &mut store, "attn", &mut rng).unwrap().unwrap();
        let x = input(7, 8, 6);
        assert_eq!(run(&store, &m, &x, &Tensor::zeros(&[7, 3])).0, x);
    }

    #[test]
    fn caa_affinity_favors_dissimilar_channels() {
        let (store, m) = setup(AttentionKind::Caa, AttentionConfig::new(8), 7);
        let x = input(9, 8, 8);
        let (y, maps) = run(&store, &m, &x, &Tensor::zeros(&[9, 3]));
        let sim = maps.get("similarity").unwrap();
        let aff = maps.get("affinity").unwrap();
        assert_eq!(aff.shape(), &[8, 8]);
        for r in 0..8 {
            let row = aff.row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let srow = sim.row(r);
            for a in 0..8 {
                for b in 0..8 {
                    if srow[a] < srow[b] {
                        assert!(row[a] >= row[b]);
                    }
                }
            }
        }
        let Attention::Caa(c) = &m else { unreachable!() };
        let xd = Dense::from_tensor(&x);
        let s = oracle::linear(&store, &c.query, &xd).t().matmul(&oracle::linear(&store, &c.key, &xd)).scale(1.0 / 9.0);
        assert!(s.max_diff(sim) < 1e-12);
        let r = oracle::softmax_rows(&Dense(
            s.0.iter().map(|row| {
                let m = row.iter().copied().fold(f64::MIN, f64::max);
                row.iter().map(|v| m - v).collect()
            }).collect(),
        ));
        let gamma = store.value(c.gamma).item();
        assert!(xd.add(&xd.matmul(&r.t()).scale(gamma)).max_diff(&y) < 1e-12);
    }

    #[test]
    fn offset_map_is_row_stochastic_and_matches_oracle() {
        let (store, m) = setup(AttentionKind::OffsetAttn, AttentionConfig::new(8).with_reduction(2), 9);
        let x = input(6, 8, 10);
        let (y, maps) = run(&store, &m, &x, &Tensor::zeros(&[6, 3]));
        let map = maps.get("point").unwrap();
        for r in 0..6 {
            let s: f64 = map.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row {r} sums to {s}");
        }
        let Attention::OffsetAttn(o) = &m else { unreachable!() };
        let xd = Dense::from_tensor(&x);
        let a = oracle::softmax_rows(&oracle::linear(&store, &o.query, &xd).matmul(&oracle::linear(&store, &o.key, &xd).t()));
        let col: Vec<f64> = (0..6).map(|j| a.0.iter().map(|r| r[j]).sum::<f64>() + 1e-9).collect();
        let norm = Dense(a.0.iter().map(|r| r.iter().zip(&col).map(|(v, s)| v / s).collect()).collect());
        assert!(norm.t().max_diff(map) < 1e-12);
        let f = norm.t().matmul(&oracle::linear(&store, &o.value, &xd));
        let expected = xd.add(&oracle::mlp(&store, &o.offset, &xd.sub(&f)));
        assert!(expected.max_diff(&y) < 1e-12);
    }

    #[test]
    fn offset_identity_when_offset_branch_is_zero() {
        for dual in [true, false] {
            let mut cfg = AttentionConfig::new(8).with_reduction(2);
            cfg.offset_dual_norm = dual;
            let (mut store, m) = setup(AttentionKind::OffsetAttn, cfg, 11);
            store.fill_prefix("attn.offset.", 0.0);
            let x = input(5, 8, 12);
            let (y, maps) = run(&store, &m, &x, &Tensor::zeros(&[5, 3]));
            assert_eq!(y, x);
            if !dual {
                for r in 0..5 {
                    assert!((maps.get("point").unwrap().row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    fn coords(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 3], |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn point_transformer_matches_nested_loop_oracle() {
        let (n, c, k) = (7, 8, 3);
        let (store, m) = setup(AttentionKind::PointTransformer, AttentionConfig::new(c).with_reduction(2).with_neighbors(k), 13);
        let x = input(n, c, 14);
        let p = coords(n, 15);
        let (y, maps) = run(&store, &m, &x, &p);
        assert_eq!(maps.get("neighbor_weights").unwrap().shape(), &[n, k, c]);

        let Attention::PointTransformer(pt) = &m else { unreachable!() };
        let xd = Dense::from_tensor(&x);
        let (phi, psi, alpha) = (dense_linear(&store, &pt.phi, &xd), dense_linear(&store, &pt.psi, &xd), dense_linear(&store, &pt.alpha, &xd));
        for i in 0..n {
            // brute-force k nearest, ties by index
            let mut order: Vec<(f64, usize)> = (0..n)
                .map(|j| ((0..3).map(|d| (p.at(i, d) - p.at(j, d)).powi(2)).sum(), j))
                .collect();
            order.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let nbrs: Vec<usize> = order[..k].iter().map(|o| o.1).collect();
            let deltas: Vec<Vec<f64>> = nbrs
                .iter()
                .map(|&j| oracle::mlp(&store, &pt.position, &Dense(vec![(0..3).map(|d| p.at(i, d) - p.at(j, d)).collect()])).0.remove(0))
                .collect();
            let logits: Vec<Vec<f64>> = nbrs
                .iter()
                .zip(&deltas)
                .map(|(&j, dl)| {
                    let h: Vec<f64> = (0..c).map(|ch| phi.0[i][ch] - psi.0[j][ch] + dl[ch]).collect();
                    oracle::mlp(&store, &pt.weight, &Dense(vec![h])).0.remove(0)
                })
                .collect();
            for ch in 0..c {
                let w = oracle::softmax(&logits.iter().map(|l| l[ch]).collect::<Vec<_>>());
                let agg: f64 = (0..k).map(|t| w[t] * (alpha.0[nbrs[t]][ch] + deltas[t][ch])).sum();
                assert!((y.at(i, ch) - (x.at(i, ch) + agg)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn point_transformer_single_neighbor_and_translation() {
        let (n, c) = (6, 8);
        let (store, m) = setup(AttentionKind::PointTransformer, AttentionConfig::new(c).with_reduction(2).with_neighbors(1), 16);
        let Attention::PointTransformer(pt) = &m else { unreachable!() };
        let x = input(n, c, 17);
        let p = coords(n, 18);
        // k = 1: each point attends to itself with weight 1.
        let xd = Dense::from_tensor(&x);
        let d0 = oracle::mlp(&store, &pt.position, &Dense(vec![vec![0.0; 3]])).0.remove(0);
        let alpha = dense_linear(&store, &pt.alpha, &xd);
        let expected = Dense((0..n).map(|i| (0..c).map(|ch| xd.0[i][ch] + alpha.0[i][ch] + d0[ch]).collect()).collect());
        assert!(expected.max_diff(&run(&store, &m, &x, &p).0) < 1e-12);

        let (store, m) = setup(AttentionKind::PointTransformer, AttentionConfig::new(c).with_reduction(2).with_neighbors(4), 19);
        let shifted = p.map(|v| v + 3.25);
        let a = run(&store, &m, &x, &p).0;
        let b = run(&store, &m, &x, &shifted).0;
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn point_transformer_rejects_too_many_neighbors() {
        let (store, m) = setup(AttentionKind::PointTransformer, AttentionConfig::new(8).with_neighbors(16), 20);
        let g = Graph::inference(&store);
        let err = m.forward(&g, &g.constant(input(5, 8, 21)), &coords(5, 22));
        assert!(matches!(err, Err(Error::Invalid(_))));
        assert!(m.forward(&g, &g.constant(input(5, 8, 21)), &coords(4, 22)).is_err());
    }

    #[test]
    fn gradient_checks() {
        for kind in [
            AttentionKind::Ascn,
            AttentionKind::PointAttn,
            AttentionKind::Caa,
            AttentionKind::OffsetAttn,
            AttentionKind::PointTransformer,
        ] {
            let (store, m) = setup(kind, AttentionConfig::new(8).with_reduction(2).with_neighbors(3), 30);
            let x = input(6, 8, 32);
            let w = input(6, 8, 33);
            let p = coords(6, 34);
            let all = all_coords(&store);
            let err = check_params(&store, Mode::Train, &all, 1e-5, |g| {
                let y = m.forward(g, &g.constant(x.clone()), &p)?;
                Ok(g.sum_all(&g.mul(&y, &g.constant(w.clone()))?))
            });
            assert!(err < 1e-4, "{kind}: relative error {err}");
        }
    }
}
