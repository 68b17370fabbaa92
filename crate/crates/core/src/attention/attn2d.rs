//! Image-derived attention blocks under the `H×W = N×1` mapping.

use rand::Rng;

use super::{check_input, gate_by, projection, scalar_gate, AttentionConfig, MapSink};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::{SharedMlp, SharedMlpSpec};
use crate::ops::PoolKind;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Real;

/// Embedded-Gaussian non-local block: `y = x + W_z(softmax(θ(x)·φ(x)ᵀ)·g(x))`.
///
/// `W_z` starts at zero, so a fresh block is the identity.
#[derive(Clone, Debug)]
pub struct NonLocal {
    pub cfg: AttentionConfig,
    pub theta: SharedMlp,
    pub phi: SharedMlp,
    pub value: SharedMlp,
    pub out: SharedMlp,
}

impl NonLocal {
    pub fn new<T: Real, R: Rng>(cfg: AttentionConfig, store: &mut ParamStore<T>, name: &str, rng: &mut R) -> Result<Self> {
        let (c, d) = (cfg.channels, cfg.reduced());
        let m = NonLocal {
            cfg,
            theta: projection(store, &format!("{name}.theta"), c, d, rng)?,
            phi: projection(store, &format!("{name}.phi"), c, d, rng)?,
            value: projection(store, &format!("{name}.g"), c, d, rng)?,
            out: projection(store, &format!("{name}.w_z"), d, c, rng)?,
        };
        store.fill_prefix(&format!("{name}.w_z."), T::zero());
        Ok(m)
    }

    pub(crate) fn run<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>, mut maps: MapSink<'_, T>) -> Result<Var<T>> {
        check_input("nonlocal", x, self.cfg.channels)?;
        let q = self.theta.forward(g, x)?;
        let k = self.phi.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let a = g.softmax(&g.matmul_nt(&q, &k)?, 1)?;
        maps.push("point", &a);
        let z = self.out.forward(g, &g.matmul(&a, &v)?)?;
        g.add(x, &z)
    }
}

/// Criss-cross attention. With a width-1 layout the criss-cross path of a
/// point is its whole column plus itself, so this is one pass of full column
/// attention with the self position counted once: `y = x + γ·softmax(QKᵀ)·V`.
#[derive(Clone, Debug)]
pub struct CrissCross {
    pub cfg: AttentionConfig,
    pub query: SharedMlp,
    pub key: SharedMlp,
    pub value: SharedMlp,
    pub gamma: ParamId,
}

impl CrissCross {
    pub fn new<T: Real, R: Rng>(cfg: AttentionConfig, store: &mut ParamStore<T>, name: &str, rng: &mut R) -> Result<Self> {
        let (c, d) = (cfg.channels, cfg.reduced());
        Ok(CrissCross {
            cfg,
            query: projection(store, &format!("{name}.query"), c, d, rng)?,
            key: projection(store, &format!("{name}.key"), c, d, rng)?,
            value: projection(store, &format!("{name}.value"), c, c, rng)?,
            gamma: scalar_gate(store, &format!("{name}.gamma"))?,
        })
    }

    pub(crate) fn run<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>, mut maps: MapSink<'_, T>) -> Result<Var<T>> {
        check_input("crisscross", x, self.cfg.channels)?;
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let a = g.softmax(&g.matmul_nt(&q, &k)?, 1)?;
        maps.push("point", &a);
        let ctx = g.matmul(&a, &v)?;
        g.add(x, &gate_by(g, &ctx, &g.param(self.gamma))?)
    }
}

/// Squeeze-and-excitation: mean-pool over points, bottleneck MLP, sigmoid
/// channel gate.
#[derive(Clone, Debug)]
pub struct SqueezeExcitation {
    pub cfg: AttentionConfig,
    pub excite: SharedMlp,
}

impl SqueezeExcitation {
    pub fn new<T: Real, R: Rng>(cfg: AttentionConfig, store: &mut ParamStore<T>, name: &str, rng: &mut R) -> Result<Self> {
        let (c, d) = (cfg.channels, cfg.reduced());
        let excite = SharedMlp::new(store, &format!("{name}.fc"), SharedMlpSpec::plain(c, &[d, c]), rng)?;
        Ok(SqueezeExcitation { cfg, excite })
    }

    pub(crate) fn run<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>, mut maps: MapSink<'_, T>) -> Result<Var<T>> {
        let n = check_input("se", x, self.cfg.channels)?;
        let s = g.pool(x, 0, PoolKind::Mean)?;
        let e = g.sigmoid(&self.excite.forward(g, &s)?);
        maps.push("channel_gate", &e);
        g.mul(x, &g.expand(&e, 0, n)?)
    }
}

/// CBAM: channel gate from average- and max-pooled descriptors through a
/// shared bottleneck, then a spatial gate from per-point channel statistics.
#[derive(Clone, Debug)]
pub struct Cbam {
    pub cfg: AttentionConfig,
    pub channel_mlp: SharedMlp,
    pub spatial: SharedMlp,
}

impl Cbam {
    pub fn new<T: Real, R: Rng>(cfg: AttentionConfig, store: &mut ParamStore<T>, name: &str, rng: &mut R) -> Result<Self> {
        let (c, d) = (cfg.channels, cfg.reduced());
        Ok(Cbam {
            cfg,
            channel_mlp: SharedMlp::new(store, &format!("{name}.channel"), SharedMlpSpec::plain(c, &[d, c]), rng)?,
            spatial: projection(store, &format!("{name}.spatial"), 2, 1, rng)?,
        })
    }

    pub(crate) fn run<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>, mut maps: MapSink<'_, T>) -> Result<Var<T>> {
        let n = check_input("cbam", x, self.cfg.channels)?;
        let c = self.cfg.channels;
        let avg = g.pool(x, 0, PoolKind::Mean)?;
        let max = g.pool(x, 0, PoolKind::Max)?;
        let both = self.channel_mlp.forward(g, &g.concat(&[&avg, &max], 0)?)?;
        let mc = g.sigmoid(&g.sum_axis(&both, 0)?);
        maps.push("channel_gate", &mc);
        let xc = g.mul(x, &g.expand(&mc, 0, n)?)?;

        let avg = g.pool(&xc, 1, PoolKind::Mean)?;
        let max = g.pool(&xc, 1, PoolKind::Max)?;
        let ms = g.sigmoid(&self.spatial.forward(g, &g.concat(&[&avg, &max], 1)?)?);
        maps.push("spatial_gate", &ms);
        g.mul(&xc, &g.expand(&ms, 1, c)?)
    }
}

/// Dual attention: a position branch (`N×N`) and a channel branch
/// (`softmax(xᵀx)`, `C×C`) summed onto the input with zero-initialized gates.
#[derive(Clone, Debug)]
pub struct DualAttention {
    pub cfg: AttentionConfig,
    pub query: SharedMlp,
    pub key: SharedMlp,
    pub value: SharedMlp,
    pub alpha: ParamId,
    pub beta: ParamId,
}

impl DualAttention {
    pub fn new<T: Real, R: Rng>(cfg: AttentionConfig, store: &mut ParamStore<T>, name: &str, rng: &mut R) -> Result<Self> {
        let (c, d) = (cfg.channels, cfg.reduced());
        Ok(DualAttention {
            cfg,
            query: projection(store, &format!("{name}.query"), c, d, rng)?,
            key: projection(store, &format!("{name}.key"), c, d, rng)?,
            value: projection(store, &format!("{name}.value"), c, c, rng)?,
            alpha: scalar_gate(store, &format!("{name}.alpha"))?,
            beta: scalar_gate(store, &format!("{name}.beta"))?,
        })
    }

    pub(crate) fn run<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>, mut maps: MapSink<'_, T>) -> Result<Var<T>> {
        check_input("dual", x, self.cfg.channels)?;
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let pos_map = g.softmax(&g.matmul_nt(&q, &k)?, 1)?;
        maps.push("point", &pos_map);
        let pos = g.matmul(&pos_map, &v)?;
        drop(pos_map);

        let ch_map = g.softmax(&g.matmul_tn(x, x)?, 1)?;
        maps.push("channel", &ch_map);
        let ch = g.matmul_nt(x, &ch_map)?;

        let y = g.add(x, &gate_by(g, &pos, &g.param(self.alpha))?)?;
        g.add(&y, &gate_by(g, &ch, &g.param(self.beta))?)
    }
}
