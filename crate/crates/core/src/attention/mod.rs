//! Attention modules with a uniform `N×C → N×C` contract.
//!
//! Image attentions are carried over to point sets by treating the `N`
//! points as an `N×1` image, with every 1×1 convolution replaced by a shared
//! MLP. Only the point transformer consumes coordinates.

pub mod attn2d;
pub mod attn3d;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{SharedMlp, SharedMlpSpec};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub use attn2d::{Cbam, CrissCross, DualAttention, NonLocal, SqueezeExcitation};
pub use attn3d::{Ascn, ChannelAffinity, OffsetAttention, PointAttention, PointTransformer};

pub const DEFAULT_REDUCTION: usize = 8;
pub const DEFAULT_PT_NEIGHBORS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    None,
    NonLocal,
    CrissCross,
    Se,
    Cbam,
    Dual,
    Ascn,
    PointAttn,
    Caa,
    OffsetAttn,
    PointTransformer,
}

impl AttentionKind {
    /// The ten attention modules, image-derived first.
    pub const ALL: [AttentionKind; 10] = [
        AttentionKind::NonLocal,
        AttentionKind::CrissCross,
        AttentionKind::Se,
        AttentionKind::Cbam,
        AttentionKind::Dual,
        AttentionKind::Ascn,
        AttentionKind::PointAttn,
        AttentionKind::Caa,
        AttentionKind::OffsetAttn,
        AttentionKind::PointTransformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::None => "none",
            AttentionKind::NonLocal => "nonlocal",
            AttentionKind::CrissCross => "crisscross",
            AttentionKind::Se => "se",
            AttentionKind::Cbam => "cbam",
            AttentionKind::Dual => "dual",
            AttentionKind::Ascn => "ascn",
            AttentionKind::PointAttn => "point_attn",
            AttentionKind::Caa => "caa",
            AttentionKind::OffsetAttn => "offset_attn",
            AttentionKind::PointTransformer => "point_transformer",
        }
    }

    /// Attends over the point axis (builds an `N×N` or neighborhood map).
    pub fn is_spatial(self) -> bool {
        matches!(
            self,
            AttentionKind::NonLocal
                | AttentionKind::CrissCross
                | AttentionKind::Dual
                | AttentionKind::Ascn
                | AttentionKind::PointAttn
                | AttentionKind::OffsetAttn
                | AttentionKind::PointTransformer
        )
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "none" | "baseline" => AttentionKind::None,
            "nonlocal" | "non_local" => AttentionKind::NonLocal,
            "crisscross" | "criss_cross" => AttentionKind::CrissCross,
            "se" => AttentionKind::Se,
            "cbam" => AttentionKind::Cbam,
            "dual" | "dual_attn" => AttentionKind::Dual,
            "ascn" | "a_scn" => AttentionKind::Ascn,
            "point_attn" | "pointattn" => AttentionKind::PointAttn,
            "caa" => AttentionKind::Caa,
            "offset_attn" | "offset" => AttentionKind::OffsetAttn,
            "point_transformer" | "point_trans" | "pt" => AttentionKind::PointTransformer,
            other => return Err(Error::Invalid(format!("unknown attention kind `{other}`"))),
        };
        Ok(kind)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub channels: usize,
    pub reduction: usize,
    /// Neighborhood size of the point transformer.
    pub neighbors: usize,
    /// Offset-attention normalization: softmax over keys followed by L1 over
    /// queries when set, plain softmax otherwise.
    pub offset_dual_norm: bool,
}

impl AttentionConfig {
    pub fn new(channels: usize) -> Self {
        AttentionConfig {
            channels,
            reduction: DEFAULT_REDUCTION,
            neighbors: DEFAULT_PT_NEIGHBORS,
            offset_dual_norm: true,
        }
    }

    pub fn with_reduction(mut self, r: usize) -> Self {
        self.reduction = r;
        self
    }

    pub fn with_neighbors(mut self, k: usize) -> Self {
        self.neighbors = k;
        self
    }

    pub fn reduced(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 || self.channels == 0 || !self.channels.is_multiple_of(self.reduction) {
            return Err(Error::Config(format!(
                "channels ({}) must be a positive multiple of the reduction factor ({})",
                self.channels, self.reduction
            )));
        }
        if self.neighbors == 0 {
            return Err(Error::Config("neighbor count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Named attention weights produced by a forward pass: point-wise `N×N`,
/// channel-wise `C×C`, gating vectors, or per-neighbor weights.
#[derive(Clone, Debug, Default)]
pub struct AttentionMaps<T: Real = f32> {
    entries: Vec<(&'static str, Var<T>)>,
}

impl<T: Real> AttentionMaps<T> {
    pub(crate) fn push(&mut self, name: &'static str, v: &Var<T>) {
        self.entries.push((name, v.clone()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| *n == name).map(|(_, v)| v.value())
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.iter().map(|(n, _)| *n)
    }
}

/// Recording sink for attention maps; a no-op unless requested.
pub(crate) struct MapSink<'a, T: Real>(Option<&'a mut AttentionMaps<T>>);

impl<T: Real> MapSink<'_, T> {
    pub(crate) fn wants(&self) -> bool {
        self.0.is_some()
    }

    pub(crate) fn push(&mut self, name: &'static str, v: &Var<T>) {
        if let Some(m) = self.0.as_mut() {
            m.push(name, v);
        }
    }
}

/// A configured attention block.
#[derive(Clone, Debug)]
pub enum Attention {
    NonLocal(NonLocal),
    CrissCross(CrissCross),
    Se(SqueezeExcitation),
    Cbam(Cbam),
    Dual(DualAttention),
    Ascn(Ascn),
    PointAttn(PointAttention),
    Caa(ChannelAffinity),
    OffsetAttn(OffsetAttention),
    PointTransformer(PointTransformer),
}

impl Attention {
    /// Builds the module for `kind`; `AttentionKind::None` builds nothing.
    pub fn build<T: Real, R: Rng>(
        kind: AttentionKind,
        cfg: AttentionConfig,
        store: &mut ParamStore<T>,
        name: &str,
        rng: &mut R,
    ) -> Result<Option<Self>> {
        if kind == AttentionKind::None {
            return Ok(None);
        }
        cfg.validate()?;
        let m = match kind {
            AttentionKind::None => unreachable!(),
            AttentionKind::NonLocal => Attention::NonLocal(NonLocal::new(cfg, store, name, rng)?),
            AttentionKind::CrissCross => Attention::CrissCross(CrissCross::new(cfg, store, name, rng)?),
            AttentionKind::Se => Attention::Se(SqueezeExcitation::new(cfg, store, name, rng)?),
            AttentionKind::Cbam => Attention::Cbam(Cbam::new(cfg, store, name, rng)?),
            AttentionKind::Dual => Attention::Dual(DualAttention::new(cfg, store, name, rng)?),
            AttentionKind::Ascn => Attention::Ascn(Ascn::new(cfg, store, name, rng)?),
            AttentionKind::PointAttn => Attention::PointAttn(PointAttention::new(cfg, store, name, rng)?),
            AttentionKind::Caa => Attention::Caa(ChannelAffinity::new(cfg, store, name, rng)?),
            AttentionKind::OffsetAttn => Attention::OffsetAttn(OffsetAttention::new(cfg, store, name, rng)?),
            AttentionKind::PointTransformer => {
                Attention::PointTransformer(PointTransformer::new(cfg, store, name, rng)?)
            }
        };
        Ok(Some(m))
    }

    pub fn kind(&self) -> AttentionKind {
        match self {
            Attention::NonLocal(_) => AttentionKind::NonLocal,
            Attention::CrissCross(_) => AttentionKind::CrissCross,
            Attention::Se(_) => AttentionKind::Se,
            Attention::Cbam(_) => AttentionKind::Cbam,
            Attention::Dual(_) => AttentionKind::Dual,
            Attention::Ascn(_) => AttentionKind::Ascn,
            Attention::PointAttn(_) => AttentionKind::PointAttn,
            Attention::Caa(_) => AttentionKind::Caa,
            Attention::OffsetAttn(_) => AttentionKind::OffsetAttn,
            Attention::PointTransformer(_) => AttentionKind::PointTransformer,
        }
    }

    /// Features `[N, C]` in, features `[N, C]` out. `coords` (`[N, 3]`) is
    /// only read by the point transformer.
    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>, coords: &Tensor<T>) -> Result<Var<T>> {
        self.run(g, x, coords, MapSink(None))
    }

    /// One forward per set. Batch-norm inside the block sees all sets together.
    pub fn forward_batch<T: Real>(&self, g: &Graph<'_, T>, xs: &[Var<T>], coords: &[&Tensor<T>]) -> Result<Vec<Var<T>>> {
        if xs.len() != coords.len() {
            return shape_err("attention", format!("{} feature sets, {} coordinate sets", xs.len(), coords.len()));
        }
        match self {
            Attention::OffsetAttn(m) if xs.len() > 1 => m.run_batch(g, xs),
            _ => xs.iter().zip(coords).map(|(x, c)| self.forward(g, x, c)).collect(),
        }
    }

    /// Like [`forward`](Self::forward), also returning the attention maps.
    pub fn forward_with_maps<T: Real>(
        &self,
        g: &Graph<'_, T>,
        x: &Var<T>,
        coords: &Tensor<T>,
    ) -> Result<(Var<T>, AttentionMaps<T>)> {
        let mut maps = AttentionMaps::default();
        let y = self.run(g, x, coords, MapSink(Some(&mut maps)))?;
        Ok((y, maps))
    }

    fn run<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>, coords: &Tensor<T>, maps: MapSink<'_, T>) -> Result<Var<T>> {
        match self {
            Attention::NonLocal(m) => m.run(g, x, maps),
            Attention::CrissCross(m) => m.run(g, x, maps),
            Attention::Se(m) => m.run(g, x, maps),
            Attention::Cbam(m) => m.run(g, x, maps),
            Attention::Dual(m) => m.run(g, x, maps),
            Attention::Ascn(m) => m.run(g, x, maps),
            Attention::PointAttn(m) => m.run(g, x, maps),
            Attention::Caa(m) => m.run(g, x, maps),
            Attention::OffsetAttn(m) => m.run(g, x, maps),
            Attention::PointTransformer(m) => m.run(g, x, coords, maps),
        }
    }
}

pub(crate) fn check_input<T: Real>(op: &'static str, x: &Var<T>, channels: usize) -> Result<usize> {
    if x.shape().len() != 2 || x.shape()[1] != channels {
        return shape_err(op, format!("expected [N, {channels}] features, got {:?}", x.shape()));
    }
    Ok(x.shape()[0])
}

/// Single affine layer as a shared MLP.
pub(crate) fn projection<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut R,
) -> Result<SharedMlp> {
    SharedMlp::new(store, name, SharedMlpSpec::plain(in_dim, &[out_dim]), rng)
}

/// A learned scalar gate, initialized to zero.
pub(crate) fn scalar_gate<T: Real>(store: &mut ParamStore<T>, name: &str) -> Result<ParamId> {
    store.register(name, Tensor::zeros(&[1, 1]), true)
}

/// `x · s` for a `[1, 1]` scalar variable `s`.
pub(crate) fn gate_by<T: Real>(g: &Graph<'_, T>, x: &Var<T>, s: &Var<T>) -> Result<Var<T>> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let s = g.expand(&g.expand(s, 0, n)?, 1, c)?;
    g.mul(x, &s)
}

#[cfg(test)]
pub(crate) mod oracle;
