//! Shared MLP building blocks: per-point linear maps, batch-norm, activation.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Per-point affine map `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    /// Uniform `±1/√in` weights, zero bias.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = Tensor::from_fn(&[in_dim, out_dim], |_| T::lit(rng.random_range(-bound..=bound)));
        Self::with_weight(store, name, w)
    }

    /// All-zero weights and bias.
    pub fn zeros<T: Real>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_weight(store, name, Tensor::zeros(&[in_dim, out_dim]))
    }

    fn with_weight<T: Real>(store: &mut ParamStore<T>, name: &str, w: Tensor<T>) -> Result<Self> {
        let (in_dim, out_dim) = (w.shape()[0], w.shape()[1]);
        let weight = store.register(format!("{name}.weight"), w, true)?;
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[1, out_dim]), true)?;
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_dim {
            return shape_err("linear", format!("expected [N, {}], got {:?}", self.in_dim, x.shape()));
        }
        let y = g.matmul(x, &g.param(self.weight))?;
        let b = g.expand(&g.param(self.bias), 0, x.shape()[0])?;
        g.add(&y, &b)
    }
}

/// Batch normalization over the point axis of an `[N, C]` input.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Self::with_gamma(store, name, channels, T::one())
    }

    pub fn with_gamma<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, gamma: T) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.register(format!("{name}.gamma"), Tensor::full(&[channels], gamma), true)?,
            beta: store.register(format!("{name}.beta"), Tensor::zeros(&[channels]), true)?,
            running_mean: store.register(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false)?,
            running_var: store.register(format!("{name}.running_var"), Tensor::ones(&[channels]), false)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let eps = T::lit(BN_EPS);
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        match g.mode() {
            Mode::Train => {
                let (y, mean, var) = g.batch_norm_train(x, &gamma, &beta, eps)?;
                g.push_stat_update(self.running_mean, mean);
                g.push_stat_update(self.running_var, var);
                Ok(y)
            }
            Mode::Eval => {
                let c = gamma.value().len();
                if x.shape().len() != 2 || x.shape()[1] != c {
                    return shape_err("batch_norm", format!("x {:?}, channels {c}", x.shape()));
                }
                let n = x.shape()[0];
                let store = g.store();
                let inv_std = store.value(self.running_var).map(|v| T::one() / (v + eps).sqrt());
                let scale = g.mul(&gamma, &g.constant(inv_std))?;
                let shift = g.sub(&beta, &g.mul(&g.constant(store.value(self.running_mean).clone()), &scale)?)?;
                let scale = g.expand(&g.reshape(&scale, &[1, c])?, 0, n)?;
                let shift = g.expand(&g.reshape(&shift, &[1, c])?, 0, n)?;
                g.add(&g.mul(x, &scale)?, &shift)
            }
        }
    }
}

impl<T: Real> ParamStore<T> {
    /// Folds batch statistics into running statistics, in order, with the
    /// batch-norm momentum.
    pub fn apply_stat_updates(&mut self, updates: &[(ParamId, Tensor<T>)]) {
        let m = T::lit(BN_MOMENTUM);
        for (id, batch) in updates {
            let running = self.value_mut(*id);
            for (r, &b) in running.data_mut().iter_mut().zip(batch.data()) {
                *r = m * *r + (T::one() - m) * b;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpLayer {
    pub width: usize,
    pub batch_norm: bool,
    pub activation: bool,
}

/// Layer widths and per-layer batch-norm/ReLU flags of a shared MLP.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharedMlpSpec {
    pub in_channels: usize,
    pub layers: Vec<MlpLayer>,
}

impl SharedMlpSpec {
    /// Every layer with batch-norm and ReLU.
    pub fn new(in_channels: usize, widths: &[usize]) -> Self {
        let layers = widths.iter().map(|&width| MlpLayer { width, batch_norm: true, activation: true }).collect();
        SharedMlpSpec { in_channels, layers }
    }

    /// Hidden layers with ReLU only, last layer purely affine.
    pub fn plain(in_channels: usize, widths: &[usize]) -> Self {
        let mut spec = Self::new(in_channels, widths);
        for l in &mut spec.layers {
            l.batch_norm = false;
        }
        spec.linear_last()
    }

    /// Drops batch-norm and activation from the last layer.
    pub fn linear_last(mut self) -> Self {
        if let Some(l) = self.layers.last_mut() {
            l.batch_norm = false;
            l.activation = false;
        }
        self
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(self.in_channels, |l| l.width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("shared MLP needs at least one layer".into()));
        }
        if self.in_channels == 0 || self.layers.iter().any(|l| l.width == 0) {
            return Err(Error::Config(format!("shared MLP widths must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// Point-wise MLP with weights shared across points.
#[derive(Clone, Debug)]
pub struct SharedMlp {
    spec: SharedMlpSpec,
    layers: Vec<(Linear, Option<BatchNorm>)>,
}

impl SharedMlp {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, spec: SharedMlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut width = spec.in_channels;
        for (i, l) in spec.layers.iter().enumerate() {
            let lin = Linear::new(store, &format!("{name}.{i}"), width, l.width, rng)?;
            let bn = l.batch_norm.then(|| BatchNorm::new(store, &format!("{name}.{i}.bn"), l.width)).transpose()?;
            layers.push((lin, bn));
            width = l.width;
        }
        Ok(SharedMlp { spec, layers })
    }

    pub fn spec(&self) -> &SharedMlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[(Linear, Option<BatchNorm>)] {
        &self.layers
    }

    pub fn out_channels(&self) -> usize {
        self.spec.out_channels()
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().len() != 2 || x.shape()[1] != self.spec.in_channels {
            return shape_err(
                "shared_mlp",
                format!("expected {} input channels, got {:?}", self.spec.in_channels, x.shape()),
            );
        }
        let mut h = x.clone();
        for ((lin, bn), l) in self.layers.iter().zip(&self.spec.layers) {
            h = lin.forward(g, &h)?;
            if let Some(bn) = bn {
                h = bn.forward(g, &h)?;
            }
            if l.activation {
                h = g.relu(&h);
            }
        }
        Ok(h)
    }

    /// Applies the MLP to several point sets at once. Batch-norm statistics
    /// are taken over the rows of all sets together.
    pub fn forward_batch<T: Real>(&self, g: &Graph<'_, T>, xs: &[Var<T>]) -> Result<Vec<Var<T>>> {
        if let [x] = xs {
            return Ok(vec![self.forward(g, x)?]);
        }
        let rows: Vec<usize> = xs.iter().map(|x| x.shape().first().copied().unwrap_or(0)).collect();
        let parts: Vec<&Var<T>> = xs.iter().collect();
        split_rows(g, &self.forward(g, &g.concat(&parts, 0)?)?, &rows)
    }
}

/// Cuts `x` into consecutive row blocks of the given sizes.
pub fn split_rows<T: Real>(g: &Graph<'_, T>, x: &Var<T>, rows: &[usize]) -> Result<Vec<Var<T>>> {
    let mut start = 0;
    rows.iter()
        .map(|&n| {
            let part = g.slice(x, 0, start, n);
            start += n;
            part
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{all_coords, check_params};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_input(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(&[n, c], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let spec = SharedMlpSpec::plain(3, &[3]);
        let mlp = SharedMlp::new(&mut store, "m", spec, &mut rng).unwrap();
        let w = mlp.layers()[0].0.weight;
        store.set_value(w, Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])).unwrap();
        let g = Graph::inference(&store);
        let x = Tensor::from_rows(&[[1.0, -2.0, 3.5], [0.25, 0.0, -1.0]]);
        let y = mlp.forward(&g, &g.constant(x.clone())).unwrap();
        assert_eq!(y.value(), &x);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let mlp = SharedMlp::new(&mut store, "m", SharedMlpSpec::new(4, &[8]), &mut rng).unwrap();
        let g = Graph::inference(&store);
        assert!(mlp.forward(&g, &g.constant(Tensor::zeros(&[5, 3]))).is_err());
        assert!(SharedMlpSpec::new(4, &[]).validate().is_err());
        assert!(SharedMlpSpec::new(4, &[0]).validate().is_err());
    }

    #[test]
    fn eval_mode_is_permutation_equivariant_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let mlp = SharedMlp::new(&mut store, "m", SharedMlpSpec::new(4, &[6, 5]), &mut rng).unwrap();
        store.randomize(&mut rng, 0.8);
        let x = Tensor::<f32>::from_fn(&[7, 4], |_| rng.random_range(-1.0..1.0));
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let g = Graph::inference(&store);
        let y = mlp.forward(&g, &g.constant(x.clone())).unwrap();
        let xp = g.gather_rows(&g.constant(x), &perm).unwrap();
        let yp = mlp.forward(&g, &xp).unwrap();
        let expected = g.gather_rows(&y, &perm).unwrap();
        assert_eq!(yp.value(), expected.value());
    }

    #[test]
    fn gradient_check_train_and_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let mlp = SharedMlp::new(&mut store, "m", SharedMlpSpec::new(4, &[6, 6]).linear_last(), &mut rng).unwrap();
        store.randomize(&mut rng, 0.7);
        let x = rand_input(&mut rng, 8, 4);
        let w = Tensor::from_fn(&[8, 6], |i| (i as f64 * 0.37).cos());
        for mode in [Mode::Train, Mode::Eval] {
            let coords = all_coords(&store);
            let err = check_params(&store, mode, &coords, 1e-5, |g| {
                let y = mlp.forward(g, &g.constant(x.clone()))?;
                Ok(g.sum_all(&g.mul(&y, &g.constant(w.clone()))?))
            });
            assert!(err < 1e-5, "{mode:?}: relative error {err}");
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let bn = bn.unwrap();
        let x = rand_input(&mut rng, 16, 2);
        let updates = {
            let g = Graph::new(&store, Mode::Train);
            bn.forward(&g, &g.constant(x.clone())).unwrap();
            g.take_stat_updates()
        };
        store.apply_stat_updates(&updates);
        let mean0: f64 = (0..16).map(|r| x.at(r, 0)).sum::<f64>() / 16.0;
        assert!((store.value(bn.running_mean).data()[0] - 0.1 * mean0).abs() < 1e-12);
        let _ = rng;
    }
}
