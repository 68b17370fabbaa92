//! Mini-batch training of the detector.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::LabeledBox;
use crate::graph::{Graph, Mode, Var};
use crate::head::LossComponents;
use crate::model::Detector;
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::point_ops::PointSet;
use crate::scalar::Real;

pub const DEFAULT_LR: f64 = 0.001;
pub const DEFAULT_BATCH: usize = 8;

/// One training example.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a, T: Real = f32> {
    pub points: &'a PointSet<T>,
    pub boxes: &'a [LabeledBox],
}

/// One Adam step on the mean loss of the batch. All scenes share one graph
/// so batch-norm normalizes over the whole mini-batch.
pub fn train_step<T: Real>(
    model: &Detector,
    store: &mut ParamStore<T>,
    adam: &mut Adam<T>,
    batch: &[Sample<'_, T>],
) -> Result<LossComponents> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty training batch".into()));
    }
    let (grads, stats, comps) = {
        let g = Graph::new(&*store, Mode::Train);
        let points: Vec<&PointSet<T>> = batch.iter().map(|s| s.points).collect();
        let outs = model.forward_batch(&g, &points)?;
        let mut total: Option<Var<T>> = None;
        let mut comps = Vec::with_capacity(batch.len());
        for (out, s) in outs.iter().zip(batch) {
            let (loss, c) = model.loss(&g, out, s.boxes)?;
            total = Some(match total {
                Some(t) => g.add(&t, &loss)?,
                None => loss,
            });
            comps.push(c);
        }
        let loss = g.scale(&total.expect("non-empty batch"), T::lit(1.0 / batch.len() as f64));
        let grads = g.backward(&loss)?.into_params();
        (grads, g.take_stat_updates(), comps)
    };
    store.accumulate(&grads);
    adam.step(store)?;
    store.apply_stat_updates(&stats);
    Ok(LossComponents::mean(&comps))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Seed of the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: DEFAULT_LR, batch_size: DEFAULT_BATCH, seed: 0 }
    }
}

/// Iterates shuffled mini-batches over a fixed sample set.
pub struct Trainer<'a, T: Real = f32> {
    pub model: &'a Detector,
    pub adam: Adam<T>,
    samples: Vec<Sample<'a, T>>,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pub history: Vec<LossComponents>,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(model: &'a Detector, samples: Vec<Sample<'a, T>>, cfg: TrainConfig) -> Result<Self> {
        if samples.is_empty() || cfg.batch_size == 0 {
            return Err(Error::Invalid("training needs samples and batch size >= 1".into()));
        }
        if !(cfg.lr > 0.0) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", cfg.lr)));
        }
        Ok(Trainer {
            model,
            adam: Adam::new(cfg.lr),
            batch_size: cfg.batch_size.min(samples.len()),
            order: Vec::new(),
            samples,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cursor: 0,
            history: Vec::new(),
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.batch_size)
    }

    /// One optimizer step on the next mini-batch; reshuffles at epoch ends.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<LossComponents> {
        if self.cursor >= self.order.len() {
            self.order = (0..self.samples.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch: Vec<_> = self.order[self.cursor..end].iter().map(|&i| self.samples[i]).collect();
        self.cursor = end;
        let c = train_step(self.model, store, &mut self.adam, &batch)?;
        if !c.total.is_finite() {
            return Err(Error::Invalid(format!("non-finite loss at step {}", self.history.len() + 1)));
        }
        self.history.push(c);
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, FpConfig, SaConfig};
    use crate::gradcheck::{check_params, sample_coords};
    use crate::head::HeadConfig;
    use crate::model::ModelConfig;
    use crate::scene::{generate_dataset, SceneSpec};
    use crate::tensor::Tensor;

    fn small_spec() -> SceneSpec {
        SceneSpec { points: 600, density: 25.0, objects: (2, 3), ..SceneSpec::default() }
    }

    fn run(steps: usize) -> (Vec<LossComponents>, Vec<u8>) {
        let spec = small_spec();
        let scenes = generate_dataset(3, 4, &spec).unwrap();
        let mut cfg = ModelConfig::toy(spec.class_names());
        cfg.seed = 5;
        let (det, mut store) = Detector::init::<f32>(cfg).unwrap();
        let boxes: Vec<_> = scenes.iter().flat_map(|s| s.boxes.clone()).collect();
        det.fit_anchors(&mut store, &boxes).unwrap();
        let batch: Vec<_> = scenes.iter().map(|s| Sample { points: &s.points, boxes: &s.boxes }).collect();
        let mut tr = Trainer::new(&det, batch, TrainConfig { batch_size: 2, ..Default::default() }).unwrap();
        for _ in 0..steps {
            tr.step(&mut store).unwrap();
        }
        (tr.history, store.to_bytes())
    }

    #[test]
    fn loss_decreases() {
        let (h, _) = run(50);
        let mean = |s: &[LossComponents]| s.iter().map(|c| c.total).sum::<f64>() / s.len() as f64;
        let (first, last) = (mean(&h[..6]), mean(&h[44..]));
        assert!(last < 0.9 * first, "loss {first} -> {last}");
    }

    #[test]
    fn identical_seeds_identical_runs() {
        let (a, pa) = run(4);
        let (b, pb) = run(4);
        assert_eq!(a, b);
        assert!(pa == pb);
    }

    fn micro() -> ModelConfig {
        let backbone = BackboneConfig {
            sa: vec![
                SaConfig::new(32, 0.8, 8, &[6, 6]),
                SaConfig::new(16, 1.2, 8, &[6]),
                SaConfig::new(8, 2.0, 4, &[6]),
            ],
            fp: vec![FpConfig { mlp: vec![6] }],
            ..BackboneConfig::toy()
        };
        let head = HeadConfig {
            num_classes: 3,
            proposals: 6,
            cluster_radius: 0.8,
            cluster_neighbors: 4,
            cluster_mlp: vec![6],
            proposal_mlp: vec![6],
            positive_distance: 0.6,
            negative_distance: 0.9,
            ..HeadConfig::toy()
        };
        ModelConfig { backbone, head, class_names: vec!["a".into(), "b".into(), "c".into()], seed: 2 }
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        use crate::geometry::Box3D;
        let (det, mut store) = Detector::init::<f64>(micro()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        store.randomize(&mut rng, 0.3);
        let gt = vec![
            LabeledBox { bbox: Box3D::new([0.5, 0.5, 0.3], [0.8, 0.8, 0.6]).unwrap(), class: 1 },
            LabeledBox { bbox: Box3D::new([1.5, 1.4, 0.4], [0.6, 0.9, 0.8]).unwrap(), class: 2 },
        ];
        det.fit_anchors(&mut store, &gt).unwrap();
        let pts = PointSet::new(Tensor::from_fn(&[64, 3], |_| rand::Rng::random_range(&mut rng, 0.0..2.0))).unwrap();
        let coords = sample_coords(&store, 0.05, &mut rng);
        assert!(coords.len() >= 20);
        let err = check_params(&store, Mode::Train, &coords, 1e-6, |g| {
            let out = det.forward(g, &pts)?;
            Ok(det.loss(g, &out, &gt)?.0)
        });
        assert!(err < 1e-3, "relative error {err}");
    }
}
