//! Central finite-difference checks against the reverse-mode gradients.
//!
//! The numerical side only ever evaluates forward passes on a non-recording
//! graph, so it shares no code with the reverse rules it is checking.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Mode, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Checks the gradient of `f` with respect to every element of `inputs`
/// in train mode and returns the relative error.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> f64
where
    F: Fn(&Graph<'_, f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    check_inputs_mode(inputs, eps, Mode::Train, f)
}

pub fn check_inputs_mode<F>(inputs: &[Tensor<f64>], eps: f64, mode: Mode, f: F) -> f64
where
    F: Fn(&Graph<'_, f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let store = ParamStore::new();
    let g = Graph::new(&store, mode);
    let vars: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&g, &vars).expect("forward failed");
    let grads = g.backward(&loss).expect("backward failed");
    let mut analytic = Vec::new();
    for v in &vars {
        match grads.wrt(v) {
            Some(t) => analytic.extend_from_slice(t.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, v.value().len())),
        }
    }
    let eval = |ins: &[Tensor<f64>]| {
        let g = Graph::with_recording(&store, mode, false);
        let vars: Vec<_> = ins.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars).expect("forward failed").value().item()
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for t in 0..work.len() {
        for i in 0..work[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let plus = eval(&work);
            work[t].data_mut()[i] = orig - eps;
            let minus = eval(&work);
            work[t].data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * eps));
        }
    }
    relative_error(&analytic, &numeric)
}

/// A single scalar inside a stored parameter.
pub type Coord = (ParamId, usize);

/// Every trainable scalar in the store.
pub fn all_coords(store: &ParamStore<f64>) -> Vec<Coord> {
    store
        .iter()
        .filter(|(_, p)| p.trainable())
        .flat_map(|(id, p)| (0..p.value().len()).map(move |i| (id, i)))
        .collect()
}

/// A random `fraction` of trainable scalars (at least one).
pub fn sample_coords<R: Rng>(store: &ParamStore<f64>, fraction: f64, rng: &mut R) -> Vec<Coord> {
    let all = all_coords(store);
    let n = ((all.len() as f64 * fraction).ceil() as usize).clamp(1, all.len());
    let mut picked: Vec<usize> = sample(rng, all.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i]).collect()
}

/// Checks the parameter gradient of the scalar produced by `f` at `coords`
/// and returns the relative error.
pub fn check_params<F>(store: &ParamStore<f64>, mode: Mode, coords: &[Coord], eps: f64, f: F) -> f64
where
    F: Fn(&Graph<'_, f64>) -> Result<Var<f64>>,
{
    let g = Graph::new(store, mode);
    let loss = f(&g).expect("forward failed");
    let grads = g.backward(&loss).expect("backward failed");
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(id, i)| grads.param(id).map_or(0.0, |t| t.data()[i]))
        .collect();
    drop(g);
    let mut work = store.clone();
    let eval = |work: &ParamStore<f64>| {
        let g = Graph::with_recording(work, mode, false);
        f(&g).expect("forward failed").value().item()
    };
    let mut numeric = Vec::with_capacity(coords.len());
    for &(id, i) in coords {
        let orig = work.value(id).data()[i];
        work.value_mut(id).data_mut()[i] = orig + eps;
        let plus = eval(&work);
        work.value_mut(id).data_mut()[i] = orig - eps;
        let minus = eval(&work);
        work.value_mut(id).data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * eps));
    }
    relative_error(&analytic, &numeric)
}
