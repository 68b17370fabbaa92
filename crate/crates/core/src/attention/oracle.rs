//! Dense nested-`Vec` reimplementations used as test oracles. Nothing here
//! touches the graph or the tensor kernels.

use crate::nn::SharedMlp;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Dense(pub Vec<Vec<f64>>);

impl Dense {
    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        Dense((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
    }

    pub fn cols(&self) -> usize {
        self.0[0].len()
    }

    pub fn t(&self) -> Dense {
        Dense((0..self.cols()).map(|j| self.0.iter().map(|r| r[j]).collect()).collect())
    }

    pub fn matmul(&self, o: &Dense) -> Dense {
        let n = o.cols();
        Dense(
            self.0
                .iter()
                .map(|r| (0..n).map(|j| r.iter().enumerate().map(|(p, &v)| v * o.0[p][j]).sum()).collect())
                .collect(),
        )
    }

    pub fn add(&self, o: &Dense) -> Dense {
        Dense(self.0.iter().zip(&o.0).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect())
    }

    pub fn sub(&self, o: &Dense) -> Dense {
        self.add(&o.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> Dense {
        Dense(self.0.iter().map(|r| r.iter().map(|v| v * s).collect()).collect())
    }

    pub fn max_diff(&self, t: &Tensor<f64>) -> f64 {
        let mut m = 0.0f64;
        for (i, r) in self.0.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                m = m.max((v - t.at(i, j)).abs());
            }
        }
        m
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::MIN, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn softmax_rows(a: &Dense) -> Dense {
    Dense(a.0.iter().map(|r| softmax(r)).collect())
}

/// Eval-mode shared MLP from raw stored values.
pub fn mlp(store: &ParamStore<f64>, m: &SharedMlp, x: &Dense) -> Dense {
    let mut h = x.clone();
    for ((lin, bn), spec) in m.layers().iter().zip(&m.spec().layers) {
        let w = Dense::from_tensor(store.value(lin.weight));
        let b = store.value(lin.bias).data().to_vec();
        h = h.matmul(&w);
        for r in &mut h.0 {
            for (v, bb) in r.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        if let Some(bn) = bn {
            let (gm, bt) = (store.value(bn.gamma).data(), store.value(bn.beta).data());
            let (rm, rv) = (store.value(bn.running_mean).data(), store.value(bn.running_var).data());
            for r in &mut h.0 {
                for (j, v) in r.iter_mut().enumerate() {
                    *v = (*v - rm[j]) / (rv[j] + 1e-5).sqrt() * gm[j] + bt[j];
                }
            }
        }
        if spec.activation {
            for r in &mut h.0 {
                for v in r.iter_mut() {
                    *v = v.max(0.0);
                }
            }
        }
    }
    h
}

/// Single-layer projection.
pub fn linear(store: &ParamStore<f64>, m: &SharedMlp, x: &Dense) -> Dense {
    mlp(store, m, x)
}
