//! Attention microbenchmark: eval-mode latency and transient memory.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alloc::measure_peak;
use crate::attention::{Attention, AttentionConfig, AttentionKind, DEFAULT_REDUCTION};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const WARMUP_RUNS: usize = 3;
pub const DEFAULT_REPS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub kind: AttentionKind,
    pub n: usize,
    pub c: usize,
    pub median_ms: f64,
    /// Interquartile range of the per-forward times.
    pub q1_ms: f64,
    pub q3_ms: f64,
    pub runs: usize,
    /// Peak bytes allocated by one forward on top of its inputs and weights.
    pub peak_bytes: usize,
}

impl BenchRecord {
    pub const TSV_HEADER: &'static str = "kind\tn\tc\tmedian_ms\tq1_ms\tq3_ms\truns\tpeak_bytes";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}",
            self.kind, self.n, self.c, self.median_ms, self.q1_ms, self.q3_ms, self.runs, self.peak_bytes
        )
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Reduction used by the benchmark: the default unless the width is too small.
pub fn bench_reduction(c: usize) -> usize {
    if c >= 2 * DEFAULT_REDUCTION { DEFAULT_REDUCTION } else { 2 }
}

/// Times `reps` eval-mode forwards per `N` after warmups, on a single worker
/// thread. Weights are random so no module reduces to its identity path.
pub fn bench_attention(kind: AttentionKind, ns: &[usize], c: usize, reps: usize) -> Result<Vec<BenchRecord>> {
    if kind == AttentionKind::None {
        return Err(Error::Invalid("`none` has no attention module to benchmark".into()));
    }
    if reps == 0 || ns.is_empty() || ns.contains(&0) {
        return Err(Error::Invalid(format!("need repetitions >= 1 and positive sizes, got {reps} and {ns:?}")));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Invalid(format!("benchmark thread pool: {e}")))?;
    pool.install(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::with_capacity(ns.len());
        for &n in ns {
            let cfg = AttentionConfig::new(c).with_reduction(bench_reduction(c));
            let cfg = cfg.with_neighbors(cfg.neighbors.min(n));
            let mut store = ParamStore::<f32>::new();
            let module = Attention::build(kind, cfg, &mut store, "bench", &mut rng)?.expect("kind is not none");
            store.randomize(&mut rng, 0.1);
            let store = &store;
            let x = Tensor::from_fn(&[n, c], |_| rng.random_range(-1.0f32..1.0));
            let coords = Tensor::from_fn(&[n, 3], |_| rng.random_range(0.0f32..4.0));
            let run = || -> Result<Tensor<f32>> {
                let g = Graph::inference(store);
                let xv = g.input(x.clone());
                Ok(module.forward(&g, &xv, &coords)?.value().clone())
            };
            for _ in 0..WARMUP_RUNS {
                run()?;
            }
            let mut times = Vec::with_capacity(reps);
            for _ in 0..reps {
                let t = Instant::now();
                std::hint::black_box(run()?);
                times.push(t.elapsed().as_secs_f64() * 1e3);
            }
            times.sort_by(f64::total_cmp);
            let g = Graph::inference(store);
            let xv = g.input(x.clone());
            let (res, peak_bytes) = measure_peak(|| module.forward(&g, &xv, &coords).map(|y| y.shape().to_vec()));
            res?;
            out.push(BenchRecord {
                kind,
                n,
                c,
                median_ms: quantile(&times, 0.5).max(f64::MIN_POSITIVE),
                q1_ms: quantile(&times, 0.25),
                q3_ms: quantile(&times, 0.75),
                runs: reps,
                peak_bytes,
            });
        }
        Ok(out)
    })
}
