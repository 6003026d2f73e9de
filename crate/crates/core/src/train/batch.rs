//! Data-parallel gradient accumulation with a fixed reduction order.
//!
//! Each item runs on its own tape. Per-item gradients are summed in item order
//! after the parallel map, so the result is bitwise identical for any worker
//! count.

use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::Result;
use crate::tensor::{kernels, Element, Tensor};

/// Environment variable capping the worker threads used for batches and decoding.
pub const THREADS_ENV: &str = "SLAM_ASR_THREADS";

pub fn thread_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let cap = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0);
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = cap {
            b = b.num_threads(n);
        }
        b.build().expect("thread pool")
    })
}

/// Token-level statistics of a forward pass over supervised positions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TokenStats {
    pub nll_sum: f64,
    pub supervised: usize,
    pub correct: usize,
}

impl TokenStats {
    pub fn merge(&mut self, o: &TokenStats) {
        self.nll_sum += o.nll_sum;
        self.supervised += o.supervised;
        self.correct += o.correct;
    }

    pub fn mean_loss(&self) -> f64 {
        if self.supervised == 0 {
            0.0
        } else {
            self.nll_sum / self.supervised as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.supervised == 0 {
            0.0
        } else {
            self.correct as f64 / self.supervised as f64
        }
    }
}

/// Output of one item: gradients of the summed (not averaged) NLL, one slot
/// per trainable tensor, plus its token statistics.
pub struct ItemGrads<E: Element> {
    pub grads: Vec<Option<Tensor<E>>>,
    pub stats: TokenStats,
}

/// Runs `f` over `items` in parallel and returns the gradient of the mean
/// token NLL over the whole batch together with the merged statistics.
pub fn batch_gradients<E, T, F>(
    items: &[T],
    shapes: &[Vec<usize>],
    f: F,
) -> Result<(Vec<Tensor<E>>, TokenStats)>
where
    E: Element,
    T: Sync,
    F: Fn(&T) -> Result<ItemGrads<E>> + Sync,
{
    let outs: Vec<Result<ItemGrads<E>>> =
        thread_pool().install(|| items.par_iter().map(&f).collect());

    let mut acc: Vec<Vec<E>> = shapes
        .iter()
        .map(|s| vec![E::zero(); s.iter().product()])
        .collect();
    let mut stats = TokenStats::default();
    for out in outs {
        let out = out?;
        stats.merge(&out.stats);
        for (a, g) in acc.iter_mut().zip(&out.grads) {
            if let Some(g) = g {
                kernels::axpy(a, g.data());
            }
        }
    }
    let inv = if stats.supervised == 0 {
        E::zero()
    } else {
        E::of(1.0 / stats.supervised as f64)
    };
    let grads = acc
        .into_iter()
        .zip(shapes)
        .map(|(mut a, s)| {
            a.iter_mut().for_each(|x| *x = *x * inv);
            Tensor::from_parts(s.clone(), a)
        })
        .collect();
    Ok((grads, stats))
}

/// Parallel map with results in input order.
pub fn ordered_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    thread_pool().install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect())
}
