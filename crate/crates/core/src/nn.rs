//! Layer helpers shared by the backbone and the transformer: a forward
//! context binding a graph to a parameter store, plus initializers.

use rand::Rng;

use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// One forward pass: the graph being recorded, the parameters it reads,
/// and the batch-norm statistics gathered in training mode.
pub struct Forward<'p, S: Scalar> {
    pub graph: Graph<S>,
    pub params: &'p ParamStore<S>,
    pub train: bool,
    pub bn_stats: Vec<(String, BatchStats<S>)>,
}

impl<'p, S: Scalar> Forward<'p, S> {
    pub fn new(params: &'p ParamStore<S>, train: bool) -> Self {
        let graph = if train {
            Graph::new()
        } else {
            Graph::inference()
        };
        Forward {
            graph,
            params,
            train,
            bn_stats: Vec::new(),
        }
    }

    /// Training-mode batch statistics with gradient-free parameters.
    pub fn frozen_train(params: &'p ParamStore<S>) -> Self {
        Forward {
            graph: Graph::inference(),
            params,
            train: true,
            bn_stats: Vec::new(),
        }
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        self.graph.param(self.params, name)
    }

    /// `x W + b` over the last axis, reading `{prefix}.weight` `[in, out]`
    /// and `{prefix}.bias` `[out]` when present.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let y = self.graph.matmul(x, w)?;
        let bias = format!("{prefix}.bias");
        if self.params.get(&bias).is_some() {
            let b = self.p(&bias)?;
            self.graph.add(y, b)
        } else {
            Ok(y)
        }
    }

    /// Normalization over the last axis followed by `{prefix}.gamma/beta`.
    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let n = self.graph.layer_norm_last(x, S::of(LN_EPS))?;
        self.affine(n, prefix)
    }

    /// Batch normalization over the channel (last) axis. Training mode uses
    /// batch statistics and records them for the running-average update;
    /// inference uses `{prefix}.running_mean/var`.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let n = if self.train {
            let (n, stats) = self.graph.batch_norm_train(x, S::of(BN_EPS))?;
            self.bn_stats.push((prefix.to_string(), stats));
            n
        } else {
            let mean = self.buffer(&format!("{prefix}.running_mean"))?;
            let var = self.buffer(&format!("{prefix}.running_var"))?;
            self.graph.normalize_fixed(x, &mean, &var, S::of(BN_EPS))?
        };
        self.affine(n, prefix)
    }

    fn buffer(&self, name: &str) -> Result<Vec<S>> {
        self.params
            .get(name)
            .map(|t| t.data().to_vec())
            .ok_or_else(|| Error::Invalid(format!("unknown buffer {name:?}")))
    }

    fn affine(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        let y = self.graph.mul(x, gamma)?;
        self.graph.add(y, beta)
    }
}

/// Folds recorded batch statistics into the running buffers
/// (`running = (1 - m) running + m batch`, unbiased batch variance).
pub fn update_running_stats<S: Scalar>(
    store: &mut ParamStore<S>,
    stats: &[(String, BatchStats<S>)],
) -> Result<()> {
    let m = S::of(BN_MOMENTUM);
    let keep = S::one() - m;
    for (prefix, st) in stats {
        let n = st.count as f64;
        let unbias = S::of(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
        let mean = store
            .get_mut(&format!("{prefix}.running_mean"))
            .ok_or_else(|| Error::Invalid(format!("no running mean for {prefix}")))?;
        for (r, &b) in mean.data_mut().iter_mut().zip(&st.mean) {
            *r = keep * *r + m * b;
        }
        let var = store
            .get_mut(&format!("{prefix}.running_var"))
            .ok_or_else(|| Error::Invalid(format!("no running var for {prefix}")))?;
        for (r, &b) in var.data_mut().iter_mut().zip(&st.var) {
            *r = keep * *r + m * b * unbias;
        }
    }
    Ok(())
}

// ---- initialization ----------------------------------------------------------

/// Registers a `[d_in, d_out]` weight (uniform Glorot) and optional zero bias.
pub fn init_linear<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    bias: bool,
    rng: &mut R,
) {
    let bound = (6.0 / (d_in + d_out) as f64).sqrt();
    store.insert(
        format!("{prefix}.weight"),
        Tensor::uniform(&[d_in, d_out], bound, rng),
    );
    if bias {
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d_out]));
    }
}

pub fn init_layer_norm<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::ones(&[d]));
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[d]));
}

pub fn init_batch_norm<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, c: usize) {
    init_layer_norm(store, prefix, c);
    store.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[c]));
    store.insert_buffer(format!("{prefix}.running_var"), Tensor::ones(&[c]));
}

/// He-uniform convolution weight `[c_out, c_in_per_group, k]`.
pub fn init_conv<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    name: &str,
    c_out: usize,
    cig: usize,
    k: usize,
    rng: &mut R,
) {
    let fan_in = (cig * k) as f64;
    let bound = (6.0 / fan_in).sqrt();
    store.insert(name, Tensor::uniform(&[c_out, cig, k], bound, rng));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::<f64>::new();
        init_batch_norm(&mut store, "bn", 2);
        let stats = BatchStats {
            mean: vec![1.0, -2.0],
            var: vec![4.0, 0.5],
            count: 5,
        };
        update_running_stats(&mut store, &[("bn".into(), stats)]).unwrap();
        assert_eq!(store.get("bn.running_mean").unwrap().data(), &[0.1, -0.2]);
        let v = store.get("bn.running_var").unwrap().data();
        assert!((v[0] - (0.9 + 0.1 * 4.0 * 1.25)).abs() < 1e-15);
        assert!(!store.is_trainable("bn.running_var"));
    }
}
