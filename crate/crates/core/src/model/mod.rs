//! Residual classifiers: basic, bottleneck, Res2Net and SE-Res2Net blocks,
//! the six reduced architectures, parameter counting and weight archives.

mod archive;
mod blocks;
mod config;
mod network;

pub use archive::{load_weights, save_weights, ArchiveTensor, WeightArchive};
pub use blocks::{multi_scale_hierarchy, BasicBlock, Block, BottleneckBlock, ConvBn, Res2NetBlock, SeLayer};
pub use config::{Arch, BlockKind, BlockSpec, Family, ModelConfig, PoolSpec, StageSpec, StemConv, StemSpec, Variant};
pub use network::Model;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{BatchNormMode, Graph, RunningStats, Tensor, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("weight archive: {0}")]
    Archive(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatsId(usize);

/// Named trainable tensors plus batch-norm running statistics, in creation
/// order. Layers refer to entries by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    param_names: Vec<String>,
    params: Vec<Tensor>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.param_names.push(name.into());
        self.params.push(tensor);
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stat_names.push(name.into());
        self.stats.push(RunningStats::identity(channels));
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn stat_names(&self) -> &[String] {
        &self.stat_names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        let i = self.param_names.iter().position(|n| n == name)?;
        Some(&self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.param_names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn stat(&self, name: &str) -> Option<&RunningStats> {
        let i = self.stat_names.iter().position(|n| n == name)?;
        Some(&self.stats[i])
    }

    pub fn stats_mut(&mut self, name: &str) -> Option<&mut RunningStats> {
        let i = self.stat_names.iter().position(|n| n == name)?;
        Some(&mut self.stats[i])
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }
}

/// Seeded He (fan-in) normal initializer.
#[derive(Debug, Clone)]
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn he_normal(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }
}

enum NormStats<'a> {
    Train(&'a mut [RunningStats], f32),
    Eval(&'a [RunningStats]),
}

/// A forward pass in progress: the graph, every parameter registered as a
/// leaf, and the batch-norm mode.
pub struct Forward<'a> {
    graph: &'a mut Graph,
    leaves: Vec<TensorId>,
    stats: NormStats<'a>,
    eps: f32,
}

impl<'a> Forward<'a> {
    /// Batch statistics in the forward pass; running statistics updated.
    pub fn train(graph: &'a mut Graph, store: &'a mut ParamStore, momentum: f32, eps: f32) -> Self {
        let leaves = store.params.iter().map(|p| graph.param(p.clone())).collect();
        Self {
            graph,
            leaves,
            stats: NormStats::Train(&mut store.stats, momentum),
            eps,
        }
    }

    /// Running statistics; nothing mutated.
    pub fn eval(graph: &'a mut Graph, store: &'a ParamStore, eps: f32) -> Self {
        let leaves = store.params.iter().map(|p| graph.leaf(p.clone())).collect();
        Self {
            graph,
            leaves,
            stats: NormStats::Eval(&store.stats),
            eps,
        }
    }

    pub fn graph(&mut self) -> &mut Graph {
        self.graph
    }

    pub fn param(&self, id: ParamId) -> TensorId {
        self.leaves[id.0]
    }

    /// Graph ids of all parameters, in store order.
    pub fn leaves(&self) -> &[TensorId] {
        &self.leaves
    }

    pub fn batch_norm(&mut self, x: TensorId, gamma: ParamId, beta: ParamId, stats: StatsId) -> Result<TensorId> {
        let (g, b) = (self.param(gamma), self.param(beta));
        let mode = match &mut self.stats {
            NormStats::Train(s, momentum) => BatchNormMode::Train {
                stats: &mut s[stats.0],
                momentum: *momentum,
            },
            NormStats::Eval(s) => BatchNormMode::Eval(&s[stats.0]),
        };
        Ok(self.graph.batch_norm(x, g, b, mode, self.eps)?)
    }
}

impl AsMut<Graph> for Forward<'_> {
    fn as_mut(&mut self) -> &mut Graph {
        self.graph
    }
}
