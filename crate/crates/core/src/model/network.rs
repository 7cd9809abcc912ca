use crate::tensor::{Graph, Tensor, TensorError, TensorId};

use super::{Block, ConvBn, Forward, Init, ModelConfig, ModelError, ParamId, ParamStore, PoolSpec, Result};

#[derive(Debug, Clone)]
struct Network {
    stem: Vec<ConvBn>,
    pool: Option<PoolSpec>,
    blocks: Vec<Block>,
    fc_w: ParamId,
    fc_b: ParamId,
}

impl Network {
    fn forward(&self, f: &mut Forward, x: TensorId) -> Result<TensorId> {
        let mut h = x;
        for conv in &self.stem {
            let y = conv.forward(f, h)?;
            h = f.graph().relu(y);
        }
        if let Some(p) = self.pool {
            h = f.graph().max_pool2d(h, p.size, p.stride, p.size / 2)?;
        }
        for b in &self.blocks {
            h = b.forward(f, h)?;
        }
        let (w, b) = (f.param(self.fc_w), f.param(self.fc_b));
        let g = f.graph();
        let pooled = g.global_avg_pool(h)?;
        Ok(g.linear(pooled, w, b)?)
    }
}

/// A built classifier: configuration, parameters and layer wiring.
///
/// Input is `[N, in_channels, bands, frames]`; output logits are `[N, classes]`.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    net: Network,
}

impl Model {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let mut channels = cfg.in_channels;
        let mut stem = Vec::new();
        for (i, c) in cfg.stem.convs.iter().enumerate() {
            stem.push(ConvBn::new(
                &mut store,
                &mut init,
                &format!("stem.{i}"),
                channels,
                c.channels,
                c.kernel,
                c.stride,
            ));
            channels = c.channels;
        }
        let mut blocks = Vec::new();
        for (s, stage) in cfg.stages.iter().enumerate() {
            for r in 0..stage.repeats {
                let spec = if r == 0 {
                    stage.block
                } else {
                    stage.block.with_stride(1)
                };
                let block = Block::build(&spec, channels, &mut store, &mut init, &format!("stages.{s}.{r}"))?;
                channels = spec.out_channels();
                blocks.push(block);
            }
        }
        let fc_w = store.add("head.fc.weight", init.he_normal(&[channels, cfg.classes], channels));
        let fc_b = store.add("head.fc.bias", Tensor::zeros([cfg.classes]));
        Ok(Self {
            cfg: cfg.clone(),
            store,
            net: Network {
                stem,
                pool: cfg.stem.max_pool,
                blocks,
                fc_w,
                fc_b,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn count_params(&self) -> usize {
        self.store.count()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.cfg.in_channels || shape[0] == 0 {
            return Err(ModelError::Tensor(TensorError::Shape {
                op: "model",
                operand: "input",
                expected: format!("[N>0, {}, bands, frames]", self.cfg.in_channels),
                actual: shape.to_vec(),
            }));
        }
        Ok(())
    }

    /// Training-mode forward on `g`: batch statistics, running statistics
    /// updated. Returns the logits and the graph ids of every parameter in
    /// store order, for reading gradients after `backward`.
    pub fn forward_train(&mut self, g: &mut Graph, x: TensorId) -> Result<(TensorId, Vec<TensorId>)> {
        self.check_input(g.shape(x))?;
        let (eps, momentum) = (self.cfg.bn_eps, self.cfg.bn_momentum);
        let mut f = Forward::train(g, &mut self.store, momentum, eps);
        let logits = self.net.forward(&mut f, x)?;
        Ok((logits, f.leaves().to_vec()))
    }

    /// Eval-mode forward on `g` (running statistics, nothing mutated).
    pub fn forward_eval(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        self.check_input(g.shape(x))?;
        let mut f = Forward::eval(g, &self.store, self.cfg.bn_eps);
        self.net.forward(&mut f, x)
    }

    pub fn logits(&self, input: Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let x = g.leaf(input);
        let y = self.forward_eval(&mut g, x)?;
        Ok(g.take_tensor(y))
    }

    /// Softmax class probabilities, `[N, classes]`.
    pub fn predict_proba(&self, input: Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let x = g.leaf(input);
        let y = self.forward_eval(&mut g, x)?;
        let p = g.softmax(y);
        Ok(g.take_tensor(p))
    }

    /// Probability of class 1 for each sample.
    pub fn predict(&self, input: Tensor) -> Result<Vec<f32>> {
        let classes = self.cfg.classes;
        let p = self.predict_proba(input)?;
        Ok(p.data().chunks(classes).map(|row| row[1]).collect())
    }
}
