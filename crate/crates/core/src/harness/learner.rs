use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::dynamics::WindContext;
use crate::error::Result;
use crate::network::WeightNet;
use crate::seed::{self, tag};
use crate::selection::{ContextLearner, TrainedModel};
use crate::sim::SimConfig;
use crate::training::{evaluate_loss, train_to_convergence, TrainConfig, TrainOutcome};

/// A network together with the pool index it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextNet {
    pub context: usize,
    pub net: WeightNet,
}

/// Trains and evaluates weight networks on the course. Training results and
/// evaluations are memoized per context, so several selection runs with the
/// same seed share work. Every model is evaluated in a context on the same
/// episode seed.
pub struct NetworkLearner {
    pub pool: Vec<WindContext>,
    pub train: TrainConfig,
    pub sim: SimConfig,
    pub seed: u64,
    trained: BTreeMap<usize, TrainOutcome>,
    evaluations: BTreeMap<(usize, usize), f64>,
}

impl NetworkLearner {
    pub fn new(pool: Vec<WindContext>, train: TrainConfig, sim: SimConfig, seed: u64) -> Self {
        Self { pool, train, sim, seed, trained: BTreeMap::new(), evaluations: BTreeMap::new() }
    }

    pub fn eval_seed(&self, context: usize) -> u64 {
        seed::derive(self.seed, &[tag::EVAL_EPISODE, context as u64])
    }

    pub fn outcome(&self, context: usize) -> Option<&TrainOutcome> {
        self.trained.get(&context)
    }

    fn train_context(&mut self, context: usize) -> Result<&TrainOutcome> {
        if !self.trained.contains_key(&context) {
            let init = self.train.initial_network(seed::derive(self.seed, &[tag::NET_INIT, context as u64]))?;
            let out = train_to_convergence(init, context, &self.pool, &self.train, &self.sim, self.seed)?;
            self.trained.insert(context, out);
        }
        Ok(&self.trained[&context])
    }
}

impl ContextLearner for NetworkLearner {
    type Model = ContextNet;

    fn train(&mut self, context: usize) -> Result<TrainedModel<ContextNet>> {
        let out = self.train_context(context)?;
        Ok(TrainedModel {
            model: ContextNet { context, net: out.net.clone() },
            loss_history: out.loss_history.clone(),
            converged: out.converged,
        })
    }

    fn evaluate(&mut self, model: &ContextNet, context: usize) -> Result<f64> {
        if let Some(v) = self.evaluations.get(&(model.context, context)) {
            return Ok(*v);
        }
        let v = evaluate_loss(&model.net, context, &self.pool, &self.train, &self.sim, self.eval_seed(context))?;
        self.evaluations.insert((model.context, context), v);
        Ok(v)
    }

    fn evaluate_pool(&mut self, model: &ContextNet, pool_len: usize) -> Result<Vec<f64>> {
        let missing: Vec<usize> =
            (0..pool_len).filter(|c| !self.evaluations.contains_key(&(model.context, *c))).collect();
        let this = &*self;
        let fresh: Vec<(usize, f64)> = missing
            .par_iter()
            .map(|&c| {
                evaluate_loss(&model.net, c, &this.pool, &this.train, &this.sim, this.eval_seed(c)).map(|v| (c, v))
            })
            .collect::<Result<_>>()?;
        for (c, v) in fresh {
            self.evaluations.insert((model.context, c), v);
        }
        Ok((0..pool_len).map(|c| self.evaluations[&(model.context, c)]).collect())
    }

    fn history_ref(&self, context: usize) -> String {
        format!("{}.json", self.pool[context].label())
    }
}
