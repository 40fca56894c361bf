//! Small parameterized layers shared by the model components.

use crate::embed::INIT_STD;
use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::optim::ParamStore;
use crate::tensor::Tensor;
use rand::Rng;

/// `y = W x + b`
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.register(
            format!("{name}.w"),
            Tensor::randn(vec![out_dim, in_dim], 0.0, INIT_STD, rng),
        );
        let b = store.register(format!("{name}.b"), Tensor::zeros(vec![out_dim]));
        Linear { w, b, out_dim }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        let wx = g.matvec(w, x)?;
        g.add(wx, b)
    }
}

/// One hidden tanh layer followed by a linear output.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub hidden: Linear,
    pub out: Linear,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            hidden: Linear::new(store, &format!("{name}.hidden"), in_dim, hidden_dim, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden_dim, out_dim, rng),
            in_dim,
            out_dim,
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let pre = self.hidden.apply(g, store, x)?;
        let act = g.tanh(pre)?;
        self.out.apply(g, store, act)
    }
}
