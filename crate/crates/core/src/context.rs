//! Context functions reducing a masked annotation sequence to one vector per
//! example: the last valid state, or an attention-weighted sum.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::init;
use crate::scalar::Scalar;
use crate::sequence::SeqLayout;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextFn {
    /// Last valid annotation.
    C1,
    /// Attention pooling.
    C2,
}

/// Additive scorer `e_t = v_aᵀ·tanh(z_t·W_a + cond·U_a + b_a)`.
#[derive(Clone, Debug)]
pub struct AttentionScorer {
    pub w_a: ParamId,
    pub u_a: Option<ParamId>,
    pub v_a: ParamId,
    pub b_a: ParamId,
    pub input_dim: usize,
    pub cond_dim: Option<usize>,
    pub width: usize,
}

pub const DEFAULT_ATTENTION_WIDTH: usize = 200;

impl AttentionScorer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        cond_dim: Option<usize>,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w_a = store.add(
            format!("{name}.W_a"),
            init::uniform(&[input_dim, width], init::INIT_SCALE, rng),
        )?;
        let u_a = match cond_dim {
            Some(d) => Some(store.add(
                format!("{name}.U_a"),
                init::uniform(&[d, width], init::INIT_SCALE, rng),
            )?),
            None => None,
        };
        let v_a = store.add(
            format!("{name}.v_a"),
            init::uniform(&[width], init::INIT_SCALE, rng),
        )?;
        let b_a = store.add(format!("{name}.b_a"), Tensor::zeros(&[width]))?;
        Ok(AttentionScorer {
            w_a,
            u_a,
            v_a,
            b_a,
            input_dim,
            cond_dim,
            width,
        })
    }

    /// Unnormalized scores `[n × T]`. Padding positions hold arbitrary
    /// values; the softmax mask removes them.
    pub fn scores<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: NodeId,
        layout: &SeqLayout,
        condition: Option<NodeId>,
    ) -> Result<NodeId> {
        let s = g.shape(z);
        if s.len() != 2 || s[0] != layout.rows() || s[1] != self.input_dim {
            return Err(Error::dim("attention", s, &[layout.rows(), self.input_dim]));
        }
        let w = g.param(store, self.w_a);
        let b = g.param(store, self.b_a);
        let zw = g.matmul(z, w)?;
        let mut pre = g.add(zw, b)?;
        match (self.u_a, condition) {
            (Some(u), Some(c)) => {
                let u = g.param(store, u);
                let cu = g.matmul(c, u)?;
                if g.shape(cu)[0] != layout.batch() {
                    return Err(Error::dim(
                        "attention condition",
                        g.shape(c),
                        &[layout.batch()],
                    ));
                }
                let tiled = g.gather_rows(cu, &layout.tile_rows(), None)?;
                pre = g.add(pre, tiled)?;
            }
            (None, None) => {}
            (Some(_), None) => {
                return Err(Error::Config(
                    "conditioned attention scorer called without a condition".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(Error::Config(
                    "condition supplied to an unconditioned attention scorer".into(),
                ))
            }
        }
        let act = g.tanh(pre);
        let v = g.param(store, self.v_a);
        let v = g.reshape(v, &[self.width, 1])?;
        let e = g.matmul(act, v)?;
        let e = g.reshape(e, &[layout.steps(), layout.batch()])?;
        g.transpose(e)
    }
}

/// `context: [n × D]`; `alphas: [n × T]` for attention, `None` for the
/// last-state context.
#[derive(Clone, Copy, Debug)]
pub struct ContextOutput {
    pub context: NodeId,
    pub alphas: Option<NodeId>,
}

/// Annotation at each example's last valid timestep.
pub fn context_last<T: Scalar>(
    g: &mut Graph<T>,
    z: NodeId,
    layout: &SeqLayout,
) -> Result<ContextOutput> {
    let s = g.shape(z);
    if s.len() != 2 || s[0] != layout.rows() {
        return Err(Error::dim("context_last", s, &[layout.rows()]));
    }
    let rows = layout.last_rows()?;
    Ok(ContextOutput {
        context: g.gather_rows(z, &rows, None)?,
        alphas: None,
    })
}

/// `α = softmax_masked(scores)`, `context = Σ_t α_t·z_t`.
pub fn context_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    z: NodeId,
    layout: &SeqLayout,
    scorer: &AttentionScorer,
    condition: Option<NodeId>,
) -> Result<ContextOutput> {
    let e = scorer.scores(g, store, z, layout, condition)?;
    let alphas = g.softmax_masked(e, &layout.mask())?;
    Ok(ContextOutput {
        context: g.attention_pool(alphas, z)?,
        alphas: Some(alphas),
    })
}
