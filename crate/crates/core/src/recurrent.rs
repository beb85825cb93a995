//! GRU and LSTM transitions and a masked (bi)directional sequence runner.
//!
//! Sequence tensors are `[T·n × D]`, time-major (see [`SeqLayout`]).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::init;
use crate::scalar::Scalar;
use crate::sequence::SeqLayout;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Lstm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Input-side weights, state-side weights and bias of one gate.
#[derive(Clone, Debug)]
pub struct Gate {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

impl Gate {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        tag: &str,
        input: usize,
        hidden: usize,
        bias: f64,
        orthogonal: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = store.add(
            format!("{prefix}.W_{tag}"),
            init::uniform(&[input, hidden], init::INIT_SCALE, rng),
        )?;
        let u_init = if orthogonal {
            init::orthogonal(hidden, rng)
        } else {
            init::uniform(&[hidden, hidden], init::INIT_SCALE, rng)
        };
        let u = store.add(format!("{prefix}.U_{tag}"), u_init)?;
        let b = store.add(
            format!("{prefix}.b_{tag}"),
            Tensor::full(&[hidden], T::of(bias)),
        )?;
        Ok(Gate { w, u, b })
    }

    /// `x·W + b` for all rows at once.
    fn project<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }

    /// `projected + s·U`
    fn recur<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        projected: NodeId,
        s: NodeId,
    ) -> Result<NodeId> {
        let u = g.param(store, self.u);
        let su = g.matmul(s, u)?;
        g.add(projected, su)
    }
}

/// Gated recurrent unit with the update gate interpolating toward the
/// candidate: `s_t = (1 − u)⊙s_{t−1} + u⊙c̃`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub reset: Gate,
    pub update: Gate,
    pub candidate: Gate,
    pub input: usize,
    pub hidden: usize,
}

/// LSTM without peepholes. State is `(h, c)`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input_gate: Gate,
    pub forget_gate: Gate,
    pub output_gate: Gate,
    pub candidate: Gate,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug)]
pub enum Cell {
    Gru(GruCell),
    Lstm(LstmCell),
}

/// Recurrent state carried between steps.
#[derive(Clone, Copy, Debug)]
pub enum State {
    Gru(NodeId),
    Lstm { h: NodeId, c: NodeId },
}

impl State {
    pub fn output(&self) -> NodeId {
        match *self {
            State::Gru(s) => s,
            State::Lstm { h, .. } => h,
        }
    }
}

impl GruCell {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        orthogonal: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let gate = |tag, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng| {
            Gate::new(store, prefix, tag, input, hidden, 0.0, orthogonal, rng)
        };
        Ok(GruCell {
            reset: gate("r", store, rng)?,
            update: gate("u", store, rng)?,
            candidate: gate("c", store, rng)?,
            input,
            hidden,
        })
    }

    /// One transition from already-projected inputs (`x·W + b` per gate).
    fn step_projected<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        proj: [NodeId; 3],
        s_prev: NodeId,
    ) -> Result<NodeId> {
        let r = self.reset.recur(g, store, proj[0], s_prev)?;
        let r = g.sigmoid(r);
        let u = self.update.recur(g, store, proj[1], s_prev)?;
        let u = g.sigmoid(u);
        let rs = g.mul(r, s_prev)?;
        let c = self.candidate.recur(g, store, proj[2], rs)?;
        let c = g.tanh(c);
        let keep = g.one_minus(u);
        let old = g.mul(keep, s_prev)?;
        let new = g.mul(u, c)?;
        g.add(old, new)
    }

    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_t: NodeId,
        s_prev: NodeId,
    ) -> Result<NodeId> {
        check_step(g, x_t, s_prev, self.input, self.hidden)?;
        let proj = [
            self.reset.project(g, store, x_t)?,
            self.update.project(g, store, x_t)?,
            self.candidate.project(g, store, x_t)?,
        ];
        self.step_projected(g, store, proj, s_prev)
    }
}

impl LstmCell {
    pub const FORGET_BIAS: f64 = 1.0;

    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        orthogonal: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let gate = |tag, bias, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng| {
            Gate::new(store, prefix, tag, input, hidden, bias, orthogonal, rng)
        };
        Ok(LstmCell {
            input_gate: gate("i", 0.0, store, rng)?,
            forget_gate: gate("f", Self::FORGET_BIAS, store, rng)?,
            output_gate: gate("o", 0.0, store, rng)?,
            candidate: gate("g", 0.0, store, rng)?,
            input,
            hidden,
        })
    }

    fn step_projected<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        proj: [NodeId; 4],
        h_prev: NodeId,
        c_prev: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let i = self.input_gate.recur(g, store, proj[0], h_prev)?;
        let i = g.sigmoid(i);
        let f = self.forget_gate.recur(g, store, proj[1], h_prev)?;
        let f = g.sigmoid(f);
        let o = self.output_gate.recur(g, store, proj[2], h_prev)?;
        let o = g.sigmoid(o);
        let cand = self.candidate.recur(g, store, proj[3], h_prev)?;
        let cand = g.tanh(cand);
        let fc = g.mul(f, c_prev)?;
        let ig = g.mul(i, cand)?;
        let c = g.add(fc, ig)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }

    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_t: NodeId,
        h_prev: NodeId,
        c_prev: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        check_step(g, x_t, h_prev, self.input, self.hidden)?;
        if g.shape(c_prev) != g.shape(h_prev) {
            return Err(Error::dim("lstm_step", g.shape(h_prev), g.shape(c_prev)));
        }
        let proj = [
            self.input_gate.project(g, store, x_t)?,
            self.forget_gate.project(g, store, x_t)?,
            self.output_gate.project(g, store, x_t)?,
            self.candidate.project(g, store, x_t)?,
        ];
        self.step_projected(g, store, proj, h_prev, c_prev)
    }
}

fn check_step<T: Scalar>(
    g: &Graph<T>,
    x: NodeId,
    s: NodeId,
    input: usize,
    hidden: usize,
) -> Result<()> {
    let (sx, ss) = (g.shape(x), g.shape(s));
    if sx.len() != 2 || ss.len() != 2 || sx[1] != input || ss[1] != hidden || sx[0] != ss[0] {
        return Err(Error::dim("recurrent_step", sx, ss));
    }
    Ok(())
}

impl Cell {
    pub fn new<T: Scalar>(
        kind: CellKind,
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        orthogonal: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(match kind {
            CellKind::Gru => {
                Cell::Gru(GruCell::new(store, prefix, input, hidden, orthogonal, rng)?)
            }
            CellKind::Lstm => Cell::Lstm(LstmCell::new(
                store, prefix, input, hidden, orthogonal, rng,
            )?),
        })
    }

    pub fn kind(&self) -> CellKind {
        match self {
            Cell::Gru(_) => CellKind::Gru,
            Cell::Lstm(_) => CellKind::Lstm,
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            Cell::Gru(c) => c.hidden,
            Cell::Lstm(c) => c.hidden,
        }
    }

    pub fn input(&self) -> usize {
        match self {
            Cell::Gru(c) => c.input,
            Cell::Lstm(c) => c.input,
        }
    }

    fn gates(&self) -> Vec<&Gate> {
        match self {
            Cell::Gru(c) => vec![&c.reset, &c.update, &c.candidate],
            Cell::Lstm(c) => vec![&c.input_gate, &c.forget_gate, &c.output_gate, &c.candidate],
        }
    }

    fn zero_state<T: Scalar>(&self, g: &mut Graph<T>, n: usize) -> State {
        let z = g.constant(Tensor::zeros(&[n, self.hidden()]));
        match self {
            Cell::Gru(_) => State::Gru(z),
            Cell::Lstm(_) => State::Lstm { h: z, c: z },
        }
    }

    /// Runs the recurrence over a `[T·n × in]` sequence and returns the
    /// `[T·n × H]` states. The initial state is zero. At padded timesteps
    /// the state is a copy of the previous one. The backward direction
    /// walks each example's valid prefix from its last step to its first.
    pub fn run<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        layout: &SeqLayout,
        direction: Direction,
    ) -> Result<NodeId> {
        let s = g.shape(x);
        if s.len() != 2 || s[0] != layout.rows() || s[1] != self.input() {
            return Err(Error::dim("rnn_forward", s, &[layout.rows(), self.input()]));
        }
        let perm = (direction == Direction::Backward).then(|| layout.reverse_perm());
        let x = match &perm {
            Some(p) => g.gather_rows(x, p, None)?,
            None => x,
        };
        let n = layout.batch();
        let projected: Vec<NodeId> = self
            .gates()
            .iter()
            .map(|gate| gate.project(g, store, x))
            .collect::<Result<_>>()?;
        let mut state = self.zero_state(g, n);
        let mut outputs = Vec::with_capacity(layout.steps());
        for t in 0..layout.steps() {
            let proj: Vec<NodeId> = projected
                .iter()
                .map(|&p| g.slice_rows(p, t * n, n))
                .collect::<Result<_>>()?;
            let next = match (self, state) {
                (Cell::Gru(c), State::Gru(s)) => {
                    State::Gru(c.step_projected(g, store, [proj[0], proj[1], proj[2]], s)?)
                }
                (Cell::Lstm(c), State::Lstm { h, c: cs }) => {
                    let (h2, c2) =
                        c.step_projected(g, store, [proj[0], proj[1], proj[2], proj[3]], h, cs)?;
                    State::Lstm { h: h2, c: c2 }
                }
                _ => unreachable!("state kind follows cell kind"),
            };
            let valid = layout.valid_at(t);
            state = if valid.iter().all(|&v| v) {
                next
            } else {
                match (next, state) {
                    (State::Gru(a), State::Gru(b)) => State::Gru(g.select_rows(&valid, a, b)?),
                    (State::Lstm { h: h1, c: c1 }, State::Lstm { h: h0, c: c0 }) => State::Lstm {
                        h: g.select_rows(&valid, h1, h0)?,
                        c: g.select_rows(&valid, c1, c0)?,
                    },
                    _ => unreachable!(),
                }
            };
            outputs.push(state.output());
        }
        let out = g.concat(&outputs, 0)?;
        match &perm {
            Some(p) => g.gather_rows(out, p, None),
            None => Ok(out),
        }
    }
}

/// Independent forward and backward cells; per-step output `[fwd_t ; bwd_t]`.
#[derive(Clone, Debug)]
pub struct BiRnn {
    pub fwd: Cell,
    pub bwd: Cell,
}

impl BiRnn {
    pub fn new<T: Scalar>(
        kind: CellKind,
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        orthogonal: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(BiRnn {
            fwd: Cell::new(
                kind,
                store,
                &format!("{prefix}.fwd"),
                input,
                hidden,
                orthogonal,
                rng,
            )?,
            bwd: Cell::new(
                kind,
                store,
                &format!("{prefix}.bwd"),
                input,
                hidden,
                orthogonal,
                rng,
            )?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.fwd.hidden() + self.bwd.hidden()
    }

    /// `[T·n × 2H]`
    pub fn run<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        layout: &SeqLayout,
    ) -> Result<NodeId> {
        let f = self.fwd.run(g, store, x, layout, Direction::Forward)?;
        let b = self.bwd.run(g, store, x, layout, Direction::Backward)?;
        g.concat(&[f, b], 1)
    }
}
