use rand::Rng;

use super::graph::{Graph, NodeId};
use super::params::{glorot_uniform, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handles to one LSTM cell's weights inside a [`ParamStore`].
///
/// Gates are packed along the output axis in the order input, forget,
/// output, candidate, so `w_input` is `[input_dim, 4·hidden]`, `w_state` is
/// `[state_dim, 4·hidden]` and `bias` is `[4·hidden]`. `state_dim` is
/// normally `hidden`; the read-attention cell feeds a wider recurrent state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub w_input: ParamId,
    pub w_state: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub state_dim: usize,
    pub hidden: usize,
}

/// LSTM weights placed on a particular graph.
#[derive(Clone, Copy, Debug)]
pub struct LstmNodes {
    w_input: NodeId,
    w_state: NodeId,
    bias: NodeId,
    hidden: usize,
}

impl LstmParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        state_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden == 0 || input_dim == 0 || state_dim == 0 {
            return Err(Error::contract("LSTM dimensions must be positive"));
        }
        let gates = 4 * hidden;
        let w_input = store.add(
            format!("{prefix}.w_input"),
            glorot_uniform(rng, vec![input_dim, gates], input_dim, gates),
        )?;
        let w_state = store.add(
            format!("{prefix}.w_state"),
            glorot_uniform(rng, vec![state_dim, gates], state_dim, gates),
        )?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(vec![gates]))?;
        Ok(Self {
            w_input,
            w_state,
            bias,
            input_dim,
            state_dim,
            hidden,
        })
    }

    /// Recover handles from a loaded store, checking that the shapes agree.
    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        let w_input = store.require(&format!("{prefix}.w_input"))?;
        let w_state = store.require(&format!("{prefix}.w_state"))?;
        let bias = store.require(&format!("{prefix}.bias"))?;
        let (wi, ws, b) = (store.get(w_input), store.get(w_state), store.get(bias));
        let ok = wi.rank() == 2
            && ws.rank() == 2
            && b.rank() == 1
            && wi.shape()[1] == b.shape()[0]
            && ws.shape()[1] == b.shape()[0]
            && b.shape()[0] % 4 == 0
            && b.shape()[0] > 0;
        if !ok {
            return Err(Error::Decode(format!(
                "LSTM {prefix}: inconsistent gate shapes {:?} {:?} {:?}",
                wi.shape(),
                ws.shape(),
                b.shape()
            )));
        }
        Ok(Self {
            w_input,
            w_state,
            bias,
            input_dim: wi.shape()[0],
            state_dim: ws.shape()[0],
            hidden: b.shape()[0] / 4,
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<LstmNodes> {
        Ok(LstmNodes {
            w_input: g.param(store, self.w_input)?,
            w_state: g.param(store, self.w_state)?,
            bias: g.param(store, self.bias)?,
            hidden: self.hidden,
        })
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.w_input, self.w_state, self.bias]
    }
}

/// One LSTM step: returns `(h', c')`.
///
/// `i, f, o = σ(·)`, `ĉ = tanh(·)`, `c' = f⊙c + i⊙ĉ`, `h' = o⊙tanh(c')`.
pub fn lstm_step(
    g: &mut Graph,
    cell: &LstmNodes,
    state: NodeId,
    c: NodeId,
    x: NodeId,
) -> Result<(NodeId, NodeId)> {
    let hidden = cell.hidden;
    if g.value(c).shape() != [hidden] {
        return Err(Error::contract(format!(
            "lstm_step: cell state {:?} != [{hidden}]",
            g.value(c).shape()
        )));
    }
    let from_x = g.affine(x, cell.w_input, Some(cell.bias))?;
    let from_h = g.affine(state, cell.w_state, None)?;
    let pre = g.add(from_x, from_h)?;
    let i_pre = g.slice(pre, 0, hidden)?;
    let f_pre = g.slice(pre, hidden, hidden)?;
    let o_pre = g.slice(pre, 2 * hidden, hidden)?;
    let c_pre = g.slice(pre, 3 * hidden, hidden)?;
    let i = g.sigmoid(i_pre)?;
    let f = g.sigmoid(f_pre)?;
    let o = g.sigmoid(o_pre)?;
    let cand = g.tanh(c_pre)?;
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next)?;
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}
