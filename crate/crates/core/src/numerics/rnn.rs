//! Bidirectional LSTM and GRU encoders.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            other => Err(Error::Config(format!("unknown recurrent cell {other:?}"))),
        }
    }
}

/// Parameters of one direction.
///
/// Gate blocks are laid out along columns: LSTM `[input, forget, candidate, output]`,
/// GRU `[reset, update, candidate]`.
#[derive(Debug, Clone)]
pub struct RnnDirection {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
}

#[derive(Debug, Clone)]
pub struct BiRnn {
    pub cell: CellKind,
    pub input_dim: usize,
    pub hidden: usize,
    pub forward: RnnDirection,
    pub backward: RnnDirection,
}

#[derive(Debug, Clone)]
pub struct BiRnnOutput {
    /// `n × 2h`: forward state then backward state per position.
    pub states: Var,
    /// Forward state after the last position.
    pub last_forward: Var,
    /// Backward state after the first position.
    pub last_backward: Var,
}

impl BiRnn {
    /// Registers both directions. Forget-gate biases start at 1, everything else
    /// uniform in `±1/√hidden`.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cell: CellKind,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden == 0 || input_dim == 0 {
            return Err(Error::Config(format!(
                "{prefix}: recurrent dims must be positive"
            )));
        }
        let bound = 1.0 / (hidden as f64).sqrt();
        let width = cell.gates() * hidden;
        let mut direction = |name: &str| -> Result<RnnDirection> {
            let w_ih = store.register(
                format!("{prefix}.{name}.w_ih"),
                Tensor::uniform(input_dim, width, bound, rng),
            )?;
            let w_hh = store.register(
                format!("{prefix}.{name}.w_hh"),
                Tensor::uniform(hidden, width, bound, rng),
            )?;
            let mut b_ih = Tensor::uniform(1, width, bound, rng);
            let mut b_hh = Tensor::uniform(1, width, bound, rng);
            if cell == CellKind::Lstm {
                // the two biases are summed; together they put the forget gate at 1
                for j in hidden..2 * hidden {
                    b_ih.data_mut()[j] = 1.0;
                    b_hh.data_mut()[j] = 0.0;
                }
            }
            let b_ih = store.register(format!("{prefix}.{name}.b_ih"), b_ih)?;
            let b_hh = store.register(format!("{prefix}.{name}.b_hh"), b_hh)?;
            Ok(RnnDirection {
                w_ih,
                w_hh,
                b_ih,
                b_hh,
            })
        };
        let forward = direction("fwd")?;
        let backward = direction("bwd")?;
        Ok(Self {
            cell,
            input_dim,
            hidden,
            forward,
            backward,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.forward, &self.backward]
            .iter()
            .flat_map(|d| [d.w_ih, d.w_hh, d.b_ih, d.b_hh])
            .collect()
    }

    /// Runs both directions over the rows of `seq` (`n × input_dim`).
    pub fn encode(&self, g: &mut Graph, seq: Var) -> Result<BiRnnOutput> {
        let (n, din) = g.shape(seq);
        if n == 0 {
            return Err(Error::InvalidArgument("recurrent encoder over an empty sequence".into()));
        }
        if din != self.input_dim {
            return Err(Error::shape(
                "birnn_encode",
                format!("input dim {din}, expected {}", self.input_dim),
            ));
        }
        let (fwd, last_forward) = self.run(g, seq, &self.forward, false)?;
        let (bwd, last_backward) = self.run(g, seq, &self.backward, true)?;
        let states = g.concat_cols(&[fwd, bwd])?;
        Ok(BiRnnOutput {
            states,
            last_forward,
            last_backward,
        })
    }

    /// Returns per-position states (in sequence order) and the final state.
    fn run(&self, g: &mut Graph, seq: Var, dir: &RnnDirection, reverse: bool) -> Result<(Var, Var)> {
        let n = g.shape(seq).0;
        let h = self.hidden;
        let w_ih = g.param(dir.w_ih);
        let w_hh = g.param(dir.w_hh);
        let b_ih = g.param(dir.b_ih);
        let b_hh = g.param(dir.b_hh);
        let projected = g.matmul(seq, w_ih)?;
        let projected = g.add_row(projected, b_ih)?;

        let mut hidden = g.zeros(1, h);
        let mut cell = g.zeros(1, h);
        let mut states = vec![hidden; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let x_t = g.row(projected, t)?;
            let rec = g.matmul(hidden, w_hh)?;
            let rec = g.add(rec, b_hh)?;
            match self.cell {
                CellKind::Lstm => {
                    let gates = g.add(x_t, rec)?;
                    let i = g.slice_cols(gates, 0, h)?;
                    let f = g.slice_cols(gates, h, h)?;
                    let c_hat = g.slice_cols(gates, 2 * h, h)?;
                    let o = g.slice_cols(gates, 3 * h, h)?;
                    let i = g.sigmoid(i);
                    let f = g.sigmoid(f);
                    let c_hat = g.tanh(c_hat);
                    let o = g.sigmoid(o);
                    let keep = g.mul(f, cell)?;
                    let write = g.mul(i, c_hat)?;
                    cell = g.add(keep, write)?;
                    let squashed = g.tanh(cell);
                    hidden = g.mul(o, squashed)?;
                }
                CellKind::Gru => {
                    let xr = g.slice_cols(x_t, 0, h)?;
                    let xz = g.slice_cols(x_t, h, h)?;
                    let xn = g.slice_cols(x_t, 2 * h, h)?;
                    let hr = g.slice_cols(rec, 0, h)?;
                    let hz = g.slice_cols(rec, h, h)?;
                    let hn = g.slice_cols(rec, 2 * h, h)?;
                    let r = g.add(xr, hr)?;
                    let r = g.sigmoid(r);
                    let z = g.add(xz, hz)?;
                    let z = g.sigmoid(z);
                    let gated = g.mul(r, hn)?;
                    let cand = g.add(xn, gated)?;
                    let cand = g.tanh(cand);
                    // h' = (1 - z)·n + z·h = n + z·(h - n)
                    let diff = g.sub(hidden, cand)?;
                    let carried = g.mul(z, diff)?;
                    hidden = g.add(cand, carried)?;
                }
            }
            states[t] = hidden;
        }
        let stacked = g.concat_rows(&states)?;
        Ok((stacked, hidden))
    }
}
