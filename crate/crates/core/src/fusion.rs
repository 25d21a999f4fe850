//! Dual cross attention between the task representations, fused by a
//! bidirectional recurrent layer into `H`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{scaled_dot_attention, BiRnn, CellKind, Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone, Copy)]
pub struct CrossAttended {
    /// Entity representation revised by relation queries.
    pub xe: Var,
    /// Relation representation revised by entity queries.
    pub xr: Var,
    /// `softmax(X_r X_eᵀ / √d)`.
    pub attn_e: Var,
    /// `softmax(X_e X_rᵀ / √d)`.
    pub attn_r: Var,
}

pub fn cross_attend(g: &mut Graph, xe: Var, xr: Var) -> Result<CrossAttended> {
    if g.shape(xe) != g.shape(xr) {
        return Err(Error::shape(
            "cross_attend",
            format!("{:?} vs {:?}", g.shape(xe), g.shape(xr)),
        ));
    }
    let e = scaled_dot_attention(g, xr, xe, xe)?;
    let r = scaled_dot_attention(g, xe, xr, xr)?;
    Ok(CrossAttended {
        xe: e.output,
        xr: r.output,
        attn_e: e.weights,
        attn_r: r.weights,
    })
}

/// Recurrent fusion over `X̃_e ⊕ X̃_r` with `d/2` hidden units per direction.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub rnn: BiRnn,
}

impl Fusion {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        cell: CellKind,
        rng: &mut R,
    ) -> Result<Self> {
        if !dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "model dim {dim} is odd; fusion needs dim/2 hidden units per direction"
            )));
        }
        let rnn = BiRnn::register(store, "fusion", cell, 2 * dim, dim / 2, rng)?;
        Ok(Self { rnn })
    }

    /// `H` (`n × d`).
    pub fn fuse(&self, g: &mut Graph, xe: Var, xr: Var) -> Result<Var> {
        let x = g.concat_cols(&[xe, xr])?;
        Ok(self.rnn.encode(g, x)?.states)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.rnn.param_ids()
    }
}
