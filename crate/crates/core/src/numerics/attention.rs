use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};

/// Output of one scaled dot-product attention call.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub output: Var,
    /// Row-stochastic `a×b` weight matrix.
    pub weights: Var,
}

/// `softmax(Q Kᵀ / √d) V` for `Q: a×d`, `K: b×d`, `V: b×d_v`.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Attended> {
    let (_, d) = g.shape(q);
    let (kr, kd) = g.shape(k);
    let (vr, _) = g.shape(v);
    if d == 0 || kd != d {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("query dim {d}, key dim {kd}"),
        ));
    }
    if kr != vr {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("{kr} keys but {vr} values"),
        ));
    }
    let scores = g.matmul_bt(q, k)?;
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax_rows(scaled);
    let output = g.matmul(weights, v)?;
    Ok(Attended { output, weights })
}

/// Self-attention split across `heads` equal column blocks of the projected inputs.
///
/// Each head attends with its own slice of `x·W_Q`, `x·W_K`, `x·W_V`, scaled by the
/// head width; head outputs are concatenated back to the projection width.
pub fn multi_head_self_attention(
    g: &mut Graph,
    x: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let q = g.matmul(x, w_q)?;
    let k = g.matmul(x, w_k)?;
    let v = g.matmul(x, w_v)?;
    let width = g.shape(q).1;
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "projection width {width} not divisible by {heads} heads"
        )));
    }
    let dh = width / heads;
    let mut outputs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let att = scaled_dot_attention(g, qh, kh, vh)?;
        outputs.push(att.output);
        weights.push(att.weights);
    }
    let out = if outputs.len() == 1 {
        outputs[0]
    } else {
        g.concat_cols(&outputs)?
    };
    Ok((out, weights))
}
