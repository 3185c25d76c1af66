//! Global-cross transformer: alternating full self-attention within each
//! cloud and cross-attention between clouds, with a feedforward block.
//! Scaled-dot-product softmax attention, single head, post-norm residuals.

use crate::error::{Error, Result};
use crate::matrix::Scalar;
use crate::tape::{Graph, VarId};
use crate::tokenizer::LinearVars;

/// Layer-norm scale/shift handles.
#[derive(Debug, Clone, Copy)]
pub struct LnVars {
    pub gamma: VarId,
    pub beta: VarId,
}

/// One attention sublayer: query/key/value projections, output projection,
/// post-norm layer norm.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub query: LinearVars,
    pub key: LinearVars,
    pub value: LinearVars,
    pub out: LinearVars,
    pub ln: LnVars,
}

/// Feedforward sublayer: d -> hidden -> d with one ReLU, post-norm.
#[derive(Debug, Clone, Copy)]
pub struct FfnVars {
    pub lin: [LinearVars; 2],
    pub ln: LnVars,
}

/// One transformer block. The same parameters serve both clouds, and the
/// cross sublayer serves both directions.
#[derive(Debug, Clone, Copy)]
pub struct GctBlockVars {
    pub self_attn: AttentionVars,
    pub cross_attn: AttentionVars,
    pub ffn: FfnVars,
}

fn check_width<S: Scalar>(g: &Graph<S>, x: VarId, vars: &AttentionVars) -> Result<usize> {
    let d = g.value(x).cols();
    let (dq, din) = g.value(vars.query.w).shape();
    if dq != d || din != d {
        return Err(Error::invalid_argument(format!(
            "attention width mismatch: features {d}, projection {dq}x{din}"
        )));
    }
    Ok(d)
}

/// Scaled-dot-product attention with queries from `x` and keys/values from
/// `kv`, followed by the output projection, residual from `x`, and layer norm.
fn attention<S: Scalar>(
    g: &mut Graph<S>,
    x: VarId,
    kv: VarId,
    vars: &AttentionVars,
    ln_eps: f64,
) -> Result<VarId> {
    let d = check_width(g, x, vars)?;
    if g.value(kv).cols() != d {
        return Err(Error::invalid_argument(format!(
            "attention width mismatch: queries {d}, keys {}",
            g.value(kv).cols()
        )));
    }
    let q = g.linear(x, vars.query.w, vars.query.b);
    let k = g.linear(kv, vars.key.w, vars.key.b);
    let v = g.linear(kv, vars.value.w, vars.value.b);
    let scores = g.matmul_nt(q, k);
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = g.softmax_rows(scaled);
    let mixed = g.matmul(attn, v);
    let projected = g.linear(mixed, vars.out.w, vars.out.b);
    let residual = g.add(x, projected);
    Ok(g.layer_norm(residual, vars.ln.gamma, vars.ln.beta, ln_eps))
}

/// Self-attention over one cloud: every point attends to all points of the
/// same cloud.
pub fn self_attention<S: Scalar>(
    g: &mut Graph<S>,
    x: VarId,
    vars: &AttentionVars,
    ln_eps: f64,
) -> Result<VarId> {
    attention(g, x, x, vars, ln_eps)
}

/// Cross-attention: queries from `x`, keys/values from `y`. Called twice per
/// block with the arguments swapped; the parameters are shared.
pub fn cross_attention<S: Scalar>(
    g: &mut Graph<S>,
    x: VarId,
    y: VarId,
    vars: &AttentionVars,
    ln_eps: f64,
) -> Result<VarId> {
    attention(g, x, y, vars, ln_eps)
}

pub fn feed_forward<S: Scalar>(
    g: &mut Graph<S>,
    x: VarId,
    vars: &FfnVars,
    ln_eps: f64,
) -> Result<VarId> {
    let d = g.value(x).cols();
    if g.value(vars.lin[0].w).cols() != d {
        return Err(Error::invalid_argument(format!(
            "ffn width mismatch: features {d}, fan-in {}",
            g.value(vars.lin[0].w).cols()
        )));
    }
    let h = g.linear(x, vars.lin[0].w, vars.lin[0].b);
    let ha = g.relu(h);
    let o = g.linear(ha, vars.lin[1].w, vars.lin[1].b);
    let residual = g.add(x, o);
    Ok(g.layer_norm(residual, vars.ln.gamma, vars.ln.beta, ln_eps))
}

/// Run the full block stack over both feature matrices. An empty stack is
/// the identity.
pub fn gct_stack<S: Scalar>(
    g: &mut Graph<S>,
    f1: VarId,
    f2: VarId,
    blocks: &[GctBlockVars],
    ln_eps: f64,
) -> Result<(VarId, VarId)> {
    let mut a = f1;
    let mut b = f2;
    for block in blocks {
        let sa = self_attention(g, a, &block.self_attn, ln_eps)?;
        let sb = self_attention(g, b, &block.self_attn, ln_eps)?;
        let ca = cross_attention(g, sa, sb, &block.cross_attn, ln_eps)?;
        let cb = cross_attention(g, sb, sa, &block.cross_attn, ln_eps)?;
        a = feed_forward(g, ca, &block.ffn, ln_eps)?;
        b = feed_forward(g, cb, &block.ffn, ln_eps)?;
    }
    Ok((a, b))
}
