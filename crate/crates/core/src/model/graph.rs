//! The forward computation on a tape, shared by pretraining, frozen
//! inference and vector optimization.

use super::weights::{Bound, LayerVars};
use super::ModelConfig;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Add,
    Replace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    /// The hidden state at the output of the layer.
    Residual,
    /// One head's residual-space contribution inside the layer.
    Head(usize),
}

/// An intervention whose vector lives on the tape, so gradients can reach it.
#[derive(Clone, Copy, Debug)]
pub(crate) struct TapePatch {
    /// Row in the stacked batch (`sequence * seq_len + position`).
    pub row: usize,
    pub layer: usize,
    pub mode: Mode,
    pub scope: Scope,
    pub vector: Var,
}

pub(crate) struct Trace {
    /// Hidden state after each block, including any residual patch.
    pub layer_out: Vec<Var>,
    /// `heads[l][j]`: head j's contribution in layer l, `[rows, d_model]`.
    pub heads: Vec<Vec<Var>>,
    pub final_norm: Var,
}

fn apply(tape: &mut Tape<'_>, x: Var, p: &TapePatch) -> Result<Var> {
    match p.mode {
        Mode::Add => tape.add_at_row(x, p.row, p.vector),
        Mode::Replace => tape.replace_row(x, p.row, p.vector),
    }
}

fn block(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    w: &LayerVars,
    layer: usize,
    x: Var,
    seq_len: usize,
    patches: &[TapePatch],
) -> Result<(Var, Vec<Var>)> {
    let dh = cfg.d_head;
    let a = tape.layer_norm(x, w.ln1_g, w.ln1_b)?;
    let q = tape.matmul(a, w.wq)?;
    let q = tape.add_bias(q, w.bq)?;
    let k = tape.matmul(a, w.wk)?;
    let k = tape.add_bias(k, w.bk)?;
    let v = tape.matmul(a, w.wv)?;
    let v = tape.add_bias(v, w.bv)?;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut attn: Option<Var> = None;
    for j in 0..cfg.n_heads {
        let qj = tape.slice_cols(q, j * dh, dh)?;
        let kj = tape.slice_cols(k, j * dh, dh)?;
        let vj = tape.slice_cols(v, j * dh, dh)?;
        let oj = tape.causal_attention(qj, kj, vj, seq_len)?;
        let wo_j = tape.slice_rows(w.wo, j * dh, dh)?;
        let mut c = tape.matmul(oj, wo_j)?;
        for p in patches.iter().filter(|p| p.layer == layer && p.scope == Scope::Head(j)) {
            c = apply(tape, c, p)?;
        }
        heads.push(c);
        attn = Some(match attn {
            None => c,
            Some(acc) => tape.add(acc, c)?,
        });
    }
    let attn = attn.ok_or_else(|| Error::Contract("model has no heads".into()))?;
    let attn = tape.add_bias(attn, w.bo)?;
    let x = tape.add(x, attn)?;
    let m = tape.layer_norm(x, w.ln2_g, w.ln2_b)?;
    let h = tape.matmul(m, w.w1)?;
    let h = tape.add_bias(h, w.b1)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, w.w2)?;
    let h = tape.add_bias(h, w.b2)?;
    let mut x = tape.add(x, h)?;
    for p in patches
        .iter()
        .filter(|p| p.layer == layer && p.scope == Scope::Residual)
    {
        x = apply(tape, x, p)?;
    }
    Ok((x, heads))
}

/// Runs blocks `start..n_layers` on `x` (blocks of `seq_len` rows).
pub(crate) fn run_blocks(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    bound: &Bound,
    mut x: Var,
    seq_len: usize,
    start: usize,
    patches: &[TapePatch],
) -> Result<Trace> {
    let mut layer_out = Vec::new();
    let mut heads = Vec::new();
    for (l, w) in bound.layers.iter().enumerate().skip(start) {
        let (y, h) = block(tape, cfg, w, l, x, seq_len, patches)?;
        x = y;
        layer_out.push(x);
        heads.push(h);
    }
    let final_norm = tape.layer_norm(x, bound.lnf_g, bound.lnf_b)?;
    Ok(Trace {
        layer_out,
        heads,
        final_norm,
    })
}

/// Forward over a batch of equal-length sequences stacked row-wise.
pub(crate) fn run(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    bound: &Bound,
    seqs: &[&[u32]],
    patches: &[TapePatch],
) -> Result<Trace> {
    let seq_len = seqs.first().map(|s| s.len()).unwrap_or(0);
    if seq_len == 0 || seqs.iter().any(|s| s.len() != seq_len) {
        return Err(Error::Contract(
            "batch sequences must be nonempty and of equal length".into(),
        ));
    }
    if seq_len > cfg.max_seq_len {
        return Err(Error::Contract(format!(
            "sequence of {seq_len} tokens exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    let rows = seqs.len() * seq_len;
    for p in patches {
        if p.layer >= cfg.n_layers || p.row >= rows {
            return Err(Error::Contract(format!(
                "intervention at layer {} row {} is outside the {}-layer model / {rows} rows",
                p.layer, p.row, cfg.n_layers
            )));
        }
        if let Scope::Head(j) = p.scope {
            if j >= cfg.n_heads {
                return Err(Error::Contract(format!("head {j} >= {}", cfg.n_heads)));
            }
        }
    }
    let mut ids = Vec::with_capacity(rows);
    for s in seqs {
        for &t in s.iter() {
            if t as usize >= cfg.vocab_size {
                return Err(Error::Contract(format!(
                    "token id {t} >= vocab size {}",
                    cfg.vocab_size
                )));
            }
            ids.push(t as usize);
        }
    }
    let pos: Vec<usize> = (0..rows).map(|r| r % seq_len).collect();
    let e = tape.gather_rows(bound.embed, &ids)?;
    let p = tape.gather_rows(bound.positions, &pos)?;
    let x = tape.add(e, p)?;
    run_blocks(tape, cfg, bound, x, seq_len, 0, patches)
}

/// Logits for the selected stacked rows.
pub(crate) fn logits_at(tape: &mut Tape<'_>, bound: &Bound, trace: &Trace, rows: &[usize]) -> Result<Var> {
    let h = tape.gather_rows(trace.final_norm, rows)?;
    tape.matmul_nt(h, bound.embed)
}
