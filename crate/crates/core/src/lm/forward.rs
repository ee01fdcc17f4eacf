//! Pre-norm decoder-only transformer recorded on a [`Graph`].

use super::config::LoraTarget;
use super::tokenizer::TokenId;
use super::weights::Head;
use super::LmError;
use crate::tensor::{Graph, Scalar, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Graph handles for a head's parameters, in the same order as
/// `BaseWeights::params` and `LoraAdapter::params`.
#[derive(Debug, Clone)]
pub struct Bindings {
    pub base: Vec<Var>,
    pub adapter: Vec<Var>,
}

struct BoundLayer {
    ln1: (Var, Var),
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln2: (Var, Var),
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

fn check_tokens(head: &Head<'_, impl Scalar>, tokens: &[TokenId]) -> Result<(), LmError> {
    let cfg = head.config();
    if tokens.is_empty() {
        return Err(LmError::Contract("forward needs at least one token".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(LmError::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(LmError::Contract(format!(
            "token {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Records the forward pass and returns `[len, vocab]` logits plus the
/// parameter bindings needed to read gradients back.
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    head: &Head<'_, T>,
    tokens: &[TokenId],
) -> Result<(Var, Bindings), LmError> {
    check_tokens(head, tokens)?;
    let base = head.base;
    let cfg = &base.config;

    let tok_emb = g.param(&base.tok_emb)?;
    let pos_emb = g.param(&base.pos_emb)?;
    let mut base_vars = vec![tok_emb, pos_emb];
    let mut layers = Vec::with_capacity(base.layers.len());
    for l in &base.layers {
        let bound = BoundLayer {
            ln1: (g.param(&l.ln1_gamma)?, g.param(&l.ln1_beta)?),
            wq: g.param(&l.wq)?,
            wk: g.param(&l.wk)?,
            wv: g.param(&l.wv)?,
            wo: g.param(&l.wo)?,
            ln2: (g.param(&l.ln2_gamma)?, g.param(&l.ln2_beta)?),
            w1: g.param(&l.w1)?,
            b1: g.param(&l.b1)?,
            w2: g.param(&l.w2)?,
            b2: g.param(&l.b2)?,
        };
        base_vars.extend([
            bound.ln1.0, bound.ln1.1, bound.wq, bound.wk, bound.wv, bound.wo, bound.ln2.0,
            bound.ln2.1, bound.w1, bound.b1, bound.w2, bound.b2,
        ]);
        layers.push(bound);
    }
    let lnf = (g.param(&base.lnf_gamma)?, g.param(&base.lnf_beta)?);
    let w_out = g.param(&base.w_out)?;
    base_vars.extend([lnf.0, lnf.1, w_out]);

    let mut adapter_vars = Vec::new();
    let mut lora: Vec<(usize, LoraTarget, Var, Var)> = Vec::new();
    if let Some(ad) = head.adapter {
        for b in &ad.blocks {
            let a = g.param(&b.a)?;
            let bb = g.param(&b.b)?;
            adapter_vars.extend([a, bb]);
            lora.push((b.layer, b.target, a, bb));
        }
    }
    let lora_scale = T::from_f64(head.adapter.map_or(0.0, |a| a.scale()));

    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let te = g.embedding(tok_emb, &ids)?;
    let pe = g.embedding(pos_emb, &positions)?;
    let mut x = g.add(te, pe)?;

    for (i, l) in layers.iter().enumerate() {
        let h = g.layer_norm(x, l.ln1.0, l.ln1.1, LN_EPS)?;
        let project = |g: &mut Graph<T>, input: Var, w: Var, target: LoraTarget| -> Result<Var, LmError> {
            let y = g.matmul_nt(input, w)?;
            match lora.iter().find(|(li, t, _, _)| *li == i && *t == target) {
                Some(&(_, _, a, b)) => {
                    let low = g.matmul_nt(input, a)?;
                    let up = g.matmul_nt(low, b)?;
                    let scaled = g.scale(up, lora_scale)?;
                    Ok(g.add(y, scaled)?)
                }
                None => Ok(y),
            }
        };
        let q = project(g, h, l.wq, LoraTarget::Query)?;
        let k = project(g, h, l.wk, LoraTarget::Key)?;
        let v = project(g, h, l.wv, LoraTarget::Value)?;
        let att = g.causal_attention(q, k, v, cfg.n_heads)?;
        let o = project(g, att, l.wo, LoraTarget::Output)?;
        x = g.add(x, o)?;

        let h2 = g.layer_norm(x, l.ln2.0, l.ln2.1, LN_EPS)?;
        let f = g.matmul_nt(h2, l.w1)?;
        let f = g.add_row(f, l.b1)?;
        let f = g.gelu(f)?;
        let f = g.matmul_nt(f, l.w2)?;
        let f = g.add_row(f, l.b2)?;
        x = g.add(x, f)?;
    }
    let x = g.layer_norm(x, lnf.0, lnf.1, LN_EPS)?;
    let logits = g.matmul_nt(x, w_out)?;
    Ok((
        logits,
        Bindings {
            base: base_vars,
            adapter: adapter_vars,
        },
    ))
}

/// Logits `[len, vocab]` for a token sequence.
pub fn forward<T: Scalar>(head: &Head<'_, T>, tokens: &[TokenId]) -> Result<Tensor<T>, LmError> {
    let mut g = Graph::new();
    let (logits, _) = forward_graph(&mut g, head, tokens)?;
    Ok(g.to_tensor(logits)?)
}
