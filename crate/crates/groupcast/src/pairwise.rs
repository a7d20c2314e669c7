//! Pair-wise relational transformer layer.
//!
//! Attention where query, key and value each absorb a projected pair-edge
//! feature, making the query pair-specific: for the pair pointing from
//! source j to destination i,
//!
//!   q_ij = n_i Wq_node + e_ij Wq_edge
//!   k_ij = n_j Wk_node + e_ij Wk_edge
//!   v_ij = n_j Wv_node + e_ij Wv_edge
//!
//! followed by the usual residual / norm / feed-forward node pipeline, then
//! a message-based edge update that consumes the post-update nodes.

use crate::config::ModelConfig;
use crate::error::Result;
use crate::features::{linear, pair_dest_index, pair_src_index, pair_transpose_index};
use crate::numerics::{Real, Tape, ValueId};
use crate::params::{ParameterStore, TapeParams};

pub struct PairQkv {
    /// Each is [N^2, d_n], indexed by pair p = i * N + j.
    pub q: ValueId,
    pub k: ValueId,
    pub v: ValueId,
}

pub fn relational_qkv<F: Real>(
    tape: &mut Tape<F>,
    tp: &TapeParams,
    store: &ParameterStore<F>,
    layer: usize,
    nodes: ValueId,
    edges: ValueId,
    n_agents: usize,
) -> Result<PairQkv> {
    let p = format!("pair.{layer}.attn");
    let dest = pair_dest_index(n_agents);
    let src = pair_src_index(n_agents);

    let node_q = linear(tape, tp, store, &format!("{p}.node_q"), nodes)?;
    let node_k = linear(tape, tp, store, &format!("{p}.node_k"), nodes)?;
    let node_v = linear(tape, tp, store, &format!("{p}.node_v"), nodes)?;
    let edge_q = linear(tape, tp, store, &format!("{p}.edge_q"), edges)?;
    let edge_k = linear(tape, tp, store, &format!("{p}.edge_k"), edges)?;
    let edge_v = linear(tape, tp, store, &format!("{p}.edge_v"), edges)?;

    let q_nodes = tape.gather_rows(node_q, &dest)?;
    let k_nodes = tape.gather_rows(node_k, &src)?;
    let v_nodes = tape.gather_rows(node_v, &src)?;

    Ok(PairQkv {
        q: tape.add(q_nodes, edge_q)?,
        k: tape.add(k_nodes, edge_k)?,
        v: tape.add(v_nodes, edge_v)?,
    })
}

/// The shared [Add & Norm] – [FeedForward] – [Add & Norm] tail. `attended`
/// is the attention output already projected by the output matrix.
fn update_pipeline<F: Real>(
    tape: &mut Tape<F>,
    tp: &TapeParams,
    store: &ParameterStore<F>,
    residual: ValueId,
    attended: ValueId,
    norm1: &str,
    ffn: &str,
    norm2: &str,
) -> Result<ValueId> {
    let sum = tape.add(attended, residual)?;
    let g1 = tp.get(store, &format!("{norm1}.gain"))?;
    let b1 = tp.get(store, &format!("{norm1}.bias"))?;
    let u = tape.layer_norm(sum, g1, b1)?;

    let h = linear(tape, tp, store, &format!("{ffn}.l1"), u)?;
    let h = tape.relu(h)?;
    let z = linear(tape, tp, store, &format!("{ffn}.l2"), h)?;

    let sum2 = tape.add(z, u)?;
    let g2 = tp.get(store, &format!("{norm2}.gain"))?;
    let b2 = tp.get(store, &format!("{norm2}.bias"))?;
    tape.layer_norm(sum2, g2, b2)
}

/// Multi-head relational attention plus the transformer-like node update.
/// Also returns the per-head attention matrices ([N, N] each) for
/// inspection.
pub fn node_update<F: Real>(
    tape: &mut Tape<F>,
    tp: &TapeParams,
    store: &ParameterStore<F>,
    cfg: &ModelConfig,
    layer: usize,
    nodes: ValueId,
    qkv: &PairQkv,
    n_agents: usize,
) -> Result<(ValueId, Vec<ValueId>)> {
    let dh = cfg.head_dim();
    let scale = F::from_f64(cfg.attn_scale_factor());
    let mut contexts = Vec::with_capacity(cfg.heads);
    let mut attn_maps = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(qkv.q, h * dh, dh)?;
        let kh = tape.slice_cols(qkv.k, h * dh, dh)?;
        let vh = tape.slice_cols(qkv.v, h * dh, dh)?;
        let logits = tape.rowwise_dot(qh, kh)?;
        let logits = tape.scale(logits, scale)?;
        let logits = tape.reshape(logits, n_agents, n_agents)?;
        let attn = tape.softmax_rows(logits)?;
        attn_maps.push(attn);
        let attn_flat = tape.reshape(attn, n_agents * n_agents, 1)?;
        let weighted = tape.mul_col_broadcast(vh, attn_flat)?;
        contexts.push(tape.sum_row_blocks(weighted, n_agents)?);
    }
    let ctx = tape.concat_cols(&contexts)?;
    let p = format!("pair.{layer}");
    let attended = linear(tape, tp, store, &format!("{p}.attn.out"), ctx)?;
    let out = update_pipeline(
        tape,
        tp,
        store,
        nodes,
        attended,
        &format!("{p}.node_norm1"),
        &format!("{p}.node_ffn"),
        &format!("{p}.node_norm2"),
    )?;
    Ok((out, attn_maps))
}

/// m_ij = ReLU([e_ij; e_ji; n_i; n_j] W) from post-update nodes.
pub fn pair_message<F: Real>(
    tape: &mut Tape<F>,
    tp: &TapeParams,
    store: &ParameterStore<F>,
    layer: usize,
    updated_nodes: ValueId,
    edges: ValueId,
    n_agents: usize,
) -> Result<ValueId> {
    let e_ji = tape.gather_rows(edges, &pair_transpose_index(n_agents))?;
    let n_i = tape.gather_rows(updated_nodes, &pair_dest_index(n_agents))?;
    let n_j = tape.gather_rows(updated_nodes, &pair_src_index(n_agents))?;
    let cat = tape.concat_cols(&[edges, e_ji, n_i, n_j])?;
    let m = linear(tape, tp, store, &format!("pair.{layer}.message"), cat)?;
    tape.relu(m)
}

/// Residual / norm / feed-forward pipeline over the projected message.
pub fn edge_update<F: Real>(
    tape: &mut Tape<F>,
    tp: &TapeParams,
    store: &ParameterStore<F>,
    layer: usize,
    edges: ValueId,
    messages: ValueId,
) -> Result<ValueId> {
    let p = format!("pair.{layer}");
    let projected = linear(tape, tp, store, &format!("{p}.edge_proj"), messages)?;
    update_pipeline(
        tape,
        tp,
        store,
        edges,
        projected,
        &format!("{p}.edge_norm1"),
        &format!("{p}.edge_ffn"),
        &format!("{p}.edge_norm2"),
    )
}

/// One full layer: node update first, edge update from post-update nodes.
pub fn layer<F: Real>(
    tape: &mut Tape<F>,
    tp: &TapeParams,
    store: &ParameterStore<F>,
    cfg: &ModelConfig,
    layer_idx: usize,
    nodes: ValueId,
    edges: ValueId,
    n_agents: usize,
) -> Result<(ValueId, ValueId)> {
    let qkv = relational_qkv(tape, tp, store, layer_idx, nodes, edges, n_agents)?;
    let (new_nodes, _) = node_update(tape, tp, store, cfg, layer_idx, nodes, &qkv, n_agents)?;
    let messages = pair_message(tape, tp, store, layer_idx, new_nodes, edges, n_agents)?;
    let new_edges = edge_update(tape, tp, store, layer_idx, edges, messages)?;
    Ok((new_nodes, new_edges))
}
