//! Hyper relational transformer layer.
//!
//! Token-wise attention where query, key and value each absorb the mean of
//! the hyperedge features the agent belongs to, carrying group information
//! as additive positional context:
//!
//!   q_i = n_i Wq_node + mean{h_k : agent i in hyperedge k} Wq_group
//!
//! The softmax runs over all agents; the incidence matrix enters only
//! through the aggregated hyperedge terms. Hyperedges are then updated from
//! the mean of their members' post-update node features.

use crate::config::ModelConfig;
use crate::error::Result;
use crate::features::linear;
use crate::numerics::{Real, Tape, Tensor, ValueId};
use crate::params::{ParameterStore, TapeParams};

/// Membership denominators reused across layers: `row` holds per-agent
/// hyperedge counts [N, 1], `col` per-hyperedge member counts [N, 1].
pub struct MembershipCounts {
    pub row: ValueId,
    pub col: ValueId,
}

pub fn membership_counts<F: Real>(
    tape: &mut Tape<F>,
    incidence: ValueId,
    n_agents: usize,
) -> Result<MembershipCounts> {
    let ones = tape.leaf(Tensor::full(vec![n_agents, 1], F::ONE));
    Ok(MembershipCounts {
        row: tape.matmul(incidence, ones)?,
        col: tape.matmul_tn(incidence, ones)?,
    })
}

pub struct HyperQkv {
    /// Each is token-wise: [N, d_n].
    pub q: ValueId,
    pub k: ValueId,
    pub v: ValueId,
}

pub fn hyper_qkv<F: Real>(
    tape: &mut Tape<F>,
    tp: &TapeParams,
    store: &ParameterStore<F>,
    layer: usize,
    nodes: ValueId,
    hyperedges: ValueId,
    incidence: ValueId,
    counts: &MembershipCounts,
) -> Result<HyperQkv> {
    let p = format!("hyper.{layer}.attn");
    // Per-agent mean of the hyperedge features it belongs to.
    let sums = tape.matmul(incidence, hyperedges)?;
    let agg = tape.div_col_broadcast(sums, counts.row)?;

    let node_q = linear(tape, tp, store, &format!("{p}.node_q"), nodes)?;
    let node_k = linear(tape, tp, store, &format!("{p}.node_k"), nodes)?;
    let node_v = linear(tape, tp, store, &format!("{p}.node_v"), nodes)?;
    let group_q = linear(tape, tp, store, &format!("{p}.group_q"), agg)?;
    let group_k = linear(tape, tp, store, &format!("{p}.group_k"), agg)?;
    let group_v = linear(tape, tp, store, &format!("{p}.group_v"), agg)?;

    Ok(HyperQkv {
        q: tape.add(node_q, group_q)?,
        k: tape.add(node_k, group_k)?,
        v: tape.add(node_v, group_v)?,
    })
}

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

/// Standard multi-head scaled dot-product attention over all agents, then
/// the residual / norm / feed-forward node pipeline.
pub fn node_update<F: Real>(
    tape: &mut Tape<F>,
    tp: &TapeParams,
    store: &ParameterStore<F>,
    cfg: &ModelConfig,
    layer: usize,
    nodes: ValueId,
    qkv: &HyperQkv,
) -> Result<(ValueId, Vec<ValueId>)> {
    let dh = cfg.head_dim();
    let scale = F::from_f64(cfg.attn_scale_factor());
    let mut contexts = Vec::with_capacity(cfg.heads);
    let mut attn_maps = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(qkv.q, h * dh, dh)?;
        let kh = tape.slice_cols(qkv.k, h * dh, dh)?;
        let vh = tape.slice_cols(qkv.v, h * dh, dh)?;
        let logits = tape.matmul_nt(qh, kh)?;
        let logits = tape.scale(logits, scale)?;
        let attn = tape.softmax_rows(logits)?;
        attn_maps.push(attn);
        contexts.push(tape.matmul(attn, vh)?);
    }
    let ctx = tape.concat_cols(&contexts)?;
    let p = format!("hyper.{layer}");
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

/// m_i = ReLU([h_i; mean of member post-update nodes] W).
pub fn hyper_message<F: Real>(
    tape: &mut Tape<F>,
    tp: &TapeParams,
    store: &ParameterStore<F>,
    layer: usize,
    hyperedges: ValueId,
    updated_nodes: ValueId,
    incidence: ValueId,
    counts: &MembershipCounts,
) -> Result<ValueId> {
    let sums = tape.matmul_tn(incidence, updated_nodes)?;
    let member_mean = tape.div_col_broadcast(sums, counts.col)?;
    let cat = tape.concat_cols(&[hyperedges, member_mean])?;
    let m = linear(tape, tp, store, &format!("hyper.{layer}.message"), cat)?;
    tape.relu(m)
}

pub fn hyperedge_update<F: Real>(
    tape: &mut Tape<F>,
    tp: &TapeParams,
    store: &ParameterStore<F>,
    layer: usize,
    hyperedges: ValueId,
    messages: ValueId,
) -> Result<ValueId> {
    let p = format!("hyper.{layer}");
    let projected = linear(tape, tp, store, &format!("{p}.hyperedge_proj"), messages)?;
    update_pipeline(
        tape,
        tp,
        store,
        hyperedges,
        projected,
        &format!("{p}.hyperedge_norm1"),
        &format!("{p}.hyperedge_ffn"),
        &format!("{p}.hyperedge_norm2"),
    )
}

/// One full layer: node update first, hyperedge update from post-update
/// nodes. The incidence matrix is fixed across layers.
pub fn layer<F: Real>(
    tape: &mut Tape<F>,
    tp: &TapeParams,
    store: &ParameterStore<F>,
    cfg: &ModelConfig,
    layer_idx: usize,
    nodes: ValueId,
    hyperedges: ValueId,
    incidence: ValueId,
    counts: &MembershipCounts,
) -> Result<(ValueId, ValueId)> {
    let qkv = hyper_qkv(tape, tp, store, layer_idx, nodes, hyperedges, incidence, counts)?;
    let (new_nodes, _) = node_update(tape, tp, store, cfg, layer_idx, nodes, &qkv)?;
    let messages = hyper_message(
        tape,
        tp,
        store,
        layer_idx,
        hyperedges,
        new_nodes,
        incidence,
        counts,
    )?;
    let new_hyperedges = hyperedge_update(tape, tp, store, layer_idx, hyperedges, messages)?;
    Ok((new_nodes, new_hyperedges))
}
