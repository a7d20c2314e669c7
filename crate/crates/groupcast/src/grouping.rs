//! Adaptive group estimation.
//!
//! Agents are grouped by thresholding the cosine affinity of their initial
//! embeddings: hyperedge j collects every agent whose affinity with ego
//! agent j reaches a learnable threshold. The thresholding step is a unit
//! step function in the forward pass; the backward pass substitutes a
//! surrogate gradient so the threshold and the upstream embedding weights
//! stay trainable.

use crate::error::{Error, Result};
use crate::numerics::{CustomGradRegion, Real, Tape, Tensor, ValueId};
use serde::{Deserialize, Serialize};
use std::str::FromStr;

/// Norms below this are clamped before the cosine division.
pub const NORM_FLOOR: f64 = 1e-8;

/// Surrogate gradient used for the unit step in the backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteVariant {
    /// 1 on |x| <= 0.5, else 0.
    ClippedPassthrough,
    /// 2 - 4|x| on |x| <= 0.5, else 0. Default.
    Triangle,
    /// 2 - 4|x| on |x| <= 0.4, a constant 0.4 tail out to |x| = 1, else 0.
    LongTailed,
}

impl FromStr for SteVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clipped_passthrough" => Ok(SteVariant::ClippedPassthrough),
            "triangle" => Ok(SteVariant::Triangle),
            "long_tailed" => Ok(SteVariant::LongTailed),
            other => Err(Error::Config(format!(
                "unknown ste_variant: {other} (expected clipped_passthrough, triangle or long_tailed)"
            ))),
        }
    }
}

/// Unit step: 1 iff x >= 0 (the tie at exactly 0 maps to 1).
pub fn unit_step(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Surrogate slope assigned to the unit step at `x`.
pub fn ste_grad(x: f64, variant: SteVariant) -> f64 {
    let a = x.abs();
    match variant {
        SteVariant::ClippedPassthrough => {
            if a <= 0.5 {
                1.0
            } else {
                0.0
            }
        }
        SteVariant::Triangle => {
            if a <= 0.5 {
                2.0 - 4.0 * a
            } else {
                0.0
            }
        }
        SteVariant::LongTailed => {
            if a <= 0.4 {
                2.0 - 4.0 * a
            } else if a <= 1.0 {
                0.4
            } else {
                0.0
            }
        }
    }
}

/// Piecewise-quadratic approximation of the unit step whose derivative is
/// the triangle surrogate on |x| < 0.5.
pub fn unit_step_quadratic_approx(x: f64) -> f64 {
    if x < -0.5 {
        0.0
    } else if x < 0.0 {
        0.5 + 2.0 * x + 2.0 * x * x
    } else if x < 0.5 {
        0.5 + 2.0 * x - 2.0 * x * x
    } else {
        1.0
    }
}

/// Learnable threshold, stored unconstrained and mapped through tanh so the
/// effective value stays strictly inside (-1, 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Threshold {
    pub raw: f64,
}

impl Threshold {
    /// tanh saturates to exactly ±1.0 for |raw| beyond ~19, so the result is
    /// clamped back into the open interval.
    pub fn value(&self) -> f64 {
        self.raw.tanh().clamp(-1.0 + 1e-12, 1.0 - 1e-12)
    }
}

/// Binary N x N incidence matrix: entry (i, j) is 1 iff agent i belongs to
/// the hyperedge anchored at ego agent j. Overlaps are allowed; the
/// diagonal is always 1, so every column is non-empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupIncidence {
    n: usize,
    data: Vec<u8>,
}

impl GroupIncidence {
    pub fn new(n: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Shape(format!(
                "incidence matrix for {n} agents needs {} entries, got {}",
                n * n,
                data.len()
            )));
        }
        for (e, &v) in data.iter().enumerate() {
            if v > 1 {
                return Err(Error::Invariant(format!(
                    "incidence entry {e} is {v}, expected 0 or 1"
                )));
            }
        }
        for i in 0..n {
            if data[i * n + i] != 1 {
                return Err(Error::Invariant(format!(
                    "incidence diagonal must be all ones, agent {i} is not in its own hyperedge"
                )));
            }
        }
        Ok(GroupIncidence { n, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0u8; n * n];
        for i in 0..n {
            data[i * n + i] = 1;
        }
        GroupIncidence { n, data }
    }

    /// Build from a tensor of exact 0.0 / 1.0 entries.
    pub fn from_zero_one<F: Real>(t: &Tensor<F>) -> Result<Self> {
        if t.shape().len() != 2 || t.rows() != t.cols() {
            return Err(Error::Shape(format!(
                "incidence must be square, got shape {:?}",
                t.shape()
            )));
        }
        let n = t.rows();
        let data = t
            .data()
            .iter()
            .map(|&x| {
                let v = x.to_f64();
                if v == 1.0 {
                    Ok(1u8)
                } else if v == 0.0 {
                    Ok(0u8)
                } else {
                    Err(Error::Invariant(format!("non-binary incidence entry {v}")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        GroupIncidence::new(n, data)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn contains(&self, agent: usize, hyperedge: usize) -> bool {
        self.data[agent * self.n + hyperedge] == 1
    }

    /// Agents belonging to hyperedge j (column j).
    pub fn hyperedge_members(&self, j: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.contains(i, j)).collect()
    }

    /// Hyperedges agent i belongs to (row i).
    pub fn memberships(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.contains(i, j)).collect()
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        (0..self.n)
            .map(|i| self.data[i * self.n..(i + 1) * self.n].to_vec())
            .collect()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        Tensor::new(
            vec![self.n, self.n],
            self.data
                .iter()
                .map(|&b| if b == 1 { F::ONE } else { F::ZERO })
                .collect(),
        )
        .expect("incidence tensor")
    }
}

/// Cosine affinity matrix of row embeddings, with norms clamped below at
/// [`NORM_FLOOR`]. Symmetric, unit diagonal for nonzero rows, entries in
/// [-1, 1].
pub fn cosine_affinity<F: Real>(nodes: &Tensor<F>) -> Tensor<F> {
    let n = nodes.rows();
    let d = nodes.cols();
    let floor = F::from_f64(NORM_FLOOR);
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = F::ZERO;
        for j in 0..d {
            let x = nodes.at(i, j);
            s += x * x;
        }
        norms.push(s.sqrt().maximum(floor));
    }
    let mut out = vec![F::ZERO; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut dot = F::ZERO;
            for c in 0..d {
                dot += nodes.at(i, c) * nodes.at(j, c);
            }
            out[i * n + j] = dot / (norms[i] * norms[j]);
        }
    }
    Tensor::new(vec![n, n], out).expect("affinity shape")
}

/// Forward-only group estimation from initial node embeddings.
pub fn estimate_groups<F: Real>(nodes: &Tensor<F>, threshold: &Threshold) -> Result<GroupIncidence> {
    let affinity = cosine_affinity(nodes);
    let n = affinity.rows();
    let theta = threshold.value();
    let data: Vec<u8> = affinity
        .data()
        .iter()
        .map(|&a| unit_step(a.to_f64() - theta) as u8)
        .collect();
    GroupIncidence::new(n, data)
}

/// Tape nodes produced by [`groups_on_tape`], kept for inspection: the
/// affinity matrix, the step input (affinity minus threshold), the binary
/// incidence output and the squashed threshold.
pub struct GroupingTrace {
    pub affinity: ValueId,
    pub step_input: ValueId,
    pub incidence: ValueId,
    pub theta: ValueId,
}

/// Cosine affinity composed from tape primitives, so gradients flow into
/// the embeddings.
pub fn affinity_on_tape<F: Real>(tape: &mut Tape<F>, nodes: ValueId) -> Result<ValueId> {
    let dots = tape.matmul_nt(nodes, nodes)?;
    let sq = tape.rowwise_dot(nodes, nodes)?;
    let norms = tape.sqrt(sq)?;
    let clamped = tape.clamp_min(norms, F::from_f64(NORM_FLOOR))?;
    let outer = tape.matmul_nt(clamped, clamped)?;
    tape.div(dots, outer)
}

/// The unit step as a custom-gradient region. `surrogate = None` zeroes the
/// backward path entirely, which is what finite-difference comparisons use
/// (the step is locally constant, so its true derivative is zero almost
/// everywhere).
pub fn step_region<F: Real>(surrogate: Option<SteVariant>) -> CustomGradRegion<F> {
    CustomGradRegion {
        forward: Box::new(|x: &Tensor<F>| {
            Tensor::new(
                x.shape().to_vec(),
                x.data()
                    .iter()
                    .map(|&v| F::from_f64(unit_step(v.to_f64())))
                    .collect(),
            )
            .expect("step shape")
        }),
        backward: Box::new(move |x: &Tensor<F>, _y: &Tensor<F>, upstream: &Tensor<F>| {
            let data: Vec<F> = match surrogate {
                Some(variant) => x
                    .data()
                    .iter()
                    .zip(upstream.data())
                    .map(|(&v, &u)| u * F::from_f64(ste_grad(v.to_f64(), variant)))
                    .collect(),
                None => vec![F::ZERO; x.numel()],
            };
            Tensor::new(x.shape().to_vec(), data).expect("step grad shape")
        }),
    }
}

/// Estimate groups on the tape: forward is the exact unit step of the
/// thresholded affinity, backward routes `ste_grad(A_ij − Θ)` into the
/// affinity (and through it into the embedding weights) and
/// `−ste_grad(A_ij − Θ) · dΘ/draw` into the raw threshold.
pub fn groups_on_tape<F: Real>(
    tape: &mut Tape<F>,
    nodes: ValueId,
    theta_raw: ValueId,
    surrogate: Option<SteVariant>,
) -> Result<GroupingTrace> {
    let affinity = affinity_on_tape(tape, nodes)?;
    let theta = tape.tanh(theta_raw)?;
    let step_input = tape.sub_scalar(affinity, theta)?;
    let incidence = tape.custom(step_input, step_region(surrogate))?;
    Ok(GroupingTrace {
        affinity,
        step_input,
        incidence,
        theta,
    })
}
