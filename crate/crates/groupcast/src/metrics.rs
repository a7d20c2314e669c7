//! Best-of-K displacement metrics and the constant-velocity baseline.
//!
//! Metrics run on plain double-precision arrays, separate from the training
//! loss; the test suite checks both against brute-force enumeration.

use crate::config::MetricMode;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use serde::Serialize;

/// K candidate future trajectories for every agent, in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    k: usize,
    n: usize,
    t_f: usize,
    /// Row-major [k, n, t_f, 2].
    data: Vec<f64>,
}

impl PredictionSet {
    pub fn new(k: usize, n: usize, t_f: usize, data: Vec<f64>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("prediction set needs at least one head".into()));
        }
        if data.len() != k * n * t_f * 2 {
            return Err(Error::Shape(format!(
                "prediction set [{k}, {n}, {t_f}, 2] needs {} values, got {}",
                k * n * t_f * 2,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("prediction set contains non-finite values".into()));
        }
        Ok(PredictionSet { k, n, t_f, data })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_agents(&self) -> usize {
        self.n
    }

    pub fn t_f(&self) -> usize {
        self.t_f
    }

    pub fn at(&self, k: usize, agent: usize, t: usize, coord: usize) -> f64 {
        self.data[((k * self.n + agent) * self.t_f + t) * 2 + coord]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Restrict to the first `k` heads.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k {
            return Err(Error::Config(format!(
                "cannot evaluate best-of-{k} with {} decoder heads",
                self.k
            )));
        }
        Ok(PredictionSet {
            k,
            n: self.n,
            t_f: self.t_f,
            data: self.data[..k * self.n * self.t_f * 2].to_vec(),
        })
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct MetricReport {
    pub min_ade: f64,
    pub min_fde: f64,
    pub k: usize,
    pub mode: MetricMode,
}

fn dist(px: f64, py: f64, gx: f64, gy: f64) -> f64 {
    let dx = px - gx;
    let dy = py - gy;
    (dx * dx + dy * dy).sqrt()
}

/// Best-of-K displacement errors against the true future [N, t_f, 2].
///
/// Joint mode scores all agents together: the k minimizing the scene
/// aggregate is picked once. Marginal mode lets every agent pick its own
/// best k, then averages.
pub fn min_ade_fde(preds: &PredictionSet, gt: &Tensor<f64>, mode: MetricMode) -> Result<MetricReport> {
    let (k, n, t_f) = (preds.k, preds.n, preds.t_f);
    if gt.shape() != [n, t_f, 2] {
        return Err(Error::Shape(format!(
            "ground truth shape {:?} does not match predictions [{n}, {t_f}, 2]",
            gt.shape()
        )));
    }
    let g = gt.data();
    let gt_at = |agent: usize, t: usize, c: usize| g[(agent * t_f + t) * 2 + c];

    // Per (k, agent): mean pointwise distance and final-step distance.
    let mut ade = vec![0.0f64; k * n];
    let mut fde = vec![0.0f64; k * n];
    for kk in 0..k {
        for a in 0..n {
            let mut acc = 0.0;
            for t in 0..t_f {
                acc += dist(
                    preds.at(kk, a, t, 0),
                    preds.at(kk, a, t, 1),
                    gt_at(a, t, 0),
                    gt_at(a, t, 1),
                );
            }
            ade[kk * n + a] = acc / t_f as f64;
            fde[kk * n + a] = dist(
                preds.at(kk, a, t_f - 1, 0),
                preds.at(kk, a, t_f - 1, 1),
                gt_at(a, t_f - 1, 0),
                gt_at(a, t_f - 1, 1),
            );
        }
    }

    let (min_ade, min_fde) = match mode {
        MetricMode::Joint => {
            let mut best_ade = f64::INFINITY;
            let mut best_fde = f64::INFINITY;
            for kk in 0..k {
                let scene_ade: f64 = ade[kk * n..(kk + 1) * n].iter().sum::<f64>() / n as f64;
                let scene_fde: f64 = fde[kk * n..(kk + 1) * n].iter().sum::<f64>() / n as f64;
                best_ade = best_ade.min(scene_ade);
                best_fde = best_fde.min(scene_fde);
            }
            (best_ade, best_fde)
        }
        MetricMode::Marginal => {
            let mut sum_ade = 0.0;
            let mut sum_fde = 0.0;
            for a in 0..n {
                let best_ade = (0..k).map(|kk| ade[kk * n + a]).fold(f64::INFINITY, f64::min);
                let best_fde = (0..k).map(|kk| fde[kk * n + a]).fold(f64::INFINITY, f64::min);
                sum_ade += best_ade;
                sum_fde += best_fde;
            }
            (sum_ade / n as f64, sum_fde / n as f64)
        }
    };

    Ok(MetricReport {
        min_ade,
        min_fde,
        k,
        mode,
    })
}

/// Mean of per-scene reports. Errors on an empty list rather than yielding
/// NaN.
pub fn mean_report(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::Data("no scenes to aggregate metrics over".into()));
    }
    let n = reports.len() as f64;
    Ok(MetricReport {
        min_ade: reports.iter().map(|r| r.min_ade).sum::<f64>() / n,
        min_fde: reports.iter().map(|r| r.min_fde).sum::<f64>() / n,
        k: reports[0].k,
        mode: reports[0].mode,
    })
}

/// Extrapolate each agent's last observed displacement uniformly: the
/// sanity floor for learned predictors. `obs` is [N, t_p, 2] absolute
/// positions with t_p >= 2; the result is a single-head prediction set.
pub fn constant_velocity_baseline(obs: &Tensor<f64>, t_f: usize) -> Result<PredictionSet> {
    if obs.shape().len() != 3 || obs.shape()[2] != 2 || obs.shape()[1] < 2 {
        return Err(Error::Shape(format!(
            "constant-velocity baseline needs [N, t_p >= 2, 2] observations, got {:?}",
            obs.shape()
        )));
    }
    let n = obs.shape()[0];
    let t_p = obs.shape()[1];
    let d = obs.data();
    let at = |a: usize, t: usize, c: usize| d[(a * t_p + t) * 2 + c];
    let mut out = Vec::with_capacity(n * t_f * 2);
    for a in 0..n {
        let vx = at(a, t_p - 1, 0) - at(a, t_p - 2, 0);
        let vy = at(a, t_p - 1, 1) - at(a, t_p - 2, 1);
        for t in 0..t_f {
            out.push(at(a, t_p - 1, 0) + vx * (t + 1) as f64);
            out.push(at(a, t_p - 1, 1) + vy * (t + 1) as f64);
        }
    }
    PredictionSet::new(1, n, t_f, out)
}
