//! Wall-clock scaling of one workspace stage against a dense
//! self-attention block of the same widths, over a range of part counts.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{LayerNorm, Linear};
use crate::nn::{ops, Init, ParamStore, Rng, Tensor};
use crate::workspace::{multi_head, workspace_block, AssemblerStates, WorkspaceDims, WorkspaceParams, WorkspaceState};

/// Every assembler attends to every other one; residual and layer norm,
/// no feedforward.
#[derive(Clone, Debug)]
pub struct SelfAttentionParams {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub norm: LayerNorm,
}

impl SelfAttentionParams {
    pub fn new(init: &mut Init<'_>, dims: WorkspaceDims) -> Result<Self> {
        dims.validate()?;
        let (da, de) = (dims.assembler_dim, dims.attn_dim);
        Ok(Self {
            heads: dims.heads,
            query: Linear::projection(init, "query", da, de)?,
            key: Linear::projection(init, "key", da, de)?,
            value: Linear::projection(init, "value", da, da)?,
            norm: LayerNorm::new(init, "norm", da)?,
        })
    }
}

pub fn self_attention_block(a: &AssemblerStates, p: &SelfAttentionParams) -> Result<AssemblerStates> {
    let x = &a.0;
    let (read, _) = multi_head(&p.query.forward(x)?, &p.key.forward(x)?, &p.value.forward(x)?, p.heads, None)?;
    Ok(AssemblerStates(p.norm.forward(&ops::add(x, &read)?)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub ns: Vec<usize>,
    pub slots: usize,
    pub width: usize,
    pub heads: usize,
    pub k: usize,
    /// Timing rounds over all sizes; the fastest batch per size is kept.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ns: vec![16, 32, 64, 128],
            slots: 8,
            width: 16,
            heads: 8,
            k: 10,
            repeats: 25,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ns.len() < 2 || self.ns.contains(&0) {
            return Err(Error::Param("bench needs at least two positive sizes".into()));
        }
        if self.repeats == 0 || self.k == 0 {
            return Err(Error::Param("repeats and k must be positive".into()));
        }
        self.dims().validate()
    }

    pub fn dims(&self) -> WorkspaceDims {
        WorkspaceDims {
            slots: self.slots,
            slot_dim: self.width,
            assembler_dim: self.width,
            attn_dim: self.width,
            heads: self.heads,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n: usize,
    /// Seconds per call.
    pub workspace: f64,
    pub reference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub workspace_slope: f64,
    pub reference_slope: f64,
}

impl ScalingReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,workspace_s,reference_s\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:e},{:e}", r.n, r.workspace, r.reference);
        }
        let _ = writeln!(s, "# slope workspace={:.4} reference={:.4}", self.workspace_slope, self.reference_slope);
        s
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::Numeric("log-log fit needs two or more positive pairs".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Numeric("log-log fit needs distinct sizes".into()));
    }
    Ok(sxy / sxx)
}

/// Calls per timed batch so one batch lasts about `BATCH_SECS`.
const BATCH_SECS: f64 = 2e-3;

fn calibrate<F: FnMut() -> Result<()>>(f: &mut F) -> Result<usize> {
    f()?;
    let start = Instant::now();
    f()?;
    let once = start.elapsed().as_secs_f64().max(1e-9);
    Ok(((BATCH_SECS / once).ceil() as usize).clamp(1, 10_000))
}

fn batch_secs<F: FnMut() -> Result<()>>(f: &mut F, calls: usize) -> Result<f64> {
    let start = Instant::now();
    for _ in 0..calls {
        f()?;
    }
    Ok(start.elapsed().as_secs_f64() / calls as f64)
}

/// Times forward passes of both blocks, one size at a time on the calling
/// thread.
pub fn bench_scaling(cfg: &BenchConfig) -> Result<ScalingReport> {
    cfg.validate()?;
    let dims = cfg.dims();
    let mut store = ParamStore::new();
    let mut rng = Rng::new(cfg.seed);
    let mut init = Init::new(&mut store, &mut rng);
    let ws = WorkspaceParams::new(&mut init.scope("workspace"), dims)?;
    let sa = SelfAttentionParams::new(&mut init.scope("reference"), dims)?;
    let state = WorkspaceState(init.normal("slots", &[cfg.slots, cfg.width], 1.0)?.tensor());

    type Job<'a> = Box<dyn FnMut() -> Result<()> + 'a>;
    let inputs = cfg
        .ns
        .iter()
        .map(|&n| Ok(AssemblerStates(Tensor::new(Rng::new(cfg.seed).fork(n as u64).normals(n * cfg.width), &[n, cfg.width])?)))
        .collect::<Result<Vec<_>>>()?;
    let mut jobs: Vec<(Job<'_>, Job<'_>)> = inputs
        .iter()
        .map(|a| -> (Job<'_>, Job<'_>) {
            (
                Box::new(|| workspace_block(a, &state, &ws, cfg.k).map(drop)),
                Box::new(|| self_attention_block(a, &sa).map(drop)),
            )
        })
        .collect();
    let mut calls = Vec::with_capacity(jobs.len());
    for (w, r) in &mut jobs {
        calls.push((calibrate(w)?, calibrate(r)?));
    }
    // Sizes are interleaved within each round so slow spells on a shared
    // core hit all of them; the fastest round per size is kept.
    let mut best = vec![(f64::INFINITY, f64::INFINITY); jobs.len()];
    for _ in 0..cfg.repeats {
        for (i, (w, r)) in jobs.iter_mut().enumerate() {
            best[i].0 = best[i].0.min(batch_secs(w, calls[i].0)?);
            best[i].1 = best[i].1.min(batch_secs(r, calls[i].1)?);
        }
    }
    drop(jobs);
    let rows: Vec<ScalingRow> = cfg
        .ns
        .iter()
        .zip(&best)
        .map(|(&n, &(workspace, reference))| {
            log::info!("n={n} workspace={workspace:e}s reference={reference:e}s");
            ScalingRow { n, workspace, reference }
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let ws_t: Vec<f64> = rows.iter().map(|r| r.workspace).collect();
    let sa_t: Vec<f64> = rows.iter().map(|r| r.reference).collect();
    Ok(ScalingReport {
        workspace_slope: log_log_slope(&xs, &ws_t)?,
        reference_slope: log_log_slope(&xs, &sa_t)?,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let xs = [16.0, 32.0, 64.0, 128.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((log_log_slope(&xs, &ys).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn reference_block_is_permutation_equivariant() {
        let dims = BenchConfig::default().dims();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(4);
        let p = SelfAttentionParams::new(&mut Init::new(&mut store, &mut rng), dims).unwrap();
        let rows: Vec<Vec<f64>> = (0..5).map(|_| rng.normals(dims.assembler_dim)).collect();
        let perm = [3, 0, 4, 1, 2];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let out = self_attention_block(&AssemblerStates(Tensor::from_rows(&rows).unwrap()), &p).unwrap();
        let out_p = self_attention_block(&AssemblerStates(Tensor::from_rows(&permuted).unwrap()), &p).unwrap();
        let d = dims.assembler_dim;
        for (r, &i) in perm.iter().enumerate() {
            for c in 0..d {
                assert!((out_p.0.at(r, c) - out.0.at(i, c)).abs() < 1e-12);
            }
        }
    }
}
