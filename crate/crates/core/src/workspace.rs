//! Shared slot memory written by competing assemblers and broadcast back.
//!
//! One stage runs three steps:
//!
//! 1. **write** – the `L` slots query the `N` assembler messages; a top-k
//!    softmax over the assembler axis lets at most `k` assemblers write into
//!    each slot, and the result replaces the previous slot contents;
//! 2. **read** – every assembler queries the `L` slots with a full softmax;
//! 3. **update** – residual feedforward with post-layer-norms.
//!
//! Attention over slots instead of over assembler pairs keeps the cost of a
//! stage linear in `N`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{LayerNorm, Linear, Mlp};
use crate::nn::ops;
use crate::nn::{Init, Tensor};

/// Slot memory, `L × d_l`.
#[derive(Clone, Debug)]
pub struct WorkspaceState(pub Tensor);

/// One row per assembler, `N × d_a`.
#[derive(Clone, Debug)]
pub struct AssemblerStates(pub Tensor);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkspaceDims {
    pub slots: usize,
    pub slot_dim: usize,
    pub assembler_dim: usize,
    pub attn_dim: usize,
    pub heads: usize,
}

impl WorkspaceDims {
    pub fn validate(&self) -> Result<()> {
        let WorkspaceDims {
            slots,
            slot_dim,
            assembler_dim,
            attn_dim,
            heads,
        } = *self;
        if [slots, slot_dim, assembler_dim, attn_dim, heads].contains(&0) {
            return Err(Error::Param(format!("workspace dimensions must be positive: {self:?}")));
        }
        for (what, d) in [("attn_dim", attn_dim), ("slot_dim", slot_dim), ("assembler_dim", assembler_dim)] {
            if d % heads != 0 {
                return Err(Error::Param(format!("{what}={d} not divisible by heads={heads}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct WorkspaceParams {
    pub dims: WorkspaceDims,
    pub write_query: Linear,
    pub write_key: Linear,
    pub write_value: Linear,
    pub read_query: Linear,
    pub read_key: Linear,
    pub read_value: Linear,
    pub feedforward: Mlp,
    pub norm_read: LayerNorm,
    pub norm_out: LayerNorm,
}

impl WorkspaceParams {
    pub fn new(init: &mut Init<'_>, dims: WorkspaceDims) -> Result<Self> {
        dims.validate()?;
        let WorkspaceDims {
            slot_dim: dl,
            assembler_dim: da,
            attn_dim: de,
            ..
        } = dims;
        let mut w = init.scope("write");
        let write_query = Linear::projection(&mut w, "query", dl, de)?;
        let write_key = Linear::projection(&mut w, "key", da, de)?;
        let write_value = Linear::projection(&mut w, "value", da, dl)?;
        let mut r = init.scope("read");
        let read_query = Linear::projection(&mut r, "query", da, de)?;
        let read_key = Linear::projection(&mut r, "key", dl, de)?;
        let read_value = Linear::projection(&mut r, "value", dl, da)?;
        Ok(Self {
            dims,
            write_query,
            write_key,
            write_value,
            read_query,
            read_key,
            read_value,
            feedforward: Mlp::new(init, "ff", &[da, 4 * da, da])?,
            norm_read: LayerNorm::new(init, "norm_read", da)?,
            norm_out: LayerNorm::new(init, "norm_out", da)?,
        })
    }
}

/// Scaled dot-product attention split into `heads` column blocks. `mask_k`
/// switches the softmax over keys to a top-k softmax. Returns the
/// concatenated head outputs and the per-head weight matrices.
pub(crate) fn multi_head(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask_k: Option<usize>,
) -> Result<(Tensor, Vec<Tensor>)> {
    let (_, de) = q.dims2()?;
    let (_, dv) = v.dims2()?;
    let (hq, hv) = (de / heads, dv / heads);
    let scale = 1.0 / (hq as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = ops::slice_cols(q, h * hq, (h + 1) * hq)?;
        let kh = ops::slice_cols(k, h * hq, (h + 1) * hq)?;
        let vh = ops::slice_cols(v, h * hv, (h + 1) * hv)?;
        let logits = ops::scale(&ops::matmul(&qh, &ops::transpose(&kh)?)?, scale);
        let attn = match mask_k {
            Some(kk) => ops::top_k_softmax(&logits, kk, 1)?,
            None => ops::softmax(&logits, 1)?,
        };
        outs.push(ops::matmul(&attn, &vh)?);
        weights.push(attn);
    }
    let out = if heads == 1 {
        outs.pop().expect("one head")
    } else {
        ops::concat_cols(&outs)?
    };
    Ok((out, weights))
}

pub struct WriteOutput {
    pub state: WorkspaceState,
    /// Per head, `L × N`.
    pub attention: Vec<Tensor>,
}

/// Competitive write: the new slot contents are a top-k attention average of
/// the projected messages, replacing the previous contents.
pub fn write_step(
    state: &WorkspaceState,
    messages: &AssemblerStates,
    params: &WorkspaceParams,
    k: usize,
) -> Result<WriteOutput> {
    if k == 0 {
        return Err(Error::Param("write needs k >= 1".into()));
    }
    let (n, _) = messages.0.dims2()?;
    if n == 0 {
        return Err(Error::Contract("write with no messages".into()));
    }
    let q = params.write_query.forward(&state.0)?;
    let key = params.write_key.forward(&messages.0)?;
    let val = params.write_value.forward(&messages.0)?;
    let (slots, attention) = multi_head(&q, &key, &val, params.dims.heads, Some(k.min(n)))?;
    Ok(WriteOutput {
        state: WorkspaceState(slots),
        attention,
    })
}

pub struct ReadOutput {
    pub read: Tensor,
    /// Per head, `N × L`.
    pub attention: Vec<Tensor>,
}

/// Broadcast: every assembler attends over all slots.
pub fn read_step(
    state: &WorkspaceState,
    assemblers: &AssemblerStates,
    params: &WorkspaceParams,
) -> Result<ReadOutput> {
    let q = params.read_query.forward(&assemblers.0)?;
    let key = params.read_key.forward(&state.0)?;
    let val = params.read_value.forward(&state.0)?;
    let (read, attention) = multi_head(&q, &key, &val, params.dims.heads, None)?;
    Ok(ReadOutput { read, attention })
}

/// `h = norm_read(a + read)`, then `norm_out(h + ff(h))`.
pub fn ff_update(assemblers: &AssemblerStates, read: &Tensor, params: &WorkspaceParams) -> Result<AssemblerStates> {
    let h = params.norm_read.forward(&ops::add(&assemblers.0, read)?)?;
    let f = params.feedforward.forward(&h)?;
    Ok(AssemblerStates(params.norm_out.forward(&ops::add(&h, &f)?)?))
}

pub struct BlockOutput {
    pub assemblers: AssemblerStates,
    pub state: WorkspaceState,
    pub write_attention: Vec<Tensor>,
    pub read_attention: Vec<Tensor>,
}

/// One full stage: write, read, update.
pub fn workspace_block(
    assemblers: &AssemblerStates,
    state: &WorkspaceState,
    params: &WorkspaceParams,
    k: usize,
) -> Result<BlockOutput> {
    let w = write_step(state, assemblers, params, k)?;
    let r = read_step(&w.state, assemblers, params)?;
    let next = ff_update(assemblers, &r.read, params)?;
    Ok(BlockOutput {
        assemblers: next,
        state: w.state,
        write_attention: w.attention,
        read_attention: r.attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check_with, GradCheckOptions};
    use crate::nn::{ParamStore, Rng};

    fn dims(slots: usize, d: usize, heads: usize) -> WorkspaceDims {
        WorkspaceDims {
            slots,
            slot_dim: d,
            assembler_dim: d,
            attn_dim: d,
            heads,
        }
    }

    fn build(d: WorkspaceDims, seed: u64) -> (WorkspaceParams, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let p = WorkspaceParams::new(&mut Init::new(&mut store, &mut rng), d).unwrap();
        (p, store)
    }

    fn random(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(rng.normals(r * c), &[r, c]).unwrap()
    }

    #[test]
    fn single_message_gets_all_weight() {
        let (p, _) = build(dims(3, 4, 1), 1);
        let mut rng = Rng::new(2);
        let state = WorkspaceState(random(&mut rng, 3, 4));
        let msg = AssemblerStates(random(&mut rng, 1, 4));
        let w = write_step(&state, &msg, &p, 10).unwrap();
        assert!(w.attention[0].data().iter().all(|v| *v == 1.0));
        let value = p.write_value.forward(&msg.0).unwrap();
        for s in 0..3 {
            assert_eq!(&w.state.0.data()[s * 4..s * 4 + 4], value.data());
        }
    }

    #[test]
    fn top_k_limits_writers() {
        let (p, _) = build(dims(5, 8, 2), 3);
        let mut rng = Rng::new(4);
        let state = WorkspaceState(random(&mut rng, 5, 8));
        let msg = AssemblerStates(random(&mut rng, 9, 8));
        let w = write_step(&state, &msg, &p, 2).unwrap();
        for a in &w.attention {
            for row in a.data().chunks_exact(9) {
                assert!(row.iter().filter(|v| **v != 0.0).count() <= 2);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!(matches!(write_step(&state, &msg, &p, 0), Err(Error::Param(_))));
    }

    fn identity_scalar_params() -> WorkspaceParams {
        let (p, _) = build(dims(1, 1, 1), 0);
        for l in [&p.write_query, &p.write_key, &p.write_value, &p.read_query, &p.read_key, &p.read_value] {
            l.weight.set_values(vec![1.0]).unwrap();
        }
        p
    }

    #[test]
    fn scalar_write_by_hand() {
        let p = identity_scalar_params();
        let q = 0.7;
        let state = WorkspaceState(Tensor::new(vec![q], &[1, 1]).unwrap());
        let msg = AssemblerStates(Tensor::new(vec![1.0, 3.0], &[2, 1]).unwrap());
        let w = write_step(&state, &msg, &p, 2).unwrap();
        let (e1, e3) = ((q * 1.0f64).exp(), (q * 3.0f64).exp());
        let expected = (e1 * 1.0 + e3 * 3.0) / (e1 + e3);
        assert!((w.state.0.data()[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn scalar_read_by_hand() {
        let p = identity_scalar_params();
        let state = WorkspaceState(Tensor::new(vec![0.5, -1.5], &[2, 1]).unwrap());
        let a = AssemblerStates(Tensor::new(vec![2.0], &[1, 1]).unwrap());
        let r = read_step(&state, &a, &p).unwrap();
        let (e1, e2) = ((2.0f64 * 0.5).exp(), (2.0f64 * -1.5).exp());
        let expected = (e1 * 0.5 + e2 * -1.5) / (e1 + e2);
        assert!((r.read.data()[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn read_with_one_slot_is_a_broadcast() {
        let (p, _) = build(dims(1, 4, 2), 5);
        let mut rng = Rng::new(6);
        let state = WorkspaceState(random(&mut rng, 1, 4));
        let a = AssemblerStates(random(&mut rng, 3, 4));
        let r = read_step(&state, &a, &p).unwrap();
        let row0 = &r.read.data()[0..4];
        assert!(r.read.data().chunks_exact(4).all(|row| row == row0));
    }

    #[test]
    fn identical_slots_make_read_weight_irrelevant() {
        let (p, _) = build(dims(3, 4, 1), 7);
        let mut rng = Rng::new(8);
        let row = rng.normals(4);
        let state = WorkspaceState(Tensor::new(row.repeat(3), &[3, 4]).unwrap());
        let a = AssemblerStates(random(&mut rng, 5, 4));
        let r = read_step(&state, &a, &p).unwrap();
        let v = p.read_value.forward(&Tensor::new(row, &[1, 4]).unwrap()).unwrap();
        for out in r.read.data().chunks_exact(4) {
            for (x, y) in out.iter().zip(v.data()) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn degenerate_feedforward() {
        let (p, _) = build(dims(2, 4, 1), 9);
        for l in &p.feedforward.layers {
            l.weight.set_values(vec![0.0; l.weight.numel()]).unwrap();
        }
        let mut rng = Rng::new(10);
        let a = AssemblerStates(random(&mut rng, 3, 4));
        let out = ff_update(&a, &Tensor::zeros(&[3, 4]), &p).unwrap();
        assert_eq!(out.0.shape(), &[3, 4]);
        let g = Tensor::new(vec![1.0; 4], &[4]).unwrap();
        let b = Tensor::zeros(&[4]);
        let expected = ops::layer_norm(&ops::layer_norm(&a.0, &g, &b).unwrap(), &g, &b).unwrap();
        assert_eq!(out.0.data(), expected.data());
    }

    #[test]
    fn ff_update_gradients() {
        let (p, store) = build(dims(2, 4, 2), 11);
        let mut rng = Rng::new(12);
        let a = AssemblerStates(random(&mut rng, 3, 4));
        let read = random(&mut rng, 3, 4);
        let w = random(&mut rng, 3, 4);
        let f = || Ok(ops::sum(&ops::mul(&ff_update(&a, &read, &p)?.0, &w)?));
        let r = grad_check_with(f, &store.to_vec(), 1e-4, GradCheckOptions::default()).unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn one_head_block_is_write_read_update() {
        let (p, _) = build(dims(3, 4, 1), 13);
        let mut rng = Rng::new(14);
        let state = WorkspaceState(random(&mut rng, 3, 4));
        let a = AssemblerStates(random(&mut rng, 5, 4));
        let out = workspace_block(&a, &state, &p, 2).unwrap();
        let w = write_step(&state, &a, &p, 2).unwrap();
        let r = read_step(&w.state, &a, &p).unwrap();
        let u = ff_update(&a, &r.read, &p).unwrap();
        assert_eq!(out.assemblers.0.data(), u.0.data());
        assert_eq!(out.state.0.data(), w.state.0.data());
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let d = WorkspaceDims {
            slots: 2,
            slot_dim: 6,
            assembler_dim: 8,
            attn_dim: 8,
            heads: 4,
        };
        assert!(WorkspaceParams::new(&mut Init::new(&mut store, &mut rng), d).is_err());
    }
}
