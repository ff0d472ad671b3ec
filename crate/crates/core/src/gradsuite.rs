//! Finite-difference checks of every differentiable operation, the
//! workspace stage, the losses and the full model.

use crate::dataset::{generate_shape, GenConfig};
use crate::error::Result;
use crate::geometry::diff;
use crate::losses::{collision_loss, rotation_chamfer_loss, shape_chamfer_loss, total_loss, transformed_parts, translation_loss};
use crate::model::{AssemblyModel, ModelConfig};
use crate::nn::gradcheck::{grad_check_with, GradCheckOptions, GradCheckReport};
use crate::nn::layers::Linear;
use crate::nn::{ops, Init, ParamStore, Parameter, Rng, Tensor};
use crate::workspace::{ff_update, read_step, workspace_block, write_step, AssemblerStates, WorkspaceDims, WorkspaceParams, WorkspaceState};

pub const SUITE_TOL: f64 = 1e-4;

pub struct SuiteCase {
    pub name: String,
    pub report: GradCheckReport,
}

struct Suite {
    seed: u64,
    tol: f64,
    cases: Vec<SuiteCase>,
}

impl Suite {
    /// Reduces `f()` to a scalar with a fixed random probe of its shape,
    /// unless it already is one.
    fn check<F>(&mut self, name: &str, params: &[Parameter], opts: GradCheckOptions, f: F) -> Result<()>
    where
        F: Fn() -> Result<Tensor>,
    {
        let shape = f()?.shape().to_vec();
        let n: usize = shape.iter().product();
        let tag = self.cases.len() as u64;
        let probe = Tensor::new(Rng::new(self.seed).fork(tag).normals(n), &shape)?;
        let scalar = n == 1 && shape.len() <= 1;
        let report = grad_check_with(
            || {
                let out = f()?;
                Ok(if scalar { out } else { ops::sum(&ops::mul(&out, &probe)?) })
            },
            params,
            self.tol,
            opts,
        )?;
        self.cases.push(SuiteCase {
            name: name.to_string(),
            report,
        });
        Ok(())
    }
}

fn leaf(init: &mut Init<'_>, name: &str, shape: &[usize]) -> Result<Parameter> {
    init.normal(name, shape, 1.0)
}

fn unit_quat(init: &mut Init<'_>, name: &str) -> Result<Parameter> {
    let p = init.normal(name, &[1, 4], 1.0)?;
    let v = p.values();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    p.set_values(v.iter().map(|x| x / n).collect())?;
    Ok(p)
}

/// Runs the whole suite. Every case must reach `tol`.
pub fn gradient_suite(seed: u64, tol: f64) -> Result<Vec<SuiteCase>> {
    let mut suite = Suite {
        seed,
        tol,
        cases: Vec::new(),
    };
    let full = GradCheckOptions::default();
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    let mut init = Init::new(&mut store, &mut rng);

    let a = leaf(&mut init, "a", &[3, 4])?;
    let b = leaf(&mut init, "b", &[4, 5])?;
    let c = leaf(&mut init, "c", &[3, 4])?;
    let row = leaf(&mut init, "row", &[1, 4])?;
    let pos = init.with_values("pos", (1..=12).map(|i| 0.3 + 0.1 * i as f64).collect(), &[3, 4])?;
    let (at, bt, ct) = (a.clone(), b.clone(), c.clone());

    suite.check("matmul", &[a.clone(), b.clone()], full, || ops::matmul(&at.tensor(), &bt.tensor()))?;
    suite.check("transpose", std::slice::from_ref(&a), full, || ops::transpose(&at.tensor()))?;
    suite.check("add", &[a.clone(), c.clone()], full, || ops::add(&at.tensor(), &ct.tensor()))?;
    suite.check("sub", &[a.clone(), c.clone()], full, || ops::sub(&at.tensor(), &ct.tensor()))?;
    suite.check("mul", &[a.clone(), c.clone()], full, || ops::mul(&at.tensor(), &ct.tensor()))?;
    suite.check("add_row", &[a.clone(), row.clone()], full, || ops::add_row(&at.tensor(), &row.tensor()))?;
    suite.check("scale", std::slice::from_ref(&a), full, || Ok(ops::scale(&at.tensor(), -1.7)))?;
    suite.check("add_scalar", std::slice::from_ref(&a), full, || Ok(ops::add_scalar(&at.tensor(), 0.4)))?;
    suite.check("relu", std::slice::from_ref(&a), full, || Ok(ops::relu(&at.tensor())))?;
    suite.check("ln", std::slice::from_ref(&pos), full, || ops::ln(&pos.tensor()))?;
    suite.check("sum", std::slice::from_ref(&a), full, || Ok(ops::sum(&at.tensor())))?;
    suite.check("mean", std::slice::from_ref(&a), full, || Ok(ops::mean(&at.tensor())))?;
    suite.check("mean_rows", std::slice::from_ref(&a), full, || ops::mean_rows(&at.tensor()))?;
    suite.check("add_scalars", &[a.clone(), c.clone()], full, || {
        ops::add_scalars(&[ops::sum(&at.tensor()), ops::mean(&ct.tensor())])
    })?;
    suite.check("softmax.rows", std::slice::from_ref(&a), full, || ops::softmax(&at.tensor(), 1))?;
    suite.check("softmax.cols", std::slice::from_ref(&a), full, || ops::softmax(&at.tensor(), 0))?;
    suite.check("top_k_softmax", std::slice::from_ref(&a), full, || ops::top_k_softmax(&at.tensor(), 2, 1))?;
    let gain = leaf(&mut init, "gain", &[1, 4])?;
    let bias = leaf(&mut init, "bias", &[1, 4])?;
    suite.check("layer_norm", &[a.clone(), gain.clone(), bias.clone()], full, || {
        ops::layer_norm(&at.tensor(), &gain.tensor(), &bias.tensor())
    })?;
    suite.check("max_pool_points", std::slice::from_ref(&a), full, || ops::max_pool_points(&at.tensor()))?;
    suite.check("concat_cols", &[a.clone(), c.clone()], full, || ops::concat_cols(&[at.tensor(), ct.tensor()]))?;
    suite.check("slice_cols", std::slice::from_ref(&a), full, || ops::slice_cols(&at.tensor(), 1, 3))?;
    suite.check("concat_rows", &[a.clone(), c.clone()], full, || ops::concat_rows(&[at.tensor(), ct.tensor()]))?;
    suite.check("slice_rows", std::slice::from_ref(&a), full, || ops::slice_rows(&at.tensor(), 1, 3))?;
    let lin = Linear::new(&mut init.scope("linear"), "l", 4, 2)?;
    let lin_params = [a.clone(), lin.weight.clone(), lin.bias.clone().expect("bias")];
    suite.check("linear", &lin_params, full, || lin.forward(&at.tensor()))?;

    let quats = leaf(&mut init, "quats", &[3, 4])?;
    let pts = leaf(&mut init, "points", &[5, 3])?;
    let other = leaf(&mut init, "other", &[4, 3])?;
    let q = unit_quat(&mut init, "q")?;
    let q2 = unit_quat(&mut init, "q2")?;
    let t = leaf(&mut init, "t", &[1, 3])?;
    let (pa, pb) = (leaf(&mut init, "pa", &[1, 3])?, leaf(&mut init, "pb", &[1, 3])?);
    suite.check("normalize_quat_rows", std::slice::from_ref(&quats), full, || diff::normalize_quat_rows(&quats.tensor()))?;
    suite.check("rotate_points", &[pts.clone(), q.clone()], full, || diff::rotate_points(&pts.tensor(), &q.tensor()))?;
    suite.check("transform_points", &[pts.clone(), q.clone(), t.clone()], full, || {
        diff::transform_points(&pts.tensor(), &q.tensor(), &t.tensor())
    })?;
    suite.check("quat_mul", &[q.clone(), q2.clone()], full, || diff::quat_mul(&q.tensor(), &q2.tensor()))?;
    suite.check("chamfer", &[pts.clone(), other.clone()], full, || diff::chamfer(&pts.tensor(), &other.tensor()))?;
    suite.check("floored_distance", &[pa.clone(), pb.clone()], full, || {
        diff::floored_distance(&pa.tensor(), &pb.tensor(), 1e-6)
    })?;

    let dims = WorkspaceDims {
        slots: 3,
        slot_dim: 4,
        assembler_dim: 4,
        attn_dim: 4,
        heads: 2,
    };
    let wp = WorkspaceParams::new(&mut init.scope("workspace"), dims)?;
    let slots = leaf(&mut init, "slots", &[3, 4])?;
    let asm = leaf(&mut init, "assemblers", &[5, 4])?;
    let read_in = leaf(&mut init, "read_in", &[5, 4])?;
    drop(init);
    let ws_params: Vec<Parameter> = store.iter().filter(|p| p.name().starts_with("workspace.")).cloned().collect();
    let with = |extra: &[&Parameter]| -> Vec<Parameter> {
        let mut v: Vec<Parameter> = extra.iter().map(|p| (*p).clone()).collect();
        v.extend(ws_params.iter().cloned());
        v
    };
    suite.check("workspace.write_step", &with(&[&slots, &asm]), full, || {
        Ok(write_step(&WorkspaceState(slots.tensor()), &AssemblerStates(asm.tensor()), &wp, 2)?.state.0)
    })?;
    suite.check("workspace.read_step", &with(&[&slots, &asm]), full, || {
        Ok(read_step(&WorkspaceState(slots.tensor()), &AssemblerStates(asm.tensor()), &wp)?.read)
    })?;
    suite.check("workspace.ff_update", &with(&[&asm, &read_in]), full, || {
        Ok(ff_update(&AssemblerStates(asm.tensor()), &read_in.tensor(), &wp)?.0)
    })?;
    suite.check("workspace.block", &with(&[&slots, &asm]), full, || {
        let out = workspace_block(&AssemblerStates(asm.tensor()), &WorkspaceState(slots.tensor()), &wp, 2)?;
        ops::concat_rows(&[out.assemblers.0, out.state.0])
    })?;

    let shape = generate_shape(
        &GenConfig {
            n_pc: 6,
            dense_points: 512,
            cuts_min: 2,
            cuts_max: 2,
            max_parts: 3,
            ..GenConfig::default()
        },
        seed,
    )?;
    let n = shape.n_parts();
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed).fork(1);
    let mut init = Init::new(&mut store, &mut rng);
    let pq = leaf(&mut init, "pred_q", &[n, 4])?;
    let pt = leaf(&mut init, "pred_t", &[n, 3])?;
    let centroids = leaf(&mut init, "centroids", &[n, 3])?;
    drop(init);
    let gt_t = Tensor::new(shape.gt_poses.iter().flat_map(|p| p.translation).collect(), &[n, 3])?;
    let parts = &shape.parts;
    let gt = &shape.gt_poses;
    let unit = || diff::normalize_quat_rows(&pq.tensor());
    suite.check("loss.collision", std::slice::from_ref(&centroids), full, || {
        let rows = (0..n).map(|i| ops::slice_rows(&centroids.tensor(), i, i + 1)).collect::<Result<Vec<_>>>()?;
        collision_loss(&rows, 30.0, 1e-6, false)
    })?;
    suite.check("loss.translation", std::slice::from_ref(&pt), full, || translation_loss(&pt.tensor(), &gt_t))?;
    suite.check("loss.rotation", std::slice::from_ref(&pq), full, || rotation_chamfer_loss(&unit()?, gt, parts))?;
    suite.check("loss.shape", &[pq.clone(), pt.clone()], full, || {
        shape_chamfer_loss(&transformed_parts(&unit()?, &pt.tensor(), parts)?, gt, parts)
    })?;

    let sampled = GradCheckOptions {
        max_elements: Some(6),
        ..GradCheckOptions::default()
    };
    for ctf in [1, 2] {
        let model = AssemblyModel::new(
            ModelConfig {
                n_pc: 6,
                d_a: 8,
                d_l: 8,
                d_e: 8,
                slots: 3,
                heads: 2,
                stages: 2,
                k: 2,
                noise_dim: 4,
                noise_init_scale: 1.0,
                ctf_stages: ctf,
                encoder_widths: vec![8],
                predictor_widths: vec![8],
                ..ModelConfig::default()
            },
            seed,
        )?;
        if ctf > 1 {
            // Later networks start as exact identities; give them a slope.
            for net in &model.nets[1..] {
                let w = &net.predictor.layers.last().expect("head").weight;
                w.set_values(Rng::new(seed).fork(7).normals(w.numel()).iter().map(|v| v * 0.3).collect())?;
            }
        }
        // Training updates one network at a time; earlier poses are
        // constants to it.
        let last = ctf - 1;
        suite.check(&format!("model.total_loss.ctf{ctf}"), &model.net_params(last), sampled, || {
            Ok(total_loss(&model.refine_stage(parts, 5, last)?, parts, gt, &model.config.loss)?.total)
        })?;
    }
    Ok(suite.cases)
}
