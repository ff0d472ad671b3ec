//! The assembly network: a shared point encoder, a noisy routing block,
//! `T` workspace stages and a per-part pose head. Coarse-to-fine chains `x`
//! independent copies, each refining the parts as moved by its predecessors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::diff::{normalize_quat_rows, quat_mul, rotate_points, transform_points};
use crate::geometry::{PointCloud, Pose, Quaternion};
use crate::losses::LossWeights;
use crate::nn::layers::{Linear, Mlp};
use crate::nn::{ops, Init, ParamStore, Parameter, Rng, Tensor};
use crate::workspace::{workspace_block, AssemblerStates, WorkspaceDims, WorkspaceParams, WorkspaceState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_pc: usize,
    pub d_a: usize,
    pub d_l: usize,
    pub d_e: usize,
    /// Workspace slots `L`.
    pub slots: usize,
    pub heads: usize,
    /// Workspace stages `T` after routing.
    pub stages: usize,
    /// Writers admitted per slot.
    pub k: usize,
    pub noise_dim: usize,
    /// Multiplier on the default init of the noise projection.
    pub noise_init_scale: f64,
    /// Coarse-to-fine networks `x`.
    pub ctf_stages: usize,
    /// Hidden widths of the point encoder (input 3, output `d_a`).
    pub encoder_widths: Vec<usize>,
    /// Hidden widths of the pose head (input `d_a`, output 7).
    pub predictor_widths: Vec<usize>,
    pub max_parts: usize,
    pub loss: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_pc: 1000,
            d_a: 128,
            d_l: 128,
            d_e: 128,
            slots: 8,
            heads: 4,
            stages: 4,
            k: 10,
            noise_dim: 32,
            noise_init_scale: 0.1,
            ctf_stages: 1,
            encoder_widths: vec![64, 128],
            predictor_widths: vec![256],
            max_parts: 20,
            loss: LossWeights::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_pc", self.n_pc),
            ("stages", self.stages),
            ("k", self.k),
            ("noise_dim", self.noise_dim),
            ("ctf_stages", self.ctf_stages),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Param(format!("{name} must be positive")));
        }
        if self.encoder_widths.iter().chain(&self.predictor_widths).any(|w| *w == 0) {
            return Err(Error::Param("layer widths must be positive".into()));
        }
        if !(2..=20).contains(&self.max_parts) {
            return Err(Error::Param(format!("max_parts {} outside [2, 20]", self.max_parts)));
        }
        if !(self.noise_init_scale.is_finite() && self.noise_init_scale >= 0.0) {
            return Err(Error::Param(format!("noise_init_scale {} must be finite and non-negative", self.noise_init_scale)));
        }
        self.workspace_dims().validate()?;
        self.loss.validate()
    }

    pub fn workspace_dims(&self) -> WorkspaceDims {
        WorkspaceDims {
            slots: self.slots,
            slot_dim: self.d_l,
            assembler_dim: self.d_a,
            attn_dim: self.d_e,
            heads: self.heads,
        }
    }
}

/// Attention weights recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct StageTrace {
    /// `route`, `stage0`, … prefixed by `ctf{s}.` for later refinement networks.
    pub label: String,
    /// Per head, `L × N`.
    pub write: Vec<Tensor>,
    /// Per head, `N × L`.
    pub read: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct PosePrediction {
    /// Head output of the (last) network, `N × 7`.
    pub raw: Tensor,
    /// Unit quaternions, `N × 4`.
    pub quats: Tensor,
    /// `N × 3`.
    pub translations: Tensor,
    pub poses: Vec<Pose>,
    pub trace: Vec<StageTrace>,
}

impl PosePrediction {
    fn from_tensors(raw: Tensor, quats: Tensor, translations: Tensor, trace: Vec<StageTrace>) -> Result<Self> {
        let (n, _) = quats.dims2()?;
        let poses = (0..n)
            .map(|i| {
                let q = Quaternion::new(quats.at(i, 0), quats.at(i, 1), quats.at(i, 2), quats.at(i, 3)).normalize()?;
                Ok(Pose::new(q, [translations.at(i, 0), translations.at(i, 1), translations.at(i, 2)]))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            raw,
            quats,
            translations,
            poses,
            trace,
        })
    }
}

/// One complete network.
#[derive(Clone, Debug)]
pub struct AssemblyNet {
    pub encoder: Mlp,
    /// Noise projection added to the encoder features, `noise_dim × d_a`.
    pub noise: Linear,
    pub route: WorkspaceParams,
    pub route_slots: Parameter,
    pub stages: Vec<WorkspaceParams>,
    pub slots: Parameter,
    pub predictor: Mlp,
}

impl AssemblyNet {
    fn new(init: &mut Init<'_>, cfg: &ModelConfig, identity_head: bool) -> Result<Self> {
        let dims = cfg.workspace_dims();
        let widths = |first: usize, hidden: &[usize], last: usize| {
            let mut w = vec![first];
            w.extend_from_slice(hidden);
            w.push(last);
            w
        };
        let encoder = Mlp::new(init, "encoder", &widths(3, &cfg.encoder_widths, cfg.d_a))?;
        let noise = Linear::projection(init, "noise", cfg.noise_dim, cfg.d_a)?;
        let w = noise.weight.values().iter().map(|v| v * cfg.noise_init_scale).collect();
        noise.weight.set_values(w)?;
        let route = WorkspaceParams::new(&mut init.scope("route"), dims)?;
        let route_slots = init.normal("route.slots", &[cfg.slots, cfg.d_l], 1.0)?;
        let stages = (0..cfg.stages)
            .map(|t| WorkspaceParams::new(&mut init.scope(&format!("stage{t}")), dims))
            .collect::<Result<_>>()?;
        let slots = init.normal("slots", &[cfg.slots, cfg.d_l], 1.0)?;
        let predictor = Mlp::new(init, "predictor", &widths(cfg.d_a, &cfg.predictor_widths, 7))?;

        let last = predictor.layers.last().expect("predictor has a layer");
        let mut bias = vec![0.0; 7];
        bias[0] = 1.0;
        last.bias.as_ref().expect("predictor bias").set_values(bias)?;
        if identity_head {
            last.weight.set_values(vec![0.0; last.weight.numel()])?;
        }
        Ok(Self {
            encoder,
            noise,
            route,
            route_slots,
            stages,
            slots,
            predictor,
        })
    }

    /// Per-part features from `n_parts` stacked clouds of equal size.
    pub fn encode(&self, points: &Tensor, n_parts: usize) -> Result<AssemblerStates> {
        let (rows, _) = points.dims2()?;
        let per = rows / n_parts.max(1);
        let h = self.encoder.forward(points)?;
        let pooled = (0..n_parts)
            .map(|i| ops::max_pool_points(&ops::slice_rows(&h, i * per, (i + 1) * per)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(AssemblerStates(ops::concat_rows(&pooled)?))
    }

    /// Adds projected noise to the features, then one routing block.
    pub fn route(&self, features: &AssemblerStates, noise: &Tensor, k: usize) -> Result<(AssemblerStates, StageTrace)> {
        let x = ops::add(&features.0, &self.noise.forward(noise)?)?;
        let out = workspace_block(&AssemblerStates(x), &WorkspaceState(self.route_slots.tensor()), &self.route, k)?;
        let trace = StageTrace {
            label: "route".into(),
            write: out.write_attention,
            read: out.read_attention,
        };
        Ok((out.assemblers, trace))
    }

    pub fn predict_poses(&self, assemblers: &AssemblerStates) -> Result<(Tensor, Tensor, Tensor)> {
        let raw = self.predictor.forward(&assemblers.0)?;
        let quats = normalize_quat_rows(&ops::slice_cols(&raw, 0, 4)?)?;
        let translations = ops::slice_cols(&raw, 4, 7)?;
        Ok((raw, quats, translations))
    }

    fn run(&self, points: &Tensor, n_parts: usize, noise: &Tensor, k: usize) -> Result<PosePrediction> {
        let features = self.encode(points, n_parts)?;
        let (mut a, route_trace) = self.route(&features, noise, k)?;
        let mut trace = vec![route_trace];
        let mut state = WorkspaceState(self.slots.tensor());
        for (t, params) in self.stages.iter().enumerate() {
            let out = workspace_block(&a, &state, params, k)?;
            trace.push(StageTrace {
                label: format!("stage{t}"),
                write: out.write_attention,
                read: out.read_attention,
            });
            a = out.assemblers;
            state = out.state;
        }
        let (raw, quats, translations) = self.predict_poses(&a)?;
        PosePrediction::from_tensors(raw, quats, translations, trace)
    }
}

/// All `x` networks and their parameters.
#[derive(Clone, Debug)]
pub struct AssemblyModel {
    pub config: ModelConfig,
    pub nets: Vec<AssemblyNet>,
    params: ParamStore,
}

impl AssemblyModel {
    /// Builds the model with parameters drawn from `seed`. Network `s`
    /// initializes from its own stream; networks after the first start as
    /// the identity pose so refinement begins where the previous one ends.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let base = Rng::new(seed);
        let mut nets = Vec::with_capacity(config.ctf_stages);
        for s in 0..config.ctf_stages {
            let mut rng = if s == 0 { Rng::new(seed) } else { base.fork(s as u64) };
            let mut init = Init::new(&mut params, &mut rng);
            let net = if config.ctf_stages == 1 {
                AssemblyNet::new(&mut init, &config, false)?
            } else {
                AssemblyNet::new(&mut init.scope(&format!("ctf{s}")), &config, s > 0)?
            };
            nets.push(net);
        }
        Ok(Self { config, nets, params })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn check_parts(&self, clouds: &[PointCloud]) -> Result<()> {
        let n = clouds.len();
        if n < 2 || n > self.config.max_parts {
            return Err(Error::Contract(format!(
                "{n} parts; the model handles 2 to {}",
                self.config.max_parts
            )));
        }
        let size = clouds[0].len();
        if let Some(c) = clouds.iter().find(|c| c.len() != size) {
            return Err(Error::Contract(format!("ragged parts: {size} and {} points", c.len())));
        }
        Ok(())
    }

    /// `N × noise_dim` standard normals drawn from `seed`.
    pub fn noise(&self, n_parts: usize, seed: u64) -> Tensor {
        let d = self.config.noise_dim;
        Tensor::new(Rng::new(seed).normals(n_parts * d), &[n_parts, d]).expect("noise shape")
    }

    fn stacked(clouds: &[PointCloud]) -> Tensor {
        let data: Vec<f64> = clouds.iter().flat_map(PointCloud::flat).collect();
        let rows = data.len() / 3;
        Tensor::new(data, &[rows, 3]).expect("stacked clouds")
    }

    /// First network only, noise drawn once from `seed`.
    pub fn forward(&self, clouds: &[PointCloud], seed: u64) -> Result<PosePrediction> {
        self.forward_with_noise(clouds, &self.noise(clouds.len(), seed))
    }

    pub fn forward_with_noise(&self, clouds: &[PointCloud], noise: &Tensor) -> Result<PosePrediction> {
        self.check_parts(clouds)?;
        self.nets[0].run(&Self::stacked(clouds), clouds.len(), noise, self.config.k)
    }

    /// Runs every network in turn. Network `s` sees the parts moved by the
    /// composition of the poses of networks `0..s` (values only; gradient
    /// reaches the earlier networks through the composition). The returned
    /// pose applies network 0's pose first.
    pub fn coarse_to_fine(&self, clouds: &[PointCloud], seed: u64) -> Result<PosePrediction> {
        self.chain(clouds, seed, self.nets.len(), false)
    }

    /// Networks `0..=stage` chained as in [`Self::coarse_to_fine`], with the
    /// earlier networks' poses treated as constants so only network `stage`
    /// receives gradient.
    pub fn refine_stage(&self, clouds: &[PointCloud], seed: u64, stage: usize) -> Result<PosePrediction> {
        if stage >= self.nets.len() {
            return Err(Error::Param(format!("stage {stage} of {} networks", self.nets.len())));
        }
        self.chain(clouds, seed, stage + 1, true)
    }

    /// Parameters owned by network `s`.
    pub fn net_params(&self, s: usize) -> Vec<Parameter> {
        if self.nets.len() == 1 {
            return self.params.to_vec();
        }
        let prefix = format!("ctf{s}.");
        self.params.iter().filter(|p| p.name().starts_with(&prefix)).cloned().collect()
    }

    fn chain(&self, clouds: &[PointCloud], seed: u64, upto: usize, detach_prefix: bool) -> Result<PosePrediction> {
        self.check_parts(clouds)?;
        let n = clouds.len();
        let per = clouds[0].len();
        let canonical = Self::stacked(clouds);
        let mut acc: Option<PosePrediction> = None;
        let mut trace = Vec::new();
        for (s, net) in self.nets[..upto].iter().enumerate() {
            let stage_seed = if s == 0 { seed } else { Rng::new(seed).fork(s as u64).next_u64() };
            let noise = self.noise(n, stage_seed);
            let input = match &acc {
                None => canonical.clone(),
                Some(prev) => move_parts(&canonical, per, &prev.quats.detach(), &prev.translations.detach())?,
            };
            let mut pred = net.run(&input, n, &noise, self.config.k)?;
            if self.nets.len() > 1 {
                for t in &mut pred.trace {
                    t.label = format!("ctf{s}.{}", t.label);
                }
            }
            trace.append(&mut pred.trace);
            acc = Some(match acc {
                None => pred,
                Some(prev) => {
                    let (pq, pt) = if detach_prefix {
                        (prev.quats.detach(), prev.translations.detach())
                    } else {
                        (prev.quats, prev.translations)
                    };
                    let (q, t) = compose(&pq, &pt, &pred.quats, &pred.translations)?;
                    PosePrediction::from_tensors(pred.raw, q, t, Vec::new())?
                }
            });
        }
        let mut out = acc.expect("at least one network");
        out.trace = trace;
        Ok(out)
    }
}

/// Applies pose `i` to rows `i*per..(i+1)*per` of `points`.
fn move_parts(points: &Tensor, per: usize, quats: &Tensor, trans: &Tensor) -> Result<Tensor> {
    let (n, _) = quats.dims2()?;
    let moved = (0..n)
        .map(|i| {
            transform_points(
                &ops::slice_rows(points, i * per, (i + 1) * per)?,
                &ops::slice_rows(quats, i, i + 1)?,
                &ops::slice_rows(trans, i, i + 1)?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    ops::concat_rows(&moved)
}

/// Per row: first `(q1, t1)`, then `(q2, t2)`, giving
/// `(q2 ⊗ q1, R(q2) t1 + t2)`.
fn compose(q1: &Tensor, t1: &Tensor, q2: &Tensor, t2: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, _) = q1.dims2()?;
    let mut qs = Vec::with_capacity(n);
    let mut ts = Vec::with_capacity(n);
    for i in 0..n {
        let a = ops::slice_rows(q1, i, i + 1)?;
        let b = ops::slice_rows(q2, i, i + 1)?;
        qs.push(quat_mul(&b, &a)?);
        let moved = rotate_points(&ops::slice_rows(t1, i, i + 1)?, &b)?;
        ts.push(ops::add(&moved, &ops::slice_rows(t2, i, i + 1)?)?);
    }
    Ok((ops::concat_rows(&qs)?, ops::concat_rows(&ts)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::dist2;

    pub(crate) fn tiny(ctf: usize) -> ModelConfig {
        ModelConfig {
            n_pc: 8,
            d_a: 8,
            d_l: 8,
            d_e: 8,
            slots: 3,
            heads: 2,
            stages: 2,
            k: 2,
            noise_dim: 4,
            ctf_stages: ctf,
            encoder_widths: vec![8],
            predictor_widths: vec![8],
            ..ModelConfig::default()
        }
    }

    fn clouds(n: usize, per: usize, seed: u64) -> Vec<PointCloud> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| PointCloud::new((0..per).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect()).unwrap())
            .collect()
    }

    #[test]
    fn shapes_and_unit_rotations() {
        let m = AssemblyModel::new(tiny(1), 0).unwrap();
        let p = m.forward(&clouds(3, 8, 1), 5).unwrap();
        assert_eq!(p.raw.shape(), &[3, 7]);
        assert_eq!(p.poses.len(), 3);
        for pose in &p.poses {
            assert!((pose.rotation.norm() - 1.0).abs() < 1e-12);
        }
        assert_eq!(p.trace.len(), 3);
    }

    #[test]
    fn point_order_does_not_matter() {
        let m = AssemblyModel::new(tiny(1), 0).unwrap();
        let cs = clouds(2, 8, 1);
        let mut shuffled = cs.clone();
        let mut pts = shuffled[1].points().to_vec();
        pts.reverse();
        shuffled[1] = PointCloud::new(pts).unwrap();
        let a = m.encode_for_test(&cs);
        let b = m.encode_for_test(&shuffled);
        assert_eq!(a, b);
    }

    impl AssemblyModel {
        fn encode_for_test(&self, cs: &[PointCloud]) -> Vec<f64> {
            self.nets[0].encode(&Self::stacked(cs), cs.len()).unwrap().0.to_vec()
        }
    }

    #[test]
    fn identical_clouds_share_features() {
        let m = AssemblyModel::new(tiny(1), 0).unwrap();
        let c = clouds(1, 8, 1).remove(0);
        let f = m.encode_for_test(&[c.clone(), c]);
        assert_eq!(f[..8], f[8..]);
    }

    #[test]
    fn seeds_change_the_output() {
        let m = AssemblyModel::new(tiny(1), 0).unwrap();
        let cs = clouds(3, 8, 1);
        let a = m.forward(&cs, 1).unwrap().raw.to_vec();
        let b = m.forward(&cs, 2).unwrap().raw.to_vec();
        assert_ne!(a, b);
        assert_eq!(a, m.forward(&cs, 1).unwrap().raw.to_vec());
    }

    #[test]
    fn rejects_single_part_and_ragged_input() {
        let m = AssemblyModel::new(tiny(1), 0).unwrap();
        assert!(matches!(m.forward(&clouds(1, 8, 1), 0), Err(Error::Contract(_))));
        let mut cs = clouds(2, 8, 1);
        cs.push(clouds(1, 5, 2).remove(0));
        assert!(matches!(m.forward(&cs, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_noise_path_is_a_plain_block() {
        let m = AssemblyModel::new(tiny(1), 0).unwrap();
        let net = &m.nets[0];
        net.noise.weight.set_values(vec![0.0; net.noise.weight.numel()]).unwrap();
        let cs = clouds(3, 8, 1);
        let feats = net.encode(&AssemblyModel::stacked(&cs), 3).unwrap();
        let (routed, _) = net.route(&feats, &m.noise(3, 9), 2).unwrap();
        let plain = workspace_block(&feats, &WorkspaceState(net.route_slots.tensor()), &net.route, 2).unwrap();
        assert_eq!(routed.0.to_vec(), plain.assemblers.0.to_vec());
    }

    #[test]
    fn single_network_refinement_is_forward() {
        let m = AssemblyModel::new(tiny(1), 3).unwrap();
        let cs = clouds(4, 8, 2);
        let a = m.forward(&cs, 7).unwrap();
        let b = m.coarse_to_fine(&cs, 7).unwrap();
        assert_eq!(a.quats.to_vec(), b.quats.to_vec());
        assert_eq!(a.translations.to_vec(), b.translations.to_vec());
    }

    #[test]
    fn refinement_composes_poses() {
        let m = AssemblyModel::new(tiny(3), 3).unwrap();
        // Make the later networks do something.
        for net in &m.nets[1..] {
            let w = &net.predictor.layers.last().unwrap().weight;
            w.set_values(Rng::new(4).normals(w.numel()).iter().map(|v| v * 0.3).collect()).unwrap();
        }
        let cs = clouds(3, 8, 2);
        let out = m.coarse_to_fine(&cs, 11).unwrap();
        let mut current = cs.clone();
        for (s, net) in m.nets.iter().enumerate() {
            let seed = if s == 0 { 11 } else { Rng::new(11).fork(s as u64).next_u64() };
            let p = net.run(&AssemblyModel::stacked(&current), 3, &m.noise(3, seed), m.config.k).unwrap();
            current = current.iter().zip(&p.poses).map(|(c, z)| z.apply(c)).collect();
        }
        for i in 0..3 {
            let direct = out.poses[i].apply(&cs[i]);
            for (a, b) in direct.points().iter().zip(current[i].points()) {
                assert!(dist2(*a, *b).sqrt() < 1e-9);
            }
        }
    }

    #[test]
    fn later_networks_start_at_identity() {
        let m1 = AssemblyModel::new(tiny(1), 3).unwrap();
        let m3 = AssemblyModel::new(tiny(3), 3).unwrap();
        let cs = clouds(3, 8, 2);
        let a = m1.forward(&cs, 7).unwrap();
        let b = m3.coarse_to_fine(&cs, 7).unwrap();
        for (x, y) in a.poses.iter().zip(&b.poses) {
            assert!(x.rotation.angle_to_deg(y.rotation) < 1e-6);
            assert!(dist2(x.translation, y.translation) < 1e-20);
        }
    }

    #[test]
    fn refine_stage_trains_only_its_network() {
        let m = AssemblyModel::new(tiny(3), 3).unwrap();
        for net in &m.nets[1..] {
            let w = &net.predictor.layers.last().unwrap().weight;
            w.set_values(Rng::new(5).normals(w.numel()).iter().map(|v| v * 0.3).collect()).unwrap();
        }
        let cs = clouds(3, 8, 2);
        let full = m.coarse_to_fine(&cs, 9).unwrap();
        let last = m.refine_stage(&cs, 9, 2).unwrap();
        assert_eq!(full.quats.to_vec(), last.quats.to_vec());
        assert_eq!(full.translations.to_vec(), last.translations.to_vec());

        m.params().zero_grad();
        ops::sum(&m.refine_stage(&cs, 9, 1).unwrap().translations).backward().unwrap();
        let touched = |s: usize| m.net_params(s).iter().any(|p| p.grad().is_some_and(|g| g.iter().any(|v| *v != 0.0)));
        assert!(!touched(0) && touched(1) && !touched(2));
        assert!(m.refine_stage(&cs, 9, 3).is_err());
    }
}
