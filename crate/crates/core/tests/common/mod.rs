#![allow(dead_code)]

use ccs::dataset::{generate_shape, GenConfig, ShapeRecord};
use ccs::losses::{mon_loss, LossWeights};
use ccs::model::{AssemblyModel, ModelConfig};
use ccs::trainer::{RunConfig, TrainConfig};

pub const FIXTURE_NPC: usize = 32;

/// Four generated shapes with 2, 3, 4 and 3 parts.
pub fn fixture_shapes() -> Vec<ShapeRecord> {
    [(1usize, 0u64), (2, 1), (3, 2), (2, 3)]
        .iter()
        .map(|&(cuts, seed)| {
            let cfg = GenConfig {
                n_pc: FIXTURE_NPC,
                dense_points: 4096,
                cuts_min: cuts,
                cuts_max: cuts,
                max_parts: 4,
                ..GenConfig::default()
            };
            let mut rec = generate_shape(&cfg, seed).unwrap();
            rec.shape_id = format!("fixture{seed}");
            rec
        })
        .collect()
}

/// Small network, single batch of all four shapes.
pub fn fixture_config(ctf: usize, steps: u64) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            n_pc: FIXTURE_NPC,
            d_a: 32,
            d_l: 32,
            d_e: 32,
            slots: 4,
            heads: 2,
            stages: 2,
            k: 4,
            noise_dim: 8,
            ctf_stages: ctf,
            encoder_widths: vec![32, 64],
            predictor_widths: vec![64],
            max_parts: 4,
            loss: LossWeights {
                w_t: 100.0,
                ..LossWeights::default()
            },
            ..ModelConfig::default()
        },
        train: TrainConfig {
            lr: 3e-3,
            batch_size: 4,
            seed: 3,
            max_steps: Some(steps),
            ..TrainConfig::default()
        },
    }
}

/// Mean over shapes of the shape term of the min-of-N selected sample,
/// with fixed noise seeds.
pub fn fixture_shape_loss(model: &AssemblyModel, shapes: &[ShapeRecord]) -> f64 {
    let w = &model.config.loss;
    let seeds: Vec<u64> = (0..5).map(|s| 9000 + s).collect();
    let total: f64 = shapes
        .iter()
        .map(|r| {
            let out = mon_loss(|s| model.coarse_to_fine(&r.parts, s), &seeds, &r.parts, &r.gt_poses, w).unwrap();
            out.best.shape.item().unwrap()
        })
        .sum();
    total / shapes.len() as f64
}

pub const COLLISION_SEEDS: [u64; 5] = [11, 12, 13, 14, 15];

/// Two copies of the same canonical part.
pub fn twin_shape() -> ShapeRecord {
    let cfg = GenConfig {
        n_pc: 16,
        dense_points: 2048,
        cuts_min: 1,
        cuts_max: 1,
        max_parts: 2,
        ..GenConfig::default()
    };
    let base = generate_shape(&cfg, 5).unwrap();
    ShapeRecord {
        shape_id: "twins".into(),
        category: base.category.clone(),
        parts: vec![base.parts[0].clone(), base.parts[0].clone()],
        gt_poses: vec![base.gt_poses[0], base.gt_poses[0]],
        contacts: Vec::new(),
    }
}

/// Only the collision term is active.
pub fn collision_config(w_c: f64, steps: u64) -> RunConfig {
    let mut cfg = fixture_config(1, steps);
    cfg.model.n_pc = 16;
    cfg.model.max_parts = 2;
    cfg.model.loss = LossWeights {
        w_c,
        w_t: 0.0,
        w_r: 0.0,
        w_s: 0.0,
        ..LossWeights::default()
    };
    cfg.train.batch_size = 1;
    cfg
}

/// Smallest predicted centroid separation over the probe seeds.
pub fn twin_separation(model: &AssemblyModel, rec: &ShapeRecord) -> f64 {
    COLLISION_SEEDS
        .iter()
        .map(|&s| {
            let p = model.forward(&rec.parts, s).unwrap();
            let (a, b) = (p.poses[0].apply(&rec.parts[0]), p.poses[1].apply(&rec.parts[1]));
            ccs::geometry::dist2(a.centroid(), b.centroid()).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Shrinks the pose head so the twins start a few `epsilon_d` apart.
pub fn make_twins_coincident(model: &AssemblyModel, rec: &ShapeRecord, target: f64) {
    let w = &model.nets[0].predictor.layers.last().unwrap().weight;
    let widest = COLLISION_SEEDS
        .iter()
        .map(|&s| {
            let p = model.forward(&rec.parts, s).unwrap();
            ccs::geometry::dist2(p.poses[0].translation, p.poses[1].translation).sqrt()
        })
        .fold(0.0, f64::max);
    let k = target / widest;
    w.set_values(w.values().iter().map(|v| v * k).collect()).unwrap();
}
