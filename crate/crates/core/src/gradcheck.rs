//! Finite-difference gradient suite over every network block.

use emavio_tensor::nn::{gated_activation, linear, lstm_cell, ConvParams, LstmParams};
use emavio_tensor::{finite_diff_check, GradCheckOptions, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, MemoryNorm, MemoryTargets, Precision};
use crate::data::{generate_sequence, SequenceSample};
use crate::encoders::{encode_inertial, encode_visual, wavenet_layer, WavenetLayerParams};
use crate::fusion::{ema_fuse, memory_transform, regress_pose, self_attention, AttentionOptions, AttentionParams};
use crate::geometry::PoseDelta;
use crate::losses::sequence_loss;
use crate::model::Model;
use crate::train::sample_loss;
use crate::Result;

pub const TOL_LINEAR: f64 = 1e-9;
pub const TOL_BLOCK: f64 = 1e-6;
pub const TOL_ENCODER: f64 = 1e-5;
pub const TOL_DEEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub worst_param: String,
    pub coords: usize,
}

impl BlockResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// A backward rule to corrupt while checking, for negative controls.
#[derive(Clone, Copy, Debug)]
pub struct Fault<'a> {
    pub op: &'a str,
    pub factor: f64,
}

fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect())
        .expect("positive shape")
}

fn store_of(entries: &[(&str, &[usize], f64)], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape, scale) in entries {
        store
            .insert(*name, random_tensor(shape, *scale, &mut rng))
            .expect("unique names");
    }
    store
}

/// `sum(y ⊙ r)` with a fixed random `r`.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(random_tensor(g.shape(y), 1.0, &mut rng));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn sub_store(model: &Model, prefixes: &[&str]) -> ParamStore {
    let mut store = ParamStore::new();
    for p in model.store.iter() {
        if prefixes.iter().any(|pre| p.name.starts_with(pre)) {
            store.insert(p.name.clone(), p.value.clone()).expect("unique names");
        }
    }
    store
}

fn check<F>(
    name: &'static str,
    tolerance: f64,
    store: &mut ParamStore,
    fault: Option<Fault>,
    opts: &GradCheckOptions,
    f: F,
) -> Result<BlockResult>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let report = finite_diff_check(
        |g, s| {
            if let Some(fault) = fault {
                g.inject_backward_fault(fault.op, fault.factor);
            }
            f(g, s).map_err(|e| match e {
                crate::Error::Tensor(t) => t,
                other => emavio_tensor::TensorError::Contract(other.to_string()),
            })
        },
        store,
        opts,
    )?;
    Ok(BlockResult {
        name,
        max_rel_error: report.max_rel_error,
        tolerance,
        worst_param: report.worst_param,
        coords: report.coords_checked,
    })
}

fn attention_store(d: usize, m: usize, seed: u64) -> ParamStore {
    let s = 1.0 / (d as f64).sqrt();
    store_of(
        &[
            ("f", &[4, d], 1.0),
            ("fusion.w_q", &[d, d], s),
            ("fusion.w_k", &[d, d], s),
            ("fusion.w_v", &[d, d], s),
            ("fusion.w_alpha", &[d, d], s),
            ("fusion.m_q1", &[m, d], s),
            ("fusion.m_q2", &[m, d], s),
            ("fusion.m_k1", &[m, d], s),
            ("fusion.m_k2", &[m, d], s),
        ],
        seed,
    )
}

/// Toy sample for the end-to-end block: the configured data spec cut to
/// two frames.
pub fn toy_sample(cfg: &Config) -> Result<SequenceSample> {
    let mut spec = cfg.data.clone();
    spec.frames = 2;
    spec.sequences = 1;
    generate_sequence(&spec, 0)
}

/// Runs every block check in 64-bit mode. Model-level blocks use the
/// configured dimensions with weights initialized from `cfg.seed`.
pub fn run_suite(cfg: &Config, fault: Option<Fault>) -> Result<Vec<BlockResult>> {
    let mut cfg = cfg.clone();
    cfg.precision = Precision::F64;
    cfg.validate()?;
    let opts = GradCheckOptions {
        epsilon: 1e-5,
        max_coords_per_param: 16,
        seed: cfg.seed,
    };
    let mut results = Vec::new();

    let mut s = store_of(&[("x", &[3, 5], 1.0), ("w", &[4, 5], 1.0), ("b", &[4], 1.0)], 1);
    results.push(check("linear", TOL_LINEAR, &mut s, fault, &opts, |g, s| {
        let (x, w, b) = (g.param(s, 0), g.param(s, 1), g.param(s, 2));
        let y = linear(g, x, w, Some(b))?;
        project(g, y, 11)
    })?);

    let mut s = store_of(&[("x", &[3, 9], 1.0), ("w", &[4, 3, 2], 0.5), ("b", &[4], 0.5)], 2);
    results.push(check("conv1d_causal", TOL_BLOCK, &mut s, fault, &opts, |g, s| {
        let (x, w, b) = (g.param(s, 0), g.param(s, 1), g.param(s, 2));
        let y = g.conv1d_causal(x, w, Some(b), 2)?;
        project(g, y, 12)
    })?);

    let gated_entries: [(&str, &[usize], f64); 5] = [
        ("x", &[4, 8], 1.0),
        ("wf", &[3, 4, 2], 0.5),
        ("bf", &[3], 0.5),
        ("wg", &[3, 4, 2], 0.5),
        ("bg", &[3], 0.5),
    ];
    let mut s = store_of(&gated_entries, 3);
    results.push(check("gated_activation", TOL_BLOCK, &mut s, fault, &opts, |g, s| {
        let x = g.param(s, 0);
        let f = ConvParams { weight: g.param(s, 1), bias: Some(g.param(s, 2)) };
        let gt = ConvParams { weight: g.param(s, 3), bias: Some(g.param(s, 4)) };
        let z = gated_activation(g, x, f, gt, 2)?;
        project(g, z, 13)
    })?);

    let c = 4;
    let wn: Vec<(String, Vec<usize>)> = ["filter", "gate"]
        .iter()
        .flat_map(|b| {
            [
                (format!("inertial.layer1.{b}_weight"), vec![c, c, 2]),
                (format!("inertial.layer1.{b}_bias"), vec![c]),
            ]
        })
        .chain(["residual", "skip"].iter().flat_map(|b| {
            [
                (format!("inertial.layer1.{b}_weight"), vec![c, c, 1]),
                (format!("inertial.layer1.{b}_bias"), vec![c]),
            ]
        }))
        .collect();
    let mut entries: Vec<(&str, &[usize], f64)> = vec![("x", &[4, 11], 1.0)];
    entries.extend(wn.iter().map(|(n, sh)| (n.as_str(), sh.as_slice(), 0.5)));
    let mut s = store_of(&entries, 4);
    results.push(check("wavenet_layer", TOL_BLOCK, &mut s, fault, &opts, |g, s| {
        let x = g.param(s, 0);
        let w = WavenetLayerParams::load(g, s, 1)?;
        let (res, skip) = wavenet_layer(g, x, 1, &w)?;
        let a = project(g, res, 14)?;
        let b = project(g, skip, 15)?;
        Ok(g.add(a, b)?)
    })?);

    let mut s = store_of(
        &[
            ("x", &[1, 3], 1.0),
            ("h", &[1, 4], 1.0),
            ("c", &[1, 4], 1.0),
            ("w_ih", &[16, 3], 0.5),
            ("w_hh", &[16, 4], 0.5),
            ("bias", &[16], 0.5),
        ],
        5,
    );
    results.push(check("lstm_cell", TOL_BLOCK, &mut s, fault, &opts, |g, s| {
        let w = LstmParams { w_ih: g.param(s, 3), w_hh: g.param(s, 4), bias: g.param(s, 5) };
        let (x, h0, c0) = (g.param(s, 0), g.param(s, 1), g.param(s, 2));
        let (h1, c1) = lstm_cell(g, x, h0, c0, w)?;
        let (h2, _) = lstm_cell(g, x, h1, c1, w)?;
        project(g, h2, 16)
    })?);

    let (d, m) = (8, 5);
    let mut s = attention_store(d, m, 6);
    results.push(check("self_attention", TOL_BLOCK, &mut s, fault, &opts, |g, s| {
        let f = g.param(s, 0);
        let w = AttentionParams::load(g, s, false)?;
        let out = self_attention(g, f, &w, false)?;
        project(g, out.tokens, 17)
    })?);

    let mut s = attention_store(d, m, 7);
    results.push(check("memory_transform", TOL_BLOCK, &mut s, fault, &opts, |g, s| {
        let f = g.param(s, 0);
        let w = AttentionParams::load(g, s, true)?;
        let a = memory_transform(g, f, w.m_q1, w.m_q2, MemoryNorm::Double)?;
        let b = memory_transform(g, f, w.m_k1, w.m_k2, MemoryNorm::Softmax)?;
        let pa = project(g, a, 18)?;
        let pb = project(g, b, 19)?;
        Ok(g.add(pa, pb)?)
    })?);

    let mut s = attention_store(d, m, 8);
    results.push(check("ema_fuse", TOL_BLOCK, &mut s, fault, &opts, |g, s| {
        let f = g.param(s, 0);
        let w = AttentionParams::load(g, s, true)?;
        let mut acc = None;
        for (i, targets) in [MemoryTargets::Qk, MemoryTargets::Qv].into_iter().enumerate() {
            let opts = AttentionOptions { targets, norm: MemoryNorm::Double, scale: i == 1 };
            let out = ema_fuse(g, f, &w, opts)?;
            let p = project(g, out.tokens, 20 + i as u64)?;
            acc = Some(match acc {
                Some(a) => g.add(a, p)?,
                None => p,
            });
        }
        Ok(acc.expect("two modes"))
    })?);

    let mut s = store_of(
        &[
            ("x", &[1, 12], 1.0),
            ("regressor.fc1_weight", &[7, 12], 0.3),
            ("regressor.fc1_bias", &[7], 0.3),
            ("regressor.fc2_weight", &[6, 7], 0.4),
            ("regressor.fc2_bias", &[6], 0.4),
        ],
        9,
    );
    results.push(check("pose_regressor", TOL_BLOCK, &mut s, fault, &opts, |g, s| {
        let x = g.param(s, 0);
        let y = regress_pose(g, s, x)?;
        project(g, y, 22)
    })?);

    let model = Model::new(&cfg.model, cfg.seed)?;
    let sample = toy_sample(&cfg)?;
    let mcfg = cfg.model.clone();

    let mut s = sub_store(&model, &["visual."]);
    results.push(check("visual_encoder", TOL_ENCODER, &mut s, fault, &opts, |g, s| {
        let y = encode_visual(g, s, &mcfg, &sample.frames[0])?;
        project(g, y, 23)
    })?);

    let mut s = sub_store(&model, &["inertial."]);
    results.push(check("inertial_encoder", TOL_ENCODER, &mut s, fault, &opts, |g, s| {
        let y = encode_inertial(g, s, &mcfg, &sample.imu[0])?;
        project(g, y, 24)
    })?);

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let rel: Vec<f64> = (0..18).map(|_| rng.random_range(-0.3..0.3)).collect();
    let mut s = ParamStore::new();
    s.insert("pred_rel", Tensor::new(&[3, 6], rel)?)?;
    let gt_seq = PoseDelta::new([0.2, -0.1, 0.05], [0.1, -0.2, 0.3]);
    results.push(check("sequence_loss", TOL_DEEP, &mut s, fault, &opts, |g, s| {
        let p = g.param(s, 0);
        sequence_loss(g, p, &gt_seq, 100.0)
    })?);

    let mut s = model.store.clone();
    let loss_cfg = cfg.loss.clone();
    results.push(check("end_to_end", TOL_DEEP, &mut s, fault, &opts, |g, s| {
        let (_, _, total) = sample_loss(g, s, &mcfg, &sample, &loss_cfg, 0)?;
        Ok(total)
    })?);

    Ok(results)
}
