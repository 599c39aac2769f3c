//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Criterion numbers given as arguments
//! restrict the run to those criteria.

mod common;

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use emavio::config::EvalConfig;
use emavio::data::{generate_dataset, read_dataset, write_dataset, DataSpec, SequenceSample};
use emavio::encoders::{encode_inertial, encode_visual, inertial_activations};
use emavio::eval::{composed_endpoint_hpe, emit_report, evaluate, hpe, kitti_drift, csv_path};
use emavio::fusion::{ema_fuse, fuse_concat, self_attention, AttentionOptions, AttentionParams};
use emavio::geometry::{compose_chain, euler_to_rotation, pose_to_transform, rotation_to_euler, Se3};
use emavio::gradcheck::{run_suite, TOL_BLOCK, TOL_DEEP, TOL_LINEAR};
use emavio::model::Ledger;
use emavio::train::{dataset_loss, first_step_below, StepLog, Trainer, CHECKPOINT_FILE, LOSS_LOG};
use emavio::{Config, FusionMode, Model, Precision};
use emavio_tensor::{Graph, Tensor};
use nalgebra::Matrix4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Data {
    train: Vec<SequenceSample>,
    held_out: Vec<SequenceSample>,
    long: Vec<SequenceSample>,
}

fn datasets(cfg: &Config) -> Data {
    let with = |seed, sequences, frames| DataSpec {
        seed,
        sequences,
        frames,
        ..cfg.data.clone()
    };
    Data {
        train: generate_dataset(&cfg.data).unwrap(),
        held_out: generate_dataset(&with(1000, 16, cfg.data.frames)).unwrap(),
        long: generate_dataset(&with(5000, 1, 901)).unwrap(),
    }
}

fn gradient_suite(cfg: &Config) -> Outcome {
    let start = Instant::now();
    let results = run_suite(cfg, None).map_err(e2s)?;
    let elapsed = start.elapsed();
    let required = |name: &str| match name {
        "linear" => TOL_LINEAR,
        "end_to_end" | "sequence_loss" => TOL_DEEP,
        "visual_encoder" | "inertial_encoder" => 1e-5,
        _ => TOL_BLOCK,
    };
    let mut worst = String::new();
    for r in &results {
        ensure(r.tolerance <= required(r.name), || format!("{} checked at loose tolerance {}", r.name, r.tolerance))?;
        ensure(r.passed(), || format!("{}: {:.3e} >= {:.0e} ({})", r.name, r.max_rel_error, r.tolerance, r.worst_param))?;
        worst.push_str(&format!(" {}={:.1e}", r.name, r.max_rel_error));
    }
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!("{} blocks in {:.1}s;{worst}", results.len(), elapsed.as_secs_f64()))
}

fn causality(cfg: &Config) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let models: Vec<Model> = (0..4).map(|s| Model::new(&cfg.model, 100 + s).unwrap()).collect();
    let l = cfg.model.imu_window;
    let activations = |m: &Model, w: &emavio::data::ImuWindow| {
        let mut g = Graph::new();
        let a = inertial_activations(&mut g, &m.store, &m.cfg, w).unwrap();
        g.value(a).clone()
    };
    let mut future_changed = 0;
    for trial in 0..1000 {
        let model = &models[trial % models.len()];
        let rows: Vec<[f64; 6]> = (0..l).map(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0))).collect();
        let t = rng.random_range(0..l - 1);
        let mut perturbed = rows.clone();
        for row in &mut perturbed[t + 1..] {
            for v in row.iter_mut() {
                *v += rng.random_range(-5.0..5.0);
            }
        }
        let a = activations(model, &emavio::data::ImuWindow::from_rows(&rows));
        let b = activations(model, &emavio::data::ImuWindow::from_rows(&perturbed));
        let c = a.shape()[0];
        for ch in 0..c {
            for s in 0..l {
                let (x, y) = (a.data()[ch * l + s], b.data()[ch * l + s]);
                if s <= t {
                    ensure(x.to_bits() == y.to_bits(), || {
                        format!("trial {trial}: step {s} changed after perturbing steps > {t}")
                    })?;
                } else if x != y {
                    future_changed += 1;
                }
            }
        }
    }
    ensure(future_changed > 0, || "perturbations never reached later steps".into())?;
    Ok("1000 trials, past activations bit-identical".into())
}

fn attention_contracts(cfg: &Config, data: &Data) -> Outcome {
    let mut max_dev = 0.0f64;
    for mode in [FusionMode::SelfAttention, FusionMode::Ema] {
        let mut mcfg = cfg.model.clone();
        mcfg.fusion = mode;
        let model = Model::new(&mcfg, 7).map_err(e2s)?;
        let mut zeroed = model.clone();
        let id = zeroed.store.id("fusion.w_alpha").unwrap();
        let shape = zeroed.store.get(id).value.shape().to_vec();
        zeroed.store.get_mut(id).value = Tensor::zeros(&shape);
        for sample in data.train.iter().take(8) {
            for (pair, imu) in sample.frames.iter().zip(&sample.imu) {
                let mut g = Graph::new();
                let out = model.forward_pair(&mut g, pair, imu).map_err(e2s)?;
                let a = g.value(out.attention.ok_or("no attention map")?).clone();
                let s = a.shape()[1];
                for row in a.data().chunks(s) {
                    ensure(row.iter().all(|&v| v >= 0.0), || format!("{mode:?}: negative attention"))?;
                    max_dev = max_dev.max((row.iter().sum::<f64>() - 1.0).abs());
                }

                let mut g = Graph::new();
                let s = &zeroed.store;
                let fv = encode_visual(&mut g, s, &mcfg, pair).map_err(e2s)?;
                let fi = encode_inertial(&mut g, s, &mcfg, imu).map_err(e2s)?;
                let tokens = fuse_concat(&mut g, fv, fi, mcfg.tokens).map_err(e2s)?;
                let out = match mode {
                    FusionMode::Ema => {
                        let w = AttentionParams::load(&mut g, s, true).map_err(e2s)?;
                        ema_fuse(&mut g, tokens, &w, AttentionOptions::from_config(&mcfg)).map_err(e2s)?
                    }
                    _ => {
                        let w = AttentionParams::load(&mut g, s, false).map_err(e2s)?;
                        self_attention(&mut g, tokens, &w, mcfg.attention_scale).map_err(e2s)?
                    }
                };
                ensure(g.value(out.tokens) == g.value(tokens), || {
                    format!("{mode:?}: zero W_alpha output differs from its input")
                })?;
            }
        }
    }
    ensure(max_dev <= 1e-9, || format!("row sums off by {max_dev:e}"))?;
    Ok(format!("max |row sum - 1| = {max_dev:.1e}; zero-W_alpha identity exact in both modes"))
}

fn se3_suite(data: &Data) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut euler_dev = 0.0f64;
    for k in 0..2000 {
        let psi: [f64; 3] = if k < 1000 {
            std::array::from_fn(|_| rng.random_range(-0.5..0.5))
        } else {
            let m = FRAC_PI_2 - 0.01;
            [rng.random_range(-3.1..3.1), rng.random_range(-m..m), rng.random_range(-3.1..3.1)]
        };
        let back = rotation_to_euler(&euler_to_rotation(&psi)).map_err(e2s)?;
        for i in 0..3 {
            euler_dev = euler_dev.max((back[i] - psi[i]).abs());
        }
    }
    ensure(euler_dev < 1e-9, || format!("Euler round trip off by {euler_dev:e}"))?;

    let mut chain_dev = 0.0f64;
    for _ in 0..1000 {
        let poses: Vec<_> = (0..5).map(|_| random_pose(&mut rng, 2.0, 1.0)).collect();
        let ours = compose_chain(&poses.iter().map(pose_to_transform).collect::<Vec<_>>()).map_err(e2s)?;
        let brute = poses.iter().fold(Matrix4::identity(), |acc, p| acc * na_pose(p));
        chain_dev = chain_dev.max(max_abs(&to_na(&ours), &brute));
    }
    ensure(chain_dev < 1e-10, || format!("5-chains off by {chain_dev:e}"))?;

    let mut gt_dev = 0.0f64;
    let mut count = 0;
    for sample in data.train.iter().chain(&data.held_out).chain(&data.long) {
        let chain = compose_chain(&sample.gt_rel.iter().map(pose_to_transform).collect::<Vec<_>>()).map_err(e2s)?;
        gt_dev = gt_dev.max(max_abs(&to_na(&chain), &to_na(&pose_to_transform(&sample.gt_seq))));
        count += 1;
    }
    ensure(gt_dev < 1e-6, || format!("ground-truth chains off by {gt_dev:e}"))?;
    Ok(format!(
        "Euler {euler_dev:.1e}, 5-chains {chain_dev:.1e}, ground truth {gt_dev:.1e} over {count} samples"
    ))
}

fn metric_oracles(data: &Data) -> Outcome {
    let desk = EvalConfig::default().lengths;
    let full = EvalConfig::full_scale().lengths;

    let gt = &data.long[0].poses;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (smooth, _) = smooth_pair(&mut rng, 300);
    let smooth: Vec<Se3> = smooth.iter().map(from_na).collect();
    for series in [gt.as_slice(), smooth.as_slice()] {
        let d = kitti_drift(series, series, &desk, 1).map_err(e2s)?;
        let all_zero = d.per_length.iter().all(|l| l.t_rel_percent == 0.0 && l.r_rel_deg_per_100m == 0.0);
        ensure(all_zero && d.t_rel_avg == 0.0 && d.r_rel_avg == 0.0, || format!("self drift {d:?}"))?;
    }

    let line = |scale: f64| -> Vec<Se3> {
        (0..=1000)
            .map(|k| Se3::new(emavio::geometry::IDENTITY3, [scale * k as f64, 0.0, 0.0]).unwrap())
            .collect()
    };
    let (gt_line, pred_line) = (line(1.0), line(1.01));
    let mut line_dev = 0.0f64;
    for lengths in [&full, &desk] {
        let d = kitti_drift(&pred_line, &gt_line, lengths, 1).map_err(e2s)?;
        ensure(d.per_length.len() == lengths.len(), || "missing lengths on the line".into())?;
        for l in &d.per_length {
            line_dev = line_dev.max((l.t_rel_percent - 1.0).abs());
        }
    }
    ensure(line_dev <= 1e-6, || format!("straight line t_rel off by {line_dev:e}"))?;

    let shifted: Vec<Se3> = gt
        .iter()
        .map(|p| {
            let t = p.translation();
            Se3::new(*p.rotation(), [t[0] + 3.0, t[1] + 4.0, t[2]]).unwrap()
        })
        .collect();
    let h = hpe(&shifted, gt).map_err(e2s)?;
    ensure((h - 5.0).abs() <= 1e-12, || format!("3-4-5 hpe = {h}"))?;

    let mut dual_dev = 0.0f64;
    for trial in 0..5 {
        let (gt_m, pred_m) = smooth_pair(&mut rng, 250 + 50 * trial);
        let gt_s: Vec<Se3> = gt_m.iter().map(from_na).collect();
        let pred_s: Vec<Se3> = pred_m.iter().map(from_na).collect();
        let lengths = [desk.clone(), vec![100.0, 150.0, 200.0]].concat();
        let ours = kitti_drift(&pred_s, &gt_s, &lengths, 1).map_err(e2s)?;
        let theirs = reference_drift(&pred_m, &gt_m, &lengths);
        ensure(ours.per_length.len() == theirs.len(), || "evaluators disagree on lengths".into())?;
        for (a, b) in ours.per_length.iter().zip(&theirs) {
            ensure(a.segments == b.3, || format!("segment counts {} vs {}", a.segments, b.3))?;
            dual_dev = dual_dev
                .max((a.t_rel_percent - b.1).abs())
                .max((a.r_rel_deg_per_100m - b.2).abs());
        }
    }
    ensure(dual_dev < 1e-9, || format!("dual evaluators differ by {dual_dev:e}"))?;
    Ok(format!(
        "self drift 0, line t_rel dev {line_dev:.1e}, hpe 3-4-5 = {h}, dual evaluator dev {dual_dev:.1e}"
    ))
}

struct Runs {
    with_seq: (Model, Vec<StepLog>),
    without_seq: (Model, Vec<StepLog>),
}

fn train(cfg: &Config, samples: &[SequenceSample]) -> Result<(Model, Vec<StepLog>), String> {
    let mut trainer = Trainer::new(cfg).map_err(e2s)?;
    let rows = (0..cfg.train.steps)
        .map(|_| trainer.train_step(samples))
        .collect::<emavio::Result<Vec<_>>>()
        .map_err(e2s)?;
    Ok((trainer.model, rows))
}

fn training_runs<'a>(cfg: &Config, data: &Data, runs: &'a mut Option<Runs>) -> Result<&'a Runs, String> {
    if runs.is_none() {
        let mut off = cfg.clone();
        off.loss.use_multistate = false;
        *runs = Some(Runs {
            with_seq: train(cfg, &data.train)?,
            without_seq: train(&off, &data.train)?,
        });
    }
    Ok(runs.as_ref().unwrap())
}

fn learning_signal(cfg: &Config, data: &Data, runs: &mut Option<Runs>) -> Outcome {
    let start = Instant::now();
    let init = Trainer::new(cfg).map_err(e2s)?.model;
    let l0 = dataset_loss(&init, &data.train, &cfg.loss).map_err(e2s)?.2;
    let (model, rows) = train(cfg, &data.train)?;
    let l1 = dataset_loss(&model, &data.train, &cfg.loss).map_err(e2s)?.2;
    let eval = &cfg.eval;
    let before = evaluate(&init, &data.long, eval, serde_json::Value::Null).map_err(e2s)?;
    let after = evaluate(&model, &data.long, eval, serde_json::Value::Null).map_err(e2s)?;
    let elapsed = start.elapsed();

    let mut off = cfg.clone();
    off.loss.use_multistate = false;
    *runs = Some(Runs {
        with_seq: (model, rows),
        without_seq: train(&off, &data.train)?,
    });

    let detail = format!(
        "loss {l0:.3} -> {l1:.3} ({:.1}%), held-out t_rel {:.2}% -> {:.2}%, {:.0}s",
        100.0 * l1 / l0,
        before.t_rel_avg,
        after.t_rel_avg,
        elapsed.as_secs_f64()
    );
    ensure(l1 < 0.25 * l0, || detail.clone())?;
    ensure(after.t_rel_avg < before.t_rel_avg, || detail.clone())?;
    ensure(elapsed < Duration::from_secs(600), || detail.clone())?;
    Ok(detail)
}

fn ablation(cfg: &Config, data: &Data, runs: &mut Option<Runs>) -> Outcome {
    let runs = training_runs(cfg, data, runs)?;
    let score = |m: &Model| -> Result<f64, String> {
        let preds = data
            .held_out
            .iter()
            .map(|s| m.predict(s))
            .collect::<emavio::Result<Vec<_>>>()
            .map_err(e2s)?;
        composed_endpoint_hpe(&preds, &data.held_out).map_err(e2s)
    };
    let (on, off) = (score(&runs.with_seq.0)?, score(&runs.without_seq.0)?);
    let half = |rows: &[StepLog]| first_step_below(rows, 0.5).map_or("never".to_string(), |s| s.to_string());
    let detail = format!(
        "endpoint hpe with constraint {on:.5} m, without {off:.5} m; loss < 50% of initial at step {} (with) / {} (without)",
        half(&runs.with_seq.1),
        half(&runs.without_seq.1)
    );
    ensure(on <= off, || detail.clone())?;
    Ok(detail)
}

fn efficiency(cfg: &Config) -> Outcome {
    let mut lstm = cfg.model.clone();
    lstm.fusion = FusionMode::Lstm;
    let ema = Ledger::for_config(&cfg.model);
    let alt = Ledger::for_config(&lstm);
    for (c, ledger) in [(&cfg.model, &ema), (&lstm, &alt)] {
        let built = Model::new(c, 0).map_err(e2s)?.ledger();
        ensure(&built == ledger, || "ledger disagrees with instantiated parameters".into())?;
    }
    let counts = |l: &Ledger| -> Vec<(usize, usize)> { l.blocks.iter().map(|b| (b.params, b.macs)).collect() };
    let want_ema = vec![(78952, 284672), (108096, 1093760), (24576, 100352), (33670, 33536)];
    let want_lstm = vec![(78952, 284672), (108096, 1093760), (33024, 131072), (9094, 8960)];
    ensure(counts(&ema) == want_ema, || format!("ema ledger {:?}", counts(&ema)))?;
    ensure(counts(&alt) == want_lstm, || format!("lstm ledger {:?}", counts(&alt)))?;
    ensure(ema.total_params() == 245294 && ema.total_macs() == 1512320, || "ema totals".into())?;
    let (fe, fl) = (ema.block("fusion").unwrap().params, alt.block("fusion").unwrap().params);
    ensure(fe < fl, || format!("fusion params ema {fe} vs lstm {fl}"))?;
    Ok(format!("fusion params ema {fe} < lstm {fl}; ledgers match the hand counts"))
}

fn reproducibility(cfg: &Config, data: &Data) -> Outcome {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let mut cfg = cfg.clone();
    cfg.precision = Precision::F64;
    cfg.train.steps = 6;
    cfg.train.checkpoint_every = 3;
    let samples = &data.train;

    let run = |name: &str, steps: u64| -> Result<std::path::PathBuf, String> {
        let dir = tmp.path().join(name);
        let mut c = cfg.clone();
        c.train.steps = steps;
        let mut trainer = if dir.join(CHECKPOINT_FILE).exists() {
            Trainer::resume(&c, &dir.join(CHECKPOINT_FILE)).map_err(e2s)?
        } else {
            Trainer::new(&c).map_err(e2s)?
        };
        trainer.run(samples, &dir).map_err(e2s)?;
        Ok(dir)
    };
    let a = run("a", 6)?;
    let b = run("b", 6)?;
    let read = |p: std::path::PathBuf| fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
    ensure(read(a.join(LOSS_LOG))? == read(b.join(LOSS_LOG))?, || "loss logs differ".into())?;

    run("r", 3)?;
    let resumed_ckpt = emavio::checkpoint::load(&tmp.path().join("r").join(CHECKPOINT_FILE)).map_err(e2s)?;
    let mut resumed = Trainer::with_model(&cfg, resumed_ckpt.model, resumed_ckpt.step);
    let first = resumed.train_step(samples).map_err(e2s)?;
    let mut straight = Trainer::new(&cfg).map_err(e2s)?;
    let rows = (0..4).map(|_| straight.train_step(samples)).collect::<emavio::Result<Vec<_>>>().map_err(e2s)?;
    ensure(same_bits(&first, &rows[3]), || format!("resumed step {first:?} vs {:?}", rows[3]))?;
    ensure(same_bits(&resumed.model.store, &straight.model.store), || "parameters after resumed step differ".into())?;
    run("r", 6)?;
    ensure(read(tmp.path().join("r").join(LOSS_LOG))? == read(a.join(LOSS_LOG))?, || "resumed log differs".into())?;
    ensure(read(tmp.path().join("r").join(CHECKPOINT_FILE))? == read(a.join(CHECKPOINT_FILE))?, || "resumed checkpoint differs".into())?;

    let model = emavio::checkpoint::load(&a.join(CHECKPOINT_FILE)).map_err(e2s)?.model;
    let json = serde_json::to_value(&cfg).map_err(e2s)?;
    let mut reports = Vec::new();
    for name in ["report_a.json", "report_b.json"] {
        let path = tmp.path().join(name);
        let report = evaluate(&model, &data.long, &cfg.eval, json.clone()).map_err(e2s)?;
        emit_report(&report, &path).map_err(e2s)?;
        reports.push((read(path.clone())?, read(csv_path(&path))?));
    }
    ensure(reports[0] == reports[1], || "reports differ".into())?;

    let dir = tmp.path().join("data");
    write_dataset(&dir, Some(&cfg.data), samples).map_err(e2s)?;
    let (_, back) = read_dataset(&dir).map_err(e2s)?;
    ensure(same_bits(&back, samples), || "dataset round trip changed values".into())?;
    Ok("loss logs, reports, dataset and resumed step bit-identical".into())
}

type Criterion<'a> = Box<dyn FnOnce(&mut Option<Runs>) -> Outcome + 'a>;

fn main() -> ExitCode {
    let cfg = Config::default();
    let data = datasets(&cfg);
    let mut runs = None;
    let criteria: Vec<(&str, Criterion)> = vec![
        ("1 gradient suite", Box::new(|_| gradient_suite(&cfg))),
        ("2 inertial causality", Box::new(|_| causality(&cfg))),
        ("3 attention contracts", Box::new(|_| attention_contracts(&cfg, &data))),
        ("4 SE(3) oracles", Box::new(|_| se3_suite(&data))),
        ("5 metric oracles", Box::new(|_| metric_oracles(&data))),
        ("6 learning signal", Box::new(|r| learning_signal(&cfg, &data, r))),
        ("7 multi-state ablation", Box::new(|r| ablation(&cfg, &data, r))),
        ("8 fusion efficiency", Box::new(|_| efficiency(&cfg))),
        ("9 reproducibility", Box::new(|_| reproducibility(&cfg, &data))),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.split(' ').next() == Some(o)) {
            continue;
        }
        match check(&mut runs) {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        println!("acceptance: all selected criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
