use emavio::fusion::{ema_fuse, fuse, fuse_concat, memory_transform, self_attention, AttentionOptions, AttentionParams};
use emavio::{FusionMode, MemoryNorm, MemoryTargets, Model, ModelConfig};
use emavio_tensor::{Graph, ParamStore, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn store(d: usize, m: usize, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for name in ["w_q", "w_k", "w_v", "w_alpha"] {
        s.insert(format!("fusion.{name}"), random(&mut rng, d, d)).unwrap();
    }
    for name in ["m_q1", "m_q2", "m_k1", "m_k2"] {
        s.insert(format!("fusion.{name}"), random(&mut rng, m, d)).unwrap();
    }
    s
}

fn na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data())
}

fn w(s: &ParamStore, name: &str) -> DMatrix<f64> {
    na(&s.by_name(&format!("fusion.{name}")).unwrap().value)
}

fn softmax_rows(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

fn memory_oracle(x: &DMatrix<f64>, m1: &DMatrix<f64>, m2: &DMatrix<f64>, norm: MemoryNorm) -> DMatrix<f64> {
    let mut a = softmax_rows(&(x * m1.transpose()));
    if norm == MemoryNorm::Double {
        for mut col in a.column_iter_mut() {
            let s = col.sum();
            col /= s;
        }
    }
    a * m2
}

fn attention_oracle(f: &DMatrix<f64>, s: &ParamStore, opts: Option<AttentionOptions>) -> DMatrix<f64> {
    let mut q = f * w(s, "w_q").transpose();
    let mut k = f * w(s, "w_k").transpose();
    let mut v = f * w(s, "w_v").transpose();
    if let Some(o) = opts {
        q = memory_oracle(&q, &w(s, "m_q1"), &w(s, "m_q2"), o.norm);
        match o.targets {
            MemoryTargets::Qk => k = memory_oracle(&k, &w(s, "m_k1"), &w(s, "m_k2"), o.norm),
            MemoryTargets::Qv => v = memory_oracle(&v, &w(s, "m_k1"), &w(s, "m_k2"), o.norm),
        }
    }
    let mut logits = q * k.transpose();
    if opts.is_some_and(|o| o.scale) {
        logits /= (f.ncols() as f64).sqrt();
    }
    softmax_rows(&logits) * v * w(s, "w_alpha").transpose() + f
}

fn all_options() -> Vec<AttentionOptions> {
    let mut out = Vec::new();
    for targets in [MemoryTargets::Qk, MemoryTargets::Qv] {
        for norm in [MemoryNorm::Double, MemoryNorm::Softmax] {
            for scale in [false, true] {
                out.push(AttentionOptions { targets, norm, scale });
            }
        }
    }
    out
}

fn run(s: &ParamStore, f: &Tensor, opts: Option<AttentionOptions>) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let p = AttentionParams::load(&mut g, s, true).unwrap();
    let out = match opts {
        Some(o) => ema_fuse(&mut g, fv, &p, o).unwrap(),
        None => self_attention(&mut g, fv, &p, false).unwrap(),
    };
    (g.value(out.tokens).clone(), g.value(out.attention).clone())
}

#[test]
fn attention_matches_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (s_tokens, d, m) in [(4, 8, 5), (1, 6, 3), (6, 4, 1)] {
        let s = store(d, m, 9);
        let f = random(&mut rng, s_tokens, d);
        let (ours, _) = run(&s, &f, None);
        assert!((na(&ours) - attention_oracle(&na(&f), &s, None)).abs().max() < 1e-12);
        for o in all_options() {
            let (ours, _) = run(&s, &f, Some(o));
            let err = (na(&ours) - attention_oracle(&na(&f), &s, Some(o))).abs().max();
            assert!(err < 1e-12, "{o:?}: {err}");
        }
    }
}

#[test]
fn single_token_attends_to_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = store(6, 4, 3);
    let f = random(&mut rng, 1, 6);
    let (ours, attention) = run(&s, &f, None);
    assert_eq!(attention.data(), &[1.0]);
    let expected = na(&f) * w(&s, "w_v").transpose() * w(&s, "w_alpha").transpose() + na(&f);
    assert!((na(&ours) - expected).abs().max() < 1e-12);
}

#[test]
fn single_memory_slot() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, 5, 4);
    let m1 = random(&mut rng, 1, 4);
    let m2 = random(&mut rng, 1, 4);
    for (norm, weight) in [(MemoryNorm::Softmax, 1.0), (MemoryNorm::Double, 0.2)] {
        let mut g = Graph::new();
        let (xv, a, b) = (g.constant(x.clone()), g.constant(m1.clone()), g.constant(m2.clone()));
        let out = memory_transform(&mut g, xv, a, b, norm).unwrap();
        for row in g.value(out).data().chunks(4) {
            for (v, m) in row.iter().zip(m2.data()) {
                assert!((v - weight * m).abs() < 1e-15);
            }
        }
    }
    let cfg = ModelConfig {
        memory_slots: 0,
        ..ModelConfig::default()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn zero_projection_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut s = store(8, 4, 5);
    let id = s.id("fusion.w_alpha").unwrap();
    s.get_mut(id).value = Tensor::zeros(&[8, 8]);
    let f = random(&mut rng, 4, 8);
    assert_eq!(run(&s, &f, None).0, f);
    for o in all_options() {
        assert_eq!(run(&s, &f, Some(o)).0, f);
    }
}

#[test]
fn memory_settings_change_the_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = store(8, 4, 6);
    let f = random(&mut rng, 4, 8);
    let outputs: Vec<Tensor> = all_options().into_iter().map(|o| run(&s, &f, Some(o)).0).collect();
    let plain = run(&s, &f, None).0;
    for (i, a) in outputs.iter().enumerate() {
        assert!(a.max_abs_diff(&plain) > 1e-9);
        for b in &outputs[i + 1..] {
            assert!(a.max_abs_diff(b) > 1e-9);
        }
    }
}

#[test]
fn memory_parameters_receive_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for targets in [MemoryTargets::Qk, MemoryTargets::Qv] {
        let mut s = store(8, 4, 7);
        let mut g = Graph::new();
        let f = g.constant(random(&mut rng, 4, 8));
        let p = AttentionParams::load(&mut g, &s, true).unwrap();
        let opts = AttentionOptions { targets, ..Default::default() };
        let out = ema_fuse(&mut g, f, &p, opts).unwrap();
        let r = g.constant(random(&mut rng, 4, 8));
        let prod = g.mul(out.tokens, r).unwrap();
        let loss = g.sum(prod);
        g.backward(loss, &mut s).unwrap();
        for name in ["m_q1", "m_q2", "m_k1", "m_k2"] {
            let grad = s.by_name(&format!("fusion.{name}")).unwrap().grad.as_ref().unwrap();
            assert!(grad.data().iter().any(|&v| v.abs() > 1e-8), "{targets:?} {name}");
        }
    }
}

#[test]
fn concat_reshapes_into_tokens() {
    let mut g = Graph::new();
    let fv = g.constant(Tensor::new(&[1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
    let fi = g.constant(Tensor::new(&[1, 2], vec![4.0, 5.0]).unwrap());
    let t = fuse_concat(&mut g, fv, fi, 3).unwrap();
    assert_eq!(g.shape(t), [3, 2]);
    assert_eq!(g.value(t).data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    assert!(fuse_concat(&mut g, fv, fi, 4).is_err());
}

#[test]
fn swapping_feature_blocks_changes_the_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for fusion in [FusionMode::Ema, FusionMode::SelfAttention, FusionMode::Lstm] {
        let cfg = ModelConfig {
            fusion,
            ..ModelConfig::default()
        };
        let model = Model::new(&cfg, 2).unwrap();
        let (fv, fi) = (random(&mut rng, 1, cfg.d_v), random(&mut rng, 1, cfg.d_i));
        let run = |first: &Tensor, second: &Tensor| {
            let mut g = Graph::new();
            let (a, b) = (g.constant(first.clone()), g.constant(second.clone()));
            let tokens = fuse_concat(&mut g, a, b, cfg.tokens).unwrap();
            let out = fuse(&mut g, &model.store, &cfg, tokens).unwrap();
            g.value(out.features).clone()
        };
        assert!(run(&fv, &fi).max_abs_diff(&run(&fi, &fv)) > 1e-6, "{fusion:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_stochastic(seed in 0u64..10_000, tokens in 1usize..7, scale in 0.1..20.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = store(6, 3, seed);
        let f = random(&mut rng, tokens, 6).map(|v| v * scale);
        for opts in [None, Some(AttentionOptions::default())] {
            let (_, a) = run(&s, &f, opts);
            for row in a.data().chunks(tokens) {
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
