//! Independent oracles shared by the core integration tests and the
//! workspace acceptance suite. Each check returns a one-line summary on
//! success and the first violation on failure.

#![allow(dead_code)]

use std::collections::HashMap;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempora_core::attention::MultiHeadAttention;
use tempora_core::bank::MemoryBank;
use tempora_core::data::{build_sample, Event, Scheme, VideoClip};
use tempora_core::interface::{Aggregation, InterfaceConfig, ModelDims, QFormer, VisionLanguageInterface};
use tempora_core::lm::LmConfig;
use tempora_core::model::{Example, Vlm, VlmConfig};
use tempora_core::moe::{decide, MoeConfig, MoeLayer, MoeMode};
use tempora_core::nn::Ctx;
use tempora_core::{ParamId, ParamStore, Tape, Tensor, Var};

pub type Check = Result<String, String>;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-5;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Reduces any output to a scalar with fixed pseudo-random weights so that
/// every output element contributes a distinct coefficient.
pub fn project<'t>(ctx: Ctx<'t, f64>, v: Var<'t, f64>) -> Var<'t, f64> {
    let shape = v.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ shape.iter().product::<usize>() as u64);
    let w = ctx.constant(randn(&shape, &mut rng));
    v.mul(w).expect("same shape").sum()
}

/// Largest relative error between taped and central-difference gradients.
/// At most `per_tensor` coordinates of each parameter are probed.
pub fn gradcheck<F>(store: &mut ParamStore<f64>, per_tensor: usize, rng: &mut ChaCha8Rng, f: F) -> f64
where
    F: for<'t> Fn(Ctx<'t, f64>) -> tempora_core::Result<Var<'t, f64>>,
{
    let analytic: HashMap<ParamId, Vec<f64>> = {
        let tape = Tape::new();
        let loss = f(Ctx::new(&tape, store)).expect("forward");
        tape.backward(loss).expect("backward");
        tape.param_grads().into_iter().collect()
    };
    let eval = |s: &ParamStore<f64>| {
        let tape = Tape::new();
        f(Ctx::new(&tape, s)).expect("forward").value().item()
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let mut worst = 0.0f64;
    for id in ids {
        let n = store.get(id).numel();
        let coords: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        for i in coords {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = eval(store);
            store.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let taped = analytic.get(&id).map_or(0.0, |g| g[i]);
            worst = worst.max(rel_err(taped, numeric));
        }
    }
    worst
}

type Case = fn(u64) -> f64;

macro_rules! op_case {
    ($name:ident, [$($shape:expr),*], |$ctx:ident, $v:ident| $body:expr) => {
        fn $name(seed: u64) -> f64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shapes: &[&[usize]] = &[$(&$shape),*];
            let mut store = ParamStore::new();
            let ids: Vec<ParamId> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| store.add(format!("in{i}"), randn(s, &mut rng)))
                .collect();
            let mut probe = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
            gradcheck(&mut store, usize::MAX, &mut probe, |$ctx| {
                let $v: Vec<Var<'_, f64>> = ids.iter().map(|&i| $ctx.p(i)).collect();
                let out: Var<'_, f64> = $body?;
                Ok(project($ctx, out))
            })
        }
    };
}

op_case!(g_matmul, [[3, 4], [4, 5]], |c, v| v[0].matmul(v[1]));
op_case!(g_matmul_t, [[3, 4], [5, 4]], |c, v| v[0].matmul_t(v[1]));
op_case!(g_transpose, [[3, 4]], |c, v| v[0].transpose());
op_case!(g_add_bcast, [[3, 4], [4]], |c, v| v[0].add(v[1]));
op_case!(g_sub_bcast, [[3, 1], [1, 4]], |c, v| v[0].sub(v[1]));
op_case!(g_mul_bcast, [[2, 3, 4], [3, 1]], |c, v| v[0].mul(v[1]));
op_case!(g_scale, [[2, 5]], |c, v| Ok::<_, tempora_core::Error>(v[0].scale(-1.7)));
op_case!(g_softmax_first, [[3, 4]], |c, v| v[0].softmax(0));
op_case!(g_softmax_mid, [[2, 3, 4]], |c, v| v[0].softmax(1));
op_case!(g_softmax_last, [[2, 3, 4]], |c, v| v[0].softmax_last());
op_case!(g_layer_norm, [[3, 5], [5], [5]], |c, v| v[0].layer_norm(v[1], v[2]));
op_case!(g_gelu, [[3, 4]], |c, v| Ok::<_, tempora_core::Error>(v[0].gelu()));
op_case!(g_relu, [[3, 4]], |c, v| Ok::<_, tempora_core::Error>(v[0].relu()));
op_case!(g_embedding, [[6, 3]], |c, v| v[0].embedding(&[0, 5, 2, 2, 4]));
op_case!(g_gather_rows, [[5, 3]], |c, v| v[0].gather_rows(&[4, 1, 1, 0]));
op_case!(g_scatter_rows, [[3, 2]], |c, v| v[0].scatter_rows(&[4, 0, 2], 6));
op_case!(g_concat0, [[2, 3], [1, 3], [3, 3]], |c, v| Var::concat(&v, 0));
op_case!(g_concat1, [[2, 3], [2, 1]], |c, v| Var::concat(&v, 1));
op_case!(g_mean_axis, [[2, 3, 4]], |c, v| v[0].mean_axis(1));
op_case!(g_sum_axis, [[2, 3, 4]], |c, v| v[0].sum_axis(0));
op_case!(g_sum, [[2, 3]], |c, v| Ok::<_, tempora_core::Error>(v[0].sum()));
op_case!(g_reshape, [[2, 6]], |c, v| v[0].reshape(&[3, 4]));
op_case!(g_narrow, [[3, 5]], |c, v| v[0].narrow(1, 1, 3));
op_case!(g_cross_entropy, [[4, 6]], |c, v| v[0].cross_entropy(&[Some(1), None, Some(5), Some(0)]));

fn small_dims() -> ModelDims {
    ModelDims {
        visual_dim: 4,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 12,
    }
}

fn g_attention(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, &mut rng, "attn", 8, 2);
    let q = store.add("q", randn(&[3, 8], &mut rng));
    let k = store.add("k", randn(&[5, 8], &mut rng));
    let causal = seed % 2 == 0;
    let mut probe = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    gradcheck(&mut store, 6, &mut probe, |ctx| {
        let ctx_v = if causal { ctx.p(q) } else { ctx.p(k) };
        let out = attn.attend(ctx, ctx.p(q), ctx_v, causal)?;
        Ok(project(ctx, out.output))
    })
}

fn g_qformer(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = InterfaceConfig::qformer_sa(1).with_queries(3);
    let qf = QFormer::new(&mut store, &mut rng, "qf", &cfg, &small_dims());
    let context = store.add("context", randn(&[5, 4], &mut rng));
    let positions: Vec<f64> = (1..=5).map(f64::from).collect();
    let mut probe = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    gradcheck(&mut store, 6, &mut probe, |ctx| {
        let out = qf.forward(ctx, ctx.p(context), &positions, &mut Vec::new())?;
        Ok(project(ctx, out))
    })
}

fn moe_case(seed: u64, cfg: MoeConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = MoeLayer::new(&mut store, &mut rng, "moe", 6, 10, cfg);
    let x = store.add("x", randn(&[5, 6], &mut rng));
    let mut probe = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    gradcheck(&mut store, 8, &mut probe, |ctx| {
        let (y, _) = layer.forward(ctx, ctx.p(x))?;
        Ok(project(ctx, y))
    })
}

fn g_moe_dense(seed: u64) -> f64 {
    moe_case(seed, MoeConfig::dense(4))
}

fn g_moe_sparse_top1(seed: u64) -> f64 {
    moe_case(seed, MoeConfig::sparse(4, 1))
}

fn g_moe_sparse_top2(seed: u64) -> f64 {
    moe_case(seed, MoeConfig::sparse(4, 2))
}

fn bank_case(seed: u64, cfg: InterfaceConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let iface = VisionLanguageInterface::new(&mut store, &mut rng, &cfg.with_queries(3), &small_dims()).expect("interface");
    let frames = store.add("frames", randn(&[7, 2, 4], &mut rng));
    let positions: Vec<f64> = (1..=7).map(f64::from).collect();
    let mut probe = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    gradcheck(&mut store, 6, &mut probe, |ctx| {
        let out = iface.forward(ctx, ctx.p(frames), &positions, Some(3))?;
        Ok(project(ctx, out.tokens))
    })
}

fn g_bank_qformer(seed: u64) -> f64 {
    bank_case(seed, InterfaceConfig::qformer_sa(1))
}

fn g_bank_esa(seed: u64) -> f64 {
    bank_case(seed, InterfaceConfig::qformer_nosa(1, Aggregation::Esa))
}

pub fn tiny_vlm_config(interface: InterfaceConfig, bank: Option<usize>, moe: Option<MoeConfig>) -> VlmConfig {
    VlmConfig {
        interface,
        lm: LmConfig {
            layers: 1,
            model_dim: 8,
            heads: 2,
            ffn_dim: 12,
            max_sequence_length: 32,
        },
        visual_dim: 4,
        bank_capacity: bank,
        moe,
    }
}

fn full_model_case(seed: u64, cfg: VlmConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = 9;
    let mut model = Vlm::<f64>::new(&cfg, vocab, seed).expect("model");
    let frames = randn(&[5, 2, 4], &mut rng);
    let ex = Example {
        visual: tempora_core::interface::VisualInput::full(frames),
        prompt: vec![5, 6, 7],
        target: vec![8, 5],
    };
    let mut store = std::mem::take(&mut model.store);
    let mut probe = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    gradcheck(&mut store, 2, &mut probe, |ctx| model.example_loss(ctx, &ex, &mut Vec::new()))
}

fn g_model_linear(seed: u64) -> f64 {
    full_model_case(seed, tiny_vlm_config(InterfaceConfig::linear(), None, None))
}

fn g_model_step4(seed: u64) -> f64 {
    let iface = InterfaceConfig::qformer_sa(1).with_queries(3);
    full_model_case(seed, tiny_vlm_config(iface, Some(3), Some(MoeConfig::sparse(4, 1))))
}

pub const GRADIENT_CASES: &[(&str, Case)] = &[
    ("matmul", g_matmul),
    ("matmul_t", g_matmul_t),
    ("transpose", g_transpose),
    ("add (broadcast)", g_add_bcast),
    ("sub (broadcast)", g_sub_bcast),
    ("mul (broadcast)", g_mul_bcast),
    ("scale", g_scale),
    ("softmax axis 0", g_softmax_first),
    ("softmax axis 1", g_softmax_mid),
    ("softmax last", g_softmax_last),
    ("layer_norm", g_layer_norm),
    ("gelu", g_gelu),
    ("relu", g_relu),
    ("embedding", g_embedding),
    ("gather_rows", g_gather_rows),
    ("scatter_rows", g_scatter_rows),
    ("concat axis 0", g_concat0),
    ("concat axis 1", g_concat1),
    ("mean_axis", g_mean_axis),
    ("sum_axis", g_sum_axis),
    ("sum", g_sum),
    ("reshape", g_reshape),
    ("narrow", g_narrow),
    ("cross_entropy", g_cross_entropy),
    ("multi-head attention", g_attention),
    ("Q-Former submodule", g_qformer),
    ("MoE dense", g_moe_dense),
    ("MoE sparse k=1", g_moe_sparse_top1),
    ("MoE sparse k=2", g_moe_sparse_top2),
    ("bank + Q-Former", g_bank_qformer),
    ("bank + ESA", g_bank_esa),
    ("model loss (linear)", g_model_linear),
    ("model loss (step 4)", g_model_step4),
];

/// Runs every gradient case on `seeds` seeds.
pub fn gradient_oracle(seeds: u64) -> Check {
    let mut worst = (0.0f64, "");
    for &(name, case) in GRADIENT_CASES {
        for seed in 0..seeds {
            let e = case(seed);
            if !(e <= FD_TOLERANCE) {
                return Err(format!("{name} (seed {seed}): relative error {e:.2e}"));
            }
            if e > worst.0 {
                worst = (e, name);
            }
        }
    }
    Ok(format!(
        "{} cases x {seeds} seeds, worst {:.1e} ({})",
        GRADIENT_CASES.len(),
        worst.0,
        worst.1
    ))
}

fn logit_strategy() -> impl Strategy<Value = (Vec<f64>, f64)> {
    let scale = prop_oneof![Just(1.0), Just(1e2), Just(1e4), Just(1e8), Just(1e30)];
    (prop::collection::vec(-1.0f64..1.0, 1..=8), scale)
}

/// Attention rows and MoE combine weights sum to one, including extreme logits.
pub fn normalization(cases: u32) -> Check {
    let mut runner = TestRunner::new(PropConfig {
        cases,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strat = (logit_strategy(), 1usize..=6, 1usize..=6, any::<u64>());
    let checked = std::cell::Cell::new((0usize, 0usize));
    runner
        .run(&strat, |((unit, scale), lq, lk, seed)| {
            let logits: Vec<f64> = unit.iter().map(|x| x * scale).collect();
            // Router combine weights, every mode and k.
            for e in [1usize, 2, 4, 8] {
                let l: Vec<f64> = (0..e).map(|i| logits[i % logits.len()] + i as f64 * 1e-3).collect();
                let mut cfgs = vec![MoeConfig::dense(e)];
                cfgs.extend((1..=e).map(|k| MoeConfig::sparse(e, k)));
                for cfg in cfgs {
                    let d = decide(&l, &cfg);
                    let s: f64 = d.weights.iter().sum();
                    prop_assert!((s - 1.0).abs() <= 1e-6, "MoE weights sum {s} for {cfg:?}");
                    let lf: Vec<f32> = l.iter().map(|&x| x as f32).collect();
                    let d32 = decide(&lf, &cfg);
                    let s32: f64 = d32.weights.iter().map(|&w| w as f64).sum();
                    prop_assert!((s32 - 1.0).abs() <= 1e-6, "f32 MoE weights sum {s32}");
                    prop_assert_eq!(d.selected.len(), cfg.active_experts());
                }
            }
            // Attention rows on inputs scaled to produce extreme scores.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::<f32>::new();
            let attn = MultiHeadAttention::new(&mut store, &mut rng, "a", 4, 2);
            let sc = scale.min(1e15) as f32;
            let q = Tensor::<f32>::randn(&[lq, 4], sc as f64, &mut rng);
            let k = Tensor::<f32>::randn(&[lk, 4], sc as f64, &mut rng);
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store);
            let causal = lq == lk && seed % 2 == 0;
            let out = attn
                .attend(ctx, ctx.constant(q), ctx.constant(k), causal)
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            for w in &out.weights {
                let v = w.value();
                let cols = v.shape()[1];
                for row in v.data().chunks(cols) {
                    let s: f64 = row.iter().map(|&x| x as f64).sum();
                    prop_assert!((s - 1.0).abs() <= 1e-6, "attention row sums to {s}");
                    prop_assert!(row.iter().all(|x| x.is_finite() && *x >= 0.0));
                }
            }
            // The raw softmax op on the logits themselves.
            let tape = Tape::<f64>::new();
            let n = logits.len();
            let v = tape.constant(Tensor::new(&[1, n], logits.clone()).unwrap()).softmax_last().unwrap();
            let s: f64 = v.value().data().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "softmax sums to {s}");
            let c = checked.get();
            checked.set((c.0 + 1, c.1 + out.weights.len() * lq));
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let (n, rows) = checked.get();
    Ok(format!("{n} random inputs, {rows} attention rows, MoE weights for E in 1,2,4,8"))
}

/// E=1 matches the plain FFN bitwise; top_k=E matches dense; k=1 matches
/// the argmax expert; invocations equal N·k.
pub fn moe_identities(seeds: u64) -> Check {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=12);
        let mut store = ParamStore::<f32>::new();
        let x = Tensor::<f32>::randn(&[n, 8], 1.0, &mut rng);
        for mode in [MoeConfig::sparse(1, 1), MoeConfig::dense(1)] {
            let layer = MoeLayer::new(&mut store, &mut rng, &format!("one{seed}{:?}", mode.mode), 8, 16, mode);
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store);
            let (y, _) = layer.forward(ctx, ctx.constant(x.clone())).map_err(|e| e.to_string())?;
            let plain = layer.experts[0].forward(ctx, ctx.constant(x.clone())).map_err(|e| e.to_string())?;
            let (a, b) = (y.value(), plain.value());
            if a.data().iter().zip(b.data()).any(|(p, q)| p.to_bits() != q.to_bits()) {
                return Err(format!("seed {seed}: E=1 {:?} differs from the plain FFN", mode.mode));
            }
        }
        for e in [2usize, 4, 8] {
            let mut layer = MoeLayer::new(&mut store, &mut rng, &format!("l{seed}e{e}"), 8, 16, MoeConfig::sparse(e, e));
            let run = |layer: &MoeLayer, store: &ParamStore<f32>| {
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, store);
                let (y, d) = layer.forward(ctx, ctx.constant(x.clone())).expect("forward");
                (y.value(), d, tape.stats().expert_invocations)
            };
            let (sparse_all, _, inv) = run(&layer, &store);
            if inv != n * e {
                return Err(format!("seed {seed}: {inv} invocations for N={n}, k={e}"));
            }
            layer.cfg = MoeConfig::dense(e);
            let (dense, _, _) = run(&layer, &store);
            let diff = sparse_all
                .data()
                .iter()
                .zip(dense.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            if diff > 1e-6 {
                return Err(format!("seed {seed}: top_k=E differs from dense by {diff:e}"));
            }
            for k in 1..=e {
                layer.cfg = MoeConfig::sparse(e, k);
                let (_, _, inv) = run(&layer, &store);
                if inv != n * k {
                    return Err(format!("seed {seed}: {inv} invocations for N={n}, k={k}"));
                }
            }
            layer.cfg = MoeConfig::sparse(e, 1);
            let (top1, decisions, _) = run(&layer, &store);
            // Oracle: every expert on every token, then the router's argmax.
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store);
            let xin = ctx.constant(x.clone());
            let logits = layer.router.forward(ctx, xin).expect("router").value();
            let outs: Vec<Tensor<f32>> = layer
                .experts
                .iter()
                .map(|ex| ex.forward(ctx, xin).expect("expert").value())
                .collect();
            for t in 0..n {
                let row = logits.row(t);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                if decisions[t].selected != vec![best] {
                    return Err(format!("seed {seed}: token {t} routed to {:?}, argmax {best}", decisions[t].selected));
                }
                if top1.row(t).iter().zip(outs[best].row(t)).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    return Err(format!("seed {seed}: token {t} output differs from expert {best}"));
                }
            }
            if layer.cfg.mode != MoeMode::Sparse {
                unreachable!();
            }
        }
    }
    Ok(format!("{seeds} seeds, E in 1,2,4,8, every k"))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Exhaustive adjacent-pair oracle over random ingestion sequences.
pub fn bank_oracle(sequences: u64) -> Check {
    let mut merges = 0usize;
    for seq in 0..sequences {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seq);
        let cap = rng.random_range(1..=8);
        let f = rng.random_range(1..=24);
        let (p, d) = (rng.random_range(1..=3), rng.random_range(1..=5));
        let mut bank = MemoryBank::<f64>::new(cap).map_err(|e| e.to_string())?;
        // Oracle state: list of (first, last) ingestion ordinals; features
        // recomputed from the raw frames each time.
        let mut groups: Vec<(usize, usize)> = Vec::new();
        let mut raw: Vec<Vec<f64>> = Vec::new();
        let mut frame_index = 0usize;
        for i in 0..f {
            let mut frame = randn(&[p, d], &mut rng);
            // Occasional duplicates create exact ties.
            if i > 0 && rng.random_bool(0.15) {
                frame = Tensor::new(&[p, d], raw[i - 1].clone()).unwrap();
            }
            raw.push(frame.data().to_vec());
            frame_index += rng.random_range(1..=3);
            groups.push((i, i));
            let pooled: Vec<Vec<f64>> = groups
                .iter()
                .map(|&(a, b)| {
                    (0..d)
                        .map(|j| {
                            let mut s = 0.0;
                            for r in &raw[a..=b] {
                                for pi in 0..p {
                                    s += r[pi * d + j];
                                }
                            }
                            s / ((b - a + 1) * p) as f64
                        })
                        .collect()
                })
                .collect();
            let expected = if groups.len() > cap {
                let sims: Vec<f64> = pooled.windows(2).map(|w| cosine(&w[0], &w[1])).collect();
                let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                Some((sims, max))
            } else {
                None
            };
            let merged = bank.ingest(frame, frame_index).map_err(|e| e.to_string())?;
            match (&expected, merged) {
                (None, None) => {}
                (Some((sims, max)), Some(m)) => {
                    merges += 1;
                    if sims[m] < max - 1e-9 {
                        return Err(format!("sequence {seq}: merged pair {m} is not the most similar"));
                    }
                    let first_max = sims.iter().position(|&s| s >= max - 1e-9).unwrap();
                    let unique = sims.iter().filter(|&&s| s >= max - 1e-9).count() == 1;
                    if unique && m != first_max {
                        return Err(format!("sequence {seq}: merged {m}, oracle {first_max}"));
                    }
                    if !unique && m != first_max && (sims[m] - sims[first_max]).abs() > 1e-12 {
                        return Err(format!("sequence {seq}: tie not broken toward the earlier pair"));
                    }
                    let right = groups.remove(m + 1);
                    groups[m].1 = right.1;
                }
                (e, m) => return Err(format!("sequence {seq}: expected merge {:?}, got {m:?}", e.is_some())),
            }
            bank.check_invariants().map_err(|e| format!("sequence {seq}: {e}"))?;
            if bank.len() > cap || bank.len() != groups.len() {
                return Err(format!("sequence {seq}: {} entries, capacity {cap}", bank.len()));
            }
            for (entry, &(a, b)) in bank.entries().iter().zip(&groups) {
                if entry.rows != (a, b) || entry.weight != b - a + 1 {
                    return Err(format!("sequence {seq}: entry rows {:?} weight {} vs oracle {:?}", entry.rows, entry.weight, (a, b)));
                }
                for (k, &v) in entry.feature.data().iter().enumerate() {
                    let mean = raw[a..=b].iter().map(|r| r[k]).sum::<f64>() / (b - a + 1) as f64;
                    if (v - mean).abs() > 1e-9 {
                        return Err(format!("sequence {seq}: entry feature is not the mean of its frames"));
                    }
                }
            }
            let spans: Vec<(usize, usize)> = bank.entries().iter().map(|e| e.span).collect();
            if spans.windows(2).any(|w| w[0].1 >= w[1].0) || spans.iter().any(|s| s.0 > s.1) {
                return Err(format!("sequence {seq}: spans overlap or are out of order: {spans:?}"));
            }
        }
        let total: usize = bank.entries().iter().map(|e| e.weight).sum();
        if total != f {
            return Err(format!("sequence {seq}: weights sum to {total}, ingested {f}"));
        }
    }
    let bypass = bank_bypass_identity(20)?;
    Ok(format!("{sequences} sequences, {merges} merges checked; {bypass}"))
}

/// With `B >= F` the bank path is bit-identical to the no-bank path.
pub fn bank_bypass_identity(seeds: u64) -> Check {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = rng.random_range(1..=10);
        let iface_cfg = if seed % 2 == 0 {
            InterfaceConfig::qformer_sa(2)
        } else {
            InterfaceConfig::qformer_nosa(1, Aggregation::Esa)
        };
        let b = f + rng.random_range(0..3);
        let cfg = tiny_vlm_config(iface_cfg.clone().with_queries(4), Some(b), None);
        let with = Vlm::<f32>::new(&cfg, 10, seed).map_err(|e| e.to_string())?;
        let without = Vlm::<f32>::new(&tiny_vlm_config(iface_cfg.with_queries(4), None, None), 10, seed).map_err(|e| e.to_string())?;
        let ex = Example {
            visual: tempora_core::interface::VisualInput::full(Tensor::<f32>::randn(&[f, 2, 4], 1.0, &mut rng)),
            prompt: vec![5, 6],
            target: vec![7, 8],
        };
        let tokens = |m: &Vlm<f32>| {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &m.store);
            m.visual_tokens(ctx, &ex.visual, &mut Vec::new()).expect("forward").value()
        };
        let (a, c) = (tokens(&with), tokens(&without));
        if a.shape() != c.shape() || a.data().iter().zip(c.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(format!("seed {seed}: B={b} >= F={f} changed the interface output"));
        }
        let (la, lc) = (with.loss_value(&[&ex]).unwrap(), without.loss_value(&[&ex]).unwrap());
        if la.to_bits() != lc.to_bits() {
            return Err(format!("seed {seed}: B >= F changed the loss"));
        }
    }
    Ok(format!("B >= F bit-identical on {seeds} clips"))
}

pub const REF_FIRST_CAPTION: &str = "woman in long white dress walking up a hillside path";
pub const REF_SECOND_CAPTION: &str = "a woman sitting on the beach with long hair";
pub const REF_VC_CAPTION: &str = "the buffalo bills new stadium is discussed as being deemed ineffective and not worth the investments made by the city and state.";

pub fn reference_clip() -> VideoClip {
    VideoClip {
        clip_id: "example".into(),
        frames: Tensor::zeros(&[8, 1, 1]),
        events: vec![
            Event {
                start: 1,
                end: 4,
                caption: REF_FIRST_CAPTION.into(),
            },
            Event {
                start: 5,
                end: 8,
                caption: REF_SECOND_CAPTION.into(),
            },
        ],
        fps: 1.0,
        global_caption: REF_VC_CAPTION.into(),
        feature_seed: 0,
    }
}

/// The four scheme builders against the example rows of the original study.
pub fn prompt_fidelity() -> Check {
    let clip = reference_clip();
    let expect = [
        (Scheme::Vc, None, "What does the video describe?", REF_VC_CAPTION.to_string(), true),
        (
            Scheme::Mc,
            Some(0),
            "Explain what happened from frame 1 to frame 4 in the video.",
            "woman in long white dress walking up a hillside path.".to_string(),
            true,
        ),
        (
            Scheme::Mg,
            Some(0),
            "During which frames in the video can we observe ''woman in long white dress walking up a hillside path``?",
            "from frame 1 to frame 4".to_string(),
            true,
        ),
        (
            Scheme::Dc,
            None,
            "Can you give me a breakdown of the occurrences at different timestamps in the video?",
            "woman in long white dress walking up a hillside path, from 1 to 4. a woman sitting on the beach with long hair, from 5 to 8.".to_string(),
            false,
        ),
    ];
    for (scheme, event, prompt, target, exact) in expect {
        let s = build_sample(&clip, scheme, event).map_err(|e| e.to_string())?;
        if s.prompt.as_bytes() != prompt.as_bytes() {
            return Err(format!("{scheme} prompt: {:?}", s.prompt));
        }
        let ok = if exact { s.target == target } else { s.target.starts_with(&target) };
        if !ok {
            return Err(format!("{scheme} target: {:?}", s.target));
        }
    }
    let dc = build_sample(&clip, Scheme::Dc, None).unwrap();
    if !dc.target.starts_with("woman in long white dress walking up a hillside path, from 1 to 4.") {
        return Err("DC target prefix".into());
    }
    Ok("VC, MC, MG and DC prompts and targets byte-exact".into())
}
