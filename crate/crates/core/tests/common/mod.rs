//! Oracles and checks shared by the integration tests and the acceptance
//! runner. Every check returns `Ok(detail)` on success and `Err(detail)`
//! on failure so both harnesses can report it their own way.
#![allow(dead_code)]

use rand::Rng;
use vad_core::attention::{Attention, AttentionKind, GateBranch};
use vad_core::dataprep::{mix_at_snr, synth_one, synth_utterance, NoiseType, Split, SynthConfig};
use vad_core::gradcheck::{grad_report_params, GradReport};
use vad_core::layers::{pool_stats, BatchNorm, Conv1d, Conv2d, Ctx, Dense, LstmLayer, Mode, PoolAxis};
use vad_core::loss::LossKind;
use vad_core::model::{Model, ModelConfig};
use vad_core::params::{BoundParams, ParamSet};
use vad_core::trainer::{train, TrainConfig, TrainOutputs};
use vad_core::{dataset, eval, rng, Tape, Tensor, Var};

pub type Check = Result<String, String>;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;

// ---------------------------------------------------------------- oracles

/// Mann-Whitney statistic by explicit pair counting, ties worth one half.
pub fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Per-frame loss written out directly from the definitions.
pub fn scalar_loss(gamma: Option<f64>, p: f64, label: u8) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    let yt = if label == 1 { p } else { 1.0 - p };
    match gamma {
        None => -yt.ln(),
        Some(g) => -(1.0 - yt).powf(g) * yt.ln(),
    }
}

/// SNR in dB of `speech` against the scaled noise segment `alpha * noise`.
pub fn achieved_snr_db(speech: &[f64], noise: &[f64], alpha: f64) -> f64 {
    let p_s: f64 = speech.iter().map(|v| v * v).sum::<f64>() / speech.len() as f64;
    let p_n: f64 = noise.iter().map(|v| (alpha * v).powi(2)).sum::<f64>() / noise.len() as f64;
    10.0 * (p_s / p_n).log10()
}

// ---------------------------------------------------------------- helpers

fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> vad_core::Result<Var> {
    let w = rng::uniform(&mut rng::seeded(seed), tape.shape(y), 1.0);
    let wv = tape.constant(w);
    let p = tape.mul(y, wv)?;
    tape.sum(p, None)
}

/// Outcome of one finite-difference comparison.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradOutcome {
    /// Largest relative error over the entries checked at `GRAD_EPS`.
    pub worst: f64,
    /// Entries out of tolerance at `GRAD_EPS` that agree at another step:
    /// smaller steps clear ReLU/max kinks, a larger step lifts tiny
    /// gradients above rounding noise.
    pub restepped: usize,
    /// Conv biases feeding batch norm: identically zero gradient that the
    /// central difference cannot resolve from rounding noise.
    pub structural_zeros: usize,
}

/// Compares analytic and numeric gradients entry by entry.
///
/// An entry out of tolerance at `GRAD_EPS` is accepted only if
/// * it is a bias feeding train-mode batch norm and both derivatives are
///   below the difference quotient's resolution, or
/// * the difference quotient agrees with the analytic value at one of the
///   steps 1e-4, 1e-6 or 1e-7 (the `GRAD_EPS` step crossed a kink, or the
///   derivative is so small that rounding dominates at `GRAD_EPS`).
fn verify(params: &ParamSet, report_at: impl Fn(f64) -> vad_core::Result<GradReport>) -> Result<GradOutcome, String> {
    let names: Vec<&str> = params
        .ids()
        .filter(|&id| params.is_trainable(id))
        .map(|id| params.name(id))
        .collect();
    let name_of = |input: usize| names.get(input).copied().unwrap_or("input");
    let report = report_at(GRAD_EPS).map_err(|e| e.to_string())?;
    let floor = report.resolution();
    let mut out = GradOutcome::default();
    let mut suspects = Vec::new();
    for (k, e) in report.entries.iter().enumerate() {
        let err = e.relative_error();
        if err < GRAD_TOL {
            out.worst = out.worst.max(err);
        } else if e.analytic.abs() <= floor && e.numeric.abs() <= floor && feeds_batch_norm(params, name_of(e.input)) {
            out.structural_zeros += 1;
        } else {
            suspects.push(k);
        }
    }
    if suspects.is_empty() {
        return Ok(out);
    }
    let steps = [1e-4, 1e-6, 1e-7];
    let others = steps
        .iter()
        .map(|&eps| report_at(eps).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    for k in suspects {
        let e = report.entries[k];
        if others.iter().any(|r| r.entries[k].relative_error() < GRAD_TOL) {
            out.restepped += 1;
        } else {
            let tried: Vec<String> = steps
                .iter()
                .zip(&others)
                .map(|(s, r)| format!("{s:e}: {:e}", r.entries[k].numeric))
                .collect();
            return Err(format!(
                "{}[{}]: gradient {:e} vs numeric {:e} ({})",
                name_of(e.input),
                e.index,
                e.analytic,
                e.numeric,
                tried.join(", ")
            ));
        }
    }
    Ok(out)
}

/// `<prefix>.conv<i>.bias` with a matching `<prefix>.bn<i>`.
pub fn feeds_batch_norm(params: &ParamSet, name: &str) -> bool {
    let Some(stem) = name.strip_suffix(".bias") else {
        return false;
    };
    let Some((prefix, conv)) = stem.rsplit_once(".conv") else {
        return false;
    };
    params.find(&format!("{prefix}.bn{conv}.gamma")).is_some()
}

fn check_params<F>(name: &str, params: &ParamSet, inputs: &[Tensor], seed: u64, f: F) -> Result<GradOutcome, String>
where
    F: Fn(&mut Ctx, &[Var]) -> vad_core::Result<Var>,
{
    verify(params, |eps| {
        grad_report_params(params, inputs, eps, |tape, bound: &BoundParams, vars| {
            let mut ctx = Ctx::new(tape, params, bound, Mode::Train);
            let y = f(&mut ctx, vars)?;
            weighted_sum(ctx.tape, y, seed ^ 0x5eed)
        })
    })
    .map_err(|e| format!("{name} seed {seed}: {e}"))
}

fn random(seed: u64, shape: &[usize]) -> Tensor {
    rng::uniform(&mut rng::seeded(seed), shape, 1.0)
}

/// Randomizes every trainable entry (so batch-norm scale/shift are not at
/// their identity init).
fn jitter(params: &mut ParamSet, seed: u64) {
    let mut r = rng::seeded(seed);
    for id in params.ids().collect::<Vec<_>>() {
        if params.is_trainable(id) {
            let t = params.get(id);
            let data = t.data().iter().map(|v| v + r.random_range(-0.3..0.3)).collect();
            params.set(id, Tensor::new(t.shape(), data).unwrap()).unwrap();
        }
    }
}

// ---------------------------------------------------------------- 1. gradients

/// Per-component outcome, aggregated over `seeds` seeds; `Err` holds the
/// first failure.
pub fn gradient_suite(seeds: u64) -> Vec<(String, Result<GradOutcome, String>)> {
    let mut report: Vec<(String, Result<GradOutcome, String>)> = Vec::new();
    let mut record = |name: &str, r: Result<GradOutcome, String>| {
        let slot = match report.iter_mut().find(|(n, _)| n == name) {
            Some((_, slot)) => slot,
            None => {
                report.push((name.to_string(), Ok(GradOutcome::default())));
                &mut report.last_mut().expect("just pushed").1
            }
        };
        if let (Ok(acc), new) = (slot.as_mut(), r) {
            match new {
                Ok(o) => {
                    acc.worst = acc.worst.max(o.worst);
                    acc.restepped += o.restepped;
                    acc.structural_zeros += o.structural_zeros;
                }
                Err(e) => *slot = Err(e),
            }
        }
    };
    for seed in 0..seeds {
        let mut r = rng::seeded(1000 + seed);

        let mut p = ParamSet::new();
        let dense = Dense::init(&mut p, "d", 3, 2, &mut r);
        record(
            "dense",
            check_params("dense", &p, &[random(seed, &[4, 3])], seed, |ctx, v| {
                dense.forward(ctx, v[0])
            }),
        );

        let mut p = ParamSet::new();
        let conv = Conv1d::init(&mut p, "c", 3, 2, 5, &mut r).unwrap();
        record(
            "conv1d",
            check_params("conv1d", &p, &[random(seed, &[2, 3, 9])], seed, |ctx, v| {
                conv.forward(ctx, v[0])
            }),
        );

        let mut p = ParamSet::new();
        let conv = Conv2d::init(&mut p, "c", 2, 2, 3, &mut r).unwrap();
        record(
            "conv2d",
            check_params("conv2d", &p, &[random(seed, &[2, 2, 4, 5])], seed, |ctx, v| {
                conv.forward(ctx, v[0])
            }),
        );

        let mut p = ParamSet::new();
        let bn = BatchNorm::init(&mut p, "bn", 2);
        jitter(&mut p, seed);
        record(
            "batch_norm",
            check_params("batch_norm", &p, &[random(seed, &[3, 2, 5])], seed, |ctx, v| {
                bn.forward(ctx, v[0])
            }),
        );

        let mut p = ParamSet::new();
        let lstm = LstmLayer::init(&mut p, "l", 3, 4, &mut r);
        record(
            "lstm",
            check_params("lstm", &p, &[random(seed, &[4, 2, 3])], seed, |ctx, v| {
                Ok(lstm.forward(ctx, v[0], None)?.hidden)
            }),
        );

        let p = ParamSet::new();
        for axis in [PoolAxis::Frequency, PoolAxis::Time] {
            record(
                "pooling",
                check_params("pooling", &p, &[random(seed, &[5, 2, 4])], seed, |ctx, v| {
                    let t = pool_stats(ctx.tape, v[0], axis)?;
                    let ax = if axis == PoolAxis::Time { 0 } else { 2 };
                    ctx.tape.concat(&[t.max, t.avg, t.std], ax)
                }),
            );
        }

        for kind in [
            AttentionKind::Ta,
            AttentionKind::Fa,
            AttentionKind::Da1,
            AttentionKind::Da2,
        ] {
            let mut p = ParamSet::new();
            let att = Attention::init(kind, &mut p, 1, &mut r).unwrap();
            jitter(&mut p, seed);
            let name = format!("attention {kind}");
            record(
                &name,
                check_params(&name, &p, &[random(seed, &[6, 2, 5])], seed, |ctx, v| {
                    att.apply(ctx, v[0], None)
                }),
            );
        }

        let mut p = ParamSet::new();
        let fa = GateBranch::init(&mut p, "fa", PoolAxis::Time, 1, &mut r).unwrap();
        record(
            "attention fa chunked",
            check_params("fa chunked", &p, &[random(seed, &[7, 2, 4])], seed, |ctx, v| {
                fa.logits_chunked(ctx, v[0], 3)
            }),
        );

        for loss in [LossKind::CrossEntropy, LossKind::Focal(2.0), LossKind::Focal(0.5)] {
            let p = ParamSet::new();
            let targets = Tensor::new(
                &[2, 5],
                (0..10)
                    .map(|i| (i * 7 + seed as usize).is_multiple_of(3) as u8 as f64)
                    .collect(),
            )
            .unwrap();
            let probs = random(seed, &[2, 5]).map(|v| 0.5 + 0.45 * v);
            let name = format!("loss {loss}");
            let res = verify(&p, |eps| {
                grad_report_params(&p, std::slice::from_ref(&probs), eps, |tape, _, vars| {
                    let t = tape.constant(targets.clone());
                    loss.batch(tape, vars[0], t)
                })
            });
            record(&name, res);
        }

        let cfg = ModelConfig {
            input_dim: 4,
            layers: 3,
            hidden: 6,
            attention: AttentionKind::Da2,
            t_train: 5,
        };
        let mut model = Model::build(cfg, seed).unwrap();
        jitter(&mut model.params, seed);
        let x = random(seed, &[5, 2, 4]);
        let targets = Tensor::new(&[5, 2], (0..10).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
        let res = verify(&model.params, |eps| {
            grad_report_params(&model.params, std::slice::from_ref(&x), eps, |tape, bound, vars| {
                let mut ctx = Ctx::new(tape, &model.params, bound, Mode::Train);
                let out = model.forward(&mut ctx, vars[0], None)?;
                let t = ctx.tape.constant(targets.clone());
                LossKind::Focal(2.0).batch(ctx.tape, out.probs, t)
            })
        })
        .map_err(|e| format!("model seed {seed}: {e}"));
        record("model da2 (I=4, D=6, T=5)", res);
    }
    report
}

pub fn check_gradients(seeds: u64) -> Check {
    let report = gradient_suite(seeds);
    if let Some((name, Err(e))) = report.iter().find(|(_, r)| r.is_err()) {
        return Err(format!("{name}: {e}"));
    }
    let ok: Vec<(&str, GradOutcome)> = report
        .iter()
        .map(|(n, r)| (n.as_str(), *r.as_ref().expect("checked")))
        .collect();
    let worst = ok.iter().map(|(_, o)| o.worst).fold(0.0f64, f64::max);
    let restepped: usize = ok.iter().map(|(_, o)| o.restepped).sum();
    let zeros: usize = ok.iter().map(|(_, o)| o.structural_zeros).sum();
    Ok(format!(
        "{} components x {seeds} seeds, worst {worst:.2e}; {restepped} entries agree at another step, {zeros} zero-gradient pre-BN biases",
        ok.len()
    ))
}

// ---------------------------------------------------------------- 2. losses

fn tape_loss(kind: LossKind, probs: &[f64], labels: &[u8]) -> f64 {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(&[probs.len()], probs.to_vec()).unwrap());
    let y = tape.constant(Tensor::new(&[labels.len()], labels.iter().map(|&l| l as f64).collect()).unwrap());
    let l = kind.batch(&mut tape, p, y).unwrap();
    tape.value(l).item()
}

pub fn check_losses() -> Check {
    let mut r = rng::seeded(7);
    // FL(0) is CE to the last bit, per frame and batched.
    for _ in 0..200 {
        let n = r.random_range(1..50);
        let probs: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        let ce = tape_loss(LossKind::CrossEntropy, &probs, &labels);
        let fl = tape_loss(LossKind::Focal(0.0), &probs, &labels);
        if ce.to_bits() != fl.to_bits() {
            return Err(format!("FL(0) {fl:e} != CE {ce:e}"));
        }
        for (&p, &l) in probs.iter().zip(&labels) {
            if LossKind::Focal(0.0).frame(p, l).to_bits() != LossKind::CrossEntropy.frame(p, l).to_bits() {
                return Err(format!("per-frame FL(0) != CE at p={p}"));
            }
        }
    }
    // FL <= CE on a 100-point y_t grid.
    for gamma in [0.1, 0.2, 0.5, 0.8, 1.0, 2.0, 5.0] {
        for i in 0..100 {
            let yt = (i as f64 + 0.5) / 100.0;
            let fl = LossKind::Focal(gamma).frame(yt, 1);
            let ce = LossKind::CrossEntropy.frame(yt, 1);
            if fl > ce {
                return Err(format!("FL({gamma}) {fl} > CE {ce} at y_t={yt}"));
            }
        }
    }
    // Spot values against the scalar oracle, per frame and through the tape.
    let spot = -(0.1f64).powi(2) * 0.9f64.ln();
    if (LossKind::Focal(2.0).frame(0.9, 1) - spot).abs() > 1e-12 || (spot - 1.05361e-3).abs() > 1e-8 {
        return Err(format!(
            "FL(2) at p=0.9: {} vs {spot}",
            LossKind::Focal(2.0).frame(0.9, 1)
        ));
    }
    let mut worst = 0.0f64;
    for gamma in [None, Some(0.2), Some(0.8), Some(2.0)] {
        let kind = gamma.map_or(LossKind::CrossEntropy, LossKind::Focal);
        for i in 0..=100 {
            let p = i as f64 / 100.0;
            for label in [0, 1] {
                worst = worst.max((kind.frame(p, label) - scalar_loss(gamma, p, label)).abs());
                worst = worst.max((tape_loss(kind, &[p], &[label]) - scalar_loss(gamma, p, label)).abs());
            }
        }
    }
    if worst > 1e-12 {
        return Err(format!("spot values differ from the scalar oracle by {worst:e}"));
    }
    Ok(format!(
        "FL(0)==CE bit-exact, FL<=CE on grid, spot values within {worst:.1e}"
    ))
}

// ---------------------------------------------------------------- 3. attention

const ALL_GATED: [AttentionKind; 4] = [
    AttentionKind::Ta,
    AttentionKind::Fa,
    AttentionKind::Da1,
    AttentionKind::Da2,
];

/// Runs `f` in a fresh context over `params`.
pub fn with_ctx<T>(
    params: &ParamSet,
    mode: Mode,
    f: impl FnOnce(&mut Ctx) -> vad_core::Result<T>,
) -> vad_core::Result<T> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut ctx = Ctx::new(&mut tape, params, &bound, mode);
    f(&mut ctx)
}

/// Gate sigmoid(G) and refined H' for one map.
pub fn gate_and_refined(att: &Attention, params: &ParamSet, h: &Tensor, mode: Mode) -> (Tensor, Tensor) {
    with_ctx(params, mode, |ctx| {
        let hv = ctx.tape.constant(h.clone());
        let g = att.logits(ctx, hv, None)?.expect("gated module");
        let s = ctx.tape.sigmoid(g);
        let r = att.apply(ctx, hv, None)?;
        Ok((ctx.tape.value(s).clone(), ctx.tape.value(r).clone()))
    })
    .unwrap()
}

fn zero_where(params: &mut ParamSet, pred: impl Fn(&str) -> bool) {
    for id in params.ids().collect::<Vec<_>>() {
        if params.is_trainable(id) && pred(params.name(id)) {
            let shape = params.get(id).shape().to_vec();
            params.set(id, Tensor::zeros(&shape)).unwrap();
        }
    }
}

pub fn check_attention() -> Check {
    let mut cases = 0;
    for seed in 0..10u64 {
        let shape = [7 + seed as usize % 4, 1 + seed as usize % 3, 5 + seed as usize % 5];
        let h = random(100 + seed, &shape);
        for kind in ALL_GATED {
            let mut params = ParamSet::new();
            let att = Attention::init(kind, &mut params, 1, &mut rng::seeded(seed)).unwrap();
            jitter(&mut params, seed);
            for mode in [Mode::Train, Mode::Eval] {
                let (gate, refined) = gate_and_refined(&att, &params, &h, mode);
                if refined.shape() != h.shape() || gate.shape() != h.shape() {
                    return Err(format!("{kind}: shape {:?} -> {:?}", h.shape(), refined.shape()));
                }
                for (i, (&r, &x)) in refined.data().iter().zip(h.data()).enumerate() {
                    let d = r - x;
                    let g = gate.data()[i];
                    if !(d > 0.0 && d < 1.0 && g > 0.0 && g < 1.0) {
                        return Err(format!("{kind}: H'-H = {d}, gate {g} outside (0, 1)"));
                    }
                }
                let [t, b, dd] = shape;
                for ti in 0..t {
                    for bi in 0..b {
                        for di in 0..dd {
                            let v = gate.at(&[ti, bi, di]);
                            if kind == AttentionKind::Ta && v != gate.at(&[ti, bi, 0]) {
                                return Err(format!("TA gate varies along hidden units at t={ti}"));
                            }
                            if kind == AttentionKind::Fa && v != gate.at(&[0, bi, di]) {
                                return Err(format!("FA gate varies along time at d={di}"));
                            }
                        }
                    }
                }
                cases += 1;
            }

            let mut zeroed = params.clone();
            zero_where(&mut zeroed, |n| n.contains(".conv"));
            for mode in [Mode::Train, Mode::Eval] {
                let (_, refined) = gate_and_refined(&att, &zeroed, &h, mode);
                for (&r, &x) in refined.data().iter().zip(h.data()) {
                    if r != x + 0.5 {
                        return Err(format!("{kind}: zero weights give {r}, expected {}", x + 0.5));
                    }
                }
            }
        }

        // DA-2 with the FA branch output forced to zero is TA.
        let mut p2 = ParamSet::new();
        let da2 = Attention::init(AttentionKind::Da2, &mut p2, 1, &mut rng::seeded(seed)).unwrap();
        jitter(&mut p2, seed);
        zero_where(&mut p2, |n| n.starts_with("attn.fa.conv3"));
        let mut p1 = ParamSet::new();
        let ta = Attention::init(AttentionKind::Ta, &mut p1, 1, &mut rng::seeded(seed)).unwrap();
        for id in p1.ids().collect::<Vec<_>>() {
            let src = p2.find(p1.name(id)).expect("shared TA names");
            p1.set(id, p2.get(src).clone()).unwrap();
        }
        for mode in [Mode::Train, Mode::Eval] {
            let (_, a) = gate_and_refined(&da2, &p2, &h, mode);
            let (_, b) = gate_and_refined(&ta, &p1, &h, mode);
            if a != b {
                return Err(format!(
                    "DA-2 with silenced FA differs from TA by {:e}",
                    a.max_abs_diff(&b)
                ));
            }
        }

        // Chunked FA on k*T rows equals FA run on each T-row segment.
        {
            let kind = AttentionKind::Fa;
            let mut params = ParamSet::new();
            let att = Attention::init(kind, &mut params, 1, &mut rng::seeded(seed)).unwrap();
            jitter(&mut params, seed + 1);
            let chunk = 5;
            for k in 1..=3 {
                let h = random(200 + seed, &[k * chunk, 2, 6]);
                for mode in [Mode::Train, Mode::Eval] {
                    let whole = with_ctx(&params, mode, |ctx| {
                        let hv = ctx.tape.constant(h.clone());
                        let r = att.apply(ctx, hv, Some(chunk))?;
                        Ok(ctx.tape.value(r).clone())
                    })
                    .unwrap();
                    for s in 0..k {
                        let seg = with_ctx(&params, mode, |ctx| {
                            let hv = ctx.tape.constant(h.clone());
                            let part = ctx.tape.slice(hv, 0, s * chunk, chunk)?;
                            let r = att.apply(ctx, part, None)?;
                            Ok(ctx.tape.value(r).clone())
                        })
                        .unwrap();
                        for ti in 0..chunk {
                            for bi in 0..2 {
                                for di in 0..6 {
                                    if seg.at(&[ti, bi, di]) != whole.at(&[s * chunk + ti, bi, di]) {
                                        return Err(format!(
                                            "{kind}: chunked output differs in segment {s} ({k}x{chunk})"
                                        ));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(format!(
        "{cases} shape/bound/constancy cases, zero-weight, DA-2/TA and chunking identities over 10 seeds"
    ))
}

// ---------------------------------------------------------------- 4. AUC

/// Random scores with labels holding both classes; coarse grids make ties.
pub fn random_instance(r: &mut impl Rng) -> (Vec<f64>, Vec<u8>) {
    let n = r.random_range(2..=1000);
    let levels = [0u32, 5, 50, 1000][r.random_range(0..4)];
    let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
    labels[0] = 0;
    labels[1] = 1;
    let scores = (0..n)
        .map(|_| {
            let s: f64 = r.random_range(0.0..1.0);
            if levels == 0 {
                s
            } else {
                (s * levels as f64).floor() / levels as f64
            }
        })
        .collect();
    (scores, labels)
}

pub fn check_auc() -> Check {
    let mut r = rng::seeded(4);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let (scores, labels) = random_instance(&mut r);
        let auc = eval::roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
        let oracle = brute_force_auc(&scores, &labels);
        worst = worst.max((auc - oracle).abs());
        for f in [
            |s: f64| (3.0 * s).exp(),
            |s: f64| s * s * s + 2.0 * s - 7.0,
            |s: f64| (s + 1.0).ln(),
        ] {
            let mapped: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
            let again = eval::roc_auc(&mapped, &labels).map_err(|e| e.to_string())?;
            if (again - auc).abs() > 1e-12 {
                return Err(format!("instance {i}: monotone transform moved AUC {auc} -> {again}"));
            }
        }
    }
    if worst > 1e-12 {
        return Err(format!("trapezoid vs pair counting differ by {worst:e}"));
    }
    Ok(format!(
        "200 instances, max |AUC - pair count| = {worst:.1e}, invariant under 3 monotone maps"
    ))
}

// ---------------------------------------------------------------- 5. mixing

pub fn check_mixing() -> Check {
    let mut r = rng::seeded(5);
    let mut worst = 0.0f64;
    let mut clipped = 0.0f64;
    for i in 0..100 {
        let seconds = r.random_range(0.5..2.5);
        let clean = synth_utterance(seconds, &mut r);
        let kind = NoiseType::ALL[r.random_range(0..NoiseType::ALL.len())];
        let noise = kind.generate(clean.clip.len() + r.random_range(0..8000), &mut r);
        let target = r.random_range(-10.0..20.0);
        let mixed = mix_at_snr(&clean.clip, &noise, target, &mut r).map_err(|e| e.to_string())?;
        let n = clean.clip.len();
        let segment = &noise.samples[mixed.offset..mixed.offset + n];
        let got = achieved_snr_db(&clean.clip.samples, segment, mixed.alpha);
        clipped = clipped.max(mixed.clipped);
        // Away from the clamp the mixture is exactly speech + alpha * noise.
        for ((m, s), v) in mixed.clip.samples.iter().zip(&clean.clip.samples).zip(segment) {
            let want = s + mixed.alpha * v;
            if want.abs() <= 1.0 && *m != want {
                return Err(format!("case {i}: mixture sample {m} != {want}"));
            }
        }
        let err = (got - target).abs();
        worst = worst.max(err);
        if err > 0.01 {
            return Err(format!("case {i}: {kind} target {target:.3} dB achieved {got:.3} dB"));
        }
    }
    Ok(format!(
        "100 cases, worst |SNR error| = {worst:.2e} dB, worst clipped fraction {clipped:.4}"
    ))
}

// ---------------------------------------------------------------- 6. parameters

pub fn check_param_overhead() -> Check {
    let count = |kind| Model::build(ModelConfig::lstm(64, kind), 0).unwrap().count_params();
    let base = count(AttentionKind::None);
    let added: Vec<(AttentionKind, usize)> = ALL_GATED.iter().map(|&k| (k, count(k).attention)).collect();
    let get = |k| added.iter().find(|(a, _)| *a == k).unwrap().1;
    let da2 = count(AttentionKind::Da2);
    let pct = 100.0 * da2.attention as f64 / base.total() as f64;
    let ordered = get(AttentionKind::Da1) < get(AttentionKind::Ta)
        && get(AttentionKind::Ta) < get(AttentionKind::Fa)
        && get(AttentionKind::Fa) < get(AttentionKind::Da2);
    let detail = format!(
        "baseline {}, added {}; DA-2 overhead {pct:.2}%",
        base.total(),
        added
            .iter()
            .map(|(k, n)| format!("{k} {n}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    if pct < 2.5 && ordered {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 7-10. training

/// Held-out result of one training run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub val_auc: f64,
    pub test_auc: f64,
    pub epochs: usize,
}

pub struct Corpus {
    pub train: Vec<dataset::Utterance>,
    pub val: Vec<dataset::Utterance>,
    pub test: Vec<dataset::Utterance>,
}

pub fn synth_corpus(seed: u64, cfg: &SynthConfig) -> Corpus {
    let utts: Vec<_> = (0..cfg.n_utts()).map(|i| synth_one(seed, cfg, i).unwrap()).collect();
    let all = dataset::from_synth(&utts).unwrap();
    Corpus {
        train: dataset::of_split(&all, Split::Train),
        val: dataset::of_split(&all, Split::Val),
        test: dataset::of_split(&all, Split::Test),
    }
}

/// Trains and scores the best-validation checkpoint on the test split
/// (mean AUC over noise/SNR cells).
pub fn train_and_test(corpus: &Corpus, model: &ModelConfig, cfg: &TrainConfig) -> vad_core::Result<RunResult> {
    let r = train(model, cfg, &corpus.train, &corpus.val, &TrainOutputs::default())?;
    let test = dataset::normalized(&r.best.norm, &corpus.test)?;
    let report = eval::evaluate(&r.best.model, &test, 1)?;
    Ok(RunResult {
        val_auc: r.best_val_auc.unwrap_or(f64::NAN),
        test_auc: report.overall,
        epochs: r.log.epochs.len(),
    })
}
