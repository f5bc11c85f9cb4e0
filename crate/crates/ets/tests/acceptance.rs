//! One PASS/FAIL line per acceptance criterion. Run with
//! `cargo test -p ets --test acceptance -- --nocapture` to see the report.

#[path = "../../core/tests/support/generators.rs"]
mod generators;
#[path = "../../core/tests/support/oracles.rs"]
mod oracles;

#[path = "support/cases.rs"]
mod cases;
#[path = "support/reference.rs"]
mod reference;
#[path = "support/toy.rs"]
mod toy;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use ets::backbone::{build_encoder, ArchSpec, FeaturePyramid, WeightSource};
use ets::config::RunConfig;
use ets::losses::{student_loss, teacher_loss, MaskPooling};
use ets::model::{build_student, Gii, StudentOptions};
use ets::nn::{Init, Mode, ParamStore};
use ets::scoring::{anomaly_maps, compute_metrics, score_images, Metrics};
use ets::synthesis::{SynthesisConfig, Synthesizer};
use ets::trainer::{fit, TrainState};
use ets_core::pro::{DEFAULT_FPR_LIMIT, DEFAULT_MAX_THRESHOLDS};
use ets_core::{auroc, average_precision, pro, Grid, Image};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reference::{max_abs_diff, values, GiiWeights, Map};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run(name: &str, check: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match &outcome {
        Ok(d) => println!("PASS {name}: {d} ({secs:.1}s)"),
        Err(d) => println!("FAIL {name}: {d} ({secs:.1}s)"),
    }
    outcome.is_ok()
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut e_auc, mut e_ap, mut e_pro) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let (scores, labels) = generators::random_labelled(&mut rng);
        e_auc = e_auc
            .max((auroc(&scores, &labels).unwrap() - oracles::auroc_pairs(&scores, &labels)).abs());
        e_ap = e_ap.max(
            (average_precision(&scores, &labels).unwrap()
                - oracles::ap_rank_walk(&scores, &labels))
            .abs(),
        );
    }
    for _ in 0..200 {
        let inst = generators::random_instance(&mut rng);
        let to = |v: &Vec<f32>| Grid::new(inst.h, inst.w, v.clone()).unwrap();
        let maps: Vec<Grid> = inst.maps.iter().map(to).collect();
        let masks: Vec<Grid> = inst.masks.iter().map(to).collect();
        let fast = pro(&maps, &masks, DEFAULT_FPR_LIMIT, DEFAULT_MAX_THRESHOLDS).unwrap();
        e_pro = e_pro.max((fast - oracles::pro_exhaustive(&inst, DEFAULT_FPR_LIMIT)).abs());
    }
    let took = start.elapsed();
    ensure(
        e_auc <= 1e-6 && e_ap <= 1e-6 && e_pro <= 1e-6 && took < Duration::from_secs(60),
        format!("200 instances each, max |diff| auroc {e_auc:.1e}, ap {e_ap:.1e}, pro {e_pro:.1e}"),
    )
}

fn loss_correctness() -> Outcome {
    let start = Instant::now();
    let (mut e_te, mut e_s) = (0.0f64, 0.0f64);
    for seed in 0..100 {
        let c = cases::random_case(1000 + seed);
        let got = teacher_loss(&c.t_n, &c.t_a, &c.e_n, &c.mask, MaskPooling::Area).unwrap();
        let (mh, mw) = c.mask_hw;
        let (n, a) = reference::teacher_loss(
            &reference::pyramid(&c.t_n.levels),
            &reference::pyramid(&c.t_a.levels),
            &reference::pyramid(&c.e_n.levels),
            &cases::mask_rows(&c),
            mh,
            mw,
        );
        e_te = e_te
            .max((cases::scalar(&got.normal) - n).abs())
            .max((cases::scalar(&got.anomalous) - a).abs());
        let ls = student_loss(&c.s_n, &c.s_a, &c.e_n, &c.t_n).unwrap();
        let want = reference::student_loss(
            &reference::pyramid(&c.s_n.levels),
            &reference::pyramid(&c.s_a.levels),
            &reference::pyramid(&c.e_n.levels),
            &reference::pyramid(&c.t_n.levels),
        );
        e_s = e_s.max((cases::scalar(&ls) - want).abs());
    }
    let mut e_grad = 0.0f64;
    for seed in 0..6 {
        let c = cases::random_case(2000 + seed);
        let te = |t_n: &FeaturePyramid, t_a: &FeaturePyramid| {
            teacher_loss(t_n, t_a, &c.e_n, &c.mask, MaskPooling::Area)
                .unwrap()
                .total()
                .unwrap()
        };
        e_grad = e_grad
            .max(cases::gradient_error(&c.t_n, |p| te(p, &c.t_a)))
            .max(cases::gradient_error(&c.t_a, |p| te(&c.t_n, p)))
            .max(cases::gradient_error(&c.s_n, |p| {
                student_loss(p, &c.s_a, &c.e_n, &c.t_n).unwrap()
            }))
            .max(cases::gradient_error(&c.s_a, |p| {
                student_loss(&c.s_n, p, &c.e_n, &c.t_n).unwrap()
            }));
    }
    let took = start.elapsed();
    ensure(
        e_te <= 1e-6 && e_s <= 1e-6 && e_grad <= 1e-3 && took < Duration::from_secs(120),
        format!("100 pyramids, max |diff| L_TE {e_te:.1e}, L_S {e_s:.1e}; max gradient rel. error {e_grad:.1e}"),
    )
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
        .collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn gii_conformance() -> Outcome {
    let mut store = ParamStore::new(&Device::Cpu, DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let gii = Gii::new(&mut Init::new(&mut store, &mut rng), 2, 2, false).unwrap();
    let wt = GiiWeights::from_store(&store, "");
    let (t_fine, t_coarse, s) = (
        randn(&[1, 2, 8, 8], 1),
        randn(&[1, 2, 4, 4], 2),
        randn(&[1, 2, 4, 4], 3),
    );
    let got = gii.trace(&t_fine, &t_coarse, &s, None, Mode::Eval).unwrap();
    let want = reference::gii(
        &wt,
        &Map::from_tensor(&t_fine, 0),
        &Map::from_tensor(&t_coarse, 0),
        &Map::from_tensor(&s, 0),
        None,
    );
    let trace_err = [
        max_abs_diff(&values(&got.lifted), &want.lifted.data),
        max_abs_diff(&values(&got.fused), &want.fused.data),
        max_abs_diff(&values(&got.similarity), &want.similarity),
        max_abs_diff(&values(&got.attended), &want.attended.data),
        max_abs_diff(&values(&got.output), &want.output.data),
    ]
    .into_iter()
    .fold(0.0, f64::max);

    let mut sim_lo = f64::INFINITY;
    let mut sim_hi = f64::NEG_INFINITY;
    for seed in 0..200u64 {
        let scale = [0.0, 1e-12, 1.0, 1e6][(seed % 4) as usize];
        let t = randn(&[2, 2, 4, 4], 100 + seed);
        let s = if seed % 3 == 0 {
            (&t * 2.5).unwrap()
        } else {
            (randn(&[2, 2, 4, 4], 500 + seed) * scale).unwrap()
        };
        let tr = gii
            .trace(&randn(&[2, 2, 8, 8], 900 + seed), &t, &s, None, Mode::Eval)
            .unwrap();
        for v in values(&tr.similarity) {
            sim_lo = sim_lo.min(v);
            sim_hi = sim_hi.max(v);
        }
    }

    let ones = Tensor::ones((1, 1, 4, 4), DType::F64, &Device::Cpu).unwrap();
    let zeros = ones.zeros_like().unwrap();
    let a = gii
        .trace(
            &t_fine,
            &t_coarse,
            &randn(&[1, 2, 4, 4], 20),
            Some(&ones),
            Mode::Eval,
        )
        .unwrap();
    let b = gii
        .trace(
            &t_fine,
            &t_coarse,
            &randn(&[1, 2, 4, 4], 21),
            Some(&ones),
            Mode::Eval,
        )
        .unwrap();
    let one_holds = values(&a.attended) == values(&b.attended);
    let a = gii
        .trace(
            &randn(&[1, 2, 8, 8], 22),
            &randn(&[1, 2, 4, 4], 23),
            &s,
            Some(&zeros),
            Mode::Eval,
        )
        .unwrap();
    let b = gii
        .trace(
            &randn(&[1, 2, 8, 8], 24),
            &randn(&[1, 2, 4, 4], 25),
            &s,
            Some(&zeros),
            Mode::Eval,
        )
        .unwrap();
    let zero_holds =
        values(&a.attended) == values(&b.attended) && values(&a.output) == values(&b.output);

    ensure(
        trace_err <= 1e-6 && sim_lo >= -1.0 && sim_hi <= 1.0 && one_holds && zero_holds,
        format!(
            "2-channel 4x4 trace max |diff| {trace_err:.1e}; Sim in [{sim_lo:.3}, {sim_hi:.3}]; Sim=1 identity {one_holds}, Sim=0 identity {zero_holds}"
        ),
    )
}

fn fixed_points() -> Outcome {
    let imgs = toy::toy_set(64, 2, 0, 0, 5).train;
    let refs: Vec<&Image> = imgs.iter().collect();
    let mut st = TrainState::new(toy::toy_config(4, 64, 2, 1), &refs, &Device::Cpu).unwrap();
    let l_te_n = st.train_step(&refs).unwrap().l_te_n;

    let p = cases::random_case(3).t_n;
    let l_s = cases::scalar(&student_loss(&p, &p, &p, &p).unwrap());

    let (enc, _) = build_encoder(
        &toy::narrow_arch(4),
        &WeightSource::Random,
        1,
        false,
        &Device::Cpu,
        DType::F32,
    )
    .unwrap();
    let x = randn(&[2, 3, 64, 64], 9).to_dtype(DType::F32).unwrap();
    let t = enc.encode(&x, Mode::Eval).unwrap();
    let maps = anomaly_maps(&t, &t, 64, 64, 4.0).unwrap();
    let map_max = maps
        .iter()
        .map(|m| m.map.max())
        .fold(f32::NEG_INFINITY, f32::max);
    let map_min = maps
        .iter()
        .map(|m| m.map.min())
        .fold(f32::INFINITY, f32::min);
    let score = maps
        .iter()
        .map(|m| m.image_score)
        .fold(f32::NEG_INFINITY, f32::max);
    ensure(
        l_te_n == 0.0 && l_s == 0.0 && map_max == 0.0 && map_min == 0.0 && score == 0.0,
        format!("L_TE^n at init {l_te_n}; L_S on identical pyramids {l_s}; F_S == F_T map range [{map_min}, {map_max}], score {score}"),
    )
}

fn stripes(h: usize, w: usize, phase: usize) -> Image {
    Image::from_fn(3, h, w, |c, y, x| {
        let band = ((x + 2 * y + phase) / 3) % 2;
        0.15 + 0.6 * band as f32 + 0.07 * c as f32
    })
    .unwrap()
}

fn synthesis_contract() -> Outcome {
    let cfg = SynthesisConfig {
        seed: 42,
        ..SynthesisConfig::default()
    };
    let size = 48;
    let synth = Synthesizer::new(&cfg, size).unwrap();
    let draw = || {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        (0..1000)
            .map(|k| {
                let normal = stripes(size, size, k % 11);
                let s = synth.sample(&normal, &mut rng).unwrap();
                (normal, s)
            })
            .collect::<Vec<_>>()
    };
    let samples = draw();
    let (mut outside_bad, mut blend_err, mut nonempty) = (0usize, 0.0f32, 0usize);
    for (normal, s) in &samples {
        nonempty += usize::from(s.mask.any_positive());
        let texture = s
            .texture_id
            .as_ref()
            .map(|id| &synth.textures().iter().find(|t| &t.id == id).unwrap().image);
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let (n, a) = (normal.get(c, y, x), s.anomalous.get(c, y, x));
                    if s.mask.get(y, x) == 0.0 {
                        outside_bad += usize::from(a.to_bits() != n.to_bits());
                    } else {
                        let t = texture.unwrap().get(c, y, x);
                        blend_err = blend_err.max((a - ((1.0 - s.beta) * n + s.beta * t)).abs());
                    }
                }
            }
        }
    }
    let again = draw();
    let deterministic = samples.iter().zip(&again).all(|((_, a), (_, b))| a == b);
    ensure(
        outside_bad == 0 && blend_err <= f32::EPSILON && deterministic && nonempty > 0,
        format!(
            "1000 samples ({nonempty} with anomalies): {outside_bad} changed pixels outside the mask, max blend error {blend_err:.1e}, seeded rerun identical {deterministic}"
        ),
    )
}

fn parameter_changes(
    before: &ets::checkpoint::Checkpoint,
    after: &ets::checkpoint::Checkpoint,
    prefix: &str,
    names: &[String],
) -> (usize, usize) {
    let a = before.group(prefix);
    let b = after.group(prefix);
    let moved = names
        .iter()
        .filter(|n| {
            let d = (&a[n.as_str()] - &b[n.as_str()])
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap();
            d.to_scalar::<f32>().unwrap() > 0.0
        })
        .count();
    (moved, names.len())
}

fn shape_flow(expert_drift: f64) -> Outcome {
    let arch = ArchSpec::wide_resnet50_2();
    let dev = Device::Cpu;
    let (enc, _) = build_encoder(&arch, &WeightSource::Random, 0, false, &dev, DType::F32).unwrap();
    let x = randn(&[1, 3, 256, 256], 4).to_dtype(DType::F32).unwrap();
    let t = enc.encode(&x, Mode::Eval).unwrap();
    let (student, _) =
        build_student(&arch, &StudentOptions::default(), 1, &dev, DType::F32).unwrap();
    let e = student.embed(&t, Mode::Eval).unwrap();
    let s = student.forward(&t, Mode::Eval).unwrap();
    drop(student);
    let want: [Vec<usize>; 3] = [
        vec![1, 256, 64, 64],
        vec![1, 512, 32, 32],
        vec![1, 1024, 16, 16],
    ];
    let shapes_ok = t.shapes() == want && s.shapes() == want && e.dims() == [1, 2048, 8, 8];

    let imgs = toy::toy_set(64, 2, 0, 0, 6).train;
    let refs: Vec<&Image> = imgs.iter().collect();
    let mut freeze = Vec::new();
    for (teacher_on, student_on) in [(false, true), (true, false)] {
        let mut cfg = toy::toy_config(4, 64, 2, 2);
        cfg.train.update_teacher = teacher_on;
        cfg.train.update_student = student_on;
        let mut st = TrainState::new(cfg, &refs, &dev).unwrap();
        let before = st.to_checkpoint().unwrap();
        fit(&mut st, &refs, None, None).unwrap();
        let after = st.to_checkpoint().unwrap();
        let tn: Vec<String> = st
            .nets
            .teacher_store
            .params()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let sn: Vec<String> = st
            .nets
            .student_store
            .params()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        freeze.push((
            parameter_changes(&before, &after, "teacher/", &tn),
            parameter_changes(&before, &after, "student/", &sn),
        ));
    }
    let ((t_off, s_on), (t_on, s_off)) = (freeze[0], freeze[1]);
    let freeze_ok = t_off.0 == 0 && s_off.0 == 0 && s_on.0 == s_on.1 && t_on.0 == t_on.1;
    ensure(
        shapes_ok && expert_drift == 0.0 && freeze_ok,
        format!(
            "256x256 teacher {:?}, student {:?}, embedding {:?}; expert max drift after 100 iterations {expert_drift}; \
             teacher frozen {}/{} moved (student {}/{}), student frozen {}/{} moved (teacher {}/{})",
            t.shapes().map(|s| s[1..].to_vec()),
            s.shapes().map(|s| s[1..].to_vec()),
            &e.dims()[1..],
            t_off.0,
            t_off.1,
            s_on.0,
            s_on.1,
            s_off.0,
            s_off.1,
            t_on.0,
            t_on.1
        ),
    )
}

struct ToyRun {
    metrics: Metrics,
    expert_drift: f64,
    iterations: u64,
    seconds: f64,
}

fn toy_run(set: &toy::ToySet, gii: bool) -> ToyRun {
    let start = Instant::now();
    let mut cfg: RunConfig = toy::toy_config(8, 128, 4, 100);
    cfg.model.student.gii = gii;
    cfg.synthesis.builtin_textures = 16;
    let refs: Vec<&Image> = set.train.iter().collect();
    let dev = Device::Cpu;
    let mut st = TrainState::new(cfg, &refs, &dev).unwrap();
    let expert_before = st.nets.expert_store.snapshot().unwrap();
    let report = fit(&mut st, &refs, None, None).unwrap();
    let expert_after = st.nets.expert_store.snapshot().unwrap();
    let expert_drift = expert_before
        .iter()
        .map(|(n, t)| {
            (t - &expert_after[n])
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap() as f64
        })
        .fold(0.0, f64::max);
    let test: Vec<&Image> = set.test.iter().map(|t| &t.0).collect();
    let maps = score_images(
        &st.nets.teacher,
        &st.nets.student,
        &test,
        &st.config.eval,
        &dev,
    )
    .unwrap();
    let labels: Vec<u8> = set.test.iter().map(|t| t.1).collect();
    let masks: Vec<&Grid> = set.test.iter().map(|t| &t.2).collect();
    let metrics = compute_metrics(&maps, &labels, &masks, &st.config.eval)
        .unwrap()
        .metrics;
    ToyRun {
        metrics,
        expert_drift,
        iterations: report.iterations,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn toy_end_to_end(with: &ToyRun, without: &ToyRun) -> Outcome {
    let m = with.metrics;
    let a = without.metrics;
    let total = with.seconds + without.seconds;
    ensure(
        m.p_auc >= 0.90 && m.i_auc >= 0.90 && with.iterations <= 500 && without.iterations == with.iterations && total < 1200.0,
        format!(
            "128x128, 20 train / 20 test images, {} iterations: p_auc {:.4}, i_auc {:.4}, p_ap {:.4}, p_pro {:.4} ({:.0}s); \
             w/o GII p_auc {:.4}, i_auc {:.4} ({:.0}s)",
            with.iterations, m.p_auc, m.i_auc, m.p_ap, m.p_pro, with.seconds, a.p_auc, a.i_auc, without.seconds
        ),
    )
}

#[test]
fn acceptance() {
    let set = toy::toy_set(128, 20, 10, 10, 7);
    let with = catch_unwind(AssertUnwindSafe(|| toy_run(&set, true)));
    let without = catch_unwind(AssertUnwindSafe(|| toy_run(&set, false)));
    let drift = with.as_ref().map(|r| r.expert_drift).unwrap_or(f64::NAN);

    let results = [
        run("metric oracle equivalence", metric_oracles),
        run("loss correctness", loss_correctness),
        run("GII conformance", gii_conformance),
        run("trivial fixed points", fixed_points),
        run("synthesis contract", synthesis_contract),
        run("shape/flow conformance", || shape_flow(drift)),
        run("toy end-to-end", || match (&with, &without) {
            (Ok(w), Ok(wo)) => toy_end_to_end(w, wo),
            _ => Err("toy training panicked".into()),
        }),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
