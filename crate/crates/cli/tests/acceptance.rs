//! Acceptance report: one PASS/FAIL line per criterion, with the measured
//! numbers behind it. Always exits 0; a FAIL line is a finding, not a crash.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{LN_2, PI};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tonet_core::autodiff::{finite_diff_check, param_diff_check, Primitive, PrimitiveKind, Var};
use tonet_core::datagen::{clip_seed, synth_clip, SynthSpec};
use tonet_core::dsp::{compute_cfp, CfpConfig, Waveform};
use tonet_core::evaluation::evaluate_contours;
use tonet_core::labels::PitchContour;
use tonet_core::model::{loss_value, total_loss, Mode, ModelConfig, ModelError, TargetVars, Trace};
use tonet_core::tcfp::{apply_rearrange, build_permutation};
use tonet_core::training::{
    evaluate_segments, segment_corpus, stack_batch, train, train_step, AdamState, Clip, Segment, TrainConfig,
};
use tonet_core::{Graph, ParamStore, Tensor, TensorError, TONet};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(id: usize, name: &str, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let o = f();
    println!(
        "criterion {id} {}: {name} ({}; {:.1} s)",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        start.elapsed().as_secs_f64()
    );
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

// ---------------------------------------------------------------- 1

fn tcfp_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut pairs = vec![(360, 60)];
    while pairs.len() < 21 {
        let l = rng.random_range(1..=72);
        pairs.push((l * rng.random_range(1..=10), l));
    }
    let mut failures = Vec::new();
    for &(f, l) in &pairs {
        let p = build_permutation(f, l).unwrap();
        let seen: BTreeSet<usize> = p.forward().iter().copied().collect();
        let bijective = seen.len() == f && seen.iter().all(|&i| i < f);
        let adjacent = (0..f - l).all(|i| p.new_index(i + l) == p.new_index(i) + 1);
        let x = tonet_core::dsp::CfpTensor::from_tensor(rand_tensor(&mut rng, &[3, f, 4], 0.0, 1.0)).unwrap();
        let y = apply_rearrange(&x, &p).unwrap();
        let back = apply_rearrange(&y, &p.inverted()).unwrap();
        let mut multiset = true;
        for c in 0..3 {
            for t in 0..4 {
                let mut a: Vec<f64> = (0..f).map(|b| x.get(c, b, t)).collect();
                let mut b: Vec<f64> = (0..f).map(|b| y.get(c, b, t)).collect();
                a.sort_by(f64::total_cmp);
                b.sort_by(f64::total_cmp);
                multiset &= a == b;
            }
        }
        let round_trip = back == x;
        if !(bijective && adjacent && multiset && round_trip) {
            failures.push(format!("F={f} L={l}"));
        }
    }
    outcome(
        failures.is_empty(),
        format!("{} (F, L) pairs incl. 360/60, failures: [{}]", pairs.len(), failures.join(", ")),
    )
}

// ---------------------------------------------------------------- 2

const EPS: f64 = 1e-6;

struct GradSuite {
    worst: f64,
    worst_name: String,
    covered: BTreeSet<String>,
    checks: usize,
}

impl GradSuite {
    fn check(&mut self, kinds: &[PrimitiveKind], rng: &mut ChaCha8Rng, x: Tensor, build: impl Fn(&mut Graph<'_>, Var) -> Result<Var, TensorError>) {
        let out_shape = {
            let mut g = Graph::no_grad();
            let v = g.constant(x.clone());
            let y = build(&mut g, v).unwrap();
            g.value(y).shape().to_vec()
        };
        let r = rand_tensor(rng, &out_shape, -1.0, 1.0);
        let err = finite_diff_check(
            |g, v| {
                let y = build(g, v)?;
                let rv = g.constant(r.clone());
                let p = g.mul(y, rv)?;
                g.sum(p)
            },
            &x,
            EPS,
        )
        .unwrap();
        let name = kinds.iter().map(|k| format!("{k:?}")).collect::<Vec<_>>().join("+");
        if err > self.worst {
            self.worst = err;
            self.worst_name = name;
        }
        for k in kinds {
            self.covered.insert(format!("{k:?}"));
        }
        self.checks += 1;
    }
}

fn primitive_trial(s: &mut GradSuite, rng: &mut ChaCha8Rng) {
    use PrimitiveKind as K;
    let shape = [rng.random_range(1..=4), rng.random_range(2..=6)];
    let x = rand_tensor(rng, &shape, -2.0, 2.0);
    let o = rand_tensor(rng, &shape, -2.0, 2.0);
    for (kind, prim) in [(K::Add, Primitive::Add), (K::Sub, Primitive::Sub), (K::Mul, Primitive::Mul)] {
        let oc = o.clone();
        s.check(&[kind], rng, x.clone(), move |g, v| {
            let b = g.constant(oc.clone());
            g.apply(prim.clone(), &[v, b])
        });
    }
    let factor = rng.random_range(-3.0..3.0);
    s.check(&[K::Scale], rng, x.clone(), move |g, v| g.scale(v, factor));
    let kink_free = x.map(|v| if v.abs() < 0.05 { 0.3 } else { v });
    s.check(&[K::Relu], rng, kink_free, |g, v| g.relu(v));
    s.check(&[K::Sigmoid], rng, x.clone(), |g, v| g.sigmoid(v));
    s.check(&[K::Softmax], rng, x.clone(), |g, v| g.softmax(v));
    let d = shape[1];
    let (gamma, beta) = (rand_tensor(rng, &[d], 0.5, 1.5), rand_tensor(rng, &[d], -0.5, 0.5));
    let (gc, bc) = (gamma.clone(), beta.clone());
    s.check(&[K::LayerNorm], rng, x.clone(), move |g, v| {
        let (a, b) = (g.constant(gc.clone()), g.constant(bc.clone()));
        g.layer_norm(v, a, b)
    });
    let (m, k, n) = (rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(1..=5));
    let a = rand_tensor(rng, &[2, m, k], -1.0, 1.0);
    let b = rand_tensor(rng, &[k, n], -1.0, 1.0);
    let bc = b.clone();
    s.check(&[K::MatMul], rng, a.clone(), move |g, v| {
        let w = g.constant(bc.clone());
        g.matmul(v, w)
    });
    s.check(&[K::MatMul], rng, b, move |g, v| {
        let w = g.constant(a.clone());
        g.matmul(w, v)
    });
    let oc = o.clone();
    s.check(&[K::Concat], rng, x.clone(), move |g, v| {
        let b = g.constant(oc.clone());
        g.concat(&[b, v], 1)
    });
    s.check(&[K::Permute], rng, x.clone(), |g, v| g.permute(v, &[1, 0]));
    let flat = vec![x.len()];
    s.check(&[K::Reshape], rng, x.clone(), move |g, v| g.reshape(v, &flat));
    s.check(&[K::Mean], rng, x.clone(), |g, v| {
        let m = g.mean(v)?;
        g.reshape(m, &[1])
    });
    s.check(&[K::Sum], rng, x.clone(), |g, v| {
        let m = g.sum(v)?;
        g.reshape(m, &[1])
    });

    let (bsz, c, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
    let x4 = rand_tensor(rng, &[bsz, c, h, w], -1.0, 1.0);
    let (gamma, beta) = (rand_tensor(rng, &[c], 0.5, 1.5), rand_tensor(rng, &[c], -0.5, 0.5));
    let (mean, var) = (rand_tensor(rng, &[c], -0.5, 0.5), rand_tensor(rng, &[c], 0.5, 2.0));
    let (gc, bc) = (gamma.clone(), beta.clone());
    s.check(&[K::BatchNorm], rng, x4.clone(), move |g, v| {
        let (a, b) = (g.constant(gc.clone()), g.constant(bc.clone()));
        g.apply(Primitive::BatchNorm { eps: 1e-5, training: true }, &[v, a, b])
    });
    s.check(&[K::BatchNorm], rng, x4.clone(), move |g, v| {
        let ins = [gamma.clone(), beta.clone(), mean.clone(), var.clone()].map(|t| g.constant(t));
        g.apply(Primitive::BatchNorm { eps: 1e-5, training: false }, &[v, ins[0], ins[1], ins[2], ins[3]])
    });
    let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let pad = [rng.random_range(0..kh), rng.random_range(0..kw)];
    let w = rand_tensor(rng, &[cout, c, kh, kw], -1.0, 1.0);
    let bias = rand_tensor(rng, &[cout], -1.0, 1.0);
    let (wc, bc) = (w.clone(), bias.clone());
    s.check(&[K::Conv2d], rng, x4.clone(), move |g, v| {
        let (a, b) = (g.constant(wc.clone()), g.constant(bc.clone()));
        g.conv2d(v, a, b, pad)
    });
    let (xc, bc) = (x4.clone(), bias.clone());
    s.check(&[K::Conv2d], rng, w, move |g, v| {
        let (a, b) = (g.constant(xc.clone()), g.constant(bc.clone()));
        g.conv2d(a, v, b, pad)
    });
    let t = rng.random_range(3..=8);
    let k1 = rng.random_range(1..=5).min(t);
    let p1 = rng.random_range(0..=k1 / 2);
    let x3 = rand_tensor(rng, &[bsz, c, t], -1.0, 1.0);
    let w1 = rand_tensor(rng, &[cout, c, k1], -1.0, 1.0);
    let (wc, bc) = (w1.clone(), bias.clone());
    s.check(&[K::Conv1d], rng, x3.clone(), move |g, v| {
        let (a, b) = (g.constant(wc.clone()), g.constant(bc.clone()));
        g.conv1d(v, a, b, p1)
    });
    s.check(&[K::Conv1d], rng, w1, move |g, v| {
        let (a, b) = (g.constant(x3.clone()), g.constant(bias.clone()));
        g.conv1d(a, v, b, p1)
    });
    let kernel = [rng.random_range(1..=4), rng.random_range(1..=2)];
    let (oh, ow) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let count = bsz * c * oh * kernel[0] * ow * kernel[1];
    let mut vals: Vec<f64> = (0..count).map(|i| i as f64 * 0.01).collect();
    vals.shuffle(rng);
    let xp = Tensor::new(vec![bsz, c, oh * kernel[0], ow * kernel[1]], vals).unwrap();
    s.check(&[K::MaxPool2d], rng, xp.clone(), move |g, v| g.max_pool2d(v, kernel));
    s.check(&[K::MaxPool2d, K::MaxUnpool2d], rng, xp, move |g, v| {
        let p = g.max_pool2d(v, kernel)?;
        let sc = g.scale(p, 1.7)?;
        g.max_unpool2d(sc, p, kernel)
    });
    let pred = rand_tensor(rng, &shape, 0.05, 0.95);
    let target = Tensor::from_fn(shape.to_vec(), |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
    s.check(&[K::Bce], rng, pred, move |g, v| {
        let t = g.constant(target.clone());
        let l = g.bce(v, t)?;
        g.reshape(l, &[1])
    });
}

fn full_model_trial(trial: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
    let mut cfg = ModelConfig::desk();
    cfg.seed = trial;
    let model: TONet = TONet::new(cfg).unwrap();
    let (b, t) = (2, 6);
    let mut store: ParamStore = model.params().clone();
    let cfp = store.add("input.cfp", rand_tensor(&mut rng, &[b, 3, 360, t], 0.0, 1.0));
    let tcfp = store.add("input.tcfp", rand_tensor(&mut rng, &[b, 3, 360, t], 0.0, 1.0));
    let one_hot = |rng: &mut ChaCha8Rng, rows: usize| {
        let mut m = Tensor::zeros(vec![b, rows, t]);
        for i in 0..b {
            for f in 0..t {
                m.set(&[i, rng.random_range(0..rows), f], 1.0);
            }
        }
        m
    };
    let targets = (one_hot(&mut rng, 13), one_hot(&mut rng, 7), one_hot(&mut rng, 361));
    let coords: Vec<_> = store
        .ids()
        .filter(|&id| store.is_trainable(id))
        .map(|id| (id, rng.random_range(0..store.get(id).len())))
        .collect();
    param_diff_check(
        |g, st| {
            let (c, tc) = (g.param(st, cfp), g.param(st, tcfp));
            let out = model.forward_with(g, st, c, tc, Mode::Train, &mut Trace::default()).map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
            let tv = TargetVars {
                tone: g.constant(targets.0.clone()),
                octave: g.constant(targets.1.clone()),
                final_map: g.constant(targets.2.clone()),
            };
            total_loss(g, &out, &tv)
        },
        &store,
        &coords,
        EPS,
    )
    .unwrap()
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut suite = GradSuite {
        worst: 0.0,
        worst_name: String::new(),
        covered: BTreeSet::new(),
        checks: 0,
    };
    for trial in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        primitive_trial(&mut suite, &mut rng);
    }
    let missing: Vec<String> = PrimitiveKind::ALL
        .iter()
        .map(|k| format!("{k:?}"))
        .filter(|k| !suite.covered.contains(k))
        .collect();
    let model_worst = (0..20).map(full_model_trial).fold(0.0f64, f64::max);
    let elapsed = start.elapsed();
    let pass = suite.worst <= 1e-4 && model_worst <= 1e-4 && missing.is_empty() && elapsed < Duration::from_secs(300);
    outcome(
        pass,
        format!(
            "{} primitive checks over 20 trials, max rel err {:.2e} ({}); full desk model 20 trials, max rel err {:.2e}; uncovered primitives: [{}]",
            suite.checks,
            suite.worst,
            suite.worst_name,
            model_worst,
            missing.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 3

fn shape_contract() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[1, 3, 360, 128], 0.0, 1.0);
    let mut details = Vec::new();
    let mut pass = true;
    for kind in tonet_core::model::BackboneKind::ALL {
        let model: TONet = TONet::new(ModelConfig::paper().with_backbone(*kind)).unwrap();
        let p = model.predict(&x, &x).unwrap();
        let shapes = (
            p.tone.as_ref().map(|t| t.shape()[1..].to_vec()),
            p.octave.as_ref().map(|t| t.shape()[1..].to_vec()),
            p.final_map.shape()[1..].to_vec(),
        );
        let channels = model.fusion().map(|f| f.channels()).unwrap_or(0);
        let ok = shapes == (Some(vec![13, 128]), Some(vec![7, 128]), vec![361, 128]) && channels == 742;
        pass &= ok;
        details.push(format!(
            "{kind}: tone {:?} octave {:?} final {:?} fusion channels {channels}",
            shapes.0.unwrap_or_default(),
            shapes.1.unwrap_or_default(),
            shapes.2
        ));
    }
    pass &= start.elapsed() < Duration::from_secs(60);
    outcome(pass, details.join("; "))
}

// ---------------------------------------------------------------- 4

fn loss_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let t = rng.random_range(1..64);
        let one_hot = |rng: &mut ChaCha8Rng, rows: usize| {
            let mut m = Tensor::zeros(vec![1, rows, t]);
            for f in 0..t {
                m.set(&[0, rng.random_range(0..rows), f], 1.0);
            }
            m
        };
        let targets = (one_hot(&mut rng, 13), one_hot(&mut rng, 7), one_hot(&mut rng, 361));
        let half = |rows| Tensor::full(vec![1, rows, t], 0.5);
        let l = loss_value(Some(&half(13)), Some(&half(7)), &half(361), (&targets.0, &targets.1, &targets.2)).unwrap();
        worst = worst.max((l - 3.0 * LN_2).abs());
    }
    outcome(worst <= 1e-6, format!("max |loss - 3 ln 2| = {worst:.2e} over 10 random target sets"))
}

// ---------------------------------------------------------------- 5

fn dsp_localization() -> Outcome {
    let cfg = CfpConfig::default();
    let plan = build_permutation(360, 60).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut hits, mut frames) = ([0usize; 3], 0usize);
    let (mut interior_hits, mut interior_frames) = ([0usize; 3], 0usize);
    let mut tcfp_ok = true;
    let mut worst_z1: Vec<String> = Vec::new();
    for _ in 0..20 {
        let f: f64 = rng.random_range(65.0..1000.0);
        let n = 3200;
        let wave = Waveform::new((0..n).map(|i| 0.5 * (2.0 * PI * f * i as f64 / 8000.0).sin()).collect(), 8000.0);
        let cfp = compute_cfp(&wave, &cfg).unwrap();
        let tcfp = apply_rearrange(&cfp, &plan).unwrap();
        let want = (60.0 * (f / 32.5f64).log2() + 0.5).floor() as i64;
        let mut z1_miss = 0;
        for t in 0..cfp.num_frames() {
            let inside = t >= 5 && t + 5 < cfp.num_frames();
            frames += 1;
            interior_frames += inside as usize;
            for c in 0..3 {
                let got = cfp.argmax(c, t);
                let ok = (got as i64 - want).abs() <= 1;
                hits[c] += ok as usize;
                if inside {
                    interior_hits[c] += ok as usize;
                }
                if c == 1 && inside && !ok {
                    z1_miss += 1;
                }
                tcfp_ok &= tcfp.argmax(c, t) == plan.new_index(got);
            }
        }
        if z1_miss > 0 {
            worst_z1.push(format!("{f:.0}"));
        }
    }
    let pct = |h: usize, n: usize| 100.0 * h as f64 / n as f64;
    let pass = hits.iter().all(|&h| h == frames) && tcfp_ok;
    outcome(
        pass,
        format!(
            "within 1 bin, all frames: Z0 {:.1}% Z1 {:.1}% Z2 {:.1}%; interior frames: Z0 {:.1}% Z1 {:.1}% Z2 {:.1}%; TCFP argmax at permuted index: {}; tones (Hz) with interior Z1 misses: [{}]",
            pct(hits[0], frames),
            pct(hits[1], frames),
            pct(hits[2], frames),
            pct(interior_hits[0], interior_frames),
            pct(interior_hits[1], interior_frames),
            pct(interior_hits[2], interior_frames),
            tcfp_ok,
            worst_z1.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 6

/// Per-frame transcription of the metric definitions.
fn metric_oracle(est: &[f64], reference: &[f64], tol: f64) -> [f64; 6] {
    let n = reference.len();
    let pitch: Vec<f64> = (0..n)
        .map(|i| {
            let back = (0..=i).rev().map(|j| est[j]).find(|&e| e > 0.0);
            back.or_else(|| est.iter().copied().find(|&e| e > 0.0)).unwrap_or(0.0)
        })
        .collect();
    let frac = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let octave = |f: f64| ((69.0 + 12.0 * (f / 440.0).log2() + 0.5).floor() / 12.0).floor() as i64 - 1;
    let cents = |i: usize| 1200.0 * (pitch[i] / reference[i]).log2();
    let voiced: Vec<usize> = (0..n).filter(|&i| reference[i] > 0.0).collect();
    let unvoiced: Vec<usize> = (0..n).filter(|&i| reference[i] == 0.0).collect();
    let pitch_ok = |i: usize| pitch[i] > 0.0 && cents(i).abs() <= tol;
    let chroma_ok = |i: usize| {
        if pitch[i] <= 0.0 {
            return false;
        }
        let mut c = cents(i);
        while c > 600.0 {
            c -= 1200.0;
        }
        while c <= -600.0 {
            c += 1200.0;
        }
        c.abs() <= tol
    };
    let count = |set: &[usize], p: &dyn Fn(usize) -> bool| set.iter().filter(|&&i| p(i)).count();
    [
        frac(count(&voiced, &|i| est[i] > 0.0), voiced.len()),
        frac(count(&unvoiced, &|i| est[i] > 0.0), unvoiced.len()),
        frac(count(&voiced, &pitch_ok), voiced.len()),
        frac(count(&voiced, &chroma_ok), voiced.len()),
        frac(count(&voiced, &|i| pitch[i] > 0.0 && octave(pitch[i]) == octave(reference[i])), voiced.len()),
        frac(count(&voiced, &|i| est[i] > 0.0 && pitch_ok(i)) + count(&unvoiced, &|i| est[i] == 0.0), n),
    ]
}

fn metric_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..200);
        let reference: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.25) { 0.0 } else { rng.random_range(60.0..1500.0) })
            .collect();
        let mode = rng.random_range(0..4);
        let est: Vec<f64> = reference
            .iter()
            .map(|&r| {
                if rng.random_bool(0.2) {
                    return 0.0;
                }
                let base = if r > 0.0 { r } else { rng.random_range(60.0..1500.0) };
                match mode {
                    0 => base * 2f64.powf(rng.random_range(-60.0..60.0) / 1200.0),
                    1 => base * 2f64.powi(rng.random_range(-2..=2)),
                    2 => base * 2f64.powf(rng.random_range(-2..=2) as f64 / 12.0),
                    _ => rng.random_range(60.0..1500.0),
                }
            })
            .collect();
        let got = evaluate_contours(
            &PitchContour::on_grid(est.clone()).unwrap(),
            &PitchContour::on_grid(reference.clone()).unwrap(),
            50.0,
        )
        .unwrap();
        if got.values() != metric_oracle(&est, &reference, 50.0) {
            mismatches += 1;
        }
    }
    let score = |est: Vec<f64>, reference: Vec<f64>| {
        evaluate_contours(&PitchContour::on_grid(est).unwrap(), &PitchContour::on_grid(reference).unwrap(), 50.0).unwrap()
    };
    // 270..393 Hz stays inside one octave after a 3-semitone shift
    let reference: Vec<f64> = (0..50).map(|i| 270.0 + 2.5 * i as f64).collect();
    let octave = score(reference.iter().map(|f| f * 2.0).collect(), reference.clone());
    let tone = score(reference.iter().map(|f| f * 2f64.powf(3.0 / 12.0)).collect(), reference.clone());
    let octave_ok = (octave.rpa, octave.rca, octave.roa) == (0.0, 1.0, 0.0);
    let tone_ok = (tone.rpa, tone.rca, tone.roa) == (0.0, 0.0, 1.0);
    outcome(
        mismatches == 0 && octave_ok && tone_ok,
        format!(
            "{mismatches}/100 random pairs differ from the oracle; octave error RPA/RCA/ROA = {}/{}/{}; tone error = {}/{}/{}",
            octave.rpa, octave.rca, octave.roa, tone.rpa, tone.rca, tone.roa
        ),
    )
}

// ---------------------------------------------------------------- 7

fn overfit_smoke() -> Outcome {
    let start = Instant::now();
    let clips: Vec<Clip> = (0..8)
        .map(|i| {
            let (wave, contour) = synth_clip(&SynthSpec {
                seed: clip_seed(7, i),
                duration: 2.56,
                ..Default::default()
            })
            .unwrap();
            Clip {
                id: format!("clip_{i:04}"),
                wave,
                contour,
            }
        })
        .collect();
    let plan = build_permutation(360, 60).unwrap();
    let (segs, _) = segment_corpus(&clips, &CfpConfig::default(), &plan, 128).unwrap();
    let cfg = TrainConfig::desk();

    // 20 steps on one fixed batch: the first minibatch of the seeded shuffle
    let mut order: Vec<usize> = (0..segs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let batch: Vec<&Segment> = order[..cfg.batch_size].iter().map(|&i| &segs[i]).collect();
    let mut probe = TONet::new(ModelConfig::desk()).unwrap();
    let mut state = AdamState::new(probe.params());
    // each step returns the loss before its update, so 21 calls cover 20 updates
    let losses: Vec<f64> = (0..21).map(|_| train_step(&mut probe, &mut state, &batch, &cfg).unwrap()).collect();
    let monotone = losses.windows(2).all(|w| w[1] < w[0]);

    // diagnostic only: full training-set loss under ordinary minibatch steps
    let full_loss = |model: &TONet| {
        let refs: Vec<&Segment> = segs.iter().collect();
        let [c, t, tone, octave, fin] = stack_batch(&refs);
        let p = model.predict(&c, &t).unwrap();
        loss_value(p.tone.as_ref(), p.octave.as_ref(), &p.final_map, (&tone, &octave, &fin)).unwrap()
    };
    let mut probe = TONet::new(ModelConfig::desk()).unwrap();
    let mut state = AdamState::new(probe.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut full = vec![full_loss(&probe)];
    while full.len() < 21 {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size).take(21 - full.len()) {
            let b: Vec<&Segment> = chunk.iter().map(|&i| &segs[i]).collect();
            train_step(&mut probe, &mut state, &b, &cfg).unwrap();
            full.push(full_loss(&probe));
        }
    }
    let rises = full.windows(2).filter(|w| w[1] >= w[0]).count();

    let mut model = TONet::new(ModelConfig::desk()).unwrap();
    let report = train(&mut model, &segs, &[], &cfg, None, |_| {}).unwrap();
    let m = evaluate_segments(&model, &segs, cfg.batch_size).unwrap();
    let elapsed = start.elapsed();
    let pass = m.rpa >= 0.90 && m.oa >= 0.85 && monotone && elapsed < Duration::from_secs(900);
    outcome(
        pass,
        format!(
            "8 clips x 2.56 s, {} epochs: training-set RPA {:.4}, OA {:.4}; final epoch loss {:.4}; single-batch loss over 20 steps {:.4} -> {:.4}, strictly decreasing {monotone}; full-set loss under minibatch steps {:.4} -> {:.4} with {rises} non-decreasing steps (not gated)",
            report.epochs.len(),
            m.rpa,
            m.oa,
            report.epochs.last().map(|e| e.loss).unwrap_or(f64::NAN),
            losses[0],
            losses[20],
            full[0],
            full[20]
        ),
    )
}

// ---------------------------------------------------------------- 8, 9

fn tonet(args: &[&str]) -> (i32, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_tonet"))
        .args(args)
        .output()
        .expect("run tonet");
    if !out.status.success() {
        eprintln!("tonet {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    }
    (out.status.code().unwrap_or(-1), out.stdout)
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn ablation_report() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let mut well_formed = true;
    for seed in [1u64, 2, 3] {
        let dir = root.path().join(format!("seed{seed}"));
        let (train_dir, eval_dir, out) = (dir.join("train"), dir.join("eval"), dir.join("out"));
        let seed_s = seed.to_string();
        let eval_seed = (seed + 100).to_string();
        let ok = tonet(&["synth", "--out", s(&train_dir), "--clips", "32", "--seed", &seed_s, "--duration", "1.28"]).0 == 0
            && tonet(&["synth", "--out", s(&eval_dir), "--clips", "8", "--seed", &eval_seed, "--duration", "1.28"]).0 == 0
            && tonet(&[
                "ablate",
                "--corpus",
                s(&train_dir),
                "--eval-corpus",
                s(&eval_dir),
                "--out",
                s(&out),
                "--preset",
                "desk",
                "--seed",
                &seed_s,
                "--epochs",
                "10",
            ])
            .0 == 0;
        let summary = fs::read_to_string(out.join("summary.csv")).unwrap_or_default();
        let rows: Vec<&str> = summary.lines().skip(1).collect();
        let formed = ok
            && summary.lines().next() == Some("variant,rpa,rca,roa,oa")
            && rows.len() == 5
            && rows.iter().all(|r| r.split(',').skip(1).filter(|v| v.parse::<f64>().is_ok()).count() == 4);
        well_formed &= formed;
        let flags: BTreeMap<String, String> = fs::read_to_string(out.join("report.txt"))
            .unwrap_or_default()
            .lines()
            .filter_map(|l| l.split_once(" = ").map(|(k, v)| (k.to_string(), v.to_string())))
            .collect();
        let oa: Vec<String> = rows.iter().map(|r| {
            let f: Vec<&str> = r.split(',').collect();
            format!("{} oa {} roa {}", f[0], &f[4][..6.min(f[4].len())], &f[3][..6.min(f[3].len())])
        }).collect();
        lines.push(format!(
            "seed {seed}: [{}], full>=base OA {}, ROA {}",
            oa.join("; "),
            flags.get("full_ge_base_oa").map(String::as_str).unwrap_or("?"),
            flags.get("full_ge_base_roa").map(String::as_str).unwrap_or("?")
        ));
    }
    outcome(
        well_formed,
        format!("report only, not a gate; 32 train / 8 eval clips x 1.28 s, 10 epochs. {}", lines.join(" | ")),
    )
}

/// Every file under `root`, relative path to bytes.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let work = root.path().join("run");
    let run = || -> (BTreeMap<PathBuf, Vec<u8>>, Vec<Vec<u8>>) {
        let _ = fs::remove_dir_all(&work);
        let p = |name: &str| work.join(name);
        let (corpus, feats, model, est, ablate) = (p("corpus"), p("features"), p("model"), p("est"), p("ablate"));
        let cmds: Vec<Vec<String>> = vec![
            vec!["synth", "--out", s(&corpus), "--clips", "3", "--seed", "9", "--duration", "1.28"],
            vec!["features", "--corpus", s(&corpus), "--out", s(&feats)],
            vec!["train", "--corpus", s(&corpus), "--out", s(&model), "--epochs", "2", "--seed", "9"],
            vec!["infer", "--checkpoint", s(&model.join("best.ckpt")), "--corpus", s(&corpus), "--out", s(&est)],
            vec!["eval", "--est", s(&est), "--ref", s(&corpus), "--csv", s(&p("eval.csv"))],
            vec!["plot", "--est", s(&est.join("clip_0000.csv")), "--ref", s(&corpus.join("clip_0000.csv")), "--out", s(&p("plot.svg"))],
            vec!["ablate", "--corpus", s(&corpus), "--out", s(&ablate), "--epochs", "1", "--seed", "9"],
        ]
        .into_iter()
        .map(|c| c.into_iter().map(String::from).collect())
        .collect();
        let mut stdout = Vec::new();
        for c in &cmds {
            let args: Vec<&str> = c.iter().map(String::as_str).collect();
            let (code, out) = tonet(&args);
            stdout.push(format!("exit {code}\n").into_bytes());
            stdout.push(out);
        }
        (snapshot(&work), stdout)
    };
    let (files_a, out_a) = run();
    let (files_b, out_b) = run();
    let differing: Vec<String> = files_a
        .keys()
        .chain(files_b.keys())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|k| files_a.get(*k) != files_b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let all_ok = out_a.iter().step_by(2).all(|l| l == b"exit 0\n");
    outcome(
        differing.is_empty() && out_a == out_b && all_ok,
        format!(
            "synth, features, train, infer, eval, plot, ablate run twice: {} files compared, differing: [{}], stdout identical {}, all exit 0 {}",
            files_a.len(),
            differing.join(", "),
            out_a == out_b,
            all_ok
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; `--list` must
    // not run anything
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    report(1, "TCFP permutation suite", tcfp_suite);
    report(2, "gradient checks", gradient_checks);
    report(3, "shape contract, paper preset", shape_contract);
    report(4, "loss identity", loss_identity);
    report(5, "DSP localization", dsp_localization);
    report(6, "metric oracle equivalence", metric_oracle_equivalence);
    report(7, "overfit smoke", overfit_smoke);
    report(8, "ablation directionality report", ablation_report);
    report(9, "determinism", determinism);
}
