//! Acceptance suite: one pass/fail line per criterion, tolerances pinned below.
//! Runs as a plain binary so every criterion reports even when one fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use prosody_morph::io::{contour_to_csv, spectrogram_from_csv, spectrogram_to_csv};
use prosody_morph::nn::{forward, grad_check, Mode, ParamTree, Tape, Tensor};
use prosody_morph::vcgan::{
    discriminator_loss, generator_loss, generator_loss_and_grad, Batch, TrainHistory,
};
use prosody_morph::verify::{
    attenuation_sweep, check_prop1, equilibrium_gap, evaluate_conversion, linear_toy_attenuation, mc_prop2,
    Prop2Config, XDistribution,
};
use prosody_morph::warp::{shoot, warp_pullback};
use prosody_morph::{
    apply_energy, extract_energy, register, rmse, synth_dataset, train, warp, AffineMap, Contour, Direction,
    DiscriminatorMode, KernelSpec, LossWeights, ModelConfig, Momenta, PairedCorpus, RegistrationConfig,
    Spectrogram, SynthSpec, TrainConfig, VcganModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PROP2_REL_TOL: f64 = 0.005;
const PROP2_SAMPLES: usize = 1_000_000;
const PROP2_MAX_SECONDS: f64 = 30.0;
const PROP1_TRIALS: usize = 10_000;
const PROP1_EQUALITY_TOL: f64 = 1e-10;
const WARP_REL_TOL: f64 = 1e-12;
const WARP_INSTANCES: usize = 100;
const PULLBACK_REL_TOL: f64 = 1e-5;
const PRIMITIVE_REL_TOL: f64 = 1e-5;
const COMPOSED_REL_TOL: f64 = 1e-4;
const FD_EPS: f64 = 1e-5;
const REGISTRATION_PAIRS: usize = 20;
const REGISTRATION_RMSE_FRACTION: f64 = 0.05;
const REGISTRATION_MAX_SECONDS: f64 = 60.0;
const ENERGY_ROUND_TRIP_TOL: f64 = 1e-9;
const BIN_RATIO_TOL: f64 = 1e-12;
const ENERGY_INSTANCES: usize = 1000;
const LOSS_REL_TOL: f64 = 1e-10;
const HALF_LOSS_TOL: f64 = 1e-12;
const TRAIN_FRAMES: usize = 32;
const TRAIN_BINS: usize = 8;
const TRAIN_UPDATES: usize = 2000;
const ATTENUATION_SEEDS: u64 = 20;
const CLI_MAX_SECONDS: f64 = 600.0;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

// ---- 1 ----------------------------------------------------------------------

fn prop2_closed_form() -> Outcome {
    let mut lines = Vec::new();
    for (n, tau) in [(1usize, 1.0), (4, 0.25), (16, 0.5)] {
        let started = Instant::now();
        let r = mc_prop2(&Prop2Config {
            n,
            tau,
            samples: PROP2_SAMPLES,
            seed: 11,
            x_distribution: XDistribution::Normal,
        })
        .map_err(|e| e.to_string())?;
        let secs = started.elapsed().as_secs_f64();
        let oracle = (2.0 / std::f64::consts::PI).sqrt() * n as f64 * tau;
        let err = rel(r.estimate, oracle);
        ensure(err < PROP2_REL_TOL && secs < PROP2_MAX_SECONDS, || {
            format!("n={n} tau={tau}: estimate {} vs {oracle}, rel {err:.2e}, {secs:.1}s", r.estimate)
        })?;
        lines.push(format!("n={n},tau={tau}: rel {err:.1e} in {secs:.2}s"));
    }
    Ok(lines.join("; "))
}

// ---- 2 ----------------------------------------------------------------------

fn prop1_jensen() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draw = |rows: usize, dim: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..dim).map(|_| rng.random_range(-50.0..50.0)).collect())
            .collect()
    };
    for trial in 0..PROP1_TRIALS {
        let (rows, dim) = (rng.random_range(1..10), rng.random_range(1..10));
        let x = draw(rows, dim, &mut rng);
        let xc = draw(rows, dim, &mut rng);
        let r = check_prop1(&x, &xc).map_err(|e| e.to_string())?;
        // independent oracle of the two sides
        let lhs: f64 = x
            .iter()
            .zip(&xc)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).abs()).sum::<f64>())
            .sum::<f64>()
            / rows as f64;
        ensure(r.holds && rel(lhs, r.lhs) < 1e-12, || format!("trial {trial}: {r:?}"))?;
    }
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (rows, dim) = (rng.random_range(1..10), rng.random_range(1..10));
        let x = draw(rows, dim, &mut rng);
        let c: Vec<f64> = (0..dim).map(|_| rng.random_range(-20.0..20.0)).collect();
        let xc: Vec<Vec<f64>> = x.iter().map(|r| r.iter().zip(&c).map(|(a, b)| a + b).collect()).collect();
        let r = check_prop1(&x, &xc).map_err(|e| e.to_string())?;
        worst = worst.max((r.lhs - r.rhs).abs());
    }
    ensure(worst < PROP1_EQUALITY_TOL, || format!("shift equality gap {worst:.2e}"))?;
    Ok(format!("{PROP1_TRIALS} random batches hold; shift equality gap {worst:.1e}"))
}

// ---- 3 ----------------------------------------------------------------------

/// Direct transcription of the shooting recursion.
fn interpret(p: &[f64], m: &[f64], sigma: f64, steps: usize, dt: f64) -> Vec<f64> {
    let n = p.len();
    let (mut q, mut mo) = (p.to_vec(), m.to_vec());
    for _ in 0..steps {
        let mut q2 = q.clone();
        let mut m2 = mo.clone();
        for i in 0..n {
            let mut v = 0.0;
            let mut a = 0.0;
            for j in 0..n {
                let d = q[i] - q[j];
                let k = (-(d * d) / (sigma * sigma)).exp();
                v += k * mo[j];
                a += -k / (sigma * sigma) * d * mo[i] * mo[j];
            }
            q2[i] = q[i] + dt * v;
            m2[i] = mo[i] + dt * 2.0 * a;
        }
        q = q2;
        mo = m2;
    }
    q
}

fn warp_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..WARP_INSTANCES {
        let t = rng.random_range(1..=16);
        let sigma = rng.random_range(10.0..80.0);
        let steps = rng.random_range(1..=8);
        let p: Vec<f64> = (0..t).map(|_| rng.random_range(80.0..250.0)).collect();
        let m: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let spec = KernelSpec {
            steps,
            ..KernelSpec::new(sigma)
        };
        let (out, _) = warp(&Contour::f0(p.clone()).unwrap(), &Momenta::new(m.clone()).unwrap(), &spec)
            .map_err(|e| e.to_string())?;
        for (a, b) in out.values().iter().zip(interpret(&p, &m, sigma, steps, 1.0)) {
            worst = worst.max(rel(*a, b));
        }
    }
    ensure(worst < WARP_REL_TOL, || format!("max rel {worst:.2e}"))?;
    let (p, m) = (137.25, 0.375);
    let (out, _) = warp(&Contour::f0(vec![p]).unwrap(), &Momenta::new(vec![m]).unwrap(), &KernelSpec::F0)
        .map_err(|e| e.to_string())?;
    let expected = p + KernelSpec::F0.steps as f64 * m;
    ensure(out.values()[0] == expected, || format!("T=1 gave {} not {expected}", out.values()[0]))?;
    Ok(format!("{WARP_INSTANCES} instances, max rel {worst:.1e}; T=1 exact"))
}

// ---- 4 ----------------------------------------------------------------------

fn pullback_check(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let t = rng.random_range(2..=16);
    let spec = KernelSpec {
        steps: rng.random_range(1..=5),
        ..KernelSpec::new(rng.random_range(20.0..60.0))
    };
    let p: Vec<f64> = (0..t).map(|_| rng.random_range(100.0..160.0)).collect();
    let m: Vec<f64> = (0..t).map(|_| rng.random_range(-0.5..0.5)).collect();
    let up: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
    let objective = |x: &[f64]| -> prosody_morph::Result<f64> {
        let q = shoot(&x[..t], &x[t..], &spec)?;
        Ok(q.final_contour().iter().zip(&up).map(|(a, b)| a * b).sum())
    };
    let with_grad = |x: &[f64]| -> prosody_morph::Result<(f64, Vec<f64>)> {
        let (gp, gm) = warp_pullback(&x[..t], &x[t..], &spec, &up)?;
        Ok((objective(x)?, gp.into_iter().chain(gm).collect()))
    };
    let point: Vec<f64> = p.into_iter().chain(m).collect();
    grad_check(with_grad, objective, &point, FD_EPS).map_err(|e| e.to_string())
}

fn primitive_check(rng: &mut ChaCha8Rng) -> Result<(String, f64), String> {
    type Build = fn(&mut Tape, &[prosody_morph::nn::NodeId]) -> prosody_morph::nn::NodeId;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("sigmoid", vec![vec![3, 5]], |t, x| t.sigmoid(x[0])),
        ("mul", vec![vec![4], vec![4]], |t, x| t.mul(x[0], x[1]).unwrap()),
        ("conv1d", vec![vec![2, 8], vec![3, 2, 3], vec![3]], |t, x| t.conv1d(x[0], x[1], x[2], 1).unwrap()),
        ("conv1d_stride2", vec![vec![2, 8], vec![3, 2, 5], vec![3]], |t, x| {
            t.conv1d(x[0], x[1], x[2], 2).unwrap()
        }),
        ("instance_norm", vec![vec![3, 6], vec![3], vec![3]], |t, x| {
            t.instance_norm(x[0], x[1], x[2]).unwrap()
        }),
        ("pixel_shuffle", vec![vec![4, 3]], |t, x| t.pixel_shuffle(x[0], 2).unwrap()),
        ("dense", vec![vec![2, 3], vec![2, 6], vec![2]], |t, x| t.dense(x[0], x[1], x[2]).unwrap()),
        ("apply_energy", vec![vec![4, 3], vec![4]], |t, x| {
            let s = t.square(x[0]);
            let e = t.square(x[1]);
            t.apply_energy(s, e).unwrap()
        }),
        ("warp", vec![vec![5], vec![5]], |t, x| {
            let p = t.scale(x[0], 40.0);
            t.warp(p, x[1], &KernelSpec::new(30.0)).unwrap()
        }),
        ("diff", vec![vec![6]], |t, x| t.diff(x[0]).unwrap()),
    ];
    let mut worst = (String::new(), 0.0f64);
    for (name, shapes, build) in cases {
        for _ in 0..5 {
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|s| {
                    let n = s.iter().product();
                    Tensor::new(s.clone(), (0..n).map(|_| rng.random_range(0.2..1.5)).collect()).unwrap()
                })
                .collect();
            let sizes: Vec<usize> = inputs.iter().map(Tensor::len).collect();
            let eval = |x: &[f64], want: bool| -> prosody_morph::Result<(f64, Vec<f64>)> {
                let mut tape = Tape::new();
                let mut ids = Vec::new();
                let mut off = 0;
                for (i, s) in shapes.iter().enumerate() {
                    let t = Tensor::new(s.clone(), x[off..off + sizes[i]].to_vec())?;
                    ids.push(tape.param(&format!("in{i}"), &t, 1));
                    off += sizes[i];
                }
                let out = build(&mut tape, &ids);
                let n = tape.value(out).len();
                let probe = tape.constant(Tensor::new(
                    tape.value(out).shape().to_vec(),
                    (0..n).map(|k| ((k * 5 + 2) % 7) as f64 / 7.0 - 0.3).collect(),
                )?);
                let prod = tape.mul(out, probe)?;
                let root = tape.sum(prod);
                let v = tape.value(root).item();
                if !want {
                    return Ok((v, Vec::new()));
                }
                let g = tape.backward(root, &Tensor::scalar(1.0))?;
                Ok((v, ids.iter().flat_map(|&id| g.node(id).into_data()).collect()))
            };
            let point: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
            let err = grad_check(|x| eval(x, true), |x| eval(x, false).map(|r| r.0), &point, FD_EPS)
                .map_err(|e| format!("{name}: {e}"))?;
            if err > worst.1 {
                worst = (name.to_string(), err);
            }
        }
    }
    Ok(worst)
}

fn flatten(tree: &ParamTree) -> Vec<f64> {
    tree.iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

fn unflatten(tree: &mut ParamTree, x: &[f64]) {
    let mut off = 0;
    for (_, t) in tree.iter_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&x[off..off + n]);
        off += n;
    }
}

fn composed_generator_check() -> Result<f64, String> {
    let (t, f) = (16, 3);
    let base = VcganModel::new(ModelConfig {
        width_divisor: 32,
        seed: 5,
        ..ModelConfig::new(t, f)
    })
    .map_err(|e| e.to_string())?;
    let batch = Batch::new(
        synth_dataset(&SynthSpec::toy(1, t, f, 41)).unwrap().source,
        synth_dataset(&SynthSpec::toy(1, t, f, 42)).unwrap().target,
    )
    .unwrap();
    let w = LossWeights {
        lambda_c1: 0.01,
        lambda_m: 1.0,
        lambda_i: 0.1,
        lambda_c2: 0.1,
        lambda_d: 1.0,
    };
    let dir = Direction::Forward;
    let g = base.generator(dir);
    let n_f0 = g.f0_sampler.params.num_scalars();
    let point: Vec<f64> = flatten(&g.f0_sampler.params)
        .into_iter()
        .chain(flatten(&g.energy_sampler.params))
        .collect();
    let with = |x: &[f64]| {
        let mut m = base.clone();
        let g = m.generator_mut(dir);
        unflatten(&mut g.f0_sampler.params, &x[..n_f0]);
        unflatten(&mut g.energy_sampler.params, &x[n_f0..]);
        m
    };
    let eval = |x: &[f64]| -> prosody_morph::Result<(f64, Vec<f64>)> {
        let m = with(x);
        let (v, _, grads) = generator_loss_and_grad(&m, dir, &batch, &w, &mut ChaCha8Rng::seed_from_u64(9))?;
        let g = m.generator(dir);
        let mut flat = Vec::new();
        for (prefix, tree) in [("f0/", &g.f0_sampler.params), ("energy/", &g.energy_sampler.params)] {
            for (name, _) in tree.iter() {
                flat.extend_from_slice(grads[&format!("{prefix}{name}")].data());
            }
        }
        Ok((v, flat))
    };
    let value =
        |x: &[f64]| generator_loss(&with(x), dir, &batch, &w, &mut ChaCha8Rng::seed_from_u64(9)).map(|r| r.0);
    grad_check(eval, value, &point, FD_EPS).map_err(|e| e.to_string())
}

fn gradient_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut pullback = 0.0f64;
    for _ in 0..20 {
        pullback = pullback.max(pullback_check(&mut rng)?);
    }
    ensure(pullback < PULLBACK_REL_TOL, || format!("warp_pullback rel err {pullback:.2e}"))?;
    let (name, prim) = primitive_check(&mut rng)?;
    ensure(prim < PRIMITIVE_REL_TOL, || format!("primitive {name} rel err {prim:.2e}"))?;
    let composed = composed_generator_check()?;
    ensure(composed < COMPOSED_REL_TOL, || format!("composed generator loss rel err {composed:.2e}"))?;
    Ok(format!(
        "pullback {pullback:.1e}, worst primitive {name} {prim:.1e}, composed loss {composed:.1e}"
    ))
}

// ---- 5 ----------------------------------------------------------------------

fn registration() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for pair in 0..REGISTRATION_PAIRS {
        let t = 32;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let (mean, amp) = (rng.random_range(100.0..160.0), rng.random_range(10.0..25.0));
        let src: Vec<f64> = (0..t)
            .map(|i| mean + amp * (std::f64::consts::TAU * i as f64 / t as f64 + phase).sin())
            .collect();
        let map = AffineMap {
            scale: rng.random_range(0.9..1.2),
            shift: rng.random_range(-25.0..25.0),
        };
        let src = Contour::f0(src).unwrap();
        let tgt = map.apply_contour(&src);
        let r = register(&src, &tgt, &RegistrationConfig::default(), &KernelSpec::F0).map_err(|e| e.to_string())?;
        ensure(r.history.windows(2).all(|w| w[1] <= w[0]), || format!("pair {pair}: objective increased"))?;
        let warped = Contour::f0(r.warped.clone()).map_err(|e| e.to_string())?;
        let frac = rmse(&warped, &tgt).unwrap() / rmse(&src, &tgt).unwrap();
        ensure(frac < REGISTRATION_RMSE_FRACTION, || format!("pair {pair}: rmse fraction {frac:.4}"))?;
        worst = worst.max(frac);
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < REGISTRATION_MAX_SECONDS, || format!("took {secs:.1}s"))?;
    Ok(format!("{REGISTRATION_PAIRS} pairs monotone, worst rmse fraction {worst:.4}, {secs:.1}s"))
}

// ---- 6 ----------------------------------------------------------------------

fn energy_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut round, mut ratio) = (0.0f64, 0.0f64);
    for _ in 0..ENERGY_INSTANCES {
        let (t, f) = (rng.random_range(1..20), rng.random_range(1..12));
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..f).map(|_| rng.random_range(0.01..5.0)).collect())
            .collect();
        let s = Spectrogram::from_rows(&rows).unwrap();
        let e: Vec<f64> = (0..t).map(|_| rng.random_range(0.01..50.0)).collect();
        let out = apply_energy(&s, &prosody_morph::Contour::energy(e.clone()).unwrap()).map_err(|e| e.to_string())?;
        for (row, target) in e.iter().enumerate() {
            let sum: f64 = (0..f).map(|b| out.get(row, b)).sum();
            round = round.max(rel(sum, *target));
            for b in 1..f {
                let before = rows[row][b] / rows[row][0];
                let after = out.get(row, b) / out.get(row, 0);
                ratio = ratio.max(rel(before, after));
            }
        }
        let back = extract_energy(&out);
        for (a, b) in back.values().iter().zip(&e) {
            round = round.max(rel(*a, *b));
        }
    }
    ensure(round < ENERGY_ROUND_TRIP_TOL, || format!("round trip rel {round:.2e}"))?;
    ensure(ratio < BIN_RATIO_TOL, || format!("bin ratio rel {ratio:.2e}"))?;
    Ok(format!("{ENERGY_INSTANCES} spectrograms: round trip {round:.1e}, bin ratios {ratio:.1e}"))
}

// ---- 7 ----------------------------------------------------------------------

type Sv = (Vec<f64>, Vec<f64>, Vec<f64>);

/// Loss recomputation from whole-network forwards and the shooting recursion.
struct Reference<'a> {
    model: &'a VcganModel,
    rng: ChaCha8Rng,
    frames: usize,
    bins: usize,
}

impl Reference<'_> {
    fn features(&self, parts: &[(&[f64], bool)]) -> Tensor {
        let k = self.model.config().f0_input_scale;
        let (t, f) = (self.frames, self.bins);
        let mut data = Vec::new();
        let mut chans = 0;
        for &(v, spect) in parts {
            if spect {
                for b in 0..f {
                    data.extend((0..t).map(|i| v[i * f + b]));
                }
                chans += f;
            } else {
                data.extend(v.iter().map(|x| x * k));
                chans += 1;
            }
        }
        Tensor::new(vec![chans, t], data).unwrap()
    }

    fn sampler(&mut self, dir: Direction, energy: bool, s: &[f64], p: &[f64]) -> Vec<f64> {
        let g = self.model.generator(dir);
        let net = if energy { &g.energy_sampler } else { &g.f0_sampler };
        let x = self.features(&[(s, true), (p, false)]);
        let y = forward(&net.params, &net.spec, &x, Mode::Train, &mut self.rng).unwrap().0;
        y.data().iter().map(|v| v * self.model.config().momenta_scale).collect()
    }

    fn convert(&mut self, dir: Direction, src: &Sv) -> (Sv, Vec<f64>, Vec<f64>) {
        let (s, p, e) = src;
        let (fk, ek) = {
            let g = self.model.generator(dir);
            (g.f0_kernel, g.energy_kernel)
        };
        let m_p = self.sampler(dir, false, s, p);
        let p2 = interpret(p, &m_p, fk.sigma_value, fk.steps, fk.dt);
        let m_e = self.sampler(dir, true, s, &p2);
        let e2 = interpret(e, &m_e, ek.sigma_value, ek.steps, ek.dt);
        let f = self.bins;
        let mut s2 = Vec::with_capacity(s.len());
        for t in 0..self.frames {
            let row = &s[t * f..(t + 1) * f];
            let src_e: f64 = row.iter().sum();
            s2.extend(row.iter().map(|v| v * (e2[t] / src_e)));
        }
        ((s2, p2, e2), m_p, m_e)
    }

    fn disc(&mut self, dir: Direction, a: &Sv, b: &Sv) -> Vec<f64> {
        let d = self.model.discriminator(dir);
        let mut out = Vec::new();
        if let Some(pitch) = &d.pitch {
            let x = self.features(&[(&a.1, false), (&b.1, false)]);
            out.push(forward(&pitch.params, &pitch.spec, &x, Mode::Eval, &mut self.rng).unwrap().0.item());
        }
        let x = self.features(&[(&a.0, true), (&a.1, false), (&b.0, true), (&b.1, false)]);
        out.push(forward(&d.spect.params, &d.spect.spec, &x, Mode::Eval, &mut self.rng).unwrap().0.item());
        out
    }
}

fn sv(item: &(Spectrogram, Contour)) -> Sv {
    (
        item.0.data().to_vec(),
        item.1.values().to_vec(),
        extract_energy(&item.0).into_values(),
    )
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn smooth(m: &[f64]) -> f64 {
    m.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum()
}

fn reference_generator(model: &VcganModel, dir: Direction, b: &Batch, w: &LossWeights, seed: u64) -> f64 {
    let cfg = model.config();
    let mut r = Reference {
        model,
        rng: ChaCha8Rng::seed_from_u64(seed),
        frames: cfg.frames,
        bins: cfg.bins,
    };
    let (src, _) = b.roles(dir);
    let ek = model.generator(dir).energy_kernel;
    let mut total = 0.0;
    for item in src {
        let a = sv(item);
        let (fwd, mp, me) = r.convert(dir, &a);
        let (cyc, cmp, cme) = r.convert(dir.other(), &fwd);
        let mi = r.sampler(dir, true, &a.0, &a.1);
        let ei = interpret(&a.2, &mi, ek.sigma_value, ek.steps, ek.dt);
        let probs = r.disc(dir, &a, &fwd);
        total += w.lambda_c1 * l1(&a.1, &cyc.1)
            + w.lambda_m * (smooth(&mp) + smooth(&me) + smooth(&cmp) + smooth(&cme) + smooth(&mi))
            + w.lambda_i * l1(&a.2, &ei)
            + w.lambda_c2 * l1(&a.2, &cyc.2)
            + w.lambda_d * probs.iter().map(|p| p.ln()).sum::<f64>() / probs.len() as f64;
    }
    total / src.len() as f64
}

fn reference_discriminator(model: &VcganModel, dir: Direction, b: &Batch, seed: u64) -> f64 {
    let cfg = model.config();
    let mut r = Reference {
        model,
        rng: ChaCha8Rng::seed_from_u64(seed),
        frames: cfg.frames,
        bins: cfg.bins,
    };
    let (src, tgt) = b.roles(dir);
    let mut acc = 0.0;
    for (ia, ib) in src.iter().zip(tgt) {
        let (a, bb) = (sv(ia), sv(ib));
        let (fa, _, _) = r.convert(dir, &a);
        let (fb, _, _) = r.convert(dir.other(), &bb);
        let pos = r.disc(dir, &a, &fa);
        let neg = r.disc(dir, &fb, &bb);
        acc += pos.iter().zip(&neg).map(|(p, q)| -p.ln() - (1.0 - q).ln()).sum::<f64>() / pos.len() as f64;
    }
    acc / src.len() as f64
}

fn loss_correctness() -> Outcome {
    let (t, f) = (16, 3);
    let w = LossWeights {
        lambda_c1: 0.3,
        lambda_m: 2.0,
        lambda_i: 0.7,
        lambda_c2: 0.1,
        lambda_d: 1.0,
    };
    let c = synth_dataset(&SynthSpec::toy(2, t, f, 71)).unwrap();
    let batch = Batch::new(c.source, c.target).unwrap();
    let mut worst = 0.0f64;
    for mode in [DiscriminatorMode::Split, DiscriminatorMode::Joint] {
        let model = VcganModel::new(ModelConfig {
            width_divisor: 32,
            discriminator_mode: mode,
            seed: 7,
            ..ModelConfig::new(t, f)
        })
        .unwrap();
        for dir in [Direction::Forward, Direction::Backward] {
            let (g, comps) = generator_loss(&model, dir, &batch, &w, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let g_ref = reference_generator(&model, dir, &batch, &w, 1);
            let sum: f64 = comps.values().sum();
            let (d, _) = discriminator_loss(&model, dir, &batch, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            let d_ref = reference_discriminator(&model, dir, &batch, 2);
            for (a, b) in [(g, g_ref), (d, d_ref), (g, sum)] {
                worst = worst.max(rel(a, b));
            }
        }
    }
    ensure(worst < LOSS_REL_TOL, || format!("reference mismatch {worst:.2e}"))?;

    let mut zero = VcganModel::new(ModelConfig {
        width_divisor: 32,
        ..ModelConfig::new(t, f)
    })
    .unwrap();
    zero.zero_generators();
    let no_adv = LossWeights { lambda_d: 0.0, ..w };
    let (z, _) = generator_loss(&zero, Direction::Forward, &batch, &no_adv, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    ensure(z == 0.0, || format!("zero-model generator loss {z}"))?;

    // a critic whose final pre-sigmoid value is pinned to 0
    for dir in [Direction::Forward, Direction::Backward] {
        let d = zero.discriminator_mut(dir);
        for net in d.pitch.iter_mut().chain(std::iter::once(&mut d.spect)) {
            let dense = net.spec.layers.len() - 2;
            for (name, t) in net.params.iter_mut() {
                if name.starts_with(&format!("{dense}/")) {
                    t.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }
    let (half, _) = discriminator_loss(&zero, Direction::Forward, &batch, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let expected = 2.0 * std::f64::consts::LN_2;
    ensure((half - expected).abs() < HALF_LOSS_TOL, || format!("constant-0.5 loss {half}"))?;
    Ok(format!("reference rel {worst:.1e}; zero model 0; constant critic {half:.10}"))
}

// ---- 8 and 9 ----------------------------------------------------------------

struct TrainingRun {
    model: VcganModel,
    history: TrainHistory,
    secs: f64,
}

fn toy_corpus(pairs: usize, seed: u64) -> PairedCorpus {
    synth_dataset(&SynthSpec::toy(pairs, TRAIN_FRAMES, TRAIN_BINS, seed)).unwrap()
}

fn toy_train_config(corpus: &PairedCorpus) -> TrainConfig {
    let per_epoch = TrainConfig::toy().updates_per_epoch(corpus);
    // each mini-batch records one update per direction
    TrainConfig {
        epochs: TRAIN_UPDATES / (2 * per_epoch),
        seed: 8,
        ..TrainConfig::toy()
    }
}

fn toy_model() -> VcganModel {
    VcganModel::new(ModelConfig {
        width_divisor: 8,
        seed: 8,
        ..ModelConfig::new(TRAIN_FRAMES, TRAIN_BINS)
    })
    .unwrap()
}

fn training_run() -> Result<TrainingRun, String> {
    let corpus = toy_corpus(8, 1);
    let cfg = toy_train_config(&corpus);
    let mut model = toy_model();
    let started = Instant::now();
    let history = train(&mut model, &corpus, &cfg).map_err(|e| e.to_string())?;
    Ok(TrainingRun {
        model,
        history,
        secs: started.elapsed().as_secs_f64(),
    })
}

fn training_stability(run: &TrainingRun) -> Outcome {
    let h = &run.history;
    ensure(h.len() == TRAIN_UPDATES, || format!("{} updates recorded", h.len()))?;
    ensure(
        h.records.iter().all(|r| r.loss_gen.is_finite() && r.loss_disc.is_finite()),
        || "non-finite loss".into(),
    )?;
    let gap = equilibrium_gap(h).map_err(|e| e.to_string())?;
    ensure(!gap.diverged, || format!("diverged: {:?}", (gap.first_quartile_mean, gap.final_quartile_mean)))?;
    let again = training_run()?;
    ensure(again.history == *h, || "rerun history differs".into())?;
    ensure(again.model.to_json().unwrap() == run.model.to_json().unwrap(), || "rerun weights differ".into())?;

    let c = synth_dataset(&SynthSpec::toy(2, TRAIN_FRAMES, TRAIN_BINS, 0)).unwrap();
    let batch = Batch::new(c.source, c.target).unwrap();
    let cfg = ModelConfig {
        width_divisor: 8,
        ..ModelConfig::new(TRAIN_FRAMES, TRAIN_BINS)
    };
    let sweep = attenuation_sweep(&cfg, &batch, &(0..ATTENUATION_SEEDS).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    ensure(sweep.median_ratio < 1.0, || format!("median attenuation ratio {}", sweep.median_ratio))?;
    let toy = linear_toy_attenuation(&[0.5, -1.25, 2.0, 0.75, -0.3], 0.1).map_err(|e| e.to_string())?;
    ensure((toy.ratio - 0.1).abs() <= 1e-15, || format!("linear toy ratio {}", toy.ratio))?;

    let mut joint_model = VcganModel::new(ModelConfig {
        discriminator_mode: DiscriminatorMode::Joint,
        ..toy_model().config().clone()
    })
    .unwrap();
    let corpus = toy_corpus(8, 1);
    let joint = train(
        &mut joint_model,
        &corpus,
        &TrainConfig {
            discriminator_mode: DiscriminatorMode::Joint,
            ..toy_train_config(&corpus)
        },
    )
    .map_err(|e| e.to_string())
    .and_then(|h| equilibrium_gap(&h).map_err(|e| e.to_string()));
    let joint_note = match joint {
        Ok(r) => format!("joint gap {:.3}->{:.3}", r.first_quartile_mean, r.final_quartile_mean),
        Err(e) => format!("joint run failed: {e}"),
    };
    Ok(format!(
        "{} updates in {:.1}s, split gap {:.3}->{:.3}, identical rerun; median ratio {:.3}; toy {}; {joint_note}",
        h.len(),
        run.secs,
        gap.first_quartile_mean,
        gap.final_quartile_mean,
        sweep.median_ratio,
        toy.ratio
    ))
}

fn conversion_usefulness(run: &TrainingRun) -> Outcome {
    let held_out = toy_corpus(8, 909);
    let r = evaluate_conversion(&run.model, &held_out, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| e.to_string())?;
    ensure(r.rmse_f0 < r.baseline_rmse_f0, || {
        format!("rmse_f0 {:.3} vs baseline {:.3}", r.rmse_f0, r.baseline_rmse_f0)
    })?;
    Ok(format!("held-out rmse_f0 {:.3} < baseline {:.3}", r.rmse_f0, r.baseline_rmse_f0))
}

// ---- 10 ---------------------------------------------------------------------

struct Cli<'a> {
    dir: &'a Path,
}

impl Cli<'_> {
    fn run(&self, args: &[&str]) -> (i32, String) {
        let out = Command::new(env!("CARGO_BIN_EXE_prosody-morph"))
            .args(args)
            .current_dir(self.dir)
            .env("PROSODY_MORPH_THREADS", "2")
            .output()
            .expect("binary runs");
        let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
        (out.status.code().unwrap_or(-1), text)
    }

    fn expect(&self, args: &[&str], code: i32) -> Result<String, String> {
        let (got, text) = self.run(args);
        ensure(got == code, || format!("`{}` exited {got}, expected {code}: {text}", args.join(" ")))?;
        if code == 0 {
            let out = args.iter().position(|a| *a == "--out").map(|i| args[i + 1]).unwrap();
            ensure(self.dir.join(out).join("manifest.json").exists(), || format!("{out} lacks a manifest"))?;
        }
        Ok(text)
    }

    fn read(&self, path: &str) -> String {
        std::fs::read_to_string(self.dir.join(path)).unwrap_or_default()
    }

    fn write(&self, path: &str, text: &str) {
        std::fs::write(self.dir.join(path), text).unwrap();
    }
}

fn cli_contract() -> Outcome {
    let started = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cli = Cli { dir: tmp.path() };
    let spec = SynthSpec::toy(8, TRAIN_FRAMES, TRAIN_BINS, 1);
    cli.write("spec.json", &serde_json::to_string(&spec).unwrap());
    cli.expect(&["synth", "--spec", "spec.json", "--out", "data"], 0)?;
    cli.expect(&["synth", "--spec", "spec.json", "--out", "data2"], 0)?;
    for i in 0..8 {
        for f in [format!("source_f0_{i}.csv"), format!("target_spect_{i}.csv")] {
            let (a, b) = (cli.read(&format!("data/{f}")), cli.read(&format!("data2/{f}")));
            ensure(!a.is_empty() && a == b, || format!("{f} differs between identical synth runs"))?;
        }
    }
    cli.expect(&["synth", "--spec", "spec.json", "--out", "data"], 2)?;
    cli.write("bad.json", r#"{"num_pairs": 2, "lenght": 8}"#);
    let msg = cli.expect(&["synth", "--spec", "bad.json", "--out", "bad"], 2)?;
    ensure(msg.contains("lenght"), || format!("diagnostic lacks the key: {msg}"))?;

    let shifted = AffineMap { scale: 1.0, shift: 20.0 }
        .apply_contour(&prosody_morph::io::contour_from_csv(&cli.read("data/source_f0_0.csv"), prosody_morph::ContourKind::F0).unwrap());
    cli.write("shifted.csv", &contour_to_csv(&shifted));
    let src = "data/source_f0_0.csv";
    cli.expect(&["register", "--src", src, "--tgt", src, "--out", "reg_same"], 0)?;
    let hist_rows = cli.read("reg_same/history.csv").lines().count() - 1;
    ensure(hist_rows == 1, || format!("src=tgt history has {hist_rows} rows"))?;
    cli.expect(&["register", "--src", src, "--tgt", "shifted.csv", "--out", "reg"], 0)?;
    let warped = prosody_morph::io::contour_from_csv(&cli.read("reg/warped.csv"), prosody_morph::ContourKind::F0).unwrap();
    let frac = rmse(&warped, &shifted).unwrap() / 20.0;
    ensure(frac < REGISTRATION_RMSE_FRACTION, || format!("CLI registration rmse fraction {frac}"))?;
    cli.write("short.csv", "t,value\n0,100\n1,110\n");
    let msg = cli.expect(&["register", "--src", src, "--tgt", "short.csv", "--out", "reg_bad"], 2)?;
    ensure(msg.contains("32") && msg.contains('2'), || format!("length message: {msg}"))?;

    cli.write("zero.json", r#"{"train": {"epochs": 0}, "model": {"width_divisor": 8}}"#);
    cli.expect(&["train", "--config", "zero.json", "--data", "data", "--out", "train0"], 0)?;
    ensure(cli.read("train0/history.csv").lines().count() == 1, || "epochs=0 history not header-only".into())?;
    let init = VcganModel::new(ModelConfig {
        width_divisor: 8,
        ..ModelConfig::new(TRAIN_FRAMES, TRAIN_BINS)
    })
    .unwrap();
    ensure(cli.read("train0/checkpoint.json") == init.to_json().unwrap(), || {
        "epochs=0 checkpoint differs from the initialized model".into()
    })?;
    cli.write("unknown.json", r#"{"train": {"epochs": 1, "momentum": 0.9}}"#);
    cli.expect(&["train", "--config", "unknown.json", "--data", "data", "--out", "train_bad"], 2)?;
    let toy = TrainConfig {
        epochs: 60,
        ..TrainConfig::toy()
    };
    cli.write(
        "toy.json",
        &serde_json::json!({ "train": toy, "model": { "width_divisor": 8 } }).to_string(),
    );
    cli.expect(&["train", "--config", "toy.json", "--data", "data", "--out", "train"], 0)?;
    let stability: serde_json::Value = serde_json::from_str(&cli.read("train/stability.json")).unwrap();
    ensure(stability["check_name"] == "equilibrium_gap", || "stability report missing".into())?;

    let held = toy_corpus(1, 4242);
    cli.write("held_spect.csv", &spectrogram_to_csv(&held.source[0].0));
    cli.write("held_f0.csv", &contour_to_csv(&held.source[0].1));
    cli.write("held_truth.csv", &contour_to_csv(&AffineMap { scale: 1.0, shift: 30.0 }.apply_contour(&held.source[0].1)));
    let conv = |out: &str, ck: &str| {
        vec![
            "convert", "--checkpoint", ck, "--spect", "held_spect.csv", "--f0", "held_f0.csv", "--direction", "fwd",
            "--seed", "5", "--truth", "held_truth.csv", "--out",
        ]
        .into_iter()
        .map(String::from)
        .chain([out.to_string()])
        .collect::<Vec<_>>()
    };
    fn as_refs(v: &[String]) -> Vec<&str> {
        v.iter().map(String::as_str).collect()
    }
    let printed = cli.expect(&as_refs(&conv("conv_a", "train/checkpoint.json")), 0)?;
    cli.expect(&as_refs(&conv("conv_b", "train/checkpoint.json")), 0)?;
    for f in ["p_out.csv", "e_out.csv", "s_out.csv"] {
        ensure(cli.read(&format!("conv_a/{f}")) == cli.read(&format!("conv_b/{f}")), || format!("{f} not reproducible"))?;
    }
    let metrics: serde_json::Value = serde_json::from_str(&cli.read("conv_a/metrics.json")).unwrap();
    let (trained, baseline) = (metrics["rmse_f0"].as_f64().unwrap(), metrics["baseline_rmse_f0"].as_f64().unwrap());
    ensure(trained < baseline, || format!("trained checkpoint rmse {trained} vs baseline {baseline}: {printed}"))?;

    let mut zero = init.clone();
    zero.zero_generators();
    cli.write("zero_ck.json", &zero.to_json().unwrap());
    cli.expect(&as_refs(&conv("conv_zero", "zero_ck.json")), 0)?;
    ensure(cli.read("conv_zero/p_out.csv") == cli.read("held_f0.csv"), || "zero checkpoint changed F0".into())?;
    let s_back = spectrogram_from_csv(&cli.read("conv_zero/s_out.csv")).unwrap();
    ensure(s_back == held.source[0].0, || "zero checkpoint changed the spectrogram".into())?;
    let mut rows: Vec<Vec<f64>> = (0..TRAIN_FRAMES).map(|t| held.source[0].0.row(t).to_vec()).collect();
    rows[3] = vec![0.0; TRAIN_BINS];
    cli.write("held_spect.csv", &spectrogram_to_csv(&Spectrogram::from_rows(&rows).unwrap()));
    let msg = cli.expect(&as_refs(&conv("conv_bad", "zero_ck.json")), 5)?;
    ensure(msg.contains("frame 3"), || format!("zero-energy message: {msg}"))?;

    cli.expect(&["verify", "--suite", "prop2", "--out", "v_prop2"], 0)?;
    cli.write("tau0.json", r#"{"prop2": {"cases": [{"n": 3, "tau": 0.0, "samples": 1000, "seed": 1}]}}"#);
    cli.expect(&["verify", "--suite", "prop2", "--config", "tau0.json", "--out", "v_tau0"], 0)?;
    cli.expect(&["verify", "--suite", "all", "--out", "v_all"], 0)?;
    let csv_rows = cli.read("v_all/attenuation.csv").lines().count() - 1;
    ensure(csv_rows == 20, || format!("attenuation CSV has {csv_rows} rows"))?;
    cli.write("strict.json", r#"{"prop2": {"tolerance": 0.0, "cases": [{"n": 1, "tau": 1.0, "samples": 100, "seed": 1}]}}"#);
    cli.expect(&["verify", "--suite", "prop2", "--config", "strict.json", "--out", "v_fail"], 6)?;
    ensure(!cli.read("v_fail/prop2.json").is_empty(), || "failing report not written".into())?;
    cli.expect(&["verify", "--suite", "prop2", "--config", "strict.json", "--out", "v_fail", "--force"], 6)?;

    let (code, help) = cli.run(&["register", "--help"]);
    ensure(code == 0 && help.contains("--sigma") && help.contains("Hz"), || "register --help lacks units".into())?;
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < CLI_MAX_SECONDS, || format!("scripted run took {secs:.0}s"))?;
    Ok(format!("synth/register/train/convert/verify contracts hold in {secs:.1}s"))
}

// ---- driver -----------------------------------------------------------------

fn report(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = Duration::from_secs_f64(started.elapsed().as_secs_f64().max(0.0)).as_secs_f64();
    match &outcome {
        Ok(detail) => println!("criterion {id:>2} PASS  {name} [{secs:.1}s]: {detail}"),
        Err(detail) => println!("criterion {id:>2} FAIL  {name} [{secs:.1}s]: {detail}"),
    }
    outcome.is_ok()
}

fn main() {
    let mut ok = true;
    ok &= report(1, "prop2 closed form", prop2_closed_form);
    ok &= report(2, "prop1 Jensen bound", prop1_jensen);
    ok &= report(3, "warp fidelity", warp_fidelity);
    ok &= report(4, "gradient exactness", gradient_exactness);
    ok &= report(5, "registration", registration);
    ok &= report(6, "energy identities", energy_identities);
    ok &= report(7, "loss correctness", loss_correctness);
    let run = training_run();
    ok &= report(8, "training stability", || match &run {
        Ok(r) => training_stability(r),
        Err(e) => Err(e.clone()),
    });
    ok &= report(9, "conversion usefulness", || match &run {
        Ok(r) => conversion_usefulness(r),
        Err(e) => Err(e.clone()),
    });
    ok &= report(10, "cli contract", cli_contract);
    if !ok {
        std::process::exit(1);
    }
}
