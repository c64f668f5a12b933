use std::path::Path;

use prosody_morph::io::{
    contour_from_csv, contour_to_csv, momenta_to_csv, spectrogram_from_csv, spectrogram_to_csv,
};
use prosody_morph::vcgan::history_to_csv;
use prosody_morph::verify::{
    attenuation_sweep, linear_toy_attenuation, mc_prop2, Prop2Config, Report, StabilityReport, XDistribution,
};
use prosody_morph::{
    check_prop1, convert, equilibrium_gap, register, rmse, synth_dataset, train, AffineMap, Contour, ContourKind,
    Direction, KernelSpec, ModelConfig, PairedCorpus, RegistrationConfig, SynthSpec, TrainConfig, VcganModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, EXIT_VERIFY};
use crate::run_dir::RunDir;

pub const GROUND_TRUTH: &str = "ground_truth_map.json";

/// Parses JSON, naming the offending key on failure.
pub fn parse_json<T: DeserializeOwned>(text: &str, what: &str) -> CliResult<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::config(format!("{what}: at `{path}`: {}", e.into_inner()))
    })
}

fn to_value(v: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable config")
}

fn item_files(role: &str, i: usize) -> (String, String) {
    (format!("{role}_f0_{i}.csv"), format!("{role}_spect_{i}.csv"))
}

pub fn synth(spec_path: &Path, out: &Path, force: bool) -> CliResult<()> {
    let mut run = RunDir::create(out, "synth", force)?;
    let text = run.read(spec_path)?;
    let spec: SynthSpec = parse_json(&text, &spec_path.display().to_string())?;
    let corpus = synth_dataset(&spec)?;
    for (role, items) in [("source", &corpus.source), ("target", &corpus.target)] {
        for (i, (s, p)) in items.iter().enumerate() {
            let (f0, spect) = item_files(role, i);
            run.write(&f0, &contour_to_csv(p))?;
            run.write(&spect, &spectrogram_to_csv(s))?;
        }
    }
    if let Some(map) = &corpus.ground_truth_map {
        run.write_json(GROUND_TRUTH, map)?;
    }
    println!(
        "wrote {} source and {} target items of {} frames to {}",
        corpus.source.len(),
        corpus.target.len(),
        corpus.length(),
        out.display()
    );
    run.finish(to_value(&spec), Some(spec.seed))
}

fn read_corpus(run: &mut RunDir, dir: &Path) -> CliResult<PairedCorpus> {
    let mut lists = Vec::new();
    for role in ["source", "target"] {
        let mut items = Vec::new();
        loop {
            let (f0, spect) = item_files(role, items.len());
            if !dir.join(&f0).exists() {
                break;
            }
            let p = contour_from_csv(&run.read(&dir.join(&f0))?, ContourKind::F0)?;
            let s = spectrogram_from_csv(&run.read(&dir.join(&spect))?)?;
            items.push((s, p));
        }
        if items.is_empty() {
            return Err(CliError::config(format!("{} holds no {role}_f0_0.csv", dir.display())));
        }
        lists.push(items);
    }
    let map_path = dir.join(GROUND_TRUTH);
    let map = if map_path.exists() {
        Some(parse_json::<AffineMap>(&run.read(&map_path)?, GROUND_TRUTH)?)
    } else {
        None
    };
    let target = lists.pop().expect("two roles");
    let source = lists.pop().expect("two roles");
    Ok(PairedCorpus::new(source, target, map)?)
}

pub struct RegisterArgs<'a> {
    pub src: &'a Path,
    pub tgt: &'a Path,
    pub sigma: f64,
    pub lambda: f64,
    pub steps: usize,
    pub max_iters: usize,
    pub learning_rate: f64,
    pub out: &'a Path,
    pub force: bool,
}

pub fn register_cmd(a: &RegisterArgs) -> CliResult<()> {
    let mut run = RunDir::create(a.out, "register", a.force)?;
    let src = contour_from_csv(&run.read(a.src)?, ContourKind::F0)?;
    let tgt = contour_from_csv(&run.read(a.tgt)?, ContourKind::F0)?;
    let spec = KernelSpec {
        steps: a.steps,
        ..KernelSpec::new(a.sigma)
    };
    let cfg = RegistrationConfig {
        lambda: a.lambda,
        max_iters: a.max_iters,
        learning_rate: a.learning_rate,
        ..RegistrationConfig::default()
    };
    let reg = register(&src, &tgt, &cfg, &spec)?;
    let warped = Contour::new(reg.warped.clone(), ContourKind::F0)?;
    let initial = rmse(&src, &tgt)?;
    let fin = rmse(&warped, &tgt)?;
    run.write("momenta.csv", &momenta_to_csv(reg.momenta.values()))?;
    run.write("warped.csv", &contour_to_csv(&warped))?;
    let mut hist = String::from("iteration,objective\n");
    for (k, v) in reg.history.iter().enumerate() {
        hist.push_str(&format!("{k},{}\n", prosody_morph::io::fmt_f64(*v)));
    }
    run.write("history.csv", &hist)?;
    println!(
        "iterations {} objective {:.6e} -> {:.6e} rmse {:.6} -> {:.6}",
        reg.iterations(),
        reg.history[0],
        reg.final_objective(),
        initial,
        fin
    );
    run.finish(
        serde_json::json!({ "kernel": spec, "registration": cfg }),
        None,
    )
}

/// Training config file: `train` holds the optimizer settings, `model`
/// overrides architecture defaults. Frame and bin counts come from the data.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: serde_json::Map<String, serde_json::Value>,
}

fn model_config(file: &TrainFile, frames: usize, bins: usize) -> CliResult<ModelConfig> {
    for key in ["frames", "bins", "discriminator_mode"] {
        if file.model.contains_key(key) {
            return Err(CliError::config(format!(
                "model.{key} is derived from the data and train settings, remove it"
            )));
        }
    }
    let mut base = to_value(&ModelConfig {
        discriminator_mode: file.train.discriminator_mode,
        ..ModelConfig::new(frames, bins)
    });
    let obj = base.as_object_mut().expect("struct serializes to an object");
    for (k, v) in &file.model {
        obj.insert(k.clone(), v.clone());
    }
    let cfg: ModelConfig = parse_json(&base.to_string(), "model")?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_cmd(config: &Path, data: &Path, out: &Path, force: bool) -> CliResult<()> {
    let mut run = RunDir::create(out, "train", force)?;
    let file: TrainFile = parse_json(&run.read(config)?, &config.display().to_string())?;
    file.train.validate()?;
    let corpus = read_corpus(&mut run, data)?;
    let model_cfg = model_config(&file, corpus.length(), corpus.bins())?;
    let mut model = VcganModel::new(model_cfg.clone())?;
    let history = train(&mut model, &corpus, &file.train)?;
    run.write("checkpoint.json", &model.to_json()?)?;
    run.write("history.csv", &history_to_csv(&history))?;
    let inputs = serde_json::json!({ "records": history.len() });
    let report = match equilibrium_gap(&history) {
        Ok(r) => {
            println!(
                "{} records, gap first quartile {:.4} final quartile {:.4}, diverged {}",
                history.len(),
                r.first_quartile_mean,
                r.final_quartile_mean,
                r.diverged
            );
            let pass = !r.diverged;
            Report::new("equilibrium_gap", inputs, r, pass)
        }
        Err(_) => {
            println!("no updates recorded");
            Report::new("equilibrium_gap", inputs, Option::<StabilityReport>::None, true)
        }
    };
    run.write_json("stability.json", &report)?;
    run.finish(
        serde_json::json!({ "train": file.train, "model": model_cfg }),
        Some(file.train.seed),
    )
}

pub struct ConvertArgs<'a> {
    pub checkpoint: &'a Path,
    pub spect: &'a Path,
    pub f0: &'a Path,
    pub direction: Direction,
    pub seed: u64,
    pub truth: Option<&'a Path>,
    pub out: &'a Path,
    pub force: bool,
}

#[derive(Debug, Serialize)]
struct ConvertMetrics {
    rmse_f0: f64,
    baseline_rmse_f0: f64,
}

pub fn convert_cmd(a: &ConvertArgs) -> CliResult<()> {
    let mut run = RunDir::create(a.out, "convert", a.force)?;
    let model = VcganModel::from_json(&run.read(a.checkpoint)?)?;
    let s = spectrogram_from_csv(&run.read(a.spect)?)?;
    let p = contour_from_csv(&run.read(a.f0)?, ContourKind::F0)?;
    let truth = match a.truth {
        Some(path) => Some(contour_from_csv(&run.read(path)?, ContourKind::F0)?),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let c = convert(&model, a.direction, &s, &p, &mut rng)?;
    run.write("p_out.csv", &contour_to_csv(&c.p_out))?;
    run.write("e_out.csv", &contour_to_csv(&c.e_out))?;
    run.write("s_out.csv", &spectrogram_to_csv(&c.s_out))?;
    run.write("m_p.csv", &momenta_to_csv(c.m_p.values()))?;
    run.write("m_e.csv", &momenta_to_csv(c.m_e.values()))?;
    if let Some(truth) = &truth {
        let m = ConvertMetrics {
            rmse_f0: rmse(&c.p_out, truth)?,
            baseline_rmse_f0: rmse(&p, truth)?,
        };
        println!("rmse_f0 {:.6} baseline_rmse_f0 {:.6}", m.rmse_f0, m.baseline_rmse_f0);
        run.write_json("metrics.json", &m)?;
    }
    run.finish(
        serde_json::json!({ "direction": a.direction, "model": model.config() }),
        Some(a.seed),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Prop1,
    Prop2,
    Attenuation,
    All,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prop1Settings {
    pub trials: usize,
    pub max_rows: usize,
    pub max_dim: usize,
    pub shift_trials: usize,
    pub seed: u64,
}

impl Default for Prop1Settings {
    fn default() -> Self {
        Prop1Settings {
            trials: 10_000,
            max_rows: 8,
            max_dim: 8,
            shift_trials: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prop2Settings {
    pub cases: Vec<Prop2Config>,
    /// Largest accepted relative error against the closed form.
    pub tolerance: f64,
}

impl Default for Prop2Settings {
    fn default() -> Self {
        let case = |n, tau| Prop2Config {
            n,
            tau,
            samples: 1_000_000,
            seed: 0,
            x_distribution: XDistribution::Normal,
        };
        Prop2Settings {
            cases: vec![case(1, 1.0), case(4, 0.25), case(16, 0.5)],
            tolerance: 0.005,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttenuationSettings {
    pub seeds: usize,
    pub frames: usize,
    pub bins: usize,
    pub width_divisor: usize,
    pub batch_size: usize,
    pub corpus_seed: u64,
    pub linear_toy_scale: f64,
}

impl Default for AttenuationSettings {
    fn default() -> Self {
        AttenuationSettings {
            seeds: 20,
            frames: 32,
            bins: 8,
            width_divisor: 8,
            batch_size: 2,
            corpus_seed: 0,
            linear_toy_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub prop1: Prop1Settings,
    pub prop2: Prop2Settings,
    pub attenuation: AttenuationSettings,
}

fn verify_prop1(s: &Prop1Settings) -> CliResult<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let draw = |rows: usize, dim: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect())
            .collect()
    };
    let mut violations = 0usize;
    for _ in 0..s.trials {
        let rows = rng.random_range(1..=s.max_rows.max(1));
        let dim = rng.random_range(1..=s.max_dim.max(1));
        let x = draw(rows, dim, &mut rng);
        let xc = draw(rows, dim, &mut rng);
        if !check_prop1(&x, &xc)?.holds {
            violations += 1;
        }
    }
    let mut max_shift_gap = 0.0f64;
    for _ in 0..s.shift_trials {
        let rows = rng.random_range(1..=s.max_rows.max(1));
        let dim = rng.random_range(1..=s.max_dim.max(1));
        let x = draw(rows, dim, &mut rng);
        let c: Vec<f64> = (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect();
        let xc: Vec<Vec<f64>> = x
            .iter()
            .map(|r| r.iter().zip(&c).map(|(a, b)| a + b).collect())
            .collect();
        let r = check_prop1(&x, &xc)?;
        max_shift_gap = max_shift_gap.max((r.lhs - r.rhs).abs());
    }
    let pass = violations == 0 && max_shift_gap < 1e-10;
    Ok(Report::new(
        "prop1",
        s,
        serde_json::json!({ "violations": violations, "max_shift_gap": max_shift_gap }),
        pass,
    ))
}

fn verify_prop2(s: &Prop2Settings) -> CliResult<Report> {
    let mut results = Vec::new();
    let mut pass = true;
    for case in &s.cases {
        let started = std::time::Instant::now();
        let r = mc_prop2(case)?;
        let ok = r.rel_error <= s.tolerance;
        pass &= ok;
        results.push(serde_json::json!({
            "estimate": r.estimate,
            "closed_form": r.closed_form,
            "rel_error": r.rel_error,
            "seconds": started.elapsed().as_secs_f64(),
            "pass": ok,
        }));
    }
    Ok(Report::new("prop2", s, results, pass))
}

fn verify_attenuation(s: &AttenuationSettings, run: &mut RunDir) -> CliResult<Report> {
    let corpus = synth_dataset(&SynthSpec::toy(s.batch_size, s.frames, s.bins, s.corpus_seed))?;
    let batch = prosody_morph::vcgan::Batch::new(corpus.source, corpus.target)?;
    let cfg = ModelConfig {
        width_divisor: s.width_divisor,
        ..ModelConfig::new(s.frames, s.bins)
    };
    let seeds: Vec<u64> = (0..s.seeds as u64).collect();
    let sweep = attenuation_sweep(&cfg, &batch, &seeds)?;
    let mut csv = String::from("seed,norm_split,norm_unified,ratio\n");
    for (seed, r) in sweep.seeds.iter().zip(&sweep.results) {
        csv.push_str(&format!("{seed},{},{},{}\n", r.norm_split, r.norm_unified, r.ratio));
    }
    run.write("attenuation.csv", &csv)?;
    let toy_z: Vec<f64> = (0..8).map(|k| 0.25 * k as f64 - 0.8).collect();
    let toy = linear_toy_attenuation(&toy_z, s.linear_toy_scale)?;
    let toy_ok = (toy.ratio - s.linear_toy_scale).abs() <= 1e-12 * s.linear_toy_scale.abs().max(1.0);
    println!("attenuation median ratio {:.6}, linear toy ratio {}", sweep.median_ratio, toy.ratio);
    let pass = sweep.median_ratio < 1.0 && toy_ok;
    Ok(Report::new(
        "attenuation",
        s,
        serde_json::json!({
            "median_ratio": sweep.median_ratio,
            "ratios": sweep.results.iter().map(|r| r.ratio).collect::<Vec<_>>(),
            "linear_toy": toy,
        }),
        pass,
    ))
}

pub fn verify_cmd(suite: Suite, config: Option<&Path>, out: &Path, force: bool) -> CliResult<()> {
    let mut run = RunDir::create(out, "verify", force)?;
    let cfg: VerifyConfig = match config {
        Some(path) => parse_json(&run.read(path)?, &path.display().to_string())?,
        None => VerifyConfig::default(),
    };
    let mut failed = Vec::new();
    let mut record = |run: &mut RunDir, report: Report| -> CliResult<()> {
        println!("{}: {}", report.check_name, if report.pass { "pass" } else { "FAIL" });
        if !report.pass {
            failed.push(report.check_name.clone());
        }
        run.write_json(&format!("{}.json", report.check_name), &report)
    };
    if matches!(suite, Suite::Prop1 | Suite::All) {
        record(&mut run, verify_prop1(&cfg.prop1)?)?;
    }
    if matches!(suite, Suite::Prop2 | Suite::All) {
        record(&mut run, verify_prop2(&cfg.prop2)?)?;
    }
    if matches!(suite, Suite::Attenuation | Suite::All) {
        let report = verify_attenuation(&cfg.attenuation, &mut run)?;
        record(&mut run, report)?;
    }
    run.finish(to_value(&cfg), None)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(EXIT_VERIFY, format!("failed checks: {}", failed.join(", "))))
    }
}
