use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::loss::{components_of, Batch, TERM_NAMES};
use super::{DiscriminatorMode, Direction, LossWeights, VcganModel};
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::nn::{adam_step, Gradients, Mode, NodeId, ParamTree, Tensor};
use crate::synth::{Item, PairedCorpus};
use crate::verify::check_prop1;

pub const HISTORY_CSV_HEADER: &str =
    "update,direction,loss_gen,loss_disc,term_cyc_f0,term_momenta,term_identity_e,term_cyc_e,term_adv";

/// Missing keys take their [`Default`] values; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub discriminator_mode: DiscriminatorMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::NEUTRAL_ANGRY,
            lr_gen: 1e-5,
            lr_disc: 1e-7,
            batch_size: 2,
            epochs: 1,
            seed: 0,
            discriminator_mode: DiscriminatorMode::Split,
        }
    }
}

impl TrainConfig {
    /// Learning rates large enough to move desk-scale models on the toy corpus.
    pub fn toy() -> Self {
        TrainConfig {
            lr_gen: 1e-3,
            lr_disc: 1e-3,
            epochs: 250,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.lr_gen) || !pos(self.lr_disc) {
            return Err(Error::InvalidConfig("learning rates must be finite and > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of optimizer updates one epoch over `corpus` takes.
    pub fn updates_per_epoch(&self, corpus: &PairedCorpus) -> usize {
        corpus.source.len().min(corpus.target.len()).div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update: usize,
    pub direction: Direction,
    pub loss_gen: f64,
    pub loss_disc: f64,
    /// Weighted generator terms keyed by their history column names.
    pub terms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<UpdateRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn direction(&self, dir: Direction) -> impl Iterator<Item = &UpdateRecord> {
        self.records.iter().filter(move |r| r.direction == dir)
    }
}

pub fn history_to_csv(h: &TrainHistory) -> String {
    let mut out = String::from(HISTORY_CSV_HEADER);
    out.push('\n');
    for r in &h.records {
        let _ = write!(
            out,
            "{},{},{},{}",
            r.update,
            r.direction.as_str(),
            fmt_f64(r.loss_gen),
            fmt_f64(r.loss_disc)
        );
        for name in TERM_NAMES {
            let _ = write!(out, ",{}", fmt_f64(r.terms[name]));
        }
        out.push('\n');
    }
    out
}

struct DirNodes {
    gen: super::graph::GenLossNodes,
    disc: NodeId,
    cyclic_f0: Vec<NodeId>,
}

fn apply(tree: &mut ParamTree, grads: &Gradients, prefix: &str, lr: f64) -> Result<()> {
    let g: BTreeMap<String, Tensor> = grads.params_with_prefix(prefix);
    if let Some((name, _)) = g.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("{prefix}{name}")));
    }
    adam_step(tree, &g, lr)
}

/// Alternating adversarial training over shuffled, unpaired mini-batches.
///
/// Every mini-batch records both directions' primary, cyclic and identity
/// passes in one graph, takes the four gradients (each generator against
/// its own loss, each discriminator against its own loss) from that graph,
/// and then applies Adam to all four parameter sets.
pub fn train(model: &mut VcganModel, corpus: &PairedCorpus, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if cfg.discriminator_mode != model.discriminator_mode() {
        return Err(Error::InvalidConfig(format!(
            "training config asks for {:?} discriminators but the model has {:?}",
            cfg.discriminator_mode,
            model.discriminator_mode()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory::default();
    let n = corpus.source.len().min(corpus.target.len());
    let mut update = 0;
    for _ in 0..cfg.epochs {
        let mut ia: Vec<usize> = (0..corpus.source.len()).collect();
        let mut ib: Vec<usize> = (0..corpus.target.len()).collect();
        ia.shuffle(&mut rng);
        ib.shuffle(&mut rng);
        for start in (0..n).step_by(cfg.batch_size) {
            let end = (start + cfg.batch_size).min(n);
            let pick = |list: &[Item], idx: &[usize]| idx[start..end].iter().map(|&i| list[i].clone()).collect();
            let batch = Batch::new(pick(&corpus.source, &ia), pick(&corpus.target, &ib))?;
            step(model, &batch, cfg, update, &mut rng, &mut history)?;
            update += 1;
        }
    }
    Ok(history)
}

fn step(
    model: &mut VcganModel,
    batch: &Batch,
    cfg: &TrainConfig,
    update: usize,
    rng: &mut ChaCha8Rng,
    history: &mut TrainHistory,
) -> Result<()> {
    let dirs = [Direction::Forward, Direction::Backward];
    let mut g = Graph::new(model, rng, Mode::Train);
    let mut gen_terms = [Vec::new(), Vec::new()];
    let mut disc_terms = [Vec::new(), Vec::new()];
    let mut cyclic_f0 = [Vec::new(), Vec::new()];
    let mut sources = [Vec::new(), Vec::new()];
    for (item_a, item_b) in batch.a.iter().zip(&batch.b) {
        let a = g.input(item_a)?;
        let b = g.input(item_b)?;
        let prim_a = g.convert(Direction::Forward, &a)?;
        let prim_b = g.convert(Direction::Backward, &b)?;
        let sides = [(a, prim_a, b, prim_b), (b, prim_b, a, prim_a)];
        for (k, dir) in dirs.into_iter().enumerate() {
            let (src, prim, tgt, other) = &sides[k];
            let cyclic = g.convert(dir.other(), &prim.out)?;
            let identity = g.identity_energy(dir, src)?;
            gen_terms[k].push(g.generator_terms(dir, src, prim, &cyclic, identity)?);
            disc_terms[k].push(g.discriminator_term(dir, src, &prim.out, &other.out, tgt)?);
            cyclic_f0[k].push(cyclic.out.p);
            sources[k].push(src.p);
        }
    }
    let mut nodes = Vec::with_capacity(2);
    for k in 0..2 {
        let gen = g.generator_loss(&gen_terms[k], &cfg.weights)?;
        let w = 1.0 / disc_terms[k].len() as f64;
        let disc = g.tape.linear(disc_terms[k].iter().map(|&t| (t, w)).collect())?;
        nodes.push(DirNodes {
            gen,
            disc,
            cyclic_f0: std::mem::take(&mut cyclic_f0[k]),
        });
    }

    for (k, dir) in dirs.into_iter().enumerate() {
        let d = &nodes[k];
        let terms = components_of(&g, &d.gen);
        let loss_gen = g.tape.value(d.gen.total).item();
        let loss_disc = g.tape.value(d.disc).item();
        let tag = dir.as_str();
        for (name, v) in terms.iter().map(|(k, v)| (k.as_str(), *v)).chain([("loss_gen", loss_gen), ("loss_disc", loss_disc)]) {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    update,
                    component: format!("{tag}/{name}"),
                });
            }
        }
        if cfg.weights.lambda_c1 > 0.0 {
            let rows = |ids: &[NodeId]| -> Vec<Vec<f64>> { ids.iter().map(|&i| g.tape.value(i).data().to_vec()).collect() };
            let p1 = check_prop1(&rows(&sources[k]), &rows(&d.cyclic_f0))?;
            debug_assert!(p1.holds, "cyclic F0 loss below its first-moment bound: {p1:?}");
        }
        history.records.push(UpdateRecord {
            update,
            direction: dir,
            loss_gen,
            loss_disc,
            terms,
        });
    }

    let roots: Vec<(NodeId, u32)> = vec![
        (nodes[0].gen.total, Direction::Forward.gen_group()),
        (nodes[1].gen.total, Direction::Backward.gen_group()),
        (nodes[0].disc, Direction::Forward.disc_group()),
        (nodes[1].disc, Direction::Backward.disc_group()),
    ];
    let grads = g.tape.backward_many(&roots)?;
    drop(g);

    for (k, dir) in dirs.into_iter().enumerate() {
        let gp = dir.gen_prefix();
        let gen = model.generator_mut(dir);
        apply(&mut gen.f0_sampler.params, &grads[k], &format!("{gp}f0/"), cfg.lr_gen)?;
        apply(&mut gen.energy_sampler.params, &grads[k], &format!("{gp}energy/"), cfg.lr_gen)?;
        let dp = dir.disc_prefix();
        let disc = model.discriminator_mut(dir);
        match &mut disc.pitch {
            Some(p) => {
                apply(&mut p.params, &grads[2 + k], &format!("{dp}pitch/"), cfg.lr_disc)?;
                apply(&mut disc.spect.params, &grads[2 + k], &format!("{dp}spect/"), cfg.lr_disc)?;
            }
            None => apply(&mut disc.spect.params, &grads[2 + k], &format!("{dp}joint/"), cfg.lr_disc)?,
        }
    }
    Ok(())
}
