use std::collections::BTreeMap;

use rand::Rng;

use super::graph::{Converted, Graph, Sampler};
use super::{Direction, LossWeights, VcganModel};
use crate::contour::{Contour, Spectrogram};
use crate::error::{Error, Result};
use crate::nn::{Gradients, Mode, Tensor};
use crate::synth::Item;
use crate::warp::Momenta;

/// Names of the generator loss terms, in history column order.
pub const TERM_NAMES: [&str; 5] = ["term_cyc_f0", "term_momenta", "term_identity_e", "term_cyc_e", "term_adv"];

/// Weighted loss terms keyed by name.
pub type LossComponents = BTreeMap<String, f64>;

/// Equal numbers of class-A and class-B items, drawn independently.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub a: Vec<Item>,
    pub b: Vec<Item>,
}

impl Batch {
    pub fn new(a: Vec<Item>, b: Vec<Item>) -> Result<Self> {
        if a.is_empty() || a.len() != b.len() {
            return Err(Error::ShapeMismatch(format!(
                "batch needs equal non-zero item counts, got {} and {}",
                a.len(),
                b.len()
            )));
        }
        Ok(Batch { a, b })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// (source-domain, target-domain) items for a direction.
    pub fn roles(&self, dir: Direction) -> (&[Item], &[Item]) {
        match dir {
            Direction::Forward => (&self.a, &self.b),
            Direction::Backward => (&self.b, &self.a),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversion {
    pub p_out: Contour,
    pub e_out: Contour,
    pub s_out: Spectrogram,
    pub m_p: Momenta,
    pub m_e: Momenta,
}

fn sample<R: Rng + ?Sized>(
    model: &VcganModel,
    dir: Direction,
    which: Sampler,
    s: &Spectrogram,
    p: &Contour,
    rng: &mut R,
) -> Result<Momenta> {
    let mut g = Graph::new(model, rng, Mode::Eval);
    let side = g.input(&(s.clone(), p.clone()))?;
    let m = g.sampler(dir, which, side.s, side.p)?;
    Momenta::new(g.tape.value(m).data().to_vec())
}

/// F0 momenta for a source spectrogram and F0 contour, with a fresh dropout mask.
pub fn sample_f0_momenta<R: Rng + ?Sized>(
    model: &VcganModel,
    dir: Direction,
    s_src: &Spectrogram,
    p_src: &Contour,
    rng: &mut R,
) -> Result<Momenta> {
    sample(model, dir, Sampler::F0, s_src, p_src, rng)
}

/// Energy momenta for a source spectrogram and the converted F0 contour.
pub fn sample_energy_momenta<R: Rng + ?Sized>(
    model: &VcganModel,
    dir: Direction,
    s_src: &Spectrogram,
    p_converted: &Contour,
    rng: &mut R,
) -> Result<Momenta> {
    sample(model, dir, Sampler::Energy, s_src, p_converted, rng)
}

/// Full conversion pipeline: F0 momenta, F0 warp, energy momenta from the
/// converted F0, energy warp, spectrogram rescaling.
pub fn convert<R: Rng + ?Sized>(
    model: &VcganModel,
    dir: Direction,
    s_src: &Spectrogram,
    p_src: &Contour,
    rng: &mut R,
) -> Result<Conversion> {
    let mut g = Graph::new(model, rng, Mode::Eval);
    let side = g.input(&(s_src.clone(), p_src.clone()))?;
    let c = g.convert(dir, &side)?;
    let t = &g.tape;
    let e: Vec<f64> = t.value(c.out.e).data().to_vec();
    if let Some((frame, &value)) = e.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidEnergyTarget { frame, value });
    }
    Ok(Conversion {
        p_out: Contour::f0(t.value(c.out.p).data().to_vec())?,
        e_out: Contour::energy(e)?,
        s_out: Spectrogram::with_frame_period(
            s_src.frames(),
            s_src.bins(),
            t.value(c.out.s).data().to_vec(),
            s_src.frame_period_ms(),
        )?,
        m_p: Momenta::new(t.value(c.m_p).data().to_vec())?,
        m_e: Momenta::new(t.value(c.m_e).data().to_vec())?,
    })
}

/// Records the generator loss of `dir`. Dropout masks are drawn per item in
/// the order primary, cyclic (through the other generator), identity.
fn record_generator<R: Rng + ?Sized>(
    g: &mut Graph<'_, R>,
    dir: Direction,
    batch: &Batch,
    w: &LossWeights,
) -> Result<super::graph::GenLossNodes> {
    let (src, _) = batch.roles(dir);
    let mut terms = Vec::with_capacity(src.len());
    for item in src {
        let a = g.input(item)?;
        let primary = g.convert(dir, &a)?;
        let cyclic = g.convert(dir.other(), &primary.out)?;
        let identity = g.identity_energy(dir, &a)?;
        terms.push(g.generator_terms(dir, &a, &primary, &cyclic, identity)?);
    }
    g.generator_loss(&terms, w)
}

/// Records the discriminator loss of `dir`. Masks are drawn per item for the
/// primary conversion of the source item, then of the target item.
fn record_discriminator<R: Rng + ?Sized>(
    g: &mut Graph<'_, R>,
    dir: Direction,
    batch: &Batch,
) -> Result<crate::nn::NodeId> {
    let (src, tgt) = batch.roles(dir);
    let mut terms = Vec::with_capacity(src.len());
    for (ia, ib) in src.iter().zip(tgt) {
        let a = g.input(ia)?;
        let b = g.input(ib)?;
        let fa: Converted = g.convert(dir, &a)?;
        let fb: Converted = g.convert(dir.other(), &b)?;
        terms.push(g.discriminator_term(dir, &a, &fa.out, &fb.out, &b)?);
    }
    let n = terms.len() as f64;
    g.tape.linear(terms.into_iter().map(|t| (t, 1.0 / n)).collect())
}

pub(crate) fn components_of<R: Rng + ?Sized>(
    g: &Graph<'_, R>,
    nodes: &super::graph::GenLossNodes,
) -> LossComponents {
    TERM_NAMES
        .iter()
        .zip(nodes.components)
        .map(|(k, id)| (k.to_string(), g.tape.value(id).item()))
        .collect()
}

fn generator_impl<R: Rng + ?Sized>(
    model: &VcganModel,
    dir: Direction,
    batch: &Batch,
    weights: &LossWeights,
    rng: &mut R,
    want_grad: bool,
) -> Result<(f64, LossComponents, Option<Gradients>)> {
    weights.validate()?;
    let mut g = Graph::new(model, rng, Mode::Train);
    let nodes = record_generator(&mut g, dir, batch, weights)?;
    let comps = components_of(&g, &nodes);
    let value = g.tape.value(nodes.total).item();
    let grads = if want_grad {
        let mut v = g.tape.backward_many(&[(nodes.total, dir.gen_group())])?;
        v.pop()
    } else {
        None
    };
    Ok((value, comps, grads))
}

/// Generator objective of `dir` on a batch, with its weighted terms.
pub fn generator_loss<R: Rng + ?Sized>(
    model: &VcganModel,
    dir: Direction,
    batch: &Batch,
    weights: &LossWeights,
    rng: &mut R,
) -> Result<(f64, LossComponents)> {
    let (v, c, _) = generator_impl(model, dir, batch, weights, rng, false)?;
    Ok((v, c))
}

/// As [`generator_loss`], plus gradients with respect to the direction's own
/// generator, keyed `f0/...` and `energy/...`.
pub fn generator_loss_and_grad<R: Rng + ?Sized>(
    model: &VcganModel,
    dir: Direction,
    batch: &Batch,
    weights: &LossWeights,
    rng: &mut R,
) -> Result<(f64, LossComponents, BTreeMap<String, Tensor>)> {
    let (v, c, g) = generator_impl(model, dir, batch, weights, rng, true)?;
    let grads = g.expect("requested").params_with_prefix(dir.gen_prefix());
    Ok((v, c, grads))
}

fn discriminator_impl<R: Rng + ?Sized>(
    model: &VcganModel,
    dir: Direction,
    batch: &Batch,
    rng: &mut R,
    want_grad: bool,
) -> Result<(f64, LossComponents, Option<Gradients>)> {
    let mut g = Graph::new(model, rng, Mode::Train);
    let root = record_discriminator(&mut g, dir, batch)?;
    let value = g.tape.value(root).item();
    let comps = LossComponents::from([("loss_disc".to_string(), value)]);
    let grads = if want_grad {
        g.tape.backward_many(&[(root, dir.disc_group())])?.pop()
    } else {
        None
    };
    Ok((value, comps, grads))
}

/// Pair-density discriminator objective of `dir` on a batch.
pub fn discriminator_loss<R: Rng + ?Sized>(
    model: &VcganModel,
    dir: Direction,
    batch: &Batch,
    rng: &mut R,
) -> Result<(f64, LossComponents)> {
    let (v, c, _) = discriminator_impl(model, dir, batch, rng, false)?;
    Ok((v, c))
}

/// As [`discriminator_loss`], plus gradients with respect to the
/// direction's discriminator, keyed `pitch/...`, `spect/...` or `joint/...`.
pub fn discriminator_loss_and_grad<R: Rng + ?Sized>(
    model: &VcganModel,
    dir: Direction,
    batch: &Batch,
    rng: &mut R,
) -> Result<(f64, LossComponents, BTreeMap<String, Tensor>)> {
    let (v, c, g) = discriminator_impl(model, dir, batch, rng, true)?;
    let grads = g.expect("requested").params_with_prefix(dir.disc_prefix());
    Ok((v, c, grads))
}
