//! Records generator and discriminator passes on one tape.

use rand::Rng;

use super::{Direction, LossWeights, Network, VcganModel};
use crate::error::{Error, Result};
use crate::nn::{Mode, NetRecorder, NodeId, Tape, Tensor};
use crate::synth::Item;

/// Spectrogram `[frames, bins]`, F0 `[frames]` and energy `[frames]` nodes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Side {
    pub s: NodeId,
    pub p: NodeId,
    pub e: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Converted {
    pub out: Side,
    pub m_p: NodeId,
    pub m_e: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Sampler {
    F0,
    Energy,
}

/// Per-item generator loss terms, unweighted.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GenItemTerms {
    pub cyc_f0: NodeId,
    pub momenta: NodeId,
    pub identity_e: NodeId,
    pub cyc_e: NodeId,
    pub adv: NodeId,
}

/// Weighted batch means and their sum.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GenLossNodes {
    pub total: NodeId,
    pub components: [NodeId; 5],
}

type TermPick = fn(&GenItemTerms) -> NodeId;

pub(crate) struct Graph<'a, R: Rng + ?Sized> {
    pub tape: Tape,
    model: &'a VcganModel,
    rng: &'a mut R,
    mode: Mode,
    one: Option<NodeId>,
}

impl<'a, R: Rng + ?Sized> Graph<'a, R> {
    pub fn new(model: &'a VcganModel, rng: &'a mut R, mode: Mode) -> Self {
        Graph {
            tape: Tape::new(),
            model,
            rng,
            mode,
            one: None,
        }
    }

    pub fn input(&mut self, item: &Item) -> Result<Side> {
        let (spec, p) = item;
        let cfg = self.model.config();
        if spec.frames() != cfg.frames || spec.bins() != cfg.bins || p.len() != cfg.frames {
            return Err(Error::ShapeMismatch(format!(
                "model expects {}x{} spectrogram and {} F0 frames, got {}x{} and {}",
                cfg.frames,
                cfg.bins,
                cfg.frames,
                spec.frames(),
                spec.bins(),
                p.len()
            )));
        }
        let s = self
            .tape
            .constant(Tensor::matrix(spec.frames(), spec.bins(), spec.data().to_vec())?);
        let p = self.tape.constant(Tensor::vector(p.values().to_vec()));
        let e = self.tape.row_sum(s)?;
        Ok(Side { s, p, e })
    }

    fn run(&mut self, net: &'a Network, prefix: &str, group: u32, x: NodeId) -> Result<NodeId> {
        NetRecorder {
            tape: &mut self.tape,
            params: &net.params,
            prefix,
            group,
            mode: self.mode,
            rng: &mut *self.rng,
        }
        .run(&net.spec, x)
    }

    fn features(&mut self, parts: &[(NodeId, bool)]) -> Result<NodeId> {
        let k = self.model.config().f0_input_scale;
        let mut chans = Vec::with_capacity(parts.len());
        for &(id, is_spect) in parts {
            chans.push(if is_spect {
                self.tape.transpose(id)?
            } else {
                self.tape.scale(id, k)
            });
        }
        self.tape.concat(&chans)
    }

    /// Momenta from `[S^T; k * p]` through one of the direction's samplers.
    pub fn sampler(&mut self, dir: Direction, which: Sampler, s: NodeId, p: NodeId) -> Result<NodeId> {
        let model = self.model;
        let g = model.generator(dir);
        let (net, name) = match which {
            Sampler::F0 => (&g.f0_sampler, "f0/"),
            Sampler::Energy => (&g.energy_sampler, "energy/"),
        };
        let x = self.features(&[(s, true), (p, false)])?;
        let prefix = format!("{}{name}", dir.gen_prefix());
        let y = self.run(net, &prefix, dir.gen_group(), x)?;
        let y = self.tape.reshape(y, vec![model.config().frames])?;
        Ok(self.tape.scale(y, model.config().momenta_scale))
    }

    /// Warps an F0 or energy contour with the direction's kernels.
    pub fn warp(&mut self, dir: Direction, which: Sampler, c: NodeId, m: NodeId) -> Result<NodeId> {
        let g = self.model.generator(dir);
        let spec = match which {
            Sampler::F0 => g.f0_kernel,
            Sampler::Energy => g.energy_kernel,
        };
        self.tape.warp(c, m, &spec)
    }

    pub fn convert(&mut self, dir: Direction, src: &Side) -> Result<Converted> {
        let m_p = self.sampler(dir, Sampler::F0, src.s, src.p)?;
        let p = self.warp(dir, Sampler::F0, src.p, m_p)?;
        let m_e = self.sampler(dir, Sampler::Energy, src.s, p)?;
        let e = self.warp(dir, Sampler::Energy, src.e, m_e)?;
        let s = self.tape.apply_energy(src.s, e)?;
        Ok(Converted {
            out: Side { s, p, e },
            m_p,
            m_e,
        })
    }

    /// Identity pass: energy momenta from the source's own spectrum and F0.
    pub fn identity_energy(&mut self, dir: Direction, src: &Side) -> Result<(NodeId, NodeId)> {
        let m = self.sampler(dir, Sampler::Energy, src.s, src.p)?;
        let e = self.warp(dir, Sampler::Energy, src.e, m)?;
        Ok((m, e))
    }

    /// Probabilities that `(a, b)` is a (real A-side, generated B-side) pair,
    /// one per sub-network of the direction's discriminator.
    pub fn discriminate(&mut self, dir: Direction, a: &Side, b: &Side) -> Result<Vec<NodeId>> {
        let model = self.model;
        let d = model.discriminator(dir);
        let mut outs = Vec::new();
        if let Some(pitch) = &d.pitch {
            let x = self.features(&[(a.p, false), (b.p, false)])?;
            let prefix = format!("{}pitch/", dir.disc_prefix());
            outs.push(self.run(pitch, &prefix, dir.disc_group(), x)?);
        }
        let x = self.features(&[(a.s, true), (a.p, false), (b.s, true), (b.p, false)])?;
        let name = if d.pitch.is_some() { "spect/" } else { "joint/" };
        let prefix = format!("{}{name}", dir.disc_prefix());
        outs.push(self.run(&d.spect, &prefix, dir.disc_group(), x)?);
        let mut probs = Vec::with_capacity(outs.len());
        for o in outs {
            let v = self.tape.value(o).item();
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::DiscriminatorOutputOutOfRange { value: v });
            }
            probs.push(self.tape.reshape(o, vec![1])?);
        }
        Ok(probs)
    }

    /// Warped F0 of `a`, optionally passed on through the energy sampler and
    /// energy warp, whose output is returned instead.
    pub fn cascade(&mut self, dir: Direction, a: &Side, through_energy: bool) -> Result<NodeId> {
        let m_p = self.sampler(dir, Sampler::F0, a.s, a.p)?;
        let p = self.warp(dir, Sampler::F0, a.p, m_p)?;
        if !through_energy {
            return Ok(p);
        }
        let m_e = self.sampler(dir, Sampler::Energy, a.s, p)?;
        self.warp(dir, Sampler::Energy, a.e, m_e)
    }

    /// `log(1 - D_pitch(p_a, x))` on the direction's pitch discriminator.
    pub fn pitch_fake_log(&mut self, dir: Direction, p_a: NodeId, x: NodeId) -> Result<NodeId> {
        let model = self.model;
        let pitch = model
            .discriminator(dir)
            .pitch
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("no pitch discriminator".into()))?;
        let feats = self.features(&[(p_a, false), (x, false)])?;
        let prefix = format!("{}pitch/", dir.disc_prefix());
        let d = self.run(pitch, &prefix, dir.disc_group(), feats)?;
        let d = self.tape.reshape(d, vec![1])?;
        let one = self.one();
        let flip = self.tape.linear(vec![(one, 1.0), (d, -1.0)])?;
        Ok(self.tape.ln(flip))
    }

    fn one(&mut self) -> NodeId {
        *self.one.get_or_insert_with(|| self.tape.constant(Tensor::scalar(1.0)))
    }

    fn l1(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.tape.sub(a, b)?;
        let d = self.tape.abs(d);
        Ok(self.tape.sum(d))
    }

    fn smoothness(&mut self, m: NodeId) -> Result<NodeId> {
        let d = self.tape.diff(m)?;
        let d = self.tape.square(d);
        Ok(self.tape.sum(d))
    }

    fn mean_of(&mut self, nodes: &[NodeId]) -> Result<NodeId> {
        let w = 1.0 / nodes.len() as f64;
        self.tape.linear(nodes.iter().map(|&n| (n, w)).collect())
    }

    /// Unweighted generator terms for one source item `a`, given its primary
    /// conversion, a cyclic conversion of that output, and the identity pass.
    pub fn generator_terms(
        &mut self,
        dir: Direction,
        a: &Side,
        primary: &Converted,
        cyclic: &Converted,
        identity: (NodeId, NodeId),
    ) -> Result<GenItemTerms> {
        let cyc_f0 = self.l1(a.p, cyclic.out.p)?;
        let mut smooth = Vec::with_capacity(5);
        for m in [primary.m_p, primary.m_e, cyclic.m_p, cyclic.m_e, identity.0] {
            smooth.push(self.smoothness(m)?);
        }
        let momenta = self.tape.linear(smooth.into_iter().map(|n| (n, 1.0)).collect())?;
        let identity_e = self.l1(a.e, identity.1)?;
        let cyc_e = self.l1(a.e, cyclic.out.e)?;
        let probs = self.discriminate(dir, a, &primary.out)?;
        let logs: Vec<NodeId> = probs.into_iter().map(|p| self.tape.ln(p)).collect();
        let adv = self.mean_of(&logs)?;
        Ok(GenItemTerms {
            cyc_f0,
            momenta,
            identity_e,
            cyc_e,
            adv,
        })
    }

    pub fn generator_loss(&mut self, items: &[GenItemTerms], w: &LossWeights) -> Result<GenLossNodes> {
        let n = items.len() as f64;
        let pick: [(TermPick, f64); 5] = [
            (|t| t.cyc_f0, w.lambda_c1),
            (|t| t.momenta, w.lambda_m),
            (|t| t.identity_e, w.lambda_i),
            (|t| t.cyc_e, w.lambda_c2),
            (|t| t.adv, w.lambda_d),
        ];
        let mut components = [items[0].cyc_f0; 5];
        for (k, (f, lambda)) in pick.iter().enumerate() {
            components[k] = self.tape.linear(items.iter().map(|t| (f(t), lambda / n)).collect())?;
        }
        let total = self.tape.linear(components.iter().map(|&c| (c, 1.0)).collect())?;
        Ok(GenLossNodes { total, components })
    }

    /// `-log D(real A, generated B) - log(1 - D(generated A, real B))` for one
    /// item pair, averaged over the discriminator's sub-networks.
    pub fn discriminator_term(
        &mut self,
        dir: Direction,
        real_a: &Side,
        gen_b: &Side,
        gen_a: &Side,
        real_b: &Side,
    ) -> Result<NodeId> {
        let pos = self.discriminate(dir, real_a, gen_b)?;
        let neg = self.discriminate(dir, gen_a, real_b)?;
        let one = self.one();
        let mut terms = Vec::with_capacity(2 * pos.len());
        let k = pos.len() as f64;
        for (p, q) in pos.into_iter().zip(neg) {
            let lp = self.tape.ln(p);
            let flip = self.tape.linear(vec![(one, 1.0), (q, -1.0)])?;
            let lq = self.tape.ln(flip);
            terms.push((lp, -1.0 / k));
            terms.push((lq, -1.0 / k));
        }
        self.tape.linear(terms)
    }
}
