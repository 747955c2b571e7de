//! Cloud-side training through the discrete strategy.
//!
//! The forward pass always uses the hard mixed-precision weights chosen by
//! Γ and Λ. The backward pass routes gradients through a relaxed tier
//! assignment built from soft ranks of the sensitivities.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbones::{
    Architecture, BackboneConfig, FrozenModel, LayerWeight, LayerWeights, Positions, QuantMap,
    ITEM_EMB,
};
use crate::data::{sample_negatives, SplitSpec};
use crate::error::{Error, Result};
use crate::quant::{self, BitWidth};
use crate::saliency::{Saliency, SaliencyConfig};
use crate::strategy::{
    boost_code, compress_code, refine_lambda, tier_gamma, LayerAdjust, Refined, StrategyCode,
    TieringConfig,
};
use crate::tensor::{lit, Graph, ParamVars, ParameterSet, Scalar, Tape, Tensor};

/// How the trunk is quantized during training and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Method {
    /// Personalized channel-wise mixed precision.
    Chord,
    /// Every channel at the same bit-width.
    Uniform { bits: u8 },
    /// No trunk quantization.
    FullPrecision,
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Self::Chord => "chord".into(),
            Self::Uniform { bits } => format!("quant-{}bit", bits),
            Self::FullPrecision => "full-precision".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Sampled negatives per positive.
    pub negatives: usize,
    /// Temperature of the relaxed tier assignment.
    pub tau: f64,
    /// Temperature of the pairwise soft rank.
    pub rank_tau: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    /// Per-tensor activation fake-quant on every quantized layer input.
    pub act_bits: Option<u8>,
    /// Most recent positions per sequence that receive a loss.
    pub max_positions: usize,
    /// Evaluate every this many epochs; 0 disables evaluation while training.
    pub eval_every: usize,
    /// Run per-user gradient computation on the rayon pool.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            batch_size: 32,
            epochs: 20,
            negatives: 100,
            tau: 0.1,
            rank_tau: 1.0,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            act_bits: None,
            max_positions: 50,
            eval_every: 0,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau <= 0.0 || self.rank_tau.is_nan() || self.rank_tau <= 0.0 {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if self.lr.is_nan()
            || self.lr <= 0.0
            || self.batch_size == 0
            || self.negatives == 0
            || self.max_positions == 0
        {
            return Err(Error::Config(
                "lr, batch_size, negatives and max_positions must be positive".into(),
            ));
        }
        if let Some(b) = self.act_bits {
            BitWidth::new(b)?;
        }
        Ok(())
    }

    pub fn act_width(&self) -> Result<Option<BitWidth>> {
        self.act_bits.map(BitWidth::new).transpose()
    }
}

/// Backbone, profiler and hypernets, plus the tiering rule they serve.
#[derive(Clone, Debug)]
pub struct ChordModel<T> {
    pub backbone: FrozenModel<T>,
    pub saliency: Saliency<T>,
    pub tiering: TieringConfig,
}

impl<T: Scalar> ChordModel<T> {
    pub fn build(
        backbone: &BackboneConfig,
        saliency: &SaliencyConfig,
        tiering: &TieringConfig,
        seed: u64,
    ) -> Result<Self> {
        tiering.validate()?;
        let bb = FrozenModel::build(backbone, seed)?;
        let sal = Saliency::build(
            saliency,
            bb.registry(),
            backbone.embedding_dim,
            seed ^ 0xA5A5_0F0F_u64,
        )?;
        Ok(Self {
            backbone: bb,
            saliency: sal,
            tiering: tiering.clone(),
        })
    }

    /// Every parameter (frozen trunk included), for graph binding.
    pub fn all_params(&self) -> ParameterSet<T> {
        let mut p = self.backbone.trunk().clone();
        p.extend(self.backbone.trainable().clone())
            .expect("disjoint names");
        p.extend(self.saliency.params().clone())
            .expect("disjoint names");
        p
    }

    pub fn bind<G: Graph<T>>(&self, g: &G) -> ParamVars<G::Node> {
        let mut v = self.backbone.bind(g);
        v.extend(self.saliency.params().bind(g));
        v
    }

    /// Hard strategy for sensitivities already computed.
    pub fn strategy_from(&self, weighted: &[Vec<f64>], layer: &[f64]) -> Result<Refined> {
        let reg = self.backbone.registry();
        let code = tier_gamma(weighted, &self.tiering, reg.hash())?;
        refine_lambda(&code, layer, &self.tiering, reg)
    }

    /// Apply an optimizer step to the trainable parameters.
    fn apply_update(
        &mut self,
        opt: &mut Optimizer<T>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        opt.step(self.backbone.trainable_mut(), grads)?;
        opt.step(self.saliency.params_mut(), grads)
    }
}

/// Per-code fake-quantized copies of every registry weight.
#[derive(Clone, Debug)]
pub struct FakeQuantCache<T> {
    layers: Vec<[Arc<Tensor<T>>; 4]>,
}

impl<T: Scalar> FakeQuantCache<T> {
    pub fn new(model: &FrozenModel<T>, bits: [u8; 4]) -> Result<Self> {
        let mut layers = Vec::with_capacity(model.registry().len());
        for (i, info) in model.registry().layers().iter().enumerate() {
            let w = model.layer_weight(i);
            let flat = w.reshape(&[info.out_channels, info.elements_per_channel])?;
            let mut copies = Vec::with_capacity(4);
            for &b in &bits {
                let params =
                    quant::calibrate_channels(&flat, &vec![BitWidth::new(b)?; info.out_channels])?;
                copies.push(Arc::new(quant::fake_quant_channels(&flat, &params)?));
            }
            layers.push(copies.try_into().expect("four codes"));
        }
        Ok(Self { layers })
    }

    /// Hard weights for a strategy code, `[out, elements]` per layer.
    pub fn hard_weights(&self, code: &StrategyCode) -> Vec<Arc<Tensor<T>>> {
        code.layers
            .iter()
            .zip(&self.layers)
            .map(|(codes, copies)| {
                let per = copies[0].shape()[1];
                let mut data = Vec::with_capacity(codes.len() * per);
                for (j, &c) in codes.iter().enumerate() {
                    data.extend_from_slice(copies[c as usize].row(j));
                }
                Arc::new(Tensor::new(vec![codes.len(), per], data).expect("shape"))
            })
            .collect()
    }
}

/// Whether the backward surrogate is also used forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixtureMode {
    /// Hard forward, relaxed backward.
    Ste,
    /// Relaxed forward and backward (the smooth objective the estimator follows).
    Relaxed,
}

/// Tier index used by the mixture: 0 for code 0, 1 for code 1, 2 for code 3.
fn tier_of(code: u8) -> usize {
    match code {
        0 => 0,
        1 => 1,
        _ => 2,
    }
}

const TIER_CODES: [u8; 3] = [0, 1, 3];

/// Soft rank in (0, 1) of each entry of a `[n]` node, highest value → near 1.
pub fn soft_rank<T: Scalar, G: Graph<T>>(
    g: &G,
    a: &G::Node,
    n: usize,
    rank_tau: f64,
) -> Result<G::Node> {
    let normed = g.layer_norm(&g.reshape(a, &[1, n])?)?;
    let col = g.reshape(&normed, &[n, 1])?;
    let spread = g.matmul(&col, &g.constant(Tensor::full(&[1, n], T::one())))?;
    let diff = g.sub(&spread, &g.transpose(&spread)?)?;
    let p = g.sigmoid(&g.scale(&diff, 1.0 / rank_tau)?)?;
    g.mean(&p, Some(1))
}

/// `softmax(-|rank - center| / tau)` over the given centers, `[n, centers]`.
fn soft_assign<T: Scalar, G: Graph<T>>(
    g: &G,
    rank: &G::Node,
    n: usize,
    centers: &[f64],
    tau: f64,
) -> Result<G::Node> {
    let c = centers.len();
    let col = g.reshape(rank, &[n, 1])?;
    let spread = g.matmul(&col, &g.constant(Tensor::full(&[1, c], T::one())))?;
    let centers = g.constant(Tensor::new(
        vec![1, c],
        centers.iter().map(|&x| lit(x)).collect(),
    )?);
    let dist = g.abs(&g.sub(&spread, &centers)?)?;
    g.softmax(&g.scale(&dist, -1.0 / tau)?)
}

/// `hard + (soft - stop_gradient(soft))`, or `soft` in relaxed mode.
fn straight_through<T: Scalar, G: Graph<T>>(
    g: &G,
    hard: Tensor<T>,
    soft: &G::Node,
    mode: MixtureMode,
) -> Result<G::Node> {
    match mode {
        MixtureMode::Relaxed => Ok(soft.clone()),
        MixtureMode::Ste => {
            let delta = g.sub(soft, &g.stop_gradient(soft)?)?;
            g.add(&g.constant(hard), &delta)
        }
    }
}

fn one_hot<T: Scalar>(rows: &[usize], cols: usize) -> Tensor<T> {
    Tensor::from_fn(&[rows.len(), cols], |i| {
        if rows[i / cols] == i % cols {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Layer adjustment assignments `[layers, 3]` (compress, keep, boost).
pub fn layer_states<T: Scalar, G: Graph<T>>(
    g: &G,
    alpha_l: &G::Node,
    refined: &Refined,
    tau: f64,
    rank_tau: f64,
    mode: MixtureMode,
) -> Result<G::Node> {
    let n = refined.adjust.len();
    let nf = n as f64;
    let nb = refined.count(LayerAdjust::Boost) as f64;
    let nc = refined.count(LayerAdjust::Compress) as f64;
    let centers = [
        if nc > 0.0 { nc / (2.0 * nf) } else { -1.0 / nf },
        (nf - nb + nc) / (2.0 * nf),
        if nb > 0.0 {
            1.0 - nb / (2.0 * nf)
        } else {
            1.0 + 1.0 / nf
        },
    ];
    let rank = soft_rank(g, alpha_l, n, rank_tau)?;
    let soft = soft_assign(g, &rank, n, &centers, tau)?;
    let hard_idx: Vec<usize> = refined
        .adjust
        .iter()
        .map(|a| match a {
            LayerAdjust::Compress => 0,
            LayerAdjust::Keep => 1,
            LayerAdjust::Boost => 2,
        })
        .collect();
    straight_through(g, one_hot(&hard_idx, 3), &soft, mode)
}

/// `[3 states, 3 tiers × 4 codes]` routing from (state, tier) to final code.
fn routing<T: Scalar>() -> Tensor<T> {
    Tensor::from_fn(&[3, 12], |i| {
        let (state, col) = (i / 12, i % 12);
        let (tier, code) = (col / 4, col % 4);
        let base = TIER_CODES[tier];
        let fin = match state {
            0 => compress_code(base),
            1 => base,
            _ => boost_code(base),
        };
        if fin as usize == code {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Effective weight `[out, elements]` for one layer: the hard mixed-precision
/// weight forward, the relaxed tier mixture backward.
#[allow(clippy::too_many_arguments)]
pub fn ste_mixture_quantize<T: Scalar, G: Graph<T>>(
    g: &G,
    copies: &[Arc<Tensor<T>>; 4],
    alpha_w: &G::Node,
    gamma_codes: &[u8],
    layer_state: &G::Node,
    beta_count: usize,
    tau: f64,
    rank_tau: f64,
    mode: MixtureMode,
) -> Result<G::Node> {
    let n = gamma_codes.len();
    let nf = n as f64;
    let k = beta_count as f64;
    let centers = [
        (nf - 2.0 * k).max(0.0) / (2.0 * nf),
        1.0 - 1.5 * k / nf,
        1.0 - k / (2.0 * nf),
    ];
    let rank = soft_rank(g, alpha_w, n, rank_tau)?;
    let soft = soft_assign(g, &rank, n, &centers, tau)?;
    let hard: Vec<usize> = gamma_codes.iter().map(|&c| tier_of(c)).collect();
    let tiers = straight_through(g, one_hot(&hard, 3), &soft, mode)?;
    let m = g.reshape(&g.matmul(layer_state, &g.constant(routing()))?, &[3, 4])?;
    let assign = g.matmul(&tiers, &m)?;
    let mut out: Option<G::Node> = None;
    for (c, copy) in copies.iter().enumerate() {
        let pick = g.constant(Tensor::from_fn(&[4, 1], |i| {
            if i == c {
                T::one()
            } else {
                T::zero()
            }
        }));
        let col = g.matmul(&assign, &pick)?;
        let term = g.mul(&g.shared(copy), &col)?;
        out = Some(match out {
            None => term,
            Some(acc) => g.add(&acc, &term)?,
        });
    }
    Ok(out.expect("four codes"))
}

/// Cross-entropy of the positive (column 0) against sampled negatives,
/// averaged over rows. `pos: [m]`, `neg: [m, N]`.
pub fn loss_sampled_softmax<T: Scalar, G: Graph<T>>(
    g: &G,
    pos: &G::Node,
    neg: &G::Node,
) -> Result<G::Node> {
    let shape = g.value(neg).shape().to_vec();
    if shape.len() != 2 || shape[1] == 0 {
        return Err(Error::Contract(
            "sampled softmax needs at least one negative".into(),
        ));
    }
    let m = shape[0];
    let logits = g.concat(&[&g.reshape(pos, &[m, 1])?, neg], 1)?;
    let lsm = g.log_softmax(&logits)?;
    let first = g.constant(Tensor::from_fn(&[shape[1] + 1, 1], |i| {
        if i == 0 {
            T::one()
        } else {
            T::zero()
        }
    }));
    g.scale(&g.mean(&g.matmul(&lsm, &first)?, None)?, -1.0)
}

/// One user's training sample for an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct UserSample {
    pub user: usize,
    /// Backbone input items.
    pub input: Vec<usize>,
    /// Next item at each input position.
    pub targets: Vec<usize>,
    /// First input position that receives a loss.
    pub loss_from: usize,
    /// Profiler window (items strictly before every loss target).
    pub window: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Build a sample from a training sequence. The profiler window ends at a
/// cut drawn from the first `window_len` positions (or at the start of the
/// loss span for long sequences); only targets after the cut receive a loss,
/// so the strategy never sees the items it is asked to predict.
#[allow(clippy::too_many_arguments)]
pub fn make_sample(
    user: usize,
    seq: &[usize],
    num_items: usize,
    cfg: &TrainConfig,
    max_positions: usize,
    window_len: usize,
    with_window: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Option<UserSample>> {
    let m = seq.len();
    if m < 2 {
        return Ok(None);
    }
    let start = (m - 1).saturating_sub(max_positions);
    let input = seq[start..m - 1].to_vec();
    let targets = seq[start + 1..m].to_vec();
    let (loss_from, window) = if with_window {
        let lo = start.max(1);
        let hi = (m - 1).min(lo.max(window_len));
        let cut = rng.gen_range(lo..=hi);
        (
            cut.saturating_sub(start + 1),
            seq[cut.saturating_sub(window_len)..cut].to_vec(),
        )
    } else {
        (0, Vec::new())
    };
    let exclude: HashSet<usize> = seq.iter().copied().collect();
    let negatives = sample_negatives(num_items, &exclude, user, cfg.negatives, rng.gen())?;
    Ok(Some(UserSample {
        user,
        input,
        targets,
        loss_from,
        window,
        negatives,
    }))
}

/// Per-user statistics alongside the loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UserStats {
    pub avg_bits: f64,
}

/// Everything the loss needs besides parameters.
pub struct LossContext<'a, T> {
    pub model: &'a ChordModel<T>,
    pub method: &'a Method,
    pub cache: &'a FakeQuantCache<T>,
    pub cfg: &'a TrainConfig,
    pub mode: MixtureMode,
}

fn stats(v: &[f64]) -> (f64, f64, f64) {
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (min, max, v.iter().sum::<f64>() / v.len().max(1) as f64)
}

impl<T: Scalar> LossContext<'_, T> {
    /// Trunk weights for one user, plus its statistics.
    pub fn weights<G: Graph<T>>(
        &self,
        g: &G,
        vars: &ParamVars<G::Node>,
        window: &[usize],
    ) -> Result<(LayerWeights<G::Node>, UserStats)> {
        let bb = &self.model.backbone;
        let reg = bb.registry();
        let act_bits = self.cfg.act_width()?;
        let mut st = UserStats::default();
        let layers = match self.method {
            Method::FullPrecision => {
                st.avg_bits = 32.0;
                bb.float_weights::<G>(vars).layers
            }
            Method::Uniform { bits } => {
                let b = BitWidth::new(*bits)?;
                let map: QuantMap = reg
                    .layers()
                    .iter()
                    .map(|l| vec![b; l.out_channels])
                    .collect();
                st.avg_bits = b.bits() as f64;
                bb.fake_quant_weights(g, &map)?.layers
            }
            Method::Chord => {
                let z = self
                    .model
                    .saliency
                    .profile(g, vars, &vars[ITEM_EMB], window)?
                    .ok_or_else(|| Error::Contract("training window is empty".into()))?;
                let sens = self.model.saliency.sensitivities(g, vars, &z)?;
                let weighted: Vec<Vec<f64>> = sens
                    .weighted
                    .iter()
                    .map(|n| g.value(n).to_f64_vec())
                    .collect();
                let layer = g.value(&sens.layer).to_f64_vec();
                if weighted
                    .iter()
                    .flatten()
                    .chain(&layer)
                    .any(|v| !v.is_finite())
                {
                    let detail = weighted
                        .iter()
                        .enumerate()
                        .map(|(i, w)| {
                            let (lo, hi, mean) = stats(w);
                            format!(
                                "layer {} α^W min {:.3e} max {:.3e} mean {:.3e}",
                                i, lo, hi, mean
                            )
                        })
                        .collect::<Vec<_>>()
                        .join("; ");
                    return Err(Error::Diverged(format!(
                        "non-finite sensitivities: {}",
                        detail
                    )));
                }
                let refined = self.model.strategy_from(&weighted, &layer)?;
                st.avg_bits = refined.code.native_average(reg)?;
                let states = layer_states(
                    g,
                    &sens.layer,
                    &refined,
                    self.cfg.tau,
                    self.cfg.rank_tau,
                    self.mode,
                )?;
                let gamma = tier_gamma(&weighted, &self.model.tiering, reg.hash())?;
                let mut out = Vec::with_capacity(reg.len());
                for (i, info) in reg.layers().iter().enumerate() {
                    let row = g.gather(&states, vec![i])?;
                    let w = ste_mixture_quantize(
                        g,
                        &self.cache.layers[i],
                        &sens.weighted[i],
                        &gamma.layers[i],
                        &row,
                        self.model.tiering.tier_size(info.out_channels),
                        self.cfg.tau,
                        self.cfg.rank_tau,
                        self.mode,
                    )?;
                    out.push(LayerWeight::Dense(g.reshape(&w, &info.weight_shape())?));
                }
                out
            }
        };
        Ok((LayerWeights { layers, act_bits }, st))
    }

    /// Sampled-softmax loss of one user sample.
    pub fn user_loss<G: Graph<T>>(
        &self,
        g: &G,
        vars: &ParamVars<G::Node>,
        s: &UserSample,
    ) -> Result<(G::Node, UserStats)> {
        let (weights, st) = self.weights(g, vars, &s.window)?;
        let bb = &self.model.backbone;
        let reps = bb.encode(g, vars, &s.input, &weights, Positions::All)?;
        let rows: Vec<usize> = (s.loss_from..s.input.len()).collect();
        let reps = g.gather(&reps, rows.clone())?;
        let pos_items: Vec<usize> = rows.iter().map(|&t| s.targets[t]).collect();
        let pos_emb = g.gather(&vars[ITEM_EMB], pos_items)?;
        let pos = g.sum(&g.mul(&reps, &pos_emb)?, Some(1))?;
        let neg_emb = g.gather(&vars[ITEM_EMB], s.negatives.clone())?;
        let neg = g.matmul(&reps, &g.transpose(&neg_emb)?)?;
        Ok((loss_sampled_softmax(g, &pos, &neg)?, st))
    }
}

/// SGD with momentum or Adam over named parameters.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    step_count: u64,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64) -> Self {
        Self {
            kind,
            lr,
            momentum,
            step_count: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Advance the shared step counter (Adam bias correction).
    pub fn tick(&mut self) {
        self.step_count += 1;
    }

    /// Update every trainable entry of `params` that has a gradient.
    pub fn step(
        &mut self,
        params: &mut ParameterSet<T>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        let names: Vec<String> = params.names().map(String::from).collect();
        let t = self.step_count.max(1) as i32;
        for name in names {
            if !params.is_trainable(&name) {
                continue;
            }
            let Some(g) = grads.get(&name) else { continue };
            let mut w = params.get(&name).expect("listed").clone();
            let n = w.len();
            match self.kind {
                OptimizerKind::Sgd => {
                    let v = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| vec![T::zero(); n]);
                    let mu: T = lit(self.momentum);
                    let lr: T = lit(self.lr);
                    for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                        *vi = mu * *vi + gi;
                        *wi = *wi - lr * *vi;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
                    let m = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| vec![T::zero(); n]);
                    let v = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| vec![T::zero(); n]);
                    let c1 = 1.0 - b1.powi(t);
                    let c2 = 1.0 - b2.powi(t);
                    let step: T = lit(self.lr * c2.sqrt() / c1);
                    let (b1t, b2t, epst): (T, T, T) = (lit(b1), lit(b2), lit(eps * c2.sqrt()));
                    for (((wi, mi), vi), &gi) in w
                        .data_mut()
                        .iter_mut()
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                        .zip(g.data())
                    {
                        *mi = b1t * *mi + (T::one() - b1t) * gi;
                        *vi = b2t * *vi + (T::one() - b2t) * gi * gi;
                        *wi = *wi - step * *mi / (vi.sqrt() + epst);
                    }
                }
            }
            params.update(&name, w)?;
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub ndcg10: Option<f64>,
    pub hr10: Option<f64>,
    pub avg_bits: f64,
    pub wall_ms: u64,
    pub bit_config: String,
    pub method: String,
}

/// Training state for one method.
pub struct Trainer<T> {
    pub model: ChordModel<T>,
    pub method: Method,
    pub cfg: TrainConfig,
    cache: FakeQuantCache<T>,
    opt: Optimizer<T>,
    epoch: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: ChordModel<T>, method: Method, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if let Method::Uniform { bits } = method {
            BitWidth::new(bits)?;
        }
        let cache = FakeQuantCache::new(&model.backbone, model.tiering.bit_table.bits())?;
        let opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.momentum);
        Ok(Self {
            model,
            method,
            cfg,
            cache,
            opt,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn context(&self, mode: MixtureMode) -> LossContext<'_, T> {
        LossContext {
            model: &self.model,
            method: &self.method,
            cache: &self.cache,
            cfg: &self.cfg,
            mode,
        }
    }

    /// Samples for one epoch, in training order.
    pub fn epoch_samples(&self, split: &SplitSpec, epoch: usize) -> Result<Vec<UserSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x7261_696E);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..split.len()).collect();
        order.shuffle(&mut rng);
        let with_window = self.method == Method::Chord;
        let window = self.model.saliency.config().window;
        let bb = self.model.backbone.config();
        let positions = match bb.architecture {
            Architecture::Sasrec => self.cfg.max_positions.min(bb.max_seq_len),
            Architecture::Caser => self.cfg.max_positions,
        };
        let mut out = Vec::with_capacity(order.len());
        for u in order {
            let seq = &split.train[u];
            if let Some(s) = make_sample(
                u,
                seq,
                split.num_items,
                &self.cfg,
                positions,
                window,
                with_window,
                &mut rng,
            )? {
                out.push(s);
            }
        }
        Ok(out)
    }

    fn user_grads(&self, s: &UserSample) -> Result<(f64, UserStats, BTreeMap<String, Tensor<T>>)> {
        let tape = Tape::<T>::new();
        let vars = self.model.bind(&tape);
        let ctx = self.context(MixtureMode::Ste);
        let (loss, st) = ctx.user_loss(&tape, &vars, s)?;
        let value = tape.value(&loss).item().to_f64().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(Error::Diverged(format!("loss {}", value)));
        }
        Ok((value, st, tape.backward(loss)?.into_params()))
    }

    /// One pass over the training users; returns mean loss and mean bits.
    pub fn train_epoch(&mut self, split: &SplitSpec) -> Result<(f64, f64)> {
        let samples = self.epoch_samples(split, self.epoch)?;
        let mut total_loss = 0.0;
        let mut total_bits = 0.0;
        for (b, batch) in samples.chunks(self.cfg.batch_size).enumerate() {
            let results: Vec<_> = if self.cfg.parallel {
                batch.par_iter().map(|s| self.user_grads(s)).collect()
            } else {
                batch.iter().map(|s| self.user_grads(s)).collect()
            };
            let mut sum: BTreeMap<String, Tensor<T>> = BTreeMap::new();
            for (s, r) in batch.iter().zip(results) {
                let (loss, st, grads) = r.map_err(|e| match e {
                    Error::Diverged(d) => Error::Diverged(format!(
                        "epoch {} batch {} user {}: {}",
                        self.epoch, b, s.user, d
                    )),
                    other => other,
                })?;
                total_loss += loss;
                total_bits += st.avg_bits;
                for (k, g) in grads {
                    match sum.get_mut(&k) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            sum.insert(k, g);
                        }
                    }
                }
            }
            let inv: T = lit(1.0 / batch.len() as f64);
            sum.values_mut().for_each(|g| g.scale_assign(inv));
            self.opt.tick();
            self.model.apply_update(&mut self.opt, &sum)?;
        }
        self.epoch += 1;
        let n = samples.len().max(1) as f64;
        Ok((total_loss / n, total_bits / n))
    }
}

/// Train for `cfg.epochs` epochs, optionally evaluating along the way.
pub fn fit<T: Scalar>(
    trainer: &mut Trainer<T>,
    split: &SplitSpec,
    eval: Option<&crate::sim::EvalConfig>,
    mut log: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    let mut records = Vec::with_capacity(trainer.cfg.epochs);
    for _ in 0..trainer.cfg.epochs {
        let start = Instant::now();
        let (loss, bits) = trainer.train_epoch(split)?;
        let epoch = trainer.epoch();
        let (ndcg10, hr10) = match eval {
            Some(e)
                if trainer.cfg.eval_every > 0 && epoch.is_multiple_of(trainer.cfg.eval_every) =>
            {
                let rep = crate::sim::evaluate(&trainer.model, &trainer.method, split, e)?;
                (Some(rep.row.ndcg10), Some(rep.row.hr10))
            }
            _ => (None, None),
        };
        let rec = EpochRecord {
            epoch,
            loss,
            ndcg10,
            hr10,
            avg_bits: bits,
            wall_ms: start.elapsed().as_millis() as u64,
            bit_config: trainer.model.tiering.bit_table.to_string(),
            method: trainer.method.name(),
        };
        log(&rec);
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Eager};

    fn tiny(arch: &str) -> ChordModel<f64> {
        let mut bb = if arch == "caser" {
            BackboneConfig::caser(30)
        } else {
            BackboneConfig::sasrec(30)
        };
        bb.embedding_dim = 8;
        bb.max_seq_len = if arch == "caser" { 4 } else { 6 };
        bb.num_blocks = 1;
        bb.num_heads = 2;
        bb.horizontal_filters = 4;
        bb.vertical_filters = 2;
        bb.filter_heights = vec![2, 3];
        let sal = SaliencyConfig {
            profile_dim: 4,
            hidden: 6,
            rank: 2,
            window: 4,
        };
        ChordModel::build(&bb, &sal, &TieringConfig::default(), 11).unwrap()
    }

    fn sample() -> UserSample {
        UserSample {
            user: 0,
            input: vec![1, 5, 7, 2, 9],
            targets: vec![5, 7, 2, 9, 4],
            loss_from: 2,
            window: vec![1, 5, 7],
            negatives: vec![10, 11, 12, 13, 14, 15],
        }
    }

    #[test]
    fn loss_examples() {
        let g = Eager::<f64>::new();
        let pos = g.constant(Tensor::vector(vec![0.0]));
        let neg = g.constant(Tensor::from_f64(&[1, 1], &[0.0]).unwrap());
        let l = g
            .value(&loss_sampled_softmax(&g, &pos, &neg).unwrap())
            .item();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let neg = g.constant(Tensor::zeros(&[1, 100]));
        let l = g
            .value(&loss_sampled_softmax(&g, &pos, &neg).unwrap())
            .item();
        assert!((l - 101f64.ln()).abs() < 1e-12);
        let pos = g.constant(Tensor::vector(vec![50.0]));
        let l = g
            .value(&loss_sampled_softmax(&g, &pos, &neg).unwrap())
            .item();
        assert!(l < 1e-20);
        let empty = g.constant(Tensor::zeros(&[1, 0]));
        assert!(loss_sampled_softmax(&g, &pos, &empty).is_err());
    }

    #[test]
    fn mixture_forward_equals_hard_pipeline() {
        for arch in ["sasrec", "caser"] {
            let model = tiny(arch);
            let cfg = TrainConfig::default();
            let cache =
                FakeQuantCache::new(&model.backbone, model.tiering.bit_table.bits()).unwrap();
            let ctx = LossContext {
                model: &model,
                method: &Method::Chord,
                cache: &cache,
                cfg: &cfg,
                mode: MixtureMode::Ste,
            };
            let g = Eager::<f64>::new();
            let vars = model.bind(&g);
            let s = sample();
            let (weights, _) = ctx.weights(&g, &vars, &s.window).unwrap();

            // hard oracle: Γ + Λ codes, then per-channel fake-quant of the trunk
            let sal = model
                .saliency
                .profile_user(
                    model.backbone.trainable().get(ITEM_EMB).unwrap(),
                    0,
                    &s.window,
                )
                .unwrap();
            let set = model.saliency.evaluate(&sal).unwrap();
            let refined = model.strategy_from(&set.weighted, &set.layer).unwrap();
            let hard = model
                .backbone
                .fake_quant_weights(&g, &refined.code.native_map())
                .unwrap();
            for (a, b) in weights.layers.iter().zip(&hard.layers) {
                let (LayerWeight::Dense(a), LayerWeight::Dense(b)) = (a, b) else {
                    panic!()
                };
                assert_eq!(g.value(a).data(), g.value(b).data());
            }
            let (loss, _) = ctx.user_loss(&g, &vars, &s).unwrap();
            assert!(g.value(&loss).item().is_finite());
        }
    }

    #[test]
    fn relaxed_objective_gradients_match_finite_differences() {
        let model = tiny("sasrec");
        let cfg = TrainConfig {
            tau: 0.5,
            ..TrainConfig::default()
        };
        let cache = FakeQuantCache::new(&model.backbone, model.tiering.bit_table.bits()).unwrap();
        let ctx = LossContext {
            model: &model,
            method: &Method::Chord,
            cache: &cache,
            cfg: &cfg,
            mode: MixtureMode::Relaxed,
        };
        // probe the hypernet and profiler parameters only; the embedding
        // table is large and covered by the primitive checks
        let mut params = model.all_params();
        let names: Vec<String> = params.names().map(String::from).collect();
        let mut frozen = ParameterSet::new();
        for n in names {
            let t = params.get(&n).unwrap().clone();
            let train = params.is_trainable(&n)
                && (n.starts_with("hyper.l")
                    || n.starts_with("hyper.f0")
                    || n.starts_with("hyper.e1")
                    || n.starts_with("gru.w_hz"));
            frozen.insert(n, t, train);
        }
        params = frozen;
        let s = sample();
        let worst = finite_diff_check(
            |t: &Tape<f64>, vars| ctx.user_loss(t, vars, &s).map(|(l, _)| l),
            &params,
            1e-6,
        )
        .unwrap();
        assert!(worst < 1e-3, "relative error {}", worst);
    }

    #[test]
    fn ste_gradient_reaches_hypernets() {
        let model = tiny("caser");
        let cfg = TrainConfig::default();
        let cache = FakeQuantCache::new(&model.backbone, model.tiering.bit_table.bits()).unwrap();
        let ctx = LossContext {
            model: &model,
            method: &Method::Chord,
            cache: &cache,
            cfg: &cfg,
            mode: MixtureMode::Ste,
        };
        let tape = Tape::<f64>::new();
        let vars = model.bind(&tape);
        let (loss, _) = ctx.user_loss(&tape, &vars, &sample()).unwrap();
        let grads = tape.backward(loss).unwrap();
        let nonzero = |p: &str| {
            grads
                .param(p)
                .is_some_and(|g| g.data().iter().any(|&x| x != 0.0))
        };
        assert!(nonzero("hyper.f0.w2"));
        assert!(nonzero("hyper.l.w2"));
        assert!(nonzero("gru.w_ir"));
        assert!(grads
            .params()
            .keys()
            .all(|k| !k.ends_with(".weight") || k == "head.weight"));
    }

    #[test]
    fn tiny_caser_relaxed_fd() {
        let model = tiny("caser");
        let cfg = TrainConfig {
            tau: 0.5,
            ..TrainConfig::default()
        };
        let cache = FakeQuantCache::new(&model.backbone, model.tiering.bit_table.bits()).unwrap();
        let ctx = LossContext {
            model: &model,
            method: &Method::Chord,
            cache: &cache,
            cfg: &cfg,
            mode: MixtureMode::Relaxed,
        };
        let base = model.all_params();
        let mut params = ParameterSet::new();
        for (n, t, tr) in base.iter() {
            params.insert(
                n,
                t.clone(),
                tr && (n.starts_with("hyper.f1")
                    || n.starts_with("hyper.e0.wv")
                    || n == "head.bias"),
            );
        }
        let s = sample();
        let worst = finite_diff_check(
            |t: &Tape<f64>, vars| ctx.user_loss(t, vars, &s).map(|(l, _)| l),
            &params,
            1e-6,
        )
        .unwrap();
        assert!(worst < 1e-3, "relative error {}", worst);
    }

    #[test]
    fn sgd_and_adam_descend_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = ParameterSet::<f64>::new();
            p.insert("w", Tensor::vector(vec![1.0, -2.0]), true);
            let mut opt = Optimizer::new(kind, 0.05, 0.9);
            for _ in 0..200 {
                let g: BTreeMap<String, Tensor<f64>> =
                    [("w".to_string(), p.get("w").unwrap().map(|x| 2.0 * x))].into();
                opt.tick();
                opt.step(&mut p, &g).unwrap();
            }
            assert!(
                p.get("w").unwrap().data().iter().all(|x| x.abs() < 0.1),
                "{:?}",
                kind
            );
        }
    }

    #[test]
    fn routing_covers_every_state_and_tier() {
        let r: Tensor<f64> = routing();
        for row in 0..3 {
            for tier in 0..3 {
                let s: f64 = r.row(row)[tier * 4..tier * 4 + 4].iter().sum();
                assert_eq!(s, 1.0);
            }
        }
        // boost of a code-1 channel lands on code 2
        assert_eq!(r.row(2)[4 + 2], 1.0);
        // compress of a code-3 channel lands on code 2
        assert_eq!(r.row(0)[8 + 2], 1.0);
    }
}
