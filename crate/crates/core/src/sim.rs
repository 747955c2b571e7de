//! Device-cloud collaboration simulator with traffic and compute accounting.
//!
//! A device uplinks a profile vector computed from its recent interactions;
//! the cloud answers with a 2-bit-per-channel strategy; the device decodes it
//! under its resource budget, quantizes its frozen trunk once and reranks
//! candidates with plain forward passes.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbones::{
    rank_candidates, score_candidates, CandidateSet, FrozenModel, LayerWeights, Positions,
    QuantMap, ITEM_EMB,
};
use crate::data::{eval_candidates, rank_of, EvalCandidates, MetricsRow, SplitSpec};
use crate::error::{Error, Result};
use crate::quant::BitWidth;
use crate::saliency::{Saliency, UserEmbedding};
use crate::strategy::{self, decode_T, DecodedStrategy, ResourceProfile};
use crate::tensor::{Eager, Graph, Scalar, Tensor};
use crate::training::{ChordModel, Method};
use crate::wire::Reader;

const PROFILE_MAGIC: &[u8; 4] = b"CHUP";

/// Uplink message: `{magic, device u64, l u16, z f32 × l}`. An all-zero `z`
/// marks a device without history.
pub fn encode_profile<T: Scalar>(p: &UserEmbedding<T>) -> Result<Vec<u8>> {
    if p.z.len() > u16::MAX as usize {
        return Err(Error::Codec("profile too long".into()));
    }
    let mut out = Vec::with_capacity(14 + 4 * p.z.len());
    out.extend_from_slice(PROFILE_MAGIC);
    out.extend_from_slice(&p.device.to_le_bytes());
    out.extend_from_slice(&(p.z.len() as u16).to_le_bytes());
    for v in &p.z {
        let f = if p.cold_start {
            0.0
        } else {
            v.to_f32().unwrap_or(f32::NAN)
        };
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_profile<T: Scalar>(bytes: &[u8]) -> Result<UserEmbedding<T>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != PROFILE_MAGIC {
        return Err(Error::Codec("bad profile magic".into()));
    }
    let device = r.u64()?;
    let l = r.u16()? as usize;
    let z: Vec<f32> = (0..l).map(|_| r.f32()).collect::<Result<_>>()?;
    r.finish()?;
    let cold = z.iter().all(|&v| v == 0.0);
    Ok(UserEmbedding {
        device,
        z: z.iter()
            .map(|&v| T::from_f32(v).unwrap_or_else(T::nan))
            .collect(),
        window_len: 0,
        cold_start: cold,
    })
}

/// Cloud side: trained hypernets and per-device history logs.
pub struct CloudState<T> {
    model: Arc<ChordModel<T>>,
    histories: BTreeMap<u64, Vec<usize>>,
}

impl<T: Scalar> CloudState<T> {
    pub fn new(model: Arc<ChordModel<T>>) -> Self {
        Self {
            model,
            histories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, device: u64, history: Vec<usize>) {
        self.histories.insert(device, history);
    }

    pub fn history(&self, device: u64) -> Option<&[usize]> {
        self.histories.get(&device).map(|h| h.as_slice())
    }

    /// Answer a profile message with an encoded strategy.
    pub fn strategy_round(&self, profile_msg: &[u8]) -> Result<Vec<u8>> {
        let p = decode_profile::<T>(profile_msg)?;
        if !self.histories.contains_key(&p.device) {
            return Err(Error::Protocol(format!("unknown device {}", p.device)));
        }
        let set = self.model.saliency.evaluate(&p)?;
        let refined = self.model.strategy_from(&set.weighted, &set.layer)?;
        strategy::encode(&refined.code)
    }
}

/// Ranking produced by one device session.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranked {
    /// Candidate item ids, best first.
    pub items: Vec<usize>,
    /// Candidate indices, best first.
    pub order: Vec<usize>,
    pub compute_cost: f64,
}

/// Device side: frozen trunk, recent interactions, current strategy.
pub struct DeviceState<T> {
    pub device: u64,
    model: Arc<FrozenModel<T>>,
    profiler: Arc<Saliency<T>>,
    buffer: Vec<usize>,
    pub profile: ResourceProfile,
    act_bits: Option<BitWidth>,
    strategy: Option<DecodedStrategy>,
    weights: Option<LayerWeights<Arc<Tensor<T>>>>,
}

impl<T: Scalar> DeviceState<T> {
    pub fn new(
        model: Arc<FrozenModel<T>>,
        profiler: Arc<Saliency<T>>,
        profile: ResourceProfile,
        recent: &[usize],
        act_bits: Option<BitWidth>,
    ) -> Result<Self> {
        profile.validate()?;
        let keep = model.config().max_seq_len.max(profiler.config().window);
        let mut dev = Self {
            device: profile.device,
            buffer: recent[recent.len().saturating_sub(keep)..].to_vec(),
            model,
            profiler,
            profile,
            act_bits,
            strategy: None,
            weights: None,
        };
        dev.install(Self::fallback(&dev.model, dev.profile.budget_bits)?)?;
        Ok(dev)
    }

    /// Uniform strategy at the whole number of bits the budget allows; used
    /// until the first cloud strategy arrives.
    fn fallback(model: &FrozenModel<T>, budget: f64) -> Result<DecodedStrategy> {
        let bits = budget.floor().clamp(2.0, 8.0);
        let width = BitWidth::new(bits as u8)?;
        let reg = model.registry();
        let layers: QuantMap = reg
            .layers()
            .iter()
            .map(|l| vec![width; l.out_channels])
            .collect();
        Ok(DecodedStrategy {
            average_bits: strategy::average_bits(&layers, reg)?,
            compute_cost: strategy::compute_cost(&layers, reg)?,
            level: bits,
            layers,
        })
    }

    fn install(&mut self, decoded: DecodedStrategy) -> Result<()> {
        if decoded.compute_cost > self.profile.compute_limit {
            return Err(Error::Resource(format!(
                "device {} cannot afford even its fallback strategy",
                self.device
            )));
        }
        let mut weights = self.model.packed_weights(&decoded.layers)?;
        weights.act_bits = self.act_bits;
        self.weights = Some(weights);
        self.strategy = Some(decoded);
        Ok(())
    }

    pub fn strategy(&self) -> &DecodedStrategy {
        self.strategy.as_ref().expect("installed at construction")
    }

    pub fn push_interaction(&mut self, item: usize) {
        self.buffer.push(item);
        let keep = self
            .model
            .config()
            .max_seq_len
            .max(self.profiler.config().window);
        if self.buffer.len() > keep {
            self.buffer.remove(0);
        }
    }

    /// Profile message from the recent-interaction buffer.
    pub fn uplink(&self) -> Result<Vec<u8>> {
        let emb = self
            .model
            .trainable()
            .get(ITEM_EMB)
            .expect("item embeddings");
        let p = self.profiler.profile_user(emb, self.device, &self.buffer)?;
        encode_profile(&p)
    }

    /// Decode and install a strategy; on any error the previous one stays.
    pub fn apply(&mut self, msg: &[u8]) -> Result<&DecodedStrategy> {
        let decoded = decode_T(msg, &self.profile, self.model.registry())?;
        self.install(decoded)?;
        Ok(self.strategy.as_ref().expect("just installed"))
    }

    /// One quantized forward over the buffer, then rank the candidates.
    pub fn infer(&self, candidates: &CandidateSet<T>) -> Result<Ranked> {
        let (Some(weights), Some(strategy)) = (&self.weights, &self.strategy) else {
            return Err(Error::Protocol(format!(
                "device {} has no strategy",
                self.device
            )));
        };
        let g = Eager::<T>::new();
        let vars = self.model.bind(&g);
        let seq = &self.buffer[self
            .buffer
            .len()
            .saturating_sub(self.model.config().max_seq_len)..];
        let rep = self
            .model
            .encode(&g, &vars, seq, weights, Positions::Last)?;
        let scores = score_candidates(g.value(&rep).data(), candidates)?;
        let order = rank_candidates(&scores);
        Ok(Ranked {
            items: order.iter().map(|&i| candidates.items[i]).collect(),
            order,
            compute_cost: strategy.compute_cost,
        })
    }

    pub fn apply_and_infer(&mut self, msg: &[u8], candidates: &CandidateSet<T>) -> Result<Ranked> {
        self.apply(msg)?;
        self.infer(candidates)
    }
}

/// One transcript line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub round: usize,
    pub device: u64,
    pub uplink_bits: u64,
    pub downlink_bits: u64,
    pub avg_bits: Option<f64>,
    pub ndcg10: Option<f64>,
    pub hr10: Option<f64>,
    pub feasible: bool,
}

/// Traffic and compute per device, accumulated over rounds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Accounting {
    pub uplink_bits: BTreeMap<u64, u64>,
    pub downlink_bits: BTreeMap<u64, u64>,
    /// Strategy payload bits (the Param metric numerator).
    pub payload_bits: BTreeMap<u64, u64>,
    /// Candidate-embedding bits, kept apart from Param.
    pub candidate_bits: BTreeMap<u64, u64>,
    pub compute: BTreeMap<u64, f64>,
    pub rounds: usize,
}

/// Feasibility of one device against its limits.
#[derive(Clone, Debug, PartialEq)]
pub struct Feasibility {
    pub device: u64,
    pub bandwidth_ok: bool,
    pub compute_ok: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeasibilityReport {
    pub devices: Vec<Feasibility>,
    /// Mean strategy payload per device per round, in million bits.
    pub param_mbit: f64,
}

impl Accounting {
    pub fn record(
        &mut self,
        device: u64,
        uplink: u64,
        downlink: u64,
        payload: u64,
        candidates: u64,
        compute: f64,
    ) {
        *self.uplink_bits.entry(device).or_default() += uplink;
        *self.downlink_bits.entry(device).or_default() += downlink;
        *self.payload_bits.entry(device).or_default() += payload;
        *self.candidate_bits.entry(device).or_default() += candidates;
        let c = self.compute.entry(device).or_default();
        *c = c.max(compute);
    }

    /// Check every device against its per-round limits.
    pub fn account_round(&self, profiles: &[ResourceProfile]) -> FeasibilityReport {
        let rounds = self.rounds.max(1) as u64;
        let devices = profiles
            .iter()
            .map(|p| Feasibility {
                device: p.device,
                bandwidth_ok: self.downlink_bits.get(&p.device).copied().unwrap_or(0) / rounds
                    <= p.bandwidth_limit_bits,
                compute_ok: self.compute.get(&p.device).copied().unwrap_or(0.0) <= p.compute_limit,
            })
            .collect();
        let total: u64 = self.payload_bits.values().sum();
        let n = (self.payload_bits.len().max(1) as u64 * rounds) as f64;
        FeasibilityReport {
            devices,
            param_mbit: total as f64 / n / 1e6,
        }
    }
}

/// Evaluation settings shared by every method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub negatives: usize,
    pub seed: u64,
    pub budget: f64,
    pub act_bits: Option<u8>,
    pub rounds: usize,
    /// Downlink bits per round; unlimited when unset.
    pub bandwidth_limit_bits: Option<u64>,
    /// Bit-operations per inference; unlimited when unset.
    pub compute_limit: Option<f64>,
    /// Run devices on the rayon pool.
    pub parallel: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            negatives: 100,
            seed: 2024,
            budget: 3.0,
            act_bits: None,
            rounds: 1,
            bandwidth_limit_bits: None,
            compute_limit: None,
            parallel: false,
        }
    }
}

impl EvalConfig {
    /// Resource profile of one simulated device.
    pub fn profile(&self, device: u64) -> Result<ResourceProfile> {
        let mut p = ResourceProfile::new(device, self.budget)?;
        if let Some(b) = self.bandwidth_limit_bits {
            p.bandwidth_limit_bits = b;
        }
        if let Some(c) = self.compute_limit {
            p.compute_limit = c;
        }
        Ok(p)
    }

    fn act(&self) -> Result<Option<BitWidth>> {
        self.act_bits.map(BitWidth::new).transpose()
    }
}

/// Outcome of evaluating one method.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub row: MetricsRow,
    pub ranks: Vec<usize>,
    pub transcript: Vec<TranscriptRecord>,
}

fn candidate_set<T: Scalar>(
    model: &FrozenModel<T>,
    device: u64,
    c: &EvalCandidates,
) -> Result<CandidateSet<T>> {
    model.candidates(device, &c.items)
}

fn single_metrics(rank: usize) -> (f64, f64) {
    if rank <= 10 {
        (1.0 / ((rank + 1) as f64).log2(), 1.0)
    } else {
        (0.0, 0.0)
    }
}

/// Transcript line, rank, and (uplink, downlink, payload, candidate bits, compute).
type RoundOutcome = (TranscriptRecord, Option<usize>, (u64, u64, u64, u64, f64));

/// Run device-cloud sessions for every split user. Devices that cannot
/// decode any strategy contribute no rank and are flagged infeasible.
pub fn simulate<T: Scalar>(
    model: &ChordModel<T>,
    split: &SplitSpec,
    cfg: &EvalConfig,
) -> Result<(EvalReport, Accounting)> {
    let shared = Arc::new(model.clone());
    let trunk = Arc::new(model.backbone.clone());
    let profiler = Arc::new(model.saliency.clone());
    let mut cloud = CloudState::new(shared);
    for u in 0..split.len() {
        cloud.register(u as u64, split.train[u].clone());
    }
    let act = cfg.act()?;
    let d = model.backbone.config().embedding_dim as u64;

    let session = |u: usize| -> Result<Vec<RoundOutcome>> {
        let profile = cfg.profile(u as u64)?;
        let mut dev = DeviceState::new(
            trunk.clone(),
            profiler.clone(),
            profile,
            &split.train[u],
            act,
        )?;
        let cands = eval_candidates(split, u, cfg.negatives, cfg.seed)?;
        let set = candidate_set(&trunk, u as u64, &cands)?;
        let mut out = Vec::with_capacity(cfg.rounds);
        for round in 0..cfg.rounds {
            let up = dev.uplink()?;
            let down = cloud.strategy_round(&up)?;
            let payload = strategy::payload_bits(&strategy::decode(&down)?) as u64;
            let bandwidth_ok = (down.len() as u64 * 8) <= dev.profile.bandwidth_limit_bits;
            let applied = dev.apply(&down).map(|_| ());
            let ranked = dev.infer(&set).ok();
            let rank = ranked
                .as_ref()
                .map(|r| rank_of(&r.order, cands.truth_index));
            let (ndcg, hr) = match rank {
                Some(r) => {
                    let (a, b) = single_metrics(r);
                    (Some(a), Some(b))
                }
                None => (None, None),
            };
            let cost = ranked.as_ref().map_or(0.0, |r| r.compute_cost);
            out.push((
                TranscriptRecord {
                    round,
                    device: u as u64,
                    uplink_bits: up.len() as u64 * 8,
                    downlink_bits: down.len() as u64 * 8,
                    avg_bits: Some(dev.strategy().average_bits),
                    ndcg10: ndcg,
                    hr10: hr,
                    feasible: applied.is_ok() && bandwidth_ok,
                },
                rank,
                (
                    up.len() as u64 * 8,
                    down.len() as u64 * 8,
                    payload,
                    set.items.len() as u64 * d * 32,
                    cost,
                ),
            ));
        }
        Ok(out)
    };

    let per_user: Vec<Result<_>> = if cfg.parallel {
        (0..split.len()).into_par_iter().map(session).collect()
    } else {
        (0..split.len()).map(session).collect()
    };

    let mut acc = Accounting {
        rounds: cfg.rounds,
        ..Accounting::default()
    };
    let mut transcript = Vec::new();
    let mut ranks = Vec::new();
    let mut bits = Vec::new();
    for r in per_user {
        for (rec, rank, (up, down, payload, cand, cost)) in r? {
            acc.record(rec.device, up, down, payload, cand, cost);
            if rec.round + 1 == cfg.rounds {
                if let Some(rank) = rank {
                    ranks.push(rank);
                }
                if let Some(b) = rec.avg_bits {
                    bits.push(b);
                }
            }
            transcript.push(rec);
        }
    }
    let profiles: Vec<ResourceProfile> = (0..split.len())
        .map(|u| cfg.profile(u as u64))
        .collect::<Result<_>>()?;
    let report = acc.account_round(&profiles);
    let avg_bits = bits.iter().sum::<f64>() / bits.len().max(1) as f64;
    let row = MetricsRow::from_ranks("chord", "", avg_bits, report.param_mbit, &ranks);
    Ok((
        EvalReport {
            row,
            ranks,
            transcript,
        },
        acc,
    ))
}

/// Evaluate a trained model under a method on the held-out items.
pub fn evaluate<T: Scalar>(
    model: &ChordModel<T>,
    method: &Method,
    split: &SplitSpec,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let bb = &model.backbone;
    let reg = bb.registry();
    let (map, avg_bits, param_mbit): (Option<QuantMap>, f64, f64) = match method {
        Method::Chord => {
            let (mut report, _) = simulate(model, split, cfg)?;
            report.row.method = method.name();
            return Ok(report);
        }
        Method::Uniform { bits } => {
            let b = BitWidth::new(*bits)?;
            let map = reg
                .layers()
                .iter()
                .map(|l| vec![b; l.out_channels])
                .collect();
            (
                Some(map),
                *bits as f64,
                (*bits as f64) * reg.total_weights() as f64 / 1e6,
            )
        }
        Method::FullPrecision => (None, 32.0, 32.0 * reg.total_weights() as f64 / 1e6),
    };
    let g = Eager::<T>::new();
    let vars = bb.bind(&g);
    let mut weights = match &map {
        Some(m) => bb.packed_weights(m)?,
        None => bb.float_weights::<Eager<T>>(&vars),
    };
    weights.act_bits = cfg.act()?;
    let rank_user = |u: usize| -> Result<usize> {
        let g = Eager::<T>::new();
        let vars = bb.bind(&g);
        let cands = eval_candidates(split, u, cfg.negatives, cfg.seed)?;
        let set = candidate_set(bb, u as u64, &cands)?;
        let hist = &split.train[u];
        let seq = &hist[hist.len().saturating_sub(bb.config().max_seq_len)..];
        let rep = bb.encode(&g, &vars, seq, &weights, Positions::Last)?;
        let scores = score_candidates(g.value(&rep).data(), &set)?;
        Ok(rank_of(&rank_candidates(&scores), cands.truth_index))
    };
    let ranks: Vec<usize> = if cfg.parallel {
        (0..split.len())
            .into_par_iter()
            .map(rank_user)
            .collect::<Result<_>>()?
    } else {
        (0..split.len()).map(rank_user).collect::<Result<_>>()?
    };
    Ok(EvalReport {
        row: MetricsRow::from_ranks(&method.name(), "", avg_bits, param_mbit, &ranks),
        ranks,
        transcript: Vec::new(),
    })
}

/// Write a transcript as JSON lines.
pub fn write_transcript<W: Write>(mut out: W, records: &[TranscriptRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writeln!(out, "{}", line)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::BackboneConfig;
    use crate::saliency::SaliencyConfig;
    use crate::strategy::TieringConfig;

    fn model() -> ChordModel<f32> {
        let mut bb = BackboneConfig::sasrec(40);
        bb.max_seq_len = 8;
        ChordModel::build(
            &bb,
            &SaliencyConfig::default(),
            &TieringConfig::default(),
            3,
        )
        .unwrap()
    }

    fn device(m: &ChordModel<f32>, budget: f64, recent: &[usize]) -> DeviceState<f32> {
        DeviceState::new(
            Arc::new(m.backbone.clone()),
            Arc::new(m.saliency.clone()),
            ResourceProfile::new(5, budget).unwrap(),
            recent,
            None,
        )
        .unwrap()
    }

    #[test]
    fn uplink_sizes_and_cold_start() {
        let m = model();
        let d = device(&m, 3.0, &[1, 2, 3]);
        let up = d.uplink().unwrap();
        assert_eq!((up.len() - 14) * 8, 1024);
        assert_eq!(up, d.uplink().unwrap());
        let cold = device(&m, 3.0, &[]);
        let p: UserEmbedding<f32> = decode_profile(&cold.uplink().unwrap()).unwrap();
        assert!(p.cold_start);
        assert!(p.z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn strategy_round_trip_and_determinism() {
        let m = model();
        let mut cloud = CloudState::new(Arc::new(m.clone()));
        cloud.register(5, vec![1, 2, 3]);
        let d = device(&m, 3.0, &[1, 2, 3]);
        let up = d.uplink().unwrap();
        let a = cloud.strategy_round(&up).unwrap();
        assert_eq!(a, cloud.strategy_round(&up).unwrap());
        let code = strategy::decode(&a).unwrap();
        assert_eq!(code.total_channels(), 384);
        assert_eq!(strategy::payload_bits(&code), 768);
        let stranger = CloudState::new(Arc::new(m.clone()));
        assert!(matches!(
            stranger.strategy_round(&up),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn device_ranks_all_candidates_and_keeps_strategy_on_error() {
        let m = model();
        let mut cloud = CloudState::new(Arc::new(m.clone()));
        cloud.register(5, vec![1, 2, 3]);
        let mut d = device(&m, 3.0, &[1, 2, 3]);
        let msg = cloud.strategy_round(&d.uplink().unwrap()).unwrap();
        let items: Vec<usize> = (0..40).collect();
        let cands = m.backbone.candidates(5, &items).unwrap();
        let ranked = d.apply_and_infer(&msg, &cands).unwrap();
        let mut sorted = ranked.items.clone();
        sorted.sort();
        assert_eq!(sorted, items);
        let before = d.strategy().clone();

        let mut bad = msg.clone();
        bad[5] ^= 0xFF; // registry hash byte
        assert!(matches!(d.apply(&bad), Err(Error::IncompatibleStrategy(_))));
        assert_eq!(d.strategy(), &before);
        assert!(d.infer(&cands).is_ok());
    }

    #[test]
    fn eight_bit_costs_more_compute_than_three_bit_mixed() {
        let m = model();
        let reg = m.backbone.registry();
        let code = strategy::tier_gamma(
            &reg.layers()
                .iter()
                .map(|l| (0..l.out_channels).map(|j| j as f64).collect())
                .collect::<Vec<_>>(),
            &TieringConfig::default(),
            reg.hash(),
        )
        .unwrap();
        let mixed = strategy::compute_cost(&code.native_map(), reg).unwrap();
        let eight: QuantMap = reg
            .layers()
            .iter()
            .map(|l| vec![BitWidth::new(8).unwrap(); l.out_channels])
            .collect();
        assert!(strategy::compute_cost(&eight, reg).unwrap() > mixed);
    }

    #[test]
    fn unaffordable_strategy_keeps_the_fallback() {
        let m = model();
        let mut cloud = CloudState::new(Arc::new(m.clone()));
        cloud.register(5, vec![1, 2, 3]);
        let mut d = device(&m, 2.0, &[1, 2, 3]);
        assert_eq!(d.strategy().average_bits, 2.0);
        let msg = cloud.strategy_round(&d.uplink().unwrap()).unwrap();
        assert!(matches!(d.apply(&msg), Err(Error::Resource(_))));
        assert_eq!(d.strategy().average_bits, 2.0);
        let cands = m.backbone.candidates(5, &[4, 5, 6]).unwrap();
        assert_eq!(d.infer(&cands).unwrap().items.len(), 3);
    }

    #[test]
    fn accounting_flags_bandwidth() {
        let mut acc = Accounting {
            rounds: 1,
            ..Accounting::default()
        };
        acc.record(1, 1136, 768, 768, 0, 10.0);
        let mut p = ResourceProfile::new(1, 3.0).unwrap();
        p.bandwidth_limit_bits = 10_000;
        assert!(acc.account_round(&[p.clone()]).devices[0].bandwidth_ok);
        p.bandwidth_limit_bits = 100;
        assert!(!acc.account_round(&[p]).devices[0].bandwidth_ok);
        assert!((acc.account_round(&[]).param_mbit - 768e-6).abs() < 1e-15);
    }

    #[test]
    fn profile_codec_rejects_garbage() {
        assert!(decode_profile::<f32>(b"CHUPxx").is_err());
        let p = UserEmbedding {
            device: 9,
            z: vec![0.5f32, -1.0],
            window_len: 2,
            cold_start: false,
        };
        let bytes = encode_profile(&p).unwrap();
        let q: UserEmbedding<f32> = decode_profile(&bytes).unwrap();
        assert_eq!((q.device, q.z.clone()), (9, p.z.clone()));
    }
}
