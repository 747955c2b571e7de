//! Channel tiering (Γ), layer refinement (Λ), the 2-bit strategy wire format,
//! and device-side resource decoding (T).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbones::{QuantMap, Registry};
use crate::error::{Error, Result};
use crate::quant::{self, BitWidth};
use crate::wire::Reader;

const STRATEGY_MAGIC: &[u8; 4] = b"CHST";
const STRATEGY_VERSION: u8 = 1;
const BETA_SCALE: f64 = 8192.0;
const BUDGET_SLACK: f64 = 0.05;
/// Budget levels with a code→bit lookup, highest first.
const BUDGET_LEVELS: [f64; 3] = [3.0, 2.5, 2.0];

/// Code→bit assignment for codes {0,1,2,3}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BitTable {
    /// {2, 4, 6, 8}
    B2468,
    /// {2, 5, 6, 7}
    B2567,
}

impl BitTable {
    pub fn id(self) -> u8 {
        match self {
            Self::B2468 => 0,
            Self::B2567 => 1,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Self::B2468),
            1 => Ok(Self::B2567),
            other => Err(Error::Codec(format!("unknown bit-table id {}", other))),
        }
    }

    /// Native bits for each code.
    pub fn bits(self) -> [u8; 4] {
        self.lookup(BUDGET_LEVELS[0])
    }

    /// Bits for each code under the budget level `level`.
    fn lookup(self, level: f64) -> [u8; 4] {
        match (self, level) {
            (Self::B2468, l) if l >= 3.0 => [2, 4, 6, 8],
            (Self::B2468, l) if l >= 2.5 => [2, 2, 4, 6],
            (Self::B2468, _) => [2, 2, 2, 4],
            (Self::B2567, l) if l >= 3.0 => [2, 5, 6, 7],
            (Self::B2567, l) if l >= 2.5 => [2, 2, 5, 6],
            (Self::B2567, _) => [2, 2, 2, 5],
        }
    }
}

impl fmt::Display for BitTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.bits();
        write!(f, "{}-{}-{}-{}", b[0], b[1], b[2], b[3])
    }
}

impl std::str::FromStr for BitTable {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2-4-6-8" => Ok(Self::B2468),
            "2-5-6-7" => Ok(Self::B2567),
            other => Err(Error::Config(format!(
                "unknown bit config `{}` (expected 2-4-6-8 or 2-5-6-7)",
                other
            ))),
        }
    }
}

impl TryFrom<String> for BitTable {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BitTable> for String {
    fn from(t: BitTable) -> String {
        t.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TieringConfig {
    pub beta: f64,
    pub bit_table: BitTable,
    pub n_boost: usize,
    pub n_compress: usize,
    /// Compress further low-sensitivity layers (and if needed drop boosts)
    /// until the refined average does not exceed the tiered average, capped at 3.
    pub balance: bool,
}

impl Default for TieringConfig {
    fn default() -> Self {
        Self {
            beta: 0.125,
            bit_table: BitTable::B2468,
            n_boost: 1,
            n_compress: 1,
            balance: true,
        }
    }
}

impl TieringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0 / 3.0) {
            return Err(Error::Config(format!(
                "beta {} outside (0, 1/3]",
                self.beta
            )));
        }
        Ok(())
    }

    /// β as carried on the wire.
    pub fn wire_beta(&self) -> f64 {
        (self.beta * BETA_SCALE).round() / BETA_SCALE
    }

    /// Channels in each of the two upper tiers for a layer of `d_out` channels.
    pub fn tier_size(&self, d_out: usize) -> usize {
        ((self.beta * d_out as f64).ceil() as usize).min(d_out)
    }
}

/// 2-bit codes per channel for every registry layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StrategyCode {
    pub registry_hash: u64,
    pub beta: f64,
    pub bit_table: BitTable,
    pub layers: Vec<Vec<u8>>,
}

impl StrategyCode {
    pub fn total_channels(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }

    /// Native bit-widths per channel.
    pub fn native_map(&self) -> QuantMap {
        self.map_with(self.bit_table.bits())
    }

    fn map_with(&self, table: [u8; 4]) -> QuantMap {
        self.layers
            .iter()
            .map(|l| {
                l.iter()
                    .map(|&c| BitWidth::new(table[c as usize]).expect("table entries are valid"))
                    .collect()
            })
            .collect()
    }

    /// Weight-weighted average of native bits over a registry.
    pub fn native_average(&self, registry: &Registry) -> Result<f64> {
        average_bits(&self.native_map(), registry)
    }
}

fn rank_desc(values: &[f64]) -> Result<Vec<usize>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("sensitivities must be finite".into()));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
    Ok(idx)
}

/// Rank channels within each layer; top ⌈β·d_out⌉ get code 3, the next
/// ⌈β·d_out⌉ get code 1, the rest code 0.
pub fn tier_gamma(
    alpha_w: &[Vec<f64>],
    cfg: &TieringConfig,
    registry_hash: u64,
) -> Result<StrategyCode> {
    cfg.validate()?;
    let mut layers = Vec::with_capacity(alpha_w.len());
    for a in alpha_w {
        let order = rank_desc(a)?;
        let k = cfg.tier_size(a.len());
        let mut codes = vec![0u8; a.len()];
        for (pos, &ch) in order.iter().enumerate() {
            codes[ch] = if pos < k {
                3
            } else if pos < 2 * k {
                1
            } else {
                0
            };
        }
        layers.push(codes);
    }
    Ok(StrategyCode {
        registry_hash,
        beta: cfg.wire_beta(),
        bit_table: cfg.bit_table,
        layers,
    })
}

pub fn boost_code(c: u8) -> u8 {
    (c + 1).min(3)
}

pub fn compress_code(c: u8) -> u8 {
    c.saturating_sub(1)
}

/// Per-layer adjustment chosen by Λ.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerAdjust {
    Compress,
    Keep,
    Boost,
}

/// Refined strategy plus the adjustment applied to each layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Refined {
    pub code: StrategyCode,
    pub adjust: Vec<LayerAdjust>,
}

impl Refined {
    pub fn count(&self, a: LayerAdjust) -> usize {
        self.adjust.iter().filter(|&&x| x == a).count()
    }
}

fn apply_adjust(code: &StrategyCode, adjust: &[LayerAdjust]) -> StrategyCode {
    let mut out = code.clone();
    for (layer, a) in out.layers.iter_mut().zip(adjust) {
        match a {
            LayerAdjust::Boost => layer.iter_mut().for_each(|c| *c = boost_code(*c)),
            LayerAdjust::Compress => layer.iter_mut().for_each(|c| *c = compress_code(*c)),
            LayerAdjust::Keep => {}
        }
    }
    out
}

/// Boost the `n_boost` layers with highest α^L and compress the `n_compress`
/// lowest. With `balance`, further layers are compressed (least sensitive
/// first) until the average native bits do not exceed the unrefined average
/// or 3 bits, whichever is lower; if that is impossible the least sensitive
/// boosts are dropped, and without boosts every layer ends up compressed.
pub fn refine_lambda(
    code: &StrategyCode,
    alpha_l: &[f64],
    cfg: &TieringConfig,
    registry: &Registry,
) -> Result<Refined> {
    let n = code.layers.len();
    if alpha_l.len() != n {
        return Err(Error::Strategy(format!(
            "layer sensitivities cover {} layers, strategy has {}",
            alpha_l.len(),
            n
        )));
    }
    let order = rank_desc(alpha_l)?;
    let target = if cfg.balance {
        Some(code.native_average(registry)?.min(BUDGET_LEVELS[0]) + 1e-9)
    } else {
        None
    };
    let n_boost = cfg.n_boost.min(n);
    for nb in (0..=n_boost).rev() {
        let mut adjust = vec![LayerAdjust::Keep; n];
        for &l in &order[..nb] {
            adjust[l] = LayerAdjust::Boost;
        }
        let rest: Vec<usize> = order[nb..].iter().rev().copied().collect();
        let nc = cfg.n_compress.min(rest.len());
        for &l in &rest[..nc] {
            adjust[l] = LayerAdjust::Compress;
        }
        let Some(target) = target else {
            return Ok(Refined {
                code: apply_adjust(code, &adjust),
                adjust,
            });
        };
        let mut next = nc;
        loop {
            let refined = apply_adjust(code, &adjust);
            if refined.native_average(registry)? <= target || (nb == 0 && next == rest.len()) {
                return Ok(Refined {
                    code: refined,
                    adjust,
                });
            }
            if next == rest.len() {
                break;
            }
            adjust[rest[next]] = LayerAdjust::Compress;
            next += 1;
        }
    }
    unreachable!("the last pass always returns")
}

/// Serialize a strategy: header, then per layer 2-bit codes packed
/// little-endian and padded to a byte.
pub fn encode(code: &StrategyCode) -> Result<Vec<u8>> {
    let two = BitWidth::new(2)?;
    if code.layers.len() > u16::MAX as usize {
        return Err(Error::Codec(
            "too many layers for the strategy header".into(),
        ));
    }
    let mut out = Vec::with_capacity(
        20 + 2 * code.layers.len() + code.total_channels() / 4 + code.layers.len(),
    );
    out.extend_from_slice(STRATEGY_MAGIC);
    out.push(STRATEGY_VERSION);
    out.extend_from_slice(&code.registry_hash.to_le_bytes());
    out.extend_from_slice(&((code.beta * BETA_SCALE).round() as u16).to_le_bytes());
    out.push(code.bit_table.id());
    out.extend_from_slice(&(code.layers.len() as u16).to_le_bytes());
    for l in &code.layers {
        if l.len() > u16::MAX as usize {
            return Err(Error::Codec(
                "layer too wide for the strategy header".into(),
            ));
        }
        out.extend_from_slice(&(l.len() as u16).to_le_bytes());
    }
    for l in &code.layers {
        let codes: Vec<u32> = l.iter().map(|&c| c as u32).collect();
        out.extend(quant::pack(&codes, two)?);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<StrategyCode> {
    let two = BitWidth::new(2)?;
    let mut r = Reader::new(bytes);
    if r.take(4)? != STRATEGY_MAGIC {
        return Err(Error::Codec("bad strategy magic".into()));
    }
    let version = r.u8()?;
    if version != STRATEGY_VERSION {
        return Err(Error::Codec(format!(
            "unsupported strategy version {}",
            version
        )));
    }
    let registry_hash = r.u64()?;
    let beta = r.u16()? as f64 / BETA_SCALE;
    let bit_table = BitTable::from_id(r.u8()?)?;
    let n = r.u16()? as usize;
    let counts = (0..n)
        .map(|_| r.u16().map(|c| c as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(n);
    for c in counts {
        let bytes = r.take(quant::packed_len(two, c))?;
        layers.push(
            quant::unpack(bytes, two, c)?
                .into_iter()
                .map(|x| x as u8)
                .collect(),
        );
    }
    r.finish()?;
    Ok(StrategyCode {
        registry_hash,
        beta,
        bit_table,
        layers,
    })
}

/// Payload bits excluding the header.
pub fn payload_bits(code: &StrategyCode) -> usize {
    code.layers.iter().map(|l| 8 * l.len().div_ceil(4)).sum()
}

/// Device resource conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceProfile {
    pub device: u64,
    /// Average bits per trunk weight.
    pub budget_bits: f64,
    /// Downlink bits allowed per round.
    pub bandwidth_limit_bits: u64,
    /// Bit-operations allowed per inference.
    pub compute_limit: f64,
}

impl ResourceProfile {
    pub fn new(device: u64, budget_bits: f64) -> Result<Self> {
        let p = Self {
            device,
            budget_bits,
            bandwidth_limit_bits: u64::MAX,
            compute_limit: f64::INFINITY,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2.0..=8.0).contains(&self.budget_bits) {
            return Err(Error::Config(format!(
                "bit budget {} outside [2, 8]",
                self.budget_bits
            )));
        }
        Ok(())
    }
}

/// Concrete per-channel bit-widths for one device.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedStrategy {
    pub layers: QuantMap,
    pub average_bits: f64,
    /// Bit-operations per inference.
    pub compute_cost: f64,
    /// Budget level whose lookup table was applied.
    pub level: f64,
}

/// Weight-count-weighted mean bit-width over all quantizable weights.
pub fn average_bits(map: &QuantMap, registry: &Registry) -> Result<f64> {
    check_cover(map, registry)?;
    let mut bits = 0.0;
    for (l, m) in registry.layers().iter().zip(map) {
        let per = l.elements_per_channel as f64;
        bits += m.iter().map(|b| b.bits() as f64 * per).sum::<f64>();
    }
    Ok(bits / registry.total_weights() as f64)
}

/// Σ bits × multiply-accumulates per channel.
pub fn compute_cost(map: &QuantMap, registry: &Registry) -> Result<f64> {
    check_cover(map, registry)?;
    Ok(registry
        .layers()
        .iter()
        .zip(map)
        .map(|(l, m)| m.iter().map(|b| b.bits() as f64).sum::<f64>() * l.macs_per_channel as f64)
        .sum())
}

fn check_cover(map: &QuantMap, registry: &Registry) -> Result<()> {
    let ok = map.len() == registry.len()
        && registry
            .layers()
            .iter()
            .zip(map)
            .all(|(l, m)| m.len() == l.out_channels);
    if ok {
        Ok(())
    } else {
        Err(Error::IncompatibleStrategy(
            "strategy layout does not match the model registry".into(),
        ))
    }
}

/// Decode a strategy message and map codes to bits for the device budget.
#[allow(non_snake_case)]
pub fn decode_T(
    payload: &[u8],
    profile: &ResourceProfile,
    registry: &Registry,
) -> Result<DecodedStrategy> {
    profile.validate()?;
    let code = decode(payload)?;
    if code.registry_hash != registry.hash() {
        return Err(Error::IncompatibleStrategy(format!(
            "strategy registry {:016x} does not match model {:016x}",
            code.registry_hash,
            registry.hash()
        )));
    }
    let level = BUDGET_LEVELS
        .iter()
        .copied()
        .find(|&l| l <= profile.budget_bits + 1e-9)
        .expect("validated budget is at least the lowest level");
    let layers = code.map_with(code.bit_table.lookup(level));
    let average = average_bits(&layers, registry)?;
    if average > profile.budget_bits + BUDGET_SLACK {
        return Err(Error::Resource(format!(
            "strategy averages {:.4} bits, budget is {}",
            average, profile.budget_bits
        )));
    }
    let cost = compute_cost(&layers, registry)?;
    if cost > profile.compute_limit {
        return Err(Error::Resource(format!(
            "compute cost {} exceeds limit {}",
            cost, profile.compute_limit
        )));
    }
    Ok(DecodedStrategy {
        layers,
        average_bits: average,
        compute_cost: cost,
        level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{LayerInfo, LayerKind};

    fn registry(widths: &[(usize, usize)]) -> Registry {
        Registry::new(
            widths
                .iter()
                .enumerate()
                .map(|(i, &(out, inp))| LayerInfo {
                    id: format!("l{}", i),
                    kind: LayerKind::Linear,
                    out_channels: out,
                    elements_per_channel: inp,
                    macs_per_channel: inp,
                })
                .collect(),
        )
    }

    fn cfg(beta: f64, nb: usize, nc: usize, balance: bool) -> TieringConfig {
        TieringConfig {
            beta,
            n_boost: nb,
            n_compress: nc,
            balance,
            ..TieringConfig::default()
        }
    }

    #[test]
    fn tier_counts_for_eight_channels() {
        let c = tier_gamma(
            &[vec![0.3, 0.9, 0.1, 0.5, 0.2, 0.7, 0.4, 0.6]],
            &cfg(0.125, 0, 0, false),
            0,
        )
        .unwrap();
        let count = |v: u8| c.layers[0].iter().filter(|&&x| x == v).count();
        assert_eq!((count(3), count(1), count(0)), (1, 1, 6));
        assert_eq!(c.layers[0][1], 3);
        assert_eq!(c.layers[0][5], 1);
    }

    #[test]
    fn tier_ties_and_slices() {
        let c = tier_gamma(&[vec![1.0; 8]], &cfg(0.25, 0, 0, false), 0).unwrap();
        assert_eq!(c.layers[0], vec![3, 3, 1, 1, 0, 0, 0, 0]);
        let c = tier_gamma(
            &[vec![5., 4., 3., 2., 1., 0., 0., 0.]],
            &cfg(0.25, 0, 0, false),
            0,
        )
        .unwrap();
        assert_eq!(c.layers[0], vec![3, 3, 1, 1, 0, 0, 0, 0]);
    }

    #[test]
    fn beta_out_of_range_is_config_error() {
        for b in [0.0, 0.34, -0.1, f64::NAN] {
            assert!(matches!(
                tier_gamma(&[vec![1.0]], &cfg(b, 0, 0, false), 0),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn boost_and_compress_maps() {
        let reg = registry(&[(3, 1), (3, 1), (3, 1)]);
        let code = StrategyCode {
            registry_hash: 0,
            beta: 0.125,
            bit_table: BitTable::B2468,
            layers: vec![vec![0, 1, 3]; 3],
        };
        let r = refine_lambda(&code, &[0.9, 0.5, 0.1], &cfg(0.125, 1, 1, false), &reg).unwrap();
        assert_eq!(
            r.code.layers,
            vec![vec![1, 2, 3], vec![0, 1, 3], vec![0, 0, 2]]
        );
        let r = refine_lambda(&code, &[0.9, 0.5, 0.1], &cfg(0.125, 0, 0, false), &reg).unwrap();
        assert_eq!(r.code, code);
    }

    #[test]
    fn balanced_refinement_never_raises_average() {
        let reg = registry(&[(32, 32); 12]);
        let alpha: Vec<Vec<f64>> = (0..12)
            .map(|l| (0..32).map(|j| ((l * 31 + j * 17) % 29) as f64).collect())
            .collect();
        let c = tier_gamma(&alpha, &TieringConfig::default(), reg.hash()).unwrap();
        assert!((c.native_average(&reg).unwrap() - 3.0).abs() < 1e-12);
        let alpha_l: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let strict = refine_lambda(&c, &alpha_l, &cfg(0.125, 1, 1, false), &reg).unwrap();
        assert!((strict.code.native_average(&reg).unwrap() - 37.25 / 12.0).abs() < 1e-12);
        let bal = refine_lambda(&c, &alpha_l, &TieringConfig::default(), &reg).unwrap();
        assert_eq!(bal.count(LayerAdjust::Boost), 1);
        assert_eq!(bal.count(LayerAdjust::Compress), 4);
        assert_eq!(bal.adjust[11], LayerAdjust::Boost);
        assert!(bal.code.native_average(&reg).unwrap() <= 3.0);
    }

    #[test]
    fn balanced_refinement_drops_boost_when_needed() {
        // one huge layer dominates: boosting it cannot be compensated
        let reg = registry(&[(8, 1000), (8, 1), (8, 1)]);
        let c = tier_gamma(&vec![vec![1.0; 8]; 3], &TieringConfig::default(), 0).unwrap();
        let r = refine_lambda(&c, &[1.0, 0.5, 0.0], &TieringConfig::default(), &reg).unwrap();
        assert_eq!(r.count(LayerAdjust::Boost), 0);
        assert!(r.code.native_average(&reg).unwrap() <= c.native_average(&reg).unwrap());
    }

    #[test]
    fn hand_packed_byte() {
        let code = StrategyCode {
            registry_hash: 7,
            beta: 0.125,
            bit_table: BitTable::B2468,
            layers: vec![vec![1, 2, 3, 0]],
        };
        let bytes = encode(&code).unwrap();
        assert_eq!(*bytes.last().unwrap(), 0x39);
        assert_eq!(decode(&bytes).unwrap(), code);
    }

    #[test]
    fn sixteen_channels_four_payload_bytes() {
        let code = StrategyCode {
            registry_hash: 7,
            beta: 0.125,
            bit_table: BitTable::B2468,
            layers: vec![vec![0; 16]],
        };
        assert_eq!(payload_bits(&code), 32);
        // header: magic 4 + version 1 + hash 8 + beta 2 + table 1 + count 2 + width 2
        assert_eq!(encode(&code).unwrap().len(), 20 + 4);
    }

    #[test]
    fn decode_rejects_corruption() {
        let code = StrategyCode {
            registry_hash: 7,
            beta: 0.25,
            bit_table: BitTable::B2567,
            layers: vec![vec![3; 5], vec![1; 3]],
        };
        let bytes = encode(&code).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }

    fn beta_code(reg: &Registry) -> StrategyCode {
        let alpha: Vec<Vec<f64>> = reg
            .layers()
            .iter()
            .map(|l| (0..l.out_channels).map(|j| j as f64).collect())
            .collect();
        tier_gamma(&alpha, &TieringConfig::default(), reg.hash()).unwrap()
    }

    #[test]
    fn decode_budget_levels() {
        let reg = registry(&[(8, 4), (16, 4)]);
        let bytes = encode(&beta_code(&reg)).unwrap();
        let d3 = decode_T(&bytes, &ResourceProfile::new(0, 3.0).unwrap(), &reg).unwrap();
        assert!((d3.average_bits - 3.0).abs() < 1e-12);
        let d25 = decode_T(&bytes, &ResourceProfile::new(0, 2.5).unwrap(), &reg).unwrap();
        assert!((d25.average_bits - 2.5).abs() < 1e-12);
        assert!(matches!(
            decode_T(&bytes, &ResourceProfile::new(0, 2.0).unwrap(), &reg),
            Err(Error::Resource(_))
        ));
        let d225 = decode_T(&bytes, &ResourceProfile::new(0, 2.25).unwrap(), &reg).unwrap();
        assert!((d225.average_bits - 2.25).abs() < 1e-12);
    }

    #[test]
    fn decode_checks_registry_and_compute() {
        let reg = registry(&[(8, 4)]);
        let bytes = encode(&beta_code(&reg)).unwrap();
        let other = registry(&[(8, 5)]);
        assert!(matches!(
            decode_T(&bytes, &ResourceProfile::new(0, 3.0).unwrap(), &other),
            Err(Error::IncompatibleStrategy(_))
        ));
        let mut p = ResourceProfile::new(0, 3.0).unwrap();
        p.compute_limit = 10.0;
        assert!(matches!(
            decode_T(&bytes, &p, &reg),
            Err(Error::Resource(_))
        ));
        assert!(matches!(
            ResourceProfile::new(0, 1.5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn averages() {
        let reg = registry(&[(2, 3), (2, 3)]);
        let b = |x| BitWidth::new(x).unwrap();
        assert_eq!(average_bits(&vec![vec![b(2); 2]; 2], &reg).unwrap(), 2.0);
        assert_eq!(
            average_bits(&vec![vec![b(2); 2], vec![b(4); 2]], &reg).unwrap(),
            3.0
        );
        let eight = compute_cost(&vec![vec![b(8); 2]; 2], &reg).unwrap();
        let mixed = compute_cost(&vec![vec![b(8), b(2)], vec![b(2); 2]], &reg).unwrap();
        assert!(eight > mixed);
    }

    #[test]
    fn bit_table_names() {
        assert_eq!("2-5-6-7".parse::<BitTable>().unwrap(), BitTable::B2567);
        assert_eq!(BitTable::B2468.to_string(), "2-4-6-8");
        assert!("2-3-4-5".parse::<BitTable>().is_err());
    }
}
