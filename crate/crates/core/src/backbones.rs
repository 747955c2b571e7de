//! Sequential recommenders with frozen random trunks.
//!
//! Only the item embeddings (plus SASRec position embeddings) and the
//! prediction head are trainable. Every trunk layer that carries a weight
//! matrix or filter bank is listed in the [`Registry`] and can be quantized
//! channel-wise.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::quant::{self, BitWidth, PackedTensor};
use crate::tensor::{
    init_params, lit, Eager, Graph, Init, ParamSpec, ParamVars, ParameterSet, Scalar, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Sasrec,
    Caser,
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sasrec => "sasrec",
            Self::Caser => "caser",
        })
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sasrec" => Ok(Self::Sasrec),
            "caser" => Ok(Self::Caser),
            other => Err(Error::Config(format!("unknown architecture `{}`", other))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub architecture: Architecture,
    pub embedding_dim: usize,
    /// SASRec: longest input sequence. Caser: window length L.
    pub max_seq_len: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    /// SASRec feed-forward width; `None` means `embedding_dim`.
    pub ffn_hidden: Option<usize>,
    pub horizontal_filters: usize,
    pub vertical_filters: usize,
    pub filter_heights: Vec<usize>,
    pub item_count: usize,
    /// Dropout rate on trunk activations during training; 0 disables it.
    pub dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::sasrec(1)
    }
}

impl BackboneConfig {
    pub fn sasrec(item_count: usize) -> Self {
        Self {
            architecture: Architecture::Sasrec,
            embedding_dim: 32,
            max_seq_len: 50,
            num_blocks: 2,
            num_heads: 2,
            ffn_hidden: None,
            horizontal_filters: 16,
            vertical_filters: 4,
            filter_heights: vec![2, 3, 4],
            item_count,
            dropout: 0.0,
        }
    }

    pub fn caser(item_count: usize) -> Self {
        Self {
            architecture: Architecture::Caser,
            max_seq_len: 5,
            ..Self::sasrec(item_count)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embedding_dim == 0 || self.max_seq_len == 0 || self.item_count == 0 {
            return bad("embedding_dim, max_seq_len and item_count must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match self.architecture {
            Architecture::Sasrec => {
                if self.num_heads == 0 || !self.embedding_dim.is_multiple_of(self.num_heads) {
                    return bad(format!(
                        "embedding_dim {} not divisible by num_heads {}",
                        self.embedding_dim, self.num_heads
                    ));
                }
                if self.num_blocks == 0 || self.ffn_hidden == Some(0) {
                    return bad("num_blocks and ffn_hidden must be positive".into());
                }
            }
            Architecture::Caser => {
                if self.horizontal_filters == 0 || self.vertical_filters == 0 {
                    return bad("caser filter counts must be positive".into());
                }
                if self.filter_heights.is_empty()
                    || self
                        .filter_heights
                        .iter()
                        .any(|&h| h == 0 || h > self.max_seq_len)
                {
                    return bad(format!(
                        "filter heights {:?} must lie in 1..={}",
                        self.filter_heights, self.max_seq_len
                    ));
                }
            }
        }
        Ok(())
    }

    fn ffn(&self) -> usize {
        self.ffn_hidden.unwrap_or(self.embedding_dim)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Linear,
    Conv { kh: usize, kw: usize },
}

/// One quantizable trunk layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub id: String,
    pub kind: LayerKind,
    pub out_channels: usize,
    pub elements_per_channel: usize,
    /// Multiply-accumulates per output channel for one nominal inference.
    pub macs_per_channel: usize,
}

impl LayerInfo {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.id)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.id)
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.elements_per_channel
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Linear => vec![self.out_channels, self.elements_per_channel],
            LayerKind::Conv { kh, kw } => vec![self.out_channels, kh, kw],
        }
    }
}

/// Ordered list of quantizable layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    layers: Vec<LayerInfo>,
}

impl Registry {
    pub fn new(layers: Vec<LayerInfo>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn total_channels(&self) -> usize {
        self.layers.iter().map(|l| l.out_channels).sum()
    }

    pub fn total_weights(&self) -> usize {
        self.layers.iter().map(|l| l.weight_count()).sum()
    }

    /// Identity of the layer layout, carried by every strategy message.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        for l in &self.layers {
            h.update(l.id.as_bytes());
            h.update([0]);
            h.update((l.out_channels as u64).to_le_bytes());
            h.update((l.elements_per_channel as u64).to_le_bytes());
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}

/// Weight source for one registry layer during a forward pass.
#[derive(Clone, Debug)]
pub enum LayerWeight<N> {
    /// A float weight node (full precision, fake-quantized, or a training mixture).
    Dense(N),
    /// Bit-packed codes run through the packed kernels (inference only).
    Packed(Arc<PackedTensor>),
}

/// Weights for every registry layer plus optional activation quantization.
#[derive(Clone, Debug)]
pub struct LayerWeights<N> {
    pub layers: Vec<LayerWeight<N>>,
    pub act_bits: Option<BitWidth>,
}

/// Per-layer, per-channel bit-widths covering a registry.
pub type QuantMap = Vec<Vec<BitWidth>>;

/// Which prefix representations to produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Positions {
    All,
    Last,
}

/// Padding id for head-padded sequences.
pub const PAD: usize = usize::MAX;

/// Head-padded item sequences with the device each row belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    items: Vec<Vec<usize>>,
    devices: Vec<u64>,
}

impl SequenceBatch {
    /// Pad (at the head) or truncate (keeping the most recent items) to `len`.
    pub fn from_sequences(seqs: &[(u64, Vec<usize>)], len: usize) -> Self {
        let mut items = Vec::with_capacity(seqs.len());
        let mut devices = Vec::with_capacity(seqs.len());
        for (d, s) in seqs {
            let tail = &s[s.len().saturating_sub(len)..];
            let mut row = vec![PAD; len - tail.len()];
            row.extend_from_slice(tail);
            items.push(row);
            devices.push(*d);
        }
        Self { items, devices }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn device(&self, i: usize) -> u64 {
        self.devices[i]
    }

    pub fn mask(&self, i: usize) -> Vec<bool> {
        self.items[i].iter().map(|&x| x != PAD).collect()
    }

    /// Unpadded items of row `i`.
    pub fn row(&self, i: usize) -> Vec<usize> {
        self.items[i]
            .iter()
            .copied()
            .filter(|&x| x != PAD)
            .collect()
    }
}

/// Candidate items shipped for one reranking session.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet<T> {
    pub device: u64,
    pub items: Vec<usize>,
    /// `[p, d]`
    pub embeddings: Tensor<T>,
}

/// A backbone with a frozen random trunk.
#[derive(Clone, Debug)]
pub struct FrozenModel<T> {
    config: BackboneConfig,
    trunk: ParameterSet<T>,
    trainable: ParameterSet<T>,
    registry: Registry,
}

pub const ITEM_EMB: &str = "item_emb";
pub const POS_EMB: &str = "pos_emb";
pub const HEAD_W: &str = "head.weight";
pub const HEAD_B: &str = "head.bias";

fn build_registry(c: &BackboneConfig) -> Registry {
    let d = c.embedding_dim;
    let mut layers = Vec::new();
    match c.architecture {
        Architecture::Sasrec => {
            let rows = c.max_seq_len;
            let lin = |id: String, out: usize, inp: usize| LayerInfo {
                id,
                kind: LayerKind::Linear,
                out_channels: out,
                elements_per_channel: inp,
                macs_per_channel: rows * inp,
            };
            for b in 0..c.num_blocks {
                for p in ["q", "k", "v", "o"] {
                    layers.push(lin(format!("block{}.attn.{}", b, p), d, d));
                }
                layers.push(lin(format!("block{}.ffn.1", b), c.ffn(), d));
                layers.push(lin(format!("block{}.ffn.2", b), d, c.ffn()));
            }
        }
        Architecture::Caser => {
            let l = c.max_seq_len;
            for &h in &c.filter_heights {
                layers.push(LayerInfo {
                    id: format!("caser.h{}", h),
                    kind: LayerKind::Conv { kh: h, kw: d },
                    out_channels: c.horizontal_filters,
                    elements_per_channel: h * d,
                    macs_per_channel: (l - h + 1) * h * d,
                });
            }
            layers.push(LayerInfo {
                id: "caser.v".into(),
                kind: LayerKind::Conv { kh: l, kw: 1 },
                out_channels: c.vertical_filters,
                elements_per_channel: l,
                macs_per_channel: l * d,
            });
            let fc_in = c.vertical_filters * d + c.horizontal_filters * c.filter_heights.len();
            layers.push(LayerInfo {
                id: "caser.fc".into(),
                kind: LayerKind::Linear,
                out_channels: d,
                elements_per_channel: fc_in,
                macs_per_channel: fc_in,
            });
        }
    }
    Registry::new(layers)
}

impl<T: Scalar> FrozenModel<T> {
    /// Deterministic construction; the trunk is marked frozen.
    pub fn build(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let registry = build_registry(config);
        let mut trunk_specs = Vec::new();
        for l in registry.layers() {
            let (fan_in, fan_out) = match l.kind {
                LayerKind::Linear => (l.elements_per_channel, l.out_channels),
                LayerKind::Conv { kh, kw } => (kh * kw, l.out_channels * kh * kw),
            };
            trunk_specs.push(ParamSpec::new(
                l.weight_name(),
                &l.weight_shape(),
                Init::Xavier { fan_in, fan_out },
                false,
            ));
            trunk_specs.push(ParamSpec::bias(l.bias_name(), l.out_channels, false));
        }
        let d = config.embedding_dim;
        let mut train_specs = vec![
            ParamSpec::dense(ITEM_EMB, config.item_count, d, true),
            ParamSpec::dense(HEAD_W, d, d, true),
            ParamSpec::bias(HEAD_B, d, true),
        ];
        if config.architecture == Architecture::Sasrec {
            train_specs.push(ParamSpec::dense(POS_EMB, config.max_seq_len, d, true));
        }
        Ok(Self {
            config: config.clone(),
            trunk: init_params(&trunk_specs, seed),
            trainable: init_params(&train_specs, seed ^ 0x5EED_7A1B_u64),
            registry,
        })
    }

    /// Reassemble from stored parameter sets (checkpoint loading).
    pub fn from_parts(
        config: BackboneConfig,
        trunk: ParameterSet<T>,
        trainable: ParameterSet<T>,
    ) -> Result<Self> {
        config.validate()?;
        let registry = build_registry(&config);
        for l in registry.layers() {
            let w = trunk
                .get(&l.weight_name())
                .ok_or_else(|| Error::Config(format!("checkpoint lacks `{}`", l.weight_name())))?;
            if w.shape() != l.weight_shape().as_slice() {
                return Err(Error::Config(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    l.weight_name(),
                    w.shape(),
                    l.weight_shape()
                )));
            }
        }
        Ok(Self {
            config,
            trunk,
            trainable,
            registry,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn trunk(&self) -> &ParameterSet<T> {
        &self.trunk
    }

    pub fn trainable(&self) -> &ParameterSet<T> {
        &self.trainable
    }

    pub fn trainable_mut(&mut self) -> &mut ParameterSet<T> {
        &mut self.trainable
    }

    pub fn trunk_hash(&self) -> [u8; 32] {
        self.trunk.content_hash()
    }

    pub fn layer_weight(&self, i: usize) -> &Arc<Tensor<T>> {
        self.trunk
            .get_arc(&self.registry.layers()[i].weight_name())
            .expect("registry weight")
    }

    /// Bind trunk (frozen) and trainable parameters into a graph.
    pub fn bind<G: Graph<T>>(&self, g: &G) -> ParamVars<G::Node> {
        let mut vars = self.trunk.bind(g);
        vars.extend(self.trainable.bind(g));
        vars
    }

    /// Full-precision trunk weights.
    pub fn float_weights<G: Graph<T>>(&self, vars: &ParamVars<G::Node>) -> LayerWeights<G::Node> {
        LayerWeights {
            layers: self
                .registry
                .layers()
                .iter()
                .map(|l| LayerWeight::Dense(vars[&l.weight_name()].clone()))
                .collect(),
            act_bits: None,
        }
    }

    /// Fake-quantized float weights for a quantization map.
    pub fn fake_quant_weights<G: Graph<T>>(
        &self,
        g: &G,
        map: &QuantMap,
    ) -> Result<LayerWeights<G::Node>> {
        self.check_map(map)?;
        let mut layers = Vec::with_capacity(map.len());
        for (i, bits) in map.iter().enumerate() {
            let w = self.layer_weight(i);
            let params = quant::calibrate_channels(w, bits)?;
            layers.push(LayerWeight::Dense(
                g.constant(quant::fake_quant_channels(w, &params)?),
            ));
        }
        Ok(LayerWeights {
            layers,
            act_bits: None,
        })
    }

    /// Bit-packed weights for a quantization map.
    pub fn packed_weights<N>(&self, map: &QuantMap) -> Result<LayerWeights<N>> {
        self.check_map(map)?;
        let layers = map
            .iter()
            .enumerate()
            .map(|(i, bits)| {
                Ok(LayerWeight::Packed(Arc::new(PackedTensor::quantize(
                    self.layer_weight(i),
                    bits,
                )?)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerWeights {
            layers,
            act_bits: None,
        })
    }

    pub fn check_map(&self, map: &QuantMap) -> Result<()> {
        if map.len() != self.registry.len() {
            return Err(Error::Strategy(format!(
                "quantization map covers {} layers, registry has {}",
                map.len(),
                self.registry.len()
            )));
        }
        for (l, bits) in self.registry.layers().iter().zip(map) {
            if bits.len() != l.out_channels {
                return Err(Error::Strategy(format!(
                    "layer `{}` has {} channels, map gives {}",
                    l.id,
                    l.out_channels,
                    bits.len()
                )));
            }
        }
        Ok(())
    }

    /// Representations `[rows, d]` after the prediction head, one per requested
    /// prefix position of `seq`. An empty sequence yields the head applied to a
    /// zero state.
    pub fn encode<G: Graph<T>>(
        &self,
        g: &G,
        vars: &ParamVars<G::Node>,
        seq: &[usize],
        weights: &LayerWeights<G::Node>,
        positions: Positions,
    ) -> Result<G::Node> {
        if weights.layers.len() != self.registry.len() {
            return Err(Error::Strategy(format!(
                "{} layer weights for {} registry layers",
                weights.layers.len(),
                self.registry.len()
            )));
        }
        let d = self.config.embedding_dim;
        if let Some(&bad) = seq.iter().find(|&&i| i >= self.config.item_count) {
            return Err(Error::Data(format!(
                "item id {} outside catalog of {}",
                bad, self.config.item_count
            )));
        }
        let trunk_out = if seq.is_empty() {
            g.constant(Tensor::zeros(&[1, d]))
        } else {
            match self.config.architecture {
                Architecture::Sasrec => self.sasrec_trunk(g, vars, seq, weights, positions)?,
                Architecture::Caser => self.caser_trunk(g, vars, seq, weights, positions)?,
            }
        };
        g.linear(&trunk_out, &vars[HEAD_W], Some(&vars[HEAD_B]))
    }

    fn sasrec_trunk<G: Graph<T>>(
        &self,
        g: &G,
        vars: &ParamVars<G::Node>,
        seq: &[usize],
        weights: &LayerWeights<G::Node>,
        positions: Positions,
    ) -> Result<G::Node> {
        let c = &self.config;
        let d = c.embedding_dim;
        let seq = &seq[seq.len().saturating_sub(c.max_seq_len)..];
        let n = seq.len();
        let emb = g.gather(&vars[ITEM_EMB], seq.to_vec())?;
        let emb = g.scale(&emb, (d as f64).sqrt())?;
        let pos = g.gather(&vars[POS_EMB], (c.max_seq_len - n..c.max_seq_len).collect())?;
        let mut x = g.add(&emb, &pos)?;

        let heads = c.num_heads;
        let dh = d / heads;
        let selectors: Vec<G::Node> = (0..heads)
            .map(|h| {
                g.constant(Tensor::from_fn(&[d, dh], |i| {
                    let (r, col) = (i / dh, i % dh);
                    if r == h * dh + col {
                        T::one()
                    } else {
                        T::zero()
                    }
                }))
            })
            .collect();
        let mask = g.constant(Tensor::from_fn(&[n, n], |i| {
            if i % n > i / n {
                lit(-1e9)
            } else {
                T::zero()
            }
        }));
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        for b in 0..c.num_blocks {
            let base = b * 6;
            let h = g.layer_norm(&x)?;
            let q = self.project(g, vars, weights, base, &h)?;
            let k = self.project(g, vars, weights, base + 1, &h)?;
            let v = self.project(g, vars, weights, base + 2, &h)?;
            let mut outs = Vec::with_capacity(heads);
            for sel in &selectors {
                let qh = g.matmul(&q, sel)?;
                let kh = g.matmul(&k, sel)?;
                let vh = g.matmul(&v, sel)?;
                let kt = g.transpose(&kh)?;
                let s = g.scale(&g.matmul(&qh, &kt)?, inv_sqrt)?;
                let p = g.softmax(&g.add(&s, &mask)?)?;
                outs.push(g.matmul(&p, &vh)?);
            }
            let refs: Vec<&G::Node> = outs.iter().collect();
            let attn = if refs.len() == 1 {
                outs[0].clone()
            } else {
                g.concat(&refs, 1)?
            };
            let o = self.project(g, vars, weights, base + 3, &attn)?;
            x = g.add(&x, &o)?;
            let h2 = g.layer_norm(&x)?;
            let f1 = g.relu(&self.project(g, vars, weights, base + 4, &h2)?)?;
            let f2 = self.project(g, vars, weights, base + 5, &f1)?;
            x = g.add(&x, &f2)?;
        }
        let x = g.layer_norm(&x)?;
        match positions {
            Positions::All => Ok(x),
            Positions::Last => g.gather(&x, vec![n - 1]),
        }
    }

    fn caser_trunk<G: Graph<T>>(
        &self,
        g: &G,
        vars: &ParamVars<G::Node>,
        seq: &[usize],
        weights: &LayerWeights<G::Node>,
        positions: Positions,
    ) -> Result<G::Node> {
        let c = &self.config;
        let (d, l) = (c.embedding_dim, c.max_seq_len);
        let ends: Vec<usize> = match positions {
            Positions::All => (0..seq.len()).collect(),
            Positions::Last => vec![seq.len() - 1],
        };
        let n = ends.len();
        let mut idx = Vec::with_capacity(n * l);
        let mut keep = Vec::with_capacity(n * l);
        for &t in &ends {
            for j in 0..l {
                // window position j holds seq[t + 1 - l + j] when it exists
                let src = (t + 1 + j).checked_sub(l);
                match src {
                    Some(s) => {
                        idx.push(seq[s]);
                        keep.push(T::one());
                    }
                    None => {
                        idx.push(0);
                        keep.push(T::zero());
                    }
                }
            }
        }
        let emb = g.gather(&vars[ITEM_EMB], idx)?;
        let emb = g.mul(&emb, &g.constant(Tensor::new(vec![n * l, 1], keep)?))?;
        let e = g.reshape(&emb, &[n, l, d])?;

        let nh = c.filter_heights.len();
        let mut parts = Vec::with_capacity(nh + 1);
        for (i, &h) in c.filter_heights.iter().enumerate() {
            let y = self.conv(g, vars, weights, i, &e)?;
            let y = g.relu(&y)?;
            let y = g.reshape(&y, &[n, c.horizontal_filters, l - h + 1])?;
            parts.push(g.max_over_time(&y)?);
        }
        let v = self.conv(g, vars, weights, nh, &e)?;
        parts.insert(0, g.reshape(&v, &[n, c.vertical_filters * d])?);
        let refs: Vec<&G::Node> = parts.iter().collect();
        let cat = g.concat(&refs, 1)?;
        let fc = self.project(g, vars, weights, nh + 1, &cat)?;
        g.relu(&fc)
    }

    fn act_input<G: Graph<T>>(&self, g: &G, x: &G::Node, act: Option<BitWidth>) -> Result<G::Node> {
        match act {
            None => Ok(x.clone()),
            Some(bits) => {
                let qp = quant::minmax_qparams(g.value(x).data(), bits)?;
                g.fake_quant(x, vec![qp])
            }
        }
    }

    fn project<G: Graph<T>>(
        &self,
        g: &G,
        vars: &ParamVars<G::Node>,
        weights: &LayerWeights<G::Node>,
        i: usize,
        x: &G::Node,
    ) -> Result<G::Node> {
        let info = &self.registry.layers()[i];
        let bias = &vars[&info.bias_name()];
        match &weights.layers[i] {
            LayerWeight::Dense(w) => {
                let x = self.act_input(g, x, weights.act_bits)?;
                g.linear(&x, w, Some(bias))
            }
            LayerWeight::Packed(p) => {
                let out = quant::quantized_linear_forward(
                    p,
                    &g.value(x),
                    Some(&g.value(bias)),
                    weights.act_bits,
                )?;
                packed_result(g, out)
            }
        }
    }

    fn conv<G: Graph<T>>(
        &self,
        g: &G,
        vars: &ParamVars<G::Node>,
        weights: &LayerWeights<G::Node>,
        i: usize,
        x: &G::Node,
    ) -> Result<G::Node> {
        let info = &self.registry.layers()[i];
        let LayerKind::Conv { kh, kw } = info.kind else {
            return Err(Error::Config(format!("layer `{}` is not a conv", info.id)));
        };
        let bias = g.reshape(&vars[&info.bias_name()], &[info.out_channels, 1, 1])?;
        let y = match &weights.layers[i] {
            LayerWeight::Dense(w) => {
                let x = self.act_input(g, x, weights.act_bits)?;
                let w = g.reshape(w, &[info.out_channels, kh, kw])?;
                g.conv2d(&x, &w)?
            }
            LayerWeight::Packed(p) => {
                let out =
                    quant::quantized_conv_forward(p, (kh, kw), &g.value(x), weights.act_bits)?;
                packed_result(g, out)?
            }
        };
        g.add(&y, &bias)
    }

    /// Quantized (or full-precision) forward of a batch, one representation per row.
    pub fn forward(
        &self,
        batch: &SequenceBatch,
        quant_map: Option<&QuantMap>,
        act_bits: Option<BitWidth>,
    ) -> Result<Tensor<T>> {
        let g = Eager::<T>::new();
        let vars = self.bind(&g);
        let mut weights = match quant_map {
            Some(m) => self.packed_weights(m)?,
            None => self.float_weights::<Eager<T>>(&vars),
        };
        weights.act_bits = act_bits;
        let d = self.config.embedding_dim;
        let mut out = Vec::with_capacity(batch.len() * d);
        for i in 0..batch.len() {
            let rep = self.encode(&g, &vars, &batch.row(i), &weights, Positions::Last)?;
            out.extend_from_slice(rep.data());
        }
        Tensor::new(vec![batch.len(), d], out)
    }

    /// Candidate embeddings for a session.
    pub fn candidates(&self, device: u64, items: &[usize]) -> Result<CandidateSet<T>> {
        let table = self.trainable.get(ITEM_EMB).expect("item embeddings");
        let e = crate::tensor::eval_primitive(
            &crate::tensor::Primitive::Gather {
                indices: items.to_vec(),
            },
            &[table],
        )?;
        Ok(CandidateSet {
            device,
            items: items.to_vec(),
            embeddings: e,
        })
    }
}

fn packed_result<T: Scalar, G: Graph<T>>(g: &G, out: Tensor<T>) -> Result<G::Node> {
    // packed kernels are inference-only; a recording graph would silently drop gradients
    if g.records_gradients() {
        return Err(Error::Contract(
            "packed kernels cannot run on a gradient tape".into(),
        ));
    }
    Ok(g.constant(out))
}

/// Dot-product scores of one representation against each candidate.
pub fn score_candidates<T: Scalar>(rep: &[T], candidates: &CandidateSet<T>) -> Result<Vec<T>> {
    let d = rep.len();
    if candidates.embeddings.shape().get(1) != Some(&d) {
        return Err(crate::error::shape_err(
            "score",
            format!(
                "representation dim {} vs candidate shape {:?}",
                d,
                candidates.embeddings.shape()
            ),
        ));
    }
    Ok((0..candidates.items.len())
        .map(|i| {
            candidates
                .embeddings
                .row(i)
                .iter()
                .zip(rep)
                .map(|(&a, &b)| a * b)
                .sum()
        })
        .collect())
}

/// Candidate indices ordered by descending score; ties keep index order.
pub fn rank_candidates<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(b: u8) -> BitWidth {
        BitWidth::new(b).unwrap()
    }

    fn uniform_map(r: &Registry, b: u8) -> QuantMap {
        r.layers()
            .iter()
            .map(|l| vec![bits(b); l.out_channels])
            .collect()
    }

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (*x as f64) * (*y as f64))
            .sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn sasrec_registry_has_twelve_layers() {
        let m = FrozenModel::<f32>::build(&BackboneConfig::sasrec(100), 1).unwrap();
        assert_eq!(m.registry().len(), 12);
        assert_eq!(m.registry().total_channels(), 384);
    }

    #[test]
    fn caser_registry_counts_conv_groups_and_fc() {
        let m = FrozenModel::<f32>::build(&BackboneConfig::caser(100), 1).unwrap();
        let convs = m
            .registry()
            .layers()
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv { .. }))
            .count();
        assert_eq!((convs, m.registry().len()), (4, 5));
        let mut cfg = BackboneConfig::caser(100);
        cfg.filter_heights = vec![1, 2, 3, 4];
        let m = FrozenModel::<f32>::build(&cfg, 1).unwrap();
        assert_eq!(m.registry().len(), 6);
    }

    #[test]
    fn invalid_heads_is_config_error() {
        let mut cfg = BackboneConfig::sasrec(10);
        cfg.num_heads = 3;
        assert!(matches!(
            FrozenModel::<f32>::build(&cfg, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn build_is_deterministic() {
        let a = FrozenModel::<f32>::build(&BackboneConfig::sasrec(50), 9).unwrap();
        let b = FrozenModel::<f32>::build(&BackboneConfig::sasrec(50), 9).unwrap();
        assert_eq!(a.registry(), b.registry());
        assert_eq!(a.trunk_hash(), b.trunk_hash());
        assert_eq!(a.trainable().content_hash(), b.trainable().content_hash());
    }

    fn batch() -> SequenceBatch {
        SequenceBatch::from_sequences(
            &[
                (0, vec![3, 5, 7, 9, 11, 2]),
                (1, vec![1, 4]),
                (2, vec![8; 60]),
            ],
            50,
        )
    }

    #[test]
    fn eight_bit_close_to_full_precision() {
        for cfg in [BackboneConfig::sasrec(20), BackboneConfig::caser(20)] {
            let m = FrozenModel::<f32>::build(&cfg, 3).unwrap();
            let fp = m.forward(&batch(), None, None).unwrap();
            let q8 = m
                .forward(&batch(), Some(&uniform_map(m.registry(), 8)), None)
                .unwrap();
            for r in 0..3 {
                let c = cosine(fp.row(r), q8.row(r));
                assert!(c > 0.99, "{:?} row {} cosine {}", cfg.architecture, r, c);
            }
        }
    }

    #[test]
    fn empty_sequence_gives_constant_state() {
        for cfg in [BackboneConfig::sasrec(20), BackboneConfig::caser(20)] {
            let m = FrozenModel::<f32>::build(&cfg, 3).unwrap();
            let b = SequenceBatch::from_sequences(&[(0, vec![]), (1, vec![])], 5);
            let out = m.forward(&b, None, None).unwrap();
            assert!(out.all_finite());
            assert_eq!(out.row(0), out.row(1));
            assert_eq!(out.row(0), m.trainable().get(HEAD_B).unwrap().data());
        }
    }

    #[test]
    fn forward_is_pure() {
        let m = FrozenModel::<f32>::build(&BackboneConfig::sasrec(20), 3).unwrap();
        let map = uniform_map(m.registry(), 4);
        let a = m.forward(&batch(), Some(&map), None).unwrap();
        let b = m.forward(&batch(), Some(&map), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn incomplete_map_is_strategy_error() {
        let m = FrozenModel::<f32>::build(&BackboneConfig::sasrec(20), 3).unwrap();
        let mut map = uniform_map(m.registry(), 4);
        map.pop();
        assert!(matches!(
            m.forward(&batch(), Some(&map), None),
            Err(Error::Strategy(_))
        ));
        let mut map = uniform_map(m.registry(), 4);
        map[3].pop();
        assert!(matches!(
            m.forward(&batch(), Some(&map), None),
            Err(Error::Strategy(_))
        ));
    }

    #[test]
    fn packed_and_fake_quant_paths_agree() {
        for cfg in [BackboneConfig::sasrec(20), BackboneConfig::caser(20)] {
            let m = FrozenModel::<f64>::build(&cfg, 5).unwrap();
            let map: QuantMap = m
                .registry()
                .layers()
                .iter()
                .map(|l| {
                    (0..l.out_channels)
                        .map(|j| bits([2, 4, 6, 8][j % 4]))
                        .collect()
                })
                .collect();
            let g = Eager::<f64>::new();
            let vars = m.bind(&g);
            let packed = m.packed_weights::<Arc<Tensor<f64>>>(&map).unwrap();
            let fq = m.fake_quant_weights(&g, &map).unwrap();
            let seq = [1, 2, 3, 4, 5, 6, 7];
            let a = m.encode(&g, &vars, &seq, &packed, Positions::All).unwrap();
            let b = m.encode(&g, &vars, &seq, &fq, Positions::All).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-9);
        }
    }

    #[test]
    fn changing_one_channel_only_moves_its_output() {
        // single-layer probe: Caser FC output channel j depends only on row j
        let m = FrozenModel::<f64>::build(&BackboneConfig::caser(20), 5).unwrap();
        let fc = m.registry().len() - 1;
        let w = m.layer_weight(fc).clone();
        let x = Tensor::<f64>::from_fn(&[2, w.shape()[1]], |i| ((i * 7) % 11) as f64 * 0.1 - 0.5);
        let mut bits_a = vec![bits(8); w.shape()[0]];
        let pa = PackedTensor::quantize(&w, &bits_a).unwrap();
        bits_a[3] = bits(2);
        let pb = PackedTensor::quantize(&w, &bits_a).unwrap();
        let ya = quant::quantized_linear_forward(&pa, &x, None, None).unwrap();
        let yb = quant::quantized_linear_forward(&pb, &x, None, None).unwrap();
        let cols = w.shape()[0];
        for i in 0..ya.len() {
            if i % cols == 3 {
                assert_ne!(ya.data()[i], yb.data()[i]);
            } else {
                assert_eq!(ya.data()[i], yb.data()[i]);
            }
        }
    }

    #[test]
    fn scoring_and_ranking() {
        let cands = CandidateSet {
            device: 0,
            items: vec![0, 1, 2],
            embeddings: Tensor::from_f64(&[3, 2], &[0.0, 1.0, 1.0, 0.0, -1.0, 0.0]).unwrap(),
        };
        let s = score_candidates(&[1.0, 0.0], &cands).unwrap();
        assert_eq!(s, vec![0.0, 1.0, -1.0]);
        assert_eq!(rank_candidates(&s), vec![1, 0, 2]);
        let z = score_candidates(&[0.0, 0.0], &cands).unwrap();
        assert_eq!(rank_candidates(&z), vec![0, 1, 2]);
        assert!(score_candidates(&[1.0], &cands).is_err());
    }

    #[test]
    fn hundred_and_one_candidates_score() {
        let m = FrozenModel::<f32>::build(&BackboneConfig::sasrec(200), 1).unwrap();
        let items: Vec<usize> = (0..101).collect();
        let c = m.candidates(7, &items).unwrap();
        let rep = m.forward(&batch(), None, None).unwrap();
        assert_eq!(score_candidates(rep.row(0), &c).unwrap().len(), 101);
    }
}
