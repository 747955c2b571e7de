//! User profiling and hypernetwork sensitivity estimation.
//!
//! A GRU summarizes the most recent interactions into a profile `z`. Per
//! registry layer, a filter hypernet scores output channels (α^F) and an
//! element hypernet emits rank-r factors whose product scores individual
//! weights (α^E). A global hypernet scores whole layers (α^L).

use serde::{Deserialize, Serialize};

use crate::backbones::Registry;
use crate::error::{Error, Result};
use crate::tensor::{
    eval_primitive, init_params, Eager, Graph, ParamSpec, ParamVars, ParameterSet, Primitive,
    Scalar, Tensor,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaliencyConfig {
    /// Profile dimension l.
    pub profile_dim: usize,
    /// Hidden width of every hypernet.
    pub hidden: usize,
    /// Rank of the element-sensitivity factors.
    pub rank: usize,
    /// Number of recent interactions fed to the profiler.
    pub window: usize,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            profile_dim: 32,
            hidden: 64,
            rank: 4,
            window: 20,
        }
    }
}

impl SaliencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.profile_dim == 0 || self.hidden == 0 || self.rank == 0 || self.window == 0 {
            return Err(Error::Config(
                "profile_dim, hidden, rank and window must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Device profile vector.
#[derive(Clone, Debug, PartialEq)]
pub struct UserEmbedding<T> {
    pub device: u64,
    pub z: Vec<T>,
    pub window_len: usize,
    pub cold_start: bool,
}

impl<T: Scalar> UserEmbedding<T> {
    pub fn cold(device: u64, dim: usize) -> Self {
        Self {
            device,
            z: vec![T::zero(); dim],
            window_len: 0,
            cold_start: true,
        }
    }
}

/// Sensitivity tensors for one profile, as graph nodes.
#[derive(Clone, Debug)]
pub struct SensitivityNodes<N> {
    /// α^F per layer, `[d_out]`.
    pub filter: Vec<N>,
    /// Element factors per layer: `u` `[r, d_out]`, `v` `[r, d_in]`.
    pub factors: Vec<(N, N)>,
    /// S per layer, `[d_out]`.
    pub l1: Vec<N>,
    /// α^W per layer, `[d_out]`.
    pub weighted: Vec<N>,
    /// α^L, `[layers]`.
    pub layer: N,
}

/// Materialized sensitivities.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivitySet {
    pub filter: Vec<Vec<f64>>,
    pub factors: Vec<(Tensor<f64>, Tensor<f64>)>,
    pub l1: Vec<Vec<f64>>,
    pub weighted: Vec<Vec<f64>>,
    pub layer: Vec<f64>,
    pub cold_start: bool,
}

impl SensitivitySet {
    /// Uniform sensitivities used when a device has no history.
    pub fn uniform(registry: &Registry, rank: usize) -> Self {
        let n = registry.len();
        let mut s = Self {
            filter: Vec::with_capacity(n),
            factors: Vec::with_capacity(n),
            l1: Vec::with_capacity(n),
            weighted: Vec::with_capacity(n),
            layer: vec![1.0 / n.max(1) as f64; n],
            cold_start: true,
        };
        for l in registry.layers() {
            let d = l.out_channels;
            s.filter.push(vec![0.0; d]);
            s.factors.push((
                Tensor::zeros(&[rank, d]),
                Tensor::zeros(&[rank, l.elements_per_channel]),
            ));
            s.l1.push(vec![1.0; d]);
            s.weighted.push(vec![1.0 / d as f64; d]);
        }
        s
    }
}

pub const GRU_INPUT: [&str; 3] = ["gru.w_ir", "gru.w_iz", "gru.w_in"];
pub const GRU_HIDDEN: [&str; 3] = ["gru.w_hr", "gru.w_hz", "gru.w_hn"];
pub const GRU_INPUT_BIAS: [&str; 3] = ["gru.b_ir", "gru.b_iz", "gru.b_in"];
pub const GRU_HIDDEN_BIAS: [&str; 3] = ["gru.b_hr", "gru.b_hz", "gru.b_hn"];

fn filter_name(i: usize, p: &str) -> String {
    format!("hyper.f{}.{}", i, p)
}

fn element_name(i: usize, p: &str) -> String {
    format!("hyper.e{}.{}", i, p)
}

fn layer_name(p: &str) -> String {
    format!("hyper.l.{}", p)
}

/// Parameter layout of the profiler and all hypernets for a registry.
pub fn saliency_specs(
    cfg: &SaliencyConfig,
    registry: &Registry,
    item_dim: usize,
) -> Vec<ParamSpec> {
    let (l, h, r) = (cfg.profile_dim, cfg.hidden, cfg.rank);
    let mut specs = Vec::new();
    for i in 0..3 {
        specs.push(ParamSpec::dense(GRU_INPUT[i], l, item_dim, true));
        specs.push(ParamSpec::dense(GRU_HIDDEN[i], l, l, true));
        specs.push(ParamSpec::bias(GRU_INPUT_BIAS[i], l, true));
        specs.push(ParamSpec::bias(GRU_HIDDEN_BIAS[i], l, true));
    }
    for (i, info) in registry.layers().iter().enumerate() {
        let (d_out, d_in) = (info.out_channels, info.elements_per_channel);
        specs.push(ParamSpec::dense(filter_name(i, "w1"), h, l, true));
        specs.push(ParamSpec::bias(filter_name(i, "b1"), h, true));
        specs.push(ParamSpec::dense(filter_name(i, "w2"), d_out, h, true));
        specs.push(ParamSpec::bias(filter_name(i, "b2"), d_out, true));
        specs.push(ParamSpec::dense(element_name(i, "w1"), h, l, true));
        specs.push(ParamSpec::bias(element_name(i, "b1"), h, true));
        specs.push(ParamSpec::dense(element_name(i, "wu"), r * d_out, h, true));
        specs.push(ParamSpec::bias(element_name(i, "bu"), r * d_out, true));
        specs.push(ParamSpec::dense(element_name(i, "wv"), r * d_in, h, true));
        specs.push(ParamSpec::bias(element_name(i, "bv"), r * d_in, true));
    }
    specs.push(ParamSpec::dense(layer_name("w1"), h, l, true));
    specs.push(ParamSpec::bias(layer_name("b1"), h, true));
    specs.push(ParamSpec::dense(layer_name("w2"), registry.len(), h, true));
    specs.push(ParamSpec::bias(layer_name("b2"), registry.len(), true));
    specs
}

/// Profiler and hypernetwork parameters bound to one registry.
#[derive(Clone, Debug)]
pub struct Saliency<T> {
    config: SaliencyConfig,
    registry: Registry,
    params: ParameterSet<T>,
}

impl<T: Scalar> Saliency<T> {
    pub fn build(
        cfg: &SaliencyConfig,
        registry: &Registry,
        item_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            config: cfg.clone(),
            registry: registry.clone(),
            params: init_params(&saliency_specs(cfg, registry, item_dim), seed),
        })
    }

    pub fn from_parts(
        cfg: SaliencyConfig,
        registry: Registry,
        params: ParameterSet<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        for l in registry.layers().iter().enumerate() {
            params.get_arc(&filter_name(l.0, "w2"))?;
        }
        Ok(Self {
            config: cfg,
            registry,
            params,
        })
    }

    pub fn config(&self) -> &SaliencyConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<T> {
        &mut self.params
    }

    /// The most recent `window` items of a history.
    pub fn window<'a>(&self, history: &'a [usize]) -> &'a [usize] {
        &history[history.len().saturating_sub(self.config.window)..]
    }

    /// Final GRU hidden state `[1, l]` over the embeddings of `window`, or
    /// `None` for an empty window.
    pub fn profile<G: Graph<T>>(
        &self,
        g: &G,
        vars: &ParamVars<G::Node>,
        item_emb: &G::Node,
        window: &[usize],
    ) -> Result<Option<G::Node>> {
        if window.is_empty() {
            return Ok(None);
        }
        let l = self.config.profile_dim;
        let x = g.gather(item_emb, window.to_vec())?;
        let proj: Vec<G::Node> = (0..3)
            .map(|i| g.linear(&x, &vars[GRU_INPUT[i]], Some(&vars[GRU_INPUT_BIAS[i]])))
            .collect::<Result<_>>()?;
        let mut h = g.constant(Tensor::zeros(&[1, l]));
        let one = g.constant(Tensor::full(&[1, l], T::one()));
        for t in 0..window.len() {
            let xr = g.gather(&proj[0], vec![t])?;
            let xz = g.gather(&proj[1], vec![t])?;
            let xn = g.gather(&proj[2], vec![t])?;
            let hr = g.linear(&h, &vars[GRU_HIDDEN[0]], Some(&vars[GRU_HIDDEN_BIAS[0]]))?;
            let hz = g.linear(&h, &vars[GRU_HIDDEN[1]], Some(&vars[GRU_HIDDEN_BIAS[1]]))?;
            let hn = g.linear(&h, &vars[GRU_HIDDEN[2]], Some(&vars[GRU_HIDDEN_BIAS[2]]))?;
            let r = g.sigmoid(&g.add(&xr, &hr)?)?;
            let u = g.sigmoid(&g.add(&xz, &hz)?)?;
            let n = g.tanh(&g.add(&xn, &g.mul(&r, &hn)?)?)?;
            // h' = (1 - u) * n + u * h
            let keep = g.mul(&u, &h)?;
            let fresh = g.mul(&g.sub(&one, &u)?, &n)?;
            h = g.add(&fresh, &keep)?;
        }
        Ok(Some(h))
    }

    /// Profile computed without recording gradients (device side).
    pub fn profile_user(
        &self,
        item_emb: &Tensor<T>,
        device: u64,
        history: &[usize],
    ) -> Result<UserEmbedding<T>> {
        let window = self.window(history);
        let g = Eager::<T>::new();
        let vars = self.params.bind(&g);
        let table = g.constant(item_emb.clone());
        match self.profile(&g, &vars, &table, window)? {
            None => Ok(UserEmbedding::cold(device, self.config.profile_dim)),
            Some(h) => Ok(UserEmbedding {
                device,
                z: g.value(&h).data().to_vec(),
                window_len: window.len(),
                cold_start: false,
            }),
        }
    }

    fn mlp<G: Graph<T>>(
        &self,
        g: &G,
        vars: &ParamVars<G::Node>,
        z: &G::Node,
        w1: &str,
        b1: &str,
    ) -> Result<G::Node> {
        g.tanh(&g.linear(z, &vars[w1], Some(&vars[b1]))?)
    }

    /// All sensitivities for a profile node `z` of shape `[1, l]`.
    pub fn sensitivities<G: Graph<T>>(
        &self,
        g: &G,
        vars: &ParamVars<G::Node>,
        z: &G::Node,
    ) -> Result<SensitivityNodes<G::Node>> {
        let zs = g.value(z);
        if zs.shape() != [1, self.config.profile_dim] {
            return Err(Error::Config(format!(
                "profile shape {:?}, hypernets expect [1, {}]",
                zs.shape(),
                self.config.profile_dim
            )));
        }
        let r = self.config.rank;
        let n = self.registry.len();
        let mut out = SensitivityNodes {
            filter: Vec::with_capacity(n),
            factors: Vec::with_capacity(n),
            l1: Vec::with_capacity(n),
            weighted: Vec::with_capacity(n),
            layer: z.clone(),
        };
        for (i, info) in self.registry.layers().iter().enumerate() {
            let (d_out, d_in) = (info.out_channels, info.elements_per_channel);
            let hf = self.mlp(g, vars, z, &filter_name(i, "w1"), &filter_name(i, "b1"))?;
            let af = g.linear(
                &hf,
                &vars[&filter_name(i, "w2")],
                Some(&vars[&filter_name(i, "b2")]),
            )?;
            let af = g.reshape(&af, &[d_out])?;

            let he = self.mlp(g, vars, z, &element_name(i, "w1"), &element_name(i, "b1"))?;
            let u = g.linear(
                &he,
                &vars[&element_name(i, "wu")],
                Some(&vars[&element_name(i, "bu")]),
            )?;
            let v = g.linear(
                &he,
                &vars[&element_name(i, "wv")],
                Some(&vars[&element_name(i, "bv")]),
            )?;
            let u = g.reshape(&u, &[r, d_out])?;
            let v = g.reshape(&v, &[r, d_in])?;

            let dense = g.matmul(&g.transpose(&u)?, &v)?;
            let s = g.sum(&g.abs(&dense)?, Some(1))?;
            let aw = g.mul(&g.softmax(&af)?, &s)?;
            out.filter.push(af);
            out.factors.push((u, v));
            out.l1.push(s);
            out.weighted.push(aw);
        }
        let hl = self.mlp(g, vars, z, &layer_name("w1"), &layer_name("b1"))?;
        let al = g.linear(
            &hl,
            &vars[&layer_name("w2")],
            Some(&vars[&layer_name("b2")]),
        )?;
        out.layer = g.reshape(&al, &[n])?;
        Ok(out)
    }

    /// Cloud-side evaluation for an uplinked profile.
    pub fn evaluate(&self, profile: &UserEmbedding<T>) -> Result<SensitivitySet> {
        if profile.cold_start {
            return Ok(SensitivitySet::uniform(&self.registry, self.config.rank));
        }
        if profile.z.len() != self.config.profile_dim {
            return Err(Error::Config(format!(
                "profile has dimension {}, hypernets expect {}",
                profile.z.len(),
                self.config.profile_dim
            )));
        }
        let g = Eager::<T>::new();
        let vars = self.params.bind(&g);
        let z = g.constant(Tensor::new(vec![1, profile.z.len()], profile.z.clone())?);
        let nodes = self.sensitivities(&g, &vars, &z)?;
        Ok(materialize(&g, &nodes))
    }
}

/// Copy sensitivity node values out of a graph.
pub fn materialize<T: Scalar, G: Graph<T>>(
    g: &G,
    nodes: &SensitivityNodes<G::Node>,
) -> SensitivitySet {
    let vec = |n: &G::Node| g.value(n).to_f64_vec();
    SensitivitySet {
        filter: nodes.filter.iter().map(vec).collect(),
        factors: nodes
            .factors
            .iter()
            .map(|(u, v)| (g.value(u).cast(), g.value(v).cast()))
            .collect(),
        l1: nodes.l1.iter().map(vec).collect(),
        weighted: nodes.weighted.iter().map(vec).collect(),
        layer: vec(&nodes.layer),
        cold_start: false,
    }
}

/// `S_j = Σ_k |Σ_q u[q,j] v[q,k]|`, one row at a time.
pub fn aggregate_element_l1<T: Scalar>(u: &Tensor<T>, v: &Tensor<T>) -> Result<Vec<T>> {
    if u.rank() != 2 || v.rank() != 2 || u.shape()[0] != v.shape()[0] {
        return Err(crate::error::shape_err(
            "aggregate_element_l1",
            format!("factors {:?} and {:?}", u.shape(), v.shape()),
        ));
    }
    let (r, d_out, d_in) = (u.shape()[0], u.shape()[1], v.shape()[1]);
    let (ud, vd) = (u.data(), v.data());
    let mut row = vec![T::zero(); d_in];
    Ok((0..d_out)
        .map(|j| {
            row.iter_mut().for_each(|x| *x = T::zero());
            for q in 0..r {
                let a = ud[q * d_out + j];
                if a == T::zero() {
                    continue;
                }
                for (x, &b) in row.iter_mut().zip(&vd[q * d_in..(q + 1) * d_in]) {
                    *x = *x + a * b;
                }
            }
            row.iter().fold(T::zero(), |acc, x| acc + x.abs())
        })
        .collect())
}

/// `α^W_j = softmax(α^F)_j · S_j`.
pub fn weighted_channel_sensitivity<T: Scalar>(filter: &[T], l1: &[T]) -> Result<Vec<T>> {
    if filter.len() != l1.len() {
        return Err(crate::error::shape_err(
            "weighted_channel_sensitivity",
            format!("{} filter scores vs {} L1 sums", filter.len(), l1.len()),
        ));
    }
    let p = eval_primitive(&Primitive::Softmax, &[&Tensor::vector(filter.to_vec())])?;
    Ok(p.data().iter().zip(l1).map(|(&a, &b)| a * b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{LayerInfo, LayerKind};
    use crate::tensor::Tape;

    fn registry() -> Registry {
        Registry::new(vec![
            LayerInfo {
                id: "a".into(),
                kind: LayerKind::Linear,
                out_channels: 6,
                elements_per_channel: 5,
                macs_per_channel: 5,
            },
            LayerInfo {
                id: "b".into(),
                kind: LayerKind::Linear,
                out_channels: 4,
                elements_per_channel: 6,
                macs_per_channel: 6,
            },
        ])
    }

    fn small_cfg() -> SaliencyConfig {
        SaliencyConfig {
            profile_dim: 4,
            hidden: 5,
            rank: 2,
            window: 3,
        }
    }

    #[test]
    fn empty_window_is_cold_start() {
        let s = Saliency::<f64>::build(&small_cfg(), &registry(), 3, 1).unwrap();
        let emb = Tensor::from_fn(&[10, 3], |i| i as f64 * 0.01);
        let p = s.profile_user(&emb, 4, &[]).unwrap();
        assert!(p.cold_start);
        assert_eq!(p.z, vec![0.0; 4]);
        let set = s.evaluate(&p).unwrap();
        assert!(set.cold_start);
        assert!(set
            .weighted
            .iter()
            .all(|w| w.windows(2).all(|x| x[0] == x[1])));
    }

    #[test]
    fn profile_is_deterministic_and_uses_recent_window() {
        let s = Saliency::<f64>::build(&small_cfg(), &registry(), 3, 1).unwrap();
        let emb = Tensor::from_fn(&[10, 3], |i| ((i * 37) % 11) as f64 * 0.1 - 0.5);
        let a = s.profile_user(&emb, 0, &[1, 2, 3, 4]).unwrap();
        let b = s.profile_user(&emb, 0, &[1, 2, 3, 4]).unwrap();
        let c = s.profile_user(&emb, 0, &[9, 2, 3, 4]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.z, c.z);
        assert_eq!(a.window_len, 3);
    }

    #[test]
    fn single_gru_step_matches_hand_computation() {
        let cfg = SaliencyConfig {
            profile_dim: 1,
            hidden: 1,
            rank: 1,
            window: 1,
        };
        let mut s = Saliency::<f64>::build(&cfg, &registry(), 1, 1).unwrap();
        let set = |s: &mut Saliency<f64>, name: &str, v: f64| {
            let shape = if name.contains(".b_") {
                vec![1]
            } else {
                vec![1, 1]
            };
            s.params_mut()
                .update(name, Tensor::new(shape, vec![v]).unwrap())
                .unwrap();
        };
        let vals = [
            ("gru.w_ir", 0.3),
            ("gru.w_iz", -0.2),
            ("gru.w_in", 0.5),
            ("gru.w_hr", 0.1),
            ("gru.w_hz", 0.4),
            ("gru.w_hn", -0.3),
            ("gru.b_ir", 0.05),
            ("gru.b_iz", -0.1),
            ("gru.b_in", 0.2),
            ("gru.b_hr", 0.01),
            ("gru.b_hz", 0.02),
            ("gru.b_hn", -0.03),
        ];
        for (n, v) in vals {
            set(&mut s, n, v);
        }
        let x = 0.7;
        let emb = Tensor::from_f64(&[1, 1], &[x]).unwrap();
        let z = s.profile_user(&emb, 0, &[0]).unwrap().z[0];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let h0 = 0.0;
        let r = sig(0.3 * x + 0.05 + 0.1 * h0 + 0.01);
        let u = sig(-0.2 * x - 0.1 + 0.4 * h0 + 0.02);
        let n = (0.5 * x + 0.2 + r * (-0.3 * h0 - 0.03)).tanh();
        let expected = (1.0 - u) * n + u * h0;
        assert!((z - expected).abs() < 1e-10, "{} vs {}", z, expected);
    }

    #[test]
    fn element_example_r1() {
        let u = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
        let v = Tensor::from_f64(&[1, 3], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(aggregate_element_l1(&u, &v).unwrap(), vec![3.0, 6.0]);
        let z = Tensor::<f64>::zeros(&[2, 3]);
        assert_eq!(
            aggregate_element_l1(&z, &Tensor::zeros(&[2, 4])).unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn weighted_examples() {
        assert_eq!(
            weighted_channel_sensitivity(&[0.0, 0.0], &[2.0, 4.0]).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            weighted_channel_sensitivity(&[0.3, -1.0], &[0.0, 0.0]).unwrap(),
            vec![0.0, 0.0]
        );
        let w = weighted_channel_sensitivity(&[1f64.ln(), 3f64.ln()], &[1.0, 1.0]).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn zero_weight_hypernet_outputs_bias() {
        let mut s = Saliency::<f64>::build(&small_cfg(), &registry(), 3, 1).unwrap();
        let names: Vec<String> = s.params().names().map(String::from).collect();
        for n in &names {
            let t = s.params().get(n).unwrap().clone();
            let v = if n.starts_with("hyper") && n.ends_with("b2") {
                t.map(|_| 0.7)
            } else {
                t.map(|_| 0.0)
            };
            s.params_mut().update(n, v).unwrap();
        }
        let p = UserEmbedding {
            device: 0,
            z: vec![0.3, -0.2, 0.9, 0.1],
            window_len: 1,
            cold_start: false,
        };
        let set = s.evaluate(&p).unwrap();
        assert!(set.filter.iter().flatten().all(|&x| x == 0.7));
        assert!(set.layer.iter().all(|&x| x == 0.7));
    }

    #[test]
    fn graph_l1_matches_lazy_rows_exactly() {
        let s = Saliency::<f64>::build(&small_cfg(), &registry(), 3, 5).unwrap();
        let p = UserEmbedding {
            device: 0,
            z: vec![0.3, -0.2, 0.9, 0.1],
            window_len: 1,
            cold_start: false,
        };
        let set = s.evaluate(&p).unwrap();
        for (i, (u, v)) in set.factors.iter().enumerate() {
            assert_eq!(aggregate_element_l1(u, v).unwrap(), set.l1[i]);
            assert_eq!(
                weighted_channel_sensitivity(&set.filter[i], &set.l1[i]).unwrap(),
                set.weighted[i]
            );
            assert!(set.l1[i].iter().all(|&x| x >= 0.0));
        }
        assert_eq!(set.layer.len(), 2);
    }

    #[test]
    fn distinct_profiles_personalize() {
        let s = Saliency::<f64>::build(&SaliencyConfig::default(), &registry(), 3, 2).unwrap();
        let a = UserEmbedding {
            device: 0,
            z: vec![0.1; 32],
            window_len: 1,
            cold_start: false,
        };
        let b = UserEmbedding {
            device: 1,
            z: (0..32).map(|i| (i as f64 * 0.3).sin()).collect(),
            window_len: 1,
            cold_start: false,
        };
        assert_ne!(
            s.evaluate(&a).unwrap().filter,
            s.evaluate(&b).unwrap().filter
        );
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let s = Saliency::<f64>::build(&small_cfg(), &registry(), 3, 2).unwrap();
        let p = UserEmbedding {
            device: 0,
            z: vec![0.1; 5],
            window_len: 1,
            cold_start: false,
        };
        assert!(matches!(s.evaluate(&p), Err(Error::Config(_))));
    }

    #[test]
    fn weighted_sensitivity_gradients_match_finite_differences() {
        let s = Saliency::<f64>::build(&small_cfg(), &registry(), 3, 3).unwrap();
        let emb = Tensor::from_fn(&[6, 3], |i| ((i * 13) % 7) as f64 * 0.2 - 0.6);
        let probe = Tensor::from_fn(&[6], |i| 0.3 + i as f64 * 0.1);
        let worst = crate::tensor::finite_diff_check(
            |t: &Tape<f64>, vars| {
                let table = t.constant(emb.clone());
                let z = s.profile(t, vars, &table, &[1, 4, 2])?.unwrap();
                let nodes = s.sensitivities(t, vars, &z)?;
                let p = t.constant(probe.clone());
                let a = t.sum(&t.mul(&nodes.weighted[0], &p)?, None)?;
                let b = t.sum(&nodes.weighted[1], None)?;
                let c = t.sum(&t.mul(&nodes.layer, &nodes.layer)?, None)?;
                t.add(&t.add(&a, &b)?, &c)
            },
            s.params(),
            1e-6,
        )
        .unwrap();
        assert!(worst < 1e-4, "relative error {}", worst);
    }
}
