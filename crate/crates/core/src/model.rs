// SPDX-License-Identifier: Apache-2.0

//! Transformer encoder with per-layer bottleneck adapters and a pooled
//! binary classification head.
//!
//! One layer, post-norm:
//!
//! ```text
//! x -> MHA -> dropout -> +x -> LN1 -> FFN(GELU) -> dropout -> +h -> LN2 -> [adapter] -> out
//! adapter(h) = W_up tanh(W_down h + b_down) + b_up + h
//! ```
//!
//! After the last layer the valid positions are mean-pooled and fed to
//! `d -> head_hidden -> tanh -> 1 -> sigmoid`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGroup, ParamStore, Real, Tensor, TensorError, Var};
use crate::embed::SessionMatrix;
use crate::error::{Error, Result};
use crate::seed::sha256_hex;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub adapter_dim: usize,
    pub head_hidden: usize,
    /// Fixed session length `l`.
    pub seq_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 768,
            heads: 8,
            layers: 1,
            ffn_dim: 3072,
            adapter_dim: 128,
            head_hidden: 256,
            seq_len: 20,
            dropout: 0.1,
        }
    }
}

/// The three ways a network can be trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Random init, everything trainable, no adapters.
    Scratch,
    /// Pretrained init, everything trainable, no adapters.
    Finetune,
    /// Pretrained backbone frozen; adapters, layer norms and head train.
    Adapter,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Scratch, Mode::Finetune, Mode::Adapter];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Scratch => "scratch",
            Mode::Finetune => "finetune",
            Mode::Adapter => "adapter",
        }
    }

    /// Whether a parameter of `group` is updated in this mode.
    pub fn trains(self, group: ParamGroup) -> bool {
        match self {
            Mode::Scratch | Mode::Finetune => group != ParamGroup::Adapter,
            Mode::Adapter => !matches!(group, ParamGroup::Attention | ParamGroup::FeedForward),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Mode::Scratch),
            "finetune" => Ok(Mode::Finetune),
            "adapter" => Ok(Mode::Adapter),
            other => Err(Error::config(format!("unknown mode {other:?}"))),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!("d={} must be divisible by heads={}", self.d, self.heads));
        }
        if self.layers == 0 {
            return fail("layers must be >= 1".into());
        }
        if self.adapter_dim == 0 || self.adapter_dim >= self.d {
            return fail(format!("adapter_dim must be in [1, d), got {}", self.adapter_dim));
        }
        if self.ffn_dim == 0 || self.head_hidden == 0 || self.seq_len == 0 {
            return fail("ffn_dim, head_hidden and seq_len must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0,1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Hash of the fields that determine backbone parameter shapes.
    pub fn backbone_hash(&self) -> String {
        let key = serde_json::json!({
            "d": self.d, "heads": self.heads, "layers": self.layers,
            "ffn_dim": self.ffn_dim, "seq_len": self.seq_len,
        });
        sha256_hex(key.to_string().as_bytes())
    }
}

/// Trainable scalars of a `config` network trained in `mode`.
pub fn count_params(config: &ModelConfig, mode: Mode) -> usize {
    let (d, f, m, hh) = (config.d, config.ffn_dim, config.adapter_dim, config.head_hidden);
    let attention = 4 * (d * d + d);
    let ffn = d * f + f + f * d + d;
    let norms = 2 * 2 * d;
    let adapter = m * d + m + d * m + d;
    let head = d * hh + hh + hh + 1;
    let per_layer = match mode {
        Mode::Scratch | Mode::Finetune => attention + ffn + norms,
        Mode::Adapter => adapter + norms,
    };
    config.layers * per_layer + head
}

/// Fixed sinusoidal positional table, `(l, d)` row-major.
pub fn positional_table(l: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; l * d];
    for pos in 0..l {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            pe[pos * d + i] = angle.sin();
            if i + 1 < d {
                pe[pos * d + i + 1] = angle.cos();
            }
        }
    }
    pe
}

fn uniform_fan_in<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.random_range(-bound..bound)))
}

fn zeros<T: Real>(n: usize) -> Tensor<T> {
    Tensor::zeros(vec![n])
}

fn ones<T: Real>(n: usize) -> Tensor<T> {
    Tensor::from_fn(vec![n], |_| T::one())
}

/// Network parameters plus configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyModel<T: Real = f32> {
    config: ModelConfig,
    mode: Mode,
    params: ParamStore<T>,
    positional: Vec<T>,
}

/// Output of one forward pass.
#[derive(Debug)]
pub struct Forward {
    /// `[b, 1]` anomaly probabilities.
    pub probs: Var,
    /// Graph leaf for each parameter, in store order.
    pub param_vars: Vec<Var>,
}

impl<T: Real> AnomalyModel<T> {
    /// Fresh backbone and head, no adapters, [`Mode::Scratch`].
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f) = (config.d, config.ffn_dim);
        let mut p = ParamStore::new();
        for i in 0..config.layers {
            for name in ["q", "k", "v", "o"] {
                p.push(
                    format!("layers.{i}.attn.{name}.weight"),
                    ParamGroup::Attention,
                    uniform_fan_in(&mut rng, &[d, d], d),
                );
                p.push(format!("layers.{i}.attn.{name}.bias"), ParamGroup::Attention, zeros(d));
            }
            p.push(format!("layers.{i}.ln1.gamma"), ParamGroup::LayerNorm, ones(d));
            p.push(format!("layers.{i}.ln1.beta"), ParamGroup::LayerNorm, zeros(d));
            p.push(
                format!("layers.{i}.ffn.up.weight"),
                ParamGroup::FeedForward,
                uniform_fan_in(&mut rng, &[f, d], d),
            );
            p.push(format!("layers.{i}.ffn.up.bias"), ParamGroup::FeedForward, zeros(f));
            p.push(
                format!("layers.{i}.ffn.down.weight"),
                ParamGroup::FeedForward,
                uniform_fan_in(&mut rng, &[d, f], f),
            );
            p.push(format!("layers.{i}.ffn.down.bias"), ParamGroup::FeedForward, zeros(d));
            p.push(format!("layers.{i}.ln2.gamma"), ParamGroup::LayerNorm, ones(d));
            p.push(format!("layers.{i}.ln2.beta"), ParamGroup::LayerNorm, zeros(d));
        }
        let positional = positional_table(config.seq_len, d).into_iter().map(T::lit).collect();
        let mut model = Self {
            config,
            mode: Mode::Scratch,
            params: p,
            positional,
        };
        model.reset_head(rng.random());
        model.apply_mode(Mode::Scratch);
        Ok(model)
    }

    /// Rebuilds a model around existing parameters (e.g. from a checkpoint).
    pub fn from_parts(config: ModelConfig, mode: Mode, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), 0)?;
        for rp in reference.params.iter() {
            let p = params
                .by_name(&rp.name)
                .ok_or_else(|| Error::data(format!("checkpoint lacks parameter {}", rp.name)))?;
            if p.value.shape() != rp.value.shape() {
                return Err(Error::data(format!(
                    "parameter {} has shape {:?}, config expects {:?}",
                    rp.name,
                    p.value.shape(),
                    rp.value.shape()
                )));
            }
        }
        let positional = reference.positional;
        let model = Self {
            config,
            mode,
            params,
            positional,
        };
        if mode == Mode::Adapter && !model.has_adapters() {
            return Err(Error::data("adapter-mode checkpoint has no adapter weights"));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn has_adapters(&self) -> bool {
        (0..self.config.layers).all(|i| self.params.by_name(&format!("layers.{i}.adapter.up.weight")).is_some())
    }

    pub fn trainable_count(&self) -> usize {
        self.params.trainable_count()
    }

    fn apply_mode(&mut self, mode: Mode) {
        self.mode = mode;
        self.params.set_trainable(|p| mode.trains(p.group));
    }

    /// Re-initialises the classification head.
    pub fn reset_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, hh) = (self.config.d, self.config.head_hidden);
        self.params.remove_group(ParamGroup::Head);
        self.params.push(
            "head.hidden.weight",
            ParamGroup::Head,
            uniform_fan_in(&mut rng, &[hh, d], d),
        );
        self.params.push("head.hidden.bias", ParamGroup::Head, zeros(hh));
        self.params.push(
            "head.out.weight",
            ParamGroup::Head,
            uniform_fan_in(&mut rng, &[1, hh], hh),
        );
        self.params.push("head.out.bias", ParamGroup::Head, zeros(1));
        let mode = self.mode;
        self.apply_mode(mode);
    }

    /// Inserts fresh adapters (`W_up = 0`, so the network function is
    /// unchanged) and freezes attention and feed-forward weights.
    pub fn prepare_adapter_tuning(&mut self, seed: u64, reset_head: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, m) = (self.config.d, self.config.adapter_dim);
        self.params.remove_group(ParamGroup::Adapter);
        for i in 0..self.config.layers {
            self.params.push(
                format!("layers.{i}.adapter.down.weight"),
                ParamGroup::Adapter,
                uniform_fan_in(&mut rng, &[m, d], d),
            );
            self.params
                .push(format!("layers.{i}.adapter.down.bias"), ParamGroup::Adapter, zeros(m));
            self.params.push(
                format!("layers.{i}.adapter.up.weight"),
                ParamGroup::Adapter,
                Tensor::zeros(vec![d, m]),
            );
            self.params
                .push(format!("layers.{i}.adapter.up.bias"), ParamGroup::Adapter, zeros(d));
        }
        if reset_head {
            self.reset_head(rng.random());
        }
        self.apply_mode(Mode::Adapter);
    }

    /// Makes every backbone parameter trainable and drops adapters.
    pub fn prepare_finetune(&mut self, seed: u64, reset_head: bool) {
        self.params.remove_group(ParamGroup::Adapter);
        if reset_head {
            self.reset_head(seed);
        }
        self.apply_mode(Mode::Finetune);
    }

    /// SHA-256 over the frozen-in-adapter-mode parameters (attention + FFN).
    pub fn backbone_fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        for p in self.params.iter() {
            if matches!(p.group, ParamGroup::Attention | ParamGroup::FeedForward) {
                bytes.extend(p.name.as_bytes());
                for x in p.value.data() {
                    bytes.extend(x.as_f64().to_le_bytes());
                }
            }
        }
        sha256_hex(&bytes)
    }

    fn param(&self, vars: &[Var], name: &str) -> Var {
        vars[self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))]
    }

    /// Forward pass over a batch of sessions.
    ///
    /// With `track_grads`, trainable parameters become differentiable leaves.
    /// `dropout_rng = None` disables dropout (evaluation).
    pub fn forward<'p, R: Rng + ?Sized>(
        &'p self,
        g: &mut Graph<'p, T>,
        batch: &[&SessionMatrix],
        mode: Mode,
        track_grads: bool,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let (l, d) = (cfg.seq_len, cfg.d);
        if batch.is_empty() {
            return Err(Error::data("empty batch"));
        }
        if mode == Mode::Adapter && !self.has_adapters() {
            return Err(Error::config(
                "adapter mode requested but the model has no adapter weights",
            ));
        }
        let b = batch.len();
        // Unit-norm embeddings would be drowned by the sinusoids otherwise.
        let scale = (d as f64).sqrt();
        let mut input = Vec::with_capacity(b * l * d);
        let mut mask = Vec::with_capacity(b * l);
        for s in batch {
            if s.values.len() != l * d || s.mask.len() != l {
                return Err(Error::data(format!(
                    "session matrix is {}x{}, model expects {l}x{d}",
                    s.mask.len(),
                    s.values.len() / s.mask.len().max(1)
                )));
            }
            input.extend(
                s.values
                    .iter()
                    .zip(self.positional.iter().cycle())
                    .map(|(&v, &pe)| T::lit(v as f64 * scale) + pe),
            );
            mask.extend_from_slice(&s.mask);
        }
        let param_vars = self
            .params
            .iter()
            .map(|p| g.leaf_ref(p.value.data(), p.value.shape(), track_grads && p.trainable))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let pv = |name: &str| self.param(&param_vars, name);

        let mut x = g.leaf(Tensor::new(vec![b, l, d], input)?, false);
        for i in 0..cfg.layers {
            let lp = |s: &str| pv(&format!("layers.{i}.{s}"));
            let q = g.linear(x, lp("attn.q.weight"), Some(lp("attn.q.bias")))?;
            let k = g.linear(x, lp("attn.k.weight"), Some(lp("attn.k.bias")))?;
            let v = g.linear(x, lp("attn.v.weight"), Some(lp("attn.v.bias")))?;
            let ctx = attention(g, q, k, v, &mask, cfg.heads)?;
            let att = g.linear(ctx, lp("attn.o.weight"), Some(lp("attn.o.bias")))?;
            let att = g.dropout(att, cfg.dropout, dropout_rng.as_deref_mut())?;
            let res = g.add(att, x)?;
            let h = g.layer_norm(res, lp("ln1.gamma"), lp("ln1.beta"), LAYER_NORM_EPS)?;

            let up = g.linear(h, lp("ffn.up.weight"), Some(lp("ffn.up.bias")))?;
            let act = g.gelu(up);
            let down = g.linear(act, lp("ffn.down.weight"), Some(lp("ffn.down.bias")))?;
            let down = g.dropout(down, cfg.dropout, dropout_rng.as_deref_mut())?;
            let res = g.add(down, h)?;
            x = g.layer_norm(res, lp("ln2.gamma"), lp("ln2.beta"), LAYER_NORM_EPS)?;

            if mode == Mode::Adapter {
                x = adapter_forward(
                    g,
                    x,
                    (lp("adapter.down.weight"), lp("adapter.down.bias")),
                    (lp("adapter.up.weight"), lp("adapter.up.bias")),
                )?;
            }
        }
        let pooled = g.mean_pool(x, &mask)?;
        let hid = g.linear(pooled, pv("head.hidden.weight"), Some(pv("head.hidden.bias")))?;
        let hid = g.tanh(hid);
        let logit = g.linear(hid, pv("head.out.weight"), Some(pv("head.out.bias")))?;
        let probs = g.sigmoid(logit);
        Ok(Forward { probs, param_vars })
    }

    /// Anomaly probabilities without dropout or gradient tracking.
    pub fn predict(&self, batch: &[&SessionMatrix]) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let out = self.forward::<ChaCha8Rng>(&mut g, batch, self.mode, false, None)?;
        Ok(g.value(out.probs).to_vec())
    }
}

/// Multi-head scaled dot-product attention over already-projected
/// `q, k, v: [b, l, d]`. Keys where `key_mask` is false are excluded.
pub fn attention<T: Real>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    key_mask: &[bool],
    heads: usize,
) -> std::result::Result<Var, TensorError> {
    let shape = g.shape(q).to_vec();
    if shape.len() != 3 || g.shape(k) != shape.as_slice() || g.shape(v) != shape.as_slice() {
        return Err(TensorError::shapes("attention", &shape, g.shape(k)));
    }
    let (l, d) = (shape[1], shape[2]);
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::invalid(
            "attention",
            format!("d={d} not divisible by heads={heads}"),
        ));
    }
    let dk = d / heads;
    let qh = g.split_heads(q, heads)?;
    let kh = g.split_heads(k, heads)?;
    let vh = g.split_heads(v, heads)?;
    let scores = g.matmul(qh, kh, true)?;
    let scores = g.scale(scores, T::lit(1.0 / (dk as f64).sqrt()));
    let probs = g.softmax(scores, Some(key_mask), heads * l)?;
    let ctx = g.matmul(probs, vh, false)?;
    g.merge_heads(ctx, heads)
}

/// `h' = W_up tanh(W_down h + b_down) + b_up + h`.
pub fn adapter_forward<T: Real>(
    g: &mut Graph<'_, T>,
    h: Var,
    down: (Var, Var),
    up: (Var, Var),
) -> std::result::Result<Var, TensorError> {
    let z = g.linear(h, down.0, Some(down.1))?;
    let z = g.tanh(z);
    let z = g.linear(z, up.0, Some(up.1))?;
    g.add(z, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn toy() -> ModelConfig {
        ModelConfig {
            d: 16,
            heads: 4,
            layers: 2,
            ffn_dim: 32,
            adapter_dim: 4,
            head_hidden: 8,
            seq_len: 6,
            dropout: 0.0,
        }
    }

    fn random_session(rng: &mut ChaCha8Rng, cfg: &ModelConfig, len: usize) -> SessionMatrix {
        let mut values = vec![0f32; cfg.seq_len * cfg.d];
        for v in values.iter_mut().take(len * cfg.d) {
            *v = StandardNormal.sample(rng);
        }
        SessionMatrix {
            values,
            mask: (0..cfg.seq_len).map(|i| i < len).collect(),
            label: false,
        }
    }

    #[test]
    fn full_scale_counts() {
        let cfg = ModelConfig::default();
        let ft: Vec<usize> = [1, 2, 4]
            .iter()
            .map(|&layers| count_params(&ModelConfig { layers, ..cfg.clone() }, Mode::Finetune))
            .collect();
        assert_eq!(ft, [7_284_993, 14_372_865, 28_548_609]);
        let ad: Vec<usize> = [1, 2, 4]
            .iter()
            .map(|&layers| count_params(&ModelConfig { layers, ..cfg.clone() }, Mode::Adapter))
            .collect();
        assert_eq!(ad, [397_697, 598_273, 999_425]);
    }

    #[test]
    fn counts_match_built_stores() {
        let cfg = toy();
        let mut m: AnomalyModel<f32> = AnomalyModel::new(cfg.clone(), 1).unwrap();
        assert_eq!(m.trainable_count(), count_params(&cfg, Mode::Scratch));
        m.prepare_finetune(2, false);
        assert_eq!(m.trainable_count(), count_params(&cfg, Mode::Finetune));
        m.prepare_adapter_tuning(3, true);
        assert_eq!(m.trainable_count(), count_params(&cfg, Mode::Adapter));
        // Positional table is not a parameter.
        assert!(m.params().iter().all(|p| !p.name.contains("pos")));
    }

    #[test]
    fn layer_increment_is_constant() {
        for mode in Mode::ALL {
            let c = |layers| {
                count_params(
                    &ModelConfig {
                        layers,
                        ..ModelConfig::default()
                    },
                    mode,
                )
            };
            assert_eq!(c(2) - c(1), c(3) - c(2));
            assert_eq!(c(4) - c(3), c(2) - c(1));
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { heads: 5, ..toy() }.validate().is_err());
        assert!(ModelConfig {
            adapter_dim: 16,
            ..toy()
        }
        .validate()
        .is_err());
        assert!(ModelConfig { layers: 0, ..toy() }.validate().is_err());
        assert!(toy().validate().is_ok());
    }

    #[test]
    fn outputs_are_probabilities_and_adapter_starts_as_identity() {
        let cfg = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch: Vec<SessionMatrix> = (1..=5).map(|n| random_session(&mut rng, &cfg, n)).collect();
        let refs: Vec<&SessionMatrix> = batch.iter().collect();
        let mut m: AnomalyModel<f32> = AnomalyModel::new(cfg, 9).unwrap();
        let base = m.predict(&refs).unwrap();
        assert!(base.iter().all(|&p| p > 0.0 && p < 1.0));
        m.prepare_adapter_tuning(5, false);
        let adapted = m.predict(&refs).unwrap();
        assert_eq!(
            base.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            adapted.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn adapter_mode_without_adapters_errors() {
        let cfg = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_session(&mut rng, &cfg, 3);
        let m: AnomalyModel<f32> = AnomalyModel::new(cfg, 9).unwrap();
        let mut g = Graph::new();
        assert!(m
            .forward::<ChaCha8Rng>(&mut g, &[&s], Mode::Adapter, false, None)
            .is_err());
    }

    #[test]
    fn padded_values_do_not_matter() {
        let cfg = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random_session(&mut rng, &cfg, 3);
        let mut noisy = s.clone();
        for v in noisy.values[3 * cfg.d..].iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let mut m: AnomalyModel<f32> = AnomalyModel::new(cfg, 2).unwrap();
        m.prepare_adapter_tuning(1, false);
        let a = m.predict(&[&s]).unwrap()[0];
        let b = m.predict(&[&noisy]).unwrap()[0];
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn order_matters_with_positions() {
        let cfg = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = random_session(&mut rng, &cfg, 6);
        let mut swapped = s.clone();
        let d = cfg.d;
        let (head, tail) = swapped.values.split_at_mut(d);
        head.swap_with_slice(&mut tail[..d]);
        let m: AnomalyModel<f64> = AnomalyModel::new(cfg, 3).unwrap();
        let a = m.predict(&[&s]).unwrap()[0];
        let b = m.predict(&[&swapped]).unwrap()[0];
        assert!((a - b).abs() > 1e-6, "{a} vs {b}");
    }

    #[test]
    fn from_parts_rejects_wrong_shapes() {
        let m: AnomalyModel<f32> = AnomalyModel::new(toy(), 1).unwrap();
        let other = ModelConfig { d: 32, ..toy() };
        assert!(AnomalyModel::from_parts(other, Mode::Scratch, m.params().clone()).is_err());
        assert!(AnomalyModel::from_parts(toy(), Mode::Adapter, m.params().clone()).is_err());
        assert!(AnomalyModel::from_parts(toy(), Mode::Scratch, m.params().clone()).is_ok());
    }

    fn leaf64(g: &mut Graph<'_, f64>, shape: &[usize], data: Vec<f64>) -> Var {
        g.leaf(Tensor::new(shape.to_vec(), data).unwrap(), false)
    }

    #[test]
    fn zero_queries_and_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (l, d) = (4, 6);
        let vdata: Vec<f64> = (0..l * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut g = Graph::new();
        let q = leaf64(&mut g, &[1, l, d], vec![0.0; l * d]);
        let k = leaf64(&mut g, &[1, l, d], vec![0.0; l * d]);
        let v = leaf64(&mut g, &[1, l, d], vdata.clone());
        let out = attention(&mut g, q, k, v, &[true; 4], 2).unwrap();
        let out = g.value(out);
        for c in 0..d {
            let mean = (0..l).map(|r| vdata[r * d + c]).sum::<f64>() / l as f64;
            for r in 0..l {
                assert!((out[r * d + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_position_with_identity_projection_returns_values() {
        let d = 8;
        let vdata: Vec<f64> = (0..d).map(|i| i as f64 * 0.3 - 1.0).collect();
        let mut g = Graph::new();
        let q = leaf64(&mut g, &[1, 1, d], vec![0.7; d]);
        let k = leaf64(&mut g, &[1, 1, d], vec![-0.2; d]);
        let v = leaf64(&mut g, &[1, 1, d], vdata.clone());
        let ctx = attention(&mut g, q, k, v, &[true], 4).unwrap();
        let eye = leaf64(
            &mut g,
            &[d, d],
            (0..d * d).map(|i| if i / d == i % d { 1.0 } else { 0.0 }).collect(),
        );
        let bias = leaf64(&mut g, &[d], vec![0.0; d]);
        let out = g.linear(ctx, eye, Some(bias)).unwrap();
        assert_eq!(g.value(out), vdata.as_slice());
    }

    #[test]
    fn one_dim_heads_match_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (l, d) = (3, 8);
        let mut draw = || -> Vec<f64> { (0..l * d).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let (qd, kd, vd) = (draw(), draw(), draw());
        let mut g = Graph::new();
        let q = leaf64(&mut g, &[1, l, d], qd.clone());
        let k = leaf64(&mut g, &[1, l, d], kd.clone());
        let v = leaf64(&mut g, &[1, l, d], vd.clone());
        let out = attention(&mut g, q, k, v, &[true; 3], 8).unwrap();
        let out = g.value(out);
        // Each head is one channel; the scale is 1/sqrt(1).
        for h in 0..d {
            for i in 0..l {
                let logits: Vec<f64> = (0..l).map(|j| qd[i * d + h] * kd[j * d + h]).collect();
                let z: f64 = logits.iter().map(|x| x.exp()).sum();
                let want: f64 = (0..l).map(|j| logits[j].exp() / z * vd[j * d + h]).sum();
                assert!((out[i * d + h] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_keys_are_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (l, d) = (4, 4);
        let mut draw = || -> Vec<f64> { (0..l * d).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let (qd, kd, vd) = (draw(), draw(), draw());
        let (mut k2, mut v2) = (kd.clone(), vd.clone());
        for x in k2[3 * d..].iter_mut().chain(v2[3 * d..].iter_mut()) {
            *x += 5.0;
        }
        let run = |k: Vec<f64>, v: Vec<f64>| {
            let mut g = Graph::new();
            let q = leaf64(&mut g, &[1, l, d], qd.clone());
            let k = leaf64(&mut g, &[1, l, d], k);
            let v = leaf64(&mut g, &[1, l, d], v);
            let o = attention(&mut g, q, k, v, &[true, true, true, false], 2).unwrap();
            g.value(o)[..3 * d].to_vec()
        };
        assert_eq!(run(kd, vd), run(k2, v2));
    }

    #[test]
    fn adapter_examples() {
        let (d, m) = (6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let (h, wd, bd, wu, bu) = (draw(2 * d), draw(m * d), draw(m), draw(d * m), draw(d));
        let run = |h: &[f64], wu: &[f64], bd: &[f64], bu: &[f64]| {
            let mut g = Graph::new();
            let hv = leaf64(&mut g, &[2, d], h.to_vec());
            let dw = leaf64(&mut g, &[m, d], wd.clone());
            let db = leaf64(&mut g, &[m], bd.to_vec());
            let uw = leaf64(&mut g, &[d, m], wu.to_vec());
            let ub = leaf64(&mut g, &[d], bu.to_vec());
            let o = adapter_forward(&mut g, hv, (dw, db), (uw, ub)).unwrap();
            g.value(o).to_vec()
        };
        // W_up = 0 (and b_up = 0) gives the identity exactly.
        assert_eq!(run(&h, &vec![0.0; d * m], &bd, &vec![0.0; d]), h);
        // h = 0 with zero biases gives 0.
        assert_eq!(
            run(&vec![0.0; 2 * d], &wu, &vec![0.0; m], &vec![0.0; d]),
            vec![0.0; 2 * d]
        );
        // Element-by-element.
        let out = run(&h, &wu, &bd, &bu);
        for r in 0..2 {
            let z: Vec<f64> = (0..m)
                .map(|j| ((0..d).map(|c| wd[j * d + c] * h[r * d + c]).sum::<f64>() + bd[j]).tanh())
                .collect();
            for c in 0..d {
                let want = (0..m).map(|j| wu[c * m + j] * z[j]).sum::<f64>() + bu[c] + h[r * d + c];
                assert!((out[r * d + c] - want).abs() < 1e-12);
            }
        }
        let mut g = Graph::new();
        let hv = leaf64(&mut g, &[1, d], vec![0.0; d]);
        let bad = leaf64(&mut g, &[m, d + 1], vec![0.0; m * (d + 1)]);
        let db = leaf64(&mut g, &[m], vec![0.0; m]);
        assert!(adapter_forward(&mut g, hv, (bad, db), (bad, db)).is_err());
    }
}
