//! Multi-head blocks with GRU-style gating, the full sequence-model stack
//! (observation embedding, `layers` blocks, actor and critic heads) and its
//! flat parameter store.
//!
//! Block order: layer norm, multi-head attention, gate against the block
//! input, layer norm, relu MLP, gate against the first gate's output.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::attention::{head_step, Gating, Head, HeadConfig, HeadParams, HeadState, MechanismKind};
use crate::error::{Error, Result};
use crate::feature_maps::FeatureMapKind;
use crate::numerics::{orthogonal, Backend, Eval, Matrix2, Vector};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub obs_dim: usize,
    /// Embedding width.
    pub d: usize,
    pub heads: usize,
    pub d_h: usize,
    pub layers: usize,
    pub head: HeadConfig,
    /// Subtracted inside the update gate so blocks start close to identity.
    pub gate_bias: f64,
    /// MLP hidden width is `mlp_ratio * d`.
    pub mlp_ratio: usize,
    pub actor_width: usize,
    pub critic_width: usize,
    pub n_actions: usize,
}

impl ModelConfig {
    /// Defaults around a given mechanism: d=32, 2 layers of 2 heads of 16.
    pub fn new(obs_dim: usize, n_actions: usize, head: HeadConfig) -> Self {
        Self {
            obs_dim,
            d: 32,
            heads: 2,
            d_h: 16,
            layers: 2,
            head,
            gate_bias: 2.0,
            mlp_ratio: 4,
            actor_width: 32,
            critic_width: 32,
            n_actions,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        let sizes = [
            ("obs_dim", self.obs_dim),
            ("d", self.d),
            ("heads", self.heads),
            ("d_h", self.d_h),
            ("mlp_ratio", self.mlp_ratio),
            ("actor_width", self.actor_width),
            ("critic_width", self.critic_width),
            ("n_actions", self.n_actions),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.gate_bias.is_finite() {
            return Err(Error::Config("gate_bias must be finite".into()));
        }
        Ok(())
    }

    /// Recurrent state scalars per layer, from the mechanism formulas.
    pub fn state_scalars_per_layer(&self) -> usize {
        self.heads * self.head.state_scalars(self.d_h)
    }

    /// Configuration as ordered `key = value` pairs.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let h = &self.head;
        let (mechanism, r, memory) = match h.kind {
            MechanismKind::Windowed { memory } => ("windowed", 0, memory),
            MechanismKind::Linear => ("linear", 0, 0),
            MechanismKind::Galite => ("galite", 0, 0),
            MechanismKind::Agalite { r } => ("agalite", r, 0),
            MechanismKind::RandomSign => ("random-sign", 0, 0),
        };
        let feature_map = match h.feature_map {
            FeatureMapKind::EluPlusOne => "elu".to_string(),
            FeatureMapKind::LearnedOuterRelu { .. } => "outer-relu".to_string(),
        };
        let gating = match h.gating {
            Gating::Learned => "learned".to_string(),
            Gating::Ungated => "off".to_string(),
            Gating::Fixed { beta, gamma } => format!("fixed:{beta}:{gamma}"),
        };
        let out = vec![
            ("obs_dim", self.obs_dim.to_string()),
            ("d", self.d.to_string()),
            ("heads", self.heads.to_string()),
            ("d_h", self.d_h.to_string()),
            ("layers", self.layers.to_string()),
            ("mechanism", mechanism.to_string()),
            ("eta", h.eta().to_string()),
            ("r", r.to_string()),
            ("memory", memory.to_string()),
            ("feature_map", feature_map),
            ("gating", gating),
            ("derivation_scaling", h.derivation_scaling.to_string()),
            ("gate_bias", self.gate_bias.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("actor_width", self.actor_width.to_string()),
            ("critic_width", self.critic_width.to_string()),
            ("n_actions", self.n_actions.to_string()),
        ];
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Inverse of [`ModelConfig::to_pairs`]; every key must be present.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("missing config key {key}")))
        };
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Format(format!("bad value {v:?} for {key}")))
        }
        let usize_of = |key: &str| -> Result<usize> { num(key, get(key)?) };
        let eta = usize_of("eta")?;
        let head = parse_head(
            get("mechanism")?,
            eta,
            num("r", get("r")?)?,
            usize_of("memory")?,
            get("feature_map")?,
            get("gating")?,
            num("derivation_scaling", get("derivation_scaling")?)?,
        )?;
        let cfg = Self {
            obs_dim: usize_of("obs_dim")?,
            d: usize_of("d")?,
            heads: usize_of("heads")?,
            d_h: usize_of("d_h")?,
            layers: usize_of("layers")?,
            head,
            gate_bias: num("gate_bias", get("gate_bias")?)?,
            mlp_ratio: usize_of("mlp_ratio")?,
            actor_width: usize_of("actor_width")?,
            critic_width: usize_of("critic_width")?,
            n_actions: usize_of("n_actions")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Builds a head configuration from its textual parts.
///
/// `mechanism` is one of `linear`, `galite`, `agalite`, `random-sign`,
/// `windowed`; `feature_map` is `elu` or `outer-relu`; `gating` is
/// `learned`, `off` or `fixed:<beta>:<gamma>`.
pub fn parse_head(
    mechanism: &str,
    eta: usize,
    r: u64,
    memory: usize,
    feature_map: &str,
    gating: &str,
    derivation_scaling: bool,
) -> Result<HeadConfig> {
    let base = match mechanism {
        "linear" => HeadConfig::linear(),
        "galite" => HeadConfig::galite(eta),
        "agalite" => HeadConfig::agalite(eta, r),
        "random-sign" => HeadConfig::random_sign(eta),
        "windowed" => HeadConfig::windowed(memory),
        other => return Err(Error::Config(format!("unknown mechanism {other:?}"))),
    };
    let fm = match feature_map {
        "elu" => FeatureMapKind::EluPlusOne,
        "outer-relu" => FeatureMapKind::LearnedOuterRelu { eta },
        other => return Err(Error::Config(format!("unknown feature map {other:?}"))),
    };
    let gating = match gating {
        "learned" => Gating::Learned,
        "off" => Gating::Ungated,
        g if g.starts_with("fixed:") => {
            let parts: Vec<&str> = g.split(':').collect();
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|_| Error::Config(format!("bad fixed gating {g:?}")))
            };
            if parts.len() != 3 {
                return Err(Error::Config(format!("bad fixed gating {g:?}")));
            }
            Gating::Fixed { beta: parse(parts[1])?, gamma: parse(parts[2])? }
        }
        other => return Err(Error::Config(format!("unknown gating {other:?}"))),
    };
    let cfg = base.with_feature_map(fm).with_gating(gating).with_derivation_scaling(derivation_scaling);
    cfg.validate()?;
    Ok(cfg)
}

/// `r = σ(W_r y + U_r x)`, `z = σ(W_z y + U_z x − b)`,
/// `ĥ = tanh(W_g y + U_g (r ⊙ x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams<T> {
    pub w_r: T,
    pub u_r: T,
    pub w_z: T,
    pub u_z: T,
    pub w_g: T,
    pub u_g: T,
}

/// Two-layer relu network `W_2 relu(W_1 x + b_1) + b_2`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub heads: Vec<HeadParams<T>>,
    /// `d x heads·d_h`.
    pub w_o: T,
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub gate1: GateParams<T>,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub mlp: MlpParams<T>,
    pub gate2: GateParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub embed_w: T,
    pub embed_b: T,
    pub blocks: Vec<BlockParams<T>>,
    pub actor: MlpParams<T>,
    pub critic: MlpParams<T>,
}

impl<T> GateParams<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> GateParams<U> {
        GateParams {
            w_r: f(&self.w_r),
            u_r: f(&self.u_r),
            w_z: f(&self.w_z),
            u_z: f(&self.u_z),
            w_g: f(&self.w_g),
            u_g: f(&self.u_g),
        }
    }

    fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &T)) {
        for (name, v) in [
            ("w_r", &self.w_r),
            ("u_r", &self.u_r),
            ("w_z", &self.w_z),
            ("u_z", &self.u_z),
            ("w_g", &self.w_g),
            ("u_g", &self.u_g),
        ] {
            f(format!("{prefix}.{name}"), v);
        }
    }
}

impl<T> MlpParams<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MlpParams<U> {
        MlpParams { w1: f(&self.w1), b1: f(&self.b1), w2: f(&self.w2), b2: f(&self.b2) }
    }

    fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &T)) {
        for (name, v) in [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)] {
            f(format!("{prefix}.{name}"), v);
        }
    }
}

impl<T> BlockParams<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BlockParams<U> {
        BlockParams {
            heads: self.heads.iter().map(|h| h.map(&mut *f)).collect(),
            w_o: f(&self.w_o),
            ln1_gain: f(&self.ln1_gain),
            ln1_bias: f(&self.ln1_bias),
            gate1: self.gate1.map(f),
            ln2_gain: f(&self.ln2_gain),
            ln2_bias: f(&self.ln2_bias),
            mlp: self.mlp.map(f),
            gate2: self.gate2.map(f),
        }
    }

    fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &T)) {
        for (h, head) in self.heads.iter().enumerate() {
            for (name, v) in HeadParams::<T>::NAMES.iter().zip(head.iter()) {
                f(format!("{prefix}.head{h}.{name}"), v);
            }
        }
        f(format!("{prefix}.w_o"), &self.w_o);
        f(format!("{prefix}.ln1.gain"), &self.ln1_gain);
        f(format!("{prefix}.ln1.bias"), &self.ln1_bias);
        self.gate1.visit(&format!("{prefix}.gate1"), f);
        f(format!("{prefix}.ln2.gain"), &self.ln2_gain);
        f(format!("{prefix}.ln2.bias"), &self.ln2_bias);
        self.mlp.visit(&format!("{prefix}.mlp"), f);
        self.gate2.visit(&format!("{prefix}.gate2"), f);
    }
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            embed_w: f(&self.embed_w),
            embed_b: f(&self.embed_b),
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            actor: self.actor.map(&mut f),
            critic: self.critic.map(&mut f),
        }
    }

    /// Calls `f` on every tensor with its canonical name, in storage order.
    pub fn visit(&self, mut f: impl FnMut(String, &T)) {
        f("embed.w".into(), &self.embed_w);
        f("embed.b".into(), &self.embed_b);
        for (l, block) in self.blocks.iter().enumerate() {
            block.visit(&format!("block{l}"), &mut f);
        }
        self.actor.visit("actor", &mut f);
        self.critic.visit("critic", &mut f);
    }
}

/// Position of one tensor inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// How a tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Orthogonal(f64),
    Zeros,
    Ones,
}

fn layout(cfg: &ModelConfig) -> (ModelParams<Slot>, ModelParams<Init>) {
    let mut offset = 0;
    let mut alloc = |rows: usize, cols: usize| {
        let s = Slot { offset, rows, cols };
        offset += rows * cols;
        s
    };
    let (d, d_h, eta) = (cfg.d, cfg.d_h, cfg.head.eta());
    let hidden = cfg.mlp_ratio * d;
    let gate = |alloc: &mut dyn FnMut(usize, usize) -> Slot| GateParams {
        w_r: alloc(d, d),
        u_r: alloc(d, d),
        w_z: alloc(d, d),
        u_z: alloc(d, d),
        w_g: alloc(d, d),
        u_g: alloc(d, d),
    };
    let embed_w = alloc(d, cfg.obs_dim);
    let embed_b = alloc(d, 1);
    let blocks = (0..cfg.layers)
        .map(|_| {
            let heads = (0..cfg.heads)
                .map(|_| HeadParams::from_array(HeadParams::shapes(d, d_h, eta).map(|(r, c)| alloc(r, c))))
                .collect();
            BlockParams {
                heads,
                w_o: alloc(d, cfg.heads * d_h),
                ln1_gain: alloc(d, 1),
                ln1_bias: alloc(d, 1),
                gate1: gate(&mut alloc),
                ln2_gain: alloc(d, 1),
                ln2_bias: alloc(d, 1),
                mlp: MlpParams {
                    w1: alloc(hidden, d),
                    b1: alloc(hidden, 1),
                    w2: alloc(d, hidden),
                    b2: alloc(d, 1),
                },
                gate2: gate(&mut alloc),
            }
        })
        .collect();
    let head_mlp = |alloc: &mut dyn FnMut(usize, usize) -> Slot, width: usize, out: usize| MlpParams {
        w1: alloc(width, d),
        b1: alloc(width, 1),
        w2: alloc(out, width),
        b2: alloc(out, 1),
    };
    let actor = head_mlp(&mut alloc, cfg.actor_width, cfg.n_actions);
    let critic = head_mlp(&mut alloc, cfg.critic_width, 1);
    let slots = ModelParams { embed_w, embed_b, blocks, actor, critic };

    let mut inits = slots.map(|s| if s.cols == 1 { Init::Zeros } else { Init::Orthogonal(1.0) });
    for b in &mut inits.blocks {
        b.ln1_gain = Init::Ones;
        b.ln2_gain = Init::Ones;
    }
    inits.actor.w2 = Init::Orthogonal(0.01);
    (slots, inits)
}

/// All model weights in one flat vector with a named layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    config: ModelConfig,
    slots: ModelParams<Slot>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (slots, _) = layout(config);
        let mut n = 0;
        slots.visit(|_, s| n = n.max(s.offset + s.len()));
        Ok(Self { config: *config, slots, data: vec![0.0; n] })
    }

    /// Orthogonal weights (actor output gain 0.01), zero biases, unit
    /// layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = Self::zeros(config)?;
        let (_, inits) = layout(config);
        let mut r = rng::stream(seed, &[rng::label::INIT]);
        let mut pairs = Vec::new();
        store.slots.visit(|_, s| pairs.push(*s));
        let mut init_list = Vec::new();
        inits.visit(|_, i| init_list.push(*i));
        for (slot, init) in pairs.into_iter().zip(init_list) {
            let values = match init {
                Init::Orthogonal(gain) => orthogonal(slot.rows, slot.cols, gain, &mut r).into_data(),
                Init::Zeros => vec![0.0; slot.len()],
                Init::Ones => vec![1.0; slot.len()],
            };
            store.data[slot.range()].copy_from_slice(&values);
        }
        Ok(store)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn slots(&self) -> &ModelParams<Slot> {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `(name, slot)` for every tensor in storage order.
    pub fn entries(&self) -> Vec<(String, Slot)> {
        let mut out = Vec::new();
        self.slots.visit(|n, s| out.push((n, *s)));
        out
    }

    fn slot(&self, name: &str) -> Result<Slot> {
        self.entries()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))
    }

    pub fn get(&self, name: &str) -> Result<Matrix2> {
        let s = self.slot(name)?;
        Matrix2::from_vec(s.rows, s.cols, self.data[s.range()].to_vec())
    }

    pub fn set(&mut self, name: &str, value: &Matrix2) -> Result<()> {
        let s = self.slot(name)?;
        if value.shape() != (s.rows, s.cols) {
            return Err(Error::Shape(format!(
                "{name} is {}x{}, got {:?}",
                s.rows,
                s.cols,
                value.shape()
            )));
        }
        self.data[s.range()].copy_from_slice(value.data());
        Ok(())
    }

    /// Owned matrices for plain evaluation.
    pub fn matrices(&self) -> ModelParams<Matrix2> {
        self.slots.map(|s| {
            Matrix2::from_vec(s.rows, s.cols, self.data[s.range()].to_vec()).expect("slot shape")
        })
    }

    /// Backend views of every tensor, sliced out of `flat` (the whole
    /// parameter vector as one `n x 1` value).
    pub fn view<B: Backend>(&self, b: &mut B, flat: &B::T) -> ModelParams<B::T> {
        self.slots.map(|s| b.slice(flat, s.offset, s.rows, s.cols))
    }

    /// Writes the checkpoint text (see [`ParamStore::from_checkpoint`]).
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::from("galite-checkpoint 1\n");
        for (k, v) in self.config.to_pairs() {
            let _ = writeln!(out, "config {k} {v}");
        }
        for (name, s) in self.entries() {
            let _ = write!(out, "param {name} {} {}", s.rows, s.cols);
            for v in &self.data[s.range()] {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses checkpoint text: a `galite-checkpoint 1` header, then
    /// `config <key> <value>` lines, then one `param <name> <rows> <cols>
    /// <values...>` line per tensor in storage order.
    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("galite-checkpoint 1") {
            return Err(Error::Format("missing or unsupported header".into()));
        }
        let mut pairs = Vec::new();
        let mut params = Vec::new();
        for line in lines {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("config") => {
                    let k = parts.next().ok_or_else(|| Error::Format(line.into()))?;
                    let v = parts.next().ok_or_else(|| Error::Format(line.into()))?;
                    pairs.push((k.to_string(), v.to_string()));
                }
                Some("param") => params.push(parts.map(str::to_string).collect::<Vec<_>>()),
                None => {}
                Some(other) => return Err(Error::Format(format!("unknown record {other:?}"))),
            }
        }
        let config = ModelConfig::from_pairs(&pairs)?;
        let mut store = Self::zeros(&config)?;
        let entries = store.entries();
        if entries.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                entries.len(),
                params.len()
            )));
        }
        for ((name, slot), rec) in entries.iter().zip(&params) {
            if rec.len() < 3 || &rec[0] != name {
                return Err(Error::Format(format!("expected tensor {name}")));
            }
            let dims = (rec[1].parse::<usize>(), rec[2].parse::<usize>());
            if dims != (Ok(slot.rows), Ok(slot.cols)) || rec.len() != 3 + slot.len() {
                return Err(Error::Format(format!("shape of {name} does not match config")));
            }
            for (dst, v) in store.data[slot.range()].iter_mut().zip(&rec[3..]) {
                *dst = v.parse().map_err(|_| Error::Format(format!("bad number {v:?} in {name}")))?;
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}

/// Recurrent state of every head of every layer.
#[derive(Clone, Debug)]
pub struct ModelState<T> {
    pub layers: Vec<Vec<HeadState<T>>>,
}

impl<T> ModelState<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelState<U> {
        ModelState {
            layers: self.layers.iter().map(|l| l.iter().map(|h| h.map(&mut f)).collect()).collect(),
        }
    }
}

impl ModelState<Matrix2> {
    /// Zero state; rank-1 heads draw signs from streams derived from `seed`.
    pub fn zeros(cfg: &ModelConfig, seed: u64) -> Self {
        let layers = (0..cfg.layers)
            .map(|l| {
                (0..cfg.heads)
                    .map(|h| {
                        let s = rng::derive_seed(seed, &[l as u64, h as u64]);
                        HeadState::zeros(&cfg.head, cfg.d_h, s)
                    })
                    .collect()
            })
            .collect();
        Self { layers }
    }

    /// Scalars currently allocated.
    pub fn scalars(&self) -> usize {
        self.layers.iter().flatten().map(HeadState::scalars).sum()
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layers.len() != cfg.layers || self.layers.iter().any(|l| l.len() != cfg.heads) {
            return Err(Error::Shape("state layout does not match model".into()));
        }
        for st in self.layers.iter().flatten() {
            st.check(&cfg.head, cfg.d_h)?;
        }
        Ok(())
    }
}

fn affine<B: Backend>(b: &mut B, w: &B::T, bias: &B::T, x: &B::T) -> B::T {
    let y = b.matvec(w, x);
    b.add(&y, bias)
}

pub fn mlp<B: Backend>(b: &mut B, p: &MlpParams<B::T>, x: &B::T) -> B::T {
    let h = affine(b, &p.w1, &p.b1, x);
    let h = b.relu(&h);
    affine(b, &p.w2, &p.b2, &h)
}

/// GRU-style gate with the update gate `z` supplied.
pub fn gru_gate_with_update<B: Backend>(
    b: &mut B,
    p: &GateParams<B::T>,
    x: &B::T,
    y: &B::T,
    z: &B::T,
) -> B::T {
    let r = {
        let wy = b.matvec(&p.w_r, y);
        let ux = b.matvec(&p.u_r, x);
        let s = b.add(&wy, &ux);
        b.sigmoid(&s)
    };
    let rx = b.mul(&r, x);
    let cand = {
        let wy = b.matvec(&p.w_g, y);
        let ux = b.matvec(&p.u_g, &rx);
        let s = b.add(&wy, &ux);
        b.tanh(&s)
    };
    let keep = b.one_minus(z);
    let kept = b.mul(&keep, x);
    let new = b.mul(z, &cand);
    b.add(&kept, &new)
}

/// `(1 − z) ⊙ x + z ⊙ ĥ` with `z = σ(W_z y + U_z x − gate_bias)`; `x` is the
/// residual stream and `y` the sublayer output.
pub fn gru_gate<B: Backend>(b: &mut B, p: &GateParams<B::T>, x: &B::T, y: &B::T, gate_bias: f64) -> B::T {
    let z = {
        let wy = b.matvec(&p.w_z, y);
        let ux = b.matvec(&p.u_z, x);
        let s = b.add(&wy, &ux);
        let s = b.offset(&s, -gate_bias);
        b.sigmoid(&s)
    };
    gru_gate_with_update(b, p, x, y, &z)
}

/// Runs every head on `x`, concatenates the outputs and applies `w_o`.
pub fn multi_head<B: Backend>(
    b: &mut B,
    head: &HeadConfig,
    heads: &[HeadParams<B::T>],
    w_o: &B::T,
    x: &B::T,
    states: Vec<HeadState<B::T>>,
) -> (B::T, Vec<HeadState<B::T>>) {
    let mut outs = Vec::with_capacity(heads.len());
    let mut next = Vec::with_capacity(heads.len());
    for (p, st) in heads.iter().zip(states) {
        let (a, s) = head_step(b, head, p, x, st);
        outs.push(a);
        next.push(s);
    }
    let cat = b.concat(&outs);
    (b.matvec(w_o, &cat), next)
}

pub fn block_step<B: Backend>(
    b: &mut B,
    cfg: &ModelConfig,
    p: &BlockParams<B::T>,
    x: &B::T,
    states: Vec<HeadState<B::T>>,
) -> (B::T, Vec<HeadState<B::T>>) {
    let normed = b.layer_norm(x, &p.ln1_gain, &p.ln1_bias);
    let (attn, next) = multi_head(b, &cfg.head, &p.heads, &p.w_o, &normed, states);
    let x1 = gru_gate(b, &p.gate1, x, &attn, cfg.gate_bias);
    (block_tail(b, cfg, p, &x1), next)
}

/// Everything after the attention gate: norm, MLP, gate.
fn block_tail<B: Backend>(b: &mut B, cfg: &ModelConfig, p: &BlockParams<B::T>, x1: &B::T) -> B::T {
    let normed = b.layer_norm(x1, &p.ln2_gain, &p.ln2_bias);
    let m = mlp(b, &p.mlp, &normed);
    gru_gate(b, &p.gate2, x1, &m, cfg.gate_bias)
}

/// One streaming step of the stack: observation in, features out.
pub fn model_step<B: Backend>(
    b: &mut B,
    cfg: &ModelConfig,
    p: &ModelParams<B::T>,
    obs: &B::T,
    state: ModelState<B::T>,
) -> (B::T, ModelState<B::T>) {
    let mut x = affine(b, &p.embed_w, &p.embed_b, obs);
    let mut layers = Vec::with_capacity(state.layers.len());
    for (bp, st) in p.blocks.iter().zip(state.layers) {
        let (y, next) = block_step(b, cfg, bp, &x, st);
        x = y;
        layers.push(next);
    }
    (x, ModelState { layers })
}

/// Policy logits and state value from features.
pub fn policy_value<B: Backend>(b: &mut B, p: &ModelParams<B::T>, features: &B::T) -> (B::T, B::T) {
    (mlp(b, &p.actor, features), mlp(b, &p.critic, features))
}

/// A parameter store with plain-evaluation entry points.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    params: ModelParams<Matrix2>,
}

impl Model {
    pub fn new(store: ParamStore) -> Self {
        let params = store.matrices();
        Self { store, params }
    }

    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self::new(ParamStore::init(config, seed)?))
    }

    pub fn config(&self) -> &ModelConfig {
        self.store.config()
    }

    pub fn params(&self) -> &ModelParams<Matrix2> {
        &self.params
    }

    /// Replaces the flat parameters (for example after an optimizer step).
    pub fn set_data(&mut self, data: &[f64]) -> Result<()> {
        if data.len() != self.store.len() {
            return Err(Error::Shape(format!("{} parameters, expected {}", data.len(), self.store.len())));
        }
        self.store.data_mut().copy_from_slice(data);
        self.params = self.store.matrices();
        Ok(())
    }

    pub fn zero_state(&self, seed: u64) -> ModelState<Matrix2> {
        ModelState::zeros(self.config(), seed)
    }

    fn check(&self, obs_len: usize, state: &ModelState<Matrix2>) -> Result<()> {
        if obs_len != self.config().obs_dim {
            return Err(Error::Shape(format!(
                "observation of length {obs_len}, model expects {}",
                self.config().obs_dim
            )));
        }
        state.check(self.config())
    }

    pub fn step(&self, obs: &Vector, state: &ModelState<Matrix2>) -> Result<(Vector, ModelState<Matrix2>)> {
        self.check(obs.len(), state)?;
        let mut b = Eval::new();
        let (f, next) = model_step(&mut b, self.config(), &self.params, &obs.to_column(), state.clone());
        Ok((f.into_vector(), next))
    }

    /// Logits and value for one feature vector.
    pub fn policy(&self, features: &Vector) -> Result<(Vector, f64)> {
        if features.len() != self.config().d {
            return Err(Error::Shape(format!("features of length {}", features.len())));
        }
        let mut b = Eval::new();
        let (logits, value) = policy_value(&mut b, &self.params, &features.to_column());
        Ok((logits.into_vector(), value.item()))
    }

    /// Step iteration over the rows of `xs` (`T x obs_dim`).
    pub fn forward_steps(&self, xs: &Matrix2, state: &ModelState<Matrix2>) -> Result<(Matrix2, ModelState<Matrix2>)> {
        let mut st = state.clone();
        let mut out = Vec::with_capacity(xs.rows() * self.config().d);
        for t in 0..xs.rows() {
            let (f, next) = self.step(&Vector::new(xs.row(t).to_vec()), &st)?;
            out.extend_from_slice(f.as_slice());
            st = next;
        }
        Ok((Matrix2::from_vec(xs.rows(), self.config().d, out)?, st))
    }

    /// Whole-sequence evaluation: embeds every row, then runs each block
    /// layer by layer with the heads' scan-based sequence path.
    pub fn forward_sequence(
        &self,
        xs: &Matrix2,
        state: &ModelState<Matrix2>,
    ) -> Result<(Matrix2, ModelState<Matrix2>)> {
        if xs.rows() == 0 {
            return Err(Error::Shape("empty input sequence".into()));
        }
        self.check(xs.cols(), state)?;
        let cfg = *self.config();
        let p = &self.params;
        let rows: Vec<Matrix2> = (0..xs.rows())
            .into_par_iter()
            .map(|t| affine(&mut Eval::new(), &p.embed_w, &p.embed_b, &Matrix2::column(xs.row(t).to_vec())))
            .collect();
        let mut rows = rows;
        let mut layers = Vec::with_capacity(cfg.layers);
        for (bp, st) in p.blocks.iter().zip(&state.layers) {
            let normed: Vec<f64> = rows
                .par_iter()
                .flat_map_iter(|x| Eval::new().layer_norm(x, &bp.ln1_gain, &bp.ln1_bias).into_data())
                .collect();
            let normed = Matrix2::from_vec(rows.len(), cfg.d, normed)?;
            let per_head: Vec<(Matrix2, HeadState<Matrix2>)> = bp
                .heads
                .par_iter()
                .zip(st.par_iter())
                .map(|(hp, hs)| Head::new(cfg.head, hp.clone())?.forward_sequence(&normed, hs))
                .collect::<Result<_>>()?;
            let outs: Vec<&Matrix2> = per_head.iter().map(|(o, _)| o).collect();
            rows = rows
                .par_iter()
                .enumerate()
                .map(|(t, x)| {
                    let mut b = Eval::new();
                    let parts: Vec<Matrix2> = outs.iter().map(|o| Matrix2::column(o.row(t).to_vec())).collect();
                    let cat = b.concat(&parts);
                    let attn = b.matvec(&bp.w_o, &cat);
                    let x1 = gru_gate(&mut b, &bp.gate1, x, &attn, cfg.gate_bias);
                    block_tail(&mut b, &cfg, bp, &x1)
                })
                .collect();
            layers.push(per_head.into_iter().map(|(_, s)| s).collect());
        }
        let data: Vec<f64> = rows.into_iter().flat_map(Matrix2::into_data).collect();
        Ok((Matrix2::from_vec(xs.rows(), cfg.d, data)?, ModelState { layers }))
    }
}

/// Free-function form of [`Model::forward_sequence`].
pub fn stack_forward_sequence(
    model: &Model,
    xs: &Matrix2,
    state: &ModelState<Matrix2>,
) -> Result<(Matrix2, ModelState<Matrix2>)> {
    model.forward_sequence(xs, state)
}
