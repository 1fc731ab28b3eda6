//! Weight-conditioned attention policy with a gated-expert block.
//!
//! Encoder: node features and the weight vector are embedded by separate
//! linear maps. Each layer conditions node embeddings on the weight
//! embedding with a feature-wise affine transform, runs multi-head attention
//! in which the weight embedding and every conditioned node attend over the
//! set `{h_w, h'_0, .., h'_n}`, and finishes with a feed-forward sublayer.
//! Both sublayers use residual connections and instance normalization over
//! the token axis, with the weight token normalized jointly with the nodes.
//!
//! Decoder: at every step a problem-specific context is projected to a
//! query, attends over `{h_w, h_0, .., h_n}`, is refined by the gated-expert
//! block, and scores nodes through a clipped compatibility layer.
//!
//! Gated-expert block: `m` two-layer feed-forward experts plus one
//! parameter-free identity expert (index `m`). A linear router keeps the
//! `k` largest logits, softmaxes them, and the mixed expert output is added
//! to the input and normalized across features.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Index;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::decomposition::WeightVector;
use crate::error::{invalid, Error, Result};
use crate::math;
use crate::problems::{self, EnvState, Instance, ObjectiveVector, Problem};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub problem: Problem,
    pub kappa: usize,
    pub embed_dim: usize,
    pub n_encoder_layers: usize,
    pub n_heads: usize,
    pub n_ff_experts: usize,
    pub topk: usize,
    /// Compatibility logits are `clip * tanh(.)`.
    pub clip: f64,
    pub ff_hidden: usize,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_norm_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// Small default: d = 32, two layers, four heads, four experts, top-2.
    pub fn desk(problem: Problem, kappa: usize) -> Self {
        ModelConfig {
            problem,
            kappa,
            embed_dim: 32,
            n_encoder_layers: 2,
            n_heads: 4,
            n_ff_experts: 4,
            topk: 2,
            clip: 50.0,
            ff_hidden: 128,
            norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.problem.supports(self.kappa) {
            return Err(Error::Unsupported(format!("{} with kappa = {}", self.problem, self.kappa)));
        }
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(invalid!("embed_dim {} must be a positive multiple of n_heads {}", self.embed_dim, self.n_heads));
        }
        if self.n_encoder_layers == 0 || self.ff_hidden == 0 {
            return Err(invalid!("n_encoder_layers and ff_hidden must be positive"));
        }
        if self.topk == 0 || self.topk > self.n_ff_experts + 1 {
            return Err(invalid!("topk {} must lie in 1..={}", self.topk, self.n_ff_experts + 1));
        }
        if !(self.clip > 0.0) || !(self.norm_eps >= 0.0) {
            return Err(invalid!("clip must be positive and norm_eps non-negative"));
        }
        Ok(())
    }

    fn context_dim(&self) -> usize {
        match self.problem {
            Problem::Motsp => 2 * self.embed_dim,
            _ => self.embed_dim + 1,
        }
    }
}

// -------------------------------------------------------------------------
// Parameter layout

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Uniform { fan_in: usize },
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    init: Init,
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Clone, Debug)]
struct Norm {
    scale: ParamId,
    shift: ParamId,
}

#[derive(Clone, Debug)]
struct Attention {
    q: Vec<ParamId>,
    k: Vec<ParamId>,
    v: Vec<ParamId>,
    out: ParamId,
}

#[derive(Clone, Debug)]
struct FeedForward {
    hidden: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    film_gamma: ParamId,
    film_beta: ParamId,
    attn: Attention,
    norm_attn: Norm,
    ff: FeedForward,
    norm_ff: Norm,
}

#[derive(Clone, Debug)]
struct CcoLayout {
    gate: ParamId,
    experts: Vec<FeedForward>,
    norm: Norm,
}

#[derive(Clone, Debug)]
struct Layout {
    node_embed: Linear,
    weight_embed: Linear,
    layers: Vec<EncoderLayer>,
    ctx_start: Option<ParamId>,
    ctx_proj: ParamId,
    dec_attn: Attention,
    cco: CcoLayout,
    compat_key: ParamId,
}

struct SpecBuilder {
    specs: Vec<ParamSpec>,
}

impl SpecBuilder {
    fn add(&mut self, name: String, dims: &[usize], init: Init) -> ParamId {
        self.specs.push(ParamSpec { name, dims: dims.to_vec(), init });
        ParamId(self.specs.len() - 1)
    }

    fn matrix(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        self.add(name, &[fan_in, fan_out], Init::Uniform { fan_in })
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        let w = self.matrix(format!("{name}.weight"), fan_in, fan_out);
        let b = bias.then(|| self.add(format!("{name}.bias"), &[fan_out], Init::Uniform { fan_in }));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            scale: self.add(format!("{name}.scale"), &[d], Init::Ones),
            shift: self.add(format!("{name}.shift"), &[d], Init::Zeros),
        }
    }

    fn attention(&mut self, name: &str, d: usize, heads: usize) -> Attention {
        let dh = d / heads;
        let mut proj = |p: &str| -> Vec<ParamId> {
            (0..heads).map(|h| self.matrix(format!("{name}.{p}{h}"), d, dh)).collect()
        };
        let (q, k, v) = (proj("q"), proj("k"), proj("v"));
        let out = self.matrix(format!("{name}.out"), d, d);
        Attention { q, k, v, out }
    }

    fn feed_forward(&mut self, name: &str, d: usize, hidden: usize) -> FeedForward {
        FeedForward {
            hidden: self.linear(&format!("{name}.hidden"), d, hidden, true),
            out: self.linear(&format!("{name}.out"), hidden, d, true),
        }
    }
}

fn build_layout(c: &ModelConfig) -> (Layout, Vec<ParamSpec>) {
    let d = c.embed_dim;
    let mut b = SpecBuilder { specs: Vec::new() };
    let node_embed = b.linear("embed.node", c.problem.feature_dim(c.kappa), d, true);
    let weight_embed = b.linear("embed.weight", c.kappa, d, true);
    let layers = (0..c.n_encoder_layers)
        .map(|l| {
            let p = format!("encoder.{l}");
            EncoderLayer {
                film_gamma: b.matrix(format!("{p}.film.gamma"), d, d),
                film_beta: b.matrix(format!("{p}.film.beta"), d, d),
                attn: b.attention(&format!("{p}.attn"), d, c.n_heads),
                norm_attn: b.norm(&format!("{p}.norm_attn"), d),
                ff: b.feed_forward(&format!("{p}.ff"), d, c.ff_hidden),
                norm_ff: b.norm(&format!("{p}.norm_ff"), d),
            }
        })
        .collect();
    let ctx_start = (c.problem == Problem::Motsp)
        .then(|| b.add("decoder.ctx_start".into(), &[1, 2 * d], Init::Uniform { fan_in: d }));
    let ctx_proj = b.matrix("decoder.ctx_proj".into(), c.context_dim(), d);
    let dec_attn = b.attention("decoder.attn", d, c.n_heads);
    let gate = b.matrix("cco.gate".into(), d, c.n_ff_experts + 1);
    let experts = (0..c.n_ff_experts)
        .map(|j| b.feed_forward(&format!("cco.expert{j}"), d, c.ff_hidden))
        .collect();
    let norm = b.norm("cco.norm", d);
    let compat_key = b.matrix("decoder.compat_key".into(), d, d);
    let layout = Layout {
        node_embed,
        weight_embed,
        layers,
        ctx_start,
        ctx_proj,
        dec_attn,
        cco: CcoLayout { gate, experts, norm },
        compat_key,
    };
    (layout, b.specs)
}

/// Policy parameters in a fixed, named order.
#[derive(Clone, Debug)]
pub struct PolicyParams {
    config: ModelConfig,
    layout: Layout,
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor>,
}

impl PolicyParams {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, unit norm scales.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let tensors = specs
            .iter()
            .map(|s| {
                let n: usize = s.dims.iter().product();
                let data = match s.init {
                    Init::Uniform { fan_in } => {
                        let a = 1.0 / math::sqrt(fan_in as f64);
                        (0..n).map(|_| rng.gen_range(-a..a)).collect()
                    }
                    Init::Ones => vec![1.0; n],
                    Init::Zeros => vec![0.0; n],
                };
                Tensor::new(&s.dims, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PolicyParams { config, layout, specs, tensors })
    }

    /// Rebuilds parameters from named tensors, which must match the layout
    /// of `config` exactly (names, order and shapes).
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        if named.len() != specs.len() {
            return Err(invalid!("expected {} parameter tensors, got {}", specs.len(), named.len()));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for (spec, (name, t)) in specs.iter().zip(named) {
            if spec.name != name || spec.dims != t.dims() {
                return Err(invalid!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.dims(),
                    spec.name,
                    spec.dims
                ));
            }
            tensors.push(t);
        }
        Ok(PolicyParams { config, layout, specs, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.specs.iter().map(|s| s.name.as_str()).zip(&self.tensors)
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Index range of the parameters belonging to FF expert `j`.
    pub fn expert_param_indices(&self, j: usize) -> Vec<usize> {
        let prefix = format!("cco.expert{j}.");
        (0..self.specs.len()).filter(|&i| self.specs[i].name.starts_with(&prefix)).collect()
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> BoundPolicy<'_> {
        let vars = self.tensors.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect();
        BoundPolicy { params: self, vars }
    }

    /// Uses existing graph nodes, one per parameter in layout order, as the
    /// parameters. Only the shapes of `self` are consulted.
    pub fn bind_vars(&self, g: &Graph, vars: Vec<Var>) -> Result<BoundPolicy<'_>> {
        if vars.len() != self.tensors.len() {
            return Err(invalid!("expected {} parameter nodes, got {}", self.tensors.len(), vars.len()));
        }
        if let Some(i) = (0..vars.len()).find(|&i| g.dims(vars[i]) != self.tensors[i].dims()) {
            return Err(Error::Shape {
                op: "bind_vars",
                dims: vec![g.dims(vars[i]).to_vec(), self.tensors[i].dims().to_vec()],
            });
        }
        Ok(BoundPolicy { params: self, vars })
    }
}

// -------------------------------------------------------------------------
// Forward pass

/// Parameters registered on one graph.
pub struct BoundPolicy<'p> {
    params: &'p PolicyParams,
    vars: Vec<Var>,
}

impl Index<ParamId> for BoundPolicy<'_> {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Encoder output for one `(instance, weight)` pair plus decoder keys.
#[derive(Clone, Debug)]
pub struct Embeddings {
    /// `[n_nodes, d]`
    pub nodes: Var,
    /// `[1, d]`
    pub weight: Var,
    /// `[1 + n_nodes, d]`, the weight token first.
    tokens: Var,
    node_mean: Var,
    dec_keys: Vec<Var>,
    dec_values: Vec<Var>,
    compat_keys: Var,
}

/// Output of the gated-expert block.
#[derive(Clone, Debug)]
pub struct CcoOutput {
    pub out: Var,
    /// Gate value per expert (identity expert last); zero outside the top-k.
    pub gates: Vec<f64>,
    /// Selected experts in descending logit order.
    pub selected: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// `[1, n_nodes]` log-probabilities (`-inf` where masked).
    pub log_probs: Var,
    /// `[1, n_nodes]` clipped compatibilities before masking.
    pub logits: Var,
    pub gates: Vec<f64>,
}

/// How actions are chosen during a rollout.
pub enum Decoding<'a> {
    Greedy,
    Sample(&'a mut Rng),
    /// Re-scores a given solution (the full partial solution, as stored in
    /// [`Trajectory::actions`]).
    Replay(&'a [usize]),
}

/// A complete solution with its per-decision log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// The partial solution as built by the environment.
    pub actions: Vec<usize>,
    /// One entry per policy decision.
    pub log_probs: Vec<f64>,
    pub objective: ObjectiveVector,
}

impl Trajectory {
    /// `log p(solution)`: the sum of per-step log-probabilities.
    pub fn log_likelihood(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

/// Average per-step log-likelihood, the implicit reward of a solution.
pub fn avg_log_likelihood(traj: &Trajectory) -> f64 {
    if traj.log_probs.is_empty() {
        return 0.0;
    }
    traj.log_likelihood() / traj.log_probs.len() as f64
}

/// A trajectory together with its graph nodes.
#[derive(Clone, Debug)]
pub struct TracedTrajectory {
    pub trajectory: Trajectory,
    /// `[1, 1]` log-probability node per decision.
    pub step_log_probs: Vec<Var>,
    /// Gate vector used at each decision.
    pub gates: Vec<Vec<f64>>,
}

impl TracedTrajectory {
    /// `log p(solution)` as a `[1]` node.
    pub fn log_likelihood(&self, g: &mut Graph) -> Result<Var> {
        if self.step_log_probs.is_empty() {
            return Ok(g.constant(Tensor::scalar(0.0)));
        }
        let row = g.concat(&self.step_log_probs, 1)?;
        g.sum_all(row)
    }

    /// Average per-step log-likelihood as a `[1]` node.
    pub fn avg_log_likelihood(&self, g: &mut Graph) -> Result<Var> {
        let ll = self.log_likelihood(g)?;
        let t = self.step_log_probs.len().max(1) as f64;
        g.scale(ll, 1.0 / t)
    }
}

fn check_finite(g: &Graph, v: Var, what: &dyn Fn() -> String) -> Result<()> {
    if g.data(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

impl<'p> BoundPolicy<'p> {
    pub fn params(&self) -> &'p PolicyParams {
        self.params
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &'p ModelConfig {
        &self.params.config
    }

    /// Gradients accumulated in `g`, one tensor per parameter.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(&self.params.tensors)
            .map(|(&v, t)| {
                let data = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
                Tensor::from_shape(t.shape().clone(), data).expect("parameter shape")
            })
            .collect()
    }

    fn layout(&self) -> &'p Layout {
        &self.params.layout
    }

    fn linear(&self, g: &mut Graph, x: Var, l: &Linear) -> Result<Var> {
        let y = g.matmul(x, self[l.w])?;
        match l.b {
            Some(b) => g.add(y, self[b]),
            None => Ok(y),
        }
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, ff: &FeedForward) -> Result<Var> {
        let h = self.linear(g, x, &ff.hidden)?;
        let h = g.relu(h)?;
        self.linear(g, h, &ff.out)
    }

    fn norm(&self, g: &mut Graph, x: Var, axis: usize, n: &Norm) -> Result<Var> {
        let y = g.instance_norm(x, axis, self.config().norm_eps)?;
        let y = g.mul(y, self[n.scale])?;
        g.add(y, self[n.shift])
    }

    fn project_heads(&self, g: &mut Graph, x: Var, ws: &[ParamId]) -> Result<Vec<Var>> {
        ws.iter().map(|&w| g.matmul(x, self[w])).collect()
    }

    fn attend(&self, g: &mut Graph, query: Var, keys: &[Var], values: &[Var], a: &Attention) -> Result<Var> {
        let dh = self.config().embed_dim / self.config().n_heads;
        let inv = 1.0 / math::sqrt(dh as f64);
        let mut heads = Vec::with_capacity(a.q.len());
        for h in 0..a.q.len() {
            let q = g.matmul(query, self[a.q[h]])?;
            let s = g.matmul_t(q, keys[h])?;
            let s = g.scale(s, inv)?;
            let p = g.softmax(s, 1)?;
            heads.push(g.matmul(p, values[h])?);
        }
        let cat = g.concat(&heads, 1)?;
        g.matmul(cat, self[a.out])
    }

    /// Embeds an instance under a weight vector.
    pub fn encode(&self, g: &mut Graph, inst: &Instance, lambda: &WeightVector) -> Result<Embeddings> {
        let cfg = self.config();
        if inst.problem() != cfg.problem || inst.kappa() != cfg.kappa || lambda.kappa() != cfg.kappa {
            return Err(invalid!(
                "model for {} kappa {} cannot encode {} kappa {} with a {}-weight",
                cfg.problem,
                cfg.kappa,
                inst.problem(),
                inst.kappa(),
                lambda.kappa()
            ));
        }
        let lay = self.layout();
        let nn = inst.n_nodes();
        let z = cfg.problem.feature_dim(cfg.kappa);
        let flat: Vec<f64> = inst.features().iter().flatten().copied().collect();
        let feats = g.constant(Tensor::new(&[nn, z], flat)?);
        let lam = g.constant(Tensor::row(lambda.as_slice().to_vec()));

        let mut h = self.linear(g, feats, &lay.node_embed)?;
        let mut hw = self.linear(g, lam, &lay.weight_embed)?;
        let rest: Vec<usize> = (1..=nn).collect();
        let mut tokens = g.concat(&[hw, h], 0)?;
        for (l, layer) in lay.layers.iter().enumerate() {
            let gamma = g.matmul(hw, self[layer.film_gamma])?;
            let beta = g.matmul(hw, self[layer.film_beta])?;
            let hp = g.mul(h, gamma)?;
            let hp = g.add(hp, beta)?;
            let cond = g.concat(&[hw, hp], 0)?;
            let keys = self.project_heads(g, cond, &layer.attn.k)?;
            let values = self.project_heads(g, cond, &layer.attn.v)?;
            let att = self.attend(g, cond, &keys, &values, &layer.attn)?;
            let x = g.add(tokens, att)?;
            let x = self.norm(g, x, 0, &layer.norm_attn)?;
            let f = self.feed_forward(g, x, &layer.ff)?;
            let x = g.add(x, f)?;
            tokens = self.norm(g, x, 0, &layer.norm_ff)?;
            check_finite(g, tokens, &|| format!("encoder layer {l} activations"))?;
            hw = g.gather(tokens, 0, vec![0])?;
            h = g.gather(tokens, 0, rest.clone())?;
        }
        let node_mean = g.mean(h, 0)?;
        let dec_keys = self.project_heads(g, tokens, &lay.dec_attn.k)?;
        let dec_values = self.project_heads(g, tokens, &lay.dec_attn.v)?;
        let compat_keys = g.matmul(h, self[lay.compat_key])?;
        Ok(Embeddings { nodes: h, weight: hw, tokens, node_mean, dec_keys, dec_values, compat_keys })
    }

    /// Gated-expert block applied to a `[1, d]` context.
    pub fn cco_forward(&self, g: &mut Graph, hc: Var) -> Result<CcoOutput> {
        let cfg = self.config();
        let cco = &self.layout().cco;
        let m = cfg.n_ff_experts;
        let logits = g.matmul(hc, self[cco.gate])?;
        let (_, selected) = g.topk(logits, cfg.topk, 1)?;
        let mut mask = vec![true; m + 1];
        for &j in &selected {
            mask[j] = false;
        }
        let kept = g.masked_fill(logits, mask, f64::NEG_INFINITY)?;
        let gates = g.softmax(kept, 1)?;
        let mut acc = hc;
        for &j in &selected {
            let gate = g.gather(gates, 1, vec![j])?;
            let e = if j == m { hc } else { self.feed_forward(g, hc, &cco.experts[j])? };
            let weighted = g.mul(e, gate)?;
            acc = g.add(acc, weighted)?;
        }
        let out = self.norm(g, acc, 1, &cco.norm)?;
        Ok(CcoOutput { out, gates: g.data(gates).to_vec(), selected })
    }

    /// Log-probabilities over nodes for the next action.
    pub fn decode_step(&self, g: &mut Graph, emb: &Embeddings, state: &EnvState<'_>) -> Result<StepOutput> {
        let cfg = self.config();
        let lay = self.layout();
        let mask = state.feasible_mask()?;
        if mask.iter().all(|&m| m) {
            return Err(Error::AllMasked);
        }
        let inst = state.instance;
        let cap = inst.capacity().unwrap_or(1.0);
        let ctx = match cfg.problem {
            Problem::Motsp => match (state.first, state.current) {
                (Some(f), Some(c)) => {
                    let hf = g.gather(emb.nodes, 0, vec![f])?;
                    let hl = g.gather(emb.nodes, 0, vec![c])?;
                    g.concat(&[hf, hl], 1)?
                }
                _ => self[lay.ctx_start.expect("MOTSP layout has a start context")],
            },
            Problem::Mocvrp => {
                let hl = g.gather(emb.nodes, 0, vec![state.current.unwrap_or(0)])?;
                let rem = g.constant(Tensor::row(vec![state.remaining / cap]));
                g.concat(&[hl, rem], 1)?
            }
            Problem::Mokp => {
                let rem = g.constant(Tensor::row(vec![state.remaining / cap]));
                g.concat(&[emb.node_mean, rem], 1)?
            }
        };
        let q = g.matmul(ctx, self[lay.ctx_proj])?;
        let hc = self.attend(g, q, &emb.dec_keys, &emb.dec_values, &lay.dec_attn)?;
        let cco = self.cco_forward(g, hc)?;
        let s = g.matmul_t(cco.out, emb.compat_keys)?;
        let s = g.scale(s, 1.0 / math::sqrt(cfg.embed_dim as f64))?;
        let s = g.tanh(s)?;
        let logits = g.scale(s, cfg.clip)?;
        let masked = g.masked_fill(logits, mask, f64::NEG_INFINITY)?;
        let log_probs = g.log_softmax(masked, 1)?;
        Ok(StepOutput { log_probs, logits, gates: cco.gates })
    }

    /// Builds one complete solution.
    pub fn rollout(
        &self,
        g: &mut Graph,
        emb: &Embeddings,
        inst: &Instance,
        mut mode: Decoding<'_>,
    ) -> Result<TracedTrajectory> {
        let mut state = problems::reset(inst);
        let mut step_log_probs = Vec::new();
        let mut log_probs = Vec::new();
        let mut gates = Vec::new();
        let mut cursor = 0usize;
        while !state.done {
            let out = self.decode_step(g, emb, &state)?;
            let lp = g.data(out.log_probs);
            let action = match &mut mode {
                Decoding::Greedy => argmax(lp),
                Decoding::Sample(rng) => sample(lp, rng),
                Decoding::Replay(actions) => {
                    let a = *actions
                        .get(cursor)
                        .ok_or_else(|| Error::Infeasible(String::from("replayed solution ends early")))?;
                    cursor += 1;
                    a
                }
            };
            let chosen = g.gather(out.log_probs, 1, vec![action])?;
            state.step(action)?;
            log_probs.push(g.item(chosen));
            step_log_probs.push(chosen);
            gates.push(out.gates);
        }
        if let Decoding::Replay(actions) = mode {
            if state.partial.as_slice() != actions {
                return Err(Error::Infeasible(format!(
                    "replayed solution {actions:?} differs from {:?}",
                    state.partial
                )));
            }
        }
        let objective = problems::evaluate(inst, &state.partial)?;
        Ok(TracedTrajectory {
            trajectory: Trajectory { actions: state.partial, log_probs, objective },
            step_log_probs,
            gates,
        })
    }

    /// Convenience: fresh encoding followed by one rollout.
    pub fn solve(&self, g: &mut Graph, inst: &Instance, lambda: &WeightVector, mode: Decoding<'_>) -> Result<TracedTrajectory> {
        let emb = self.encode(g, inst, lambda)?;
        self.rollout(g, &emb, inst, mode)
    }
}

impl Embeddings {
    /// `[1 + n_nodes, d]` with the weight token first.
    pub fn tokens(&self) -> Var {
        self.tokens
    }
}

/// Index of the largest finite entry, ties to the lowest index.
fn argmax(lp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    best
}

fn sample(lp: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v == f64::NEG_INFINITY {
            continue;
        }
        acc += math::exp(v);
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Rollout with a fresh no-grad graph.
pub fn run_policy(params: &PolicyParams, inst: &Instance, lambda: &WeightVector, mode: Decoding<'_>) -> Result<Trajectory> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    Ok(p.solve(&mut g, inst, lambda, mode)?.trajectory)
}

/// `log p(actions)` under the policy.
pub fn log_likelihood(params: &PolicyParams, inst: &Instance, lambda: &WeightVector, actions: &[usize]) -> Result<f64> {
    Ok(run_policy(params, inst, lambda, Decoding::Replay(actions))?.log_likelihood())
}
