//! Agents: a referent encoder and an utterance encoder sharing a latent
//! space, the cosine energy between them, and the contrastive association
//! updates for the speaker and listener roles.

use std::io::{Read, Write};

use diffcore::{Adam, AdamConfig, Graph, Tensor, Var};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::referents::{ReferentMode, PERSPECTIVE_SIDE};
use crate::sensorimotor::CANVAS;

pub const EMBEDDING_DIM: usize = 32;
pub const ONE_HOT_HIDDEN: usize = 32;
pub const CONV_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Linear {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    Flatten,
}

impl Layer {
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![vec![out_channels, in_channels, kernel, kernel], vec![out_channels]],
            Layer::Linear { inputs, outputs } => vec![vec![inputs, outputs], vec![outputs]],
            _ => Vec::new(),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Layer::Conv {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            Layer::Linear { inputs, .. } => inputs,
            _ => 0,
        }
    }
}

/// Input shape (without batch axis) and layer stack.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input: Vec<usize>,
    pub layers: Vec<Layer>,
}

fn conv_out(side: usize, stride: usize, pad: usize) -> usize {
    (side + 2 * pad - CONV_KERNEL) / stride + 1
}

impl EncoderSpec {
    /// Three stride-2 convolutions (8, 16, 32 channels) then Linear(128), Linear(d).
    pub fn conv(side: usize, embedding: usize) -> Self {
        let mut layers = Vec::new();
        let mut s = side;
        let mut c = 1;
        for (out, pad) in [(8, 1), (16, 1), (32, 0)] {
            layers.push(Layer::Conv {
                in_channels: c,
                out_channels: out,
                kernel: CONV_KERNEL,
                stride: 2,
                pad,
            });
            layers.push(Layer::Relu);
            s = conv_out(s, 2, pad);
            c = out;
        }
        layers.extend([
            Layer::Flatten,
            Layer::Linear {
                inputs: c * s * s,
                outputs: 128,
            },
            Layer::Relu,
            Layer::Linear {
                inputs: 128,
                outputs: embedding,
            },
        ]);
        EncoderSpec {
            input: vec![1, side, side],
            layers,
        }
    }

    /// The conv stack replaced by a single Linear(hidden) layer.
    pub fn one_hot(m: usize, hidden: usize, embedding: usize) -> Self {
        EncoderSpec {
            input: vec![m],
            layers: vec![
                Layer::Linear {
                    inputs: m,
                    outputs: hidden,
                },
                Layer::Relu,
                Layer::Linear {
                    inputs: hidden,
                    outputs: 128,
                },
                Layer::Relu,
                Layer::Linear {
                    inputs: 128,
                    outputs: embedding,
                },
            ],
        }
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().flat_map(Layer::param_shapes).collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Linear { outputs, .. } => Some(*outputs),
                _ => None,
            })
            .unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    spec: EncoderSpec,
    params: Vec<Tensor>,
}

impl Encoder {
    /// He-uniform weights, fan-in uniform biases.
    pub fn init(spec: EncoderSpec, rng: &mut dyn RngCore) -> Self {
        let mut params = Vec::new();
        for layer in &spec.layers {
            let fan_in = layer.fan_in() as f64;
            for (k, shape) in layer.param_shapes().into_iter().enumerate() {
                let bound = if k == 0 {
                    (6.0 / fan_in).sqrt()
                } else {
                    1.0 / fan_in.sqrt()
                };
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                params.push(Tensor::new(shape, data).expect("non-empty layer"));
            }
        }
        Encoder { spec, params }
    }

    pub fn from_parts(spec: EncoderSpec, params: Vec<Tensor>) -> Result<Self> {
        let shapes = spec.param_shapes();
        if shapes.len() != params.len()
            || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(Error::InvalidInput("parameters do not match encoder spec".into()));
        }
        Ok(Encoder { spec, params })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Adds the parameters to `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
                .map_err(Error::from)
            })
            .collect()
    }

    /// `x` is `[N, input..]`; returns `[N, d]`.
    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != self.spec.input.len() + 1 || shape[1..] != self.spec.input[..] {
            return Err(Error::InvalidInput(format!(
                "encoder expects [N, {:?}], got {:?}",
                self.spec.input, shape
            )));
        }
        let n = shape[0];
        let mut p = params.iter().copied();
        let mut next = || p.next().ok_or_else(|| Error::InvalidInput("missing parameter".into()));
        let mut h = x;
        for layer in &self.spec.layers {
            h = match *layer {
                Layer::Conv { stride, pad, .. } => {
                    let (w, b) = (next()?, next()?);
                    g.conv2d(h, w, b, stride, pad)?
                }
                Layer::Linear { .. } => {
                    let (w, b) = (next()?, next()?);
                    g.linear(h, w, b)?
                }
                Layer::Relu => g.relu(h)?,
                Layer::Flatten => {
                    let flat = g.value(h).numel() / n;
                    g.reshape(h, &[n, flat])?
                }
            };
        }
        Ok(h)
    }

    /// Smallest |pre-activation| over every ReLU input for a batch `x`.
    pub fn relu_margin(&self, x: &Tensor) -> Result<f64> {
        let mut margin = f64::INFINITY;
        let mut taken = 0;
        for (k, layer) in self.spec.layers.iter().enumerate() {
            if let Layer::Relu = layer {
                let prefix = EncoderSpec {
                    input: self.spec.input.clone(),
                    layers: self.spec.layers[..k].to_vec(),
                };
                taken = prefix.param_shapes().len().max(taken);
                let pre = Encoder::from_parts(prefix, self.params[..taken].to_vec())?.embed(x)?;
                margin = pre.data().iter().fold(margin, |m, v| m.min(v.abs()));
            }
        }
        Ok(margin)
    }

    /// Embeddings `[N, d]` without gradient tracking.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let out = self.forward(&mut g, &params, xv)?;
        Ok(g.value(out).clone())
    }
}

/// Cumulative mean of raw speaker successes; zero before any game.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Baseline {
    pub successes: u64,
    pub games: u64,
}

impl Baseline {
    pub fn value(&self) -> f64 {
        if self.games == 0 {
            0.0
        } else {
            self.successes as f64 / self.games as f64
        }
    }

    pub fn record(&mut self, success: bool) {
        self.games += 1;
        self.successes += success as u64;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub tau: f64,
    pub association_lr: f64,
    pub one_hot_hidden: usize,
    pub embedding_dim: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            tau: 1.0,
            association_lr: 1e-4,
            one_hot_hidden: ONE_HOT_HIDDEN,
            embedding_dim: EMBEDDING_DIM,
        }
    }
}

/// One speaker-side training sample. `views` is `[A, ..]`: the target as
/// perceived by the speaker, replicated over `A` perspectives.
#[derive(Clone, Debug)]
pub struct SpeakerRecord {
    pub views: Tensor,
    pub utterance: Tensor,
    pub outcome: f64,
}

/// One listener-side sample: the utterance and the listener's views of the
/// referent the speaker actually named.
#[derive(Clone, Debug)]
pub struct ListenerRecord {
    pub views: Tensor,
    pub utterance: Tensor,
}

/// Samples collected during one round; index `i` is the `i`-th game.
#[derive(Clone, Debug, Default)]
pub struct GameBatch {
    pub speaker: Vec<SpeakerRecord>,
    pub listener: Vec<ListenerRecord>,
}

#[derive(Clone, Debug)]
pub struct AgentModel {
    pub referent: Encoder,
    pub utterance: Encoder,
    pub referent_opt: Adam,
    pub utterance_opt: Adam,
    pub baseline: Baseline,
    pub config: AgentConfig,
}

/// Symmetric cross entropy on row and column `i` of a square similarity matrix.
pub fn contrastive_objective(sigma: &[Vec<f64>], i: usize, tau: f64) -> Result<f64> {
    let n = sigma.len();
    if sigma.iter().any(|r| r.len() != n) || i >= n {
        return Err(Error::InvalidInput(format!("index {i} into a non-square or short matrix")));
    }
    let ce = |logits: Vec<f64>| {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        lse - logits[i]
    };
    let row: Vec<f64> = sigma[i].iter().map(|v| v / tau).collect();
    let col: Vec<f64> = sigma.iter().map(|r| r[i] / tau).collect();
    Ok((ce(row) + ce(col)) / 2.0)
}

/// `Σ = cos(zr, zu) / τ` over `A` perspective copies; returns
/// `Σ_{a,i} w_i (CE_row + CE_col) / 2 / (A n)`.
pub fn association_loss(g: &mut Graph, zr: Var, zu: Var, weights: &[f64], tau: f64) -> Result<Var> {
    let shape = g.value(zr).shape().to_vec();
    let (a, n) = (shape[0], shape[1]);
    if weights.len() != n || g.value(zu).shape()[0] != n {
        return Err(Error::InvalidInput(format!(
            "{} weights for {n} games and {} utterances",
            weights.len(),
            g.value(zu).shape()[0]
        )));
    }
    let sim = g.cosine_similarity(zr, zu)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    let targets: Vec<usize> = (0..a).flat_map(|_| 0..n).collect();
    let rows = g.cross_entropy(logits, 2, &targets)?;
    let cols = g.cross_entropy(logits, 1, &targets)?;
    let both = g.add(rows, cols)?;
    let scale = 0.5 / (a * n) as f64;
    let w: Vec<f64> = (0..a).flat_map(|_| weights.iter().map(|v| v * scale)).collect();
    let wv = g.constant(Tensor::new(vec![a, n], w)?)?;
    let weighted = g.mul(both, wv)?;
    Ok(g.sum(weighted)?)
}

impl AgentModel {
    pub fn new(mode: ReferentMode, m: usize, config: AgentConfig, rng: &mut dyn RngCore) -> Self {
        let d = config.embedding_dim;
        let rspec = match mode {
            ReferentMode::OneHot => EncoderSpec::one_hot(m, config.one_hot_hidden, d),
            _ => EncoderSpec::conv(PERSPECTIVE_SIDE, d),
        };
        let referent = Encoder::init(rspec, rng);
        let utterance = Encoder::init(EncoderSpec::conv(CANVAS, d), rng);
        AgentModel::from_encoders(referent, utterance, config)
    }

    pub fn from_encoders(referent: Encoder, utterance: Encoder, config: AgentConfig) -> Self {
        let adam = AdamConfig::with_lr(config.association_lr);
        AgentModel {
            referent_opt: Adam::new(adam, referent.params()),
            utterance_opt: Adam::new(adam, utterance.params()),
            referent,
            utterance,
            baseline: Baseline::default(),
            config,
        }
    }

    /// Referent embeddings `[K, d]` for a list of single views.
    pub fn embed_referents(&self, views: &[Tensor]) -> Result<Tensor> {
        self.referent.embed(&Tensor::stack(views)?)
    }

    pub fn embed_utterances(&self, utterances: &Tensor) -> Result<Tensor> {
        self.utterance.embed(utterances)
    }

    /// Energies `[N, K]` of `N` utterances against `K` referent embeddings.
    pub fn energies(&self, referent_embeddings: &Tensor, utterances: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let zu = g.constant(self.embed_utterances(utterances)?)?;
        let zr = g.constant(referent_embeddings.clone())?;
        let e = g.cosine_similarity(zu, zr)?;
        Ok(g.value(e).clone())
    }

    pub fn energy(&self, referent_view: &Tensor, utterance: &Tensor) -> Result<f64> {
        let zr = self.embed_referents(std::slice::from_ref(referent_view))?;
        let u = Tensor::stack(std::slice::from_ref(utterance))?;
        Ok(self.energies(&zr, &u)?.item())
    }

    /// One Adam step on both encoders; skipped when the gradient is exactly zero.
    /// Returns the loss before the step.
    fn associate(&mut self, views: Vec<&Tensor>, utterances: Vec<&Tensor>, weights: &[f64]) -> Result<f64> {
        let n = utterances.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty game batch".into()));
        }
        // views[i] is [A, ..]; arrange as [A, n, ..] then flatten to [A*n, ..]
        let a = views[0].shape()[0];
        let item: Vec<usize> = views[0].shape()[1..].to_vec();
        let per: usize = item.iter().product();
        if views.iter().any(|v| v.shape() != views[0].shape()) {
            return Err(Error::InvalidInput("perspective batches differ in shape".into()));
        }
        let mut data = vec![0.0; a * n * per];
        for (i, v) in views.iter().enumerate() {
            for k in 0..a {
                let dst = (k * n + i) * per;
                data[dst..dst + per].copy_from_slice(&v.data()[k * per..(k + 1) * per]);
            }
        }
        let mut shape = vec![a * n];
        shape.extend(&item);
        let referents = Tensor::new(shape, data)?;
        let owned: Vec<Tensor> = utterances.into_iter().cloned().collect();
        let utts = Tensor::stack(&owned)?;

        let mut g = Graph::new();
        let rp = self.referent.bind(&mut g, true)?;
        let up = self.utterance.bind(&mut g, true)?;
        let rx = g.constant(referents)?;
        let ux = g.constant(utts)?;
        let zr = self.referent.forward(&mut g, &rp, rx)?;
        let zr = g.reshape(zr, &[a, n, self.config.embedding_dim])?;
        let zu = self.utterance.forward(&mut g, &up, ux)?;
        let loss = association_loss(&mut g, zr, zu, weights, self.config.tau)?;
        let value = g.value(loss).item();
        let mut grads = g.backward(loss)?;
        let collect = |vars: &[Var], grads: &mut diffcore::Gradients, like: &[Tensor]| -> Vec<Tensor> {
            vars.iter()
                .zip(like)
                .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
                .collect()
        };
        let rg = collect(&rp, &mut grads, self.referent.params());
        let ug = collect(&up, &mut grads, self.utterance.params());
        let zero = rg.iter().chain(&ug).all(|t| t.data().iter().all(|v| *v == 0.0));
        if !zero {
            self.referent_opt.step(self.referent.params_mut(), &rg)?;
            self.utterance_opt.step(self.utterance.params_mut(), &ug)?;
        }
        Ok(value)
    }

    /// Minimizes `Σ_i o_i J(Σ, i)`: reinforces successful pairs and weakens failed ones.
    pub fn speaker_update(&mut self, batch: &GameBatch) -> Result<f64> {
        let weights: Vec<f64> = batch.speaker.iter().map(|r| r.outcome).collect();
        self.associate(
            batch.speaker.iter().map(|r| &r.views).collect(),
            batch.speaker.iter().map(|r| &r.utterance).collect(),
            &weights,
        )
    }

    /// Minimizes `Σ_i J(Σ, i)` regardless of outcomes.
    pub fn listener_update(&mut self, batch: &GameBatch) -> Result<f64> {
        let weights = vec![1.0; batch.listener.len()];
        self.associate(
            batch.listener.iter().map(|r| &r.views).collect(),
            batch.listener.iter().map(|r| &r.utterance).collect(),
            &weights,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.referent.params().iter().chain(self.utterance.params()).all(Tensor::is_finite)
    }
}

const MAGIC: &[u8; 8] = b"GREGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.u64(b.len() as u64)?;
        Ok(self.0.write_all(b)?)
    }
    fn tensors(&mut self, ts: &[Tensor]) -> Result<()> {
        self.u32(ts.len() as u32)?;
        for t in ts {
            self.u32(t.rank() as u32)?;
            for d in t.shape() {
                self.u64(*d as u64)?;
            }
            for v in t.data() {
                self.f64(*v)?;
            }
        }
        Ok(())
    }
    fn adam(&mut self, a: &Adam) -> Result<()> {
        let c = a.config;
        for v in [c.lr, c.beta1, c.beta2, c.eps] {
            self.f64(v)?;
        }
        self.u64(a.timestep())?;
        self.tensors(a.first_moments())?;
        self.tensors(a.second_moments())
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn fixed<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0
            .read_exact(&mut b)
            .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
        Ok(b)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.fixed()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.fixed()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.fixed()?))
    }
    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u64()? as usize;
        if n > 1 << 20 {
            return Err(Error::Checkpoint(format!("implausible block length {n}")));
        }
        let mut b = vec![0u8; n];
        self.0
            .read_exact(&mut b)
            .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
        Ok(b)
    }
    fn tensors(&mut self) -> Result<Vec<Tensor>> {
        let count = self.u32()?;
        let mut out = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let rank = self.u32()?;
            let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n > 1 << 26 {
                return Err(Error::Checkpoint(format!("implausible tensor shape {shape:?}")));
            }
            let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            out.push(Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?);
        }
        Ok(out)
    }
    fn adam(&mut self) -> Result<Adam> {
        let config = AdamConfig {
            lr: self.f64()?,
            beta1: self.f64()?,
            beta2: self.f64()?,
            eps: self.f64()?,
        };
        let step = self.u64()?;
        let first = self.tensors()?;
        let second = self.tensors()?;
        Adam::from_parts(config, step, first, second).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

fn write_encoder<W: Write>(w: &mut Writer<W>, e: &Encoder) -> Result<()> {
    let spec = serde_json::to_vec(e.spec()).map_err(|err| Error::Checkpoint(err.to_string()))?;
    w.bytes(&spec)?;
    w.tensors(e.params())
}

fn read_encoder<R: Read>(r: &mut Reader<R>) -> Result<Encoder> {
    let spec: EncoderSpec =
        serde_json::from_slice(&r.bytes()?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let params = r.tensors()?;
    Encoder::from_parts(spec, params).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Serializes a pair of agents and the referent mode; little-endian throughout.
pub fn write_checkpoint<W: Write>(out: W, mode: ReferentMode, agents: &[AgentModel]) -> Result<()> {
    let mut w = Writer(out);
    w.0.write_all(MAGIC)?;
    w.u32(CHECKPOINT_VERSION)?;
    w.u32(mode.code() as u32)?;
    w.u32(agents.len() as u32)?;
    for a in agents {
        let c = a.config;
        for v in [c.tau, c.association_lr] {
            w.f64(v)?;
        }
        w.u64(c.one_hot_hidden as u64)?;
        w.u64(c.embedding_dim as u64)?;
        w.u64(a.baseline.successes)?;
        w.u64(a.baseline.games)?;
        write_encoder(&mut w, &a.referent)?;
        write_encoder(&mut w, &a.utterance)?;
        w.adam(&a.referent_opt)?;
        w.adam(&a.utterance_opt)?;
    }
    Ok(w.0.flush()?)
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<(ReferentMode, Vec<AgentModel>)> {
    let mut r = Reader(input);
    if &r.fixed::<8>()? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let mode = ReferentMode::from_code(r.u32()? as u8)
        .ok_or_else(|| Error::Checkpoint("unknown referent mode".into()))?;
    let count = r.u32()?;
    let mut agents = Vec::new();
    for _ in 0..count {
        let config = AgentConfig {
            tau: r.f64()?,
            association_lr: r.f64()?,
            one_hot_hidden: r.u64()? as usize,
            embedding_dim: r.u64()? as usize,
        };
        let baseline = Baseline {
            successes: r.u64()?,
            games: r.u64()?,
        };
        let referent = read_encoder(&mut r)?;
        let utterance = read_encoder(&mut r)?;
        let referent_opt = r.adam()?;
        let utterance_opt = r.adam()?;
        agents.push(AgentModel {
            referent,
            utterance,
            referent_opt,
            utterance_opt,
            baseline,
            config,
        });
    }
    Ok((mode, agents))
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffcore::gradcheck::{check_gradients, DEFAULT_STEP, DEFAULT_TOLERANCE};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn relu_margin_reads_pre_activations() {
        let spec = EncoderSpec::one_hot(2, 2, 1);
        let params = vec![
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, -1.0]).unwrap(),
            Tensor::vector(vec![0.25, 0.5]),
            Tensor::new(vec![2, 128], vec![0.5; 256]).unwrap(),
            Tensor::full(vec![128], -0.3),
            Tensor::new(vec![128, 1], vec![1.0; 128]).unwrap(),
            Tensor::vector(vec![0.0]),
        ];
        let enc = Encoder::from_parts(spec, params).unwrap();
        // first layer [1.25, 0.5], second layer 0.5 * 1.75 - 0.3
        let x = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert!((enc.relu_margin(&x).unwrap() - 0.5).abs() < 1e-12);
        // first layer [0.25, -0.5], second layer 0.5 * 0.25 - 0.3
        let y = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        assert!((enc.relu_margin(&y).unwrap() - 0.175).abs() < 1e-12);
    }

    #[test]
    fn parameter_counts_match_closed_form() {
        // conv: 9c_in*c_out + c_out per layer, then two linears
        let utt = 8 * 9 + 8 + 16 * 72 + 16 + 32 * 144 + 32 + 1152 * 128 + 128 + 128 * 32 + 32;
        assert_eq!(utt, 157_600);
        assert_eq!(EncoderSpec::conv(52, 32).param_count(), utt);
        let vis = utt - 1152 * 128 + 5408 * 128;
        assert_eq!(EncoderSpec::conv(112, 32).param_count(), vis);
        assert_eq!(vis, 702_368);
        assert_eq!(EncoderSpec::one_hot(5, 32, 32).param_count(), 5 * 32 + 32 + 32 * 128 + 128 + 128 * 32 + 32);
        let a = AgentModel::new(ReferentMode::OneHot, 5, AgentConfig::default(), &mut rng(0));
        assert_eq!(a.utterance.param_count(), utt);
    }

    #[test]
    fn embeddings_shapes_and_errors() {
        let a = AgentModel::new(ReferentMode::OneHot, 5, AgentConfig::default(), &mut rng(1));
        let z = a.embed_referents(&[Tensor::vector(vec![1.0, 0.0, 0.0, 0.0, 0.0])]).unwrap();
        assert_eq!(z.shape(), &[1, 32]);
        assert!(a.embed_referents(&[Tensor::vector(vec![1.0; 4])]).is_err());
        let zero = Tensor::zeros(vec![1, 1, 52, 52]);
        let e = a.embed_utterances(&zero).unwrap();
        assert!(e.is_finite());
        assert_eq!(e, a.embed_utterances(&zero).unwrap());
        let one_hots: Vec<Tensor> = (0..5)
            .map(|i| {
                let mut v = vec![0.0; 5];
                v[i] = 1.0;
                Tensor::vector(v)
            })
            .collect();
        let z = a.embed_referents(&one_hots).unwrap();
        for i in 0..5 {
            for j in 0..i {
                assert_ne!(z.index(i), z.index(j));
            }
        }
    }

    #[test]
    fn objective_hand_values() {
        let s = vec![vec![1.0, -1.0], vec![-1.0, 1.0]];
        let j = contrastive_objective(&s, 0, 1.0).unwrap();
        assert!((j - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
        assert!((j - 0.1269).abs() < 1e-4);
        let sep: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..5).map(|k| if i == k { 1.0 } else { -1.0 }).collect())
            .collect();
        let j5 = contrastive_objective(&sep, 3, 1.0).unwrap();
        assert!((j5 - (1.0 + 4.0 * (-2.0f64).exp()).ln()).abs() < 1e-12);
        assert!((j5 - 0.432653).abs() < 1e-6);
        let uniform = vec![vec![0.3; 7]; 7];
        assert!((contrastive_objective(&uniform, 2, 1.0).unwrap() - 7f64.ln()).abs() < 1e-12);
        assert!(contrastive_objective(&uniform, 7, 1.0).is_err());
    }

    #[test]
    fn graph_loss_matches_pure_objective() {
        let mut r = rng(2);
        let (n, d) = (4, 3);
        let zr = random_tensor(&mut r, &[1, n, d], -1.0, 1.0);
        let zu = random_tensor(&mut r, &[n, d], -1.0, 1.0);
        let w = [0.5, -0.25, 1.0, 0.0];
        let mut g = Graph::new();
        let (a, b) = (g.constant(zr.clone()).unwrap(), g.constant(zu.clone()).unwrap());
        let l = association_loss(&mut g, a, b, &w, 0.7).unwrap();
        let sim = g.cosine_similarity(a, b).unwrap();
        let s = g.value(sim).data().to_vec();
        let sigma: Vec<Vec<f64>> = s.chunks(n).map(|c| c.to_vec()).collect();
        let expect: f64 = (0..n)
            .map(|i| w[i] * contrastive_objective(&sigma, i, 0.7).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((g.value(l).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn energy_is_bounded_and_differentiable_in_pixels() {
        let a = AgentModel::new(ReferentMode::OneHot, 5, AgentConfig::default(), &mut rng(3));
        let mut r = rng(4);
        let view = Tensor::vector(vec![0.0, 1.0, 0.0, 0.0, 0.0]);
        let zr = a.embed_referents(&[view]).unwrap();
        let u = random_tensor(&mut r, &[1, 1, 52, 52], 0.0, 1.0);
        let e = a.energies(&zr, &u).unwrap().item();
        assert!(e.abs() <= 1.0 + 1e-6);
        let report = check_gradients(
            |g, v| {
                let p = a.utterance.bind(g, false).map_err(|_| diffcore::Error::GraphConsumed)?;
                let zu = a.utterance.forward(g, &p, v[0]).map_err(|_| diffcore::Error::GraphConsumed)?;
                let zr = g.constant(zr.clone())?;
                let c = g.cosine_similarity(zu, zr)?;
                g.sum(c)
            },
            &[u],
            // with 2704 inputs a 1e-4 stencil occasionally straddles a relu kink
            1e-6,
        )
        .unwrap();
        assert!(report.passes(DEFAULT_TOLERANCE), "{:?}", report.errors);
    }

    fn toy_agent(seed: u64, lr: f64) -> AgentModel {
        let config = AgentConfig {
            association_lr: lr,
            embedding_dim: 3,
            ..AgentConfig::default()
        };
        let lin = |i, o| EncoderSpec {
            input: vec![i],
            layers: vec![Layer::Linear { inputs: i, outputs: o }],
        };
        let mut r = rng(seed);
        AgentModel::from_encoders(Encoder::init(lin(2, 3), &mut r), Encoder::init(lin(4, 3), &mut r), config)
    }

    #[test]
    fn association_gradient_matches_finite_differences() {
        let agent = toy_agent(5, 1e-3);
        let mut r = rng(6);
        let views = random_tensor(&mut r, &[2, 3, 2], -1.0, 1.0);
        let utts = random_tensor(&mut r, &[3, 4], -1.0, 1.0);
        let w = [1.0, -0.5, 0.25];
        let mut inputs: Vec<Tensor> = agent.referent.params().to_vec();
        inputs.extend(agent.utterance.params().iter().cloned());
        let report = check_gradients(
            |g, v| {
                let rx = g.constant(views.clone().reshape(vec![6, 2]).unwrap())?;
                let ux = g.constant(utts.clone())?;
                let zr = g.linear(rx, v[0], v[1])?;
                let zr = g.reshape(zr, &[2, 3, 3])?;
                let zu = g.linear(ux, v[2], v[3])?;
                association_loss(g, zr, zu, &w, 1.0).map_err(|_| diffcore::Error::GraphConsumed)
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.passes(DEFAULT_TOLERANCE), "{:?}", report.errors);
    }

    fn batch_of(views: &[Tensor], utts: &[Tensor], outcomes: &[f64]) -> GameBatch {
        GameBatch {
            speaker: views
                .iter()
                .zip(utts)
                .zip(outcomes)
                .map(|((v, u), o)| SpeakerRecord {
                    views: Tensor::stack(std::slice::from_ref(v)).unwrap(),
                    utterance: u.clone(),
                    outcome: *o,
                })
                .collect(),
            listener: views
                .iter()
                .zip(utts)
                .map(|(v, u)| ListenerRecord {
                    views: Tensor::stack(std::slice::from_ref(v)).unwrap(),
                    utterance: u.clone(),
                })
                .collect(),
        }
    }

    #[test]
    fn zero_outcomes_and_singletons_leave_parameters_unchanged() {
        let mut a = toy_agent(7, 1e-2);
        let mut r = rng(8);
        let views = vec![random_tensor(&mut r, &[2], -1.0, 1.0), random_tensor(&mut r, &[2], -1.0, 1.0)];
        let utts = vec![random_tensor(&mut r, &[4], -1.0, 1.0), random_tensor(&mut r, &[4], -1.0, 1.0)];
        let before = a.clone();
        a.speaker_update(&batch_of(&views, &utts, &[0.0, 0.0])).unwrap();
        assert_eq!(a.referent, before.referent);
        assert_eq!(a.referent_opt.timestep(), 0);
        let loss = a.speaker_update(&batch_of(&views[..1], &utts[..1], &[0.7])).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(a.utterance, before.utterance);
        assert!(a.speaker_update(&GameBatch::default()).is_err());
    }

    #[test]
    fn failed_game_lowers_its_diagonal_energy() {
        let mut a = toy_agent(9, 1e-2);
        let mut r = rng(10);
        let views: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut r, &[2], -1.0, 1.0)).collect();
        let utts: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut r, &[4], -1.0, 1.0)).collect();
        let e0 = a.energy(&views[1], &utts[1]).unwrap();
        a.speaker_update(&batch_of(&views, &utts, &[0.0, -1.0, 0.0])).unwrap();
        assert!(a.energy(&views[1], &utts[1]).unwrap() < e0);
    }

    #[test]
    fn listener_updates_make_the_diagonal_dominant() {
        let mut a = AgentModel::new(ReferentMode::OneHot, 5, AgentConfig::default(), &mut rng(11));
        let mut r = rng(12);
        let views = vec![
            Tensor::vector(vec![1.0, 0.0, 0.0, 0.0, 0.0]),
            Tensor::vector(vec![0.0, 0.0, 1.0, 0.0, 0.0]),
        ];
        let utts: Vec<Tensor> = (0..2).map(|_| random_tensor(&mut r, &[1, 52, 52], 0.0, 1.0)).collect();
        let batch = batch_of(&views, &utts, &[1.0, 1.0]);
        for _ in 0..200 {
            a.listener_update(&batch).unwrap();
        }
        assert!(a.is_finite());
        let zr = a.embed_referents(&views).unwrap();
        let e = a.energies(&zr, &Tensor::stack(&utts).unwrap()).unwrap();
        // e[u][r]
        for i in 0..2 {
            for j in 0..2 {
                if i != j {
                    assert!(e.data()[i * 2 + i] > e.data()[j * 2 + i], "{:?}", e.data());
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut a = toy_agent(13, 1e-2);
        let mut r = rng(14);
        let views: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut r, &[2], -1.0, 1.0)).collect();
        let utts: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut r, &[4], -1.0, 1.0)).collect();
        a.listener_update(&batch_of(&views, &utts, &[1.0; 3])).unwrap();
        a.baseline.record(true);
        let b = AgentModel::new(ReferentMode::OneHot, 5, AgentConfig::default(), &mut rng(15));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, ReferentMode::VisualShared, &[a.clone(), b.clone()]).unwrap();
        let (mode, back) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(mode, ReferentMode::VisualShared);
        let mut again = Vec::new();
        write_checkpoint(&mut again, mode, &back).unwrap();
        assert_eq!(buf, again);
        assert_eq!(back[0].referent, a.referent);
        assert_eq!(back[0].baseline, a.baseline);
        assert_eq!(back[0].referent_opt.timestep(), 1);
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(matches!(read_checkpoint(&bad[..]), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn baseline_is_a_cumulative_mean() {
        let mut b = Baseline::default();
        assert_eq!(b.value(), 0.0);
        for k in 0..1000 {
            b.record(k % 4 == 0);
        }
        assert!((b.value() - 0.25).abs() < 1e-12);
    }
}
