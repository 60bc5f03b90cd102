//! Game orchestration: producing utterances by gradient descent on the
//! speaker's energy, listener selection, rounds with role assignment and
//! association updates, the training schedule and evaluation.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;

use diffcore::{Adam, AdamConfig, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::agents::{AgentConfig, AgentModel, GameBatch, ListenerRecord, SpeakerRecord};
use crate::error::{Error, Result};
use crate::referents::{make_context, Perceiver, Referent, ReferentMode};
use crate::sensorimotor::{MotorCommand, SketchParams, Trajectory, Utterance};
use crate::strategies::{trajectory_row, Channel, Generator, Selector, Strategies};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GameConfig {
    pub mode: ReferentMode,
    /// Generator used during training games.
    pub generation: String,
    pub no_dmp: bool,
    pub selector: String,
    pub candidates: usize,
    pub production_steps: usize,
    pub generation_lr: f64,
    /// Perspective copies per association row in visual modes.
    pub perspectives: usize,
    /// Feature count `m`.
    pub features: usize,
    /// Round budget; the mode's default when absent.
    pub rounds: Option<usize>,
    pub early_stop_window: usize,
    /// Trailing-window success rate that ends training; absent means every game in the window.
    pub stop_success_rate: Option<f64>,
    pub eval_passes: usize,
    pub agent: AgentConfig,
    pub sketch: SketchParams,
}

impl Default for GameConfig {
    fn default() -> Self {
        GameConfig {
            mode: ReferentMode::OneHot,
            generation: "descriptive".into(),
            no_dmp: false,
            selector: "energy-argmax".into(),
            candidates: 64,
            production_steps: 100,
            generation_lr: 1e-2,
            perspectives: 64,
            features: 5,
            rounds: None,
            early_stop_window: 500,
            stop_success_rate: None,
            eval_passes: 5,
            agent: AgentConfig::default(),
            sketch: SketchParams::default(),
        }
    }
}

impl GameConfig {
    pub fn round_budget(&self) -> usize {
        self.rounds.unwrap_or(if self.mode.is_visual() { 20_000 } else { 5_000 })
    }

    pub fn channel_name(&self) -> &'static str {
        if self.no_dmp {
            "pixels"
        } else {
            "dmp-sketch"
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("candidates", self.candidates),
            ("perspectives", self.perspectives),
            ("features", self.features),
            ("early_stop_window", self.early_stop_window),
            ("eval_passes", self.eval_passes),
            ("agent.embedding_dim", self.agent.embedding_dim),
            ("agent.one_hot_hidden", self.agent.one_hot_hidden),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if let Some(r) = self.stop_success_rate {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("stop_success_rate must be in (0, 1], got {r}")));
            }
        }
        if self.round_budget() == 0 {
            return Err(Error::Config("rounds must be positive".into()));
        }
        for (k, v) in [
            ("generation_lr", self.generation_lr),
            ("agent.association_lr", self.agent.association_lr),
            ("agent.tau", self.agent.tau),
            ("sketch.thickness", self.sketch.thickness),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// A generated utterance and how it was found.
#[derive(Clone, Debug)]
pub struct Production {
    pub utterance: Utterance,
    pub command: Option<MotorCommand>,
    pub trajectory: Option<Trajectory>,
    /// Objective of the returned candidate at its starting point.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Best objective found so far, after each evaluation (steps + 1 entries).
    pub trace: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GameOutcome {
    pub round: usize,
    pub speaker: usize,
    pub listener: usize,
    pub target: usize,
    pub chosen: usize,
    pub success: bool,
    /// Success minus the speaker's baseline.
    pub outcome: f64,
    pub baseline: f64,
    /// Listener energy of the chosen pair.
    pub energy: f64,
    pub production: Production,
}

pub const LOG_HEADER: &str = "round,speaker,listener,mode,generation,target,chosen,success,outcome,baseline,energy";

impl GameOutcome {
    pub fn csv_row(&self, mode: ReferentMode, generation: &str) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:?},{:?},{:?}",
            self.round,
            self.speaker,
            self.listener,
            mode.name(),
            generation,
            self.target,
            self.chosen,
            self.success as u8,
            self.outcome,
            self.baseline,
            self.energy
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub rounds: usize,
    pub games: usize,
    pub early_stopped: bool,
    /// Success rate over the last `early_stop_window` games (or all, if fewer).
    pub trailing_sr: f64,
    /// Highest trailing rate seen over a full window.
    pub best_trailing_sr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    Social,
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub generation: String,
    pub pairing: Pairing,
    pub successes: usize,
    pub games: usize,
}

impl EvalEntry {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.games as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    pub fn rate(&self, generation: &str, pairing: Pairing) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.generation == generation && e.pairing == pairing)
            .map(EvalEntry::success_rate)
    }
}

/// A configuration with its strategies resolved.
pub struct Game {
    pub config: GameConfig,
    channel: Arc<dyn Channel>,
    train_generator: Arc<dyn Generator>,
    selector: Arc<dyn Selector>,
    generators: Vec<Arc<dyn Generator>>,
}

impl Game {
    pub fn new(config: GameConfig) -> Result<Self> {
        Game::with_strategies(config, &Strategies::default())
    }

    pub fn with_strategies(config: GameConfig, s: &Strategies) -> Result<Self> {
        config.validate()?;
        let p = config.sketch;
        let generators = ["descriptive", "discriminative"]
            .iter()
            .map(|n| s.generators.create(n, &p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Game {
            channel: s.channels.create(config.channel_name(), &p)?,
            train_generator: s.generators.create(&config.generation, &p)?,
            selector: s.selectors.create(&config.selector, &p)?,
            generators,
            config,
        })
    }

    pub fn channel(&self) -> &dyn Channel {
        self.channel.as_ref()
    }

    pub fn generator(&self, name: &str) -> Result<&dyn Generator> {
        self.generators
            .iter()
            .find(|g| g.name() == name)
            .map(|g| g.as_ref())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "generator",
                name: name.into(),
                known: "descriptive, discriminative".into(),
            })
    }

    /// Optimizes a batch of candidates against the speaker's frozen energy;
    /// `embeddings` are the speaker's referent embeddings `[K, d]`.
    pub fn produce(
        &self,
        speaker: &AgentModel,
        generator: &dyn Generator,
        embeddings: &Tensor,
        target: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Production> {
        let k = embeddings.shape()[0];
        generator.validate(k, target)?;
        let (anchors, anchor_target) = if generator.uses_context() {
            (embeddings.clone(), target)
        } else {
            (Tensor::stack(&[embeddings.index(target)])?, 0)
        };
        let cfg = &self.config;
        let n = cfg.candidates;
        let mut x = self.channel.init(n, rng);
        let mut adam = Adam::new(AdamConfig::with_lr(cfg.generation_lr), std::slice::from_ref(&x));
        let mut best = f64::INFINITY;
        let mut best_row: Vec<f64> = Vec::new();
        let mut best_image = Tensor::scalar(0.0);
        let mut best_traj: Option<Tensor> = None;
        let mut best_candidate = 0;
        let mut initial = Vec::new();
        let mut trace = Vec::with_capacity(cfg.production_steps + 1);
        let row_len = x.numel() / n;
        for step in 0..=cfg.production_steps {
            let mut g = Graph::new();
            let xv = g.param(x.clone())?;
            let (img, traj) = self.channel.render(&mut g, xv)?;
            let params = speaker.utterance.bind(&mut g, false)?;
            let zu = speaker.utterance.forward(&mut g, &params, img)?;
            let za = g.constant(anchors.clone())?;
            let sims = g.cosine_similarity(zu, za)?;
            let losses = generator.losses(&mut g, sims, anchor_target, cfg.agent.tau)?;
            let values = g.value(losses).data().to_vec();
            if step == 0 {
                initial = values.clone();
            }
            for (c, &v) in values.iter().enumerate() {
                if v < best {
                    best = v;
                    best_candidate = c;
                    best_row = x.data()[c * row_len..(c + 1) * row_len].to_vec();
                    best_image = g.value(img).index(c);
                    best_traj = traj.map(|t| g.value(t).index(c));
                }
            }
            trace.push(best);
            if step == cfg.production_steps {
                break;
            }
            let total = g.sum(losses)?;
            let mut grads = g.backward(total)?;
            let grad = grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
            adam.step(std::slice::from_mut(&mut x), &[grad])?;
            self.channel.project(&mut x);
        }
        let trajectory = match best_traj {
            Some(t) => Some(trajectory_row(&Tensor::stack(&[t])?, 0)?),
            None => None,
        };
        Ok(Production {
            utterance: Utterance::from_tensor(&best_image)?,
            command: self.channel.command(&best_row)?,
            trajectory,
            initial_loss: initial[best_candidate],
            final_loss: best,
            trace,
        })
    }

    /// One game without learning: returns the production, the listener's
    /// choice and the listener energy of that choice.
    #[allow(clippy::too_many_arguments)]
    pub fn play_game(
        &self,
        speaker: &AgentModel,
        listener: &AgentModel,
        generator: &dyn Generator,
        speaker_embeddings: &Tensor,
        listener_embeddings: &Tensor,
        target: usize,
        rng: &mut dyn RngCore,
    ) -> Result<(Production, usize, f64)> {
        let production = self.produce(speaker, generator, speaker_embeddings, target, rng)?;
        let u = Tensor::stack(&[production.utterance.to_tensor()])?;
        let e = listener.energies(listener_embeddings, &u)?;
        let chosen = self.selector.select(e.data(), rng)?;
        let energy = e.data()[chosen];
        Ok((production, chosen, energy))
    }

    fn augmented(&self, view: &Tensor, referent: Referent, perceiver: &Perceiver, rng: &mut dyn RngCore) -> Result<Tensor> {
        if self.config.mode.is_visual() {
            let views = (0..self.config.perspectives)
                .map(|_| perceiver.view(referent, rng))
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::stack(&views)?)
        } else {
            Ok(Tensor::stack(std::slice::from_ref(view))?)
        }
    }

    /// Random roles, one game per context referent, then one speaker and one
    /// listener update.
    pub fn play_round(
        &self,
        agents: &mut [AgentModel; 2],
        referents: &[Referent],
        perceiver: &Perceiver,
        round: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<GameOutcome>> {
        let s = rng.gen_range(0..2usize);
        let l = 1 - s;
        let ctx = make_context(referents, self.config.mode, perceiver, rng)?;
        let (speaker, listener) = {
            let (a, b) = agents.split_at_mut(1);
            if s == 0 {
                (&mut a[0], &mut b[0])
            } else {
                (&mut b[0], &mut a[0])
            }
        };
        let zs = speaker.embed_referents(&ctx.speaker_views)?;
        let zl = listener.embed_referents(&ctx.listener_views)?;
        let baseline = speaker.baseline.value();
        let mut outcomes = Vec::with_capacity(ctx.len());
        let mut batch = GameBatch::default();
        for target in 0..ctx.len() {
            let (production, chosen, energy) =
                self.play_game(speaker, listener, self.train_generator.as_ref(), &zs, &zl, target, rng)?;
            let success = chosen == target;
            let outcome = success as u8 as f64 - baseline;
            let utterance = production.utterance.to_tensor();
            let r = ctx.referents[target];
            batch.speaker.push(SpeakerRecord {
                views: self.augmented(&ctx.speaker_views[target], r, perceiver, rng)?,
                utterance: utterance.clone(),
                outcome,
            });
            batch.listener.push(ListenerRecord {
                views: self.augmented(&ctx.listener_views[target], r, perceiver, rng)?,
                utterance,
            });
            outcomes.push(GameOutcome {
                round,
                speaker: s,
                listener: l,
                target,
                chosen,
                success,
                outcome,
                baseline,
                energy,
                production,
            });
        }
        speaker.speaker_update(&batch)?;
        listener.listener_update(&batch)?;
        for o in &outcomes {
            speaker.baseline.record(o.success);
        }
        if !speaker.is_finite() || !listener.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite parameters after round {round}")));
        }
        Ok(outcomes)
    }

    /// Plays rounds until the budget is spent or the trailing window is all successes.
    /// `on_round` sees every round's outcomes after the updates.
    pub fn train(
        &self,
        agents: &mut [AgentModel; 2],
        referents: &[Referent],
        perceiver: &Perceiver,
        rng: &mut dyn RngCore,
        mut on_round: impl FnMut(usize, &[AgentModel; 2], &[GameOutcome]) -> Result<()>,
    ) -> Result<TrainSummary> {
        let window = self.config.early_stop_window;
        let needed = self
            .config
            .stop_success_rate
            .map_or(window, |r| ((r * window as f64) - 1e-9).ceil() as usize);
        let mut recent: VecDeque<bool> = VecDeque::with_capacity(window + 1);
        let mut hits = 0usize;
        let mut games = 0;
        let mut best = 0.0f64;
        let mut rounds = 0;
        let mut early_stopped = false;
        for round in 0..self.config.round_budget() {
            let outcomes = self.play_round(agents, referents, perceiver, round, rng)?;
            rounds += 1;
            for o in &outcomes {
                games += 1;
                recent.push_back(o.success);
                hits += o.success as usize;
                if recent.len() > window {
                    hits -= recent.pop_front().unwrap() as usize;
                }
            }
            on_round(round, agents, &outcomes)?;
            if recent.len() == window {
                best = best.max(hits as f64 / window as f64);
                if hits >= needed {
                    early_stopped = true;
                    break;
                }
            }
        }
        Ok(TrainSummary {
            rounds,
            games,
            early_stopped,
            trailing_sr: if recent.is_empty() {
                0.0
            } else {
                hits as f64 / recent.len() as f64
            },
            best_trailing_sr: best,
        })
    }

    /// Exhaustive-context success rates for both generators, across agents
    /// (both role orders) and with each agent talking to itself.
    pub fn evaluate(
        &self,
        agents: &[AgentModel; 2],
        referents: &[Referent],
        perceiver: &Perceiver,
        rng: &mut dyn RngCore,
    ) -> Result<EvalReport> {
        let mut report = EvalReport::default();
        for generator in &self.generators {
            for (pairing, pairs) in [(Pairing::Social, [(0, 1), (1, 0)]), (Pairing::Auto, [(0, 0), (1, 1)])] {
                let mut successes = 0;
                let mut games = 0;
                for _ in 0..self.config.eval_passes {
                    for &(s, l) in &pairs {
                        let ctx = make_context(referents, self.config.mode, perceiver, rng)?;
                        let zs = agents[s].embed_referents(&ctx.speaker_views)?;
                        let zl = agents[l].embed_referents(&ctx.listener_views)?;
                        for target in 0..ctx.len() {
                            let (_, chosen, _) =
                                self.play_game(&agents[s], &agents[l], generator.as_ref(), &zs, &zl, target, rng)?;
                            successes += (chosen == target) as usize;
                            games += 1;
                        }
                    }
                }
                report.entries.push(EvalEntry {
                    generation: generator.name().into(),
                    pairing,
                    successes,
                    games,
                });
            }
        }
        Ok(report)
    }
}

/// Success rate of a speaker that conveys one randomly chosen feature of the
/// target, and a listener that picks uniformly among referents having it.
pub fn one_feature_baseline(referents: &[Referent], games: usize, rng: &mut dyn RngCore) -> Result<f64> {
    if referents.is_empty() || games == 0 {
        return Err(Error::InvalidInput("need referents and games".into()));
    }
    let mut hits = 0;
    for _ in 0..games {
        let target = rng.gen_range(0..referents.len());
        let feature = *referents[target].features().choose(rng).expect("non-empty referent");
        let candidates: Vec<usize> = (0..referents.len()).filter(|&i| referents[i].contains(feature)).collect();
        hits += (*candidates.choose(rng).expect("target has the feature") == target) as usize;
    }
    Ok(hits as f64 / games as f64)
}

/// Appends game rows to a CSV log, writing the header first.
pub struct GameLog<W: Write> {
    out: W,
}

impl<W: Write> GameLog<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{LOG_HEADER}")?;
        Ok(GameLog { out })
    }

    pub fn append(&mut self, mode: ReferentMode, generation: &str, outcomes: &[GameOutcome]) -> Result<()> {
        for o in outcomes {
            writeln!(self.out, "{}", o.csv_row(mode, generation))?;
        }
        Ok(())
    }

    pub fn into_inner(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}
