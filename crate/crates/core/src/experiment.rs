//! Multi-seed experiments: configuration, random streams, training,
//! evaluation, analysis and aggregate reports.
//!
//! Every seed owns a ChaCha8 generator seeded with the seed value; separate
//! streams of that generator drive agent initialization, training games,
//! evaluation games and analysis, so each phase is reproducible on its own.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use diffcore::gradcheck::{check_gradients, DEFAULT_STEP, DEFAULT_TOLERANCE};
use diffcore::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{association_loss, read_checkpoint, write_checkpoint, AgentModel, Encoder, EncoderSpec};
use crate::error::{Error, Result};
use crate::export::{self, EmbeddingRow, LexiconEntry, Modality};
use crate::game::{one_feature_baseline, EvalReport, Game, GameConfig, GameLog, Pairing, TrainSummary};
use crate::metrics::{self, Coherence, Sample};
use crate::referents::{enumerate_referents, DigitStore, FeatureMap, Perceiver, Referent, Split};
use crate::sensorimotor::{SensoriMotor, COMMAND_DIM, WEIGHT_LIMIT};

pub const STREAM_INIT: u64 = 0;
pub const STREAM_TRAIN: u64 = 1;
pub const STREAM_EVAL: u64 = 2;
pub const STREAM_ANALYSIS: u64 = 3;

pub fn seed_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub mnist_path: Option<PathBuf>,
    /// Digit class per feature.
    pub feature_map: Vec<u8>,
    /// Rounds between coherence measurements; 0 measures only before and after training.
    pub curve_every: usize,
    /// Utterances per (agent, referent) for coherence.
    pub coherence_samples: usize,
    /// Reference draws averaged in the topographic score.
    pub topographic_draws: usize,
    /// Perspectives per referent in the embedding export.
    pub embedding_perspectives: usize,
    /// Writes one trajectory CSV per training game.
    pub log_trajectories: bool,
    pub game: GameConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: (0..10).collect(),
            mnist_path: None,
            feature_map: FeatureMap::identity(5).0,
            curve_every: 0,
            coherence_samples: 10,
            topographic_draws: 10,
            embedding_perspectives: 100,
            log_trajectories: false,
            game: GameConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        ExperimentConfig::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.game.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut s = self.seeds.clone();
        s.sort();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.feature_map.len() < self.game.features || self.feature_map.iter().any(|c| *c > 9) {
            return Err(Error::Config("feature_map needs one digit class (0-9) per feature".into()));
        }
        if self.coherence_samples < 2 {
            return Err(Error::Config("coherence_samples must be at least 2".into()));
        }
        if self.game.mode.is_visual() && self.mnist_path.is_none() {
            return Err(Error::Config(format!("mode {} needs mnist_path", self.game.mode.name())));
        }
        Ok(())
    }
}

/// Train-time and test-time perception.
#[derive(Clone, Debug)]
pub struct Perceivers {
    pub train: Perceiver,
    pub test: Perceiver,
}

/// Builds perceivers; in visual modes the MNIST files are read here, before any output is written.
pub fn perceivers(cfg: &ExperimentConfig) -> Result<Perceivers> {
    let m = cfg.game.features;
    if !cfg.game.mode.is_visual() {
        return Ok(Perceivers {
            train: Perceiver::OneHot { m },
            test: Perceiver::OneHot { m },
        });
    }
    let dir = cfg
        .mnist_path
        .as_deref()
        .ok_or_else(|| Error::Config("visual modes need an MNIST directory".into()))?;
    for split in [Split::Train, Split::Test] {
        for f in DigitStore::mnist_files(dir, split) {
            if !f.is_file() {
                return Err(Error::MissingDataset(f));
            }
        }
    }
    let mapping = FeatureMap(cfg.feature_map[..m].to_vec());
    let load = |split| -> Result<Perceiver> {
        let store = DigitStore::load_mnist(dir, split)?;
        for f in 0..m {
            store.instances(mapping.class_of(f)?)?;
        }
        Ok(Perceiver::Visual {
            store: Arc::new(store),
            mapping: mapping.clone(),
        })
    };
    Ok(Perceivers {
        train: load(Split::Train)?,
        test: load(Split::Test)?,
    })
}

pub fn init_agents(cfg: &GameConfig, seed: u64) -> [AgentModel; 2] {
    let mut rng = seed_rng(seed, STREAM_INIT);
    [
        AgentModel::new(cfg.mode, cfg.features, cfg.agent, &mut rng),
        AgentModel::new(cfg.mode, cfg.features, cfg.agent, &mut rng),
    ]
}

/// Descriptive utterances for every (agent, referent, perspective); both
/// agents see the same perspective images.
pub fn sample_lexicon(
    game: &Game,
    agents: &[AgentModel; 2],
    referents: &[Referent],
    perceiver: &Perceiver,
    per_referent: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sample>> {
    let generator = game.generator("descriptive")?;
    let mut out = Vec::new();
    for (ri, r) in referents.iter().enumerate() {
        for p in 0..per_referent {
            let view = perceiver.view(*r, rng)?;
            for (a, agent) in agents.iter().enumerate() {
                let z = agent.embed_referents(std::slice::from_ref(&view))?;
                let prod = game.produce(agent, generator, &z, 0, rng)?;
                let trajectory = prod
                    .trajectory
                    .ok_or_else(|| Error::Config("lexicon analysis needs a drawing channel".into()))?;
                out.push(Sample {
                    agent: a,
                    referent: ri,
                    perspective: p,
                    trajectory,
                });
            }
        }
    }
    Ok(out)
}

pub fn measure_coherence(
    game: &Game,
    agents: &[AgentModel; 2],
    referents: &[Referent],
    perceiver: &Perceiver,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Coherence> {
    metrics::coherence(&sample_lexicon(game, agents, referents, perceiver, samples, rng)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: usize,
    pub games: usize,
    pub success_rate: f64,
    pub coherence: Option<Coherence>,
}

/// Result of training one seed; files live under the seed directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedTraining {
    pub seed: u64,
    pub summary: TrainSummary,
    pub curve: Vec<CurvePoint>,
    pub checkpoint: PathBuf,
    pub game_log: PathBuf,
    pub curve_csv: PathBuf,
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("round,games,success_rate,coherence_a,coherence_p,coherence_r\n");
    for p in points {
        let c = p
            .coherence
            .map(|c| format!("{:?},{:?},{:?}", c.agents, c.perspectives, c.referents))
            .unwrap_or_else(|| ",,".into());
        s.push_str(&format!("{},{},{:?},{c}\n", p.round, p.games, p.success_rate));
    }
    s
}

/// Trains one pair of agents and writes its checkpoint, game log and curve.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64, perceivers: &Perceivers, out: &Path) -> Result<(SeedTraining, [AgentModel; 2])> {
    let game = Game::new(cfg.game.clone())?;
    let dir = seed_dir(out, seed);
    fs::create_dir_all(&dir)?;
    let traj_dir = dir.join("trajectories");
    if cfg.log_trajectories {
        fs::create_dir_all(&traj_dir)?;
    }
    let mut agents = init_agents(&cfg.game, seed);
    let train_set = enumerate_referents(cfg.game.features, 1)?;
    let drawn = !cfg.game.no_dmp;
    let mut analysis = seed_rng(seed, STREAM_ANALYSIS);
    let mut curve = Vec::new();
    let coherence_now = |agents: &[AgentModel; 2], rng: &mut ChaCha8Rng| -> Result<Option<Coherence>> {
        if !drawn {
            return Ok(None);
        }
        measure_coherence(&game, agents, &train_set, &perceivers.train, cfg.coherence_samples, rng).map(Some)
    };
    curve.push(CurvePoint {
        round: 0,
        games: 0,
        success_rate: 0.0,
        coherence: coherence_now(&agents, &mut analysis)?,
    });
    let log_path = dir.join("games.csv");
    let mut log = GameLog::new(BufWriter::new(File::create(&log_path)?))?;
    let mut rng = seed_rng(seed, STREAM_TRAIN);
    let (mut window_hits, mut window_games, mut games) = (0usize, 0usize, 0usize);
    let generation = cfg.game.generation.clone();
    let summary = game.train(&mut agents, &train_set, &perceivers.train, &mut rng, |round, agents, outcomes| {
        log.append(cfg.game.mode, &generation, outcomes)?;
        if cfg.log_trajectories {
            for o in outcomes {
                if let Some(t) = &o.production.trajectory {
                    t.write_csv(&traj_dir.join(format!("round-{round}-target-{}.csv", o.target)))?;
                }
            }
        }
        games += outcomes.len();
        window_games += outcomes.len();
        window_hits += outcomes.iter().filter(|o| o.success).count();
        if cfg.curve_every > 0 && (round + 1) % cfg.curve_every == 0 {
            curve.push(CurvePoint {
                round: round + 1,
                games,
                success_rate: window_hits as f64 / window_games as f64,
                coherence: coherence_now(agents, &mut analysis)?,
            });
            window_hits = 0;
            window_games = 0;
        }
        Ok(())
    })?;
    log.into_inner()?;
    if curve.last().map_or(true, |p| p.round != summary.rounds) {
        curve.push(CurvePoint {
            round: summary.rounds,
            games,
            success_rate: summary.trailing_sr,
            coherence: coherence_now(&agents, &mut analysis)?,
        });
    }
    let checkpoint = dir.join("checkpoint.bin");
    write_checkpoint(BufWriter::new(File::create(&checkpoint)?), cfg.game.mode, &agents)?;
    let curve_path = dir.join("curve.csv");
    fs::write(&curve_path, curve_csv(&curve))?;
    Ok((
        SeedTraining {
            seed,
            summary,
            curve,
            checkpoint,
            game_log: log_path,
            curve_csv: curve_path,
        },
        agents,
    ))
}

pub fn load_agents(path: &Path) -> Result<[AgentModel; 2]> {
    let (_, agents) = read_checkpoint(std::io::BufReader::new(File::open(path)?))?;
    agents
        .try_into()
        .map_err(|v: Vec<AgentModel>| Error::Checkpoint(format!("expected 2 agents, found {}", v.len())))
}

/// Exhaustive-context evaluation over all pairs of features.
pub fn evaluate_seed(cfg: &GameConfig, seed: u64, agents: &[AgentModel; 2], perceivers: &Perceivers) -> Result<EvalReport> {
    let game = Game::new(cfg.clone())?;
    let test_set = enumerate_referents(cfg.features, 2)?;
    game.evaluate(agents, &test_set, &perceivers.test, &mut seed_rng(seed, STREAM_EVAL))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> Stat {
    let n = values.len();
    if n == 0 {
        return Stat {
            mean: f64::NAN,
            std: f64::NAN,
            n,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Stat { mean, std: var.sqrt(), n }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub train_sr: f64,
    pub rounds: usize,
    pub eval: Option<EvalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mode: String,
    pub channel: String,
    pub seeds: Vec<SeedReport>,
    /// Metric name to mean ± std over seeds.
    pub aggregate: BTreeMap<String, Stat>,
    pub baselines: BTreeMap<String, f64>,
}

impl Report {
    pub fn build(cfg: &GameConfig, seeds: Vec<SeedReport>, baselines: BTreeMap<String, f64>) -> Self {
        let mut metrics: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for s in &seeds {
            metrics.entry("train".into()).or_default().push(s.train_sr);
            if let Some(e) = &s.eval {
                for entry in &e.entries {
                    let pairing = match entry.pairing {
                        Pairing::Social => "social",
                        Pairing::Auto => "auto",
                    };
                    metrics
                        .entry(format!("test/{}/{pairing}", entry.generation))
                        .or_default()
                        .push(entry.success_rate());
                }
            }
        }
        Report {
            mode: cfg.mode.name().into(),
            channel: cfg.channel_name().into(),
            aggregate: metrics.iter().map(|(k, v)| (k.clone(), mean_std(v))).collect(),
            seeds,
            baselines,
        }
    }

    pub fn markdown(&self) -> String {
        let mut s = format!("# {} ({})\n\n| metric | mean | std | seeds |\n|---|---|---|---|\n", self.mode, self.channel);
        for (k, v) in &self.aggregate {
            s.push_str(&format!("| {k} | {:.3} | {:.3} | {} |\n", v.mean, v.std, v.n));
        }
        for (k, v) in &self.baselines {
            s.push_str(&format!("| baseline/{k} | {v:.3} | | |\n"));
        }
        s
    }
}

/// Random-listener and one-feature success rates on exhaustive test contexts.
pub fn baselines(cfg: &GameConfig, perceivers: &Perceivers, games: usize, seed: u64) -> Result<BTreeMap<String, f64>> {
    let test_set = enumerate_referents(cfg.features, 2)?;
    let random_cfg = GameConfig {
        selector: "uniform-random".into(),
        candidates: 1,
        production_steps: 0,
        eval_passes: games.div_ceil(2 * test_set.len()),
        ..cfg.clone()
    };
    let game = Game::new(random_cfg)?;
    let agents = init_agents(cfg, seed);
    let mut rng = seed_rng(seed, STREAM_EVAL);
    let report = game.evaluate(&agents, &test_set, &perceivers.test, &mut rng)?;
    let mut out = BTreeMap::new();
    out.insert(
        "random".into(),
        report.rate("descriptive", Pairing::Social).unwrap_or(f64::NAN),
    );
    out.insert("one-feature".into(), one_feature_baseline(&test_set, games, &mut rng)?);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub runs: Vec<SeedTraining>,
    pub report: PathBuf,
}

pub const MANIFEST: &str = "manifest.json";

impl Manifest {
    pub fn load(out: &Path) -> Result<Self> {
        let text = fs::read_to_string(out.join(MANIFEST))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("manifest: {e}")))
    }
}

/// Trains every seed in parallel, evaluates, and writes the manifest and report.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<(Manifest, Report)> {
    cfg.validate()?;
    Game::new(cfg.game.clone())?;
    let perceivers = perceivers(cfg)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let results: Vec<(SeedTraining, EvalReport)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let (run, agents) = train_seed(cfg, seed, &perceivers, out)?;
            let eval = evaluate_seed(&cfg.game, seed, &agents, &perceivers)?;
            Ok((run, eval))
        })
        .collect::<Result<Vec<_>>>()?;
    let seeds = results
        .iter()
        .map(|(r, e)| SeedReport {
            seed: r.seed,
            train_sr: r.summary.trailing_sr,
            rounds: r.summary.rounds,
            eval: Some(e.clone()),
        })
        .collect();
    let base = baselines(&cfg.game, &perceivers, 5000, cfg.seeds[0])?;
    let report = Report::build(&cfg.game, seeds, base);
    let report_path = out.join("report.json");
    write_report(&report, &report_path)?;
    let manifest = Manifest {
        config: cfg.clone(),
        runs: results.into_iter().map(|(r, _)| r).collect(),
        report: report_path,
    };
    fs::write(
        out.join(MANIFEST),
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    Ok((manifest, report))
}

fn write_report(report: &Report, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report).map_err(|e| Error::Config(e.to_string()))?)?;
    fs::write(path.with_extension("md"), report.markdown())?;
    Ok(())
}

/// Re-evaluates the checkpoints of a finished run.
pub fn run_eval(out: &Path, eval_passes: Option<usize>) -> Result<Report> {
    let manifest = Manifest::load(out)?;
    let mut cfg = manifest.config.clone();
    if let Some(p) = eval_passes {
        cfg.game.eval_passes = p;
    }
    let perceivers = perceivers(&cfg)?;
    let seeds = manifest
        .runs
        .par_iter()
        .map(|run| {
            let agents = load_agents(&run.checkpoint)?;
            Ok(SeedReport {
                seed: run.seed,
                train_sr: run.summary.trailing_sr,
                rounds: run.summary.rounds,
                eval: Some(evaluate_seed(&cfg.game, run.seed, &agents, &perceivers)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = Report::build(&cfg.game, seeds, baselines(&cfg.game, &perceivers, 5000, cfg.seeds[0])?);
    write_report(&report, &out.join("eval.json"))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoRow {
    pub i: usize,
    pub j: usize,
    /// Score with the canonical reference utterances.
    pub rho: f64,
    /// Mean score over the reference draws.
    pub rho_mean: f64,
    pub barycenters: metrics::Barycenters,
}

/// Lexicon grid, composition matrices, topographic maps and embeddings for one seed.
pub fn analyze_seed(cfg: &ExperimentConfig, seed: u64, agents: &[AgentModel; 2], perceivers: &Perceivers, dir: &Path) -> Result<Vec<RhoRow>> {
    let game = Game::new(cfg.game.clone())?;
    let m = cfg.game.features;
    let singles = enumerate_referents(m, 1)?;
    let pairs = enumerate_referents(m, 2)?;
    let perceiver = &perceivers.test;
    let mut rng = seed_rng(seed, STREAM_ANALYSIS);
    fs::create_dir_all(dir)?;
    let generator = game.generator("descriptive")?;

    // canonical utterances: one shared perspective per referent
    let mut canonical: Vec<(Referent, [crate::game::Production; 2])> = Vec::new();
    for r in singles.iter().chain(&pairs) {
        let view = perceiver.view(*r, &mut rng)?;
        let mut make = |a: &AgentModel| -> Result<crate::game::Production> {
            let z = a.embed_referents(std::slice::from_ref(&view))?;
            game.produce(a, generator, &z, 0, &mut rng)
        };
        let p0 = make(&agents[0])?;
        let p1 = make(&agents[1])?;
        canonical.push((*r, [p0, p1]));
    }
    let lexicon: Vec<LexiconEntry> = canonical[..m]
        .iter()
        .flat_map(|(r, ps)| {
            ps.iter().enumerate().map(move |(a, p)| LexiconEntry {
                agent: a,
                referent: *r,
                utterance: p.utterance.clone(),
            })
        })
        .collect();
    export::write_lexicon(&dir.join("lexicon.png"), &dir.join("lexicon.csv"), &lexicon)?;
    for a in 0..2 {
        let items: Vec<_> = canonical.iter().map(|(r, ps)| (*r, ps[a].utterance.clone())).collect();
        export::write_composition_matrix(
            &dir.join(format!("composition-agent{a}.png")),
            &dir.join(format!("composition-agent{a}.csv")),
            m,
            &items,
        )?;
    }

    let mut rows = Vec::new();
    if game.config.no_dmp {
        return Ok(rows);
    }
    let traj = |p: &crate::game::Production| p.trajectory.clone().expect("drawing channel");
    let compositions: [Vec<(Referent, crate::sensorimotor::Trajectory)>; 2] =
        [0, 1].map(|a| canonical[m..].iter().map(|(r, ps)| (*r, traj(&ps[a]))).collect());
    // reference draws: draw 0 is the canonical one
    let mut draws: Vec<[Vec<crate::sensorimotor::Trajectory>; 2]> =
        vec![[0, 1].map(|a| canonical[..m].iter().map(|(_, ps)| traj(&ps[a])).collect())];
    for _ in 1..cfg.topographic_draws.max(1) {
        let mut refs: [Vec<_>; 2] = [Vec::new(), Vec::new()];
        for r in &singles {
            let view = perceiver.view(*r, &mut rng)?;
            for (a, agent) in agents.iter().enumerate() {
                let z = agent.embed_referents(std::slice::from_ref(&view))?;
                refs[a].push(traj(&game.produce(agent, generator, &z, 0, &mut rng)?));
            }
        }
        draws.push(refs);
    }
    let topo = dir.join("topographic");
    fs::create_dir_all(&topo)?;
    for i in 0..m {
        for j in i + 1..m {
            let mut scores = Vec::new();
            let mut canonical_map = Vec::new();
            for (d, refs) in draws.iter().enumerate() {
                let mut points = Vec::new();
                for a in 0..2 {
                    points.extend(metrics::topographic_map(i, j, a, &refs[a], &compositions[a])?);
                }
                scores.push(metrics::topographic_score(&points)?);
                if d == 0 {
                    canonical_map = points;
                }
            }
            let bary = metrics::barycenters(&canonical_map)?;
            let stem = topo.join(format!("map-{i}-{j}"));
            fs::write(stem.with_extension("csv"), export::topographic_csv(&canonical_map))?;
            fs::write(stem.with_extension("svg"), export::topographic_svg(i, j, &canonical_map, &bary, scores[0]))?;
            rows.push(RhoRow {
                i,
                j,
                rho: scores[0],
                rho_mean: scores.iter().sum::<f64>() / scores.len() as f64,
                barycenters: bary,
            });
        }
    }
    rows.sort_by(|a, b| a.rho.total_cmp(&b.rho).then((a.i, a.j).cmp(&(b.i, b.j))));
    let mut csv = String::from("i,j,rho,rho_mean,h_ij_x,h_ij_y,h_i_x,h_i_y,h_j_x,h_j_y,h_xy_x,h_xy_y\n");
    for r in &rows {
        let b = r.barycenters;
        csv.push_str(&format!(
            "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.i, r.j, r.rho, r.rho_mean, b.both[0], b.both[1], b.first[0], b.first[1], b.second[0], b.second[1], b.neither[0], b.neither[1]
        ));
    }
    fs::write(dir.join("rho.csv"), csv)?;

    let mut emb = Vec::new();
    for (a, agent) in agents.iter().enumerate() {
        for r in &pairs {
            for p in 0..cfg.embedding_perspectives {
                let view = perceiver.view(*r, &mut rng)?;
                let zr = agent.embed_referents(std::slice::from_ref(&view))?;
                let prod = game.produce(agent, generator, &zr, 0, &mut rng)?;
                let zu = agent.embed_utterances(&Tensor::stack(&[prod.utterance.to_tensor()])?)?;
                for (modality, z) in [(Modality::Referent, zr), (Modality::Utterance, zu)] {
                    emb.push(EmbeddingRow {
                        agent: a,
                        referent: r.label(),
                        perspective: p,
                        modality,
                        values: z.into_data(),
                    });
                }
            }
        }
    }
    fs::write(dir.join("embeddings.csv"), export::embeddings_csv(&emb))?;
    Ok(rows)
}

pub fn run_analyze(out: &Path) -> Result<Vec<(u64, Vec<RhoRow>)>> {
    let manifest = Manifest::load(out)?;
    let perceivers = perceivers(&manifest.config)?;
    manifest
        .runs
        .par_iter()
        .map(|run| {
            let agents = load_agents(&run.checkpoint)?;
            let dir = seed_dir(out, run.seed).join("analysis");
            Ok((run.seed, analyze_seed(&manifest.config, run.seed, &agents, &perceivers, &dir)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: String,
    pub max_error: f64,
    pub passed: bool,
}

/// Smallest allowed |pre-activation| in the toy encoder batch.
const KINK_MARGIN: f64 = 1e-3;

/// Finite-difference checks: the energy of a drawn utterance against its 20
/// motor weights at `points` random commands, and the association loss
/// against every parameter of a small pair of encoders.
pub fn gradcheck_suite(points: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = seed_rng(seed, STREAM_ANALYSIS);
    let motor = SensoriMotor::new(Default::default());
    let mut out = Vec::new();
    let agent = AgentModel::new(crate::referents::ReferentMode::OneHot, 5, Default::default(), &mut rng);
    for k in 0..points {
        let f = rng.gen_range(0..5);
        let mut v = vec![0.0; 5];
        v[f] = 1.0;
        let zr = agent.embed_referents(&[Tensor::vector(v)])?;
        let w: Vec<f64> = (0..COMMAND_DIM).map(|_| rng.gen_range(-WEIGHT_LIMIT..WEIGHT_LIMIT)).collect();
        let input = Tensor::new(vec![1, COMMAND_DIM], w)?;
        let report = check_gradients(
            |g: &mut Graph, x| {
                let img = motor.draw_graph(g, x[0]).map_err(|_| diffcore::Error::GraphConsumed)?;
                let p = agent.utterance.bind(g, false).map_err(|_| diffcore::Error::GraphConsumed)?;
                let zu = agent.utterance.forward(g, &p, img).map_err(|_| diffcore::Error::GraphConsumed)?;
                let za = g.constant(zr.clone())?;
                let e = g.cosine_similarity(zu, za)?;
                g.sum(e)
            },
            &[input],
            DEFAULT_STEP,
        )?;
        out.push(GradCheck {
            name: format!("energy/command #{k}"),
            max_error: report.max_error(),
            passed: report.passes(DEFAULT_TOLERANCE),
        });
    }

    let views = Tensor::new(vec![3, 5], (0..15).map(|i| if i % 6 == 0 { 1.0 } else { 0.0 }).collect())?;
    // Central differences are meaningless across a ReLU kink, so the toy
    // batch is redrawn until every pre-activation clears the step.
    let (referent, utterance, imgs) = loop {
        let referent = Encoder::init(EncoderSpec::one_hot(5, 8, 8), &mut rng);
        let utterance = Encoder::init(EncoderSpec::conv(12, 8), &mut rng);
        let imgs = Tensor::new(vec![3, 1, 12, 12], (0..432).map(|_| rng.gen_range(0.0..1.0)).collect())?;
        if referent.relu_margin(&views)? >= KINK_MARGIN && utterance.relu_margin(&imgs)? >= KINK_MARGIN {
            break (referent, utterance, imgs);
        }
    };
    let nr = referent.params().len();
    let mut params = referent.params().to_vec();
    params.extend(utterance.params().iter().cloned());
    let weights = [1.0, -0.5, 0.75];
    let report = check_gradients(
        |g: &mut Graph, p| {
            let wrap = |e: Error| match e {
                Error::Autodiff(d) => d,
                _ => diffcore::Error::GraphConsumed,
            };
            let rx = g.constant(views.clone())?;
            let ux = g.constant(imgs.clone())?;
            let zr = referent.forward(g, &p[..nr], rx).map_err(wrap)?;
            let zr = g.reshape(zr, &[1, 3, 8])?;
            let zu = utterance.forward(g, &p[nr..], ux).map_err(wrap)?;
            association_loss(g, zr, zu, &weights, 1.0).map_err(wrap)
        },
        &params,
        DEFAULT_STEP,
    )?;
    out.push(GradCheck {
        name: "association/encoder parameters".into(),
        max_error: report.max_error(),
        passed: report.passes(DEFAULT_TOLERANCE),
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::referents::ReferentMode;

    #[test]
    fn toml_round_trip_and_validation() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let partial = ExperimentConfig::from_toml("seeds = [3, 4]\n[game]\ncandidates = 8\n[game.agent]\ntau = 0.5\n").unwrap();
        assert_eq!(partial.game.candidates, 8);
        assert_eq!(partial.game.agent.tau, 0.5);
        assert_eq!(partial.game.production_steps, 100);
        assert!(ExperimentConfig::from_toml("seeds = [1, 1]").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("[game]\nmode = \"visual-shared\"").is_err());
    }

    #[test]
    fn missing_mnist_fails_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = ExperimentConfig {
            mnist_path: Some(dir.path().join("nowhere")),
            game: GameConfig {
                mode: ReferentMode::VisualShared,
                ..GameConfig::default()
            },
            ..ExperimentConfig::default()
        };
        assert!(matches!(run_train(&cfg, &out), Err(Error::MissingDataset(_))));
        assert!(!out.exists());
    }

    #[test]
    fn streams_are_independent() {
        let mut a = seed_rng(7, STREAM_TRAIN);
        let mut b = seed_rng(7, STREAM_EVAL);
        let mut c = seed_rng(7, STREAM_TRAIN);
        let (x, y, z): (u64, u64, u64) = (a.gen(), b.gen(), c.gen());
        assert_ne!(x, y);
        assert_eq!(x, z);
    }

    #[test]
    fn aggregate_statistics() {
        let s = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[0.5]).std, 0.0);
    }

    #[test]
    fn gradcheck_suite_passes() {
        let results = gradcheck_suite(3, 1).unwrap();
        assert_eq!(results.len(), 4);
        for r in &results {
            assert!(r.passed, "{r:?}");
        }
    }
}
