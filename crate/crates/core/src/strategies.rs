//! Interchangeable pieces of a game, looked up by name at runtime:
//! the drawing channel, the utterance generator and the listener selector.

use std::collections::BTreeMap;
use std::sync::Arc;

use diffcore::{Graph, Tensor, Var};
use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::sensorimotor::{MotorCommand, SensoriMotor, SketchParams, Trajectory, CANVAS, COMMAND_DIM};

/// What generation optimizes and how it becomes an utterance.
pub trait Channel: Send + Sync {
    fn name(&self) -> &'static str;

    /// Shape of one candidate's decision variable.
    fn variable_shape(&self) -> Vec<usize>;

    /// `n` random starting points, `[n, variable..]`.
    fn init(&self, n: usize, rng: &mut dyn RngCore) -> Tensor;

    /// Utterances `[N, 1, 52, 52]` and, when the channel draws strokes, trajectories `[N, 10, 2]`.
    fn render(&self, g: &mut Graph, x: Var) -> Result<(Var, Option<Var>)>;

    /// Restores feasibility after an optimizer step.
    fn project(&self, x: &mut Tensor);

    /// The motor command behind one candidate row, if any.
    fn command(&self, row: &[f64]) -> Result<Option<MotorCommand>>;
}

/// Strokes from DMP commands, optimized in unit-box coordinates.
pub struct SketchChannel {
    motor: SensoriMotor,
}

impl SketchChannel {
    pub fn new(params: SketchParams) -> Self {
        SketchChannel {
            motor: SensoriMotor::new(params),
        }
    }

    pub fn motor(&self) -> &SensoriMotor {
        &self.motor
    }
}

impl Channel for SketchChannel {
    fn name(&self) -> &'static str {
        "dmp-sketch"
    }

    fn variable_shape(&self) -> Vec<usize> {
        vec![COMMAND_DIM]
    }

    fn init(&self, n: usize, rng: &mut dyn RngCore) -> Tensor {
        let data = (0..n * COMMAND_DIM).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        Tensor::new(vec![n, COMMAND_DIM], data).expect("n > 0")
    }

    fn render(&self, g: &mut Graph, x: Var) -> Result<(Var, Option<Var>)> {
        let w = g.scale(x, crate::sensorimotor::WEIGHT_LIMIT)?;
        let traj = self.motor.trajectory_graph(g, w)?;
        let img = g.apply(Arc::new(self.motor.raster()), &[traj])?;
        Ok((img, Some(traj)))
    }

    fn project(&self, x: &mut Tensor) {
        x.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    }

    fn command(&self, row: &[f64]) -> Result<Option<MotorCommand>> {
        MotorCommand::from_normalized(row).map(Some)
    }
}

/// The 52×52 image itself is the decision variable; no motor system.
pub struct PixelChannel;

impl Channel for PixelChannel {
    fn name(&self) -> &'static str {
        "pixels"
    }

    fn variable_shape(&self) -> Vec<usize> {
        vec![1, CANVAS, CANVAS]
    }

    fn init(&self, n: usize, rng: &mut dyn RngCore) -> Tensor {
        let len = n * CANVAS * CANVAS;
        let data = (0..len).map(|_| rng.gen_range(0.0..=1.0)).collect();
        Tensor::new(vec![n, 1, CANVAS, CANVAS], data).expect("n > 0")
    }

    fn render(&self, _g: &mut Graph, x: Var) -> Result<(Var, Option<Var>)> {
        Ok((x, None))
    }

    fn project(&self, x: &mut Tensor) {
        x.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    fn command(&self, _row: &[f64]) -> Result<Option<MotorCommand>> {
        Ok(None)
    }
}

/// Per-candidate production loss from utterance/referent energies.
pub trait Generator: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether the whole context is scored, or only the target.
    fn uses_context(&self) -> bool;

    fn validate(&self, context_len: usize, target: usize) -> Result<()> {
        if target >= context_len {
            return Err(Error::InvalidInput(format!(
                "target {target} is not in a context of {context_len}"
            )));
        }
        Ok(())
    }

    /// `sims` is `[N, K]`, where `K` is 1 (target only) or the context size; returns `[N]`.
    fn losses(&self, g: &mut Graph, sims: Var, target: usize, tau: f64) -> Result<Var>;
}

/// Maximizes the energy with the target alone.
pub struct Descriptive;

impl Generator for Descriptive {
    fn name(&self) -> &'static str {
        "descriptive"
    }

    fn uses_context(&self) -> bool {
        false
    }

    fn losses(&self, g: &mut Graph, sims: Var, _target: usize, _tau: f64) -> Result<Var> {
        let n = g.value(sims).shape()[0];
        let flat = g.reshape(sims, &[n])?;
        Ok(g.scale(flat, -1.0)?)
    }
}

/// Cross entropy of the context energies against the target position.
pub struct Discriminative;

impl Generator for Discriminative {
    fn name(&self) -> &'static str {
        "discriminative"
    }

    fn uses_context(&self) -> bool {
        true
    }

    fn validate(&self, context_len: usize, target: usize) -> Result<()> {
        if context_len < 2 {
            return Err(Error::InvalidInput(
                "discriminative generation needs at least two referents in context".into(),
            ));
        }
        if target >= context_len {
            return Err(Error::InvalidInput(format!(
                "target {target} is not in a context of {context_len}"
            )));
        }
        Ok(())
    }

    fn losses(&self, g: &mut Graph, sims: Var, target: usize, tau: f64) -> Result<Var> {
        let n = g.value(sims).shape()[0];
        let logits = g.scale(sims, 1.0 / tau)?;
        Ok(g.cross_entropy(logits, 1, &vec![target; n])?)
    }
}

pub trait Selector: Send + Sync {
    fn name(&self) -> &'static str;
    fn select(&self, energies: &[f64], rng: &mut dyn RngCore) -> Result<usize>;
}

/// Highest energy; ties go to the lowest index.
pub struct EnergyArgmax;

impl Selector for EnergyArgmax {
    fn name(&self) -> &'static str {
        "energy-argmax"
    }

    fn select(&self, energies: &[f64], _rng: &mut dyn RngCore) -> Result<usize> {
        if energies.is_empty() {
            return Err(Error::InvalidInput("empty context".into()));
        }
        let mut best = 0;
        for (i, e) in energies.iter().enumerate() {
            if *e > energies[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

pub struct UniformRandom;

impl Selector for UniformRandom {
    fn name(&self) -> &'static str {
        "uniform-random"
    }

    fn select(&self, energies: &[f64], rng: &mut dyn RngCore) -> Result<usize> {
        if energies.is_empty() {
            return Err(Error::InvalidInput("empty context".into()));
        }
        Ok(rng.gen_range(0..energies.len()))
    }
}

type Ctor<T> = Box<dyn Fn(&SketchParams) -> Arc<T> + Send + Sync>;

/// Name → constructor table for one strategy kind.
pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<&'static str, Ctor<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Registry {
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, ctor: impl Fn(&SketchParams) -> Arc<T> + Send + Sync + 'static) {
        self.entries.insert(name, Box::new(ctor));
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn create(&self, name: &str, params: &SketchParams) -> Result<Arc<T>> {
        self.entries
            .get(name)
            .map(|c| c(params))
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }
}

/// All built-in strategies.
pub struct Strategies {
    pub channels: Registry<dyn Channel>,
    pub generators: Registry<dyn Generator>,
    pub selectors: Registry<dyn Selector>,
}

impl Default for Strategies {
    fn default() -> Self {
        let mut channels: Registry<dyn Channel> = Registry::new("channel");
        channels.register("dmp-sketch", |p| Arc::new(SketchChannel::new(*p)));
        channels.register("pixels", |_| Arc::new(PixelChannel));
        let mut generators: Registry<dyn Generator> = Registry::new("generator");
        generators.register("descriptive", |_| Arc::new(Descriptive));
        generators.register("discriminative", |_| Arc::new(Discriminative));
        let mut selectors: Registry<dyn Selector> = Registry::new("selector");
        selectors.register("energy-argmax", |_| Arc::new(EnergyArgmax));
        selectors.register("uniform-random", |_| Arc::new(UniformRandom));
        Strategies {
            channels,
            generators,
            selectors,
        }
    }
}

/// A trajectory read back from a `[N, 10, 2]` graph value.
pub(crate) fn trajectory_row(t: &Tensor, row: usize) -> Result<Trajectory> {
    let r = t.index(row);
    Trajectory::new(r.data().chunks_exact(2).map(|p| [p[0], p[1]]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn registry_lookup() {
        let s = Strategies::default();
        let p = SketchParams::default();
        assert_eq!(s.channels.create("pixels", &p).unwrap().name(), "pixels");
        assert_eq!(s.generators.create("discriminative", &p).unwrap().name(), "discriminative");
        assert_eq!(s.selectors.names(), vec!["energy-argmax", "uniform-random"]);
        match s.selectors.create("softmax", &p) {
            Err(Error::UnknownStrategy { kind, known, .. }) => {
                assert_eq!(kind, "selector");
                assert!(known.contains("energy-argmax"));
            }
            _ => panic!("expected an unknown-strategy error"),
        }
    }

    #[test]
    fn argmax_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(EnergyArgmax.select(&[0.1, 0.9, 0.3], &mut rng).unwrap(), 1);
        assert_eq!(EnergyArgmax.select(&[0.4], &mut rng).unwrap(), 0);
        assert_eq!(EnergyArgmax.select(&[0.2, 0.7, 0.7], &mut rng).unwrap(), 1);
        assert!(EnergyArgmax.select(&[], &mut rng).is_err());
        assert!(UniformRandom.select(&[], &mut rng).is_err());
    }

    #[test]
    fn discriminative_guards() {
        assert!(Discriminative.validate(1, 0).is_err());
        assert!(Discriminative.validate(3, 3).is_err());
        assert!(Discriminative.validate(3, 2).is_ok());
        assert!(Descriptive.validate(1, 0).is_ok());
    }

    #[test]
    fn pixel_channel_projects_into_unit_interval() {
        let mut x = Tensor::new(vec![1, 1, 52, 52], (0..2704).map(|i| i as f64 / 1000.0 - 1.0).collect()).unwrap();
        PixelChannel.project(&mut x);
        assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
