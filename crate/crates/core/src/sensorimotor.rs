//! The drawing channel: motor command → DMP trajectory → rasterized utterance.
//!
//! Each pen axis is driven by a one-dimensional dynamical movement primitive
//! that starts and ends at 0. With start and goal both at the origin the
//! rollout is linear in the forcing weights, so the whole command-to-trajectory
//! map is a fixed matrix ([`Dmp::response_matrix`]) and stays differentiable
//! through an ordinary matmul. The trajectory is then drawn onto a 52×52
//! canvas by [`SketchRaster`], a soft-or of per-segment Gaussian line rasters.

use std::path::Path;
use std::sync::Arc;

use diffcore::{Function, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CANVAS: usize = 52;
pub const TRAJECTORY_POINTS: usize = 10;
pub const WEIGHTS_PER_AXIS: usize = 10;
pub const COMMAND_DIM: usize = 2 * WEIGHTS_PER_AXIS;
pub const WEIGHT_LIMIT: f64 = 500.0;
pub const DEFAULT_THICKNESS: f64 = 1e-2;

/// Constants of the per-axis transformation and canonical systems.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DmpParams {
    pub alpha: f64,
    pub beta: f64,
    pub alpha_phase: f64,
    pub dt: f64,
}

impl Default for DmpParams {
    fn default() -> Self {
        DmpParams {
            alpha: 25.0,
            beta: 25.0 / 4.0,
            alpha_phase: 8.0,
            dt: 0.1,
        }
    }
}

/// A one-dimensional discrete DMP with start = goal = 0.
#[derive(Clone, Debug)]
pub struct Dmp {
    params: DmpParams,
    centers: [f64; WEIGHTS_PER_AXIS],
    width: f64,
}

impl Dmp {
    /// Basis functions are spaced evenly in phase between the phase reached at
    /// t = 1 and 1, each with a width set from the spacing.
    pub fn new(params: DmpParams) -> Self {
        let end = (-params.alpha_phase).exp();
        let spacing = (1.0 - end) / (WEIGHTS_PER_AXIS - 1) as f64;
        let mut centers = [0.0; WEIGHTS_PER_AXIS];
        for (i, c) in centers.iter_mut().enumerate() {
            *c = 1.0 - spacing * i as f64;
        }
        Dmp {
            params,
            centers,
            width: 0.5 / (spacing * spacing),
        }
    }

    pub fn params(&self) -> DmpParams {
        self.params
    }

    fn forcing(&self, phase: f64, weights: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (c, w) in self.centers.iter().zip(weights) {
            let psi = (-self.width * (phase - c) * (phase - c)).exp();
            num += psi * w;
            den += psi;
        }
        phase * num / den
    }

    /// Explicit Euler rollout; returns the position after each of the 10 steps.
    pub fn rollout(&self, weights: &[f64]) -> [f64; TRAJECTORY_POINTS] {
        let DmpParams {
            alpha,
            beta,
            alpha_phase,
            dt,
        } = self.params;
        let (mut y, mut dy, mut phase) = (0.0, 0.0, 1.0);
        let mut out = [0.0; TRAJECTORY_POINTS];
        for slot in out.iter_mut() {
            let ddy = alpha * (beta * (0.0 - y) - dy) + self.forcing(phase, weights);
            let next_y = y + dt * dy;
            dy += dt * ddy;
            phase -= dt * alpha_phase * phase;
            y = next_y;
            *slot = y;
        }
        out
    }

    /// `M[k][i]` = position at step k produced by a unit weight on basis i.
    pub fn response_matrix(&self) -> [[f64; WEIGHTS_PER_AXIS]; TRAJECTORY_POINTS] {
        let mut m = [[0.0; WEIGHTS_PER_AXIS]; TRAJECTORY_POINTS];
        for i in 0..WEIGHTS_PER_AXIS {
            let mut unit = [0.0; WEIGHTS_PER_AXIS];
            unit[i] = 1.0;
            for (k, y) in self.rollout(&unit).iter().enumerate() {
                m[k][i] = *y;
            }
        }
        m
    }
}

/// 20 forcing weights: the first 10 drive x, the last 10 drive y.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotorCommand(pub [f64; COMMAND_DIM]);

impl MotorCommand {
    pub fn new(weights: [f64; COMMAND_DIM]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidInput("motor command has non-finite weights".into()));
        }
        Ok(MotorCommand(weights.map(|w| w.clamp(-WEIGHT_LIMIT, WEIGHT_LIMIT))))
    }

    /// Maps unit-box coordinates in [-1, 1] to weights.
    pub fn from_normalized(z: &[f64]) -> Result<Self> {
        let mut w = [0.0; COMMAND_DIM];
        if z.len() != COMMAND_DIM {
            return Err(Error::InvalidInput(format!("expected {COMMAND_DIM} values, got {}", z.len())));
        }
        for (dst, v) in w.iter_mut().zip(z) {
            *dst = v * WEIGHT_LIMIT;
        }
        MotorCommand::new(w)
    }

    pub fn weights(&self) -> &[f64; COMMAND_DIM] {
        &self.0
    }
}

/// Ten canvas-space points in [0,1]², x to the right and y downward.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub points: Vec<[f64; 2]>,
}

impl Trajectory {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.is_empty() || points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("trajectory must be non-empty and finite".into()));
        }
        Ok(Trajectory { points })
    }

    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("x,y\n");
        for [x, y] in &self.points {
            out.push_str(&format!("{x:?},{y:?}\n"));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// A D×D grayscale image with pixels in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub pixels: Vec<f64>,
}

impl Utterance {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.numel() != CANVAS * CANVAS {
            return Err(Error::InvalidInput(format!("utterance shape {:?}", t.shape())));
        }
        Ok(Utterance {
            pixels: t.data().to_vec(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, CANVAS, CANVAS], self.pixels.clone()).expect("fixed size")
    }

    pub fn pixel(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * CANVAS + col]
    }

    pub fn to_gray8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.to_gray8(),
            CANVAS as u32,
            CANVAS as u32,
            image::ColorType::L8,
        )?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for row in self.pixels.chunks_exact(CANVAS) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Soft-or of Gaussian line rasters, as a differentiable function of the
/// trajectory points `[N, P, 2]`, producing images `[N, 1, D, D]`.
#[derive(Clone, Copy, Debug)]
pub struct SketchRaster {
    pub thickness: f64,
    pub size: usize,
}

/// Beyond this many thicknesses of squared distance a segment contributes
/// less than e^-60 and is treated as absent.
const CUTOFF: f64 = 60.0;

/// A segment with its projection denominator precomputed.
#[derive(Clone, Copy)]
struct Segment {
    ax: f64,
    ay: f64,
    abx: f64,
    aby: f64,
    inv_len2: f64,
}

impl Segment {
    fn new(a: [f64; 2], b: [f64; 2]) -> Self {
        let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
        let len2 = abx * abx + aby * aby;
        Segment {
            ax: a[0],
            ay: a[1],
            abx,
            aby,
            inv_len2: if len2 > 0.0 { 1.0 / len2 } else { 0.0 },
        }
    }

    /// Projection parameter, offset from the nearest point, and squared distance.
    #[inline]
    fn nearest(&self, px: f64, py: f64) -> (f64, f64, f64, f64) {
        let (apx, apy) = (px - self.ax, py - self.ay);
        let t = ((apx * self.abx + apy * self.aby) * self.inv_len2).clamp(0.0, 1.0);
        let (rx, ry) = (apx - t * self.abx, apy - t * self.aby);
        (t, rx, ry, rx * rx + ry * ry)
    }
}

fn segments(traj: &[f64]) -> Vec<Segment> {
    traj.chunks_exact(2)
        .collect::<Vec<_>>()
        .windows(2)
        .map(|w| Segment::new([w[0][0], w[0][1]], [w[1][0], w[1][1]]))
        .collect()
}

impl SketchRaster {
    pub fn new(thickness: f64) -> Self {
        SketchRaster {
            thickness,
            size: CANVAS,
        }
    }

    fn pixel_center(&self, idx: usize) -> f64 {
        (idx as f64 + 0.5) / self.size as f64
    }

    fn check(&self, points: &Tensor) -> diffcore::Result<(usize, usize)> {
        let s = points.shape();
        if s.len() != 3 || s[2] != 2 || s[1] < 2 {
            return Err(diffcore::Error::Shape {
                op: "sketch_raster",
                detail: format!("expected [N, P>=2, 2], got {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    /// Rasterizes a single trajectory without building a graph.
    pub fn render(&self, trajectory: &Trajectory) -> Result<Utterance> {
        let points = Tensor::new(vec![1, trajectory.points.len(), 2], trajectory.flat())?;
        let img = self.forward(&[&points])?;
        Utterance::from_tensor(&img)
    }
}

impl Function for SketchRaster {
    fn name(&self) -> &'static str {
        "sketch_raster"
    }

    fn forward(&self, inputs: &[&Tensor]) -> diffcore::Result<Tensor> {
        let points = inputs[0];
        let (n, p) = self.check(points)?;
        let d = self.size;
        let mut out = vec![0.0; n * d * d];
        let (limit, inv_theta) = (CUTOFF * self.thickness, 1.0 / self.thickness);
        for (traj, img) in points.data().chunks_exact(p * 2).zip(out.chunks_exact_mut(d * d)) {
            let segs = segments(traj);
            for row in 0..d {
                let py = self.pixel_center(row);
                for col in 0..d {
                    let px = self.pixel_center(col);
                    let mut keep = 1.0;
                    for seg in &segs {
                        let (_, _, _, d2) = seg.nearest(px, py);
                        if d2 <= limit {
                            keep *= 1.0 - (-d2 * inv_theta).exp();
                        }
                    }
                    img[row * d + col] = 1.0 - keep;
                }
            }
        }
        Tensor::new(vec![n, 1, d, d], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> diffcore::Result<Vec<Option<Tensor>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let points = inputs[0];
        let (n, p) = self.check(points)?;
        let d = self.size;
        let nseg = p - 1;
        let (limit, inv_theta) = (CUTOFF * self.thickness, 1.0 / self.thickness);
        let mut gp = vec![0.0; points.numel()];
        // per segment: intensity (0 when culled), t, rx, ry
        let mut hits = vec![[0.0f64; 4]; nseg];
        let mut suffix = vec![1.0; nseg + 1];
        for b in 0..n {
            let segs = segments(&points.data()[b * p * 2..(b + 1) * p * 2]);
            let gimg = &grad.data()[b * d * d..(b + 1) * d * d];
            let gtraj = &mut gp[b * p * 2..(b + 1) * p * 2];
            for row in 0..d {
                let py = self.pixel_center(row);
                for col in 0..d {
                    let g = gimg[row * d + col];
                    if g == 0.0 {
                        continue;
                    }
                    let px = self.pixel_center(col);
                    for (h, seg) in hits.iter_mut().zip(&segs) {
                        let (t, rx, ry, d2) = seg.nearest(px, py);
                        let i = if d2 <= limit { (-d2 * inv_theta).exp() } else { 0.0 };
                        *h = [i, t, rx, ry];
                    }
                    for s in (0..nseg).rev() {
                        suffix[s] = suffix[s + 1] * (1.0 - hits[s][0]);
                    }
                    let mut prefix = 1.0;
                    for (s, &[i, t, rx, ry]) in hits.iter().enumerate() {
                        if i == 0.0 {
                            continue;
                        }
                        // d pixel / d intensity = product of the other (1 - I)
                        let coeff = g * prefix * suffix[s + 1] * i * 2.0 * inv_theta;
                        let (wa, wb) = (coeff * (1.0 - t), coeff * t);
                        gtraj[2 * s] += wa * rx;
                        gtraj[2 * s + 1] += wa * ry;
                        gtraj[2 * (s + 1)] += wb * rx;
                        gtraj[2 * (s + 1) + 1] += wb * ry;
                        prefix *= 1.0 - i;
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::new(points.shape().to_vec(), gp)?)])
    }
}

/// Canvas placement of the DMP frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SketchParams {
    pub dmp: DmpParams,
    /// Canvas units per DMP unit.
    pub gain: f64,
    pub thickness: f64,
}

impl Default for SketchParams {
    fn default() -> Self {
        SketchParams {
            dmp: DmpParams::default(),
            gain: 0.25,
            thickness: DEFAULT_THICKNESS,
        }
    }
}

/// The full motor system `M`: commands to trajectories to utterances.
#[derive(Clone, Debug)]
pub struct SensoriMotor {
    params: SketchParams,
    dmp: Dmp,
    /// `[20, 20]`: weights (x block, y block) to interleaved point coordinates, scaled by the gain.
    projection: Tensor,
    raster: SketchRaster,
}

impl SensoriMotor {
    pub fn new(params: SketchParams) -> Self {
        let dmp = Dmp::new(params.dmp);
        let m = dmp.response_matrix();
        let mut proj = vec![0.0; COMMAND_DIM * COMMAND_DIM];
        for k in 0..TRAJECTORY_POINTS {
            for i in 0..WEIGHTS_PER_AXIS {
                // row = input weight, column = output coordinate
                proj[i * COMMAND_DIM + 2 * k] = params.gain * m[k][i];
                proj[(WEIGHTS_PER_AXIS + i) * COMMAND_DIM + 2 * k + 1] = params.gain * m[k][i];
            }
        }
        SensoriMotor {
            params,
            dmp,
            projection: Tensor::new(vec![COMMAND_DIM, COMMAND_DIM], proj).expect("square"),
            raster: SketchRaster::new(params.thickness),
        }
    }

    pub fn params(&self) -> SketchParams {
        self.params
    }

    pub fn dmp(&self) -> &Dmp {
        &self.dmp
    }

    pub fn raster(&self) -> SketchRaster {
        self.raster
    }

    /// Integrates both axis DMPs and maps the result onto the canvas.
    pub fn rollout(&self, command: &MotorCommand) -> Trajectory {
        let w = command.weights();
        let xs = self.dmp.rollout(&w[..WEIGHTS_PER_AXIS]);
        let ys = self.dmp.rollout(&w[WEIGHTS_PER_AXIS..]);
        let points = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| [0.5 + self.params.gain * x, 0.5 + self.params.gain * y])
            .collect();
        Trajectory { points }
    }

    pub fn draw(&self, command: &MotorCommand) -> Result<Utterance> {
        self.raster.render(&self.rollout(command))
    }

    /// Differentiable trajectory `[N, 10, 2]` from raw weights `[N, 20]`.
    pub fn trajectory_graph(&self, g: &mut Graph, weights: Var) -> Result<Var> {
        let n = g.value(weights).shape()[0];
        let proj = g.constant(self.projection.clone())?;
        let offsets = g.matmul(weights, proj)?;
        let center = g.constant(Tensor::full(vec![n, COMMAND_DIM], 0.5))?;
        let flat = g.add(offsets, center)?;
        Ok(g.reshape(flat, &[n, TRAJECTORY_POINTS, 2])?)
    }

    /// Differentiable utterances `[N, 1, 52, 52]` from raw weights `[N, 20]`.
    pub fn draw_graph(&self, g: &mut Graph, weights: Var) -> Result<Var> {
        let traj = self.trajectory_graph(g, weights)?;
        Ok(g.apply(Arc::new(self.raster), &[traj])?)
    }
}

impl Default for SensoriMotor {
    fn default() -> Self {
        SensoriMotor::new(SketchParams::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffcore::gradcheck::{check_gradients, DEFAULT_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_command(rng: &mut ChaCha8Rng) -> MotorCommand {
        let mut w = [0.0; COMMAND_DIM];
        w.iter_mut().for_each(|v| *v = rng.gen_range(-WEIGHT_LIMIT..WEIGHT_LIMIT));
        MotorCommand::new(w).unwrap()
    }

    /// Straightforward second integrator: loops over the same equations with
    /// the basis evaluated inline, independent of `Dmp::forcing`.
    fn reference_rollout(weights: &[f64]) -> Vec<f64> {
        let (alpha, beta, ax, dt) = (25.0, 6.25, 8.0, 0.1);
        let end = (-8.0f64).exp();
        let spacing = (1.0 - end) / 9.0;
        let h = 0.5 / (spacing * spacing);
        let mut state = (0.0f64, 0.0f64, 1.0f64);
        let mut out = vec![];
        for _ in 0..10 {
            let (y, v, s) = state;
            let (mut num, mut den) = (0.0, 0.0);
            for (i, w) in weights.iter().enumerate() {
                let c = 1.0 - spacing * i as f64;
                let psi = (-h * (s - c).powi(2)).exp();
                num += psi * w;
                den += psi;
            }
            let acc = alpha * (-beta * y - v) + s * num / den;
            state = (y + dt * v, v + dt * acc, s * (1.0 - ax * dt));
            out.push(state.0);
        }
        out
    }

    #[test]
    fn zero_command_stays_at_center() {
        let sm = SensoriMotor::default();
        let t = sm.rollout(&MotorCommand([0.0; COMMAND_DIM]));
        assert_eq!(t.points.len(), TRAJECTORY_POINTS);
        assert!(t.points.iter().all(|p| *p == [0.5, 0.5]));
    }

    #[test]
    fn negated_command_mirrors_about_center() {
        let sm = SensoriMotor::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let c = random_command(&mut rng);
            let neg = MotorCommand(c.0.map(|w| -w));
            let (a, b) = (sm.rollout(&c), sm.rollout(&neg));
            for (p, q) in a.points.iter().zip(&b.points) {
                assert!((p[0] - 0.5 + (q[0] - 0.5)).abs() < 1e-12);
                assert!((p[1] - 0.5 + (q[1] - 0.5)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rollout_matches_independent_integrator() {
        let dmp = Dmp::new(DmpParams::default());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let w: Vec<f64> = (0..10).map(|_| rng.gen_range(-500.0..500.0)).collect();
            let ours = dmp.rollout(&w);
            let theirs = reference_rollout(&w);
            for (a, b) in ours.iter().zip(&theirs) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                // max reachable excursion is dt^2 * 500 = 5 DMP units
                assert!(a.abs() <= 5.0 + 1e-9);
            }
        }
    }

    #[test]
    fn response_matrix_reproduces_rollout() {
        let sm = SensoriMotor::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random_command(&mut rng);
        let direct = sm.rollout(&c);
        let mut g = Graph::new();
        let w = g.constant(Tensor::new(vec![1, 20], c.0.to_vec()).unwrap()).unwrap();
        let t = sm.trajectory_graph(&mut g, w).unwrap();
        for (a, b) in g.value(t).data().iter().zip(direct.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
        // first point is the canvas center
        assert_eq!(direct.points[0], [0.5, 0.5]);
    }

    #[test]
    fn commands_are_clamped_and_checked() {
        let mut w = [0.0; COMMAND_DIM];
        w[0] = 900.0;
        w[1] = -1e6;
        let c = MotorCommand::new(w).unwrap();
        assert_eq!((c.0[0], c.0[1]), (500.0, -500.0));
        w[2] = f64::NAN;
        assert!(MotorCommand::new(w).is_err());
    }

    #[test]
    fn degenerate_trajectory_is_a_point_source() {
        let raster = SketchRaster::new(DEFAULT_THICKNESS);
        let t = Trajectory::new(vec![[0.5, 0.5]; 10]).unwrap();
        let u = raster.render(&t).unwrap();
        // nine coincident zero-length segments, soft-or'ed together
        let single = (-2.0 * (0.5 / 52.0f64).powi(2) / 0.01).exp();
        let center = u.pixel(25, 25);
        assert!((center - (1.0 - (1.0 - single).powi(9))).abs() < 1e-12);
        let max = u.pixels.iter().cloned().fold(0.0, f64::max);
        assert_eq!(center, max);
        // radial decay along a row
        for col in 26..51 {
            assert!(u.pixel(25, col) > u.pixel(25, col + 1));
        }
        assert!(u.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn far_pixels_are_dark() {
        let raster = SketchRaster::new(DEFAULT_THICKNESS);
        // a short stroke in the top-left corner; the bottom-right pixel is > 0.5 away
        let t = Trajectory::new(vec![[0.0, 0.0], [0.05, 0.02]]).unwrap();
        let u = raster.render(&t).unwrap();
        assert!(u.pixel(51, 51) < 1e-10);
    }

    #[test]
    fn soft_or_of_duplicated_segment() {
        let raster = SketchRaster::new(DEFAULT_THICKNESS);
        let single = raster.render(&Trajectory::new(vec![[0.3, 0.4], [0.7, 0.6]]).unwrap()).unwrap();
        let double = raster
            .render(&Trajectory::new(vec![[0.3, 0.4], [0.7, 0.6], [0.3, 0.4]]).unwrap())
            .unwrap();
        for (a, b) in single.pixels.iter().zip(&double.pixels) {
            assert!((b - (1.0 - (1.0 - a) * (1.0 - a))).abs() < 1e-12);
        }
    }

    #[test]
    fn adding_a_segment_never_darkens() {
        let raster = SketchRaster::new(DEFAULT_THICKNESS);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut pts: Vec<[f64; 2]> = (0..4).map(|_| [rng.gen(), rng.gen()]).collect();
        let before = raster.render(&Trajectory::new(pts.clone()).unwrap()).unwrap();
        pts.push([rng.gen(), rng.gen()]);
        let after = raster.render(&Trajectory::new(pts).unwrap()).unwrap();
        assert!(before.pixels.iter().zip(&after.pixels).all(|(a, b)| b >= a));
    }

    #[test]
    fn raster_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let raster = Arc::new(SketchRaster::new(DEFAULT_THICKNESS));
        for _ in 0..3 {
            let pts: Vec<f64> = (0..2 * 2 * 5).map(|_| rng.gen_range(0.1..0.9)).collect();
            let weights: Vec<f64> = (0..2 * CANVAS * CANVAS).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let input = Tensor::new(vec![2, 5, 2], pts).unwrap();
            let report = check_gradients(
                |g, v| {
                    let img = g.apply(raster.clone(), &[v[0]])?;
                    let w = g.constant(Tensor::new(vec![2, 1, CANVAS, CANVAS], weights.clone())?)?;
                    let p = g.mul(img, w)?;
                    g.sum(p)
                },
                &[input],
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(report.passes(1e-3), "{:?}", report.errors);
        }
    }

    #[test]
    fn drawing_is_deterministic() {
        let sm = SensoriMotor::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_command(&mut rng);
        assert_eq!(sm.draw(&c).unwrap(), sm.draw(&c).unwrap());
    }
}
