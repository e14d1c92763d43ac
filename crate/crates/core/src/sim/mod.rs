//! Synthetic multipath environment: trajectories, CIR synthesis and
//! normalization, dataset assembly.
//!
//! The channel model is geometric: a line-of-sight path plus one
//! single-bounce path per point scatterer. Each path contributes a
//! band-limited sinc pulse at its propagation delay, weighted by
//! `1 / path length` and rotated by the carrier phase accumulated along the
//! path.

mod io;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use io::{read_csv, read_dataset, write_csv, write_dataset, DATASET_VERSION};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TAPS: usize = 80;
pub const CHANNELS: usize = 3;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Path lengths below this are clamped when computing the `1/L` gain.
const MIN_PATH_LENGTH: f64 = 0.1;

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Point,
    pub max: Point,
}

impl Rect {
    pub fn new(min: Point, max: Point) -> Self {
        Self { min, max }
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }

    fn clamp(&self, p: Point) -> Point {
        [
            p[0].clamp(self.min[0], self.max[0]),
            p[1].clamp(self.min[1], self.max[1]),
        ]
    }

    /// The rectangle grown by `margin` on every side.
    pub fn inflate(&self, margin: f64) -> Rect {
        Rect::new(
            [self.min[0] - margin, self.min[1] - margin],
            [self.max[0] + margin, self.max[1] + margin],
        )
    }
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub area: Rect,
    /// Antenna positions; the index is the antenna id.
    pub antennas: Vec<Point>,
    pub scatterers: Vec<Point>,
    pub bandwidth_hz: f64,
    pub carrier_hz: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Environment {
    /// 20 m × 20 m area, 6 antennas spread along the perimeter, 24 random
    /// scatterers, 100 MHz bandwidth.
    pub fn desk(seed: u64) -> Self {
        let area = Rect::new([0.0, 0.0], [20.0, 20.0]);
        let antennas = perimeter_points(&area, 6);
        let scatterers = random_scatterers(&area, 24, seed);
        Self {
            area,
            antennas,
            scatterers,
            bandwidth_hz: 100e6,
            carrier_hz: DEFAULT_CARRIER_HZ,
            noise_std: 0.01,
            seed,
        }
    }

    /// 32 antennas as 4 arrays of 8 elements, one array centered on each
    /// side of the area, half-wavelength element spacing.
    pub fn desk_mimo(seed: u64) -> Self {
        let mut env = Self::desk(seed);
        let a = env.area;
        let spacing = 0.5 * SPEED_OF_LIGHT / env.carrier_hz;
        let cx = 0.5 * (a.min[0] + a.max[0]);
        let cy = 0.5 * (a.min[1] + a.max[1]);
        let centers = [
            ([cx, a.min[1]], [1.0, 0.0]),
            ([a.max[0], cy], [0.0, 1.0]),
            ([cx, a.max[1]], [-1.0, 0.0]),
            ([a.min[0], cy], [0.0, -1.0]),
        ];
        env.antennas = centers
            .iter()
            .flat_map(|&(c, dir)| {
                (0..8).map(move |e| {
                    let off = (e as f64 - 3.5) * spacing;
                    [c[0] + off * dir[0], c[1] + off * dir[1]]
                })
            })
            .collect();
        env
    }

    pub fn a_max(&self) -> usize {
        self.antennas.len()
    }

    /// Everything must lie within the area inflated by its larger side.
    pub fn world_box(&self) -> Rect {
        self.area.inflate(self.area.width().max(self.area.height()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.a_max() < 2 {
            return Err(Error::Config(format!(
                "environment needs at least 2 antennas, got {}",
                self.a_max()
            )));
        }
        if !(self.area.width() > 0.0 && self.area.height() > 0.0) {
            return Err(Error::Config("area must have positive extent".into()));
        }
        if !(self.bandwidth_hz > 0.0) {
            return Err(Error::Config(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth_hz
            )));
        }
        if !(self.carrier_hz >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::Config("carrier and noise std must be nonnegative".into()));
        }
        let world = self.world_box();
        if let Some(p) = self
            .antennas
            .iter()
            .chain(&self.scatterers)
            .find(|p| !world.contains(**p))
        {
            return Err(Error::Config(format!("{p:?} lies outside the world box")));
        }
        Ok(())
    }

    fn tap_spacing(&self) -> f64 {
        1.0 / self.bandwidth_hz
    }
}

/// Carrier used by the desk environments. Low enough that the carrier phase
/// decorrelates over roughly a meter instead of a few centimeters.
pub const DEFAULT_CARRIER_HZ: f64 = 150e6;

fn perimeter_points(area: &Rect, n: usize) -> Vec<Point> {
    let (w, h) = (area.width(), area.height());
    let perimeter = 2.0 * (w + h);
    (0..n)
        .map(|i| {
            let mut s = (i as f64 + 0.5) * perimeter / n as f64;
            if s < w {
                return [area.min[0] + s, area.min[1]];
            }
            s -= w;
            if s < h {
                return [area.max[0], area.min[1] + s];
            }
            s -= h;
            if s < w {
                return [area.max[0] - s, area.max[1]];
            }
            s -= w;
            [area.min[0], area.max[1] - s]
        })
        .collect()
}

fn random_scatterers(area: &Rect, n: usize, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca7_7e25);
    let bx = area.inflate(0.25 * area.width().max(area.height()));
    (0..n)
        .map(|_| {
            [
                rng.random_range(bx.min[0]..bx.max[0]),
                rng.random_range(bx.min[1]..bx.max[1]),
            ]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub timestamps: Vec<f64>,
    pub positions: Vec<Point>,
    pub rate_hz: f64,
    pub max_speed: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

/// Largest heading change per sample.
const MAX_TURN: f64 = PI / 6.0;

/// Random-waypoint walk with turn-rate-limited headings. Leg speeds are drawn
/// in `[0.6, 0.95] · max_speed`; positions are clamped to the area, which
/// only ever shortens a step.
pub fn generate_trajectory(
    env: &Environment,
    duration_s: f64,
    rate_hz: f64,
    max_speed: f64,
    seed: u64,
) -> Result<Trajectory> {
    if !(rate_hz > 0.0) || !(duration_s > 0.0) || !(max_speed >= 0.0) {
        return Err(Error::Config(
            "duration and rate must be positive, max speed nonnegative".into(),
        ));
    }
    let n = (duration_s * rate_hz + 1e-9).floor() as usize;
    if n < 2 {
        return Err(Error::Config(format!(
            "duration {duration_s} s at {rate_hz} Hz yields fewer than 2 samples"
        )));
    }
    let dt = 1.0 / rate_hz;
    let area = env.area;
    if max_speed * dt > area.width().min(area.height()) {
        return Err(Error::Config(format!(
            "a {:.3} m step does not fit in the {}×{} m area",
            max_speed * dt,
            area.width(),
            area.height()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample_point = |rng: &mut ChaCha8Rng| -> Point {
        [
            rng.random_range(area.min[0]..=area.max[0]),
            rng.random_range(area.min[1]..=area.max[1]),
        ]
    };
    let mut pos = sample_point(&mut rng);
    let mut target = sample_point(&mut rng);
    let mut heading = (target[1] - pos[1]).atan2(target[0] - pos[0]);
    let mut speed = max_speed * rng.random_range(0.6..0.95);

    let mut timestamps = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    for i in 0..n {
        timestamps.push(i as f64 * dt);
        positions.push(pos);
        let step = speed * dt;
        if dist(pos, target) <= step.max(1e-9) {
            target = sample_point(&mut rng);
            speed = max_speed * rng.random_range(0.6..0.95);
        }
        let desired = (target[1] - pos[1]).atan2(target[0] - pos[0]);
        let mut turn = desired - heading;
        turn = (turn + PI).rem_euclid(2.0 * PI) - PI;
        heading += turn.clamp(-MAX_TURN, MAX_TURN);
        let next = area.clamp([pos[0] + step * heading.cos(), pos[1] + step * heading.sin()]);
        pos = next;
    }
    Ok(Trajectory {
        timestamps,
        positions,
        rate_hz,
        max_speed,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    pub fn from_polar(r: f64, theta: f64) -> Self {
        Self::new(r * theta.cos(), r * theta.sin())
    }

    pub fn norm(self) -> f64 {
        self.re.hypot(self.im)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

struct Path {
    length: f64,
}

fn paths(env: &Environment, position: Point, antenna: Point) -> impl Iterator<Item = Path> + '_ {
    std::iter::once(Path {
        length: dist(position, antenna),
    })
    .chain(env.scatterers.iter().map(move |&s| Path {
        length: dist(position, s) + dist(s, antenna),
    }))
}

/// Noiseless baseband CIR at `TAPS` taps spaced `1 / bandwidth` apart.
pub fn synthesize_cir_clean(env: &Environment, position: Point, antenna_id: usize) -> Result<Vec<Complex>> {
    let antenna = *env.antennas.get(antenna_id).ok_or(Error::AntennaId {
        id: antenna_id,
        a_max: env.a_max(),
    })?;
    let ts = env.tap_spacing();
    let mut taps = vec![Complex::default(); TAPS];
    for path in paths(env, position, antenna) {
        let delay = path.length / SPEED_OF_LIGHT;
        let phase = -2.0 * PI * env.carrier_hz * delay;
        let gain = Complex::from_polar(1.0 / path.length.max(MIN_PATH_LENGTH), phase);
        for (n, tap) in taps.iter_mut().enumerate() {
            let p = sinc((n as f64 * ts - delay) / ts);
            tap.re += gain.re * p;
            tap.im += gain.im * p;
        }
    }
    Ok(taps)
}

/// CIR with additive circular complex Gaussian noise of total standard
/// deviation `env.noise_std`.
pub fn synthesize_cir(
    env: &Environment,
    position: Point,
    antenna_id: usize,
    noise: &mut impl Rng,
) -> Result<Vec<Complex>> {
    let mut taps = synthesize_cir_clean(env, position, antenna_id)?;
    if env.noise_std > 0.0 {
        let normal = Normal::new(0.0, env.noise_std / 2f64.sqrt()).expect("finite std");
        for t in &mut taps {
            t.re += normal.sample(noise);
            t.im += normal.sample(noise);
        }
    }
    Ok(taps)
}

/// Three channels (Re, Im, |·|) divided by the peak magnitude, with Re and Im
/// mapped affinely from `[-1, 1]` to `[0, 1]`. Output shape `[3, TAPS]`.
pub fn normalize_cir(raw: &[Complex]) -> Result<Tensor> {
    let len = raw.len();
    let peak = raw.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if !(peak > 0.0) || !peak.is_finite() {
        return Err(Error::Degenerate("CIR has no nonzero finite tap".into()));
    }
    let mut out = vec![0.0; CHANNELS * len];
    for (i, c) in raw.iter().enumerate() {
        out[i] = 0.5 * (c.re / peak + 1.0);
        out[len + i] = 0.5 * (c.im / peak + 1.0);
        out[2 * len + i] = c.norm() / peak;
    }
    Tensor::new([CHANNELS, len], out)
}

/// Inverse of the Re/Im affine map: complex taps up to the per-sample scale.
pub fn complex_taps(taps: &Tensor) -> Vec<Complex> {
    let len = taps.last_dim();
    let d = taps.data();
    (0..len)
        .map(|i| Complex::new(2.0 * d[i] - 1.0, 2.0 * d[len + i] - 1.0))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CirSample {
    /// `[3, TAPS]`: real, imaginary, magnitude.
    pub taps: Tensor,
    pub antenna_id: usize,
    pub timestamp: f64,
    pub true_position: Point,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub a_max: usize,
    pub samples: Vec<CirSample>,
}

/// All antennas' CIRs at one timestamp.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub timestamp: f64,
    pub position: Point,
    /// Indexed by antenna id.
    pub cirs: Vec<Tensor>,
}

impl Dataset {
    /// Groups consecutive runs of `a_max` samples into snapshots. Samples
    /// must be ordered by (timestamp, antenna id) with every antenna present.
    pub fn snapshots(&self) -> Result<Vec<Snapshot>> {
        if self.a_max == 0 || self.samples.len() % self.a_max != 0 {
            return Err(Error::Validation(format!(
                "{} samples do not tile into snapshots of {} antennas",
                self.samples.len(),
                self.a_max
            )));
        }
        self.samples
            .chunks(self.a_max)
            .map(|chunk| {
                let first = &chunk[0];
                for (id, s) in chunk.iter().enumerate() {
                    if s.antenna_id != id || s.timestamp != first.timestamp {
                        return Err(Error::Validation(format!(
                            "snapshot at t = {} is incomplete or out of order",
                            first.timestamp
                        )));
                    }
                }
                Ok(Snapshot {
                    timestamp: first.timestamp,
                    position: first.true_position,
                    cirs: chunk.iter().map(|s| s.taps.clone()).collect(),
                })
            })
            .collect()
    }
}

/// One sample per (trajectory step × antenna), ordered by timestamp then
/// antenna id. Noise draws come from a stream seeded by `env.seed`.
pub fn generate_dataset(env: &Environment, trajectory: &Trajectory) -> Result<Dataset> {
    env.validate()?;
    let mut noise = ChaCha8Rng::seed_from_u64(env.seed);
    noise.set_stream(0x6e6f_6973_65);
    let mut samples = Vec::with_capacity(trajectory.len() * env.a_max());
    for (&t, &p) in trajectory.timestamps.iter().zip(&trajectory.positions) {
        for id in 0..env.a_max() {
            let raw = synthesize_cir(env, p, id, &mut noise)?;
            samples.push(CirSample {
                taps: normalize_cir(&raw)?,
                antenna_id: id,
                timestamp: t,
                true_position: p,
            });
        }
    }
    Ok(Dataset {
        a_max: env.a_max(),
        samples,
    })
}
