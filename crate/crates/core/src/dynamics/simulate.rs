use std::io::{self, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DynamicsError, StateIndex, WqSystem};
use crate::network::NetworkModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation of the additive process noise `w(k)`, mg/L.
    pub process_std: f64,
    /// Standard deviation of the sensor noise `v(k)`, mg/L.
    pub sensor_std: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            process_std: 0.0,
            sensor_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateOptions {
    pub duration_s: f64,
    pub noise: NoiseSpec,
    pub seed: u64,
    /// Keep every n-th state (the initial state is always kept).
    pub record_every: usize,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self {
            duration_s: 0.0,
            noise: NoiseSpec::default(),
            seed: 0,
            record_every: 1,
        }
    }
}

/// Recorded states. When segment counts change between hydraulic steps the
/// state length changes with them; `index[i]` describes `states[i]`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub hydraulic_step: Vec<usize>,
    pub index: Vec<Arc<StateIndex>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn uniform(&self) -> bool {
        self.index.windows(2).all(|w| Arc::ptr_eq(&w[0], &w[1]) || w[0] == w[1])
    }

    /// Smallest and largest concentration over the whole run.
    pub fn range(&self) -> (f64, f64) {
        self.states
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
    }

    /// Largest distance of any recorded concentration outside `[lo, hi]`.
    /// Lax–Wendroff is not monotone, so fronts at a Courant number below one
    /// can overshoot slightly.
    pub fn excursion(&self, lo: f64, hi: f64) -> f64 {
        let (min, max) = self.range();
        (lo - min).max(max - hi).max(0.0)
    }

    /// CSV with a `time_s` column and one column per state. If the state
    /// dimension varies over the run only node, pump and valve columns are
    /// written.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let Some(first) = self.index.first() else {
            return writeln!(out, "time_s");
        };
        let columns: Vec<usize> = if self.uniform() {
            (0..first.n_x()).collect()
        } else {
            first.lumped_states().collect()
        };
        write!(out, "time_s")?;
        for &c in &columns {
            write!(out, ",{}", first.symbol(c))?;
        }
        writeln!(out)?;
        for (i, (t, x)) in self.times.iter().zip(&self.states).enumerate() {
            write!(out, "{t}")?;
            if self.uniform() {
                for v in x {
                    write!(out, ",{v}")?;
                }
            } else {
                for c in lumped_positions(first, &self.index[i], &columns) {
                    write!(out, ",{}", x[c])?;
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

fn lumped_positions<'a>(reference: &'a StateIndex, index: &'a StateIndex, columns: &'a [usize]) -> impl Iterator<Item = usize> + 'a {
    let shift = index.n_x() as isize - reference.n_x() as isize;
    columns.iter().map(move |&c| if c < reference.n_nodes() { c } else { (c as isize + shift) as usize })
}

/// Initial concentrations from the network's quality section; pipe segments,
/// pumps and valves start at zero.
pub fn initial_state(model: &NetworkModel, index: &StateIndex) -> Vec<f64> {
    let mut x = vec![0.0; index.n_x()];
    let nodes = model
        .junctions
        .iter()
        .map(|j| j.initial_quality)
        .chain(model.reservoirs.iter().map(|r| r.source_quality))
        .chain(model.tanks.iter().map(|t| t.initial_quality));
    for (slot, c) in x.iter_mut().zip(nodes) {
        *slot = c;
    }
    x
}

/// Maps a state onto a different segmentation. Lumped states are copied;
/// pipe profiles are linearly interpolated at the new segment centres.
pub fn resample(x: &[f64], from: &StateIndex, to: &StateIndex) -> Result<Vec<f64>, DynamicsError> {
    if x.len() != from.n_x() {
        return Err(DynamicsError::DimensionMismatch {
            expected: from.n_x(),
            found: x.len(),
        });
    }
    if from.segments() == to.segments() {
        return Ok(x.to_vec());
    }
    let mut y = vec![0.0; to.n_x()];
    y[..from.n_nodes()].copy_from_slice(&x[..from.n_nodes()]);
    let tail = from.n_x() - from.lumped_states().count() + from.n_nodes();
    let to_tail = to.n_x() - to.lumped_states().count() + to.n_nodes();
    y[to_tail..].copy_from_slice(&x[tail..]);
    for (p, (&s_old, &s_new)) in from.segments().iter().zip(to.segments()).enumerate() {
        let old = &x[from.pipe_range(p)];
        for j in 0..s_new {
            // position in units of old cells, measured from the first centre
            let u = (j as f64 + 0.5) * s_old as f64 / s_new as f64 - 0.5;
            let value = if u <= 0.0 {
                old[0]
            } else if u >= (s_old - 1) as f64 {
                old[s_old - 1]
            } else {
                let i = u.floor() as usize;
                let w = u - i as f64;
                old[i] * (1.0 - w) + old[i + 1] * w
            };
            y[to.segment(p, j)] = value;
        }
    }
    Ok(y)
}

/// Runs `x(k+1) = A(k) x(k) + w(k)` for `duration_s`, cycling through
/// `systems` one hydraulic interval at a time.
pub fn simulate(systems: &[WqSystem], x0: &[f64], options: &SimulateOptions) -> Result<Trajectory, DynamicsError> {
    let first = systems.first().ok_or(DynamicsError::NoSystems)?;
    if x0.len() != first.n_x() {
        return Err(DynamicsError::DimensionMismatch {
            expected: first.n_x(),
            found: x0.len(),
        });
    }
    let every = options.record_every.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let noise = (options.noise.process_std > 0.0)
        .then(|| Normal::new(0.0, options.noise.process_std).expect("finite std"));

    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![x0.to_vec()],
        hydraulic_step: vec![0],
        index: vec![first.index.clone()],
    };
    let mut x = x0.to_vec();
    let mut index = first.index.clone();
    let mut t = 0.0;
    let mut k = 0usize;
    let tolerance = 1e-9 * options.duration_s.max(1.0);
    'outer: for h in (0..).map(|i| i % systems.len()) {
        let sys = &systems[h];
        if !Arc::ptr_eq(&index, &sys.index) && *index != *sys.index {
            x = resample(&x, &index, &sys.index)?;
        }
        index = sys.index.clone();
        for _ in 0..sys.interval_steps.max(1) {
            if t + sys.dt > options.duration_s + tolerance {
                break 'outer;
            }
            x = sys.a.mul_vec(&x);
            if let Some(n) = &noise {
                x.iter_mut().for_each(|v| *v += n.sample(&mut rng));
            }
            t += sys.dt;
            k += 1;
            if k.is_multiple_of(every) {
                traj.times.push(t);
                traj.states.push(x.clone());
                traj.hydraulic_step.push(h);
                traj.index.push(index.clone());
            }
        }
        if sys.dt > options.duration_s + tolerance {
            break;
        }
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;
    use crate::dynamics::assemble;
    use crate::hydraulics::{plan_discretization, HydraulicState, SegmentPolicy, StepDiscretization};
    use crate::network::parse_network;

    fn one_pipe(velocity: f64, rate: f64, segments: usize, dt: f64) -> (NetworkModel, WqSystem) {
        let text = format!("[JUNCTIONS]\nJ 0 0\n[RESERVOIRS]\nR 0\n[TANKS]\n[PIPES]\nP R J {} 0.2 {rate}\n[QUALITY]\nR 1.0\n", segments as f64);
        let m = parse_network(&text).unwrap();
        let area = m.pipes[0].area();
        let state = HydraulicState {
            pipe_flow: vec![velocity * area],
            pipe_velocity: vec![velocity],
            pump_flow: vec![],
            valve_flow: vec![],
            tank_volume: vec![],
            demand: vec![velocity * area],
        };
        let disc = StepDiscretization {
            segments: vec![segments],
            dx: vec![1.0],
            courant: vec![velocity * dt],
            dt,
            window_steps: 1,
            interval_steps: 1_000_000,
        };
        let sys = assemble(&m, &state, &disc).unwrap();
        (m, sys)
    }

    #[test]
    fn plug_flow_front_moves_one_segment_per_step() {
        let (m, sys) = one_pipe(1.0, 0.0, 12, 1.0);
        let x0 = initial_state(&m, &sys.index);
        let opts = SimulateOptions {
            duration_s: 10.0,
            ..Default::default()
        };
        let traj = simulate(std::slice::from_ref(&sys), &x0, &opts).unwrap();
        assert_eq!(traj.len(), 11);
        for (k, x) in traj.states.iter().enumerate() {
            for s in 0..12 {
                let expected = if s < k { 1.0 } else { 0.0 };
                assert_eq!(x[sys.index.segment(0, s)], expected, "step {k} segment {s}");
            }
        }
    }

    #[test]
    fn decay_only_pipe_follows_closed_form() {
        let (m, sys) = one_pipe(0.0, -1e-3, 4, 2.0);
        let mut x0 = initial_state(&m, &sys.index);
        x0[sys.index.segment(0, 2)] = 0.6;
        let traj = simulate(
            std::slice::from_ref(&sys),
            &x0,
            &SimulateOptions {
                duration_s: 40.0,
                ..Default::default()
            },
        )
        .unwrap();
        for (k, x) in traj.states.iter().enumerate() {
            let expected = 0.6 * (1.0 - 2e-3f64).powi(k as i32);
            assert!((x[sys.index.segment(0, 2)] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn three_node_stays_within_source_bound() {
        let m = bundled::three_node();
        let p = bundled::synthetic_profile(&m, &bundled::three_node_settings(), 24).unwrap();
        let d = plan_discretization(&m, &p, SegmentPolicy::Fixed { segments: 150, dt: None }, Some(300.0)).unwrap();
        let systems: Vec<WqSystem> = p.steps.iter().zip(&d.steps).map(|(s, d)| assemble(&m, s, d).unwrap()).collect();
        let x0 = initial_state(&m, &systems[0].index);
        let traj = simulate(
            &systems,
            &x0,
            &SimulateOptions {
                duration_s: 6.0 * 3600.0,
                record_every: 50,
                ..Default::default()
            },
        )
        .unwrap();
        let (lo, hi) = traj.range();
        assert!((systems[0].courant[0] - 1.0).abs() < 1e-12);
        assert!(lo >= -1e-9 && hi <= 0.8 + 1e-9, "{lo} {hi}");
        assert!(traj.excursion(0.0, 0.8) < 1e-9);
        let j2 = systems[0].index.node("J2").unwrap();
        assert!((traj.states.last().unwrap()[j2] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let (m, sys) = one_pipe(0.5, 0.0, 5, 1.0);
        let x0 = initial_state(&m, &sys.index);
        let opts = SimulateOptions {
            duration_s: 20.0,
            noise: NoiseSpec {
                process_std: 0.01,
                sensor_std: 0.1,
            },
            seed: 7,
            record_every: 1,
        };
        let a = simulate(std::slice::from_ref(&sys), &x0, &opts).unwrap();
        let b = simulate(std::slice::from_ref(&sys), &x0, &opts).unwrap();
        assert_eq!(a.states, b.states);
        let c = simulate(&[sys], &x0, &SimulateOptions { seed: 8, ..opts }).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn zero_duration_returns_initial_state() {
        let (m, sys) = one_pipe(0.5, 0.0, 5, 1.0);
        let x0 = initial_state(&m, &sys.index);
        let t = simulate(&[sys], &x0, &SimulateOptions::default()).unwrap();
        assert_eq!(t.states, vec![x0]);
    }

    #[test]
    fn wrong_length_is_rejected() {
        let (_, sys) = one_pipe(0.5, 0.0, 5, 1.0);
        assert_eq!(
            simulate(&[sys], &[0.0; 3], &SimulateOptions::default()).unwrap_err(),
            DynamicsError::DimensionMismatch { expected: 7, found: 3 }
        );
    }

    #[test]
    fn resample_interpolates_linear_profiles_exactly() {
        let m = bundled::three_node();
        let a = StateIndex::new(&m, &[4]).unwrap();
        let b = StateIndex::new(&m, &[8]).unwrap();
        let mut x = vec![0.1, 0.8, 0.3, 0.0, 0.0, 0.0, 0.0, 0.5];
        for s in 0..4 {
            x[a.segment(0, s)] = (s as f64 + 0.5) / 4.0;
        }
        let y = resample(&x, &a, &b).unwrap();
        assert_eq!(y.len(), 12);
        assert_eq!(&y[..3], &x[..3]);
        assert_eq!(y[11], 0.5);
        for j in 1..7 {
            let centre = (j as f64 + 0.5) / 8.0;
            assert!((y[b.segment(0, j)] - centre).abs() < 1e-12);
        }
        let back = resample(&y, &b, &a).unwrap();
        for s in 1..3 {
            assert!((back[a.segment(0, s)] - x[a.segment(0, s)]).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let (m, sys) = one_pipe(1.0, 0.0, 2, 1.0);
        let x0 = initial_state(&m, &sys.index);
        let t = simulate(
            &[sys],
            &x0,
            &SimulateOptions {
                duration_s: 2.0,
                ..Default::default()
            },
        )
        .unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "time_s,J,R,P:0,P:1");
        assert_eq!(lines[1], "0,0,1,0,0");
        assert_eq!(lines[3], "2,0,1,1,1");
    }
}
