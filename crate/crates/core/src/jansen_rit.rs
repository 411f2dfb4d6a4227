//! Stochastic Jansen-Rit neural-mass network.
//!
//! Each region carries pyramidal (`x0`), excitatory (`x1`) and inhibitory
//! (`x2`) interneuron populations plus a long-range pyramidal output
//! (`x3`), each as a second-order linear filter driven through a sigmoid.
//! Regions interact only through `x3`, weighted by the row-normalized
//! connectome. The recorded observable of region `i` is the membrane
//! potential of its pyramidal cells:
//!
//! ```text
//! v_i = C2 x1_i - C4 x2_i + C alpha z_i,   z_i = sum_{j != i} M~_ij x3_j
//! ```
//!
//! Integration is explicit Euler at `dt`; the observable is decimated by
//! `downsample_factor` after a burn-in period.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::connectome::ScMatrix;
use crate::ec::{EcMode, EcTensor};
use crate::error::{Error, Result};
use crate::series::TimeSeries;

#[derive(Debug, Clone, PartialEq)]
pub struct JrParams {
    /// Excitatory PSP amplitude `A` (mV).
    pub exc_amplitude: f64,
    /// Inhibitory PSP amplitude `B` (mV).
    pub inh_amplitude: f64,
    /// Excitatory rate constant `a` (1/s).
    pub exc_rate: f64,
    /// Inhibitory rate constant `b` (1/s).
    pub inh_rate: f64,
    /// Rate constant of the long-range output (1/s).
    pub long_range_rate: f64,
    pub c: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    /// Gain on the long-range excitatory input.
    pub alpha: f64,
    /// Gain on the inhibitory feedback onto excitatory interneurons.
    pub beta: f64,
    /// Maximal firing rate of the sigmoid (1/s).
    pub zeta_max: f64,
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
    /// Sigmoid threshold (mV).
    pub theta: f64,
    pub noise_mean: f64,
    pub noise_sd: f64,
    /// Integration step (s).
    pub dt: f64,
    pub downsample_factor: usize,
    /// Discarded transient before recording starts (s).
    pub burn_in: f64,
    /// Average each block of fine steps instead of plain decimation.
    pub anti_alias: bool,
}

impl Default for JrParams {
    fn default() -> Self {
        let c = 135.0;
        let exc_rate = 100.0;
        Self {
            exc_amplitude: 3.25,
            inh_amplitude: 22.0,
            exc_rate,
            inh_rate: 50.0,
            long_range_rate: 0.5 * exc_rate,
            c,
            c1: c,
            c2: 0.8 * c,
            c3: 0.25 * c,
            c4: 0.25 * c,
            alpha: 0.71,
            beta: 0.4,
            zeta_max: 5.0,
            r0: 0.56,
            r1: 0.56,
            r2: 0.56,
            theta: 6.0,
            noise_mean: 2.0,
            noise_sd: 2.0,
            dt: 1e-3,
            downsample_factor: 10,
            burn_in: 10.0,
            anti_alias: false,
        }
    }
}

impl JrParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("exc_rate", self.exc_rate),
            ("inh_rate", self.inh_rate),
            ("long_range_rate", self.long_range_rate),
            ("zeta_max", self.zeta_max),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.downsample_factor == 0 {
            return Err(Error::invalid("downsample_factor must be >= 1"));
        }
        if !(self.noise_sd >= 0.0) || !(self.burn_in >= 0.0) {
            return Err(Error::invalid("noise_sd and burn_in must be nonnegative"));
        }
        Ok(())
    }

    /// Output sample rate after decimation (Hz).
    pub fn output_rate(&self) -> f64 {
        1.0 / (self.dt * self.downsample_factor as f64)
    }

    pub fn burn_in_steps(&self) -> u64 {
        (self.burn_in / self.dt).round() as u64
    }

    /// Sets a named constant from its config key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::invalid(format!("{key}: not a number: {v:?}")))
        };
        match key {
            "A" | "exc_amplitude" => self.exc_amplitude = parse(value)?,
            "B" | "inh_amplitude" => self.inh_amplitude = parse(value)?,
            "a" | "exc_rate" => self.exc_rate = parse(value)?,
            "b" | "inh_rate" => self.inh_rate = parse(value)?,
            "a_bar" | "long_range_rate" => self.long_range_rate = parse(value)?,
            "C" | "c" => self.c = parse(value)?,
            "C1" | "c1" => self.c1 = parse(value)?,
            "C2" | "c2" => self.c2 = parse(value)?,
            "C3" | "c3" => self.c3 = parse(value)?,
            "C4" | "c4" => self.c4 = parse(value)?,
            "alpha" => self.alpha = parse(value)?,
            "beta" => self.beta = parse(value)?,
            "zeta_max" => self.zeta_max = parse(value)?,
            "r0" => self.r0 = parse(value)?,
            "r1" => self.r1 = parse(value)?,
            "r2" => self.r2 = parse(value)?,
            "theta" => self.theta = parse(value)?,
            "noise_mean" => self.noise_mean = parse(value)?,
            "noise_sd" => self.noise_sd = parse(value)?,
            "dt" => self.dt = parse(value)?,
            "downsample_factor" => {
                self.downsample_factor = value
                    .parse()
                    .map_err(|_| Error::invalid(format!("{key}: not an integer: {value:?}")))?
            }
            "burn_in" => self.burn_in = parse(value)?,
            "anti_alias" => {
                self.anti_alias = value
                    .parse()
                    .map_err(|_| Error::invalid(format!("{key}: not a bool: {value:?}")))?
            }
            other => return Err(Error::invalid(format!("unknown JR parameter {other:?}"))),
        }
        Ok(())
    }

    /// All constants as `(key, value)` pairs, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("A", self.exc_amplitude.to_string()),
            ("B", self.inh_amplitude.to_string()),
            ("a", self.exc_rate.to_string()),
            ("b", self.inh_rate.to_string()),
            ("a_bar", self.long_range_rate.to_string()),
            ("C", self.c.to_string()),
            ("C1", self.c1.to_string()),
            ("C2", self.c2.to_string()),
            ("C3", self.c3.to_string()),
            ("C4", self.c4.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("zeta_max", self.zeta_max.to_string()),
            ("r0", self.r0.to_string()),
            ("r1", self.r1.to_string()),
            ("r2", self.r2.to_string()),
            ("theta", self.theta.to_string()),
            ("noise_mean", self.noise_mean.to_string()),
            ("noise_sd", self.noise_sd.to_string()),
            ("dt", self.dt.to_string()),
            ("downsample_factor", self.downsample_factor.to_string()),
            ("burn_in", self.burn_in.to_string()),
            ("anti_alias", self.anti_alias.to_string()),
        ]
    }
}

/// Population firing rate `zeta_max / (1 + exp(r (theta - v)))`.
#[inline]
pub fn sigmoid(v: f64, r: f64, params: &JrParams) -> f64 {
    params.zeta_max / (1.0 + (r * (params.theta - v)).exp())
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NodeState {
    pub x: [f64; 4],
    pub y: [f64; 4],
}

impl NodeState {
    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.y).all(|v| v.is_finite())
    }

    fn component_mut(&mut self, var: StateVar) -> &mut f64 {
        match var {
            StateVar::X(k) => &mut self.x[k],
            StateVar::Y(k) => &mut self.y[k],
        }
    }
}

/// One of the eight per-region state components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateVar {
    X(usize),
    Y(usize),
}

impl std::str::FromStr for StateVar {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, idx) = s.split_at(1.min(s.len()));
        let k: usize = idx
            .parse()
            .ok()
            .filter(|k| *k < 4)
            .ok_or_else(|| Error::invalid(format!("unknown state variable {s:?}")))?;
        match kind {
            "x" => Ok(StateVar::X(k)),
            "y" => Ok(StateVar::Y(k)),
            _ => Err(Error::invalid(format!("unknown state variable {s:?}"))),
        }
    }
}

/// An additive kick to one state component, repeated at `step_index`
/// (one-based) of every `window_len`-sample window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub region: usize,
    pub variable: StateVar,
    pub magnitude: f64,
    pub step_index: usize,
    pub window_len: usize,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            region: 0,
            variable: StateVar::X(1),
            magnitude: 0.1,
            step_index: 76,
            window_len: 100,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.region >= n {
            return Err(Error::invalid(format!(
                "perturbed region {} out of range for {n} regions",
                self.region
            )));
        }
        if self.step_index == 0 || self.step_index > self.window_len {
            return Err(Error::invalid(format!(
                "perturbation step {} outside 1..={}",
                self.step_index, self.window_len
            )));
        }
        Ok(())
    }

    fn fires_at(&self, row: usize) -> bool {
        row % self.window_len + 1 == self.step_index
    }

    fn apply(&self, states: &mut [NodeState]) {
        *states[self.region].component_mut(self.variable) += self.magnitude;
    }
}

/// Long-range input `z_i` from the row-normalized connectome.
pub fn coupling_input(states: &[NodeState], sc: &ScMatrix, i: usize) -> Result<f64> {
    if states.len() != sc.n() || i >= sc.n() {
        return Err(Error::Shape {
            op: "coupling_input",
            lhs: vec![states.len()],
            rhs: vec![sc.n(), sc.n()],
        });
    }
    Ok(sc
        .row(i)
        .iter()
        .zip(states)
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, (w, s))| w * s.x[3])
        .sum())
}

/// Time derivatives of one region given its long-range input and drive.
#[inline]
fn derivatives(s: &NodeState, z: f64, drive: f64, p: &JrParams) -> NodeState {
    let (a, b, ab) = (p.exc_rate, p.inh_rate, p.long_range_rate);
    let pyramidal_in = p.c2 * s.x[1] - p.c4 * s.x[2] + p.c * p.alpha * z;
    let fire0 = sigmoid(pyramidal_in, p.r0, p);
    let fire1 = sigmoid(p.c1 * s.x[0] - p.c * p.beta * s.x[2], p.r1, p);
    let fire2 = sigmoid(p.c3 * s.x[0], p.r2, p);
    NodeState {
        x: s.y,
        y: [
            p.exc_amplitude * a * fire0 - 2.0 * a * s.y[0] - a * a * s.x[0],
            p.exc_amplitude * a * (drive + fire1) - 2.0 * a * s.y[1] - a * a * s.x[1],
            p.inh_amplitude * b * fire2 - 2.0 * b * s.y[2] - b * b * s.x[2],
            p.exc_amplitude * ab * fire0 - 2.0 * ab * s.y[3] - ab * ab * s.x[3],
        ],
    }
}

/// One explicit Euler step of the whole network. `sc` must already be
/// row-normalized. A perturbation, if given, is added before the
/// derivatives are evaluated. Divergence is reported with step 0; use
/// [`Simulator`] for step-accurate diagnostics.
pub fn euler_step(
    states: &[NodeState],
    params: &JrParams,
    sc: &ScMatrix,
    noise: &[f64],
    perturb: Option<&PerturbationSpec>,
) -> Result<Vec<NodeState>> {
    if noise.len() != states.len() {
        return Err(Error::Shape {
            op: "euler_step",
            lhs: vec![states.len()],
            rhs: vec![noise.len()],
        });
    }
    let mut current = states.to_vec();
    if let Some(pert) = perturb {
        pert.validate(states.len())?;
        pert.apply(&mut current);
    }
    let mut next = Vec::with_capacity(current.len());
    for (i, s) in current.iter().enumerate() {
        let z = coupling_input(&current, sc, i)?;
        next.push(advance(s, &derivatives(s, z, noise[i], params), params.dt));
        if !next[i].is_finite() {
            return Err(Error::Divergence { node: i, step: 0 });
        }
    }
    Ok(next)
}

#[inline]
fn advance(s: &NodeState, d: &NodeState, dt: f64) -> NodeState {
    let mut out = *s;
    for k in 0..4 {
        out.x[k] += dt * d.x[k];
        out.y[k] += dt * d.y[k];
    }
    out
}

/// Stateful integrator over a fixed connectome.
#[derive(Debug, Clone)]
pub struct Simulator {
    params: JrParams,
    /// Row-normalized afferents per region as `(source, weight)`.
    afferents: Vec<Vec<(usize, f64)>>,
    states: Vec<NodeState>,
    step: u64,
    z: Vec<f64>,
}

impl Simulator {
    pub fn new(params: &JrParams, sc: &ScMatrix) -> Result<Self> {
        params.validate()?;
        let norm = sc.normalize();
        let afferents = (0..norm.n())
            .map(|i| {
                norm.row(i)
                    .iter()
                    .enumerate()
                    .filter(|(j, w)| *j != i && **w != 0.0)
                    .map(|(j, w)| (j, *w))
                    .collect()
            })
            .collect();
        Ok(Self {
            params: params.clone(),
            afferents,
            states: vec![NodeState::default(); sc.n()],
            step: 0,
            z: vec![0.0; sc.n()],
        })
    }

    pub fn n(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[NodeState] {
        &self.states
    }

    pub fn set_states(&mut self, states: &[NodeState]) {
        self.states.copy_from_slice(states);
    }

    fn update_coupling(&mut self) {
        for (i, aff) in self.afferents.iter().enumerate() {
            self.z[i] = aff.iter().map(|(j, w)| w * self.states[*j].x[3]).sum();
        }
    }

    /// Observable `v_i` of every region at the current state.
    pub fn observe(&mut self, out: &mut [f64]) {
        self.update_coupling();
        let p = &self.params;
        for (i, s) in self.states.iter().enumerate() {
            out[i] = p.c2 * s.x[1] - p.c4 * s.x[2] + p.c * p.alpha * self.z[i];
        }
    }

    pub fn perturb(&mut self, spec: &PerturbationSpec) {
        spec.apply(&mut self.states);
    }

    /// Advances one `dt` with per-region drive `noise`.
    pub fn step(&mut self, noise: &[f64]) -> Result<()> {
        self.update_coupling();
        let dt = self.params.dt;
        for i in 0..self.states.len() {
            let s = self.states[i];
            let next = advance(&s, &derivatives(&s, self.z[i], noise[i], &self.params), dt);
            if !next.is_finite() {
                return Err(Error::Divergence {
                    node: i,
                    step: self.step,
                });
            }
            self.states[i] = next;
        }
        self.step += 1;
        Ok(())
    }

    /// Integrates `rows * downsample_factor` fine steps, appending one
    /// observable row per block to `out`. `first_row` is the window-relative
    /// index used to decide when the perturbations fire.
    fn run_rows(
        &mut self,
        rows: usize,
        first_row: usize,
        perturbs: &[PerturbationSpec],
        noise: &mut dyn FnMut(&mut [f64]),
        out: &mut Vec<f64>,
    ) -> Result<()> {
        let n = self.n();
        let factor = self.params.downsample_factor;
        let mut drive = vec![0.0; n];
        let mut obs = vec![0.0; n];
        let mut acc = vec![0.0; n];
        for r in 0..rows {
            for pert in perturbs.iter().filter(|p| p.fires_at(first_row + r)) {
                self.perturb(pert);
            }
            if self.params.anti_alias {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for _ in 0..factor {
                    self.observe(&mut obs);
                    acc.iter_mut().zip(&obs).for_each(|(a, o)| *a += o);
                    noise(&mut drive);
                    self.step(&drive)?;
                }
                out.extend(acc.iter().map(|a| a / factor as f64));
            } else {
                self.observe(&mut obs);
                out.extend_from_slice(&obs);
                for _ in 0..factor {
                    noise(&mut drive);
                    self.step(&drive)?;
                }
            }
        }
        Ok(())
    }

    fn burn_in(&mut self, noise: &mut dyn FnMut(&mut [f64])) -> Result<()> {
        let mut drive = vec![0.0; self.n()];
        for _ in 0..self.params.burn_in_steps() {
            noise(&mut drive);
            self.step(&drive)?;
        }
        Ok(())
    }
}

fn drive_distribution(params: &JrParams) -> Result<Normal<f64>> {
    Normal::new(params.noise_mean, params.noise_sd)
        .map_err(|e| Error::invalid(format!("noise distribution: {e}")))
}

/// Simulates `n_steps` fine steps after burn-in and returns the decimated
/// observable, `n_steps / downsample_factor` rows. Perturbations fire at
/// their window-relative sample index.
pub fn simulate(
    params: &JrParams,
    sc: &ScMatrix,
    n_steps: usize,
    seed: u64,
    perturbs: &[PerturbationSpec],
) -> Result<TimeSeries> {
    params.validate()?;
    if n_steps < params.downsample_factor {
        return Err(Error::invalid(format!(
            "{n_steps} steps is shorter than one output sample ({})",
            params.downsample_factor
        )));
    }
    for p in perturbs {
        p.validate(sc.n())?;
    }
    let mut sim = Simulator::new(params, sc)?;
    let dist = drive_distribution(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = |buf: &mut [f64]| buf.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
    sim.burn_in(&mut noise)?;
    let rows = n_steps / params.downsample_factor;
    let mut data = Vec::with_capacity(rows * sc.n());
    sim.run_rows(rows, 0, perturbs, &mut noise, &mut data)?;
    TimeSeries::new(sc.n(), data, params.output_rate(), seed)
}

/// Paired unperturbed/perturbed windows sharing their noise draws.
#[derive(Debug, Clone)]
pub struct TwinSet {
    /// Unperturbed windows laid end to end.
    pub baseline: TimeSeries,
    /// Per source region: its perturbed windows laid end to end.
    pub perturbed: Vec<TimeSeries>,
    pub template: PerturbationSpec,
    pub n_windows: usize,
}

impl TwinSet {
    pub fn window_len(&self) -> usize {
        self.template.window_len
    }

    /// Response steps after the kick.
    pub fn horizon(&self) -> usize {
        self.template.window_len - self.template.step_index
    }

    /// Mean over windows of `perturbed - baseline` in the post-kick rows.
    pub fn ground_truth(&self) -> Result<EcTensor> {
        let n = self.baseline.n_channels();
        let horizon = self.horizon();
        if horizon == 0 {
            return Err(Error::invalid("perturbation at the last window step leaves no response"));
        }
        let mut ec = EcTensor::zeros(horizon, n, self.template.magnitude, EcMode::GroundTruth);
        let len = self.window_len();
        let first = self.template.step_index;
        for (source, pert) in self.perturbed.iter().enumerate() {
            for t in 0..horizon {
                for target in 0..n {
                    let mut sum = 0.0;
                    for w in 0..self.n_windows {
                        let row = w * len + first + t;
                        sum += pert.row(row)[target] - self.baseline.row(row)[target];
                    }
                    ec.set(t, target, source, sum / self.n_windows as f64);
                }
            }
        }
        ec.n_samples = self.n_windows;
        Ok(ec)
    }
}

fn window_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates `n_windows` consecutive windows and, for every region, the
/// perturbed twin of each window. Window `w` draws its noise from its own
/// stream, so the twin replays exactly the baseline's draws.
pub fn twin_windows(
    params: &JrParams,
    sc: &ScMatrix,
    n_windows: usize,
    template: &PerturbationSpec,
    seed: u64,
) -> Result<TwinSet> {
    if n_windows == 0 {
        return Err(Error::invalid("need at least one window"));
    }
    template.validate(sc.n())?;
    let n = sc.n();
    let len = template.window_len;
    let factor = params.downsample_factor;
    let kick_row = template.step_index - 1;
    let dist = drive_distribution(params)?;

    let mut sim = Simulator::new(params, sc)?;
    let mut burn_rng = window_rng(seed, 0);
    sim.burn_in(&mut |buf: &mut [f64]| {
        buf.iter_mut().for_each(|v| *v = dist.sample(&mut burn_rng))
    })?;

    let mut baseline = Vec::with_capacity(n_windows * len * n);
    let mut perturbed = vec![Vec::with_capacity(n_windows * len * n); n];
    let mut noise_buf = vec![0.0; len * factor * n];
    for w in 0..n_windows {
        let mut rng = window_rng(seed, w as u64 + 1);
        noise_buf
            .iter_mut()
            .for_each(|v| *v = dist.sample(&mut rng));

        let start = baseline.len();
        let mut cursor = 0;
        let mut replay = |buf: &mut [f64]| {
            buf.copy_from_slice(&noise_buf[cursor..cursor + n]);
            cursor += n;
        };
        sim.run_rows(kick_row, 0, &[], &mut replay, &mut baseline)?;
        let snapshot = sim.states().to_vec();
        let step_at_kick = sim.step;
        sim.run_rows(len - kick_row, kick_row, &[], &mut replay, &mut baseline)?;
        let end_states = sim.states().to_vec();
        let end_step = sim.step;

        for (source, rows) in perturbed.iter_mut().enumerate() {
            rows.extend_from_slice(&baseline[start..start + kick_row * n]);
            sim.set_states(&snapshot);
            sim.step = step_at_kick;
            let spec = PerturbationSpec {
                region: source,
                ..*template
            };
            let mut cursor = kick_row * factor * n;
            let mut replay = |buf: &mut [f64]| {
                buf.copy_from_slice(&noise_buf[cursor..cursor + n]);
                cursor += n;
            };
            sim.run_rows(len - kick_row, kick_row, &[spec], &mut replay, rows)?;
        }
        sim.set_states(&end_states);
        sim.step = end_step;
    }

    let rate = params.output_rate();
    Ok(TwinSet {
        baseline: TimeSeries::new(n, baseline, rate, seed)?,
        perturbed: perturbed
            .into_iter()
            .map(|rows| TimeSeries::new(n, rows, rate, seed))
            .collect::<Result<_>>()?,
        template: *template,
        n_windows,
    })
}

/// Ground-truth perturbational EC from `n_samples` twin windows.
pub fn ground_truth_ec(
    params: &JrParams,
    sc: &ScMatrix,
    n_samples: usize,
    template: &PerturbationSpec,
    seed: u64,
) -> Result<EcTensor> {
    twin_windows(params, sc, n_samples, template, seed)?.ground_truth()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectome::{random_sc, three_node_sc};
    use rand::Rng;

    #[test]
    fn sigmoid_examples() {
        let p = JrParams::default();
        assert_eq!(sigmoid(p.theta, 0.56, &p), p.zeta_max / 2.0);
        assert!((sigmoid(p.theta + 50.0 / 0.56, 0.56, &p) - p.zeta_max).abs() < 1e-9);
        // zeta_max / (1 + e) with zeta_max = 5.
        let expected = 5.0 / (1.0 + std::f64::consts::E);
        for r in [0.1, 0.56, 3.0] {
            assert!((sigmoid(p.theta - 1.0 / r, r, &p) - expected).abs() < 1e-12);
        }
        assert!((expected - 1.344_707_106_849_975_6).abs() < 1e-12);
    }

    #[test]
    fn coupling_examples() {
        let states = |x3: [f64; 3]| -> Vec<NodeState> {
            x3.iter()
                .map(|v| NodeState {
                    x: [0.0, 0.0, 0.0, *v],
                    y: [0.0; 4],
                })
                .collect()
        };
        let zero = states([0.0; 3]);
        let sc = random_sc(3, 1.0, 1).unwrap().normalize();
        for i in 0..3 {
            assert_eq!(coupling_input(&zero, &sc, i).unwrap(), 0.0);
        }
        let single = ScMatrix::from_rows(3, vec![0., 1., 0., 0., 0., 0., 0., 0., 0.]).unwrap();
        assert_eq!(coupling_input(&states([5., 7., 9.]), &single, 0).unwrap(), 7.0);
        let split = ScMatrix::from_rows(3, vec![0., 0.25, 0.75, 0., 0., 0., 0., 0., 0.]).unwrap();
        assert_eq!(coupling_input(&states([0., 4., 8.]), &split, 0).unwrap(), 7.0);
        assert!(coupling_input(&zero[..2], &sc, 0).is_err());
    }

    #[test]
    fn euler_from_origin() {
        let p = JrParams::default();
        let sc = ScMatrix::zeros(1);
        let next = euler_step(&[NodeState::default()], &p, &sc, &[0.0], None).unwrap();
        let s = next[0];
        assert_eq!(s.x, [0.0; 4]);
        let s0 = |r: f64| 5.0 / (1.0 + (r * 6.0_f64).exp());
        let (a, b, ab) = (100.0, 50.0, 50.0);
        assert!((s.y[0] - 3.25 * a * s0(0.56) * 1e-3).abs() < 1e-15);
        assert!((s.y[1] - 3.25 * a * s0(0.56) * 1e-3).abs() < 1e-15);
        assert!((s.y[2] - 22.0 * b * s0(0.56) * 1e-3).abs() < 1e-15);
        assert!((s.y[3] - 3.25 * ab * s0(0.56) * 1e-3).abs() < 1e-15);
    }

    #[test]
    fn zero_dt_keeps_state() {
        let p = JrParams {
            dt: 0.0,
            ..JrParams::default()
        };
        let s = NodeState {
            x: [0.1, -0.2, 0.3, 0.05],
            y: [1.0, 2.0, -1.0, 0.5],
        };
        let next = euler_step(&[s], &p, &ScMatrix::zeros(1), &[1.0], None).unwrap();
        assert_eq!(next[0], s);
    }

    #[test]
    fn perturbation_on_x1_only_touches_its_dependents() {
        let p = JrParams::default();
        let sc = ScMatrix::zeros(1);
        let s = NodeState {
            x: [0.01, 0.02, 0.03, 0.04],
            y: [0.1, 0.2, 0.3, 0.4],
        };
        let kick = PerturbationSpec {
            region: 0,
            ..PerturbationSpec::default()
        };
        let plain = euler_step(&[s], &p, &sc, &[2.0], None).unwrap()[0];
        let kicked = euler_step(&[s], &p, &sc, &[2.0], Some(&kick)).unwrap()[0];
        // x1 jumps by 0.1; y0, y1 and y3 read x1; x0, x2, x3, y2 do not.
        assert!((kicked.x[1] - plain.x[1] - 0.1).abs() < 1e-15);
        assert_eq!(kicked.x[0], plain.x[0]);
        assert_eq!(kicked.x[2], plain.x[2]);
        assert_eq!(kicked.x[3], plain.x[3]);
        assert_eq!(kicked.y[2], plain.y[2]);
        assert_ne!(kicked.y[0], plain.y[0]);
        assert_ne!(kicked.y[1], plain.y[1]);
        assert_ne!(kicked.y[3], plain.y[3]);
    }

    #[test]
    fn divergence_is_reported() {
        let p = JrParams::default();
        let s = NodeState {
            x: [f64::MAX, 0.0, 0.0, 0.0],
            y: [f64::MAX, 0.0, 0.0, 0.0],
        };
        let err = euler_step(&[NodeState::default(), s], &p, &ScMatrix::zeros(2), &[0.0, 0.0], None)
            .unwrap_err();
        assert!(matches!(err, Error::Divergence { node: 1, .. }));
    }

    #[test]
    fn simulator_matches_free_euler_step() {
        let p = JrParams::default();
        let sc = random_sc(4, 0.6, 3).unwrap();
        let norm = sc.normalize();
        let mut sim = Simulator::new(&p, &sc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut states = sim.states().to_vec();
        for _ in 0..200 {
            let noise: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..4.0)).collect();
            states = euler_step(&states, &p, &norm, &noise, None).unwrap();
            sim.step(&noise).unwrap();
        }
        for (a, b) in states.iter().zip(sim.states()) {
            for k in 0..4 {
                assert!((a.x[k] - b.x[k]).abs() < 1e-12);
                assert!((a.y[k] - b.y[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn simulate_length_and_determinism() {
        let p = JrParams {
            burn_in: 0.5,
            ..JrParams::default()
        };
        let sc = three_node_sc();
        let a = simulate(&p, &sc, 10 * 57, 11, &[]).unwrap();
        assert_eq!(a.n_steps(), 57);
        assert_eq!(a.rate, 100.0);
        let b = simulate(&p, &sc, 10 * 57, 11, &[]).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = simulate(&p, &sc, 10 * 57, 12, &[]).unwrap();
        assert_ne!(a, c);
        assert!(simulate(&p, &sc, 9, 0, &[]).is_err());
    }

    #[test]
    fn twin_baseline_is_replayable() {
        let p = JrParams {
            burn_in: 0.5,
            ..JrParams::default()
        };
        let sc = three_node_sc();
        let tmpl = PerturbationSpec::default();
        let twins = twin_windows(&p, &sc, 4, &tmpl, 9).unwrap();
        let again = twin_windows(&p, &sc, 4, &PerturbationSpec { magnitude: 0.0, ..tmpl }, 9)
            .unwrap();
        assert_eq!(twins.baseline, again.baseline);
        for pert in &again.perturbed {
            assert_eq!(pert, &again.baseline);
        }
        // Perturbed windows agree with the baseline up to the kick.
        for (s, pert) in twins.perturbed.iter().enumerate() {
            for w in 0..4 {
                for r in 0..75 {
                    assert_eq!(pert.row(w * 100 + r), twins.baseline.row(w * 100 + r));
                }
                let kick = w * 100 + 75;
                let jump = pert.row(kick)[s] - twins.baseline.row(kick)[s];
                assert!((jump - p.c2 * 0.1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_kick_gives_zero_ec() {
        let p = JrParams {
            burn_in: 0.5,
            ..JrParams::default()
        };
        let tmpl = PerturbationSpec {
            magnitude: 0.0,
            ..PerturbationSpec::default()
        };
        let ec = ground_truth_ec(&p, &three_node_sc(), 3, &tmpl, 1).unwrap();
        assert_eq!(ec.horizon(), 24);
        assert!(ec.values().iter().all(|v| *v == 0.0));
        assert!(ground_truth_ec(&p, &three_node_sc(), 0, &tmpl, 1).is_err());
    }

    #[test]
    fn small_kicks_respond_linearly() {
        let p = JrParams {
            burn_in: 1.0,
            ..JrParams::default()
        };
        let sc = three_node_sc();
        let tmpl = PerturbationSpec {
            magnitude: 0.01,
            ..PerturbationSpec::default()
        };
        let one = ground_truth_ec(&p, &sc, 20, &tmpl, 4).unwrap();
        let two = ground_truth_ec(&p, &sc, 20, &PerturbationSpec { magnitude: 0.02, ..tmpl }, 4).unwrap();
        let num: f64 = one.values().iter().zip(two.values()).map(|(a, b)| (b - 2.0 * a).abs()).sum();
        let den: f64 = two.values().iter().map(|b| b.abs()).sum();
        assert!(num / den < 0.15, "relative nonlinearity {}", num / den);
    }

    #[test]
    fn isolated_region_neither_sends_nor_receives() {
        let p = JrParams {
            burn_in: 0.5,
            ..JrParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..4 {
            let n = rng.random_range(3..6);
            let base = random_sc(n, 0.6, rng.random()).unwrap();
            let iso = rng.random_range(0..n);
            let mut w = base.weights().to_vec();
            for k in 0..n {
                w[iso * n + k] = 0.0;
                w[k * n + iso] = 0.0;
            }
            let sc = ScMatrix::from_rows(n, w).unwrap();
            let ec = ground_truth_ec(&p, &sc, 3, &PerturbationSpec::default(), 2).unwrap();
            for t in 0..ec.horizon() {
                for k in (0..n).filter(|k| *k != iso) {
                    assert_eq!(ec.get(t, iso, k), 0.0);
                    assert_eq!(ec.get(t, k, iso), 0.0);
                }
            }
        }
    }

    #[test]
    fn bad_perturbation_rejected() {
        let p = JrParams::default();
        let sc = three_node_sc();
        let tmpl = PerturbationSpec {
            region: 5,
            ..PerturbationSpec::default()
        };
        assert!(simulate(&p, &sc, 100, 0, &[tmpl]).is_err());
        let tmpl = PerturbationSpec {
            step_index: 0,
            ..PerturbationSpec::default()
        };
        assert!(twin_windows(&p, &sc, 1, &tmpl, 0).is_err());
    }

    #[test]
    fn params_roundtrip_through_entries() {
        let mut p = JrParams::default();
        p.set("alpha", "0.5").unwrap();
        p.set("anti_alias", "true").unwrap();
        let mut q = JrParams::default();
        for (k, v) in p.entries() {
            q.set(k, &v).unwrap();
        }
        assert_eq!(p, q);
        assert!(q.set("nope", "1").is_err());
        assert!(q.set("alpha", "x").is_err());
    }
}
