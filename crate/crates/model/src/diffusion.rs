//! DDPM machinery for the 53-slot junction state: noise schedule, forward
//! corruption, reverse steps with optional range clamping, and the
//! time-dependent alignment-loss weight.
//!
//! States are `[slots, 10]` rows in diffusion units: two coordinates already
//! in [-1,1), then 7 semantic bits and the background bit affinely mapped
//! {0,1} -> {-1,+1} so all ten columns share one scale.

use gsdiff_graph::{Node, CATEGORY_COUNT, N_MAX};
use gsdiff_tensor::{Real, Tape, Tensor, Tx};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, ModelResult};

pub const STATE_DIM: usize = 10;
pub const SLOTS: usize = N_MAX;

/// Coordinates clip to [-1, 1 - 2^-20]; the open upper end keeps a
/// denormalized pixel strictly below 256.
pub const COORD_CLIP_MAX: Real = 1.0 - 1.0 / (1u64 << 20) as Real;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    beta: Vec<Real>,
    alpha: Vec<Real>,
    alpha_bar: Vec<Real>,
}

/// Linear beta schedule. With one step the schedule is the single value
/// `beta_min`.
pub fn make_schedule(steps: usize, beta_min: Real, beta_max: Real) -> ModelResult<NoiseSchedule> {
    if steps == 0 {
        return Err(ModelError::Config("schedule needs at least one step".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(ModelError::Config(format!(
            "need 0 < beta_min <= beta_max < 1, got ({}, {})",
            beta_min, beta_max
        )));
    }
    let beta: Vec<Real> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as Real / (steps - 1) as Real
            }
        })
        .collect();
    let alpha: Vec<Real> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for &a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let sched = NoiseSchedule { steps, beta, alpha, alpha_bar };
    sched.check_consistency()?;
    Ok(sched)
}

impl NoiseSchedule {
    /// Default: 100 steps with beta_max raised until the terminal signal
    /// level falls below 5%.
    pub fn desk() -> NoiseSchedule {
        let s = make_schedule(100, 1e-4, 0.06).expect("static parameters");
        debug_assert!(s.alpha_bar_at(s.steps).expect("in range") < 0.05);
        s
    }

    fn check_consistency(&self) -> ModelResult<()> {
        let mut acc = 1.0;
        for t in 0..self.steps {
            acc *= self.alpha[t];
            if (self.alpha_bar[t] - acc).abs() > 1e-12 {
                return Err(ModelError::Config("alpha_bar inconsistent with alpha".into()));
            }
            if t > 0 && self.alpha_bar[t] >= self.alpha_bar[t - 1] {
                return Err(ModelError::Config("alpha_bar must decrease".into()));
            }
        }
        Ok(())
    }

    fn index(&self, t: usize) -> ModelResult<usize> {
        if t == 0 || t > self.steps {
            return Err(ModelError::Config(format!(
                "timestep {} outside 1..={}",
                t, self.steps
            )));
        }
        Ok(t - 1)
    }

    pub fn beta_at(&self, t: usize) -> ModelResult<Real> {
        Ok(self.beta[self.index(t)?])
    }

    pub fn alpha_at(&self, t: usize) -> ModelResult<Real> {
        Ok(self.alpha[self.index(t)?])
    }

    pub fn alpha_bar_at(&self, t: usize) -> ModelResult<Real> {
        Ok(self.alpha_bar[self.index(t)?])
    }

    /// Cumulative signal before step `t`, with the empty product at t=1.
    pub fn alpha_bar_before(&self, t: usize) -> ModelResult<Real> {
        let i = self.index(t)?;
        Ok(if i == 0 { 1.0 } else { self.alpha_bar[i - 1] })
    }
}

fn require_same_shape(op: &str, a: &Tensor, b: &Tensor) -> ModelResult<()> {
    if a.shape() != b.shape() {
        return Err(ModelError::Config(format!(
            "{}: shapes {:?} and {:?} differ",
            op,
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// V_t = sqrt(abar_t) V_0 + sqrt(1 - abar_t) eps.
pub fn forward_sample(
    v0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> ModelResult<Tensor> {
    require_same_shape("forward_sample", v0, eps)?;
    let abar = sched.alpha_bar_at(t)?;
    let (s, n) = (abar.sqrt(), (1.0 - abar).sqrt());
    let mut out = v0.clone();
    out.scale_in_place(s);
    out.add_scaled(n, eps)?;
    Ok(out)
}

/// V̂_0 = (V_t - sqrt(1 - abar_t) eps_theta) / sqrt(abar_t).
pub fn predict_x0(
    v_t: &Tensor,
    t: usize,
    eps_theta: &Tensor,
    sched: &NoiseSchedule,
) -> ModelResult<Tensor> {
    require_same_shape("predict_x0", v_t, eps_theta)?;
    let abar = sched.alpha_bar_at(t)?;
    if abar == 0.0 {
        return Err(ModelError::Config("alpha_bar is zero; x0 unrecoverable".into()));
    }
    let mut out = v_t.clone();
    out.add_scaled(-(1.0 - abar).sqrt(), eps_theta)?;
    out.scale_in_place(1.0 / abar.sqrt());
    Ok(out)
}

/// Tape version of [`predict_x0`] for training-time losses; `v_t` is a
/// constant node, gradients flow through `eps_theta` only.
pub fn predict_x0_tape(
    tape: &mut Tape,
    v_t: Tx,
    t: usize,
    eps_theta: Tx,
    sched: &NoiseSchedule,
) -> ModelResult<Tx> {
    let abar = sched.alpha_bar_at(t)?;
    if abar == 0.0 {
        return Err(ModelError::Config("alpha_bar is zero; x0 unrecoverable".into()));
    }
    let scaled_eps = tape.mul_scalar(eps_theta, -(1.0 - abar).sqrt() / abar.sqrt());
    let scaled_vt = tape.mul_scalar(v_t, 1.0 / abar.sqrt());
    Ok(tape.add(scaled_vt, scaled_eps)?)
}

/// Clip coordinates and binarize attributes, in diffusion units.
///
/// Natural-unit thresholds 0.5 (semantics) and 0.75 (background) land at 0.0
/// and 0.5 after the {0,1} -> {-1,+1} mapping. Idempotent.
pub fn clamp_x0(v: &Tensor) -> ModelResult<Tensor> {
    let shape = v.shape();
    if shape.len() != 2 || shape[1] != STATE_DIM {
        return Err(ModelError::Config(format!(
            "state must be [slots, {}], got {:?}",
            STATE_DIM,
            shape
        )));
    }
    let mut out = v.clone();
    let rows = shape[0];
    for row in 0..rows {
        let d = &mut out.data_mut()[row * STATE_DIM..(row + 1) * STATE_DIM];
        for c in d.iter_mut().take(2) {
            *c = c.clamp(-1.0, COORD_CLIP_MAX);
        }
        for s in d.iter_mut().take(2 + CATEGORY_COUNT).skip(2) {
            *s = if *s >= 0.0 { 1.0 } else { -1.0 };
        }
        d[9] = if d[9] >= 0.5 { 1.0 } else { -1.0 };
    }
    Ok(out)
}

/// One reverse-diffusion step, optionally clamping the implied V̂_0.
///
/// Gaussian noise with variance beta_t is added for t > 1 and suppressed at
/// the final step. `noise_scale` lets callers disable the stochastic part
/// (pass 0.0) for deterministic chain tests.
pub fn reverse_step<R: Rng>(
    v_t: &Tensor,
    t: usize,
    eps_theta: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut R,
    clamp: bool,
    noise_scale: Real,
) -> ModelResult<Tensor> {
    require_same_shape("reverse_step", v_t, eps_theta)?;
    let beta = sched.beta_at(t)?;
    let alpha = sched.alpha_at(t)?;
    let abar = sched.alpha_bar_at(t)?;
    let abar_prev = sched.alpha_bar_before(t)?;

    let mut mean = if clamp {
        let x0 = clamp_x0(&predict_x0(v_t, t, eps_theta, sched)?)?;
        let w0 = abar_prev.sqrt() * beta / (1.0 - abar);
        let wt = alpha.sqrt() * (1.0 - abar_prev) / (1.0 - abar);
        let mut m = x0;
        m.scale_in_place(w0);
        m.add_scaled(wt, v_t)?;
        m
    } else {
        let mut m = v_t.clone();
        m.add_scaled(-beta / (1.0 - abar).sqrt(), eps_theta)?;
        m.scale_in_place(1.0 / alpha.sqrt());
        m
    };

    if t > 1 && noise_scale != 0.0 {
        let sigma = beta.sqrt() * noise_scale;
        for v in mean.data_mut() {
            let z: Real = StandardNormal.sample(rng);
            *v += sigma * z;
        }
    }
    Ok(mean)
}

/// Alignment-loss weight: 1 - alpha_(T-t), reading alpha_0 as alpha_1.
pub fn time_weight(t: usize, sched: &NoiseSchedule) -> ModelResult<Real> {
    if t > sched.steps {
        return Err(ModelError::Config(format!(
            "timestep {} outside 0..={}",
            t, sched.steps
        )));
    }
    let idx = sched.steps - t;
    let alpha = if idx == 0 { sched.alpha[0] } else { sched.alpha[idx - 1] };
    Ok(1.0 - alpha)
}

/// Node rows in diffusion units, flattened `[N_MAX, 10]`.
pub fn nodes_to_state(nodes: &[Node]) -> ModelResult<Tensor> {
    if nodes.len() != SLOTS {
        return Err(ModelError::Config(format!(
            "need exactly {} node slots, got {}",
            SLOTS,
            nodes.len()
        )));
    }
    let mut data = Vec::with_capacity(SLOTS * STATE_DIM);
    for n in nodes {
        data.push(n.c[0]);
        data.push(n.c[1]);
        for &r in &n.r {
            data.push(2.0 * r - 1.0);
        }
        data.push(2.0 * n.b - 1.0);
    }
    Ok(Tensor::from_vec(&[SLOTS, STATE_DIM], data)?)
}

/// Inverse of [`nodes_to_state`]; attributes return to natural [0,1] units
/// without thresholding.
pub fn state_to_nodes(state: &Tensor) -> ModelResult<Vec<Node>> {
    let shape = state.shape();
    if shape != [SLOTS, STATE_DIM] {
        return Err(ModelError::Config(format!(
            "state must be [{}, {}], got {:?}",
            SLOTS, STATE_DIM, shape
        )));
    }
    let mut nodes = Vec::with_capacity(SLOTS);
    for row in 0..SLOTS {
        let d = &state.data()[row * STATE_DIM..(row + 1) * STATE_DIM];
        let mut r = [0.0; CATEGORY_COUNT];
        for (k, v) in r.iter_mut().enumerate() {
            *v = (d[2 + k] + 1.0) / 2.0;
        }
        nodes.push(Node { c: [d[0], d[1]], r, b: (d[9] + 1.0) / 2.0 });
    }
    Ok(nodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gsdiff_tensor::rng::{fill_normal, rng_for};

    #[test]
    fn schedule_matches_hand_computed_products() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert_eq!(s.beta, vec![0.1, 0.2]);
        assert!((s.alpha_bar_at(1).unwrap() - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar_at(2).unwrap() - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_bar_before(1).unwrap(), 1.0);

        let one = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(one.alpha_bar_at(1).unwrap(), 0.5);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 1.0).is_err());
    }

    #[test]
    fn desk_schedule_ends_nearly_noise() {
        let s = NoiseSchedule::desk();
        let terminal = s.alpha_bar_at(s.steps).unwrap();
        assert!(terminal < 0.05, "terminal signal {}", terminal);
        assert!(terminal > 0.0);
    }

    #[test]
    fn forward_scales_signal_and_noise() {
        // beta = 0.75 gives abar = 0.25 in one step.
        let s = make_schedule(1, 0.75, 0.75).unwrap();
        let v0 = Tensor::full(&[2, 3], 1.0);
        let eps = Tensor::zeros(&[2, 3]);
        let vt = forward_sample(&v0, 1, &eps, &s).unwrap();
        for &v in vt.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        let x0 = predict_x0(&Tensor::full(&[2, 3], 0.5), 1, &eps, &s).unwrap();
        for &v in x0.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_then_predict_is_identity() {
        let s = make_schedule(10, 0.02, 0.3).unwrap();
        let mut rng = rng_for(7, 0);
        let v0 = fill_normal(&mut rng, &[SLOTS, STATE_DIM], 0.0, 1.0);
        for t in 1..=10 {
            let eps = fill_normal(&mut rng, &[SLOTS, STATE_DIM], 0.0, 1.0);
            let vt = forward_sample(&v0, t, &eps, &s).unwrap();
            let back = predict_x0(&vt, t, &eps, &s).unwrap();
            for (a, b) in back.data().iter().zip(v0.data()) {
                assert!((a - b).abs() < 1e-9, "t={} {} vs {}", t, a, b);
            }
        }
    }

    #[test]
    fn timestep_range_is_enforced() {
        let s = make_schedule(5, 0.1, 0.2).unwrap();
        let v = Tensor::zeros(&[1, STATE_DIM]);
        assert!(forward_sample(&v, 0, &v, &s).is_err());
        assert!(forward_sample(&v, 6, &v, &s).is_err());
        let mut rng = rng_for(0, 0);
        assert!(reverse_step(&v, 0, &v, &s, &mut rng, false, 1.0).is_err());
        assert!(reverse_step(&v, 6, &v, &s, &mut rng, false, 1.0).is_err());
    }

    #[test]
    fn clamp_clips_and_binarizes() {
        let mut rows = vec![0.0; STATE_DIM];
        rows[0] = 1.3;
        rows[1] = -2.0;
        rows[2] = 0.2; // natural 0.6 -> 1
        rows[3] = -0.2; // natural 0.4 -> 0
        rows[9] = 0.2; // natural 0.6, below the 0.75 background threshold
        let v = Tensor::from_vec(&[1, STATE_DIM], rows).unwrap();
        let c = clamp_x0(&v).unwrap();
        assert_eq!(c.data()[0], COORD_CLIP_MAX);
        assert_eq!(c.data()[1], -1.0);
        assert_eq!(c.data()[2], 1.0);
        assert_eq!(c.data()[3], -1.0);
        assert_eq!(c.data()[9], -1.0);
    }

    #[test]
    fn clamp_is_idempotent() {
        let mut rng = rng_for(11, 0);
        let v = fill_normal(&mut rng, &[SLOTS, STATE_DIM], 0.0, 2.0);
        let once = clamp_x0(&v).unwrap();
        let twice = clamp_x0(&once).unwrap();
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn final_reverse_step_recovers_x0_from_true_noise() {
        let s = make_schedule(1, 0.3, 0.3).unwrap();
        let mut rng = rng_for(3, 0);
        let v0 = fill_normal(&mut rng, &[4, STATE_DIM], 0.0, 0.3);
        let eps = fill_normal(&mut rng, &[4, STATE_DIM], 0.0, 1.0);
        let vt = forward_sample(&v0, 1, &eps, &s).unwrap();
        let rec = reverse_step(&vt, 1, &eps, &s, &mut rng, false, 1.0).unwrap();
        for (a, b) in rec.data().iter().zip(v0.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn clamped_step_matches_unclamped_when_x0_in_range() {
        let s = make_schedule(8, 0.05, 0.4).unwrap();
        let mut rng = rng_for(5, 0);
        // A state whose implied x0 is already clip- and threshold-stable:
        // build x0 from exact attribute values and in-range coordinates.
        let mut data = Vec::new();
        for i in 0..SLOTS {
            let x = -0.9 + 1.7 * (i as Real / SLOTS as Real);
            data.push(x);
            data.push(-x * 0.5);
            for k in 0..CATEGORY_COUNT {
                data.push(if (i + k) % 2 == 0 { 1.0 } else { -1.0 });
            }
            data.push(if i % 3 == 0 { 1.0 } else { -1.0 });
        }
        let v0 = Tensor::from_vec(&[SLOTS, STATE_DIM], data).unwrap();
        for t in 1..=8 {
            let eps = fill_normal(&mut rng, &[SLOTS, STATE_DIM], 0.0, 1.0);
            let vt = forward_sample(&v0, t, &eps, &s).unwrap();
            let a = reverse_step(&vt, t, &eps, &s, &mut rng_for(9, 1), true, 0.0).unwrap();
            let b = reverse_step(&vt, t, &eps, &s, &mut rng_for(9, 1), false, 0.0).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-9, "t={}", t);
            }
        }
    }

    #[test]
    fn time_weight_uses_reversed_index_with_boundary_convention() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!((time_weight(1, &s).unwrap() - 0.1).abs() < 1e-15);
        assert!((time_weight(2, &s).unwrap() - 0.1).abs() < 1e-15);
        assert!((time_weight(0, &s).unwrap() - 0.2).abs() < 1e-15);
        assert!(time_weight(3, &s).is_err());
    }

    #[test]
    fn reverse_noise_has_documented_mean_and_scale() {
        let s = make_schedule(4, 0.2, 0.2).unwrap();
        let v_t = Tensor::full(&[1, STATE_DIM], 0.4);
        let eps = Tensor::zeros(&[1, STATE_DIM]);
        let mut rng = rng_for(13, 0);
        let mu = reverse_step(&v_t, 3, &eps, &s, &mut rng, false, 0.0).unwrap().data()[0];

        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += reverse_step(&v_t, 3, &eps, &s, &mut rng, false, 1.0).unwrap().data()[0];
        }
        let mean = sum / n as Real;
        let se = s.beta_at(3).unwrap().sqrt() / (n as Real).sqrt();
        assert!(
            (mean - mu).abs() < 3.0 * se,
            "mean {} vs mu {} (3se {})",
            mean,
            mu,
            3.0 * se
        );
    }

    #[test]
    fn oracle_denoiser_chain_recovers_x0() {
        let s = NoiseSchedule::desk();
        let mut rng = rng_for(21, 0);
        let v0 = fill_normal(&mut rng, &[SLOTS, STATE_DIM], 0.0, 0.5);
        let eps_top = fill_normal(&mut rng, &[SLOTS, STATE_DIM], 0.0, 1.0);
        let mut v = forward_sample(&v0, s.steps, &eps_top, &s).unwrap();
        for t in (1..=s.steps).rev() {
            // The oracle reads the exact noise consistent with (v, t, v0).
            let abar = s.alpha_bar_at(t).unwrap();
            let mut eps = v.clone();
            eps.add_scaled(-abar.sqrt(), &v0).unwrap();
            eps.scale_in_place(1.0 / (1.0 - abar).sqrt());
            v = reverse_step(&v, t, &eps, &s, &mut rng, false, 0.0).unwrap();
        }
        for (a, b) in v.data().iter().zip(v0.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn node_state_roundtrip_preserves_values() {
        let mut nodes = vec![Node::background(); SLOTS];
        nodes[0] = Node::real([-0.25, 0.5]);
        nodes[0].set_category(gsdiff_graph::RoomCategory::Kitchen);
        let state = nodes_to_state(&nodes).unwrap();
        assert_eq!(state.at(&[0, 0]), -0.25);
        assert_eq!(state.at(&[0, 4]), 1.0); // kitchen bit in diffusion units
        assert_eq!(state.at(&[0, 9]), -1.0); // real node
        assert_eq!(state.at(&[1, 9]), 1.0); // padding slot
        let back = state_to_nodes(&state).unwrap();
        assert_eq!(back[0].c, [-0.25, 0.5]);
        assert_eq!(back[0].r[2], 1.0);
        assert_eq!(back[0].b, 0.0);
        assert_eq!(back[1].b, 1.0);
    }
}
