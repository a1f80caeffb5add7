//! Alignment losses that pull generated junctions onto shared wall lines.
//!
//! Gaps are nearest-neighbor distances per axis. The real-valued term
//! penalizes the smaller axis gap through a log barrier; the base-k terms
//! re-express the pixel gap as fixed-point digits and penalize the digit sum,
//! which flattens the barrier into wide basins whose floors sit exactly on
//! representable alignment offsets. Training mixes all of them.
//!
//! Discrete choices (nearest partner, axis, digit floors) are made from
//! tensor values; gradients flow through the chosen branch only, and digit
//! floors use a straight-through pass with detached remainders.

use std::rc::Rc;

use gsdiff_graph::{Node, COORD_SCALE};
use gsdiff_tensor::{Real, Tape, Tensor, Tx};
use serde::{Deserialize, Serialize};

use crate::diffusion::{time_weight, NoiseSchedule, SLOTS, STATE_DIM};
use crate::error::{ModelError, ModelResult};

/// Fixed-point layout for one radix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BaseSpec {
    pub radix: usize,
    pub int_digits: usize,
    pub frac_digits: usize,
}

impl BaseSpec {
    pub fn for_radix(radix: usize) -> ModelResult<BaseSpec> {
        let (int_digits, frac_digits) = match radix {
            2 => (8, 4),
            4 => (4, 2),
            8 => (3, 2),
            16 => (2, 1),
            _ => {
                return Err(ModelError::Config(format!(
                    "unsupported alignment radix {}",
                    radix
                )))
            }
        };
        Ok(BaseSpec { radix, int_digits, frac_digits })
    }

    pub fn digit_count(&self) -> usize {
        self.int_digits + self.frac_digits
    }

    /// Largest digit sum: every digit at radix-1.
    pub fn max_digit_l1(&self) -> Real {
        ((self.radix - 1) * self.digit_count()) as Real
    }

    /// Value of digit position `j`, counting from the most significant.
    pub fn place_value(&self, j: usize) -> Real {
        let power = self.int_digits as i32 - 1 - j as i32;
        (self.radix as Real).powi(power)
    }

    /// Largest representable value: all digits maxed.
    pub fn representable_max(&self) -> Real {
        let k = self.radix as Real;
        k.powi(self.int_digits as i32) - k.powi(-(self.frac_digits as i32))
    }
}

/// One term of the mixed loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AlignBase {
    Real,
    Radix(usize),
}

impl AlignBase {
    pub fn default_mix() -> Vec<AlignBase> {
        vec![
            AlignBase::Real,
            AlignBase::Radix(2),
            AlignBase::Radix(4),
            AlignBase::Radix(8),
            AlignBase::Radix(16),
        ]
    }
}

impl TryFrom<String> for AlignBase {
    type Error = String;
    fn try_from(s: String) -> Result<AlignBase, String> {
        match s.as_str() {
            "real" => Ok(AlignBase::Real),
            other => match other.parse::<usize>() {
                Ok(k @ (2 | 4 | 8 | 16)) => Ok(AlignBase::Radix(k)),
                _ => Err(format!("unknown alignment base {:?}", s)),
            },
        }
    }
}

impl From<AlignBase> for String {
    fn from(b: AlignBase) -> String {
        match b {
            AlignBase::Real => "real".into(),
            AlignBase::Radix(k) => k.to_string(),
        }
    }
}

/// Nearest other value along one axis: returns (partner index, |v_i - v_j|),
/// ties broken by the lowest index.
fn nearest_partner(vals: &[Real], i: usize) -> (usize, Real) {
    let mut best_j = usize::MAX;
    let mut best = Real::INFINITY;
    for (j, &v) in vals.iter().enumerate() {
        if j == i {
            continue;
        }
        let gap = (vals[i] - v).abs();
        if gap < best {
            best = gap;
            best_j = j;
        }
    }
    (best_j, best)
}

/// Minimum absolute difference between `coords[i]` and any other entry.
pub fn min_gap(coords: &[Real], i: usize) -> ModelResult<Real> {
    if coords.len() < 2 {
        return Err(ModelError::DegenerateInput(
            "min_gap needs at least two coordinates".into(),
        ));
    }
    if i >= coords.len() {
        return Err(ModelError::Config(format!(
            "index {} out of {} coordinates",
            i,
            coords.len()
        )));
    }
    Ok(nearest_partner(coords, i).1)
}

const SATURATION: Real = 0.999;

/// Log barrier -d log(1 - x/d), saturated at 0.999 d so it stays finite.
pub fn g_penalty(x: Real, d: Real) -> Real {
    debug_assert!(x >= 0.0 && d > 0.0);
    let xt = x.min(SATURATION * d);
    -d * (1.0 - xt / d).ln()
}

/// Fixed-point digit expansion, most significant first.
pub fn base_digits(x: Real, spec: &BaseSpec) -> ModelResult<Vec<Real>> {
    let k = spec.radix as Real;
    if x < 0.0 || x >= k.powi(spec.int_digits as i32) {
        return Err(ModelError::Config(format!(
            "{} not representable with {} base-{} integer digits",
            x, spec.int_digits, spec.radix
        )));
    }
    let mut rem = x;
    let mut digits = Vec::with_capacity(spec.digit_count());
    for j in 0..spec.digit_count() {
        let place = spec.place_value(j);
        let d = (rem / place).floor().clamp(0.0, k - 1.0);
        digits.push(d);
        rem -= d * place;
    }
    Ok(digits)
}

struct AxisSelection {
    partner_x: Vec<usize>,
    partner_y: Vec<usize>,
    gap_x: Vec<Real>,
    gap_y: Vec<Real>,
    /// true where the x-axis gap is the smaller (ties pick x).
    pick_x: Vec<bool>,
}

fn select_axes(xs: &[Real], ys: &[Real]) -> ModelResult<AxisSelection> {
    let n = xs.len();
    if n < 2 {
        return Err(ModelError::DegenerateInput(
            "alignment needs at least two real nodes".into(),
        ));
    }
    let mut sel = AxisSelection {
        partner_x: Vec::with_capacity(n),
        partner_y: Vec::with_capacity(n),
        gap_x: Vec::with_capacity(n),
        gap_y: Vec::with_capacity(n),
        pick_x: Vec::with_capacity(n),
    };
    for i in 0..n {
        let (jx, gx) = nearest_partner(xs, i);
        let (jy, gy) = nearest_partner(ys, i);
        sel.partner_x.push(jx);
        sel.partner_y.push(jy);
        sel.gap_x.push(gx);
        sel.gap_y.push(gy);
        sel.pick_x.push(gx <= gy);
    }
    Ok(sel)
}

/// Per-node and per-base alignment diagnostics; gaps in pixel units.
#[derive(Clone, Debug)]
pub struct AlignmentReport {
    pub gap_x: Vec<Real>,
    pub gap_y: Vec<Real>,
    /// Parallel to `bases`: per-node penalties and their totals.
    pub per_node: Vec<Vec<Real>>,
    pub totals: Vec<(AlignBase, Real)>,
    pub mixed: Real,
}

/// Reference (non-differentiable) evaluation over normalized coordinates.
pub fn alignment_report(
    coords: &[[Real; 2]],
    bases: &[AlignBase],
) -> ModelResult<AlignmentReport> {
    let xs: Vec<Real> = coords.iter().map(|c| c[0]).collect();
    let ys: Vec<Real> = coords.iter().map(|c| c[1]).collect();
    let sel = select_axes(&xs, &ys)?;
    let n = coords.len();

    let mut per_node = Vec::with_capacity(bases.len());
    let mut totals = Vec::with_capacity(bases.len());
    let mut mixed = 0.0;
    for &base in bases {
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let gap_norm = if sel.pick_x[i] { sel.gap_x[i] } else { sel.gap_y[i] };
            let pen = match base {
                AlignBase::Real => g_penalty(gap_norm, 2.0),
                AlignBase::Radix(k) => {
                    let spec = BaseSpec::for_radix(k)?;
                    let gap_px = (gap_norm * COORD_SCALE).min(spec.representable_max());
                    let l1: Real = base_digits(gap_px, &spec)?.iter().sum();
                    g_penalty(l1, spec.max_digit_l1()) / COORD_SCALE
                }
            };
            rows.push(pen);
        }
        let total: Real = rows.iter().sum();
        mixed += total;
        per_node.push(rows);
        totals.push((base, total));
    }
    Ok(AlignmentReport {
        gap_x: sel.gap_x.iter().map(|g| g * COORD_SCALE).collect(),
        gap_y: sel.gap_y.iter().map(|g| g * COORD_SCALE).collect(),
        per_node,
        totals,
        mixed,
    })
}

/// Convenience: the mixed total of [`alignment_report`].
pub fn mix_alg_value(coords: &[[Real; 2]], bases: &[AlignBase]) -> ModelResult<Real> {
    Ok(alignment_report(coords, bases)?.mixed)
}

fn g_penalty_tape(tape: &mut Tape, x: Tx, d: Real) -> Tx {
    let xt = tape.clamp_max(x, SATURATION * d);
    let scaled = tape.mul_scalar(xt, -1.0 / d);
    let inner = tape.add_scalar(scaled, 1.0);
    let logv = tape.log(inner);
    tape.mul_scalar(logv, -d)
}

/// Digit L1 sum of `x` (a `[n,1]` column, already clipped into range) with
/// the straight-through gradient sum_j 1/place_j.
fn digit_l1_tape(tape: &mut Tape, x: Tx, spec: &BaseSpec) -> ModelResult<Tx> {
    let n = tape.value(x).shape()[0];
    let k = spec.radix as Real;
    let mut rem = x;
    let mut l1: Option<Tx> = None;
    for j in 0..spec.digit_count() {
        let place = spec.place_value(j);
        let quotient = tape.mul_scalar(rem, 1.0 / place);
        let digit_vals: Vec<Real> = tape
            .value(quotient)
            .data()
            .iter()
            .map(|&q| q.floor().clamp(0.0, k - 1.0))
            .collect();
        let digit_const = tape.constant(Tensor::from_vec(&[n, 1], digit_vals.clone())?);
        let digit = tape.detach_value_keep_gradient(digit_const, quotient)?;
        l1 = Some(match l1 {
            Some(acc) => tape.add(acc, digit)?,
            None => digit,
        });
        // remainder subtracts the detached digit value: no gradient feedback
        let consumed: Vec<Real> = digit_vals.iter().map(|d| d * place).collect();
        let consumed = tape.constant(Tensor::from_vec(&[n, 1], consumed)?);
        rem = tape.sub(rem, consumed)?;
    }
    Ok(l1.expect("digit_count >= 1"))
}

/// Differentiable mixed alignment loss over a `[n, 2]` coordinate block.
pub fn mix_alg_tape(tape: &mut Tape, coords: Tx, bases: &[AlignBase]) -> ModelResult<Tx> {
    let shape = tape.value(coords).shape().to_vec();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(ModelError::Config(format!(
            "coordinates must be [n, 2], got {:?}",
            shape
        )));
    }
    let n = shape[0];
    let data = tape.value(coords).data().to_vec();
    let xs: Vec<Real> = (0..n).map(|i| data[2 * i]).collect();
    let ys: Vec<Real> = (0..n).map(|i| data[2 * i + 1]).collect();
    let sel = select_axes(&xs, &ys)?;

    let x_col = tape.slice(coords, 1, 0, 1)?;
    let y_col = tape.slice(coords, 1, 1, 1)?;
    let x_partner = tape.gather_rows(x_col, Rc::new(sel.partner_x.clone()))?;
    let y_partner = tape.gather_rows(y_col, Rc::new(sel.partner_y.clone()))?;
    let dx_raw = tape.sub(x_col, x_partner)?;
    let dx = tape.abs(dx_raw);
    let dy_raw = tape.sub(y_col, y_partner)?;
    let dy = tape.abs(dy_raw);

    let mask_x: Vec<Real> = sel.pick_x.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
    let mask_y: Vec<Real> = sel.pick_x.iter().map(|&p| if p { 0.0 } else { 1.0 }).collect();
    let mask_x = tape.constant(Tensor::from_vec(&[n, 1], mask_x)?);
    let mask_y = tape.constant(Tensor::from_vec(&[n, 1], mask_y)?);
    let gx = tape.mul(dx, mask_x)?;
    let gy = tape.mul(dy, mask_y)?;
    let gap_norm = tape.add(gx, gy)?;

    let mut total: Option<Tx> = None;
    for &base in bases {
        let term = match base {
            AlignBase::Real => {
                let pen = g_penalty_tape(tape, gap_norm, 2.0);
                tape.sum_all(pen)
            }
            AlignBase::Radix(k) => {
                let spec = BaseSpec::for_radix(k)?;
                let gap_px = tape.mul_scalar(gap_norm, COORD_SCALE);
                let clipped = tape.clamp_max(gap_px, spec.representable_max());
                let l1 = digit_l1_tape(tape, clipped, &spec)?;
                let pen = g_penalty_tape(tape, l1, spec.max_digit_l1());
                let summed = tape.sum_all(pen);
                tape.mul_scalar(summed, 1.0 / COORD_SCALE)
            }
        };
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| ModelError::Config("no alignment bases enabled".into()))
}

/// Row indices (within one 53-slot sample) of non-background nodes.
pub fn real_indices(nodes: &[Node]) -> Vec<usize> {
    nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| !n.is_background())
        .map(|(i, _)| i)
        .collect()
}

/// Training loss parts for one batch step.
pub struct NodeLossBreakdown {
    pub total: Tx,
    pub mse: Real,
    pub align: Real,
}

/// MSE over every state entry plus the batch-mean time-weighted mixed
/// alignment loss of the implied V̂_0 coordinates.
///
/// `eps_hat` is the model output `[batch*SLOTS, 10]`; `eps` and `v_t` are the
/// matching targets and noisy states; `real_rows` lists, per sample, the
/// global row indices of its ground-truth real nodes.
#[allow(clippy::too_many_arguments)]
pub fn node_loss_tape(
    tape: &mut Tape,
    eps_hat: Tx,
    eps: &Tensor,
    v_t: &Tensor,
    real_rows: &[Vec<usize>],
    timesteps: &[usize],
    sched: &NoiseSchedule,
    bases: &[AlignBase],
    mse_rows: Option<&[bool]>,
) -> ModelResult<NodeLossBreakdown> {
    let batch = timesteps.len();
    let rows = batch * SLOTS;
    if tape.value(eps_hat).shape() != [rows, STATE_DIM]
        || eps.shape() != [rows, STATE_DIM]
        || v_t.shape() != [rows, STATE_DIM]
        || real_rows.len() != batch
    {
        return Err(ModelError::Config("node_loss shapes inconsistent".into()));
    }

    let eps_const = tape.constant(eps.clone());
    let mse = match mse_rows {
        None => tape.mse(eps_hat, eps_const)?,
        Some(flags) => {
            if flags.len() != rows {
                return Err(ModelError::Config(format!(
                    "MSE row mask has {} flags for {} rows",
                    flags.len(),
                    rows
                )));
            }
            let kept = flags.iter().filter(|&&f| f).count();
            if kept == 0 {
                return Err(ModelError::Config(
                    "MSE row mask excludes every row".into(),
                ));
            }
            let mut weights = Vec::with_capacity(rows * STATE_DIM);
            for &f in flags {
                let w = if f { 1.0 } else { 0.0 };
                weights.extend(std::iter::repeat(w).take(STATE_DIM));
            }
            let mask = tape.constant(Tensor::from_vec(&[rows, STATE_DIM], weights)?);
            let diff = tape.sub(eps_hat, eps_const)?;
            let sq = tape.mul(diff, diff)?;
            let masked = tape.mul(sq, mask)?;
            let summed = tape.sum_all(masked);
            tape.mul_scalar(summed, 1.0 / (kept * STATE_DIM) as Real)
        }
    };

    if bases.is_empty() {
        return Ok(NodeLossBreakdown {
            total: mse,
            mse: tape.value(mse).item()?,
            align: 0.0,
        });
    }

    let mut align_acc: Option<Tx> = None;
    for (b, sample_rows) in real_rows.iter().enumerate() {
        if sample_rows.is_empty() {
            continue;
        }
        let abar = sched.alpha_bar_at(timesteps[b])?;
        // V̂_0 coords for this sample's real rows, from eps_hat and constants.
        let gathered = tape.gather_rows(eps_hat, Rc::new(sample_rows.clone()))?;
        let eps_coords = tape.slice(gathered, 1, 0, 2)?;
        let scaled_eps = tape.mul_scalar(eps_coords, -(1.0 - abar).sqrt() / abar.sqrt());
        let mut vt_part = Vec::with_capacity(sample_rows.len() * 2);
        for &r in sample_rows {
            vt_part.push(v_t.data()[r * STATE_DIM] / abar.sqrt());
            vt_part.push(v_t.data()[r * STATE_DIM + 1] / abar.sqrt());
        }
        let vt_part = tape.constant(Tensor::from_vec(&[sample_rows.len(), 2], vt_part)?);
        let coords_hat = tape.add(scaled_eps, vt_part)?;

        let mix = mix_alg_tape(tape, coords_hat, bases)?;
        let weighted = tape.mul_scalar(mix, time_weight(timesteps[b], sched)?);
        align_acc = Some(match align_acc {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    let align = match align_acc {
        Some(acc) => tape.mul_scalar(acc, 1.0 / batch as Real),
        // Every sample was pure background; nothing to align.
        None => tape.constant(Tensor::scalar(0.0)),
    };

    let total = tape.add(mse, align)?;
    Ok(NodeLossBreakdown {
        total,
        mse: tape.value(mse).item()?,
        align: tape.value(align).item()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use gsdiff_tensor::rng::rng_for;
    use rand::Rng;

    const LN2: Real = std::f64::consts::LN_2;

    #[test]
    fn base_specs_match_frozen_layouts() {
        let rows = [(2, 12, 12.0), (4, 6, 18.0), (8, 5, 35.0), (16, 3, 45.0)];
        for (k, s, d) in rows {
            let spec = BaseSpec::for_radix(k).unwrap();
            assert_eq!(spec.digit_count(), s, "radix {}", k);
            assert_eq!(spec.max_digit_l1(), d, "radix {}", k);
        }
        assert!(BaseSpec::for_radix(3).is_err());
    }

    #[test]
    fn min_gap_matches_hand_values() {
        assert_eq!(min_gap(&[0.0, 0.0, 0.5], 2).unwrap(), 0.5);
        assert_eq!(min_gap(&[0.0, 0.0, 0.5], 0).unwrap(), 0.0);
        assert!((min_gap(&[0.1, 0.35, 0.9], 1).unwrap() - 0.25).abs() < 1e-15);
        assert!(min_gap(&[1.0], 0).is_err());
    }

    #[test]
    fn barrier_penalty_closed_forms() {
        assert_eq!(g_penalty(0.0, 2.0), 0.0);
        assert!((g_penalty(1.0, 2.0) - 2.0 * LN2).abs() < 1e-12);
        let saturated = g_penalty(2.0, 2.0);
        assert!((saturated - (-2.0 * (0.001 as Real).ln())).abs() < 1e-9);
        assert!(saturated.is_finite());
    }

    #[test]
    fn digits_match_hand_conversions() {
        let b2 = BaseSpec::for_radix(2).unwrap();
        assert_eq!(
            base_digits(131.0, &b2).unwrap(),
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(base_digits(0.0, &b2).unwrap(), vec![0.0; 12]);
        assert!(base_digits(256.0, &b2).is_err());
        assert!(base_digits(-0.5, &b2).is_err());

        let b4 = BaseSpec::for_radix(4).unwrap();
        assert_eq!(base_digits(10.5, &b4).unwrap(), vec![0.0, 0.0, 2.0, 2.0, 2.0, 0.0]);
    }

    #[test]
    fn max_values_fill_every_digit() {
        for k in [2usize, 4, 8, 16] {
            let spec = BaseSpec::for_radix(k).unwrap();
            let digits = base_digits(spec.representable_max(), &spec).unwrap();
            assert!(digits.iter().all(|&d| d == (k - 1) as Real), "radix {}", k);
            let l1: Real = digits.iter().sum();
            assert_eq!(l1, spec.max_digit_l1());
        }
    }

    fn coords_tape(coords: &[[Real; 2]]) -> (Tape, Tx) {
        let mut tape = Tape::new();
        let data: Vec<Real> = coords.iter().flat_map(|c| [c[0], c[1]]).collect();
        let t = tape.leaf(Tensor::from_vec(&[coords.len(), 2], data).unwrap());
        (tape, t)
    }

    #[test]
    fn diagonal_pair_hits_closed_form_real_loss() {
        let coords = [[-0.5, -0.5], [0.5, 0.5]];
        let report = alignment_report(&coords, &[AlignBase::Real]).unwrap();
        assert!((report.mixed - 4.0 * LN2).abs() < 1e-12);

        let (mut tape, t) = coords_tape(&coords);
        let loss = mix_alg_tape(&mut tape, t, &[AlignBase::Real]).unwrap();
        assert!((tape.value(loss).item().unwrap() - 4.0 * LN2).abs() < 1e-12);
    }

    #[test]
    fn one_pixel_gap_binary_penalty() {
        // Nodes one pixel apart in x, far apart in y: both contribute
        // g(1, 12)/128 to the binary term.
        let px = 1.0 / COORD_SCALE;
        let coords = [[0.0, -0.5], [px, 0.5]];
        let per_node = (12.0 as Real) * ((12.0 as Real) / 11.0).ln() / 128.0;
        let report = alignment_report(&coords, &[AlignBase::Radix(2)]).unwrap();
        assert!((report.mixed - 2.0 * per_node).abs() < 1e-12);
        assert!((per_node - 0.00815729).abs() < 1e-7);

        let (mut tape, t) = coords_tape(&coords);
        let loss = mix_alg_tape(&mut tape, t, &[AlignBase::Radix(2)]).unwrap();
        assert!((tape.value(loss).item().unwrap() - 2.0 * per_node).abs() < 1e-12);
    }

    #[test]
    fn grid_snapped_layout_scores_exact_zero() {
        // Rectangle corners share both axes pairwise.
        let coords = [[-0.5, -0.25], [0.25, -0.25], [-0.5, 0.75], [0.25, 0.75]];
        let bases = AlignBase::default_mix();
        assert_eq!(mix_alg_value(&coords, &bases).unwrap(), 0.0);
        let (mut tape, t) = coords_tape(&coords);
        let loss = mix_alg_tape(&mut tape, t, &bases).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn tape_and_reference_agree_on_random_configs() {
        let bases = AlignBase::default_mix();
        let mut rng = rng_for(0xA11C, 0);
        for _ in 0..50 {
            let n = rng.random_range(2..12);
            let coords: Vec<[Real; 2]> = (0..n)
                .map(|_| [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)])
                .collect();
            let reference = mix_alg_value(&coords, &bases).unwrap();
            let (mut tape, t) = coords_tape(&coords);
            let loss = mix_alg_tape(&mut tape, t, &bases).unwrap();
            let taped = tape.value(loss).item().unwrap();
            assert!(
                (reference - taped).abs() <= 1e-12 * reference.abs().max(1.0),
                "{} vs {}",
                reference,
                taped
            );
        }
    }

    #[test]
    fn translation_leaves_losses_unchanged() {
        let bases = AlignBase::default_mix();
        let mut rng = rng_for(0xA11C, 1);
        for _ in 0..20 {
            let n = rng.random_range(2..10);
            let coords: Vec<[Real; 2]> = (0..n)
                .map(|_| [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])
                .collect();
            let shift = rng.random_range(-0.3..0.3);
            let shifted: Vec<[Real; 2]> = coords.iter().map(|c| [c[0] + shift, c[1]]).collect();
            let a = mix_alg_value(&coords, &bases).unwrap();
            let b = mix_alg_value(&shifted, &bases).unwrap();
            assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }

    #[test]
    fn straight_through_digit_gradient_sums_inverse_places() {
        // d(sum of digits)/dx = sum_j 1/place_j away from digit boundaries.
        for k in [2usize, 4, 8, 16] {
            let spec = BaseSpec::for_radix(k).unwrap();
            let expected: Real = (0..spec.digit_count())
                .map(|j| 1.0 / spec.place_value(j))
                .sum();
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_vec(&[1, 1], vec![37.3]).unwrap());
            let l1 = digit_l1_tape(&mut tape, x, &spec).unwrap();
            let sum = tape.sum_all(l1);
            tape.backward(sum).unwrap();
            let grad = tape.grad(x).unwrap().data()[0];
            assert!(
                (grad - expected).abs() < 1e-9,
                "radix {}: {} vs {}",
                k,
                grad,
                expected
            );
        }
    }

    #[test]
    fn real_loss_gradient_matches_central_difference() {
        let bases = [AlignBase::Real];
        let mut rng = rng_for(0xA11C, 2);
        let mut checked = 0;
        'configs: while checked < 10 {
            let n = rng.random_range(3..8);
            let coords: Vec<[Real; 2]> = (0..n)
                .map(|_| [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)])
                .collect();
            // Keep away from ties and saturation so the loss is smooth here.
            let xs: Vec<Real> = coords.iter().map(|c| c[0]).collect();
            let ys: Vec<Real> = coords.iter().map(|c| c[1]).collect();
            let sel = select_axes(&xs, &ys).unwrap();
            for i in 0..n {
                let margin = (sel.gap_x[i] - sel.gap_y[i]).abs();
                let gap = sel.gap_x[i].min(sel.gap_y[i]);
                if margin < 1e-3 || gap < 1e-3 || gap > 1.8 {
                    continue 'configs;
                }
            }

            let (mut tape, t) = coords_tape(&coords);
            let loss = mix_alg_tape(&mut tape, t, &bases).unwrap();
            tape.backward(loss).unwrap();
            let grad = tape.grad(t).unwrap().clone();

            let h = 1e-6;
            for i in 0..n {
                for axis in 0..2 {
                    let mut plus = coords.clone();
                    plus[i][axis] += h;
                    let mut minus = coords.clone();
                    minus[i][axis] -= h;
                    let fd = (mix_alg_value(&plus, &bases).unwrap()
                        - mix_alg_value(&minus, &bases).unwrap())
                        / (2.0 * h);
                    let an = grad.at(&[i, axis]);
                    let denom = fd.abs().max(an.abs()).max(1e-8);
                    assert!(
                        ((fd - an) / denom).abs() < 1e-4,
                        "node {} axis {}: fd {} vs {}",
                        i,
                        axis,
                        fd,
                        an
                    );
                }
            }
            checked += 1;
        }
    }

    #[test]
    fn node_loss_combines_mse_and_weighted_alignment() {
        use crate::diffusion::{forward_sample, make_schedule, nodes_to_state};
        let sched = make_schedule(10, 0.02, 0.3).unwrap();
        let mut nodes = vec![Node::background(); SLOTS];
        nodes[0] = Node::real([-0.25, -0.25]);
        nodes[1] = Node::real([0.5, 0.5]);
        nodes[2] = Node::real([-0.25, 0.5]);
        let v0 = nodes_to_state(&nodes).unwrap();
        let mut rng = rng_for(0xA11C, 3);
        let eps = gsdiff_tensor::rng::fill_normal(&mut rng, &[SLOTS, STATE_DIM], 0.0, 1.0);
        let t = 4;
        let v_t = forward_sample(&v0, t, &eps, &sched).unwrap();

        // A perfect denoiser yields zero MSE; V̂_0 equals the grid-aligned
        // truth so the alignment term is exactly zero as well.
        let mut tape = Tape::new();
        let eps_hat = tape.leaf(eps.clone());
        let parts = node_loss_tape(
            &mut tape,
            eps_hat,
            &eps,
            &v_t,
            &[real_indices(&nodes)],
            &[t],
            &sched,
            &AlignBase::default_mix(),
            None,
        )
        .unwrap();
        assert_eq!(parts.mse, 0.0);
        assert!(parts.align.abs() < 1e-9, "align {}", parts.align);

        // A biased denoiser: MSE term is exactly 1, total = 1 + align part.
        let mut tape = Tape::new();
        let mut biased = eps.clone();
        for v in biased.data_mut() {
            *v += 1.0;
        }
        let eps_hat = tape.leaf(biased.clone());
        let parts = node_loss_tape(
            &mut tape,
            eps_hat,
            &eps,
            &v_t,
            &[real_indices(&nodes)],
            &[t],
            &sched,
            &AlignBase::default_mix(),
            None,
        )
        .unwrap();
        assert!((parts.mse - 1.0).abs() < 1e-12);
        let total = tape.value(parts.total).item().unwrap();
        assert!((total - (parts.mse + parts.align)).abs() < 1e-12);
    }

    #[test]
    fn loss_respects_row_mask_and_empty_base_list() {
        use crate::diffusion::{forward_sample, make_schedule, nodes_to_state};
        let sched = make_schedule(10, 0.02, 0.3).unwrap();
        let mut nodes = vec![Node::background(); SLOTS];
        nodes[0] = Node::real([-0.25, -0.25]);
        nodes[1] = Node::real([0.5, 0.5]);
        nodes[2] = Node::real([-0.3, 0.5]);
        let v0 = nodes_to_state(&nodes).unwrap();
        let mut rng = rng_for(0xB0B, 1);
        let eps = gsdiff_tensor::rng::fill_normal(&mut rng, &[SLOTS, STATE_DIM], 0.0, 1.0);
        let t = 6;
        let v_t = forward_sample(&v0, t, &eps, &sched).unwrap();
        let mut biased = eps.clone();
        for (i, v) in biased.data_mut().iter_mut().enumerate() {
            *v += (i % 5) as Real * 0.1;
        }

        // No bases: the loss is the MSE term alone.
        let mut tape = Tape::new();
        let eps_hat = tape.leaf(biased.clone());
        let parts = node_loss_tape(
            &mut tape,
            eps_hat,
            &eps,
            &v_t,
            &[real_indices(&nodes)],
            &[t],
            &sched,
            &[],
            None,
        )
        .unwrap();
        assert_eq!(parts.align, 0.0);
        let total = tape.value(parts.total).item().unwrap();
        assert_eq!(total, parts.mse);

        // Row mask: only the three real rows count, and the result matches a
        // hand computation over those rows.
        let mut flags = vec![false; SLOTS];
        for r in 0..3 {
            flags[r] = true;
        }
        let mut tape = Tape::new();
        let eps_hat = tape.leaf(biased.clone());
        let parts = node_loss_tape(
            &mut tape,
            eps_hat,
            &eps,
            &v_t,
            &[real_indices(&nodes)],
            &[t],
            &sched,
            &[],
            Some(&flags),
        )
        .unwrap();
        let mut expect = 0.0;
        for r in 0..3 {
            for k in 0..STATE_DIM {
                let d = biased.data()[r * STATE_DIM + k] - eps.data()[r * STATE_DIM + k];
                expect += d * d;
            }
        }
        expect /= (3 * STATE_DIM) as Real;
        assert!((parts.mse - expect).abs() < 1e-12);

        // A mask that keeps nothing is a configuration error.
        let mut tape = Tape::new();
        let eps_hat = tape.leaf(biased);
        assert!(node_loss_tape(
            &mut tape,
            eps_hat,
            &eps,
            &v_t,
            &[real_indices(&nodes)],
            &[t],
            &sched,
            &[],
            Some(&vec![false; SLOTS]),
        )
        .is_err());
    }

    #[test]
    fn loss_requires_two_real_nodes() {
        let coords = [[0.1, 0.2]];
        assert!(matches!(
            alignment_report(&coords, &[AlignBase::Real]),
            Err(ModelError::DegenerateInput(_))
        ));
        let (mut tape, t) = coords_tape(&coords);
        assert!(mix_alg_tape(&mut tape, t, &[AlignBase::Real]).is_err());
    }
}
