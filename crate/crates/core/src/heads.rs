//! Output heads and training objectives: next-token cross-entropy, the
//! flow-matching velocity regression, their weighted sum, timestep warping,
//! and condition dropping for guidance.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::FlowHeadVars;
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::schedule::StageKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeadError {
    #[error("no supervised text positions")]
    NoSupervision,
    #[error("{positions} loss positions but {targets} targets")]
    TargetCount { positions: usize, targets: usize },
    #[error("flow head emits {got} channels, latents have {expected}")]
    Channels { expected: usize, got: usize },
    #[error("invalid loss weights {0}:{1}")]
    Weights(f64, f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Mean next-token cross-entropy. `positions[i]` is the hidden row whose
/// logits must predict `targets[i]`.
pub fn lm_loss(
    tape: &mut Tape,
    hidden: Var,
    lm_head: Var,
    positions: &[usize],
    targets: &[usize],
) -> Result<Var, HeadError> {
    if positions.is_empty() {
        return Err(HeadError::NoSupervision);
    }
    if positions.len() != targets.len() {
        return Err(HeadError::TargetCount {
            positions: positions.len(),
            targets: targets.len(),
        });
    }
    let h = tape.gather_rows(hidden, positions)?;
    let logits = tape.matmul(h, lm_head)?;
    Ok(tape.cross_entropy(logits, targets)?)
}

/// Time warp `t = s·u / (1 + (s − 1)·u)`; identity at `s = 1`.
pub fn shift_map(u: f64, shift: f64) -> f64 {
    shift * u / (1.0 + (shift - 1.0) * u)
}

/// Interpolation time for a uniform draw `u`. The warp acts on the noise
/// level `1 − t` (here `t = 1` is clean data), so shifts above 1 spend
/// more samples near pure noise.
pub fn warped_time(u: f64, shift: f64) -> f64 {
    1.0 - shift_map(1.0 - u, shift)
}

/// Sampling grid from noise (`t = 0`) to data (`t = 1`), uniform in `u`.
pub fn time_grid(steps: usize, shift: f64) -> Vec<f64> {
    (0..=steps).map(|k| warped_time(k as f64 / steps as f64, shift)).collect()
}

/// One flow-matching training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f64,
    pub x_t: Tensor,
    pub v_target: Tensor,
}

impl FlowState {
    pub fn new(x0: Tensor, x1: Tensor, t: f64) -> Self {
        assert_eq!(x0.shape(), x1.shape(), "noise and data shapes differ");
        let x_t: Vec<f64> = x0.data().iter().zip(x1.data()).map(|(a, b)| t * b + (1.0 - t) * a).collect();
        let v: Vec<f64> = x0.data().iter().zip(x1.data()).map(|(a, b)| b - a).collect();
        let shape = x1.shape().to_vec();
        FlowState {
            x_t: Tensor::new(shape.clone(), x_t).expect("same shape"),
            v_target: Tensor::new(shape, v).expect("same shape"),
            x0,
            x1,
            t,
        }
    }
}

/// Draws `x0 ~ N(0, I)` and a warped time for the clean latent `x1`.
pub fn make_flow_state<R: Rng + ?Sized>(x1: &Tensor, shift: f64, rng: &mut R) -> FlowState {
    let x0 = Tensor::randn(x1.shape(), 1.0, rng);
    // open interval keeps t away from the exact endpoints
    let u = loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            break u;
        }
    };
    FlowState::new(x0, x1.clone(), warped_time(u, shift))
}

/// Mean squared error between the head's velocity for `hidden_noisy` and the target.
pub fn flow_loss(
    tape: &mut Tape,
    hidden_noisy: Var,
    head: &FlowHeadVars,
    state: &FlowState,
) -> Result<Var, HeadError> {
    let pred = head.apply(tape, hidden_noisy)?;
    let (got, expected) = (tape.value(pred).last_dim(), state.v_target.last_dim());
    if got != expected || tape.value(pred).shape() != state.v_target.shape() {
        return Err(HeadError::Channels { expected, got });
    }
    let target = tape.constant(state.v_target.clone());
    Ok(tape.mse(pred, target)?)
}

/// Relative weights of the understanding (CE) and generation (MSE) terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_u: f64,
    pub lambda_g: f64,
}

impl LossWeights {
    pub fn new(lambda_u: f64, lambda_g: f64) -> Result<Self, HeadError> {
        let ok = lambda_u >= 0.0 && lambda_g >= 0.0 && lambda_u + lambda_g > 0.0;
        if !ok || !lambda_u.is_finite() || !lambda_g.is_finite() {
            return Err(HeadError::Weights(lambda_u, lambda_g));
        }
        Ok(LossWeights { lambda_u, lambda_g })
    }
}

/// `λ_u·l_und + λ_g·l_gen`; an absent term contributes nothing.
pub fn total_loss(l_und: Option<f64>, l_gen: Option<f64>, w: LossWeights) -> f64 {
    l_und.map_or(0.0, |l| w.lambda_u * l) + l_gen.map_or(0.0, |l| w.lambda_g * l)
}

/// Tape version of [`total_loss`]. At least one term must be present.
pub fn total_loss_var(
    tape: &mut Tape,
    l_und: Option<Var>,
    l_gen: Option<Var>,
    w: LossWeights,
) -> Result<Var, HeadError> {
    let u = l_und.map(|l| tape.scale(l, w.lambda_u)).transpose()?;
    let g = l_gen.map(|l| tape.scale(l, w.lambda_g)).transpose()?;
    match (u, g) {
        (Some(u), Some(g)) => Ok(tape.add(u, g)?),
        (Some(x), None) | (None, Some(x)) => Ok(x),
        (None, None) => Err(HeadError::NoSupervision),
    }
}

/// Which conditions a training sample loses for guidance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CondDrop {
    Keep,
    /// Text replaced by the empty condition; visual conditions stay.
    Text,
    /// Text and visual conditions removed.
    All,
}

pub const PT_TEXT_DROP: f64 = 0.10;
pub const FULL_DROP: f64 = 0.05;
pub const TEXT_ONLY_DROP: f64 = 0.05;

/// Pre-training drops the text condition 10% of the time. Later stages drop
/// everything 5% of the time and the text alone another 5%.
pub fn cfg_drop_decision<R: Rng + ?Sized>(stage: StageKind, rng: &mut R) -> CondDrop {
    let u: f64 = rng.random();
    match stage {
        StageKind::Pt => {
            if u < PT_TEXT_DROP {
                CondDrop::Text
            } else {
                CondDrop::Keep
            }
        }
        StageKind::Ct | StageKind::Sft => {
            if u < FULL_DROP {
                CondDrop::All
            } else if u < FULL_DROP + TEXT_ONLY_DROP {
                CondDrop::Text
            } else {
                CondDrop::Keep
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{finite_diff_grad, rel_err, softmax_in_place};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut tape = Tape::new();
        let hidden = tape.constant(Tensor::randn(&[3, 8], 1.0, &mut rng(1)));
        let head = tape.constant(Tensor::zeros(&[8, 520]));
        let l = lm_loss(&mut tape, hidden, head, &[1], &[42]).unwrap();
        assert!((tape.value(l).item() - 520f64.ln()).abs() < 1e-12);
        assert!((520f64.ln() - 6.2538).abs() < 1e-4);
    }

    #[test]
    fn teacher_forced_sum_matches_scalar_oracle() {
        let h = Tensor::randn(&[3, 4], 1.0, &mut rng(2));
        let w = Tensor::randn(&[4, 6], 1.0, &mut rng(3));
        let targets = [2, 5, 0];
        let mut tape = Tape::new();
        let (hv, wv) = (tape.constant(h.clone()), tape.constant(w.clone()));
        let l = lm_loss(&mut tape, hv, wv, &[0, 1, 2], &targets).unwrap();
        let mut total = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let mut logits: Vec<f64> = (0..6).map(|v| (0..4).map(|c| h.row(i)[c] * w.data()[c * 6 + v]).sum()).collect();
            softmax_in_place(&mut logits);
            total -= logits[y].ln();
        }
        assert!((tape.value(l).item() - total / 3.0).abs() < 1e-12);
    }

    #[test]
    fn unsupervised_rows_are_ignored() {
        let mut h = Tensor::randn(&[4, 3], 1.0, &mut rng(4));
        let w = Tensor::randn(&[3, 5], 1.0, &mut rng(5));
        let eval = |h: &Tensor| {
            let mut tape = Tape::new();
            let (hv, wv) = (tape.constant(h.clone()), tape.constant(w.clone()));
            let l = lm_loss(&mut tape, hv, wv, &[1, 3], &[4, 0]).unwrap();
            tape.value(l).item()
        };
        let before = eval(&h);
        h.data_mut()[0] += 3.0;
        h.data_mut()[6] -= 2.0;
        assert_eq!(eval(&h), before);
        let mut tape = Tape::new();
        let (hv, wv) = (tape.constant(h.clone()), tape.constant(w.clone()));
        assert_eq!(lm_loss(&mut tape, hv, wv, &[], &[]), Err(HeadError::NoSupervision));
        assert!(matches!(lm_loss(&mut tape, hv, wv, &[1], &[]), Err(HeadError::TargetCount { .. })));
    }

    #[test]
    fn shift_examples_and_scan() {
        assert_eq!(shift_map(0.37, 1.0), 0.37);
        assert!((shift_map(0.5, 4.0) - 0.8).abs() < 1e-15);
        for shift in [1.0, 2.0, 4.0] {
            assert_eq!(shift_map(0.0, shift), 0.0);
            assert_eq!(shift_map(1.0, shift), 1.0);
            let mut prev = 0.0;
            for k in 1..=10_000 {
                let t = shift_map(k as f64 / 10_000.0, shift);
                assert!(t > prev);
                prev = t;
            }
        }
        // warped time leans toward noise for shift > 1
        assert!(warped_time(0.5, 4.0) < 0.5);
        assert_eq!(warped_time(0.3, 1.0), 1.0 - shift_map(0.7, 1.0));
        let grid = time_grid(20, 4.0);
        assert_eq!((grid[0], grid[20]), (0.0, 1.0));
        assert!(grid.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn flow_state_identity_and_limits() {
        let x1 = Tensor::randn(&[5, 3], 1.0, &mut rng(6));
        let x0 = Tensor::randn(&[5, 3], 1.0, &mut rng(7));
        for t in [0.0, 0.25, 0.9, 1.0] {
            let s = FlowState::new(x0.clone(), x1.clone(), t);
            for i in 0..15 {
                assert_eq!(s.x_t.data()[i], t * x1.data()[i] + (1.0 - t) * x0.data()[i]);
                assert_eq!(s.v_target.data()[i], x1.data()[i] - x0.data()[i]);
            }
        }
        assert_eq!(FlowState::new(x0.clone(), x1.clone(), 1.0).x_t, x1);
        assert_eq!(FlowState::new(x0.clone(), x1.clone(), 0.0).x_t, x0);
        let s = make_flow_state(&x1, 4.0, &mut rng(8));
        assert!(s.t > 0.0 && s.t < 1.0);
        assert!(s.x_t.max_abs_diff(&FlowState::new(s.x0.clone(), x1.clone(), s.t).x_t) == 0.0);
    }

    #[test]
    fn noise_moments() {
        let x1 = Tensor::zeros(&[100_000]);
        let s = make_flow_state(&x1, 1.0, &mut rng(9));
        let n = s.x0.len() as f64;
        let mean = s.x0.sum() / n;
        let var = s.x0.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }

    fn toy_head(tape: &mut Tape, d: usize, c: usize, seed: u64) -> FlowHeadVars {
        let mut r = rng(seed);
        let mut p = |shape: &[usize]| tape.leaf(Tensor::randn(shape, 0.5, &mut r), true);
        FlowHeadVars {
            w1: p(&[d, d]),
            b1: p(&[d]),
            w2: p(&[d, d]),
            b2: p(&[d]),
            out: p(&[d, c]),
            out_bias: p(&[c]),
        }
    }

    #[test]
    fn flow_loss_endpoints() {
        let (d, c) = (4, 3);
        let x1 = Tensor::randn(&[2, c], 1.0, &mut rng(10));
        let state = make_flow_state(&x1, 1.0, &mut rng(11));
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::randn(&[2, d], 1.0, &mut rng(12)));
        let mut head = toy_head(&mut tape, d, c, 13);
        let zero = |tape: &mut Tape, shape: &[usize]| tape.constant(Tensor::zeros(shape));
        head.w1 = zero(&mut tape, &[d, d]);
        head.w2 = zero(&mut tape, &[d, d]);
        head.b2 = zero(&mut tape, &[d]);
        head.out_bias = zero(&mut tape, &[c]);
        let l = flow_loss(&mut tape, h, &head, &state).unwrap();
        let expect = state.v_target.norm_sq() / state.v_target.len() as f64;
        assert!((tape.value(l).item() - expect).abs() < 1e-12);
        // a head that outputs exactly the target through its bias
        let mut exact = head;
        let target_rows = state.v_target.row(0).to_vec();
        exact.out_bias = tape.constant(Tensor::new(vec![c], target_rows).unwrap());
        let one_row = FlowState::new(
            Tensor::new(vec![1, c], state.x0.row(0).to_vec()).unwrap(),
            Tensor::new(vec![1, c], state.x1.row(0).to_vec()).unwrap(),
            state.t,
        );
        let h1 = tape.gather_rows(h, &[0]).unwrap();
        let l = flow_loss(&mut tape, h1, &exact, &one_row).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let wrong = FlowState::new(Tensor::zeros(&[2, c + 1]), Tensor::zeros(&[2, c + 1]), 0.5);
        assert!(matches!(flow_loss(&mut tape, h, &head, &wrong), Err(HeadError::Channels { .. })));
    }

    #[test]
    fn flow_loss_gradient_matches_finite_differences() {
        let (d, c) = (5, 3);
        let x1 = Tensor::randn(&[4, c], 1.0, &mut rng(14));
        let state = make_flow_state(&x1, 4.0, &mut rng(15));
        let h = Tensor::randn(&[4, d], 1.0, &mut rng(16));
        let mut tape = Tape::new();
        let hv = tape.leaf(h.clone(), true);
        let head = toy_head(&mut tape, d, c, 17);
        let l = flow_loss(&mut tape, hv, &head, &state).unwrap();
        tape.backward(l).unwrap();
        let analytic = tape.grad(hv).unwrap().clone();
        let numeric = finite_diff_grad(
            |x| {
                let mut t = Tape::new();
                let xv = t.constant(x.clone());
                let head = toy_head(&mut t, d, c, 17);
                let l = flow_loss(&mut t, xv, &head, &state).unwrap();
                t.value(l).item()
            },
            &h,
            1e-5,
        )
        .unwrap();
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!(rel_err(*a, *n, 1e-6) < 1e-6);
        }
    }

    #[test]
    fn total_loss_examples() {
        let pt = LossWeights::new(0.25, 1.0).unwrap();
        let ct = LossWeights::new(0.5, 1.0).unwrap();
        assert_eq!(total_loss(Some(4.0), Some(2.0), pt), 3.0);
        assert_eq!(total_loss(Some(4.0), Some(2.0), ct), 4.0);
        assert_eq!(total_loss(None, Some(2.0), ct), 2.0);
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0).is_err());
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::scalar(4.0));
        let g = tape.constant(Tensor::scalar(2.0));
        let l = total_loss_var(&mut tape, Some(u), Some(g), pt).unwrap();
        assert_eq!(tape.value(l).item(), 3.0);
        assert!(total_loss_var(&mut tape, None, None, pt).is_err());
    }

    #[test]
    fn drop_rates() {
        let n = 100_000;
        let count = |stage, seed| {
            let mut r = rng(seed);
            let mut c = [0usize; 3];
            for _ in 0..n {
                match cfg_drop_decision(stage, &mut r) {
                    CondDrop::Keep => c[0] += 1,
                    CondDrop::Text => c[1] += 1,
                    CondDrop::All => c[2] += 1,
                }
            }
            c.map(|x| x as f64 / n as f64)
        };
        let pt = count(StageKind::Pt, 1);
        assert!((pt[1] - 0.10).abs() < 0.005 && pt[2] == 0.0);
        for stage in [StageKind::Ct, StageKind::Sft] {
            let f = count(stage, 2);
            assert!((f[2] - 0.05).abs() < 0.004, "{f:?}");
            assert!((f[1] - 0.05).abs() < 0.004, "{f:?}");
        }
        assert_eq!(count(StageKind::Ct, 3), count(StageKind::Ct, 3));
    }
}
