//! Reconstruction plus masked prediction L1 loss.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Sizes shared by the reconstruction and prediction terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossLayout {
    pub windows: usize,
    pub n_t: usize,
    pub n_s: usize,
    pub horizon: usize,
    pub channels: usize,
}

/// `α/(n_t n_s) Σ |P′v_enc − u_in| + 1/(n_t′ n_s) Σ_present |P′v_dec − u_out|`,
/// averaged over windows.
///
/// `recon` is laid out `(window, t, node, channel)`; `pred`, `u_out` are
/// `(window, step, node, channel)`; `present` is `(window, step)`. Targets on
/// absent steps are ignored and may hold anything.
#[allow(clippy::too_many_arguments)]
pub fn composite_loss(
    tape: &mut Tape,
    layout: LossLayout,
    recon: Var,
    u_in: &[f64],
    pred: Var,
    u_out: &[f64],
    present: &[bool],
    alpha: f64,
) -> Result<Var> {
    let LossLayout {
        windows,
        n_t,
        n_s,
        horizon,
        channels,
    } = layout;
    let in_len = windows * n_t * n_s * channels;
    let out_len = windows * horizon * n_s * channels;
    if u_in.len() != in_len || tape.value(recon).len() != in_len {
        return Err(Error::shape(
            "loss reconstruction",
            &[in_len],
            &[u_in.len(), tape.value(recon).len()],
        ));
    }
    if u_out.len() != out_len || tape.value(pred).len() != out_len {
        return Err(Error::shape(
            "loss prediction",
            &[out_len],
            &[u_out.len(), tape.value(pred).len()],
        ));
    }
    if present.len() != windows * horizon {
        return Err(Error::shape("loss mask", &[windows * horizon], &[present.len()]));
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Param(format!("alpha must be non-negative, got {alpha}")));
    }

    let frame = n_s * channels;
    let mut target = Vec::with_capacity(out_len);
    let mut weight = Vec::with_capacity(out_len);
    for w in 0..windows {
        let steps = &present[w * horizon..(w + 1) * horizon];
        let kept = steps.iter().filter(|p| **p).count();
        if kept == 0 {
            return Err(Error::Data(format!(
                "window {w} has no observed output frame to supervise"
            )));
        }
        let scale = 1.0 / (kept * n_s * windows) as f64;
        for (k, &p) in steps.iter().enumerate() {
            let at = (w * horizon + k) * frame;
            if p {
                target.extend_from_slice(&u_out[at..at + frame]);
                weight.extend(std::iter::repeat_n(scale, frame));
            } else {
                target.extend(std::iter::repeat_n(0.0, frame));
                weight.extend(std::iter::repeat_n(0.0, frame));
            }
        }
    }
    if target.iter().any(|v| !v.is_finite()) || u_in.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss targets".into()));
    }
    let shape = tape.shape(pred).to_vec();
    let target = tape.constant(shape.clone(), target)?;
    let weight = tape.constant(shape, weight)?;
    let diff = tape.sub(pred, target)?;
    let diff = tape.abs(diff);
    let diff = tape.mul(diff, weight)?;
    let prediction = tape.sum(diff);
    if alpha == 0.0 {
        return Ok(prediction);
    }

    let shape = tape.shape(recon).to_vec();
    let u_in = tape.constant(shape, u_in.to_vec())?;
    let diff = tape.sub(recon, u_in)?;
    let diff = tape.abs(diff);
    let total = tape.sum(diff);
    let reconstruction = tape.scale(total, alpha / (windows * n_t * n_s) as f64);
    tape.add(reconstruction, prediction)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(alpha: f64, recon: f64, pred: f64, present: bool) -> Result<f64> {
        let mut tape = Tape::new();
        let r = tape.constant(vec![1, 1], vec![recon]).unwrap();
        let p = tape.constant(vec![1, 1], vec![pred]).unwrap();
        let layout = LossLayout {
            windows: 1,
            n_t: 1,
            n_s: 1,
            horizon: 1,
            channels: 1,
        };
        let l = composite_loss(&mut tape, layout, r, &[0.0], p, &[0.0], &[present], alpha)?;
        Ok(tape.value(l)[0])
    }

    #[test]
    fn hand_evaluated_example() {
        assert_eq!(eval(0.5, 2.0, 1.0, true).unwrap(), 2.0);
        assert_eq!(eval(0.0, 2.0, 1.0, true).unwrap(), 1.0);
        assert_eq!(eval(0.5, 0.0, 0.0, true).unwrap(), 0.0);
    }

    #[test]
    fn all_masked_output_is_an_error() {
        assert!(matches!(eval(0.5, 2.0, 1.0, false), Err(Error::Data(_))));
    }
}
