//! Analytic per-sample FLOPs, counting a multiply-add as 2 FLOPs and
//! dropping lower-order terms (activations, softmax, layer norm, bias adds).

use crate::error::{D2Error, Result};

use super::{Arch, ProbeSpec, Readout};

/// FLOPs for one sample under the given readout. `steps` is the trajectory
/// length, except for `Readout::Window`, where it is the window length the
/// expert actually consumes. `dim` is the hidden dimension `D`.
pub fn flops_estimate(
    spec: &ProbeSpec,
    steps: usize,
    dim: usize,
    readout: Readout,
) -> Result<f64> {
    let s = steps as f64;
    let d = dim as f64;
    let k = spec.k as f64;
    let d_a = spec.d_a as f64;
    let d_p = spec.d_p as f64;
    let d_h = spec.d_h as f64;
    let invalid = || {
        Err(D2Error::Invalid(format!(
            "no FLOPs model for arch {} with readout {}",
            spec.arch.name(),
            readout.name()
        )))
    };
    match spec.arch {
        Arch::Lp => match readout {
            Readout::LastStep => Ok(2.0 * d),
            Readout::Mean => Ok(s * d + 2.0 * d),
            Readout::MajorityVote => Ok(2.0 * s * d),
            _ => invalid(),
        },
        Arch::Mlp => match readout {
            Readout::LastStep => Ok(2.0 * d * k),
            Readout::Mean => Ok(s * d + 2.0 * d * k),
            Readout::MajorityVote => Ok(2.0 * s * d * k),
            // expert over a window: pool the window, one MLP forward
            Readout::Window => Ok(s * d + 2.0 * d * k),
            _ => invalid(),
        },
        Arch::TimeAttn => match readout {
            // attention scoring + weighted sum + classifier head
            Readout::FullSequence | Readout::Window => {
                Ok(2.0 * s * d * d_a + 2.0 * s * d + 2.0 * d * k)
            }
            _ => invalid(),
        },
        Arch::Lstm => match readout {
            Readout::FullSequence | Readout::Window => {
                Ok(s * 2.0 * d * d_p + s * (8.0 * d_h * (d_p + d_h) + 16.0 * d_h * d_h))
            }
            _ => invalid(),
        },
    }
}
