//! Gradient verification by central finite differences.

use super::tape::{NodeId, Tape, TapeError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Outcome of one finite-difference sweep over the tape's parameters.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked_entries: usize,
    pub tolerance: f64,
    /// (param node, flat entry index, analytic, numeric) of the worst entry.
    pub worst: Option<(NodeId, usize, f64, f64)>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Entries per parameter above which a seeded random subsample is checked.
pub const FD_ENTRY_CAP: usize = 48;

/// Compare `backward` against central differences on every parameter entry
/// (or a seeded subsample above [`FD_ENTRY_CAP`] per parameter).
///
/// Failures are reported, never raised; tape errors during replay do propagate.
pub fn finite_difference_check(
    tape: &mut Tape,
    loss: NodeId,
    step: f64,
    tolerance: f64,
    seed: u64,
) -> Result<FdReport, TapeError> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let grads = tape.backward(loss)?;
    let params = tape.param_ids().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport {
        max_rel_err: 0.0,
        checked_entries: 0,
        tolerance,
        worst: None,
    };
    // dominant gradient magnitude across all parameters
    let global_scale = params
        .iter()
        .map(|&p| {
            grads
                .get(p)
                .data()
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()))
        })
        .fold(0.0f64, f64::max);
    for &p in &params {
        let analytic = grads.get(p);
        // entries far below the dominant gradients carry mostly
        // finite-difference noise (rounding plus bilinear-cell kinks), so
        // the relative error is measured against a significance floor
        let scale = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (0.1 * scale).max(0.02 * global_scale).max(1e-8);
        let n = tape.value(p).numel();
        let mut entries: Vec<usize> = (0..n).collect();
        if n > FD_ENTRY_CAP {
            entries.shuffle(&mut rng);
            entries.truncate(FD_ENTRY_CAP);
            entries.sort_unstable();
        }
        for &e in &entries {
            let original = tape.value(p).data()[e];
            let eval_at = |tape: &mut Tape, v: f64| -> Result<f64, TapeError> {
                let mut t = tape.value(p).clone();
                t.data_mut()[e] = v;
                tape.set_leaf(p, t);
                tape.replay()?;
                Ok(tape.value(loss).item())
            };
            let plus = eval_at(tape, original + step)?;
            let minus = eval_at(tape, original - step)?;
            // restore
            let mut t = tape.value(p).clone();
            t.data_mut()[e] = original;
            tape.set_leaf(p, t);
            tape.replay()?;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[e];
            if a.abs() < 1e-12 && numeric.abs() < 1e-12 {
                report.checked_entries += 1;
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked_entries += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((p, e, a, numeric));
            }
        }
    }
    Ok(report)
}
