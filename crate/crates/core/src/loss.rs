//! Joint objective: cross-entropy plus a weighted cosine N-pair metric loss
//! and an anchor-separation penalty.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{Scalar, Tape, Var};

/// Scalar values of one loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_npair: f64,
    pub l_penalty: f64,
    pub l_total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    /// `|l_total - (l_ce + lambda (l_npair + l_penalty))|`.
    pub fn identity_gap(&self) -> f64 {
        (self.l_total - (self.l_ce + self.lambda * (self.l_npair + self.l_penalty))).abs()
    }

    pub fn is_finite(&self) -> bool {
        [self.l_ce, self.l_npair, self.l_penalty, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Softmax cross-entropy over feature/anchor cosine similarities.
pub fn npair_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, anchors: Var, labels: &[usize]) -> Result<Var> {
    let sims = tape.cosine_matrix(x, anchors)?;
    tape.cross_entropy(sims, labels)
}

/// `max(0, mean_{l != k} cos(x_sl, x_sk))`.
pub fn anchor_penalty<T: Scalar>(tape: &mut Tape<T>, anchors: Var) -> Result<Var> {
    let c = tape.cosine_matrix(anchors, anchors)?;
    let mean = tape.mean_off_diag(c)?;
    Ok(tape.relu(mean))
}

/// Mean negative log softmax probability of the true class.
pub fn ce_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Builds `l_ce + lambda (l_npair + l_penalty)` on the tape. With
/// `lambda == 0` the metric terms are left off the graph entirely, so no
/// gradient reaches the anchors.
pub fn joint_loss<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    anchors: Var,
    logits: Var,
    labels: &[usize],
    lambda: f64,
) -> Result<(Var, LossBreakdown)> {
    let ce = ce_loss(tape, logits, labels)?;
    let l_ce = tape.value(ce).item().as_f64();
    if lambda == 0.0 {
        return Ok((
            ce,
            LossBreakdown {
                l_ce,
                l_total: l_ce,
                ..LossBreakdown::default()
            },
        ));
    }
    let np = npair_loss(tape, x, anchors, labels)?;
    let pen = anchor_penalty(tape, anchors)?;
    let metric = tape.add(np, pen)?;
    let metric = tape.scale(metric, T::of(lambda));
    let total = tape.add(ce, metric)?;
    Ok((
        total,
        LossBreakdown {
            l_ce,
            l_npair: tape.value(np).item().as_f64(),
            l_penalty: tape.value(pen).item().as_f64(),
            l_total: tape.value(total).item().as_f64(),
            lambda,
        },
    ))
}
