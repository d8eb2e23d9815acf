//! Multi-scale pose loss with learnable translation/rotation scales.

use super::OdometryError;
use crate::geometry::{Quaternion, Translation};
use crate::numeric::{Tape, Tensor, Var};

/// Ground-truth quaternion flipped onto the hemisphere nearest the
/// prediction; the chordal distance in the loss sees the double cover.
pub fn sign_matched_gt(q_gt: &Quaternion, predicted: &[f64]) -> Quaternion {
    let dot = q_gt.w * predicted[0]
        + q_gt.x * predicted[1]
        + q_gt.y * predicted[2]
        + q_gt.z * predicted[3];
    if dot < 0.0 {
        q_gt.negated()
    } else {
        *q_gt
    }
}

/// Per-level supervised loss summed with the level weights:
/// `l = |t_gt - t| exp(-s_x) + s_x + |q_gt - q/|q||_2 exp(-s_q) + s_q`,
/// `total = sum_l alpha_l l_l`. `poses` is ordered finest first, matching
/// `alpha`.
pub fn pose_loss(
    tape: &mut Tape,
    poses: &[(Var, Var)],
    q_gt: &Quaternion,
    t_gt: &Translation,
    s_x: Var,
    s_q: Var,
    alpha: &[f64],
) -> Result<Var, OdometryError> {
    assert_eq!(poses.len(), alpha.len(), "one weight per supervised level");
    let neg_sx = tape.neg(s_x)?;
    let exp_sx = tape.exp(neg_sx)?;
    let neg_sq = tape.neg(s_q)?;
    let exp_sq = tape.exp(neg_sq)?;
    let t_gt_c = tape.constant(Tensor::from_vec(vec![t_gt.tx, t_gt.ty, t_gt.tz]))?;

    let mut total: Option<Var> = None;
    for (&(q, t), &a) in poses.iter().zip(alpha) {
        let qn = tape.quat_normalize(q)?;
        let gt = sign_matched_gt(q_gt, tape.value(qn).data());
        let q_gt_c = tape.constant(Tensor::from_vec(vec![gt.w, gt.x, gt.y, gt.z]))?;

        let t_err = tape.sub(t_gt_c, t)?;
        let lt = tape.l1_norm(t_err)?;
        let q_err = tape.sub(q_gt_c, qn)?;
        let lq = tape.l2_norm(q_err)?;

        let lt_term = tape.mul(lt, exp_sx)?;
        let lt_term = tape.add(lt_term, s_x)?;
        let lq_term = tape.mul(lq, exp_sq)?;
        let lq_term = tape.add(lq_term, s_q)?;
        let level = tape.add(lt_term, lq_term)?;
        let weighted = tape.scale(level, a)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    Ok(total.expect("at least one supervised level"))
}

/// Rotation error (degrees, double cover folded) and translation error
/// (meters) of a predicted pose against ground truth.
pub fn pose_error_metrics(
    q_pred: &[f64],
    t_pred: &[f64],
    q_gt: &Quaternion,
    t_gt: &Translation,
) -> (f64, f64) {
    let pred = Quaternion::new(q_pred[0], q_pred[1], q_pred[2], q_pred[3]);
    let n = pred.norm().max(1e-12);
    let pred = Quaternion::new(pred.w / n, pred.x / n, pred.y / n, pred.z / n);
    let rot_deg = pred.angle_to(q_gt).to_degrees();
    let dt = [
        t_pred[0] - t_gt.tx,
        t_pred[1] - t_gt.ty,
        t_pred[2] - t_gt.tz,
    ];
    (rot_deg, crate::geometry::norm3(&dt))
}
