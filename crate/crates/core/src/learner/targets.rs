//! Double-Q bootstrap targets, kept free of network code so they can be
//! checked against hand-computed numbers.

use crate::error::{Error, Result};
use crate::exploration::argmax_available;
use crate::nn::Matrix;
use crate::Scalar;

/// Greedy available action for every row of `q` (`rows x n_actions`).
/// Rows with no available action fall back to action 0; such rows only occur
/// in padding, where the bootstrap is masked out anyway.
pub fn greedy_actions<S: Scalar>(q: &Matrix<S>, available: &[bool]) -> Result<Vec<usize>> {
    let a = q.cols();
    if available.len() != q.len() {
        return Err(Error::dim("greedy actions", q.shape(), (available.len() / a.max(1), a)));
    }
    (0..q.rows())
        .map(|r| {
            let avail = &available[r * a..(r + 1) * a];
            if !avail.iter().any(|&x| x) {
                return Ok(0);
            }
            let vals: Vec<f64> = q.row(r).iter().map(|v| v.as_f64()).collect();
            argmax_available(&vals, avail)
        })
        .collect()
}

/// `y_b = r_b + gamma (1 - terminal_b) Q_tot'(argmax_online, s')`.
///
/// Actions at the next step are chosen greedily from `online_next`; their
/// values are read from `target_next` and combined by `mix`, which receives
/// a `batch x n_agents` matrix of chosen target values and must return one
/// joint value per row.
#[allow(clippy::too_many_arguments)]
pub fn double_q_targets<S: Scalar>(
    rewards: &[f64],
    terminal: &[bool],
    online_next: &Matrix<S>,
    target_next: &Matrix<S>,
    available_next: &[bool],
    n_agents: usize,
    gamma: f64,
    mix: impl FnOnce(&Matrix<S>) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let batch = rewards.len();
    if terminal.len() != batch
        || online_next.shape() != target_next.shape()
        || online_next.rows() != batch * n_agents
    {
        return Err(Error::dim(
            "double-q targets",
            online_next.shape(),
            (batch * n_agents, target_next.cols()),
        ));
    }
    let chosen = greedy_actions(online_next, available_next)?;
    let mut picked = Matrix::zeros(batch, n_agents);
    for (row, &a) in chosen.iter().enumerate() {
        picked.as_mut_slice()[row] = target_next[(row, a)];
    }
    let joint = mix(&picked)?;
    if joint.len() != batch {
        return Err(Error::Contract("mixer returned wrong number of values".into()));
    }
    Ok((0..batch)
        .map(|b| {
            let cont = if terminal[b] { 0.0 } else { 1.0 };
            rewards[b] + gamma * cont * joint[b]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_rows(m: &Matrix<f64>) -> Result<Vec<f64>> {
        Ok((0..m.rows()).map(|r| m.row(r).iter().sum()).collect())
    }

    #[test]
    fn selects_online_evaluates_target() {
        // one team of two agents, three actions
        let online = Matrix::from_vec(2, 3, vec![0.0, 5.0, 1.0, 2.0, 0.0, 9.0]).unwrap();
        let target = Matrix::from_vec(2, 3, vec![10.0, -1.0, 3.0, 4.0, 6.0, 0.5]).unwrap();
        let avail = vec![true; 6];
        let y = double_q_targets(&[1.0], &[false], &online, &target, &avail, 2, 0.5, sum_rows).unwrap();
        // online picks (1, 2); target values -1 and 0.5
        assert!((y[0] - (1.0 + 0.5 * (-0.5))).abs() < 1e-12);
    }

    #[test]
    fn availability_and_terminal() {
        let online = Matrix::from_vec(2, 2, vec![5.0, 1.0, 0.0, 3.0]).unwrap();
        let target = Matrix::from_vec(2, 2, vec![100.0, 7.0, 2.0, 100.0]).unwrap();
        let avail = vec![false, true, true, false];
        let y = double_q_targets(&[0.0], &[false], &online, &target, &avail, 2, 1.0, sum_rows).unwrap();
        assert_eq!(y, vec![9.0]);
        let y = double_q_targets(&[0.25], &[true], &online, &target, &avail, 2, 1.0, sum_rows).unwrap();
        assert_eq!(y, vec![0.25]);
    }
}
