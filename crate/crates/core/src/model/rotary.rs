use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::{Element, PairRotation, Tape, Var};

/// Rotation angles `[positions, head_dim / 2]` for 2-D rotary encoding: the
/// first half of the pairs turns with the row coordinate, the second half
/// with the column coordinate, each over a geometric frequency ladder.
pub fn rotary_angles(positions: &[(i32, i32)], head_dim: usize, theta: f64) -> Result<Vec<f64>> {
    if head_dim == 0 || head_dim % 4 != 0 {
        return Err(Error::InvalidArgument(format!("rotary head dim {head_dim} is not a multiple of 4")));
    }
    let quarter = head_dim / 4;
    let freqs: Vec<f64> = (0..quarter).map(|k| theta.powf(-(k as f64) / quarter as f64)).collect();
    let mut out = Vec::with_capacity(positions.len() * 2 * quarter);
    for &(i, j) in positions {
        out.extend(freqs.iter().map(|f| i as f64 * f));
        out.extend(freqs.iter().map(|f| j as f64 * f));
    }
    Ok(out)
}

pub fn rotary_table<E: Element>(positions: &[(i32, i32)], head_dim: usize, theta: f64) -> Result<Rc<PairRotation<E>>> {
    let angles = rotary_angles(positions, head_dim, theta)?;
    Ok(Rc::new(PairRotation::from_angles(positions.len(), head_dim / 2, &angles)?))
}

/// Rotate `x` (`[.., L, head_dim]`) by the positions of its `L` rows.
pub fn apply_rotary_position<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    positions: &[(i32, i32)],
    theta: f64,
) -> Result<Var> {
    let hd = tape.value(x).last_dim();
    let table = rotary_table(positions, hd, theta)?;
    tape.rotate_pairs(x, table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn origin_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([2, 8], |i| i as f64 - 3.0)).unwrap();
        let y = apply_rotary_position(&mut tape, x, &[(0, 0), (0, 0)], 100.0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn rejects_indivisible_dim() {
        assert!(rotary_angles(&[(1, 1)], 6, 100.0).is_err());
    }
}
