//! Minimal dense-array math with reverse-mode differentiation, a
//! custom-gradient override hook, and a finite-difference oracle.

mod finite_diff;
mod real;
mod tape;
mod tensor;

pub use finite_diff::{finite_diff_grad, group_relative_error, relative_error};
pub use real::Real;
pub use tape::{CustomGradRegion, Gradients, Tape, ValueId};
pub use tensor::Tensor;

#[cfg(test)]
mod composite_tests {
    //! Every exposed primitive, composed into one objective and checked
    //! against central finite differences in double precision.

    use super::*;
    use crate::error::Result;

    /// A deliberately tangled scalar objective touching every tape op.
    fn objective(theta: &[f64]) -> Result<f64> {
        let (tape, loss) = build(theta)?;
        Ok(tape.value(loss).data()[0])
    }

    fn build(theta: &[f64]) -> Result<(Tape<f64>, ValueId)> {
        assert_eq!(theta.len(), 25);
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::new(vec![3, 4], theta[0..12].to_vec())?); // 3x4
        let b = tape.param(Tensor::new(vec![4, 2], theta[12..20].to_vec())?); // 4x2
        let v = tape.param(Tensor::new(vec![1, 2], theta[20..22].to_vec())?); // bias row
        let s = tape.param(Tensor::new(vec![1, 1], theta[22..23].to_vec())?); // scalar
        let g = tape.param(Tensor::new(vec![1, 2], theta[23..25].to_vec())?); // gain row

        let m = tape.matmul(a, b)?; // 3x2
        let m2 = tape.matmul_nt(m, m)?; // 3x3
        let m3 = tape.matmul_tn(m2, m2)?; // 3x3
        let sm = tape.softmax_rows(m3)?;
        let mixed = tape.mul(sm, m3)?;
        let shifted = tape.sub_scalar(mixed, s)?;
        let biased = tape.slice_cols(shifted, 0, 2)?; // 3x2
        let biased = tape.add_row_broadcast(biased, v)?;
        let ln = tape.layer_norm(biased, g, v)?;
        let r = tape.relu(ln)?;
        let t = tape.tanh(r)?;
        let sq = tape.rowwise_dot(t, t)?; // 3x1
        let plus = tape.clamp_min(sq, 0.05)?;
        let root = tape.sqrt(plus)?;
        let scaled = tape.scale(root, 1.7)?;
        let gathered = tape.gather_rows(scaled, &[0, 2, 1, 0, 2, 2])?; // 6x1
        let blocks = tape.sum_row_blocks(gathered, 2)?; // 3x1
        let wide = tape.concat_cols(&[blocks, sq, root])?; // 3x3
        let divided = tape.div(wide, m3)?;
        let col = tape.slice_cols(divided, 1, 1)?; // 3x1
        let spread = tape.mul_col_broadcast(wide, col)?;
        let packed = tape.div_col_broadcast(spread, plus)?;
        let added = tape.add(packed, wide)?;
        let subbed = tape.sub(added, divided)?;
        let flat = tape.reshape(subbed, 1, 9)?;
        let half_a = tape.slice_cols(flat, 0, 4)?;
        let half_b = tape.slice_cols(flat, 4, 4)?;
        let best = tape.min_over(&[half_a, half_b])?;
        let total = tape.sum_all(best)?;
        let avg = tape.mean_all(subbed)?;
        let merged = tape.concat_cols(&[total, avg])?;
        let loss = tape.mean_all(merged)?;
        Ok((tape, loss))
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        // Fixed, well-conditioned point away from relu/min kinks.
        let theta: Vec<f64> = (0..25)
            .map(|i| 0.3 + 0.17 * ((i * 7 + 3) % 11) as f64 * 0.1)
            .collect();

        let base = objective(&theta).unwrap();
        assert!(base.is_finite());

        let fd = finite_diff_grad(objective, &theta, 1e-6).unwrap();

        let (tape, loss) = build(&theta).unwrap();
        let grads = tape.backprop(loss).unwrap();
        let pg = grads.param_grads(&tape);
        let analytic: Vec<f64> = pg.iter().flat_map(|t| t.data().iter().copied()).collect();

        assert_eq!(analytic.len(), fd.len());
        let mut worst = 0.0f64;
        for (i, (&a, &f)) in analytic.iter().zip(&fd).enumerate() {
            let rel = relative_error(a, f, 1e-8);
            if rel > worst {
                worst = rel;
            }
            assert!(rel <= 1e-4, "param {i}: analytic {a} vs fd {f} (rel {rel})");
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }
}
