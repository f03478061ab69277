/// Default central-difference step for 64-bit evaluation.
pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate of `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error with an absolute floor so that two near-zero gradients
/// compare as equal rather than dividing by zero.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matrix::sigmoid;

    #[test]
    fn quadratic_and_sigmoid() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], FD_STEP);
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|x| sigmoid(x[0]), &[0.0], FD_STEP);
        assert!((g[0] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn leaves_input_untouched_per_coordinate() {
        let g = finite_diff_grad(|x| x[0] * x[1] + x[2], &[2.0, -1.0, 5.0], FD_STEP);
        assert!((g[0] + 1.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
        assert!((g[2] - 1.0).abs() < 1e-8);
    }
}
