//! Central finite differences for checking reverse-mode gradients.

use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::error::Result;
use crate::math;

/// `∂f/∂inputs` by central differences with step `h`, one tensor per input.
pub fn central_difference(
    inputs: &[Tensor],
    h: f64,
    mut f: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<Vec<Tensor>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros_like(&inputs[k]);
        for i in 0..inputs[k].len() {
            let x = inputs[k].data()[i];
            work[k].data_mut()[i] = x + h;
            let up = f(&work)?;
            work[k].data_mut()[i] = x - h;
            let down = f(&work)?;
            work[k].data_mut()[i] = x;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let scale = math::norm(a.data()).max(math::norm(b.data()));
    if scale == 0.0 {
        0.0
    } else {
        math::norm(&diff) / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::row(alloc::vec![1.0, -2.0]);
        let g = central_difference(&[x], 1e-5, |v| Ok(v[0].data().iter().map(|a| a * a).sum())).unwrap();
        assert!(relative_error(&g[0], &Tensor::row(alloc::vec![2.0, -4.0])) < 1e-9);
    }
}
