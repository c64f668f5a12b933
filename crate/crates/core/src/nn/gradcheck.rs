use crate::error::{Error, Result};

/// Compares an analytic gradient against central differences.
///
/// `with_grad` returns the value and analytic gradient at a point, `value`
/// returns only the value. The result is the largest coordinate-wise
/// `|analytic - numeric| / max(floor, |analytic| + |numeric|)` where the floor
/// is `1e-6 * max(1, |f|)`.
pub fn grad_check<G, F>(mut with_grad: G, mut value: F, point: &[f64], eps: f64) -> Result<f64>
where
    G: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    F: FnMut(&[f64]) -> Result<f64>,
{
    let (f0, analytic) = with_grad(point)?;
    // differences below this are dominated by rounding in the loss value
    let floor = 1e-6 * f0.abs().max(1.0);
    if analytic.len() != point.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient of length {} at a point of length {}",
            analytic.len(),
            point.len()
        )));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let mut at = |offset: f64| -> Result<f64> {
            x[i] = point[i] + offset;
            let v = value(&x);
            x[i] = point[i];
            match v {
                Ok(v) if v.is_finite() => Ok(v),
                Ok(_) => Err(Error::NonFiniteEvaluation { coordinate: i }),
                Err(e) => Err(e),
            }
        };
        let (up, down) = (at(eps)?, at(-eps)?);
        if !a.is_finite() {
            return Err(Error::NonFiniteEvaluation { coordinate: i });
        }
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(floor));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function() {
        let w = [1.5, -2.0, 0.25];
        let f = |x: &[f64]| -> f64 { x.iter().zip(&w).map(|(a, b)| a * b).sum() };
        let err = grad_check(|x| Ok((f(x), w.to_vec())), |x| Ok(f(x)), &[0.3, 1.0, -4.0], 1e-5).unwrap();
        assert!(err < 1e-10);
    }

    #[test]
    fn sigmoid_at_zero() {
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let err = grad_check(|x| Ok((s(x[0]), vec![0.25])), |x| Ok(s(x[0])), &[0.0], 1e-5).unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn non_finite_is_reported() {
        let r = grad_check(
            |x| Ok((x[0].ln(), vec![1.0 / x[0]])),
            |x| Ok(x[0].ln()),
            &[0.0],
            1e-3,
        );
        assert_eq!(r, Err(Error::NonFiniteEvaluation { coordinate: 0 }));
    }
}
