//! Finite-difference directional derivative checks.
//!
//! The central-difference quotient here never touches the tape's backward
//! pass, so it serves as an independent oracle for any scalar loss defined
//! over a flat parameter vector. Both the perturbation and the loss callback
//! work in f64 so the quotient stays far above float32 roundoff even at
//! small steps.

use super::f64ref::Mat;
use super::tensor::Tensor;
use rand::Rng;

/// Result of one directional probe.
#[derive(Debug, Clone)]
pub struct DirectionalCheck {
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compares `sum_i grads[i] . dir[i]` against a central finite difference of
/// `loss_fn` along `dir`. `loss_fn` must re-evaluate the loss from scratch on
/// the perturbed f64 parameters.
pub fn directional_check(
    params: &[Tensor],
    grads: &[Option<&Tensor>],
    dir: &[Tensor],
    epsilon: f64,
    loss_fn: &mut dyn FnMut(&[Mat]) -> f64,
) -> DirectionalCheck {
    assert_eq!(params.len(), dir.len());
    let mut analytic = 0.0f64;
    for (i, d) in dir.iter().enumerate() {
        if let Some(g) = grads[i] {
            assert!(g.same_shape(d));
            for (gv, dv) in g.data.iter().zip(&d.data) {
                analytic += *gv as f64 * *dv as f64;
            }
        }
    }

    let base: Vec<Mat> = params.iter().map(Mat::from_tensor).collect();
    let mut central = |h: f64| -> f64 {
        let shift = |sign: f64| -> Vec<Mat> {
            base.iter()
                .zip(dir)
                .map(|(p, d)| {
                    let mut shifted = p.clone();
                    for (pv, dv) in shifted.data.iter_mut().zip(&d.data) {
                        *pv += sign * h * *dv as f64;
                    }
                    shifted
                })
                .collect()
        };
        let plus = loss_fn(&shift(1.0));
        let minus = loss_fn(&shift(-1.0));
        (plus - minus) / (2.0 * h)
    };
    // Richardson extrapolation cancels the O(h^2) truncation term.
    let numeric = (4.0 * central(epsilon / 2.0) - central(epsilon)) / 3.0;

    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    DirectionalCheck { analytic, numeric, rel_error: (analytic - numeric).abs() / denom }
}

/// A unit-norm random direction matching the parameter shapes.
pub fn random_direction<R: Rng>(params: &[Tensor], rng: &mut R) -> Vec<Tensor> {
    let mut dir: Vec<Tensor> = params.iter().map(|p| Tensor::randn(p.rows, p.cols, 1.0, rng)).collect();
    let norm: f32 = dir
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|x| x * x)
        .sum::<f32>()
        .sqrt()
        .max(1e-12);
    for t in &mut dir {
        for x in &mut t.data {
            *x /= norm;
        }
    }
    dir
}
