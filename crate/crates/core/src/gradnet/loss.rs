use crate::error::{Error, Result};
use crate::estimators::mmd2_unbiased_unchecked;
use crate::kernels::{accumulate_grad, KernelSpec};
use crate::num::FeatureMatrix;

use super::net::{backward, forward_trace, NetSpec, Trace};

/// Loss value and gradient, parameters ordered critic first then
/// generator (each in [`NetSpec::params`] order).
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

pub(crate) struct Forward {
    pub gen: Option<Trace>,
    pub crit_x: Trace,
    pub crit_y: Trace,
}

pub(crate) fn check_shapes(
    critic: &NetSpec,
    generator: Option<&NetSpec>,
    x: &FeatureMatrix,
    z: &FeatureMatrix,
) -> Result<()> {
    critic.validate()?;
    x.ensure_rows(2)?;
    z.ensure_rows(2)?;
    if x.cols() != critic.input_dim {
        return Err(Error::DimensionMismatch {
            expected: critic.input_dim,
            found: x.cols(),
        });
    }
    let y_dim = match generator {
        Some(g) => {
            g.validate()?;
            if z.cols() != g.input_dim {
                return Err(Error::DimensionMismatch {
                    expected: g.input_dim,
                    found: z.cols(),
                });
            }
            g.output_dim()
        }
        None => z.cols(),
    };
    if y_dim != critic.input_dim {
        return Err(Error::DimensionMismatch {
            expected: critic.input_dim,
            found: y_dim,
        });
    }
    Ok(())
}

pub(crate) fn forward(critic: &NetSpec, generator: Option<&NetSpec>, x: &FeatureMatrix, z: &FeatureMatrix) -> Forward {
    let gen = generator.map(|g| forward_trace(g, z.as_slice(), z.rows()));
    let y = gen.as_ref().map_or(z.as_slice(), Trace::output);
    Forward {
        crit_x: forward_trace(critic, x.as_slice(), x.rows()),
        crit_y: forward_trace(critic, y, z.rows()),
        gen,
    }
}

fn features(trace: &Trace, dim: usize) -> Result<FeatureMatrix> {
    FeatureMatrix::new(trace.rows, dim, trace.output().to_vec())
}

/// Unbiased squared MMD between critic features of `x` and of the
/// generated sample, with its gradient in all network parameters.
///
/// `z` is passed through `generator` when one is given; otherwise it is
/// used directly as the second sample. ReLU derivatives at zero are zero.
pub fn mmd_loss_grad(
    critic: &NetSpec,
    generator: Option<&NetSpec>,
    spec: &KernelSpec,
    x: &FeatureMatrix,
    z: &FeatureMatrix,
) -> Result<LossGrad> {
    check_shapes(critic, generator, x, z)?;
    spec.validate()?;
    let d = critic.output_dim();
    if let Some(req) = spec.required_dim() {
        if req != d {
            return Err(Error::DimensionMismatch { expected: req, found: d });
        }
    }
    let fw = forward(critic, generator, x, z);
    let fx = features(&fw.crit_x, d)?;
    let fy = features(&fw.crit_y, d)?;
    let loss = mmd2_unbiased_unchecked(spec, &fx, &fy);

    let (m, n) = (fx.rows(), fy.rows());
    let mut gx = vec![0.0; m * d];
    let mut gy = vec![0.0; n * d];
    let mut gi = vec![0.0; d];
    let mut gj = vec![0.0; d];
    within_grads(spec, &fx, 2.0 / (m * (m - 1)) as f64, &mut gx, &mut gi, &mut gj)?;
    within_grads(spec, &fy, 2.0 / (n * (n - 1)) as f64, &mut gy, &mut gi, &mut gj)?;
    let wc = -2.0 / (m * n) as f64;
    for i in 0..m {
        let (gxi, _) = gx[i * d..].split_at_mut(d);
        for j in 0..n {
            accumulate_grad(spec, fx.row(i), fy.row(j), wc, gxi, &mut gy[j * d..(j + 1) * d])?;
        }
    }

    let nc = critic.num_params();
    let mut grad = vec![0.0; nc + generator.map_or(0, NetSpec::num_params)];
    let (gc, gg) = grad.split_at_mut(nc);
    backward(critic, &fw.crit_x, gx, gc);
    let gy_in = backward(critic, &fw.crit_y, gy, gc);
    if let (Some(g), Some(trace)) = (generator, fw.gen.as_ref()) {
        backward(g, trace, gy_in, gg);
    }
    Ok(LossGrad { loss, grad })
}

fn within_grads(
    spec: &KernelSpec,
    f: &FeatureMatrix,
    w: f64,
    g: &mut [f64],
    gi: &mut [f64],
    gj: &mut [f64],
) -> Result<()> {
    let d = f.cols();
    for i in 0..f.rows() {
        for j in i + 1..f.rows() {
            gi.fill(0.0);
            gj.fill(0.0);
            accumulate_grad(spec, f.row(i), f.row(j), w, gi, gj)?;
            for (o, v) in g[i * d..(i + 1) * d].iter_mut().zip(gi.iter()) {
                *o += v;
            }
            for (o, v) in g[j * d..(j + 1) * d].iter_mut().zip(gj.iter()) {
                *o += v;
            }
        }
    }
    Ok(())
}

/// Loss only, same conventions as [`mmd_loss_grad`].
pub fn mmd_loss(
    critic: &NetSpec,
    generator: Option<&NetSpec>,
    spec: &KernelSpec,
    x: &FeatureMatrix,
    z: &FeatureMatrix,
) -> Result<f64> {
    check_shapes(critic, generator, x, z)?;
    spec.validate()?;
    let fw = forward(critic, generator, x, z);
    let d = critic.output_dim();
    Ok(mmd2_unbiased_unchecked(spec, &features(&fw.crit_x, d)?, &features(&fw.crit_y, d)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradnet::net::Layer;
    use crate::num::RngState;

    fn gauss(rng: &mut RngState, rows: usize, cols: usize, shift: f64) -> FeatureMatrix {
        let v = rng.gaussians(rows * cols).into_iter().map(|g| g + shift).collect();
        FeatureMatrix::new(rows, cols, v).unwrap()
    }

    #[test]
    fn linear_dot_closed_form() {
        // h(x) = W x + b, dot kernel: loss = tr(W A W^T), dL/dW = 2 W A,
        // dL/db = 0, with A the unbiased linear-MMD form of the inputs.
        let mut rng = RngState::new(81, 0);
        let (din, dout) = (3, 2);
        let w = rng.gaussians(din * dout);
        let b = rng.gaussians(dout);
        let critic = NetSpec::new(din, vec![Layer::affine(din, dout, w.clone(), b).unwrap()]).unwrap();
        let x = gauss(&mut rng, 7, din, 0.5);
        let y = gauss(&mut rng, 9, din, 0.0);
        let lg = mmd_loss_grad(&critic, None, &KernelSpec::Dot, &x, &y).unwrap();

        let mut a = vec![0.0; din * din];
        let pair = |s: &FeatureMatrix, t: &FeatureMatrix, same: bool, wt: f64, a: &mut [f64]| {
            for i in 0..s.rows() {
                for j in 0..t.rows() {
                    if same && i == j {
                        continue;
                    }
                    for p in 0..din {
                        for q in 0..din {
                            a[p * din + q] += wt * s.row(i)[p] * t.row(j)[q];
                        }
                    }
                }
            }
        };
        pair(&x, &x, true, 1.0 / 42.0, &mut a);
        pair(&y, &y, true, 1.0 / 72.0, &mut a);
        pair(&x, &y, false, -1.0 / 63.0, &mut a);
        pair(&y, &x, false, -1.0 / 63.0, &mut a);

        let mut loss = 0.0;
        for o in 0..dout {
            for p in 0..din {
                for q in 0..din {
                    loss += w[o * din + p] * a[p * din + q] * w[o * din + q];
                }
            }
        }
        assert!((lg.loss - loss).abs() < 1e-12 * (1.0 + loss.abs()));
        for o in 0..dout {
            for p in 0..din {
                let expect: f64 = (0..din).map(|q| 2.0 * w[o * din + q] * a[q * din + p]).sum();
                let got = lg.grad[o * din + p];
                assert!((got - expect).abs() < 1e-12 * (1.0 + expect.abs()), "{got} vs {expect}");
            }
        }
        for o in 0..dout {
            assert!(lg.grad[din * dout + o].abs() < 1e-13);
        }
    }

    #[test]
    fn dead_output_layer_zeroes_upstream_gradient() {
        let mut rng = RngState::new(82, 0);
        let mut critic = NetSpec::mlp(&[3, 5, 2], &mut rng).unwrap();
        if let Layer::Affine { weight, .. } = &mut critic.layers[2] {
            weight.fill(0.0);
        }
        let x = gauss(&mut rng, 6, 3, 1.0);
        let y = gauss(&mut rng, 6, 3, 0.0);
        let lg = mmd_loss_grad(&critic, None, &KernelSpec::rbf(&[1.0]).unwrap(), &x, &y).unwrap();
        assert!(lg.loss.abs() < 1e-12);
        assert!(lg.grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn row_permutation_invariance() {
        let mut rng = RngState::new(83, 0);
        let critic = NetSpec::mlp(&[3, 6, 2], &mut rng).unwrap();
        let gen = NetSpec::mlp(&[2, 4, 3], &mut rng).unwrap();
        let x = gauss(&mut rng, 8, 3, 0.5);
        let z = gauss(&mut rng, 10, 2, 0.0);
        let spec = KernelSpec::rq(&[0.5, 2.0]).unwrap();
        let a = mmd_loss_grad(&critic, Some(&gen), &spec, &x, &z).unwrap();
        let px: Vec<usize> = rng.permutation(8);
        let pz: Vec<usize> = rng.permutation(10);
        let b = mmd_loss_grad(&critic, Some(&gen), &spec, &x.select_rows(&px), &z.select_rows(&pz)).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        for (u, v) in a.grad.iter().zip(&b.grad) {
            assert!((u - v).abs() < 1e-12 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn doubling_kernel_scale_doubles_everything() {
        let mut rng = RngState::new(84, 0);
        let critic = NetSpec::mlp(&[3, 4, 2], &mut rng).unwrap();
        let x = gauss(&mut rng, 5, 3, 0.3);
        let y = gauss(&mut rng, 6, 3, 0.0);
        let k1 = KernelSpec::poly(1, 0.75, 0.0).unwrap();
        let k2 = KernelSpec::poly(1, 1.5, 0.0).unwrap();
        let a = mmd_loss_grad(&critic, None, &k1, &x, &y).unwrap();
        let b = mmd_loss_grad(&critic, None, &k2, &x, &y).unwrap();
        assert_eq!(b.loss, 2.0 * a.loss);
        for (u, v) in a.grad.iter().zip(&b.grad) {
            assert!((v - 2.0 * u).abs() <= 1e-14 * u.abs().max(1e-300));
        }
    }

    #[test]
    fn shape_errors() {
        let mut rng = RngState::new(85, 0);
        let critic = NetSpec::mlp(&[3, 2], &mut rng).unwrap();
        let x = gauss(&mut rng, 5, 3, 0.0);
        let bad = gauss(&mut rng, 5, 2, 0.0);
        let spec = KernelSpec::Dot;
        assert!(matches!(
            mmd_loss_grad(&critic, None, &spec, &x, &bad),
            Err(Error::DimensionMismatch { .. })
        ));
        let one = gauss(&mut rng, 1, 3, 0.0);
        assert!(mmd_loss_grad(&critic, None, &spec, &one, &x).is_err());
    }

    #[test]
    fn distance_kernel_coincident_features_is_an_error() {
        let critic = NetSpec::new(2, vec![Layer::Relu]).unwrap();
        // Both rows collapse to the origin after the ReLU.
        let x = FeatureMatrix::from_rows(&[[-1.0, -2.0], [-3.0, -0.5]]).unwrap();
        let y = FeatureMatrix::from_rows(&[[1.0, 1.0], [2.0, 0.5]]).unwrap();
        let spec = KernelSpec::distance(1.0, 2).unwrap();
        assert!(matches!(
            mmd_loss_grad(&critic, None, &spec, &x, &y),
            Err(Error::NonDifferentiable(_))
        ));
    }
}
