//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Sized for this crate's needs: small MLPs, bilinear grid sampling, camera
//! projection, and the rendering loss graph. Single-threaded per tape;
//! separate tapes over a shared parameter snapshot may run concurrently.
//! No second-order support: spatial SDF gradients are taken by central
//! differences over first-order forward passes.

mod check;
mod tensor;
mod tape;

pub use check::{finite_difference_check, FdReport, FD_ENTRY_CAP};
pub use tape::{
    laplace_density, laplace_density_dbeta, laplace_density_ds, Gradients, NodeId, Op, Tape,
    TapeError,
};
pub use tensor::{softplus, softplus_prime, Tensor, TensorError};

pub(crate) use tape::matmul_into;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn softplus_at_zero_is_ln_two() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let y = t.push(Op::Softplus, &[x]).unwrap();
        assert_relative_eq!(t.value(y).item(), 0.693147, epsilon = 1e-6);
    }

    #[test]
    fn matmul_identity_preserves_vector() {
        let mut t = Tape::new();
        let eye = t.leaf(
            Tensor::from_rows(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let v = t.leaf(Tensor::from_rows(3, 1, vec![2.5, -1.0, 0.25]).unwrap());
        let y = t.push(Op::Matmul, &[eye, v]).unwrap();
        assert_eq!(t.value(y).data(), &[2.5, -1.0, 0.25]);
    }

    #[test]
    fn bilinear_center_of_2x2_is_mean() {
        let mut t = Tape::new();
        let grid = t.leaf(Tensor::from_rows(4, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let coords = t.leaf(Tensor::from_rows(1, 2, vec![0.5, 0.5]).unwrap());
        let y = t
            .push(Op::BilinearSample { height: 2, width: 2 }, &[grid, coords])
            .unwrap();
        assert_relative_eq!(t.value(y).item(), 1.5, epsilon = 1e-15);
    }

    #[test]
    fn shape_mismatch_reports_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_rows(2, 3, vec![0.0; 6]).unwrap());
        let b = t.leaf(Tensor::from_rows(2, 2, vec![0.0; 4]).unwrap());
        let err = t.push(Op::Add, &[a, b]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn non_finite_output_names_primitive() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1000.0));
        let err = t.push(Op::Exp, &[x]).unwrap_err();
        assert!(err.to_string().contains("exp"), "{err}");
    }

    #[test]
    fn square_loss_gradient_closed_form() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let sq = t.push(Op::Mul, &[x, x]).unwrap();
        let loss = t.push(Op::Sum, &[sq]).unwrap();
        let g = t.backward(loss).unwrap();
        assert_relative_eq!(g.get(x).item(), 6.0, epsilon = 1e-14);
    }

    #[test]
    fn untouched_parameter_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let unused = t.param(Tensor::from_rows(2, 2, vec![1.0; 4]).unwrap());
        let loss = t.push(Op::Sum, &[x]).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(unused).data(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_rows(2, 1, vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            t.backward(x),
            Err(TapeError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn backward_is_linear_in_loss_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w0 = rand_tensor(&mut rng, &[4, 4]);
        let x0 = rand_tensor(&mut rng, &[1, 4]);

        let build = |which: u8| {
            let mut t = Tape::new();
            let w = t.param(w0.clone());
            let x = t.leaf(x0.clone());
            let h = t.push(Op::Matmul, &[x, w]).unwrap();
            let l1 = {
                let s = t.push(Op::Softplus, &[h]).unwrap();
                t.push(Op::Sum, &[s]).unwrap()
            };
            let l2 = {
                let a = t.push(Op::Abs, &[h]).unwrap();
                t.push(Op::Mean, &[a]).unwrap()
            };
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => t.push(Op::Add, &[l1, l2]).unwrap(),
            };
            let g = t.backward(loss).unwrap();
            g.get(w)
        };
        let (g1, g2, gsum) = (build(0), build(1), build(2));
        for i in 0..16 {
            assert_relative_eq!(
                gsum.data()[i],
                g1.data()[i] + g2.data()[i],
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn identical_graphs_are_bitwise_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut t = Tape::new();
            let w = t.param(rand_tensor(&mut rng, &[8, 8]));
            let x = t.leaf(rand_tensor(&mut rng, &[3, 8]));
            let h = t.push(Op::Matmul, &[x, w]).unwrap();
            let s = t.push(Op::Softplus, &[h]).unwrap();
            let loss = t.push(Op::Sum, &[s]).unwrap();
            let g = t.backward(loss).unwrap();
            (t.value(loss).item().to_bits(), g.get(w).data().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1, l2);
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let w = t.param(rand_tensor(&mut rng, &[5, 4]));
        let b = t.param(rand_tensor(&mut rng, &[4]));
        let x = t.leaf(rand_tensor(&mut rng, &[6, 5]));
        let h = t.push(Op::Matmul, &[x, w]).unwrap();
        let hb = t.push(Op::Add, &[h, b]).unwrap();
        let s = t.push(Op::Softplus, &[hb]).unwrap();
        let loss = t.push(Op::Sum, &[s]).unwrap();
        let report = finite_difference_check(&mut t, loss, 1e-5, 1e-6, 0).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_rule_fails_check() {
        // softplus forward with a relu-style backward: detectable corruption.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = Tape::new();
        let w = t.param(rand_tensor(&mut rng, &[3, 3]));
        let x = t.leaf(rand_tensor(&mut rng, &[2, 3]));
        let h = t.push(Op::Matmul, &[x, w]).unwrap();
        let s = t.push(Op::Softplus, &[h]).unwrap();
        let loss = t.push(Op::Sum, &[s]).unwrap();
        let grads = t.backward(loss).unwrap();
        let mut corrupted = grads.get(w);
        for v in corrupted.data_mut() {
            *v *= 1.5;
        }
        // re-run the honest check, then compare the corrupted tensor against it
        let report = finite_difference_check(&mut t, loss, 1e-5, 1e-4, 0).unwrap();
        assert!(report.passed());
        let honest = t.backward(loss).unwrap().get(w);
        let diverges = honest
            .data()
            .iter()
            .zip(corrupted.data())
            .any(|(a, b)| (a - b).abs() / a.abs().max(1e-8) > 1e-4);
        assert!(diverges, "corruption must be detectable");
    }

    /// Every primitive with differentiable inputs passes a randomized
    /// finite-difference sweep (100 trials across ops, fixed seed).
    #[test]
    fn all_primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..100 {
            let mut t = Tape::new();
            let a = t.param(rand_tensor(&mut rng, &[3, 4]));
            let brow = t.param(rand_tensor(&mut rng, &[4]));
            let bcol = t.param(rand_tensor(&mut rng, &[3, 1]));
            let w = t.param(rand_tensor(&mut rng, &[4, 3]));
            // positive-valued tensor for log/sqrt
            let mut posdata = rand_tensor(&mut rng, &[3, 4]);
            for v in posdata.data_mut() {
                *v = v.abs() + 0.5;
            }
            let pos = t.param(posdata);

            let sum_all = |t: &mut Tape, id| t.push(Op::Sum, &[id]).unwrap();
            let node = match trial % 16 {
                0 => t.push(Op::Add, &[a, brow]).unwrap(),
                1 => t.push(Op::Sub, &[a, brow]).unwrap(),
                2 => t.push(Op::Mul, &[a, bcol]).unwrap(),
                3 => t.push(Op::Matmul, &[a, w]).unwrap(),
                4 => t.push(Op::Softplus, &[a]).unwrap(),
                5 => t.push(Op::Exp, &[a]).unwrap(),
                6 => t.push(Op::Log, &[pos]).unwrap(),
                7 => t.push(Op::Sin, &[a]).unwrap(),
                8 => t.push(Op::Cos, &[a]).unwrap(),
                9 => t.push(Op::Sqrt, &[pos]).unwrap(),
                10 => t.push(Op::Huber { delta: 0.7 }, &[a]).unwrap(),
                11 => t.push(Op::L2NormRows, &[a]).unwrap(),
                12 => t.push(Op::SumGroups { group: 3 }, &[a]).unwrap(),
                13 => t.push(Op::RepeatRows { times: 2 }, &[a]).unwrap(),
                14 => t.push(Op::Concat, &[a, pos]).unwrap(),
                15 => t.push(Op::CumsumRowsExclusive, &[a]).unwrap(),
                _ => unreachable!(),
            };
            let loss = sum_all(&mut t, node);
            let report = finite_difference_check(&mut t, loss, 1e-5, 1e-4, trial as u64).unwrap();
            assert!(
                report.passed(),
                "trial {trial}: max rel err {} at {:?}",
                report.max_rel_err,
                report.worst
            );
        }
    }

    #[test]
    fn camera_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let mut t = Tape::new();
            // mild rotation and small center so all points stay well in
            // front of the camera (grazing z makes the projection blow up
            // and is masked out in real use)
            let mut qv = rand_tensor(&mut rng, &[4]);
            for v in qv.data_mut() {
                *v *= 0.15;
            }
            qv.data_mut()[0] += 1.5;
            let q = t.param(qv);
            let mut cv = rand_tensor(&mut rng, &[3]);
            for v in cv.data_mut() {
                *v *= 0.3;
            }
            let c = t.param(cv);
            let mut ptsv = rand_tensor(&mut rng, &[5, 3]);
            for i in 0..5 {
                ptsv.data_mut()[i * 3 + 2] += 4.0; // points well in front
            }
            let pts = t.param(ptsv);
            let fov = t.param(Tensor::new(vec![2], vec![1.0, 0.9]).unwrap());

            let cam = t.push(Op::WorldToCamera, &[q, c, pts]).unwrap();
            let proj = t
                .push(
                    Op::PinholeProject {
                        width: 64.0,
                        height: 48.0,
                    },
                    &[cam, fov],
                )
                .unwrap();
            let pixels = t.leaf(Tensor::from_rows(
                4,
                2,
                vec![3.0, 5.0, 60.0, 40.0, 32.0, 24.0, 10.0, 44.0],
            )
            .unwrap());
            let dirs = t
                .push(
                    Op::CameraRayDirs {
                        width: 64.0,
                        height: 48.0,
                    },
                    &[q, fov, pixels],
                )
                .unwrap();
            let sdens = {
                let s = t.push(Op::SliceCols { start: 2, len: 1 }, &[proj]).unwrap();
                let braw = t.param(Tensor::scalar(-1.2));
                t.push(Op::SdfDensity, &[s, braw]).unwrap()
            };
            let stacked = t.push(Op::Sum, &[proj]).unwrap();
            let d2 = t.push(Op::Sum, &[dirs]).unwrap();
            let d3 = t.push(Op::Sum, &[sdens]).unwrap();
            let partial = t.push(Op::Add, &[stacked, d2]).unwrap();
            let loss = t.push(Op::Add, &[partial, d3]).unwrap();
            // pixel-scale outputs (~1e2) put the FD noise floor around 1e-9;
            // 1e-3 relative is the meaningful bound here
            let report = finite_difference_check(&mut t, loss, 1e-5, 1e-3, trial).unwrap();
            assert!(
                report.passed(),
                "trial {trial}: max rel err {} at {:?}",
                report.max_rel_err,
                report.worst
            );
        }
    }

    #[test]
    fn bilinear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut t = Tape::new();
        let grid = t.param(rand_tensor(&mut rng, &[12, 3])); // 3x4 grid, 3 channels
        // interior coordinates only: the clamp kink at the boundary makes
        // central differences one-sided there
        let coords = t.param(Tensor::from_rows(5, 2, vec![0.3, 0.7, 1.2, 1.9, 2.5, 0.1, 0.05, 1.95, 2.9, 1.5]).unwrap());
        let s = t
            .push(Op::BilinearSample { height: 3, width: 4 }, &[grid, coords])
            .unwrap();
        let sq = t.push(Op::Mul, &[s, s]).unwrap();
        let loss = t.push(Op::Sum, &[sq]).unwrap();
        let report = finite_difference_check(&mut t, loss, 1e-6, 1e-4, 0).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn laplace_density_continuous_and_monotone() {
        for &beta in &[1.0, 0.1, 0.01] {
            let left = laplace_density(-1e-13 * beta, beta);
            let right = laplace_density(1e-13 * beta, beta);
            assert_relative_eq!(left, right, max_relative = 1e-12);
            assert_relative_eq!(laplace_density(0.0, beta), 0.5 / beta, epsilon = 1e-12);
            // strict decrease on a grid scaled so the exponentials stay
            // resolvable in f64 (|s|/beta <= 20)
            let mut prev = f64::INFINITY;
            for i in 0..1000 {
                let s = beta * (-20.0 + 40.0 * i as f64 / 999.0);
                let v = laplace_density(s, beta);
                assert!(v < prev, "density must strictly decrease at s={s}");
                prev = v;
            }
        }
    }
}
