mod common;

#[test]
fn every_tape_op_matches_finite_differences() {
    for (name, err) in common::op_gradient_errors().unwrap() {
        assert!(err < 1e-6, "{name}: relative error {err}");
    }
}

#[test]
fn composite_graphs_match_finite_differences() {
    let platt = common::platt_graph_error().unwrap();
    let mse = common::mse_graph_error().unwrap();
    let transfer = common::transfer_loss_error().unwrap();
    assert!(platt < 1e-4, "platt {platt}");
    assert!(mse < 1e-4, "mse {mse}");
    assert!(transfer < 1e-4, "transfer {transfer}");
}

mod random_graphs {
    use super::common;
    use proptest::prelude::*;
    use rfad::autodiff::{Tape, Var};
    use rfad::{Result, Tensor};

    fn apply(tape: &mut Tape<f64>, op: u8, x: Var, w: Var) -> Result<Var> {
        Ok(match op {
            0 => tape.relu(x),
            1 => {
                let s = tape.scale(x, 0.3);
                tape.exp(s)
            }
            2 => tape.matmul(x, w)?,
            3 => tape.mul(x, w)?,
            4 => {
                let t = tape.transpose(x)?;
                tape.add(t, w)?
            }
            5 => {
                let wt = tape.transpose(w)?;
                let ww = tape.matmul(w, wt)?;
                let shift = tape.constant(Tensor::<f64>::eye(4).scale(2.0));
                let a = tape.add(ww, shift)?;
                tape.solve_spd(a, x)?
            }
            _ => {
                let m = tape.mean(x);
                let ones = tape.constant(Tensor::full(&[4, 4], 1.0));
                let b = tape.mul_scalar(ones, m)?;
                tape.sub(x, b)?
            }
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn composite_graphs_up_to_depth_six(ops in prop::collection::vec(0u8..7, 1..=6), seed in 0u64..10_000) {
            let inputs = vec![
                common::gaussian_away_from_zero(&[4, 4], seed, 0.05),
                common::gaussian(&[4, 4], seed + 1).scale(0.5),
            ];
            let err = common::grad_check(&inputs, 16, &|tape, v| {
                let mut x = v[0];
                for &op in &ops {
                    x = apply(tape, op, x, v[1])?;
                }
                Ok(x)
            })
            .unwrap();
            prop_assert!(err < 1e-4, "ops {:?}: relative error {}", ops, err);
        }
    }
}
