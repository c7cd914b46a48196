//! Pixel-wise regression losses, as plain functions and as graph nodes.

use crate::config::{LossConfig, LossMode};
use crate::error::{Error, Result};
use crate::graph::{huber_value, Graph, Var};
use crate::tensor::Real;

fn check(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Length {
            expected: target.len(),
            found: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Validation("empty prediction".into()));
    }
    Ok(())
}

/// Mean squared error over every pixel.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    check(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// Mean Huber loss: quadratic below `delta`, linear above.
pub fn huber_loss(pred: &[f64], target: &[f64], delta: f64) -> Result<f64> {
    check(pred, target)?;
    if !(delta > 0.0) {
        return Err(Error::Config(format!("huber delta {delta} must be > 0")));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| huber_value(t - p, delta)).sum::<f64>() / pred.len() as f64)
}

pub fn total_loss(main: f64, aux: f64, aux_weight: f64) -> f64 {
    main + aux_weight * aux
}

/// Value of the configured objective on plain slices.
pub fn objective(cfg: &LossConfig, pred: &[f64], aux: Option<&[f64]>, target: &[f64]) -> Result<f64> {
    match cfg.mode {
        LossMode::Mse => mse_loss(pred, target),
        LossMode::Huber => huber_loss(pred, target, cfg.huber_delta),
        LossMode::MseAux => {
            let aux = aux.ok_or_else(|| Error::Config("MSE_AUX needs an auxiliary prediction".into()))?;
            Ok(total_loss(mse_loss(pred, target)?, mse_loss(aux, target)?, cfg.aux_weight))
        }
    }
}

pub struct LossTerms {
    pub total: Var,
    pub main: Var,
    pub aux: Option<Var>,
}

/// Adds the configured loss to the graph.
pub fn loss_node<F: Real>(g: &mut Graph<F>, cfg: &LossConfig, pred: Var, aux: Option<Var>, target: &[F]) -> Result<LossTerms> {
    let n = g.value(pred).len();
    if n != target.len() {
        return Err(Error::Length {
            expected: target.len(),
            found: n,
        });
    }
    Ok(match cfg.mode {
        LossMode::Mse => {
            let main = g.mse(pred, target);
            LossTerms { total: main, main, aux: None }
        }
        LossMode::Huber => {
            let main = g.huber(pred, target, cfg.huber_delta);
            LossTerms { total: main, main, aux: None }
        }
        LossMode::MseAux => {
            let aux = aux.ok_or_else(|| Error::Config("MSE_AUX needs an auxiliary prediction".into()))?;
            let main = g.mse(pred, target);
            let a = g.mse(aux, target);
            let weighted = g.scale(a, F::of(cfg.aux_weight));
            LossTerms {
                total: g.add(main, weighted),
                main,
                aux: Some(a),
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::{prop_assert, proptest};

    #[test]
    fn worked_values() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 2.5);
        assert_eq!(mse_loss(&[3.0; 4], &[3.0; 4]).unwrap(), 0.0);
        assert_eq!(huber_loss(&[0.5], &[0.0], 1.0).unwrap(), 0.125);
        assert_eq!(huber_loss(&[3.0], &[0.0], 1.0).unwrap(), 2.5);
        assert_eq!(total_loss(1.0, 0.5, 0.2), 1.1);
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mode_dispatch() {
        let mut cfg = LossConfig::default();
        let p = [1.0, 2.0];
        let a = [0.0, 1.0];
        let t = [0.0, 0.0];
        assert!((objective(&cfg, &p, Some(&a), &t).unwrap() - (2.5 + 0.2 * 0.5)).abs() < 1e-15);
        assert!(objective(&cfg, &p, None, &t).is_err());
        cfg.mode = LossMode::Mse;
        assert_eq!(objective(&cfg, &p, Some(&a), &t).unwrap(), 2.5);
        cfg.mode = LossMode::Huber;
        assert_eq!(objective(&cfg, &p, None, &t).unwrap(), (0.5 + 1.5) / 2.0);
    }

    #[test]
    fn graph_loss_matches_plain() {
        let cfg = LossConfig::default();
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, 2.0, -1.0, 0.5]));
        let a = g.param(Tensor::from_vec(&[2, 1, 1, 2], vec![0.0, 1.0, 0.0, 0.0]));
        let t = [0.0, 0.0, 1.0, 1.0];
        let terms = loss_node(&mut g, &cfg, p, Some(a), &t).unwrap();
        let want = objective(&cfg, g.value(p).data(), Some(g.value(a).data()), &t).unwrap();
        assert!((g.value(terms.total).item() - want).abs() < 1e-15);
        let grads = g.backward(terms.total);
        // d/da of 0.2 * mean((a - t)^2)
        let ga = grads.get(a).unwrap().data();
        assert!((ga[0] - 0.2 * 2.0 * (0.0 - 0.0) / 4.0).abs() < 1e-15);
        assert!((ga[1] - 0.2 * 2.0 * 1.0 / 4.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn huber_bounds(vals in proptest::collection::vec(-5.0f64..5.0, 1..64), delta in 0.1f64..3.0) {
            let zero = vec![0.0; vals.len()];
            let h = huber_loss(&vals, &zero, delta).unwrap();
            let m = mse_loss(&vals, &zero).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= 0.5 * m + 1e-12);
            if vals.iter().all(|v| v.abs() <= delta) {
                prop_assert!((h - 0.5 * m).abs() < 1e-12);
            }
        }

        #[test]
        fn global_mse_equals_mean_of_chip_means(vals in proptest::collection::vec(-3.0f64..3.0, 16..17), chips in 1usize..5) {
            let per = 4;
            let n = chips * per;
            let v: Vec<f64> = vals.iter().cycle().take(n).copied().collect();
            let t = vec![0.5; n];
            let global = mse_loss(&v, &t).unwrap();
            let mean_of_means = v.chunks(per).zip(t.chunks(per)).map(|(a, b)| mse_loss(a, b).unwrap()).sum::<f64>() / chips as f64;
            prop_assert!((global - mean_of_means).abs() < 1e-12);
        }
    }
}
