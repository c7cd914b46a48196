//! Regression metrics over pooled pixels and yield unit conversions.

use serde::{Deserialize, Serialize};

use crate::chipstore::YieldStats;
use crate::error::{Error, Result};

pub const ACRES_PER_HECTARE: f64 = 2.47105;
/// Canola bushel: 50 lb.
pub const KG_PER_BUSHEL: f64 = 22.6796;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    KgHa,
    KgAc,
    BuAc,
}

impl std::str::FromStr for Unit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['/', '-'], "_").as_str() {
            "kg_ha" => Ok(Unit::KgHa),
            "kg_ac" => Ok(Unit::KgAc),
            "bu_ac" => Ok(Unit::BuAc),
            _ => Err(Error::Validation(format!("unknown unit '{s}'"))),
        }
    }
}

/// Converts a kg/ha quantity (a yield or an error magnitude).
pub fn convert_units(kg_ha: f64, unit: Unit) -> f64 {
    match unit {
        Unit::KgHa => kg_ha,
        Unit::KgAc => kg_ha / ACRES_PER_HECTARE,
        Unit::BuAc => kg_ha / (KG_PER_BUSHEL * ACRES_PER_HECTARE),
    }
}

pub fn to_kg_ha(value: f64, unit: Unit) -> f64 {
    value / convert_units(1.0, unit)
}

fn check(y: &[f64], p: &[f64]) -> Result<()> {
    if y.len() != p.len() {
        return Err(Error::Length {
            expected: y.len(),
            found: p.len(),
        });
    }
    if y.is_empty() {
        return Err(Error::Validation("metrics need at least one pixel".into()));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn rmse(y: &[f64], p: &[f64]) -> Result<f64> {
    check(y, p)?;
    Ok(mean(&y.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).collect::<Vec<_>>()).sqrt())
}

pub fn mae(y: &[f64], p: &[f64]) -> Result<f64> {
    check(y, p)?;
    Ok(mean(&y.iter().zip(p).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>()))
}

pub fn r2(y: &[f64], p: &[f64]) -> Result<f64> {
    check(y, p)?;
    let my = mean(y);
    let ss_tot: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Validation("R² undefined for constant targets".into()));
    }
    let ss_res: f64 = y.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn pearson(y: &[f64], p: &[f64]) -> Result<f64> {
    check(y, p)?;
    let (my, mp) = (mean(y), mean(p));
    let (mut c, mut vy, mut vp) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(p) {
        c += (a - my) * (b - mp);
        vy += (a - my) * (a - my);
        vp += (b - mp) * (b - mp);
    }
    if vy == 0.0 || vp == 0.0 {
        return Err(Error::Validation("Pearson undefined for zero variance".into()));
    }
    Ok(c / (vy * vp).sqrt())
}

/// Mergeable single-pass accumulator: running means, centred second
/// moments and co-moment, plus error sums.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricAccumulator {
    n: u64,
    mean_y: f64,
    mean_p: f64,
    m2_y: f64,
    m2_p: f64,
    c_yp: f64,
    sse: f64,
    sae: f64,
}

/// Metrics in the units the inputs were given in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub pixels: u64,
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
    /// `None` when predictions are constant.
    pub pearson: Option<f64>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> u64 {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn push(&mut self, y: f64, p: f64) {
        self.n += 1;
        let n = self.n as f64;
        let dy = y - self.mean_y;
        let dp = p - self.mean_p;
        self.mean_y += dy / n;
        self.mean_p += dp / n;
        self.m2_y += dy * (y - self.mean_y);
        self.m2_p += dp * (p - self.mean_p);
        self.c_yp += dy * (p - self.mean_p);
        let e = y - p;
        self.sse += e * e;
        self.sae += e.abs();
    }

    pub fn extend<A: Into<f64> + Copy, B: Into<f64> + Copy>(&mut self, y: &[A], p: &[B]) {
        assert_eq!(y.len(), p.len(), "metric inputs differ in length");
        for (&a, &b) in y.iter().zip(p) {
            self.push(a.into(), b.into());
        }
    }

    /// Combines two accumulators as if all pixels had been pushed into one.
    pub fn merge(&mut self, o: &MetricAccumulator) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = o.clone();
            return;
        }
        let (na, nb) = (self.n as f64, o.n as f64);
        let n = na + nb;
        let dy = o.mean_y - self.mean_y;
        let dp = o.mean_p - self.mean_p;
        self.m2_y += o.m2_y + dy * dy * na * nb / n;
        self.m2_p += o.m2_p + dp * dp * na * nb / n;
        self.c_yp += o.c_yp + dy * dp * na * nb / n;
        self.mean_y += dy * nb / n;
        self.mean_p += dp * nb / n;
        self.sse += o.sse;
        self.sae += o.sae;
        self.n += o.n;
    }

    pub fn finish(&self) -> Result<Metrics> {
        if self.n == 0 {
            return Err(Error::Validation("metrics need at least one pixel".into()));
        }
        if self.m2_y == 0.0 {
            return Err(Error::Validation("R² undefined for constant targets".into()));
        }
        let n = self.n as f64;
        Ok(Metrics {
            pixels: self.n,
            rmse: (self.sse / n).sqrt(),
            mae: self.sae / n,
            r2: 1.0 - self.sse / self.m2_y,
            pearson: (self.m2_p > 0.0).then(|| (self.c_yp / (self.m2_y * self.m2_p).sqrt()).clamp(-1.0, 1.0)),
        })
    }
}

/// One error metric in every reporting unit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitValues {
    pub standardized: f64,
    pub kg_ha: f64,
    pub kg_ac: f64,
    pub bu_ac: f64,
}

impl UnitValues {
    pub fn from_standardized(v: f64, yield_std: f64) -> Self {
        let kg_ha = v * yield_std;
        Self {
            standardized: v,
            kg_ha,
            kg_ac: convert_units(kg_ha, Unit::KgAc),
            bu_ac: convert_units(kg_ha, Unit::BuAc),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub pixels: u64,
    pub rmse: UnitValues,
    pub mae: UnitValues,
    pub r2: f64,
    pub pearson: Option<f64>,
}

/// Expands standardized metrics into physical units. Error magnitudes scale
/// by the yield standard deviation; R² and Pearson are scale-free.
pub fn destandardized_report(m: &Metrics, stats: &YieldStats, split: &str) -> EvalReport {
    EvalReport {
        split: split.to_string(),
        pixels: m.pixels,
        rmse: UnitValues::from_standardized(m.rmse, stats.std),
        mae: UnitValues::from_standardized(m.mae, stats.std),
        r2: m.r2,
        pearson: m.pearson,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-300)
    }

    #[test]
    fn worked_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0, 0.0], &[1.0, -1.0]).unwrap(), 1.0);
        assert_eq!(mae(&[0.0, 0.0], &[1.0, -1.0]).unwrap(), 1.0);
        assert!((rmse(&[0.0, 0.0], &[0.0, 2.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(mae(&[0.0, 0.0], &[0.0, 2.0]).unwrap(), 1.0);
        assert_eq!(r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap(), 0.5);
        assert_eq!(r2(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert!((pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-15);
        let y = [1.0, 5.0, 2.0, 7.0];
        let up: Vec<f64> = y.iter().map(|v| 2.0 * v + 3.0).collect();
        let down: Vec<f64> = y.iter().map(|v| -v).collect();
        assert!((pearson(&y, &up).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&y, &down).unwrap() + 1.0).abs() < 1e-15);
        assert!(r2(&[2.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn unit_conversions() {
        let kg_ac = convert_units(229.33, Unit::KgAc);
        assert!((kg_ac - 92.807).abs() < 0.001);
        assert!((kg_ac - 92.76).abs() / 92.76 < 1e-3);
        assert!((convert_units(208.79, Unit::BuAc) - 3.726).abs() < 0.001);
        for u in [Unit::KgHa, Unit::KgAc, Unit::BuAc] {
            assert_eq!(convert_units(0.0, u), 0.0);
            assert!((to_kg_ha(convert_units(123.4, u), u) - 123.4).abs() < 1e-12);
        }
        assert_eq!("bu/ac".parse::<Unit>().unwrap(), Unit::BuAc);
        assert!("lb/ac".parse::<Unit>().is_err());
    }

    #[test]
    fn destandardization() {
        let m = Metrics {
            pixels: 10,
            rmse: 0.4368,
            mae: 0.3,
            r2: 0.81,
            pearson: Some(0.9),
        };
        let r = destandardized_report(&m, &YieldStats { mean: 2000.0, std: 478.0 }, "val");
        assert!((r.rmse.kg_ha - 208.79).abs() < 0.1);
        assert_eq!(r.r2, 0.81);
        let zero = Metrics { rmse: 0.0, ..m };
        assert_eq!(destandardized_report(&zero, &YieldStats { mean: 0.0, std: 478.0 }, "val").rmse.kg_ha, 0.0);
        let json = serde_json::to_value(&r).unwrap();
        for unit in ["standardized", "kg_ha", "kg_ac", "bu_ac"] {
            assert!(json["rmse"][unit].is_number());
            assert!(json["mae"][unit].is_number());
        }
    }

    #[test]
    fn streaming_matches_two_pass_and_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y: Vec<f64> = (0..10_000).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let p: Vec<f64> = y.iter().map(|v| 0.7 * v + rng.gen_range(-0.5..0.5)).collect();
        let mut whole = MetricAccumulator::new();
        whole.extend(&y, &p);
        let mut parts = MetricAccumulator::new();
        for (a, b) in y.chunks(999).zip(p.chunks(999)) {
            let mut part = MetricAccumulator::new();
            part.extend(a, b);
            parts.merge(&part);
        }
        for acc in [&whole, &parts] {
            let m = acc.finish().unwrap();
            assert!(close(m.rmse, rmse(&y, &p).unwrap(), 1e-12));
            assert!(close(m.mae, mae(&y, &p).unwrap(), 1e-12));
            assert!(close(m.r2, r2(&y, &p).unwrap(), 1e-12));
            assert!(close(m.pearson.unwrap(), pearson(&y, &p).unwrap(), 1e-12));
        }
        let mut constant = MetricAccumulator::new();
        constant.extend(&y, &vec![0.0; y.len()]);
        assert_eq!(constant.finish().unwrap().pearson, None);
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..50)) {
            let (y, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert!(rmse(&y, &p).unwrap() + 1e-12 >= mae(&y, &p).unwrap());
        }

        #[test]
        fn affine_invariance(
            pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..50),
            a in 0.1f64..10.0,
            b in -100.0f64..100.0,
        ) {
            let (y, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let (Ok(r), Ok(c)) = (r2(&y, &p), pearson(&y, &p)) else { return Ok(()) };
            let ys: Vec<f64> = y.iter().map(|v| a * v + b).collect();
            let ps: Vec<f64> = p.iter().map(|v| a * v + b).collect();
            prop_assert!((r2(&ys, &ps).unwrap() - r).abs() < 1e-9 * r.abs().max(1.0));
            prop_assert!((pearson(&ys, &ps).unwrap() - c).abs() < 1e-9);
            let neg: Vec<f64> = p.iter().map(|v| -a * v + b).collect();
            prop_assert!((pearson(&ys, &neg).unwrap() + c).abs() < 1e-9);
        }
    }
}
