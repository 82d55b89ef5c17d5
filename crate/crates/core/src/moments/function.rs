use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::MomentsError;

type Eval = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A nonnegative monotone `f` with its constants `c_{f,s}` and `L_f`.
#[derive(Clone)]
pub struct FunctionSpec {
    name: String,
    f: Eval,
    c_fs: Option<f64>,
    lipschitz: Option<f64>,
}

impl fmt::Debug for FunctionSpec {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        fm.debug_struct("FunctionSpec")
            .field("name", &self.name)
            .field("c_fs", &self.c_fs)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

/// `s^{k−1}`, the constant of `x^k` over `s` summands.
pub fn c_fs_power(k: u32, s: usize) -> f64 {
    (s as f64).powi(k as i32 - 1)
}

/// `(Σx)^L / Σx^L`, the right-hand side of the Lipschitz ratio bound.
pub fn lipschitz_ratio_bound(xs: &[f64], l: f64) -> f64 {
    let total: f64 = xs.iter().sum();
    total.powf(l) / xs.iter().map(|x| x.powf(l)).sum::<f64>()
}

impl FunctionSpec {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        c_fs: Option<f64>,
        lipschitz: Option<f64>,
    ) -> Self {
        Self {
            name: name.into(),
            f: Arc::new(f),
            c_fs,
            lipschitz,
        }
    }

    /// `x^k` with `c_{f,s} = s^{k−1}` and `L_f = k`.
    pub fn power(k: u32, s: usize) -> Self {
        Self::new(format!("x^{k}"), move |x: f64| x.powi(k as i32), Some(c_fs_power(k, s)), Some(k as f64))
    }

    /// `x⁴ + x⁵` with `c_{f,s} = s⁴` and `L_f = 5`.
    pub fn quartic_plus_quintic(s: usize) -> Self {
        Self::new("x^4+x^5", |x: f64| x.powi(4) + x.powi(5), Some(c_fs_power(5, s)), Some(5.0))
    }

    /// Piecewise-linear interpolation through `points`, which must start at
    /// `x = 0` with strictly increasing `x`; the last segment extends past the
    /// final point.
    pub fn table(points: Vec<(f64, f64)>, c_fs: Option<f64>, lipschitz: Option<f64>) -> Result<Self, MomentsError> {
        if points.len() < 2 {
            return Err(MomentsError::SpecViolation("a table needs at least two points".into()));
        }
        if points[0].0 != 0.0 {
            return Err(MomentsError::SpecViolation("a table must start at x = 0".into()));
        }
        if points.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(MomentsError::SpecViolation("table x values must increase".into()));
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite() || *y < 0.0) {
            return Err(MomentsError::SpecViolation("table values must be finite and nonnegative".into()));
        }
        let f = move |x: f64| {
            let seg = match points.iter().position(|(px, _)| *px > x) {
                Some(0) => 0,
                Some(p) => p - 1,
                None => points.len() - 2,
            };
            let (x0, y0) = points[seg];
            let (x1, y1) = points[seg + 1];
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        };
        Ok(Self::new("custom-table", f, c_fs, lipschitz))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.f)(x)
    }

    pub fn c_fs(&self) -> Option<f64> {
        self.c_fs
    }

    pub fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }

    pub fn with_c_fs(mut self, c: f64) -> Self {
        self.c_fs = Some(c);
        self
    }

    pub fn with_lipschitz(mut self, l: f64) -> Self {
        self.lipschitz = Some(l);
        self
    }

    /// Spot-checks nonnegativity, monotonicity, `c_{f,s}` and `L_f` on
    /// log-uniform points in `[1e-3, 1e3]` (with occasional zeros).
    pub fn validate(&self, s: usize) -> Result<(), MomentsError> {
        const REL: f64 = 1e-9;
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_f00d);
        let point = |rng: &mut ChaCha8Rng| {
            if rng.random_bool(0.1) {
                0.0
            } else {
                10f64.powf(rng.random_range(-3.0..3.0))
            }
        };
        for _ in 0..256 {
            let x = point(&mut rng);
            let y = point(&mut rng);
            let (lo, hi) = if x < y { (x, y) } else { (y, x) };
            let (flo, fhi) = (self.eval(lo), self.eval(hi));
            if !(flo >= 0.0 && fhi.is_finite()) {
                return Err(MomentsError::SpecViolation(format!("{} is negative or non-finite near {lo}", self.name)));
            }
            if fhi < flo * (1.0 - REL) {
                return Err(MomentsError::SpecViolation(format!("{} decreases between {lo} and {hi}", self.name)));
            }
            if let Some(l) = self.lipschitz {
                if lo > 0.0 && flo > 0.0 && fhi / flo > (hi / lo).powf(l) * (1.0 + REL) {
                    return Err(MomentsError::SpecViolation(format!(
                        "L_f = {l} fails for {} at ({hi}, {lo})",
                        self.name
                    )));
                }
            }
            if let Some(c) = self.c_fs {
                let xs: Vec<f64> = (0..s).map(|_| point(&mut rng)).collect();
                let lhs = self.eval(xs.iter().sum());
                let rhs = c * xs.iter().map(|x| self.eval(*x)).sum::<f64>();
                if lhs > rhs * (1.0 + REL) + f64::MIN_POSITIVE {
                    return Err(MomentsError::SpecViolation(format!(
                        "c_fs = {c} fails for {} on {xs:?}",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_constants() {
        assert_eq!(c_fs_power(1, 7), 1.0);
        assert_eq!(c_fs_power(2, 3), 3.0);
        assert_eq!(c_fs_power(4, 5), 125.0);
    }

    #[test]
    fn power_constant_is_tight_at_equal_inputs() {
        let f = FunctionSpec::power(4, 5);
        let xs = [1.0; 5];
        let ratio = f.eval(xs.iter().sum()) / xs.iter().map(|x| f.eval(*x)).sum::<f64>();
        assert!((ratio - c_fs_power(4, 5)).abs() <= 1e-9);
        let linear = FunctionSpec::power(1, 4);
        assert_eq!(linear.eval(2.0 + 3.0), linear.eval(2.0) + linear.eval(3.0));
    }

    #[test]
    fn builtins_pass_validation() {
        for s in [1, 2, 5] {
            FunctionSpec::power(2, s).validate(s).unwrap();
            FunctionSpec::power(4, s).validate(s).unwrap();
            FunctionSpec::quartic_plus_quintic(s).validate(s).unwrap();
        }
    }

    #[test]
    fn wrong_constants_are_caught() {
        let bad_c = FunctionSpec::power(3, 4).with_c_fs(2.0);
        assert!(matches!(bad_c.validate(4), Err(MomentsError::SpecViolation(_))));
        let bad_l = FunctionSpec::power(3, 4).with_lipschitz(2.0);
        assert!(matches!(bad_l.validate(4), Err(MomentsError::SpecViolation(_))));
        let decreasing = FunctionSpec::new("1/(1+x)", |x| 1.0 / (1.0 + x), None, None);
        assert!(matches!(decreasing.validate(2), Err(MomentsError::SpecViolation(_))));
    }

    #[test]
    fn table_interpolates() {
        let t = FunctionSpec::table(vec![(0.0, 0.0), (1.0, 1.0), (2.0, 4.0)], Some(4.0), None).unwrap();
        assert_eq!(t.eval(0.5), 0.5);
        assert_eq!(t.eval(1.5), 2.5);
        assert_eq!(t.eval(3.0), 7.0);
        assert!(FunctionSpec::table(vec![(1.0, 0.0), (2.0, 1.0)], None, None).is_err());
        assert!(FunctionSpec::table(vec![(0.0, 0.0), (0.0, 1.0)], None, None).is_err());
    }

    #[test]
    fn lipschitz_ratio_dominates_function_ratio() {
        let f = FunctionSpec::power(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let xs: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..5.0)).collect();
            let lhs = f.eval(xs.iter().sum()) / xs.iter().map(|x| f.eval(*x)).sum::<f64>();
            assert!(lhs <= lipschitz_ratio_bound(&xs, 3.0) * (1.0 + 1e-12));
        }
    }
}
