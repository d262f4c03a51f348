//! Terminal reward functionals r(x1) and their gradients.
//!
//! The quadratic anchor reward r(x) = -||x - a||^2 is the workhorse: every
//! closed-form terminal law in `theory` is stated for it. The linear
//! measurement reward scores agreement with an observation y ~ H x and drives
//! the toy inverse problem.

use crate::{Matrix, State};

pub trait Reward {
    fn dim(&self) -> usize;

    fn value(&self, x: &State) -> f64;

    fn grad_into(&self, x: &State, out: &mut State);

    fn grad(&self, x: &State) -> State {
        let mut out = State::zeros(self.dim());
        self.grad_into(x, &mut out);
        out
    }

    fn value_grad(&self, x: &State) -> (f64, State) {
        (self.value(x), self.grad(x))
    }
}

impl<R: Reward + ?Sized> Reward for &R {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn value(&self, x: &State) -> f64 {
        (**self).value(x)
    }
    fn grad_into(&self, x: &State, out: &mut State) {
        (**self).grad_into(x, out)
    }
}

/// r(x) = -||x - a||^2, gradient -2 (x - a).
#[derive(Clone, Debug)]
pub struct QuadraticReward {
    pub anchor: State,
}

impl QuadraticReward {
    pub fn new(anchor: State) -> Self {
        QuadraticReward { anchor }
    }

    pub fn scalar(anchor: f64) -> Self {
        QuadraticReward::new(State::from_element(1, anchor))
    }
}

impl Reward for QuadraticReward {
    fn dim(&self) -> usize {
        self.anchor.len()
    }

    fn value(&self, x: &State) -> f64 {
        let mut s = 0.0;
        for j in 0..x.len() {
            let d = x[j] - self.anchor[j];
            s += d * d;
        }
        -s
    }

    fn grad_into(&self, x: &State, out: &mut State) {
        for j in 0..x.len() {
            out[j] = -2.0 * (x[j] - self.anchor[j]);
        }
    }
}

/// r(x) = -||y - H x||^2, gradient 2 H^T (y - H x).
#[derive(Clone, Debug)]
pub struct LinearMeasurementReward {
    pub operator: Matrix,
    pub observation: State,
}

impl LinearMeasurementReward {
    pub fn new(operator: Matrix, observation: State) -> Self {
        assert_eq!(
            operator.nrows(),
            observation.len(),
            "measurement operator rows must match observation length"
        );
        LinearMeasurementReward { operator, observation }
    }

    pub fn residual(&self, x: &State) -> State {
        &self.observation - &self.operator * x
    }
}

impl Reward for LinearMeasurementReward {
    fn dim(&self) -> usize {
        self.operator.ncols()
    }

    fn value(&self, x: &State) -> f64 {
        -self.residual(x).norm_squared()
    }

    fn grad_into(&self, x: &State, out: &mut State) {
        let r = self.residual(x);
        out.gemv_tr(2.0, &self.operator, &r, 0.0);
    }
}

/// Weighted sum of rewards over the same state space.
#[derive(Clone, Debug)]
pub enum RewardFn {
    Quadratic(QuadraticReward),
    LinearMeasurement(LinearMeasurementReward),
    Composite(Vec<(f64, RewardFn)>),
}

impl Reward for RewardFn {
    fn dim(&self) -> usize {
        match self {
            RewardFn::Quadratic(r) => r.dim(),
            RewardFn::LinearMeasurement(r) => r.dim(),
            RewardFn::Composite(terms) => terms[0].1.dim(),
        }
    }

    fn value(&self, x: &State) -> f64 {
        match self {
            RewardFn::Quadratic(r) => r.value(x),
            RewardFn::LinearMeasurement(r) => r.value(x),
            RewardFn::Composite(terms) => terms.iter().map(|(w, r)| w * r.value(x)).sum(),
        }
    }

    fn grad_into(&self, x: &State, out: &mut State) {
        match self {
            RewardFn::Quadratic(r) => r.grad_into(x, out),
            RewardFn::LinearMeasurement(r) => r.grad_into(x, out),
            RewardFn::Composite(terms) => {
                out.fill(0.0);
                let mut tmp = State::zeros(x.len());
                for (w, r) in terms {
                    r.grad_into(x, &mut tmp);
                    out.axpy(*w, &tmp, 1.0);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quadratic_value_and_grad_at_origin() {
        let r = QuadraticReward::scalar(2.0);
        let x = State::from_element(1, 0.0);
        assert!((r.value(&x) + 4.0).abs() < 1e-15);
        assert!((r.grad(&x)[0] - 4.0).abs() < 1e-15);
        // Maximum at the anchor.
        let a = State::from_element(1, 2.0);
        assert!(r.value(&a) == 0.0 && r.grad(&a)[0] == 0.0);
    }

    #[test]
    fn identity_measurement_reduces_to_quadratic() {
        let q = QuadraticReward::new(State::from_vec(vec![1.0, -2.0]));
        let m = LinearMeasurementReward::new(
            Matrix::identity(2, 2),
            State::from_vec(vec![1.0, -2.0]),
        );
        let x = State::from_vec(vec![0.3, 0.4]);
        assert!((q.value(&x) - m.value(&x)).abs() < 1e-14);
        assert!((q.grad(&x) - m.grad(&x)).abs().max() < 1e-14);
    }

    #[test]
    fn measurement_grad_matches_finite_differences() {
        let h = Matrix::from_row_slice(2, 3, &[1.0, 0.5, -0.2, 0.0, 2.0, 1.0]);
        let y = State::from_vec(vec![0.4, -1.1]);
        let r = LinearMeasurementReward::new(h, y);
        let x = State::from_vec(vec![0.2, -0.3, 0.8]);
        let g = r.grad(&x);
        let eps = 1e-6;
        for j in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += eps;
            xm[j] -= eps;
            let fd = (r.value(&xp) - r.value(&xm)) / (2.0 * eps);
            assert!((g[j] - fd).abs() < 1e-6, "component {j}: {} vs {fd}", g[j]);
        }
    }

    #[test]
    fn composite_is_weighted_sum() {
        let a = RewardFn::Quadratic(QuadraticReward::scalar(1.0));
        let b = RewardFn::Quadratic(QuadraticReward::scalar(-1.0));
        let c = RewardFn::Composite(vec![(2.0, a.clone()), (0.5, b.clone())]);
        let x = State::from_element(1, 0.25);
        assert!((c.value(&x) - (2.0 * a.value(&x) + 0.5 * b.value(&x))).abs() < 1e-15);
        let g = c.grad(&x);
        let want = 2.0 * a.grad(&x)[0] + 0.5 * b.grad(&x)[0];
        assert!((g[0] - want).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn quadratic_grad_is_fd_consistent(a in -3.0f64..3.0, x in -3.0f64..3.0) {
            let r = QuadraticReward::scalar(a);
            let xs = State::from_element(1, x);
            let eps = 1e-6;
            let fd = (r.value(&State::from_element(1, x + eps))
                - r.value(&State::from_element(1, x - eps))) / (2.0 * eps);
            prop_assert!((r.grad(&xs)[0] - fd).abs() < 1e-5);
        }
    }
}
