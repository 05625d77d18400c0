//! Classical fixed-step RK4 for autonomous systems `y' = f(y)`.

pub(crate) struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    /// Advances `y` by one step of size `h`; `f(y, out)` writes `y'`.
    pub(crate) fn step(&mut self, y: &mut [f64], h: f64, mut f: impl FnMut(&[f64], &mut [f64])) {
        f(y, &mut self.k1);
        for (t, (y, k)) in self.tmp.iter_mut().zip(y.iter().zip(&self.k1)) {
            *t = y + 0.5 * h * k;
        }
        f(&self.tmp, &mut self.k2);
        for (t, (y, k)) in self.tmp.iter_mut().zip(y.iter().zip(&self.k2)) {
            *t = y + 0.5 * h * k;
        }
        f(&self.tmp, &mut self.k3);
        for (t, (y, k)) in self.tmp.iter_mut().zip(y.iter().zip(&self.k3)) {
            *t = y + h * k;
        }
        f(&self.tmp, &mut self.k4);
        for (i, y) in y.iter_mut().enumerate() {
            *y += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// Step count with `h·rate ≤ 2`, inside the RK4 stability interval on the
/// negative real axis, and at least `min`.
pub(crate) fn stable_steps(rate: f64, horizon: f64, min: usize) -> usize {
    let needed = (0.5 * rate * horizon).ceil();
    if needed.is_finite() && needed > min as f64 {
        needed as usize
    } else {
        min.max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_is_fourth_order() {
        let err = |steps: usize| {
            let mut y = [1.0];
            let mut rk = Rk4::new(1);
            let h = 1.0 / steps as f64;
            for _ in 0..steps {
                rk.step(&mut y, h, |y, out| out[0] = -2.0 * y[0]);
            }
            (y[0] - (-2.0f64).exp()).abs()
        };
        let ratio = err(20) / err(40);
        assert!((ratio - 16.0).abs() < 1.0, "ratio {ratio}");
    }
}
