//! Explicit Runge-Kutta steppers: classic RK4 and the Dormand-Prince 5(4) pair.
//!
//! The steppers only advance one step; step-size selection and event handling
//! live with the caller.

/// Right-hand side `dy = f(t, y)`.
pub trait OdeRhs {
    fn eval(&mut self, t: f64, y: &[f64], dy: &mut [f64]);
}

impl<F: FnMut(f64, &[f64], &mut [f64])> OdeRhs for F {
    fn eval(&mut self, t: f64, y: &[f64], dy: &mut [f64]) {
        self(t, y, dy)
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

// difference between the 5th and embedded 4th order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Dormand-Prince 5(4) stepper with first-same-as-last stage reuse.
#[derive(Clone, Debug)]
pub struct Dopri5 {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
}

impl Dopri5 {
    pub fn new(dim: usize) -> Self {
        Self { k: std::array::from_fn(|_| vec![0.0; dim]), tmp: vec![0.0; dim] }
    }

    /// Stage buffer holding `f(t, y)` for the next step.
    pub fn k1_mut(&mut self) -> &mut [f64] {
        &mut self.k[0]
    }

    pub fn k1(&self) -> &[f64] {
        &self.k[0]
    }

    /// Advances `y` by `h` into `y_out`, assuming `k1` holds `f(t, y)`.
    /// Returns the scaled RMS error estimate; `<= 1` means acceptable.
    pub fn step(
        &mut self,
        rhs: &mut impl OdeRhs,
        t: f64,
        y: &[f64],
        h: f64,
        y_out: &mut [f64],
        atol: f64,
        rtol: f64,
    ) -> f64 {
        let n = y.len();
        let [k1, k2, k3, k4, k5, k6, k7] = &mut self.k;
        let tmp = &mut self.tmp;
        for i in 0..n {
            tmp[i] = y[i] + h * A21 * k1[i];
        }
        rhs.eval(t + C2 * h, tmp, k2);
        for i in 0..n {
            tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        rhs.eval(t + C3 * h, tmp, k3);
        for i in 0..n {
            tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        rhs.eval(t + C4 * h, tmp, k4);
        for i in 0..n {
            tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        rhs.eval(t + C5 * h, tmp, k5);
        for i in 0..n {
            tmp[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        rhs.eval(t + h, tmp, k6);
        for i in 0..n {
            y_out[i] = y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        rhs.eval(t + h, y_out, k7);
        let mut acc = 0.0;
        for i in 0..n {
            let err = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let scale = atol + rtol * y[i].abs().max(y_out[i].abs());
            acc += (err / scale).powi(2);
        }
        (acc / n as f64).sqrt()
    }

    /// Promotes the last stage to `k1` after an accepted step.
    pub fn accept(&mut self) {
        self.k.swap(0, 6);
    }
}

/// Classic fourth-order Runge-Kutta stepper.
#[derive(Clone, Debug)]
pub struct Rk4 {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Self { k: std::array::from_fn(|_| vec![0.0; dim]), tmp: vec![0.0; dim] }
    }

    pub fn k1_mut(&mut self) -> &mut [f64] {
        &mut self.k[0]
    }

    pub fn k1(&self) -> &[f64] {
        &self.k[0]
    }

    /// Advances `y` by `h` into `y_out`, assuming `k1` holds `f(t, y)`.
    pub fn step(&mut self, rhs: &mut impl OdeRhs, t: f64, y: &[f64], h: f64, y_out: &mut [f64]) {
        let n = y.len();
        let [k1, k2, k3, k4] = &mut self.k;
        let tmp = &mut self.tmp;
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        rhs.eval(t + 0.5 * h, tmp, k2);
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        rhs.eval(t + 0.5 * h, tmp, k3);
        for i in 0..n {
            tmp[i] = y[i] + h * k3[i];
        }
        rhs.eval(t + h, tmp, k4);
        for i in 0..n {
            y_out[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(_t: f64, y: &[f64], dy: &mut [f64]) {
        dy[0] = -y[0];
        dy[1] = y[0] - 2.0 * y[1];
    }

    fn exact(t: f64) -> [f64; 2] {
        // y1 = e^-t, y2 = e^-t - e^-2t with y(0) = (1, 0)
        [(-t).exp(), (-t).exp() - (-2.0 * t).exp()]
    }

    #[test]
    fn rk4_converges_at_fourth_order() {
        let run = |steps: usize| {
            let mut st = Rk4::new(2);
            let mut rhs = decay;
            let (mut y, mut out) = (vec![1.0, 0.0], vec![0.0; 2]);
            let h = 2.0 / steps as f64;
            for s in 0..steps {
                let t = s as f64 * h;
                rhs(t, &y, st.k1_mut());
                st.step(&mut rhs, t, &y, h, &mut out);
                y.copy_from_slice(&out);
            }
            (y[0] - exact(2.0)[0]).abs() + (y[1] - exact(2.0)[1]).abs()
        };
        let ratio = run(20) / run(40);
        assert!(ratio > 14.0 && ratio < 18.0, "{ratio}");
    }

    #[test]
    fn dopri5_adaptive_run_meets_tolerance() {
        let mut st = Dopri5::new(2);
        let mut rhs = decay;
        let (mut y, mut out) = (vec![1.0, 0.0], vec![0.0; 2]);
        let (mut t, mut h) = (0.0, 0.1f64);
        rhs(t, &y, st.k1_mut());
        while t < 3.0 {
            h = h.min(3.0 - t);
            let err = st.step(&mut rhs, t, &y, h, &mut out, 1e-10, 1e-10);
            if err <= 1.0 {
                t += h;
                y.copy_from_slice(&out);
                st.accept();
            }
            h *= (0.9 * err.max(1e-10).powf(-0.2)).clamp(0.2, 5.0);
        }
        let ex = exact(3.0);
        assert!((y[0] - ex[0]).abs() < 1e-8 && (y[1] - ex[1]).abs() < 1e-8);
    }

    #[test]
    fn dopri5_error_estimate_scales_with_fifth_power() {
        let est = |h: f64| {
            let mut st = Dopri5::new(2);
            let mut r = decay;
            let y = [1.0, 0.0];
            let mut out = [0.0; 2];
            r(0.0, &y, st.k1_mut());
            st.step(&mut r, 0.0, &y, h, &mut out, 1.0, 0.0)
        };
        let ratio = est(0.2) / est(0.1);
        assert!(ratio > 24.0 && ratio < 40.0, "{ratio}");
    }
}
