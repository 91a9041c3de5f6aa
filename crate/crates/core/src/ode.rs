//! Classical RK4 on flat `f64` state vectors with reusable scratch space.

pub(crate) trait OdeRhs {
    fn eval(&mut self, t: f64, y: &[f64], dy: &mut [f64]);
}

impl<F: FnMut(f64, &[f64], &mut [f64])> OdeRhs for F {
    fn eval(&mut self, t: f64, y: &[f64], dy: &mut [f64]) {
        self(t, y, dy)
    }
}

pub(crate) struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    stage: Vec<f64>,
}

impl Rk4 {
    pub fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            stage: vec![0.0; n],
        }
    }

    pub fn step<R: OdeRhs + ?Sized>(&mut self, rhs: &mut R, t: f64, h: f64, y: &mut [f64]) {
        let n = y.len();
        debug_assert_eq!(n, self.k1.len());
        rhs.eval(t, y, &mut self.k1);
        for i in 0..n {
            self.stage[i] = y[i] + 0.5 * h * self.k1[i];
        }
        rhs.eval(t + 0.5 * h, &self.stage, &mut self.k2);
        for i in 0..n {
            self.stage[i] = y[i] + 0.5 * h * self.k2[i];
        }
        rhs.eval(t + 0.5 * h, &self.stage, &mut self.k3);
        for i in 0..n {
            self.stage[i] = y[i] + h * self.k3[i];
        }
        rhs.eval(t + h, &self.stage, &mut self.k4);
        for i in 0..n {
            y[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}
