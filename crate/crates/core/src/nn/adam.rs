use super::param::Param;

/// Adam with bias correction, one moment pair per parameter in visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn update<'a, I>(&mut self, params: I)
    where
        I: IntoIterator<Item = &'a mut Param>,
    {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, p) in params.into_iter().enumerate() {
            if self.m.len() <= idx {
                self.m.push(vec![0.0; p.len()]);
                self.v.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for j in 0..p.len() {
                let g = p.grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p.value[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Param::new(&[2], vec![1.0, -1.0]);
        p.grad = vec![0.5, -3.0];
        let mut opt = Adam::new(0.01, 0.5, 0.999);
        opt.update([&mut p]);
        assert!((p.value[0] - 0.99).abs() < 1e-9);
        assert!((p.value[1] + 0.99).abs() < 1e-9);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::new(&[1], vec![3.0]);
        let mut opt = Adam::new(0.05, 0.9, 0.999);
        for _ in 0..500 {
            p.grad[0] = 2.0 * (p.value[0] - 1.0);
            opt.update([&mut p]);
        }
        assert!((p.value[0] - 1.0).abs() < 1e-2);
    }
}
