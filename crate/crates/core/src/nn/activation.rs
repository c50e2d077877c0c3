use super::tensor::Tensor;

/// Pointwise nonlinearity; backward uses only the cached output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu(a) => {
                if v > 0.0 {
                    v
                } else {
                    a * v
                }
            }
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => sigmoid(v),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if y > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn forward(self, x: &Tensor) -> Tensor {
        if self == Activation::Identity {
            return x.clone();
        }
        x.map(|v| self.apply(v))
    }

    pub fn backward(self, y: &Tensor, dy: &Tensor) -> Tensor {
        let mut dx = dy.clone();
        if self != Activation::Identity {
            for (d, &o) in dx.data_mut().iter_mut().zip(y.data()) {
                *d *= self.derivative_from_output(o);
            }
        }
        dx
    }
}
