use rand::Rng;

/// A trainable array with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Param {
    pub fn new(shape: &[usize], value: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Param {
            value,
            grad,
            shape: shape.to_vec(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Param::new(shape, vec![v; shape.iter().product()])
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Param::new(shape, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Non-trainable state carried with a module (batch-norm running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer {
    pub value: Vec<f64>,
    pub shape: Vec<usize>,
}

/// Uniform access to the named parameters and buffers of a network.
///
/// Names are dot-separated paths built from `prefix`, e.g. `g_trunk.res1.conv2.weight`.
pub trait Module {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>);

    fn buffers<'a>(&'a self, _prefix: &str, _out: &mut Vec<(String, &'a Buffer)>) {}
    fn buffers_mut<'a>(&'a mut self, _prefix: &str, _out: &mut Vec<(String, &'a mut Buffer)>) {}

    fn named_params(&self, prefix: &str) -> Vec<(String, &Param)> {
        let mut v = Vec::new();
        self.params(prefix, &mut v);
        v
    }

    fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Param)> {
        let mut v = Vec::new();
        self.params_mut(prefix, &mut v);
        v
    }

    fn named_buffers(&self, prefix: &str) -> Vec<(String, &Buffer)> {
        let mut v = Vec::new();
        self.buffers(prefix, &mut v);
        v
    }

    fn named_buffers_mut(&mut self, prefix: &str) -> Vec<(String, &mut Buffer)> {
        let mut v = Vec::new();
        self.buffers_mut(prefix, &mut v);
        v
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut("") {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.named_params("").iter().map(|(_, p)| p.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
