//! Trainable tensor with paired gradient storage.

/// A named parameter tensor. `grad` always shape-matches `value`; callers
/// accumulate into it and zero it between optimizer steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(name: &str, shape: Vec<usize>, value: Vec<f64>) -> Param {
        let len: usize = shape.iter().product();
        assert_eq!(len, value.len(), "param {name}: shape/value length mismatch");
        let grad = vec![0.0; len];
        Param {
            name: name.to_string(),
            shape,
            value,
            grad,
        }
    }

    pub fn zeros(name: &str, shape: Vec<usize>) -> Param {
        let len: usize = shape.iter().product();
        Param::new(name, shape, vec![0.0; len])
    }

    pub fn scalar(name: &str, value: f64) -> Param {
        Param::new(name, vec![1], vec![value])
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

    pub fn all_finite(&self) -> bool {
        self.value.iter().all(|v| v.is_finite())
    }

    pub fn grad_finite(&self) -> bool {
        self.grad.iter().all(|v| v.is_finite())
    }
}
