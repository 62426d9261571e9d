//! Named parameter store. Iteration order is insertion order, which keeps
//! every downstream consumer (optimizer, checkpoints, gradient checks)
//! deterministic.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

#[derive(Clone, Debug, Default)]
pub struct ModelParams {
    entries: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Matrix) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name: {name}")));
        }
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Parameter {
            name: name.to_string(),
            value,
            grad,
        });
        Ok(())
    }

    /// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    pub fn insert_uniform(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        self.insert(name, Matrix::from_vec(rows, cols, data)?)
    }

    pub fn insert_zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        self.insert(name, Matrix::zeros(rows, cols))
    }

    pub fn insert_filled(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> Result<()> {
        self.insert(name, Matrix::filled(rows, cols, v))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::Contract(format!("unknown parameter: {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i]),
            None => Err(Error::Contract(format!("unknown parameter: {name}"))),
        }
    }

    pub fn value(&self, name: &str) -> Result<&Matrix> {
        Ok(&self.get(name)?.value)
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Matrix, scale: f64) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.grad.shape() != grad.shape() {
            return Err(Error::dimension("grad accumulate", p.grad.shape(), grad.shape()));
        }
        p.grad.add_scaled(grad, scale);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad = Matrix::zeros(p.value.rows(), p.value.cols());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_name_rejected() {
        let mut p = ModelParams::new();
        p.insert("a.w", Matrix::zeros(2, 2)).unwrap();
        assert!(p.insert("a.w", Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn insertion_order_preserved() {
        let mut p = ModelParams::new();
        p.insert("z", Matrix::zeros(1, 1)).unwrap();
        p.insert("a", Matrix::zeros(1, 1)).unwrap();
        let names: Vec<&str> = p.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, vec!["z", "a"]);
    }

    #[test]
    fn uniform_init_within_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = ModelParams::new();
        p.insert_uniform("w", 8, 8, 16, &mut rng).unwrap();
        let bound = 1.0 / 4.0;
        assert!(p.value("w").unwrap().data().iter().all(|v| v.abs() <= bound));
    }
}
