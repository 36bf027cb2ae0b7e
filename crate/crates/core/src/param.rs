//! Shared mutable parameter storage. Parameters live outside any tape and are
//! inserted as leaves per optimization step; the optimizer mutates them in
//! place between steps.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

#[derive(Debug)]
struct ParamInner {
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// A trainable (or frozen) dense array shared by reference.
#[derive(Clone, Debug)]
pub struct Param {
    inner: Rc<RefCell<ParamInner>>,
}

/// Identity of a parameter, stable for the lifetime of the `Param`.
pub type ParamId = usize;

impl Param {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Contract(format!(
                "parameter values length {} does not match shape {:?}",
                values.len(),
                shape
            )));
        }
        Ok(Self {
            inner: Rc::new(RefCell::new(ParamInner {
                shape: shape.to_vec(),
                values,
            })),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros always matches its shape")
    }

    pub fn id(&self) -> ParamId {
        Rc::as_ptr(&self.inner) as ParamId
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> Vec<f64> {
        self.inner.borrow().values.clone()
    }

    pub fn set_values(&self, values: Vec<f64>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if values.len() != inner.values.len() {
            return Err(Error::Contract(format!(
                "set_values length {} does not match parameter length {}",
                values.len(),
                inner.values.len()
            )));
        }
        inner.values = values;
        Ok(())
    }

    /// In-place mutation hook for optimizers.
    pub fn update(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.borrow_mut().values);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_handles_see_updates() {
        let p = Param::new(&[2], vec![1.0, 2.0]).unwrap();
        let alias = p.clone();
        p.update(|v| v[0] = 9.0);
        assert_eq!(alias.values(), vec![9.0, 2.0]);
        assert_eq!(p.id(), alias.id());
    }

    #[test]
    fn length_checked() {
        assert!(Param::new(&[3], vec![0.0]).is_err());
        let p = Param::zeros(&[2]);
        assert!(p.set_values(vec![1.0]).is_err());
    }
}
