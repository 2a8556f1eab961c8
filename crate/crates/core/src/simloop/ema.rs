use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Teacher and student parameter vectors coupled by an exponential moving
/// average with keep rate `keep_rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState<T> {
    pub teacher: Vec<T>,
    pub student: Vec<T>,
    pub keep_rate: T,
}

impl<T: Scalar> EmaState<T> {
    pub fn new(teacher: Vec<T>, student: Vec<T>, keep_rate: T) -> Result<Self> {
        let state = EmaState {
            teacher,
            student,
            keep_rate,
        };
        state.check()?;
        Ok(state)
    }

    fn check(&self) -> Result<()> {
        if self.teacher.len() != self.student.len() {
            return Err(Error::LengthMismatch {
                teacher: self.teacher.len(),
                student: self.student.len(),
            });
        }
        if !(self.keep_rate >= T::zero() && self.keep_rate <= T::one()) {
            return Err(Error::config(format!(
                "keep rate {} outside [0, 1]",
                self.keep_rate
            )));
        }
        Ok(())
    }

    /// `teacher <- keep_rate * teacher + (1 - keep_rate) * student`, elementwise.
    pub fn update(&mut self) -> Result<()> {
        self.check()?;
        let a = self.keep_rate;
        let b = T::one() - a;
        for (t, s) in self.teacher.iter_mut().zip(&self.student) {
            *t = a * *t + b * *s;
        }
        Ok(())
    }
}

/// Functional form of [`EmaState::update`].
pub fn ema_update<T: Scalar>(state: &EmaState<T>) -> Result<EmaState<T>> {
    let mut next = state.clone();
    next.update()?;
    Ok(next)
}
