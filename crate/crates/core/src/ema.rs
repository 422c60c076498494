//! Teacher weights as an exponential moving average of the student.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_DECAY: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    decay: f64,
    teacher: Vec<Tensor>,
    step_count: u64,
}

impl EmaState {
    /// Starts the teacher as an exact copy of the student, without gradient
    /// tracking.
    pub fn init(student: &[Tensor], decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(invalid(format!("EMA decay {decay} outside [0, 1]")));
        }
        Ok(Self {
            decay,
            teacher: student.iter().map(Tensor::detached).collect(),
            step_count: 0,
        })
    }

    pub fn from_parts(decay: f64, teacher: Vec<Tensor>, step_count: u64) -> Result<Self> {
        let mut s = Self::init(&teacher, decay)?;
        s.step_count = step_count;
        Ok(s)
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn teacher(&self) -> &[Tensor] {
        &self.teacher
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// `teacher <- decay * teacher + (1 - decay) * student`, elementwise.
    pub fn update(&mut self, student: &[Tensor]) -> Result<()> {
        if student.len() != self.teacher.len() {
            return Err(invalid(format!(
                "EMA update: {} student tensors for {} teacher tensors",
                student.len(),
                self.teacher.len()
            )));
        }
        for (t, s) in self.teacher.iter().zip(student) {
            if t.shape() != s.shape() {
                return Err(Error::Shape {
                    op: "ema_update",
                    lhs: t.shape().to_vec(),
                    rhs: s.shape().to_vec(),
                });
            }
        }
        let d = self.decay;
        for (t, s) in self.teacher.iter_mut().zip(student) {
            for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
                *tv = d * *tv + (1.0 - d) * sv;
            }
        }
        self.step_count += 1;
        Ok(())
    }
}
