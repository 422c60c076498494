//! Student, teacher and momentum buffers of a run, in a [`TensorFile`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ema::EmaState;
use crate::error::{Error, Result};
use crate::model::{Architecture, SegNet};
use crate::optim::Velocity;
use crate::tensor::Tensor;
use crate::tensorfile::TensorFile;
use crate::trainer::TrainState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    kind: String,
    step: usize,
    arch: Architecture,
    ema_decay: f64,
    ema_steps: u64,
}

const KIND: &str = "checkpoint";

pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    let meta = Meta {
        kind: KIND.into(),
        step: state.step,
        arch: state.student.arch().clone(),
        ema_decay: state.ema.decay(),
        ema_steps: state.ema.step_count(),
    };
    let mut f = TensorFile::new(serde_json::to_value(meta)?);
    let names = state.student.arch().param_names();
    for (n, t) in names.iter().zip(state.student.params()) {
        f.push(format!("student.{n}"), t.detached());
    }
    for (n, t) in names.iter().zip(state.ema.teacher()) {
        f.push(format!("teacher.{n}"), t.detached());
    }
    for (n, (v, p)) in names
        .iter()
        .zip(state.velocity.buffers().iter().zip(state.student.params()))
    {
        f.push(format!("velocity.{n}"), Tensor::new(p.shape(), v.clone())?);
    }
    f.save(path)
}

pub fn load(path: &Path) -> Result<TrainState> {
    let f = TensorFile::load(path)?;
    let meta: Meta =
        serde_json::from_value(f.meta.clone()).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if meta.kind != KIND {
        return Err(Error::Format(format!("expected a checkpoint, found {:?}", meta.kind)));
    }
    let names = meta.arch.param_names();
    let group = |prefix: &str| -> Result<Vec<Tensor>> {
        names
            .iter()
            .map(|n| {
                f.get(&format!("{prefix}.{n}"))
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {prefix}.{n}")))
            })
            .collect()
    };
    let student: Vec<Tensor> = group("student")?.into_iter().map(Tensor::with_grad).collect();
    let teacher = group("teacher")?;
    let velocity = group("velocity")?;
    let student = SegNet::from_params(meta.arch, student)?;
    let mut vel = Velocity::zeros_like(student.params());
    vel.load(velocity.into_iter().map(Tensor::into_data).collect())?;
    Ok(TrainState {
        ema: EmaState::from_parts(meta.ema_decay, teacher, meta.ema_steps)?,
        velocity: vel,
        student,
        step: meta.step,
    })
}
