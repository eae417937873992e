//! Head checkpoints: every named parameter (trainable or buffer) in visit order.

use crate::container::{Container, DType};
use crate::error::{Error, Result};
use crate::head::{Head, HeadConfig};
use crate::param::HasParams;
use std::path::Path;

pub fn head_to_container(head: &Head) -> Result<Container> {
    let mut c = Container {
        meta: serde_json::json!({ "head": serde_json::to_value(&head.config)? }),
        ..Default::default()
    };
    head.visit_params("", &mut |name, p| {
        c.push(name, p.dims.clone(), DType::F64, p.value.clone())
    });
    Ok(c)
}

pub fn save_head(path: &Path, head: &Head) -> Result<()> {
    head_to_container(head)?.write(path)
}

/// Head configuration recorded in a checkpoint.
pub fn stored_config(c: &Container) -> Result<HeadConfig> {
    let v = c
        .meta
        .get("head")
        .ok_or_else(|| Error::Checkpoint("no head configuration in checkpoint".into()))?;
    Ok(serde_json::from_value(v.clone())?)
}

/// Copies checkpoint values into `head`, requiring the same names, order and dims.
pub fn load_into(head: &mut Head, c: &Container) -> Result<()> {
    let mut index = 0;
    let mut failure: Option<Error> = None;
    head.visit_params_mut("", &mut |name, p| {
        if failure.is_some() {
            return;
        }
        match c.tensors.get(index) {
            None => {
                failure = Some(Error::Checkpoint(format!(
                    "parameter `{name}` missing from checkpoint"
                )))
            }
            Some((stored, dims, _, values)) => {
                if stored != name {
                    failure = Some(Error::Checkpoint(format!(
                        "first mismatched parameter: head has `{name}`, checkpoint has `{stored}`"
                    )));
                } else if *dims != p.dims {
                    failure = Some(Error::Checkpoint(format!(
                        "first mismatched parameter: `{name}` has dims {:?} in the head, {dims:?} in the checkpoint",
                        p.dims
                    )));
                } else {
                    p.value.copy_from_slice(values);
                }
            }
        }
        index += 1;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some((extra, ..)) = c.tensors.get(index) {
        return Err(Error::Checkpoint(format!(
            "first mismatched parameter: checkpoint has extra `{extra}`"
        )));
    }
    Ok(())
}

pub fn load_head(path: &Path, head: &mut Head) -> Result<()> {
    load_into(head, &Container::read(path)?)
}
