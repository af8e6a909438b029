use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Section;
use crate::zoo::ModelGraph;

/// Per-layer trainability for one model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePlan {
    pub groups: Vec<String>,
    pub trainable: Vec<bool>,
}

impl FreezePlan {
    fn from_fn(model: &ModelGraph, f: impl Fn(usize, Section) -> bool) -> FreezePlan {
        let groups = model.graph.groups();
        FreezePlan {
            groups: groups.iter().map(|g| g.name.clone()).collect(),
            trainable: groups.iter().enumerate().map(|(i, g)| f(i, g.section)).collect(),
        }
    }

    pub fn all_trainable(model: &ModelGraph) -> FreezePlan {
        FreezePlan::from_fn(model, |_, _| true)
    }

    /// Feature extraction: backbone frozen, head trainable.
    pub fn freeze_backbone(model: &ModelGraph) -> FreezePlan {
        FreezePlan::from_fn(model, |_, s| s == Section::Head)
    }

    /// Freezes the first `k` backbone layers.
    pub fn freeze_prefix(model: &ModelGraph, k: usize) -> FreezePlan {
        FreezePlan::from_fn(model, |i, s| s == Section::Head || i >= k)
    }

    pub fn empty() -> FreezePlan {
        FreezePlan {
            groups: vec![],
            trainable: vec![],
        }
    }

    pub fn frozen_count(&self) -> usize {
        self.trainable.iter().filter(|t| !**t).count()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable.iter().filter(|t| **t).count()
    }

    /// Checks that the plan names every layer of `model` exactly once, in
    /// order, and keeps the head trainable.
    pub fn check(&self, model: &ModelGraph) -> Result<()> {
        let groups = model.graph.groups();
        if self.groups.len() != self.trainable.len() {
            return Err(Error::Plan("plan has mismatched name and flag lists".into()));
        }
        for g in groups {
            if !self.groups.contains(&g.name) {
                return Err(Error::Plan(format!("layer `{}` is not covered by the plan", g.name)));
            }
        }
        if self.groups.len() != groups.len() || self.groups.iter().zip(groups).any(|(a, b)| *a != b.name) {
            return Err(Error::Plan(
                "plan entries do not match the model's layers one to one".into(),
            ));
        }
        if self.trainable_count() == 0 {
            return Err(Error::Plan(
                "a plan that freezes every layer leaves nothing to train".into(),
            ));
        }
        if let Some(g) = groups
            .iter()
            .zip(&self.trainable)
            .find(|(g, t)| g.section == Section::Head && !**t)
        {
            return Err(Error::Plan(format!("head layer `{}` must stay trainable", g.0.name)));
        }
        Ok(())
    }
}

/// Attaches a validated plan; optimizer steps then leave frozen layers
/// bit-identical.
pub fn apply_freeze(mut model: ModelGraph, plan: &FreezePlan) -> Result<ModelGraph> {
    plan.check(&model)?;
    model.freeze = Some(plan.trainable.clone());
    Ok(model)
}
