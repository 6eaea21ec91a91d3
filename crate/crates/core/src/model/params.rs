//! Named, grouped parameter registry with a deterministic order.

use std::fmt;

use candle_core::{DType, Device, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    StaticEncoder,
    TimeEncoder,
    InputProjection,
    Transformer,
    Gcn,
    Film,
    Fusion,
    Gru,
    MultiBranch,
    Readout,
    NodeScaling,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 11] = [
        ParamGroup::StaticEncoder,
        ParamGroup::TimeEncoder,
        ParamGroup::InputProjection,
        ParamGroup::Transformer,
        ParamGroup::Gcn,
        ParamGroup::Film,
        ParamGroup::Fusion,
        ParamGroup::Gru,
        ParamGroup::MultiBranch,
        ParamGroup::Readout,
        ParamGroup::NodeScaling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::StaticEncoder => "static_encoder",
            ParamGroup::TimeEncoder => "time_encoder",
            ParamGroup::InputProjection => "input_projection",
            ParamGroup::Transformer => "transformer",
            ParamGroup::Gcn => "gcn",
            ParamGroup::Film => "film",
            ParamGroup::Fusion => "fusion",
            ParamGroup::Gru => "gru",
            ParamGroup::MultiBranch => "multi_branch",
            ParamGroup::Readout => "readout",
            ParamGroup::NodeScaling => "node_scaling",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub var: Var,
}

#[derive(Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            dtype,
            device,
            params: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn register(&mut self, name: String, group: ParamGroup, var: Var) -> Var {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            group,
            var: var.clone(),
        });
        var
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|p| p.var.clone()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }

    pub fn in_group(&self, group: ParamGroup) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(move |p| p.group == group)
    }
}
