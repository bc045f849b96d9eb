//! One-axis ablation grids over a base configuration.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tempora_core::data::Scheme;
use tempora_core::interface::{Aggregation, InterfaceConfig, InterfaceVariant};
use tempora_core::moe::{MoeConfig, MoeMode};

use crate::config::RecipeConfig;
use crate::report::{aggregate, GridTable};
use crate::run::{run, EvalReport};
use crate::RecipeError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Axis {
    Interface,
    #[value(name = "S")]
    #[serde(rename = "S")]
    Submodules,
    #[value(name = "B")]
    #[serde(rename = "B")]
    Bank,
    MoeMode,
    #[value(name = "E")]
    #[serde(rename = "E")]
    Experts,
    #[value(name = "k")]
    #[serde(rename = "k")]
    TopK,
    Schemes,
}

impl Axis {
    /// Tables of the original study whose structure the grid follows.
    pub fn mirrors(self) -> &'static str {
        match self {
            Axis::Interface | Axis::Submodules => "Table 2, Table 3",
            Axis::Schemes => "Table 5, Table 6",
            Axis::Bank => "Table 7, Table 8",
            Axis::MoeMode | Axis::Experts | Axis::TopK => "Table 9, Table 10",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        match self {
            Axis::Interface => v(&[
                "linear",
                "linear_mean_pool",
                "qformer_nosa+mean_pool",
                "qformer_nosa+adaptive_pool",
                "qformer_nosa+esa",
                "qformer_sa",
            ]),
            Axis::Submodules => v(&["3", "6", "9", "12"]),
            Axis::Bank => v(&["0", "10", "20", "30", "40", "50", "60"]),
            Axis::MoeMode => v(&["dense", "sparse"]),
            Axis::Experts => v(&["2", "4", "8"]),
            Axis::TopK => v(&["1", "2"]),
            Axis::Schemes => v(&["none", "VC", "MC", "MG", "DC", "VC+MC+MG+DC"]),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Interface => "interface",
            Axis::Submodules => "S",
            Axis::Bank => "B",
            Axis::MoeMode => "moe_mode",
            Axis::Experts => "E",
            Axis::TopK => "k",
            Axis::Schemes => "schemes",
        })
    }
}

impl FromStr for Axis {
    type Err = RecipeError;

    fn from_str(s: &str) -> Result<Self, RecipeError> {
        <Axis as clap::ValueEnum>::from_str(s, false).map_err(|_| RecipeError::Config(format!("unknown axis `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub label: String,
    pub config: RecipeConfig,
}

fn parse_usize(axis: Axis, v: &str) -> Result<usize, RecipeError> {
    v.parse()
        .map_err(|_| RecipeError::Config(format!("axis {axis}: `{v}` is not an integer")))
}

fn require(cond: bool, axis: Axis, what: &str) -> Result<(), RecipeError> {
    if cond {
        Ok(())
    } else {
        Err(RecipeError::Config(format!("axis {axis} needs {what}")))
    }
}

fn interface_point(base: &RecipeConfig, v: &str) -> Result<RecipeConfig, RecipeError> {
    let s = if base.interface.is_qformer() { base.interface.submodules } else { 2 };
    let q = base.interface.num_query_tokens;
    let (step, iface) = match v {
        "linear" => (0, InterfaceConfig::linear()),
        "linear_mean_pool" => (0, InterfaceConfig::linear_mean_pool()),
        "qformer_sa" => (1, InterfaceConfig::qformer_sa(s).with_queries(q)),
        "qformer_sa+pretrained" => (
            1,
            InterfaceConfig {
                pretrained_init: true,
                ..InterfaceConfig::qformer_sa(s).with_queries(q)
            },
        ),
        other => {
            let agg = match other {
                "qformer_nosa+mean_pool" => Aggregation::MeanPool,
                "qformer_nosa+adaptive_pool" => Aggregation::AdaptivePool,
                "qformer_nosa+esa" => Aggregation::Esa,
                _ => return Err(RecipeError::Config(format!("unknown interface `{other}`"))),
            };
            (1, InterfaceConfig::qformer_nosa(s, agg).with_queries(q))
        }
    };
    Ok(RecipeConfig {
        step,
        interface: iface,
        ..base.clone()
    })
}

fn schemes_point(base: &RecipeConfig, v: &str) -> Result<RecipeConfig, RecipeError> {
    if v == "none" {
        return Ok(RecipeConfig {
            step: 1,
            schemes: Vec::new(),
            ..base.clone()
        });
    }
    let schemes = v
        .split('+')
        .map(|s| s.parse::<Scheme>().map_err(RecipeError::from))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RecipeConfig {
        schemes,
        ..base.clone()
    })
}

/// Expands `axis` over `values` (or the default grid) into configurations.
pub fn grid_points(base: &RecipeConfig, axis: Axis, values: Option<&[String]>) -> Result<Vec<GridPoint>, RecipeError> {
    let defaults = axis.default_values();
    let values = values.unwrap_or(&defaults);
    if values.is_empty() {
        return Err(RecipeError::Config(format!("axis {axis} has no values")));
    }
    let base_moe = base.moe.unwrap_or(MoeConfig::sparse(4, 1));
    match axis {
        Axis::Interface => require(base.step <= 1, axis, "a base config at step 0 or 1")?,
        Axis::Submodules => require(base.interface.is_qformer(), axis, "a Q-Former interface")?,
        Axis::Bank => require(base.step >= 3, axis, "a base config at step 3 or later")?,
        Axis::MoeMode | Axis::Experts | Axis::TopK => require(base.step == 4, axis, "a base config at step 4")?,
        Axis::Schemes => require(base.step == 2, axis, "a base config at step 2")?,
    }
    let mut points = Vec::with_capacity(values.len());
    for v in values {
        let v = v.trim();
        let config = match axis {
            Axis::Interface => interface_point(base, v)?,
            Axis::Submodules => {
                let mut c = base.clone();
                c.interface.submodules = parse_usize(axis, v)?;
                c
            }
            Axis::Bank => {
                let b = parse_usize(axis, v)?;
                RecipeConfig {
                    bank_capacity: (b > 0).then_some(b),
                    ..base.clone()
                }
            }
            Axis::MoeMode => {
                let mode = match v {
                    "dense" => MoeMode::Dense,
                    "sparse" => MoeMode::Sparse,
                    _ => return Err(RecipeError::Config(format!("unknown MoE mode `{v}`"))),
                };
                let moe = match mode {
                    MoeMode::Dense => MoeConfig::dense(base_moe.num_experts),
                    MoeMode::Sparse => MoeConfig::sparse(base_moe.num_experts, base_moe.top_k.min(base_moe.num_experts)),
                }
                .with_placement(base_moe.placement);
                RecipeConfig {
                    moe: Some(moe),
                    ..base.clone()
                }
            }
            Axis::Experts => {
                let e = parse_usize(axis, v)?;
                let moe = MoeConfig {
                    num_experts: e,
                    top_k: if base_moe.mode == MoeMode::Dense { e } else { base_moe.top_k },
                    ..base_moe
                };
                RecipeConfig {
                    moe: Some(moe),
                    ..base.clone()
                }
            }
            Axis::TopK => RecipeConfig {
                moe: Some(MoeConfig {
                    mode: MoeMode::Sparse,
                    top_k: parse_usize(axis, v)?,
                    ..base_moe
                }),
                ..base.clone()
            },
            Axis::Schemes => schemes_point(base, v)?,
        };
        let config = RecipeConfig {
            name: format!("{}[{axis}={v}]", base.name),
            ..config
        };
        config.validate()?;
        points.push(GridPoint {
            label: v.to_string(),
            config,
        });
    }
    Ok(points)
}

/// Label of an interface row, for tables over mixed configurations.
pub fn interface_label(c: &InterfaceConfig) -> String {
    match (c.variant, c.aggregation, c.temporal_pool) {
        (InterfaceVariant::Linear, _, false) => "linear".into(),
        (InterfaceVariant::Linear, _, true) => "linear_mean_pool".into(),
        (InterfaceVariant::QformerSa, _, _) => format!("qformer_sa(S={})", c.submodules),
        (InterfaceVariant::QformerNosa, a, _) => format!("qformer_nosa(S={})+{:?}", c.submodules, a),
    }
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub axis: Axis,
    pub points: Vec<GridPoint>,
    /// One report per (point, seed), points in order then seeds in order.
    pub reports: Vec<EvalReport>,
    pub table: GridTable,
}

/// Runs every grid point for every seed of the base configuration.
/// Workers run in parallel; results are ordered independently of scheduling.
pub fn ablation_grid(base: &RecipeConfig, axis: Axis, values: Option<&[String]>) -> Result<GridResult, RecipeError> {
    let points = grid_points(base, axis, values)?;
    let jobs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|p| base.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let reports = jobs
        .par_iter()
        .map(|&(p, seed)| run(&points[p].config, seed).map(|o| o.report))
        .collect::<Result<Vec<_>, _>>()?;
    let n = base.seeds.len();
    let rows = points
        .iter()
        .enumerate()
        .map(|(i, p)| aggregate(&p.label, &reports[i * n..(i + 1) * n]))
        .collect();
    let table = GridTable {
        mirrors: axis.mirrors().to_string(),
        axis: axis.to_string(),
        suite: base.data.suite.to_string(),
        rows,
    };
    Ok(GridResult {
        axis,
        points,
        reports,
        table,
    })
}
