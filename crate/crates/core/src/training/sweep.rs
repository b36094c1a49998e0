use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};

/// Values to try per hyperparameter; an empty list keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub learning_rate: Vec<f64>,
    pub lambda: Vec<f64>,
    pub beta: Vec<f64>,
    pub layer_decay: Vec<f64>,
    pub dropout: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    /// Stable identifier built from the swept values, usable as a directory
    /// name.
    pub name: String,
    pub config: TrainConfig,
}

/// Cartesian product of the grid over `base`, in row-major order of the
/// fields as declared. Every cell is validated.
pub fn expand_grid(base: &TrainConfig, grid: &SweepGrid) -> Result<Vec<SweepCell>> {
    type Setter = fn(&mut TrainConfig, f64);
    let axes: [(&str, &[f64], Setter); 5] = [
        ("lr", &grid.learning_rate, |c, v| c.learning_rate = v),
        ("lambda", &grid.lambda, |c, v| c.lambda = v),
        ("beta", &grid.beta, |c, v| c.beta = v),
        ("gamma", &grid.layer_decay, |c, v| c.layer_decay = v),
        ("dropout", &grid.dropout, |c, v| c.dropout = v),
    ];
    let mut cells = vec![(Vec::<String>::new(), base.clone())];
    for (label, values, set) in axes {
        if values.is_empty() {
            continue;
        }
        cells = cells
            .into_iter()
            .flat_map(|(name, cfg)| {
                values.iter().map(move |&v| {
                    let mut c = cfg.clone();
                    set(&mut c, v);
                    let mut n = name.clone();
                    n.push(format!("{label}={v}"));
                    (n, c)
                })
            })
            .collect();
    }
    cells
        .into_iter()
        .map(|(parts, config)| {
            config.validate()?;
            let name = if parts.is_empty() { "base".to_owned() } else { parts.join(",") };
            Ok(SweepCell { name, config })
        })
        .collect::<Result<Vec<_>>>()
        .and_then(|cells| {
            if cells.is_empty() {
                Err(Error::InvalidArgument("empty sweep".into()))
            } else {
                Ok(cells)
            }
        })
}
