// SPDX-License-Identifier: MIT OR Apache-2.0

//! Intervention specs and their validated, indexed form.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::DenseArray;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionSet {
    List(Vec<usize>),
    /// Every position at or after the bound.
    From(usize),
}

impl PositionSet {
    pub fn contains(&self, p: usize) -> bool {
        match self {
            Self::List(v) => v.contains(&p),
            Self::From(s) => p >= *s,
        }
    }

    fn max_listed(&self) -> Option<usize> {
        match self {
            Self::List(v) => v.iter().copied().max(),
            Self::From(s) => Some(*s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InterventionSpec {
    /// Overwrites pre-positional embedding rows; `values` is `(positions, d_model)`.
    ReplaceEmbedding { positions: Vec<usize>, values: DenseArray },
    /// Row `positions[i]` receives the row previously at `positions[permutation[i]]`.
    ShuffleTokens { positions: Vec<usize>, permutation: Vec<usize> },
    /// Additive −∞ on attention scores from `from` to `to` in `layers`.
    BlockAttention { layers: Vec<usize>, from: PositionSet, to: Vec<usize> },
    /// Overwrites a head's pre-projection output; `values` is `(positions, d_head)`.
    PatchHeadOutput {
        layer: usize,
        head: usize,
        positions: Vec<usize>,
        values: DenseArray,
    },
    ZeroHeadOutput { layer: usize, head: usize, positions: PositionSet },
}

#[derive(Debug, Clone, Default)]
pub(crate) struct HeadOps {
    pub patch: BTreeMap<usize, Vec<f64>>,
    pub zero: Vec<PositionSet>,
}

impl HeadOps {
    pub fn is_zeroed(&self, p: usize) -> bool {
        self.zero.iter().any(|z| z.contains(p))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub from: PositionSet,
    pub to: Vec<bool>,
}

/// Interventions after validation, indexed for the forward pass.
#[derive(Debug, Clone, Default)]
pub struct InterventionPlan {
    pub(crate) replace: BTreeMap<usize, Vec<f64>>,
    pub(crate) shuffles: Vec<(Vec<usize>, Vec<usize>)>,
    /// Per layer.
    pub(crate) blocks: Vec<Vec<Block>>,
    pub(crate) heads: HashMap<(usize, usize), HeadOps>,
}

fn invalid(m: String) -> Error {
    Error::InvalidIntervention(m)
}

fn check_positions(positions: &[usize], max_seq: usize, what: &str) -> Result<()> {
    if let Some(&p) = positions.iter().find(|&&p| p >= max_seq) {
        return Err(invalid(format!("{what}: position {p} beyond max_seq {max_seq}")));
    }
    let mut sorted = positions.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(invalid(format!("{what}: repeated position")));
    }
    Ok(())
}

impl InterventionPlan {
    pub fn new(config: &ModelConfig, specs: &[InterventionSpec]) -> Result<Self> {
        let mut plan = Self {
            blocks: vec![Vec::new(); config.n_layers],
            ..Self::default()
        };
        for spec in specs {
            plan.add(config, spec)?;
        }
        Ok(plan)
    }

    /// The plan with no interventions.
    pub fn default_for(config: &ModelConfig) -> Self {
        Self {
            blocks: vec![Vec::new(); config.n_layers],
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.replace.is_empty() && self.shuffles.is_empty() && self.blocks.iter().all(Vec::is_empty) && self.heads.is_empty()
    }

    fn head_ops(&mut self, config: &ModelConfig, layer: usize, head: usize) -> Result<&mut HeadOps> {
        if layer >= config.n_layers || head >= config.n_heads {
            return Err(invalid(format!("head ({layer}, {head}) outside the model")));
        }
        Ok(self.heads.entry((layer, head)).or_default())
    }

    fn add(&mut self, config: &ModelConfig, spec: &InterventionSpec) -> Result<()> {
        match spec {
            InterventionSpec::ReplaceEmbedding { positions, values } => {
                check_positions(positions, config.max_seq, "replace_embedding")?;
                if values.shape() != [positions.len(), config.d_model] {
                    return Err(invalid(format!(
                        "replace_embedding values {:?} for {} positions",
                        values.shape(),
                        positions.len()
                    )));
                }
                for (i, &p) in positions.iter().enumerate() {
                    let row = values.row(i).to_vec();
                    match self.replace.get(&p) {
                        Some(prev) if *prev != row => {
                            return Err(Error::InterventionConflict(format!(
                                "two different embedding replacements at position {p}"
                            )))
                        }
                        _ => {
                            self.replace.insert(p, row);
                        }
                    }
                }
            }
            InterventionSpec::ShuffleTokens { positions, permutation } => {
                check_positions(positions, config.max_seq, "shuffle_tokens")?;
                let mut seen = vec![false; positions.len()];
                if permutation.len() != positions.len() {
                    return Err(invalid("shuffle permutation length mismatch".into()));
                }
                for &i in permutation {
                    if i >= seen.len() || seen[i] {
                        return Err(invalid("shuffle permutation is not a permutation".into()));
                    }
                    seen[i] = true;
                }
                self.shuffles.push((positions.clone(), permutation.clone()));
            }
            InterventionSpec::BlockAttention { layers, from, to } => {
                check_positions(to, config.max_seq, "block_attention")?;
                if from.max_listed().is_some_and(|p| p >= config.max_seq) {
                    return Err(invalid("block_attention source beyond max_seq".into()));
                }
                let mut mask = vec![false; config.max_seq];
                to.iter().for_each(|&p| mask[p] = true);
                for &l in layers {
                    if l >= config.n_layers {
                        return Err(invalid(format!("layer {l} outside the model")));
                    }
                    self.blocks[l].push(Block {
                        from: from.clone(),
                        to: mask.clone(),
                    });
                }
            }
            InterventionSpec::PatchHeadOutput {
                layer,
                head,
                positions,
                values,
            } => {
                check_positions(positions, config.max_seq, "patch_head_output")?;
                if values.shape() != [positions.len(), config.d_head()] {
                    return Err(invalid(format!(
                        "patch values {:?} for {} positions",
                        values.shape(),
                        positions.len()
                    )));
                }
                let ops = self.head_ops(config, *layer, *head)?;
                for (i, &p) in positions.iter().enumerate() {
                    if ops.is_zeroed(p) {
                        return Err(Error::InterventionConflict(format!(
                            "patch and zero on head ({layer}, {head}) position {p}"
                        )));
                    }
                    let row = values.row(i).to_vec();
                    match ops.patch.get(&p) {
                        Some(prev) if *prev != row => {
                            return Err(Error::InterventionConflict(format!(
                                "two different patches on head ({layer}, {head}) position {p}"
                            )))
                        }
                        _ => {
                            ops.patch.insert(p, row);
                        }
                    }
                }
            }
            InterventionSpec::ZeroHeadOutput { layer, head, positions } => {
                if positions.max_listed().is_some_and(|p| p >= config.max_seq) {
                    return Err(invalid("zero_head_output position beyond max_seq".into()));
                }
                let ops = self.head_ops(config, *layer, *head)?;
                if let Some(p) = ops.patch.keys().find(|&&p| positions.contains(p)) {
                    return Err(Error::InterventionConflict(format!(
                        "patch and zero on head ({layer}, {head}) position {p}"
                    )));
                }
                ops.zero.push(positions.clone());
            }
        }
        Ok(())
    }

    pub(crate) fn blocked(&self, layer: usize, from: usize, to: usize) -> bool {
        self.blocks[layer].iter().any(|b| b.to[to] && b.from.contains(from))
    }

    /// Applies replacements and shuffles to pre-positional rows covering `start..`.
    pub(crate) fn apply_embeddings(&self, rows: &mut DenseArray, start: usize) -> Result<()> {
        let end = start + rows.rows();
        for (&p, v) in self.replace.range(start..end) {
            rows.row_mut(p - start).copy_from_slice(v);
        }
        for (positions, perm) in &self.shuffles {
            let inside = positions.iter().filter(|p| (start..end).contains(*p)).count();
            if inside == 0 {
                continue;
            }
            if inside != positions.len() {
                return Err(invalid("shuffle spans positions outside the evaluated rows".into()));
            }
            let old: Vec<Vec<f64>> = positions.iter().map(|&p| rows.row(p - start).to_vec()).collect();
            for (i, &p) in positions.iter().enumerate() {
                rows.row_mut(p - start).copy_from_slice(&old[perm[i]]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn patch_and_zero_on_same_coordinate_conflict() {
        let c = cfg();
        let patch = InterventionSpec::PatchHeadOutput {
            layer: 1,
            head: 2,
            positions: vec![5],
            values: DenseArray::zeros(&[1, c.d_head()]),
        };
        let zero = InterventionSpec::ZeroHeadOutput {
            layer: 1,
            head: 2,
            positions: PositionSet::From(3),
        };
        for specs in [vec![patch.clone(), zero.clone()], vec![zero.clone(), patch.clone()]] {
            assert!(matches!(
                InterventionPlan::new(&c, &specs),
                Err(Error::InterventionConflict(_))
            ));
        }
        let other = InterventionSpec::ZeroHeadOutput {
            layer: 1,
            head: 3,
            positions: PositionSet::From(3),
        };
        assert!(InterventionPlan::new(&c, &[patch, other]).is_ok());
    }

    #[test]
    fn out_of_bounds_rejected() {
        let c = cfg();
        let bad = [
            InterventionSpec::ZeroHeadOutput {
                layer: c.n_layers,
                head: 0,
                positions: PositionSet::From(0),
            },
            InterventionSpec::BlockAttention {
                layers: vec![0],
                from: PositionSet::List(vec![0]),
                to: vec![c.max_seq],
            },
            InterventionSpec::ReplaceEmbedding {
                positions: vec![0],
                values: DenseArray::zeros(&[1, 3]),
            },
            InterventionSpec::ShuffleTokens {
                positions: vec![0, 1],
                permutation: vec![0, 0],
            },
        ];
        for spec in bad {
            assert!(matches!(
                InterventionPlan::new(&c, &[spec]),
                Err(Error::InvalidIntervention(_))
            ));
        }
    }

    #[test]
    fn shuffle_moves_rows() {
        let c = cfg();
        let plan = InterventionPlan::new(
            &c,
            &[InterventionSpec::ShuffleTokens {
                positions: vec![1, 2, 3],
                permutation: vec![2, 0, 1],
            }],
        )
        .unwrap();
        let mut rows = DenseArray::from_rows(&(0..4).map(|i| vec![i as f64]).collect::<Vec<_>>()).unwrap();
        plan.apply_embeddings(&mut rows, 0).unwrap();
        assert_eq!(rows.data(), &[0.0, 3.0, 1.0, 2.0]);
    }
}
