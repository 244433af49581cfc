//! Where to fine-tune: grid sweeps over (layer, selector), selection of the
//! best location, and transfer of a location to a model of another depth.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{EncodedEdit, EncodedProbes};
use crate::editor::{edit_breadth_first, Pipeline, PipelineConfig};
use crate::error::{Error, Result};
use crate::eval::{self, Baseline};
use crate::model::{ParamLocation, Selector, TransformerLM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub location: ParamLocation,
    pub reliability: f64,
    pub generalization: f64,
    pub ppl_ratio: f64,
    pub fact_acc: f64,
    pub sec_per_edit: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub result: SweepResult,
    /// Hash of the restored model before each row was edited.
    pub restored_hashes: Vec<String>,
    pub base_hash: String,
}

/// Edits a fresh copy of `base` at every location with the breadth-first
/// pipeline and records the four metrics. Rows follow `locations` order.
pub fn sweep(
    base: &TransformerLM,
    edits: &[EncodedEdit],
    probes: &EncodedProbes,
    baseline: &Baseline,
    template: &PipelineConfig,
    locations: &[ParamLocation],
) -> Result<SweepOutcome> {
    let base_hash = base.hash();
    if baseline.model_hash != base_hash {
        return Err(Error::Sweep(
            "baseline was measured on a different checkpoint than the sweep base".into(),
        ));
    }
    if template.pipeline != Pipeline::BreadthFirst {
        return Err(Error::Sweep("sweeps use the breadth-first pipeline".into()));
    }
    for loc in locations {
        if loc.layer_index >= base.config().n_layers {
            return Err(Error::Sweep(format!("location {loc} is outside the model")));
        }
    }
    let shards = [edits.to_vec()];
    let mut rows = Vec::with_capacity(locations.len());
    let mut restored_hashes = Vec::with_capacity(locations.len());
    for &location in locations {
        let mut model = base.clone();
        restored_hashes.push(model.hash());
        let cfg = PipelineConfig {
            location,
            ..template.clone()
        };
        let out = edit_breadth_first(&mut model, &shards, &cfg)?;
        let cap = eval::capability(&model, probes, Some(baseline))?;
        rows.push(SweepRow {
            location,
            reliability: eval::reliability(&model, edits)?,
            generalization: eval::generalization(&model, edits)?,
            ppl_ratio: cap.ppl_ratio,
            fact_acc: cap.heldout_fact_acc_pct,
            sec_per_edit: out.seconds_per_edit,
        });
    }
    Ok(SweepOutcome {
        result: SweepResult { rows },
        restored_hashes,
        base_hash,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionRule {
    /// Reliability floor as a fraction.
    pub min_reliability: f64,
}

impl Default for SelectionRule {
    fn default() -> Self {
        Self {
            min_reliability: 0.98,
        }
    }
}

fn selector_rank(s: Selector) -> usize {
    Selector::ALL.iter().position(|x| *x == s).expect("listed")
}

/// Capability first (lowest perplexity ratio), then generalization, then
/// the lower layer. Selector order breaks any remaining tie so the choice
/// never depends on row order.
fn preference(a: &SweepRow, b: &SweepRow) -> Ordering {
    a.ppl_ratio
        .total_cmp(&b.ppl_ratio)
        .then_with(|| b.generalization.total_cmp(&a.generalization))
        .then_with(|| a.location.layer_index.cmp(&b.location.layer_index))
        .then_with(|| selector_rank(a.location.selector).cmp(&selector_rank(b.location.selector)))
}

/// Picks a location among rows meeting the reliability floor; if none
/// does, among the rows with the highest reliability.
pub fn select_location(sweep: &SweepResult, rule: &SelectionRule) -> Result<ParamLocation> {
    if !(rule.min_reliability > 0.0 && rule.min_reliability <= 1.0) {
        return Err(Error::Selection(format!(
            "min_reliability must be in (0, 1], got {}",
            rule.min_reliability
        )));
    }
    if sweep.rows.is_empty() {
        return Err(Error::Selection("empty sweep".into()));
    }
    let floor = rule.min_reliability * 100.0;
    let mut eligible: Vec<&SweepRow> = sweep.rows.iter().filter(|r| r.reliability >= floor).collect();
    if eligible.is_empty() {
        let best = sweep
            .rows
            .iter()
            .map(|r| r.reliability)
            .fold(f64::NEG_INFINITY, f64::max);
        eligible = sweep.rows.iter().filter(|r| r.reliability == best).collect();
    }
    Ok(eligible
        .into_iter()
        .min_by(|a, b| preference(a, b))
        .expect("nonempty")
        .location)
}

/// Reuses the same absolute layer index in the target model.
pub fn default_position(source: ParamLocation, target_n_layers: usize) -> Result<ParamLocation> {
    if source.layer_index >= target_n_layers {
        return Err(Error::Location(format!(
            "layer {} does not exist in a {target_n_layers}-layer model",
            source.layer_index
        )));
    }
    Ok(source)
}

/// Keeps the relative depth: with 1-based ordinals,
/// `round(target · ordinal / source)`, halves rounded away from zero and
/// clamped to `[1, target]`.
pub fn proportional_position(
    source: ParamLocation,
    source_n_layers: usize,
    target_n_layers: usize,
) -> Result<ParamLocation> {
    if source_n_layers == 0 || target_n_layers == 0 {
        return Err(Error::Argument("layer counts must be positive".into()));
    }
    if source.layer_index >= source_n_layers {
        return Err(Error::Location(format!(
            "layer {} does not exist in a {source_n_layers}-layer model",
            source.layer_index
        )));
    }
    let ordinal = source.layer_index + 1;
    // Exact integer rounding of target·ordinal/source, halves upward.
    let num = target_n_layers * ordinal;
    let rounded = (2 * num + source_n_layers) / (2 * source_n_layers);
    let target_ordinal = rounded.clamp(1, target_n_layers);
    Ok(ParamLocation::new(target_ordinal - 1, source.selector))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(layer: usize, sel: Selector, rel: f64, gen: f64, ppl: f64) -> SweepRow {
        SweepRow {
            location: ParamLocation::new(layer, sel),
            reliability: rel,
            generalization: gen,
            ppl_ratio: ppl,
            fact_acc: 90.0,
            sec_per_edit: 0.01,
        }
    }

    #[test]
    fn singleton_sweep_selects_its_row() {
        let s = SweepResult {
            rows: vec![row(3, Selector::FullMlp, 10.0, 5.0, 2.0)],
        };
        assert_eq!(
            select_location(&s, &SelectionRule::default()).unwrap(),
            ParamLocation::new(3, Selector::FullMlp)
        );
    }

    #[test]
    fn generalization_breaks_capability_ties() {
        let s = SweepResult {
            rows: vec![
                row(1, Selector::MlpUp, 99.0, 60.0, 1.1),
                row(2, Selector::MlpDown, 99.0, 70.0, 1.1),
            ],
        };
        assert_eq!(
            select_location(&s, &SelectionRule::default()).unwrap(),
            ParamLocation::new(2, Selector::MlpDown)
        );
    }

    #[test]
    fn empty_sweep_and_bad_rules_are_errors() {
        assert!(matches!(
            select_location(&SweepResult::default(), &SelectionRule::default()),
            Err(Error::Selection(_))
        ));
        let s = SweepResult {
            rows: vec![row(0, Selector::MlpUp, 100.0, 0.0, 1.0)],
        };
        assert!(select_location(&s, &SelectionRule { min_reliability: 0.0 }).is_err());
    }

    #[test]
    fn proportional_examples() {
        let loc = |i| ParamLocation::new(i, Selector::MlpDown);
        assert_eq!(proportional_position(loc(6), 28, 80).unwrap(), loc(19));
        assert_eq!(proportional_position(loc(0), 28, 80).unwrap(), loc(2));
        assert_eq!(proportional_position(loc(5), 6, 6).unwrap(), loc(5));
        // 3 · 1 / 2 = 1.5 rounds away from zero to 2.
        assert_eq!(proportional_position(loc(0), 2, 3).unwrap(), loc(1));
        // Shrinking never drops below the first layer.
        assert_eq!(proportional_position(loc(0), 80, 4).unwrap(), loc(0));
        assert!(proportional_position(loc(0), 0, 4).is_err());
        assert!(proportional_position(loc(0), 4, 0).is_err());
        assert!(proportional_position(loc(4), 4, 8).is_err());
    }

    #[test]
    fn default_position_is_identity_within_bounds() {
        let l = ParamLocation::new(6, Selector::MlpDown);
        assert_eq!(default_position(l, 80).unwrap(), l);
        assert_eq!(default_position(l, 7).unwrap(), l);
        assert!(matches!(default_position(l, 4), Err(Error::Location(_))));
    }
}
