//! Parameter budgets and efficiency ratios.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterKind, Phase, INVERTIBLE_PREFIX};
use crate::assembly::ModelAssembly;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Backbone,
    LanguageAdapters,
    InvertibleAdapters,
    TaskAdapters,
    Heads,
    Decoder,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Backbone,
        Component::LanguageAdapters,
        Component::InvertibleAdapters,
        Component::TaskAdapters,
        Component::Heads,
        Component::Decoder,
    ];

    pub fn of(name: &str) -> Component {
        let lang = AdapterKind::Language.prefix();
        let task = AdapterKind::Task.prefix();
        if name.starts_with(lang) {
            Component::LanguageAdapters
        } else if name.starts_with(task) {
            Component::TaskAdapters
        } else if name.starts_with(INVERTIBLE_PREFIX) {
            Component::InvertibleAdapters
        } else if name.starts_with("head.") {
            Component::Heads
        } else if name.starts_with("decoder.") {
            Component::Decoder
        } else {
            Component::Backbone
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Backbone => "backbone",
            Component::LanguageAdapters => "language_adapters",
            Component::InvertibleAdapters => "invertible_adapters",
            Component::TaskAdapters => "task_adapters",
            Component::Heads => "heads",
            Component::Decoder => "decoder",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentCount {
    pub total: usize,
    pub trainable: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub phase: Phase,
    pub total: usize,
    pub trainable: usize,
    pub components: BTreeMap<Component, ComponentCount>,
    /// Wall-clock seconds per executed phase.
    pub phase_seconds: BTreeMap<String, f64>,
}

impl BudgetReport {
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total.max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("phase,component,total,trainable\n");
        for (c, n) in &self.components {
            let _ = writeln!(s, "{},{},{},{}", self.phase, c.name(), n.total, n.trainable);
        }
        let _ = writeln!(s, "{},all,{},{}", self.phase, self.total, self.trainable);
        s
    }

    pub fn timings_csv(&self) -> String {
        let mut s = String::from("phase,seconds\n");
        for (p, t) in &self.phase_seconds {
            let _ = writeln!(s, "{p},{t:.3}");
        }
        s
    }
}

/// Exact enumeration of every parameter tensor, split by what `phase`
/// would train.
pub fn parameter_budget(asm: &ModelAssembly, phase: Phase) -> BudgetReport {
    let mut components: BTreeMap<Component, ComponentCount> = BTreeMap::new();
    let (mut total, mut trainable) = (0, 0);
    for (name, t) in asm.params().iter() {
        let e = components.entry(Component::of(name)).or_default();
        e.total += t.numel();
        total += t.numel();
        if phase.is_trainable(name) {
            e.trainable += t.numel();
            trainable += t.numel();
        }
    }
    BudgetReport {
        phase,
        total,
        trainable,
        components,
        phase_seconds: BTreeMap::new(),
    }
}

/// `L · (h·d + d + d·h + h)`.
pub fn adapter_closed_form(hidden: usize, bottleneck: usize, layers: usize) -> usize {
    layers * (hidden * bottleneck + bottleneck + bottleneck * hidden + hidden)
}

pub fn efficiency_ratio(baseline_trainable: f64, adapter_trainable: f64) -> Result<f64> {
    if !(adapter_trainable > 0.0) || !(baseline_trainable > 0.0) {
        return Err(Error::Input("parameter counts must be positive".into()));
    }
    Ok(baseline_trainable / adapter_trainable)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_matches_reported_scale() {
        assert_eq!(adapter_closed_form(768, 48, 12), 894_528);
    }

    #[test]
    fn ratios() {
        assert!((efficiency_ratio(110e6, 0.9e6).unwrap() - 122.2).abs() < 0.1);
        assert!((efficiency_ratio(110e6, 9.46e6 - 7.39e6).unwrap() - 53.0).abs() < 0.2);
        assert_eq!(efficiency_ratio(5.0, 5.0).unwrap(), 1.0);
        assert!(efficiency_ratio(5.0, 0.0).is_err());
    }

    #[test]
    fn components_classify_names() {
        assert_eq!(Component::of("adapters.lang.0.down.w"), Component::LanguageAdapters);
        assert_eq!(Component::of("adapters.inv.f.in.w"), Component::InvertibleAdapters);
        assert_eq!(Component::of("decoder.embed.tok"), Component::Decoder);
        assert_eq!(Component::of("backbone.layers.0.ln1.gain"), Component::Backbone);
    }
}
