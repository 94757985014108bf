//! A backbone plus mounted adapters, heads and a phase-specific trainable set.

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterKind, AdapterSet, AdapterStackPolicy, Phase, TrainabilityPartition, BottleneckAdapter};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::transformer::backbone_shapes;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskHead {
    None,
    PairClassifier,
    Summarizer,
}

#[derive(Clone, Debug)]
pub struct ModelAssembly {
    config: ModelConfig,
    params: ParamStore,
    policy: AdapterStackPolicy,
    partition: TrainabilityPartition,
    frozen_fingerprint: String,
}

/// Mounts `adapters` on `backbone` per `policy` and fixes the trainable set
/// for `phase`. `extras` carries task heads (`head.*`) and decoder weights
/// (`decoder.*`).
pub fn build_assembly(
    config: &ModelConfig,
    backbone: &ParamStore,
    adapters: &AdapterSet,
    policy: &AdapterStackPolicy,
    phase: Phase,
    extras: ParamStore,
) -> Result<ModelAssembly> {
    config.validate()?;
    let h = config.hidden_size;
    if policy.num_layers() != config.num_layers || policy.task.len() != config.num_layers {
        return Err(Error::Config(format!(
            "policy covers {} layers, model has {}",
            policy.num_layers(),
            config.num_layers
        )));
    }
    if policy.drop_last_k > config.num_layers {
        return Err(Error::Config("drop_last_k exceeds layer count".into()));
    }
    if phase == Phase::LAdapterMlm && (policy.any_task() || !adapters.task.is_empty()) {
        return Err(Error::Config("task adapters cannot be present in the l_adapter_mlm phase".into()));
    }

    let mut params = ParamStore::new();
    for (name, shape) in backbone_shapes(config) {
        let t = backbone.get(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::shape("backbone", t.shape(), &shape));
        }
        params.insert(name, t.clone());
    }

    let mount = |kind: AdapterKind, flags: &[bool], store: &mut ParamStore| -> Result<()> {
        let source = match kind {
            AdapterKind::Language => &adapters.language,
            AdapterKind::Task => &adapters.task,
        };
        for (l, &on) in flags.iter().enumerate() {
            if !on {
                continue;
            }
            let a: &BottleneckAdapter = source
                .get(&l)
                .ok_or_else(|| Error::Config(format!("policy mounts a {kind:?} adapter at layer {l} but none given")))?;
            a.validate()?;
            if a.kind != kind || a.hidden() != h {
                return Err(Error::Config(format!(
                    "{kind:?} adapter at layer {l} has hidden size {} (model {h})",
                    a.hidden()
                )));
            }
            a.write_into(store, l);
        }
        Ok(())
    };
    mount(AdapterKind::Language, &policy.language, &mut params)?;
    mount(AdapterKind::Task, &policy.task, &mut params)?;

    if let Some(inv) = &adapters.invertible {
        if inv.hidden() != h {
            return Err(Error::Config(format!("invertible adapter width {} != {h}", inv.hidden())));
        }
        inv.write_into(&mut params);
    }

    for (name, t) in extras.iter() {
        if !(name.starts_with("head.") || name.starts_with("decoder.")) {
            return Err(Error::Config(format!("unexpected extra parameter {name}")));
        }
        params.insert(name, t.clone());
    }

    let partition = TrainabilityPartition::compute(phase, &params);
    let mut asm = ModelAssembly {
        config: config.clone(),
        params,
        policy: policy.clone(),
        partition,
        frozen_fingerprint: String::new(),
    };
    asm.refresh_fingerprint();
    Ok(asm)
}

impl ModelAssembly {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Direct mutable access; frozen-set changes are caught by [`Self::verify_frozen`].
    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn policy(&self) -> &AdapterStackPolicy {
        &self.policy
    }

    pub fn partition(&self) -> &TrainabilityPartition {
        &self.partition
    }

    pub fn phase(&self) -> Phase {
        self.partition.phase
    }

    pub fn has_adapter(&self, kind: AdapterKind, layer: usize) -> bool {
        self.params.contains(&format!("{}.{layer}.down.w", kind.prefix()))
    }

    pub fn has_invertible(&self) -> bool {
        self.params.contains("adapters.inv.f.in.w")
    }

    pub fn has_decoder(&self) -> bool {
        self.params.contains("decoder.embed.tok")
    }

    pub fn has_pair_head(&self) -> bool {
        self.params.contains("head.cls.w")
    }

    pub fn frozen_fingerprint(&self) -> &str {
        &self.frozen_fingerprint
    }

    pub fn current_frozen_fingerprint(&self) -> String {
        self.params.fingerprint(self.partition.frozen.iter().map(String::as_str))
    }

    pub fn refresh_fingerprint(&mut self) {
        self.frozen_fingerprint = self.current_frozen_fingerprint();
    }

    pub fn verify_frozen(&self) -> Result<()> {
        if self.current_frozen_fingerprint() != self.frozen_fingerprint {
            return Err(Error::FreezeViolation(self.phase().to_string()));
        }
        Ok(())
    }

    /// Everything that is not backbone: adapters, heads and decoder.
    pub fn pluggable_params(&self) -> ParamStore {
        let mut out = self.params.subset("adapters.");
        out.extend(self.params.subset("head."));
        out.extend(self.params.subset("decoder."));
        out
    }

    pub fn backbone_params(&self) -> ParamStore {
        self.params.subset("backbone.")
    }

    pub fn adapter_set(&self) -> Result<AdapterSet> {
        AdapterSet::from_store(&self.params)
    }

    /// Overwrites existing parameters with same-named, same-shaped tensors
    /// from `store`, then re-records the frozen fingerprint.
    pub fn load_params(&mut self, store: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for (name, t) in store.iter() {
            if let Ok(dst) = self.params.get_mut(name) {
                if dst.shape() != t.shape() {
                    return Err(Error::shape("load_params", dst.shape(), t.shape()));
                }
                *dst = t.clone();
                n += 1;
            }
        }
        self.refresh_fingerprint();
        Ok(n)
    }

    pub fn total_params(&self) -> usize {
        self.params.count()
    }

    pub fn trainable_params(&self) -> usize {
        self.partition.trainable_count(&self.params)
    }
}
