//! Bottleneck language/task adapters, invertible embedding adapters, and the
//! policies deciding where adapters are mounted and what may train.
//!
//! A bottleneck adapter maps hidden state `x` and residual `r` to
//! `U·ReLU(D·x + b_d) + b_u + r`, with `D: h×d` and `U: d×h`. The up
//! projection starts at zero so a fresh adapter returns its residual exactly.
//!
//! When a task adapter is stacked on a language adapter in the same layer,
//! the language adapter's output is both the task adapter's input and its
//! residual, so a zero task adapter leaves the language adapter's effect
//! intact. Without a language adapter the task adapter sees `(h_l, r_l)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Language,
    Task,
}

impl AdapterKind {
    pub fn prefix(self) -> &'static str {
        match self {
            AdapterKind::Language => "adapters.lang",
            AdapterKind::Task => "adapters.task",
        }
    }
}

pub const INVERTIBLE_PREFIX: &str = "adapters.inv";

#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckAdapter {
    pub kind: AdapterKind,
    pub down: Tensor,
    pub down_bias: Tensor,
    pub up: Tensor,
    pub up_bias: Tensor,
}

impl BottleneckAdapter {
    /// Down projection uniform in `±1/√h`; up projection and both biases zero.
    pub fn new<R: Rng + ?Sized>(kind: AdapterKind, hidden: usize, bottleneck: usize, rng: &mut R) -> Result<Self> {
        if bottleneck == 0 || bottleneck >= hidden {
            return Err(Error::Config(format!(
                "adapter bottleneck {bottleneck} must be in 1..{hidden}"
            )));
        }
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            kind,
            down: Tensor::uniform(&[hidden, bottleneck], bound, rng),
            down_bias: Tensor::zeros(&[bottleneck]),
            up: Tensor::zeros(&[bottleneck, hidden]),
            up_bias: Tensor::zeros(&[hidden]),
        })
    }

    pub fn from_parts(kind: AdapterKind, down: Tensor, down_bias: Tensor, up: Tensor, up_bias: Tensor) -> Result<Self> {
        let a = Self {
            kind,
            down,
            down_bias,
            up,
            up_bias,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn hidden(&self) -> usize {
        self.down.shape()[0]
    }

    pub fn bottleneck(&self) -> usize {
        self.down.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let ds = self.down.shape();
        if ds.len() != 2 {
            return Err(Error::shape("adapter", ds, &[0, 0]));
        }
        let (h, d) = (ds[0], ds[1]);
        if self.up.shape() != [d, h] {
            return Err(Error::shape("adapter up", self.up.shape(), &[d, h]));
        }
        if self.down_bias.shape() != [d] || self.up_bias.shape() != [h] {
            return Err(Error::shape("adapter bias", self.down_bias.shape(), self.up_bias.shape()));
        }
        Ok(())
    }

    /// `h·d + d + d·h + h`.
    pub fn param_count(&self) -> usize {
        self.down.numel() + self.down_bias.numel() + self.up.numel() + self.up_bias.numel()
    }

    pub fn closed_form_count(hidden: usize, bottleneck: usize) -> usize {
        hidden * bottleneck + bottleneck + bottleneck * hidden + hidden
    }

    pub fn names(kind: AdapterKind, layer: usize) -> [String; 4] {
        let p = format!("{}.{layer}", kind.prefix());
        [
            format!("{p}.down.w"),
            format!("{p}.down.b"),
            format!("{p}.up.w"),
            format!("{p}.up.b"),
        ]
    }

    pub fn write_into(&self, store: &mut ParamStore, layer: usize) {
        let [dw, db, uw, ub] = Self::names(self.kind, layer);
        store.insert(dw, self.down.clone());
        store.insert(db, self.down_bias.clone());
        store.insert(uw, self.up.clone());
        store.insert(ub, self.up_bias.clone());
    }

    pub fn read_from(store: &ParamStore, kind: AdapterKind, layer: usize) -> Result<Self> {
        let [dw, db, uw, ub] = Self::names(kind, layer);
        Self::from_parts(
            kind,
            store.get(&dw)?.clone(),
            store.get(&db)?.clone(),
            store.get(&uw)?.clone(),
            store.get(&ub)?.clone(),
        )
    }
}

/// Tape form of one bottleneck block; parameters are resolved by name.
pub(crate) fn bottleneck_block<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<T>,
    kind: AdapterKind,
    layer: usize,
    input: Var,
    residual: Var,
) -> Result<Var> {
    let [dw, db, uw, ub] = BottleneckAdapter::names(kind, layer);
    let dw = binder.var(tape, &dw)?;
    let db = binder.var(tape, &db)?;
    let uw = binder.var(tape, &uw)?;
    let ub = binder.var(tape, &ub)?;
    let z = tape.matmul(input, dw)?;
    let z = tape.add_row(z, db)?;
    let z = tape.relu(z)?;
    let u = tape.matmul(z, uw)?;
    let u = tape.add_row(u, ub)?;
    tape.add(u, residual)
}

fn run_single(adapter: &BottleneckAdapter, input: &Tensor, residual: &Tensor) -> Result<Tensor> {
    adapter.validate()?;
    let h = adapter.hidden();
    if input.cols() != h || input.shape() != residual.shape() {
        return Err(Error::shape("adapter input", input.shape(), residual.shape()));
    }
    let input = as_matrix(input);
    let residual = as_matrix(residual);
    let mut store = ParamStore::new();
    adapter.write_into(&mut store, 0);
    let mut tape = Tape::<f32>::new();
    let mut binder = Binder::frozen(&store);
    let x = tape.constant(input.clone());
    let r = tape.constant(residual);
    let out = bottleneck_block(&mut tape, &mut binder, adapter.kind, 0, x, r)?;
    Ok(tape.value(out).clone())
}

fn as_matrix(t: &Tensor) -> Tensor {
    let c = t.cols();
    t.clone().reshape(vec![t.numel() / c, c]).expect("row view of a valid tensor")
}

/// `U(ReLU(D(h_l))) + r_l` for a language adapter.
pub fn language_adapter_forward(adapter: &BottleneckAdapter, h_l: &Tensor, r_l: &Tensor) -> Result<Tensor> {
    if adapter.kind != AdapterKind::Language {
        return Err(Error::Config("expected a language adapter".into()));
    }
    run_single(adapter, h_l, r_l)
}

/// `U(ReLU(D(l_out))) + r_l` for a task adapter; `l_out` is the language
/// adapter output of the same layer, or `h_l` where none is mounted.
pub fn task_adapter_forward(adapter: &BottleneckAdapter, l_out: &Tensor, r_l: &Tensor) -> Result<Tensor> {
    if adapter.kind != AdapterKind::Task {
        return Err(Error::Config("expected a task adapter".into()));
    }
    run_single(adapter, l_out, r_l)
}

/// Additive coupling over the two halves of an embedding vector:
/// `y1 = x1 + F(x2)`, `y2 = x2 + G(y1)`, with `F` and `G` one-hidden-layer
/// ReLU networks. The inverse peels the couplings off in reverse order.
#[derive(Clone, Debug, PartialEq)]
pub struct InvertibleAdapterPair {
    pub f: CouplingNet,
    pub g: CouplingNet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingNet {
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl CouplingNet {
    fn new<R: Rng + ?Sized>(half: usize, hidden: usize, zero_out: bool, rng: &mut R) -> Self {
        let b1 = 1.0 / (half as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        Self {
            w_in: Tensor::uniform(&[half, hidden], b1, rng),
            b_in: Tensor::zeros(&[hidden]),
            w_out: if zero_out {
                Tensor::zeros(&[hidden, half])
            } else {
                Tensor::uniform(&[hidden, half], b2, rng)
            },
            b_out: if zero_out {
                Tensor::zeros(&[half])
            } else {
                Tensor::uniform(&[half], b2, rng)
            },
        }
    }

    fn param_count(&self) -> usize {
        self.w_in.numel() + self.b_in.numel() + self.w_out.numel() + self.b_out.numel()
    }
}

fn inv_names(net: &str) -> [String; 4] {
    let p = format!("{INVERTIBLE_PREFIX}.{net}");
    [
        format!("{p}.in.w"),
        format!("{p}.in.b"),
        format!("{p}.out.w"),
        format!("{p}.out.b"),
    ]
}

fn check_even(hidden: usize) -> Result<()> {
    if hidden % 2 != 0 || hidden == 0 {
        return Err(Error::Config(format!(
            "invertible adapter needs an even feature size, got {hidden}"
        )));
    }
    Ok(())
}

impl InvertibleAdapterPair {
    /// Identity at construction: the output layers of both networks are zero.
    pub fn new<R: Rng + ?Sized>(hidden: usize, net_hidden: usize, rng: &mut R) -> Result<Self> {
        check_even(hidden)?;
        Ok(Self {
            f: CouplingNet::new(hidden / 2, net_hidden, true, rng),
            g: CouplingNet::new(hidden / 2, net_hidden, true, rng),
        })
    }

    /// Every weight random; used to exercise the inverse away from identity.
    pub fn random<R: Rng + ?Sized>(hidden: usize, net_hidden: usize, rng: &mut R) -> Result<Self> {
        check_even(hidden)?;
        Ok(Self {
            f: CouplingNet::new(hidden / 2, net_hidden, false, rng),
            g: CouplingNet::new(hidden / 2, net_hidden, false, rng),
        })
    }

    pub fn hidden(&self) -> usize {
        self.f.w_in.shape()[0] * 2
    }

    pub fn param_count(&self) -> usize {
        self.f.param_count() + self.g.param_count()
    }

    pub fn write_into(&self, store: &mut ParamStore) {
        for (net, key) in [(&self.f, "f"), (&self.g, "g")] {
            let [a, b, c, d] = inv_names(key);
            store.insert(a, net.w_in.clone());
            store.insert(b, net.b_in.clone());
            store.insert(c, net.w_out.clone());
            store.insert(d, net.b_out.clone());
        }
    }

    pub fn read_from(store: &ParamStore) -> Result<Self> {
        let read = |key: &str| -> Result<CouplingNet> {
            let [a, b, c, d] = inv_names(key);
            Ok(CouplingNet {
                w_in: store.get(&a)?.clone(),
                b_in: store.get(&b)?.clone(),
                w_out: store.get(&c)?.clone(),
                b_out: store.get(&d)?.clone(),
            })
        };
        Ok(Self {
            f: read("f")?,
            g: read("g")?,
        })
    }

    fn run(&self, x: &Tensor, inverse: bool) -> Result<Tensor> {
        let h = self.hidden();
        check_even(x.cols())?;
        if x.cols() != h {
            return Err(Error::shape("invertible adapter", x.shape(), &[h]));
        }
        let mut store = ParamStore::new();
        self.write_into(&mut store);
        let mut tape = Tape::<f32>::new();
        let mut binder = Binder::frozen(&store);
        let xv = tape.constant(as_matrix(x));
        let out = if inverse {
            invertible_inverse_block(&mut tape, &mut binder, xv)?
        } else {
            invertible_forward_block(&mut tape, &mut binder, xv)?
        };
        Ok(tape.value(out).clone())
    }
}

pub fn invertible_forward(pair: &InvertibleAdapterPair, x: &Tensor) -> Result<Tensor> {
    pair.run(x, false)
}

pub fn invertible_inverse(pair: &InvertibleAdapterPair, y: &Tensor) -> Result<Tensor> {
    pair.run(y, true)
}

fn coupling_net<T: Scalar>(tape: &mut Tape<T>, binder: &mut Binder<T>, key: &str, x: Var) -> Result<Var> {
    let [a, b, c, d] = inv_names(key);
    let w1 = binder.var(tape, &a)?;
    let b1 = binder.var(tape, &b)?;
    let w2 = binder.var(tape, &c)?;
    let b2 = binder.var(tape, &d)?;
    let z = tape.matmul(x, w1)?;
    let z = tape.add_row(z, b1)?;
    let z = tape.relu(z)?;
    let z = tape.matmul(z, w2)?;
    tape.add_row(z, b2)
}

fn halves<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
    let c = tape.value(x).cols();
    check_even(c)?;
    let parts = tape.split_cols(x, &[c / 2, c / 2])?;
    Ok((parts[0], parts[1]))
}

pub(crate) fn invertible_forward_block<T: Scalar>(tape: &mut Tape<T>, binder: &mut Binder<T>, x: Var) -> Result<Var> {
    let (x1, x2) = halves(tape, x)?;
    let f = coupling_net(tape, binder, "f", x2)?;
    let y1 = tape.add(x1, f)?;
    let g = coupling_net(tape, binder, "g", y1)?;
    let y2 = tape.add(x2, g)?;
    tape.concat_cols(&[y1, y2])
}

pub(crate) fn invertible_inverse_block<T: Scalar>(tape: &mut Tape<T>, binder: &mut Binder<T>, y: Var) -> Result<Var> {
    let (y1, y2) = halves(tape, y)?;
    let g = coupling_net(tape, binder, "g", y1)?;
    let x2 = tape.sub(y2, g)?;
    let f = coupling_net(tape, binder, "f", x2)?;
    let x1 = tape.sub(y1, f)?;
    tape.concat_cols(&[x1, x2])
}

/// Training phase of an assembly; decides the trainable parameter set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    LAdapterMlm,
    TAdapterTask,
    FullFinetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::LAdapterMlm => "l_adapter_mlm",
            Phase::TAdapterTask => "t_adapter_task",
            Phase::FullFinetune => "full_finetune",
        })
    }
}

impl Phase {
    pub fn is_trainable(self, name: &str) -> bool {
        match self {
            Phase::LAdapterMlm => {
                name.starts_with("adapters.lang.") || name.starts_with("adapters.inv.")
            }
            Phase::TAdapterTask => {
                name.starts_with("adapters.task.") || name.starts_with("head.") || name.starts_with("decoder.")
            }
            Phase::FullFinetune => true,
        }
    }
}

/// Per-layer mounting flags. Layer indices are zero-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterStackPolicy {
    pub language: Vec<bool>,
    pub task: Vec<bool>,
    pub drop_last_k: usize,
}

impl AdapterStackPolicy {
    pub fn none(num_layers: usize) -> Self {
        Self {
            language: vec![false; num_layers],
            task: vec![false; num_layers],
            drop_last_k: 0,
        }
    }

    pub fn language_only(num_layers: usize) -> Self {
        Self {
            language: vec![true; num_layers],
            ..Self::none(num_layers)
        }
    }

    pub fn task_only(num_layers: usize) -> Self {
        Self {
            task: vec![true; num_layers],
            ..Self::none(num_layers)
        }
    }

    /// Language adapters stacked under task adapters in every layer.
    pub fn stacked(num_layers: usize) -> Self {
        Self {
            language: vec![true; num_layers],
            task: vec![true; num_layers],
            drop_last_k: 0,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.language.len()
    }

    pub fn any_task(&self) -> bool {
        self.task.iter().any(|&t| t)
    }

    /// Clears the language-adapter flags of the final `k` layers.
    pub fn apply_drop_policy(&self, k: usize) -> Result<Self> {
        let n = self.num_layers();
        if k > n {
            return Err(Error::Config(format!("cannot drop {k} of {n} layers")));
        }
        let mut out = self.clone();
        for flag in &mut out.language[n - k..] {
            *flag = false;
        }
        out.drop_last_k = k;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainabilityPartition {
    pub phase: Phase,
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

impl TrainabilityPartition {
    pub fn compute(phase: Phase, store: &ParamStore) -> Self {
        let (trainable, frozen) = store
            .names()
            .map(str::to_string)
            .partition(|n| phase.is_trainable(n));
        Self {
            phase,
            trainable,
            frozen,
        }
    }

    pub fn trainable_count(&self, store: &ParamStore) -> usize {
        self.trainable
            .iter()
            .filter_map(|n| store.get(n).ok())
            .map(Tensor::numel)
            .sum()
    }
}

/// Adapters available for mounting, keyed by zero-based layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdapterSet {
    pub language: BTreeMap<usize, BottleneckAdapter>,
    pub task: BTreeMap<usize, BottleneckAdapter>,
    pub invertible: Option<InvertibleAdapterPair>,
}

impl AdapterSet {
    /// Fresh language adapters on every layer plus, if requested, an
    /// invertible pair.
    pub fn fresh_language<R: Rng + ?Sized>(
        num_layers: usize,
        hidden: usize,
        bottleneck: usize,
        invertible_hidden: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut set = Self::default();
        for l in 0..num_layers {
            set.language
                .insert(l, BottleneckAdapter::new(AdapterKind::Language, hidden, bottleneck, rng)?);
        }
        if let Some(m) = invertible_hidden {
            set.invertible = Some(InvertibleAdapterPair::new(hidden, m, rng)?);
        }
        Ok(set)
    }

    pub fn add_fresh_task<R: Rng + ?Sized>(
        &mut self,
        num_layers: usize,
        hidden: usize,
        bottleneck: usize,
        rng: &mut R,
    ) -> Result<()> {
        for l in 0..num_layers {
            self.task
                .insert(l, BottleneckAdapter::new(AdapterKind::Task, hidden, bottleneck, rng)?);
        }
        Ok(())
    }

    /// Recovers whatever adapters a parameter store holds.
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let mut set = Self::default();
        for name in store.names() {
            for kind in [AdapterKind::Language, AdapterKind::Task] {
                let prefix = format!("{}.", kind.prefix());
                if let Some(rest) = name.strip_prefix(&prefix) {
                    if let Some(layer) = rest.strip_suffix(".down.w") {
                        let l: usize = layer
                            .parse()
                            .map_err(|_| Error::Config(format!("bad adapter name {name}")))?;
                        let a = BottleneckAdapter::read_from(store, kind, l)?;
                        match kind {
                            AdapterKind::Language => set.language.insert(l, a),
                            AdapterKind::Task => set.task.insert(l, a),
                        };
                    }
                }
            }
        }
        if store.contains(&format!("{INVERTIBLE_PREFIX}.f.in.w")) {
            set.invertible = Some(InvertibleAdapterPair::read_from(store)?);
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn hand_adapter(kind: AdapterKind, down: &[f32], up: &[f32]) -> BottleneckAdapter {
        BottleneckAdapter::from_parts(kind, t(&[2, 1], down), Tensor::zeros(&[1]), t(&[1, 2], up), Tensor::zeros(&[2]))
            .unwrap()
    }

    #[test]
    fn zero_up_projection_returns_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = BottleneckAdapter::new(AdapterKind::Language, 8, 2, &mut rng).unwrap();
        let h = Tensor::<f32>::uniform(&[3, 8], 1.0, &mut rng);
        let r = Tensor::<f32>::uniform(&[3, 8], 1.0, &mut rng);
        assert_eq!(language_adapter_forward(&a, &h, &r).unwrap(), r);
    }

    #[test]
    fn language_adapter_hand_examples() {
        // D maps [x, y] -> x - y; U spreads the bottleneck value at one half.
        let a = hand_adapter(AdapterKind::Language, &[1.0, -1.0], &[0.5, 0.5]);
        let zero = t(&[1, 2], &[0.0, 0.0]);
        let out = language_adapter_forward(&a, &t(&[1, 2], &[2.0, 1.0]), &zero).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
        let killed = language_adapter_forward(&a, &t(&[1, 2], &[1.0, 2.0]), &zero).unwrap();
        assert_eq!(killed.data(), &[0.0, 0.0]);
    }

    #[test]
    fn task_adapter_composes_on_language_output() {
        let la = hand_adapter(AdapterKind::Language, &[1.0, -1.0], &[0.5, 0.5]);
        let ta = hand_adapter(AdapterKind::Task, &[1.0, 0.0], &[1.0, 0.0]);
        let zero = t(&[1, 2], &[0.0, 0.0]);
        let l_out = language_adapter_forward(&la, &t(&[1, 2], &[2.0, 1.0]), &zero).unwrap();
        let out = task_adapter_forward(&ta, &l_out, &zero).unwrap();
        assert_eq!(out.data(), &[0.5, 0.0]);

        let zt = BottleneckAdapter::new(AdapterKind::Task, 2, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let r = t(&[1, 2], &[0.25, -3.0]);
        assert_eq!(task_adapter_forward(&zt, &l_out, &r).unwrap(), r);
    }

    #[test]
    fn dropped_layer_task_adapter_matches_single_adapter_algebra() {
        let down = [0.3f32, -0.7];
        let up = [1.5f32, -2.0];
        let ta = hand_adapter(AdapterKind::Task, &down, &up);
        let as_lang = hand_adapter(AdapterKind::Language, &down, &up);
        let h = t(&[1, 2], &[0.9, -0.4]);
        let r = t(&[1, 2], &[0.1, 0.2]);
        assert_eq!(
            task_adapter_forward(&ta, &h, &r).unwrap(),
            language_adapter_forward(&as_lang, &h, &r).unwrap()
        );
    }

    #[test]
    fn kind_and_shape_are_checked() {
        let la = hand_adapter(AdapterKind::Language, &[1.0, -1.0], &[0.5, 0.5]);
        let x = t(&[1, 2], &[0.0, 0.0]);
        assert!(task_adapter_forward(&la, &x, &x).is_err());
        let wide = t(&[1, 3], &[0.0, 0.0, 0.0]);
        assert!(matches!(language_adapter_forward(&la, &wide, &wide), Err(Error::Shape { .. })));
        assert!(BottleneckAdapter::new(AdapterKind::Task, 4, 4, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn invertible_identity_at_init_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pair = InvertibleAdapterPair::new(8, 4, &mut rng).unwrap();
        let x = Tensor::<f32>::uniform(&[5, 8], 2.0, &mut rng);
        assert_eq!(invertible_forward(&pair, &x).unwrap(), x);

        let pair = InvertibleAdapterPair::random(8, 4, &mut rng).unwrap();
        let y = invertible_forward(&pair, &x).unwrap();
        assert!(y.max_abs_diff(&x) > 1e-2);
        let back = invertible_inverse(&pair, &y).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn invertible_rejects_odd_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(matches!(InvertibleAdapterPair::new(7, 4, &mut rng), Err(Error::Config(_))));
        let pair = InvertibleAdapterPair::new(8, 4, &mut rng).unwrap();
        assert!(invertible_forward(&pair, &Tensor::zeros(&[1, 7])).is_err());
    }

    #[test]
    fn drop_policy() {
        let p = AdapterStackPolicy::stacked(4);
        assert_eq!(p.apply_drop_policy(0).unwrap(), p);
        let one = p.apply_drop_policy(1).unwrap();
        assert_eq!(one.language, vec![true, true, true, false]);
        assert_eq!(one.task, vec![true; 4]);
        let two = p.apply_drop_policy(2).unwrap();
        assert_eq!(two.language, vec![true, true, false, false]);
        assert!(p.apply_drop_policy(5).is_err());
    }

    #[test]
    fn adapter_set_round_trips_through_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut set = AdapterSet::fresh_language(3, 8, 2, Some(4), &mut rng).unwrap();
        set.add_fresh_task(3, 8, 2, &mut rng).unwrap();
        let mut store = ParamStore::new();
        for (l, a) in set.language.iter().chain(set.task.iter()) {
            a.write_into(&mut store, *l);
        }
        set.invertible.as_ref().unwrap().write_into(&mut store);
        assert_eq!(AdapterSet::from_store(&store).unwrap(), set);
    }
}
