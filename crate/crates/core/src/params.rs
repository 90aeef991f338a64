use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Whether an entry is optimized or only carried along (running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Trainable,
    Buffer,
}

/// Adaptive-moment state of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<E> {
    pub m: Tensor<E>,
    pub v: Tensor<E>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<E> {
    pub value: Tensor<E>,
    pub kind: ParamKind,
    pub moments: Option<Moments<E>>,
    pub step: u64,
}

/// Named tensors in lexicographic order, each with optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<E = f32> {
    entries: BTreeMap<String, ParamEntry<E>>,
}

/// Selects entries by name prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParamFilter {
    All,
    Nothing,
    Prefixes(Vec<String>),
}

impl ParamFilter {
    pub fn prefixes<S: AsRef<str>>(prefixes: &[S]) -> Self {
        ParamFilter::Prefixes(prefixes.iter().map(|p| p.as_ref().to_string()).collect())
    }

    pub fn accepts(&self, name: &str) -> bool {
        match self {
            ParamFilter::All => true,
            ParamFilter::Nothing => false,
            ParamFilter::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<E>) -> Result<()> {
        self.insert_kind(name.into(), value, ParamKind::Trainable)
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<E>) -> Result<()> {
        self.insert_kind(name.into(), value, ParamKind::Buffer)
    }

    fn insert_kind(&mut self, name: String, value: Tensor<E>, kind: ParamKind) -> Result<()> {
        if self.entries.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(
            name,
            ParamEntry {
                value,
                kind,
                moments: None,
                step: 0,
            },
        );
        Ok(())
    }

    /// Inserts a fully specified entry, replacing nothing.
    pub fn insert_entry(&mut self, name: impl Into<String>, entry: ParamEntry<E>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<E>> {
        self.entries.get(name)
    }

    /// Overwrites a value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!("`{name}`: {:?} vs {:?}", entry.value.shape(), value.shape()),
            ));
        }
        entry.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<E>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of trainable scalars.
    pub fn trainable_elements(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Copy of the values selected by `filter`, used to assert which groups a
    /// step may touch.
    pub fn snapshot(&self, filter: &ParamFilter) -> BTreeMap<String, Tensor<E>> {
        self.entries
            .iter()
            .filter(|(k, _)| filter.accepts(k))
            .map(|(k, e)| (k.clone(), e.value.clone()))
            .collect()
    }

    /// Applies running-statistic updates collected during a forward pass.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(String, Tensor<E>)>) -> Result<()> {
        for (name, value) in updates {
            match self.entries.get(&name) {
                Some(e) if e.kind == ParamKind::Buffer => self.set(&name, value)?,
                Some(_) => return Err(Error::Invalid(format!("`{name}` is not a buffer"))),
                None => return Err(Error::MissingParam(name)),
            }
        }
        Ok(())
    }

    pub fn cast<F: Scalar>(&self) -> ParamStore<F> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: e.value.cast(),
                            kind: e.kind,
                            moments: e.moments.as_ref().map(|m| Moments {
                                m: m.m.cast(),
                                v: m.v.cast(),
                            }),
                            step: e.step,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Hyper-parameters of the bias-corrected adaptive-moment update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of every trainable entry; each needs a gradient.
pub fn adam_step<E: Scalar>(
    store: &mut ParamStore<E>,
    grads: &BTreeMap<String, Tensor<E>>,
    cfg: &AdamConfig,
) -> Result<()> {
    adam_step_filtered(store, grads, cfg, &ParamFilter::All)
}

fn check_grads<E: Scalar>(store: &ParamStore<E>, grads: &BTreeMap<String, Tensor<E>>, filter: &ParamFilter) -> Result<()> {
    for name in grads.keys() {
        match store.entries.get(name) {
            Some(e) if e.kind == ParamKind::Trainable && filter.accepts(name) => {}
            _ => return Err(Error::UnknownGradient(name.clone())),
        }
    }
    for (name, entry) in store.entries.iter() {
        if entry.kind == ParamKind::Trainable && filter.accepts(name) && !grads.contains_key(name) {
            return Err(Error::MissingGradient(name.clone()));
        }
    }
    Ok(())
}

/// Adam update restricted to the trainable entries accepted by `filter`.
///
/// Every selected entry must have a gradient, and every gradient must name a
/// selected entry.
pub fn adam_step_filtered<E: Scalar>(
    store: &mut ParamStore<E>,
    grads: &BTreeMap<String, Tensor<E>>,
    cfg: &AdamConfig,
    filter: &ParamFilter,
) -> Result<()> {
    check_grads(store, grads, filter)?;
    for (name, g) in grads {
        let entry = store.entries.get_mut(name).expect("checked above");
        let moments = entry.moments.get_or_insert_with(|| Moments::zeros(g.shape()));
        update(name, &mut entry.value, g, moments, &mut entry.step, cfg)?;
    }
    Ok(())
}

impl<E: Scalar> Moments<E> {
    fn zeros(shape: &[usize]) -> Self {
        Moments { m: Tensor::zeros(shape), v: Tensor::zeros(shape) }
    }
}

/// Optimizer moments kept outside the store, so that several updates of
/// the same parameter can keep separate statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<E> {
    slots: BTreeMap<String, (Moments<E>, u64)>,
}

impl<E: Scalar> AdamState<E> {
    pub fn new() -> Self {
        AdamState { slots: BTreeMap::new() }
    }

    pub fn step(&self, name: &str) -> u64 {
        self.slots.get(name).map_or(0, |s| s.1)
    }

    /// Same contract as [`adam_step_filtered`], with moments from `self`.
    /// The moments stored in the entries are left alone.
    pub fn apply(
        &mut self,
        store: &mut ParamStore<E>,
        grads: &BTreeMap<String, Tensor<E>>,
        cfg: &AdamConfig,
        filter: &ParamFilter,
    ) -> Result<()> {
        check_grads(store, grads, filter)?;
        for (name, g) in grads {
            let entry = store.entries.get_mut(name).expect("checked above");
            let (moments, step) = self
                .slots
                .entry(name.clone())
                .or_insert_with(|| (Moments::zeros(g.shape()), 0));
            update(name, &mut entry.value, g, moments, step, cfg)?;
        }
        Ok(())
    }
}

fn update<E: Scalar>(
    name: &str,
    value: &mut Tensor<E>,
    g: &Tensor<E>,
    moments: &mut Moments<E>,
    step: &mut u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if value.shape() != g.shape() || moments.m.shape() != g.shape() {
        return Err(Error::shape(
            "adam_step",
            format!("`{name}`: {:?} vs {:?}", value.shape(), g.shape()),
        ));
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    *step += 1;
    let t = *step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (b1e, b2e) = (E::from_f64(b1), E::from_f64(b2));
    let (ob1, ob2) = (E::from_f64(1.0 - b1), E::from_f64(1.0 - b2));
    let step_size = E::from_f64(cfg.lr / c1);
    let inv_c2 = E::from_f64(1.0 / c2);
    let eps = E::from_f64(cfg.eps);
    let p = value.data_mut();
    let m = moments.m.data_mut();
    let v = moments.v.data_mut();
    for i in 0..p.len() {
        let gi = g.data()[i];
        m[i] = b1e * m[i] + ob1 * gi;
        v[i] = b2e * v[i] + ob2 * gi * gi;
        p[i] -= step_size * m[i] / ((v[i] * inv_c2).sqrt() + eps);
    }
    Ok(())
}
