//! Parameter storage, Adam, and exponential-moving-average shadows.

use super::{Graph, TensorId};
use crate::real::Real;
use crate::rng::{hash_bytes, Rng};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("optimizer state does not match parameters: {0}")]
    StateMismatch(String),
}

/// How a freshly registered parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in (-1/sqrt(fan_in), +1/sqrt(fan_in)).
    FanIn(usize),
}

#[derive(Debug, Clone)]
pub struct ParamEntry<R: Real> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<R>,
}

/// Owns every trainable tensor of a model. Graphs borrow copies per step;
/// the optimizer writes updates back here. Initialization is keyed by
/// (seed, parameter name) so values do not depend on registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<R: Real> {
    pub entries: Vec<ParamEntry<R>>,
}

/// Index into a `ParamStore`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef(pub usize);

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> ParamRef {
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        let n: usize = shape.iter().product();
        let values = match init {
            Init::Zeros => vec![R::ZERO; n],
            Init::Ones => vec![R::ONE; n],
            Init::FanIn(fan_in) => {
                let mut rng = Rng::keyed(seed, &[hash_bytes(name.as_bytes())]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n)
                    .map(|_| R::from_f64(rng.range(-bound, bound)))
                    .collect()
            }
        };
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
        });
        ParamRef(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn values(&self, r: ParamRef) -> &[R] {
        &self.entries[r.0].values
    }

    pub fn values_mut(&mut self, r: ParamRef) -> &mut [R] {
        &mut self.entries[r.0].values
    }

    /// Insert every parameter into a graph, aligned with entry order.
    pub fn bind(&self, g: &mut Graph<R>) -> Binding {
        let ids = self
            .entries
            .iter()
            .map(|e| g.param(&e.shape, e.values.clone()))
            .collect();
        Binding { ids }
    }

    /// Gradients of every parameter after a backward pass, aligned with
    /// entry order. Parameters untouched by the loss yield zeros.
    pub fn collect_grads(&self, g: &Graph<R>, binding: &Binding) -> Vec<Vec<R>> {
        self.entries
            .iter()
            .zip(&binding.ids)
            .map(|(e, &id)| {
                g.grad(id)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![R::ZERO; e.values.len()])
            })
            .collect()
    }
}

/// Graph handles of one `bind` call.
pub struct Binding {
    ids: Vec<TensorId>,
}

impl Binding {
    pub fn id(&self, r: ParamRef) -> TensorId {
        self.ids[r.0]
    }
}

/// Adam with bias correction. Update arithmetic runs in f64 regardless of
/// the parameter element type so f32 training remains stable.
#[derive(Debug, Clone)]
pub struct AdamState<R: Real> {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: Vec<Vec<R>>,
    pub v: Vec<Vec<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn new(store: &ParamStore<R>, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1,
            beta2,
            epsilon,
            m: store
                .entries
                .iter()
                .map(|e| vec![R::ZERO; e.values.len()])
                .collect(),
            v: store
                .entries
                .iter()
                .map(|e| vec![R::ZERO; e.values.len()])
                .collect(),
        }
    }

    fn check(&self, store: &ParamStore<R>) -> Result<(), OptimError> {
        if self.m.len() != store.entries.len() {
            return Err(OptimError::StateMismatch(format!(
                "{} moment buffers for {} parameters",
                self.m.len(),
                store.entries.len()
            )));
        }
        for (i, e) in store.entries.iter().enumerate() {
            if self.m[i].len() != e.values.len() || self.v[i].len() != e.values.len() {
                return Err(OptimError::StateMismatch(format!(
                    "moment shape mismatch for `{}`",
                    e.name
                )));
            }
        }
        Ok(())
    }
}

pub fn adam_step<R: Real>(
    store: &mut ParamStore<R>,
    grads: &[Vec<R>],
    state: &mut AdamState<R>,
) -> Result<(), OptimError> {
    state.check(store)?;
    if grads.len() != store.entries.len() {
        return Err(OptimError::StateMismatch(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.entries.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, e) in store.entries.iter_mut().enumerate() {
        if grads[i].len() != e.values.len() {
            return Err(OptimError::StateMismatch(format!(
                "gradient shape mismatch for `{}`",
                e.name
            )));
        }
        for j in 0..e.values.len() {
            let g = grads[i][j].to_f64();
            let m = state.beta1 * state.m[i][j].to_f64() + (1.0 - state.beta1) * g;
            let v = state.beta2 * state.v[i][j].to_f64() + (1.0 - state.beta2) * g * g;
            state.m[i][j] = R::from_f64(m);
            state.v[i][j] = R::from_f64(v);
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            let p = e.values[j].to_f64() - state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
            e.values[j] = R::from_f64(p);
        }
    }
    Ok(())
}

/// Shadow copies updated as shadow <- decay*shadow + (1-decay)*param.
#[derive(Debug, Clone)]
pub struct EmaState<R: Real> {
    pub decay: f64,
    pub shadow: Vec<Vec<R>>,
}

impl<R: Real> EmaState<R> {
    /// Shadows start as copies of the current parameters.
    pub fn new(store: &ParamStore<R>, decay: f64) -> Self {
        EmaState {
            decay,
            shadow: store.entries.iter().map(|e| e.values.clone()).collect(),
        }
    }

    fn check(&self, store: &ParamStore<R>) -> Result<(), OptimError> {
        if self.shadow.len() != store.entries.len() {
            return Err(OptimError::StateMismatch(format!(
                "{} shadows for {} parameters",
                self.shadow.len(),
                store.entries.len()
            )));
        }
        for (i, e) in store.entries.iter().enumerate() {
            if self.shadow[i].len() != e.values.len() {
                return Err(OptimError::StateMismatch(format!(
                    "shadow shape mismatch for `{}`",
                    e.name
                )));
            }
        }
        Ok(())
    }

    pub fn update(&mut self, store: &ParamStore<R>) -> Result<(), OptimError> {
        self.check(store)?;
        let d = self.decay;
        for (sh, e) in self.shadow.iter_mut().zip(&store.entries) {
            for (s, &p) in sh.iter_mut().zip(&e.values) {
                *s = R::from_f64(d * s.to_f64() + (1.0 - d) * p.to_f64());
            }
        }
        Ok(())
    }

    /// Exchange live parameters and shadows; applying twice restores both
    /// exactly. Evaluation swaps in, evaluates, and swaps back.
    pub fn swap(&mut self, store: &mut ParamStore<R>) -> Result<(), OptimError> {
        self.check(store)?;
        for (sh, e) in self.shadow.iter_mut().zip(&mut store.entries) {
            std::mem::swap(sh, &mut e.values);
        }
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<R: Real>(grads: &mut [Vec<R>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g {
            let x = v.to_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = R::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
