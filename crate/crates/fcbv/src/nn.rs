//! Parameter storage, layer helpers, and the Adam optimizer used by both the
//! feature extractor and the value network.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{FcbvError, Result};
use crate::io::ArrayContainer;
use crate::tensor::{TId, Tape};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
}

/// Owns every trainable matrix of one network, in a fixed registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>) -> ParamId {
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name: name.to_string(), value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Array2<f64>) {
        assert_eq!(self.params[id.0].value.dim(), value.dim());
        self.params[id.0].value = value;
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// He-initialized weight plus zero bias for a linear layer.
    pub fn init_linear(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> (ParamId, ParamId) {
        let std = (2.0 / fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| {
            // Box-Muller keeps us independent of rand_distr's sampling order.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        });
        let b = Array2::zeros((1, fan_out));
        let wid = self.add(&format!("{name}.w"), w);
        let bid = self.add(&format!("{name}.b"), b);
        (wid, bid)
    }

    /// Pushes every parameter onto a tape as a leaf; returns the handle map.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let ids = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        Binding { ids }
    }

    /// Content hash over names, shapes, and exact parameter bytes.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.name.as_bytes());
            hasher.update((p.value.nrows() as u64).to_le_bytes());
            hasher.update((p.value.ncols() as u64).to_le_bytes());
            for v in p.value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Serializes all parameters into a container under `params/<name>`.
    pub fn write_arrays(&self, container: &mut ArrayContainer) {
        for p in &self.params {
            container.push_f64_matrix(&format!("params/{}", p.name), &p.value);
        }
    }

    /// Restores parameter values from a container; names and shapes must
    /// match the registration order exactly.
    pub fn read_arrays(&mut self, container: &ArrayContainer) -> Result<()> {
        for p in &mut self.params {
            let arr = container.f64_matrix(&format!("params/{}", p.name))?;
            if arr.dim() != p.value.dim() {
                return Err(FcbvError::Container(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    arr.dim(),
                    p.value.dim()
                )));
            }
            p.value = arr;
        }
        Ok(())
    }
}

/// Tape handles for a bound parameter set.
pub struct Binding {
    ids: Vec<TId>,
}

impl Binding {
    pub fn get(&self, id: ParamId) -> TId {
        self.ids[id.0]
    }

    /// Collects parameter gradients after a backward sweep.
    pub fn grads(&self, tape: &Tape) -> Vec<Array2<f64>> {
        self.ids.iter().map(|&t| tape.grad(t)).collect()
    }
}

pub fn sum_grads(mut acc: Vec<Array2<f64>>, other: &[Array2<f64>]) -> Vec<Array2<f64>> {
    for (a, o) in acc.iter_mut().zip(other) {
        *a += o;
    }
    acc
}

pub fn scale_grads(mut grads: Vec<Array2<f64>>, c: f64) -> Vec<Array2<f64>> {
    for g in grads.iter_mut() {
        *g *= c;
    }
    grads
}

/// Multilayer perceptron applied row-wise; ReLU between layers, linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "mlp needs at least input and output widths");
        let mut layers = Vec::new();
        for i in 0..widths.len() - 1 {
            layers.push(store.init_linear(
                rng,
                &format!("{name}.{i}"),
                widths[i],
                widths[i + 1],
            ));
        }
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, binding: &Binding, x: TId) -> TId {
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = tape.linear(h, binding.get(*w), binding.get(*b));
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    /// Like `forward` but with ReLU after the final layer too.
    pub fn forward_all_relu(&self, tape: &mut Tape, binding: &Binding, x: TId) -> TId {
        let h = self.forward(tape, binding, x);
        tape.relu(h)
    }

    pub fn final_layer(&self) -> (ParamId, ParamId) {
        *self.layers.last().unwrap()
    }
}

/// Adam with L2 weight decay folded into the gradient and an external
/// learning-rate schedule.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let m = store.params.iter().map(|p| Array2::zeros(p.value.dim())).collect();
        let v = store.params.iter().map(|p| Array2::zeros(p.value.dim())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m, v }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Array2<f64>]) {
        assert_eq!(grads.len(), store.params.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g_raw) in grads.iter().enumerate() {
            let p = &mut store.params[i];
            let g = g_raw + &(&p.value * self.weight_decay);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            *m *= self.beta1;
            *m += &(&g * (1.0 - self.beta1));
            *v *= self.beta2;
            *v += &(&g.mapv(|x| x * x) * (1.0 - self.beta2));
            let update = m.mapv(|x| x / bc1)
                / &(v.mapv(|x| (x / bc2).sqrt() + self.eps));
            p.value -= &(&update * self.lr);
        }
    }
}
