//! The verification CNN as a pure function of parameters and an image batch.
//!
//! Layout (valid stride-1 convolutions, 5×5 stride-5 max pooling, ReLU
//! between layers, logits out):
//!
//! ```text
//! input 1×150×220
//! C1  32×5×5  → 32×146×216 → pool → 32×29×43
//! C2  32×5×5  → 32×25×39   → pool → 32×5×7  (1120 features)
//! FC3 1024, FC4 256, OUT 1
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const INPUT_HEIGHT: usize = 150;
pub const INPUT_WIDTH: usize = 220;
pub const POOL: usize = 5;

/// Parameter names and shapes in canonical order.
pub const ARCHITECTURE: [(&str, &[usize]); 10] = [
    ("c1.weight", &[32, 1, 5, 5]),
    ("c1.bias", &[32]),
    ("c2.weight", &[32, 32, 5, 5]),
    ("c2.bias", &[32]),
    ("fc3.weight", &[1024, 1120]),
    ("fc3.bias", &[1024]),
    ("fc4.weight", &[256, 1024]),
    ("fc4.bias", &[256]),
    ("out.weight", &[1, 256]),
    ("out.bias", &[1]),
];

/// Ordered named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParameterSet<T> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<(String, Tensor<T>)>) -> Self {
        Self { entries }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Same names, new tensors (in order).
    pub fn with_tensors(&self, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Contract(format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        let entries = self
            .entries
            .iter()
            .zip(tensors)
            .map(|((n, old), t)| {
                if old.shape() != t.shape() {
                    Err(Error::Contract(format!("shape change for {n}")))
                } else {
                    Ok((n.clone(), t))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    /// Registers every tensor as a differentiable graph input.
    pub fn to_graph(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.tensors().map(|t| g.param(t.clone())).collect()
    }

    /// Registers every tensor as a constant graph input.
    pub fn to_graph_const(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.tensors().map(|t| g.constant(t.clone())).collect()
    }

    /// Whether names and shapes equal [`ARCHITECTURE`].
    pub fn check_architecture(&self) -> Result<()> {
        if self.entries.len() != ARCHITECTURE.len() {
            return Err(Error::format(
                "architecture",
                format!("expected {} tensors, found {}", ARCHITECTURE.len(), self.entries.len()),
            ));
        }
        for ((name, t), (want, shape)) in self.entries.iter().zip(ARCHITECTURE.iter()) {
            if name != want || t.shape() != *shape {
                return Err(Error::format(
                    "architecture",
                    format!("tensor {name} {:?} does not match {want} {shape:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }
}

/// Total number of scalars.
pub fn count_parameters<T: Scalar>(params: &ParameterSet<T>) -> usize {
    params.tensors().map(Tensor::numel).sum()
}

/// Fan-in scaled uniform weights (He bound `√(6/fan_in)` for hidden layers,
/// `√(3/fan_in)` for the output layer) and zero biases. Deterministic in `seed`.
pub fn init_parameters<T: Scalar>(seed: u64) -> ParameterSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    for (name, shape) in ARCHITECTURE {
        let t = if name.ends_with(".bias") {
            Tensor::zeros(shape)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let gain = if name.starts_with("out") { 3.0 } else { 6.0 };
            let bound = (gain / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
        };
        params.push(name, t);
    }
    params
}

/// A differentiable classifier emitting one logit per batch element.
pub trait Model<T: Scalar>: Sync {
    fn forward(&self, g: &mut Graph<T>, params: &[Var], input: Var) -> Result<Var>;

    /// Layout of one input sample, used to assemble batches.
    fn sample_shape(&self) -> Vec<usize>;
}

/// The signature verification CNN.
#[derive(Clone, Copy, Debug, Default)]
pub struct SignatureNet;

impl SignatureNet {
    /// Per-layer activation shapes (batch axis dropped) for one image.
    pub fn shape_trace<T: Scalar>(&self, params: &ParameterSet<T>, image: &Tensor<T>) -> Result<Vec<Vec<usize>>> {
        let mut g = Graph::new();
        let p = params.to_graph_const(&mut g);
        let x = g.constant(image.clone().reshape(&[1, 1, INPUT_HEIGHT, INPUT_WIDTH])?);
        let mut trace = Vec::new();
        let c1 = g.conv2d(x, p[0], p[1])?;
        trace.push(g.shape(c1)[1..].to_vec());
        let h = g.max_pool2d(c1, POOL, POOL)?;
        trace.push(g.shape(h)[1..].to_vec());
        let c2 = g.conv2d(h, p[2], p[3])?;
        trace.push(g.shape(c2)[1..].to_vec());
        let h = g.max_pool2d(c2, POOL, POOL)?;
        trace.push(g.shape(h)[1..].to_vec());
        let out = self.forward(&mut g, &p, x)?;
        trace.push(vec![1120]);
        trace.push(vec![1024]);
        trace.push(vec![256]);
        trace.push(vec![g.value(out).numel()]);
        Ok(trace)
    }
}

impl<T: Scalar> Model<T> for SignatureNet {
    fn forward(&self, g: &mut Graph<T>, params: &[Var], input: Var) -> Result<Var> {
        if params.len() != ARCHITECTURE.len() {
            return Err(Error::Contract(format!(
                "SignatureNet expects {} parameter tensors, got {}",
                ARCHITECTURE.len(),
                params.len()
            )));
        }
        let shape = g.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim("forward", "rank", 4, shape.len()));
        }
        if shape[1] != 1 {
            return Err(Error::dim("forward", "channels", 1, shape[1]));
        }
        if shape[2] != INPUT_HEIGHT {
            return Err(Error::dim("forward", "height", INPUT_HEIGHT, shape[2]));
        }
        if shape[3] != INPUT_WIDTH {
            return Err(Error::dim("forward", "width", INPUT_WIDTH, shape[3]));
        }
        let batch = shape[0];

        // Per-channel bias and ReLU are monotone, so both commute with max
        // pooling and are applied on the 25× smaller pooled map.
        let h = g.conv2d_nobias(input, params[0])?;
        let h = g.max_pool2d(h, POOL, POOL)?;
        let h = g.add_bias(h, params[1])?;
        let h = g.relu(h);
        let h = g.conv2d_nobias(h, params[2])?;
        let h = g.max_pool2d(h, POOL, POOL)?;
        let h = g.add_bias(h, params[3])?;
        let h = g.relu(h);
        let features = g.shape(h)[1..].iter().product();
        let h = g.reshape(h, &[batch, features])?;
        let h = g.affine(h, params[4], params[5])?;
        let h = g.relu(h);
        let h = g.affine(h, params[6], params[7])?;
        let h = g.relu(h);
        let h = g.affine(h, params[8], params[9])?;
        g.reshape(h, &[batch])
    }

    fn sample_shape(&self) -> Vec<usize> {
        vec![1, INPUT_HEIGHT, INPUT_WIDTH]
    }
}

/// Logits for a batch `[B, ...]` without recording gradients.
pub fn forward<T: Scalar, M: Model<T>>(model: &M, params: &ParameterSet<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = params.to_graph_const(&mut g);
    let x = g.constant(batch.clone());
    let out = model.forward(&mut g, &p, x)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_batch(b: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[b, 1, INPUT_HEIGHT, INPUT_WIDTH], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn parameter_count_matches_layer_sums() {
        let p = init_parameters::<f32>(0);
        assert_eq!(count_parameters(&p), 832 + 25_632 + 1_147_904 + 262_400 + 257);
        assert_eq!(count_parameters(&p), 1_437_025);
        assert_eq!(count_parameters(&ParameterSet::<f32>::new()), 0);
        let mut single = ParameterSet::new();
        single.push("w", Tensor::<f32>::zeros(&[2, 2]));
        assert_eq!(count_parameters(&single), 4);
        p.check_architecture().unwrap();
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        assert_eq!(init_parameters::<f32>(3), init_parameters::<f32>(3));
        assert_ne!(init_parameters::<f32>(3), init_parameters::<f32>(4));
        let p = init_parameters::<f32>(9);
        assert!(p.get("c1.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let p = init_parameters::<f32>(0);
        let zeros = p
            .with_tensors(p.tensors().map(|t| Tensor::zeros(t.shape())).collect())
            .unwrap();
        let logits = forward(&SignatureNet, &zeros, &image_batch(2, 1)).unwrap();
        assert_eq!(logits.data(), &[0.0, 0.0]);
    }

    #[test]
    fn forward_is_pure_and_batch_decomposable() {
        let p = init_parameters::<f32>(1);
        let batch = image_batch(3, 2);
        let a = forward(&SignatureNet, &p, &batch).unwrap();
        let b = forward(&SignatureNet, &p, &batch).unwrap();
        assert_eq!(a, b);
        assert!(a.all_finite());
        let plane = INPUT_HEIGHT * INPUT_WIDTH;
        for i in 0..3 {
            let single = Tensor::new(
                vec![1, 1, INPUT_HEIGHT, INPUT_WIDTH],
                batch.data()[i * plane..(i + 1) * plane].to_vec(),
            )
            .unwrap();
            let s = forward(&SignatureNet, &p, &single).unwrap();
            assert!((s.item() - a.data()[i]).abs() <= 1e-5 * (1.0 + s.item().abs()));
        }
    }

    #[test]
    fn shape_trace_matches_valid_conv_and_stride_five_pooling() {
        let p = init_parameters::<f32>(0);
        let img = Tensor::zeros(&[1, INPUT_HEIGHT, INPUT_WIDTH]);
        let trace = SignatureNet.shape_trace(&p, &img).unwrap();
        let want: Vec<Vec<usize>> = vec![
            vec![32, 146, 216],
            vec![32, 29, 43],
            vec![32, 25, 39],
            vec![32, 5, 7],
            vec![1120],
            vec![1024],
            vec![256],
            vec![1],
        ];
        assert_eq!(trace, want);
    }

    #[test]
    fn wrong_spatial_size_is_a_dimension_error() {
        let p = init_parameters::<f32>(0);
        let bad = Tensor::zeros(&[1, 1, 149, INPUT_WIDTH]);
        assert!(matches!(
            forward(&SignatureNet, &p, &bad),
            Err(Error::Dimension { axis: "height", .. })
        ));
    }
}
