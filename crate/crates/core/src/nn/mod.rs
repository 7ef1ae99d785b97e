//! Multi-layer perceptrons and the utilities trainers apply to them.

mod optim;
mod spectral;

pub use optim::{clip_gradients, clip_weight_values, ClipMode, Optimizer, OptimizerKind};
use spectral::current_estimate;
pub use spectral::{power_iteration, spectral_normalize, SpectralEstimate};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor};
use crate::matrix::Matrix;
use crate::toydata::Rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("input has {got} columns, network expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid network: {0}")]
    InvalidSpec(String),
    #[error("spectral normalization of a zero matrix is undefined")]
    ZeroMatrix,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("parameter {index}: expected {expected} values, got {got}")]
    ParamShape {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Identity => x.clone(),
            Activation::Relu => x.relu()?,
            Activation::LeakyRelu(s) => x.leaky_relu(s)?,
            Activation::Tanh => x.tanh()?,
            Activation::Sigmoid => x.sigmoid()?,
        })
    }

    fn rectifier(self) -> bool {
        matches!(self, Activation::Relu | Activation::LeakyRelu(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

/// Layered MLP description. The last layer is the output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    /// Hidden layer whose post-activation output is returned alongside the
    /// network output (used for feature matching).
    pub feature_tap: Option<usize>,
    pub spectral_norm: bool,
}

impl NetworkSpec {
    pub fn mlp(
        input_dim: usize,
        hidden: &[usize],
        hidden_activation: Activation,
        output_dim: usize,
        output_activation: Activation,
    ) -> Self {
        let mut layers: Vec<LayerSpec> = hidden
            .iter()
            .map(|&width| LayerSpec {
                width,
                activation: hidden_activation,
            })
            .collect();
        layers.push(LayerSpec {
            width: output_dim,
            activation: output_activation,
        });
        NetworkSpec {
            input_dim,
            layers,
            feature_tap: None,
            spectral_norm: false,
        }
    }

    pub fn with_feature_tap(mut self, layer: usize) -> Self {
        self.feature_tap = Some(layer);
        self
    }

    pub fn with_spectral_norm(mut self, on: bool) -> Self {
        self.spectral_norm = on;
        self
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.width)
    }

    pub fn output_activation(&self) -> Activation {
        self.layers
            .last()
            .map_or(Activation::Identity, |l| l.activation)
    }

    /// `(fan_out, fan_in)` of each layer's weight.
    pub fn weight_shapes(&self) -> Vec<(usize, usize)> {
        let mut fan_in = self.input_dim;
        self.layers
            .iter()
            .map(|l| {
                let s = (l.width, fan_in);
                fan_in = l.width;
                s
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.layers.is_empty() {
            return Err(NnError::InvalidSpec(
                "network needs an input and at least one layer".into(),
            ));
        }
        if self.layers.iter().any(|l| l.width == 0) {
            return Err(NnError::InvalidSpec("layer widths must be positive".into()));
        }
        if let Some(t) = self.feature_tap {
            if t + 1 >= self.layers.len() {
                return Err(NnError::InvalidSpec(format!(
                    "feature tap {t} is not a hidden layer"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Parameter {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.values.clone())
            .expect("parameter shape matches values")
    }
}

/// Ordered trainable tensors. For networks the order is
/// `[w0, b0, w1, b1, ...]` with weights shaped `[out x in]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub tensors: Vec<Parameter>,
}

#[derive(Serialize, Deserialize)]
struct ParameterFile {
    format: String,
    version: u32,
    tensors: Vec<IndexedParameter>,
}

#[derive(Serialize, Deserialize)]
struct IndexedParameter {
    index: usize,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl ParameterSet {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|p| p.values.len()).sum()
    }

    /// Attach every tensor to `graph` as a differentiable leaf.
    pub fn bind(&self, graph: &Graph) -> Vec<Tensor> {
        self.tensors
            .iter()
            .map(|p| graph.var(&p.to_tensor()))
            .collect()
    }

    /// Detached copies, for evaluation or frozen use inside another
    /// network's loss.
    pub fn constants(&self) -> Vec<Tensor> {
        self.tensors.iter().map(Parameter::to_tensor).collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|p| p.values.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(NnError::ParamShape {
                index: 0,
                expected: self.num_values(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for p in &mut self.tensors {
            let n = p.values.len();
            p.values.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|p| p.values.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Order-sensitive hash of the exact bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.tensors {
            for v in &p.values {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn to_json(&self) -> String {
        let file = ParameterFile {
            format: "ganlab-params".into(),
            version: 1,
            tensors: self
                .tensors
                .iter()
                .enumerate()
                .map(|(index, p)| IndexedParameter {
                    index,
                    shape: p.shape.clone(),
                    values: p.values.clone(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("parameters serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut file: ParameterFile =
            serde_json::from_str(text).map_err(|e| NnError::Format(e.to_string()))?;
        if file.format != "ganlab-params" || file.version != 1 {
            return Err(NnError::Format(format!(
                "unsupported {} v{}",
                file.format, file.version
            )));
        }
        file.tensors.sort_by_key(|t| t.index);
        let mut tensors = Vec::with_capacity(file.tensors.len());
        for (i, t) in file.tensors.into_iter().enumerate() {
            let expected: usize = t.shape.iter().product();
            if t.index != i || expected != t.values.len() {
                return Err(NnError::ParamShape {
                    index: t.index,
                    expected,
                    got: t.values.len(),
                });
            }
            tensors.push(Parameter {
                shape: t.shape,
                values: t.values,
            });
        }
        Ok(ParameterSet { tensors })
    }
}

/// He-normal weights for rectifier layers, Xavier-uniform otherwise; zero biases.
pub fn init_parameters(spec: &NetworkSpec, seed: u64) -> Result<ParameterSet> {
    spec.validate()?;
    let mut rng = Rng::new(seed);
    let mut tensors = Vec::with_capacity(2 * spec.layers.len());
    for ((fan_out, fan_in), layer) in spec.weight_shapes().into_iter().zip(&spec.layers) {
        let values: Vec<f64> = if layer.activation.rectifier() {
            let std = (2.0 / fan_in as f64).sqrt();
            (0..fan_out * fan_in).map(|_| std * rng.normal()).collect()
        } else {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..fan_out * fan_in)
                .map(|_| bound * (2.0 * rng.uniform() - 1.0))
                .collect()
        };
        tensors.push(Parameter {
            shape: vec![fan_out, fan_in],
            values,
        });
        tensors.push(Parameter {
            shape: vec![1, fan_out],
            values: vec![0.0; fan_out],
        });
    }
    Ok(ParameterSet { tensors })
}

pub struct NetOutput {
    pub output: Tensor,
    pub features: Option<Tensor>,
}

/// A network specification, its parameters and spectral-norm state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: ParameterSet,
    /// Left singular-vector estimate per layer, present iff spectral norm is on.
    pub sn_u: Vec<Option<Vec<f64>>>,
}

impl Network {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let params = init_parameters(&spec, seed)?;
        let mut rng = Rng::new(seed).substream(0x5e);
        let sn_u = spec
            .weight_shapes()
            .iter()
            .map(|&(out, _)| {
                spec.spectral_norm.then(|| {
                    let mut u: Vec<f64> = (0..out).map(|_| rng.normal()).collect();
                    let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                    u.iter_mut().for_each(|v| *v /= n);
                    u
                })
            })
            .collect();
        Ok(Network { spec, params, sn_u })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    /// Training-mode forward: one power-iteration refinement per
    /// spectrally normalized layer, then the forward pass.
    pub fn forward_train(&mut self, params: &[Tensor], x: &Tensor) -> Result<NetOutput> {
        if self.spec.spectral_norm {
            for (layer, (out, inp)) in self.spec.weight_shapes().into_iter().enumerate() {
                let w = &self.params.tensors[2 * layer].values;
                if let Some(u) = self.sn_u[layer].as_mut() {
                    power_iteration(w, out, inp, u, 1)?;
                }
            }
        }
        self.forward(params, x)
    }

    /// Evaluation-mode forward (no power-iteration refinement).
    pub fn forward(&self, params: &[Tensor], x: &Tensor) -> Result<NetOutput> {
        if x.cols() != self.spec.input_dim || x.shape().len() != 2 {
            return Err(NnError::DimMismatch {
                expected: self.spec.input_dim,
                got: x.cols(),
            });
        }
        if params.len() != 2 * self.spec.layers.len() {
            return Err(NnError::ParamShape {
                index: params.len(),
                expected: 2 * self.spec.layers.len(),
                got: params.len(),
            });
        }
        let mut h = x.clone();
        let mut features = None;
        for (layer, spec) in self.spec.layers.iter().enumerate() {
            let w = self.effective_weight(layer, &params[2 * layer])?;
            h = h.matmul(&w.t()?)?.add(&params[2 * layer + 1])?;
            h = spec.activation.apply(&h)?;
            if self.spec.feature_tap == Some(layer) {
                features = Some(h.clone());
            }
        }
        Ok(NetOutput {
            output: h,
            features,
        })
    }

    fn effective_weight(&self, layer: usize, w: &Tensor) -> Result<Tensor> {
        let Some(Some(u)) = self.sn_u.get(layer) else {
            return Ok(w.clone());
        };
        let (out, inp) = (w.rows(), w.cols());
        let (_, v) = current_estimate(w.values(), out, inp, u)?;
        let v = Tensor::matrix(inp, 1, v)?;
        let u = Tensor::matrix(out, 1, u.clone())?;
        // sigma = u^T W v, differentiable in W with u and v held fixed.
        let sigma = w.matmul(&v)?.mul(&u)?.sum()?;
        Ok(w.div(&sigma.broadcast_to(w.shape())?)?)
    }

    /// Evaluate on plain samples with detached parameters.
    pub fn eval(&self, x: &Matrix) -> Result<Matrix> {
        let out = self.forward(&self.params.constants(), &x.to_tensor())?;
        Ok(Matrix::from_tensor(&out.output))
    }

    /// Current power-iteration estimate of each normalized layer's top
    /// singular value (`None` for plain layers).
    pub fn spectral_sigmas(&self) -> Vec<Option<f64>> {
        self.spec
            .weight_shapes()
            .iter()
            .enumerate()
            .map(|(layer, &(out, inp))| {
                let u = self.sn_u[layer].as_ref()?;
                let w = &self.params.tensors[2 * layer].values;
                current_estimate(w, out, inp, u)
                    .ok()
                    .map(|(sigma, _)| sigma)
            })
            .collect()
    }

    /// The weight matrix actually used in the forward pass for `layer`.
    pub fn effective_weight_matrix(&self, layer: usize) -> Result<Matrix> {
        let w = self.params.tensors[2 * layer].to_tensor();
        Ok(Matrix::from_tensor(&self.effective_weight(layer, &w)?))
    }
}

/// Trainable lookup table `[num_classes x dim]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub num_classes: usize,
    pub dim: usize,
    pub params: ParameterSet,
}

impl EmbeddingTable {
    pub fn new(num_classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let values = (0..num_classes * dim).map(|_| rng.normal()).collect();
        EmbeddingTable {
            num_classes,
            dim,
            params: ParameterSet {
                tensors: vec![Parameter {
                    shape: vec![num_classes, dim],
                    values,
                }],
            },
        }
    }
}

/// Row lookup; gradients reach only the selected rows.
pub fn embed(table: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let classes = table.rows();
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(NnError::LabelOutOfRange { label, classes });
    }
    Ok(table.select_rows(labels)?)
}

/// Convert gradient tensors to plain buffers for the optimizers.
pub fn grad_values(grads: &[Tensor]) -> Vec<Vec<f64>> {
    grads.iter().map(Tensor::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad;

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let spec = NetworkSpec::mlp(3, &[8, 8], Activation::Relu, 2, Activation::Identity);
        let a = init_parameters(&spec, 9).unwrap();
        let b = init_parameters(&spec, 9).unwrap();
        assert_eq!(a, b);
        for (i, p) in a.tensors.iter().enumerate() {
            if i % 2 == 1 {
                assert!(p.values.iter().all(|&v| v == 0.0));
            }
        }
        assert_ne!(a, init_parameters(&spec, 10).unwrap());
    }

    #[test]
    fn he_init_spread() {
        let spec = NetworkSpec::mlp(128, &[256], Activation::Relu, 1, Activation::Identity);
        let p = init_parameters(&spec, 1).unwrap();
        let w = &p.tensors[0].values;
        assert_eq!(w.len(), 32768);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!((std - 0.125).abs() < 0.0125, "std {std}");
    }

    #[test]
    fn degenerate_forwards() {
        let spec = NetworkSpec::mlp(2, &[], Activation::Relu, 2, Activation::Sigmoid);
        let mut net = Network::new(spec, 0).unwrap();
        net.params.tensors[0].values = vec![0.0; 4];
        net.params.tensors[1].values = vec![0.3, -2.0];
        let out = net
            .eval(&Matrix::new(3, 2, vec![1.0, 2.0, -5.0, 4.0, 0.0, 9.0]))
            .unwrap();
        let expect = [1.0 / (1.0 + (-0.3f64).exp()), 1.0 / (1.0 + 2.0f64.exp())];
        for row in out.iter_rows() {
            assert!((row[0] - expect[0]).abs() < 1e-15 && (row[1] - expect[1]).abs() < 1e-15);
        }

        let spec = NetworkSpec::mlp(2, &[], Activation::Relu, 2, Activation::Identity);
        let mut net = Network::new(spec, 0).unwrap();
        net.params.tensors[0].values = vec![1.0, 0.0, 0.0, 1.0];
        let x = Matrix::new(2, 2, vec![1.5, -2.0, 0.25, 7.0]);
        assert_eq!(net.eval(&x).unwrap(), x);
    }

    #[test]
    fn sigmoid_head_codomain() {
        let spec = NetworkSpec::mlp(2, &[16], Activation::LeakyRelu(0.2), 1, Activation::Sigmoid);
        let net = Network::new(spec, 4).unwrap();
        let x = Rng::new(2).normal_matrix(64, 2);
        assert!(net
            .eval(&x)
            .unwrap()
            .data
            .iter()
            .all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let spec = NetworkSpec::mlp(3, &[4], Activation::Relu, 1, Activation::Identity);
        let net = Network::new(spec, 0).unwrap();
        let err = net.eval(&Matrix::zeros(2, 2)).unwrap_err();
        assert_eq!(
            err,
            NnError::DimMismatch {
                expected: 3,
                got: 2
            }
        );
    }

    #[test]
    fn feature_tap_returned() {
        let spec = NetworkSpec::mlp(2, &[5, 3], Activation::Tanh, 1, Activation::Identity)
            .with_feature_tap(1);
        let net = Network::new(spec, 0).unwrap();
        let out = net
            .forward(
                &net.params.constants(),
                &Tensor::matrix(4, 2, vec![0.1; 8]).unwrap(),
            )
            .unwrap();
        assert_eq!(out.features.unwrap().shape(), &[4, 3]);
        let bad = NetworkSpec::mlp(2, &[5], Activation::Tanh, 1, Activation::Identity)
            .with_feature_tap(1);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn embedding_lookup_and_gradient() {
        let table = EmbeddingTable::new(4, 3, 0);
        let t = table.params.tensors[0].to_tensor();
        let rows = embed(&t, &[0, 2, 2]).unwrap();
        assert_eq!(rows.row_values(0), &table.params.tensors[0].values[0..3]);
        assert_eq!(rows.row_values(1), rows.row_values(2));
        assert_eq!(
            embed(&t, &[4]).unwrap_err(),
            NnError::LabelOutOfRange {
                label: 4,
                classes: 4
            }
        );

        let g = Graph::new();
        let tv = g.var(&t);
        let s = embed(&tv, &[2]).unwrap().sum().unwrap();
        let d = grad(&s, &[&tv], false).unwrap();
        for (i, v) in d[0].values().iter().enumerate() {
            assert_eq!(*v, if i / 3 == 2 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn parameter_json_round_trip() {
        let spec = NetworkSpec::mlp(2, &[3], Activation::Relu, 1, Activation::Identity);
        let p = init_parameters(&spec, 5).unwrap();
        let back = ParameterSet::from_json(&p.to_json()).unwrap();
        assert_eq!(back, p);
        assert!(
            ParameterSet::from_json("{\"format\":\"x\",\"version\":1,\"tensors\":[]}").is_err()
        );
    }
}
