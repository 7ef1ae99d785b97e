//! Network rosters for each algorithm family and the input-shaping
//! transforms applied between them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{concat, Tensor};
use crate::matrix::Matrix;
use crate::nn::{Activation, EmbeddingTable, Network, NetworkSpec, NnError};
use crate::toydata::derive_seed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("inconsistent dimensions: {0}")]
    InvalidDims(String),
    #[error("{n} rows cannot be packed in groups of {k}")]
    NotDivisible { n: usize, k: usize },
    #[error("row counts differ: {0} vs {1}")]
    RowMismatch(usize, usize),
    #[error("algorithm {0:?} has no adversarial bundle")]
    Unsupported(Algorithm),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Vanilla,
    WganClip,
    WganGp,
    Lsgan,
    Hinge,
    Cgan,
    Infogan,
    Ebgan,
    Aae,
    Pix2pixToy,
    CycleganToy,
    /// Diffusion baseline; trained by the diffusion module, not by a bundle.
    Ddpm,
}

impl Algorithm {
    pub const ALL: [Algorithm; 12] = [
        Algorithm::Vanilla,
        Algorithm::WganClip,
        Algorithm::WganGp,
        Algorithm::Lsgan,
        Algorithm::Hinge,
        Algorithm::Cgan,
        Algorithm::Infogan,
        Algorithm::Ebgan,
        Algorithm::Aae,
        Algorithm::Pix2pixToy,
        Algorithm::CycleganToy,
        Algorithm::Ddpm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Vanilla => "vanilla",
            Algorithm::WganClip => "wgan_clip",
            Algorithm::WganGp => "wgan_gp",
            Algorithm::Lsgan => "lsgan",
            Algorithm::Hinge => "hinge",
            Algorithm::Cgan => "cgan",
            Algorithm::Infogan => "infogan",
            Algorithm::Ebgan => "ebgan",
            Algorithm::Aae => "aae",
            Algorithm::Pix2pixToy => "pix2pix_toy",
            Algorithm::CycleganToy => "cyclegan_toy",
            Algorithm::Ddpm => "ddpm",
        }
    }

    /// Whether the discriminator emits a probability (sigmoid head).
    pub fn probability_head(self) -> bool {
        matches!(
            self,
            Algorithm::Vanilla | Algorithm::Cgan | Algorithm::Infogan | Algorithm::Aae
        )
    }

    pub fn is_wgan(self) -> bool {
        matches!(self, Algorithm::WganClip | Algorithm::WganGp)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Algorithm::ALL.iter().map(|a| a.name()).collect();
                format!(
                    "unknown algorithm {s:?}; expected one of {}",
                    names.join(", ")
                )
            })
    }
}

pub const D_LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub z_dim: usize,
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub pack_k: usize,
    pub num_classes: usize,
    pub code_k: usize,
    pub embed_dim: usize,
    pub spectral_norm: bool,
    /// Expose this discriminator hidden layer for feature matching.
    pub feature_tap: Option<usize>,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            z_dim: 100,
            data_dim: 1,
            hidden: vec![128, 128],
            pack_k: 1,
            num_classes: 0,
            code_k: 0,
            embed_dim: 8,
            spectral_norm: false,
            feature_tap: None,
        }
    }
}

impl ModelDims {
    /// Autoencoder bottleneck width for EBGAN and AAE.
    pub fn bottleneck(&self) -> usize {
        self.data_dim.max(2)
    }
}

/// All networks one algorithm needs. Optional members are present only for
/// the families that use them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub algorithm: Algorithm,
    pub dims: ModelDims,
    pub generator: Network,
    pub discriminator: Network,
    /// CycleGAN reverse generator (B to A).
    pub generator2: Option<Network>,
    /// CycleGAN discriminator on domain A.
    pub discriminator2: Option<Network>,
    /// AAE encoder (data to latent).
    pub encoder: Option<Network>,
    /// InfoGAN code posterior (logits over `code_k` classes).
    pub q_net: Option<Network>,
    /// CGAN label embeddings for the generator and discriminator paths.
    pub g_embedding: Option<EmbeddingTable>,
    pub d_embedding: Option<EmbeddingTable>,
}

fn mlp(
    input: usize,
    hidden: &[usize],
    act: Activation,
    out: usize,
    head: Activation,
) -> NetworkSpec {
    NetworkSpec::mlp(input, hidden, act, out, head)
}

pub fn build_bundle(algorithm: Algorithm, dims: &ModelDims, seed: u64) -> Result<ModelBundle> {
    let bad = |m: &str| Err(ModelError::InvalidDims(m.to_string()));
    if dims.z_dim == 0 || dims.data_dim == 0 || dims.pack_k == 0 {
        return bad("z_dim, data_dim and pack_k must be positive");
    }
    if dims.hidden.contains(&0) {
        return bad("hidden widths must be positive");
    }
    let relu = Activation::Relu;
    let leaky = Activation::LeakyRelu(D_LEAK);
    let head = if algorithm.probability_head() {
        Activation::Sigmoid
    } else {
        Activation::Identity
    };
    let d = dims.data_dim;
    let h = &dims.hidden;
    let net = |spec: NetworkSpec, role: u64| Network::new(spec, derive_seed(seed, role));
    let critic = |input: usize| {
        let mut spec = mlp(input, h, leaky, 1, head).with_spectral_norm(dims.spectral_norm);
        if let Some(t) = dims.feature_tap {
            spec = spec.with_feature_tap(t);
        }
        spec
    };

    let mut bundle_g2 = None;
    let mut bundle_d2 = None;
    let mut encoder = None;
    let mut q_net = None;
    let mut g_embedding = None;
    let mut d_embedding = None;

    let (g_spec, d_spec) = match algorithm {
        Algorithm::Vanilla
        | Algorithm::WganClip
        | Algorithm::WganGp
        | Algorithm::Lsgan
        | Algorithm::Hinge => (
            mlp(dims.z_dim, h, relu, d, Activation::Identity),
            critic(d * dims.pack_k),
        ),
        Algorithm::Cgan => {
            if dims.num_classes == 0 || dims.embed_dim == 0 {
                return bad("cgan needs num_classes and embed_dim");
            }
            g_embedding = Some(EmbeddingTable::new(
                dims.num_classes,
                dims.embed_dim,
                derive_seed(seed, 10),
            ));
            d_embedding = Some(EmbeddingTable::new(
                dims.num_classes,
                dims.embed_dim,
                derive_seed(seed, 11),
            ));
            (
                mlp(
                    dims.z_dim + dims.embed_dim,
                    h,
                    relu,
                    d,
                    Activation::Identity,
                ),
                critic((d + dims.embed_dim) * dims.pack_k),
            )
        }
        Algorithm::Infogan => {
            if dims.code_k < 2 || dims.code_k >= dims.z_dim {
                return bad("infogan needs 2 <= code_k < z_dim");
            }
            q_net = Some(net(
                mlp(d, h, leaky, dims.code_k, Activation::Identity),
                12,
            )?);
            (
                mlp(dims.z_dim, h, relu, d, Activation::Identity),
                critic(d * dims.pack_k),
            )
        }
        Algorithm::Ebgan => {
            let width = d * dims.pack_k;
            let mut layers = h.clone();
            layers.push(dims.bottleneck());
            layers.extend(h.iter().rev());
            (
                mlp(dims.z_dim, h, relu, d, Activation::Identity),
                mlp(width, &layers, leaky, width, Activation::Identity)
                    .with_spectral_norm(dims.spectral_norm),
            )
        }
        Algorithm::Aae => {
            let latent = dims.bottleneck();
            encoder = Some(net(mlp(d, h, relu, latent, Activation::Identity), 13)?);
            (
                mlp(latent, h, relu, d, Activation::Identity),
                critic(latent * dims.pack_k),
            )
        }
        Algorithm::Pix2pixToy => (
            mlp(d, h, relu, d, Activation::Identity),
            critic(2 * d * dims.pack_k),
        ),
        Algorithm::CycleganToy => {
            bundle_g2 = Some(net(mlp(d, h, relu, d, Activation::Identity), 14)?);
            bundle_d2 = Some(net(critic(d * dims.pack_k), 15)?);
            (
                mlp(d, h, relu, d, Activation::Identity),
                critic(d * dims.pack_k),
            )
        }
        Algorithm::Ddpm => return Err(ModelError::Unsupported(algorithm)),
    };

    Ok(ModelBundle {
        algorithm,
        dims: dims.clone(),
        generator: net(g_spec, 1)?,
        discriminator: net(d_spec, 2)?,
        generator2: bundle_g2,
        discriminator2: bundle_d2,
        encoder,
        q_net,
        g_embedding,
        d_embedding,
    })
}

/// `[n x d]` to `[n/k x k*d]`, concatenating consecutive groups of `k` rows.
pub fn pack(batch: &Tensor, k: usize) -> Result<Tensor> {
    let n = batch.rows();
    if k == 0 || !n.is_multiple_of(k) {
        return Err(ModelError::NotDivisible { n, k });
    }
    if k == 1 {
        return Ok(batch.clone());
    }
    let groups = n / k;
    let parts: Vec<Tensor> = (0..k)
        .map(|j| batch.select_rows(&(0..groups).map(|g| g * k + j).collect::<Vec<_>>()))
        .collect::<std::result::Result<_, _>>()?;
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(concat(1, &refs)?)
}

/// Inverse of [`pack`] on plain matrices.
pub fn unpack(packed: &Matrix, k: usize) -> Result<Matrix> {
    if k == 0 || !packed.cols.is_multiple_of(k) {
        return Err(ModelError::NotDivisible { n: packed.cols, k });
    }
    let d = packed.cols / k;
    Ok(Matrix::new(packed.rows * k, d, packed.data.clone()))
}

/// Feature-wise concatenation `z || label_vecs`.
pub fn condition(z: &Tensor, label_vecs: &Tensor) -> Result<Tensor> {
    if z.rows() != label_vecs.rows() {
        return Err(ModelError::RowMismatch(z.rows(), label_vecs.rows()));
    }
    Ok(concat(1, &[z, label_vecs])?)
}
