//! Model parameters, initialization and the binary model file.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GnnError, Real};
use crate::binio::{put_f32s, put_u32, Reader};
use crate::vlad::{Metric, Vocabulary};

const MAGIC: &[u8; 4] = b"LGNN";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    /// Zero node feature entries.
    #[default]
    Feature,
    /// Drop attention edges (self-loops are kept).
    Edge,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    /// NetVLAD clusters.
    pub n_clusters: usize,
    /// Local descriptor width.
    pub desc_dim: usize,
    /// Node feature width after projection.
    pub hidden: usize,
    pub mlp_hidden: usize,
    /// Message passing steps; zero scores every pair independently.
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub dropout_mode: DropoutMode,
    pub leaky_slope: f64,
    /// Adds the layer input to the attention output.
    pub residual: bool,
    /// Scale applied to the Glorot init of attention layer weights.
    pub gat_init_gain: f64,
    /// Starts the edge classifier with `w_b = -w_a`, so that its first layer
    /// sees the difference of the two endpoint features.
    pub difference_init: bool,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            n_clusters: 64,
            desc_dim: 128,
            hidden: 256,
            mlp_hidden: 256,
            layers: 6,
            heads: 1,
            dropout: 0.2,
            dropout_mode: DropoutMode::Feature,
            leaky_slope: 0.2,
            residual: false,
            gat_init_gain: 1.0,
            difference_init: false,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<(), GnnError> {
        let bad = |m: &str| Err(GnnError::InvalidConfig(m.to_string()));
        if self.n_clusters == 0 || self.desc_dim == 0 || self.hidden == 0 || self.mlp_hidden == 0 {
            return bad("model widths must be positive");
        }
        if self.heads == 0 {
            return bad("heads must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad("leaky_slope must be non-negative");
        }
        if !(self.gat_init_gain.is_finite() && self.gat_init_gain > 0.0) {
            return bad("gat_init_gain must be positive");
        }
        Ok(())
    }

    pub fn netvlad_dim(&self) -> usize {
        self.n_clusters * self.desc_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetVladParams<T> {
    /// `n_clusters x desc_dim`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    /// `n_clusters x desc_dim`, row-major.
    pub centers: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `n_out x n_in`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub n_in: usize,
    pub n_out: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatHead<T> {
    /// `hidden x hidden`, row-major.
    pub weight: Vec<T>,
    /// Attention weights on the receiving node.
    pub att_src: Vec<T>,
    /// Attention weights on the neighbor.
    pub att_dst: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatLayerParams<T> {
    pub heads: Vec<GatHead<T>>,
}

/// Two-layer edge classifier on `[x_m | x_n]`; the first layer is stored as
/// the two column blocks acting on each endpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMlp<T> {
    pub w_a: Vec<T>,
    pub w_b: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub hyper: Hyper,
    pub netvlad: NetVladParams<T>,
    pub projection: Linear<T>,
    pub gat: Vec<GatLayerParams<T>>,
    pub edge_mlp: EdgeMlp<T>,
}

fn glorot<T: Real>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| T::from_f64(rng.random_range(-limit..limit)).unwrap()).collect()
}

impl<T: Real> ModelParams<T> {
    /// Glorot-uniform weights, zero biases, seeded.
    pub fn init(hyper: Hyper, seed: u64) -> Result<Self, GnnError> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, d, h, m) = (hyper.n_clusters, hyper.desc_dim, hyper.hidden, hyper.mlp_hidden);
        let netvlad = NetVladParams {
            weight: glorot(&mut rng, c * d, d, c),
            bias: vec![T::zero(); c],
            centers: glorot(&mut rng, c * d, d, c),
        };
        let projection = Linear { weight: glorot(&mut rng, h * c * d, c * d, h), bias: vec![T::zero(); h], n_in: c * d, n_out: h };
        let gain = T::from_f64(hyper.gat_init_gain).unwrap();
        let gat = (0..hyper.layers)
            .map(|_| GatLayerParams {
                heads: (0..hyper.heads)
                    .map(|_| GatHead {
                        weight: glorot::<T>(&mut rng, h * h, h, h).into_iter().map(|w| w * gain).collect(),
                        att_src: glorot(&mut rng, h, 2 * h, 1),
                        att_dst: glorot(&mut rng, h, 2 * h, 1),
                    })
                    .collect(),
            })
            .collect();
        let w_a = glorot(&mut rng, m * h, 2 * h, m);
        let mut w_b = glorot(&mut rng, m * h, 2 * h, m);
        if hyper.difference_init {
            w_b = w_a.iter().map(|&w: &T| -w).collect();
        }
        let edge_mlp = EdgeMlp {
            w_a,
            w_b,
            b1: vec![T::zero(); m],
            w2: glorot(&mut rng, m, m, 1),
            b2: vec![T::zero(); 1],
        };
        Ok(ModelParams { hyper, netvlad, projection, gat, edge_mlp })
    }

    /// Sets the NetVLAD clusters from a fitted vocabulary so that, at large
    /// `alpha`, soft assignment approaches the vocabulary's hard assignment.
    pub fn init_netvlad_from_vocabulary(&mut self, vocab: &Vocabulary, alpha: f64) -> Result<(), GnnError> {
        if vocab.n_clusters() != self.hyper.n_clusters || vocab.dim() != self.hyper.desc_dim {
            return Err(GnnError::DimensionMismatch {
                expected: self.hyper.netvlad_dim(),
                found: vocab.n_clusters() * vocab.dim(),
            });
        }
        self.netvlad = NetVladParams::from_vocabulary(vocab, alpha);
        Ok(())
    }

    /// An all-zero parameter set with the same shapes (gradient buffer).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(|_, v| v.iter_mut().for_each(|x| *x = T::zero()));
        z
    }

    /// Visits every tensor in file order with its name and shape.
    pub fn visit(&self, mut f: impl FnMut(&str, &[usize], &[T])) {
        let (c, d, h, m) = (self.hyper.n_clusters, self.hyper.desc_dim, self.hyper.hidden, self.hyper.mlp_hidden);
        f("netvlad.weight", &[c, d], &self.netvlad.weight);
        f("netvlad.bias", &[c], &self.netvlad.bias);
        f("netvlad.centers", &[c, d], &self.netvlad.centers);
        f("projection.weight", &[h, c * d], &self.projection.weight);
        f("projection.bias", &[h], &self.projection.bias);
        for (l, layer) in self.gat.iter().enumerate() {
            for (k, head) in layer.heads.iter().enumerate() {
                f(&format!("gat.{l}.{k}.weight"), &[h, h], &head.weight);
                f(&format!("gat.{l}.{k}.att_src"), &[h], &head.att_src);
                f(&format!("gat.{l}.{k}.att_dst"), &[h], &head.att_dst);
            }
        }
        f("edge_mlp.w_a", &[m, h], &self.edge_mlp.w_a);
        f("edge_mlp.w_b", &[m, h], &self.edge_mlp.w_b);
        f("edge_mlp.b1", &[m], &self.edge_mlp.b1);
        f("edge_mlp.w2", &[m], &self.edge_mlp.w2);
        f("edge_mlp.b2", &[1], &self.edge_mlp.b2);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Vec<T>)) {
        f("netvlad.weight", &mut self.netvlad.weight);
        f("netvlad.bias", &mut self.netvlad.bias);
        f("netvlad.centers", &mut self.netvlad.centers);
        f("projection.weight", &mut self.projection.weight);
        f("projection.bias", &mut self.projection.bias);
        for (l, layer) in self.gat.iter_mut().enumerate() {
            for (k, head) in layer.heads.iter_mut().enumerate() {
                f(&format!("gat.{l}.{k}.weight"), &mut head.weight);
                f(&format!("gat.{l}.{k}.att_src"), &mut head.att_src);
                f(&format!("gat.{l}.{k}.att_dst"), &mut head.att_dst);
            }
        }
        f("edge_mlp.w_a", &mut self.edge_mlp.w_a);
        f("edge_mlp.w_b", &mut self.edge_mlp.w_b);
        f("edge_mlp.b1", &mut self.edge_mlp.b1);
        f("edge_mlp.w2", &mut self.edge_mlp.w2);
        f("edge_mlp.b2", &mut self.edge_mlp.b2);
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _, v| n += v.len());
        n
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_parameters());
        self.visit(|_, _, v| out.extend_from_slice(v));
        out
    }

    pub fn assign_flat(&mut self, flat: &[T]) {
        let mut at = 0;
        self.visit_mut(|_, v| {
            let n = v.len();
            v.copy_from_slice(&flat[at..at + n]);
            at += n;
        });
    }

    /// Parameter groups: name prefix plus flat index range.
    pub fn groups(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut out: Vec<(String, std::ops::Range<usize>)> = Vec::new();
        let mut at = 0;
        self.visit(|name, _, v| {
            let group = match name.split('.').collect::<Vec<_>>().as_slice() {
                ["gat", l, ..] => format!("gat.{l}"),
                [g, ..] => g.to_string(),
                [] => String::new(),
            };
            match out.last_mut() {
                Some((g, r)) if *g == group => r.end = at + v.len(),
                _ => out.push((group, at..at + v.len())),
            }
            at += v.len();
        });
        out
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect::<Vec<U>>();
        ModelParams {
            hyper: self.hyper.clone(),
            netvlad: NetVladParams {
                weight: conv(&self.netvlad.weight),
                bias: conv(&self.netvlad.bias),
                centers: conv(&self.netvlad.centers),
            },
            projection: Linear {
                weight: conv(&self.projection.weight),
                bias: conv(&self.projection.bias),
                n_in: self.projection.n_in,
                n_out: self.projection.n_out,
            },
            gat: self
                .gat
                .iter()
                .map(|l| GatLayerParams {
                    heads: l
                        .heads
                        .iter()
                        .map(|h| GatHead { weight: conv(&h.weight), att_src: conv(&h.att_src), att_dst: conv(&h.att_dst) })
                        .collect(),
                })
                .collect(),
            edge_mlp: EdgeMlp {
                w_a: conv(&self.edge_mlp.w_a),
                w_b: conv(&self.edge_mlp.w_b),
                b1: conv(&self.edge_mlp.b1),
                w2: conv(&self.edge_mlp.w2),
                b2: conv(&self.edge_mlp.b2),
            },
        }
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }

    /// Hex SHA-256 over the little-endian f32 payload of every tensor.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        self.visit(|name, _, v| {
            h.update(name.as_bytes());
            for x in v {
                h.update(x.to_f32().unwrap().to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION).unwrap();
        let hyper = serde_json::to_vec(&self.hyper).expect("hyperparameters serialize");
        put_u32(&mut out, hyper.len() as u32).unwrap();
        out.write_all(&hyper).unwrap();
        let mut count = 0u32;
        self.visit(|_, _, _| count += 1);
        put_u32(&mut out, count).unwrap();
        self.visit(|name, shape, v| {
            put_u32(&mut out, name.len() as u32).unwrap();
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, shape.len() as u32).unwrap();
            for &s in shape {
                put_u32(&mut out, s as u32).unwrap();
            }
            let vals: Vec<f32> = v.iter().map(|x| x.to_f32().unwrap()).collect();
            put_f32s(&mut out, &vals).unwrap();
        });
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GnnError> {
        let mut r = Reader::new(bytes);
        if !r.magic(MAGIC) {
            return Err(GnnError::ModelFile("bad magic".into()));
        }
        let trunc = || GnnError::ModelFile("truncated".into());
        let version = r.u32().ok_or_else(trunc)?;
        if version != VERSION {
            return Err(GnnError::ModelFile(format!("unsupported version {version}")));
        }
        let hlen = r.u32().ok_or_else(trunc)? as usize;
        let hyper: Hyper = serde_json::from_slice(r.bytes(hlen).ok_or_else(trunc)?)
            .map_err(|e| GnnError::ModelFile(format!("hyperparameters: {e}")))?;
        let mut params = ModelParams::<T>::init(hyper, 0)?;
        let count = r.u32().ok_or_else(trunc)? as usize;
        let mut tensors = std::collections::HashMap::new();
        for _ in 0..count {
            let nlen = r.u32().ok_or_else(trunc)? as usize;
            let name = String::from_utf8(r.bytes(nlen).ok_or_else(trunc)?.to_vec())
                .map_err(|_| GnnError::ModelFile("tensor name is not UTF-8".into()))?;
            let rank = r.u32().ok_or_else(trunc)? as usize;
            let mut n = 1usize;
            for _ in 0..rank {
                n = n.checked_mul(r.u32().ok_or_else(trunc)? as usize).ok_or_else(trunc)?;
            }
            tensors.insert(name, r.f32_vec(n).ok_or_else(trunc)?);
        }
        let mut err = None;
        params.visit_mut(|name, v| match tensors.get(name) {
            Some(data) if data.len() == v.len() => {
                for (dst, &src) in v.iter_mut().zip(data) {
                    *dst = T::from_f32(src).unwrap();
                }
            }
            Some(data) => {
                err.get_or_insert(GnnError::ModelFile(format!("{name}: expected {} values, found {}", v.len(), data.len())));
            }
            None => {
                err.get_or_insert(GnnError::ModelFile(format!("missing tensor {name}")));
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(params),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), GnnError> {
        fs::write(path, self.to_bytes()).map_err(|e| GnnError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, GnnError> {
        let bytes = fs::read(path).map_err(|e| GnnError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

impl<T: Real> NetVladParams<T> {
    /// `w_j = alpha * a_j`, `b_j = alpha * beta_j` with the linear form whose
    /// argmax is the vocabulary's nearest centroid.
    pub fn from_vocabulary(vocab: &Vocabulary, alpha: f64) -> Self {
        let (c, d) = (vocab.n_clusters(), vocab.dim());
        let mut weight = Vec::with_capacity(c * d);
        let mut bias = Vec::with_capacity(c);
        let mut centers = Vec::with_capacity(c * d);
        for j in 0..c {
            let cj: Vec<f64> = vocab.centroid(j).iter().map(|&v| v as f64).collect();
            let sq: f64 = cj.iter().map(|v| v * v).sum();
            match vocab.metric() {
                Metric::Cosine => {
                    let n = sq.sqrt().max(f64::MIN_POSITIVE);
                    weight.extend(cj.iter().map(|v| T::from_f64(alpha * v / n).unwrap()));
                    bias.push(T::zero());
                }
                Metric::Euclidean => {
                    weight.extend(cj.iter().map(|v| T::from_f64(alpha * 2.0 * v).unwrap()));
                    bias.push(T::from_f64(-alpha * sq).unwrap());
                }
            }
            centers.extend(cj.iter().map(|&v| T::from_f64(v).unwrap()));
        }
        NetVladParams { weight, bias, centers }
    }
}
