//! RealNVP-style normalizing flow with exact log-density and gradients.
//!
//! The flow is an invertible map `F: R^d -> R^d` built from affine coupling
//! layers. Sampling applies `x = F(y)` with `y ~ N(0, I)`; density evaluation
//! uses the change of variables
//!
//! ```text
//! log p(x) = log N(F^{-1}(x); 0, I) + log |det J_{F^{-1}}(x)|
//! ```
//!
//! Each coupling layer passes one alternating subset of dimensions through
//! unchanged and applies a scale-and-shift to the complement, with scale and
//! shift computed by a two-layer conditioner MLP. The scale is bounded by a
//! learned per-layer cap through `s = cap * tanh(raw)` so the log-determinant
//! cannot overflow. Optional FiLM conditioning modulates the conditioner's
//! hidden activations with a latent code.
//!
//! Gradients of the log-density with respect to inputs, parameters and the
//! latent code are computed by a hand-written reverse pass over the inverse
//! map; everything runs in double precision and any non-finite intermediate
//! surfaces as an error.
//!
//! # Canonical parameter order
//!
//! Parameters form one flat `Vec<f64>`, layer-major. Within layer `l`:
//!
//! 1. `w1` — first conditioner weight matrix, `hidden x in_dim`, row-major
//! 2. `b1` — first bias, `hidden`
//! 3. `w2` — second conditioner weight matrix, `2*out_half x hidden`, row-major
//! 4. `b2` — second bias, `2*out_half`
//! 5. `bn_gamma`, `bn_beta` — `hidden` each, only when `use_batchnorm`
//! 6. `scale_cap` — one scalar
//! 7. `film_gamma`, `film_beta` — `hidden x cond_dim` row-major each, only
//!    when `cond_dim > 0` (FiLM maps come last per layer)
//!
//! where `in_dim` is the number of pass-through dimensions of the layer and
//! `out_half` the number of transformed dimensions. [`param_count`] is a pure
//! function of [`FlowArchitecture`].

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

pub const LOG_TWO_PI: f64 = 1.8378770664093453;
const BN_EPS: f64 = 1e-5;

/// Conditioner activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Swish,
}

impl Activation {
    fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Swish => x * sigmoid(x),
        }
    }

    fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Swish => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Structural description of a flow. Parameter count and layout are pure
/// functions of this struct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowArchitecture {
    /// Data dimensionality, 2 or 3.
    pub data_dim: usize,
    /// Number of coupling layers, >= 1.
    pub num_layers: usize,
    /// Conditioner hidden width, >= 1.
    pub hidden_dim: usize,
    pub activation: Activation,
    /// Latent-code dimensionality; 0 means unconditional.
    pub cond_dim: usize,
    /// Batch normalization inside the conditioner (running statistics at
    /// inference). Off by default.
    pub use_batchnorm: bool,
}

impl FlowArchitecture {
    /// 2-d config used for the synthetic-manifold experiments: 5 coupling
    /// layers, 128 hidden units, relu.
    pub fn toy_2d() -> Self {
        Self {
            data_dim: 2,
            num_layers: 5,
            hidden_dim: 128,
            activation: Activation::Relu,
            cond_dim: 0,
            use_batchnorm: false,
        }
    }

    /// Point-cloud config: 64 coupling layers (63 is the other documented
    /// variant; both are valid), 64 hidden units, swish, FiLM-conditioned on
    /// a 256-d latent.
    pub fn pointcloud_3d() -> Self {
        Self {
            data_dim: 3,
            num_layers: 64,
            hidden_dim: 64,
            activation: Activation::Swish,
            cond_dim: 256,
            use_batchnorm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim != 2 && self.data_dim != 3 {
            return Err(Error::invalid(format!(
                "data_dim must be 2 or 3, got {}",
                self.data_dim
            )));
        }
        if self.num_layers == 0 {
            return Err(Error::invalid("num_layers must be >= 1"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::invalid("hidden_dim must be >= 1"));
        }
        Ok(())
    }

    pub fn is_conditional(&self) -> bool {
        self.cond_dim > 0
    }

    /// Pass-through dimensions of layer `l`. Masks alternate between layers
    /// so every dimension is transformed at least once when `num_layers >= 2`.
    pub fn identity_dims(&self, layer: usize) -> Vec<usize> {
        (0..self.data_dim).filter(|d| (d + layer) % 2 == 0).collect()
    }

    /// Transformed dimensions of layer `l` (complement of `identity_dims`).
    pub fn transformed_dims(&self, layer: usize) -> Vec<usize> {
        (0..self.data_dim).filter(|d| (d + layer) % 2 == 1).collect()
    }
}

/// Latent code conditioning a flow through FiLM.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode(Vec<f64>);

impl LatentCode {
    pub fn new(z: Vec<f64>) -> Self {
        Self(z)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Per-layer slices into the flat parameter vector.
#[derive(Debug, Clone)]
pub struct LayerLayout {
    pub in_dim: usize,
    pub out_half: usize,
    pub w1: std::ops::Range<usize>,
    pub b1: std::ops::Range<usize>,
    pub w2: std::ops::Range<usize>,
    pub b2: std::ops::Range<usize>,
    pub bn_gamma: Option<std::ops::Range<usize>>,
    pub bn_beta: Option<std::ops::Range<usize>>,
    pub scale_cap: usize,
    pub film_gamma: Option<std::ops::Range<usize>>,
    pub film_beta: Option<std::ops::Range<usize>>,
}

/// Computes the canonical per-layer parameter layout for an architecture.
pub fn layout(arch: &FlowArchitecture) -> Vec<LayerLayout> {
    let h = arch.hidden_dim;
    let mut offset = 0usize;
    let mut layers = Vec::with_capacity(arch.num_layers);
    for l in 0..arch.num_layers {
        let in_dim = arch.identity_dims(l).len();
        let out_half = arch.transformed_dims(l).len();
        let out = 2 * out_half;
        let mut take = |n: usize| {
            let r = offset..offset + n;
            offset += n;
            r
        };
        let w1 = take(h * in_dim);
        let b1 = take(h);
        let w2 = take(out * h);
        let b2 = take(out);
        let (bn_gamma, bn_beta) = if arch.use_batchnorm {
            (Some(take(h)), Some(take(h)))
        } else {
            (None, None)
        };
        let scale_cap = take(1).start;
        let (film_gamma, film_beta) = if arch.cond_dim > 0 {
            (Some(take(h * arch.cond_dim)), Some(take(h * arch.cond_dim)))
        } else {
            (None, None)
        };
        layers.push(LayerLayout {
            in_dim,
            out_half,
            w1,
            b1,
            w2,
            b2,
            bn_gamma,
            bn_beta,
            scale_cap,
            film_gamma,
            film_beta,
        });
    }
    layers
}

/// Total parameter count, a pure function of the architecture.
pub fn param_count(arch: &FlowArchitecture) -> usize {
    layout(arch).last().map_or(0, |l| {
        let end_candidates = [
            Some(l.scale_cap + 1),
            l.film_beta.as_ref().map(|r| r.end),
        ];
        end_candidates.into_iter().flatten().max().unwrap()
    })
}

/// Running batch-norm statistics for one layer's conditioner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// An immutable-after-training flow: architecture plus a flat parameter
/// vector in canonical order. Read-only evaluation is safe to share across
/// threads.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub arch: FlowArchitecture,
    pub params: Vec<f64>,
    /// Per-layer running statistics; empty unless `use_batchnorm`.
    pub bn_stats: Vec<BnStats>,
}

/// Builds a flow with deterministic initialization. The final conditioner
/// layer of every coupling block is zero-initialized, so the whole flow is
/// the identity map at construction; this gives exact baselines for the
/// normalization and gradient checks.
pub fn build_flow(arch: &FlowArchitecture, seed: u64) -> Result<FlowModel> {
    arch.validate()?;
    let layers = layout(arch);
    let n = param_count(arch);
    let mut params = vec![0.0; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for lay in &layers {
        let bound = 1.0 / (lay.in_dim.max(1) as f64).sqrt();
        let w1_dist = Uniform::new_inclusive(-bound, bound).expect("finite bounds");
        for i in lay.w1.clone() {
            params[i] = w1_dist.sample(&mut rng);
        }
        let b1_dist = Uniform::new_inclusive(-0.01, 0.01).expect("finite bounds");
        for i in lay.b1.clone() {
            params[i] = b1_dist.sample(&mut rng);
        }
        // w2, b2, film maps stay zero: coupling starts as identity.
        if let Some(r) = &lay.bn_gamma {
            for i in r.clone() {
                params[i] = 1.0;
            }
        }
        params[lay.scale_cap] = 1.0;
    }
    let bn_stats = if arch.use_batchnorm {
        (0..arch.num_layers)
            .map(|_| BnStats {
                mean: vec![0.0; arch.hidden_dim],
                var: vec![1.0; arch.hidden_dim],
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(FlowModel {
        arch: arch.clone(),
        params,
        bn_stats,
    })
}

/// Intermediate values of one coupling layer's inverse evaluation, kept for
/// the reverse pass.
struct LayerTape {
    u: Vec<f64>,
    h_lin: Vec<f64>,
    gz: Vec<f64>,
    h_film: Vec<f64>,
    h_norm: Vec<f64>,
    raw_s: Vec<f64>,
    t: Vec<f64>,
    s: Vec<f64>,
    out_b: Vec<f64>,
}

/// Gradients of `log_prob` at one point.
pub struct LogProbGrads {
    pub value: f64,
    pub wrt_input: Vec<f64>,
    /// Present only when conditional.
    pub wrt_cond: Option<Vec<f64>>,
}

impl FlowModel {
    pub fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    pub fn layout(&self) -> Vec<LayerLayout> {
        layout(&self.arch)
    }

    fn check_point(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.arch.data_dim {
            return Err(Error::invalid(format!(
                "point has dimension {}, flow expects {}",
                p.len(),
                self.arch.data_dim
            )));
        }
        Ok(())
    }

    fn check_cond<'a>(&self, cond: Option<&'a LatentCode>) -> Result<Option<&'a [f64]>> {
        match (self.arch.is_conditional(), cond) {
            (false, None) => Ok(None),
            (false, Some(_)) => Err(Error::invalid(
                "latent code supplied to an unconditional flow",
            )),
            (true, None) => Err(Error::invalid(
                "conditional flow evaluated without a latent code",
            )),
            (true, Some(z)) => {
                if z.dim() != self.arch.cond_dim {
                    return Err(Error::invalid(format!(
                        "latent code has dimension {}, flow expects {}",
                        z.dim(),
                        self.arch.cond_dim
                    )));
                }
                Ok(Some(z.as_slice()))
            }
        }
    }

    /// Evaluates the conditioner of layer `l` at pass-through coordinates
    /// `u`, returning the tape of intermediates.
    fn conditioner_with_layout(
        &self,
        l: usize,
        lay: &LayerLayout,
        u: &[f64],
        z: Option<&[f64]>,
    ) -> LayerTape {
        let h = self.arch.hidden_dim;
        let p = &self.params;
        let mut h_lin = vec![0.0; h];
        for i in 0..h {
            let row = &p[lay.w1.start + i * lay.in_dim..lay.w1.start + (i + 1) * lay.in_dim];
            let mut acc = p[lay.b1.start + i];
            for (w, x) in row.iter().zip(u) {
                acc += w * x;
            }
            h_lin[i] = acc;
        }
        let (gz, h_film) = if let Some(z) = z {
            let gr = lay.film_gamma.as_ref().expect("conditional layout");
            let br = lay.film_beta.as_ref().expect("conditional layout");
            let cd = self.arch.cond_dim;
            let mut gz = vec![0.0; h];
            let mut bz = vec![0.0; h];
            for i in 0..h {
                let grow = &p[gr.start + i * cd..gr.start + (i + 1) * cd];
                let brow = &p[br.start + i * cd..br.start + (i + 1) * cd];
                let mut ga = 0.0;
                let mut ba = 0.0;
                for k in 0..cd {
                    ga += grow[k] * z[k];
                    ba += brow[k] * z[k];
                }
                gz[i] = ga;
                bz[i] = ba;
            }
            let h_film: Vec<f64> = (0..h).map(|i| h_lin[i] * (1.0 + gz[i]) + bz[i]).collect();
            (gz, h_film)
        } else {
            (Vec::new(), h_lin.clone())
        };
        let h_norm = if self.arch.use_batchnorm {
            let stats = &self.bn_stats[l];
            let gr = lay.bn_gamma.as_ref().expect("bn layout");
            let br = lay.bn_beta.as_ref().expect("bn layout");
            (0..h)
                .map(|i| {
                    p[gr.start + i] * (h_film[i] - stats.mean[i])
                        / (stats.var[i] + BN_EPS).sqrt()
                        + p[br.start + i]
                })
                .collect()
        } else {
            h_film.clone()
        };
        let act = self.arch.activation;
        let h_act: Vec<f64> = h_norm.iter().map(|&x| act.eval(x)).collect();
        let out = 2 * lay.out_half;
        let mut o = vec![0.0; out];
        for i in 0..out {
            let row = &p[lay.w2.start + i * h..lay.w2.start + (i + 1) * h];
            let mut acc = p[lay.b2.start + i];
            for (w, a) in row.iter().zip(&h_act) {
                acc += w * a;
            }
            o[i] = acc;
        }
        let cap = p[lay.scale_cap];
        let raw_s = o[..lay.out_half].to_vec();
        let t = o[lay.out_half..].to_vec();
        let s: Vec<f64> = raw_s.iter().map(|&r| cap * r.tanh()).collect();
        LayerTape {
            u: u.to_vec(),
            h_lin,
            gz,
            h_film,
            h_norm,
            raw_s,
            t,
            s,
            out_b: Vec::new(),
        }
    }

    /// Applies the flow in the sampling direction: `x = F(y)`. Returns the
    /// image and `log |det J_F(y)|`.
    pub fn forward(&self, y: &[f64], cond: Option<&LatentCode>) -> Result<(Vec<f64>, f64)> {
        self.check_point(y)?;
        let z = self.check_cond(cond)?;
        let layers = self.layout();
        let mut v = y.to_vec();
        let mut logdet = 0.0;
        for l in 0..self.arch.num_layers {
            let ids = self.arch.identity_dims(l);
            let tds = self.arch.transformed_dims(l);
            let u: Vec<f64> = ids.iter().map(|&d| v[d]).collect();
            let tape = self.conditioner_with_layout(l, &layers[l], &u, z);
            for (j, &d) in tds.iter().enumerate() {
                v[d] = v[d] * tape.s[j].exp() + tape.t[j];
                logdet += tape.s[j];
            }
        }
        if !v.iter().all(|x| x.is_finite()) || !logdet.is_finite() {
            return Err(Error::numeric("non-finite value in forward map"));
        }
        Ok((v, logdet))
    }

    /// Applies the exact inverse: `y = F^{-1}(x)`. Returns the preimage and
    /// `log |det J_{F^{-1}}(x)|`.
    pub fn inverse(&self, x: &[f64], cond: Option<&LatentCode>) -> Result<(Vec<f64>, f64)> {
        self.check_point(x)?;
        let z = self.check_cond(cond)?;
        let (y, logdet, _) = self.inverse_with_tapes(x, z, false)?;
        Ok((y, logdet))
    }

    fn inverse_with_tapes(
        &self,
        x: &[f64],
        z: Option<&[f64]>,
        keep_tapes: bool,
    ) -> Result<(Vec<f64>, f64, Vec<LayerTape>)> {
        let layers = self.layout();
        let mut v = x.to_vec();
        let mut logdet = 0.0;
        let mut tape_slots: Vec<Option<LayerTape>> = if keep_tapes {
            (0..self.arch.num_layers).map(|_| None).collect()
        } else {
            Vec::new()
        };
        for l in (0..self.arch.num_layers).rev() {
            let ids = self.arch.identity_dims(l);
            let tds = self.arch.transformed_dims(l);
            let u: Vec<f64> = ids.iter().map(|&d| v[d]).collect();
            let mut tape = self.conditioner_with_layout(l, &layers[l], &u, z);
            let mut out_b = vec![0.0; tds.len()];
            for (j, &d) in tds.iter().enumerate() {
                out_b[j] = (v[d] - tape.t[j]) * (-tape.s[j]).exp();
                v[d] = out_b[j];
                logdet -= tape.s[j];
            }
            if keep_tapes {
                tape.out_b = out_b;
                tape_slots[l] = Some(tape);
            }
        }
        if !v.iter().all(|c| c.is_finite()) || !logdet.is_finite() {
            return Err(Error::numeric("non-finite value in inverse map"));
        }
        let collected = if keep_tapes {
            tape_slots.into_iter().map(|t| t.expect("tape filled")).collect()
        } else {
            Vec::new()
        };
        Ok((v, logdet, collected))
    }

    /// Exact log-density under the flow.
    pub fn log_prob(&self, x: &[f64], cond: Option<&LatentCode>) -> Result<f64> {
        let (y, logdet) = self.inverse(x, cond)?;
        let d = self.arch.data_dim as f64;
        let base = -0.5 * y.iter().map(|c| c * c).sum::<f64>() - 0.5 * d * LOG_TWO_PI;
        let lp = base + logdet;
        if !lp.is_finite() {
            return Err(Error::numeric("non-finite log-density"));
        }
        Ok(lp)
    }

    /// Draws `n` deterministic samples: `x_i = F(y_i)` with `y_i ~ N(0, I)`
    /// from a seeded stream.
    pub fn sample(&self, n: usize, seed: u64, cond: Option<&LatentCode>) -> Result<PointCloud> {
        if n == 0 {
            return Err(Error::invalid("sample count must be >= 1"));
        }
        let d = self.arch.data_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coords = Vec::with_capacity(n * d);
        let mut y = vec![0.0; d];
        for _ in 0..n {
            for c in y.iter_mut() {
                *c = StandardNormal.sample(&mut rng);
            }
            let (x, _) = self.forward(&y, cond)?;
            coords.extend_from_slice(&x);
        }
        PointCloud::from_flat(d, coords)
    }

    /// Gradient of `log_prob` with respect to the input point.
    pub fn grad_x_log_prob(&self, x: &[f64], cond: Option<&LatentCode>) -> Result<Vec<f64>> {
        Ok(self.log_prob_backward(x, cond, None)?.wrt_input)
    }

    /// Log-density together with its input gradient and (for conditional
    /// flows) the latent-code gradient. When `param_accum` is given, the
    /// gradient of `log_prob` with respect to every parameter is *added*
    /// into it (canonical order).
    pub fn log_prob_backward(
        &self,
        x: &[f64],
        cond: Option<&LatentCode>,
        mut param_accum: Option<&mut [f64]>,
    ) -> Result<LogProbGrads> {
        self.check_point(x)?;
        let z = self.check_cond(cond)?;
        if let Some(acc) = param_accum.as_deref() {
            if acc.len() != self.params.len() {
                return Err(Error::invalid("parameter gradient buffer length mismatch"));
            }
        }
        let (y, logdet, tapes) = self.inverse_with_tapes(x, z, true)?;
        let d = self.arch.data_dim as f64;
        let base = -0.5 * y.iter().map(|c| c * c).sum::<f64>() - 0.5 * d * LOG_TWO_PI;
        let value = base + logdet;
        if !value.is_finite() {
            return Err(Error::numeric("non-finite log-density"));
        }

        let layers = self.layout();
        // d log_prob / d y of the Gaussian base term.
        let mut g: Vec<f64> = y.iter().map(|&c| -c).collect();
        let mut gz_total = vec![0.0; self.arch.cond_dim];
        // The inverse applied layers (L-1 .. 0); reverse-mode walks 0 .. L-1.
        for l in 0..self.arch.num_layers {
            g = self.layer_backward(
                l,
                &layers[l],
                &tapes[l],
                z,
                &g,
                param_accum.as_deref_mut(),
                &mut gz_total,
            );
        }
        if !g.iter().all(|c| c.is_finite()) {
            return Err(Error::numeric("non-finite input gradient"));
        }
        Ok(LogProbGrads {
            value,
            wrt_input: g,
            wrt_cond: if self.arch.is_conditional() {
                Some(gz_total)
            } else {
                None
            },
        })
    }

    /// Reverse pass through one coupling layer's inverse step. `g_out` is the
    /// gradient at the layer's output (base side); the return value is the
    /// gradient at its input (data side). The log-determinant contribution
    /// enters with coefficient 1.
    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        l: usize,
        lay: &LayerLayout,
        tape: &LayerTape,
        z: Option<&[f64]>,
        g_out: &[f64],
        mut param_accum: Option<&mut [f64]>,
        gz_total: &mut [f64],
    ) -> Vec<f64> {
        let ids = self.arch.identity_dims(l);
        let tds = self.arch.transformed_dims(l);
        let h = self.arch.hidden_dim;
        let p = &self.params;
        let cap = p[lay.scale_cap];

        let half = lay.out_half;
        let mut g_in = vec![0.0; self.arch.data_dim];
        let mut ds = vec![0.0; half];
        let mut dt = vec![0.0; half];
        for (j, &dthis) in tds.iter().enumerate() {
            let gw = g_out[dthis];
            let e = (-tape.s[j]).exp();
            g_in[dthis] = gw * e;
            // w_B = (v_B - t) e^{-s}: d/ds = -w_B; logdet term d/ds = -1.
            ds[j] = -gw * tape.out_b[j] - 1.0;
            dt[j] = -gw * e;
        }

        // s = cap * tanh(raw_s)
        let mut draw = vec![0.0; half];
        let mut dcap = 0.0;
        for j in 0..half {
            let th = tape.raw_s[j].tanh();
            draw[j] = ds[j] * cap * (1.0 - th * th);
            dcap += ds[j] * th;
        }

        // o = [raw_s; t] = W2 a + b2
        let act = self.arch.activation;
        let h_act: Vec<f64> = tape.h_norm.iter().map(|&v| act.eval(v)).collect();
        let out = 2 * half;
        let mut da = vec![0.0; h];
        for i in 0..out {
            let doi = if i < half { draw[i] } else { dt[i - half] };
            let row = &p[lay.w2.start + i * h..lay.w2.start + (i + 1) * h];
            for (k, w) in row.iter().enumerate() {
                da[k] += w * doi;
            }
            if let Some(acc) = param_accum.as_deref_mut() {
                for k in 0..h {
                    acc[lay.w2.start + i * h + k] += doi * h_act[k];
                }
                acc[lay.b2.start + i] += doi;
            }
        }
        if let Some(acc) = param_accum.as_deref_mut() {
            acc[lay.scale_cap] += dcap;
        }

        // activation
        let mut dh_norm = vec![0.0; h];
        for i in 0..h {
            dh_norm[i] = da[i] * act.deriv(tape.h_norm[i]);
        }

        // batch norm with frozen running statistics
        let dh_film = if self.arch.use_batchnorm {
            let stats = &self.bn_stats[l];
            let gr = lay.bn_gamma.as_ref().expect("bn layout");
            let br = lay.bn_beta.as_ref().expect("bn layout");
            let mut dh_film = vec![0.0; h];
            for i in 0..h {
                let inv_sd = 1.0 / (stats.var[i] + BN_EPS).sqrt();
                dh_film[i] = dh_norm[i] * p[gr.start + i] * inv_sd;
                if let Some(acc) = param_accum.as_deref_mut() {
                    acc[gr.start + i] += dh_norm[i] * (tape.h_film[i] - stats.mean[i]) * inv_sd;
                    acc[br.start + i] += dh_norm[i];
                }
            }
            dh_film
        } else {
            dh_norm
        };

        // FiLM: h_film = h_lin * (1 + Gz) + Bz
        let dh_lin = if let Some(z) = z {
            let gr = lay.film_gamma.as_ref().expect("conditional layout");
            let br = lay.film_beta.as_ref().expect("conditional layout");
            let cd = self.arch.cond_dim;
            let mut dh_lin = vec![0.0; h];
            for i in 0..h {
                dh_lin[i] = dh_film[i] * (1.0 + tape.gz[i]);
                let gh = dh_film[i] * tape.h_lin[i];
                let grow = &p[gr.start + i * cd..gr.start + (i + 1) * cd];
                let brow = &p[br.start + i * cd..br.start + (i + 1) * cd];
                for k in 0..cd {
                    gz_total[k] += grow[k] * gh + brow[k] * dh_film[i];
                }
                if let Some(acc) = param_accum.as_deref_mut() {
                    for k in 0..cd {
                        acc[gr.start + i * cd + k] += gh * z[k];
                        acc[br.start + i * cd + k] += dh_film[i] * z[k];
                    }
                }
            }
            dh_lin
        } else {
            dh_film
        };

        // first linear layer
        for i in 0..h {
            let row = &p[lay.w1.start + i * lay.in_dim..lay.w1.start + (i + 1) * lay.in_dim];
            for (k, w) in row.iter().enumerate() {
                g_in[ids[k]] += w * dh_lin[i];
            }
            if let Some(acc) = param_accum.as_deref_mut() {
                for k in 0..lay.in_dim {
                    acc[lay.w1.start + i * lay.in_dim + k] += dh_lin[i] * tape.u[k];
                }
                acc[lay.b1.start + i] += dh_lin[i];
            }
        }

        // pass-through dims also receive the upstream gradient directly
        for &dthis in &ids {
            g_in[dthis] += g_out[dthis];
        }
        g_in
    }

    /// Gradient of the mean negative log-likelihood of `batch` with respect
    /// to the parameters, in canonical order. A single latent code is shared
    /// across the batch.
    pub fn param_grads(&self, batch: &PointCloud, cond: Option<&LatentCode>) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(Error::invalid("parameter gradients need a non-empty batch"));
        }
        if batch.dim() != self.arch.data_dim {
            return Err(Error::invalid("batch dimension does not match the flow"));
        }
        let mut acc = vec![0.0; self.params.len()];
        for i in 0..batch.len() {
            self.log_prob_backward(batch.point(i), cond, Some(&mut acc))?;
        }
        let scale = -1.0 / batch.len() as f64;
        for g in acc.iter_mut() {
            *g *= scale;
        }
        Ok(acc)
    }
}
