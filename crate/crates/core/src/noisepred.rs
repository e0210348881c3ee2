//! Noise predictor with timestep conditioning and adversarial heads.
//!
//! ```text
//! [x_t ; temb(t)] -> trunk_in (relu) --+--> trunk_out (relu, linear) = penultimate
//!                    temb_proj(temb) --'        |
//!                                               +--> head_eps     -> eps_hat
//!                                               +--> head_cas     -> source activity logits
//!                                               +-GRL-> head_adv_a -> activity logits
//!                                               '-GRL-> head_adv_u -> domain logits
//! ```
//!
//! The timestep embedding enters twice: concatenated to the input and added
//! again after the first hidden layer.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{ensure_dim, Error, Result};
use crate::nn::{grl, Activation, DenseNet, GradientSet, Parameters, Tape, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalEmbedding {
    pub dim: usize,
    pub max_t: usize,
}

impl TemporalEmbedding {
    pub fn new(dim: usize, max_t: usize) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "temporal embedding dim must be even and positive, got {dim}"
            )));
        }
        Ok(TemporalEmbedding { dim, max_t })
    }
}

/// Sinusoidal encoding `[sin(t w_i), cos(t w_i)]` with `w_i = 10000^(-2i/dim)`.
pub fn temporal_embed(t: usize, emb: &TemporalEmbedding) -> Result<Vector> {
    if t == 0 || t > emb.max_t {
        return Err(Error::OutOfRange {
            what: "timestep",
            value: t as i64,
            lo: 1,
            hi: emb.max_t as i64,
        });
    }
    let mut out = Vector::zeros(emb.dim);
    for i in 0..emb.dim / 2 {
        let freq = 10000f64.powf(-(2.0 * i as f64) / emb.dim as f64);
        let arg = t as f64 * freq;
        out[2 * i] = arg.sin();
        out[2 * i + 1] = arg.cos();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorOutputs {
    pub eps_hat: Vector,
    pub logits_cas: Vector,
    pub logits_adv_a: Vector,
    pub logits_adv_u: Vector,
    pub penultimate: Vector,
}

/// Widths of the predictor; see [`PredictorNet::new`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictorShape {
    pub dim: usize,
    pub temb_dim: usize,
    pub hidden: usize,
    pub penultimate: usize,
    pub source_classes: usize,
    pub activity_classes: usize,
    pub timesteps: usize,
}

impl PredictorShape {
    /// Default widths for feature dimension `dim`: hidden `4 * dim`, penultimate `2 * dim`.
    pub fn for_dim(dim: usize, source_classes: usize, activity_classes: usize, timesteps: usize) -> Self {
        PredictorShape {
            dim,
            temb_dim: 16,
            hidden: 4 * dim,
            penultimate: 2 * dim,
            source_classes,
            activity_classes,
            timesteps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorNet {
    pub temb: TemporalEmbedding,
    pub trunk_in: DenseNet,
    pub temb_proj: DenseNet,
    pub trunk_out: DenseNet,
    pub head_eps: DenseNet,
    pub head_cas: DenseNet,
    pub head_adv_a: DenseNet,
    pub head_adv_u: DenseNet,
}

#[derive(Clone, Debug)]
pub struct PredTape {
    temb: Vector,
    trunk_in: Tape,
    temb_proj: Tape,
    trunk_out: Tape,
    eps: Tape,
    cas: Tape,
    adv_a: Tape,
    adv_u: Tape,
    lambda_grl: f64,
}

/// Upstream gradients for each predictor output. `None` means no loss on it.
#[derive(Clone, Debug, Default)]
pub struct OutputGrads {
    pub eps_hat: Option<Vector>,
    pub cas: Option<Vector>,
    pub adv_a: Option<Vector>,
    pub adv_u: Option<Vector>,
    /// Multiplier on each head's gradient as it enters the trunk:
    /// `[cas, adv_a, adv_u]`. Head parameters always get the raw gradient.
    pub trunk_scale: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorGrads {
    pub trunk_in: GradientSet,
    pub temb_proj: GradientSet,
    pub trunk_out: GradientSet,
    pub head_eps: GradientSet,
    pub head_cas: GradientSet,
    pub head_adv_a: GradientSet,
    pub head_adv_u: GradientSet,
}

impl PredictorNet {
    pub fn new<R: Rng + ?Sized>(shape: PredictorShape, rng: &mut R) -> Result<Self> {
        let PredictorShape {
            dim,
            temb_dim,
            hidden,
            penultimate,
            source_classes,
            activity_classes,
            timesteps,
        } = shape;
        let temb = TemporalEmbedding::new(temb_dim, timesteps)?;
        Ok(PredictorNet {
            temb,
            trunk_in: DenseNet::new(dim + temb_dim, &[(hidden, Activation::Relu)], rng)?,
            temb_proj: DenseNet::new(temb_dim, &[(hidden, Activation::Linear)], rng)?,
            trunk_out: DenseNet::new(
                hidden,
                &[(hidden, Activation::Relu), (penultimate, Activation::Linear)],
                rng,
            )?,
            head_eps: DenseNet::new(penultimate, &[(dim, Activation::Linear)], rng)?,
            head_cas: DenseNet::new(penultimate, &[(source_classes, Activation::Linear)], rng)?,
            head_adv_a: DenseNet::new(
                penultimate,
                &[(penultimate, Activation::Relu), (activity_classes, Activation::Linear)],
                rng,
            )?,
            head_adv_u: DenseNet::new(
                penultimate,
                &[(penultimate, Activation::Relu), (2, Activation::Linear)],
                rng,
            )?,
        })
    }

    pub fn dim(&self) -> usize {
        self.head_eps.output_dim()
    }

    pub fn source_classes(&self) -> usize {
        self.head_cas.output_dim()
    }

    pub fn zero_grads(&self) -> PredictorGrads {
        PredictorGrads {
            trunk_in: GradientSet::zeros_like(&self.trunk_in),
            temb_proj: GradientSet::zeros_like(&self.temb_proj),
            trunk_out: GradientSet::zeros_like(&self.trunk_out),
            head_eps: GradientSet::zeros_like(&self.head_eps),
            head_cas: GradientSet::zeros_like(&self.head_cas),
            head_adv_a: GradientSet::zeros_like(&self.head_adv_a),
            head_adv_u: GradientSet::zeros_like(&self.head_adv_u),
        }
    }

    fn penultimate(&self, x_t: &Vector, t: usize) -> Result<(Vector, Vector, Tape, Tape, Tape)> {
        ensure_dim("predictor input", self.dim(), x_t.len())?;
        let temb = temporal_embed(t, &self.temb)?;
        let input = ndarray::concatenate(ndarray::Axis(0), &[x_t.view(), temb.view()])
            .expect("1-d concatenation");
        let (h1, trunk_in) = self.trunk_in.forward(&input)?;
        let (proj, temb_proj) = self.temb_proj.forward(&temb)?;
        let (pen, trunk_out) = self.trunk_out.forward(&(h1 + proj))?;
        Ok((pen, temb, trunk_in, temb_proj, trunk_out))
    }

    /// Predicts noise and head logits for `x_t` at timestep `t`.
    ///
    /// `lambda_grl` only affects [`Self::backward`]; forward outputs do not depend on it.
    pub fn predict(&self, x_t: &Vector, t: usize, lambda_grl: f64) -> Result<(PredictorOutputs, PredTape)> {
        let (pen, temb, trunk_in, temb_proj, trunk_out) = self.penultimate(x_t, t)?;
        let (eps_hat, eps) = self.head_eps.forward(&pen)?;
        let (logits_cas, cas) = self.head_cas.forward(&pen)?;
        // GRL edge: identity in the forward direction
        let (logits_adv_a, adv_a) = self.head_adv_a.forward(&pen)?;
        let (logits_adv_u, adv_u) = self.head_adv_u.forward(&pen)?;
        Ok((
            PredictorOutputs {
                eps_hat,
                logits_cas,
                logits_adv_a,
                logits_adv_u,
                penultimate: pen,
            },
            PredTape {
                temb,
                trunk_in,
                temb_proj,
                trunk_out,
                eps,
                cas,
                adv_a,
                adv_u,
                lambda_grl,
            },
        ))
    }

    /// Noise estimate only, skipping the classifier heads.
    pub fn predict_eps(&self, x_t: &Vector, t: usize) -> Result<Vector> {
        let (pen, ..) = self.penultimate(x_t, t)?;
        self.head_eps.infer(&pen)
    }

    /// Source-activity logits only.
    pub fn predict_cas(&self, x_t: &Vector, t: usize) -> Result<Vector> {
        let (pen, ..) = self.penultimate(x_t, t)?;
        self.head_cas.infer(&pen)
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx_t`.
    pub fn backward(&self, tape: &PredTape, up: &OutputGrads, grads: &mut PredictorGrads) -> Result<Vector> {
        let [s_cas, s_adv_a, s_adv_u] = up.trunk_scale.unwrap_or([1.0; 3]);
        let mut d_pen = Vector::zeros(self.trunk_out.output_dim());
        if let Some(d) = &up.eps_hat {
            let (g, dp) = self.head_eps.backward(&tape.eps, d)?;
            grads.head_eps.add_assign(&g);
            d_pen += &dp;
        }
        if let Some(d) = &up.cas {
            let (g, dp) = self.head_cas.backward(&tape.cas, d)?;
            grads.head_cas.add_assign(&g);
            d_pen.scaled_add(s_cas, &dp);
        }
        if let Some(d) = &up.adv_a {
            let (g, dp) = self.head_adv_a.backward(&tape.adv_a, d)?;
            grads.head_adv_a.add_assign(&g);
            d_pen += &grl(&(dp * s_adv_a), tape.lambda_grl);
        }
        if let Some(d) = &up.adv_u {
            let (g, dp) = self.head_adv_u.backward(&tape.adv_u, d)?;
            grads.head_adv_u.add_assign(&g);
            d_pen += &grl(&(dp * s_adv_u), tape.lambda_grl);
        }
        let (g, d_mid) = self.trunk_out.backward(&tape.trunk_out, &d_pen)?;
        grads.trunk_out.add_assign(&g);
        let (g, _) = self.temb_proj.backward(&tape.temb_proj, &d_mid)?;
        grads.temb_proj.add_assign(&g);
        let (g, d_input) = self.trunk_in.backward(&tape.trunk_in, &d_mid)?;
        grads.trunk_in.add_assign(&g);
        debug_assert_eq!(d_input.len(), self.dim() + tape.temb.len());
        Ok(d_input.slice(ndarray::s![..self.dim()]).to_owned())
    }
}

/// Runs the reverse chain from `x_T` down to an estimate of `x_0`.
pub fn denoise_trajectory<R: Rng + ?Sized>(
    x_big_t: &Vector,
    net: &PredictorNet,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vector> {
    let mut x = x_big_t.clone();
    for t in (1..=sched.timesteps).rev() {
        let eps_hat = net.predict_eps(&x, t)?;
        let eta = Vector::from_shape_simple_fn(x.len(), || StandardNormal.sample(rng));
        x = sched.reverse_step(&x, t, &eps_hat, &eta)?;
    }
    Ok(x)
}

macro_rules! predictor_fields {
    ($ty:ty) => {
        impl Parameters for $ty {
            fn collect_params(&self, out: &mut Vec<f64>) {
                self.trunk_in.collect_params(out);
                self.temb_proj.collect_params(out);
                self.trunk_out.collect_params(out);
                self.head_eps.collect_params(out);
                self.head_cas.collect_params(out);
                self.head_adv_a.collect_params(out);
                self.head_adv_u.collect_params(out);
            }

            fn assign_params(&mut self, src: &mut std::slice::Iter<'_, f64>) {
                self.trunk_in.assign_params(src);
                self.temb_proj.assign_params(src);
                self.trunk_out.assign_params(src);
                self.head_eps.assign_params(src);
                self.head_cas.assign_params(src);
                self.head_adv_a.assign_params(src);
                self.head_adv_u.assign_params(src);
            }
        }
    };
}

predictor_fields!(PredictorNet);
predictor_fields!(PredictorGrads);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{max_relative_error, numeric_gradient, softmax_xent};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64) -> PredictorNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PredictorNet::new(PredictorShape::for_dim(4, 2, 4, 10), &mut rng).unwrap()
    }

    #[test]
    fn embedding_properties() {
        let e = TemporalEmbedding::new(16, 50).unwrap();
        let a = temporal_embed(7, &e).unwrap();
        assert_eq!(a, temporal_embed(7, &e).unwrap());
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        let d = &temporal_embed(1, &e).unwrap() - &temporal_embed(50, &e).unwrap();
        assert!(d.dot(&d).sqrt() > 0.1);
        assert!(temporal_embed(0, &e).is_err());
        assert!(temporal_embed(51, &e).is_err());
        assert!(TemporalEmbedding::new(15, 50).is_err());
    }

    #[test]
    fn forward_ignores_lambda() {
        let n = net(1);
        let x = Vector::from_vec(vec![0.3, -0.2, 0.8, 0.1]);
        let (a, _) = n.predict(&x, 3, 0.0).unwrap();
        let (b, _) = n.predict(&x, 3, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_trunk_gives_constant_eps() {
        let mut n = net(2);
        for l in n.trunk_in.layers.iter_mut().chain(n.trunk_out.layers.iter_mut()) {
            l.weight.fill(0.0);
        }
        let a = n.predict_eps(&Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0]), 5).unwrap();
        let b = n.predict_eps(&Vector::from_vec(vec![-4.0, 0.0, 9.0, 0.5]), 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn timestep_changes_eps_hat() {
        let n = net(3);
        let x = Vector::from_vec(vec![0.3, -0.2, 0.8, 0.1]);
        let a = n.predict_eps(&x, 1).unwrap();
        let b = n.predict_eps(&x, 10).unwrap();
        assert!(a.iter().zip(&b).any(|(p, q)| (p - q).abs() > 1e-9));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let n = net(4);
        let x = Vector::from_vec(vec![0.3, -0.2, 0.8, 0.1]);
        let eps = Vector::from_vec(vec![0.5, 0.1, -0.3, 0.9]);
        let loss = |p: &PredictorNet| -> f64 {
            let (o, _) = p.predict(&x, 4, 1.0).unwrap();
            let r = &o.eps_hat - &eps;
            r.dot(&r) + softmax_xent(&o.logits_cas, 1).unwrap().0
        };
        let (o, tape) = n.predict(&x, 4, 1.0).unwrap();
        let up = OutputGrads {
            eps_hat: Some((&o.eps_hat - &eps) * 2.0),
            cas: Some(softmax_xent(&o.logits_cas, 1).unwrap().1),
            ..Default::default()
        };
        let mut g = n.zero_grads();
        n.backward(&tape, &up, &mut g).unwrap();
        let mut probe = n.clone();
        let numeric = numeric_gradient(&n.to_flat(), 1e-5, |p| {
            probe.set_flat(p);
            loss(&probe)
        });
        assert!(max_relative_error(&g.to_flat(), &numeric) < 1e-4);
    }

    #[test]
    fn denoise_single_step_with_oracle_predictor() {
        // T = 1, literal schedule: the reverse mean is (x1 - eps_hat) / alpha and
        // x1 = alpha x0 + beta eps, so eps_hat = beta eps recovers x0.
        let mut n = PredictorNet::new(PredictorShape::for_dim(3, 2, 2, 1), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let eps = Vector::from_vec(vec![0.2, -0.4, 1.0]);
        n.head_eps.layers[0].weight.fill(0.0);
        n.head_eps.layers[0].bias = &eps * 0.2;
        let s = NoiseSchedule::linear(1, 0.2, 0.2, false).unwrap();
        let x0 = Vector::from_vec(vec![1.0, 2.0, -3.0]);
        let x1 = s.forward_step(&x0, 1, &eps).unwrap();
        let rec = denoise_trajectory(&x1, &n, &s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (a, b) in rec.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn denoise_is_reproducible_and_finite() {
        let n = net(6);
        let s = NoiseSchedule::linear(10, 1e-4, 0.02, false).unwrap();
        let x = Vector::from_vec(vec![0.3, -0.2, 0.8, 0.1]);
        let a = denoise_trajectory(&x, &n, &s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = denoise_trajectory(&x, &n, &s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }
}
