//! Class-conditioned noise generator.
//!
//! The generator maps a feature vector to a diagonal Gaussian whose mean is
//! shifted by learned activity and user embeddings,
//! `mean = gamma_a * e_a[c_a] + gamma_u * e_u[c_u] + residual(x0)`.
//! Noise drawn from it is what the forward process adds to the features, and
//! two classifier heads on that noise keep the label information recoverable.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::nn::{Activation, DenseNet, GradientSet, Layer, Matrix, Parameters, Tape, Vector};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEmbedding {
    /// One row per activity class, source classes first, then target pseudo-classes.
    pub activity_table: Matrix,
    /// Row 0 is the source user, row 1 the target user.
    pub user_table: Matrix,
    pub gamma_a: f64,
    pub gamma_u: f64,
}

impl LabelEmbedding {
    /// Orthonormal rows (as far as the dimension allows), activity rows first.
    pub fn orthogonal<R: Rng + ?Sized>(
        activity_classes: usize,
        dim: usize,
        gamma_a: f64,
        gamma_u: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if gamma_a < 0.0 || gamma_u < 0.0 {
            return Err(Error::InvalidArgument("label gammas must be non-negative".into()));
        }
        let rows = random_orthonormal_rows(activity_classes + 2, dim, rng);
        let activity_table = rows.slice(ndarray::s![..activity_classes, ..]).to_owned();
        let user_table = rows.slice(ndarray::s![activity_classes.., ..]).to_owned();
        Ok(LabelEmbedding {
            activity_table,
            user_table,
            gamma_a,
            gamma_u,
        })
    }

    pub fn dim(&self) -> usize {
        self.activity_table.ncols()
    }

    pub fn activity_classes(&self) -> usize {
        self.activity_table.nrows()
    }
}

/// Gram-Schmidt on Gaussian rows; rows beyond `dim` are plain random unit vectors.
fn random_orthonormal_rows<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Matrix {
    let mut out = Matrix::zeros((n, dim));
    for i in 0..n {
        loop {
            let mut v = Vector::from_shape_simple_fn(dim, || StandardNormal.sample(rng));
            if i < dim {
                for j in 0..i {
                    let prev = out.row(j);
                    let proj = prev.dot(&v);
                    v.scaled_add(-proj, &prev);
                }
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-6 {
                out.row_mut(i).assign(&(v / norm));
                break;
            }
        }
    }
    out
}

/// `gamma_a * activity_table[c_a] + gamma_u * user_table[c_u]`.
pub fn label_shift(c_a: usize, c_u: usize, emb: &LabelEmbedding) -> Result<Vector> {
    if c_a >= emb.activity_table.nrows() {
        return Err(Error::OutOfRange {
            what: "activity label",
            value: c_a as i64,
            lo: 0,
            hi: emb.activity_table.nrows() as i64 - 1,
        });
    }
    if c_u >= emb.user_table.nrows() {
        return Err(Error::OutOfRange {
            what: "domain label",
            value: c_u as i64,
            lo: 0,
            hi: emb.user_table.nrows() as i64 - 1,
        });
    }
    Ok(&emb.activity_table.row(c_a) * emb.gamma_a + &emb.user_table.row(c_u) * emb.gamma_u)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondGaussian {
    pub mean: Vector,
    pub log_var: Vector,
}

impl CondGaussian {
    pub fn std(&self) -> Vector {
        self.log_var.mapv(|lv| (0.5 * lv).exp())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseGenerator {
    pub trunk: DenseNet,
    /// Residual added to the label shift; zero-initialised.
    pub mean_head: DenseNet,
    pub log_var_head: DenseNet,
    pub embedding: LabelEmbedding,
    /// Forces `log_var = 0`, i.e. unit-covariance noise around the shifted mean.
    pub fixed_unit_var: bool,
}

/// Tape for one [`NoiseGenerator::params`] call.
#[derive(Clone, Debug)]
pub struct GenTape {
    trunk: Tape,
    mean: Tape,
    log_var: Option<(Tape, Vector)>,
    c_a: usize,
    c_u: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorGrads {
    pub trunk: GradientSet,
    pub mean_head: GradientSet,
    pub log_var_head: GradientSet,
    pub activity_table: Matrix,
    pub user_table: Matrix,
}

impl NoiseGenerator {
    /// Trunk `D -> W (linear) -> W (relu) -> W (linear)`, then mean and
    /// log-variance heads back to `D`.
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        width: usize,
        embedding: LabelEmbedding,
        fixed_unit_var: bool,
        rng: &mut R,
    ) -> Result<Self> {
        ensure_dim("label embedding", dim, embedding.dim())?;
        let trunk = DenseNet::new(
            dim,
            &[
                (width, Activation::Linear),
                (width, Activation::Relu),
                (width, Activation::Linear),
            ],
            rng,
        )?;
        let mean_head = DenseNet::from_layers(vec![Layer::zeros(width, dim, Activation::Linear)])?;
        let log_var_head = DenseNet::new(width, &[(dim, Activation::Linear)], rng)?;
        Ok(NoiseGenerator {
            trunk,
            mean_head,
            log_var_head,
            embedding,
            fixed_unit_var,
        })
    }

    pub fn dim(&self) -> usize {
        self.embedding.dim()
    }

    pub fn params(&self, x0: &Vector, c_a: usize, c_u: usize) -> Result<(CondGaussian, GenTape)> {
        let shift = label_shift(c_a, c_u, &self.embedding)?;
        let (h, trunk) = self.trunk.forward(x0)?;
        let (residual, mean_tape) = self.mean_head.forward(&h)?;
        let (log_var, lv_tape) = if self.fixed_unit_var {
            (Vector::zeros(self.dim()), None)
        } else {
            let (raw, tape) = self.log_var_head.forward(&h)?;
            (raw.mapv(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)), Some((tape, raw)))
        };
        let g = CondGaussian {
            mean: shift + residual,
            log_var,
        };
        Ok((
            g,
            GenTape {
                trunk,
                mean: mean_tape,
                log_var: lv_tape,
                c_a,
                c_u,
            },
        ))
    }

    pub fn zero_grads(&self) -> GeneratorGrads {
        GeneratorGrads {
            trunk: GradientSet::zeros_like(&self.trunk),
            mean_head: GradientSet::zeros_like(&self.mean_head),
            log_var_head: GradientSet::zeros_like(&self.log_var_head),
            activity_table: Matrix::zeros(self.embedding.activity_table.raw_dim()),
            user_table: Matrix::zeros(self.embedding.user_table.raw_dim()),
        }
    }

    /// Accumulates gradients for upstream `dL/dmean` and `dL/dlog_var`.
    pub fn backward(
        &self,
        tape: &GenTape,
        d_mean: &Vector,
        d_log_var: &Vector,
        grads: &mut GeneratorGrads,
    ) -> Result<()> {
        let emb = &self.embedding;
        grads
            .activity_table
            .row_mut(tape.c_a)
            .scaled_add(emb.gamma_a, d_mean);
        grads.user_table.row_mut(tape.c_u).scaled_add(emb.gamma_u, d_mean);

        let (gm, mut dh) = self.mean_head.backward(&tape.mean, d_mean)?;
        grads.mean_head.add_assign(&gm);
        if let Some((lv_tape, raw)) = &tape.log_var {
            let mut d_raw = d_log_var.clone();
            for (d, &r) in d_raw.iter_mut().zip(raw) {
                if !(LOG_VAR_MIN..=LOG_VAR_MAX).contains(&r) {
                    *d = 0.0;
                }
            }
            let (gl, dh_lv) = self.log_var_head.backward(lv_tape, &d_raw)?;
            grads.log_var_head.add_assign(&gl);
            dh += &dh_lv;
        }
        let (gt, _) = self.trunk.backward(&tape.trunk, &dh)?;
        grads.trunk.add_assign(&gt);
        Ok(())
    }
}

/// Reparameterised draw `mean + exp(log_var / 2) * z` for a given standard-normal `z`.
pub fn reparameterize(g: &CondGaussian, z: &Vector) -> Result<Vector> {
    ensure_dim("standard normal draw", g.mean.len(), z.len())?;
    Ok(&g.mean + &(g.std() * z))
}

pub fn sample_noise<R: Rng + ?Sized>(g: &CondGaussian, rng: &mut R) -> Vector {
    let z = Vector::from_shape_simple_fn(g.mean.len(), || StandardNormal.sample(rng));
    reparameterize(g, &z).expect("z drawn with matching dimension")
}

/// Activity and domain classifiers applied to generated noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseHeads {
    pub activity: DenseNet,
    pub domain: DenseNet,
}

impl NoiseHeads {
    pub fn new<R: Rng + ?Sized>(dim: usize, activity_classes: usize, rng: &mut R) -> Result<Self> {
        Ok(NoiseHeads {
            activity: DenseNet::new(dim, &[(activity_classes, Activation::Linear)], rng)?,
            domain: DenseNet::new(dim, &[(2, Activation::Linear)], rng)?,
        })
    }
}

/// Activity and domain logits for a noise sample.
pub fn forward_heads(eps: &Vector, act_head: &DenseNet, dom_head: &DenseNet) -> Result<(Vector, Vector)> {
    Ok((act_head.infer(eps)?, dom_head.infer(eps)?))
}

impl Parameters for LabelEmbedding {
    fn collect_params(&self, out: &mut Vec<f64>) {
        out.extend(self.activity_table.iter());
        out.extend(self.user_table.iter());
    }

    fn assign_params(&mut self, src: &mut std::slice::Iter<'_, f64>) {
        for w in self.activity_table.iter_mut().chain(self.user_table.iter_mut()) {
            *w = *src.next().expect("parameter vector too short");
        }
    }
}

impl Parameters for NoiseGenerator {
    fn collect_params(&self, out: &mut Vec<f64>) {
        self.trunk.collect_params(out);
        self.mean_head.collect_params(out);
        self.log_var_head.collect_params(out);
        self.embedding.collect_params(out);
    }

    fn assign_params(&mut self, src: &mut std::slice::Iter<'_, f64>) {
        self.trunk.assign_params(src);
        self.mean_head.assign_params(src);
        self.log_var_head.assign_params(src);
        self.embedding.assign_params(src);
    }
}

impl Parameters for GeneratorGrads {
    fn collect_params(&self, out: &mut Vec<f64>) {
        self.trunk.collect_params(out);
        self.mean_head.collect_params(out);
        self.log_var_head.collect_params(out);
        out.extend(self.activity_table.iter());
        out.extend(self.user_table.iter());
    }

    fn assign_params(&mut self, src: &mut std::slice::Iter<'_, f64>) {
        self.trunk.assign_params(src);
        self.mean_head.assign_params(src);
        self.log_var_head.assign_params(src);
        for w in self.activity_table.iter_mut().chain(self.user_table.iter_mut()) {
            *w = *src.next().expect("gradient vector too short");
        }
    }
}

impl Parameters for NoiseHeads {
    fn collect_params(&self, out: &mut Vec<f64>) {
        self.activity.collect_params(out);
        self.domain.collect_params(out);
    }

    fn assign_params(&mut self, src: &mut std::slice::Iter<'_, f64>) {
        self.activity.assign_params(src);
        self.domain.assign_params(src);
    }
}
