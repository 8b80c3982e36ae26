//! Streaming class-conditional feature statistics, teacher snapshots,
//! logit distillation and Gaussian pseudo-feature replay.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Floor applied to per-dimension variances before sampling.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Per-class count, mean and sum of squared deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub counts: Vec<u64>,
    /// `C × D`
    pub means: Tensor,
    /// `C × D`
    pub sq_dev: Tensor,
}

impl ClassStats {
    pub fn new(classes: usize, dim: usize) -> Self {
        Self {
            counts: vec![0; classes],
            means: Tensor::zeros(&[classes, dim]),
            sq_dev: Tensor::zeros(&[classes, dim]),
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    /// One Welford step for class `class`.
    pub fn update(&mut self, f: &[f64], class: usize) -> Result<()> {
        if class >= self.classes() {
            return Err(Error::Index {
                index: class,
                len: self.classes(),
            });
        }
        if f.len() != self.dim() {
            return dim_err(format!("feature length {} vs stats dim {}", f.len(), self.dim()));
        }
        if f.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature passed to class statistics".into()));
        }
        self.counts[class] += 1;
        let n = self.counts[class] as f64;
        let mu = self.means.row_mut(class);
        let q = self.sq_dev.row_mut(class);
        for ((m, s), &x) in mu.iter_mut().zip(q.iter_mut()).zip(f) {
            let delta = x - *m;
            *m += delta / n;
            *s += delta * (x - *m);
        }
        Ok(())
    }

    /// Welford over every row of `features`.
    pub fn update_batch(&mut self, features: &Tensor, classes: &[usize]) -> Result<()> {
        if features.rows() != classes.len() {
            return dim_err(format!("{} features vs {} labels", features.rows(), classes.len()));
        }
        for (r, &c) in classes.iter().enumerate() {
            self.update(features.row(r), c)?;
        }
        Ok(())
    }

    /// Unbiased variance of class `class`, clamped at zero; `None` when
    /// fewer than two samples were seen.
    pub fn variance(&self, class: usize) -> Option<Vec<f64>> {
        let n = self.counts[class];
        (n >= 2).then(|| {
            self.sq_dev
                .row(class)
                .iter()
                .map(|q| q.max(0.0) / (n - 1) as f64)
                .collect()
        })
    }

    /// Classes with at least two samples.
    pub fn eligible(&self) -> Vec<usize> {
        (0..self.classes()).filter(|&c| self.counts[c] >= 2).collect()
    }
}

/// Free-function form of [`ClassStats::update`].
pub fn welford_update(stats: &mut ClassStats, f: &[f64], class: usize) -> Result<()> {
    stats.update(f, class)
}

/// Parallel combination of two statistic sets.
pub fn merge_stats(a: &ClassStats, b: &ClassStats) -> Result<ClassStats> {
    if a.classes() != b.classes() || a.dim() != b.dim() {
        return dim_err(format!(
            "merge {}×{} with {}×{}",
            a.classes(),
            a.dim(),
            b.classes(),
            b.dim()
        ));
    }
    let mut out = a.clone();
    for c in 0..a.classes() {
        let (na, nb) = (a.counts[c], b.counts[c]);
        if nb == 0 {
            continue;
        }
        if na == 0 {
            out.counts[c] = nb;
            out.means.row_mut(c).copy_from_slice(b.means.row(c));
            out.sq_dev.row_mut(c).copy_from_slice(b.sq_dev.row(c));
            continue;
        }
        let n = (na + nb) as f64;
        let (fa, fb) = (na as f64, nb as f64);
        out.counts[c] = na + nb;
        for j in 0..a.dim() {
            let (ma, mb) = (a.means.at(c, j), b.means.at(c, j));
            let delta = mb - ma;
            out.means.row_mut(c)[j] = (fa * ma + fb * mb) / n;
            out.sq_dev.row_mut(c)[j] = a.sq_dev.at(c, j) + b.sq_dev.at(c, j) + delta * delta * fa * fb / n;
        }
    }
    Ok(out)
}

/// Draws `count` pseudo-features: a class uniformly among those with at
/// least two samples, then `μ + ε ⊙ σ` with `ε ~ N(0, I)`.
pub fn sample_pseudo<R: Rng + ?Sized>(stats: &ClassStats, count: usize, rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
    let eligible = stats.eligible();
    if eligible.is_empty() {
        return Err(Error::Contract("no class has enough samples for pseudo replay".into()));
    }
    let sigmas: Vec<Vec<f64>> = eligible
        .iter()
        .map(|&c| {
            let var = stats.variance(c).expect("eligible class");
            var.into_iter().map(|v| v.max(VARIANCE_FLOOR).sqrt()).collect()
        })
        .collect();
    let d = stats.dim();
    let mut data = Vec::with_capacity(count * d);
    let mut classes = Vec::with_capacity(count);
    for _ in 0..count {
        let k = rng.random_range(0..eligible.len());
        let c = eligible[k];
        classes.push(c);
        for (m, s) in stats.means.row(c).iter().zip(&sigmas[k]) {
            let e: f64 = rng.sample(StandardNormal);
            data.push(m + e * s);
        }
    }
    Ok((Tensor::matrix(count, d, data)?, classes))
}

/// Linear classifier `z = f·Wᵀ + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    /// `C × D`
    pub weight: Tensor,
    pub bias: Tensor,
    pub frozen: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl ClassifierHead {
    pub fn random<R: Rng + ?Sized>(classes: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[classes, dim], 1.0 / (dim as f64).sqrt(), rng),
            bias: Tensor::zeros(&[classes]),
            frozen: false,
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    /// Frozen heads always enter as constants.
    pub fn vars<'t>(&self, tape: &'t Tape) -> HeadVars<'t> {
        let leaf = |t: &Tensor| if self.frozen { tape.constant(t) } else { tape.param(t) };
        HeadVars {
            weight: leaf(&self.weight),
            bias: leaf(&self.bias),
        }
    }

    /// Untracked logits for `B × D` features.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let z = crate::numerics::matmul(features, &self.weight.transpose())?;
        let c = self.classes();
        Tensor::new(
            z.shape().to_vec(),
            z.data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + self.bias.data()[i % c])
                .collect(),
        )
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let z = self.logits(features)?;
        Ok((0..z.rows()).map(|r| argmax(z.row(r))).collect())
    }
}

impl<'t> HeadVars<'t> {
    pub fn forward(&self, features: Var<'t>) -> Var<'t> {
        features.matmul(self.weight.t()).add_row(self.bias)
    }
}

/// First index of the largest entry.
pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &x)| if x > best.1 { (i, x) } else { best },
        )
        .0
}

/// Frozen deep copy of a head.
pub fn snapshot_teacher(student: &ClassifierHead) -> ClassifierHead {
    ClassifierHead {
        frozen: true,
        ..student.clone()
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "distillation temperature must be positive, got {t}"
        )))
    }
}

/// `mean_b KL(softmax(z_t/T) ‖ softmax(z_s/T)) · T²` with both heads fed
/// the same detached features. Only the student receives gradients.
fn distill<'t>(features: Var<'t>, teacher: &ClassifierHead, student: &HeadVars<'t>, t: f64) -> Result<Var<'t>> {
    check_temperature(t)?;
    let tape = features.tape();
    let f = features.detach();
    let zt = teacher.logits(&f.value())?.map(|x| x / t);
    let pt = crate::numerics::softmax(&zt, 1)?;
    let b = pt.rows() as f64;
    let entropy_term: f64 = pt.data().iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum();
    let log_ps = student.forward(f).scale(1.0 / t).log_softmax_rows();
    let cross = (tape.constant_owned(pt) * log_ps).sum();
    Ok(cross.scale(-1.0).add_const(entropy_term).scale(t * t / b))
}

/// Real-feature distillation between the frozen teacher and the student.
pub fn real_kd_loss<'t>(f_real: Var<'t>, teacher: &ClassifierHead, student: &HeadVars<'t>, t: f64) -> Result<Var<'t>> {
    distill(f_real, teacher, student, t)
}

/// Distillation on replayed pseudo-features.
pub fn pseudo_kd_loss<'t>(
    f_tilde: Var<'t>,
    teacher: &ClassifierHead,
    student: &HeadVars<'t>,
    t: f64,
) -> Result<Var<'t>> {
    distill(f_tilde, teacher, student, t)
}
