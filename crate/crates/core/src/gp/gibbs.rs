use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::linalg::{backward_solve_t, chol_solve, cholesky, forward_solve};
use super::{CorrelationMatrix, GpSpec};
use crate::covariates::{DesignMatrix, N_COVARIATES as P};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamSample {
    /// Kept-sample index, starting at 0 after burn-in.
    pub iter: usize,
    pub beta: [f64; P],
    pub sigma2_eps: f64,
    pub sigma2_eta: f64,
}

impl ParamSample {
    pub fn values(&self) -> [f64; 7] {
        let b = self.beta;
        [b[0], b[1], b[2], b[3], b[4], self.sigma2_eps, self.sigma2_eta]
    }
}

/// One stored draw of the latent field, hour-major `y[t * n + s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub iter: usize,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpPosterior {
    pub n_sites: usize,
    pub hours: usize,
    pub samples: Vec<ParamSample>,
    pub latent: Vec<LatentSample>,
}

impl GpPosterior {
    pub fn chain(&self, param: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s.values()[param]).collect()
    }

    pub fn beta_mean(&self) -> [f64; P] {
        let mut m = [0.0; P];
        for s in &self.samples {
            for k in 0..P {
                m[k] += s.beta[k];
            }
        }
        m.map(|v| v / self.samples.len() as f64)
    }

    /// Posterior mean of the latent field over the stored draws.
    pub fn latent_mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n_sites * self.hours];
        for l in &self.latent {
            for (a, b) in m.iter_mut().zip(&l.y) {
                *a += b;
            }
        }
        let k = self.latent.len().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= k);
        m
    }
}

fn check_inputs(spec: &GpSpec, z: &[f64], x: &DesignMatrix) -> Result<()> {
    spec.validate()?;
    let n = spec.sites.len();
    if x.n_sites != n || x.hours != spec.hours {
        return Err(Error::invalid(format!(
            "design is {} sites x {} hours but the model has {} x {}",
            x.n_sites, x.hours, n, spec.hours
        )));
    }
    if z.len() != n * spec.hours {
        return Err(Error::invalid("observation count does not match sites x hours"));
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "observation at site {} hour {} is missing or not finite; fill gaps before fitting",
            i % n,
            i / n
        )));
    }
    Ok(())
}

/// Ordinary least squares start for `beta`, with a tiny ridge so a
/// constant covariate does not stop the run.
fn ols(z: &[f64], x: &DesignMatrix) -> Result<[f64; P]> {
    let mut xtx = [0.0; P * P];
    let mut xtz = [0.0; P];
    for t in 0..x.hours {
        for s in 0..x.n_sites {
            let r = x.row(t, s);
            let zv = z[t * x.n_sites + s];
            for i in 0..P {
                xtz[i] += r[i] * zv;
                for j in 0..P {
                    xtx[i * P + j] += r[i] * r[j];
                }
            }
        }
    }
    let scale = (0..P).map(|i| xtx[i * P + i]).fold(0.0, f64::max).max(1.0);
    for i in 0..P {
        xtx[i * P + i] += 1e-10 * scale;
    }
    let l = cholesky(&xtx, P).ok_or_else(|| Error::Numerical("design cross-product is singular".into()))?;
    chol_solve(&l, P, &mut xtz);
    Ok(xtz)
}

fn draw_inverse_gamma(rng: &mut ChaCha8Rng, shape: f64, scale: f64) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / scale).map_err(|e| Error::Numerical(format!("inverse-gamma draw: {e}")))?;
    Ok(1.0 / g.sample(rng))
}

/// Runs the Gibbs sampler. `z` is hour-major `z[t * n + s]` without gaps.
///
/// Each iteration draws the latent field hour by hour, then `beta`, then the
/// two variances from their Inverse-Gamma full conditionals. Standard normals
/// for an iteration are drawn in a fixed order before the per-hour work fans
/// out, so output depends only on the seed.
pub fn gibbs_fit(spec: &GpSpec, z: &[f64], x: &DesignMatrix) -> Result<GpPosterior> {
    check_inputs(spec, z, x)?;
    let n = spec.sites.len();
    let t_len = spec.hours;
    let corr = CorrelationMatrix::exponential(&spec.sites, spec.phi)?;
    let s_inv = &corr.inverse;

    // W_t = S^-1 X_t (n x P per hour) and A = sum_t X_t^T S^-1 X_t.
    let mut w = vec![0.0; t_len * n * P];
    let mut a = [0.0; P * P];
    for t in 0..t_len {
        let xt = x.hour(t);
        let wt = &mut w[t * n * P..(t + 1) * n * P];
        for i in 0..n {
            for j in 0..n {
                let sij = s_inv[i * n + j];
                for k in 0..P {
                    wt[i * P + k] += sij * xt[j * P + k];
                }
            }
        }
        for i in 0..n {
            for k in 0..P {
                for m in 0..P {
                    a[k * P + m] += xt[i * P + k] * wt[i * P + m];
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.mcmc.seed);
    let mut beta = ols(z, x)?;
    let mut resid2 = 0.0;
    for t in 0..t_len {
        for s in 0..n {
            let fit: f64 = x.row(t, s).iter().zip(&beta).map(|(a, b)| a * b).sum();
            resid2 += (z[t * n + s] - fit).powi(2);
        }
    }
    let start_var = (resid2 / (n * t_len) as f64 / 2.0).max(1e-6);
    let mut s2_eps = spec.fixed.sigma2_eps.unwrap_or(start_var);
    let mut s2_eta = spec.fixed.sigma2_eta.unwrap_or(start_var);
    let mut y = z.to_vec();
    let mut normals = vec![0.0; n * t_len];

    let pri = spec.priors;
    let total = spec.mcmc.burn_in + spec.mcmc.keep;
    let mut samples = Vec::with_capacity(spec.mcmc.keep);
    let mut latent = Vec::new();

    for iter in 0..total {
        // (i) latent field: Q = I / s2_eps + S^-1 / s2_eta, shared by all hours.
        let mut q = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                q[i * n + j] = s_inv[i * n + j] / s2_eta;
            }
            q[i * n + i] += 1.0 / s2_eps;
        }
        let lq = cholesky(&q, n)
            .ok_or_else(|| Error::Numerical(format!("latent precision not positive definite at iteration {iter}")))?;
        for v in normals.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        y.par_chunks_mut(n)
            .zip(normals.par_chunks(n))
            .enumerate()
            .for_each(|(t, (yt, zn))| {
                let wt = &w[t * n * P..(t + 1) * n * P];
                let zt = &z[t * n..(t + 1) * n];
                for i in 0..n {
                    let m: f64 = (0..P).map(|k| wt[i * P + k] * beta[k]).sum();
                    yt[i] = zt[i] / s2_eps + m / s2_eta;
                }
                chol_solve(&lq, n, yt);
                let mut e = zn.to_vec();
                backward_solve_t(&lq, n, &mut e);
                for i in 0..n {
                    yt[i] += e[i];
                }
            });

        // (ii) beta | Y, s2_eta.
        let mut prec = [0.0; P * P];
        for k in 0..P * P {
            prec[k] = a[k] / s2_eta;
        }
        for k in 0..P {
            prec[k * P + k] += 1.0 / pri.beta_var;
        }
        let mut rhs = [0.0; P];
        for t in 0..t_len {
            let wt = &w[t * n * P..(t + 1) * n * P];
            for i in 0..n {
                let yi = y[t * n + i];
                for k in 0..P {
                    rhs[k] += wt[i * P + k] * yi;
                }
            }
        }
        rhs.iter_mut().for_each(|r| *r /= s2_eta);
        let lp = cholesky(&prec, P)
            .ok_or_else(|| Error::Numerical(format!("beta precision not positive definite at iteration {iter}")))?;
        chol_solve(&lp, P, &mut rhs);
        let mut e: [f64; P] = std::array::from_fn(|_| rng.sample(StandardNormal));
        backward_solve_t(&lp, P, &mut e);
        for k in 0..P {
            beta[k] = rhs[k] + e[k];
        }

        // (iii) measurement variance.
        if spec.fixed.sigma2_eps.is_none() {
            let sse: f64 = z.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
            s2_eps = draw_inverse_gamma(&mut rng, pri.ig_shape + (n * t_len) as f64 / 2.0, pri.ig_scale + sse / 2.0)?;
        }

        // (iv) spatial variance.
        if spec.fixed.sigma2_eta.is_none() {
            let quad: f64 = (0..t_len)
                .into_par_iter()
                .map(|t| {
                    let mut r: Vec<f64> = (0..n)
                        .map(|s| {
                            let fit: f64 = x.row(t, s).iter().zip(&beta).map(|(a, b)| a * b).sum();
                            y[t * n + s] - fit
                        })
                        .collect();
                    forward_solve(&corr.chol, n, &mut r);
                    r.iter().map(|v| v * v).sum::<f64>()
                })
                .collect::<Vec<f64>>()
                .iter()
                .sum();
            s2_eta = draw_inverse_gamma(&mut rng, pri.ig_shape + (n * t_len) as f64 / 2.0, pri.ig_scale + quad / 2.0)?;
        }

        if !(s2_eps.is_finite() && s2_eta.is_finite() && beta.iter().all(|b| b.is_finite())) {
            return Err(Error::Numerical(format!("non-finite draw at iteration {iter}")));
        }

        if iter >= spec.mcmc.burn_in {
            let k = iter - spec.mcmc.burn_in;
            samples.push(ParamSample {
                iter: k,
                beta,
                sigma2_eps: s2_eps,
                sigma2_eta: s2_eta,
            });
            if k % spec.mcmc.latent_thin == 0 {
                latent.push(LatentSample { iter: k, y: y.clone() });
            }
        }
    }

    Ok(GpPosterior {
        n_sites: n,
        hours: t_len,
        samples,
        latent,
    })
}

/// Mean, spread and shape of a set of residuals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

impl Moments {
    pub fn of(values: &[f64]) -> Moments {
        let count = values.len();
        let nf = count as f64;
        let mean = values.iter().sum::<f64>() / nf;
        let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
        for v in values {
            let d = v - mean;
            m2 += d * d;
            m3 += d * d * d;
            m4 += d * d * d * d;
        }
        m2 /= nf;
        m3 /= nf;
        m4 /= nf;
        let sd = m2.sqrt();
        let (skewness, excess_kurtosis) = if m2 > 0.0 {
            (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
        } else {
            (0.0, 0.0)
        };
        Moments {
            count,
            mean,
            sd,
            skewness,
            excess_kurtosis,
        }
    }
}

/// Residuals at both levels of the hierarchy, evaluated at posterior means:
/// `data = Z - E[Y]` and `latent = E[Y] - X E[beta]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub data: Moments,
    pub latent: Moments,
}

pub fn residual_summary(post: &GpPosterior, z: &[f64], x: &DesignMatrix) -> Result<ResidualSummary> {
    let n = post.n_sites;
    if post.latent.is_empty() || post.samples.is_empty() {
        return Err(Error::invalid("posterior has no stored samples"));
    }
    if z.len() != n * post.hours || x.n_sites != n || x.hours != post.hours {
        return Err(Error::invalid("residual inputs do not match the posterior dimensions"));
    }
    let ybar = post.latent_mean();
    let bbar = post.beta_mean();
    let data: Vec<f64> = z.iter().zip(&ybar).map(|(a, b)| a - b).collect();
    let mut lat = Vec::with_capacity(ybar.len());
    for t in 0..post.hours {
        for s in 0..n {
            let fit: f64 = x.row(t, s).iter().zip(&bbar).map(|(a, b)| a * b).sum();
            lat.push(ybar[t * n + s] - fit);
        }
    }
    Ok(ResidualSummary {
        data: Moments::of(&data),
        latent: Moments::of(&lat),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::PlanePoint;
    use crate::gp::{FixedVariances, McmcSettings, Priors};

    fn toy_design(n: usize, t_len: usize, seed: u64) -> DesignMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        for _ in 0..n * t_len {
            data.push(1.0);
            for _ in 1..P {
                data.push(rng.random_range(-1.0..1.0));
            }
        }
        DesignMatrix::from_rows(n, 0, t_len, data).unwrap()
    }

    fn spec(n: usize, t_len: usize, seed: u64) -> GpSpec {
        GpSpec {
            sites: (0..n).map(|i| PlanePoint { x: 20.0 * i as f64, y: 0.0 }).collect(),
            hours: t_len,
            phi: 0.05,
            priors: Priors::default(),
            mcmc: McmcSettings {
                burn_in: 200,
                keep: 2000,
                latent_thin: 1,
                seed,
            },
            fixed: FixedVariances::default(),
        }
    }

    #[test]
    fn same_seed_same_chain() {
        let x = toy_design(3, 10, 1);
        let z: Vec<f64> = (0..30).map(|i| (i as f64 * 0.7).sin() * 5.0 + 30.0).collect();
        let mut sp = spec(3, 10, 9);
        sp.mcmc.keep = 50;
        let a = gibbs_fit(&sp, &z, &x).unwrap();
        let b = gibbs_fit(&sp, &z, &x).unwrap();
        assert_eq!(a, b);
        sp.mcmc.seed = 10;
        assert_ne!(a.samples, gibbs_fit(&sp, &z, &x).unwrap().samples);
        assert_eq!(a.latent.len(), 50);
    }

    #[test]
    fn rejects_gaps_and_bad_shapes() {
        let x = toy_design(2, 3, 1);
        let mut z = vec![1.0; 6];
        z[4] = f64::NAN;
        let err = gibbs_fit(&spec(2, 3, 1), &z, &x).unwrap_err();
        assert!(err.is_validation(), "{err}");
        assert!(gibbs_fit(&spec(3, 3, 1), &[1.0; 9], &x).is_err());
        let mut sp = spec(2, 3, 1);
        sp.phi = 0.0;
        assert!(gibbs_fit(&sp, &[1.0; 6], &x).is_err());
    }

    /// With both variances fixed, beta's marginal posterior is Gaussian with
    /// precision `sum X^T Sigma^-1 X + I/v0`, where `Sigma = s2_eta S + s2_eps I`.
    #[test]
    fn fixed_variance_beta_matches_analytic_posterior() {
        let (n, t_len) = (2, 3);
        let x = toy_design(n, t_len, 3);
        let z = [31.0, 29.5, 33.2, 30.1, 27.9, 32.4];
        let mut sp = spec(n, t_len, 5);
        sp.mcmc.keep = 20000;
        sp.mcmc.latent_thin = 1000;
        sp.fixed = FixedVariances { sigma2_eps: Some(1.0), sigma2_eta: Some(4.0) };
        let post = gibbs_fit(&sp, &z, &x).unwrap();

        let c = (-0.05f64 * 20.0).exp();
        let sig = nalgebra::Matrix2::new(4.0 + 1.0, 4.0 * c, 4.0 * c, 4.0 + 1.0);
        let sig_inv = sig.try_inverse().unwrap();
        let mut prec = nalgebra::SMatrix::<f64, 5, 5>::identity() * 1e-10;
        let mut rhs = nalgebra::SVector::<f64, 5>::zeros();
        for t in 0..t_len {
            let xt = nalgebra::SMatrix::<f64, 2, 5>::from_row_slice(x.hour(t));
            let zt = nalgebra::Vector2::new(z[t * 2], z[t * 2 + 1]);
            prec += xt.transpose() * sig_inv * xt;
            rhs += xt.transpose() * sig_inv * zt;
        }
        let cov = prec.try_inverse().unwrap();
        let mean = cov * rhs;
        let bm = post.beta_mean();
        for k in 0..P {
            let chain = post.chain(k);
            let sd = cov[(k, k)].sqrt();
            let mcse = crate::gp::chain_diagnostics(&chain, 50).unwrap().mcse;
            assert!((bm[k] - mean[k]).abs() < 4.0 * mcse, "beta{k}: {} vs {} (mcse {mcse})", bm[k], mean[k]);
            let var = chain.iter().map(|v| (v - bm[k]).powi(2)).sum::<f64>() / chain.len() as f64;
            assert!((var.sqrt() / sd - 1.0).abs() < 0.1, "beta{k} sd {} vs {sd}", var.sqrt());
        }
    }

    #[test]
    fn recovers_parameters_on_simulated_field() {
        let (n, t_len) = (6, 200);
        let x = toy_design(n, t_len, 8);
        let sp0 = spec(n, t_len, 11);
        let corr = CorrelationMatrix::exponential(&sp0.sites, sp0.phi).unwrap();
        let beta = [35.0, 4.0, -2.0, 1.0, 0.5];
        let (s2e, s2n): (f64, f64) = (2.0, 9.0);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut z = Vec::new();
        for t in 0..t_len {
            let e: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            for s in 0..n {
                let eta: f64 = (0..=s).map(|k| corr.chol[s * n + k] * e[k]).sum::<f64>() * s2n.sqrt();
                let mean: f64 = x.row(t, s).iter().zip(&beta).map(|(a, b)| a * b).sum();
                let eps: f64 = rng.sample::<f64, _>(StandardNormal) * s2e.sqrt();
                z.push(mean + eta + eps);
            }
        }
        let post = gibbs_fit(&sp0, &z, &x).unwrap();
        let bm = post.beta_mean();
        for k in 0..P {
            assert!((bm[k] - beta[k]).abs() < 1.0, "beta{k} {}", bm[k]);
        }
        let m = |c: Vec<f64>| c.iter().sum::<f64>() / c.len() as f64;
        assert!((m(post.chain(5)) - s2e).abs() < 1.0);
        assert!((m(post.chain(6)) - s2n).abs() < 2.5);
        let r = residual_summary(&post, &z, &x).unwrap();
        assert!(r.data.mean.abs() < 0.2 && r.latent.mean.abs() < 0.5);
        assert!(r.latent.sd > r.data.sd);
    }

    #[test]
    fn moments_of_known_values() {
        let m = Moments::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.sd - 1.25f64.sqrt()).abs() < 1e-15);
        assert!(m.skewness.abs() < 1e-15);
        assert_eq!(Moments::of(&[3.0, 3.0]).sd, 0.0);
    }
}
