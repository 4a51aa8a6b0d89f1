use serde::{Deserialize, Serialize};

use super::{GpPosterior, PARAM_NAMES};
use crate::error::{Error, Result};

/// Effective sample size, or a flag for a chain with no variation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Ess {
    Value(f64),
    Degenerate,
}

/// First half against second half of the kept chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitComparison {
    pub mean_first: f64,
    pub mean_second: f64,
    pub var_first: f64,
    pub var_second: f64,
    /// Potential scale reduction treating the halves as two chains.
    pub rhat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// Autocorrelation at lags `1..=acf.len()`.
    pub acf: Vec<f64>,
    pub split: SplitComparison,
    pub ess: Ess,
    /// Batch-means Monte Carlo standard error of the mean.
    pub mcse: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, v)
}

fn autocorr(x: &[f64], mean: f64, gamma0: f64, lag: usize) -> f64 {
    let n = x.len();
    if lag >= n || gamma0 == 0.0 {
        return 0.0;
    }
    let s: f64 = (0..n - lag).map(|i| (x[i] - mean) * (x[i + lag] - mean)).sum();
    s / n as f64 / gamma0
}

/// Geyer's initial positive sequence: sums adjacent autocorrelation pairs
/// while they stay positive.
fn ess(x: &[f64], mean: f64, gamma0: f64) -> Ess {
    if gamma0 <= 0.0 {
        return Ess::Degenerate;
    }
    let n = x.len();
    let mut tau = -1.0;
    let mut m = 0;
    while 2 * m + 1 < n {
        let pair = autocorr(x, mean, gamma0, 2 * m) + autocorr(x, mean, gamma0, 2 * m + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        m += 1;
    }
    Ess::Value(n as f64 / tau.max(1.0 / n as f64))
}

fn batch_means_mcse(x: &[f64]) -> f64 {
    let n = x.len();
    let b = (n as f64).sqrt().floor().max(1.0) as usize;
    let nb = n / b;
    if nb < 2 {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..nb).map(|k| x[k * b..(k + 1) * b].iter().sum::<f64>() / b as f64).collect();
    let (_, v) = mean_var(&means);
    (v * nb as f64 / (nb - 1) as f64 / nb as f64).sqrt()
}

/// Diagnostics for one scalar chain, with autocorrelations up to `max_lag`.
pub fn chain_diagnostics(chain: &[f64], max_lag: usize) -> Result<ChainDiagnostics> {
    if chain.len() < 4 {
        return Err(Error::invalid("chain too short for diagnostics"));
    }
    let (mean, var) = mean_var(chain);
    let acf = (1..=max_lag).map(|k| autocorr(chain, mean, var, k)).collect();
    let half = chain.len() / 2;
    let (a, b) = (&chain[..half], &chain[chain.len() - half..]);
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let h = half as f64;
    let w = 0.5 * (va + vb) * h / (h - 1.0);
    let grand = 0.5 * (ma + mb);
    let between = h * ((ma - grand).powi(2) + (mb - grand).powi(2));
    let rhat = if w > 0.0 {
        (((h - 1.0) / h * w + between / h) / w).sqrt()
    } else {
        f64::NAN
    };
    Ok(ChainDiagnostics {
        name: String::new(),
        mean,
        sd: var.sqrt(),
        acf,
        split: SplitComparison {
            mean_first: ma,
            mean_second: mb,
            var_first: va,
            var_second: vb,
            rhat,
        },
        ess: ess(chain, mean, var),
        mcse: batch_means_mcse(chain),
    })
}

/// Diagnostics for every regression coefficient and variance. Needs at
/// least 100 kept samples.
pub fn diagnostics(post: &GpPosterior) -> Result<Vec<ChainDiagnostics>> {
    if post.samples.len() < 100 {
        return Err(Error::invalid(format!(
            "diagnostics need at least 100 kept samples, have {}",
            post.samples.len()
        )));
    }
    PARAM_NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let mut d = chain_diagnostics(&post.chain(k), 50)?;
            d.name = name.to_string();
            Ok(d)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn iid_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..4000).map(|_| rng.sample(StandardNormal)).collect();
        let d = chain_diagnostics(&x, 10).unwrap();
        assert!(d.acf[0].abs() < 0.1);
        assert!((d.split.rhat - 1.0).abs() < 0.01);
        match d.ess {
            Ess::Value(e) => assert!(e > 3000.0, "{e}"),
            Ess::Degenerate => panic!(),
        }
        assert!((d.mcse - 1.0 / 4000f64.sqrt()).abs() < 0.01);
    }

    #[test]
    fn ar1_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = vec![0.0f64];
        for _ in 1..4000 {
            let prev = *x.last().unwrap();
            x.push(0.9 * prev + rng.sample::<f64, _>(StandardNormal));
        }
        let d = chain_diagnostics(&x, 5).unwrap();
        assert!((d.acf[0] - 0.9).abs() < 0.05, "{}", d.acf[0]);
        // Integrated autocorrelation time of AR(1) is (1 + rho) / (1 - rho) = 19.
        match d.ess {
            Ess::Value(e) => assert!((e - 4000.0 / 19.0).abs() < 100.0, "{e}"),
            Ess::Degenerate => panic!(),
        }
    }

    #[test]
    fn constant_chain_is_degenerate() {
        let d = chain_diagnostics(&[2.5; 200], 3).unwrap();
        assert_eq!(d.ess, Ess::Degenerate);
        assert_eq!(d.acf, vec![0.0; 3]);
        assert!(chain_diagnostics(&[1.0], 1).is_err());
    }
}
