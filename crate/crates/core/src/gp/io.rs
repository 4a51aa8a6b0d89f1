use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GpPosterior, LatentSample, ParamSample, Priors, PARAM_NAMES};
use crate::error::{Error, Result};

const LATENT_MAGIC: &[u8; 8] = b"MXLAT001";

/// Settings recorded alongside the posterior draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorMeta {
    pub seed: u64,
    pub phi: f64,
    pub priors: Priors,
    pub burn_in: usize,
    pub keep: usize,
    pub latent_thin: usize,
}

/// Writes parameter draws to `params` (CSV with `#` metadata lines) and the
/// stored latent draws to `latent` (little-endian binary).
pub fn write_posterior(params: &Path, latent: &Path, post: &GpPosterior, meta: &PosteriorMeta) -> Result<()> {
    let f = File::create(params).map_err(|e| Error::io(params, e))?;
    let mut w = BufWriter::new(f);
    let header = format!(
        "# seed={}\n# phi={}\n# prior_beta_var={}\n# prior_ig_shape={}\n# prior_ig_scale={}\n# burn_in={}\n# keep={}\n# latent_thin={}\n# n_sites={}\n# hours={}\niter,{}\n",
        meta.seed,
        meta.phi,
        meta.priors.beta_var,
        meta.priors.ig_shape,
        meta.priors.ig_scale,
        meta.burn_in,
        meta.keep,
        meta.latent_thin,
        post.n_sites,
        post.hours,
        PARAM_NAMES.join(",")
    );
    let mut body = header;
    for s in &post.samples {
        body.push_str(&s.iter.to_string());
        for v in s.values() {
            body.push(',');
            body.push_str(&v.to_string());
        }
        body.push('\n');
    }
    w.write_all(body.as_bytes()).map_err(|e| Error::io(params, e))?;
    w.flush().map_err(|e| Error::io(params, e))?;

    let f = File::create(latent).map_err(|e| Error::io(latent, e))?;
    let mut w = BufWriter::new(f);
    let mut buf = Vec::with_capacity(32 + post.n_sites * post.hours * 8);
    buf.extend_from_slice(LATENT_MAGIC);
    for v in [post.n_sites, post.hours, post.latent.len()] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(latent, e))?;
    for l in &post.latent {
        buf.clear();
        buf.extend_from_slice(&(l.iter as u64).to_le_bytes());
        for v in &l.y {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::io(latent, e))?;
    }
    w.flush().map_err(|e| Error::io(latent, e))
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads a posterior written by [`write_posterior`].
pub fn read_posterior(params: &Path, latent: &Path) -> Result<(GpPosterior, PosteriorMeta)> {
    let f = File::open(params).map_err(|e| Error::io(params, e))?;
    let mut kv = std::collections::HashMap::new();
    let mut samples = Vec::new();
    let mut header_seen = false;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(params, e))?;
        let lineno = i as u64 + 1;
        if let Some(rest) = line.strip_prefix('#') {
            let (k, v) = rest
                .trim()
                .split_once('=')
                .ok_or_else(|| parse_err(params, lineno, "metadata line without `=`"))?;
            kv.insert(k.to_string(), v.to_string());
            continue;
        }
        if !header_seen {
            let expected = format!("iter,{}", PARAM_NAMES.join(","));
            if line.trim() != expected {
                return Err(Error::Schema {
                    path: params.to_path_buf(),
                    expected,
                    found: line,
                });
            }
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(parse_err(params, lineno, format!("expected 8 fields, found {}", fields.len())));
        }
        let iter: usize = fields[0].parse().map_err(|_| parse_err(params, lineno, "bad iter"))?;
        let mut v = [0.0; 7];
        for k in 0..7 {
            v[k] = fields[k + 1]
                .parse()
                .map_err(|_| parse_err(params, lineno, format!("bad value for {}", PARAM_NAMES[k])))?;
        }
        samples.push(ParamSample {
            iter,
            beta: [v[0], v[1], v[2], v[3], v[4]],
            sigma2_eps: v[5],
            sigma2_eta: v[6],
        });
    }
    let get = |k: &str| -> Result<&String> {
        kv.get(k).ok_or_else(|| Error::invalid(format!("{} lacks metadata `{k}`", params.display())))
    };
    let num = |k: &str| -> Result<f64> {
        get(k)?.parse::<f64>().map_err(|_| Error::invalid(format!("bad metadata `{k}`")))
    };
    let int = |k: &str| -> Result<u64> {
        get(k)?.parse::<u64>().map_err(|_| Error::invalid(format!("bad metadata `{k}`")))
    };
    let meta = PosteriorMeta {
        seed: int("seed")?,
        phi: num("phi")?,
        priors: Priors {
            beta_var: num("prior_beta_var")?,
            ig_shape: num("prior_ig_shape")?,
            ig_scale: num("prior_ig_scale")?,
        },
        burn_in: int("burn_in")? as usize,
        keep: int("keep")? as usize,
        latent_thin: int("latent_thin")? as usize,
    };
    let n_sites = int("n_sites")? as usize;
    let hours = int("hours")? as usize;

    let f = File::open(latent).map_err(|e| Error::io(latent, e))?;
    let mut r = BufReader::new(f);
    let mut head = [0u8; 32];
    r.read_exact(&mut head).map_err(|e| Error::io(latent, e))?;
    if &head[..8] != LATENT_MAGIC {
        return Err(Error::invalid(format!("{} is not a latent draw file", latent.display())));
    }
    let word = |i: usize| u64::from_le_bytes(head[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize;
    if word(0) != n_sites || word(1) != hours {
        return Err(Error::invalid("latent draw dimensions do not match the parameter file"));
    }
    let count = word(2);
    let mut latent_draws = Vec::with_capacity(count);
    let mut buf = vec![0u8; 8 + n_sites * hours * 8];
    for _ in 0..count {
        r.read_exact(&mut buf).map_err(|e| Error::io(latent, e))?;
        let iter = u64::from_le_bytes(buf[..8].try_into().unwrap()) as usize;
        let y = buf[8..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        latent_draws.push(LatentSample { iter, y });
    }
    Ok((
        GpPosterior {
            n_sites,
            hours,
            samples,
            latent: latent_draws,
        },
        meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let post = GpPosterior {
            n_sites: 2,
            hours: 3,
            samples: (0..4)
                .map(|i| ParamSample {
                    iter: i,
                    beta: [1.0 / 3.0, -2.5e-7, 3.0, 4.0 + i as f64, 0.1],
                    sigma2_eps: 0.7,
                    sigma2_eta: 12.0 / 7.0,
                })
                .collect(),
            latent: vec![LatentSample { iter: 0, y: vec![0.1, 0.2, 0.3, -1.0, 1e-300, 7.0] }],
        };
        let meta = PosteriorMeta {
            seed: 9,
            phi: 0.018642,
            priors: Priors::default(),
            burn_in: 10,
            keep: 4,
            latent_thin: 5,
        };
        let dir = tempfile::tempdir().unwrap();
        let (p, l) = (dir.path().join("posterior.csv"), dir.path().join("latent.bin"));
        write_posterior(&p, &l, &post, &meta).unwrap();
        let (back, m) = read_posterior(&p, &l).unwrap();
        assert_eq!(back, post);
        assert_eq!(m, meta);
        std::fs::write(&p, "# seed=1\nwrong\n").unwrap();
        assert!(matches!(read_posterior(&p, &l), Err(Error::Schema { .. })));
    }
}
