//! Kernel strings accepted by `--kernel`:
//!
//! ```text
//! rbf[:s1,s2,...]          Gaussian mixture over bandwidths
//! rq[:a1,a2,...]           rational-quadratic mixture over shapes
//! dot                      linear kernel
//! rq-dot[:a1,a2,...]       rational-quadratic mixture plus the linear kernel
//! dist[:beta=B]            distance-induced kernel centred at the origin
//! poly[:deg=D,gamma=G,coef=C]
//! ```
//!
//! Omitted parameters take the library defaults; `poly` defaults to the
//! KID kernel `(<x, y> / d + 1)^3`. Dimension-dependent pieces are resolved
//! once the data dimension is known.

use discrepancy::kernels::{DEFAULT_ALPHAS, DEFAULT_SIGMAS};
use discrepancy::KernelSpec;

use crate::error::CliError;
use crate::features::format_value;

#[derive(Debug, Clone, PartialEq)]
pub enum KernelArg {
    Rbf(Vec<f64>),
    Rq(Vec<f64>),
    Dot,
    RqDot(Vec<f64>),
    Dist { beta: f64 },
    Poly { degree: u32, gamma: Option<f64>, coef: f64 },
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn parse_list(family: &str, body: Option<&str>, default: &[f64]) -> Result<Vec<f64>, CliError> {
    match body {
        None => Ok(default.to_vec()),
        Some(b) => b
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| usage(format!("kernel {family}: cannot parse {t:?} as a number")))
            })
            .collect(),
    }
}

fn parse_named(family: &str, body: Option<&str>, allowed: &[&str]) -> Result<Vec<(String, String)>, CliError> {
    let Some(body) = body else { return Ok(Vec::new()) };
    body.split(',')
        .map(|kv| {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| usage(format!("kernel {family}: expected key=value, got {kv:?}")))?;
            let k = k.trim();
            if !allowed.contains(&k) {
                return Err(usage(format!("kernel {family}: unknown parameter {k:?} (allowed: {})", allowed.join(", "))));
            }
            Ok((k.to_string(), v.trim().to_string()))
        })
        .collect()
}

fn number<T: std::str::FromStr>(family: &str, key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| usage(format!("kernel {family}: cannot parse {key}={v:?}")))
}

impl KernelArg {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let (family, body) = match s.split_once(':') {
            Some((f, b)) => (f.trim(), Some(b)),
            None => (s.trim(), None),
        };
        match family {
            "rbf" => Ok(Self::Rbf(parse_list(family, body, &DEFAULT_SIGMAS)?)),
            "rq" => Ok(Self::Rq(parse_list(family, body, &DEFAULT_ALPHAS)?)),
            "rq-dot" => Ok(Self::RqDot(parse_list(family, body, &DEFAULT_ALPHAS)?)),
            "dot" => match body {
                None => Ok(Self::Dot),
                Some(_) => Err(usage("kernel dot takes no parameters")),
            },
            "dist" => {
                let mut beta = 1.0;
                for (k, v) in parse_named(family, body, &["beta"])? {
                    if k == "beta" {
                        beta = number(family, &k, &v)?;
                    }
                }
                Ok(Self::Dist { beta })
            }
            "poly" => {
                let (mut degree, mut gamma, mut coef) = (3, None, 1.0);
                for (k, v) in parse_named(family, body, &["deg", "gamma", "coef"])? {
                    match k.as_str() {
                        "deg" => degree = number(family, &k, &v)?,
                        "gamma" => gamma = Some(number(family, &k, &v)?),
                        _ => coef = number(family, &k, &v)?,
                    }
                }
                Ok(Self::Poly { degree, gamma, coef })
            }
            other => Err(usage(format!(
                "unknown kernel family {other:?} (expected rbf, rq, dot, rq-dot, dist or poly)"
            ))),
        }
    }

    /// Combines `--kernel` with the `--sigmas` / `--alphas` / `--beta`
    /// shortcuts; at most one source may be given.
    pub fn from_flags(
        kernel: Option<&str>,
        sigmas: Option<&[f64]>,
        alphas: Option<&[f64]>,
        beta: Option<f64>,
        default: &str,
    ) -> Result<Self, CliError> {
        let given = kernel.is_some() as u8 + sigmas.is_some() as u8 + alphas.is_some() as u8 + beta.is_some() as u8;
        if given > 1 {
            return Err(usage("give at most one of --kernel, --sigmas, --alphas, --beta"));
        }
        if let Some(s) = sigmas {
            return Ok(Self::Rbf(s.to_vec()));
        }
        if let Some(a) = alphas {
            return Ok(Self::Rq(a.to_vec()));
        }
        if let Some(beta) = beta {
            return Ok(Self::Dist { beta });
        }
        Self::parse(kernel.unwrap_or(default))
    }

    pub fn build(&self, dim: usize) -> Result<KernelSpec, CliError> {
        let spec = match self {
            Self::Rbf(s) => KernelSpec::rbf(s),
            Self::Rq(a) => KernelSpec::rq(a),
            Self::RqDot(a) => KernelSpec::rq_dot(a),
            Self::Dot => Ok(KernelSpec::Dot),
            Self::Dist { beta } => KernelSpec::distance(*beta, dim),
            Self::Poly { degree, gamma, coef } => {
                KernelSpec::poly(*degree, gamma.unwrap_or(1.0 / dim as f64), *coef)
            }
        };
        spec.map_err(|e| usage(format!("invalid kernel: {e}")))
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format_value(*x)).collect::<Vec<_>>().join(",")
}

/// Canonical kernel string for a resolved spec, echoed in reports.
pub fn kernel_string(spec: &KernelSpec) -> String {
    match spec {
        KernelSpec::RbfMixture { sigmas } => format!("rbf:{}", join(sigmas)),
        KernelSpec::RqMixture { alphas } => format!("rq:{}", join(alphas)),
        KernelSpec::Dot => "dot".into(),
        KernelSpec::RqDot { alphas } => format!("rq-dot:{}", join(alphas)),
        KernelSpec::Distance { beta, z0 } => {
            if z0.iter().all(|v| *v == 0.0) {
                format!("dist:beta={}", format_value(*beta))
            } else {
                format!("dist:beta={},z0=[{}]", format_value(*beta), join(z0))
            }
        }
        KernelSpec::Poly { degree, gamma, coef } => {
            format!("poly:deg={degree},gamma={},coef={}", format_value(*gamma), format_value(*coef))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar() {
        assert_eq!(KernelArg::parse("rbf:1,2").unwrap(), KernelArg::Rbf(vec![1.0, 2.0]));
        assert_eq!(KernelArg::parse("rq").unwrap(), KernelArg::Rq(DEFAULT_ALPHAS.to_vec()));
        assert_eq!(KernelArg::parse("dot").unwrap(), KernelArg::Dot);
        assert_eq!(KernelArg::parse("dist:beta=1.5").unwrap(), KernelArg::Dist { beta: 1.5 });
        assert_eq!(
            KernelArg::parse("poly:deg=2,coef=0").unwrap(),
            KernelArg::Poly { degree: 2, gamma: None, coef: 0.0 }
        );
        for bad in ["gauss", "rbf:a", "dot:1", "dist:alpha=1", "poly:deg=x", "dist:beta"] {
            assert!(matches!(KernelArg::parse(bad), Err(CliError::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn build_and_echo() {
        let k = KernelArg::parse("poly").unwrap().build(4).unwrap();
        assert_eq!(k, KernelSpec::kid(4));
        assert_eq!(kernel_string(&k), "poly:deg=3,gamma=0.25,coef=1");
        let k = KernelArg::parse("dist").unwrap().build(3).unwrap();
        assert_eq!(kernel_string(&k), "dist:beta=1");
        assert!(KernelArg::parse("dist:beta=3").unwrap().build(2).is_err());
        assert!(KernelArg::parse("rbf:-1").unwrap().build(2).is_err());
    }

    #[test]
    fn shortcut_flags() {
        let a = KernelArg::from_flags(None, Some(&[1.0]), None, None, "rq").unwrap();
        assert_eq!(a, KernelArg::Rbf(vec![1.0]));
        assert!(KernelArg::from_flags(Some("dot"), None, None, Some(1.0), "rq").is_err());
        assert_eq!(KernelArg::from_flags(None, None, None, None, "dot").unwrap(), KernelArg::Dot);
    }
}
